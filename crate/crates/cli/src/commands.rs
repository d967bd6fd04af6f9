//! Subcommand bodies. Each returns the manifest it wrote; failed checks are
//! listed in the manifest rather than raised as errors.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use qsd_core::analytics::{alpha_flow, alpha_of, trajectory_invariants, InvariantSummary};
use qsd_core::estimation::{estimate_eta, LikelihoodResult};
use qsd_core::io::{
    grid_to_csv, means_to_csv, read_record, record_to_binary, record_to_csv, trajectory_rows,
    trajectory_to_csv, RecordMeanAccumulator,
};
use qsd_core::sde::{filter, synthesize, FilterDiagnostics};
use qsd_core::validation::{
    conditional_mean_test, occupancy_from_snapshots, run_tomography, BinningConfig,
    ConditionalMeanReport, TomographyRun,
};
use qsd_core::{HeterodyneRecord, InitialState, QsdError, QubitState, Result, SimParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Output, RecordFormat, RunConfig, SeedSource};
use crate::manifest::{sha256_hex, CheckOutcome, FileDigest, OutputWriter, RunManifest};

/// Trajectories synthesized per parallel batch before their files are written.
const BATCH: u64 = 2048;

pub struct Outcome {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.manifest.failed_checks().is_empty() {
            0
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub n_trajectories: u64,
    pub initial: InitialState,
    pub alpha0: Option<f64>,
    pub alpha_flow_final: Option<f64>,
    pub summary: InvariantSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordAnalysis {
    pub file: String,
    pub n_steps: usize,
    pub summary: InvariantSummary,
    pub diagnostics: FilterDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub records: Vec<RecordAnalysis>,
    pub summary: InvariantSummary,
}

fn record_name(index: u64, format: RecordFormat) -> String {
    match format {
        RecordFormat::Csv => format!("records/record_{index:06}.csv"),
        RecordFormat::Binary => format!("records/record_{index:06}.qsdr"),
    }
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

struct Member {
    index: u64,
    record: HeterodyneRecord,
    record_bytes: Option<Vec<u8>>,
    trajectory_csv: Option<String>,
    invariants: Option<InvariantSummary>,
    snapshots: Vec<QubitState>,
}

/// Synthesizes the configured ensemble and writes every requested output.
pub fn simulate(
    cfg: &RunConfig,
    seed_source: SeedSource,
    outputs: &BTreeSet<Output>,
    command: &str,
) -> Result<Outcome> {
    let mut w = OutputWriter::create(&cfg.output_dir)?;
    let mut checks = Vec::new();
    let p = &cfg.params;
    let want = |o: Output| outputs.contains(&o);
    let per_member = want(Output::Records)
        || want(Output::Trajectories)
        || want(Output::Invariants)
        || want(Output::Grid)
        || want(Output::Likelihood);

    if per_member {
        let grid_steps: Vec<usize> = if want(Output::Grid) {
            cfg.grid_times()
                .iter()
                .map(|&t| qsd_core::state::steps_for(t, p.dt))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mut means = RecordMeanAccumulator::new(p.dt, p.n_steps()?);
        let mut invariants: Option<InvariantSummary> = None;
        let mut snapshots: Vec<Vec<QubitState>> = vec![Vec::new(); grid_steps.len()];
        let mut kept = Vec::new();

        let end = cfg.first_index + cfg.ensemble_size as u64;
        let mut start = cfg.first_index;
        while start < end {
            let stop = (start + BATCH).min(end);
            let batch: Vec<Member> = (start..stop)
                .into_par_iter()
                .map(|index| {
                    let (record, traj) = synthesize(cfg.initial, p, index)?;
                    Ok(Member {
                        index,
                        record_bytes: if want(Output::Records) {
                            Some(match cfg.record_format {
                                RecordFormat::Csv => record_to_csv(&record)?.into_bytes(),
                                RecordFormat::Binary => record_to_binary(&record)?,
                            })
                        } else {
                            None
                        },
                        trajectory_csv: want(Output::Trajectories)
                            .then(|| trajectory_to_csv(&trajectory_rows(&traj))),
                        invariants: if want(Output::Invariants) {
                            Some(trajectory_invariants(cfg.initial, &traj, &record)?)
                        } else {
                            None
                        },
                        snapshots: grid_steps.iter().map(|&k| traj.states[k]).collect(),
                        record,
                    })
                })
                .collect::<Result<_>>()?;
            for m in batch {
                if let Some(bytes) = &m.record_bytes {
                    w.write(&record_name(m.index, cfg.record_format), bytes)?;
                    means.add(&m.record)?;
                }
                if let Some(csv) = &m.trajectory_csv {
                    w.write(&format!("trajectories/trajectory_{:06}.csv", m.index), csv.as_bytes())?;
                }
                if let Some(s) = m.invariants {
                    invariants = Some(match invariants {
                        Some(acc) => acc.merge(s),
                        None => s,
                    });
                }
                for (slot, s) in snapshots.iter_mut().zip(m.snapshots) {
                    slot.push(s);
                }
                if want(Output::Likelihood) {
                    kept.push(m.record);
                }
            }
            start = stop;
        }

        // the mean of a single record is the record itself
        if want(Output::Records) && cfg.ensemble_size > 1 {
            w.write("records_mean.csv", means_to_csv(&means.finish()?).as_bytes())?;
        }
        let alpha0 = alpha_of(&cfg.initial.state()?).ok();
        if let Some(summary) = invariants {
            let report = InvariantReport {
                n_trajectories: cfg.ensemble_size as u64,
                initial: cfg.initial,
                alpha0,
                alpha_flow_final: alpha0.map(|a| alpha_flow(a, p, p.horizon)),
                summary,
            };
            if let Some(tol) = cfg.checks.max_alpha_rel_error {
                checks.push(check(
                    "invariants.alpha",
                    summary.alpha_max_rel_error <= tol,
                    format!("max relative error {:e} vs {tol:e}", summary.alpha_max_rel_error),
                ));
            }
            w.write_json("invariants.json", &report)?;
        }
        if want(Output::Grid) {
            let snaps: Vec<(f64, Vec<QubitState>)> = cfg.grid_times().into_iter().zip(snapshots).collect();
            let grid = occupancy_from_snapshots(&snaps, alpha0, p, cfg.cell_side())?;
            w.write_json("grid.json", &grid)?;
            w.write("grid.csv", grid_to_csv(&grid).as_bytes())?;
        }
        if want(Output::Likelihood) {
            let result = estimate_eta(cfg.initial, &kept, p, cfg.estimation.grid)?;
            checks.extend(likelihood_checks(cfg, &result));
            w.write_json("likelihood.json", &result)?;
        }
    }

    if want(Output::Tomography) {
        for report in tomography(cfg)? {
            checks.extend(tomography_checks(cfg, &report));
            w.write_json(&format!("tomography_{}.json", axis_name(&report)), &report)?;
        }
    }

    let (manifest, manifest_path) = w.finish(command, cfg, seed_source, Vec::new(), checks)?;
    Ok(Outcome { manifest, manifest_path })
}

fn axis_name(r: &ConditionalMeanReport) -> &'static str {
    match r.axis {
        qsd_core::validation::Axis::X => "x",
        qsd_core::validation::Axis::Y => "y",
        qsd_core::validation::Axis::Z => "z",
    }
}

fn tomography(cfg: &RunConfig) -> Result<Vec<ConditionalMeanReport>> {
    let defaults = BinningConfig::default();
    let binning = BinningConfig {
        half_width: cfg.bin_half_width.unwrap_or(defaults.half_width),
        min_count: cfg.min_bin_count.unwrap_or(defaults.min_count),
    };
    cfg.tomography
        .axes
        .iter()
        .map(|&axis| {
            let run = TomographyRun {
                init: cfg.initial,
                truth: cfg.params,
                filter_eta: cfg.tomography.filter_eta,
                axis,
                fidelity: cfg.readout(),
                first_index: cfg.first_index,
                count: cfg.ensemble_size,
            };
            let entries = run_tomography(&run)?;
            conditional_mean_test(&entries, axis, cfg.params.horizon, run.fidelity, binning)
        })
        .collect()
}

fn tomography_checks(cfg: &RunConfig, r: &ConditionalMeanReport) -> Vec<CheckOutcome> {
    let axis = axis_name(r);
    vec![
        check(
            format!("tomography.{axis}.slope"),
            r.slope_ok(cfg.checks.slope_tol),
            format!("slope {:.4} +- {:.4}, tolerance {}", r.slope, r.slope_stderr, cfg.checks.slope_tol),
        ),
        check(
            format!("tomography.{axis}.bins"),
            r.fraction_bins_within_3se >= cfg.checks.min_bin_fraction,
            format!(
                "{:.3} of {} bins within 3 SE, need {}",
                r.fraction_bins_within_3se,
                r.bins.len(),
                cfg.checks.min_bin_fraction
            ),
        ),
    ]
}

fn likelihood_checks(cfg: &RunConfig, r: &LikelihoodResult) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    if cfg.checks.fail_on_boundary {
        out.push(check(
            "likelihood.boundary",
            !r.boundary_warning,
            if r.boundary_warning {
                format!("maximum on the grid boundary at eta = {}", r.eta_hat)
            } else {
                "interior maximum".to_string()
            },
        ));
    }
    if let Some((lo, hi)) = cfg.checks.eta_window {
        out.push(check(
            "likelihood.eta_window",
            (lo..=hi).contains(&r.eta_hat),
            format!("eta_hat {} vs [{lo}, {hi}]", r.eta_hat),
        ));
    }
    out
}

/// Reads every input up front so a bad file stops the run before any output.
fn read_inputs(files: &[PathBuf]) -> Result<(Vec<HeterodyneRecord>, Vec<FileDigest>)> {
    if files.is_empty() {
        return Err(QsdError::Config("no record files given".into()));
    }
    let mut recs = Vec::with_capacity(files.len());
    let mut digests = Vec::with_capacity(files.len());
    for f in files {
        recs.push(read_record(f)?);
        let bytes = std::fs::read(f)?;
        digests.push(FileDigest {
            path: f.display().to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    Ok((recs, digests))
}

/// Parameters for filtering `rec`: the record header's when requested,
/// otherwise the configured ones, which must share the record's `dt`.
fn params_for(cfg: &RunConfig, rec: &HeterodyneRecord, file: &Path, from_record: bool) -> Result<SimParams> {
    let p = if from_record {
        let prov = rec.provenance.ok_or_else(|| {
            QsdError::Config(format!("{} carries no parameters in its header", file.display()))
        })?;
        SimParams {
            gamma1: prov.gamma1,
            gamma_phi: prov.gamma_phi,
            eta: prov.eta,
            dt: rec.dt,
            horizon: rec.horizon(),
            master_seed: prov.seed,
        }
    } else {
        if (rec.dt - cfg.params.dt).abs() > 1e-12 * cfg.params.dt {
            return Err(QsdError::Config(format!(
                "{}: record dt {} does not match configured dt {}",
                file.display(),
                rec.dt,
                cfg.params.dt
            )));
        }
        SimParams {
            horizon: rec.horizon(),
            ..cfg.params
        }
    };
    p.validate()?;
    Ok(p)
}

fn output_stem(file: &Path) -> String {
    let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(".csv")
        .or_else(|| name.strip_suffix(".qsdr"))
        .unwrap_or(&name)
        .to_string()
}

pub fn filter_records(
    cfg: &RunConfig,
    seed_source: SeedSource,
    files: &[PathBuf],
    from_record: bool,
) -> Result<Outcome> {
    let (recs, inputs) = read_inputs(files)?;
    let mut names = BTreeSet::new();
    for f in files {
        if !names.insert(output_stem(f)) {
            return Err(QsdError::Config(format!("two inputs map to the output name '{}'", output_stem(f))));
        }
    }
    let params = files
        .iter()
        .zip(&recs)
        .map(|(f, r)| params_for(cfg, r, f, from_record))
        .collect::<Result<Vec<_>>>()?;
    let csvs = recs
        .par_iter()
        .zip(&params)
        .map(|(r, p)| Ok(trajectory_to_csv(&trajectory_rows(&filter(cfg.initial, r, p, cfg.scheme)?))))
        .collect::<Result<Vec<_>>>()?;

    let mut w = OutputWriter::create(&cfg.output_dir)?;
    for (f, csv) in files.iter().zip(&csvs) {
        w.write(&format!("{}.traj.csv", output_stem(f)), csv.as_bytes())?;
    }
    let (manifest, manifest_path) = w.finish("filter", cfg, seed_source, inputs, Vec::new())?;
    Ok(Outcome { manifest, manifest_path })
}

pub fn analyze(cfg: &RunConfig, seed_source: SeedSource, files: &[PathBuf], from_record: bool) -> Result<Outcome> {
    let (recs, inputs) = read_inputs(files)?;
    let records = files
        .par_iter()
        .zip(&recs)
        .map(|(f, r)| {
            let p = params_for(cfg, r, f, from_record)?;
            let traj = filter(cfg.initial, r, &p, cfg.scheme)?;
            Ok(RecordAnalysis {
                file: f.display().to_string(),
                n_steps: r.len(),
                summary: trajectory_invariants(cfg.initial, &traj, r)?,
                diagnostics: traj.diagnostics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = records
        .iter()
        .map(|r| r.summary)
        .reduce(InvariantSummary::merge)
        .expect("at least one record");
    let mut checks = Vec::new();
    if let Some(tol) = cfg.checks.max_alpha_rel_error {
        checks.push(check(
            "invariants.alpha",
            summary.alpha_max_rel_error <= tol,
            format!("max relative error {:e} vs {tol:e}", summary.alpha_max_rel_error),
        ));
    }
    let mut w = OutputWriter::create(&cfg.output_dir)?;
    w.write_json("analysis.json", &AnalysisReport { records, summary })?;
    let (manifest, manifest_path) = w.finish("analyze", cfg, seed_source, inputs, checks)?;
    Ok(Outcome { manifest, manifest_path })
}

/// Estimates eta from record files, or from a synthesized ensemble when no
/// files are given.
pub fn estimate(cfg: &RunConfig, seed_source: SeedSource, files: &[PathBuf], from_record: bool) -> Result<Outcome> {
    if files.is_empty() {
        return simulate(cfg, seed_source, &BTreeSet::from([Output::Likelihood]), "estimate-eta");
    }
    let (recs, inputs) = read_inputs(files)?;
    let params = files
        .iter()
        .zip(&recs)
        .map(|(f, r)| params_for(cfg, r, f, from_record))
        .collect::<Result<Vec<_>>>()?;
    let p = params[0];
    if params
        .iter()
        .any(|q| q.gamma1 != p.gamma1 || q.gamma_phi != p.gamma_phi || q.dt != p.dt)
    {
        return Err(QsdError::Config("records disagree on gamma1, gamma_phi or dt".into()));
    }
    let result = estimate_eta(cfg.initial, &recs, &p, cfg.estimation.grid)?;
    let checks = likelihood_checks(cfg, &result);
    let mut w = OutputWriter::create(&cfg.output_dir)?;
    w.write_json("likelihood.json", &result)?;
    let (manifest, manifest_path) = w.finish("estimate-eta", cfg, seed_source, inputs, checks)?;
    Ok(Outcome { manifest, manifest_path })
}

/// Output files whose digests no longer match the manifest at `path`.
pub fn verify_manifest(path: &Path) -> Result<Vec<String>> {
    let manifest: RunManifest = qsd_core::io::read_json(path)?;
    crate::manifest::verify(path.parent().unwrap_or(Path::new(".")), &manifest)
}
