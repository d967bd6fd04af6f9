//! Simulated projective tomography and ensemble statistics of trajectories.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{alpha_flow, alpha_of};
use crate::error::{QsdError, Result};
use crate::rng::{stream_rng, StreamDomain};
use crate::sde::{filter, synthesize, Scheme, Trajectory};
use crate::state::{steps_for, InitialState, QubitState, SimParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn coordinate(&self, s: &QubitState) -> f64 {
        match self {
            Axis::X => s.x(),
            Axis::Y => s.y(),
            Axis::Z => s.z(),
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = QsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(QsdError::Config(format!("unknown axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TomographySample {
    pub axis: Axis,
    pub outcome: i8,
    pub trajectory_index: u64,
    pub final_time: f64,
}

/// Probabilities of reading the correct outcome given |g>-like (-1) and
/// |e>-like (+1) ideal outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutFidelity {
    pub f_g: f64,
    pub f_e: f64,
}

impl Default for ReadoutFidelity {
    fn default() -> Self {
        Self::PERFECT
    }
}

impl ReadoutFidelity {
    pub const PERFECT: Self = Self { f_g: 1.0, f_e: 1.0 };

    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| f > 0.5 && f <= 1.0;
        if ok(self.f_g) && ok(self.f_e) {
            Ok(())
        } else {
            Err(QsdError::InvalidFidelity { f_g: self.f_g, f_e: self.f_e })
        }
    }

    fn contrast(&self) -> Result<f64> {
        let den = self.f_e + self.f_g - 1.0;
        if den > 0.0 {
            Ok(den)
        } else {
            Err(QsdError::InvalidFidelity { f_g: self.f_g, f_e: self.f_e })
        }
    }
}

/// Projective measurement of `sigma_axis` followed by a biased flip.
pub fn simulate_readout<R: Rng + ?Sized>(
    s: &QubitState,
    axis: Axis,
    fidelity: ReadoutFidelity,
    rng: &mut R,
) -> i8 {
    let p_plus = 0.5 * (1.0 + axis.coordinate(s));
    let ideal: i8 = if rng.random::<f64>() < p_plus { 1 } else { -1 };
    let keep = if ideal == 1 { fidelity.f_e } else { fidelity.f_g };
    if rng.random::<f64>() < keep {
        ideal
    } else {
        -ideal
    }
}

/// Inverts the binary confusion matrix on a mean outcome.
pub fn correct_readout_means(raw_mean: f64, fidelity: ReadoutFidelity) -> Result<f64> {
    let den = fidelity.contrast()?;
    Ok((raw_mean - (fidelity.f_e - fidelity.f_g)) / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinningConfig {
    pub half_width: f64,
    pub min_count: usize,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            half_width: 0.02,
            min_count: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalBin {
    pub center: f64,
    pub half_width: f64,
    pub count: usize,
    /// Mean predicted coordinate inside the bin.
    pub mean_pred: f64,
    /// Readout-corrected mean tomography outcome.
    pub mean_tomo: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMeanReport {
    pub axis: Axis,
    pub final_time: f64,
    /// Bins with at least `min_count` samples, by increasing center.
    pub bins: Vec<ConditionalBin>,
    /// Samples in bins dropped for low count.
    pub excluded_samples: usize,
    /// Count-weighted least-squares slope of `mean_tomo` against `center`.
    pub slope: f64,
    pub slope_stderr: f64,
    pub intercept: f64,
    pub n_samples: usize,
    pub global_mean_pred: f64,
    pub global_mean_tomo: f64,
    pub global_stderr: f64,
    /// Share of reported bins with `|mean_tomo - mean_pred| <= 3 stderr`.
    pub fraction_bins_within_3se: f64,
}

impl ConditionalMeanReport {
    /// `|slope - 1| <= tol`.
    pub fn slope_ok(&self, tol: f64) -> bool {
        (self.slope - 1.0).abs() <= tol
    }

    /// Number of standard errors separating the slope from one.
    pub fn slope_sigma(&self) -> f64 {
        (self.slope - 1.0).abs() / self.slope_stderr
    }

    pub fn global_sigma(&self) -> f64 {
        (self.global_mean_tomo - self.global_mean_pred).abs() / self.global_stderr
    }
}

#[derive(Default, Clone, Copy)]
struct Acc {
    n: usize,
    pred: f64,
    out: f64,
    out2: f64,
}

/// Bins samples by the predicted final coordinate on `axis` and compares the
/// bin centers with the mean (readout-corrected) tomography outcome.
///
/// Each entry pairs the filter's prediction at `final_time` with the
/// projective sample taken on that run.
pub fn conditional_mean_test(
    entries: &[(QubitState, TomographySample)],
    axis: Axis,
    final_time: f64,
    fidelity: ReadoutFidelity,
    binning: BinningConfig,
) -> Result<ConditionalMeanReport> {
    if entries.is_empty() {
        return Err(QsdError::EmptyEnsemble);
    }
    let contrast = fidelity.contrast()?;
    if !(binning.half_width > 0.0) {
        return Err(QsdError::Config("bin half-width must be positive".into()));
    }
    let width = 2.0 * binning.half_width;

    let mut bins: BTreeMap<i64, Acc> = BTreeMap::new();
    let mut total = Acc::default();
    for (s, sample) in entries {
        if sample.axis != axis || (sample.final_time - final_time).abs() > 1e-9 * final_time.max(1.0) {
            return Err(QsdError::Config(format!(
                "sample for trajectory {} does not match axis {axis:?} at T = {final_time}",
                sample.trajectory_index
            )));
        }
        let pred = axis.coordinate(s);
        let o = f64::from(sample.outcome);
        let k = ((pred + 1.0) / width).round() as i64;
        for acc in [bins.entry(k).or_default(), &mut total] {
            acc.n += 1;
            acc.pred += pred;
            acc.out += o;
            acc.out2 += o * o;
        }
    }

    let corrected = |raw: f64| (raw - (fidelity.f_e - fidelity.f_g)) / contrast;
    let stderr = |a: &Acc| {
        let n = a.n as f64;
        let mean = a.out / n;
        let var = if a.n > 1 { ((a.out2 - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
        (var / n).sqrt() / contrast
    };

    let mut out_bins = Vec::new();
    let mut excluded = 0;
    for (k, acc) in &bins {
        if acc.n < binning.min_count {
            excluded += acc.n;
            continue;
        }
        let n = acc.n as f64;
        out_bins.push(ConditionalBin {
            center: -1.0 + *k as f64 * width,
            half_width: binning.half_width,
            count: acc.n,
            mean_pred: acc.pred / n,
            mean_tomo: corrected(acc.out / n),
            stderr: stderr(acc),
        });
    }

    let (slope, intercept, slope_stderr) = weighted_slope(&out_bins);
    let within = out_bins
        .iter()
        .filter(|b| (b.mean_tomo - b.mean_pred).abs() <= 3.0 * b.stderr)
        .count();
    let n = total.n as f64;
    Ok(ConditionalMeanReport {
        axis,
        final_time,
        fraction_bins_within_3se: if out_bins.is_empty() { 0.0 } else { within as f64 / out_bins.len() as f64 },
        bins: out_bins,
        excluded_samples: excluded,
        slope,
        slope_stderr,
        intercept,
        n_samples: total.n,
        global_mean_pred: total.pred / n,
        global_mean_tomo: corrected(total.out / n),
        global_stderr: stderr(&total),
    })
}

/// Count-weighted least squares `mean_tomo ~ a + b * center`, with a
/// sandwich standard error built from the per-bin standard errors.
fn weighted_slope(bins: &[ConditionalBin]) -> (f64, f64, f64) {
    if bins.len() < 2 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let w_sum: f64 = bins.iter().map(|b| b.count as f64).sum();
    let cx = bins.iter().map(|b| b.count as f64 * b.center).sum::<f64>() / w_sum;
    let cy = bins.iter().map(|b| b.count as f64 * b.mean_tomo).sum::<f64>() / w_sum;
    let sxx: f64 = bins.iter().map(|b| b.count as f64 * (b.center - cx).powi(2)).sum();
    let sxy: f64 = bins
        .iter()
        .map(|b| b.count as f64 * (b.center - cx) * (b.mean_tomo - cy))
        .sum();
    let slope = sxy / sxx;
    let var: f64 = bins
        .iter()
        .map(|b| (b.count as f64 * (b.center - cx)).powi(2) * b.stderr * b.stderr)
        .sum::<f64>()
        / (sxx * sxx);
    (slope, cy - slope * cx, var.sqrt())
}

/// Setup of a simulated tomography run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TomographyRun {
    pub init: InitialState,
    /// Parameters the records are synthesized with; `horizon` is `T`.
    pub truth: SimParams,
    /// Efficiency assumed by the filter; `None` means the true one.
    pub filter_eta: Option<f64>,
    pub axis: Axis,
    pub fidelity: ReadoutFidelity,
    pub first_index: u64,
    pub count: usize,
}

/// Synthesizes `count` runs, filters each record with the assumed efficiency
/// and measures the true final state along `axis`.
pub fn run_tomography(run: &TomographyRun) -> Result<Vec<(QubitState, TomographySample)>> {
    run.fidelity.validate()?;
    let assumed = run.filter_eta.map(|eta| run.truth.with_eta(eta));
    // readout streams are keyed per axis so the three axes are independent
    let readout_seed = run.truth.master_seed ^ ((run.axis as u64 + 1) << 56);
    (run.first_index..run.first_index + run.count as u64)
        .into_par_iter()
        .map(|k| {
            let (rec, truth) = synthesize(run.init, &run.truth, k)?;
            let predicted = match &assumed {
                Some(p) => *filter(run.init, &rec, p, Scheme::Kraus)?.final_state(),
                None => *truth.final_state(),
            };
            let mut rng = stream_rng(readout_seed, StreamDomain::Readout, k);
            let outcome = simulate_readout(truth.final_state(), run.axis, run.fidelity, &mut rng);
            Ok((
                predicted,
                TomographySample {
                    axis: run.axis,
                    outcome,
                    trajectory_index: k,
                    final_time: run.truth.horizon,
                },
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCount {
    pub ix: u32,
    pub iy: u32,
    pub iz: u32,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancySlice {
    pub time: f64,
    pub total: u64,
    /// Deterministic spheroid parameter at this time, when defined.
    pub alpha_flow: Option<f64>,
    pub cells: Vec<CellCount>,
}

/// Histogram of Bloch vectors on a cubic lattice over `[-1, 1]^3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub cell_side: f64,
    pub cells_per_axis: u32,
    pub slices: Vec<OccupancySlice>,
}

impl OccupancyGrid {
    /// Center of cell `i` along one axis.
    pub fn cell_center(&self, i: u32) -> f64 {
        -1.0 + (i as f64 + 0.5) * self.cell_side
    }

    pub fn cell_index(&self, v: f64) -> u32 {
        let i = ((v + 1.0) / self.cell_side).floor();
        i.clamp(0.0, f64::from(self.cells_per_axis - 1)) as u32
    }
}

pub fn occupancy(trajs: &[Trajectory], times: &[f64], cell_side: f64) -> Result<OccupancyGrid> {
    let first = trajs.first().ok_or(QsdError::EmptyEnsemble)?;
    let mut snapshots = Vec::with_capacity(times.len());
    for &t in times {
        let k = steps_for(t, first.params.dt)?;
        let states = trajs
            .iter()
            .map(|traj| {
                traj.states.get(k).copied().ok_or_else(|| {
                    QsdError::Config(format!("time {t} is not sampled by every trajectory"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        snapshots.push((t, states));
    }
    occupancy_from_snapshots(&snapshots, alpha_of(first.initial()).ok(), &first.params, cell_side)
}

/// Same as [`occupancy`] from states already sampled at each time. `alpha0`
/// is the spheroid parameter of the common initial state, if defined.
pub fn occupancy_from_snapshots(
    snapshots: &[(f64, Vec<QubitState>)],
    alpha0: Option<f64>,
    p: &SimParams,
    cell_side: f64,
) -> Result<OccupancyGrid> {
    if snapshots.iter().any(|(_, s)| s.is_empty()) {
        return Err(QsdError::EmptyEnsemble);
    }
    if !(cell_side > 0.0 && cell_side <= 2.0) {
        return Err(QsdError::Config(format!("cell side {cell_side} outside (0, 2]")));
    }
    let mut grid = OccupancyGrid {
        cell_side,
        cells_per_axis: (2.0 / cell_side - 1e-9).ceil() as u32,
        slices: Vec::with_capacity(snapshots.len()),
    };
    for (t, states) in snapshots {
        let mut cells: BTreeMap<[u32; 3], u64> = BTreeMap::new();
        for s in states {
            let [x, y, z] = s.bloch();
            *cells
                .entry([grid.cell_index(x), grid.cell_index(y), grid.cell_index(z)])
                .or_default() += 1;
        }
        grid.slices.push(OccupancySlice {
            time: *t,
            total: states.len() as u64,
            alpha_flow: alpha0.map(|a| alpha_flow(a, p, *t)),
            cells: cells
                .into_iter()
                .map(|([ix, iy, iz], count)| CellCount { ix, iy, iz, count })
                .collect(),
        });
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationStats {
    pub n_trajectories: usize,
    /// Share of trajectories with `<sz> > 0` at some `t > 0`.
    pub fraction_zpos: f64,
    /// Share of trajectories whose `<sz>` increases over some step after
    /// the first one.
    pub fraction_reincrease: f64,
    /// Ensemble positions of up to ten trajectories counted in `fraction_zpos`.
    pub example_indices: Vec<usize>,
}

pub fn excitation_increase_stats(trajs: &[Trajectory]) -> Result<ExcitationStats> {
    if trajs.is_empty() {
        return Err(QsdError::EmptyEnsemble);
    }
    let mut zpos = Vec::new();
    let mut reincrease = 0usize;
    for (i, traj) in trajs.iter().enumerate() {
        let z: Vec<f64> = traj.states.iter().map(QubitState::z).collect();
        if z.iter().skip(1).any(|&v| v > 0.0) {
            zpos.push(i);
        }
        if z.windows(2).skip(1).any(|w| w[1] > w[0]) {
            reincrease += 1;
        }
    }
    let n = trajs.len() as f64;
    Ok(ExcitationStats {
        n_trajectories: trajs.len(),
        fraction_zpos: zpos.len() as f64 / n,
        fraction_reincrease: reincrease as f64 / n,
        example_indices: zpos.into_iter().take(10).collect(),
    })
}
