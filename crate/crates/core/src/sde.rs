//! Record synthesis and conditioned-state filtering for heterodyne
//! monitoring of qubit fluorescence.
//!
//! The record model is
//!
//! ```text
//! dI = sqrt(eta g1 / 2) <sx> dt + dW_I
//! dQ = sqrt(eta g1 / 2) <sy> dt + dW_Q
//! ```
//!
//! with `Var(dW) = dt`, and the conditioned state obeys the Ito stochastic
//! master equation
//!
//! ```text
//! d rho = (g1 D[s-] + g_phi/2 D[sz]) rho dt
//!       + sqrt(eta g1/2) M[s-] rho dW_I + sqrt(eta g1/2) M[i s-] rho dW_Q
//! ```
//!
//! Two integrators are provided. [`Scheme::Euler`] is the literal
//! first-order discretization of the equation above. [`Scheme::Kraus`] (the
//! default) applies a normalized completely-positive map
//!
//! ```text
//! rho' ∝ Deph( M rho M^† + (1 - eta)(1 - e^{-g1 dt}) s- rho s+ )
//! M    = diag(e^{-g1 dt/2}, 1) + sqrt(eta g1/2) (dI + i dQ) s-
//! ```
//!
//! where `Deph` is the exact dephasing channel over `dt`. Its deterministic
//! part is the exact Lindblad propagator, so `eta = 0` reproduces the closed
//! form [`lindblad_solve`] to rounding, and every output is a valid density
//! matrix whatever the record values are.

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QsdError, Result};
use crate::rng::{stream_rng, StreamDomain};
use crate::state::{InitialState, Mat2, PauliOps, QubitState, SimParams};

/// Sign between `dQ` and `i s-` in the Kraus operator. Pinned by the
/// first-order expansion test against the Euler `M[i s-]` term.
pub const QUADRATURE_SIGN: f64 = 1.0;

/// Euler steps whose trace drifts further than this are rejected.
pub const EULER_BLOWUP_TRACE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Kraus,
    Euler,
}

impl std::str::FromStr for Scheme {
    type Err = QsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kraus" => Ok(Self::Kraus),
            "euler" => Ok(Self::Euler),
            other => Err(QsdError::Config(format!(
                "unknown scheme '{other}' (expected kraus or euler)"
            ))),
        }
    }
}

/// Where a record came from, as stored in record file headers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordProvenance {
    pub gamma1: f64,
    pub gamma_phi: f64,
    pub eta: f64,
    pub seed: u64,
    pub index: u64,
}

/// Normalized quadrature increments `(dI, dQ)` with `Var = dt` under noise.
#[derive(Debug, Clone, PartialEq)]
pub struct HeterodyneRecord {
    pub dt: f64,
    pub increments: Vec<(f64, f64)>,
    pub provenance: Option<RecordProvenance>,
}

impl HeterodyneRecord {
    pub fn new(dt: f64, increments: Vec<(f64, f64)>) -> Self {
        Self {
            dt,
            increments,
            provenance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.increments.len() as f64 * self.dt
    }

    /// Left time of increment `k`.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }
}

/// Independent Gaussian increments `(dW_I, dW_Q)`, each with variance `dt`.
pub type NoisePath = Vec<(f64, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthesized,
    Filtered(Scheme),
}

/// Integration health. Only the Euler scheme can report non-zero values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterDiagnostics {
    /// Largest `|Tr(rho) - 1|` removed by renormalization.
    pub max_trace_correction: f64,
    /// Number of states with a negative eigenvalue below `-1e-12`.
    pub positivity_violations: usize,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<QubitState>,
    pub provenance: Provenance,
    pub params: SimParams,
    pub diagnostics: FilterDiagnostics,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn initial(&self) -> &QubitState {
        &self.states[0]
    }

    pub fn final_state(&self) -> &QubitState {
        self.states.last().expect("trajectory holds at least the initial state")
    }

    /// State sampled at `t`, which must lie on the time grid.
    pub fn state_at(&self, t: f64) -> Result<&QubitState> {
        let k = crate::state::steps_for(t, self.params.dt)?;
        self.states.get(k).ok_or_else(|| {
            QsdError::Config(format!("time {t} beyond trajectory end {}", self.times.last().copied().unwrap_or(0.0)))
        })
    }

    pub fn bloch_path(&self) -> Vec<[f64; 3]> {
        self.states.iter().map(QubitState::bloch).collect()
    }
}

/// Precomputed coefficients of the Kraus update for one parameter set.
#[derive(Debug, Clone, Copy)]
pub struct KrausStepper {
    /// `e^{-g1 dt/2}`, amplitude of |e> under no-emission evolution.
    decay: f64,
    /// Weight of the unmonitored emission `s- rho s+`.
    jump: f64,
    /// `sqrt(eta g1 / 2)`.
    coupling: f64,
    /// Coherence factor `e^{-g_phi dt}` of the dephasing channel.
    dephasing: f64,
    sign: f64,
}

impl KrausStepper {
    pub fn new(p: &SimParams) -> Self {
        Self::with_sign(p, QUADRATURE_SIGN)
    }

    pub(crate) fn with_sign(p: &SimParams, sign: f64) -> Self {
        Self {
            decay: (-0.5 * p.gamma1 * p.dt).exp(),
            jump: (1.0 - p.eta) * -(-p.gamma1 * p.dt).exp_m1(),
            coupling: measurement_coupling(p),
            dephasing: (-p.gamma_phi * p.dt).exp(),
            sign,
        }
    }

    pub fn step(&self, s: &QubitState, di: f64, dq: f64) -> QubitState {
        let rho = s.matrix();
        let pe = rho[(0, 0)].re;
        let pg = rho[(1, 1)].re;
        let coh = rho[(1, 0)];
        let cw = Complex64::new(self.coupling * di, self.sign * self.coupling * dq);
        let m = self.decay;

        // M rho M^† with M = [[m, 0], [cw, 1]], plus the unmonitored jump.
        let ee = m * m * pe;
        let ge = m * (coh + cw * pe);
        let gg = cw.norm_sqr() * pe + 2.0 * (coh * cw.conj()).re + pg + self.jump * pe;
        let norm = ee + gg;

        let ge = ge * (self.dephasing / norm);
        QubitState::from_matrix_unchecked(Mat2::new(
            Complex64::new(ee / norm, 0.0),
            ge.conj(),
            ge,
            Complex64::new(gg / norm, 0.0),
        ))
    }
}

pub fn measurement_coupling(p: &SimParams) -> f64 {
    (0.5 * p.eta * p.gamma1).sqrt()
}

/// One positivity-preserving update driven by the record increment.
pub fn kraus_step(s: &QubitState, di: f64, dq: f64, p: &SimParams) -> QubitState {
    KrausStepper::new(p).step(s, di, dq)
}

/// `D[L] rho = L rho L^† - {L^† L, rho} / 2`.
pub fn dissipator(l: &Mat2, rho: &Mat2) -> Mat2 {
    let ld = l.adjoint();
    let ldl = ld * l;
    let half = Complex64::new(0.5, 0.0);
    l * rho * ld - (ldl * rho + rho * ldl) * half
}

/// `M[L] rho = (L - <L>) rho + rho (L - <L>)^†`.
pub fn measurement_superop(l: &Mat2, rho: &Mat2) -> Mat2 {
    let mean = (l * rho).trace();
    let shifted = l - PauliOps::identity() * mean;
    shifted * rho + rho * shifted.adjoint()
}

/// Result of a single Euler update.
#[derive(Debug, Clone, Copy)]
pub struct EulerStep {
    pub state: QubitState,
    /// `|Tr(rho') - 1|` before renormalization.
    pub trace_correction: f64,
}

/// Literal first-order Ito discretization of the SME, with the Wiener
/// increments recovered from the record as `dW = dI - sqrt(eta g1/2) <s> dt`.
pub fn euler_step(s: &QubitState, di: f64, dq: f64, p: &SimParams) -> Result<EulerStep> {
    let rho = s.matrix();
    let [x, y, _] = s.bloch();
    let c = measurement_coupling(p);
    let dw_i = di - c * x * p.dt;
    let dw_q = dq - c * y * p.dt;

    let sm = PauliOps::sigma_minus();
    let ism = sm * Complex64::new(0.0, 1.0);
    let sz = PauliOps::sigma_z();
    let r = |v: f64| Complex64::new(v, 0.0);

    let next = rho
        + dissipator(&sm, rho) * r(p.gamma1 * p.dt)
        + dissipator(&sz, rho) * r(0.5 * p.gamma_phi * p.dt)
        + measurement_superop(&sm, rho) * r(c * dw_i)
        + measurement_superop(&ism, rho) * r(c * dw_q);

    let tr = next.trace();
    let deviation = (tr - Complex64::new(1.0, 0.0)).norm();
    if !(deviation <= EULER_BLOWUP_TRACE) || next.iter().any(|v| !v.is_finite()) {
        return Err(QsdError::NumericalBlowup {
            step: 0,
            trace_deviation: deviation,
        });
    }
    Ok(EulerStep {
        state: QubitState::from_matrix_unchecked(next / tr),
        trace_correction: deviation,
    })
}

/// Unconditioned (Lindblad) evolution in closed form.
pub fn lindblad_solve(init: InitialState, p: &SimParams, t: f64) -> Result<QubitState> {
    if !(t >= 0.0) {
        return Err(QsdError::Config(format!("time must be >= 0, got {t}")));
    }
    let [x0, y0, z0] = init.state()?.bloch();
    Ok(lindblad_bloch([x0, y0, z0], p, t))
}

pub(crate) fn lindblad_bloch(b0: [f64; 3], p: &SimParams, t: f64) -> QubitState {
    let [x0, y0, z0] = b0;
    let coh = (-(0.5 * p.gamma1 + p.gamma_phi) * t).exp();
    let pop = (-p.gamma1 * t).exp();
    QubitState::from_bloch_unchecked([x0 * coh, y0 * coh, -1.0 + (z0 + 1.0) * pop])
}

fn check_record(rec: &HeterodyneRecord, p: &SimParams) -> Result<()> {
    if (rec.dt - p.dt).abs() > 1e-12 * p.dt {
        return Err(QsdError::Config(format!(
            "record dt {} does not match parameter dt {}",
            rec.dt, p.dt
        )));
    }
    if rec.is_empty() {
        return Err(QsdError::Config("record has no increments".into()));
    }
    Ok(())
}

fn time_grid(n: usize, dt: f64) -> Vec<f64> {
    (0..=n).map(|k| k as f64 * dt).collect()
}

/// Reconstructs the conditioned trajectory `rho_t` from a record.
pub fn filter(
    init: InitialState,
    rec: &HeterodyneRecord,
    p: &SimParams,
    scheme: Scheme,
) -> Result<Trajectory> {
    check_record(rec, p)?;
    let rho0 = init.state()?;
    let mut states = Vec::with_capacity(rec.len() + 1);
    states.push(rho0);
    let mut diagnostics = FilterDiagnostics {
        min_eigenvalue: rho0.min_eigenvalue(),
        ..Default::default()
    };

    match scheme {
        Scheme::Kraus => {
            let stepper = KrausStepper::new(p);
            let mut rho = rho0;
            for &(di, dq) in &rec.increments {
                rho = stepper.step(&rho, di, dq);
                states.push(rho);
            }
        }
        Scheme::Euler => {
            let mut rho = rho0;
            for (k, &(di, dq)) in rec.increments.iter().enumerate() {
                let out = euler_step(&rho, di, dq, p).map_err(|e| match e {
                    QsdError::NumericalBlowup { trace_deviation, .. } => {
                        QsdError::NumericalBlowup { step: k, trace_deviation }
                    }
                    other => other,
                })?;
                rho = out.state;
                diagnostics.max_trace_correction =
                    diagnostics.max_trace_correction.max(out.trace_correction);
                states.push(rho);
            }
        }
    }

    for s in &states {
        let lmin = s.min_eigenvalue();
        diagnostics.min_eigenvalue = diagnostics.min_eigenvalue.min(lmin);
        if lmin < -crate::state::STATE_TOL {
            diagnostics.positivity_violations += 1;
        }
    }

    Ok(Trajectory {
        times: time_grid(rec.len(), rec.dt),
        states,
        provenance: Provenance::Filtered(scheme),
        params: SimParams {
            horizon: rec.horizon(),
            ..*p
        },
        diagnostics,
    })
}

/// Options for [`synthesize_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthesisOptions {
    /// Integrate the true state on `dt / substeps` and sum the fine
    /// increments into each recorded one. `1` means no substepping.
    pub substeps: u32,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self { substeps: 1 }
    }
}

/// The Wiener increments trajectory `index` is driven by, `n` steps long.
pub fn noise_path(p: &SimParams, index: u64, n: usize) -> NoisePath {
    let mut rng = stream_rng(p.master_seed, StreamDomain::Noise, index);
    let sd = p.dt.sqrt();
    (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            (sd * a, sd * b)
        })
        .collect()
}

/// Forward-simulates a record and the true conditioned trajectory.
pub fn synthesize(
    init: InitialState,
    p: &SimParams,
    trajectory_index: u64,
) -> Result<(HeterodyneRecord, Trajectory)> {
    synthesize_with(init, p, trajectory_index, &SynthesisOptions::default())
}

pub fn synthesize_with(
    init: InitialState,
    p: &SimParams,
    trajectory_index: u64,
    opts: &SynthesisOptions,
) -> Result<(HeterodyneRecord, Trajectory)> {
    p.validate()?;
    if opts.substeps == 0 {
        return Err(QsdError::Config("substeps must be >= 1".into()));
    }
    let n = p.n_steps()?;
    let rho0 = init.state()?;
    let sub = opts.substeps as usize;
    let fine = SimParams {
        dt: p.dt / sub as f64,
        ..*p
    };
    let stepper = KrausStepper::new(&fine);
    let c = measurement_coupling(p);
    let mut rng = stream_rng(p.master_seed, StreamDomain::Noise, trajectory_index);
    let sd = fine.dt.sqrt();

    let mut increments = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n + 1);
    states.push(rho0);
    let mut rho = rho0;
    for _ in 0..n {
        let (mut di, mut dq) = (0.0, 0.0);
        for _ in 0..sub {
            let wi: f64 = StandardNormal.sample(&mut rng);
            let wq: f64 = StandardNormal.sample(&mut rng);
            let fi = c * rho.x() * fine.dt + sd * wi;
            let fq = c * rho.y() * fine.dt + sd * wq;
            rho = stepper.step(&rho, fi, fq);
            di += fi;
            dq += fq;
        }
        increments.push((di, dq));
        states.push(rho);
    }

    let record = HeterodyneRecord {
        dt: p.dt,
        increments,
        provenance: Some(RecordProvenance {
            gamma1: p.gamma1,
            gamma_phi: p.gamma_phi,
            eta: p.eta,
            seed: p.master_seed,
            index: trajectory_index,
        }),
    };
    let diagnostics = FilterDiagnostics {
        min_eigenvalue: states.iter().map(QubitState::min_eigenvalue).fold(f64::INFINITY, f64::min),
        ..Default::default()
    };
    let traj = Trajectory {
        times: time_grid(n, p.dt),
        states,
        provenance: Provenance::Synthesized,
        params: *p,
        diagnostics,
    };
    Ok((record, traj))
}

/// Synthesizes trajectories `first..first + count` in parallel. Output order
/// follows the index, so results do not depend on the worker count.
pub fn synthesize_ensemble(
    init: InitialState,
    p: &SimParams,
    first: u64,
    count: usize,
) -> Result<Vec<(HeterodyneRecord, Trajectory)>> {
    (first..first + count as u64)
        .into_par_iter()
        .map(|k| synthesize(init, p, k))
        .collect()
}
