//! Maximum-likelihood detection efficiency from heterodyne records.
//!
//! The likelihood is the prediction-error decomposition of the record
//! model: every increment is Gaussian with variance `dt` around
//! `sqrt(eta g1/2) <s>_{rho_k} dt`, where `rho_k` is the Kraus-filtered
//! state built from the previous increments with the same candidate `eta`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QsdError, Result};
use crate::sde::{measurement_coupling, HeterodyneRecord, KrausStepper};
use crate::state::{InitialState, SimParams};

/// Profile-likelihood drop for a 95% interval (chi^2_1 quantile / 2).
pub const CI95_DROP: f64 = 1.92;
/// Golden-section stopping width on eta.
pub const GOLDEN_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtaGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Default for EtaGrid {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 1.0,
            n: 41,
        }
    }
}

impl EtaGrid {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lo && self.lo < self.hi && self.hi <= 1.0) || self.n < 3 {
            return Err(QsdError::Config(format!(
                "eta grid needs 0 <= lo < hi <= 1 and n >= 3, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<f64> {
        let step = (self.hi - self.lo) / (self.n - 1) as f64;
        (0..self.n).map(|k| self.lo + k as f64 * step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodResult {
    pub eta_hat: f64,
    pub max_log_likelihood: f64,
    /// `(eta, log L)` sorted by eta; includes the refined maximizer.
    #[serde(rename = "curve")]
    pub log_likelihood_curve: Vec<(f64, f64)>,
    pub ci95: (f64, f64),
    /// The grid maximum sat on the first or last grid point.
    pub boundary_warning: bool,
    pub n_records: usize,
}

fn ln_gauss_norm(dt: f64) -> f64 {
    -(2.0 * std::f64::consts::PI * dt).ln()
}

pub fn record_log_likelihood(init: InitialState, rec: &HeterodyneRecord, p: &SimParams) -> Result<f64> {
    if (rec.dt - p.dt).abs() > 1e-12 * p.dt {
        return Err(QsdError::Config(format!(
            "record dt {} does not match parameter dt {}",
            rec.dt, p.dt
        )));
    }
    let stepper = KrausStepper::new(p);
    let c = measurement_coupling(p);
    let dt = rec.dt;
    let mut rho = init.state()?;
    let mut ll = 0.0;
    for &(di, dq) in &rec.increments {
        let ri = di - c * rho.x() * dt;
        let rq = dq - c * rho.y() * dt;
        ll -= (ri * ri + rq * rq) / (2.0 * dt);
        rho = stepper.step(&rho, di, dq);
    }
    Ok(ll + rec.len() as f64 * ln_gauss_norm(dt))
}

/// Order-independent sum: sort, then Neumaier-compensated accumulation.
fn stable_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Joint log-likelihood of independent records.
pub fn ensemble_log_likelihood(
    init: InitialState,
    recs: &[HeterodyneRecord],
    p: &SimParams,
) -> Result<f64> {
    let lls = recs
        .par_iter()
        .map(|r| record_log_likelihood(init, r, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(stable_sum(lls))
}

/// Grid search followed by golden-section refinement of the maximizer.
/// `p_known.eta` is ignored.
pub fn estimate_eta(
    init: InitialState,
    recs: &[HeterodyneRecord],
    p_known: &SimParams,
    grid: EtaGrid,
) -> Result<LikelihoodResult> {
    if recs.is_empty() {
        return Err(QsdError::EmptyEnsemble);
    }
    grid.validate()?;
    let ll = |eta: f64| ensemble_log_likelihood(init, recs, &p_known.with_eta(eta));

    let etas = grid.points();
    let mut curve = Vec::with_capacity(etas.len() + 64);
    for &e in &etas {
        curve.push((e, ll(e)?));
    }
    // first maximum wins, so a flat curve reports the lower boundary
    let best = curve
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if v.1 > curve[b].1 { i } else { b });
    let boundary_warning = best == 0 || best == etas.len() - 1;

    let a = etas[best.saturating_sub(1)];
    let b = etas[(best + 1).min(etas.len() - 1)];
    let (g_eta, g_ll) = golden_section_max(&ll, a, b, &mut curve)?;
    let (eta_hat, max_ll) = if g_ll > curve[best].1 {
        (g_eta, g_ll)
    } else {
        curve[best]
    };

    let target = max_ll - CI95_DROP;
    let lo = profile_crossing(&ll, &etas, eta_hat, target, grid.lo, &curve, Side::Left)?;
    let hi = profile_crossing(&ll, &etas, eta_hat, target, grid.hi, &curve, Side::Right)?;

    curve.sort_by(|x, y| x.0.total_cmp(&y.0));
    curve.dedup_by(|x, y| x.0 == y.0);
    Ok(LikelihoodResult {
        eta_hat,
        max_log_likelihood: max_ll,
        log_likelihood_curve: curve,
        ci95: (lo.min(eta_hat), hi.max(eta_hat)),
        boundary_warning,
        n_records: recs.len(),
    })
}

fn golden_section_max(
    f: &impl Fn(f64) -> Result<f64>,
    mut a: f64,
    mut b: f64,
    trace: &mut Vec<(f64, f64)>,
) -> Result<(f64, f64)> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    trace.push((c, fc));
    trace.push((d, fd));
    while b - a > GOLDEN_TOL {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
            trace.push((c, fc));
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
            trace.push((d, fd));
        }
    }
    Ok(if fc >= fd { (c, fc) } else { (d, fd) })
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Left,
    Right,
}

/// Where the profile likelihood falls to `target` on one side of the
/// maximizer; the grid edge when it never does.
fn profile_crossing(
    f: &impl Fn(f64) -> Result<f64>,
    etas: &[f64],
    eta_hat: f64,
    target: f64,
    edge: f64,
    curve: &[(f64, f64)],
    side: Side,
) -> Result<f64> {
    let value_at = |e: f64| curve.iter().find(|v| v.0 == e).map(|v| v.1);
    let below = etas
        .iter()
        .copied()
        .filter(|&e| match side {
            Side::Left => e < eta_hat,
            Side::Right => e > eta_hat,
        })
        .filter(|&e| value_at(e).is_some_and(|v| v < target));
    let outer = match side {
        Side::Left => below.fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e)))),
        Side::Right => below.fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.min(e)))),
    };
    let Some(mut out) = outer else {
        return Ok(edge);
    };
    let mut inner = eta_hat;
    while (inner - out).abs() > GOLDEN_TOL {
        let mid = 0.5 * (inner + out);
        if f(mid)? < target {
            out = mid;
        } else {
            inner = mid;
        }
    }
    Ok(0.5 * (inner + out))
}
