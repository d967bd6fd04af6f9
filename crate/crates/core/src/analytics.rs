//! Closed-form invariants of monitored relaxation (no drive, no dephasing).
//!
//! `alpha = 1 + S_L / (2 p_e^2)` evolves deterministically as
//! `alpha(t) = eta + (alpha(0) - eta) e^{g1 t}` whatever the record, which
//! pins every conditioned state at time `t` to the spheroid
//! `alpha (x^2 + y^2) + alpha^2 (z + 1 - 1/alpha)^2 = 1` through |g>. The
//! position on that spheroid, `xi = (x, y) / (z + 1)`, is a linear
//! functional of the record.

use serde::{Deserialize, Serialize};

use crate::error::{QsdError, Result};
use crate::sde::{measurement_coupling, HeterodyneRecord, Trajectory};
use crate::state::{excited_prob, linear_entropy, steps_for, InitialState, QubitState, SimParams};

/// Excitation probability at or below which a state counts as absorbed in |g>.
pub const EPS_PE: f64 = 1e-6;

/// `z + 1` floor for `xi`. Equal to `2 * EPS_PE` so that `alpha_of` and
/// `xi_of` reject exactly the same states (`z + 1 = 2 p_e`).
pub const EPS_Z: f64 = 2.0 * EPS_PE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpheroidCoord {
    pub alpha: f64,
    pub xi_x: f64,
    pub xi_y: f64,
}

pub fn alpha_of(s: &QubitState) -> Result<f64> {
    alpha_of_with_floor(s, EPS_PE)
}

pub fn alpha_of_with_floor(s: &QubitState, eps_pe: f64) -> Result<f64> {
    let pe = excited_prob(s);
    if !(pe > eps_pe) {
        return Err(QsdError::AtSouthPole);
    }
    Ok(1.0 + linear_entropy(s) / (2.0 * pe * pe))
}

/// Deterministic evolution of `alpha` under monitored decay.
pub fn alpha_flow(alpha0: f64, p: &SimParams, t: f64) -> f64 {
    p.eta + (alpha0 - p.eta) * (p.gamma1 * t).exp()
}

/// Signed residual of the spheroid equation; zero on the surface.
pub fn spheroid_residual(s: &QubitState, alpha: f64) -> f64 {
    let [x, y, z] = s.bloch();
    let w = z + 1.0 - 1.0 / alpha;
    alpha * (x * x + y * y) + alpha * alpha * w * w - 1.0
}

pub fn xi_of(s: &QubitState) -> Result<(f64, f64)> {
    xi_of_with_floor(s, EPS_Z)
}

pub fn xi_of_with_floor(s: &QubitState, eps_z: f64) -> Result<(f64, f64)> {
    let [x, y, _] = s.bloch();
    // z + 1 = 2 p_e; using p_e keeps the floor test identical to alpha_of's
    let w = 2.0 * excited_prob(s);
    if !(w > eps_z) {
        return Err(QsdError::AtSouthPole);
    }
    Ok((x / w, y / w))
}

pub fn spheroid_coord(s: &QubitState) -> Result<SpheroidCoord> {
    let alpha = alpha_of(s)?;
    let (xi_x, xi_y) = xi_of(s)?;
    Ok(SpheroidCoord { alpha, xi_x, xi_y })
}

/// `xi` at every grid time `0, dt, ..., len*dt`, from the record alone.
///
/// Left-point (Ito) quadrature of
/// `xi(t) = xi(0) e^{g1 t/2} + sqrt(eta g1/2) int_0^t e^{g1 (t-s)/2} dI_s`,
/// evaluated by the recursion `xi_{k+1} = e^{g1 dt/2} (xi_k + c dI_k)`.
pub fn xi_path_from_record(xi0: (f64, f64), rec: &HeterodyneRecord, p: &SimParams) -> Vec<(f64, f64)> {
    let growth = (0.5 * p.gamma1 * rec.dt).exp();
    let c = measurement_coupling(p);
    let mut xi = xi0;
    let mut path = Vec::with_capacity(rec.len() + 1);
    path.push(xi);
    for &(di, dq) in &rec.increments {
        xi = (growth * (xi.0 + c * di), growth * (xi.1 + c * dq));
        path.push(xi);
    }
    path
}

pub fn xi_from_record(
    xi0: (f64, f64),
    rec: &HeterodyneRecord,
    p: &SimParams,
    t: f64,
) -> Result<(f64, f64)> {
    let n = steps_for(t, rec.dt)?;
    if n > rec.len() {
        return Err(QsdError::Config(format!(
            "t = {t} exceeds record horizon {}",
            rec.horizon()
        )));
    }
    let truncated = HeterodyneRecord::new(rec.dt, rec.increments[..n].to_vec());
    Ok(*xi_path_from_record(xi0, &truncated, p).last().expect("non-empty path"))
}

/// Bloch point with spheroid coordinates `c`.
///
/// With `w = z + 1` and `r^2 = |xi|^2`, the spheroid equation reduces to
/// `w (alpha (alpha + r^2) w - 2 alpha) = 0`; the physical root is
/// `w = 2 / (alpha + r^2)`.
pub fn state_from_spheroid(c: SpheroidCoord) -> Result<QubitState> {
    if !(c.alpha >= 1.0 - 1e-9) {
        return Err(QsdError::InvalidState(format!(
            "alpha = {} < 1 does not describe a physical spheroid",
            c.alpha
        )));
    }
    let r2 = c.xi_x * c.xi_x + c.xi_y * c.xi_y;
    let w = 2.0 / (c.alpha + r2);
    if !(w > 0.0 && w.is_finite()) {
        return Err(QsdError::Internal(format!("no positive root for {c:?}")));
    }
    // alpha >= 1 guarantees |b| <= 1 up to rounding
    let b = [c.xi_x * w, c.xi_y * w, w - 1.0];
    QubitState::from_bloch(b).or_else(|_| {
        let n = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
        if n <= 1.0 + 1e-6 {
            QubitState::from_bloch([b[0] / n, b[1] / n, b[2] / n])
        } else {
            Err(QsdError::Internal(format!("reconstruction left the Bloch ball: {b:?}")))
        }
    })
}

/// Record-only reconstruction of the conditioned trajectory from
/// `(alpha_flow, xi_path_from_record)`.
pub fn reconstruct_from_record(
    init: InitialState,
    rec: &HeterodyneRecord,
    p: &SimParams,
) -> Result<Vec<QubitState>> {
    let s0 = init.state()?;
    let c0 = spheroid_coord(&s0)?;
    xi_path_from_record((c0.xi_x, c0.xi_y), rec, p)
        .into_iter()
        .enumerate()
        .map(|(k, (xi_x, xi_y))| {
            state_from_spheroid(SpheroidCoord {
                alpha: alpha_flow(c0.alpha, p, rec.time(k)),
                xi_x,
                xi_y,
            })
        })
        .collect()
}

pub fn bloch_distance(a: &QubitState, b: &QubitState) -> f64 {
    let (u, v) = (a.bloch(), b.bloch());
    ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2)).sqrt()
}

/// How closely a filtered trajectory follows the closed-form laws.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InvariantSummary {
    /// `max |alpha_of - alpha_flow| / alpha_flow` over non-absorbed states.
    pub alpha_max_rel_error: f64,
    /// `max |spheroid_residual(rho_t, alpha_flow(t))|`.
    pub spheroid_max_abs_residual: f64,
    /// Max Bloch distance between the record-only reconstruction and the
    /// filtered states; `None` when the initial state is |g>.
    pub reconstruction_max_distance: Option<f64>,
    /// States skipped because they were absorbed at |g>.
    pub absorbed_states: usize,
}

impl InvariantSummary {
    pub fn merge(self, other: Self) -> Self {
        let recon = match (self.reconstruction_max_distance, other.reconstruction_max_distance) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        Self {
            alpha_max_rel_error: self.alpha_max_rel_error.max(other.alpha_max_rel_error),
            spheroid_max_abs_residual: self
                .spheroid_max_abs_residual
                .max(other.spheroid_max_abs_residual),
            reconstruction_max_distance: recon,
            absorbed_states: self.absorbed_states + other.absorbed_states,
        }
    }
}

pub fn trajectory_invariants(
    init: InitialState,
    traj: &Trajectory,
    rec: &HeterodyneRecord,
) -> Result<InvariantSummary> {
    let p = &traj.params;
    let s0 = init.state()?;
    let alpha0 = match alpha_of(&s0) {
        Ok(a) => a,
        Err(QsdError::AtSouthPole) => {
            return Ok(InvariantSummary {
                absorbed_states: traj.len(),
                ..Default::default()
            })
        }
        Err(e) => return Err(e),
    };
    let mut out = InvariantSummary::default();
    for (t, s) in traj.times.iter().zip(&traj.states) {
        let flow = alpha_flow(alpha0, p, *t);
        out.spheroid_max_abs_residual = out.spheroid_max_abs_residual.max(spheroid_residual(s, flow).abs());
        match alpha_of(s) {
            Ok(a) => out.alpha_max_rel_error = out.alpha_max_rel_error.max((a - flow).abs() / flow),
            Err(_) => out.absorbed_states += 1,
        }
    }
    let recon = reconstruct_from_record(init, rec, p)?;
    out.reconstruction_max_distance = Some(
        recon
            .iter()
            .zip(&traj.states)
            .map(|(a, b)| bloch_distance(a, b))
            .fold(0.0, f64::max),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{filter, synthesize, Scheme};
    use crate::state::density_from_bloch;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn alpha_examples() {
        assert!(close(alpha_of(&QubitState::plus_x()).unwrap(), 1.0, 1e-15));
        assert!(close(alpha_of(&QubitState::excited()).unwrap(), 1.0, 1e-15));
        // S_L = 1/2, p_e = 1/2 -> 1 + (1/2)/(2 * 1/4) = 2
        assert!(close(alpha_of(&QubitState::maximally_mixed()).unwrap(), 2.0, 1e-15));
        assert!(matches!(alpha_of(&QubitState::ground()), Err(QsdError::AtSouthPole)));
    }

    #[test]
    fn alpha_flow_examples() {
        let p = SimParams::reference();
        for t in [0.0, 1.0, 7.3] {
            assert_eq!(alpha_flow(1.0, &p.with_eta(1.0), t), 1.0);
        }
        assert_eq!(alpha_flow(1.7, &p, 0.0), 1.7);
        let t = 1.0 / p.gamma1;
        let want = 0.24 + 0.76 * std::f64::consts::E;
        assert!(close(alpha_flow(1.0, &p, t), want, 1e-12));
        assert!(close(want, 2.306, 1e-3));
    }

    #[test]
    fn spheroid_residual_examples() {
        for alpha in [1.0, 2.0, 17.0] {
            assert_eq!(spheroid_residual(&QubitState::ground(), alpha), 0.0);
        }
        assert!(close(spheroid_residual(&QubitState::maximally_mixed(), 2.0), 0.0, 1e-15));
        assert!(close(spheroid_residual(&QubitState::plus_x(), 1.0), 0.0, 1e-15));
        assert!(spheroid_residual(&QubitState::maximally_mixed(), 1.0).abs() > 0.1);
    }

    #[test]
    fn xi_examples() {
        assert_eq!(xi_of(&QubitState::plus_x()).unwrap(), (1.0, 0.0));
        assert_eq!(xi_of(&QubitState::excited()).unwrap(), (0.0, 0.0));
        let (a, b) = xi_of(&density_from_bloch([0.3, 0.4, -0.5]).unwrap()).unwrap();
        assert!(close(a, 0.6, 1e-15) && close(b, 0.8, 1e-15));
        assert!(matches!(xi_of(&QubitState::ground()), Err(QsdError::AtSouthPole)));
    }

    #[test]
    fn xi_from_zero_record() {
        let p = SimParams::reference().with_dt(0.01);
        let t = 1.0 / p.gamma1;
        let n = steps_for((t / p.dt).round() * p.dt, p.dt).unwrap();
        let rec = HeterodyneRecord::new(p.dt, vec![(0.0, 0.0); n]);
        let tg = n as f64 * p.dt;
        assert_eq!(xi_from_record((0.0, 0.0), &rec, &p, tg).unwrap(), (0.0, 0.0));
        let (xx, xy) = xi_from_record((1.0, 0.0), &rec, &p, tg).unwrap();
        assert!(close(xx, (0.5 * p.gamma1 * tg).exp(), 1e-12));
        assert_eq!(xy, 0.0);
        // exact grid with gamma1 t = 1
        let q = SimParams { gamma1: 1.0, dt: 0.001, ..p };
        let rec = HeterodyneRecord::new(q.dt, vec![(0.0, 0.0); 1000]);
        let (xx, _) = xi_from_record((1.0, 0.0), &rec, &q, 1.0).unwrap();
        assert!(close(xx, 1.6487, 1e-4));
        assert!(xi_from_record((1.0, 0.0), &rec, &q, 1.0005).is_err());
        assert!(xi_from_record((1.0, 0.0), &rec, &q, 2.0).is_err());
    }

    #[test]
    fn xi_record_matches_filter() {
        let p = SimParams::reference().with_gamma_phi(0.0).with_dt(0.01).with_horizon(2.0 * 4.15);
        let (rec, _) = synthesize(InitialState::PlusX, &p, 21).unwrap();
        let traj = filter(InitialState::PlusX, &rec, &p, Scheme::Kraus).unwrap();
        let path = xi_path_from_record((1.0, 0.0), &rec, &p);
        for (s, xi) in traj.states.iter().zip(&path) {
            if let Ok((fx, fy)) = xi_of(s) {
                let scale = fx.abs().max(fy.abs()).max(1.0);
                assert!((fx - xi.0).abs() <= 1e-2 * scale && (fy - xi.1).abs() <= 1e-2 * scale);
            }
        }
    }

    #[test]
    fn spheroid_inversion_examples() {
        let s = state_from_spheroid(SpheroidCoord { alpha: 1.0, xi_x: 1.0, xi_y: 0.0 }).unwrap();
        assert_eq!(s.bloch(), [1.0, 0.0, 0.0]);
        let s = state_from_spheroid(SpheroidCoord { alpha: 2.0, xi_x: 0.0, xi_y: 0.0 }).unwrap();
        assert_eq!(s.bloch(), [0.0, 0.0, 0.0]);
        assert!(state_from_spheroid(SpheroidCoord { alpha: 0.5, xi_x: 0.0, xi_y: 0.0 }).is_err());
    }

    #[test]
    fn pole_floors_agree_near_threshold() {
        for z in [-1.0, -1.0 + 1e-7, -1.0 + 1.999e-6, -1.0 + 2.001e-6, -0.9] {
            let s = density_from_bloch([0.0, 0.0, z]).unwrap();
            assert_eq!(alpha_of(&s).is_err(), xi_of(&s).is_err(), "z = {z}");
        }
    }

    fn ball_point() -> impl Strategy<Value = [f64; 3]> {
        (0.0f64..=1.0, -1.0f64..=1.0, 0.0..std::f64::consts::TAU).prop_map(|(r, cz, phi)| {
            let sz = (1.0 - cz * cz).sqrt();
            [r * sz * phi.cos(), r * sz * phi.sin(), r * cz]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn spheroid_round_trip(b in ball_point()) {
            prop_assume!(b[2] > -1.0 + 1e-3);
            let s = density_from_bloch(b).unwrap();
            let c = spheroid_coord(&s).unwrap();
            prop_assert!(c.alpha >= 1.0 - 1e-9);
            prop_assert!(spheroid_residual(&s, c.alpha).abs() < 1e-9);
            let back = state_from_spheroid(c).unwrap().bloch();
            for k in 0..3 {
                prop_assert!((back[k] - b[k]).abs() <= 1e-10, "{:?} vs {:?}", back, b);
            }
        }

        #[test]
        fn south_pole_signals_coincide(b in ball_point(), lift in 0.0f64..1e-5) {
            // concentrate samples around the floor
            let z = -1.0 + lift;
            let r = (1.0 - z * z).sqrt().min((b[0] * b[0] + b[1] * b[1]).sqrt());
            let s = density_from_bloch([r, 0.0, z]).unwrap();
            prop_assert_eq!(alpha_of(&s).is_err(), xi_of(&s).is_err());
            let s = density_from_bloch(b).unwrap();
            prop_assert_eq!(alpha_of(&s).is_err(), xi_of(&s).is_err());
        }
    }
}
