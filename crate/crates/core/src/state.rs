//! Single-qubit states, Pauli algebra and the scalar functionals used by
//! every other module.
//!
//! Basis ordering is `(|e>, |g>)`: index 0 is the excited state (north pole,
//! `z = +1`) and index 1 the ground state (south pole, `z = -1`). With this
//! ordering `sigma_z = diag(1, -1)` and `p_e = (1 + <sigma_z>) / 2`.

use nalgebra::Matrix2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{QsdError, Result};

pub type Mat2 = Matrix2<Complex64>;

/// Tolerance for trace and hermiticity checks.
pub const STATE_TOL: f64 = 1e-12;
/// Allowed excess of the Bloch norm over one.
pub const BLOCH_NORM_TOL: f64 = 1e-9;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Constant Pauli and ladder matrices.
pub struct PauliOps;

impl PauliOps {
    pub fn identity() -> Mat2 {
        Mat2::new(ONE, ZERO, ZERO, ONE)
    }

    pub fn sigma_x() -> Mat2 {
        Mat2::new(ZERO, ONE, ONE, ZERO)
    }

    pub fn sigma_y() -> Mat2 {
        Mat2::new(ZERO, -I, I, ZERO)
    }

    pub fn sigma_z() -> Mat2 {
        Mat2::new(ONE, ZERO, ZERO, -ONE)
    }

    /// Lowering operator `|g><e|`.
    pub fn sigma_minus() -> Mat2 {
        Mat2::new(ZERO, ZERO, ONE, ZERO)
    }

    /// Raising operator `|e><g|`.
    pub fn sigma_plus() -> Mat2 {
        Mat2::new(ZERO, ONE, ZERO, ZERO)
    }
}

/// A qubit density matrix.
///
/// Constructors that take external input validate the physical invariants;
/// [`QubitState::from_matrix_unchecked`] exists for integrators (the Euler
/// scheme) that are allowed to leave the physical region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QubitState {
    rho: Mat2,
}

impl QubitState {
    pub fn excited() -> Self {
        Self {
            rho: Mat2::new(ONE, ZERO, ZERO, ZERO),
        }
    }

    pub fn ground() -> Self {
        Self {
            rho: Mat2::new(ZERO, ZERO, ZERO, ONE),
        }
    }

    pub fn plus_x() -> Self {
        let h = Complex64::new(0.5, 0.0);
        Self {
            rho: Mat2::new(h, h, h, h),
        }
    }

    pub fn maximally_mixed() -> Self {
        Self {
            rho: PauliOps::identity() * Complex64::new(0.5, 0.0),
        }
    }

    /// `rho = (1 + x sx + y sy + z sz) / 2`.
    pub fn from_bloch(b: [f64; 3]) -> Result<Self> {
        let norm2 = b[0] * b[0] + b[1] * b[1] + b[2] * b[2];
        if !norm2.is_finite() || norm2.sqrt() > 1.0 + BLOCH_NORM_TOL {
            return Err(QsdError::InvalidState(format!(
                "Bloch vector {b:?} has norm {} > 1",
                norm2.sqrt()
            )));
        }
        Ok(Self::from_bloch_unchecked(b))
    }

    pub(crate) fn from_bloch_unchecked(b: [f64; 3]) -> Self {
        let [x, y, z] = b;
        let coh = Complex64::new(0.5 * x, 0.5 * y);
        Self {
            rho: Mat2::new(
                Complex64::new(0.5 * (1.0 + z), 0.0),
                coh.conj(),
                coh,
                Complex64::new(0.5 * (1.0 - z), 0.0),
            ),
        }
    }

    pub fn from_matrix(rho: Mat2) -> Result<Self> {
        let s = Self { rho };
        s.validate()?;
        Ok(s)
    }

    pub fn from_matrix_unchecked(rho: Mat2) -> Self {
        Self { rho }
    }

    pub fn matrix(&self) -> &Mat2 {
        &self.rho
    }

    /// `(<sx>, <sy>, <sz>)`.
    pub fn bloch(&self) -> [f64; 3] {
        let coh = self.rho[(1, 0)];
        [
            2.0 * coh.re,
            2.0 * coh.im,
            self.rho[(0, 0)].re - self.rho[(1, 1)].re,
        ]
    }

    pub fn x(&self) -> f64 {
        2.0 * self.rho[(1, 0)].re
    }

    pub fn y(&self) -> f64 {
        2.0 * self.rho[(1, 0)].im
    }

    pub fn z(&self) -> f64 {
        self.rho[(0, 0)].re - self.rho[(1, 1)].re
    }

    pub fn trace(&self) -> Complex64 {
        self.rho.trace()
    }

    /// `Tr(rho^2)`.
    pub fn purity(&self) -> f64 {
        (self.rho * self.rho).trace().re
    }

    /// Eigenvalues of the Hermitian part, ascending.
    pub fn eigenvalues(&self) -> [f64; 2] {
        let a = self.rho[(0, 0)].re;
        let d = self.rho[(1, 1)].re;
        let off = 0.5 * (self.rho[(1, 0)] + self.rho[(0, 1)].conj());
        let mean = 0.5 * (a + d);
        let radius = (0.25 * (a - d) * (a - d) + off.norm_sqr()).sqrt();
        [mean - radius, mean + radius]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    /// Checks trace, hermiticity, positivity and Bloch norm.
    pub fn validate(&self) -> Result<()> {
        let tr = self.trace();
        if !((tr.re - 1.0).abs() <= STATE_TOL && tr.im.abs() <= STATE_TOL) {
            return Err(QsdError::InvalidState(format!("trace {tr} != 1")));
        }
        let herm = (self.rho - self.rho.adjoint()).iter().map(|c| c.norm()).fold(0.0, f64::max);
        if !(herm <= STATE_TOL) {
            return Err(QsdError::InvalidState(format!(
                "not Hermitian (deviation {herm:.3e})"
            )));
        }
        let lmin = self.min_eigenvalue();
        if !(lmin >= -STATE_TOL) {
            return Err(QsdError::InvalidState(format!(
                "negative eigenvalue {lmin:.3e}"
            )));
        }
        let [x, y, z] = self.bloch();
        let norm = (x * x + y * y + z * z).sqrt();
        if norm > 1.0 + BLOCH_NORM_TOL {
            return Err(QsdError::InvalidState(format!("Bloch norm {norm} > 1")));
        }
        Ok(())
    }

    pub fn expect(&self, op: &Mat2) -> Complex64 {
        (self.rho * op).trace()
    }
}

pub fn density_from_bloch(b: [f64; 3]) -> Result<QubitState> {
    QubitState::from_bloch(b)
}

pub fn bloch_from_density(s: &QubitState) -> [f64; 3] {
    s.bloch()
}

/// `S_L = 1 - Tr(rho^2)`; lies in `[0, 1/2]` for physical states.
pub fn linear_entropy(s: &QubitState) -> f64 {
    // Bloch form (1 - |b|^2) / 2 is the same quantity with less cancellation
    // than 1 - Tr(rho^2) for the 2x2 case.
    let [x, y, z] = s.bloch();
    0.5 * (1.0 - (x * x + y * y + z * z))
}

/// `p_e = (1 + <sigma_z>) / 2`.
pub fn excited_prob(s: &QubitState) -> f64 {
    s.rho[(0, 0)].re
}

/// Physical and detection parameters. Times in microseconds, rates in 1/us.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub gamma1: f64,
    pub gamma_phi: f64,
    pub eta: f64,
    pub dt: f64,
    pub horizon: f64,
    pub master_seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self::reference()
    }
}

impl SimParams {
    /// T1 = 4.15 us, T_phi = 35 us, eta = 0.24, dt = 200 ns, 10 us records.
    pub fn reference() -> Self {
        Self {
            gamma1: 1.0 / 4.15,
            gamma_phi: 1.0 / 35.0,
            eta: 0.24,
            dt: 0.2,
            horizon: 10.0,
            master_seed: 0x5EED_0001,
        }
    }

    pub fn with_eta(self, eta: f64) -> Self {
        Self { eta, ..self }
    }

    pub fn with_dt(self, dt: f64) -> Self {
        Self { dt, ..self }
    }

    pub fn with_horizon(self, horizon: f64) -> Self {
        Self { horizon, ..self }
    }

    pub fn with_gamma_phi(self, gamma_phi: f64) -> Self {
        Self { gamma_phi, ..self }
    }

    pub fn with_seed(self, master_seed: u64) -> Self {
        Self { master_seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(QsdError::InvalidParams(msg));
        if !(self.gamma1 > 0.0 && self.gamma1.is_finite()) {
            return bad(format!("gamma1 must be > 0, got {}", self.gamma1));
        }
        if !(self.gamma_phi >= 0.0 && self.gamma_phi.is_finite()) {
            return bad(format!("gamma_phi must be >= 0, got {}", self.gamma_phi));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must be in [0, 1], got {}", self.eta));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.horizon >= self.dt && self.horizon.is_finite()) {
            return bad(format!(
                "horizon {} must be >= dt {}",
                self.horizon, self.dt
            ));
        }
        self.n_steps()?;
        Ok(())
    }

    /// Number of record increments covering the horizon.
    pub fn n_steps(&self) -> Result<usize> {
        steps_for(self.horizon, self.dt)
    }

    /// Warning text when `gamma1 * dt` is no longer small.
    pub fn stiffness_warning(&self) -> Option<String> {
        let g = self.gamma1 * self.dt;
        (g > 0.05).then(|| format!("gamma1*dt = {g:.3} exceeds 0.05; discretization error may be large"))
    }
}

/// `t / dt` as an integer step count, rejecting non-multiples.
pub fn steps_for(t: f64, dt: f64) -> Result<usize> {
    let n = (t / dt).round();
    if !(n >= 0.0) || (n * dt - t).abs() > 1e-9 * t.abs().max(dt) {
        return Err(QsdError::Config(format!(
            "time {t} is not a multiple of dt = {dt}"
        )));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    PlusX,
    Excited,
    Ground,
    /// Bloch vector of an arbitrary preparation.
    Custom([f64; 3]),
}

impl InitialState {
    pub fn state(&self) -> Result<QubitState> {
        Ok(match self {
            Self::PlusX => QubitState::plus_x(),
            Self::Excited => QubitState::excited(),
            Self::Ground => QubitState::ground(),
            Self::Custom(b) => QubitState::from_bloch(*b)?,
        })
    }

    pub fn label(&self) -> String {
        match self {
            Self::PlusX => "plus_x".into(),
            Self::Excited => "excited".into(),
            Self::Ground => "ground".into(),
            Self::Custom([x, y, z]) => format!("custom({x},{y},{z})"),
        }
    }
}
