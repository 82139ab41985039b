//! Linear-Gaussian hidden Markov models and the concrete motion systems.
//!
//! Drag motion state is ordered `(p₁, v₁, a₁, p₂, v₂, a₂)`, uniform motion
//! `(p₁, v₁, p₂, v₂)`, Lorenz `(z₁, z₂, z₃)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Continuous-time dynamics `ẋ = A x`, possibly evaluated at a state.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsMatrix {
    pub matrix: Matrix,
    pub tag: &'static str,
}

/// State components present in the ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMap {
    indices: Vec<usize>,
}

impl SelectionMap {
    pub fn new(indices: Vec<usize>, state_dim: usize) -> Result<Self> {
        for (i, &a) in indices.iter().enumerate() {
            if a >= state_dim {
                return Err(Error::Config(format!(
                    "selection index {a} outside state dimension {state_dim}"
                )));
            }
            if indices[..i].contains(&a) {
                return Err(Error::Config(format!("selection index {a} repeated")));
            }
        }
        Ok(SelectionMap { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Transition {
    Constant,
    /// `F_{|x} = I + Σ_{j=1}^{J} (A_{|x} Δt)^j / j!`.
    Taylor {
        dynamics: fn(&[f64]) -> DynamicsMatrix,
        dt: f64,
        terms: usize,
    },
}

/// Distribution of the first latent state.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    /// Mean `Hᵀ y₁`, covariance `variance · I`.
    LiftedObservation { variance: f64 },
    Gaussian { mean: Vector, cov: Matrix },
}

impl Default for Prior {
    fn default() -> Self {
        Prior::LiftedObservation { variance: 100.0 }
    }
}

/// `x_k = F x_{k−1} + q_k`, `y_k = H x_k + r_k`, `q ~ N(0, Q)`, `r ~ N(0, R)`.
#[derive(Debug, Clone)]
pub struct GaussianHmm {
    transition: Transition,
    /// Constant transition; for state-dependent models this is `F` at the origin.
    f: Matrix,
    h: Matrix,
    q: Matrix,
    r: Matrix,
    q_inv: Matrix,
    r_inv: Matrix,
    prior: Prior,
    dt: f64,
    selection: SelectionMap,
}

fn spd_inverse(m: &Matrix, what: &str) -> Result<Matrix> {
    if m.nrows() != m.ncols() {
        return Err(Error::Factorization(format!("{what} is not square")));
    }
    let asym = (m - m.transpose()).abs().max();
    if !m.iter().all(|v| v.is_finite()) || asym > 1e-12 * m.abs().max().max(1.0) {
        return Err(Error::Factorization(format!("{what} is not symmetric")));
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Factorization(format!("{what} is not positive definite")))?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Cholesky succeeds and the matrix is symmetric.
pub fn is_spd(m: &Matrix) -> bool {
    spd_inverse(m, "matrix").is_ok()
}

impl GaussianHmm {
    pub fn new(
        transition: Transition,
        f: Matrix,
        h: Matrix,
        q: Matrix,
        r: Matrix,
        dt: f64,
        selection: SelectionMap,
    ) -> Result<Self> {
        let dx = f.nrows();
        let dy = h.nrows();
        let dims_ok = f.ncols() == dx
            && h.ncols() == dx
            && q.shape() == (dx, dx)
            && r.shape() == (dy, dy)
            && dx > 0
            && dy > 0;
        if !dims_ok {
            return Err(Error::shape(
                "GaussianHmm::new",
                format!(
                    "F {:?}, H {:?}, Q {:?}, R {:?}",
                    f.shape(),
                    h.shape(),
                    q.shape(),
                    r.shape()
                ),
            ));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        if selection.indices().iter().any(|&i| i >= dx) {
            return Err(Error::Config("selection outside state".into()));
        }
        let q_inv = spd_inverse(&q, "process noise Q")?;
        let r_inv = spd_inverse(&r, "measurement noise R")?;
        Ok(GaussianHmm {
            transition,
            f,
            h,
            q,
            r,
            q_inv,
            r_inv,
            prior: Prior::default(),
            dt,
            selection,
        })
    }

    pub fn with_prior(mut self, prior: Prior) -> Result<Self> {
        if let Prior::Gaussian { mean, cov } = &prior {
            if mean.len() != self.state_dim() {
                return Err(Error::shape("with_prior", "prior mean has wrong length"));
            }
            spd_inverse(cov, "prior covariance")?;
        }
        self.prior = prior;
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn transition(&self) -> Transition {
        self.transition
    }

    pub fn is_state_dependent(&self) -> bool {
        matches!(self.transition, Transition::Taylor { .. })
    }

    /// Transition matrix at state `x` (the constant `F` for linear models).
    pub fn transition_at(&self, x: &[f64]) -> Matrix {
        match self.transition {
            Transition::Constant => self.f.clone(),
            Transition::Taylor {
                dynamics,
                dt,
                terms,
            } => taylor_transition(&dynamics(x), dt, terms),
        }
    }

    /// The constant transition matrix; `None` for state-dependent models.
    pub fn constant_transition(&self) -> Option<&Matrix> {
        match self.transition {
            Transition::Constant => Some(&self.f),
            Transition::Taylor { .. } => None,
        }
    }

    pub fn measurement(&self) -> &Matrix {
        &self.h
    }

    pub fn process_noise(&self) -> &Matrix {
        &self.q
    }

    pub fn measurement_noise(&self) -> &Matrix {
        &self.r
    }

    pub fn process_noise_inv(&self) -> &Matrix {
        &self.q_inv
    }

    pub fn measurement_noise_inv(&self) -> &Matrix {
        &self.r_inv
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn selection(&self) -> &SelectionMap {
        &self.selection
    }

    /// Prior mean and covariance given the first observation.
    pub fn prior_for(&self, first_obs: &Vector) -> (Vector, Matrix) {
        match &self.prior {
            Prior::LiftedObservation { variance } => (
                self.h.transpose() * first_obs,
                Matrix::identity(self.state_dim(), self.state_dim()) * *variance,
            ),
            Prior::Gaussian { mean, cov } => (mean.clone(), cov.clone()),
        }
    }
}

/// `I + Σ_{j=1}^{J} (A Δt)^j / j!`.
pub fn taylor_transition(a: &DynamicsMatrix, dt: f64, terms: usize) -> Matrix {
    let n = a.matrix.nrows();
    let step = &a.matrix * dt;
    let mut out = Matrix::identity(n, n);
    let mut power = Matrix::identity(n, n);
    for j in 1..=terms {
        power = &power * &step / j as f64;
        out += &power;
    }
    out
}

pub const LORENZ_SIGMA: f64 = 10.0;
pub const LORENZ_RHO: f64 = 28.0;
pub const LORENZ_BETA: f64 = 8.0 / 3.0;

/// Right-hand side of the Lorenz system.
pub fn lorenz_rhs(z: &[f64; 3]) -> [f64; 3] {
    [
        LORENZ_SIGMA * (z[1] - z[0]),
        z[0] * (LORENZ_RHO - z[2]) - z[1],
        z[0] * z[1] - LORENZ_BETA * z[2],
    ]
}

/// State-dependent factorization `ẋ = A_{|x} x` of the Lorenz system.
///
/// This is not the Jacobian: the `z₁` dependence of rows two and three is
/// folded into the matrix entries.
pub fn lorenz_dynamics(x: &[f64]) -> DynamicsMatrix {
    let (z2, z3) = (x[1], x[2]);
    DynamicsMatrix {
        matrix: Matrix::from_row_slice(
            3,
            3,
            &[
                -LORENZ_SIGMA,
                LORENZ_SIGMA,
                0.0,
                LORENZ_RHO - z3,
                -1.0,
                0.0,
                z2,
                0.0,
                -LORENZ_BETA,
            ],
        ),
        tag: "lorenz",
    }
}

fn block_diag2(block: &Matrix) -> Matrix {
    let n = block.nrows();
    let mut out = Matrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(block);
    out.view_mut((n, n), (n, n)).copy_from(block);
    out
}

/// Observe component 0 of each per-axis block.
fn position_selector(block: usize) -> Matrix {
    let mut h = Matrix::zeros(2, 2 * block);
    h[(0, 0)] = 1.0;
    h[(1, block)] = 1.0;
    h
}

fn positions(block: usize) -> SelectionMap {
    SelectionMap {
        indices: vec![0, block],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DragParams {
    pub c: f64,
    pub tau: f64,
    pub dt: f64,
    pub sigma_q: f64,
    pub sigma_r: f64,
}

impl Default for DragParams {
    fn default() -> Self {
        DragParams {
            c: 0.06,
            tau: 0.17,
            dt: 1.0,
            sigma_q: 0.1,
            sigma_r: 0.5,
        }
    }
}

/// Per-axis transition of the drag system, entries as tabulated for the
/// linear-dynamics dataset.
pub fn drag_block(c: f64, tau: f64, dt: f64) -> Matrix {
    let dt2 = dt * dt;
    Matrix::from_row_slice(
        3,
        3,
        &[
            1.0,
            dt - 0.5 * c * dt2,
            0.5 * dt2,
            0.0,
            1.0 - c * dt + 0.5 * (c * c - tau) * dt2,
            dt - 0.5 * c * dt2,
            0.0,
            -tau * c + 0.5 * tau * c * dt2,
            1.0 - 0.5 * tau * dt2,
        ],
    )
}

fn drag_like(block: Matrix, dt: f64, sigma_q: f64, sigma_r: f64) -> Result<GaussianHmm> {
    if !(sigma_q > 0.0 && sigma_r > 0.0) {
        return Err(Error::Config("noise scales must be positive".into()));
    }
    let q_block = Matrix::from_diagonal(&Vector::from_vec(vec![dt / 3.0, dt, 3.0 * dt]));
    GaussianHmm::new(
        Transition::Constant,
        block_diag2(&block),
        position_selector(3),
        block_diag2(&q_block) * (sigma_q * sigma_q),
        Matrix::identity(2, 2) * (sigma_r * sigma_r),
        dt,
        positions(3),
    )
}

/// Non-uniformly accelerated motion with drag, two axes.
pub fn build_drag_model(p: DragParams) -> Result<GaussianHmm> {
    if !(p.dt > 0.0) {
        return Err(Error::Config(format!("time step must be positive, got {}", p.dt)));
    }
    drag_like(drag_block(p.c, p.tau, p.dt), p.dt, p.sigma_q, p.sigma_r)
}

/// Constant-acceleration motion with the drag model's noise layout.
pub fn build_uniform_acceleration_model(dt: f64, sigma_q: f64, sigma_r: f64) -> Result<GaussianHmm> {
    let block = Matrix::from_row_slice(3, 3, &[1.0, dt, 0.5 * dt * dt, 0.0, 1.0, dt, 0.0, 0.0, 1.0]);
    drag_like(block, dt, sigma_q, sigma_r)
}

/// Uniform motion `p = p₀ + v t` per axis: `Q = σ² diag(Δt, Δt)`, `R = λ² I`.
pub fn build_uniform_motion_model(dt: f64, sigma: f64, lambda: f64) -> Result<GaussianHmm> {
    if !(dt > 0.0 && sigma > 0.0 && lambda > 0.0) {
        return Err(Error::Config(format!(
            "uniform motion needs positive dt, sigma, lambda (got {dt}, {sigma}, {lambda})"
        )));
    }
    let block = Matrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
    let q_block = Matrix::identity(2, 2) * (dt * sigma * sigma);
    GaussianHmm::new(
        Transition::Constant,
        block_diag2(&block),
        position_selector(2),
        block_diag2(&q_block),
        Matrix::identity(2, 2) * (lambda * lambda),
        dt,
        positions(2),
    )
}

/// Lorenz system with a Taylor transition of `terms` terms, `H = I`,
/// `Q = σ² Δt I`, `R = λ² I`.
pub fn build_lorenz_model(dt: f64, terms: usize, sigma: f64, lambda: f64) -> Result<GaussianHmm> {
    if !(dt > 0.0 && sigma > 0.0 && lambda > 0.0) {
        return Err(Error::Config(format!(
            "lorenz model needs positive dt, sigma, lambda (got {dt}, {sigma}, {lambda})"
        )));
    }
    let transition = Transition::Taylor {
        dynamics: lorenz_dynamics,
        dt,
        terms,
    };
    let f0 = taylor_transition(&lorenz_dynamics(&[0.0; 3]), dt, terms);
    GaussianHmm::new(
        transition,
        f0,
        Matrix::identity(3, 3),
        Matrix::identity(3, 3) * (sigma * sigma * dt),
        Matrix::identity(3, 3) * (lambda * lambda),
        dt,
        SelectionMap {
            indices: vec![0, 1, 2],
        },
    )
}

/// Named model builder with scalar parameters, as written in experiment
/// configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builder", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Drag {
        dt: f64,
        c: f64,
        tau: f64,
        sigma_q: f64,
        sigma_r: f64,
    },
    UniformAcceleration {
        dt: f64,
        sigma_q: f64,
        sigma_r: f64,
    },
    UniformMotion {
        dt: f64,
        sigma: f64,
        lambda: f64,
    },
    Lorenz {
        dt: f64,
        terms: usize,
        sigma: f64,
        lambda: f64,
    },
}

impl ModelSpec {
    pub fn build(&self) -> Result<GaussianHmm> {
        match *self {
            ModelSpec::Drag {
                dt,
                c,
                tau,
                sigma_q,
                sigma_r,
            } => build_drag_model(DragParams {
                c,
                tau,
                dt,
                sigma_q,
                sigma_r,
            }),
            ModelSpec::UniformAcceleration {
                dt,
                sigma_q,
                sigma_r,
            } => build_uniform_acceleration_model(dt, sigma_q, sigma_r),
            ModelSpec::UniformMotion { dt, sigma, lambda } => {
                build_uniform_motion_model(dt, sigma, lambda)
            }
            ModelSpec::Lorenz {
                dt,
                terms,
                sigma,
                lambda,
            } => build_lorenz_model(dt, terms, sigma, lambda),
        }
    }

    /// Transition-noise scale (σ, or σ_q).
    pub fn sigma(&self) -> f64 {
        match *self {
            ModelSpec::Drag { sigma_q, .. } | ModelSpec::UniformAcceleration { sigma_q, .. } => {
                sigma_q
            }
            ModelSpec::UniformMotion { sigma, .. } | ModelSpec::Lorenz { sigma, .. } => sigma,
        }
    }

    /// Measurement-noise scale (λ, or σ_r).
    pub fn lambda(&self) -> f64 {
        match *self {
            ModelSpec::Drag { sigma_r, .. } | ModelSpec::UniformAcceleration { sigma_r, .. } => {
                sigma_r
            }
            ModelSpec::UniformMotion { lambda, .. } | ModelSpec::Lorenz { lambda, .. } => lambda,
        }
    }

    /// Same builder with replaced noise scales.
    pub fn with_noise(&self, sigma: f64, lambda: f64) -> ModelSpec {
        let mut out = self.clone();
        match &mut out {
            ModelSpec::Drag {
                sigma_q, sigma_r, ..
            }
            | ModelSpec::UniformAcceleration {
                sigma_q, sigma_r, ..
            } => {
                *sigma_q = sigma;
                *sigma_r = lambda;
            }
            ModelSpec::UniformMotion {
                sigma: s,
                lambda: l,
                ..
            }
            | ModelSpec::Lorenz {
                sigma: s,
                lambda: l,
                ..
            } => {
                *s = sigma;
                *l = lambda;
            }
        }
        out
    }
}
