//! Classical inference: gradient-ascent GM messages, Kalman filtering and
//! Rauch–Tung–Striebel smoothing (plain and extended).

use std::rc::Rc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::hmm::{GaussianHmm, Matrix, Vector};
use crate::nn::{Tensor, Var};

/// Estimates larger than this in magnitude count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

pub(crate) fn to_tensor(m: &Matrix) -> Tensor {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

pub(crate) fn row_vector(t: &Tensor, k: usize) -> Vector {
    Vector::from_iterator(t.ncols(), t.row(k).iter().copied())
}

pub(crate) fn rows_to_tensor(rows: &[Vector]) -> Tensor {
    let d = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), d), |(k, i)| rows[k][i])
}

/// The three per-node message families; absent boundary messages are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GmMessages {
    pub past: Tensor,
    pub future: Tensor,
    pub meas: Tensor,
}

impl GmMessages {
    /// `M_k = μ_past + μ_future + μ_meas`.
    pub fn total(&self) -> Tensor {
        &self.past + &self.future + &self.meas
    }
}

/// Model matrices in the row layout used by the batched graph ops.
#[derive(Debug, Clone)]
pub(crate) struct MessageOperators {
    q_inv: Var,
    h_t: Var,
    r_inv_h: Var,
    model: GaussianHmm,
}

pub(crate) struct MessageVars {
    pub past: Var,
    pub future: Var,
    pub meas: Var,
}

impl MessageOperators {
    pub fn new(model: &GaussianHmm) -> Self {
        MessageOperators {
            q_inv: Var::constant(to_tensor(model.process_noise_inv())),
            h_t: Var::constant(to_tensor(&model.measurement().transpose())),
            r_inv_h: Var::constant(to_tensor(
                &(model.measurement_noise_inv() * model.measurement()),
            )),
            model: model.clone(),
        }
    }

    /// Per-row transition matrices, each evaluated at the parent state and
    /// held constant under differentiation.
    fn transitions(&self, x: &Tensor) -> Rc<[Tensor]> {
        match self.model.constant_transition() {
            Some(f) => Rc::from(vec![to_tensor(f)]),
            None => x
                .outer_iter()
                .map(|row| to_tensor(&self.model.transition_at(&row.to_vec())))
                .collect::<Vec<_>>()
                .into(),
        }
    }

    pub fn messages(&self, x: &Var, y: &Var) -> Result<MessageVars> {
        let (k, dx) = x.shape();
        if dx != self.model.state_dim() || y.shape() != (k, self.model.obs_dim()) {
            return Err(Error::shape(
                "gm_messages",
                format!(
                    "estimates {:?} and observations {:?} do not fit a {}-state, {}-observation model",
                    x.shape(),
                    y.shape(),
                    self.model.state_dim(),
                    self.model.obs_dim()
                ),
            ));
        }
        let fs = self.transitions(x.value());
        let fs_t: Rc<[Tensor]> = fs.iter().map(|f| f.t().to_owned()).collect::<Vec<_>>().into();
        let fx = x.rowwise_matvec(fs)?;

        let past = x
            .sub(&fx.shift_rows(1))?
            .matmul(&self.q_inv)?
            .scale(-1.0)
            .zero_rows(&[0]);
        let last = k.saturating_sub(1);
        let future = x
            .shift_rows(-1)
            .sub(&fx)?
            .matmul(&self.q_inv)?
            .rowwise_matvec(fs_t)?
            .zero_rows(&[last]);
        let meas = y.sub(&x.matmul(&self.h_t)?)?.matmul(&self.r_inv_h)?;
        Ok(MessageVars { past, future, meas })
    }

    /// `x + γ M`.
    pub fn step(&self, x: &Var, y: &Var, gamma: f64) -> Result<Var> {
        let m = self.messages(x, y)?;
        let total = m.past.add(&m.future)?.add(&m.meas)?;
        x.add(&total.scale(gamma))
    }
}

pub fn gm_messages(model: &GaussianHmm, x: &Tensor, y: &Tensor) -> Result<GmMessages> {
    let ops = MessageOperators::new(model);
    let m = ops.messages(&Var::constant(x.clone()), &Var::constant(y.clone()))?;
    Ok(GmMessages {
        past: m.past.value().clone(),
        future: m.future.value().clone(),
        meas: m.meas.value().clone(),
    })
}

pub(crate) fn check_divergence(x: &Tensor, step: usize) -> Result<()> {
    if let Some(v) = x.iter().find(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
        return Err(Error::Divergence {
            step,
            detail: format!("estimate reached {v}"),
        });
    }
    Ok(())
}

/// Run `n` GM steps from `x0`, calling `visit(i, x⁽ⁱ⁾)` for `i = 1..=n`.
pub fn gm_run(
    model: &GaussianHmm,
    y: &Tensor,
    x0: &Tensor,
    gamma: f64,
    n: usize,
    mut visit: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("step size {gamma} must be non-negative")));
    }
    let ops = MessageOperators::new(model);
    let y = Var::constant(y.clone());
    let mut x = Var::constant(x0.clone());
    for i in 1..=n {
        x = ops.step(&x, &y, gamma)?;
        check_divergence(x.value(), i)?;
        visit(i, x.value());
    }
    Ok(x.value().clone())
}

/// Iterates `x⁽¹⁾ ..= x⁽ᴺ⁾` of `x ← x + γ M`.
pub fn gm_iterate(model: &GaussianHmm, y: &Tensor, x0: &Tensor, gamma: f64, n: usize) -> Result<Vec<Tensor>> {
    let mut history = Vec::with_capacity(n);
    gm_run(model, y, x0, gamma, n, |_, x| history.push(x.clone()))?;
    Ok(history)
}

fn gaussian_log_density(residual: &Vector, cov_inv: &Matrix, log_det: f64) -> f64 {
    let d = residual.len() as f64;
    -0.5 * (residual.dot(&(cov_inv * residual)) + log_det + d * (2.0 * std::f64::consts::PI).ln())
}

/// `Σ log N(x_k; F x_{k−1}, Q) + Σ log N(y_k; H x_k, R)`; the first state
/// carries no prior factor, matching the message boundary rule.
pub fn log_joint(model: &GaussianHmm, x: &Tensor, y: &Tensor) -> f64 {
    let q_log_det = model.process_noise().determinant().ln();
    let r_log_det = model.measurement_noise().determinant().ln();
    let mut total = 0.0;
    for k in 0..x.nrows() {
        let xk = row_vector(x, k);
        if k > 0 {
            let prev = row_vector(x, k - 1);
            let f = model.transition_at(prev.as_slice());
            total += gaussian_log_density(&(&xk - f * prev), model.process_noise_inv(), q_log_det);
        }
        let r = row_vector(y, k) - model.measurement() * &xk;
        total += gaussian_log_density(&r, model.measurement_noise_inv(), r_log_det);
    }
    total
}

/// Forward-pass output: filtered and one-step-predicted moments, plus the
/// transition used to move from step `k` to `k + 1`.
#[derive(Debug, Clone)]
pub struct FilterResult {
    pub means: Vec<Vector>,
    pub covs: Vec<Matrix>,
    pub predicted_means: Vec<Vector>,
    pub predicted_covs: Vec<Matrix>,
    pub transitions: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct SmootherResult {
    pub means: Vec<Vector>,
    pub covs: Vec<Matrix>,
}

impl FilterResult {
    pub fn means_tensor(&self) -> Tensor {
        rows_to_tensor(&self.means)
    }
}

impl SmootherResult {
    pub fn means_tensor(&self) -> Tensor {
        rows_to_tensor(&self.means)
    }
}

fn symmetrize(m: Matrix) -> Matrix {
    (&m + m.transpose()) * 0.5
}

fn check_filter_state(mean: &Vector, step: usize) -> Result<()> {
    if let Some(v) = mean.iter().find(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
        return Err(Error::Divergence {
            step,
            detail: format!("state estimate reached {v}"),
        });
    }
    Ok(())
}

fn filter(model: &GaussianHmm, y: &Tensor, linearize: bool) -> Result<FilterResult> {
    let k_len = y.nrows();
    if k_len == 0 {
        return Err(Error::Data("no observations to filter".into()));
    }
    if y.ncols() != model.obs_dim() {
        return Err(Error::shape("kalman_filter", "observation width differs from model"));
    }
    if !linearize && model.is_state_dependent() {
        return Err(Error::Config(
            "state-dependent transition needs the extended smoother".into(),
        ));
    }
    let dx = model.state_dim();
    let h = model.measurement();
    let ht = h.transpose();
    let eye = Matrix::identity(dx, dx);
    let mut out = FilterResult {
        means: Vec::with_capacity(k_len),
        covs: Vec::with_capacity(k_len),
        predicted_means: Vec::with_capacity(k_len),
        predicted_covs: Vec::with_capacity(k_len),
        transitions: Vec::with_capacity(k_len.saturating_sub(1)),
    };
    for k in 0..k_len {
        let yk = row_vector(y, k);
        let (m_pred, p_pred) = if k == 0 {
            model.prior_for(&yk)
        } else {
            let m = &out.means[k - 1];
            let f = model.transition_at(m.as_slice());
            let m_pred = &f * m;
            check_filter_state(&m_pred, k)?;
            let pred = (m_pred, symmetrize(&f * &out.covs[k - 1] * f.transpose() + model.process_noise()));
            out.transitions.push(f);
            pred
        };
        let s = symmetrize(h * &p_pred * &ht + model.measurement_noise());
        let chol = s.cholesky().ok_or_else(|| {
            Error::Factorization(format!("innovation covariance at step {k} is not positive definite"))
        })?;
        let gain = chol.solve(&(h * &p_pred)).transpose();
        let mean = &m_pred + &gain * (yk - h * &m_pred);
        let a = &eye - &gain * h;
        let cov = symmetrize(&a * &p_pred * a.transpose() + &gain * model.measurement_noise() * gain.transpose());
        check_filter_state(&mean, k)?;
        out.means.push(mean);
        out.covs.push(cov);
        out.predicted_means.push(m_pred);
        out.predicted_covs.push(p_pred);
    }
    Ok(out)
}

/// Kalman filter for a constant-transition model.
pub fn kalman_filter(model: &GaussianHmm, y: &Tensor) -> Result<FilterResult> {
    filter(model, y, false)
}

/// Extended Kalman filter: the transition is re-evaluated at each filtered mean.
pub fn extended_filter(model: &GaussianHmm, y: &Tensor) -> Result<FilterResult> {
    filter(model, y, true)
}

/// Backward Rauch–Tung–Striebel pass over a completed filter run.
pub fn rts_smooth(filtered: &FilterResult) -> Result<SmootherResult> {
    let k_len = filtered.means.len();
    let mut means = filtered.means.clone();
    let mut covs = filtered.covs.clone();
    for k in (0..k_len.saturating_sub(1)).rev() {
        let f = &filtered.transitions[k];
        let p_pred = &filtered.predicted_covs[k + 1];
        let chol = p_pred.clone().cholesky().ok_or_else(|| {
            Error::Factorization(format!("predicted covariance at step {} is singular", k + 1))
        })?;
        // C = P_k Fᵀ P_pred⁻¹, computed as (P_pred⁻¹ F P_k)ᵀ.
        let c = chol.solve(&(f * &filtered.covs[k])).transpose();
        let mean = &filtered.means[k] + &c * (&means[k + 1] - &filtered.predicted_means[k + 1]);
        let cov = symmetrize(&filtered.covs[k] + &c * (&covs[k + 1] - p_pred) * c.transpose());
        means[k] = mean;
        covs[k] = cov;
    }
    Ok(SmootherResult { means, covs })
}

/// Kalman filter followed by the RTS pass.
pub fn kalman_smooth(model: &GaussianHmm, y: &Tensor) -> Result<SmootherResult> {
    rts_smooth(&kalman_filter(model, y)?)
}

/// Extended filter followed by the RTS pass with the same linearizations.
pub fn extended_smooth(model: &GaussianHmm, y: &Tensor) -> Result<SmootherResult> {
    rts_smooth(&extended_filter(model, y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::sample_linear;
    use crate::hmm::{
        build_drag_model, build_lorenz_model, build_uniform_motion_model, DragParams, Prior, Transition,
    };
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-2.0..2.0))
    }

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
        let a = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + Matrix::identity(d, d) * 0.5
    }

    fn random_model(rng: &mut ChaCha8Rng, dx: usize, dy: usize) -> GaussianHmm {
        let f = Matrix::from_fn(dx, dx, |_, _| rng.random_range(-1.0..1.0));
        let h = Matrix::from_fn(dy, dx, |_, _| rng.random_range(-1.0..1.0));
        let sel = crate::hmm::SelectionMap::new(vec![0], dx).unwrap();
        GaussianHmm::new(Transition::Constant, f, h, random_spd(rng, dx), random_spd(rng, dy), 1.0, sel).unwrap()
    }

    fn rmse(a: &Tensor, b: &Tensor) -> f64 {
        ((a - b).mapv(|v| v * v).mean().unwrap()).sqrt()
    }

    #[test]
    fn identity_measurement_message_is_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = build_lorenz_model(0.05, 2, 1.0, 1.0).unwrap();
        let x = random_tensor(&mut rng, 6, 3);
        let y = random_tensor(&mut rng, 6, 3);
        let msgs = gm_messages(&m, &x, &y).unwrap();
        assert_eq!(msgs.meas, &y - &x);
    }

    #[test]
    fn consistent_states_have_zero_messages() {
        let m = build_drag_model(DragParams::default()).unwrap();
        let f = m.constant_transition().unwrap();
        let mut rows = vec![Vector::from_vec(vec![1.0, 0.5, -0.2, 2.0, 1.0, 0.1])];
        for k in 1..8 {
            let next = f * &rows[k - 1];
            rows.push(next);
        }
        let x = rows_to_tensor(&rows);
        let y = rows_to_tensor(&rows.iter().map(|r| m.measurement() * r).collect::<Vec<_>>());
        let msgs = gm_messages(&m, &x, &y).unwrap();
        assert!(msgs.total().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn boundary_messages_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_model(&mut rng, 3, 2);
        let x = random_tensor(&mut rng, 5, 3);
        let y = random_tensor(&mut rng, 5, 2);
        let msgs = gm_messages(&m, &x, &y).unwrap();
        assert!(msgs.past.row(0).iter().all(|&v| v == 0.0));
        assert!(msgs.future.row(4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let m = build_drag_model(DragParams::default()).unwrap();
        let x = Array2::zeros((4, 4));
        let y = Array2::zeros((4, 2));
        assert!(matches!(gm_messages(&m, &x, &y), Err(Error::Shape { .. })));
    }

    fn fd_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, k: usize) -> Vec<f64> {
        let h = 1e-5;
        (0..x.ncols())
            .map(|i| {
                let mut plus = x.clone();
                plus[[k, i]] += h;
                let mut minus = x.clone();
                minus[[k, i]] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close_rel(analytic: ndarray::ArrayView1<f64>, numeric: &[f64], tol: f64) {
        let scale = numeric.iter().map(|v| v.abs()).fold(1.0, f64::max);
        for (a, n) in analytic.iter().zip(numeric) {
            assert!((a - n).abs() <= tol * scale, "{a} vs {n}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn messages_are_log_density_gradients(seed in any::<u64>(), k_len in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(&mut rng, 3, 2);
            let x = random_tensor(&mut rng, k_len, 3);
            let y = random_tensor(&mut rng, k_len, 2);
            let msgs = gm_messages(&m, &x, &y).unwrap();
            let f = m.constant_transition().unwrap().clone();
            let q_inv = m.process_noise_inv().clone();
            let r_inv = m.measurement_noise_inv().clone();
            for k in 0..k_len {
                if k > 0 {
                    let past = |x: &Tensor| {
                        let r = row_vector(x, k) - &f * row_vector(x, k - 1);
                        -0.5 * r.dot(&(&q_inv * &r))
                    };
                    assert_close_rel(msgs.past.row(k), &fd_gradient(past, &x, k), 1e-6);
                }
                if k + 1 < k_len {
                    let fut = |x: &Tensor| {
                        let r = row_vector(x, k + 1) - &f * row_vector(x, k);
                        -0.5 * r.dot(&(&q_inv * &r))
                    };
                    assert_close_rel(msgs.future.row(k), &fd_gradient(fut, &x, k), 1e-6);
                }
                let meas = |x: &Tensor| {
                    let r = row_vector(&y, k) - m.measurement() * row_vector(x, k);
                    -0.5 * r.dot(&(&r_inv * &r))
                };
                assert_close_rel(msgs.meas.row(k), &fd_gradient(meas, &x, k), 1e-6);
                let total = msgs.total();
                let lj = |x: &Tensor| log_joint(&m, x, &y);
                assert_close_rel(total.row(k), &fd_gradient(lj, &x, k), 1e-6);
            }
        }
    }

    #[test]
    fn zero_step_size_keeps_initial_estimate() {
        let m = build_uniform_motion_model(1.0, 1.0, 0.5).unwrap();
        let t = sample_linear(&m, 20, 3).unwrap();
        let x0 = t.observations.dot(&to_tensor(m.measurement()));
        for x in gm_iterate(&m, &t.observations, &x0, 0.0, 5).unwrap() {
            assert_eq!(x, x0);
        }
    }

    #[test]
    fn divergence_names_the_step() {
        let m = build_uniform_motion_model(1.0, 1e-3, 0.5).unwrap();
        let t = sample_linear(&m, 20, 3).unwrap();
        let x0 = t.observations.dot(&to_tensor(m.measurement()));
        match gm_iterate(&m, &t.observations, &x0, 0.5, 200) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn long_iteration_reaches_smoother_means() {
        let m = build_uniform_motion_model(1.0, 1.0, 0.5).unwrap();
        let t = sample_linear(&m, 300, 11).unwrap();
        let x0 = t.observations.dot(&to_tensor(m.measurement()));
        let xn = gm_run(&m, &t.observations, &x0, 0.005, 5000, |_, _| {}).unwrap();
        // Flat prior so the smoother targets the same objective.
        let flat = m.with_prior(Prior::LiftedObservation { variance: 1e10 }).unwrap();
        let smoothed = kalman_smooth(&flat, &t.observations).unwrap().means_tensor();
        assert!(rmse(&xn, &smoothed) < 1e-3, "rmse {}", rmse(&xn, &smoothed));
    }

    #[test]
    fn smoother_means_are_a_fixed_point() {
        for seed in 0..3 {
            let m = build_drag_model(DragParams::default()).unwrap();
            let t = sample_linear(&m, 200, seed).unwrap();
            let s = kalman_smooth(&m, &t.observations).unwrap().means_tensor();
            let total = gm_messages(&m, &s, &t.observations).unwrap().total();
            for k in 1..199 {
                let norm = total.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(norm <= 1e-6, "node {k}: {norm}");
            }
        }
    }

    #[test]
    fn log_joint_increases_monotonically() {
        let truth = build_drag_model(DragParams::default()).unwrap();
        let t = sample_linear(&truth, 100, 5).unwrap();
        let m = build_uniform_motion_model(1.0, 0.3, 0.5).unwrap();
        let x0 = t.observations.dot(&to_tensor(m.measurement()));
        let mut prev = log_joint(&m, &x0, &t.observations);
        gm_run(&m, &t.observations, &x0, 0.005, 500, |i, x| {
            let cur = log_joint(&m, x, &t.observations);
            assert!(cur >= prev, "iteration {i}: {cur} < {prev}");
            prev = cur;
        })
        .unwrap();
    }

    #[test]
    fn uninformative_measurements_give_pure_prediction() {
        let base = build_uniform_motion_model(1.0, 0.3, 1.0).unwrap();
        let mean = Vector::from_vec(vec![1.0, 0.5, -1.0, 0.25]);
        let model = GaussianHmm::new(
            Transition::Constant,
            base.constant_transition().unwrap().clone(),
            base.measurement().clone(),
            base.process_noise().clone(),
            Matrix::identity(2, 2) * 1e16,
            1.0,
            base.selection().clone(),
        )
        .unwrap()
        .with_prior(Prior::Gaussian {
            mean: mean.clone(),
            cov: Matrix::identity(4, 4),
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = random_tensor(&mut rng, 10, 2);
        let out = kalman_filter(&model, &y).unwrap();
        let f = model.constant_transition().unwrap();
        let mut expected = mean;
        for k in 0..10 {
            let err = (&out.means[k] - &expected).amax();
            assert!(err < 1e-9, "step {k}: {err}");
            expected = f * expected;
        }
    }

    #[test]
    fn static_state_filter_is_running_average() {
        let sel = crate::hmm::SelectionMap::new(vec![0, 1], 2).unwrap();
        let model = GaussianHmm::new(
            Transition::Constant,
            Matrix::identity(2, 2),
            Matrix::identity(2, 2),
            Matrix::identity(2, 2) * 1e-14,
            Matrix::identity(2, 2),
            1.0,
            sel,
        )
        .unwrap()
        .with_prior(Prior::Gaussian {
            mean: Vector::zeros(2),
            cov: Matrix::identity(2, 2) * 1e16,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = random_tensor(&mut rng, 40, 2);
        let out = kalman_filter(&model, &y).unwrap();
        let mut sum = Vector::zeros(2);
        for k in 0..40 {
            sum += row_vector(&y, k);
            let avg = &sum / (k + 1) as f64;
            assert!((&out.means[k] - avg).amax() < 1e-8);
        }
    }

    #[test]
    fn consistent_noiseless_data_has_vanishing_residuals() {
        let m = build_uniform_motion_model(1.0, 0.01, 0.01).unwrap();
        let opts = crate::datagen::SampleOptions {
            initial: Some(vec![0.0, 1.0, 0.0, 1.0]),
            without_process_noise: true,
            without_measurement_noise: true,
        };
        let t = crate::datagen::sample_linear_with(&m, 50, 0, &opts).unwrap();
        let out = kalman_filter(&m, &t.observations).unwrap();
        for k in 40..50 {
            let r = row_vector(&t.observations, k) - m.measurement() * &out.means[k];
            assert!(r.amax() < 1e-3);
        }
    }

    #[test]
    fn single_step_smoother_equals_filter() {
        let m = build_drag_model(DragParams::default()).unwrap();
        let t = sample_linear(&m, 1, 0).unwrap();
        let f = kalman_filter(&m, &t.observations).unwrap();
        let s = rts_smooth(&f).unwrap();
        assert_eq!(s.means, f.means);
        assert_eq!(s.covs, f.covs);
    }

    #[test]
    fn smoother_covariances_are_below_filter_covariances() {
        let m = build_drag_model(DragParams::default()).unwrap();
        let t = sample_linear(&m, 60, 1).unwrap();
        let f = kalman_filter(&m, &t.observations).unwrap();
        let s = rts_smooth(&f).unwrap();
        for k in 0..60 {
            assert!(crate::hmm::is_spd(&s.covs[k]));
            let diff = &f.covs[k] - &s.covs[k];
            let min_eig = diff.symmetric_eigenvalues().min();
            assert!(min_eig >= -1e-9, "step {k}: {min_eig}");
        }
    }

    #[test]
    fn smoother_beats_filter_on_average() {
        let m = build_drag_model(DragParams::default()).unwrap();
        for seed in 0..10 {
            let t = sample_linear(&m, 500, seed).unwrap();
            let x = t.states.as_ref().unwrap();
            let f = kalman_filter(&m, &t.observations).unwrap();
            let s = rts_smooth(&f).unwrap();
            let mse = |est: &Tensor| (est - x).mapv(|v| v * v).mean().unwrap();
            assert!(mse(&s.means_tensor()) <= mse(&f.means_tensor()), "seed {seed}");
        }
    }

    #[test]
    fn extended_equals_plain_for_constant_models() {
        let m = build_drag_model(DragParams::default()).unwrap();
        let t = sample_linear(&m, 80, 2).unwrap();
        let a = kalman_smooth(&m, &t.observations).unwrap();
        let b = extended_smooth(&m, &t.observations).unwrap();
        assert_eq!(a.means, b.means);
        assert_eq!(a.covs, b.covs);
    }

    #[test]
    fn plain_filter_refuses_state_dependent_models() {
        let m = build_lorenz_model(0.05, 2, 1.0, 0.5).unwrap();
        let y = Array2::ones((3, 3));
        assert!(matches!(kalman_filter(&m, &y), Err(Error::Config(_))));
    }

    #[test]
    fn extended_smoother_guards_divergence() {
        let m = build_lorenz_model(1e3, 2, 1.0, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = random_tensor(&mut rng, 50, 3).mapv(|v| v * 10.0);
        assert!(matches!(extended_smooth(&m, &y), Err(Error::Divergence { .. })));
    }
}
