//! Weighted iteration loss, GM noise tuning, windowed training with Adam and
//! validation-based model selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Trajectory;
use crate::error::{Error, Result};
use crate::gm::{extended_smooth, kalman_smooth};
use crate::hmm::{GaussianHmm, ModelSpec, SelectionMap};
use crate::hybrid::{init_latents, run_inference_with, HybridConfig, HybridNet, InferenceMode, Unroll};
use crate::nn::{Adam, Gradients, Graph, Tensor, Var};
use crate::seed::derive_seed;

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..n)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
                .collect()
        }
    }
}

fn default_sigma_grid() -> Vec<f64> {
    log_grid(1e-3, 1e3, 13)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub window: usize,
    pub eval_interval: usize,
    pub patience: usize,
    pub sigma_grid: Vec<f64>,
    /// Measurement-noise grid; tuned jointly with σ when present.
    pub lambda_grid: Option<Vec<f64>>,
    /// Use at most this many leading validation steps for model selection.
    pub val_limit: Option<usize>,
    /// Clip the joint gradient norm to this value before each update.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_steps: 2000,
            window: 100,
            eval_interval: 50,
            patience: 20,
            sigma_grid: default_sigma_grid(),
            lambda_grid: None,
            val_limit: None,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.window < 3 {
            return Err(Error::Config(format!(
                "window length {} leaves no interior node",
                self.window
            )));
        }
        if self.patience == 0 || self.eval_interval == 0 {
            return Err(Error::Config("patience and eval interval must be at least 1".into()));
        }
        let positive = |g: &[f64]| !g.is_empty() && g.iter().all(|v| *v > 0.0 && v.is_finite());
        if !positive(&self.sigma_grid) || !self.lambda_grid.as_deref().is_none_or(positive) {
            return Err(Error::Config("tuning grids must be non-empty and positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

/// Per-iteration errors and their weights `w_i = i / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub terms: Vec<f64>,
    pub weights: Vec<f64>,
    pub total: f64,
    pub final_mse: f64,
}

pub fn iteration_weights(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / n as f64).collect()
}

fn check_gt(estimate: (usize, usize), gt: &Tensor, sel: &SelectionMap) -> Result<()> {
    if estimate.0 != gt.nrows() || gt.ncols() != sel.len() {
        return Err(Error::shape(
            "weighted_loss",
            format!(
                "estimates [{}x{}] vs ground truth [{}x{}] through {} selected components",
                estimate.0,
                estimate.1,
                gt.nrows(),
                gt.ncols(),
                sel.len()
            ),
        ));
    }
    if let Some(&bad) = sel.indices().iter().find(|&&i| i >= estimate.1) {
        return Err(Error::shape("weighted_loss", format!("selected component {bad} out of range")));
    }
    Ok(())
}

/// Mean squared error between selected components and ground truth.
pub fn selected_mse(estimate: &Tensor, gt: &Tensor, sel: &SelectionMap) -> Result<f64> {
    check_gt(estimate.dim(), gt, sel)?;
    let picked = estimate.select(ndarray::Axis(1), sel.indices());
    Ok((picked - gt).mapv(|v| v * v).mean().unwrap_or(0.0))
}

pub fn weighted_loss(iterates: &[Tensor], gt: &Tensor, sel: &SelectionMap) -> Result<LossReport> {
    if iterates.is_empty() {
        return Err(Error::Data("loss needs at least one iterate".into()));
    }
    let terms = iterates
        .iter()
        .map(|x| selected_mse(x, gt, sel))
        .collect::<Result<Vec<_>>>()?;
    let weights = iteration_weights(iterates.len());
    // Σ i·mseᵢ / N: one rounding for the weights instead of one per term.
    let n = iterates.len() as f64;
    let total = terms
        .iter()
        .enumerate()
        .map(|(i, t)| (i + 1) as f64 * t)
        .sum::<f64>()
        / n;
    Ok(LossReport {
        final_mse: *terms.last().expect("non-empty"),
        terms,
        weights,
        total,
    })
}

/// Differentiable counterpart of [`weighted_loss`].
pub(crate) fn weighted_loss_var(iterates: &[Var], gt: &Tensor, sel: &SelectionMap) -> Result<Var> {
    if iterates.is_empty() {
        return Err(Error::Data("loss needs at least one iterate".into()));
    }
    let gt = Var::constant(gt.clone());
    let weights = iteration_weights(iterates.len());
    let mut total: Option<Var> = None;
    for (x, w) in iterates.iter().zip(weights) {
        check_gt(x.shape(), gt.value(), sel)?;
        let term = x.select_cols(sel.indices())?.sub(&gt)?.square().mean().scale(w);
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

fn ground_truth(t: &Trajectory, sel: &SelectionMap) -> Result<Tensor> {
    let x = t
        .states
        .as_ref()
        .ok_or_else(|| Error::Data("trajectory has no ground truth".into()))?;
    if x.ncols() == sel.len() {
        return Ok(x.clone());
    }
    if let Some(&bad) = sel.indices().iter().find(|&&i| i >= x.ncols()) {
        return Err(Error::Data(format!(
            "ground truth has {} columns, component {bad} requested",
            x.ncols()
        )));
    }
    Ok(x.select(ndarray::Axis(1), sel.indices()))
}

/// Ground-truth components matching the model's selection map. Trajectories
/// storing only those components are accepted as they are.
pub fn selected_ground_truth(t: &Trajectory, model: &GaussianHmm) -> Result<Tensor> {
    ground_truth(t, model.selection())
}

/// Kalman smoother, or the extended smoother for state-dependent models.
pub fn smooth(model: &GaussianHmm, y: &Tensor) -> Result<Tensor> {
    let s = if model.is_state_dependent() {
        extended_smooth(model, y)?
    } else {
        kalman_smooth(model, y)?
    };
    Ok(s.means_tensor())
}

pub fn smoother_mse(model: &GaussianHmm, t: &Trajectory) -> Result<f64> {
    let gt = selected_ground_truth(t, model)?;
    selected_mse(&smooth(model, &t.observations)?, &gt, model.selection())
}

/// MSE of the raw observations against ground truth.
pub fn observation_mse(model: &GaussianHmm, t: &Trajectory) -> Result<f64> {
    let gt = selected_ground_truth(t, model)?;
    if gt.dim() != t.observations.dim() {
        return Err(Error::Data("observations and ground truth differ in width".into()));
    }
    Ok((&t.observations - &gt).mapv(|v| v * v).mean().unwrap_or(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub sigma: f64,
    pub lambda: f64,
    /// `None` when the smoother failed at this point.
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneReport {
    pub sigma_star: f64,
    pub lambda_star: f64,
    pub points: Vec<GridPoint>,
}

impl TuneReport {
    pub fn best_mse(&self) -> f64 {
        self.points
            .iter()
            .find(|p| p.sigma == self.sigma_star && p.lambda == self.lambda_star)
            .and_then(|p| p.val_mse)
            .unwrap_or(f64::NAN)
    }
}

/// Grid search over σ (and λ when `lambda_grid` is given) minimising the
/// smoother's validation MSE; ties go to the smaller σ, then smaller λ.
pub fn tune_gm(family: &ModelSpec, sigma_grid: &[f64], lambda_grid: Option<&[f64]>, val: &Trajectory) -> Result<TuneReport> {
    if sigma_grid.is_empty() || lambda_grid.is_some_and(|g| g.is_empty()) {
        return Err(Error::Config("tuning grid is empty".into()));
    }
    let fixed = [family.lambda()];
    let lambdas = lambda_grid.unwrap_or(&fixed);
    let mut points = Vec::with_capacity(sigma_grid.len() * lambdas.len());
    let mut best: Option<(f64, f64, f64)> = None;
    for &sigma in sigma_grid {
        for &lambda in lambdas {
            let val_mse = family
                .with_noise(sigma, lambda)
                .build()
                .and_then(|m| smoother_mse(&m, val))
                .ok()
                .filter(|v| v.is_finite());
            if let Some(mse) = val_mse {
                let better = match best {
                    None => true,
                    Some((bs, bl, bm)) => mse < bm || (mse == bm && (sigma, lambda) < (bs, bl)),
                };
                if better {
                    best = Some((sigma, lambda, mse));
                }
            }
            points.push(GridPoint { sigma, lambda, val_mse });
        }
    }
    if val.states.is_none() {
        return Err(Error::Data("validation data has no ground truth".into()));
    }
    let (sigma_star, lambda_star, _) =
        best.ok_or_else(|| Error::Tuning(format!("all {} grid points failed", points.len())))?;
    Ok(TuneReport {
        sigma_star,
        lambda_star,
        points,
    })
}

/// Start of a random window: uniform over every placement that overlaps the
/// trajectory, clamped inside it, so edge steps are drawn as often as
/// interior ones.
pub fn sample_window_start<R: Rng>(rng: &mut R, len: usize, window: usize) -> usize {
    if len <= window {
        return 0;
    }
    let raw = rng.random_range(-(window as i64) + 1..len as i64);
    raw.clamp(0, (len - window) as i64) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation MSE seen.
    pub net: HybridNet,
    pub best_val_mse: f64,
    pub curve: Vec<CurvePoint>,
    pub steps_run: usize,
    /// Set when training stopped on a non-finite loss or estimate.
    pub diverged: Option<String>,
}

/// MSE of the final iterate on `t`.
pub fn evaluate(net: &HybridNet, model: &GaussianHmm, t: &Trajectory, config: &HybridConfig, seed: u64) -> Result<f64> {
    let gt = selected_ground_truth(t, model)?;
    let x = run_inference_with(net, model, &t.observations, config, seed, |_, _| {})?;
    selected_mse(&x, &gt, model.selection())
}

/// Weighted loss of one unrolled inference on `y` and its parameter
/// gradients.
pub fn loss_and_gradients(
    net: &HybridNet,
    model: &GaussianHmm,
    y: &Tensor,
    gt: &Tensor,
    config: &HybridConfig,
    latent_seed: u64,
) -> Result<(Gradients, f64)> {
    let graph = Graph::new(&net.store);
    let unroll = Unroll::new(&graph, net, model, y, *config)?;
    let (x0, h0) = init_latents(y, model, config.nf, latent_seed)?;
    let mut iterates = Vec::with_capacity(config.iterations);
    unroll.run(&x0, &h0, |_, x| iterates.push(x.clone()))?;
    let loss = weighted_loss_var(&iterates, gt, model.selection())?;
    let value = loss.scalar()?;
    if !value.is_finite() {
        return Err(Error::Numeric {
            iteration: config.iterations,
            node: 0,
        });
    }
    Ok((graph.backward(&loss)?, value))
}

/// Windowed training with periodic validation and early stopping.
pub fn train(
    mut net: HybridNet,
    model: &GaussianHmm,
    train_data: &Trajectory,
    val_data: &Trajectory,
    hybrid: &HybridConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    hybrid.validate()?;
    if hybrid.mode == InferenceMode::GmOnly {
        return Err(Error::Config("GM-only inference has no trainable parameters".into()));
    }
    let train_gt = selected_ground_truth(train_data, model)?;
    let val = match config.val_limit {
        Some(n) if n < val_data.len() => val_data.slice(0, n),
        _ => val_data.clone(),
    };
    selected_ground_truth(&val, model)?;
    if train_data.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation data must be non-empty".into()));
    }

    let mut window_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "windows"));
    let latent_seed = derive_seed(seed, "latents");
    let eval_seed = derive_seed(seed, "eval-latents");
    let mut adam = Adam::new(&net.store, config.learning_rate);

    let mut best_val = evaluate(&net, model, &val, hybrid, eval_seed)?;
    let mut best_store = net.store.clone();
    let mut curve = Vec::new();
    let mut since_best = 0;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut diverged = None;
    let mut steps_run = 0;

    for step in 1..=config.max_steps {
        let start = sample_window_start(&mut window_rng, train_data.len(), config.window);
        let end = (start + config.window).min(train_data.len());
        let window = train_data.slice(start, end);
        let gt = train_gt.slice(ndarray::s![start..end, ..]).to_owned();
        let step_seed = derive_seed(latent_seed, &step.to_string());
        let (grads, loss) = match loss_and_gradients(&net, model, &window.observations, &gt, hybrid, step_seed) {
            Ok(v) => v,
            Err(e @ (Error::Numeric { .. } | Error::Divergence { .. })) => {
                diverged = Some(format!("step {step}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        net.store.zero_grad();
        net.store.accumulate(&grads)?;
        net.store.clip_grad_norm(config.grad_clip.unwrap_or(f64::INFINITY));
        adam.step(&mut net.store)?;
        steps_run = step;
        if !net.store.all_finite() {
            diverged = Some(format!("step {step}: parameters became non-finite"));
            break;
        }
        loss_sum += loss;
        loss_count += 1;

        if step % config.eval_interval == 0 || step == config.max_steps {
            let val_mse = match evaluate(&net, model, &val, hybrid, eval_seed) {
                Ok(v) if v.is_finite() => v,
                Ok(_) => {
                    diverged = Some(format!("step {step}: validation error is not finite"));
                    break;
                }
                Err(e @ (Error::Numeric { .. } | Error::Divergence { .. })) => {
                    diverged = Some(format!("step {step}: {e}"));
                    break;
                }
                Err(e) => return Err(e),
            };
            curve.push(CurvePoint {
                step,
                train_loss: loss_sum / loss_count as f64,
                val_mse,
            });
            loss_sum = 0.0;
            loss_count = 0;
            if val_mse < best_val {
                best_val = val_mse;
                best_store = net.store.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
        }
    }
    net.store.copy_values_from(&best_store)?;
    net.store.zero_grad();
    Ok(TrainOutcome {
        net,
        best_val_mse: best_val,
        curve,
        steps_run,
        diverged,
    })
}

/// Learning curve as `step,train_loss,val_mse` CSV text.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,train_loss,val_mse\n");
    for p in curve {
        out.push_str(&format!("{},{:.16e},{:.16e}\n", p.step, p.train_loss, p.val_mse));
    }
    out
}
