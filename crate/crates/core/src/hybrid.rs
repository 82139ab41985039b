//! Learned message passing over the HMM chain and the hybrid update that adds
//! a decoded correction to the GM messages.
//!
//! Every latent node `x_k` receives three edge-typed messages: from `x_{k−1}`,
//! from `x_{k+1}` and from `y_k`. Each edge network sees the two endpoint
//! embeddings and the matching GM message.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gm::{check_divergence, to_tensor, MessageOperators};
use crate::hmm::GaussianHmm;
use crate::nn::{Activation, Checkpoint, Graph, GruCell, Linear, Mlp2, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    Hybrid,
    GnnOnly,
    GmOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridConfig {
    pub gamma: f64,
    pub iterations: usize,
    pub nf: usize,
    pub mode: InferenceMode,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            gamma: 0.005,
            iterations: 50,
            nf: 48,
            mode: InferenceMode::Hybrid,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("at least one inference iteration is required".into()));
        }
        if self.nf == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters of the learned component.
#[derive(Debug, Clone)]
pub struct HybridNet {
    pub store: ParamStore,
    pub enc_y: Linear,
    pub fe_past: Mlp2,
    pub fe_future: Mlp2,
    pub fe_meas: Mlp2,
    pub gru: GruCell,
    pub dec: Mlp2,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub nf: usize,
}

impl HybridNet {
    pub fn new(state_dim: usize, obs_dim: usize, nf: usize, seed: u64) -> Result<Self> {
        if state_dim == 0 || obs_dim == 0 || nf == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(seed);
        let edge = (2 * nf + state_dim, nf, nf);
        let enc_y = Linear::new(&mut store, "enc_y", 2 * obs_dim, nf, &mut rng)?;
        let fe_past = Mlp2::new(&mut store, "fe_past", edge, Activation::LEAKY, &mut rng)?;
        let fe_future = Mlp2::new(&mut store, "fe_future", edge, Activation::LEAKY, &mut rng)?;
        let fe_meas = Mlp2::new(&mut store, "fe_meas", edge, Activation::LEAKY, &mut rng)?;
        let gru = GruCell::new(&mut store, "gru", nf, nf, &mut rng)?;
        let dec = Mlp2::new(&mut store, "dec", (nf, nf, state_dim), Activation::Relu, &mut rng)?;
        Ok(HybridNet {
            store,
            enc_y,
            fe_past,
            fe_future,
            fe_meas,
            gru,
            dec,
            state_dim,
            obs_dim,
            nf,
        })
    }

    /// Network sized for `model`.
    pub fn for_model(model: &GaussianHmm, nf: usize, seed: u64) -> Result<Self> {
        HybridNet::new(model.state_dim(), model.obs_dim(), nf, seed)
    }

    /// Starting point for training: decoder output zeroed, so the untrained
    /// hybrid reproduces GM and the untrained GNN-only readout is `Hᵀy`.
    pub fn for_training(model: &GaussianHmm, nf: usize, seed: u64) -> Result<Self> {
        let mut net = HybridNet::for_model(model, nf, seed)?;
        net.zero_decoder_output();
        Ok(net)
    }

    /// Zero the decoder's output layer so that `ε ≡ 0`.
    pub fn zero_decoder_output(&mut self) {
        crate::nn::zero_linear(&mut self.store, &self.dec.second);
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.load_into(&mut self.store)
    }
}

fn check_width(y: &Tensor, net: &HybridNet) -> Result<()> {
    if y.ncols() != net.obs_dim {
        return Err(Error::shape(
            "encode_observations",
            format!("observations have {} columns, network expects {}", y.ncols(), net.obs_dim),
        ));
    }
    Ok(())
}

/// `[y_k − y_{k−1}, y_{k+1} − y_k]` with zero vectors at the chain ends.
pub fn observation_differences(y: &Tensor) -> Tensor {
    let k = y.nrows();
    let d = y.ncols();
    let mut out = Array2::zeros((k, 2 * d));
    for i in 0..k {
        for j in 0..d {
            if i > 0 {
                out[[i, j]] = y[[i, j]] - y[[i - 1, j]];
            }
            if i + 1 < k {
                out[[i, d + j]] = y[[i + 1, j]] - y[[i, j]];
            }
        }
    }
    out
}

fn encode_var(graph: &Graph, net: &HybridNet, y: &Tensor) -> Result<Var> {
    check_width(y, net)?;
    net.enc_y.forward(graph, &Var::constant(observation_differences(y)))
}

/// Observation embeddings `h_y` `[K x nf]`.
pub fn encode_observations(net: &HybridNet, y: &Tensor) -> Result<Tensor> {
    let graph = Graph::inference(&net.store);
    Ok(encode_var(&graph, net, y)?.value().clone())
}

/// `x⁰ = Hᵀ y` row-wise, and `h_x⁰ ~ N(0, 1)` drawn from `seed`.
pub fn init_latents(y: &Tensor, model: &GaussianHmm, nf: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    if y.ncols() != model.obs_dim() {
        return Err(Error::shape("init_latents", "observation width differs from model"));
    }
    let x0 = y.dot(&to_tensor(model.measurement()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h0 = Array2::from_shape_simple_fn((y.nrows(), nf), || rng.sample(StandardNormal));
    Ok((x0, h0))
}

/// Current estimates and latent hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceState {
    pub x: Tensor,
    pub h: Tensor,
}

/// One inference problem bound to a graph: the chain, its observations and
/// everything that stays fixed across iterations.
pub(crate) struct Unroll<'g> {
    graph: &'g Graph<'g>,
    net: &'g HybridNet,
    ops: MessageOperators,
    y: Var,
    h_y: Var,
    lifted: Var,
    config: HybridConfig,
}

pub(crate) struct StepVars {
    pub x: Var,
    pub h: Var,
}

fn first_non_finite(t: &Tensor) -> Option<usize> {
    t.outer_iter()
        .position(|row| row.iter().any(|v| !v.is_finite()))
}

impl<'g> Unroll<'g> {
    pub fn new(
        graph: &'g Graph<'g>,
        net: &'g HybridNet,
        model: &GaussianHmm,
        y: &Tensor,
        config: HybridConfig,
    ) -> Result<Self> {
        if !(config.gamma >= 0.0 && config.gamma.is_finite()) || config.iterations == 0 {
            return Err(Error::Config(format!(
                "invalid step size {} or iteration count {}",
                config.gamma, config.iterations
            )));
        }
        if net.state_dim != model.state_dim() || net.obs_dim != model.obs_dim() || net.nf != config.nf {
            return Err(Error::shape(
                "hybrid",
                format!(
                    "network ({}, {}, nf {}) does not match model ({}, {}) and nf {}",
                    net.state_dim,
                    net.obs_dim,
                    net.nf,
                    model.state_dim(),
                    model.obs_dim(),
                    config.nf
                ),
            ));
        }
        if y.nrows() == 0 {
            return Err(Error::Data("no observations".into()));
        }
        let h_y = if config.mode == InferenceMode::GmOnly {
            Var::constant(Array2::zeros((y.nrows(), config.nf)))
        } else {
            encode_var(graph, net, y)?
        };
        Ok(Unroll {
            graph,
            net,
            ops: MessageOperators::new(model),
            y: Var::constant(y.clone()),
            h_y,
            lifted: Var::constant(y.dot(&to_tensor(model.measurement()))),
            config,
        })
    }

    /// Latent update `h ← GRU(U, h)` from the three edge-typed messages.
    fn node_update(&self, h: &Var, mu_past: &Var, mu_future: &Var, mu_meas: &Var) -> Result<Var> {
        let k = h.shape().0;
        let g = self.graph;
        let past_in = Var::concat_cols(&[h.clone(), h.shift_rows(1), mu_past.clone()])?;
        let m_past = self.net.fe_past.forward(g, &past_in)?.zero_rows(&[0]);
        let fut_in = Var::concat_cols(&[h.clone(), h.shift_rows(-1), mu_future.clone()])?;
        let m_future = self.net.fe_future.forward(g, &fut_in)?.zero_rows(&[k - 1]);
        let meas_in = Var::concat_cols(&[h.clone(), self.h_y.clone(), mu_meas.clone()])?;
        let m_meas = self.net.fe_meas.forward(g, &meas_in)?;
        let u = m_past.add(&m_future)?.add(&m_meas)?;
        self.net.gru.forward(g, &u, h)
    }

    pub fn step(&self, iteration: usize, x: &Var, h: &Var) -> Result<StepVars> {
        let gamma = self.config.gamma;
        let next = match self.config.mode {
            InferenceMode::GmOnly => StepVars {
                x: self.ops.step(x, &self.y, gamma)?,
                h: h.clone(),
            },
            InferenceMode::Hybrid => {
                let msgs = self.ops.messages(x, &self.y)?;
                let h_next = self.node_update(h, &msgs.past, &msgs.future, &msgs.meas)?;
                let eps = self.net.dec.forward(self.graph, &h_next)?;
                let total = msgs.past.add(&msgs.future)?.add(&msgs.meas)?;
                let x_next = x.add(&total.add(&eps)?.scale(gamma))?;
                StepVars { x: x_next, h: h_next }
            }
            InferenceMode::GnnOnly => {
                let zeros = Var::constant(Array2::zeros(x.shape()));
                let h_next = self.node_update(h, &zeros, &zeros, &zeros)?;
                let x_next = self.lifted.add(&self.net.dec.forward(self.graph, &h_next)?)?;
                StepVars { x: x_next, h: h_next }
            }
        };
        for t in [next.x.value(), next.h.value()] {
            if let Some(node) = first_non_finite(t) {
                return Err(Error::Numeric { iteration, node });
            }
        }
        check_divergence(next.x.value(), iteration)?;
        Ok(next)
    }

    /// Unroll all iterations, calling `visit(i, x⁽ⁱ⁾)`.
    pub fn run(&self, x0: &Tensor, h0: &Tensor, mut visit: impl FnMut(usize, &Var)) -> Result<StepVars> {
        let mut state = StepVars {
            x: Var::constant(x0.clone()),
            h: Var::constant(h0.clone()),
        };
        for i in 1..=self.config.iterations {
            state = self.step(i, &state.x, &state.h)?;
            visit(i, &state.x);
        }
        Ok(state)
    }
}

/// One iteration of the configured mode from `state`.
pub fn hybrid_step(
    net: &HybridNet,
    model: &GaussianHmm,
    y: &Tensor,
    state: &InferenceState,
    config: &HybridConfig,
) -> Result<InferenceState> {
    let graph = Graph::inference(&net.store);
    let unroll = Unroll::new(&graph, net, model, y, *config)?;
    let out = unroll.step(
        1,
        &Var::constant(state.x.clone()),
        &Var::constant(state.h.clone()),
    )?;
    Ok(InferenceState {
        x: out.x.value().clone(),
        h: out.h.value().clone(),
    })
}

/// Inference without gradients, visiting every iterate.
pub fn run_inference_with(
    net: &HybridNet,
    model: &GaussianHmm,
    y: &Tensor,
    config: &HybridConfig,
    seed: u64,
    mut visit: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    let graph = Graph::inference(&net.store);
    let unroll = Unroll::new(&graph, net, model, y, *config)?;
    let (x0, h0) = init_latents(y, model, config.nf, seed)?;
    let last = unroll.run(&x0, &h0, |i, x| visit(i, x.value()))?;
    Ok(last.x.value().clone())
}

/// Iterate history `x⁽¹⁾ ..= x⁽ᴺ⁾`.
pub fn run_inference(
    net: &HybridNet,
    model: &GaussianHmm,
    y: &Tensor,
    config: &HybridConfig,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let mut history = Vec::with_capacity(config.iterations);
    run_inference_with(net, model, y, config, seed, |_, x| history.push(x.clone()))?;
    Ok(history)
}
