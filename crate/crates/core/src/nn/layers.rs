//! Linear layers, two-layer MLPs and the GRU cell.
//!
//! All layers act row-wise on `[K x d]` batches so one call evaluates every
//! node of a chain at once.

use ndarray::{Array1, Axis};
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// `W·u + b` for a single vector.
pub fn linear_forward(w: &Tensor, b: &Array1<f64>, u: &Array1<f64>) -> Result<Array1<f64>> {
    if w.ncols() != u.len() || w.nrows() != b.len() {
        return Err(Error::shape(
            "linear_forward",
            format!(
                "W [{}x{}], b [{}], u [{}]",
                w.nrows(),
                w.ncols(),
                b.len(),
                u.len()
            ),
        ));
    }
    Ok(w.dot(u) + b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Registers `{name}.w` `[output x input]` and `{name}.b` `[1 x output]`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register_uniform(&format!("{name}.w"), output, input, input, rng)?;
        let bias = store.register_uniform(&format!("{name}.b"), 1, output, input, rng)?;
        Ok(Linear {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, graph: &Graph, x: &Var) -> Result<Var> {
        x.linear(&graph.param(self.weight), &graph.param(self.bias))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
}

impl Activation {
    /// Slope used by the edge networks.
    pub const LEAKY: Activation = Activation::LeakyRelu(0.01);

    fn apply(self, x: &Var) -> Var {
        match self {
            Activation::LeakyRelu(slope) => x.leaky_relu(slope),
            Activation::Relu => x.relu(),
        }
    }
}

/// `L2(act(L1(u)))`; the output layer is linear.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
    pub activation: Activation,
}

impl Mlp2 {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let (input, hidden, output) = dims;
        Ok(Mlp2 {
            first: Linear::new(store, &format!("{name}.l1"), input, hidden, rng)?,
            second: Linear::new(store, &format!("{name}.l2"), hidden, output, rng)?,
            activation,
        })
    }

    pub fn forward(&self, graph: &Graph, x: &Var) -> Result<Var> {
        let hidden = self.activation.apply(&self.first.forward(graph, x)?);
        self.second.forward(graph, &hidden)
    }

    pub fn params(&self) -> [ParamId; 4] {
        let [a, b] = self.first.params();
        let [c, d] = self.second.params();
        [a, b, c, d]
    }
}

/// Evaluate an MLP on one input vector without recording gradients.
pub fn mlp2_forward(mlp: &Mlp2, store: &ParamStore, u: &Array1<f64>) -> Result<Array1<f64>> {
    let graph = Graph::inference(store);
    let x = Var::constant(u.clone().insert_axis(Axis(0)));
    let out = mlp.forward(&graph, &x)?;
    Ok(out.value().row(0).to_owned())
}

/// Gated recurrent unit preceded by a linear input layer.
///
/// With `p = pre(u)`:
/// `z = σ(W_z·[p, h] + b_z)`, `r = σ(W_r·[p, h] + b_r)`,
/// `h̃ = tanh(W_h·[p, r⊙h] + b_h)`, `h' = (1 − z)⊙h + z⊙h̃`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruCell {
    pub pre: Linear,
    pub update: Linear,
    pub reset: Linear,
    pub candidate: Linear,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GruCell {
            pre: Linear::new(store, &format!("{name}.pre"), input, hidden, rng)?,
            update: Linear::new(store, &format!("{name}.z"), 2 * hidden, hidden, rng)?,
            reset: Linear::new(store, &format!("{name}.r"), 2 * hidden, hidden, rng)?,
            candidate: Linear::new(store, &format!("{name}.h"), 2 * hidden, hidden, rng)?,
            input,
            hidden,
        })
    }

    pub fn forward(&self, graph: &Graph, u: &Var, h: &Var) -> Result<Var> {
        if u.shape().1 != self.input || h.shape().1 != self.hidden || u.shape().0 != h.shape().0 {
            return Err(Error::shape(
                "gru",
                format!(
                    "input [{}x{}] hidden [{}x{}] for cell ({}, {})",
                    u.shape().0,
                    u.shape().1,
                    h.shape().0,
                    h.shape().1,
                    self.input,
                    self.hidden
                ),
            ));
        }
        let p = self.pre.forward(graph, u)?;
        let ph = Var::concat_cols(&[p.clone(), h.clone()])?;
        let z = self.update.forward(graph, &ph)?.sigmoid();
        let r = self.reset.forward(graph, &ph)?.sigmoid();
        let prh = Var::concat_cols(&[p, r.mul(h)?])?;
        let cand = self.candidate.forward(graph, &prh)?.tanh();
        z.rsub_scalar(1.0).mul(h)?.add(&z.mul(&cand)?)
    }

    pub fn params(&self) -> [ParamId; 8] {
        let [a, b] = self.pre.params();
        let [c, d] = self.update.params();
        let [e, f] = self.reset.params();
        let [g, h] = self.candidate.params();
        [a, b, c, d, e, f, g, h]
    }
}

/// One GRU step on single vectors without recording gradients.
pub fn gru_forward(
    cell: &GruCell,
    store: &ParamStore,
    u: &Array1<f64>,
    h: &Array1<f64>,
) -> Result<Array1<f64>> {
    let graph = Graph::inference(store);
    let u = Var::constant(u.clone().insert_axis(Axis(0)));
    let h = Var::constant(h.clone().insert_axis(Axis(0)));
    Ok(cell.forward(&graph, &u, &h)?.value().row(0).to_owned())
}

/// Zero every entry of a layer (weights and bias).
pub fn zero_linear(store: &mut ParamStore, layer: &Linear) {
    for id in layer.params() {
        store.value_mut(id).fill(0.0);
    }
}
