//! Network components: the shared feature trunk, per-domain classifiers,
//! Gaussian latent heads, and the spectrally normalized energy network.
//!
//! Parameters live outside any graph as plain tensors. To run a forward
//! pass, a network is first *bound* into a [`Graph`], which inserts its
//! parameters as leaves; binding trainable gives differentiable leaves,
//! binding frozen wraps them in `stop_grad` so an appearance in one loss
//! term can be gradient-dead while another appearance of the same tensors
//! is live.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Additive floor applied to every predicted standard deviation.
pub const STD_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Swish,
}

#[derive(Clone, Debug)]
pub struct Dense {
    /// (in x out); inputs are row vectors, so a layer computes `x W + b`.
    pub w: Tensor,
    /// (1 x out)
    pub b: Tensor,
}

/// A plain fully connected stack. An empty stack is the identity map, which
/// is how a pass-through trunk for pre-extracted features is configured.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub acts: Vec<Activation>,
}

/// Node ids of one network's parameters inside a graph.
#[derive(Clone, Debug)]
pub struct Binding {
    pub params: Vec<(NodeId, NodeId)>,
}

impl Mlp {
    /// `dims` = [input, hidden..., output]; one activation per layer.
    pub fn new<R: Rng>(dims: &[usize], acts: &[Activation], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 && !(dims.len() == 1 && acts.is_empty()) {
            return Err(Error::usage("mlp needs at least input and output dims"));
        }
        if acts.len() + 1 != dims.len() {
            return Err(Error::usage(format!(
                "mlp with {} layers got {} activations",
                dims.len() - 1,
                acts.len()
            )));
        }
        let mut layers = Vec::with_capacity(acts.len());
        for (i, &act) in acts.iter().enumerate() {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            // He initialization for the rectifier family, Xavier otherwise.
            let std = match act {
                Activation::Relu | Activation::Swish => (2.0 / fan_in as f64).sqrt(),
                _ => (1.0 / fan_in as f64).sqrt(),
            };
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    let n: f64 = StandardNormal.sample(rng);
                    n * std
                })
                .collect();
            layers.push(Dense {
                w: Tensor::new(fan_in, fan_out, data)?,
                b: Tensor::zeros(1, fan_out),
            });
        }
        Ok(Mlp {
            layers,
            acts: acts.to_vec(),
        })
    }

    pub fn identity() -> Self {
        Mlp {
            layers: Vec::new(),
            acts: Vec::new(),
        }
    }

    pub fn in_dim(&self) -> Option<usize> {
        self.layers.first().map(|l| l.w.rows)
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(|l| l.w.cols)
    }

    /// Insert parameters as graph leaves. `trainable` leaves accumulate
    /// gradients; otherwise they are constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        let params = self
            .layers
            .iter()
            .map(|l| {
                (
                    g.leaf(l.w.clone(), trainable),
                    g.leaf(l.b.clone(), trainable),
                )
            })
            .collect();
        Binding { params }
    }

    pub fn forward(&self, g: &mut Graph, binding: &Binding, input: NodeId) -> Result<NodeId> {
        debug_assert_eq!(binding.params.len(), self.layers.len());
        let mut h = input;
        for ((w, b), &act) in binding.params.iter().zip(&self.acts) {
            let lin = g.matmul(h, *w)?;
            let biased = g.add_bias(lin, *b)?;
            h = apply_activation(g, biased, act);
        }
        Ok(h)
    }

    /// Value-only forward through a scratch graph.
    pub fn forward_values(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let binding = self.bind(&mut g, false);
        let out = self.forward(&mut g, &binding, x)?;
        Ok(g.value_tensor(out))
    }

    /// Parameter tensors with stable names, in update order.
    pub fn named_arrays(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.l{i}.w"), &l.w));
            out.push((format!("{prefix}.l{i}.b"), &l.b));
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }
}

fn apply_activation(g: &mut Graph, x: NodeId, act: Activation) -> NodeId {
    match act {
        Activation::Identity => x,
        Activation::Relu => g.relu(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::Swish => g.swish(x),
    }
}

/// Wrap every parameter of a binding in `stop_grad`, so a forward pass with
/// the result is value-identical but contributes nothing to the parameters.
pub fn freeze_binding(g: &mut Graph, b: &Binding) -> Binding {
    Binding {
        params: b
            .params
            .iter()
            .map(|&(w, bias)| (g.stop_grad(w), g.stop_grad(bias)))
            .collect(),
    }
}

/// Per-layer gradients in the same order as [`Mlp::arrays_mut`]; layers the
/// backward pass never reached yield zeros.
pub fn binding_grads(g: &Graph, mlp: &Mlp, binding: &Binding) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(mlp.layers.len() * 2);
    for (layer, &(w, b)) in mlp.layers.iter().zip(&binding.params) {
        out.push(
            g.grad(w)
                .unwrap_or_else(|| Tensor::zeros(layer.w.rows, layer.w.cols)),
        );
        out.push(g.grad(b).unwrap_or_else(|| Tensor::zeros(1, layer.b.cols)));
    }
    out
}

// ── Gaussian latent heads ───────────────────────────────────────────────────

/// Diagonal Gaussian over the latent, one row per sample.
#[derive(Clone, Debug)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub std: Tensor,
}

impl GaussianParams {
    pub fn new(mean: Tensor, std: Tensor) -> Result<Self> {
        if !mean.same_shape(&std) {
            return Err(Error::shape(
                "gaussian_params",
                format!("mean {} vs std {}", mean.shape_str(), std.shape_str()),
            ));
        }
        if std.data.iter().any(|&s| s <= 0.0) {
            return Err(Error::usage("gaussian std must be strictly positive"));
        }
        Ok(GaussianParams { mean, std })
    }

    pub fn select_rows(&self, idx: &[usize]) -> GaussianParams {
        GaussianParams {
            mean: self.mean.select_rows(idx),
            std: self.std.select_rows(idx),
        }
    }
}

/// Graph-side counterpart of [`GaussianParams`].
#[derive(Clone, Copy, Debug)]
pub struct GaussNodes {
    pub mean: NodeId,
    pub std: NodeId,
}

/// Head that maps a conditioning vector to a diagonal Gaussian. Three
/// ReLU layers followed by a linear layer twice the latent width; the std
/// half goes through softplus plus a small floor.
#[derive(Clone, Debug)]
pub struct LatentHead {
    pub net: Mlp,
    pub latent_dim: usize,
}

impl LatentHead {
    pub fn new<R: Rng>(in_dim: usize, hidden: usize, latent_dim: usize, rng: &mut R) -> Result<Self> {
        let dims = [in_dim, hidden, hidden, hidden, 2 * latent_dim];
        let acts = [
            Activation::Relu,
            Activation::Relu,
            Activation::Relu,
            Activation::Identity,
        ];
        Ok(LatentHead {
            net: Mlp::new(&dims, &acts, rng)?,
            latent_dim,
        })
    }

    /// Overwrite the bias feeding the softplus std half of the output,
    /// shifting where the predicted scale starts before any training.
    pub fn set_std_bias(&mut self, value: f64) {
        if let Some(last) = self.net.layers.last_mut() {
            for v in &mut last.b.data[self.latent_dim..2 * self.latent_dim] {
                *v = value;
            }
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        self.net.bind(g, trainable)
    }

    pub fn forward(&self, g: &mut Graph, binding: &Binding, input: NodeId) -> Result<GaussNodes> {
        let raw = self.net.forward(g, binding, input)?;
        let (rows, _) = g.shape(raw);
        let mean = g.slice_cols(raw, 0, self.latent_dim)?;
        let raw_std = g.slice_cols(raw, self.latent_dim, self.latent_dim)?;
        let sp = g.softplus(raw_std);
        let floor = g.constant(Tensor::full(rows, self.latent_dim, STD_FLOOR));
        let std = g.add(sp, floor)?;
        Ok(GaussNodes { mean, std })
    }

    pub fn forward_values(&self, input: &Tensor) -> Result<GaussianParams> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let binding = self.bind(&mut g, false);
        let out = self.forward(&mut g, &binding, x)?;
        GaussianParams::new(g.value_tensor(out.mean), g.value_tensor(out.std))
    }
}

/// mean + std * noise, elementwise. The noise is supplied by the caller so
/// sampling stays a deterministic function of its inputs.
pub fn reparam_sample(params: &GaussianParams, noise: &Tensor) -> Result<Tensor> {
    if !params.mean.same_shape(noise) {
        return Err(Error::shape(
            "reparam_sample",
            format!("params {} vs noise {}", params.mean.shape_str(), noise.shape_str()),
        ));
    }
    let data = params
        .mean
        .data
        .iter()
        .zip(&params.std.data)
        .zip(&noise.data)
        .map(|((m, s), n)| m + s * n)
        .collect();
    Tensor::new(params.mean.rows, params.mean.cols, data)
}

/// Graph version of [`reparam_sample`].
pub fn reparam_nodes(g: &mut Graph, params: GaussNodes, noise: NodeId) -> Result<NodeId> {
    let scaled = g.mul(params.std, noise)?;
    g.add(params.mean, scaled)
}

/// Per-row KL(q || p) for diagonal Gaussians, closed form, as an (n x 1)
/// node: sum_i [ ln(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2 ].
pub fn kl_diag_gauss_nodes(g: &mut Graph, q: GaussNodes, p: GaussNodes) -> Result<NodeId> {
    let (rows, cols) = g.shape(q.mean);
    let ratio = g.div(p.std, q.std)?;
    let log_ratio = g.log(ratio);
    let var_q = g.square(q.std);
    let diff = g.sub(q.mean, p.mean)?;
    let diff2 = g.square(diff);
    let num = g.add(var_q, diff2)?;
    let var_p = g.square(p.std);
    let two_var_p = g.scale(var_p, 2.0);
    let frac = g.div(num, two_var_p)?;
    let term = g.add(log_ratio, frac)?;
    let half = g.constant(Tensor::full(rows, cols, 0.5));
    let per_dim = g.sub(term, half)?;
    let ones = g.constant(Tensor::full(cols, 1, 1.0));
    g.matmul(per_dim, ones)
}

/// Plain-value per-row KL(q || p); see [`kl_diag_gauss_nodes`].
pub fn kl_diag_gauss(q: &GaussianParams, p: &GaussianParams) -> Result<Tensor> {
    if !q.mean.same_shape(&p.mean) {
        return Err(Error::shape(
            "kl_diag_gauss",
            format!("q {} vs p {}", q.mean.shape_str(), p.mean.shape_str()),
        ));
    }
    let (rows, cols) = (q.mean.rows, q.mean.cols);
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            let i = r * cols + c;
            let (mq, sq) = (q.mean.data[i], q.std.data[i]);
            let (mp, sp) = (p.mean.data[i], p.std.data[i]);
            acc += (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5;
        }
        out.push(acc);
    }
    Tensor::new(rows, 1, out)
}

// ── classifier ──────────────────────────────────────────────────────────────

/// Logits of p(y | z, x): the classifier sees the concatenation [x | z].
pub fn class_logits(
    g: &mut Graph,
    classifier: &Mlp,
    binding: &Binding,
    x: NodeId,
    z: NodeId,
) -> Result<NodeId> {
    let joint = g.concat_cols(x, z)?;
    classifier.forward(g, binding, joint)
}

/// Row-normalized class probabilities for (x, z) batches, value only.
pub fn classify(classifier: &Mlp, x: &Tensor, z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let zn = g.constant(z.clone());
    let binding = classifier.bind(&mut g, false);
    let logits = class_logits(&mut g, classifier, &binding, xn, zn)?;
    let probs = g.softmax_rows(logits);
    Ok(g.value_tensor(probs))
}

// ── energy network ──────────────────────────────────────────────────────────

/// E(x | z), bounded to [0, 1] by a final sigmoid. Three fully connected
/// layers (swish, swish, sigmoid) over the doubled input [x | z], with two
/// dropout slots after the hidden activations. All weights are kept under
/// spectral normalization: persistent power-iteration vectors are stored
/// alongside the layers, and `spectral_normalize` divides each weight by its
/// current top-singular-value estimate in place.
#[derive(Clone, Debug)]
pub struct EnergyNet {
    pub net: Mlp,
    pub dropout: f64,
    pub power_u: Vec<Vec<f64>>,
}

impl EnergyNet {
    /// Freshly initialized and spectrally normalized with `init_iters`
    /// power iterations per weight.
    pub fn new<R: Rng>(
        feature_dim: usize,
        hidden: usize,
        dropout: f64,
        init_iters: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dims = [2 * feature_dim, hidden, hidden, 1];
        let acts = [Activation::Swish, Activation::Swish, Activation::Sigmoid];
        let net = Mlp::new(&dims, &acts, rng)?;
        let power_u = net
            .layers
            .iter()
            .map(|l| {
                let mut u: Vec<f64> = (0..l.w.cols)
                    .map(|_| {
                        let n: f64 = StandardNormal.sample(rng);
                        n
                    })
                    .collect();
                normalize_in_place(&mut u);
                u
            })
            .collect();
        let mut e = EnergyNet {
            net,
            dropout,
            power_u,
        };
        e.spectral_normalize(init_iters);
        Ok(e)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        self.net.bind(g, trainable)
    }

    /// Per-row energy (n x 1). `masks`, when given, are two inverted-dropout
    /// masks applied after the hidden activations; evaluation and sampling
    /// pass `None`.
    pub fn forward(
        &self,
        g: &mut Graph,
        binding: &Binding,
        x: NodeId,
        z: NodeId,
        masks: Option<&[Tensor; 2]>,
    ) -> Result<NodeId> {
        let mut h = g.concat_cols(x, z)?;
        for (i, ((w, b), &act)) in binding.params.iter().zip(&self.net.acts).enumerate() {
            let lin = g.matmul(h, *w)?;
            let biased = g.add_bias(lin, *b)?;
            h = apply_activation(g, biased, act);
            if i < 2 {
                if let Some(m) = masks {
                    let mask = g.constant(m[i].clone());
                    h = g.mul(h, mask)?;
                }
            }
        }
        Ok(h)
    }

    /// Value-only energies for a batch.
    pub fn energy_values(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let zn = g.constant(z.clone());
        let binding = self.bind(&mut g, false);
        let e = self.forward(&mut g, &binding, xn, zn, None)?;
        Ok(g.value_tensor(e))
    }

    /// Run `iters` power iterations per weight (updating the persistent
    /// vectors) and divide each weight by its estimated spectral norm.
    /// Zero matrices are left untouched.
    pub fn spectral_normalize(&mut self, iters: usize) {
        for (layer, u) in self.net.layers.iter_mut().zip(&mut self.power_u) {
            let sigma = power_iterate(&layer.w, u, iters);
            if sigma > 1e-12 {
                for v in &mut layer.w.data {
                    *v /= sigma;
                }
            }
        }
    }

    /// Spectral-norm estimates without touching the persistent state.
    pub fn spectral_estimates(&self, iters: usize) -> Vec<f64> {
        self.net
            .layers
            .iter()
            .zip(&self.power_u)
            .map(|(layer, u)| {
                let mut scratch = u.clone();
                power_iterate(&layer.w, &mut scratch, iters)
            })
            .collect()
    }

    pub fn named_arrays(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.net.named_arrays(prefix)
    }
}

fn normalize_in_place(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    } else if let Some(first) = v.first_mut() {
        // Degenerate start; restart from a basis vector.
        *first = 1.0;
        for x in v.iter_mut().skip(1) {
            *x = 0.0;
        }
    }
}

/// Power iteration for the top singular value of `w` (in x out), updating
/// the persistent right-singular estimate `u` (length out). Returns 0 for
/// an all-zero matrix.
fn power_iterate(w: &Tensor, u: &mut [f64], iters: usize) -> f64 {
    debug_assert_eq!(u.len(), w.cols);
    let (rows, cols) = (w.rows, w.cols);
    let mut v = vec![0.0; rows];
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        // v = normalize(W u)
        for i in 0..rows {
            let row = w.row_slice(i);
            v[i] = row.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
        }
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm <= 1e-300 {
            return 0.0;
        }
        for x in v.iter_mut() {
            *x /= vnorm;
        }
        // u = W^T v; its norm is the singular-value estimate.
        for j in 0..cols {
            u[j] = 0.0;
        }
        for i in 0..rows {
            let row = w.row_slice(i);
            let vi = v[i];
            for j in 0..cols {
                u[j] += row[j] * vi;
            }
        }
        sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if sigma <= 1e-300 {
            return 0.0;
        }
        for x in u.iter_mut() {
            *x /= sigma;
        }
    }
    sigma
}

/// Inverted-dropout masks: entries are 0 with probability p, else 1/(1-p).
pub fn dropout_masks<R: Rng>(rows: usize, cols: usize, p: f64, rng: &mut R) -> [Tensor; 2] {
    let mut draw = || {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    1.0 / (1.0 - p)
                }
            })
            .collect();
        Tensor {
            rows,
            cols,
            data,
        }
    };
    [draw(), draw()]
}

/// Everything that is domain-specific: classifier and latent heads (the
/// per-domain classification parameters) plus the domain's energy network.
#[derive(Clone, Debug)]
pub struct DomainModel {
    pub classifier: Mlp,
    pub prior: LatentHead,
    pub posterior: LatentHead,
    pub energy: EnergyNet,
}
