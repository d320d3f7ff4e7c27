//! Langevin-dynamics chains over feature space, plus the replay buffer
//! used to seed negative chains during training.
//!
//! A chain repeatedly nudges a feature batch downhill on a conditional
//! energy surface while injecting Gaussian noise:
//!
//! ```text
//! x' = x - (step_size / 2) * clip(dE(x|z)/dx, grad_clip) + noise_std * n
//! ```
//!
//! The latent `z` and the energy parameters stay fixed for the whole
//! chain; only the features move. Rows of the batch are independent
//! chains sharing one config and one noise stream.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::DomainBatch;
use crate::error::{Error, Result};
use crate::nets::EnergyNet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SgldConfig {
    pub step_size: f64,
    pub num_steps: usize,
    pub noise_std: f64,
    pub grad_clip: f64,
    pub record_trace: bool,
}

impl Default for SgldConfig {
    fn default() -> Self {
        SgldConfig {
            step_size: 50.0,
            num_steps: 20,
            noise_std: 0.001,
            grad_clip: 0.01,
            record_trace: false,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Energy surface a chain can walk on: per-row energies together with the
/// gradient of their sum with respect to the features.
pub trait ConditionalEnergy {
    /// Returns `(energies, grad)` where `energies` is n x 1 and `grad` is
    /// the n x d gradient of the summed energy (rows are independent, so
    /// row j of `grad` is the gradient of row j's energy alone).
    fn energy_and_grad(&self, x: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor)>;

    /// Value-only energies, for trace recording.
    fn energy(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        Ok(self.energy_and_grad(x, z)?.0)
    }
}

impl ConditionalEnergy for EnergyNet {
    fn energy_and_grad(&self, x: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone(), true);
        let zn = g.constant(z.clone());
        let binding = self.bind(&mut g, false);
        let e = self.forward(&mut g, &binding, xn, zn, None)?;
        let total = g.sum(e);
        g.backward(total)?;
        let grad = g
            .grad(xn)
            .unwrap_or_else(|| Tensor::zeros(x.rows, x.cols));
        Ok((g.value_tensor(e), grad))
    }

    fn energy(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.energy_values(x, z)
    }
}

/// One step of the chain. `noise` must be standard normal with the shape
/// of `x`; it is scaled by `noise_std` here so a zero-noise run can pass
/// any tensor.
pub fn langevin_step<E: ConditionalEnergy + ?Sized>(
    energy: &E,
    x: &Tensor,
    z: &Tensor,
    cfg: &SgldConfig,
    noise: &Tensor,
) -> Result<Tensor> {
    if !x.same_shape(noise) {
        return Err(Error::shape(
            "langevin_step",
            format!("noise {} vs x {}", noise.shape_str(), x.shape_str()),
        ));
    }
    let (_, grad) = energy.energy_and_grad(x, z)?;
    if !grad.all_finite() {
        return Err(Error::NonFinite {
            context: "energy gradient in langevin_step".into(),
        });
    }
    let half = 0.5 * cfg.step_size;
    let c = cfg.grad_clip;
    let mut out = x.clone();
    for i in 0..out.data.len() {
        let g = grad.data[i].clamp(-c, c);
        out.data[i] += cfg.noise_std * noise.data[i] - half * g;
    }
    Ok(out)
}

/// Snapshot of every chain in the batch after `step` updates.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub step: usize,
    pub features: Tensor,
    pub energies: Tensor,
    pub probs: Option<Tensor>,
}

/// Per-step history of a chain batch; `steps.len() == num_steps + 1`
/// because the initial state is included.
#[derive(Debug, Clone, Default)]
pub struct AdaptationTrace {
    pub steps: Vec<TraceStep>,
}

/// Optional per-step probe for traces: maps current features to class
/// probabilities (the latent is fixed, so callers bake it in).
pub type ProbeFn<'a> = dyn Fn(&Tensor) -> Result<Tensor> + 'a;

/// Runs `num_steps` Langevin steps from `x0` with fixed `z`. Noise is
/// drawn from `rng` every step regardless of `noise_std`, so runs with
/// different noise scales stay draw-for-draw comparable. A trace is
/// returned only when `cfg.record_trace` is set; `probe`, when given,
/// attaches class probabilities to each trace step.
pub fn adapt<E: ConditionalEnergy + ?Sized, R: Rng>(
    energy: &E,
    x0: &Tensor,
    z: &Tensor,
    cfg: &SgldConfig,
    rng: &mut R,
    probe: Option<&ProbeFn>,
) -> Result<(Tensor, Option<AdaptationTrace>)> {
    if !x0.all_finite() {
        return Err(Error::NonFinite {
            context: "chain start features".into(),
        });
    }
    let mut x = x0.clone();
    let mut trace = if cfg.record_trace {
        Some(AdaptationTrace {
            steps: Vec::with_capacity(cfg.num_steps + 1),
        })
    } else {
        None
    };
    for step in 0..cfg.num_steps {
        if let Some(t) = trace.as_mut() {
            t.steps.push(snapshot(energy, &x, z, step, probe)?);
        }
        let noise = standard_normal(x.rows, x.cols, rng);
        x = langevin_step(energy, &x, z, cfg, &noise)?;
    }
    if let Some(t) = trace.as_mut() {
        t.steps.push(snapshot(energy, &x, z, cfg.num_steps, probe)?);
    }
    Ok((x, trace))
}

fn snapshot<E: ConditionalEnergy + ?Sized>(
    energy: &E,
    x: &Tensor,
    z: &Tensor,
    step: usize,
    probe: Option<&ProbeFn>,
) -> Result<TraceStep> {
    Ok(TraceStep {
        step,
        features: x.clone(),
        energies: energy.energy(x, z)?,
        probs: probe.map(|p| p(x)).transpose()?,
    })
}

fn standard_normal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let n: f64 = StandardNormal.sample(rng);
            n
        })
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

#[derive(Debug, Clone)]
pub struct BufferEntry {
    pub feature: Vec<f64>,
    pub label: u32,
    pub domain: i32,
}

/// Bounded FIFO of adapted negatives. Entries keep their label and
/// origin domain so a buffer-seeded chain still has a classification
/// target.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    sample_probability: f64,
    dim: usize,
    entries: VecDeque<BufferEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, sample_probability: f64, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay buffer capacity must be positive".into()));
        }
        if !(0.0..=1.0).contains(&sample_probability) {
            return Err(Error::Config(
                "replay buffer sample probability must lie in [0, 1]".into(),
            ));
        }
        Ok(ReplayBuffer {
            capacity,
            sample_probability,
            dim,
            entries: VecDeque::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn sample_probability(&self) -> f64 {
        self.sample_probability
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter()
    }

    /// For each row of `batch`, independently with `sample_probability`
    /// (and only while the buffer is non-empty), substitutes a uniformly
    /// drawn stored entry for the supplied sample. Returns the mixed
    /// batch plus a per-row flag marking buffer-origin rows.
    pub fn init_batch<R: Rng>(
        &self,
        batch: &DomainBatch,
        rng: &mut R,
    ) -> Result<(DomainBatch, Vec<bool>)> {
        let n = batch.features.rows;
        if batch.features.cols != self.dim {
            return Err(Error::shape(
                "buffer_init",
                format!("batch dim {} vs buffer dim {}", batch.features.cols, self.dim),
            ));
        }
        let mut out = batch.clone();
        let mut from_buffer = vec![false; n];
        if self.entries.is_empty() || self.sample_probability == 0.0 {
            return Ok((out, from_buffer));
        }
        for row in 0..n {
            if rng.gen::<f64>() < self.sample_probability {
                let e = &self.entries[rng.gen_range(0..self.entries.len())];
                out.features.data[row * self.dim..(row + 1) * self.dim]
                    .copy_from_slice(&e.feature);
                out.labels[row] = e.label;
                out.domains[row] = e.domain;
                from_buffer[row] = true;
            }
        }
        Ok((out, from_buffer))
    }

    /// Appends every row of `batch`, evicting oldest entries beyond
    /// capacity.
    pub fn push_batch(&mut self, batch: &DomainBatch) -> Result<()> {
        if batch.features.rows > 0 && batch.features.cols != self.dim {
            return Err(Error::shape(
                "buffer_push",
                format!("batch dim {} vs buffer dim {}", batch.features.cols, self.dim),
            ));
        }
        for row in 0..batch.features.rows {
            self.entries.push_back(BufferEntry {
                feature: batch.features.row_slice(row).to_vec(),
                label: batch.labels[row],
                domain: batch.domains[row],
            });
            if self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
        Ok(())
    }

    /// Flattens the stored entries for checkpointing.
    pub fn to_parts(&self) -> (Tensor, Vec<u32>, Vec<i32>) {
        let n = self.entries.len();
        let mut data = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        let mut domains = Vec::with_capacity(n);
        for e in &self.entries {
            data.extend_from_slice(&e.feature);
            labels.push(e.label);
            domains.push(e.domain);
        }
        (Tensor::new(n, self.dim, data).unwrap(), labels, domains)
    }

    /// Rebuilds a buffer from checkpointed parts; order is preserved so
    /// eviction resumes where it left off.
    pub fn from_parts(
        capacity: usize,
        sample_probability: f64,
        features: Tensor,
        labels: Vec<u32>,
        domains: Vec<i32>,
    ) -> Result<Self> {
        if features.rows != labels.len() || features.rows != domains.len() {
            return Err(Error::shape(
                "buffer_from_parts",
                format!(
                    "{} feature rows vs {} labels and {} domains",
                    features.rows,
                    labels.len(),
                    domains.len()
                ),
            ));
        }
        let mut buf = ReplayBuffer::new(capacity, sample_probability, features.cols)?;
        for row in 0..features.rows {
            buf.entries.push_back(BufferEntry {
                feature: features.row_slice(row).to_vec(),
                label: labels[row],
                domain: domains[row],
            });
            if buf.entries.len() > buf.capacity {
                buf.entries.pop_front();
            }
        }
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// E(x) = 0.5 * ||x||^2 per row, so the gradient is x itself.
    struct Quadratic;

    impl ConditionalEnergy for Quadratic {
        fn energy_and_grad(&self, x: &Tensor, _z: &Tensor) -> Result<(Tensor, Tensor)> {
            let mut e = Tensor::zeros(x.rows, 1);
            for r in 0..x.rows {
                e.data[r] = 0.5 * x.row_slice(r).iter().map(|v| v * v).sum::<f64>();
            }
            Ok((e, x.clone()))
        }
    }

    /// E(x) = slope * sum(x), so every gradient entry is `slope`.
    struct Linear {
        slope: f64,
    }

    impl ConditionalEnergy for Linear {
        fn energy_and_grad(&self, x: &Tensor, _z: &Tensor) -> Result<(Tensor, Tensor)> {
            let mut e = Tensor::zeros(x.rows, 1);
            for r in 0..x.rows {
                e.data[r] = self.slope * x.row_slice(r).iter().sum::<f64>();
            }
            Ok((e, Tensor::full(x.rows, x.cols, self.slope)))
        }
    }

    fn zero_noise_cfg(step_size: f64, grad_clip: f64) -> SgldConfig {
        SgldConfig {
            step_size,
            num_steps: 1,
            noise_std: 0.0,
            grad_clip,
            record_trace: false,
        }
    }

    #[test]
    fn quadratic_step_halves_the_point() {
        let cfg = zero_noise_cfg(1.0, 1e9);
        let x = Tensor::row(&[2.0, 0.0]);
        let z = Tensor::zeros(1, 2);
        let noise = Tensor::zeros(1, 2);
        let out = langevin_step(&Quadratic, &x, &z, &cfg, &noise).unwrap();
        assert_eq!(out.data, vec![1.0, 0.0]);
    }

    #[test]
    fn gradient_entries_are_clipped_to_the_configured_magnitude() {
        // Slope 0.05 against clip 0.01: displacement must be exactly
        // (step_size / 2) * 0.01 regardless of the true gradient.
        let cfg = zero_noise_cfg(2.0, 0.01);
        let x = Tensor::row(&[0.0, 0.0, 0.0]);
        let z = Tensor::zeros(1, 1);
        let noise = Tensor::zeros(1, 3);
        let out = langevin_step(&Linear { slope: 0.05 }, &x, &z, &cfg, &noise).unwrap();
        for v in &out.data {
            assert!((v + 0.01).abs() < 1e-15, "got {v}, expected -0.01");
        }
        // And with a negative slope the clip is symmetric.
        let out = langevin_step(&Linear { slope: -3.0 }, &x, &z, &cfg, &noise).unwrap();
        for v in &out.data {
            assert!((v - 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn noiseless_chain_has_monotone_energy_on_convex_surface() {
        let cfg = SgldConfig {
            step_size: 0.5,
            num_steps: 30,
            noise_std: 0.0,
            grad_clip: 1e9,
            record_trace: true,
        };
        let x0 = Tensor::row(&[3.0, -2.0, 1.5]);
        let z = Tensor::zeros(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, trace) = adapt(&Quadratic, &x0, &z, &cfg, &mut rng, None).unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.steps.len(), cfg.num_steps + 1);
        for w in trace.steps.windows(2) {
            assert!(
                w[1].energies.data[0] <= w[0].energies.data[0],
                "energy rose from {} to {}",
                w[0].energies.data[0],
                w[1].energies.data[0]
            );
        }
    }

    #[test]
    fn noiseless_quadratic_chain_converges_geometrically() {
        // Unclipped update is x <- (1 - step/2) x, a fixed contraction.
        let step = 0.8;
        let cfg = SgldConfig {
            step_size: step,
            num_steps: 12,
            noise_std: 0.0,
            grad_clip: 1e9,
            record_trace: true,
        };
        let x0 = Tensor::row(&[0.9, -0.4]);
        let z = Tensor::zeros(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, trace) = adapt(&Quadratic, &x0, &z, &cfg, &mut rng, None).unwrap();
        let trace = trace.unwrap();
        let ratio = 1.0 - step / 2.0;
        for w in trace.steps.windows(2) {
            for (a, b) in w[0].features.data.iter().zip(&w[1].features.data) {
                assert!((b - a * ratio).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_steps_returns_start_unchanged() {
        let cfg = SgldConfig {
            num_steps: 0,
            record_trace: true,
            ..SgldConfig::default()
        };
        let x0 = Tensor::row(&[1.0, 2.0, 3.0]);
        let z = Tensor::zeros(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (out, trace) = adapt(&Quadratic, &x0, &z, &cfg, &mut rng, None).unwrap();
        assert_eq!(out.data, x0.data);
        assert_eq!(trace.unwrap().steps.len(), 1);
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let cfg = SgldConfig {
            step_size: 0.3,
            num_steps: 15,
            noise_std: 0.05,
            grad_clip: 1.0,
            record_trace: false,
        };
        let x0 = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap();
        let z = Tensor::zeros(2, 1);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            adapt(&Quadratic, &x0, &z, &cfg, &mut rng, None).unwrap().0
        };
        assert_eq!(run(42).data, run(42).data);
        assert_ne!(run(42).data, run(43).data);
    }

    #[test]
    fn batched_rows_evolve_independently() {
        // Running two rows together must equal running them separately:
        // same per-row energies, and with noise off, same trajectories.
        let cfg = SgldConfig {
            step_size: 0.5,
            num_steps: 8,
            noise_std: 0.0,
            grad_clip: 1e9,
            record_trace: false,
        };
        let both = Tensor::from_rows(&[vec![2.0, 1.0], vec![-3.0, 0.5]]).unwrap();
        let z = Tensor::zeros(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (joint, _) = adapt(&Quadratic, &both, &z, &cfg, &mut rng, None).unwrap();
        for r in 0..2 {
            let solo = Tensor::row(both.row_slice(r));
            let zr = Tensor::zeros(1, 1);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (out, _) = adapt(&Quadratic, &solo, &zr, &cfg, &mut rng, None).unwrap();
            assert_eq!(out.data, joint.row_slice(r));
        }
    }

    #[test]
    fn energy_net_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = EnergyNet::new(3, 5, 0.0, 20, &mut rng).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.2, 0.5], vec![-0.1, 0.4, 0.2]]).unwrap();
        let z = Tensor::from_rows(&[vec![0.1, 0.0, -0.3], vec![0.2, -0.2, 0.1]]).unwrap();
        let (_, grad) = net.energy_and_grad(&x, &z).unwrap();
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut plus = x.clone();
            plus.data[i] += h;
            let mut minus = x.clone();
            minus.data[i] -= h;
            let ep: f64 = net.energy_values(&plus, &z).unwrap().data.iter().sum();
            let em: f64 = net.energy_values(&minus, &z).unwrap().data.iter().sum();
            let fd = (ep - em) / (2.0 * h);
            assert!(
                (grad.data[i] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                "component {i}: autodiff {} vs fd {fd}",
                grad.data[i]
            );
        }
    }

    #[test]
    fn adapt_leaves_energy_parameters_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = EnergyNet::new(2, 4, 0.0, 20, &mut rng).unwrap();
        let before: Vec<Vec<f64>> = net.net.layers.iter().map(|l| l.w.data.clone()).collect();
        let x0 = Tensor::from_rows(&[vec![0.5, -0.5], vec![1.0, 0.2]]).unwrap();
        let z = Tensor::zeros(2, 2);
        let cfg = SgldConfig {
            num_steps: 5,
            ..SgldConfig::default()
        };
        adapt(&net, &x0, &z, &cfg, &mut rng, None).unwrap();
        for (l, b) in net.net.layers.iter().zip(&before) {
            assert_eq!(&l.w.data, b);
        }
    }

    #[test]
    fn trace_probe_attaches_probabilities() {
        let cfg = SgldConfig {
            step_size: 0.1,
            num_steps: 3,
            noise_std: 0.0,
            grad_clip: 1.0,
            record_trace: true,
        };
        let x0 = Tensor::row(&[1.0, 1.0]);
        let z = Tensor::zeros(1, 1);
        let probe = |x: &Tensor| -> Result<Tensor> {
            // Fake two-class probabilities from the first coordinate.
            let p = 1.0 / (1.0 + (-x.data[0]).exp());
            Tensor::new(1, 2, vec![p, 1.0 - p])
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, trace) = adapt(&Quadratic, &x0, &z, &cfg, &mut rng, Some(&probe)).unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.steps.len(), 4);
        for s in &trace.steps {
            let p = s.probs.as_ref().unwrap();
            assert_eq!((p.rows, p.cols), (1, 2));
            assert!((p.data[0] + p.data[1] - 1.0).abs() < 1e-12);
        }
    }

    fn batch_of(n: usize, dim: usize, label: u32, domain: i32, fill: f64) -> DomainBatch {
        DomainBatch {
            features: Tensor::full(n, dim, fill),
            labels: vec![label; n],
            domains: vec![domain; n],
        }
    }

    #[test]
    fn empty_buffer_returns_batch_verbatim() {
        let buf = ReplayBuffer::new(10, 0.5, 3).unwrap();
        let batch = batch_of(4, 3, 1, 15, 2.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, flags) = buf.init_batch(&batch, &mut rng).unwrap();
        assert_eq!(out.features.data, batch.features.data);
        assert!(flags.iter().all(|f| !f));
    }

    #[test]
    fn zero_probability_returns_batch_verbatim() {
        let mut buf = ReplayBuffer::new(10, 0.0, 3).unwrap();
        buf.push_batch(&batch_of(5, 3, 0, 30, -1.0)).unwrap();
        let batch = batch_of(4, 3, 1, 15, 2.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, flags) = buf.init_batch(&batch, &mut rng).unwrap();
        assert_eq!(out.features.data, batch.features.data);
        assert!(flags.iter().all(|f| !f));
    }

    #[test]
    fn buffer_origin_fraction_matches_probability() {
        let mut buf = ReplayBuffer::new(500, 0.5, 2).unwrap();
        for i in 0..5 {
            buf.push_batch(&batch_of(100, 2, i, 45, i as f64)).unwrap();
        }
        assert_eq!(buf.len(), 500);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut hits = 0usize;
        let mut total = 0usize;
        let batch = batch_of(100, 2, 9, 15, 7.0);
        for _ in 0..100 {
            let (_, flags) = buf.init_batch(&batch, &mut rng).unwrap();
            hits += flags.iter().filter(|&&f| f).count();
            total += flags.len();
        }
        assert_eq!(total, 10_000);
        let frac = hits as f64 / total as f64;
        assert!(
            (0.47..=0.53).contains(&frac),
            "buffer fraction {frac} outside [0.47, 0.53]"
        );
    }

    #[test]
    fn push_beyond_capacity_evicts_oldest() {
        let mut buf = ReplayBuffer::new(500, 0.5, 2).unwrap();
        for i in 0..600u32 {
            let batch = DomainBatch {
                features: Tensor::row(&[i as f64, 0.0]),
                labels: vec![i % 4],
                domains: vec![60],
            };
            buf.push_batch(&batch).unwrap();
        }
        assert_eq!(buf.len(), 500);
        // The first 100 pushes are gone; the oldest survivor is #100.
        let first = buf.entries().next().unwrap();
        assert_eq!(first.feature[0], 100.0);
        assert_eq!(first.label, 100 % 4);
    }

    #[test]
    fn push_empty_batch_is_a_no_op() {
        let mut buf = ReplayBuffer::new(10, 0.5, 3).unwrap();
        buf.push_batch(&batch_of(2, 3, 1, 0, 1.0)).unwrap();
        let empty = DomainBatch {
            features: Tensor::zeros(0, 3),
            labels: vec![],
            domains: vec![],
        };
        buf.push_batch(&empty).unwrap();
        assert_eq!(buf.len(), 2);
    }

    #[test]
    fn buffer_entries_round_trip_labels_and_domains() {
        let mut buf = ReplayBuffer::new(10, 1.0, 2).unwrap();
        let batch = DomainBatch {
            features: Tensor::row(&[3.25, -7.5]),
            labels: vec![2],
            domains: vec![75],
        };
        buf.push_batch(&batch).unwrap();
        let target = batch_of(1, 2, 0, 15, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, flags) = buf.init_batch(&target, &mut rng).unwrap();
        assert!(flags[0]);
        assert_eq!(out.features.data, vec![3.25, -7.5]);
        assert_eq!(out.labels[0], 2);
        assert_eq!(out.domains[0], 75);
    }

    #[test]
    fn buffer_checkpoint_parts_round_trip() {
        let mut buf = ReplayBuffer::new(5, 0.5, 2).unwrap();
        for i in 0..7u32 {
            let batch = DomainBatch {
                features: Tensor::row(&[i as f64, i as f64 + 0.5]),
                labels: vec![i],
                domains: vec![i as i32 * 15],
            };
            buf.push_batch(&batch).unwrap();
        }
        let (f, l, d) = buf.to_parts();
        let rebuilt = ReplayBuffer::from_parts(5, 0.5, f, l, d).unwrap();
        assert_eq!(rebuilt.len(), buf.len());
        for (a, b) in rebuilt.entries().zip(buf.entries()) {
            assert_eq!(a.feature, b.feature);
            assert_eq!(a.label, b.label);
            assert_eq!(a.domain, b.domain);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut buf = ReplayBuffer::new(10, 0.5, 3).unwrap();
        let bad = batch_of(2, 4, 0, 0, 1.0);
        assert!(buf.push_batch(&bad).is_err());
        assert!(buf.init_batch(&bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
