//! Training loop: per-iteration round robin over source domains, with
//! chain-adapted negatives, per-group Adam updates, spectral-norm
//! maintenance on the energy weights, and replay-buffer upkeep.
//!
//! One shared trunk is updated by every domain's step; the classifier,
//! latent heads, energy function, and replay buffer are per-domain and a
//! step for domain i touches only domain i's copies. All randomness
//! flows from a single counter-based generator whose position is saved
//! in checkpoints, and batch order comes from stateless per-epoch
//! shuffles, so an interrupted run resumes bit-exactly.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::data::{epoch_order, DomainBatch, DomainDataset};
use crate::error::{Error, Result};
use crate::nets::{
    dropout_masks, Activation, DomainModel, EnergyNet, LatentHead, Mlp,
};
use crate::objective::{
    centers_with_fallback, loss_no_latent, loss_with_latent, LatentNegatives, LossBreakdown,
    LossNoise, LossOutput, LossWeights,
};
use crate::seeds;
use crate::sgld::{adapt, ReplayBuffer, SgldConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Network sizes. `energy_hidden` defaults to twice the feature width
/// when absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub feature_dim: usize,
    pub trunk_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub latent_hidden: usize,
    pub energy_hidden: Option<usize>,
    pub dropout: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            feature_dim: 8,
            trunk_hidden: vec![64, 64],
            classifier_hidden: vec![32],
            latent_hidden: 32,
            energy_hidden: None,
            dropout: 0.1,
        }
    }
}

impl NetConfig {
    pub fn energy_width(&self) -> usize {
        self.energy_hidden.unwrap_or(2 * self.feature_dim)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_trunk: f64,
    pub lr_heads: f64,
    pub sgld: SgldConfig,
    pub buffer_capacity: usize,
    pub buffer_probability: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    /// Train the full latent-conditioned loss; switched off, the plain
    /// contrastive loss runs with a zero latent.
    pub use_latent: bool,
    pub net: NetConfig,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 64,
            lr_trunk: 1e-4,
            lr_heads: 1e-4,
            sgld: SgldConfig::default(),
            buffer_capacity: 500,
            buffer_probability: 0.5,
            seed: 1,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            use_latent: true,
            net: NetConfig::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_trunk > 0.0) || !(self.lr_heads > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.buffer_probability) {
            return Err(Error::Config(
                "buffer_probability must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.net.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        self.sgld.validate()
    }
}

// ── optimizer ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Tensor,
    v: Tensor,
}

/// Adaptive-moment optimizer state for one network's parameter list.
#[derive(Debug, Clone)]
pub struct AdamOpt {
    t: u64,
    slots: Vec<AdamSlot>,
}

impl AdamOpt {
    fn for_params(params: &[&Tensor]) -> Self {
        AdamOpt {
            t: 0,
            slots: params
                .iter()
                .map(|p| AdamSlot {
                    m: Tensor::zeros(p.rows, p.cols),
                    v: Tensor::zeros(p.rows, p.cols),
                })
                .collect(),
        }
    }

    fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64, cfg: &AdamConfig) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.slots.len());
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for ((p, g), slot) in params.into_iter().zip(grads).zip(&mut self.slots) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                slot.m.data[i] = cfg.beta1 * slot.m.data[i] + (1.0 - cfg.beta1) * gi;
                slot.v.data[i] = cfg.beta2 * slot.v.data[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = slot.m.data[i] / bc1;
                let vh = slot.v.data[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + cfg.epsilon);
            }
        }
    }
}

// ── model bundle ────────────────────────────────────────────────────────────

/// Shared trunk plus one (classifier, latent heads, energy) group per
/// source domain. `centroids`, when present, holds each domain's mean
/// training feature (one row per domain) for similarity-weighted
/// aggregation at inference time.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub trunk: Mlp,
    pub domains: Vec<DomainModel>,
    pub domain_ids: Vec<i32>,
    pub num_classes: usize,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub centroids: Option<Tensor>,
    /// Outer iterations completed; zero means freshly initialized.
    pub trained_iterations: usize,
}

impl ModelBundle {
    pub fn new(
        net: &NetConfig,
        input_dim: usize,
        num_classes: usize,
        domain_ids: &[i32],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if domain_ids.is_empty() {
            return Err(Error::Config("at least one source domain required".into()));
        }
        let f = net.feature_dim;
        let mut trunk_dims = vec![input_dim];
        trunk_dims.extend_from_slice(&net.trunk_hidden);
        trunk_dims.push(f);
        let mut trunk_acts = vec![Activation::Relu; net.trunk_hidden.len()];
        trunk_acts.push(Activation::Identity);
        let trunk = Mlp::new(&trunk_dims, &trunk_acts, rng)?;

        let mut cls_dims = vec![2 * f];
        cls_dims.extend_from_slice(&net.classifier_hidden);
        cls_dims.push(num_classes);
        let mut cls_acts = vec![Activation::Relu; net.classifier_hidden.len()];
        cls_acts.push(Activation::Identity);

        let domains = domain_ids
            .iter()
            .map(|_| {
                Ok(DomainModel {
                    classifier: Mlp::new(&cls_dims, &cls_acts, rng)?,
                    prior: LatentHead::new(f, net.latent_hidden, f, rng)?,
                    posterior: LatentHead::new(f, net.latent_hidden, f, rng)?,
                    energy: EnergyNet::new(f, net.energy_width(), net.dropout, 20, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(ModelBundle {
            trunk,
            domains,
            domain_ids: domain_ids.to_vec(),
            num_classes,
            input_dim,
            feature_dim: f,
            centroids: None,
            trained_iterations: 0,
        })
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    /// Stable FNV-1a hash over every parameter byte, spectral vectors
    /// included. Two bundles compare equal iff all values are
    /// bit-identical.
    pub fn param_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for (_, t) in self.named_arrays() {
            for &v in &t.data {
                eat(v);
            }
        }
        h
    }

    fn named_arrays(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.trunk.named_arrays("trunk");
        for (k, d) in self.domains.iter().enumerate() {
            out.extend(d.classifier.named_arrays(&format!("domain{k}.classifier")));
            out.extend(d.prior.net.named_arrays(&format!("domain{k}.prior")));
            out.extend(d.posterior.net.named_arrays(&format!("domain{k}.posterior")));
            out.extend(d.energy.named_arrays(&format!("domain{k}.energy")));
        }
        out
    }
}

// ── trainer ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub domain_id: i32,
    #[serde(skip)]
    pub loss: LossBreakdown,
}

struct DomainOpts {
    classifier: AdamOpt,
    prior: AdamOpt,
    posterior: AdamOpt,
    energy: AdamOpt,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub bundle: ModelBundle,
    buffers: Vec<ReplayBuffer>,
    trunk_opt: AdamOpt,
    domain_opts: Vec<DomainOpts>,
    master: ChaCha8Rng,
    /// Completed outer iterations.
    pub iteration: usize,
    warned_single_domain: bool,
}

fn opt_for(mlp: &Mlp) -> AdamOpt {
    let refs: Vec<&Tensor> = mlp
        .layers
        .iter()
        .flat_map(|l| [&l.w, &l.b])
        .collect();
    AdamOpt::for_params(&refs)
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        input_dim: usize,
        num_classes: usize,
        domain_ids: &[i32],
    ) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, 0));
        let bundle = ModelBundle::new(&cfg.net, input_dim, num_classes, domain_ids, &mut init_rng)?;
        let master = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, 1));
        let buffers = domain_ids
            .iter()
            .map(|_| {
                ReplayBuffer::new(
                    cfg.buffer_capacity,
                    cfg.buffer_probability,
                    cfg.net.feature_dim,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let trunk_opt = opt_for(&bundle.trunk);
        let domain_opts = bundle
            .domains
            .iter()
            .map(|d| DomainOpts {
                classifier: opt_for(&d.classifier),
                prior: opt_for(&d.prior.net),
                posterior: opt_for(&d.posterior.net),
                energy: opt_for(&d.energy.net),
            })
            .collect();
        Ok(Trainer {
            cfg,
            bundle,
            buffers,
            trunk_opt,
            domain_opts,
            master,
            iteration: 0,
            warned_single_domain: false,
        })
    }

    pub fn buffer(&self, domain_idx: usize) -> &ReplayBuffer {
        &self.buffers[domain_idx]
    }

    /// Deterministic batch for (domain, iteration): stateless per-epoch
    /// shuffles indexed by the global iteration counter.
    fn batch_indices(&self, ds: &DomainDataset, domain_idx: usize, iteration: usize) -> Vec<usize> {
        let n = ds.len();
        let b = self.cfg.batch_size.min(n);
        let per_epoch = n.div_ceil(b);
        let epoch = iteration / per_epoch;
        let slot = iteration % per_epoch;
        let order = epoch_order(n, self.cfg.seed, domain_idx as u64, epoch as u64);
        let start = slot * b;
        let end = (start + b).min(n);
        order[start..end].to_vec()
    }

    fn standard_normal(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| {
                let n: f64 = StandardNormal.sample(&mut self.master);
                n
            })
            .collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    /// One step of the inner loop for the given domain. Reads batches
    /// for every domain at the current iteration, adapts the negatives
    /// under this domain's energy, evaluates the loss, and applies the
    /// two update rules (trunk and heads at `lr_trunk`/`lr_heads`).
    /// Nothing is mutated if any loss value or gradient is non-finite.
    pub fn train_step(
        &mut self,
        datasets: &[DomainDataset],
        domain_idx: usize,
    ) -> Result<LossBreakdown> {
        if datasets.len() != self.bundle.num_domains() {
            return Err(Error::usage(format!(
                "{} datasets for {} domains",
                datasets.len(),
                self.bundle.num_domains()
            )));
        }
        let f = self.bundle.feature_dim;
        let pos_idx = self.batch_indices(&datasets[domain_idx], domain_idx, self.iteration);
        let pos = DomainBatch::from_dataset(&datasets[domain_idx], &pos_idx);

        if self.bundle.num_domains() == 1 {
            if !self.warned_single_domain {
                log::warn!(
                    "single source domain: no negatives exist, training classifier terms only"
                );
                self.warned_single_domain = true;
            }
            return self.positives_only_step(&pos);
        }

        // Union of the other domains' batches, then per-row replay-buffer
        // substitution in feature space.
        let mut parts = Vec::with_capacity(self.bundle.num_domains() - 1);
        for j in 0..self.bundle.num_domains() {
            if j == domain_idx {
                continue;
            }
            let idx = self.batch_indices(&datasets[j], j, self.iteration);
            let raw = DomainBatch::from_dataset(&datasets[j], &idx);
            parts.push(DomainBatch {
                features: self.bundle.trunk.forward_values(&raw.features)?,
                labels: raw.labels,
                domains: raw.domains,
            });
        }
        let neg_fresh = DomainBatch::concat(&parts)?;
        let (neg, _from_buffer) =
            self.buffers[domain_idx].init_batch(&neg_fresh, &mut self.master)?;
        let n_neg = neg.features.rows;

        let pos_feats = self.bundle.trunk.forward_values(&pos.features)?;
        let model = &self.bundle.domains[domain_idx];

        // Latent conditioning is fixed before the chains run: centers
        // come from the positive batch when the class is present there,
        // else from the negatives themselves, and the draw uses the
        // posterior's current values with no gradient path.
        let (z_neg, centers) = if self.cfg.use_latent {
            let centers = centers_with_fallback(
                (&pos_feats, &pos.labels),
                (&neg.features, &neg.labels),
                &neg.labels,
            )?;
            let q = model.posterior.forward_values(&centers)?;
            let eps = {
                let data = (0..n_neg * f)
                    .map(|_| {
                        let n: f64 = StandardNormal.sample(&mut self.master);
                        n
                    })
                    .collect();
                Tensor::new(n_neg, f, data).unwrap()
            };
            (crate::nets::reparam_sample(&q, &eps)?, centers)
        } else {
            (Tensor::zeros(n_neg, f), Tensor::zeros(n_neg, f))
        };

        let model = &self.bundle.domains[domain_idx];
        let (adapted, _) = adapt(
            &model.energy,
            &neg.features,
            &z_neg,
            &self.cfg.sgld,
            &mut self.master,
            None,
        )?;

        let noise = LossNoise {
            z_pos: self.standard_normal(pos.features.rows, f),
            dropout_pos: self.masks(pos.features.rows),
            dropout_neg: self.masks(n_neg),
        };

        let model = &self.bundle.domains[domain_idx];
        let out = if self.cfg.use_latent {
            loss_with_latent(
                &self.bundle.trunk,
                model,
                &pos,
                &LatentNegatives {
                    adapted: &adapted,
                    labels: &neg.labels,
                    z: &z_neg,
                    centers: &centers,
                },
                self.bundle.num_classes,
                &self.cfg.weights,
                &noise,
            )?
        } else {
            loss_no_latent(
                &self.bundle.trunk,
                model,
                &pos,
                &adapted,
                &neg.labels,
                self.bundle.num_classes,
                &self.cfg.weights,
                noise.dropout_pos.as_ref(),
                noise.dropout_neg.as_ref(),
            )?
        };
        self.apply_update(domain_idx, &out)?;

        let adapted_batch = DomainBatch {
            features: adapted,
            labels: neg.labels,
            domains: neg.domains,
        };
        self.buffers[domain_idx].push_batch(&adapted_batch)?;
        Ok(out.breakdown)
    }

    fn masks(&mut self, rows: usize) -> Option<[Tensor; 2]> {
        if self.cfg.net.dropout > 0.0 {
            Some(dropout_masks(
                rows,
                self.cfg.net.energy_width(),
                self.cfg.net.dropout,
                &mut self.master,
            ))
        } else {
            None
        }
    }

    /// Degenerate single-domain path: classification (and, with the
    /// latent, the KL) trained on positives; energy untouched.
    fn positives_only_step(&mut self, pos: &DomainBatch) -> Result<LossBreakdown> {
        let f = self.bundle.feature_dim;
        let weights = LossWeights {
            pos_energy: 0.0,
            neg_energy: 0.0,
            adapted: 0.0,
            kl: if self.cfg.use_latent {
                self.cfg.weights.kl
            } else {
                0.0
            },
            classification: self.cfg.weights.classification,
        };
        let dummy_adapted = Tensor::zeros(1, f);
        let dummy_labels = vec![0u32];
        let model = &self.bundle.domains[0];
        let out = if self.cfg.use_latent {
            let noise = LossNoise {
                z_pos: self.standard_normal(pos.features.rows, f),
                dropout_pos: None,
                dropout_neg: None,
            };
            let model = &self.bundle.domains[0];
            loss_with_latent(
                &self.bundle.trunk,
                model,
                pos,
                &LatentNegatives {
                    adapted: &dummy_adapted,
                    labels: &dummy_labels,
                    z: &Tensor::zeros(1, f),
                    centers: &Tensor::zeros(1, f),
                },
                self.bundle.num_classes,
                &weights,
                &noise,
            )?
        } else {
            loss_no_latent(
                &self.bundle.trunk,
                model,
                pos,
                &dummy_adapted,
                &dummy_labels,
                self.bundle.num_classes,
                &weights,
                None,
                None,
            )?
        };
        self.apply_positive_update(&out)?;
        let mut b = out.breakdown;
        b.pos_energy = 0.0;
        b.neg_energy = 0.0;
        b.adapted = 0.0;
        b.total = b.classification + b.kl;
        Ok(b)
    }

    fn check_finite(out: &LossOutput) -> Result<()> {
        let all = out
            .grads
            .trunk
            .iter()
            .chain(&out.grads.classifier)
            .chain(&out.grads.prior)
            .chain(&out.grads.posterior)
            .chain(&out.grads.energy);
        for t in all {
            if !t.all_finite() {
                return Err(Error::StepAborted(
                    "non-finite parameter gradient; parameters left untouched".into(),
                ));
            }
        }
        if !out.breakdown.total.is_finite() {
            return Err(Error::StepAborted(
                "non-finite loss; parameters left untouched".into(),
            ));
        }
        Ok(())
    }

    fn apply_update(&mut self, domain_idx: usize, out: &LossOutput) -> Result<()> {
        Self::check_finite(out)?;
        let cfg = &self.cfg;
        self.trunk_opt.step(
            self.bundle.trunk.arrays_mut(),
            &out.grads.trunk,
            cfg.lr_trunk,
            &cfg.adam,
        );
        let d = &mut self.bundle.domains[domain_idx];
        let o = &mut self.domain_opts[domain_idx];
        o.classifier.step(
            d.classifier.arrays_mut(),
            &out.grads.classifier,
            cfg.lr_heads,
            &cfg.adam,
        );
        if !out.grads.prior.is_empty() {
            o.prior.step(
                d.prior.net.arrays_mut(),
                &out.grads.prior,
                cfg.lr_heads,
                &cfg.adam,
            );
        }
        if !out.grads.posterior.is_empty() {
            o.posterior.step(
                d.posterior.net.arrays_mut(),
                &out.grads.posterior,
                cfg.lr_heads,
                &cfg.adam,
            );
        }
        o.energy.step(
            d.energy.net.arrays_mut(),
            &out.grads.energy,
            cfg.lr_heads,
            &cfg.adam,
        );
        d.energy.spectral_normalize(1);
        Ok(())
    }

    /// Update for the single-domain path: trunk, classifier, and latent
    /// heads only.
    fn apply_positive_update(&mut self, out: &LossOutput) -> Result<()> {
        Self::check_finite(out)?;
        let cfg = &self.cfg;
        self.trunk_opt.step(
            self.bundle.trunk.arrays_mut(),
            &out.grads.trunk,
            cfg.lr_trunk,
            &cfg.adam,
        );
        let d = &mut self.bundle.domains[0];
        let o = &mut self.domain_opts[0];
        o.classifier.step(
            d.classifier.arrays_mut(),
            &out.grads.classifier,
            cfg.lr_heads,
            &cfg.adam,
        );
        if !out.grads.prior.is_empty() {
            o.prior.step(
                d.prior.net.arrays_mut(),
                &out.grads.prior,
                cfg.lr_heads,
                &cfg.adam,
            );
        }
        if !out.grads.posterior.is_empty() {
            o.posterior.step(
                d.posterior.net.arrays_mut(),
                &out.grads.posterior,
                cfg.lr_heads,
                &cfg.adam,
            );
        }
        Ok(())
    }

    /// Runs the configured iterations (continuing from `iteration` when
    /// resumed), visiting every domain once per iteration in index
    /// order. Returns one record per (iteration, domain) step. With a
    /// checkpoint directory, saves `checkpoint_iter{n}.bin` at the
    /// configured cadence and `checkpoint_final.bin` (with centroids) at
    /// the end.
    pub fn train(
        &mut self,
        datasets: &[DomainDataset],
        checkpoint_dir: Option<&Path>,
    ) -> Result<Vec<StepRecord>> {
        let mut history = Vec::new();
        self.train_observed(datasets, checkpoint_dir, &mut |r| {
            history.push(r.clone());
            Ok(())
        })?;
        Ok(history)
    }

    /// Like [`train`](Self::train) but hands each step record to
    /// `observe` as it happens, so callers can stream a loss log that
    /// survives a mid-run abort.
    pub fn train_observed(
        &mut self,
        datasets: &[DomainDataset],
        checkpoint_dir: Option<&Path>,
        observe: &mut dyn FnMut(&StepRecord) -> Result<()>,
    ) -> Result<()> {
        self.check_datasets(datasets)?;
        while self.iteration < self.cfg.iterations {
            for d in 0..self.bundle.num_domains() {
                let loss = self.train_step(datasets, d)?;
                observe(&StepRecord {
                    iteration: self.iteration,
                    domain_id: self.bundle.domain_ids[d],
                    loss,
                })?;
            }
            self.iteration += 1;
            self.bundle.trained_iterations = self.iteration;
            if let Some(dir) = checkpoint_dir {
                if self.cfg.checkpoint_every > 0
                    && self.iteration % self.cfg.checkpoint_every == 0
                    && self.iteration < self.cfg.iterations
                {
                    self.save_checkpoint(
                        &dir.join(format!("checkpoint_iter{}.bin", self.iteration)),
                        None,
                    )?;
                }
            }
        }
        if self.iteration == self.cfg.iterations {
            self.compute_centroids(datasets)?;
            if let Some(dir) = checkpoint_dir {
                self.save_checkpoint(&dir.join("checkpoint_final.bin"), Some(datasets))?;
            }
        }
        Ok(())
    }

    fn check_datasets(&self, datasets: &[DomainDataset]) -> Result<()> {
        if datasets.len() != self.bundle.num_domains() {
            return Err(Error::usage(format!(
                "{} datasets for {} domains",
                datasets.len(),
                self.bundle.num_domains()
            )));
        }
        for (ds, &id) in datasets.iter().zip(&self.bundle.domain_ids) {
            if ds.domain != id {
                return Err(Error::usage(format!(
                    "dataset order mismatch: got domain {} where {} was expected",
                    ds.domain, id
                )));
            }
            if ds.dim() != self.bundle.input_dim {
                return Err(Error::shape(
                    "train",
                    format!(
                        "dataset domain {} has dim {}, model expects {}",
                        ds.domain,
                        ds.dim(),
                        self.bundle.input_dim
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Mean trunk feature per source domain, stored on the bundle for
    /// similarity-based aggregation at inference.
    fn compute_centroids(&mut self, datasets: &[DomainDataset]) -> Result<()> {
        let f = self.bundle.feature_dim;
        let mut c = Tensor::zeros(datasets.len(), f);
        for (k, ds) in datasets.iter().enumerate() {
            let feats = self.bundle.trunk.forward_values(&ds.features)?;
            for r in 0..feats.rows {
                for j in 0..f {
                    c.data[k * f + j] += feats.data[r * f + j];
                }
            }
            for j in 0..f {
                c.data[k * f + j] /= feats.rows as f64;
            }
        }
        self.bundle.centroids = Some(c);
        Ok(())
    }

    // ── checkpointing ──────────────────────────────────────────────────

    pub fn save_checkpoint(
        &self,
        path: &Path,
        datasets_for_centroids: Option<&[DomainDataset]>,
    ) -> Result<()> {
        let mut bundle = self.bundle.clone();
        if bundle.centroids.is_none() {
            if let Some(ds) = datasets_for_centroids {
                let mut tmp = Trainer {
                    cfg: self.cfg.clone(),
                    bundle,
                    buffers: Vec::new(),
                    trunk_opt: AdamOpt { t: 0, slots: vec![] },
                    domain_opts: Vec::new(),
                    master: self.master.clone(),
                    iteration: self.iteration,
                    warned_single_domain: false,
                };
                tmp.compute_centroids(ds)?;
                bundle = tmp.bundle;
            }
        }

        let mut c = Container::new();
        for (name, t) in bundle.named_arrays() {
            c.insert(name, t.clone())?;
        }
        for (k, d) in bundle.domains.iter().enumerate() {
            for (l, u) in d.energy.power_u.iter().enumerate() {
                c.insert(
                    format!("domain{k}.energy.power_u{l}"),
                    Tensor::new(1, u.len(), u.clone())?,
                )?;
            }
        }
        if let Some(cent) = &bundle.centroids {
            c.insert("centroids", cent.clone())?;
        }

        let mut adam_t = std::collections::BTreeMap::new();
        let save_opt = |c: &mut Container,
                            adam_t: &mut std::collections::BTreeMap<String, u64>,
                            prefix: &str,
                            opt: &AdamOpt|
         -> Result<()> {
            adam_t.insert(prefix.to_string(), opt.t);
            for (i, s) in opt.slots.iter().enumerate() {
                c.insert(format!("adam.{prefix}.{i}.m"), s.m.clone())?;
                c.insert(format!("adam.{prefix}.{i}.v"), s.v.clone())?;
            }
            Ok(())
        };
        save_opt(&mut c, &mut adam_t, "trunk", &self.trunk_opt)?;
        for (k, o) in self.domain_opts.iter().enumerate() {
            save_opt(&mut c, &mut adam_t, &format!("domain{k}.classifier"), &o.classifier)?;
            save_opt(&mut c, &mut adam_t, &format!("domain{k}.prior"), &o.prior)?;
            save_opt(&mut c, &mut adam_t, &format!("domain{k}.posterior"), &o.posterior)?;
            save_opt(&mut c, &mut adam_t, &format!("domain{k}.energy"), &o.energy)?;
        }

        for (k, buf) in self.buffers.iter().enumerate() {
            let (feats, labels, domains) = buf.to_parts();
            c.insert(format!("buffer{k}.features"), feats)?;
            c.insert(
                format!("buffer{k}.labels"),
                Tensor::new(1, labels.len(), labels.iter().map(|&v| v as f64).collect())
                    .unwrap_or_else(|_| Tensor::zeros(1, 0)),
            )?;
            c.insert(
                format!("buffer{k}.domains"),
                Tensor::new(1, domains.len(), domains.iter().map(|&v| v as f64).collect())
                    .unwrap_or_else(|_| Tensor::zeros(1, 0)),
            )?;
        }

        let word_pos = self.master.get_word_pos();
        c.set_meta("checkpoint_version", &CHECKPOINT_VERSION)?;
        c.set_meta("iteration", &(self.iteration as u64))?;
        c.set_meta("seed", &self.cfg.seed)?;
        c.set_meta("rng_word_pos_lo", &((word_pos & u128::from(u64::MAX)) as u64))?;
        c.set_meta("rng_word_pos_hi", &((word_pos >> 64) as u64))?;
        c.set_meta("num_classes", &(bundle.num_classes as u64))?;
        c.set_meta("input_dim", &(bundle.input_dim as u64))?;
        c.set_meta("domain_ids", &bundle.domain_ids)?;
        c.set_meta("adam_t", &adam_t)?;
        c.set_meta("config", &self.cfg)?;
        c.save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let version: u32 = c.meta_as("checkpoint_version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Container(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let cfg: TrainConfig = c.meta_as("config")?;
        let num_classes: u64 = c.meta_as("num_classes")?;
        let input_dim: u64 = c.meta_as("input_dim")?;
        let domain_ids: Vec<i32> = c.meta_as("domain_ids")?;

        let mut trainer = Trainer::new(
            cfg,
            input_dim as usize,
            num_classes as usize,
            &domain_ids,
        )?;

        // Overwrite the fresh initialization with the stored values.
        {
            let b = &mut trainer.bundle;
            let mut arrays: Vec<(String, &mut Tensor)> = b
                .trunk
                .arrays_mut()
                .into_iter()
                .enumerate()
                .map(|(i, t)| (format!("trunk.l{}.{}", i / 2, if i % 2 == 0 { "w" } else { "b" }), t))
                .collect();
            for (k, d) in b.domains.iter_mut().enumerate() {
                for (prefix, net) in [
                    (format!("domain{k}.classifier"), &mut d.classifier),
                    (format!("domain{k}.prior"), &mut d.prior.net),
                    (format!("domain{k}.posterior"), &mut d.posterior.net),
                    (format!("domain{k}.energy"), &mut d.energy.net),
                ] {
                    for (i, t) in net.arrays_mut().into_iter().enumerate() {
                        arrays.push((
                            format!("{prefix}.l{}.{}", i / 2, if i % 2 == 0 { "w" } else { "b" }),
                            t,
                        ));
                    }
                }
            }
            for (name, t) in arrays {
                let stored = c.get(&name)?;
                if (stored.rows, stored.cols) != (t.rows, t.cols) {
                    return Err(Error::Container(format!(
                        "array {name:?} has shape {}, expected {}",
                        stored.shape_str(),
                        t.shape_str()
                    )));
                }
                *t = stored.clone();
            }
            for (k, d) in b.domains.iter_mut().enumerate() {
                for (l, u) in d.energy.power_u.iter_mut().enumerate() {
                    let stored = c.get(&format!("domain{k}.energy.power_u{l}"))?;
                    *u = stored.data.clone();
                }
            }
            b.centroids = if c.contains("centroids") {
                Some(c.get("centroids")?.clone())
            } else {
                None
            };
        }

        let adam_t: std::collections::BTreeMap<String, u64> = c.meta_as("adam_t")?;
        let load_opt = |opt: &mut AdamOpt, prefix: &str| -> Result<()> {
            opt.t = *adam_t
                .get(prefix)
                .ok_or_else(|| Error::Container(format!("missing adam state for {prefix}")))?;
            for (i, s) in opt.slots.iter_mut().enumerate() {
                s.m = c.get(&format!("adam.{prefix}.{i}.m"))?.clone();
                s.v = c.get(&format!("adam.{prefix}.{i}.v"))?.clone();
            }
            Ok(())
        };
        load_opt(&mut trainer.trunk_opt, "trunk")?;
        for k in 0..trainer.domain_opts.len() {
            let mut o = std::mem::replace(
                &mut trainer.domain_opts[k],
                DomainOpts {
                    classifier: AdamOpt { t: 0, slots: vec![] },
                    prior: AdamOpt { t: 0, slots: vec![] },
                    posterior: AdamOpt { t: 0, slots: vec![] },
                    energy: AdamOpt { t: 0, slots: vec![] },
                },
            );
            load_opt(&mut o.classifier, &format!("domain{k}.classifier"))?;
            load_opt(&mut o.prior, &format!("domain{k}.prior"))?;
            load_opt(&mut o.posterior, &format!("domain{k}.posterior"))?;
            load_opt(&mut o.energy, &format!("domain{k}.energy"))?;
            trainer.domain_opts[k] = o;
        }

        for k in 0..trainer.buffers.len() {
            let feats = c.get(&format!("buffer{k}.features"))?.clone();
            let labels: Vec<u32> = c
                .get(&format!("buffer{k}.labels"))?
                .data
                .iter()
                .map(|&v| v as u32)
                .collect();
            let domains: Vec<i32> = c
                .get(&format!("buffer{k}.domains"))?
                .data
                .iter()
                .map(|&v| v as i32)
                .collect();
            let n = labels.len();
            let feats = if n == 0 {
                Tensor::zeros(0, trainer.cfg.net.feature_dim)
            } else {
                feats
            };
            trainer.buffers[k] = ReplayBuffer::from_parts(
                trainer.cfg.buffer_capacity,
                trainer.cfg.buffer_probability,
                feats,
                labels,
                domains,
            )?;
        }

        let lo: u64 = c.meta_as("rng_word_pos_lo")?;
        let hi: u64 = c.meta_as("rng_word_pos_hi")?;
        trainer
            .master
            .set_word_pos((u128::from(hi) << 64) | u128::from(lo));
        let iteration: u64 = c.meta_as("iteration")?;
        trainer.iteration = iteration as usize;
        trainer.bundle.trained_iterations = trainer.iteration;
        Ok(trainer)
    }
}

/// Loads just the model bundle from a checkpoint, for inference.
pub fn load_bundle(path: &Path) -> Result<(ModelBundle, TrainConfig)> {
    let t = Trainer::load_checkpoint(path)?;
    Ok((t.bundle, t.cfg))
}
