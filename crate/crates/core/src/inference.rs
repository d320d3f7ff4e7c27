//! Test-time prediction: each unseen sample is pulled toward every
//! source domain's feature distribution by that domain's energy
//! function, classified there, and the per-domain predictions are
//! combined. Model parameters are never touched; only the sample moves.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::nets::{classify, reparam_sample};
use crate::par;
use crate::seeds;
use crate::sgld::{adapt, AdaptationTrace, SgldConfig};
use crate::tensor::Tensor;
use crate::trainer::ModelBundle;

/// Where the conditioning latent comes from at test time. `Prior` draws
/// from the domain's latent head applied to the unadapted sample.
/// `Oracle` draws from the inference head applied to the sample's
/// true-class feature center, so it needs labels and is for analysis
/// only. `None` fixes the latent slot to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    None,
    Prior,
    Oracle,
}

impl std::fmt::Display for LatentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LatentMode::None => "none",
            LatentMode::Prior => "prior",
            LatentMode::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Ensemble,
    ClosestCosine,
    WeightedCosine,
    MostConfident,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub sgld: SgldConfig,
    /// Monte Carlo chains per source domain.
    pub num_draws: usize,
    pub latent: LatentMode,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub record_traces: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            sgld: SgldConfig::default(),
            num_draws: 5,
            latent: LatentMode::Prior,
            aggregation: Aggregation::Ensemble,
            seed: 0,
            record_traces: false,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.num_draws == 0 {
            return Err(Error::Config("num_draws must be at least 1".into()));
        }
        self.sgld.validate()
    }
}

/// Everything produced for one test sample. Probability vectors are
/// class-length and sum to one; per-source vectors average the sample's
/// chains for that domain.
#[derive(Debug, Clone)]
pub struct PredictionRecord {
    /// Trunk features of the unadapted sample.
    pub features: Vec<f64>,
    pub pre_per_source: Vec<Vec<f64>>,
    pub post_per_source: Vec<Vec<f64>>,
    /// Uniform mean over sources and chains.
    pub ensemble: Vec<f64>,
    /// Argmax of the requested aggregation.
    pub label: u32,
    pub mean_pre_energy: f64,
    pub mean_post_energy: f64,
    /// One trace per (source, chain) pair, outer order source-major,
    /// when tracing was requested.
    pub traces: Option<Vec<AdaptationTrace>>,
}

fn mean_rows(t: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; t.cols];
    for r in 0..t.rows {
        for c in 0..t.cols {
            out[c] += t.data[r * t.cols + c];
        }
    }
    for v in &mut out {
        *v /= t.rows as f64;
    }
    out
}

fn mean_all(t: &Tensor) -> f64 {
    t.data.iter().sum::<f64>() / t.numel() as f64
}

/// Adapts one raw sample to every source domain and classifies it
/// there. The latent for each chain is drawn once, from the unadapted
/// features, and held fixed while the chain runs. `oracle_center` is
/// the sample's true-class feature center, required only in oracle
/// mode. `sample_seed` fixes all randomness for this sample, so samples
/// can be evaluated in any order or in parallel.
pub fn predict_sample(
    bundle: &ModelBundle,
    input: &[f64],
    opts: &EvalOptions,
    sample_seed: u64,
    oracle_center: Option<&[f64]>,
) -> Result<PredictionRecord> {
    if bundle.trained_iterations == 0 {
        return Err(Error::usage("bundle has not been trained"));
    }
    if input.len() != bundle.input_dim {
        return Err(Error::shape(
            "predict",
            format!(
                "input has {} values, model expects {}",
                input.len(),
                bundle.input_dim
            ),
        ));
    }
    let f = bundle.feature_dim;
    let n = opts.num_draws;
    let x_t = bundle.trunk.forward_values(&Tensor::row(input))?;

    if opts.latent == LatentMode::Oracle && oracle_center.is_none() {
        return Err(Error::usage(
            "oracle latent mode needs the sample's class feature center",
        ));
    }

    let x_rows = Tensor::repeat_row(x_t.row_slice(0), n);
    let mut pre_per_source = Vec::with_capacity(bundle.num_domains());
    let mut post_per_source = Vec::with_capacity(bundle.num_domains());
    let mut pre_energy_sum = 0.0;
    let mut post_energy_sum = 0.0;
    let mut ensemble = vec![0.0; bundle.num_classes];
    let mut traces = opts.record_traces.then(Vec::new);

    for (d_idx, model) in bundle.domains.iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeds::derive2(sample_seed, d_idx as u64, 0));
        let z = match opts.latent {
            LatentMode::None => Tensor::zeros(n, f),
            LatentMode::Prior => {
                let p = model.prior.forward_values(&x_t)?;
                let eps = normal(n, f, &mut rng);
                reparam_sample(&p.select_rows(&vec![0; n]), &eps)?
            }
            LatentMode::Oracle => {
                let center = Tensor::row(oracle_center.unwrap());
                let q = model.posterior.forward_values(&center)?;
                let eps = normal(n, f, &mut rng);
                reparam_sample(&q.select_rows(&vec![0; n]), &eps)?
            }
        };

        let pre_probs = classify(&model.classifier, &x_rows, &z)?;
        pre_energy_sum += mean_all(&model.energy.energy_values(&x_rows, &z)?);

        let probe_store;
        let probe: Option<&crate::sgld::ProbeFn> = if opts.record_traces {
            probe_store = |x: &Tensor| classify(&model.classifier, x, &z);
            Some(&probe_store)
        } else {
            None
        };
        let (adapted, trace) = adapt(&model.energy, &x_rows, &z, &opts.sgld, &mut rng, probe)?;
        if let (Some(ts), Some(t)) = (traces.as_mut(), trace) {
            ts.push(t);
        }

        let post_probs = classify(&model.classifier, &adapted, &z)?;
        post_energy_sum += mean_all(&model.energy.energy_values(&adapted, &z)?);

        let post_mean = mean_rows(&post_probs);
        for (e, p) in ensemble.iter_mut().zip(&post_mean) {
            *e += p;
        }
        pre_per_source.push(mean_rows(&pre_probs));
        post_per_source.push(post_mean);
    }

    let s = bundle.num_domains() as f64;
    for v in &mut ensemble {
        *v /= s;
    }

    let features: Vec<f64> = x_t.data.clone();
    let chosen = aggregate(
        &post_per_source,
        opts.aggregation,
        &features,
        bundle.centroids.as_ref(),
    )?;
    let label = argmax(&chosen) as u32;

    Ok(PredictionRecord {
        features,
        pre_per_source,
        post_per_source,
        ensemble,
        label,
        mean_pre_energy: pre_energy_sum / s,
        mean_post_energy: post_energy_sum / s,
        traces,
    })
}

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Combines per-source probability vectors into one. Cosine modes
/// compare the sample's features against the stored per-domain feature
/// centroids.
pub fn aggregate(
    per_source: &[Vec<f64>],
    mode: Aggregation,
    features: &[f64],
    centroids: Option<&Tensor>,
) -> Result<Vec<f64>> {
    if per_source.is_empty() {
        return Err(Error::usage("no per-source predictions to aggregate"));
    }
    let c = per_source[0].len();
    match mode {
        Aggregation::Ensemble => {
            let mut out = vec![0.0; c];
            for p in per_source {
                for (o, v) in out.iter_mut().zip(p) {
                    *o += v;
                }
            }
            for v in &mut out {
                *v /= per_source.len() as f64;
            }
            Ok(out)
        }
        Aggregation::MostConfident => {
            let best = per_source
                .iter()
                .max_by(|a, b| {
                    let ma = a.iter().cloned().fold(f64::MIN, f64::max);
                    let mb = b.iter().cloned().fold(f64::MIN, f64::max);
                    ma.partial_cmp(&mb).unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap();
            Ok(best.clone())
        }
        Aggregation::ClosestCosine | Aggregation::WeightedCosine => {
            let cent = centroids.ok_or_else(|| {
                Error::usage("cosine aggregation needs domain centroids in the bundle")
            })?;
            if cent.rows != per_source.len() {
                return Err(Error::usage(format!(
                    "{} centroids for {} source predictions",
                    cent.rows,
                    per_source.len()
                )));
            }
            let sims: Vec<f64> = (0..cent.rows)
                .map(|r| cosine(features, cent.row_slice(r)))
                .collect();
            if mode == Aggregation::ClosestCosine {
                Ok(per_source[argmax(&sims)].clone())
            } else {
                let mx = sims.iter().cloned().fold(f64::MIN, f64::max);
                let ws: Vec<f64> = sims.iter().map(|s| (s - mx).exp()).collect();
                let wsum: f64 = ws.iter().sum();
                let mut out = vec![0.0; c];
                for (w, p) in ws.iter().zip(per_source) {
                    for (o, v) in out.iter_mut().zip(p) {
                        *o += w / wsum * v;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Per-class mean of trunk features over a labeled set, used as the
/// oracle-mode conditioning input.
pub fn class_feature_centers(
    bundle: &ModelBundle,
    ds: &DomainDataset,
) -> Result<Vec<Vec<f64>>> {
    let feats = bundle.trunk.forward_values(&ds.features)?;
    let f = feats.cols;
    let mut sums = vec![vec![0.0; f]; bundle.num_classes];
    let mut counts = vec![0usize; bundle.num_classes];
    for (r, &lab) in ds.labels.iter().enumerate() {
        let lab = lab as usize;
        if lab >= bundle.num_classes {
            return Err(Error::usage(format!(
                "label {lab} outside the model's {} classes",
                bundle.num_classes
            )));
        }
        counts[lab] += 1;
        for j in 0..f {
            sums[lab][j] += feats.data[r * f + j];
        }
    }
    for (c, sum) in sums.iter_mut().enumerate() {
        if counts[c] > 0 {
            for v in sum.iter_mut() {
                *v /= counts[c] as f64;
            }
        }
    }
    Ok(sums)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub num_samples: usize,
    pub pre_accuracy_per_source: Vec<f64>,
    pub post_accuracy_per_source: Vec<f64>,
    /// Accuracy of the uniform pre-adaptation ensemble.
    pub pre_ensemble_accuracy: f64,
    /// Accuracy of the requested aggregation after adaptation.
    pub post_ensemble_accuracy: f64,
    pub mean_pre_energy: f64,
    pub mean_post_energy: f64,
    #[serde(skip)]
    pub records: Vec<PredictionRecord>,
}

/// Evaluates a whole labeled set. Samples run independently (in
/// parallel when enabled) under per-sample seeds derived from
/// `opts.seed`, so the summary does not depend on evaluation order or
/// thread count.
pub fn evaluate_dataset(
    bundle: &ModelBundle,
    ds: &DomainDataset,
    opts: &EvalOptions,
) -> Result<EvalSummary> {
    opts.validate()?;
    ds.validate(bundle.num_classes as u32)?;
    if ds.len() == 0 {
        return Err(Error::usage("cannot evaluate an empty dataset"));
    }
    let centers = if opts.latent == LatentMode::Oracle {
        Some(class_feature_centers(bundle, ds)?)
    } else {
        None
    };

    let idx: Vec<usize> = (0..ds.len()).collect();
    let results = par::map(&idx, |&i| {
        let row = ds.features.row_slice(i);
        let center = centers
            .as_ref()
            .map(|cs| cs[ds.labels[i] as usize].as_slice());
        predict_sample(bundle, row, opts, seeds::derive(opts.seed, i as u64), center)
    });
    let records: Vec<PredictionRecord> = results.into_iter().collect::<Result<_>>()?;

    let s = bundle.num_domains();
    let n = records.len();
    let mut pre_hits = vec![0usize; s];
    let mut post_hits = vec![0usize; s];
    let mut pre_ens_hits = 0usize;
    let mut post_ens_hits = 0usize;
    let mut pre_e = 0.0;
    let mut post_e = 0.0;
    for (rec, &lab) in records.iter().zip(&ds.labels) {
        for d in 0..s {
            if argmax(&rec.pre_per_source[d]) == lab as usize {
                pre_hits[d] += 1;
            }
            if argmax(&rec.post_per_source[d]) == lab as usize {
                post_hits[d] += 1;
            }
        }
        let pre_ens = aggregate(
            &rec.pre_per_source,
            Aggregation::Ensemble,
            &rec.features,
            None,
        )?;
        if argmax(&pre_ens) == lab as usize {
            pre_ens_hits += 1;
        }
        if rec.label == lab {
            post_ens_hits += 1;
        }
        pre_e += rec.mean_pre_energy;
        post_e += rec.mean_post_energy;
    }
    let frac = |h: usize| h as f64 / n as f64;
    Ok(EvalSummary {
        num_samples: n,
        pre_accuracy_per_source: pre_hits.into_iter().map(frac).collect(),
        post_accuracy_per_source: post_hits.into_iter().map(frac).collect(),
        pre_ensemble_accuracy: frac(pre_ens_hits),
        post_ensemble_accuracy: frac(post_ens_hits),
        mean_pre_energy: pre_e / n as f64,
        mean_post_energy: post_e / n as f64,
        records,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub mode: LatentMode,
    pub steps: usize,
    pub mean_energy: f64,
    pub accuracy: f64,
}

/// Evaluates the set once per requested chain length. Chains for a
/// given sample share their noise prefix across rows, so the row at a
/// smaller count is an exact checkpoint of the longer chain.
pub fn step_sweep(
    bundle: &ModelBundle,
    ds: &DomainDataset,
    step_counts: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(step_counts.len());
    for &k in step_counts {
        let mut o = opts.clone();
        o.sgld.num_steps = k;
        let summary = evaluate_dataset(bundle, ds, &o)?;
        rows.push(SweepRow {
            mode: opts.latent,
            steps: k,
            mean_energy: summary.mean_post_energy,
            accuracy: summary.post_ensemble_accuracy,
        });
    }
    Ok(rows)
}
