//! The two training losses and their gradient routing.
//!
//! Both losses are contrastive: real ("positive") samples from the
//! domain being trained are pushed toward low energy and correct
//! classification, while chain-adapted ("negative") samples from other
//! domains are pushed toward high energy. A final bracket evaluates the
//! adapted samples under frozen parameters, so its gradient reaches only
//! the adapted features themselves. The full loss adds a latent variable
//! inferred from class centers, with a KL term tying the center-based
//! posterior to the input-based prior.
//!
//! Routing summary (who gets a nonzero gradient from which term):
//!
//! | term                    | trunk | classifier | prior | posterior | energy | adapted x |
//! |-------------------------|-------|------------|-------|-----------|--------|-----------|
//! | classification          | yes   | yes        | no    | yes (z)   | no     | no        |
//! | kl                      | yes   | no         | yes   | yes       | no     | no        |
//! | pos_energy              | yes   | no         | no    | yes (z)   | yes    | no        |
//! | neg_energy (subtracted) | no    | no         | no    | no        | yes    | no        |
//! | adapted bracket         | no    | no         | no    | no        | no     | yes       |
//!
//! Every expectation is realized as a batch mean, with one latent draw
//! per sample. Latents for negatives are drawn before the chains run and
//! enter the loss as constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::DomainBatch;
use crate::error::{Error, Result};
use crate::nets::{
    binding_grads, class_logits, freeze_binding, kl_diag_gauss_nodes, reparam_nodes, DomainModel,
    Mlp,
};
use crate::tensor::Tensor;

/// Multipliers on the loss components. The negative-energy component is
/// subtracted from the total, so its weight scales a subtraction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub classification: f64,
    pub kl: f64,
    pub pos_energy: f64,
    pub neg_energy: f64,
    pub adapted: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            classification: 1.0,
            kl: 1.0,
            pos_energy: 1.0,
            neg_energy: 1.0,
            adapted: 1.0,
        }
    }
}

/// Weighted values of the loss components for one step.
/// `total = classification + kl + pos_energy - neg_energy + adapted`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub classification: f64,
    pub kl: f64,
    pub pos_energy: f64,
    pub neg_energy: f64,
    pub adapted: f64,
    pub total: f64,
}

/// Gradients per parameter group, each in [`Mlp::arrays_mut`] order.
/// Groups that do not participate in a loss variant are empty.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    pub trunk: Vec<Tensor>,
    pub classifier: Vec<Tensor>,
    pub prior: Vec<Tensor>,
    pub posterior: Vec<Tensor>,
    pub energy: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub grads: ParamGrads,
    /// d total / d adapted-features, one row per negative. Fed by the
    /// frozen bracket alone.
    pub adapted_grad: Tensor,
}

/// Chain outputs plus the fixed conditioning used by the full loss.
/// `z` and `centers` are the values drawn before the chains ran; the
/// loss treats them as constants.
pub struct LatentNegatives<'a> {
    pub adapted: &'a Tensor,
    pub labels: &'a [u32],
    pub z: &'a Tensor,
    pub centers: &'a Tensor,
}

/// Injected randomness, supplied by the caller so a loss evaluation is a
/// deterministic function of its arguments. `z_pos` is standard normal,
/// one row per positive; the dropout masks (when training uses dropout)
/// apply to the live energy forwards on positives and negatives.
#[derive(Debug, Clone)]
pub struct LossNoise {
    pub z_pos: Tensor,
    pub dropout_pos: Option<[Tensor; 2]>,
    pub dropout_neg: Option<[Tensor; 2]>,
}

impl LossNoise {
    /// Zero latent noise and no dropout: z collapses to the posterior
    /// mean, useful in tests and finite-difference checks.
    pub fn zeros(n_pos: usize, latent_dim: usize) -> Self {
        LossNoise {
            z_pos: Tensor::zeros(n_pos, latent_dim),
            dropout_pos: None,
            dropout_neg: None,
        }
    }
}

/// Mean feature of the rows whose label equals `class`, as a 1 x d row.
pub fn class_center(features: &Tensor, labels: &[u32], class: u32) -> Result<Tensor> {
    if features.rows != labels.len() {
        return Err(Error::shape(
            "class_center",
            format!("{} rows vs {} labels", features.rows, labels.len()),
        ));
    }
    let mut acc = vec![0.0; features.cols];
    let mut count = 0usize;
    for (r, &l) in labels.iter().enumerate() {
        if l == class {
            for (a, v) in acc.iter_mut().zip(features.row_slice(r)) {
                *a += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::usage(format!(
            "class {class} has no samples in this batch"
        )));
    }
    for a in &mut acc {
        *a /= count as f64;
    }
    Tensor::new(1, features.cols, acc)
}

/// Row-averaging matrix P such that (P x)_i is the mean feature of the
/// rows sharing row i's label. Multiplying by P inside a graph lets
/// gradients flow from class centers back to the features.
pub fn center_matrix(labels: &[u32]) -> Tensor {
    let n = labels.len();
    let mut counts = std::collections::HashMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let mut p = Tensor::zeros(n, n);
    for i in 0..n {
        let w = 1.0 / counts[&labels[i]] as f64;
        for j in 0..n {
            if labels[j] == labels[i] {
                p.data[i * n + j] = w;
            }
        }
    }
    p
}

/// Per-target class centers, preferring `primary` and falling back to
/// `fallback` when the class is absent there. Errors only when a class
/// appears in neither batch.
pub fn centers_with_fallback(
    primary: (&Tensor, &[u32]),
    fallback: (&Tensor, &[u32]),
    targets: &[u32],
) -> Result<Tensor> {
    let dim = primary.0.cols;
    let mut out = Tensor::zeros(targets.len(), dim);
    for (i, &class) in targets.iter().enumerate() {
        let row = match class_center(primary.0, primary.1, class) {
            Ok(c) => c,
            Err(_) => class_center(fallback.0, fallback.1, class)?,
        };
        out.data[i * dim..(i + 1) * dim].copy_from_slice(&row.data);
    }
    Ok(out)
}

/// One-hot label matrix, n x num_classes.
pub fn one_hot(labels: &[u32], num_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(labels.len(), num_classes);
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= num_classes {
            return Err(Error::usage(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        t.data[i * num_classes + l as usize] = 1.0;
    }
    Ok(t)
}

fn check_negatives(adapted: &Tensor, labels: &[u32]) -> Result<()> {
    if adapted.rows != labels.len() {
        return Err(Error::shape(
            "loss negatives",
            format!("{} adapted rows vs {} labels", adapted.rows, labels.len()),
        ));
    }
    if !adapted.all_finite() {
        return Err(Error::NonFinite {
            context: "adapted negative features".into(),
        });
    }
    Ok(())
}

/// Contrastive loss without the latent variable. The latent slot of the
/// classifier and energy inputs is filled with zeros. Components `kl`
/// stays 0 and the prior/posterior gradient groups come back empty.
///
/// `pos` holds raw inputs (the trunk runs inside the loss graph);
/// `neg_adapted` holds post-chain features with `neg_labels` carried
/// from their origin.
pub fn loss_no_latent(
    trunk: &Mlp,
    model: &DomainModel,
    pos: &DomainBatch,
    neg_adapted: &Tensor,
    neg_labels: &[u32],
    num_classes: usize,
    weights: &LossWeights,
    dropout_pos: Option<&[Tensor; 2]>,
    dropout_neg: Option<&[Tensor; 2]>,
) -> Result<LossOutput> {
    check_negatives(neg_adapted, neg_labels)?;
    let mut g = Graph::new();

    let pos_in = g.constant(pos.features.clone());
    let tb = trunk.bind(&mut g, true);
    let x_pos = trunk.forward(&mut g, &tb, pos_in)?;
    let (n_pos, feat_dim) = g.shape(x_pos);
    let z_pos = g.constant(Tensor::zeros(n_pos, feat_dim));

    let cb = model.classifier.bind(&mut g, true);
    let eb = model.energy.bind(&mut g, true);

    let logits = class_logits(&mut g, &model.classifier, &cb, x_pos, z_pos)?;
    let targets = g.constant(one_hot(&pos.labels, num_classes)?);
    let nll = g.softmax_xent(logits, targets)?;
    let cls = g.mean(nll);

    let e_pos_rows = model.energy.forward(&mut g, &eb, x_pos, z_pos, dropout_pos)?;
    let e_pos = g.mean(e_pos_rows);

    let x_ad = g.leaf(neg_adapted.clone(), true);
    let x_ad_stop = g.stop_grad(x_ad);
    let z_neg = g.constant(Tensor::zeros(neg_adapted.rows, feat_dim));
    let e_neg_rows = model
        .energy
        .forward(&mut g, &eb, x_ad_stop, z_neg, dropout_neg)?;
    let e_neg = g.mean(e_neg_rows);

    let eb_frozen = freeze_binding(&mut g, &eb);
    let cb_frozen = freeze_binding(&mut g, &cb);
    let e_ad_rows = model.energy.forward(&mut g, &eb_frozen, x_ad, z_neg, None)?;
    let logits_ad = class_logits(&mut g, &model.classifier, &cb_frozen, x_ad, z_neg)?;
    let targets_neg = g.constant(one_hot(neg_labels, num_classes)?);
    let nll_ad = g.softmax_xent(logits_ad, targets_neg)?;
    let bracket_rows = g.add(e_ad_rows, nll_ad)?;
    let adapted = g.mean(bracket_rows);

    let kl = g.scalar(0.0);
    finish(
        &mut g,
        Terms {
            cls,
            kl,
            e_pos,
            e_neg,
            adapted,
            x_ad,
        },
        weights,
        trunk,
        &tb,
        model,
        Bindings {
            classifier: cb,
            prior: None,
            posterior: None,
            energy: eb,
        },
    )
}

/// Full loss with the latent variable. Positive latents are drawn by
/// reparameterization from the posterior over in-batch class centers
/// (gradients reach the trunk and posterior through both the draw and
/// the centers); negative latents and centers were fixed before the
/// chains ran and enter as constants.
pub fn loss_with_latent(
    trunk: &Mlp,
    model: &DomainModel,
    pos: &DomainBatch,
    negatives: &LatentNegatives,
    num_classes: usize,
    weights: &LossWeights,
    noise: &LossNoise,
) -> Result<LossOutput> {
    check_negatives(negatives.adapted, negatives.labels)?;
    if negatives.z.rows != negatives.adapted.rows
        || negatives.centers.rows != negatives.adapted.rows
    {
        return Err(Error::shape(
            "loss_with_latent",
            format!(
                "negatives: {} adapted rows vs {} z rows vs {} center rows",
                negatives.adapted.rows, negatives.z.rows, negatives.centers.rows
            ),
        ));
    }
    let mut g = Graph::new();

    let pos_in = g.constant(pos.features.clone());
    let tb = trunk.bind(&mut g, true);
    let x_pos = trunk.forward(&mut g, &tb, pos_in)?;

    let p_mat = g.constant(center_matrix(&pos.labels));
    let d_pos = g.matmul(p_mat, x_pos)?;

    let cb = model.classifier.bind(&mut g, true);
    let prb = model.prior.bind(&mut g, true);
    let pob = model.posterior.bind(&mut g, true);
    let eb = model.energy.bind(&mut g, true);

    let q_pos = model.posterior.forward(&mut g, &pob, d_pos)?;
    let p_pos = model.prior.forward(&mut g, &prb, x_pos)?;
    let eps = g.constant(noise.z_pos.clone());
    let z_pos = reparam_nodes(&mut g, q_pos, eps)?;

    let logits = class_logits(&mut g, &model.classifier, &cb, x_pos, z_pos)?;
    let targets = g.constant(one_hot(&pos.labels, num_classes)?);
    let nll = g.softmax_xent(logits, targets)?;
    let cls = g.mean(nll);

    let kl_rows = kl_diag_gauss_nodes(&mut g, q_pos, p_pos)?;
    let kl = g.mean(kl_rows);

    let e_pos_rows = model
        .energy
        .forward(&mut g, &eb, x_pos, z_pos, noise.dropout_pos.as_ref())?;
    let e_pos = g.mean(e_pos_rows);

    let x_ad = g.leaf(negatives.adapted.clone(), true);
    let x_ad_stop = g.stop_grad(x_ad);
    let z_neg = g.constant(negatives.z.clone());
    let e_neg_rows = model
        .energy
        .forward(&mut g, &eb, x_ad_stop, z_neg, noise.dropout_neg.as_ref())?;
    let e_neg = g.mean(e_neg_rows);

    // Frozen bracket: supervision of the adapted samples under
    // stop-gradded parameters, including the KL between the (constant)
    // center posterior and the prior at the adapted features.
    let eb_frozen = freeze_binding(&mut g, &eb);
    let cb_frozen = freeze_binding(&mut g, &cb);
    let prb_frozen = freeze_binding(&mut g, &prb);
    let pob_frozen = freeze_binding(&mut g, &pob);

    let e_ad_rows = model.energy.forward(&mut g, &eb_frozen, x_ad, z_neg, None)?;
    let logits_ad = class_logits(&mut g, &model.classifier, &cb_frozen, x_ad, z_neg)?;
    let targets_neg = g.constant(one_hot(negatives.labels, num_classes)?);
    let nll_ad = g.softmax_xent(logits_ad, targets_neg)?;

    let d_neg = g.constant(negatives.centers.clone());
    let q_neg = model.posterior.forward(&mut g, &pob_frozen, d_neg)?;
    let p_ad = model.prior.forward(&mut g, &prb_frozen, x_ad)?;
    let kl_ad_rows = kl_diag_gauss_nodes(&mut g, q_neg, p_ad)?;

    let sup = g.add(e_ad_rows, nll_ad)?;
    let bracket_rows = g.sub(sup, kl_ad_rows)?;
    let adapted = g.mean(bracket_rows);

    finish(
        &mut g,
        Terms {
            cls,
            kl,
            e_pos,
            e_neg,
            adapted,
            x_ad,
        },
        weights,
        trunk,
        &tb,
        model,
        Bindings {
            classifier: cb,
            prior: Some(prb),
            posterior: Some(pob),
            energy: eb,
        },
    )
}

struct Terms {
    cls: NodeId,
    kl: NodeId,
    e_pos: NodeId,
    e_neg: NodeId,
    adapted: NodeId,
    x_ad: NodeId,
}

struct Bindings {
    classifier: crate::nets::Binding,
    prior: Option<crate::nets::Binding>,
    posterior: Option<crate::nets::Binding>,
    energy: crate::nets::Binding,
}

fn finish(
    g: &mut Graph,
    terms: Terms,
    weights: &LossWeights,
    trunk: &Mlp,
    tb: &crate::nets::Binding,
    model: &DomainModel,
    bindings: Bindings,
) -> Result<LossOutput> {
    let t_cls = g.scale(terms.cls, weights.classification);
    let t_kl = g.scale(terms.kl, weights.kl);
    let t_pos = g.scale(terms.e_pos, weights.pos_energy);
    let t_neg = g.scale(terms.e_neg, weights.neg_energy);
    let t_ad = g.scale(terms.adapted, weights.adapted);
    let s = g.add(t_cls, t_kl)?;
    let s = g.add(s, t_pos)?;
    let s = g.sub(s, t_neg)?;
    let total = g.add(s, t_ad)?;

    let scalar = |g: &Graph, id: NodeId| g.value(id)[0];
    let total_v = scalar(g, total);
    if !total_v.is_finite() {
        return Err(Error::NonFinite {
            context: "loss total".into(),
        });
    }
    g.backward(total)?;

    let breakdown = LossBreakdown {
        classification: scalar(g, t_cls),
        kl: scalar(g, t_kl),
        pos_energy: scalar(g, t_pos),
        neg_energy: scalar(g, t_neg),
        adapted: scalar(g, t_ad),
        total: total_v,
    };

    let grads = ParamGrads {
        trunk: binding_grads(g, trunk, tb),
        classifier: binding_grads(g, &model.classifier.clone(), &bindings.classifier),
        prior: bindings
            .prior
            .as_ref()
            .map(|b| binding_grads(g, &model.prior.net, b))
            .unwrap_or_default(),
        posterior: bindings
            .posterior
            .as_ref()
            .map(|b| binding_grads(g, &model.posterior.net, b))
            .unwrap_or_default(),
        energy: binding_grads(g, &model.energy.net, &bindings.energy),
    };
    let (ad_rows, ad_cols) = g.shape(terms.x_ad);
    let adapted_grad = g
        .grad(terms.x_ad)
        .unwrap_or_else(|| Tensor::zeros(ad_rows, ad_cols));

    Ok(LossOutput {
        breakdown,
        grads,
        adapted_grad,
    })
}
