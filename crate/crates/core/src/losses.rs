//! Scalar objectives: reference InfoNCE and supervised contrastive losses,
//! the feature-map cosine similarity, the multi-layer contrastive loss used
//! to train the SR network, the one-against-a-batch discriminator loss, and
//! the L1 reconstruction term.
//!
//! Every softmax term is evaluated as `logsumexp(logits) - logit_pos` with
//! max subtraction, so small temperatures do not overflow.

use ndarray::{Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::BatchTensor;

/// Added to the product of norms in [`pixel_cosine`]; zero feature vectors
/// (common after ReLU-type activations) then score 0 instead of NaN.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the contrastive term in the SR objective.
    pub alpha: f64,
    /// Softmax temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.1, tau: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Parameter(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        check_tau(self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be positive and finite, got {tau}")))
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-log(e^pos / (e^pos + Σ e^neg))` and its gradient with respect to
/// `(pos, neg_0, …)`.
fn softmax_term(pos: f64, negs: &[f64]) -> (f64, f64, Vec<f64>) {
    let lse = log_sum_exp(std::iter::once(pos).chain(negs.iter().copied()));
    let d_pos = (pos - lse).exp() - 1.0;
    let d_negs = negs.iter().map(|&n| (n - lse).exp()).collect();
    (lse - pos, d_pos, d_negs)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(anchor: &[f64], others: &[&[f64]]) -> Result<()> {
    if let Some(v) = others.iter().find(|v| v.len() != anchor.len()) {
        return Err(Error::Dimension(format!(
            "vector of length {} does not match anchor length {}",
            v.len(),
            anchor.len()
        )));
    }
    Ok(())
}

/// InfoNCE for one anchor, one positive and `K` negatives. Inputs are used
/// as given: normalize them first if cosine logits are wanted.
pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    sup_con(anchor, &[positive], negatives, tau)
}

/// Supervised contrastive loss: the InfoNCE term averaged over every
/// positive, each positive appearing in its own denominator.
pub fn sup_con(anchor: &[f64], positives: &[&[f64]], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if negatives.is_empty() {
        return Err(Error::Config("contrastive loss needs at least one negative".into()));
    }
    if positives.is_empty() {
        return Err(Error::Config("contrastive loss needs at least one positive".into()));
    }
    check_dims(anchor, positives)?;
    check_dims(anchor, negatives)?;
    let neg_logits: Vec<f64> = negatives.iter().map(|n| dot(anchor, n) / tau).collect();
    let total: f64 = positives
        .iter()
        .map(|p| softmax_term(dot(anchor, p) / tau, &neg_logits).0)
        .sum();
    Ok(total / positives.len() as f64)
}

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Dimension(format!("feature shapes differ: {a:?} vs {b:?}")))
    }
}

/// Mean over spatial positions of the cosine similarity between the
/// channel vectors of two `C × H × W` maps.
pub fn pixel_cosine(fx: ArrayView3<f64>, fy: ArrayView3<f64>) -> Result<f64> {
    same_shape(fx.shape(), fy.shape())?;
    let (_, h, w) = fx.dim();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let a = fx.slice(ndarray::s![.., y, x]);
            let b = fy.slice(ndarray::s![.., y, x]);
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            Zip::from(&a).and(&b).for_each(|&p, &q| {
                ab += p * q;
                aa += p * p;
                bb += q * q;
            });
            total += ab / (aa.sqrt() * bb.sqrt() + COSINE_EPS);
        }
    }
    Ok(total / (h * w) as f64)
}

/// [`pixel_cosine`] together with its gradient with respect to `fx`.
pub fn pixel_cosine_grad(fx: ArrayView3<f64>, fy: ArrayView3<f64>) -> Result<(f64, Array3<f64>)> {
    same_shape(fx.shape(), fy.shape())?;
    let (c, h, w) = fx.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut grad = Array3::zeros((c, h, w));
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let a = fx.slice(ndarray::s![.., y, x]);
            let b = fy.slice(ndarray::s![.., y, x]);
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            Zip::from(&a).and(&b).for_each(|&p, &q| {
                ab += p * q;
                aa += p * p;
                bb += q * q;
            });
            let (na, nb) = (aa.sqrt(), bb.sqrt());
            let denom = na * nb + COSINE_EPS;
            total += ab / denom;
            // d/da [ab / (|a||b| + eps)] = b/denom - ab |b| a / (|a| denom²)
            let radial = if na > 0.0 { ab * nb / (na * denom * denom) } else { 0.0 };
            let mut g = grad.slice_mut(ndarray::s![.., y, x]);
            Zip::from(&mut g).and(&a).and(&b).for_each(|g, &p, &q| {
                *g = scale * (q / denom - radial * p);
            });
        }
    }
    Ok((total * scale, grad))
}

fn pcl_from_similarities(pos: &[f64], neg: &[f64], tau: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let neg_logits: Vec<f64> = neg.iter().map(|s| s / tau).collect();
    let p = pos.len() as f64;
    let mut loss = 0.0;
    let mut d_pos = vec![0.0; pos.len()];
    let mut d_neg = vec![0.0; neg.len()];
    for (j, &s) in pos.iter().enumerate() {
        let (l, dp, dn) = softmax_term(s / tau, &neg_logits);
        loss += l / p;
        d_pos[j] = dp / (p * tau);
        for (acc, g) in d_neg.iter_mut().zip(dn) {
            *acc += g / (p * tau);
        }
    }
    (loss, d_pos, d_neg)
}

/// Contrastive loss on one layer for one sample: the softmax term averaged
/// over positives, with [`pixel_cosine`] as the similarity.
pub fn pcl_layer_loss(f: ArrayView3<f64>, pos: &[ArrayView3<f64>], neg: &[ArrayView3<f64>], tau: f64) -> Result<f64> {
    Ok(pcl_layer_loss_grad(f, pos, neg, tau, false)?.0)
}

/// [`pcl_layer_loss`] and, if `with_grad`, its gradient with respect to `f`.
/// Positives and negatives are constants.
pub fn pcl_layer_loss_grad(
    f: ArrayView3<f64>,
    pos: &[ArrayView3<f64>],
    neg: &[ArrayView3<f64>],
    tau: f64,
    with_grad: bool,
) -> Result<(f64, Option<Array3<f64>>)> {
    check_tau(tau)?;
    if neg.is_empty() {
        return Err(Error::Config("contrastive loss needs at least one negative".into()));
    }
    if pos.is_empty() {
        return Err(Error::Config("contrastive loss needs at least one positive".into()));
    }
    if !with_grad {
        let sp = pos.iter().map(|p| pixel_cosine(f, *p)).collect::<Result<Vec<_>>>()?;
        let sn = neg.iter().map(|n| pixel_cosine(f, *n)).collect::<Result<Vec<_>>>()?;
        return Ok((pcl_from_similarities(&sp, &sn, tau).0, None));
    }
    let (sp, gp): (Vec<f64>, Vec<Array3<f64>>) = pos
        .iter()
        .map(|p| pixel_cosine_grad(f, *p))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let (sn, gn): (Vec<f64>, Vec<Array3<f64>>) = neg
        .iter()
        .map(|n| pixel_cosine_grad(f, *n))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let (loss, d_pos, d_neg) = pcl_from_similarities(&sp, &sn, tau);
    let mut grad = Array3::zeros(f.raw_dim());
    for (w, g) in d_pos.iter().zip(&gp).chain(d_neg.iter().zip(&gn)) {
        grad.scaled_add(*w, g);
    }
    Ok((loss, Some(grad)))
}

/// Intermediate feature maps of the embedding network for one batch,
/// shallowest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub layers: Vec<BatchTensor>,
}

impl FeaturePyramid {
    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len_of(Axis(0)))
    }

    fn congruent(&self, other: &FeaturePyramid) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Dimension(format!(
                "pyramids have {} and {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (l, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Dimension(format!(
                    "layer {l} shapes differ: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Contrastive loss averaged over the batch and the pyramid layers.
/// `positives[j]` holds positive `j` of every sample, likewise `negatives`.
pub fn pcl_total_loss(
    anchors: &FeaturePyramid,
    positives: &[FeaturePyramid],
    negatives: &[FeaturePyramid],
    tau: f64,
) -> Result<f64> {
    Ok(pcl_total_loss_grad(anchors, positives, negatives, tau, false)?.0)
}

/// [`pcl_total_loss`] with, if requested, one gradient tensor per anchor
/// layer.
pub fn pcl_total_loss_grad(
    anchors: &FeaturePyramid,
    positives: &[FeaturePyramid],
    negatives: &[FeaturePyramid],
    tau: f64,
    with_grad: bool,
) -> Result<(f64, Option<Vec<BatchTensor>>)> {
    if anchors.layers.is_empty() {
        return Err(Error::Dimension("feature pyramid has no layers".into()));
    }
    for p in positives.iter().chain(negatives) {
        anchors.congruent(p)?;
    }
    let n = anchors.batch_size();
    if n == 0 {
        return Err(Error::Dimension("empty batch".into()));
    }
    let layers = anchors.layers.len();
    let scale = 1.0 / (n * layers) as f64;
    let mut total = 0.0;
    let mut grads: Option<Vec<BatchTensor>> =
        with_grad.then(|| anchors.layers.iter().map(|l| BatchTensor::zeros(l.raw_dim())).collect());
    for (l, anchor_layer) in anchors.layers.iter().enumerate() {
        for i in 0..n {
            let f = anchor_layer.index_axis(Axis(0), i);
            let pos: Vec<_> = positives.iter().map(|p| p.layers[l].index_axis(Axis(0), i)).collect();
            let neg: Vec<_> = negatives.iter().map(|p| p.layers[l].index_axis(Axis(0), i)).collect();
            let (loss, g) = pcl_layer_loss_grad(f, &pos, &neg, tau, with_grad)?;
            total += loss * scale;
            if let (Some(grads), Some(g)) = (grads.as_mut(), g) {
                grads[l].index_axis_mut(Axis(0), i).scaled_add(scale, &g);
            }
        }
    }
    Ok((total, grads))
}

/// Discriminator objective (minimized): every real score competes with the
/// whole fake batch in a softmax, and every negated fake score with the
/// negated real batch.
pub fn contrad_loss(scores_real: &[f64], scores_fake: &[f64]) -> Result<f64> {
    Ok(contrad_loss_grad(scores_real, scores_fake)?.0)
}

/// [`contrad_loss`] with gradients with respect to the real and fake scores.
pub fn contrad_loss_grad(scores_real: &[f64], scores_fake: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if scores_real.is_empty() || scores_fake.is_empty() {
        return Err(Error::Config("discriminator loss needs real and fake scores".into()));
    }
    let (nr, nf) = (scores_real.len() as f64, scores_fake.len() as f64);
    let mut loss = 0.0;
    let mut g_real = vec![0.0; scores_real.len()];
    let mut g_fake = vec![0.0; scores_fake.len()];
    for (r, &s) in scores_real.iter().enumerate() {
        let (l, dp, dn) = softmax_term(s, scores_fake);
        loss += l / nr;
        g_real[r] += dp / nr;
        g_fake.iter_mut().zip(dn).for_each(|(g, d)| *g += d / nr);
    }
    let neg_real: Vec<f64> = scores_real.iter().map(|s| -s).collect();
    for (f, &s) in scores_fake.iter().enumerate() {
        let (l, dp, dn) = softmax_term(-s, &neg_real);
        loss += l / nf;
        g_fake[f] -= dp / nf;
        g_real.iter_mut().zip(dn).for_each(|(g, d)| *g -= d / nf);
    }
    Ok((loss, g_real, g_fake))
}

fn same_batch_shape(a: &BatchTensor, b: &BatchTensor) -> Result<()> {
    same_shape(a.shape(), b.shape())
}

/// Mean absolute error over every element.
pub fn l1_loss(sr: &BatchTensor, hr: &BatchTensor) -> Result<f64> {
    same_batch_shape(sr, hr)?;
    let total: f64 = Zip::from(sr).and(hr).fold(0.0, |acc, a, b| acc + (a - b).abs());
    Ok(total / sr.len() as f64)
}

/// Gradient of [`l1_loss`] with respect to `sr` (sign convention `sign(0) = 0`).
pub fn l1_loss_grad(sr: &BatchTensor, hr: &BatchTensor) -> Result<BatchTensor> {
    same_batch_shape(sr, hr)?;
    let scale = 1.0 / sr.len() as f64;
    Ok(Zip::from(sr).and(hr).map_collect(|a, b| {
        let d = a - b;
        if d > 0.0 {
            scale
        } else if d < 0.0 {
            -scale
        } else {
            0.0
        }
    }))
}

/// `l1 + alpha · lcl`.
pub fn sr_total_loss(l1: f64, lcl: f64, weights: &LossWeights) -> f64 {
    l1 + weights.alpha * lcl
}
