//! Embedding network: a stack of stride-2 4×4 convolutions with LeakyReLU
//! whose stage outputs are tapped for the contrastive loss, plus an affine
//! head on the globally pooled last stage that yields one score per sample.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use super::init::{kaiming_uniform, zeros};
use super::layers::{conv2d, conv2d_backward, leaky_relu, leaky_relu_backward, ConvGeometry};
use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::losses::FeaturePyramid;
use crate::rng::RandomSource;
use crate::tensor::BatchTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_layers: usize,
    /// Divide every conv weight by its largest singular value.
    pub spectral_norm: bool,
}

impl Default for EmbedNetConfig {
    fn default() -> Self {
        EmbedNetConfig {
            in_channels: 9,
            base_channels: 64,
            n_layers: 5,
            spectral_norm: false,
        }
    }
}

impl EmbedNetConfig {
    pub fn validate(&self, taps: usize) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("embedding network needs non-zero channel counts".into()));
        }
        if taps == 0 || taps > self.n_layers {
            return Err(Error::Config(format!(
                "cannot tap {taps} layers of a {}-stage embedding network",
                self.n_layers
            )));
        }
        Ok(())
    }

    /// Output channels of stage `i`: base, 2·base, 4·base, then 8·base.
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i.min(3)
    }
}

fn stage_name(i: usize) -> (String, String) {
    (format!("ed.stage.{i}.weight"), format!("ed.stage.{i}.bias"))
}

fn sn_name(i: usize) -> String {
    format!("ed.stage.{i}.sn_u")
}

/// Whether a parameter is a non-trainable buffer.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".sn_u")
}

pub fn init_embed_parameters(cfg: &EmbedNetConfig, rng: &mut RandomSource) -> Result<ParameterSet> {
    cfg.validate(1)?;
    let mut p = ParameterSet::new();
    let mut cin = cfg.in_channels;
    for i in 0..cfg.n_layers {
        let cout = cfg.stage_channels(i);
        let (w, b) = stage_name(i);
        p.insert(w, kaiming_uniform(&[cout, cin, 4, 4], cin * 16, rng));
        p.insert(b, zeros(&[cout]));
        if cfg.spectral_norm {
            let u = ArrayD::from_shape_simple_fn(ndarray::IxDyn(&[cout]), || rng.uniform(-1.0, 1.0));
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            p.insert(sn_name(i), u / norm);
        }
        cin = cout;
    }
    p.insert("ed.head.weight", kaiming_uniform(&[cin], cin, rng));
    p.insert("ed.head.bias", zeros(&[1]));
    Ok(p)
}

/// One power-iteration estimate of the top singular triple of a reshaped
/// conv weight, started from the stored left vector.
struct SpectralEstimate {
    sigma: f64,
    u: Array1<f64>,
    v: Array1<f64>,
}

fn normalize(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt().max(1e-12);
    v / n
}

fn spectral_estimate(w: &Array2<f64>, u0: &Array1<f64>) -> SpectralEstimate {
    let v = normalize(w.t().dot(u0));
    let u = normalize(w.dot(&v));
    let sigma = u.dot(&w.dot(&v));
    SpectralEstimate { sigma, u, v }
}

fn matrix_of(w: &Array4<f64>) -> Array2<f64> {
    let (co, ci, kh, kw) = w.dim();
    w.clone().into_shape_with_order((co, ci * kh * kw)).expect("reshape")
}

/// Weight actually applied by stage `i`, with the spectral estimate when
/// normalization is on.
fn stage_weight(p: &ParameterSet, cfg: &EmbedNetConfig, i: usize) -> Result<(Array4<f64>, Option<SpectralEstimate>)> {
    let w = p.weight4(&stage_name(i).0)?.to_owned();
    if !cfg.spectral_norm {
        return Ok((w, None));
    }
    let u0 = p.vector(&sn_name(i))?.to_owned();
    let est = spectral_estimate(&matrix_of(&w), &u0);
    Ok((w / est.sigma, Some(est)))
}

/// Stage inputs and pre-activations kept for the backward pass.
pub struct EmbedCache {
    inputs: Vec<BatchTensor>,
    pre: Vec<BatchTensor>,
    weights: Vec<(Array4<f64>, Option<SpectralEstimate>)>,
    pooled: Array2<f64>,
    last_spatial: usize,
}

/// Runs every stage and returns the first `taps` stage outputs plus one score
/// per sample.
pub fn embed_forward(p: &ParameterSet, cfg: &EmbedNetConfig, x: &BatchTensor, taps: usize) -> Result<(FeaturePyramid, Vec<f64>)> {
    let (pyr, scores, _) = embed_forward_cached(p, cfg, x, taps)?;
    Ok((pyr, scores))
}

pub fn embed_forward_cached(
    p: &ParameterSet,
    cfg: &EmbedNetConfig,
    x: &BatchTensor,
    taps: usize,
) -> Result<(FeaturePyramid, Vec<f64>, EmbedCache)> {
    cfg.validate(taps)?;
    if x.len_of(Axis(1)) != cfg.in_channels {
        return Err(Error::Dimension(format!(
            "embedding network expects {} channels, got {}",
            cfg.in_channels,
            x.len_of(Axis(1))
        )));
    }
    let mut inputs = Vec::with_capacity(cfg.n_layers);
    let mut pre = Vec::with_capacity(cfg.n_layers);
    let mut weights = Vec::with_capacity(cfg.n_layers);
    let mut layers = Vec::with_capacity(taps);
    let mut h = x.clone();
    for i in 0..cfg.n_layers {
        let (w, est) = stage_weight(p, cfg, i)?;
        let z = conv2d(&h, w.view(), p.vector(&stage_name(i).1)?, ConvGeometry::DOWN4);
        let a = leaky_relu(&z);
        if i < taps {
            layers.push(a.clone());
        }
        inputs.push(std::mem::replace(&mut h, a));
        pre.push(z);
        weights.push((w, est));
    }
    let (n, c, hh, ww) = h.dim();
    let last_spatial = hh * ww;
    let pooled = h
        .into_shape_with_order((n, c, last_spatial))
        .expect("pool reshape")
        .mean_axis(Axis(2))
        .expect("non-empty spatial extent");
    let head_w = p.vector("ed.head.weight")?;
    let head_b = p.vector("ed.head.bias")?[0];
    let scores = pooled.dot(&head_w).iter().map(|s| s + head_b).collect();
    Ok((
        FeaturePyramid { layers },
        scores,
        EmbedCache {
            inputs,
            pre,
            weights,
            pooled,
            last_spatial,
        },
    ))
}

/// Gradients flowing into the embedding network.
pub struct EmbedGrad<'a> {
    /// One tensor per tapped layer.
    pub taps: Option<&'a [BatchTensor]>,
    pub scores: Option<&'a [f64]>,
}

/// Backward pass. Returns parameter gradients (if `need_params`) and the
/// gradient with respect to the input (if `need_input`).
pub fn embed_backward(
    p: &ParameterSet,
    cfg: &EmbedNetConfig,
    cache: &EmbedCache,
    grad: EmbedGrad<'_>,
    need_params: bool,
    need_input: bool,
) -> Result<(Option<ParameterSet>, Option<BatchTensor>)> {
    let mut grads = ParameterSet::new();
    let last = cfg.n_layers - 1;
    let mut g = BatchTensor::zeros(cache.pre[last].raw_dim());
    if let Some(gs) = grad.scores {
        let head_w = p.vector("ed.head.weight")?;
        let gs = Array1::from(gs.to_vec());
        if need_params {
            grads.insert("ed.head.weight", cache.pooled.t().dot(&gs).into_dyn());
            grads.insert("ed.head.bias", Array1::from(vec![gs.sum()]).into_dyn());
        }
        let scale = 1.0 / cache.last_spatial as f64;
        for ((i, ch, _, _), v) in g.indexed_iter_mut() {
            *v = gs[i] * head_w[ch] * scale;
        }
    } else if need_params {
        grads.insert("ed.head.weight", ArrayD::zeros(p.get("ed.head.weight")?.raw_dim()));
        grads.insert("ed.head.bias", ArrayD::zeros(p.get("ed.head.bias")?.raw_dim()));
    }
    let taps = grad.taps.unwrap_or(&[]);
    let mut input_grad = None;
    for i in (0..cfg.n_layers).rev() {
        if let Some(gt) = taps.get(i) {
            g += gt;
        }
        let gz = leaky_relu_backward(&cache.pre[i], &g);
        let want_input = i > 0 || need_input;
        let (w_eff, est) = &cache.weights[i];
        let (dw, db, dx) = conv2d_backward(&cache.inputs[i], w_eff.view(), &gz, ConvGeometry::DOWN4, want_input);
        if need_params {
            let (wn, bn) = stage_name(i);
            let dw = match est {
                None => dw,
                Some(est) => {
                    // W_sn = W / σ with σ = uᵀWv, u and v held fixed
                    let gm = matrix_of(&dw);
                    let inner: f64 = (&gm * &matrix_of(w_eff)).sum();
                    let outer = est.u.view().insert_axis(Axis(1)).dot(&est.v.view().insert_axis(Axis(0)));
                    let dm = (gm - outer * inner) / est.sigma;
                    dm.into_shape_with_order(dw.raw_dim()).expect("reshape")
                }
            };
            grads.insert(wn, dw.into_dyn());
            grads.insert(bn, db.into_dyn());
        }
        match dx {
            Some(dx) if i > 0 => g = dx,
            Some(dx) => input_grad = Some(dx),
            None => {}
        }
    }
    Ok((need_params.then_some(grads), input_grad))
}

/// Advances each stored power-iteration vector by one step. Called after
/// every update of the embedding parameters when normalization is on.
pub fn refresh_spectral_buffers(p: &mut ParameterSet, cfg: &EmbedNetConfig) -> Result<()> {
    if !cfg.spectral_norm {
        return Ok(());
    }
    for i in 0..cfg.n_layers {
        let w = matrix_of(&p.weight4(&stage_name(i).0)?.to_owned());
        let u0 = p.vector(&sn_name(i))?.to_owned();
        let est = spectral_estimate(&w, &u0);
        p.insert(sn_name(i), est.u.into_dyn());
    }
    Ok(())
}

/// Number of trainable scalars [`init_embed_parameters`] creates.
pub fn embed_parameter_count(cfg: &EmbedNetConfig) -> usize {
    let mut cin = cfg.in_channels;
    let mut total = 0;
    for i in 0..cfg.n_layers {
        let cout = cfg.stage_channels(i);
        total += cout * cin * 16 + cout;
        cin = cout;
    }
    total + cin + 1
}

