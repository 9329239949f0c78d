//! Compact EDSR-style generator: conv head, residual body without batch
//! normalization, global skip, sub-pixel upsampler and conv tail.

use ndarray::{ArrayD, Axis};
use serde::{Deserialize, Serialize};

use super::init::{kaiming_uniform, zeros};
use super::layers::{conv2d, conv2d_backward, pixel_shuffle, pixel_unshuffle, relu, relu_backward, ConvGeometry};
use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::BatchTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrBackboneConfig {
    pub n_resblocks: usize,
    pub n_channels: usize,
    pub scale: usize,
}

impl Default for SrBackboneConfig {
    fn default() -> Self {
        SrBackboneConfig {
            n_resblocks: 4,
            n_channels: 32,
            scale: 4,
        }
    }
}

impl SrBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 3, 4].contains(&self.scale) {
            return Err(Error::Config(format!("scale must be 2, 3 or 4, got {}", self.scale)));
        }
        if self.n_channels < 8 {
            return Err(Error::Config(format!("need at least 8 channels, got {}", self.n_channels)));
        }
        if self.n_resblocks == 0 {
            return Err(Error::Config("need at least one residual block".into()));
        }
        Ok(())
    }

    /// Shuffle factor of each upsampling stage.
    pub fn upsample_factors(&self) -> Vec<usize> {
        match self.scale {
            4 => vec![2, 2],
            s => vec![s],
        }
    }
}

const IMAGE_CHANNELS: usize = 3;

/// Fixed RGB mean removed from the input and restored at the output, as in
/// EDSR; saves the network from learning the DC level through its biases.
pub const RGB_MEAN: [f64; 3] = [0.4488, 0.4371, 0.4040];

fn shift_mean(x: &BatchTensor, sign: f64) -> BatchTensor {
    let mut y = x.clone();
    for (c, m) in RGB_MEAN.iter().enumerate() {
        y.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + sign * m);
    }
    y
}

fn conv_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.weight"), format!("{prefix}.bias"))
}

fn add_conv(p: &mut ParameterSet, prefix: &str, cout: usize, cin: usize, k: usize, rng: &mut RandomSource) {
    let (w, b) = conv_names(prefix);
    p.insert(w, kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng));
    p.insert(b, zeros(&[cout]));
}

pub fn init_sr_parameters(cfg: &SrBackboneConfig, rng: &mut RandomSource) -> Result<ParameterSet> {
    cfg.validate()?;
    let c = cfg.n_channels;
    let mut p = ParameterSet::new();
    add_conv(&mut p, "sr.head", c, IMAGE_CHANNELS, 3, rng);
    for b in 0..cfg.n_resblocks {
        add_conv(&mut p, &format!("sr.body.{b}.conv1"), c, c, 3, rng);
        add_conv(&mut p, &format!("sr.body.{b}.conv2"), c, c, 3, rng);
    }
    for (s, r) in cfg.upsample_factors().into_iter().enumerate() {
        add_conv(&mut p, &format!("sr.up.{s}"), c * r * r, c, 3, rng);
    }
    add_conv(&mut p, "sr.tail", IMAGE_CHANNELS, c, 3, rng);
    Ok(p)
}

fn conv(p: &ParameterSet, prefix: &str, x: &BatchTensor) -> Result<BatchTensor> {
    let (w, b) = conv_names(prefix);
    Ok(conv2d(x, p.weight4(&w)?, p.vector(&b)?, ConvGeometry::SAME3))
}

fn conv_back(
    p: &ParameterSet,
    grads: &mut ParameterSet,
    prefix: &str,
    input: &BatchTensor,
    grad_out: &BatchTensor,
    need_input: bool,
) -> Result<Option<BatchTensor>> {
    let (w, b) = conv_names(prefix);
    let (dw, db, dx) = conv2d_backward(input, p.weight4(&w)?, grad_out, ConvGeometry::SAME3, need_input);
    grads.insert(w, dw.into_dyn());
    grads.insert(b, db.into_dyn());
    Ok(dx)
}

struct BlockCache {
    input: BatchTensor,
    pre: BatchTensor,
    act: BatchTensor,
}

/// Activations kept for the backward pass.
pub struct SrCache {
    input: BatchTensor,
    blocks: Vec<BlockCache>,
    up_inputs: Vec<BatchTensor>,
    tail_input: BatchTensor,
}

fn check_input(lr: &BatchTensor) -> Result<()> {
    if lr.len_of(Axis(1)) != IMAGE_CHANNELS {
        return Err(Error::Dimension(format!(
            "SR network expects RGB input, got {} channels",
            lr.len_of(Axis(1))
        )));
    }
    Ok(())
}

fn forward_impl(p: &ParameterSet, cfg: &SrBackboneConfig, lr: &BatchTensor, keep: bool) -> Result<(BatchTensor, Option<SrCache>)> {
    check_input(lr)?;
    let x = shift_mean(lr, -1.0);
    let head = conv(p, "sr.head", &x)?;
    let mut blocks = Vec::new();
    let mut r = head.clone();
    for b in 0..cfg.n_resblocks {
        let pre = conv(p, &format!("sr.body.{b}.conv1"), &r)?;
        let act = relu(&pre);
        let res = conv(p, &format!("sr.body.{b}.conv2"), &act)?;
        let next = &r + &res;
        if keep {
            blocks.push(BlockCache { input: r, pre, act });
        }
        r = next;
    }
    let mut u = r + &head;
    let mut up_inputs = Vec::new();
    for (s, f) in cfg.upsample_factors().into_iter().enumerate() {
        let y = pixel_shuffle(&conv(p, &format!("sr.up.{s}"), &u)?, f);
        if keep {
            up_inputs.push(u);
        }
        u = y;
    }
    let out = shift_mean(&conv(p, "sr.tail", &u)?, 1.0);
    let cache = keep.then(|| SrCache {
        input: x,
        blocks,
        up_inputs,
        tail_input: u,
    });
    Ok((out, cache))
}

/// Super-resolves an `N × 3 × h × w` batch to `N × 3 × sh × sw`. The output
/// is not clamped.
pub fn sr_forward(p: &ParameterSet, cfg: &SrBackboneConfig, lr: &BatchTensor) -> Result<BatchTensor> {
    Ok(forward_impl(p, cfg, lr, false)?.0)
}

pub fn sr_forward_cached(p: &ParameterSet, cfg: &SrBackboneConfig, lr: &BatchTensor) -> Result<(BatchTensor, SrCache)> {
    let (out, cache) = forward_impl(p, cfg, lr, true)?;
    Ok((out, cache.expect("cache requested")))
}

/// Parameter gradients given the gradient of the loss with respect to the
/// network output.
pub fn sr_backward(p: &ParameterSet, cfg: &SrBackboneConfig, cache: &SrCache, grad_out: &BatchTensor) -> Result<ParameterSet> {
    let mut grads = ParameterSet::new();
    let mut g = conv_back(p, &mut grads, "sr.tail", &cache.tail_input, grad_out, true)?.expect("input grad");
    for (s, f) in cfg.upsample_factors().into_iter().enumerate().rev() {
        let g_conv = pixel_unshuffle(&g, f);
        g = conv_back(p, &mut grads, &format!("sr.up.{s}"), &cache.up_inputs[s], &g_conv, true)?.expect("input grad");
    }
    // g is now the gradient at body + head; the global skip passes it to the head unchanged
    let g_skip = g.clone();
    let mut g_r = g;
    for (b, bc) in cache.blocks.iter().enumerate().rev() {
        let g_act = conv_back(p, &mut grads, &format!("sr.body.{b}.conv2"), &bc.act, &g_r, true)?.expect("input grad");
        let g_pre = relu_backward(&bc.pre, &g_act);
        let g_in = conv_back(p, &mut grads, &format!("sr.body.{b}.conv1"), &bc.input, &g_pre, true)?.expect("input grad");
        g_r += &g_in;
    }
    let g_head = g_r + &g_skip;
    conv_back(p, &mut grads, "sr.head", &cache.input, &g_head, false)?;
    Ok(grads)
}

/// Number of scalars [`init_sr_parameters`] creates for `cfg`.
pub fn sr_parameter_count(cfg: &SrBackboneConfig) -> usize {
    let c = cfg.n_channels;
    let conv = |cout: usize, cin: usize| cout * cin * 9 + cout;
    conv(c, IMAGE_CHANNELS)
        + cfg.n_resblocks * 2 * conv(c, c)
        + cfg.upsample_factors().iter().map(|r| conv(c * r * r, c)).sum::<usize>()
        + conv(IMAGE_CHANNELS, c)
}

pub fn zero_tail(p: &mut ParameterSet) {
    if let Some(w) = p.get_mut("sr.tail.weight") {
        w.fill(0.0);
    }
    if let Some(b) = p.get_mut("sr.tail.bias") {
        *b = ArrayD::zeros(b.raw_dim());
    }
}
