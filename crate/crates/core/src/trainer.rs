//! Alternating optimization of the embedding network (discriminator side)
//! and the SR network (L1 + α·contrastive), with checkpointing and logging.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{concatenate, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datapipe::{bicubic_upscale, TrainingSet};
use crate::error::{Error, Result};
use crate::losses::{contrad_loss, contrad_loss_grad, l1_loss, l1_loss_grad, pcl_total_loss_grad, sr_total_loss, FeaturePyramid, LossWeights};
use crate::networks::{
    embed_backward, embed_forward, embed_forward_cached, init_embed_parameters, init_sr_parameters, refresh_spectral_buffers,
    sr_backward, sr_forward, sr_forward_cached, EmbedGrad, EmbedNetConfig, ParameterSet, SrBackboneConfig, SrCache,
};
use crate::optim::{halving_schedule, Adam, AdamConfig};
use crate::rng::RandomSource;
use crate::sampling::{geometric_augment, make_negatives, make_positives};
use crate::spectral::Transform;
use crate::tensor::{batch_from_images, check_finite, BatchTensor, Image};

/// How the embedding network takes part in training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbeddingMode {
    /// Trained alternately with the SR network.
    Learned,
    /// Loaded from a checkpoint and never updated.
    Frozen(PathBuf),
    /// No contrastive term: plain L1 training.
    Off,
}

impl FromStr for EmbeddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(EmbeddingMode::Learned),
            "off" => Ok(EmbeddingMode::Off),
            _ => match s.strip_prefix("frozen:") {
                Some(p) if !p.is_empty() => Ok(EmbeddingMode::Frozen(PathBuf::from(p))),
                _ => Err(Error::Config(format!(
                    "embedding_mode must be learned, off or frozen:<checkpoint>, got {s:?}"
                ))),
            },
        }
    }
}

impl fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbeddingMode::Learned => f.write_str("learned"),
            EmbeddingMode::Off => f.write_str("off"),
            EmbeddingMode::Frozen(p) => write!(f, "frozen:{}", p.display()),
        }
    }
}

impl Serialize for EmbeddingMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for EmbeddingMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Every knob of a training run. Serialized as flat JSON; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub scale: usize,
    /// LR patch side; HR patches are `scale` times larger.
    pub lr_patch: usize,
    pub batch_size: usize,
    /// Sharpened positives in addition to the ground truth.
    pub k_pos: usize,
    pub k_neg: usize,
    pub tau: f64,
    pub alpha: f64,
    pub loss_layers: usize,
    pub transform: Transform,
    pub embedding_mode: EmbeddingMode,
    pub use_pos_aug: bool,
    pub use_neg_aug: bool,
    /// Random flips and quarter turns of training patches.
    pub geometric_aug: bool,
    pub steps: u64,
    pub learning_rate: f64,
    /// Learning rate halves every this many steps (0 = constant).
    pub lr_halve_every: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub d_steps_per_g: usize,
    pub seed: u64,
    pub n_resblocks: usize,
    pub n_channels: usize,
    pub embed_base_channels: usize,
    pub embed_layers: usize,
    pub spectral_norm: bool,
    /// Periodic checkpoint interval in steps (0 = final checkpoint only).
    pub checkpoint_every: u64,
    /// Data-loading lanes; part of the reproducibility key.
    pub workers: usize,
    /// Directory of HR training PNGs, relative to the data root if not absolute.
    pub train_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scale: 4,
            lr_patch: 48,
            batch_size: 16,
            k_pos: 4,
            k_neg: 4,
            tau: 0.5,
            alpha: 0.1,
            loss_layers: 4,
            transform: Transform::Haar,
            embedding_mode: EmbeddingMode::Learned,
            use_pos_aug: true,
            use_neg_aug: true,
            geometric_aug: true,
            steps: 1000,
            learning_rate: 1e-4,
            lr_halve_every: 200_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            d_steps_per_g: 1,
            seed: 0,
            n_resblocks: 4,
            n_channels: 32,
            embed_base_channels: 64,
            embed_layers: 5,
            spectral_norm: false,
            checkpoint_every: 0,
            workers: 1,
            train_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value`; the value is parsed as JSON, falling back to a
    /// plain string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut obj = serde_json::to_value(&*self)?;
        let map = obj.as_object_mut().expect("config serializes to an object");
        if !map.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        map.insert(key.to_string(), value);
        *self = serde_json::from_value(obj).map_err(|e| Error::Config(format!("override {spec:?}: {e}")))?;
        Ok(())
    }

    pub fn sr_config(&self) -> SrBackboneConfig {
        SrBackboneConfig {
            n_resblocks: self.n_resblocks,
            n_channels: self.n_channels,
            scale: self.scale,
        }
    }

    pub fn embed_config(&self) -> EmbedNetConfig {
        EmbedNetConfig {
            in_channels: self.transform.out_channels(3),
            base_channels: self.embed_base_channels,
            n_layers: self.embed_layers,
            spectral_norm: self.spectral_norm,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            tau: self.tau,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Whether the contrastive term enters the SR objective at all.
    pub fn contrastive_active(&self) -> bool {
        self.embedding_mode != EmbeddingMode::Off && self.alpha > 0.0 && (self.use_pos_aug || self.use_neg_aug)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        self.sr_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.loss_weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.embedding_mode != EmbeddingMode::Off {
            self.embed_config()
                .validate(self.loss_layers)
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.batch_size == 0 || self.lr_patch == 0 || self.workers == 0 {
            return cfg("batch_size, lr_patch and workers must be positive".into());
        }
        if self.embedding_mode == EmbeddingMode::Learned && self.batch_size < 2 {
            return cfg("learned embedding needs batch_size >= 2 (real and fake scores must be contrasted)".into());
        }
        if self.embedding_mode == EmbeddingMode::Learned && self.d_steps_per_g == 0 {
            return cfg("learned embedding needs d_steps_per_g >= 1".into());
        }
        if self.use_neg_aug && self.k_neg == 0 {
            return cfg("use_neg_aug requires k_neg >= 1".into());
        }
        if self.lr_patch * self.scale % 2 != 0 {
            return cfg("HR patch side must be even for the wavelet transform".into());
        }
        let lr_ok = self.learning_rate.is_finite() && self.learning_rate > 0.0;
        let betas_ok = (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2);
        if !lr_ok || !betas_ok || !(self.adam_eps > 0.0) {
            return cfg("learning_rate > 0, betas in [0, 1) and adam_eps > 0 are required".into());
        }
        Ok(())
    }
}

/// Performance of one outer step. `wall_ms` is excluded from `log.csv` so
/// that logs of identical runs compare equal byte for byte.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l1: f64,
    pub lcl: f64,
    pub lcld: f64,
    pub total: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,l1,lcl,lcld,total";

    pub fn csv_row(&self) -> String {
        format!("{},{:?},{:?},{:?},{:?}", self.step, self.l1, self.lcl, self.lcld, self.total)
    }
}

/// Where a batch element was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub image: usize,
    pub top: usize,
    pub left: usize,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub lr: BatchTensor,
    pub hr: BatchTensor,
    /// `positives[j]` stacks positive `j` of every element; empty when the
    /// contrastive term is inactive. Likewise `negatives`.
    pub positives: Vec<BatchTensor>,
    pub negatives: Vec<BatchTensor>,
    pub origins: Vec<PatchOrigin>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

struct Element {
    lr: Image,
    hr: Image,
    positives: Vec<Image>,
    negatives: Vec<Image>,
    origin: PatchOrigin,
}

fn sample_element(cfg: &TrainConfig, data: &TrainingSet, rng: &mut RandomSource) -> Result<Element> {
    let pp = data.random_patch(cfg.lr_patch, rng)?;
    let origin = PatchOrigin {
        image: pp.source_index,
        top: pp.top,
        left: pp.left,
    };
    let (lr, hr) = if cfg.geometric_aug {
        geometric_augment(&pp.lr_patch, &pp.hr_patch, rng)?
    } else {
        (pp.lr_patch, pp.hr_patch)
    };
    let (mut positives, mut negatives) = (Vec::new(), Vec::new());
    if cfg.contrastive_active() {
        positives = if cfg.use_pos_aug { make_positives(&hr, cfg.k_pos, rng)? } else { vec![hr.clone()] };
        negatives = if cfg.use_neg_aug {
            make_negatives(&hr, cfg.k_neg, rng)?
        } else {
            vec![bicubic_upscale(&lr, cfg.scale)?]
        };
    }
    Ok(Element {
        lr,
        hr,
        positives,
        negatives,
        origin,
    })
}

/// Mutable state of a run: both networks, both optimizers, data lanes.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub sr: ParameterSet,
    pub ed: ParameterSet,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub lanes: Vec<RandomSource>,
}

const INIT_SALT: u64 = 0x5eed_1417_a11c_e5ed;

impl TrainState {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = RandomSource::seed_from(config.seed ^ INIT_SALT);
        let sr = init_sr_parameters(&config.sr_config(), &mut init_rng.fork())?;
        let ed = match &config.embedding_mode {
            EmbeddingMode::Frozen(path) => load_frozen_embedding(path, config)?,
            _ => init_embed_parameters(&config.embed_config(), &mut init_rng.fork())?,
        };
        Ok(TrainState {
            step: 0,
            opt_g: Adam::new(config.adam(), &sr),
            opt_d: Adam::new(config.adam(), &ed),
            sr,
            ed,
            lanes: (0..config.workers as u64).map(|l| RandomSource::for_lane(config.seed, l)).collect(),
            config: config.clone(),
        })
    }

    pub fn sr_config(&self) -> SrBackboneConfig {
        self.config.sr_config()
    }

    pub fn embed_config(&self) -> EmbedNetConfig {
        self.config.embed_config()
    }

    pub fn learning_rate(&self) -> f64 {
        halving_schedule(self.config.learning_rate, self.step, self.config.lr_halve_every)
    }

    /// Draws one batch; element `i` comes from lane `i % workers`, lanes run
    /// on their own threads.
    pub fn sample_batch(&mut self, data: &TrainingSet) -> Result<Batch> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if data.scale != self.config.scale {
            return Err(Error::Config(format!("data scale {} != config scale {}", data.scale, self.config.scale)));
        }
        let cfg = &self.config;
        let workers = self.lanes.len();
        let n = cfg.batch_size;
        let per_lane: Vec<Result<Vec<Element>>> = if workers == 1 {
            vec![(0..n).map(|_| sample_element(cfg, data, &mut self.lanes[0])).collect()]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .lanes
                    .iter_mut()
                    .enumerate()
                    .map(|(lane, rng)| {
                        let count = (n + workers - 1 - lane) / workers;
                        s.spawn(move || (0..count).map(|_| sample_element(cfg, data, rng)).collect())
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("data lane panicked")).collect()
            })
        };
        let mut per_lane: Vec<std::vec::IntoIter<Element>> =
            per_lane.into_iter().map(|r| r.map(Vec::into_iter)).collect::<Result<_>>()?;
        let elements: Vec<Element> = (0..n).map(|i| per_lane[i % workers].next().expect("lane element count")).collect();

        let stack = |f: &dyn Fn(&Element) -> &Image| batch_from_images(&elements.iter().map(|e| f(e).clone()).collect::<Vec<_>>());
        let n_pos = elements[0].positives.len();
        let n_neg = elements[0].negatives.len();
        Ok(Batch {
            lr: stack(&|e| &e.lr)?,
            hr: stack(&|e| &e.hr)?,
            positives: (0..n_pos).map(|j| stack(&|e| &e.positives[j])).collect::<Result<_>>()?,
            negatives: (0..n_neg).map(|j| stack(&|e| &e.negatives[j])).collect::<Result<_>>()?,
            origins: elements.iter().map(|e| e.origin).collect(),
        })
    }

    fn ensure_finite(&self, batch: &Batch, what: &str, values: &[f64]) -> Result<()> {
        check_finite(what, values.iter().copied()).map_err(|_| {
            Error::NonFinite(format!(
                "{what} at step {} = {values:?}; batch patches (image, top, left): {:?}",
                self.step,
                batch.origins.iter().map(|o| (o.image, o.top, o.left)).collect::<Vec<_>>()
            ))
        })
    }

    /// Contrastive loss of `sr` against the batch's samples under the
    /// current embedding network (no gradients).
    pub fn contrastive_loss(&self, sr: &BatchTensor, batch: &Batch) -> Result<f64> {
        let (anchors, pos, neg) = self.pyramids(sr, batch)?;
        Ok(pcl_total_loss_grad(&anchors.0, &pos, &neg, self.config.tau, false)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn pyramids(
        &self,
        sr: &BatchTensor,
        batch: &Batch,
    ) -> Result<((FeaturePyramid, crate::networks::EmbedCache), Vec<FeaturePyramid>, Vec<FeaturePyramid>)> {
        if batch.positives.is_empty() || batch.negatives.is_empty() {
            return Err(Error::Config("batch carries no contrastive samples".into()));
        }
        let (ecfg, t, layers) = (self.embed_config(), self.config.transform, self.config.loss_layers);
        let (a, _, cache) = embed_forward_cached(&self.ed, &ecfg, &t.apply(sr)?, layers)?;
        let embed = |x: &BatchTensor| -> Result<FeaturePyramid> { Ok(embed_forward(&self.ed, &ecfg, &t.apply(x)?, layers)?.0) };
        let pos = batch.positives.iter().map(embed).collect::<Result<Vec<_>>>()?;
        let neg = batch.negatives.iter().map(embed).collect::<Result<Vec<_>>>()?;
        Ok(((a, cache), pos, neg))
    }

    /// Discriminator objective on HR (real) vs `sr` (fake) scores, with
    /// parameter gradients if requested.
    fn discriminator_pass(&self, hr: &BatchTensor, sr: &BatchTensor, with_grad: bool) -> Result<(f64, Option<ParameterSet>)> {
        let n = hr.len_of(Axis(0));
        if n < 2 {
            return Err(Error::Config("discriminator update needs a batch of at least 2".into()));
        }
        let t = self.config.transform;
        let ecfg = self.embed_config();
        let x = concatenate(Axis(0), &[t.apply(hr)?.view(), t.apply(sr)?.view()])
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let (_, scores, cache) = embed_forward_cached(&self.ed, &ecfg, &x, 1)?;
        if !with_grad {
            return Ok((contrad_loss(&scores[..n], &scores[n..])?, None));
        }
        let (loss, gr, gf) = contrad_loss_grad(&scores[..n], &scores[n..])?;
        let g: Vec<f64> = gr.into_iter().chain(gf).collect();
        let grad = EmbedGrad {
            taps: None,
            scores: Some(&g),
        };
        let (pg, _) = embed_backward(&self.ed, &ecfg, &cache, grad, true, false)?;
        Ok((loss, pg))
    }

    /// One update of the embedding network with the SR network frozen.
    /// `sr` may carry a precomputed output of the current SR parameters.
    pub fn d_step(&mut self, batch: &Batch, sr: Option<&BatchTensor>) -> Result<f64> {
        if self.config.embedding_mode != EmbeddingMode::Learned {
            return Err(Error::Config(format!(
                "d_step requires embedding_mode=learned, not {}",
                self.config.embedding_mode
            )));
        }
        let owned;
        let sr = match sr {
            Some(s) => s,
            None => {
                owned = sr_forward(&self.sr, &self.sr_config(), &batch.lr)?;
                &owned
            }
        };
        let (loss, grads) = self.discriminator_pass(&batch.hr, sr, true)?;
        self.ensure_finite(batch, "discriminator loss", &[loss])?;
        let grads = grads.expect("gradients requested");
        if !grads.all_finite() {
            self.ensure_finite(batch, "discriminator gradient", &[f64::NAN])?;
        }
        let lr = self.learning_rate();
        self.opt_d.update(&mut self.ed, &grads, lr)?;
        if self.config.spectral_norm {
            let ecfg = self.embed_config();
            refresh_spectral_buffers(&mut self.ed, &ecfg)?;
        }
        Ok(loss)
    }

    /// One update of the SR network with the embedding network frozen.
    /// Returns the record (with `lcld = 0` and no wall time filled in).
    pub fn g_step(&mut self, batch: &Batch, precomputed: Option<(BatchTensor, SrCache)>) -> Result<StepRecord> {
        let scfg = self.sr_config();
        let (sr, cache) = match precomputed {
            Some(pc) => pc,
            None => sr_forward_cached(&self.sr, &scfg, &batch.lr)?,
        };
        if sr.dim() != batch.hr.dim() {
            return Err(Error::Dimension(format!("SR output {:?} vs HR {:?}", sr.dim(), batch.hr.dim())));
        }
        let l1 = l1_loss(&sr, &batch.hr)?;
        let mut grad = l1_loss_grad(&sr, &batch.hr)?;
        let mut lcl = 0.0;
        if self.config.contrastive_active() {
            let ((anchors, ecache), pos, neg) = self.pyramids(&sr, batch)?;
            let (loss, tap_grads) = pcl_total_loss_grad(&anchors, &pos, &neg, self.config.tau, true)?;
            lcl = loss;
            let alpha = self.config.alpha;
            let tap_grads: Vec<BatchTensor> = tap_grads.expect("gradients requested").into_iter().map(|g| g * alpha).collect();
            let eg = EmbedGrad {
                taps: Some(&tap_grads),
                scores: None,
            };
            // input gradient only: the embedding parameters stay frozen here
            let (_, dx) = embed_backward(&self.ed, &self.embed_config(), &ecache, eg, false, true)?;
            grad += &self.config.transform.backward(&sr, &dx.expect("input gradient requested"))?;
        }
        let total = sr_total_loss(l1, lcl, &self.config.loss_weights());
        self.ensure_finite(batch, "SR losses (l1, lcl, total)", &[l1, lcl, total])?;
        let grads = sr_backward(&self.sr, &scfg, &cache, &grad)?;
        if !grads.all_finite() {
            self.ensure_finite(batch, "SR gradient", &[f64::NAN])?;
        }
        let lr = self.learning_rate();
        self.opt_g.update(&mut self.sr, &grads, lr)?;
        Ok(StepRecord {
            step: self.step,
            l1,
            lcl,
            lcld: 0.0,
            total,
            wall_ms: 0.0,
        })
    }

    /// `d_steps_per_g` discriminator updates, then one SR update, on one
    /// batch. The SR forward pass is shared since the SR network does not
    /// change in between.
    pub fn outer_step(&mut self, data: &TrainingSet) -> Result<(StepRecord, Batch)> {
        let t0 = Instant::now();
        let batch = self.sample_batch(data)?;
        let (sr, cache) = sr_forward_cached(&self.sr, &self.sr_config(), &batch.lr)?;
        let mut lcld = 0.0;
        match self.config.embedding_mode {
            EmbeddingMode::Learned => {
                for _ in 0..self.config.d_steps_per_g {
                    lcld = self.d_step(&batch, Some(&sr))?;
                }
            }
            EmbeddingMode::Frozen(_) if batch.len() >= 2 => {
                lcld = self.discriminator_pass(&batch.hr, &sr, false)?.0;
            }
            _ => {}
        }
        let mut rec = self.g_step(&batch, Some((sr, cache)))?;
        self.step += 1;
        rec.lcld = lcld;
        rec.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        Ok((rec, batch))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = ParameterSet::new();
        tensors.extend(self.sr.clone());
        tensors.extend(self.ed.clone());
        for (tag, opt) in [("g", &self.opt_g), ("d", &self.opt_d)] {
            for (name, t) in opt.m.iter() {
                tensors.insert(format!("opt.{tag}.m.{name}"), t.clone());
            }
            for (name, t) in opt.v.iter() {
                tensors.insert(format!("opt.{tag}.v.{name}"), t.clone());
            }
        }
        Ok(Checkpoint {
            step: self.step,
            config: serde_json::to_value(&self.config)?,
            rng: self.lanes.iter().map(RandomSource::state).collect(),
            counters: BTreeMap::from([
                ("opt.g.step".to_string(), self.opt_g.step),
                ("opt.d.step".to_string(), self.opt_d.step),
            ]),
            tensors,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(ck.config.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::from_checkpoint_with(ck, config)
    }

    /// Restores a run under `config`, which must describe the same networks
    /// and lane count as the stored one.
    pub fn from_checkpoint_with(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if ck.rng.len() != config.workers {
            return Err(Error::Config(format!(
                "checkpoint has {} data lanes, config asks for {}",
                ck.rng.len(),
                config.workers
            )));
        }
        let restore = |prefix: &str, opt_tag: &str| -> Result<(ParameterSet, Adam)> {
            let params = ck.tensors.subset(prefix);
            let mut m = ParameterSet::new();
            let mut v = ParameterSet::new();
            for name in params.names() {
                m.insert(name.clone(), ck.tensors.get(&format!("opt.{opt_tag}.m.{name}"))?.clone());
                v.insert(name.clone(), ck.tensors.get(&format!("opt.{opt_tag}.v.{name}"))?.clone());
            }
            let opt = Adam {
                config: config.adam(),
                step: ck.counter(&format!("opt.{opt_tag}.step"))?,
                m,
                v,
            };
            Ok((params, opt))
        };
        let (sr, opt_g) = restore("sr.", "g")?;
        let (ed, opt_d) = restore("ed.", "d")?;
        let fresh = TrainState::init(&TrainConfig {
            embedding_mode: EmbeddingMode::Off,
            ..config.clone()
        })?;
        check_layout("SR", &fresh.sr, &sr)?;
        check_layout("embedding", &fresh.ed, &ed)?;
        Ok(TrainState {
            config,
            step: ck.step,
            sr,
            ed,
            opt_g,
            opt_d,
            lanes: ck.rng.iter().map(RandomSource::from_state).collect(),
        })
    }
}

fn check_layout(what: &str, want: &ParameterSet, got: &ParameterSet) -> Result<()> {
    let same = want.len() == got.len()
        && want
            .iter()
            .all(|(n, t)| got.get(n).map(|g| g.shape() == t.shape()).unwrap_or(false));
    if same {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} network in checkpoint does not match the configured architecture")))
    }
}

/// Embedding parameters of a finished run, for the frozen mode.
pub fn load_frozen_embedding(path: &Path, config: &TrainConfig) -> Result<ParameterSet> {
    let ck = Checkpoint::load(path)?;
    let ed = ck.tensors.subset("ed.");
    let mut rng = RandomSource::seed_from(0);
    check_layout("embedding", &init_embed_parameters(&config.embed_config(), &mut rng)?, &ed)?;
    Ok(ed)
}

/// Written to `config.snapshot.json` before the first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: TrainConfig,
    /// Training image name → content digest.
    pub dataset_checksums: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(config: &TrainConfig, data: &TrainingSet) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.clone(),
            dataset_checksums: data.checksums().into_iter().collect(),
        }
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<StepRecord>,
}

pub const SNAPSHOT_FILE: &str = "config.snapshot.json";
pub const LOG_FILE: &str = "log.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const FINAL_CHECKPOINT: &str = "final.bin";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Rows of an existing log up to (and excluding) `step`.
fn log_prefix(path: &Path, step: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < step)
        })
        .map(str::to_string)
        .collect())
}

/// Runs (or resumes) training up to `config.steps`, writing the manifest,
/// `log.csv`, `timing.csv`, periodic `ckpt_<step>.bin` and `final.bin`
/// into `run_dir`.
pub fn train(config: &TrainConfig, data: &TrainingSet, run_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut state = match resume {
        Some(p) => TrainState::from_checkpoint_with(&Checkpoint::load(p)?, config.clone())?,
        None => TrainState::init(config)?,
    };
    let manifest = RunManifest::new(config, data);
    write_file(&run_dir.join(SNAPSHOT_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;

    let log_path = run_dir.join(LOG_FILE);
    let timing_path = run_dir.join(TIMING_FILE);
    let mut log_rows = log_prefix(&log_path, state.step)?;
    let mut timing_rows = log_prefix(&timing_path, state.step)?;
    let open = |path: &Path, header: &str, rows: &[String]| -> Result<std::io::BufWriter<std::fs::File>> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
        for r in rows {
            writeln!(w, "{r}").map_err(|e| Error::io(path, e))?;
        }
        Ok(w)
    };
    let mut log = open(&log_path, StepRecord::CSV_HEADER, &log_rows)?;
    let mut timing = open(&timing_path, "step,wall_ms", &timing_rows)?;
    log_rows.clear();
    timing_rows.clear();

    let mut records = Vec::new();
    while state.step < config.steps {
        let rec = match state.outer_step(data) {
            Ok((rec, _)) => rec,
            Err(e @ Error::NonFinite(_)) => {
                let dump = serde_json::json!({ "step": state.step, "error": e.to_string() });
                let _ = log.flush();
                write_file(&run_dir.join("abort_dump.json"), serde_json::to_string_pretty(&dump)? + "\n")?;
                log::error!("aborting: {e}");
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(log, "{}", rec.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        writeln!(timing, "{},{:.3}", rec.step, rec.wall_ms).map_err(|e| Error::io(&timing_path, e))?;
        if rec.step % 100 == 0 {
            log::info!("step {} l1 {:.5} lcl {:.5} lcld {:.5} ({:.0} ms)", rec.step, rec.l1, rec.lcl, rec.lcld, rec.wall_ms);
        }
        records.push(rec);
        if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 && state.step < config.steps {
            state.to_checkpoint()?.save(&run_dir.join(format!("ckpt_{}.bin", state.step)))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    timing.flush().map_err(|e| Error::io(&timing_path, e))?;
    state.to_checkpoint()?.save(&run_dir.join(FINAL_CHECKPOINT))?;
    Ok(TrainOutcome { state, records })
}

/// Super-resolves a single image with the given SR parameters.
pub fn upscale_image(sr: &ParameterSet, cfg: &SrBackboneConfig, lr: &Image) -> Result<Image> {
    let out = sr_forward(sr, cfg, &batch_from_images(std::slice::from_ref(lr))?)?;
    Ok(crate::tensor::image_from_batch(&out, 0))
}
