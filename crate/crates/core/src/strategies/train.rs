//! Gradient-based strategies: a linear probe on frozen pooled features and
//! LoRA fine-tuning with a classification head and, for the hybrid
//! objective, a projection head trained with the contrastive loss.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use super::embed::{hidden_states, par_map, pooled_raw};
use super::metrics::{EpochMetrics, MetricsRecord, StepMetrics};
use crate::data::{augment, preprocess, random_batches, stratified_batches, AugmentLevel, Episode, LabeledImage, SamplerKind};
use crate::encoder::{pooled_feature, EncoderInput, EncoderWeights};
use crate::error::{Error, Result};
use crate::lora::{inject, LoraConfig, LoraSet};
use crate::objectives::{cross_entropy_smoothed, hybrid_loss, supcon_loss, ClassificationHead, ProjectionHead};
use crate::optim::{global_norm, AdamW, AdamWConfig};
use crate::rng::{Rng, SeedTree, Stream};
use crate::schedules::{lambda_at, lr_at, tau_at, LambdaShape, ScheduleSpec};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Strategy {
    Prototype,
    #[default]
    LinearProbe,
    LoraCe,
    LoraHybrid,
}

impl Strategy {
    pub fn uses_lora(self) -> bool {
        matches!(self, Strategy::LoraCe | Strategy::LoraHybrid)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Prototype => "prototype",
            Strategy::LinearProbe => "linear_probe",
            Strategy::LoraCe => "lora_ce",
            Strategy::LoraHybrid => "lora_hybrid",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prototype" => Ok(Strategy::Prototype),
            "linear_probe" => Ok(Strategy::LinearProbe),
            "lora_ce" => Ok(Strategy::LoraCe),
            "lora_hybrid" => Ok(Strategy::LoraHybrid),
            other => Err(Error::config(format!(
                "unknown strategy '{other}' (prototype|linear_probe|lora_ce|lora_hybrid)"
            ))),
        }
    }
}

/// Adam moves each weight by about the learning rate per step, so logit
/// movement grows with feature width. The reference rate was tuned for a
/// 1024-wide backbone; the 64-wide default encoder needs 16x on the heads to
/// cover the same distance in the same number of steps.
pub const DEFAULT_HEAD_LR_SCALE: f64 = 16.0;

/// Everything a training run needs besides the encoder and the episode.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub strategy: Strategy,
    pub n_shot: usize,
    pub epochs: usize,
    /// Random sampler batch size.
    pub batch_size: usize,
    pub sampler: SamplerKind,
    pub classes_per_batch: usize,
    pub instances_per_class: usize,
    pub label_smoothing: f64,
    /// Dropout on the classification head input.
    pub dropout: f64,
    pub weight_decay: f64,
    /// Head learning rate as a multiple of the scheduled rate; adapters use
    /// the scheduled rate itself.
    pub head_lr_scale: f64,
    /// Fraction of all steps spent in learning-rate warmup.
    pub warmup_fraction: f64,
    /// Rates, temperatures and contrastive weights; step counts are filled
    /// in from the batch plan.
    pub schedule: ScheduleSpec,
    /// Replaces the contrastive weight schedule with a constant.
    pub lambda_override: Option<f64>,
    /// Keep the anchor in its own contrastive denominator.
    pub include_self: bool,
    pub lora_rank: usize,
    /// `None` means `2 * lora_rank`.
    pub lora_alpha: Option<f64>,
    /// Number of trailing blocks whose MLP layers get adapters.
    pub lora_blocks: usize,
    pub lora_dropout: f64,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub augment: AugmentLevel,
    /// Evaluate on the query pool after every epoch.
    pub eval_every_epoch: bool,
    pub seed: u64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self::for_shot(Strategy::LinearProbe, 5)
    }
}

impl TrainRunConfig {
    /// Defaults for `strategy` at `n_shot`. Linear-probe regularization
    /// follows the per-shot table (small batches, heavy dropout and decay at
    /// low shot); LoRA uses rank 4 on the last 4 blocks up to 5 shots and
    /// rank 8 on the last 6 blocks above.
    pub fn for_shot(strategy: Strategy, n_shot: usize) -> Self {
        let low = n_shot <= 5;
        let (batch_size, dropout, weight_decay, label_smoothing) = match n_shot {
            0..=1 => (4, 0.5, 0.1, 0.2),
            2..=3 => (8, 0.4, 0.1, 0.2),
            4..=5 => (8, 0.3, 0.1, 0.2),
            6..=10 => (16, 0.2, 0.05, 0.1),
            _ => (32, 0.2, 0.05, 0.1),
        };
        let mut cfg = Self {
            strategy,
            n_shot,
            epochs: 15,
            batch_size,
            sampler: SamplerKind::Random,
            classes_per_batch: 8,
            instances_per_class: if low { 3 } else { 4 },
            label_smoothing,
            dropout,
            weight_decay,
            head_lr_scale: DEFAULT_HEAD_LR_SCALE,
            warmup_fraction: 0.1,
            schedule: ScheduleSpec::default(),
            lambda_override: None,
            include_self: false,
            lora_rank: if low { 4 } else { 8 },
            lora_alpha: None,
            lora_blocks: if low { 4 } else { 6 },
            lora_dropout: 0.1,
            proj_hidden: 256,
            proj_dim: if low { 128 } else { 256 },
            augment: AugmentLevel::None,
            eval_every_epoch: false,
            seed: 0,
        };
        match strategy {
            Strategy::LoraCe => {
                cfg.epochs = if low { 15 } else { 20 };
                cfg.batch_size = if low { 8 } else { 16 };
                cfg.dropout = 0.1;
                cfg.weight_decay = 0.05;
            }
            Strategy::LoraHybrid => {
                cfg.epochs = if low { 20 } else { 30 };
                cfg.sampler = SamplerKind::Stratified;
                cfg.dropout = 0.1;
                cfg.weight_decay = 0.05;
            }
            Strategy::Prototype | Strategy::LinearProbe => {}
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy == Strategy::Prototype {
            return Err(Error::config("prototype strategy has no training loop"));
        }
        if self.strategy == Strategy::LoraHybrid && self.sampler != SamplerKind::Stratified {
            return Err(Error::config(
                "lora_hybrid requires sampler=stratified so every batch has contrastive positives",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..=0.5).contains(&self.label_smoothing) {
            return Err(Error::config(format!("label_smoothing {} outside [0, 0.5]", self.label_smoothing)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(self.head_lr_scale > 0.0 && self.head_lr_scale.is_finite()) {
            return Err(Error::config("head_lr_scale must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction must be in [0, 1)"));
        }
        if self.lambda_override.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::config("lambda override must be non-negative"));
        }
        if self.proj_hidden == 0 || self.proj_dim == 0 {
            return Err(Error::config("projection head sizes must be positive"));
        }
        let mut probe = self.schedule.clone();
        probe.total_steps = 10;
        probe.warmup_steps = 0;
        probe.validate()
    }

    pub fn lora_config(&self, num_blocks: usize) -> Result<LoraConfig> {
        if self.lora_blocks == 0 || self.lora_blocks > num_blocks {
            return Err(Error::config(format!(
                "lora_blocks {} must be in 1..={num_blocks}",
                self.lora_blocks
            )));
        }
        let mut c = LoraConfig::last_blocks(num_blocks, self.lora_blocks, self.lora_rank);
        if let Some(a) = self.lora_alpha {
            c.alpha = a;
        }
        c.dropout = self.lora_dropout;
        c.init_seed = SeedTree::new(self.seed).child(3).value();
        Ok(c)
    }
}

/// Trained parameters produced by a run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: MetricsRecord,
    pub lora: Option<LoraSet>,
    pub head: ClassificationHead,
    pub proj: Option<ProjectionHead>,
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Precomputed encoder states for a fixed image list, reused across
/// evaluations.
enum FeatureCache {
    /// Pooled features (no adapters).
    Pooled(Vec<Tensor>),
    /// Token states entering `start`.
    Hidden { states: Vec<Tensor>, start: usize },
}

impl FeatureCache {
    fn build(weights: &EncoderWeights, images: &[LabeledImage], lora: Option<&LoraSet>) -> Result<Self> {
        match lora.and_then(LoraSet::first_adapted_block) {
            Some(start) => Ok(FeatureCache::Hidden {
                states: hidden_states(weights, images, start)?,
                start,
            }),
            None => {
                let emb = pooled_raw(weights, None, images)?;
                Ok(FeatureCache::Pooled(
                    emb.vectors.into_iter().map(Tensor::vector).collect(),
                ))
            }
        }
    }

    /// Pooled features `[1 x d]` on `g` for entry `i`.
    fn feature(
        &self,
        g: &mut Graph,
        enc: &crate::encoder::BoundEncoder,
        lora: Option<&crate::lora::BoundLora>,
        i: usize,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        match self {
            FeatureCache::Pooled(f) => {
                let t = f[i].detached();
                let n = t.numel();
                Ok(g.constant(t.reshape(vec![1, n])?))
            }
            FeatureCache::Hidden { states, start } => enc.pooled(
                g,
                EncoderInput::Hidden {
                    tokens: &states[i],
                    start_block: *start,
                },
                lora,
                rng,
            ),
        }
    }

    fn len(&self) -> usize {
        match self {
            FeatureCache::Pooled(f) => f.len(),
            FeatureCache::Hidden { states, .. } => states.len(),
        }
    }
}

/// Query-pool evaluator with the frozen part of the encoder cached.
pub struct Evaluator<'a> {
    weights: &'a EncoderWeights,
    cache: FeatureCache,
    labels: Vec<usize>,
}

impl<'a> Evaluator<'a> {
    /// Caches preprocessed `images` up to the first block adapted by `lora`.
    pub fn new(weights: &'a EncoderWeights, images: &[LabeledImage], lora: Option<&LoraSet>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::data("empty query pool"));
        }
        let pre: Vec<LabeledImage> = images.iter().map(preprocess).collect();
        Ok(Self {
            weights,
            cache: FeatureCache::build(weights, &pre, lora)?,
            labels: images.iter().map(|i| i.class_id).collect(),
        })
    }

    /// Predicted classes with the given adapters and head.
    pub fn predict(&self, lora: Option<&LoraSet>, head: &ClassificationHead) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..self.cache.len()).collect();
        par_map(&idx, |&i| {
            let mut g = Graph::new();
            let enc = self.weights.bind(&mut g);
            let bl = lora.map(|l| l.bind(&mut g));
            let feat = self.cache.feature(&mut g, &enc, bl.as_ref(), i, None)?;
            let h = head.bind(&mut g);
            let logits = h.forward(&mut g, feat, None)?;
            Ok(argmax(g.data(logits)))
        })
    }

    pub fn accuracy(&self, lora: Option<&LoraSet>, head: &ClassificationHead) -> Result<f64> {
        let pred = self.predict(lora, head)?;
        let correct = pred.iter().zip(&self.labels).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / self.labels.len() as f64)
    }
}

/// Encoder, optional adapters and a classification head.
pub struct ModelBundle<'a> {
    pub weights: &'a EncoderWeights,
    pub lora: Option<&'a LoraSet>,
    pub head: &'a ClassificationHead,
}

/// Top-1 accuracy of `bundle` on `query` with deterministic preprocessing.
pub fn evaluate(bundle: &ModelBundle<'_>, query: &[LabeledImage]) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::data("empty query pool"));
    }
    let pred = par_map(query, |img| {
        let feat = pooled_feature(bundle.weights, bundle.lora, &preprocess(img).pixels)?;
        Ok(argmax(&bundle.head.logits(feat.data())?))
    })?;
    let correct = pred.iter().zip(query).filter(|(p, img)| **p == img.class_id).count();
    Ok(correct as f64 / query.len() as f64)
}

/// Step-by-step trainer shared by the linear probe and both LoRA
/// objectives.
pub struct Trainer<'a> {
    weights: &'a EncoderWeights,
    cfg: TrainRunConfig,
    support: Vec<LabeledImage>,
    /// Support features when augmentation is off.
    cache: Option<FeatureCache>,
    pub lora: Option<LoraSet>,
    pub head: ClassificationHead,
    pub proj: Option<ProjectionHead>,
    opt: AdamW,
    plans: Vec<Vec<Vec<usize>>>,
    spec: Option<ScheduleSpec>,
    step: usize,
    epoch: usize,
    batch: usize,
    aug_rng: Rng,
    drop_rng: Rng,
}

/// Values produced by one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub metrics: StepMetrics,
    pub correct: usize,
    pub batch_len: usize,
    /// True when this step finished an epoch.
    pub epoch_done: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(weights: &'a EncoderWeights, support: &[LabeledImage], num_classes: usize, cfg: &TrainRunConfig) -> Result<Self> {
        cfg.validate()?;
        if support.is_empty() {
            return Err(Error::data("empty support set"));
        }
        let root = SeedTree::new(cfg.seed);
        let lora = if cfg.strategy.uses_lora() {
            Some(inject(weights, &cfg.lora_config(weights.config.num_blocks)?)?)
        } else {
            None
        };
        let d = weights.config.embed_dim;
        let head = ClassificationHead::new(num_classes, d, cfg.dropout, &mut root.child(1).rng(Stream::Init));
        let proj = (cfg.strategy == Strategy::LoraHybrid)
            .then(|| ProjectionHead::new(d, cfg.proj_hidden, cfg.proj_dim, &mut root.child(2).rng(Stream::Init)));

        let labels: Vec<usize> = support.iter().map(|i| i.class_id).collect();
        let plans = (0..cfg.epochs)
            .map(|e| {
                let seed = root.child(100 + e as u64).value();
                let plan = match cfg.sampler {
                    SamplerKind::Random => random_batches(&labels, cfg.batch_size, seed)?,
                    SamplerKind::Stratified => {
                        let classes = cfg.classes_per_batch.min(num_classes);
                        stratified_batches(&labels, classes, cfg.instances_per_class, seed)?
                    }
                };
                Ok(plan.batches)
            })
            .collect::<Result<Vec<_>>>()?;
        let total: usize = plans.iter().map(Vec::len).sum();
        let spec = if total > 0 {
            let mut s = cfg.schedule.clone();
            s.total_steps = total;
            s.warmup_steps = ((cfg.warmup_fraction * total as f64).round() as usize).min(total - 1);
            s.validate()?;
            Some(s)
        } else {
            None
        };
        let cache = if cfg.augment == AugmentLevel::None {
            let pre: Vec<LabeledImage> = support.iter().map(preprocess).collect();
            Some(FeatureCache::build(weights, &pre, lora.as_ref())?)
        } else {
            None
        };
        Ok(Self {
            weights,
            cfg: cfg.clone(),
            support: support.to_vec(),
            cache,
            lora,
            head,
            proj,
            opt: AdamW::new(AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            }),
            plans,
            spec,
            step: 0,
            epoch: 0,
            batch: 0,
            aug_rng: root.rng(Stream::Augment),
            drop_rng: root.rng(Stream::Dropout),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.spec.as_ref().map_or(0, |s| s.total_steps)
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn trainable_param_count(&self) -> usize {
        self.trainable_params().iter().map(|t| t.numel()).sum()
    }

    /// Trainable tensors in optimizer order: adapters, classification
    /// head, projection head.
    pub fn trainable_params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        if let Some(l) = &self.lora {
            out.extend(l.params());
        }
        out.extend(self.head.params());
        if let Some(p) = &self.proj {
            out.extend(p.params());
        }
        out
    }

    fn trainable_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Some(l) = &mut self.lora {
            out.extend(l.params_mut());
        }
        out.extend(self.head.params_mut());
        if let Some(p) = &mut self.proj {
            out.extend(p.params_mut());
        }
        out
    }

    /// Learning rate, temperature and contrastive weight for step `s`. The
    /// learning rate is read one step ahead so the first update is not a
    /// zero-size warmup step.
    fn schedule_values(&self, s: usize) -> Result<(f64, f64, f64)> {
        let spec = self.spec.as_ref().ok_or_else(|| Error::config("no training steps"))?;
        let lr = lr_at(spec, s + 1)?;
        let tau = tau_at(spec, s)?;
        let lambda = match self.cfg.lambda_override {
            Some(l) => l,
            None => lambda_at(spec, s)?,
        };
        Ok((lr, tau, lambda))
    }

    /// Features `[n x d]` for the support indices in `batch`.
    fn batch_features(
        &mut self,
        g: &mut Graph,
        enc: &crate::encoder::BoundEncoder,
        lora: Option<&crate::lora::BoundLora>,
        batch: &[usize],
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(batch.len());
        match &self.cache {
            Some(cache) => {
                for &i in batch {
                    rows.push(cache.feature(g, enc, lora, i, Some(&mut self.drop_rng))?);
                }
            }
            None => {
                let imgs: Vec<LabeledImage> = batch
                    .iter()
                    .map(|&i| augment(&self.support[i], self.cfg.augment, &mut self.aug_rng))
                    .collect();
                let cache = FeatureCache::build(self.weights, &imgs, self.lora.as_ref())?;
                for k in 0..imgs.len() {
                    rows.push(cache.feature(g, enc, lora, k, Some(&mut self.drop_rng))?);
                }
            }
        }
        g.concat_rows(&rows)
    }

    /// Runs one optimizer step on the next planned batch.
    pub fn step(&mut self) -> Result<StepOutput> {
        if self.is_done() {
            return Err(Error::config("training already finished"));
        }
        let s = self.step;
        let (lr, tau, lambda) = self.schedule_values(s)?;
        let batch = self.plans[self.epoch][self.batch].clone();
        let labels: Vec<usize> = batch.iter().map(|&i| self.support[i].class_id).collect();

        let mut g = Graph::new();
        let enc = self.weights.bind(&mut g);
        let bl = self.lora.as_ref().map(|l| l.bind(&mut g));
        let head = self.head.bind(&mut g);
        let proj = self.proj.as_ref().map(|p| p.bind(&mut g));
        let feats = self.batch_features(&mut g, &enc, bl.as_ref(), &batch)?;

        let logits = head.forward(&mut g, feats, Some(&mut self.drop_rng))?;
        let ce = cross_entropy_smoothed(&mut g, logits, &labels, self.cfg.label_smoothing)?;
        let (loss, supcon) = match &proj {
            Some(p) => {
                let z = p.forward(&mut g, feats)?;
                let sc = supcon_loss(&mut g, z, &labels, tau, self.cfg.include_self)?;
                (hybrid_loss(&mut g, ce, sc, lambda)?, Some(g.value(sc).item()))
            }
            None => (ce, None),
        };
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { step: s, lr, tau, lambda });
        }
        g.backward(loss)?;

        let mut vars: Vec<Var> = Vec::new();
        if let Some(l) = &bl {
            vars.extend(l.vars());
        }
        vars.extend([head.weight, head.bias]);
        if let Some(p) = &proj {
            vars.extend([p.w1, p.b1, p.w2, p.b2]);
        }
        let grads: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec))
            .collect();
        let grad_norm = global_norm(&grads);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step: s, lr, tau, lambda });
        }
        let correct = (0..labels.len())
            .filter(|&r| argmax(g.value(logits).row(r)) == labels[r])
            .count();
        let ce_value = g.value(ce).item();
        drop(g);

        let mut opt = std::mem::replace(&mut self.opt, AdamW::new(AdamWConfig::default()));
        let n_adapter = self.lora.as_ref().map_or(0, |l| l.params().len());
        let lrs: Vec<f64> = (0..grads.len())
            .map(|k| if k < n_adapter { lr } else { lr * self.cfg.head_lr_scale })
            .collect();
        let res = opt.step_with_rates(self.trainable_params_mut(), &grads, &lrs);
        self.opt = opt;
        res?;

        let epoch = self.epoch;
        self.step += 1;
        self.batch += 1;
        let epoch_done = self.batch == self.plans[self.epoch].len();
        if epoch_done {
            self.batch = 0;
            self.epoch += 1;
        }
        Ok(StepOutput {
            metrics: StepMetrics {
                step: s,
                epoch,
                loss: loss_value,
                ce: ce_value,
                supcon,
                lr,
                tau,
                lambda,
                grad_norm,
            },
            correct,
            batch_len: labels.len(),
            epoch_done,
        })
    }

    /// Trains to completion, evaluating on `evaluator` before training, at
    /// the end, and after each epoch if configured.
    pub fn run(mut self, evaluator: &Evaluator<'_>) -> Result<TrainOutcome> {
        let start = Instant::now();
        let mut record = MetricsRecord::new(&self.cfg.strategy.to_string(), self.cfg.n_shot);
        record.encoder_checksum_before = self.weights.checksum();
        record.trainable_params = self.trainable_param_count();
        record.initial_accuracy = Some(evaluator.accuracy(self.lora.as_ref(), &self.head)?);

        let (mut loss_sum, mut norm_sum, mut correct, mut seen, mut n_steps) = (0.0, 0.0, 0, 0, 0);
        while !self.is_done() {
            let out = self.step()?;
            loss_sum += out.metrics.loss;
            norm_sum += out.metrics.grad_norm;
            correct += out.correct;
            seen += out.batch_len;
            n_steps += 1;
            if out.epoch_done {
                let test_acc = if self.cfg.eval_every_epoch {
                    Some(evaluator.accuracy(self.lora.as_ref(), &self.head)?)
                } else {
                    None
                };
                record.epochs.push(EpochMetrics {
                    epoch: out.metrics.epoch,
                    train_loss: loss_sum / n_steps as f64,
                    train_acc: correct as f64 / seen as f64,
                    test_acc,
                    lr: out.metrics.lr,
                    tau: out.metrics.tau,
                    lambda: out.metrics.lambda,
                    grad_norm: norm_sum / n_steps as f64,
                });
                (loss_sum, norm_sum, correct, seen, n_steps) = (0.0, 0.0, 0, 0, 0);
            }
            record.steps.push(out.metrics);
        }
        record.final_accuracy = match (record.epochs.last(), self.cfg.eval_every_epoch) {
            (Some(EpochMetrics { test_acc: Some(a), .. }), true) => *a,
            _ => evaluator.accuracy(self.lora.as_ref(), &self.head)?,
        };
        record.encoder_checksum_after = self.weights.checksum();
        record.wall_time_secs = start.elapsed().as_secs_f64();
        Ok(TrainOutcome {
            metrics: record,
            lora: self.lora,
            head: self.head,
            proj: self.proj,
        })
    }
}

fn check_strategy(cfg: &TrainRunConfig, allowed: &[Strategy]) -> Result<()> {
    if !allowed.contains(&cfg.strategy) {
        return Err(Error::config(format!("strategy {} not valid here", cfg.strategy)));
    }
    Ok(())
}

/// Trains a classification head on frozen pooled features.
pub fn run_linear_probe(weights: &EncoderWeights, episode: &Episode, cfg: &TrainRunConfig) -> Result<TrainOutcome> {
    check_strategy(cfg, &[Strategy::LinearProbe])?;
    let evaluator = Evaluator::new(weights, &episode.query, None)?;
    Trainer::new(weights, &episode.support, episode.num_classes(), cfg)?.run(&evaluator)
}

/// Trains LoRA adapters and heads with `lora_ce` or `lora_hybrid`.
pub fn run_lora(weights: &EncoderWeights, episode: &Episode, cfg: &TrainRunConfig) -> Result<TrainOutcome> {
    check_strategy(cfg, &[Strategy::LoraCe, Strategy::LoraHybrid])?;
    let trainer = Trainer::new(weights, &episode.support, episode.num_classes(), cfg)?;
    let evaluator = Evaluator::new(weights, &episode.query, trainer.lora.as_ref())?;
    trainer.run(&evaluator)
}

/// Dispatches on `cfg.strategy` for the trained strategies.
pub fn run_training(weights: &EncoderWeights, episode: &Episode, cfg: &TrainRunConfig) -> Result<TrainOutcome> {
    match cfg.strategy {
        Strategy::LinearProbe => run_linear_probe(weights, episode, cfg),
        Strategy::LoraCe | Strategy::LoraHybrid => run_lora(weights, episode, cfg),
        Strategy::Prototype => Err(Error::config("prototype strategy has no training loop")),
    }
}

/// Label of the lambda shape actually used, for metadata.
pub fn lambda_shape_label(cfg: &TrainRunConfig) -> String {
    match cfg.lambda_override {
        Some(l) => format!("constant({l})"),
        None => match cfg.schedule.lambda_shape {
            LambdaShape::Ramp => "ramp".into(),
            LambdaShape::Triangular => "triangular".into(),
        },
    }
}
