//! Optional warm start: a short supervised pass over every encoder weight
//! on a class set disjoint from the evaluation classes. The result is then
//! frozen like any other encoder.

use crate::data::{augment, random_batches, synth_dataset, AugmentLevel, LabeledImage};
use crate::encoder::{EncoderInput, EncoderWeights};
use crate::error::{Error, Result};
use crate::objectives::{cross_entropy_smoothed, ClassificationHead};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{SeedTree, Stream};
use crate::schedules::{lr_at, ScheduleSpec};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    /// Synthetic classes generated for [`warm_start`].
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak of a warmup-then-cosine schedule.
    pub lr: f64,
    pub augment: AugmentLevel,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            augment: AugmentLevel::Low,
            seed: 0,
        }
    }
}

/// Returns a copy of `weights` trained for classification of `images`.
/// Returns per-step losses alongside.
pub fn pretrain_encoder(
    weights: &EncoderWeights,
    images: &[LabeledImage],
    num_classes: usize,
    cfg: &PretrainConfig,
) -> Result<(EncoderWeights, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::data("pretraining set is empty"));
    }
    let root = SeedTree::new(cfg.seed);
    let mut enc = weights.clone();
    enc.set_requires_grad(true);
    let mut head = ClassificationHead::new(num_classes, enc.config.embed_dim, 0.0, &mut root.child(1).rng(Stream::Init));
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut aug_rng = root.rng(Stream::Augment);
    let labels: Vec<usize> = images.iter().map(|i| i.class_id).collect();
    let plans = (0..cfg.epochs)
        .map(|e| random_batches(&labels, cfg.batch_size, root.child(100 + e as u64).value()))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = plans.iter().map(|p| p.batches.len()).sum();
    if total < 2 {
        return Err(Error::config("pretraining needs at least 2 steps"));
    }
    let mut spec = ScheduleSpec::new(total, (total / 10).max(1));
    spec.lr_base = cfg.lr;
    let mut losses = Vec::with_capacity(total);
    for plan in &plans {
        for batch in &plan.batches {
            let mut g = Graph::new();
            let bound = enc.bind(&mut g);
            let bh = head.bind(&mut g);
            let mut rows = Vec::with_capacity(batch.len());
            for &i in batch {
                let img = augment(&images[i], cfg.augment, &mut aug_rng);
                rows.push(bound.pooled(&mut g, EncoderInput::Image(&img.pixels), None, None)?);
            }
            let feats = g.concat_rows(&rows)?;
            let logits = bh.forward(&mut g, feats, None)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy_smoothed(&mut g, logits, &y, 0.0)?;
            losses.push(g.value(loss).item());
            g.backward(loss)?;
            let mut vars = bound.vars();
            vars.extend([bh.weight, bh.bias]);
            let grads: Vec<Vec<f64>> = vars
                .iter()
                .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec))
                .collect();
            let mut params = enc.params_mut();
            params.extend(head.params_mut());
            opt.step(params, &grads, lr_at(&spec, losses.len())?)?;
        }
    }
    enc.set_requires_grad(false);
    Ok((enc, losses))
}

/// Pretrains on `cfg.classes` synthetic classes that come after the first
/// `eval_classes` ids, so none of them appears in evaluation.
pub fn warm_start(
    weights: &EncoderWeights,
    eval_classes: usize,
    cfg: &PretrainConfig,
) -> Result<(EncoderWeights, Vec<f64>)> {
    if cfg.classes < 2 {
        return Err(Error::config("warm start needs at least 2 classes"));
    }
    let ids: Vec<usize> = (eval_classes..eval_classes + cfg.classes).collect();
    let ds = synth_dataset(eval_classes + cfg.classes, 40, weights.config.image_size, cfg.seed)?.restrict_classes(&ids);
    pretrain_encoder(weights, &ds.train, cfg.classes, cfg)
}
