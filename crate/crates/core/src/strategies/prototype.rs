//! Training-free classification by nearest class prototype, optionally
//! fused with per-class text priors.

use std::collections::BTreeMap;
use std::time::Instant;

use super::embed::{embed_images, Embeddings};
use super::metrics::MetricsRecord;
use super::text_priors::TextPriorProvider;
use crate::data::Episode;
use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::tensor::{dot, l2_normalize_vec};

/// Tolerance on prototype norms.
const UNIT_TOL: f64 = 1e-9;

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = dot(v, v).sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::Numeric {
            op: "prototype",
            detail: format!("{what} has norm {n}, expected 1"),
        });
    }
    Ok(())
}

fn normalized_mean(vectors: &[&[f64]], what: &'static str) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::data(format!("{what}: no vectors to average")))?;
    let mut mean = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != mean.len() {
            return Err(Error::shape(what, &[v.len()], &[mean.len()]));
        }
        mean.iter_mut().zip(v.iter()).for_each(|(m, x)| *m += x);
    }
    let n = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    l2_normalize_vec(&mean).map_err(|_| Error::DegenerateVector(what))
}

/// Normalized mean of unit-norm image embeddings.
pub fn visual_prototype(embeddings: &[&[f64]]) -> Result<Vec<f64>> {
    for e in embeddings {
        check_unit(e, "support embedding")?;
    }
    normalized_mean(embeddings, "visual prototype")
}

/// Normalized mean of the provider's template embeddings for `class_id`.
pub fn textual_prototype(provider: &TextPriorProvider, class_id: usize) -> Result<Vec<f64>> {
    let templates = provider.templates(class_id)?;
    let refs: Vec<&[f64]> = templates.iter().map(Vec::as_slice).collect();
    normalized_mean(&refs, "textual prototype")
}

/// `normalize((1 - alpha) p_img + alpha p_text)`.
pub fn hybrid_prototype(p_img: &[f64], p_text: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("fusion weight {alpha} outside [0, 1]")));
    }
    if p_img.len() != p_text.len() {
        return Err(Error::shape("hybrid prototype", &[p_img.len()], &[p_text.len()]));
    }
    check_unit(p_img, "visual prototype")?;
    check_unit(p_text, "textual prototype")?;
    // endpoints return the inputs untouched
    if alpha == 0.0 {
        return Ok(p_img.to_vec());
    }
    if alpha == 1.0 {
        return Ok(p_text.to_vec());
    }
    let mix: Vec<f64> = p_img.iter().zip(p_text).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect();
    l2_normalize_vec(&mix).map_err(|_| Error::DegenerateVector("hybrid prototype"))
}

/// Per-class prototypes used for classification.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub class_ids: Vec<usize>,
    pub image: Vec<Vec<f64>>,
    pub text: Option<Vec<Vec<f64>>>,
    pub hybrid: Vec<Vec<f64>>,
    pub alpha: f64,
}

impl PrototypeSet {
    /// Prototypes from labeled support embeddings, fused with `provider`
    /// when `alpha > 0`.
    pub fn build(
        support: &[Vec<f64>],
        labels: &[usize],
        provider: &TextPriorProvider,
        alpha: f64,
    ) -> Result<Self> {
        if support.len() != labels.len() {
            return Err(Error::shape("prototype support", &[support.len()], &[labels.len()]));
        }
        let mut by_class: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
        for (e, &y) in support.iter().zip(labels) {
            by_class.entry(y).or_default().push(e);
        }
        if by_class.is_empty() {
            return Err(Error::data("no support embeddings"));
        }
        let class_ids: Vec<usize> = by_class.keys().copied().collect();
        let image = by_class.values().map(|v| visual_prototype(v)).collect::<Result<Vec<_>>>()?;
        let text = if alpha > 0.0 {
            Some(class_ids.iter().map(|&c| textual_prototype(provider, c)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let hybrid = match &text {
            Some(t) => image
                .iter()
                .zip(t)
                .map(|(i, t)| hybrid_prototype(i, t, alpha))
                .collect::<Result<Vec<_>>>()?,
            None => image.clone(),
        };
        let set = Self {
            class_ids,
            image,
            text,
            hybrid,
            alpha,
        };
        for p in &set.hybrid {
            let n = dot(p, p).sqrt();
            debug_assert!((n - 1.0).abs() <= UNIT_TOL, "prototype norm {n}");
        }
        Ok(set)
    }
}

/// Class whose hybrid prototype has the highest cosine similarity with
/// `query`; ties go to the lowest class id.
pub fn classify_by_prototype(query: &[f64], prototypes: &PrototypeSet) -> Result<usize> {
    if prototypes.hybrid.is_empty() {
        return Err(Error::data("empty prototype set"));
    }
    let qn = dot(query, query).sqrt();
    let mut best: Option<(usize, f64)> = None;
    for (&c, p) in prototypes.class_ids.iter().zip(&prototypes.hybrid) {
        if p.len() != query.len() {
            return Err(Error::shape("classify_by_prototype", &[query.len()], &[p.len()]));
        }
        let sim = dot(query, p) / qn.max(f64::MIN_POSITIVE);
        match best {
            Some((bc, bs)) if sim < bs || (sim == bs && c > bc) => {}
            _ => best = Some((c, sim)),
        }
    }
    Ok(best.expect("non-empty").0)
}

/// Accuracy of prototype classification given precomputed embeddings.
pub fn prototype_accuracy(
    support: &Embeddings,
    query: &Embeddings,
    provider: &TextPriorProvider,
    alpha: f64,
) -> Result<f64> {
    if query.vectors.is_empty() {
        return Err(Error::data("empty query pool"));
    }
    let protos = PrototypeSet::build(&support.vectors, &support.labels, provider, alpha)?;
    let mut correct = 0usize;
    for (q, &y) in query.vectors.iter().zip(&query.labels) {
        if classify_by_prototype(q, &protos)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / query.vectors.len() as f64)
}

/// Builds prototypes from the episode's support set and classifies its
/// full query pool. No parameter is touched.
pub fn run_prototype_strategy(
    weights: &EncoderWeights,
    episode: &Episode,
    provider: &TextPriorProvider,
    alpha: f64,
) -> Result<MetricsRecord> {
    let start = Instant::now();
    let checksum = weights.checksum();
    let support = embed_images(weights, None, &episode.support)?;
    let query = embed_images(weights, None, &episode.query)?;
    let acc = prototype_accuracy(&support, &query, provider, alpha)?;
    let mut record = MetricsRecord::new("prototype", episode.n_shot);
    record.final_accuracy = acc;
    record.wall_time_secs = start.elapsed().as_secs_f64();
    record.encoder_checksum_before = checksum;
    record.encoder_checksum_after = weights.checksum();
    Ok(record)
}
