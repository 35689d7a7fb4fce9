//! Batched read-only encoder passes over image lists.

use std::thread;

use crate::data::{preprocess, LabeledImage};
use crate::encoder::{encode_image, hidden_before_block, pooled_feature, EncoderWeights};
use crate::error::Result;
use crate::lora::LoraSet;
use crate::tensor::Tensor;

/// Vectors with their class labels, in input order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Embeddings {
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

fn worker_count(n: usize) -> usize {
    thread::available_parallelism().map_or(1, |p| p.get()).min(n).max(1)
}

/// `f` over `items` on scoped threads; output order follows input order.
pub fn par_map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    let workers = worker_count(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Unit-norm embeddings of preprocessed `images`.
pub fn embed_images(weights: &EncoderWeights, lora: Option<&LoraSet>, images: &[LabeledImage]) -> Result<Embeddings> {
    embed_raw(weights, lora, &images.iter().map(preprocess).collect::<Vec<_>>())
}

/// Unit-norm embeddings of `images` as given (no preprocessing).
pub fn embed_raw(weights: &EncoderWeights, lora: Option<&LoraSet>, images: &[LabeledImage]) -> Result<Embeddings> {
    let vectors = par_map(images, |img| Ok(encode_image(weights, lora, &img.pixels)?.into_data()))?;
    Ok(Embeddings {
        vectors,
        labels: images.iter().map(|i| i.class_id).collect(),
    })
}

/// Pooled features of `images` as given.
pub fn pooled_raw(weights: &EncoderWeights, lora: Option<&LoraSet>, images: &[LabeledImage]) -> Result<Embeddings> {
    let vectors = par_map(images, |img| Ok(pooled_feature(weights, lora, &img.pixels)?.into_data()))?;
    Ok(Embeddings {
        vectors,
        labels: images.iter().map(|i| i.class_id).collect(),
    })
}

/// Token states entering `block` for each image as given.
pub fn hidden_states(weights: &EncoderWeights, images: &[LabeledImage], block: usize) -> Result<Vec<Tensor>> {
    par_map(images, |img| hidden_before_block(weights, &img.pixels, block))
}
