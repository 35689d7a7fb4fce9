//! Image pools, N-shot episodes, batch samplers, augmentation, synthetic
//! data and manifest ingestion.

pub mod augment;
pub mod manifest;
pub mod ppm;
pub mod sampler;
pub mod synth;

use std::collections::HashSet;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::{SeedTree, Stream};
use crate::tensor::Tensor;

pub use augment::{augment, preprocess, AugmentLevel};
pub use manifest::{load_manifest, write_dataset};
pub use sampler::{random_batches, stratified_batches, BatchPlan, SamplerKind};
pub use synth::{synth_dataset, synth_dataset_with, SynthConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[3 x H x W]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub class_id: usize,
    pub source_id: String,
}

/// Labeled images split into the original train and validation parts.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    /// Class names indexed by dense class id.
    pub class_names: Vec<String>,
    pub image_size: usize,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Keeps only `classes` (by old id), renumbering them densely in the
    /// given order.
    pub fn restrict_classes(&self, classes: &[usize]) -> Dataset {
        let remap = |img: &LabeledImage| {
            classes.iter().position(|&c| c == img.class_id).map(|new| LabeledImage {
                class_id: new,
                ..img.clone()
            })
        };
        Dataset {
            train: self.train.iter().filter_map(remap).collect(),
            val: self.val.iter().filter_map(remap).collect(),
            class_names: classes.iter().map(|&c| self.class_names[c].clone()).collect(),
            image_size: self.image_size,
        }
    }
}

/// Images grouped by class id, in dataset order within each class.
#[derive(Clone, Debug, Default)]
pub struct Pool {
    pub by_class: Vec<Vec<LabeledImage>>,
}

impl Pool {
    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    /// Smallest per-class count.
    pub fn depth(&self) -> usize {
        self.by_class.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.by_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All images, class by class.
    pub fn flatten(&self) -> Vec<LabeledImage> {
        self.by_class.iter().flatten().cloned().collect()
    }
}

fn first_k(images: &[LabeledImage], names: &[String], k: usize, split: &str) -> Result<Pool> {
    let mut by_class: Vec<Vec<LabeledImage>> = vec![Vec::new(); names.len()];
    for img in images {
        let slot = by_class
            .get_mut(img.class_id)
            .ok_or_else(|| Error::data(format!("image '{}' has unknown class {}", img.source_id, img.class_id)))?;
        if slot.len() < k {
            slot.push(img.clone());
        }
    }
    for (c, imgs) in by_class.iter().enumerate() {
        if imgs.len() < k {
            return Err(Error::data(format!(
                "class '{}' has {} {split} images, need {k}",
                names[c],
                imgs.len()
            )));
        }
    }
    Ok(Pool { by_class })
}

/// First `per_class` train images and first `per_class` validation images
/// of every class.
pub fn build_pools(dataset: &Dataset, per_class: usize) -> Result<(Pool, Pool)> {
    if per_class == 0 {
        return Err(Error::config("per_class must be positive"));
    }
    let train = first_k(&dataset.train, &dataset.class_names, per_class, "train")?;
    let test = first_k(&dataset.val, &dataset.class_names, per_class, "val")?;
    Ok((train, test))
}

#[derive(Clone, Debug)]
pub struct Episode {
    /// `n_shot` images per class, class by class.
    pub support: Vec<LabeledImage>,
    /// The full test pool.
    pub query: Vec<LabeledImage>,
    pub n_shot: usize,
    pub class_ids: Vec<usize>,
}

impl Episode {
    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.class_id).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.class_id).collect()
    }

    pub fn support_ids(&self) -> HashSet<&str> {
        self.support.iter().map(|i| i.source_id.as_str()).collect()
    }
}

/// Draws `n_shot` train images per class uniformly without replacement.
/// Selected images keep their pool order.
pub fn sample_episode(train: &Pool, test: &Pool, n_shot: usize, seed: u64) -> Result<Episode> {
    if n_shot == 0 {
        return Err(Error::config("n_shot must be positive"));
    }
    if train.num_classes() != test.num_classes() {
        return Err(Error::data("train and test pools cover different classes"));
    }
    let mut rng = SeedTree::new(seed).rng(Stream::Episode);
    let mut support = Vec::with_capacity(n_shot * train.num_classes());
    for (c, imgs) in train.by_class.iter().enumerate() {
        if n_shot > imgs.len() {
            return Err(Error::data(format!(
                "n_shot {n_shot} exceeds the {} train images of class {c}",
                imgs.len()
            )));
        }
        let mut chosen = index::sample(&mut rng, imgs.len(), n_shot).into_vec();
        chosen.sort_unstable();
        support.extend(chosen.into_iter().map(|i| imgs[i].clone()));
    }
    let query = test.flatten();
    let ids: HashSet<&str> = support.iter().map(|i| i.source_id.as_str()).collect();
    if let Some(dup) = query.iter().find(|q| ids.contains(q.source_id.as_str())) {
        return Err(Error::data(format!("image '{}' is in both support and query", dup.source_id)));
    }
    Ok(Episode {
        support,
        query,
        n_shot,
        class_ids: (0..train.num_classes()).collect(),
    })
}
