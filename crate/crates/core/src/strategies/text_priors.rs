//! Per-class template embeddings standing in for text-encoder outputs.
//!
//! * `File`: vectors imported from an `fslab-emb v1` file, e.g. prompt
//!   ensembles exported by an external text encoder.
//! * `HeldoutProxy`: embeddings of training-pool images that are not in the
//!   support set, `M` per class. They play the role of a semantic prior
//!   that is independent of the support images.
//! * `None`: no priors; only `alpha = 0` works.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::embed::embed_images;
use crate::data::{LabeledImage, Pool};
use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};

pub const EMB_MAGIC: &str = "fslab-emb v1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PriorMode {
    File,
    HeldoutProxy,
    #[default]
    None,
}

impl fmt::Display for PriorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorMode::File => "file",
            PriorMode::HeldoutProxy => "heldout-proxy",
            PriorMode::None => "none",
        })
    }
}

impl FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "file" => Ok(PriorMode::File),
            "heldout-proxy" | "heldout_proxy" => Ok(PriorMode::HeldoutProxy),
            "none" => Ok(PriorMode::None),
            other => Err(Error::config(format!("unknown text prior mode '{other}' (file|heldout-proxy|none)"))),
        }
    }
}

/// One row of an embedding file.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub class_id: usize,
    pub template_id: usize,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TextPriorProvider {
    pub mode: PriorMode,
    pub dim: usize,
    vectors: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl TextPriorProvider {
    pub fn none() -> Self {
        Self::default()
    }

    /// Empty provider in file mode, filled through [`Self::insert`].
    pub fn from_vectors(dim: usize) -> Self {
        Self {
            mode: PriorMode::File,
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, class_id: usize, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::data(format!(
                "text prior for class {class_id} has width {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        self.vectors.entry(class_id).or_default().push(vector);
        Ok(())
    }

    pub fn templates(&self, class_id: usize) -> Result<&[Vec<f64>]> {
        if self.mode == PriorMode::None {
            return Err(Error::data("no text priors configured (mode none)"));
        }
        self.vectors
            .get(&class_id)
            .map(Vec::as_slice)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::data(format!("no text prior for class {class_id}")))
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.len()
    }

    /// Fails unless every class in `0..num_classes` has at least one vector.
    pub fn check_coverage(&self, num_classes: usize) -> Result<()> {
        let missing: Vec<String> = (0..num_classes)
            .filter(|c| !self.vectors.contains_key(c))
            .map(|c| c.to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::data(format!("text priors missing classes: {}", missing.join(", "))))
        }
    }

    pub fn rows(&self) -> Vec<EmbeddingRow> {
        self.vectors
            .iter()
            .flat_map(|(&c, vs)| {
                vs.iter().enumerate().map(move |(t, v)| EmbeddingRow {
                    class_id: c,
                    template_id: t,
                    vector: v.clone(),
                })
            })
            .collect()
    }

    /// Reads an embedding file, checking width `dim` and coverage of
    /// `0..num_classes`.
    pub fn load(path: impl AsRef<Path>, dim: usize, num_classes: usize) -> Result<Self> {
        let (file_dim, rows) = read_embeddings(path)?;
        if file_dim != dim {
            return Err(Error::data(format!("embedding file has D={file_dim}, encoder produces D={dim}")));
        }
        let mut p = Self::from_vectors(dim);
        for r in rows {
            p.insert(r.class_id, r.vector)?;
        }
        p.check_coverage(num_classes)?;
        Ok(p)
    }

    /// Embeds up to `m` training-pool images per class that are not in
    /// `support`, in pool order.
    pub fn heldout_proxy(weights: &EncoderWeights, train: &Pool, support: &[LabeledImage], m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("heldout-proxy needs at least one image per class"));
        }
        let used: std::collections::HashSet<&str> = support.iter().map(|i| i.source_id.as_str()).collect();
        let mut chosen = Vec::new();
        for (c, imgs) in train.by_class.iter().enumerate() {
            let picked: Vec<LabeledImage> = imgs
                .iter()
                .filter(|i| !used.contains(i.source_id.as_str()))
                .take(m)
                .cloned()
                .collect();
            if picked.is_empty() {
                return Err(Error::data(format!("class {c} has no held-out images for text priors")));
            }
            chosen.extend(picked);
        }
        let emb = embed_images(weights, None, &chosen)?;
        let mut p = Self {
            mode: PriorMode::HeldoutProxy,
            dim: weights.config.output_dim,
            vectors: BTreeMap::new(),
        };
        for (v, y) in emb.vectors.into_iter().zip(emb.labels) {
            p.insert(y, v)?;
        }
        Ok(p)
    }
}

/// Writes the `fslab-emb v1` format; values use shortest round-trip
/// formatting.
pub fn write_embeddings(path: impl AsRef<Path>, dim: usize, rows: &[EmbeddingRow]) -> Result<()> {
    let mut out = format!("{EMB_MAGIC} D={dim}\n");
    for r in rows {
        if r.vector.len() != dim {
            return Err(Error::data(format!("row for class {} has width {}", r.class_id, r.vector.len())));
        }
        out.push_str(&format!("{},{}", r.class_id, r.template_id));
        for v in &r.vector {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<(usize, Vec<EmbeddingRow>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let dim: usize = header
        .strip_prefix(EMB_MAGIC)
        .and_then(|rest| rest.trim().strip_prefix("D="))
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| Error::data(format!("{}: expected header '{EMB_MAGIC} D=<dim>'", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| Error::data(format!("{}: line {}: {what}", path.display(), i + 2));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 2 {
            return Err(bad(&format!("expected {} fields, found {}", dim + 2, fields.len())));
        }
        let class_id = fields[0].parse().map_err(|_| bad("bad class_id"))?;
        let template_id = fields[1].parse().map_err(|_| bad("bad template_id"))?;
        let vector = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad("bad value")))
            .collect::<Result<Vec<_>>>()?;
        rows.push(EmbeddingRow {
            class_id,
            template_id,
            vector,
        });
    }
    Ok((dim, rows))
}
