//! Low-rank adapters on the encoder's MLP layers.
//!
//! For a frozen layer `W0` stored `[d x k]` (input width `d`, output `k`)
//! the adapted layer computes `W0 x + s * B (A x)` with `A: [r x d]`,
//! `B: [k x r]` and `s = alpha / r`. `B` starts at zero, so a fresh adapter
//! leaves the encoder's output unchanged.

use rand::Rng as _;

use crate::checkpoint::Checkpoint;
use crate::encoder::{EncoderWeights, Linear, INIT_STD};
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedTree, Stream};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    /// Numerator of the `alpha / rank` scaling.
    pub alpha: f64,
    /// Substrings selecting adaptable layers, e.g. `block.6.mlp.c_fc`.
    pub targets: Vec<String>,
    /// Dropout on the adapter input, training only.
    pub dropout: f64,
    pub init_seed: u64,
}

impl LoraConfig {
    /// `mlp.c_fc` and `mlp.c_proj` of the last `n_blocks` of a
    /// `num_blocks`-deep encoder, with `alpha = 2 * rank`.
    pub fn last_blocks(num_blocks: usize, n_blocks: usize, rank: usize) -> Self {
        let first = num_blocks.saturating_sub(n_blocks);
        let targets = (first..num_blocks)
            .flat_map(|i| [format!("block.{i}.mlp.c_fc"), format!("block.{i}.mlp.c_proj")])
            .collect();
        Self {
            rank,
            alpha: 2.0 * rank as f64,
            targets,
            dropout: 0.1,
            init_seed: 0,
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub layer_name: String,
    /// Frozen copy of the base weight `[d x k]`.
    pub base: Tensor,
    /// `[r x d]`, trainable.
    pub a: Tensor,
    /// `[k x r]`, trainable.
    pub b: Tensor,
    pub scaling: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn new(layer_name: impl Into<String>, base: &Tensor, rank: usize, alpha: f64, dropout: f64, rng: &mut Rng) -> Self {
        let (d, k) = (base.shape()[0], base.shape()[1]);
        Self {
            layer_name: layer_name.into(),
            base: base.detached(),
            a: Tensor::randn(vec![rank, d], INIT_STD, rng).with_requires_grad(true),
            b: Tensor::zeros(vec![k, rank]).with_requires_grad(true),
            scaling: alpha / rank as f64,
            dropout,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.base.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.base.shape()[1]
    }

    pub fn trainable_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `W0 x + s * B (A drop(x))`. Dropout is applied only when `rng` is
    /// given (training).
    pub fn forward(&self, x: &[f64], rng: Option<&mut Rng>) -> Result<Vec<f64>> {
        let (d, k, r) = (self.in_dim(), self.out_dim(), self.rank());
        if x.len() != d {
            return Err(Error::shape("lora_forward", &[x.len()], &[d]));
        }
        let w0 = self.base.data();
        let mut out = vec![0.0; k];
        for (i, xi) in x.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += xi * w0[i * k + j];
            }
        }
        let dropped: Vec<f64> = match rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                x.iter()
                    .map(|v| if rng.random::<f64>() < keep { v / keep } else { 0.0 })
                    .collect()
            }
            _ => x.to_vec(),
        };
        let (a, b) = (self.a.data(), self.b.data());
        let ax: Vec<f64> = (0..r)
            .map(|p| (0..d).map(|i| a[p * d + i] * dropped[i]).sum())
            .collect();
        for (j, o) in out.iter_mut().enumerate() {
            let bax: f64 = (0..r).map(|p| b[j * r + p] * ax[p]).sum();
            *o += self.scaling * bax;
        }
        Ok(out)
    }

    /// `s * (B A)^T` in the base weight's `[d x k]` layout.
    pub fn delta_weight(&self) -> Tensor {
        let (d, k, r) = (self.in_dim(), self.out_dim(), self.rank());
        let (a, b) = (self.a.data(), self.b.data());
        let mut out = vec![0.0; d * k];
        for i in 0..d {
            for j in 0..k {
                let s: f64 = (0..r).map(|p| b[j * r + p] * a[p * d + i]).sum();
                out[i * k + j] = self.scaling * s;
            }
        }
        Tensor::matrix(d, k, out).expect("delta shape")
    }

    /// Base weight with the low-rank update folded in.
    pub fn merge(&self) -> Tensor {
        let delta = self.delta_weight();
        let data = self.base.data().iter().zip(delta.data()).map(|(w, dw)| w + dw).collect();
        Tensor::new(self.base.shape().to_vec(), data).expect("merge shape")
    }
}

/// Adapters for one encoder, ordered by layer name as the encoder lists them.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet {
    pub config: LoraConfig,
    pub adapters: Vec<LoraAdapter>,
}

/// Builds one fresh adapter per layer selected by `config.targets`.
pub fn inject(weights: &EncoderWeights, config: &LoraConfig) -> Result<LoraSet> {
    if config.rank == 0 {
        return Err(Error::config("LoRA rank must be at least 1"));
    }
    if config.targets.is_empty() {
        return Err(Error::config("LoRA target list is empty"));
    }
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(Error::config(format!("LoRA dropout {} outside [0, 1)", config.dropout)));
    }
    let available = weights.adaptable_layers();
    let mut selected: Vec<String> = Vec::new();
    for target in &config.targets {
        let matches: Vec<&String> = available.iter().filter(|name| name.contains(target.as_str())).collect();
        if matches.is_empty() {
            return Err(Error::config(format!(
                "LoRA target '{target}' matches no layer; available: {}",
                available.join(", ")
            )));
        }
        for m in matches {
            if selected.contains(m) {
                return Err(Error::config(format!("duplicate LoRA adapter on layer '{m}'")));
            }
            selected.push(m.clone());
        }
    }
    let mut rng = SeedTree::new(config.init_seed).rng(Stream::Init);
    let mut adapters = Vec::new();
    for name in available.iter().filter(|n| selected.contains(n)) {
        let lin = weights.linear(name).expect("adaptable layer exists");
        let (d, k) = (lin.in_dim(), lin.out_dim());
        if 2 * config.rank > d.min(k) {
            return Err(Error::config(format!(
                "LoRA rank {} too large for layer '{name}' ({d}x{k}); need r <= min(d, k) / 2",
                config.rank
            )));
        }
        adapters.push(LoraAdapter::new(
            name.clone(),
            &lin.weight,
            config.rank,
            config.alpha,
            config.dropout,
            &mut rng,
        ));
    }
    Ok(LoraSet {
        config: config.clone(),
        adapters,
    })
}

fn block_index(layer: &str) -> Option<usize> {
    layer.strip_prefix("block.")?.split('.').next()?.parse().ok()
}

impl LoraSet {
    pub fn get(&self, layer: &str) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.layer_name == layer)
    }

    /// `sum r * (d + k)` over adapted layers.
    pub fn trainable_param_count(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::trainable_count).sum()
    }

    /// Lowest block index carrying an adapter.
    pub fn first_adapted_block(&self) -> Option<usize> {
        self.adapters.iter().filter_map(|a| block_index(&a.layer_name)).min()
    }

    /// Trainable tensors in a fixed order: `A, B` per adapter.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.adapters
            .iter_mut()
            .flat_map(|a| [&mut a.a, &mut a.b])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.adapters.iter().flat_map(|a| [&a.a, &a.b]).collect()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundLora {
        BoundLora {
            adapters: self
                .adapters
                .iter()
                .map(|a| BoundAdapter {
                    layer: a.layer_name.clone(),
                    a: g.param(&a.a),
                    b: g.param(&a.b),
                    scaling: a.scaling,
                    dropout: a.dropout,
                })
                .collect(),
        }
    }

    /// Copy of `weights` with every adapter folded into its base layer.
    pub fn merge_into(&self, weights: &EncoderWeights) -> Result<EncoderWeights> {
        let mut merged = weights.clone();
        for a in &self.adapters {
            let lin: &mut Linear = merged
                .linear_mut(&a.layer_name)
                .ok_or_else(|| Error::config(format!("no layer '{}'", a.layer_name)))?;
            if lin.weight.shape() != a.base.shape() {
                return Err(Error::shape("merge", lin.weight.shape(), a.base.shape()));
            }
            let delta = a.delta_weight();
            lin.weight
                .data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(w, dw)| *w += dw);
        }
        Ok(merged)
    }

    pub fn to_checkpoint(&self, prefix: &str, ckpt: &mut Checkpoint) {
        ckpt.insert_scalar(format!("{prefix}rank"), self.config.rank as f64);
        ckpt.insert_scalar(format!("{prefix}alpha"), self.config.alpha);
        ckpt.insert_scalar(format!("{prefix}dropout"), self.config.dropout);
        ckpt.insert_scalar(format!("{prefix}init_seed"), self.config.init_seed as f64);
        for a in &self.adapters {
            ckpt.insert(format!("{prefix}{}.A", a.layer_name), &a.a);
            ckpt.insert(format!("{prefix}{}.B", a.layer_name), &a.b);
        }
    }

    /// Rebuilds adapters for `weights` from entries under `prefix`.
    /// Returns `None` when the checkpoint holds no adapters.
    pub fn from_checkpoint(prefix: &str, ckpt: &Checkpoint, weights: &EncoderWeights) -> Result<Option<Self>> {
        if ckpt.get(&format!("{prefix}rank")).is_none() {
            return Ok(None);
        }
        let rank = ckpt.scalar(&format!("{prefix}rank"))? as usize;
        let alpha = ckpt.scalar(&format!("{prefix}alpha"))?;
        let dropout = ckpt.scalar(&format!("{prefix}dropout"))?;
        let init_seed = ckpt.scalar(&format!("{prefix}init_seed"))? as u64;
        let targets: Vec<String> = ckpt
            .names()
            .filter_map(|n| n.strip_prefix(prefix)?.strip_suffix(".A").map(str::to_string))
            .collect();
        let config = LoraConfig {
            rank,
            alpha,
            targets,
            dropout,
            init_seed,
        };
        let mut set = inject(weights, &config).map_err(|e| Error::data(format!("checkpoint adapters: {e}")))?;
        for a in &mut set.adapters {
            for (suffix, slot) in [("A", &mut a.a), ("B", &mut a.b)] {
                let t = ckpt.require(&format!("{prefix}{}.{suffix}", a.layer_name))?;
                if t.shape() != slot.shape() {
                    return Err(Error::shape("checkpoint adapter", t.shape(), slot.shape()));
                }
                *slot = t.detached().with_requires_grad(true);
            }
        }
        Ok(Some(set))
    }
}

pub struct BoundAdapter {
    layer: String,
    pub a: Var,
    pub b: Var,
    scaling: f64,
    dropout: f64,
}

impl BoundAdapter {
    /// `s * drop(x) A^T B^T` for row inputs `x: [n x d]`.
    pub fn delta(&self, g: &mut Graph, x: Var, rng: Option<&mut Rng>) -> Result<Var> {
        let input = match rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let shape = g.shape(x).to_vec();
                let n: usize = shape.iter().product();
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mask = g.constant(Tensor::new(shape, mask)?);
                g.mul(x, mask)?
            }
            _ => x,
        };
        let u = g.matmul_nt(input, self.a)?;
        let v = g.matmul_nt(u, self.b)?;
        Ok(g.scale(v, self.scaling))
    }
}

pub struct BoundLora {
    pub adapters: Vec<BoundAdapter>,
}

impl BoundLora {
    pub fn get(&self, layer: &str) -> Option<&BoundAdapter> {
        self.adapters.iter().find(|a| a.layer == layer)
    }

    /// `A, B` vars in the same order as [`LoraSet::params_mut`].
    pub fn vars(&self) -> Vec<Var> {
        self.adapters.iter().flat_map(|a| [a.a, a.b]).collect()
    }
}
