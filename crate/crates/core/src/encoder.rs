//! Miniature vision transformer used as the frozen image encoder.
//!
//! Pre-norm blocks (`x + attn(ln1(x))`, `x + mlp(ln2(x))`) with a CLS token,
//! learned position embeddings and an MLP made of `mlp.c_fc` / `mlp.c_proj`
//! linear layers. Linear weights are stored `[in x out]` and applied to row
//! vectors, so a layer maps `x[1 x d]` to `x W[d x k]`.

use rand::Rng as _;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lora::{BoundLora, LoraSet};
use crate::rng::{Rng, SeedTree, Stream};
use crate::tensor::{Graph, Tensor, Var, LAYER_NORM_EPS};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub output_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            num_blocks: 8,
            num_heads: 4,
            mlp_hidden: 256,
            output_dim: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("output_dim", self.output_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("encoder {name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Patches plus the CLS token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in x out]`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    fn init(rng: &mut Rng, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::randn(vec![d_in, d_out], INIT_STD, rng),
            bias: bias.then(|| Tensor::zeros(vec![d_out])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    fn new(width: usize) -> Self {
        Self {
            gain: Tensor::ones(vec![width]),
            bias: Tensor::zeros(vec![width]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ln2: LayerNormParams,
    pub c_fc: Linear,
    pub c_proj: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNormParams,
    /// `[embed_dim x output_dim]`, no bias.
    pub proj: Tensor,
}

/// Name of the first MLP linear layer in block `i`.
pub fn c_fc_name(i: usize) -> String {
    format!("block.{i}.mlp.c_fc")
}

pub fn c_proj_name(i: usize) -> String {
    format!("block.{i}.mlp.c_proj")
}

/// Deterministic initialization from `config.seed`.
pub fn init_encoder(config: &EncoderConfig) -> Result<EncoderWeights> {
    config.validate()?;
    let mut rng = SeedTree::new(config.seed).rng(Stream::Init);
    let d = config.embed_dim;
    let patch_embed = Linear::init(&mut rng, config.patch_dim(), d, true);
    let cls_token = Tensor::randn(vec![1, d], INIT_STD, &mut rng);
    let pos_embed = Tensor::randn(vec![config.num_tokens(), d], INIT_STD, &mut rng);
    let blocks = (0..config.num_blocks)
        .map(|_| Block {
            ln1: LayerNormParams::new(d),
            qkv: Linear::init(&mut rng, d, 3 * d, true),
            attn_out: Linear::init(&mut rng, d, d, true),
            ln2: LayerNormParams::new(d),
            c_fc: Linear::init(&mut rng, d, config.mlp_hidden, true),
            c_proj: Linear::init(&mut rng, config.mlp_hidden, d, true),
        })
        .collect();
    let proj = Tensor::randn(vec![d, config.output_dim], INIT_STD, &mut rng);
    Ok(EncoderWeights {
        config: config.clone(),
        patch_embed,
        cls_token,
        pos_embed,
        blocks,
        ln_final: LayerNormParams::new(d),
        proj,
    })
}

fn push_linear<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, l: &'a Linear) {
    out.push((format!("{name}.weight"), &l.weight));
    if let Some(b) = &l.bias {
        out.push((format!("{name}.bias"), b));
    }
}

fn push_ln<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, l: &'a LayerNormParams) {
    out.push((format!("{name}.weight"), &l.gain));
    out.push((format!("{name}.bias"), &l.bias));
}

impl EncoderWeights {
    /// All parameters with their stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_linear(&mut out, "patch_embed", &self.patch_embed);
        out.push(("cls_token".into(), &self.cls_token));
        out.push(("pos_embed".into(), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            push_ln(&mut out, &format!("block.{i}.ln1"), &b.ln1);
            push_linear(&mut out, &format!("block.{i}.attn.qkv"), &b.qkv);
            push_linear(&mut out, &format!("block.{i}.attn.out"), &b.attn_out);
            push_ln(&mut out, &format!("block.{i}.ln2"), &b.ln2);
            push_linear(&mut out, &c_fc_name(i), &b.c_fc);
            push_linear(&mut out, &c_proj_name(i), &b.c_proj);
        }
        push_ln(&mut out, "ln_final", &self.ln_final);
        out.push(("proj.weight".into(), &self.proj));
        out
    }

    /// Mutable parameter list in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        fn lin<'a>(out: &mut Vec<&'a mut Tensor>, l: &'a mut Linear) {
            out.push(&mut l.weight);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
        }
        lin(&mut out, &mut self.patch_embed);
        out.push(&mut self.cls_token);
        out.push(&mut self.pos_embed);
        for b in &mut self.blocks {
            out.push(&mut b.ln1.gain);
            out.push(&mut b.ln1.bias);
            lin(&mut out, &mut b.qkv);
            lin(&mut out, &mut b.attn_out);
            out.push(&mut b.ln2.gain);
            out.push(&mut b.ln2.bias);
            lin(&mut out, &mut b.c_fc);
            lin(&mut out, &mut b.c_proj);
        }
        out.push(&mut self.ln_final.gain);
        out.push(&mut self.ln_final.bias);
        out.push(&mut self.proj);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Names of the linear layers LoRA may target (MLP layers only).
    pub fn adaptable_layers(&self) -> Vec<String> {
        (0..self.blocks.len())
            .flat_map(|i| [c_fc_name(i), c_proj_name(i)])
            .collect()
    }

    pub fn linear(&self, layer_name: &str) -> Option<&Linear> {
        let rest = layer_name.strip_prefix("block.")?;
        let (idx, tail) = rest.split_once('.')?;
        let block = self.blocks.get(idx.parse::<usize>().ok()?)?;
        match tail {
            "mlp.c_fc" => Some(&block.c_fc),
            "mlp.c_proj" => Some(&block.c_proj),
            "attn.qkv" => Some(&block.qkv),
            "attn.out" => Some(&block.attn_out),
            _ => None,
        }
    }

    pub fn linear_mut(&mut self, layer_name: &str) -> Option<&mut Linear> {
        let rest = layer_name.strip_prefix("block.")?;
        let (idx, tail) = rest.split_once('.')?;
        let block = self.blocks.get_mut(idx.parse::<usize>().ok()?)?;
        match tail {
            "mlp.c_fc" => Some(&mut block.c_fc),
            "mlp.c_proj" => Some(&mut block.c_proj),
            "attn.qkv" => Some(&mut block.qkv),
            "attn.out" => Some(&mut block.attn_out),
            _ => None,
        }
    }

    /// FNV-1a over the bit patterns of every parameter. Used to check the
    /// freeze contract.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.named_params() {
            for byte in name.bytes().chain(t.data().iter().flat_map(|v| v.to_bits().to_le_bytes())) {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(requires_grad);
        }
    }

    pub fn to_checkpoint(&self, prefix: &str, ckpt: &mut Checkpoint) {
        let c = &self.config;
        for (k, v) in [
            ("image_size", c.image_size),
            ("patch_size", c.patch_size),
            ("embed_dim", c.embed_dim),
            ("num_blocks", c.num_blocks),
            ("num_heads", c.num_heads),
            ("mlp_hidden", c.mlp_hidden),
            ("output_dim", c.output_dim),
        ] {
            ckpt.insert_scalar(format!("{prefix}config.{k}"), v as f64);
        }
        ckpt.insert_scalar(format!("{prefix}config.seed"), c.seed as f64);
        for (name, t) in self.named_params() {
            ckpt.insert(format!("{prefix}{name}"), t);
        }
    }

    pub fn from_checkpoint(prefix: &str, ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| -> Result<usize> { Ok(ckpt.scalar(&format!("{prefix}config.{k}"))? as usize) };
        let config = EncoderConfig {
            image_size: get("image_size")?,
            patch_size: get("patch_size")?,
            embed_dim: get("embed_dim")?,
            num_blocks: get("num_blocks")?,
            num_heads: get("num_heads")?,
            mlp_hidden: get("mlp_hidden")?,
            output_dim: get("output_dim")?,
            seed: get("seed")? as u64,
        };
        config.validate().map_err(|e| Error::data(format!("checkpoint encoder config: {e}")))?;
        let mut weights = init_encoder(&config)?;
        let names: Vec<String> = weights.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(weights.params_mut()) {
            let t = ckpt.require(&format!("{prefix}{name}"))?;
            if t.shape() != slot.shape() {
                return Err(Error::shape("checkpoint", t.shape(), slot.shape()));
            }
            *slot = t.detached();
        }
        Ok(weights)
    }
}

/// Splits a `[3 x H x W]` image into a `[num_patches x 3*p*p]` matrix,
/// patches in raster order, each flattened channel-major.
pub fn patchify(config: &EncoderConfig, image: &Tensor) -> Result<Tensor> {
    let s = config.image_size;
    if image.shape() != [3, s, s] {
        return Err(Error::shape("encode_image", image.shape(), &[3, s, s]));
    }
    let p = config.patch_size;
    let grid = s / p;
    let px = image.data();
    let mut out = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..3 {
                for dy in 0..p {
                    let row = c * s * s + (gy * p + dy) * s + gx * p;
                    out.extend_from_slice(&px[row..row + p]);
                }
            }
        }
    }
    Tensor::matrix(config.num_patches(), config.patch_dim(), out)
}

pub struct BoundLinear {
    pub weight: Var,
    pub bias: Option<Var>,
}

struct BoundLn {
    gain: Var,
    bias: Var,
}

struct BoundBlock {
    ln1: BoundLn,
    qkv: BoundLinear,
    attn_out: BoundLinear,
    ln2: BoundLn,
    c_fc: BoundLinear,
    c_proj: BoundLinear,
}

/// Encoder parameters registered as leaves on a graph.
pub struct BoundEncoder {
    config: EncoderConfig,
    patch_embed: BoundLinear,
    cls_token: Var,
    pos_embed: Var,
    blocks: Vec<BoundBlock>,
    ln_final: BoundLn,
    proj: Var,
}

fn bind_linear(g: &mut Graph, l: &Linear) -> BoundLinear {
    BoundLinear {
        weight: g.param(&l.weight),
        bias: l.bias.as_ref().map(|b| g.param(b)),
    }
}

fn bind_ln(g: &mut Graph, l: &LayerNormParams) -> BoundLn {
    BoundLn {
        gain: g.param(&l.gain),
        bias: g.param(&l.bias),
    }
}

/// Where a forward pass starts.
pub enum EncoderInput<'a> {
    Image(&'a Tensor),
    /// Token states `[num_tokens x embed_dim]` entering block `start_block`.
    Hidden { tokens: &'a Tensor, start_block: usize },
}

impl EncoderWeights {
    pub fn bind(&self, g: &mut Graph) -> BoundEncoder {
        BoundEncoder {
            config: self.config.clone(),
            patch_embed: bind_linear(g, &self.patch_embed),
            cls_token: g.param(&self.cls_token),
            pos_embed: g.param(&self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    ln1: bind_ln(g, &b.ln1),
                    qkv: bind_linear(g, &b.qkv),
                    attn_out: bind_linear(g, &b.attn_out),
                    ln2: bind_ln(g, &b.ln2),
                    c_fc: bind_linear(g, &b.c_fc),
                    c_proj: bind_linear(g, &b.c_proj),
                })
                .collect(),
            ln_final: bind_ln(g, &self.ln_final),
            proj: g.param(&self.proj),
        }
    }
}

/// Applies `x W + b`, plus the low-rank path when `layer` is adapted.
pub fn apply_linear(
    g: &mut Graph,
    x: Var,
    lin: &BoundLinear,
    layer: &str,
    lora: Option<&BoundLora>,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    let mut y = g.matmul(x, lin.weight)?;
    if let Some(b) = lin.bias {
        y = g.add_row(y, b)?;
    }
    if let Some(adapter) = lora.and_then(|l| l.get(layer)) {
        let delta = adapter.delta(g, x, rng)?;
        y = g.add(y, delta)?;
    }
    Ok(y)
}

impl BoundEncoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Vars in the same order as [`EncoderWeights::params_mut`].
    pub fn vars(&self) -> Vec<Var> {
        fn lin(out: &mut Vec<Var>, l: &BoundLinear) {
            out.push(l.weight);
            out.extend(l.bias);
        }
        let mut out = Vec::new();
        lin(&mut out, &self.patch_embed);
        out.push(self.cls_token);
        out.push(self.pos_embed);
        for b in &self.blocks {
            out.extend([b.ln1.gain, b.ln1.bias]);
            lin(&mut out, &b.qkv);
            lin(&mut out, &b.attn_out);
            out.extend([b.ln2.gain, b.ln2.bias]);
            lin(&mut out, &b.c_fc);
            lin(&mut out, &b.c_proj);
        }
        out.extend([self.ln_final.gain, self.ln_final.bias, self.proj]);
        out
    }

    /// Patch embedding, CLS token and position embedding: `[T x d]`.
    pub fn tokens(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        let patches = g.constant(patchify(&self.config, image)?);
        let mut x = g.matmul(patches, self.patch_embed.weight)?;
        if let Some(b) = self.patch_embed.bias {
            x = g.add_row(x, b)?;
        }
        let x = g.concat_rows(&[self.cls_token, x])?;
        g.add(x, self.pos_embed)
    }

    pub fn block(
        &self,
        g: &mut Graph,
        i: usize,
        x: Var,
        lora: Option<&BoundLora>,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let b = &self.blocks[i];
        let d = self.config.embed_dim;
        let dh = self.config.head_dim();
        let h = g.layer_norm(x, b.ln1.gain, b.ln1.bias, LAYER_NORM_EPS)?;
        let qkv = apply_linear(g, h, &b.qkv, &format!("block.{i}.attn.qkv"), lora, rng.as_deref_mut())?;
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for head in 0..self.config.num_heads {
            let q = g.slice_cols(qkv, head * dh, dh)?;
            let k = g.slice_cols(qkv, d + head * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + head * dh, dh)?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax_rows(scores)?;
            heads.push(g.matmul(attn, v)?);
        }
        let merged = g.concat_cols(&heads)?;
        let attn = apply_linear(g, merged, &b.attn_out, &format!("block.{i}.attn.out"), lora, rng.as_deref_mut())?;
        let x = g.add(x, attn)?;

        let h = g.layer_norm(x, b.ln2.gain, b.ln2.bias, LAYER_NORM_EPS)?;
        let h = apply_linear(g, h, &b.c_fc, &c_fc_name(i), lora, rng.as_deref_mut())?;
        let h = g.gelu(h);
        let h = apply_linear(g, h, &b.c_proj, &c_proj_name(i), lora, rng.as_deref_mut())?;
        g.add(x, h)
    }

    /// Runs blocks `[start, end)`.
    pub fn blocks(
        &self,
        g: &mut Graph,
        x: Var,
        range: std::ops::Range<usize>,
        lora: Option<&BoundLora>,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let mut x = x;
        for i in range {
            x = self.block(g, i, x, lora, rng.as_deref_mut())?;
        }
        Ok(x)
    }

    /// Final layer norm of the CLS token: `[1 x d]`, not normalized.
    pub fn pool(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let cls = g.slice_rows(x, 0, 1)?;
        g.layer_norm(cls, self.ln_final.gain, self.ln_final.bias, LAYER_NORM_EPS)
    }

    /// Output projection followed by L2 normalization: `[1 x D]`.
    pub fn project(&self, g: &mut Graph, pooled: Var) -> Result<Var> {
        let z = g.matmul(pooled, self.proj)?;
        g.l2_normalize(z)
    }

    /// Pooled CLS feature for `input`.
    pub fn pooled(
        &self,
        g: &mut Graph,
        input: EncoderInput<'_>,
        lora: Option<&BoundLora>,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let (x, start) = match input {
            EncoderInput::Image(img) => (self.tokens(g, img)?, 0),
            EncoderInput::Hidden { tokens, start_block } => {
                let expect = [self.config.num_tokens(), self.config.embed_dim];
                if tokens.shape() != expect {
                    return Err(Error::shape("encoder hidden input", tokens.shape(), &expect));
                }
                (g.constant(tokens.detached()), start_block)
            }
        };
        let x = self.blocks(g, x, start..self.config.num_blocks, lora, rng)?;
        self.pool(g, x)
    }
}

/// Token states entering block `block`, computed without adapters. Valid
/// as a cache whenever no adapter sits in blocks `[0, block)`.
pub fn hidden_before_block(weights: &EncoderWeights, image: &Tensor, block: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let enc = weights.bind(&mut g);
    let x = enc.tokens(&mut g, image)?;
    let x = enc.blocks(&mut g, x, 0..block.min(weights.config.num_blocks), None, None)?;
    Ok(g.value(x).detached())
}

/// Final-layer-normed CLS token before the output projection.
pub fn pooled_feature(weights: &EncoderWeights, adapters: Option<&LoraSet>, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let enc = weights.bind(&mut g);
    let lora = adapters.map(|a| a.bind(&mut g));
    let p = enc.pooled(&mut g, EncoderInput::Image(image), lora.as_ref(), None)?;
    g.value(p).detached().reshape(vec![weights.config.embed_dim])
}

/// Unit-norm image embedding of width `output_dim`.
pub fn encode_image(weights: &EncoderWeights, adapters: Option<&LoraSet>, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let enc = weights.bind(&mut g);
    let lora = adapters.map(|a| a.bind(&mut g));
    let p = enc.pooled(&mut g, EncoderInput::Image(image), lora.as_ref(), None)?;
    let z = enc.project(&mut g, p)?;
    g.value(z).detached().reshape(vec![weights.config.output_dim])
}

/// Random image with pixels uniform in [0, 1]; handy for probes.
pub fn random_image(size: usize, rng: &mut Rng) -> Tensor {
    let data = (0..3 * size * size).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![3, size, size], data).expect("image shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;

    fn small() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            mlp_hidden: 64,
            output_dim: 8,
            seed: 0,
        }
    }

    #[test]
    fn config_divisibility_checked() {
        let mut c = small();
        c.patch_size = 3;
        assert!(matches!(init_encoder(&c), Err(Error::Config(_))));
        let mut c = small();
        c.num_heads = 3;
        assert!(matches!(init_encoder(&c), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_encoder(&small()).unwrap();
        let b = init_encoder(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        let mut c1 = small();
        c1.seed = 1;
        let c = init_encoder(&c1).unwrap();
        assert_ne!(a.patch_embed.weight, c.patch_embed.weight);
    }

    #[test]
    fn weights_are_frozen_and_named_for_lora() {
        let w = init_encoder(&small()).unwrap();
        assert!(w.named_params().iter().all(|(_, t)| !t.requires_grad()));
        let names: Vec<String> = w.named_params().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"block.1.mlp.c_fc.weight".to_string()));
        assert!(names.contains(&"block.0.mlp.c_proj.weight".to_string()));
        assert_eq!(w.linear("block.1.mlp.c_fc").unwrap().out_dim(), 64);
        assert!(w.linear("block.9.mlp.c_fc").is_none());
    }

    #[test]
    fn embedding_is_unit_norm_and_pooled_has_model_width() {
        let w = init_encoder(&small()).unwrap();
        let mut rng = SeedTree::new(1).rng(Stream::Data);
        let img = random_image(8, &mut rng);
        let e = encode_image(&w, None, &img).unwrap();
        assert_eq!(e.shape(), &[8]);
        let n = dot(e.data(), e.data()).sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        let p = pooled_feature(&w, None, &img).unwrap();
        assert_eq!(p.shape(), &[16]);

        // projection + normalization of the pooled feature reproduces the embedding
        let mut z = vec![0.0; 8];
        for (i, pi) in p.data().iter().enumerate() {
            for (j, zj) in z.iter_mut().enumerate() {
                *zj += pi * w.proj.data()[i * 8 + j];
            }
        }
        let z = crate::tensor::l2_normalize_vec(&z).unwrap();
        for (a, b) in z.iter().zip(e.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_image_size_is_a_shape_error() {
        let w = init_encoder(&small()).unwrap();
        let img = Tensor::zeros(vec![3, 12, 12]);
        assert!(matches!(encode_image(&w, None, &img), Err(Error::Shape { .. })));
    }

    #[test]
    fn pixel_perturbation_changes_embedding() {
        let w = init_encoder(&small()).unwrap();
        let mut rng = SeedTree::new(2).rng(Stream::Data);
        let img = random_image(8, &mut rng);
        let mut img2 = img.clone();
        let v = &mut img2.data_mut()[5];
        *v = if *v > 0.5 { *v - 0.5 } else { *v + 0.5 };
        let a = encode_image(&w, None, &img).unwrap();
        let b = encode_image(&w, None, &img2).unwrap();
        assert!(dot(a.data(), b.data()) < 1.0);
    }

    #[test]
    fn hidden_cache_matches_full_forward() {
        let w = init_encoder(&small()).unwrap();
        let mut rng = SeedTree::new(3).rng(Stream::Data);
        let img = random_image(8, &mut rng);
        let full = pooled_feature(&w, None, &img).unwrap();
        let hidden = hidden_before_block(&w, &img, 1).unwrap();
        let mut g = Graph::new();
        let enc = w.bind(&mut g);
        let p = enc
            .pooled(&mut g, EncoderInput::Hidden { tokens: &hidden, start_block: 1 }, None, None)
            .unwrap();
        assert_eq!(g.data(p), full.data());
    }

    #[test]
    fn checkpoint_round_trip() {
        let w = init_encoder(&small()).unwrap();
        let mut c = Checkpoint::new();
        w.to_checkpoint("encoder.", &mut c);
        let back = EncoderWeights::from_checkpoint("encoder.", &c).unwrap();
        assert_eq!(back, w);
    }
}
