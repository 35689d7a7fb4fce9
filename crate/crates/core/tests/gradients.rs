//! Finite-difference checks of the autodiff rules through composite graphs.

use fslab::encoder::{init_encoder, random_image, EncoderConfig, EncoderInput};
use fslab::lora::{inject, LoraConfig};
use fslab::objectives::{cross_entropy_smoothed, hybrid_loss, supcon_loss, ClassificationHead, ProjectionHead};
use fslab::rng::{Rng, SeedTree, Stream};
use fslab::tensor::{finite_diff_check, Graph, Tensor, Var, LAYER_NORM_EPS};

const STEP: f64 = 1e-5;

fn rng(seed: u64) -> Rng {
    SeedTree::new(seed).rng(Stream::Data)
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> fslab::Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::randn(shape, 1.0, &mut rng(seed)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn attention_like_composite() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let x = Tensor::randn(vec![4, 6], 1.0, &mut r);
        let wq = Tensor::randn(vec![6, 6], 0.5, &mut r);
        let rep = finite_diff_check(
            |g, x| {
                let w = g.constant(wq.clone());
                let q = g.matmul(x, w)?;
                let s = g.matmul_nt(q, x)?;
                let s = g.scale(s, 0.4);
                let a = g.softmax_rows(s)?;
                let y = g.matmul(a, x)?;
                let y = g.gelu(y);
                weighted_sum(g, y, seed + 10)
            },
            &x,
            STEP,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "seed {seed}: {:.2e}", rep.max_rel_error);
    }
}

#[test]
fn layer_norm_then_normalize() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let x = Tensor::randn(vec![3, 5], 2.0, &mut r);
        let gain = Tensor::randn(vec![5], 1.0, &mut r);
        let bias = Tensor::randn(vec![5], 1.0, &mut r);
        let rep = finite_diff_check(
            |g, x| {
                let (gv, bv) = (g.constant(gain.clone()), g.constant(bias.clone()));
                let y = g.layer_norm(x, gv, bv, LAYER_NORM_EPS)?;
                let y = g.l2_normalize(y)?;
                weighted_sum(g, y, seed)
            },
            &x,
            STEP,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "seed {seed}: {:.2e}", rep.max_rel_error);
    }
}

#[test]
fn hybrid_objective_through_both_heads() {
    let labels = [0, 1, 0, 1, 2, 2];
    for seed in 0..5 {
        let mut r = rng(seed);
        let feats = Tensor::randn(vec![6, 8], 1.0, &mut r);
        let head = ClassificationHead::new(3, 8, 0.0, &mut r);
        let proj = ProjectionHead::new(8, 10, 4, &mut r);
        let rep = finite_diff_check(
            |g, x| {
                let ce = {
                    let h = head.bind(g);
                    let logits = h.forward(g, x, None)?;
                    cross_entropy_smoothed(g, logits, &labels, 0.2)?
                };
                let p = proj.bind(g);
                let z = p.forward(g, x)?;
                let sc = supcon_loss(g, z, &labels, 0.1, false)?;
                hybrid_loss(g, ce, sc, 0.3)
            },
            &feats,
            STEP,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "seed {seed}: {:.2e}", rep.max_rel_error);
    }
}

#[test]
fn lora_path_through_frozen_encoder() {
    let cfg = EncoderConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        num_blocks: 2,
        num_heads: 2,
        mlp_hidden: 16,
        output_dim: 4,
        seed: 3,
    };
    let w = init_encoder(&cfg).unwrap();
    for seed in 0..5 {
        let mut set = inject(&w, &LoraConfig::last_blocks(2, 2, 2)).unwrap();
        let mut r = rng(seed);
        for ad in &mut set.adapters {
            let shape = ad.b.shape().to_vec();
            ad.b = Tensor::randn(shape, 0.3, &mut r);
        }
        let img = random_image(8, &mut r);
        for (k, wrt_b) in [(0, false), (3, true)] {
            let target = if wrt_b { &set.adapters[k].b } else { &set.adapters[k].a };
            let rep = finite_diff_check(
                |g, x| {
                    let enc = w.bind(g);
                    let mut lora = set.bind(g);
                    if wrt_b {
                        lora.adapters[k].b = x;
                    } else {
                        lora.adapters[k].a = x;
                    }
                    let p = enc.pooled(g, EncoderInput::Image(&img), Some(&lora), None)?;
                    let z = enc.project(g, p)?;
                    weighted_sum(g, z, seed)
                },
                target,
                STEP,
                1e-3,
            )
            .unwrap();
            assert!(rep.passed, "seed {seed} adapter {k}: {:.2e}", rep.max_rel_error);
        }
    }
}
