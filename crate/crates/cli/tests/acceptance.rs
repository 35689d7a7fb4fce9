//! End-to-end acceptance checks. They run in one test, one after another,
//! so the timed criteria never share the CPU with each other. Each prints a
//! PASS/FAIL line; the test fails if any criterion does.

use std::collections::BTreeMap;
use std::fs;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng as _;

use fslab::data::{
    augment, build_pools, random_batches, sample_episode, stratified_batches, synth_dataset, AugmentLevel,
    LabeledImage, Pool, SamplerKind,
};
use fslab::encoder::{encode_image, init_encoder, random_image, EncoderConfig, EncoderInput, EncoderWeights};
use fslab::lora::{inject, LoraConfig};
use fslab::objectives::{cross_entropy_smoothed, supcon_loss, supcon_loss_value, SupConBatch};
use fslab::rng::{Rng, SeedTree, Stream};
use fslab::schedules::{lambda_at, lr_at, tau_at, ScheduleSpec};
use fslab::strategies::{
    compactness_report, embed_images, embed_raw, prototype_accuracy, run_linear_probe, run_lora,
    run_prototype_strategy, warm_start, PretrainConfig, Strategy, TextPriorProvider, TrainRunConfig, Trainer,
};
use fslab::tensor::{finite_diff_check, Graph, Tensor, Var};
use fslab_cli::commands::{cmd_train, run_name, METRICS_FILE, STEPS_FILE};
use fslab_cli::ExperimentConfig;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const LORA_FD_TOL: f64 = 1e-3;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn rng(seed: u64) -> Rng {
    SeedTree::new(seed).rng(Stream::Data)
}

fn randn(shape: &[usize], r: &mut Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, r)
}

/// `sum(out * w)` for a fixed random `w`, so every output coordinate
/// contributes to the checked gradient.
fn probe(g: &mut Graph, out: Var, w: &Tensor) -> fslab::Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type Case = (String, Tensor, Box<dyn Fn(&mut Graph, Var) -> fslab::Result<Var>>);

/// One finite-difference case per op input and per loss, for one seed.
fn gradient_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let mut cases: Vec<Case> = Vec::new();
    let (m, k, n) = (3, 4, 2);

    let a = randn(&[m, k], &mut r);
    let b = randn(&[k, n], &mut r);
    let w_mn = randn(&[m, n], &mut r);
    let w_mk = randn(&[m, k], &mut r);
    let w_mm = randn(&[m, m], &mut r);
    let w_km = randn(&[k, m], &mut r);
    {
        let (b, w) = (b.clone(), w_mn.clone());
        cases.push((
            "matmul/a".into(),
            a.clone(),
            Box::new(move |g, x| {
                let c = g.constant(b.clone());
                let y = g.matmul(x, c)?;
                probe(g, y, &w)
            }),
        ));
    }
    {
        let (a, w) = (a.clone(), w_mn.clone());
        cases.push((
            "matmul/b".into(),
            b.clone(),
            Box::new(move |g, x| {
                let c = g.constant(a.clone());
                let y = g.matmul(c, x)?;
                probe(g, y, &w)
            }),
        ));
    }
    {
        let (other, w) = (randn(&[m, k], &mut r), w_mm.clone());
        cases.push((
            "matmul_nt".into(),
            a.clone(),
            Box::new(move |g, x| {
                let c = g.constant(other.clone());
                let y = g.matmul_nt(x, c)?;
                probe(g, y, &w)
            }),
        ));
    }
    {
        let (other, w) = (randn(&[m, m], &mut r), w_km.clone());
        cases.push((
            "matmul_t(ta)".into(),
            a.clone(),
            Box::new(move |g, x| {
                let c = g.constant(other.clone());
                let y = g.matmul_t(x, c, true, false)?;
                probe(g, y, &w)
            }),
        ));
    }
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let (other, w) = (randn(&[m, k], &mut r), w_mk.clone());
        cases.push((
            name.into(),
            a.clone(),
            Box::new(move |g, x| {
                let c = g.constant(other.clone());
                let y = match op {
                    0 => g.add(c, x)?,
                    1 => g.sub(c, x)?,
                    _ => g.mul(c, x)?,
                };
                probe(g, y, &w)
            }),
        ));
    }
    {
        let w = w_mk.clone();
        let bias = randn(&[1, k], &mut r);
        cases.push((
            "add_row/bias".into(),
            bias,
            Box::new(move |g, x| {
                let c = g.constant(Tensor::ones(vec![m, k]));
                let y = g.add_row(c, x)?;
                probe(g, y, &w)
            }),
        ));
    }
    type Unary = fn(&mut Graph, Var) -> fslab::Result<Var>;
    let unary: Vec<(&str, Unary)> = vec![
        ("scale", |g, x| Ok(g.scale(x, -1.7))),
        ("gelu", |g, x| Ok(g.gelu(x))),
        ("relu", |g, x| Ok(g.relu(x))),
        ("softmax(axis 0)", |g, x| g.softmax(x, 0)),
        ("softmax_rows", |g, x| g.softmax_rows(x)),
        ("log_softmax_rows", |g, x| g.log_softmax_rows(x, None)),
        ("log_softmax_rows(masked)", |g, x| {
            let mask = (0..12).map(|i| i % 5 != 1).collect();
            g.log_softmax_rows(x, Some(mask))
        }),
        ("l2_normalize", |g, x| g.l2_normalize(x)),
        ("slice_cols", |g, x| g.slice_cols(x, 1, 2)),
        ("slice_rows", |g, x| g.slice_rows(x, 1, 2)),
        ("concat_cols", |g, x| {
            let s = g.scale(x, 2.0);
            g.concat_cols(&[x, s])
        }),
        ("concat_rows", |g, x| {
            let s = g.gelu(x);
            g.concat_rows(&[s, x])
        }),
        ("transpose", |g, x| g.transpose(x)),
        ("reshape", |g, x| g.reshape(x, vec![2, 6])),
        ("mean", |g, x| {
            let sq = g.mul(x, x)?;
            Ok(g.mean(sq))
        }),
    ];
    for (name, f) in unary {
        let x0 = randn(&[m, k], &mut r);
        let w_seed = r.random::<u64>();
        cases.push((
            name.into(),
            x0,
            Box::new(move |g, x| {
                let y = f(g, x)?;
                let shape = g.shape(y).to_vec();
                let w = Tensor::randn(shape, 1.0, &mut rng(w_seed));
                probe(g, y, &w)
            }),
        ));
    }
    {
        let (gain, bias) = (randn(&[k], &mut r), randn(&[k], &mut r));
        let x0 = randn(&[m, k], &mut r);
        let w = w_mk.clone();
        let (g1, b1, w1) = (gain.clone(), bias.clone(), w.clone());
        cases.push((
            "layer_norm/x".into(),
            x0.clone(),
            Box::new(move |g, x| {
                let (gv, bv) = (g.constant(g1.clone()), g.constant(b1.clone()));
                let y = g.layer_norm(x, gv, bv, 1e-5)?;
                probe(g, y, &w1)
            }),
        ));
        let (x1, b2, w2) = (x0.clone(), bias.clone(), w.clone());
        cases.push((
            "layer_norm/gain".into(),
            gain.clone(),
            Box::new(move |g, p| {
                let (xv, bv) = (g.constant(x1.clone()), g.constant(b2.clone()));
                let y = g.layer_norm(xv, p, bv, 1e-5)?;
                probe(g, y, &w2)
            }),
        ));
        cases.push((
            "layer_norm/bias".into(),
            bias,
            Box::new(move |g, p| {
                let (xv, gv) = (g.constant(x0.clone()), g.constant(gain.clone()));
                let y = g.layer_norm(xv, gv, p, 1e-5)?;
                probe(g, y, &w)
            }),
        ));
    }
    {
        let labels = vec![0, 2, 1, 2];
        cases.push((
            "cross_entropy_smoothed".into(),
            randn(&[4, 3], &mut r),
            Box::new(move |g, x| cross_entropy_smoothed(g, x, &labels, 0.1)),
        ));
    }
    {
        let labels = vec![0, 1, 0, 1, 1];
        cases.push((
            "supcon_loss".into(),
            randn(&[5, 3], &mut r),
            Box::new(move |g, x| {
                let z = g.l2_normalize(x)?;
                supcon_loss(g, z, &labels, 0.2, false)
            }),
        ));
    }
    cases
}

fn tiny_encoder(seed: u64) -> EncoderWeights {
    init_encoder(&EncoderConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        num_blocks: 2,
        num_heads: 2,
        mlp_hidden: 16,
        output_dim: 4,
        seed,
    })
    .unwrap()
}

/// Gradient of a projected embedding with respect to one adapter's A or B,
/// through the frozen encoder.
fn lora_path_report(seed: u64, wrt_b: bool) -> fslab::Result<f64> {
    let w = tiny_encoder(seed);
    let mut set = inject(&w, &LoraConfig::last_blocks(2, 1, 2))?;
    let mut r = rng(seed + 50);
    for ad in &mut set.adapters {
        let shape = ad.b.shape().to_vec();
        ad.b = Tensor::randn(shape, 0.3, &mut r);
    }
    let img = random_image(8, &mut r);
    let w_out = randn(&[1, 4], &mut r);
    let target = if wrt_b { set.adapters[0].b.clone() } else { set.adapters[0].a.clone() };
    let f = |g: &mut Graph, x: Var| -> fslab::Result<Var> {
        let enc = w.bind(g);
        let mut lora = set.bind(g);
        if wrt_b {
            lora.adapters[0].b = x;
        } else {
            lora.adapters[0].a = x;
        }
        let p = enc.pooled(g, EncoderInput::Image(&img), Some(&lora), None)?;
        let z = enc.project(g, p)?;
        probe(g, z, &w_out)
    };
    Ok(finite_diff_check(f, &target, FD_STEP, LORA_FD_TOL)?.max_rel_error)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let mut checked = 0;
    for seed in 0..5 {
        for (name, x, f) in gradient_cases(seed) {
            match finite_diff_check(f, &x, FD_STEP, FD_TOL) {
                Ok(rep) => {
                    checked += 1;
                    if rep.max_rel_error > worst.0 {
                        worst = (rep.max_rel_error, name.clone());
                    }
                    if !rep.passed {
                        failures.push(format!("{name}@{seed}: {:.2e}", rep.max_rel_error));
                    }
                }
                Err(e) => failures.push(format!("{name}@{seed}: {e}")),
            }
        }
    }
    let mut lora_worst = 0.0f64;
    for seed in 0..5 {
        for wrt_b in [false, true] {
            match lora_path_report(seed, wrt_b) {
                Ok(e) => {
                    lora_worst = lora_worst.max(e);
                    if e > LORA_FD_TOL {
                        failures.push(format!("lora(b={wrt_b})@{seed}: {e:.2e}"));
                    }
                }
                Err(e) => failures.push(format!("lora@{seed}: {e}")),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 30.0 {
        failures.push(format!("runtime {secs:.1}s"));
    }
    Outcome {
        id: 1,
        name: "gradient correctness",
        pass: failures.is_empty(),
        detail: format!(
            "{checked} op/loss checks, worst {:.2e} ({}); LoRA path worst {lora_worst:.2e}; {secs:.1}s{}",
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join(", ")) }
        ),
    }
}

fn criterion_2() -> Outcome {
    let w = init_encoder(&EncoderConfig::default()).unwrap();
    let cfg = LoraConfig::last_blocks(w.config.num_blocks, 4, 4);
    let mut set = inject(&w, &cfg).unwrap();
    let mut r = rng(2);
    let mut identity_err = 0.0f64;
    for _ in 0..5 {
        let img = random_image(w.config.image_size, &mut r);
        let base = encode_image(&w, None, &img).unwrap();
        let adapted = encode_image(&w, Some(&set), &img).unwrap();
        for (a, b) in base.data().iter().zip(adapted.data()) {
            identity_err = identity_err.max((a - b).abs());
        }
    }
    for ad in &mut set.adapters {
        let shape = ad.b.shape().to_vec();
        ad.b = Tensor::randn(shape, 0.05, &mut r);
    }
    let merged = set.merge_into(&w).unwrap();
    let mut merge_err = 0.0f64;
    for _ in 0..100 {
        let img = random_image(w.config.image_size, &mut r);
        let a = encode_image(&w, Some(&set), &img).unwrap();
        let m = encode_image(&merged, None, &img).unwrap();
        for (x, y) in a.data().iter().zip(m.data()) {
            merge_err = merge_err.max((x - y).abs());
        }
    }
    let mut tail = 0.0f64;
    for ad in &set.adapters {
        let dw = ad.delta_weight();
        let (rows, cols) = (dw.rows(), dw.cols());
        let sv = DMatrix::from_row_slice(rows, cols, dw.data()).singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        tail = tail.max(s[ad.rank()..].iter().copied().fold(0.0, f64::max));
    }
    Outcome {
        id: 2,
        name: "LoRA identity & merge",
        pass: identity_err <= 1e-9 && merge_err <= 1e-9 && tail < 1e-9,
        detail: format!("identity {identity_err:.1e}, merge {merge_err:.1e} over 100 probes, SVD tail {tail:.1e}"),
    }
}

/// Direct loop over anchors, positives and the self-excluded denominator.
fn supcon_brute(z: &[Vec<f64>], labels: &[usize], tau: f64) -> Option<f64> {
    let n = z.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (dot(&z[i], &z[a]) / tau).exp()).sum();
        let mut li = 0.0;
        for &p in &pos {
            li += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
        }
        total += -li / pos.len() as f64;
        anchors += 1;
    }
    (anchors > 0).then(|| total / anchors as f64)
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    let mut batches = 0;
    while batches < 200 {
        let n = r.random_range(2..=6);
        let p = r.random_range(2..=5);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let tau = r.random_range(0.05..1.0);
        let z: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..p).map(|_| r.random_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let Some(expected) = supcon_brute(&z, &labels, tau) else {
            continue;
        };
        let t = Tensor::matrix(n, p, z.concat()).unwrap();
        let got = supcon_loss_value(&SupConBatch::new(t, labels, tau).unwrap()).unwrap();
        worst = worst.max((got - expected).abs());
        batches += 1;
    }
    let z = Tensor::matrix(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let hand = supcon_loss_value(&SupConBatch::new(z, vec![0, 0, 1], 1.0).unwrap()).unwrap();
    let expected = (1.0 + (-1.0f64).exp()).ln();
    Outcome {
        id: 3,
        name: "SupCon oracle",
        pass: worst <= 1e-12 && (hand - expected).abs() <= 1e-9,
        detail: format!("200 batches, max diff {worst:.1e}; 3-sample case {hand:.12} vs ln(1+e^-1) {expected:.12}"),
    }
}

fn criterion_4() -> Outcome {
    let mut problems = Vec::new();
    for total in [10usize, 100, 1000] {
        let s = ScheduleSpec::new(total, total / 10);
        let w = s.warmup_steps;
        let lr: Vec<f64> = (0..=total).map(|t| lr_at(&s, t).unwrap()).collect();
        let tau: Vec<f64> = (0..=total).map(|t| tau_at(&s, t).unwrap()).collect();
        let lam: Vec<f64> = (0..=total).map(|t| lambda_at(&s, t).unwrap()).collect();
        if lr[w] != 1e-3 || lr[total] != 1e-6 {
            problems.push(format!("lr endpoints at {total}: {} / {}", lr[w], lr[total]));
        }
        if tau[0] != 0.2 || tau[total] != 0.07 {
            problems.push(format!("tau endpoints at {total}"));
        }
        if lam[0] != 0.05 || lam[total] != 0.3 {
            problems.push(format!("lambda endpoints at {total}"));
        }
        if !lr[..=w].windows(2).all(|p| p[1] >= p[0]) || !lr[w..].windows(2).all(|p| p[1] <= p[0]) {
            problems.push(format!("lr not warmup-then-decay at {total}"));
        }
        if !tau.windows(2).all(|p| p[1] <= p[0]) {
            problems.push(format!("tau not non-increasing at {total}"));
        }
        if !lam.windows(2).all(|p| p[1] >= p[0]) {
            problems.push(format!("lambda not non-decreasing at {total}"));
        }
    }
    Outcome {
        id: 4,
        name: "schedule constants",
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            "lr 1e-3/1e-6, tau 0.2/0.07, lambda 0.05/0.3; monotone for 10/100/1000 steps".into()
        } else {
            problems.join("; ")
        },
    }
}

fn criterion_5() -> Outcome {
    let labels: Vec<usize> = (0..10).flat_map(|c| std::iter::repeat_n(c, 5)).collect();
    let mut batches = 0usize;
    let mut bad = 0usize;
    let mut sizes = BTreeMap::new();
    let mut seed = 0u64;
    while batches < 10_000 {
        let plan = stratified_batches(&labels, 8, 3, seed).unwrap();
        seed += 1;
        for b in &plan.batches {
            batches += 1;
            *sizes.entry(b.len()).or_insert(0usize) += 1;
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for &i in b {
                *counts.entry(labels[i]).or_default() += 1;
            }
            if counts.len() != 8 || counts.values().any(|&c| c != 3) {
                bad += 1;
            }
        }
    }
    let mut partition_ok = true;
    for s in 0..200 {
        let plan = random_batches(&labels, 7, s).unwrap();
        let mut all: Vec<usize> = plan.batches.concat();
        all.sort_unstable();
        partition_ok &= all == (0..labels.len()).collect::<Vec<_>>() && plan.kind == SamplerKind::Random;
    }
    Outcome {
        id: 5,
        name: "sampler guarantee",
        pass: bad == 0 && sizes.keys().eq([24].iter()) && partition_ok,
        detail: format!("{batches} stratified batches, {bad} violations, sizes {sizes:?}; random plans partition: {partition_ok}"),
    }
}

fn synth_pools() -> (Pool, Pool) {
    let ds = synth_dataset(10, 40, 32, 0).unwrap();
    build_pools(&ds, 20).unwrap()
}

fn criterion_6(w: &EncoderWeights, train: &Pool, test: &Pool) -> Outcome {
    let ep = sample_episode(train, test, 5, 0).unwrap();
    let mut hybrid = TrainRunConfig::for_shot(Strategy::LoraHybrid, 5);
    hybrid.lambda_override = Some(0.0);
    hybrid.epochs = 40;
    let mut ce = hybrid.clone();
    ce.strategy = Strategy::LoraCe;
    let n = ep.num_classes();
    let mut th = Trainer::new(w, &ep.support, n, &hybrid).unwrap();
    let mut tc = Trainer::new(w, &ep.support, n, &ce).unwrap();
    let shared = tc.trainable_params().len();
    let mut worst = 0.0f64;
    let mut steps = 0;
    while steps < 50 && !th.is_done() && !tc.is_done() {
        let (sh, sc) = (th.step().unwrap(), tc.step().unwrap());
        worst = worst.max((sh.metrics.ce - sc.metrics.ce).abs());
        for (a, b) in th.trainable_params()[..shared].iter().zip(tc.trainable_params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs());
            }
        }
        steps += 1;
    }
    Outcome {
        id: 6,
        name: "lambda=0 equivalence",
        pass: steps == 50 && worst <= 1e-12,
        detail: format!("{steps} steps, max parameter/loss difference {worst:.1e}"),
    }
}

struct Ordering {
    outcome: Outcome,
    runs: Vec<(Strategy, u64, u64)>,
}

fn criterion_7(train: &Pool, test: &Pool) -> (Ordering, EncoderWeights) {
    let start = Instant::now();
    let base = init_encoder(&EncoderConfig::default()).unwrap();
    let (w, _) = warm_start(&base, train.num_classes(), &PretrainConfig::default()).unwrap();
    let ep = sample_episode(train, test, 5, 0).unwrap();
    let proto = run_prototype_strategy(&w, &ep, &TextPriorProvider::none(), 0.0).unwrap();
    let lp = run_linear_probe(&w, &ep, &TrainRunConfig::for_shot(Strategy::LinearProbe, 5)).unwrap();
    let ce = run_lora(&w, &ep, &TrainRunConfig::for_shot(Strategy::LoraCe, 5)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (p, l, c) = (
        proto.final_accuracy,
        lp.metrics.final_accuracy,
        ce.metrics.final_accuracy,
    );
    let chance = 0.10;
    let pass = c >= l && l >= p - 0.02 && [p, l, c].iter().all(|&a| a >= chance + 0.15) && secs < 300.0;
    let runs = [(Strategy::Prototype, &proto), (Strategy::LinearProbe, &lp.metrics), (Strategy::LoraCe, &ce.metrics)]
        .into_iter()
        .map(|(s, m)| (s, m.encoder_checksum_before, m.encoder_checksum_after))
        .collect();
    (
        Ordering {
            outcome: Outcome {
                id: 7,
                name: "desk-scale strategy ordering",
                pass,
                detail: format!(
                    "5-shot: lora_ce {c:.3} >= linear_probe {l:.3} >= prototype {p:.3} - 0.02; chance + 0.15 = 0.25; {secs:.0}s incl. warm start"
                ),
            },
            runs,
        },
        w,
    )
}

fn criterion_8(w: &EncoderWeights, train: &Pool, test: &Pool) -> Outcome {
    let query = embed_images(w, None, &test.flatten()).unwrap();
    let mut strict = 0;
    let mut never_worse = true;
    let mut cells = Vec::new();
    for seed in 0..5 {
        let ep = sample_episode(train, test, 1, seed).unwrap();
        let support = embed_images(w, None, &ep.support).unwrap();
        let provider = TextPriorProvider::heldout_proxy(w, train, &ep.support, 5).unwrap();
        let visual = prototype_accuracy(&support, &query, &TextPriorProvider::none(), 0.0).unwrap();
        let best = [0.2, 0.5, 0.7]
            .iter()
            .map(|&a| prototype_accuracy(&support, &query, &provider, a).unwrap())
            .fold(visual, f64::max);
        strict += (best > visual) as usize;
        never_worse &= best >= visual;
        cells.push(format!("{visual:.3}->{best:.3}"));
    }
    Outcome {
        id: 8,
        name: "hybrid-prior benefit at 1-shot",
        pass: never_worse && strict >= 4,
        detail: format!("alpha=0 -> best alpha per seed: {}; strictly better in {strict}/5", cells.join(", ")),
    }
}

fn criterion_9(w: &EncoderWeights, train: &Pool, test: &Pool) -> Outcome {
    let query = test.flatten();
    let clean = embed_images(w, None, &query).unwrap();
    let clean_ratio = compactness_report(&clean.vectors, &clean.labels).unwrap().ratio;
    let mut divergent = 0;
    let mut tighter = 0;
    let mut cells = Vec::new();
    for seed in 0..5u64 {
        let mut r = SeedTree::new(seed).child(7).rng(Stream::Augment);
        let high: Vec<LabeledImage> = query.iter().map(|i| augment(i, AugmentLevel::High, &mut r)).collect();
        let frozen = embed_raw(w, None, &high).unwrap();
        let frozen_ratio = compactness_report(&frozen.vectors, &frozen.labels).unwrap().ratio;
        divergent += (frozen_ratio > 1.15 * clean_ratio) as usize;
        let ep = sample_episode(train, test, 5, seed).unwrap();
        let mut cfg = TrainRunConfig::for_shot(Strategy::LoraCe, 5);
        cfg.augment = AugmentLevel::High;
        cfg.seed = seed;
        let out = run_lora(w, &ep, &cfg).unwrap();
        let adapted = embed_raw(w, out.lora.as_ref(), &high).unwrap();
        let adapted_ratio = compactness_report(&adapted.vectors, &adapted.labels).unwrap().ratio;
        tighter += (adapted_ratio < frozen_ratio) as usize;
        cells.push(format!("{frozen_ratio:.4}->{adapted_ratio:.4}"));
    }
    Outcome {
        id: 9,
        name: "augmentation-divergence compactness",
        pass: divergent == 5 && tighter >= 4,
        detail: format!(
            "clean {clean_ratio:.4}; High frozen > 1.15x clean in {divergent}/5; frozen->adapted High: {}; tighter in {tighter}/5",
            cells.join(", ")
        ),
    }
}

fn criterion_10(w: &EncoderWeights, train: &Pool, test: &Pool, earlier: &[(Strategy, u64, u64)]) -> Outcome {
    let reference = w.checksum();
    let ep = sample_episode(train, test, 3, 1).unwrap();
    let hybrid = run_lora(w, &ep, &TrainRunConfig::for_shot(Strategy::LoraHybrid, 3)).unwrap();
    let proto = run_prototype_strategy(w, &ep, &TextPriorProvider::none(), 0.0).unwrap();
    let mut runs = earlier.to_vec();
    runs.push((Strategy::LoraHybrid, hybrid.metrics.encoder_checksum_before, hybrid.metrics.encoder_checksum_after));
    runs.push((Strategy::Prototype, proto.encoder_checksum_before, proto.encoder_checksum_after));
    let unchanged = runs.iter().all(|&(_, b, a)| b == a && b == reference) && w.checksum() == reference;
    Outcome {
        id: 10,
        name: "freeze contract",
        pass: unchanged && proto.trainable_params == 0,
        detail: format!(
            "{} runs over prototype/linear_probe/lora_ce/lora_hybrid, checksums unchanged: {unchanged}; prototype trains {} params",
            runs.len(),
            proto.trainable_params
        ),
    }
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let mut cfg = ExperimentConfig::parse(
            "synth.classes = 5\nsynth.per_class = 20\npool_per_class = 6\nstrategy = lora_hybrid\nn_shot = 3\nepochs = 3\nseeds = 4\n",
        )
        .unwrap();
        cfg.out = dir.path().join(sub);
        cmd_train(&cfg).unwrap();
        let run_dir = cfg.out.join(run_name(Strategy::LoraHybrid, 3, AugmentLevel::None, 4));
        (
            fs::read(run_dir.join(METRICS_FILE)).unwrap(),
            fs::read(run_dir.join(STEPS_FILE)).unwrap(),
        )
    };
    let (m1, s1) = run("a");
    let (m2, s2) = run("b");
    Outcome {
        id: 11,
        name: "determinism",
        pass: m1 == m2 && s1 == s2 && !m1.is_empty(),
        detail: format!(
            "metrics.csv {} bytes identical: {}; steps.csv identical: {}",
            m1.len(),
            m1 == m2,
            s1 == s2
        ),
    }
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    let mut report = |o: Outcome| {
        println!(
            "{} criterion {:>2} ({}): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.detail
        );
        results.push((o.id, o.pass));
    };
    report(criterion_1());
    report(criterion_2());
    report(criterion_3());
    report(criterion_4());
    report(criterion_5());

    let (train, test) = synth_pools();
    let random = init_encoder(&EncoderConfig::default()).unwrap();
    report(criterion_6(&random, &train, &test));
    let (ordering, warmed) = criterion_7(&train, &test);
    report(ordering.outcome);
    report(criterion_8(&random, &train, &test));
    report(criterion_9(&random, &train, &test));
    report(criterion_10(&warmed, &train, &test, &ordering.runs));
    report(criterion_11());

    let failed: Vec<usize> = results.iter().filter(|(_, p)| !p).map(|(id, _)| *id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
