use proptest::prelude::*;

use fslab::data::{random_batches, stratified_batches};
use fslab::objectives::{supcon_loss_value, SupConBatch};
use fslab::schedules::{lambda_at, lr_at, tau_at, LambdaShape, ScheduleSpec};
use fslab::tensor::{l2_normalize_vec, Graph, Tensor};

fn unit_rows(raw: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    raw.iter().map(|v| l2_normalize_vec(v).ok()).collect()
}

/// Loop form of the contrastive loss with the anchor left out of its own
/// denominator.
fn supcon_oracle(z: &[Vec<f64>], labels: &[usize], tau: f64) -> Option<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = z.len();
    let (mut total, mut anchors) = (0.0, 0);
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (dot(&z[i], &z[a]) / tau).exp()).sum();
        let s: f64 = pos.iter().map(|&p| ((dot(&z[i], &z[p]) / tau).exp() / denom).ln()).sum();
        total -= s / pos.len() as f64;
        anchors += 1;
    }
    (anchors > 0).then(|| total / anchors as f64)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 4), 1..5)) {
        let n = rows.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(n, 4, rows.concat()).unwrap());
        let s = g.softmax_rows(x).unwrap();
        for r in 0..n {
            let row = g.value(s).row(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // shift invariance
        let shifted: Vec<f64> = rows.concat().iter().map(|v| v + 7.5).collect();
        let y = g.constant(Tensor::matrix(n, 4, shifted).unwrap());
        let t = g.softmax_rows(y).unwrap();
        for (a, b) in g.data(s).iter().zip(g.data(t)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_is_idempotent(v in prop::collection::vec(-10.0f64..10.0, 1..8)) {
        prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let once = l2_normalize_vec(&v).unwrap();
        let twice = l2_normalize_vec(&once).unwrap();
        prop_assert!((once.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn supcon_matches_loop_oracle(
        raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2..=6),
        label_seed in prop::collection::vec(0usize..3, 6),
        tau in 0.05f64..1.0,
    ) {
        let z = unit_rows(&raw);
        prop_assume!(z.is_some());
        let z = z.unwrap();
        let labels = label_seed[..z.len()].to_vec();
        let expected = supcon_oracle(&z, &labels, tau);
        let batch = SupConBatch::new(Tensor::matrix(z.len(), 3, z.concat()).unwrap(), labels, tau).unwrap();
        match expected {
            Some(e) => prop_assert!((supcon_loss_value(&batch).unwrap() - e).abs() < 1e-12),
            None => prop_assert!(supcon_loss_value(&batch).is_err()),
        }
    }

    #[test]
    fn random_plans_partition(n in 1usize..60, batch in 1usize..16, seed in any::<u64>()) {
        let labels: Vec<usize> = (0..n).map(|i| i % 5).collect();
        let plan = random_batches(&labels, batch, seed).unwrap();
        let mut all = plan.batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(plan.batches.iter().all(|b| !b.is_empty() && b.len() <= batch));
    }

    #[test]
    fn stratified_batches_hold_k_per_class(
        classes in 2usize..12,
        per_class in 3usize..8,
        p in 2usize..6,
        k in 2usize..4,
        seed in any::<u64>(),
    ) {
        prop_assume!(p <= classes && k <= per_class);
        let labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
        let plan = stratified_batches(&labels, p, k, seed).unwrap();
        prop_assert!(!plan.is_empty());
        for b in &plan.batches {
            prop_assert_eq!(b.len(), p * k);
            let mut counts = vec![0usize; classes];
            for &i in b {
                counts[labels[i]] += 1;
            }
            prop_assert!(counts.iter().all(|&c| c == 0 || c == k));
        }
    }
}

#[test]
fn schedules_are_monotone_and_hit_their_endpoints() {
    for total in [10usize, 100, 1000] {
        for shape in [LambdaShape::Ramp, LambdaShape::Triangular] {
            let mut s = ScheduleSpec::new(total, total / 10);
            s.lambda_shape = shape;
            let w = s.warmup_steps;
            let lr: Vec<f64> = (0..=total).map(|t| lr_at(&s, t).unwrap()).collect();
            let tau: Vec<f64> = (0..=total).map(|t| tau_at(&s, t).unwrap()).collect();
            let lam: Vec<f64> = (0..=total).map(|t| lambda_at(&s, t).unwrap()).collect();
            assert_eq!((lr[w], lr[total]), (1e-3, 1e-6));
            assert_eq!((tau[0], tau[total]), (0.2, 0.07));
            assert!(lr[..=w].windows(2).all(|p| p[1] >= p[0]));
            assert!(lr[w..].windows(2).all(|p| p[1] <= p[0]));
            assert!(tau.windows(2).all(|p| p[1] <= p[0]));
            assert!(lam.iter().all(|&l| (0.05..=0.3).contains(&l)));
            if shape == LambdaShape::Ramp {
                assert_eq!((lam[0], lam[total]), (0.05, 0.3));
                assert!(lam.windows(2).all(|p| p[1] >= p[0]));
            }
            assert!(lr_at(&s, total + 1).is_err());
        }
    }
}

#[test]
fn eight_by_three_over_many_plans() {
    let labels: Vec<usize> = (0..10).flat_map(|c| std::iter::repeat_n(c, 5)).collect();
    let mut batches = 0;
    for seed in 0..2000 {
        for b in stratified_batches(&labels, 8, 3, seed).unwrap().batches {
            assert_eq!(b.len(), 24);
            batches += 1;
        }
    }
    assert!(batches >= 4000);
}
