//! Classification and projection heads, label-smoothed cross-entropy, the
//! supervised contrastive loss and the `CE + lambda * SupCon` combiner.

use rand::Rng as _;

use crate::checkpoint::Checkpoint;
use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Tolerance on `|z| = 1` for contrastive inputs.
const UNIT_NORM_TOL: f64 = 1e-6;

fn dropout_rows(g: &mut Graph, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let shape = g.shape(x).to_vec();
            let n: usize = shape.iter().product();
            let mask = (0..n)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = g.constant(Tensor::new(shape, mask)?);
            g.mul(x, mask)
        }
        _ => Ok(x),
    }
}

/// Linear classifier `logits = W x + b` with dropout on its input.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationHead {
    /// `[num_classes x feat_dim]`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub dropout: f64,
}

pub struct BoundClassificationHead {
    pub weight: Var,
    pub bias: Var,
    dropout: f64,
}

impl ClassificationHead {
    pub fn new(num_classes: usize, feat_dim: usize, dropout: f64, rng: &mut Rng) -> Self {
        Self {
            weight: Tensor::randn(vec![num_classes, feat_dim], INIT_STD, rng).with_requires_grad(true),
            bias: Tensor::zeros(vec![num_classes]).with_requires_grad(true),
            dropout,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn feat_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph) -> BoundClassificationHead {
        BoundClassificationHead {
            weight: g.param(&self.weight),
            bias: g.param(&self.bias),
            dropout: self.dropout,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    /// Eager logits for one feature vector, without dropout.
    pub fn logits(&self, feat: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let head = self.bind(&mut g);
        let x = g.constant(Tensor::vector(feat.to_vec()));
        let out = head.forward(&mut g, x, None)?;
        Ok(g.data(out).to_vec())
    }

    pub fn to_checkpoint(&self, prefix: &str, ckpt: &mut Checkpoint) {
        ckpt.insert(format!("{prefix}weight"), &self.weight);
        ckpt.insert(format!("{prefix}bias"), &self.bias);
        ckpt.insert_scalar(format!("{prefix}dropout"), self.dropout);
    }

    pub fn from_checkpoint(prefix: &str, ckpt: &Checkpoint) -> Result<Option<Self>> {
        let Some(weight) = ckpt.get(&format!("{prefix}weight")) else {
            return Ok(None);
        };
        Ok(Some(Self {
            weight: weight.detached().with_requires_grad(true),
            bias: ckpt.require(&format!("{prefix}bias"))?.detached().with_requires_grad(true),
            dropout: ckpt.scalar(&format!("{prefix}dropout"))?,
        }))
    }
}

impl BoundClassificationHead {
    /// `feat: [n x feat_dim]` to logits `[n x num_classes]`.
    pub fn forward(&self, g: &mut Graph, feat: Var, rng: Option<&mut Rng>) -> Result<Var> {
        let x = dropout_rows(g, feat, self.dropout, rng)?;
        let logits = g.matmul_nt(x, self.weight)?;
        g.add_row(logits, self.bias)
    }
}

/// `normalize(W2 relu(W1 x + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    /// `[hidden x feat_dim]`.
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[proj_dim x hidden]`.
    pub w2: Tensor,
    pub b2: Tensor,
}

pub struct BoundProjectionHead {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ProjectionHead {
    pub fn new(feat_dim: usize, hidden: usize, proj_dim: usize, rng: &mut Rng) -> Self {
        // Fan-in scaling keeps the projection away from the constant b2
        // direction at initialization.
        let s1 = 1.0 / (feat_dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: Tensor::randn(vec![hidden, feat_dim], s1, rng).with_requires_grad(true),
            b1: Tensor::zeros(vec![hidden]).with_requires_grad(true),
            w2: Tensor::randn(vec![proj_dim, hidden], s2, rng).with_requires_grad(true),
            b2: Tensor::zeros(vec![proj_dim]).with_requires_grad(true),
        }
    }

    pub fn proj_dim(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph) -> BoundProjectionHead {
        BoundProjectionHead {
            w1: g.param(&self.w1),
            b1: g.param(&self.b1),
            w2: g.param(&self.w2),
            b2: g.param(&self.b2),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn project(&self, feat: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let head = self.bind(&mut g);
        let x = g.constant(Tensor::vector(feat.to_vec()));
        let out = head.forward(&mut g, x)?;
        Ok(g.data(out).to_vec())
    }

    pub fn to_checkpoint(&self, prefix: &str, ckpt: &mut Checkpoint) {
        ckpt.insert(format!("{prefix}w1"), &self.w1);
        ckpt.insert(format!("{prefix}b1"), &self.b1);
        ckpt.insert(format!("{prefix}w2"), &self.w2);
        ckpt.insert(format!("{prefix}b2"), &self.b2);
    }

    pub fn from_checkpoint(prefix: &str, ckpt: &Checkpoint) -> Result<Option<Self>> {
        let Some(w1) = ckpt.get(&format!("{prefix}w1")) else {
            return Ok(None);
        };
        let get = |k: &str| -> Result<Tensor> {
            Ok(ckpt.require(&format!("{prefix}{k}"))?.detached().with_requires_grad(true))
        };
        Ok(Some(Self {
            w1: w1.detached().with_requires_grad(true),
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        }))
    }
}

impl BoundProjectionHead {
    pub fn forward(&self, g: &mut Graph, feat: Var) -> Result<Var> {
        let h = g.matmul_nt(feat, self.w1)?;
        let h = g.add_row(h, self.b1)?;
        let h = g.relu(h);
        let z = g.matmul_nt(h, self.w2)?;
        let z = g.add_row(z, self.b2)?;
        g.l2_normalize(z)
    }
}

fn smoothing_targets(classes: usize, labels: &[usize], eps: f64) -> Result<Vec<f64>> {
    if !(0.0..=0.5).contains(&eps) {
        return Err(Error::config(format!("label smoothing {eps} outside [0, 0.5]")));
    }
    let (on, off) = if classes > 1 {
        (1.0 - eps, eps / (classes - 1) as f64)
    } else {
        (1.0, 0.0)
    };
    let mut q = vec![off; classes * labels.len()];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::data(format!("label {y} out of range for {classes} classes")));
        }
        q[r * classes + y] = on;
    }
    Ok(q)
}

/// Mean over rows of `-sum_c q_c log softmax(logits)_c` with
/// `q_label = 1 - eps` and `q_other = eps / (C - 1)`.
pub fn cross_entropy_smoothed(g: &mut Graph, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let classes = *shape.last().unwrap_or(&1);
    let rows = g.value(logits).rows();
    if rows != labels.len() {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
    }
    let q = smoothing_targets(classes, labels, eps)?;
    let lsm = g.log_softmax_rows(logits, None)?;
    let q = g.constant(Tensor::new(shape, q)?);
    let weighted = g.mul(lsm, q)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / rows as f64))
}

/// Loss for a single logit vector.
pub fn cross_entropy_smoothed_value(logits: &[f64], label: usize, eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(logits.to_vec()));
    let l = cross_entropy_smoothed(&mut g, x, &[label], eps)?;
    Ok(g.value(l).item())
}

/// Projections, labels and temperature for one contrastive batch.
#[derive(Clone, Debug)]
pub struct SupConBatch {
    /// `[batch x p]`, unit rows.
    pub projections: Tensor,
    pub labels: Vec<usize>,
    pub temperature: f64,
}

impl SupConBatch {
    pub fn new(projections: Tensor, labels: Vec<usize>, temperature: f64) -> Result<Self> {
        check_supcon_inputs(&projections, &labels, temperature)?;
        Ok(Self {
            projections,
            labels,
            temperature,
        })
    }
}

fn check_supcon_inputs(z: &Tensor, labels: &[usize], tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature {tau} must be positive")));
    }
    if z.rows() != labels.len() {
        return Err(Error::shape("supcon", z.shape(), &[labels.len()]));
    }
    for r in 0..z.rows() {
        let n = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Numeric {
                op: "supcon",
                detail: format!("projection row {r} has norm {n}, expected 1"),
            });
        }
    }
    Ok(())
}

/// Per-anchor positive weights `1 / (|P(i)| * n_valid)`; fails when no
/// anchor has a positive.
fn supcon_weights(labels: &[usize]) -> Result<Vec<f64>> {
    let n = labels.len();
    let positives: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&p| p != i && labels[p] == labels[i]).count())
        .collect();
    let valid = positives.iter().filter(|&&c| c > 0).count();
    if valid == 0 {
        return Err(Error::DegenerateBatch);
    }
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        if positives[i] == 0 {
            continue;
        }
        let wi = 1.0 / (positives[i] as f64 * valid as f64);
        for p in 0..n {
            if p != i && labels[p] == labels[i] {
                w[i * n + p] = wi;
            }
        }
    }
    Ok(w)
}

/// Supervised contrastive loss over `z: [n x p]` with unit rows.
///
/// For each anchor `i` with at least one positive,
/// `-1/|P(i)| sum_{p in P(i)} log(exp(z_i.z_p/tau) / sum_{a in A(i)} exp(z_i.z_a/tau))`,
/// averaged over those anchors. `A(i)` excludes `i` unless `include_self`.
pub fn supcon_loss(g: &mut Graph, z: Var, labels: &[usize], tau: f64, include_self: bool) -> Result<Var> {
    check_supcon_inputs(g.value(z), labels, tau)?;
    let n = labels.len();
    let weights = supcon_weights(labels)?;
    let sim = g.matmul_nt(z, z)?;
    let sim = g.scale(sim, 1.0 / tau);
    let mask = (0..n * n).map(|k| include_self || k / n != k % n).collect();
    let lsm = g.log_softmax_rows(sim, Some(mask))?;
    let w = g.constant(Tensor::matrix(n, n, weights)?);
    let weighted = g.mul(lsm, w)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0))
}

pub fn supcon_loss_value(batch: &SupConBatch) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(batch.projections.detached());
    let l = supcon_loss(&mut g, z, &batch.labels, batch.temperature, false)?;
    Ok(g.value(l).item())
}

/// `ce + lambda * supcon` on the graph.
pub fn hybrid_loss(g: &mut Graph, ce: Var, supcon: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("contrastive weight {lambda} must be non-negative")));
    }
    let weighted = g.scale(supcon, lambda);
    g.add(ce, weighted)
}

pub fn hybrid_loss_value(ce: f64, supcon: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("contrastive weight {lambda} must be non-negative")));
    }
    Ok(ce + lambda * supcon)
}

/// Per-step loss settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HybridLossState {
    pub lambda: f64,
    pub tau: f64,
    pub label_smoothing: f64,
}

impl HybridLossState {
    pub fn new(lambda: f64, tau: f64, label_smoothing: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::config(format!("lambda {lambda} must be non-negative")));
        }
        if !(tau > 0.0) {
            return Err(Error::config(format!("tau {tau} must be positive")));
        }
        if !(0.0..=0.5).contains(&label_smoothing) {
            return Err(Error::config(format!("label smoothing {label_smoothing} outside [0, 0.5]")));
        }
        Ok(Self {
            lambda,
            tau,
            label_smoothing,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeedTree, Stream};

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy_smoothed_value(&[0.0; 4], 2, 0.3).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let l = cross_entropy_smoothed_value(&[3f64.ln(), 0.0], 0, 0.0).unwrap();
        assert!((l + 0.75f64.ln()).abs() < 1e-12);
        assert!((l - 0.2877).abs() < 1e-4);
        let l = cross_entropy_smoothed_value(&[0.0, 0.0], 1, 0.2).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        assert!(matches!(cross_entropy_smoothed_value(&[0.0, 1.0], 2, 0.1), Err(Error::Data(_))));
        assert!(cross_entropy_smoothed_value(&[0.0, 1.0], 0, 0.7).is_err());
    }

    #[test]
    fn supcon_examples() {
        let z = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let b = SupConBatch::new(z, vec![0, 0], 1.0).unwrap();
        assert!(supcon_loss_value(&b).unwrap().abs() < 1e-15);

        let z = Tensor::matrix(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = SupConBatch::new(z, vec![0, 0, 1], 1.0).unwrap();
        let expect = (1.0 + (-1f64).exp()).ln();
        assert!((supcon_loss_value(&b).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);

        let z = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = SupConBatch::new(z, vec![0, 1], 1.0).unwrap();
        assert!(matches!(supcon_loss_value(&b), Err(Error::DegenerateBatch)));
    }

    #[test]
    fn supcon_validates_inputs() {
        let z = Tensor::matrix(2, 2, vec![2.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(SupConBatch::new(z.clone(), vec![0, 0], 1.0).is_err());
        let z = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(SupConBatch::new(z, vec![0, 0], 0.0).is_err());
    }

    #[test]
    fn supcon_with_self_in_denominator_differs() {
        let z = Tensor::matrix(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let zv = g.constant(z);
        let with_self = supcon_loss(&mut g, zv, &[0, 0, 1], 1.0, true).unwrap();
        // A(i) = {self, positive, negative}: -log(e / (2e + 1))
        let e = 1f64.exp();
        let expect = -(e / (2.0 * e + 1.0)).ln();
        assert!((g.value(with_self).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn hybrid_arithmetic() {
        assert_eq!(hybrid_loss_value(1.0, 2.0, 0.0).unwrap(), 1.0);
        assert!((hybrid_loss_value(1.0, 2.0, 0.3).unwrap() - 1.6).abs() < 1e-15);
        assert!(hybrid_loss_value(1.0, 2.0, -0.1).is_err());
        assert!(HybridLossState::new(0.1, 0.2, 0.6).is_err());
        assert!(HybridLossState::new(0.1, 0.0, 0.1).is_err());
    }

    #[test]
    fn heads_forward() {
        let mut rng = SeedTree::new(0).rng(Stream::Init);
        let proj = ProjectionHead::new(4, 8, 3, &mut rng);
        let z = proj.project(&[0.1, -0.4, 0.3, 0.9]).unwrap();
        assert!((z.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);

        let mut head = ClassificationHead::new(3, 4, 0.0, &mut rng);
        head.weight = Tensor::zeros(vec![3, 4]);
        head.bias = Tensor::zeros(vec![3]);
        assert_eq!(head.logits(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0; 3]);
        assert!(head.logits(&[1.0]).is_err());
    }

    #[test]
    fn projection_relu_blocks_negative_hidden_units() {
        // hidden = relu([x0 - x1, x1 - x0]); with x = (1, 2) the first unit is
        // -1 and gets cut, so the output only sees the second unit.
        let proj = ProjectionHead {
            w1: Tensor::matrix(2, 2, vec![1.0, -1.0, -1.0, 1.0]).unwrap(),
            b1: Tensor::zeros(vec![2]),
            w2: Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap(),
            b2: Tensor::zeros(vec![2]),
        };
        let mut g = Graph::new();
        let head = proj.bind(&mut g);
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let h = g.matmul_nt(x, head.w1).unwrap();
        let h = g.add_row(h, head.b1).unwrap();
        let h = g.relu(h);
        assert_eq!(g.data(h), &[0.0, 1.0]);
        // W2 h = (0, 1) -> normalized (0, 1)
        let z = proj.project(&[1.0, 2.0]).unwrap();
        assert!((z[0]).abs() < 1e-15 && (z[1] - 1.0).abs() < 1e-15);
    }
}
