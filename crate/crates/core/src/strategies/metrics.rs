use std::fmt::Write as _;

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Present when per-epoch evaluation is enabled.
    pub test_acc: Option<f64>,
    pub lr: f64,
    pub tau: f64,
    pub lambda: f64,
    /// Mean global gradient norm over the epoch's steps.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub supcon: Option<f64>,
    pub lr: f64,
    pub tau: f64,
    pub lambda: f64,
    pub grad_norm: f64,
}

/// Outcome of one strategy run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub strategy: String,
    pub n_shot: usize,
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepMetrics>,
    /// Accuracy before any update, when the strategy trains.
    pub initial_accuracy: Option<f64>,
    pub final_accuracy: f64,
    pub trainable_params: usize,
    pub wall_time_secs: f64,
    pub encoder_checksum_before: u64,
    pub encoder_checksum_after: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    pub fn new(strategy: &str, n_shot: usize) -> Self {
        Self {
            strategy: strategy.to_string(),
            n_shot,
            epochs: Vec::new(),
            steps: Vec::new(),
            initial_accuracy: None,
            final_accuracy: 0.0,
            trainable_params: 0,
            wall_time_secs: 0.0,
            encoder_checksum_before: 0,
            encoder_checksum_after: 0,
        }
    }

    pub fn encoder_unchanged(&self) -> bool {
        self.encoder_checksum_before == self.encoder_checksum_after
    }

    /// One row per epoch. Contains no timing, so identical runs give
    /// identical bytes.
    pub fn epoch_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,test_acc,lr,tau,lambda,grad_norm\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                e.epoch,
                e.train_loss,
                e.train_acc,
                opt(e.test_acc),
                e.lr,
                e.tau,
                e.lambda,
                e.grad_norm
            );
        }
        s
    }

    pub fn step_csv(&self) -> String {
        let mut s = String::from("step,epoch,loss,ce,supcon,lr,tau,lambda,grad_norm\n");
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                r.loss,
                r.ce,
                opt(r.supcon),
                r.lr,
                r.tau,
                r.lambda,
                r.grad_norm
            );
        }
        s
    }
}
