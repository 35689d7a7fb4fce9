//! Experiment commands. Each writes its outputs under `cfg.out` together
//! with the resolved config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use serde::Serialize;

use fslab::checkpoint::Checkpoint;
use fslab::data::{
    augment, build_pools, load_manifest, sample_episode, synth_dataset_with, write_dataset, AugmentLevel, Dataset,
    LabeledImage, Pool,
};
use fslab::encoder::{init_encoder, EncoderWeights};
use fslab::lora::LoraSet;
use fslab::rng::{SeedTree, Stream};
use fslab::strategies::{
    compactness_report, embed_images, embed_raw, prototype_accuracy, run_training, warm_start, write_embeddings,
    EmbeddingRow, EpochMetrics, PriorMode, Strategy, TextPriorProvider,
};

use crate::config::{DatasetSource, ExperimentConfig, ECHO_FILE};
use crate::error::{CliError, CliResult};

pub const SWEEP_FILE: &str = "prototype_sweep.csv";
pub const SWEEP_RUNS_FILE: &str = "prototype_runs.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.fslw";
pub const TRAIN_SUMMARY_CSV: &str = "train_summary.csv";
pub const TRAIN_SUMMARY_JSON: &str = "train_summary.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.emb";

/// Loaded dataset, pools and frozen encoder.
pub struct Context {
    pub dataset: Dataset,
    pub train: Pool,
    pub test: Pool,
    pub weights: EncoderWeights,
    /// Adapters stored alongside the encoder in a checkpoint, if any.
    pub lora: Option<LoraSet>,
}

fn load_dataset(cfg: &ExperimentConfig, image_size: usize) -> CliResult<Dataset> {
    Ok(match &cfg.dataset {
        DatasetSource::Synth(s) => synth_dataset_with(&fslab::data::SynthConfig {
            image_size,
            ..s.clone()
        })?,
        DatasetSource::Manifest(path) => load_manifest(path, image_size)?,
    })
}

fn has_prefix(ckpt: &Checkpoint, prefix: &str) -> bool {
    ckpt.names().any(|n| n.starts_with(prefix))
}

/// Builds the encoder, dataset and pools. `checkpoint` overrides the
/// configured encoder checkpoint and may also carry adapters.
pub fn prepare(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> CliResult<Context> {
    let ckpt_path = checkpoint.or(cfg.encoder_checkpoint.as_deref());
    if ckpt_path.is_some() && cfg.warm_start.is_some() {
        return Err(CliError::config("warm_start and an encoder checkpoint are mutually exclusive"));
    }
    let (weights, lora) = match ckpt_path {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if !has_prefix(&ckpt, "encoder.") {
                return Err(CliError::data(format!("{}: no encoder weights", path.display())));
            }
            let weights = EncoderWeights::from_checkpoint("encoder.", &ckpt)?;
            let lora = LoraSet::from_checkpoint("lora.", &ckpt, &weights)?;
            (weights, lora)
        }
        None => (init_encoder(&cfg.encoder)?, None),
    };
    let dataset = load_dataset(cfg, weights.config.image_size)?;
    let (train, test) = build_pools(&dataset, cfg.pool_per_class)?;
    let weights = match &cfg.warm_start {
        Some(ws) => warm_start(&weights, dataset.num_classes(), ws)?.0,
        None => weights,
    };
    Ok(Context {
        dataset,
        train,
        test,
        weights,
        lora,
    })
}

/// Every train-split image grouped by class; the candidates for held-out
/// prior images.
fn prior_pool(dataset: &Dataset) -> Pool {
    let mut by_class = vec![Vec::new(); dataset.num_classes()];
    for img in &dataset.train {
        by_class[img.class_id].push(img.clone());
    }
    Pool { by_class }
}

fn prepare_out(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(ECHO_FILE), cfg.to_text())?;
    Ok(cfg.out.clone())
}

/// `f` over `items` on up to `jobs` threads, results in input order.
pub fn par_cells<T, U, F>(items: &[T], jobs: usize, f: F) -> CliResult<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> CliResult<U> + Sync,
{
    let workers = jobs.min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<CliResult<Vec<U>>> = thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<CliResult<Vec<U>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub seed: u64,
    pub n_shot: usize,
    pub alpha: f64,
    pub accuracy: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Prototype accuracy over the shot and alpha grids for every seed.
/// `prototype_sweep.csv` holds seed means, `prototype_runs.csv` every cell.
pub fn cmd_prototype(cfg: &ExperimentConfig) -> CliResult<Vec<SweepRow>> {
    let ctx = prepare(cfg, None)?;
    let out = prepare_out(cfg)?;
    let depth = ctx.train.depth();
    if let Some(&n) = cfg.shots.iter().find(|&&n| n > depth) {
        return Err(CliError::config(format!("shot count {n} exceeds the pool depth {depth}")));
    }
    let needs_priors = cfg.alphas.iter().any(|&a| a > 0.0);
    let file_priors = match (&cfg.priors.mode, &cfg.priors.path) {
        (PriorMode::File, Some(path)) => Some(TextPriorProvider::load(
            path,
            ctx.weights.config.output_dim,
            ctx.dataset.num_classes(),
        )?),
        _ => None,
    };
    let candidates = prior_pool(&ctx.dataset);
    let query = embed_images(&ctx.weights, None, &ctx.test.flatten())?;

    let cells: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.shots.iter().map(move |&n| (s, n)))
        .collect();
    let per_cell = par_cells(&cells, cfg.jobs, |&(seed, n_shot)| {
        let ep = sample_episode(&ctx.train, &ctx.test, n_shot, seed)?;
        let support = embed_images(&ctx.weights, None, &ep.support)?;
        let provider = match (cfg.priors.mode, needs_priors) {
            (PriorMode::HeldoutProxy, true) => {
                TextPriorProvider::heldout_proxy(&ctx.weights, &candidates, &ep.support, cfg.priors.per_class)?
            }
            (PriorMode::File, true) => file_priors.clone().expect("loaded above"),
            _ => TextPriorProvider::none(),
        };
        cfg.alphas
            .iter()
            .map(|&alpha| {
                Ok(SweepRow {
                    seed,
                    n_shot,
                    alpha,
                    accuracy: prototype_accuracy(&support, &query, &provider, alpha)?,
                })
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    let rows: Vec<SweepRow> = per_cell.into_iter().flatten().collect();

    let mut runs = String::from("seed,n_shot,alpha,accuracy\n");
    for r in &rows {
        let _ = writeln!(runs, "{},{},{},{}", r.seed, r.n_shot, r.alpha, r.accuracy);
    }
    fs::write(out.join(SWEEP_RUNS_FILE), runs)?;
    let mut sweep = String::from("n_shot,alpha,accuracy\n");
    for &n in &cfg.shots {
        for &a in &cfg.alphas {
            let accs: Vec<f64> = rows
                .iter()
                .filter(|r| r.n_shot == n && r.alpha == a)
                .map(|r| r.accuracy)
                .collect();
            let _ = writeln!(sweep, "{n},{a},{}", mean_std(&accs).0);
        }
    }
    fs::write(out.join(SWEEP_FILE), sweep)?;
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub run: String,
    pub strategy: String,
    pub n_shot: usize,
    pub augment: String,
    pub seed: u64,
    pub lambda_shape: String,
    pub initial_accuracy: Option<f64>,
    pub final_accuracy: f64,
    pub trainable_params: usize,
    pub steps: usize,
    pub encoder_unchanged: bool,
    pub wall_time_secs: f64,
    pub epochs: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupSummary {
    pub augment: String,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub strategy: String,
    pub n_shot: usize,
    pub groups: Vec<GroupSummary>,
    pub runs: Vec<RunSummary>,
}

/// Directory name of one training run.
pub fn run_name(strategy: Strategy, n_shot: usize, augment: AugmentLevel, seed: u64) -> String {
    format!("{strategy}_{n_shot}shot_{augment}_seed{seed}")
}

/// One training run per augmentation level and seed. Each run directory
/// gets the epoch and step CSVs, a JSON summary and a checkpoint with the
/// frozen encoder, adapters and heads.
pub fn cmd_train(cfg: &ExperimentConfig) -> CliResult<TrainSummary> {
    let strategy = cfg.train.strategy;
    if strategy == Strategy::Prototype {
        return Err(CliError::config("strategy = prototype has no training loop; use the prototype command"));
    }
    cfg.train.validate()?;
    let ctx = prepare(cfg, None)?;
    let out = prepare_out(cfg)?;
    let cells: Vec<(AugmentLevel, u64)> = cfg
        .augment
        .iter()
        .flat_map(|&a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let runs = par_cells(&cells, cfg.jobs, |&(aug, seed)| {
        let mut tc = cfg.train.clone();
        tc.augment = aug;
        tc.seed = seed;
        let ep = sample_episode(&ctx.train, &ctx.test, tc.n_shot, seed)?;
        let outcome = run_training(&ctx.weights, &ep, &tc)?;
        let m = &outcome.metrics;
        let name = run_name(strategy, tc.n_shot, aug, seed);
        let dir = out.join(&name);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(METRICS_FILE), m.epoch_csv())?;
        fs::write(dir.join(STEPS_FILE), m.step_csv())?;
        let mut ckpt = Checkpoint::new();
        ctx.weights.to_checkpoint("encoder.", &mut ckpt);
        if let Some(l) = &outcome.lora {
            l.to_checkpoint("lora.", &mut ckpt);
        }
        outcome.head.to_checkpoint("head.cls.", &mut ckpt);
        if let Some(p) = &outcome.proj {
            p.to_checkpoint("head.proj.", &mut ckpt);
        }
        ckpt.save(dir.join(CHECKPOINT_FILE))?;
        let summary = RunSummary {
            run: name,
            strategy: strategy.to_string(),
            n_shot: tc.n_shot,
            augment: aug.to_string(),
            seed,
            lambda_shape: fslab::strategies::train::lambda_shape_label(&tc),
            initial_accuracy: m.initial_accuracy,
            final_accuracy: m.final_accuracy,
            trainable_params: m.trainable_params,
            steps: m.steps.len(),
            encoder_unchanged: m.encoder_unchanged(),
            wall_time_secs: m.wall_time_secs,
            epochs: m.epochs.clone(),
        };
        fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
        Ok(summary)
    })?;

    let groups: Vec<GroupSummary> = cfg
        .augment
        .iter()
        .map(|a| {
            let accs: Vec<f64> = runs
                .iter()
                .filter(|r| r.augment == a.to_string())
                .map(|r| r.final_accuracy)
                .collect();
            let (mean, std) = mean_std(&accs);
            GroupSummary {
                augment: a.to_string(),
                runs: accs.len(),
                mean_accuracy: mean,
                std_accuracy: std,
            }
        })
        .collect();
    let mut csv = String::from("augment,runs,mean_accuracy,std_accuracy\n");
    for g in &groups {
        let _ = writeln!(csv, "{},{},{},{}", g.augment, g.runs, g.mean_accuracy, g.std_accuracy);
    }
    fs::write(out.join(TRAIN_SUMMARY_CSV), csv)?;
    let summary = TrainSummary {
        strategy: strategy.to_string(),
        n_shot: cfg.train.n_shot,
        groups,
        runs,
    };
    fs::write(out.join(TRAIN_SUMMARY_JSON), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct AnalyzeArgs {
    pub checkpoint: Option<PathBuf>,
    pub augment: AugmentLevel,
    /// Keep this many randomly chosen classes.
    pub subsample: Option<usize>,
    /// File-name label; defaults to `{frozen|adapted}_{augment}`.
    pub label: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalyzeSummary {
    pub label: String,
    pub encoder: &'static str,
    pub augment: String,
    pub classes: Vec<String>,
    pub images: usize,
    pub intra: f64,
    pub inter: f64,
    pub ratio: f64,
    pub projection_method: &'static str,
}

fn pick_classes(num_classes: usize, keep: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut ids: Vec<usize> = (0..num_classes).collect();
    if keep >= num_classes {
        return ids;
    }
    ids.shuffle(&mut SeedTree::new(seed).child(11).rng(Stream::Sampler));
    ids.truncate(keep);
    ids.sort_unstable();
    ids
}

/// Compactness of the test pool's embeddings under one condition, written
/// as `compactness_<label>.json` and `projection_<label>.csv`.
pub fn cmd_analyze(cfg: &ExperimentConfig, args: &AnalyzeArgs) -> CliResult<AnalyzeSummary> {
    let ctx = prepare(cfg, args.checkpoint.as_deref())?;
    let out = prepare_out(cfg)?;
    let seed = cfg.seeds[0];
    let mut images = ctx.test.flatten();
    let mut names = ctx.dataset.class_names.clone();
    if let Some(keep) = args.subsample {
        if keep == 0 {
            return Err(CliError::config("subsample must keep at least one class"));
        }
        let ids = pick_classes(ctx.dataset.num_classes(), keep, seed);
        images.retain(|i| ids.contains(&i.class_id));
        names = ids.iter().map(|&c| names[c].clone()).collect();
    }
    let emb = match args.augment {
        AugmentLevel::None => embed_images(&ctx.weights, ctx.lora.as_ref(), &images)?,
        level => {
            let mut rng = SeedTree::new(seed).child(7).rng(Stream::Augment);
            let aug: Vec<LabeledImage> = images.iter().map(|i| augment(i, level, &mut rng)).collect();
            embed_raw(&ctx.weights, ctx.lora.as_ref(), &aug)?
        }
    };
    let report = compactness_report(&emb.vectors, &emb.labels)?;
    let encoder = if ctx.lora.is_some() { "adapted" } else { "frozen" };
    let label = args
        .label
        .clone()
        .unwrap_or_else(|| format!("{encoder}_{}", args.augment));
    let mut csv = String::from("x,y,label\n");
    for (x, y, l) in &report.projection_2d {
        let _ = writeln!(csv, "{x},{y},{l}");
    }
    fs::write(out.join(format!("projection_{label}.csv")), csv)?;
    let summary = AnalyzeSummary {
        label: label.clone(),
        encoder,
        augment: args.augment.to_string(),
        classes: names,
        images: images.len(),
        intra: report.intra,
        inter: report.inter,
        ratio: report.ratio,
        projection_method: report.projection_method,
    };
    fs::write(
        out.join(format!("compactness_{label}.json")),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

/// Embeds every train-split image and writes one `fslab-emb v1` row per
/// image; `template_id` counts images within a class. Returns the path.
pub fn cmd_export_embeddings(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    output: Option<&Path>,
) -> CliResult<PathBuf> {
    let ctx = prepare(cfg, checkpoint)?;
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => prepare_out(cfg)?.join(EMBEDDINGS_FILE),
    };
    let emb = embed_images(&ctx.weights, ctx.lora.as_ref(), &ctx.dataset.train)?;
    let mut seen = vec![0usize; ctx.dataset.num_classes()];
    let rows: Vec<EmbeddingRow> = emb
        .vectors
        .into_iter()
        .zip(emb.labels)
        .map(|(vector, class_id)| {
            let template_id = seen[class_id];
            seen[class_id] += 1;
            EmbeddingRow {
                class_id,
                template_id,
                vector,
            }
        })
        .collect();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_embeddings(&path, ctx.weights.config.output_dim, &rows)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PriorCheck {
    pub dim: usize,
    pub classes: usize,
    pub templates: usize,
}

/// Checks an embedding file against the encoder width and the dataset's
/// classes.
pub fn cmd_import_priors(cfg: &ExperimentConfig, path: &Path) -> CliResult<PriorCheck> {
    let dim = match &cfg.encoder_checkpoint {
        Some(p) => EncoderWeights::from_checkpoint("encoder.", &Checkpoint::load(p)?)?.config.output_dim,
        None => cfg.encoder.output_dim,
    };
    let classes = load_dataset(cfg, cfg.encoder.image_size)?.num_classes();
    let provider = TextPriorProvider::load(path, dim, classes)?;
    let templates = provider.rows().len();
    Ok(PriorCheck {
        dim,
        classes: provider.num_classes(),
        templates,
    })
}

/// Writes the configured synthetic dataset as PPM images plus a manifest.
pub fn cmd_synth(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let DatasetSource::Synth(s) = &cfg.dataset else {
        return Err(CliError::config("synth needs dataset = synth"));
    };
    let ds = synth_dataset_with(s)?;
    let out = prepare_out(cfg)?;
    Ok(write_dataset(&ds, out)?)
}
