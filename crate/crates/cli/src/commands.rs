use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use cellseg_core::analysis::{
    run_evolution, run_experiment, write_series_csv, EvolutionConfig, ExperimentInputs, ExperimentOptions,
};
use cellseg_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use cellseg_core::data::DatasetConfig;
use cellseg_core::runconfig::{resolve_output, TrainSection};
use cellseg_core::training::{TrainConfig, Trainer};
use cellseg_core::{Automaton, RunConfig};
use serde_json::json;

use crate::probe;

/// A dataset argument: inline JSON, a JSON file, or `synthetic` for the defaults.
pub fn parse_dataset(arg: &str) -> Result<DatasetConfig> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else if arg == "synthetic" {
        return Ok(DatasetConfig::default());
    } else {
        std::fs::read_to_string(arg).with_context(|| format!("reading dataset config {arg}"))?
    };
    serde_json::from_str(&text).with_context(|| format!("parsing dataset config {arg}"))
}

pub fn load_model(path: &Path) -> Result<(Automaton<f32>, CheckpointMeta)> {
    let (params, arch, meta) =
        load_checkpoint::<f32>(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((Automaton::new(arch, params)?, meta))
}

/// The run a checkpoint came from, as far as its metadata records it.
fn run_from_checkpoint(model: &Automaton<f32>, meta: &CheckpointMeta, dataset: DatasetConfig) -> RunConfig {
    let train: TrainConfig = meta
        .extra
        .get("train")
        .and_then(|t| serde_json::from_value(t.clone()).ok())
        .unwrap_or_default();
    RunConfig {
        seed: train.seed,
        output_dir: PathBuf::from("experiments"),
        dataset,
        arch: model.cfg.clone(),
        schedule: train.schedule.clone(),
        train: TrainSection {
            lr: train.lr,
            batch: train.batch,
            steps: train.steps,
            pool_size: train.pool_size,
            checkpoint_every: train.checkpoint_every,
        },
    }
    .resolved()
}

pub fn train(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let out = cfg.output_path();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.json"), cfg.to_json()).with_context(|| format!("writing into {}", out.display()))?;
    let (train, _) = cfg.dataset.load()?;
    let mut trainer: Trainer<f32> = Trainer::new(cfg.train_config(), train)?;
    let total = cfg.train.steps;
    let every = (total / 20).max(1) as u64;
    let summary = trainer.run(Some(&out), |r| {
        if r.step % every == 0 {
            log::info!("step {}/{total} loss {:?} mean_gate {:?}", r.step, r.loss, r.mean_gate);
        }
    })?;
    println!(
        "{}",
        json!({
            "output_dir": out,
            "steps": summary.steps,
            "last_loss": summary.last_loss,
            "seconds": summary.seconds,
            "checkpoints": summary.checkpoints,
        })
    );
    Ok(())
}

pub fn eval(checkpoint: &Path, dataset: &str, steps: usize, limit: Option<usize>, out: Option<&Path>) -> Result<()> {
    let (model, _) = load_model(checkpoint)?;
    let (_, eval) = parse_dataset(dataset)?.load()?;
    if eval.is_empty() {
        bail!("the dataset's eval split is empty");
    }
    let n = limit.unwrap_or(eval.len()).clamp(1, eval.len());
    let cfg = EvolutionConfig { steps, snapshot_steps: vec![], ..EvolutionConfig::default() };
    let ev = run_evolution(&model, &eval[..n], &cfg)?;
    if let Some(dir) = out {
        let dir = resolve_output(dir);
        std::fs::create_dir_all(&dir)?;
        write_series_csv(&dir.join("eval.csv"), &ev.series())?;
    }
    let last = ev.records.last().context("no steps recorded")?;
    println!(
        "{}",
        json!({
            "samples": n,
            "step": last.step,
            "iou": { "background": last.iou.iou[0], "object": last.iou.iou[1], "boundary": last.iou.iou[2] },
            "pooling": "pixels pooled over the split",
            "truncated_at": ev.truncated_at,
        })
    );
    Ok(())
}

#[derive(Debug, Default)]
pub struct ExperimentArgs {
    pub checkpoint: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub dataset: Option<String>,
    pub metrics: Option<PathBuf>,
    pub options: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub run_id: Option<String>,
    pub steps: Option<usize>,
    pub eval_limit: Option<usize>,
    pub train_steps: Option<usize>,
    pub seed: Option<u64>,
}

pub fn experiment(name: &str, a: &ExperimentArgs) -> Result<()> {
    let mut opts = match &a.options {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing options {}", p.display()))?
        }
        None => ExperimentOptions::default(),
    };
    if let Some(v) = &a.run_id {
        opts.run_id = v.clone();
    }
    if let Some(v) = a.steps {
        opts.steps = v;
    }
    if a.eval_limit.is_some() {
        opts.eval_limit = a.eval_limit;
    }
    if a.train_steps.is_some() {
        opts.train_steps = a.train_steps;
    }
    if let Some(v) = a.seed {
        opts.seed = v;
    }
    let run = a.config.as_deref().map(RunConfig::load).transpose()?;
    let dataset = match (&a.dataset, &run) {
        (Some(d), _) => parse_dataset(d)?,
        (None, Some(r)) => r.dataset.clone(),
        (None, None) => DatasetConfig::default(),
    };
    let mut inputs = ExperimentInputs { run, ..ExperimentInputs::default() };
    if let Some(ckpt) = &a.checkpoint {
        let (model, meta) = load_model(ckpt)?;
        if inputs.run.is_none() {
            inputs.run = Some(run_from_checkpoint(&model, &meta, dataset.clone()));
        }
        inputs.model = Some(model);
        inputs.metrics = a.metrics.clone().or_else(|| {
            let m = ckpt.with_file_name(cellseg_core::training::metrics::METRICS_FILE);
            m.exists().then_some(m)
        });
    } else {
        inputs.metrics = a.metrics.clone();
    }
    if matches!(name, "evolution" | "image_change" | "shift" | "adversarial") {
        inputs.eval = dataset.load()?.1;
    }
    let out = resolve_output(a.out.as_deref().unwrap_or(Path::new("experiments")));
    let report = run_experiment(name, &inputs, &opts, &out)?;
    println!("{}", json!({ "experiment": report.name, "summary": report.summary, "files": report.files }));
    Ok(())
}

pub fn serve(checkpoint: &Path, port: u16, dataset: &str, seed: u64, paused: bool) -> Result<()> {
    let (model, _) = load_model(checkpoint)?;
    let (_, eval) = parse_dataset(dataset)?.load()?;
    let sample = eval.into_iter().next().context("the dataset's eval split is empty")?;
    let listener = TcpListener::bind(("0.0.0.0", port)).with_context(|| format!("binding port {port}"))?;
    log::info!("probe service listening on {}", listener.local_addr()?);
    probe::serve(listener, Arc::new(model), sample, seed, paused)
}

/// Re-encodes a checkpoint and checks the copy decodes to identical tensors.
pub fn export(checkpoint: &Path, out: &Path) -> Result<()> {
    let (params, arch, meta) =
        load_checkpoint::<f32>(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    save_checkpoint(&params, &arch, &meta, out).with_context(|| format!("writing {}", out.display()))?;
    let (again, arch2, meta2) = load_checkpoint::<f32>(out)?;
    let same = arch2 == arch
        && meta2 == meta
        && again
            .slots()
            .iter()
            .zip(params.slots())
            .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    if !same {
        bail!("exported checkpoint does not round-trip");
    }
    println!("{}", json!({ "exported": out, "params": params.numel() }));
    Ok(())
}
