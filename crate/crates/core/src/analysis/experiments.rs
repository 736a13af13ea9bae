//! Named experiment drivers. Each one writes `{experiment}_{runid}.csv` plus PNG
//! snapshots `{experiment}_{runid}_{step}.png` into an output directory and returns a
//! JSON summary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::adversarial::{adversarial_perturb, AdversarialConfig};
use super::evolution::{run_protocol, Evolution, EvolutionConfig, Protocol};
use super::regime::{regime_trace, RegimeConfig};
use super::trace::{write_series_csv, TraceSeries};
use crate::config::ArchConfig;
use crate::data::perturb::Rect;
use crate::data::{Sample, BOUNDARY, OBJECT};
use crate::error::{CoreError, Result};
use crate::model::Automaton;
use crate::params::{is_spatial_filter, param_count, UpdateRuleParams};
use crate::render::{hstack, image_to_rgb, prediction_rgb};
use crate::runconfig::RunConfig;
use crate::training::metrics::read_mean_gate;
use crate::training::{TrainConfig, Trainer};
use crate::NormKind;

pub const EXPERIMENTS: [&str; 11] = [
    "evolution",
    "image_change",
    "shift",
    "regime",
    "adversarial",
    "highres_compare",
    "sweep_state_size",
    "sweep_resolution",
    "ablate_residual",
    "ablate_random_filters",
    "ablate_norm",
];

/// Knobs shared by the drivers; each driver reads the ones it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentOptions {
    pub run_id: String,
    pub seed: u64,
    /// CA steps per evaluation.
    pub steps: usize,
    pub record_every: usize,
    pub snapshot_steps: Vec<usize>,
    /// Use at most this many eval samples.
    pub eval_limit: Option<usize>,
    /// Steps between image swaps.
    pub change_period: usize,
    pub changes: usize,
    /// Steps between shifts and the largest offset per axis.
    pub shift_period: usize,
    pub shift_magnitude: usize,
    /// Optimizer steps for each variant trained by sweeps and ablations; defaults to
    /// the base config's `train.steps`.
    pub train_steps: Option<usize>,
    pub state_sizes: Vec<usize>,
    pub resolutions: Vec<usize>,
    pub norm_kinds: Vec<NormKind>,
    pub adversarial: AdversarialConfig,
    pub regime: RegimeConfig,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            run_id: "run".into(),
            seed: 0,
            steps: 400,
            record_every: 1,
            snapshot_steps: vec![0, 10, 40, 100, 400],
            eval_limit: None,
            change_period: 40,
            changes: 20,
            shift_period: 10,
            shift_magnitude: 8,
            train_steps: None,
            state_sizes: vec![16, 32, 48],
            resolutions: vec![32, 48, 64],
            norm_kinds: vec![NormKind::None, NormKind::BatchLive, NormKind::Instance, NormKind::Channel],
            adversarial: AdversarialConfig::default(),
            regime: RegimeConfig::default(),
        }
    }
}

/// What a driver may consume. Evaluation drivers need `model` and `eval`; training
/// drivers need `run`; `regime` needs `metrics`.
#[derive(Default)]
pub struct ExperimentInputs {
    pub model: Option<Automaton<f32>>,
    pub run: Option<RunConfig>,
    pub eval: Vec<Sample>,
    pub metrics: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub name: String,
    pub summary: Value,
    pub files: Vec<PathBuf>,
}

/// Per-swap outcome of an image-change run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChangeStat {
    pub step: usize,
    /// Object IOU on the step before the swap.
    pub before: f64,
    /// Object IOU at the swap step, against the new label.
    pub at_change: f64,
    /// Best object IOU from the swap step until the step before the next one.
    pub best_after: f64,
    pub dropped: bool,
    /// `best_after >= 0.9 * before`.
    pub recovered: bool,
}

/// Swaps whose following `period` steps were not all recorded are skipped.
pub fn change_stats(ev: &Evolution, period: usize) -> Vec<ChangeStat> {
    let obj = ev.object_iou();
    ev.events
        .iter()
        .filter_map(|&t| {
            let before = obj.at(t.checked_sub(1)?)?;
            let at_change = obj.at(t)?;
            let after = obj.window(t, t + period - 1);
            if after.len() < period {
                return None;
            }
            let best_after = after.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Some(ChangeStat {
                step: t,
                before,
                at_change,
                best_after,
                dropped: at_change < before,
                recovered: best_after >= 0.9 * before,
            })
        })
        .collect()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Object IOU at `at` and its mean over `[lo, hi]`.
fn stability(ev: &Evolution, at: usize, lo: usize, hi: usize) -> Value {
    let obj = ev.object_iou();
    json!({
        "object_iou_at": { "step": at, "value": obj.at(at) },
        "object_iou_mean": { "from": lo, "to": hi, "value": mean(&obj.window(lo, hi)) },
        "truncated_at": ev.truncated_at,
    })
}

fn fraction(flags: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for f in flags {
        hit += f as usize;
        n += 1;
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

struct Out<'a> {
    dir: &'a Path,
    name: &'a str,
    run_id: &'a str,
    files: Vec<PathBuf>,
}

impl Out<'_> {
    fn csv_path(&self) -> PathBuf {
        self.dir.join(format!("{}_{}.csv", self.name, self.run_id))
    }

    fn series(&mut self, series: &[TraceSeries]) -> Result<()> {
        let path = self.csv_path();
        write_series_csv(&path, series)?;
        self.files.push(path);
        Ok(())
    }

    fn rows(&mut self, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let path = self.csv_path();
        let err = |e: csv::Error| CoreError::io(&path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        w.write_record(header).map_err(err)?;
        for r in rows {
            w.write_record(r).map_err(err)?;
        }
        w.flush().map_err(|e| CoreError::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    fn png(&mut self, step: usize, img: &image::RgbImage) -> Result<()> {
        self.png_tagged("", step, img)
    }

    fn png_tagged(&mut self, tag: &str, step: usize, img: &image::RgbImage) -> Result<()> {
        let path = self.dir.join(format!("{}_{}{tag}_{step}.png", self.name, self.run_id));
        img.save(&path)
            .map_err(|e| CoreError::io(&path, std::io::Error::other(e)))?;
        self.files.push(path);
        Ok(())
    }

    fn snapshots(&mut self, ev: &Evolution) -> Result<()> {
        for s in &ev.snapshots {
            self.png(s.step, &s.panel)?;
        }
        Ok(())
    }
}

fn need_model(inputs: &ExperimentInputs) -> Result<&Automaton<f32>> {
    inputs
        .model
        .as_ref()
        .ok_or_else(|| CoreError::config("this experiment needs a checkpoint"))
}

fn need_eval(inputs: &ExperimentInputs, opts: &ExperimentOptions) -> Result<Vec<Sample>> {
    if inputs.eval.is_empty() {
        return Err(CoreError::data("this experiment needs eval samples"));
    }
    let n = opts.eval_limit.unwrap_or(inputs.eval.len()).clamp(1, inputs.eval.len());
    Ok(inputs.eval[..n].to_vec())
}

fn need_run(inputs: &ExperimentInputs) -> Result<&RunConfig> {
    inputs
        .run
        .as_ref()
        .ok_or_else(|| CoreError::config("this experiment trains variants and needs a run config"))
}

fn evo_config(opts: &ExperimentOptions, steps: usize, record_every: usize) -> EvolutionConfig {
    EvolutionConfig {
        steps,
        record_every,
        seed: opts.seed,
        snapshot_steps: opts.snapshot_steps.clone(),
        run_id: opts.run_id.clone(),
        ..EvolutionConfig::default()
    }
}

/// Runs experiment `name`, writing artifacts into `out_dir`.
pub fn run_experiment(
    name: &str,
    inputs: &ExperimentInputs,
    opts: &ExperimentOptions,
    out_dir: &Path,
) -> Result<ExperimentReport> {
    if !EXPERIMENTS.contains(&name) {
        return Err(CoreError::config(format!(
            "unknown experiment `{name}`; valid names: {}",
            EXPERIMENTS.join(", ")
        )));
    }
    if opts.change_period == 0 || opts.shift_period == 0 {
        return Err(CoreError::config("change_period and shift_period must be >= 1"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let mut out = Out { dir: out_dir, name, run_id: &opts.run_id, files: Vec::new() };
    let summary = match name {
        "evolution" | "image_change" | "shift" => {
            let model = need_model(inputs)?;
            let eval = need_eval(inputs, opts)?;
            let (protocol, steps, every) = match name {
                "evolution" => (Protocol::Stable, opts.steps, opts.record_every),
                "image_change" => (
                    Protocol::ImageChange { period: opts.change_period },
                    opts.change_period * (opts.changes + 1) - 1,
                    1,
                ),
                _ => (
                    Protocol::Shift { period: opts.shift_period, magnitude: opts.shift_magnitude },
                    opts.steps,
                    opts.record_every,
                ),
            };
            let ev = run_protocol(model, &eval, &evo_config(opts, steps, every), protocol)?;
            out.series(&ev.series())?;
            out.snapshots(&ev)?;
            let mut s = stability(&ev, 40, 100, 400);
            s["protocol"] = serde_json::to_value(protocol).expect("protocol serializes");
            s["records"] = json!(ev.records.len());
            if name == "image_change" {
                let stats = change_stats(&ev, opts.change_period);
                s["changes"] = json!(stats.len());
                s["drop_fraction"] = json!(fraction(stats.iter().map(|c| c.dropped)));
                s["recover_fraction"] = json!(fraction(stats.iter().map(|c| c.recovered)));
                s["per_change"] = serde_json::to_value(&stats).expect("stats serialize");
            }
            s
        }
        "regime" => {
            let path = inputs
                .metrics
                .as_ref()
                .ok_or_else(|| CoreError::config("regime needs a training metrics CSV"))?;
            let series = read_mean_gate(path)?;
            let change = regime_trace(&series, &opts.regime)?;
            let mut ts = TraceSeries::new("mean_gate", "pixel-averaged reset gate per training step");
            for &(s, v) in &series {
                ts.push(s as usize, v);
            }
            out.series(&[ts])?;
            json!({ "points": series.len(), "change": change })
        }
        "adversarial" => adversarial(need_model(inputs)?, &need_eval(inputs, opts)?, opts, &mut out)?,
        _ => train_variants(name, need_run(inputs)?, opts, &mut out)?,
    };
    Ok(ExperimentReport { name: name.to_string(), summary, files: out.files })
}

/// Bounding box of the non-background label pixels, or the central quarter when empty.
fn object_box(sample: &Sample) -> Rect {
    let (h, w) = sample.extent();
    let (mut y0, mut x0, mut y1, mut x1) = (h, w, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let c = sample.label.at(y, x);
            if c == OBJECT || c == BOUNDARY {
                (y0, x0, y1, x1) = (y0.min(y), x0.min(x), y1.max(y), x1.max(x));
            }
        }
    }
    if y0 > y1 {
        return Rect { x: w / 4, y: h / 4, w: w / 2, h: h / 2 };
    }
    Rect { x: x0, y: y0, w: x1 - x0 + 1, h: y1 - y0 + 1 }
}

fn adversarial(
    model: &Automaton<f32>,
    eval: &[Sample],
    opts: &ExperimentOptions,
    out: &mut Out,
) -> Result<Value> {
    let sample = &eval[0];
    let region = object_box(sample);
    let (h, w) = sample.extent();
    let mut gray = sample.image.clone();
    for y in region.y..region.y + region.h {
        for x in region.x..region.x + region.w {
            for c in 0..3 {
                gray.data_mut()[(y * w + x) * 3 + c] = 0.0;
            }
        }
    }
    let image = gray.reshape([1, h, w, 3])?;
    let res = adversarial_perturb(model, &image, &region, OBJECT, &opts.adversarial)?;
    let mut ts = TraceSeries::new("objective", "summed object logit over the region, per accepted iterate");
    for (i, &v) in res.objective.iter().enumerate() {
        ts.push(i, v);
    }
    out.series(&[ts])?;
    let before = hstack(&[image_to_rgb(&image, 0)?, prediction_rgb(&res.before, h, w)]);
    let after = hstack(&[image_to_rgb(&res.image, 0)?, prediction_rgb(&res.after, h, w)]);
    out.png(0, &before)?;
    out.png(opts.adversarial.iters, &after)?;
    Ok(json!({
        "region": { "x": region.x, "y": region.y, "w": region.w, "h": region.h },
        "target_fraction_before": res.target_fraction_before,
        "target_fraction_after": res.target_fraction_after,
        "objective_first": res.objective.first(),
        "objective_last": res.objective.last(),
    }))
}

/// One trained and evaluated configuration in a sweep or ablation.
#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub label: String,
    pub params: usize,
    pub resolution: usize,
    pub train_steps: u64,
    pub seconds_per_step: f64,
    pub final_loss: Option<f64>,
    pub object_iou_at_t: Option<f64>,
    pub object_iou_mean_100_400: Option<f64>,
    pub truncated_at: Option<usize>,
    /// Only for the random-filter ablation: frozen kernels identical after training.
    pub frozen_unchanged: Option<bool>,
}

fn spatial_filters(p: &UpdateRuleParams<f32>) -> Vec<(String, Vec<u32>)> {
    let mut out = Vec::new();
    p.visit(|name, t| {
        if is_spatial_filter(name) {
            out.push((name.to_string(), t.data().iter().map(|v| v.to_bits()).collect()));
        }
    });
    out
}

/// Trains `arch` on `run`'s dataset at `resolution` and evaluates on its eval split.
pub fn train_and_eval(
    run: &RunConfig,
    arch: ArchConfig,
    resolution: usize,
    label: &str,
    opts: &ExperimentOptions,
    dir: Option<&Path>,
) -> Result<(VariantResult, Evolution)> {
    let (train, eval) = run.dataset.with_resolution(resolution).load()?;
    let mut cfg: TrainConfig = run.train_config();
    cfg.arch = arch;
    if let Some(s) = opts.train_steps {
        cfg.steps = s;
    }
    cfg.checkpoint_every = 0;
    let mut trainer: Trainer<f32> = Trainer::new(cfg.clone(), train)?;
    let frozen_before = spatial_filters(&trainer.params);
    let started = Instant::now();
    let summary = trainer.run(dir, |_| {})?;
    let seconds = started.elapsed().as_secs_f64();
    let frozen_unchanged = cfg
        .arch
        .freeze_spatial_filters
        .then(|| spatial_filters(&trainer.params) == frozen_before);
    let n = opts.eval_limit.unwrap_or(eval.len()).clamp(1, eval.len().max(1));
    let model = Automaton::new(cfg.arch.clone(), trainer.params.clone())?;
    let t = cfg.schedule.target_steps;
    let ev = run_protocol(
        &model,
        &eval[..n.min(eval.len())],
        &evo_config(opts, opts.steps.max(t), opts.record_every),
        Protocol::Stable,
    )?;
    let obj = ev.object_iou();
    let result = VariantResult {
        label: label.to_string(),
        params: param_count(&cfg.arch),
        resolution,
        train_steps: summary.steps,
        seconds_per_step: seconds / summary.steps.max(1) as f64,
        final_loss: summary.last_loss,
        object_iou_at_t: obj.at(t),
        object_iou_mean_100_400: mean(&obj.window(100, 400)),
        truncated_at: ev.truncated_at,
        frozen_unchanged,
    };
    Ok((result, ev))
}

/// `(label, arch, image resolution)` for each variant of a training experiment.
fn variants(name: &str, run: &RunConfig, opts: &ExperimentOptions) -> Vec<(String, ArchConfig, usize)> {
    let base = run.arch.clone();
    let r = run.dataset.resolution();
    match name {
        "highres_compare" => vec![
            (format!("i_{r}img_{r}state"), ArchConfig { resolution_factor: 1, ..base.clone() }, r),
            (format!("ii_{}img_{}state", 2 * r, 2 * r), ArchConfig { resolution_factor: 1, ..base.clone() }, 2 * r),
            (format!("iii_{}img_{r}state", 2 * r), ArchConfig { resolution_factor: 2, ..base }, 2 * r),
        ],
        "sweep_state_size" => opts
            .state_sizes
            .iter()
            .map(|&d| (format!("d{d}"), ArchConfig { cell_size: d, ..base.clone() }, r))
            .collect(),
        "sweep_resolution" => opts
            .resolutions
            .iter()
            .map(|&res| (format!("res{res}"), base.clone(), res))
            .collect(),
        "ablate_residual" => vec![
            ("residual".into(), ArchConfig { residual: true, ..base.clone() }, r),
            ("non_residual".into(), ArchConfig { residual: false, ..base }, r),
        ],
        "ablate_random_filters" => vec![
            ("learned".into(), ArchConfig { freeze_spatial_filters: false, ..base.clone() }, r),
            ("random".into(), ArchConfig { freeze_spatial_filters: true, ..base }, r),
        ],
        "ablate_norm" => opts
            .norm_kinds
            .iter()
            .map(|&k| {
                let label = serde_json::to_value(k).ok().and_then(|v| v.as_str().map(String::from));
                (label.unwrap_or_else(|| format!("{k:?}")), ArchConfig { norm_kind: k, ..base.clone() }, r)
            })
            .collect(),
        _ => unreachable!("checked against EXPERIMENTS"),
    }
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn train_variants(name: &str, run: &RunConfig, opts: &ExperimentOptions, out: &mut Out) -> Result<Value> {
    let mut results = Vec::new();
    for (label, arch, res) in variants(name, run, opts) {
        arch.validate()?;
        let dir = out.dir.join(format!("{name}_{}_{label}", opts.run_id));
        let (r, ev) = train_and_eval(run, arch, res, &label, opts, Some(&dir))?;
        if let Some(s) = ev.snapshots.iter().find(|s| s.step == run.schedule.target_steps).or(ev.snapshots.last()) {
            out.png_tagged(&format!("_{label}"), s.step, &s.panel)?;
        }
        log::info!("{name}/{label}: {r:?}");
        results.push(r);
    }
    let header = [
        "label",
        "params",
        "resolution",
        "train_steps",
        "seconds_per_step",
        "final_loss",
        "object_iou_at_t",
        "object_iou_mean_100_400",
        "truncated_at",
        "frozen_unchanged",
    ];
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.params.to_string(),
                r.resolution.to_string(),
                r.train_steps.to_string(),
                format!("{:.6}", r.seconds_per_step),
                cell(r.final_loss),
                cell(r.object_iou_at_t),
                cell(r.object_iou_mean_100_400),
                cell(r.truncated_at),
                cell(r.frozen_unchanged),
            ]
        })
        .collect();
    out.rows(&header, &rows)?;
    let mut summary = json!({ "variants": results });
    if name == "highres_compare" {
        summary["speedup_iii_over_ii"] = json!(results[1].seconds_per_step / results[2].seconds_per_step);
    }
    Ok(summary)
}
