//! Long inference runs over an eval set: IOU and ℓ1 traces per step, optionally with
//! image swaps or shifts at fixed periods.

use cellseg_tensor::{Purpose, RngStream, Scalar, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::iou::{IouCounts, IouReport};
use super::trace::{l1_diff_per_dim, l1_per_dim, TraceSeries};
use crate::data::perturb::{perturb, Perturbation};
use crate::data::{stack_samples, Sample};
use crate::error::{CoreError, Result};
use crate::model::{argmax_classes, state_rgb, Automaton, StepDraws};
use crate::render::{hstack, image_to_rgb, prediction_rgb, unit_to_rgb};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionConfig {
    pub steps: usize,
    pub record_every: usize,
    pub seed: u64,
    /// Entries evolved together; results do not depend on it except under batch norm.
    pub chunk: usize,
    /// Steps at which entry 0 is rendered as input | prediction | state.
    pub snapshot_steps: Vec<usize>,
    pub run_id: String,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            steps: 400,
            record_every: 1,
            seed: 0,
            chunk: 16,
            snapshot_steps: Vec::new(),
            run_id: "run".to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    Stable,
    /// Every `period` steps each entry switches to a different eval image, keeping its state.
    ImageChange { period: usize },
    /// Every `period` steps each entry's original image is shifted by a fresh offset in
    /// `[-magnitude, magnitude]²`.
    Shift { period: usize, magnitude: usize },
}

impl Protocol {
    fn event_at(&self, t: usize) -> bool {
        match *self {
            Protocol::Stable => false,
            Protocol::ImageChange { period } | Protocol::Shift { period, .. } => t > 0 && t % period == 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub iou: IouReport,
    pub state_l1: f64,
    pub logits_l1: f64,
    /// Single-step changes; absent at step 0.
    pub delta_state_l1: Option<f64>,
    pub delta_logits_l1: Option<f64>,
    /// Change of the softmax class probabilities.
    pub delta_pred_l1: Option<f64>,
    pub mean_gate: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub step: usize,
    pub panel: RgbImage,
}

#[derive(Clone, Debug)]
pub struct Evolution {
    pub records: Vec<StepRecord>,
    /// First step whose state or logits were non-finite; records stop before it.
    pub truncated_at: Option<usize>,
    /// Steps at which images were swapped or shifted.
    pub events: Vec<usize>,
    pub snapshots: Vec<Snapshot>,
}

impl Evolution {
    pub fn series(&self) -> Vec<TraceSeries> {
        let note = "per-dimension l1: sum |x| / element count";
        let mut out = vec![
            TraceSeries::new("iou_background", "pooled pixels"),
            TraceSeries::new("iou_object", "pooled pixels"),
            TraceSeries::new("iou_boundary", "pooled pixels"),
            TraceSeries::new("state_l1", note),
            TraceSeries::new("logits_l1", note),
            TraceSeries::new("delta_state_l1", note),
            TraceSeries::new("delta_logits_l1", note),
            TraceSeries::new("delta_pred_l1", note),
            TraceSeries::new("mean_gate", "mean over cells and entries"),
        ];
        for r in &self.records {
            let vals = [
                r.iou.iou[0],
                r.iou.iou[1],
                r.iou.iou[2],
                Some(r.state_l1),
                Some(r.logits_l1),
                r.delta_state_l1,
                r.delta_logits_l1,
                r.delta_pred_l1,
                r.mean_gate,
            ];
            for (s, v) in out.iter_mut().zip(vals) {
                if let Some(v) = v {
                    s.push(r.step, v);
                }
            }
        }
        out
    }

    pub fn object_iou(&self) -> TraceSeries {
        self.series().swap_remove(1)
    }

    pub fn record(&self, step: usize) -> Option<&StepRecord> {
        self.records.iter().find(|r| r.step == step)
    }
}

#[derive(Default, Clone)]
struct Acc {
    iou: IouCounts,
    state: (f64, usize),
    logits: (f64, usize),
    d_state: (f64, usize),
    d_logits: (f64, usize),
    d_pred: (f64, usize),
    gate: (f64, usize),
}

fn add(acc: &mut (f64, usize), per_dim: f64, n: usize) {
    acc.0 += per_dim * n as f64;
    acc.1 += n;
}

fn mean(acc: (f64, usize)) -> Option<f64> {
    (acc.1 > 0).then(|| acc.0 / acc.1 as f64)
}

fn softmax<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let c = logits.shape().channels();
    let mut out = Vec::with_capacity(logits.len());
    for px in logits.data().chunks(c) {
        let m = px.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = px.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

fn is_divergence(e: &CoreError) -> bool {
    matches!(
        e,
        CoreError::NonFiniteState { .. } | CoreError::Tensor(cellseg_tensor::TensorError::NonFinite { .. })
    )
}

/// Fresh states on `samples`, evolved `cfg.steps` steps with no interventions.
pub fn run_evolution<T: Scalar>(model: &Automaton<T>, samples: &[Sample], cfg: &EvolutionConfig) -> Result<Evolution> {
    run_protocol(model, samples, cfg, Protocol::Stable)
}

/// Image (and label) swapped every `period` steps without resetting the state; IOU is
/// always against the current label.
pub fn run_image_change<T: Scalar>(
    model: &Automaton<T>,
    samples: &[Sample],
    period: usize,
    cfg: &EvolutionConfig,
) -> Result<Evolution> {
    run_protocol(model, samples, cfg, Protocol::ImageChange { period })
}

pub fn run_shift<T: Scalar>(
    model: &Automaton<T>,
    samples: &[Sample],
    period: usize,
    magnitude: usize,
    cfg: &EvolutionConfig,
) -> Result<Evolution> {
    run_protocol(model, samples, cfg, Protocol::Shift { period, magnitude })
}

pub fn run_protocol<T: Scalar>(
    model: &Automaton<T>,
    samples: &[Sample],
    cfg: &EvolutionConfig,
    protocol: Protocol,
) -> Result<Evolution> {
    if samples.is_empty() {
        return Err(CoreError::data("evolution needs at least one sample"));
    }
    if cfg.steps < 1 || cfg.record_every < 1 || cfg.chunk < 1 {
        return Err(CoreError::config(format!(
            "steps ({}), record_every ({}) and chunk ({}) must be >= 1",
            cfg.steps, cfg.record_every, cfg.chunk
        )));
    }
    match protocol {
        Protocol::Stable => {}
        Protocol::ImageChange { period } => {
            if period < 1 {
                return Err(CoreError::config("image change period must be >= 1"));
            }
            if samples.len() < 2 {
                return Err(CoreError::data("image changes need at least two samples"));
            }
        }
        Protocol::Shift { period, magnitude } => {
            let (h, w) = samples[0].extent();
            if period < 1 || magnitude > h.min(w) / 4 {
                return Err(CoreError::config(format!(
                    "shift period {period} must be >= 1 and magnitude {magnitude} <= {}",
                    h.min(w) / 4
                )));
            }
        }
    }
    let recorded: Vec<usize> = (0..=cfg.steps).step_by(cfg.record_every).collect();
    let mut accs = vec![Acc::default(); recorded.len()];
    let mut truncated_at: Option<usize> = None;
    let mut snapshots = Vec::new();
    let events: Vec<usize> = (1..=cfg.steps).filter(|&t| protocol.event_at(t)).collect();

    for start in (0..samples.len()).step_by(cfg.chunk) {
        let ids: Vec<usize> = (start..(start + cfg.chunk).min(samples.len())).collect();
        let diverged = run_chunk(model, samples, &ids, cfg, protocol, &recorded, &mut accs, &mut snapshots)?;
        if let Some(t) = diverged {
            truncated_at = Some(truncated_at.map_or(t, |u: usize| u.min(t)));
        }
    }

    let records = recorded
        .iter()
        .zip(accs)
        .filter(|(&t, _)| truncated_at.is_none_or(|u| t < u))
        .map(|(&t, a)| StepRecord {
            step: t,
            iou: a.iou.report(t, &cfg.run_id),
            state_l1: mean(a.state).unwrap_or(f64::NAN),
            logits_l1: mean(a.logits).unwrap_or(f64::NAN),
            delta_state_l1: mean(a.d_state),
            delta_logits_l1: mean(a.d_logits),
            delta_pred_l1: mean(a.d_pred),
            mean_gate: mean(a.gate),
        })
        .collect();
    snapshots.retain(|s: &Snapshot| truncated_at.is_none_or(|u| s.step < u));
    Ok(Evolution {
        records,
        truncated_at,
        events,
        snapshots,
    })
}

/// Returns the step at which this chunk diverged, if it did.
#[allow(clippy::too_many_arguments)]
fn run_chunk<T: Scalar>(
    model: &Automaton<T>,
    samples: &[Sample],
    ids: &[usize],
    cfg: &EvolutionConfig,
    protocol: Protocol,
    recorded: &[usize],
    accs: &mut [Acc],
    snapshots: &mut Vec<Snapshot>,
) -> Result<Option<usize>> {
    let eval = |keys: &[u64]| RngStream::for_purpose(cfg.seed, Purpose::Eval).path(keys);
    let mut current: Vec<usize> = ids.to_vec();
    let mut shown: Vec<Sample> = ids.iter().map(|&j| samples[j].clone()).collect();
    let stack = |shown: &[Sample]| -> Result<Tensor<T>> {
        let refs: Vec<&Sample> = shown.iter().collect();
        Ok(stack_samples::<T>(&refs)?.0)
    };
    let mut images = stack(&shown)?;
    let mut env = model.environment(&images)?;
    let per_entry: Vec<Tensor<T>> = ids
        .iter()
        .map(|&j| {
            let one = images.batch_entry(ids.iter().position(|&k| k == j).expect("own id"))?;
            model.init_state(&one, &mut eval(&[j as u64, 0]))
        })
        .collect::<Result<_>>()?;
    let mut state = Tensor::stack_batch(&per_entry.iter().collect::<Vec<_>>())?;
    let mut streams: Vec<RngStream> = ids.iter().map(|&j| eval(&[j as u64, 1])).collect();
    let (_, sh, sw, _) = state.shape().nhwc()?;
    let (b, h, w) = (ids.len(), images.dims()[1], images.dims()[2]);

    let mut prev: Option<(Tensor<T>, Tensor<T>, Vec<f64>)> = None;
    let mut rec = 0;
    for t in 0..=cfg.steps {
        let mut gate = None;
        if t > 0 {
            let draws = StepDraws::draw(&model.cfg, sh, sw, &mut streams);
            match model.step(&state, &env, &draws, t) {
                Ok(out) => {
                    gate = out.mean_gate;
                    state = out.state;
                }
                Err(e) if is_divergence(&e) => return Ok(Some(t)),
                Err(e) => return Err(e),
            }
        }
        if protocol.event_at(t) {
            let c = (t / match protocol {
                Protocol::ImageChange { period } | Protocol::Shift { period, .. } => period,
                Protocol::Stable => 1,
            }) as u64;
            for (k, &j) in ids.iter().enumerate() {
                match protocol {
                    Protocol::ImageChange { .. } => {
                        let mut pick = eval(&[j as u64, 2, c]).below(samples.len() - 1);
                        if pick >= current[k] {
                            pick += 1;
                        }
                        current[k] = pick;
                        shown[k] = samples[pick].clone();
                    }
                    Protocol::Shift { magnitude, .. } => {
                        let mut rng = eval(&[j as u64, 3, c]);
                        let m = magnitude as i64;
                        let dx = rng.range_inclusive(-m, m) as isize;
                        let dy = rng.range_inclusive(-m, m) as isize;
                        shown[k] = perturb(&samples[j], &Perturbation::Shift { dx, dy }, &mut rng)?;
                    }
                    Protocol::Stable => {}
                }
            }
            images = stack(&shown)?;
            env = model.environment(&images)?;
        }
        let logits = match model.logits(&state) {
            Ok(l) => l,
            Err(e) if is_divergence(&e) => return Ok(Some(t)),
            Err(e) => return Err(e),
        };
        let probs = softmax(&logits);
        if rec < recorded.len() && recorded[rec] == t {
            let a = &mut accs[rec];
            let classes = argmax_classes(&logits);
            for (k, s) in shown.iter().enumerate() {
                a.iou.add(&classes[k * h * w..(k + 1) * h * w], &s.label.classes)?;
            }
            add(&mut a.state, l1_per_dim(&state), state.len());
            add(&mut a.logits, l1_per_dim(&logits), logits.len());
            if let Some((ps, pl, pp)) = &prev {
                add(&mut a.d_state, l1_diff_per_dim(&state, ps), state.len());
                add(&mut a.d_logits, l1_diff_per_dim(&logits, pl), logits.len());
                let dp = pp.iter().zip(&probs).map(|(x, y)| (x - y).abs()).sum::<f64>() / probs.len() as f64;
                add(&mut a.d_pred, dp, probs.len());
            }
            if let Some(g) = &gate {
                add(&mut a.gate, g.iter().sum::<f64>() / b as f64, b);
            }
            rec += 1;
        }
        if ids[0] == 0 && cfg.snapshot_steps.contains(&t) && model.cfg.cell_size >= 3 {
            let classes = argmax_classes(&logits);
            let panel = hstack(&[
                image_to_rgb(&images, 0)?,
                prediction_rgb(&classes[..h * w], h, w),
                unit_to_rgb(&state_rgb(&state)?, 0)?,
            ]);
            snapshots.push(Snapshot { step: t, panel });
        }
        prev = Some((state.clone(), logits, probs));
    }
    Ok(None)
}
