//! Optimizer steps: mini-unrolls over the pool, and the full-unroll baseline.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cellseg_tensor::{
    AdamConfig, AdamOutcome, AdamState, Graph, Purpose, RngStream, Scalar, Tensor, TensorError, Var,
};
use serde::{Deserialize, Serialize};

use super::metrics::MetricsWriter;
use super::pool::{pool_resample, PoolEntry};
use super::schedule::{UnrollMode, UnrollSchedule};
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::config::ArchConfig;
use crate::data::{stack_samples, Sample};
use crate::error::{CoreError, Result};
use crate::model::{batch_means, env_graph, init_state, predict_graph, step_graph, StepDraws};
use crate::params::{init_params, is_trainable, RuleParams, UpdateRuleParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    /// Total optimizer steps.
    pub steps: usize,
    /// Defaults to 4× the batch.
    pub pool_size: Option<usize>,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub arch: ArchConfig,
    pub schedule: UnrollSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch: 32,
            steps: 1000,
            pool_size: None,
            seed: 0,
            checkpoint_every: 0,
            arch: ArchConfig::default(),
            schedule: UnrollSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn pool(&self) -> usize {
        self.pool_size.unwrap_or(4 * self.batch)
    }

    pub fn resolved(mut self) -> Self {
        self.pool_size = Some(self.pool());
        self.schedule = self.schedule.resolved();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.schedule.validate()?;
        let mut bad = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr {} must be positive", self.lr));
        }
        if self.batch == 0 {
            bad.push("batch must be >= 1".to_string());
        }
        if self.pool() < self.batch {
            bad.push(format!(
                "pool_size {} smaller than batch {}",
                self.pool(),
                self.batch
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CoreError::config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// No (entry, step) pair passed the age gate.
    NoLoss,
    /// Non-finite loss or gradient; the batch's states were re-randomized.
    SkippedNonFinite,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Optimizer steps completed, including this one.
    pub step: u64,
    pub loss: Option<f64>,
    pub mean_gate: Option<f64>,
    /// Contributing (entry, step) pairs.
    pub contributing: usize,
    pub outcome: StepOutcome,
}

struct UnrollOut<T> {
    loss: Option<f64>,
    contributing: usize,
    mean_gate: Option<f64>,
    final_states: Tensor<T>,
    grads: Option<Vec<Option<Tensor<T>>>>,
}

/// Training state: parameters, optimizer moments, the pool, and the step counter.
#[derive(Clone)]
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub params: UpdateRuleParams<T>,
    adam: AdamState<T>,
    pool: Vec<PoolEntry<T>>,
    data: Vec<Sample>,
    step: u64,
    state_hw: (usize, usize),
    rho: (f64, f64),
    last_nodes: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig, data: Vec<Sample>) -> Result<Self> {
        let params = init_params(&cfg.arch, cfg.seed)?;
        Self::with_params(cfg, data, params)
    }

    pub fn with_params(
        cfg: TrainConfig,
        data: Vec<Sample>,
        params: UpdateRuleParams<T>,
    ) -> Result<Self> {
        let cfg = cfg.resolved();
        cfg.validate()?;
        params.check(&cfg.arch)?;
        let first = data
            .first()
            .ok_or_else(|| CoreError::data("empty training set"))?;
        let (h, w) = first.extent();
        if let Some(bad) = data.iter().find(|s| s.extent() != (h, w)) {
            return Err(CoreError::data(format!(
                "mixed image sizes: {} is {:?}, expected {:?}",
                bad.source,
                bad.extent(),
                (h, w)
            )));
        }
        let state_hw = (cfg.arch.state_extent(h)?, cfg.arch.state_extent(w)?);
        let adam_cfg = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        let adam = AdamState::new(adam_cfg, params.slots());
        let pool = (0..cfg.pool()).map(PoolEntry::fresh).collect();
        let rho = match cfg.schedule.mode {
            UnrollMode::MiniUnroll => cfg.schedule.reset_probs()?,
            UnrollMode::FullUnroll => (1.0, 1.0),
        };
        Ok(Trainer {
            cfg,
            params,
            adam,
            pool,
            data,
            step: 0,
            state_hw,
            rho,
            last_nodes: 0,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn pool(&self) -> &[PoolEntry<T>] {
        &self.pool
    }

    /// Graph size of the most recent unroll.
    pub fn last_graph_nodes(&self) -> usize {
        self.last_nodes
    }

    fn stream(&self, purpose: Purpose, keys: &[u64]) -> RngStream {
        RngStream::for_purpose(self.cfg.seed, purpose).path(keys)
    }

    fn fresh_sample(&self, slot: usize) -> usize {
        self.stream(Purpose::Data, &[self.step, slot as u64])
            .below(self.data.len())
    }

    fn fresh_state(&self, slot: usize) -> Tensor<T> {
        let (h, w) = self.state_hw;
        let mut rng = self.stream(Purpose::State, &[self.step, slot as u64]);
        init_state(1, h, w, self.cfg.arch.cell_size, &mut rng).expect("positive extents")
    }

    /// One optimizer step in the configured mode.
    pub fn train_step(&mut self) -> Result<StepReport> {
        match self.cfg.schedule.mode {
            UnrollMode::MiniUnroll => self.mini_unroll_step(),
            UnrollMode::FullUnroll => self.full_unroll_step(),
        }
    }

    /// Draws a batch from the pool without replacement, unrolls K steps from the stored
    /// (detached) states, updates, writes the final states back, and resamples the
    /// batch's entries.
    pub fn mini_unroll_step(&mut self) -> Result<StepReport> {
        let batch = self.cfg.batch;
        let chosen = draw_batch(self.cfg.seed, self.step, self.pool.len(), batch);
        for (slot, &e) in chosen.iter().enumerate() {
            if self.pool[e].sample.is_none() {
                self.pool[e].sample = Some(self.fresh_sample(slot));
            }
            if self.pool[e].state.is_none() {
                self.pool[e].state = Some(self.fresh_state(slot));
            }
        }
        let samples: Vec<&Sample> = chosen
            .iter()
            .map(|&e| &self.data[self.pool[e].sample.expect("materialized")])
            .collect();
        let states: Vec<&Tensor<T>> = chosen
            .iter()
            .map(|&e| self.pool[e].state.as_ref().expect("materialized"))
            .collect();
        let states = Tensor::stack_batch(&states)?;
        let (images, labels) = stack_samples::<T>(&samples)?;
        let ages: Vec<usize> = chosen.iter().map(|&e| self.pool[e].image_age).collect();
        let k = self.cfg.schedule.mini_unroll;

        let out = self.unroll(states, images, labels, &ages, k)?;
        let report = self.apply(&out)?;
        let mut resample = self.stream(Purpose::Pool, &[self.step, 1]);
        for (slot, &e) in chosen.iter().enumerate() {
            let entry = &mut self.pool[e];
            if report.outcome == StepOutcome::SkippedNonFinite {
                entry.reset_state();
                continue;
            }
            entry.state = Some(out.final_states.batch_entry(slot)?);
            entry.image_age += k;
            entry.state_age += k;
        }
        let (ri, rs) = self.rho;
        let mut picked: Vec<&mut PoolEntry<T>> = Vec::with_capacity(batch);
        for (i, e) in self.pool.iter_mut().enumerate() {
            if chosen.contains(&i) {
                picked.push(e);
            }
        }
        // Resample in batch-slot order so the draws do not depend on pool layout.
        picked.sort_by_key(|e| chosen.iter().position(|&c| c == e.id));
        pool_resample(picked, ri, rs, &mut resample);
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            ..report
        })
    }

    /// Fresh states and images for every slot, unrolled T steps with the same age gate.
    pub fn full_unroll_step(&mut self) -> Result<StepReport> {
        let batch = self.cfg.batch;
        let picks: Vec<usize> = (0..batch).map(|slot| self.fresh_sample(slot)).collect();
        let samples: Vec<&Sample> = picks.iter().map(|&i| &self.data[i]).collect();
        let states: Vec<Tensor<T>> = (0..batch).map(|slot| self.fresh_state(slot)).collect();
        let states = Tensor::stack_batch(&states.iter().collect::<Vec<_>>())?;
        let (images, labels) = stack_samples::<T>(&samples)?;
        let ages = vec![0; batch];
        let t = self.cfg.schedule.target_steps;
        let out = self.unroll(states, images, labels, &ages, t)?;
        let report = self.apply(&out)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            ..report
        })
    }

    fn apply(&mut self, out: &UnrollOut<T>) -> Result<StepReport> {
        let mut report = StepReport {
            step: self.step,
            loss: out.loss,
            mean_gate: out.mean_gate,
            contributing: out.contributing,
            outcome: StepOutcome::NoLoss,
        };
        match (&out.grads, out.loss) {
            (_, Some(l)) if !l.is_finite() => report.outcome = StepOutcome::SkippedNonFinite,
            (Some(grads), Some(_)) => {
                let grads: Vec<Option<&Tensor<T>>> = grads.iter().map(|g| g.as_ref()).collect();
                let mut slots = self.params.slots_mut();
                report.outcome = match self.adam.step(&mut slots, &grads)? {
                    AdamOutcome::Applied => StepOutcome::Applied,
                    AdamOutcome::SkippedNonFinite => StepOutcome::SkippedNonFinite,
                };
            }
            _ => {}
        }
        if report.outcome == StepOutcome::SkippedNonFinite {
            log::warn!(
                "step {}: non-finite loss or gradient, update skipped",
                self.step + 1
            );
        }
        Ok(report)
    }

    /// Builds and differentiates a `steps`-long unroll of the batch.
    fn unroll(
        &mut self,
        states: Tensor<T>,
        images: Tensor<T>,
        labels: Tensor<T>,
        ages: &[usize],
        steps: usize,
    ) -> Result<UnrollOut<T>> {
        let arch = self.cfg.arch.clone();
        let onset = self.cfg.schedule.onset();
        let batch = ages.len();
        let (h, w) = self.state_hw;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, &arch, true);
        let pixels = g.constant(images);
        let s0 = g.constant(states);
        let (seed, step) = (self.cfg.seed, self.step);
        let built = unrolled_loss(
            &mut g,
            &p,
            &arch,
            s0,
            pixels,
            &labels,
            ages,
            onset,
            steps,
            |i| {
                let mut streams: Vec<RngStream> = (0..batch)
                    .map(|slot| {
                        RngStream::for_purpose(seed, Purpose::UpdateMask).path(&[
                            step,
                            slot as u64,
                            i as u64,
                        ])
                    })
                    .collect();
                StepDraws::draw(&arch, h, w, &mut streams)
            },
        );
        let u = match built {
            Ok(u) => u,
            Err(CoreError::Tensor(TensorError::NonFinite { .. })) => {
                self.last_nodes = g.len();
                return Ok(UnrollOut {
                    loss: Some(f64::NAN),
                    contributing: 0,
                    mean_gate: None,
                    final_states: Tensor::zeros([batch, h, w, arch.cell_size]),
                    grads: None,
                });
            }
            Err(e) => return Err(e),
        };
        let mut out = UnrollOut {
            loss: None,
            contributing: u.contributing,
            mean_gate: u.mean_gate,
            final_states: g.value(u.state).clone(),
            grads: None,
        };
        if let Some(loss) = u.loss {
            out.loss = Some(g.value(loss).item().as_f64());
            g.backward(loss)?;
            let vars = p.slots();
            let mut idx = 0;
            let mut grads = Vec::with_capacity(vars.len());
            self.params.visit(|name, _| {
                let v = *vars[idx];
                idx += 1;
                grads.push(if is_trainable(&arch, name) {
                    g.take_grad(v)
                } else {
                    None
                });
            });
            out.grads = Some(grads);
        }
        self.last_nodes = g.len();
        Ok(out)
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            step: self.step,
            seed: self.cfg.seed,
            extra: serde_json::json!({ "train": self.cfg }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.params, &self.cfg.arch, &self.checkpoint_meta(), path)?;
        Ok(())
    }

    /// Trains to `cfg.steps`, appending metrics and writing checkpoints under `out_dir`.
    /// `on_step` sees every report.
    pub fn run(
        &mut self,
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<TrainSummary> {
        let mut writer = match out_dir {
            Some(dir) => Some(MetricsWriter::create(dir)?),
            None => None,
        };
        let mut checkpoints = Vec::new();
        let mut last_loss = None;
        let started = Instant::now();
        while (self.step as usize) < self.cfg.steps {
            let report = self.train_step()?;
            if let Some(w) = writer.as_mut() {
                w.append(&report, self.cfg.lr, started.elapsed().as_secs_f64())?;
            }
            if report.loss.is_some() {
                last_loss = report.loss;
            }
            on_step(&report);
            let every = self.cfg.checkpoint_every;
            if let Some(dir) = out_dir {
                if every > 0 && report.step % every as u64 == 0 {
                    let path = dir.join(format!("checkpoint_{:06}.ncaw", report.step));
                    self.save(&path)?;
                    checkpoints.push(path);
                }
            }
        }
        if let Some(dir) = out_dir {
            let path = dir.join("final.ncaw");
            self.save(&path)?;
            checkpoints.push(path);
        }
        if let Some(w) = writer.as_mut() {
            w.flush()?;
        }
        Ok(TrainSummary {
            steps: self.step,
            last_loss,
            seconds: started.elapsed().as_secs_f64(),
            checkpoints,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub last_loss: Option<f64>,
    pub seconds: f64,
    pub checkpoints: Vec<PathBuf>,
}

/// Pool indices trained at optimizer step `step`: the first `batch` of a seeded
/// permutation, so draws are without replacement and uniform over entries.
pub fn draw_batch(seed: u64, step: u64, pool: usize, batch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool).collect();
    RngStream::for_purpose(seed, Purpose::Pool)
        .path(&[step, 0])
        .shuffle(&mut order);
    order.truncate(batch);
    order
}

/// Graph handles for a recorded unroll.
#[derive(Clone, Copy, Debug)]
pub struct Unrolled {
    /// Mean cross-entropy over contributing (entry, step) pairs; `None` if nothing passed
    /// the age gate.
    pub loss: Option<Var>,
    pub contributing: usize,
    /// Final state.
    pub state: Var,
    /// Gate activation averaged over cells, entries and steps.
    pub mean_gate: Option<f64>,
}

/// Records `steps` update steps from `state` on `images`, with the per-step
/// cross-entropy of entries whose `age + i >= onset` at inner step `i` (1-based).
/// `draws(i)` supplies the random draws of step `i`.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &RuleParams<Var>,
    arch: &ArchConfig,
    state: Var,
    images: Var,
    labels: &Tensor<T>,
    ages: &[usize],
    onset: usize,
    steps: usize,
    mut draws: impl FnMut(usize) -> StepDraws<T>,
) -> Result<Unrolled> {
    let batch = ages.len();
    let env = env_graph(g, p, images)?;
    let mut s = state;
    let mut terms = Vec::new();
    let mut gate_sum = 0.0;
    for i in 1..=steps {
        let d = draws(i);
        let out = step_graph(g, p, arch, s, env, &d)?;
        s = out.state;
        if let Some(r) = out.gate {
            gate_sum += batch_means(g.value(r)).iter().sum::<f64>() / batch as f64;
        }
        let mask: Vec<bool> = ages.iter().map(|a| a + i >= onset).collect();
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            continue;
        }
        let logits = predict_graph(g, p, s)?;
        let (l, _) = g.softmax_xent(logits, labels, &mask)?;
        terms.push((l, n));
    }
    let total: usize = terms.iter().map(|t| t.1).sum();
    let mut loss = None;
    for (l, n) in terms {
        let weighted = g.scale(l, T::of(n as f64 / total as f64))?;
        loss = Some(match loss {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
    }
    Ok(Unrolled {
        loss,
        contributing: total,
        state: s,
        mean_gate: (arch.resettable && steps > 0).then(|| gate_sum / steps as f64),
    })
}
