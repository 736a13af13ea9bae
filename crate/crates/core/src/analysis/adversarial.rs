//! Input-space gradient ascent that makes the automaton predict a chosen class inside a
//! region.

use cellseg_tensor::{Graph, Purpose, RngStream, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::perturb::Rect;
use crate::error::{CoreError, Result};
use crate::model::{argmax_classes, env_graph, predict_graph, step_graph, Automaton, StepDraws};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialConfig {
    pub iters: usize,
    /// Initial step, in image units, for a gradient normalized to unit mean magnitude.
    pub step_size: f64,
    /// CA steps per objective evaluation.
    pub unroll_steps: usize,
    pub seed: u64,
    /// Step halvings tried before an iteration gives up. Each iteration starts again
    /// from `step_size`.
    pub max_halvings: usize,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig {
            iters: 20,
            step_size: 0.05,
            unroll_steps: 40,
            seed: 0,
            max_halvings: 6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdversarialResult {
    pub image: Tensor<f32>,
    pub before: Vec<u8>,
    pub after: Vec<u8>,
    /// Objective after each accepted iteration, starting with the initial image.
    pub objective: Vec<f64>,
    pub target_fraction_before: f64,
    pub target_fraction_after: f64,
}

struct Eval<T> {
    objective: f64,
    classes: Vec<u8>,
    grad: Option<Tensor<T>>,
}

fn fraction(classes: &[u8], region: &Rect, w: usize, target: u8) -> f64 {
    let mut hit = 0;
    for y in region.y..region.y + region.h {
        for x in region.x..region.x + region.w {
            hit += (classes[y * w + x] == target) as usize;
        }
    }
    hit as f64 / (region.w * region.h) as f64
}

/// Gradient ascent on the target-class logit summed over `region` after
/// `cfg.unroll_steps` CA steps, changing only pixels inside `region` and clipping to the
/// image range. A step is accepted only if it raises the objective; otherwise it is
/// halved.
pub fn adversarial_perturb<T: Scalar>(
    model: &Automaton<T>,
    image: &Tensor<f32>,
    region: &Rect,
    target: u8,
    cfg: &AdversarialConfig,
) -> Result<AdversarialResult> {
    let (b, h, w, _) = image.shape().nhwc()?;
    if b != 1 {
        return Err(CoreError::data(format!("expected one image, got {b}")));
    }
    region.check(h, w)?;
    if target as usize >= model.cfg.num_classes {
        return Err(CoreError::config(format!("target class {target} out of range")));
    }
    let x0: Tensor<T> = image.cast();
    let init = model.init_state(&x0, &mut RngStream::for_purpose(cfg.seed, Purpose::Eval).path(&[0]))?;
    let (_, sh, sw, _) = init.shape().nhwc()?;
    let draws: Vec<StepDraws<T>> = (0..cfg.unroll_steps)
        .map(|i| {
            let mut s = [RngStream::for_purpose(cfg.seed, Purpose::Eval).path(&[1, i as u64])];
            StepDraws::draw(&model.cfg, sh, sw, &mut s)
        })
        .collect();
    let c = model.cfg.num_classes;
    let mut weights = Tensor::zeros([1, h, w, c]);
    for y in region.y..region.y + region.h {
        for x in region.x..region.x + region.w {
            weights.data_mut()[(y * w + x) * c + target as usize] = T::one();
        }
    }
    let evaluate = |x: &Tensor<T>, with_grad: bool| -> Result<Eval<T>> {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, &model.cfg, false);
        let xv: Var = if with_grad { g.param(x.clone()) } else { g.constant(x.clone()) };
        let env = env_graph(&mut g, &p, xv)?;
        let mut s = g.constant(init.clone());
        for d in &draws {
            s = step_graph(&mut g, &p, &model.cfg, s, env, d)?.state;
        }
        let logits = predict_graph(&mut g, &p, s)?;
        let obj = g.weighted_sum(logits, &weights)?;
        let classes = argmax_classes(g.value(logits));
        let objective = g.value(obj).item().as_f64();
        let grad = if with_grad {
            g.backward(obj)?;
            g.take_grad(xv)
        } else {
            None
        };
        Ok(Eval { objective, classes, grad })
    };
    // Divergence during the unroll counts as a failed (rejected) candidate.
    let try_eval = |x: &Tensor<T>, with_grad: bool| -> Result<Option<Eval<T>>> {
        match evaluate(x, with_grad) {
            Ok(e) if e.objective.is_finite() => Ok(Some(e)),
            Ok(_) => Ok(None),
            Err(CoreError::Tensor(cellseg_tensor::TensorError::NonFinite { .. })) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let first = try_eval(&x0, true)?
        .ok_or_else(|| CoreError::data("objective is non-finite on the input image"))?;
    let before = first.classes.clone();
    let mut objective = vec![first.objective];
    let mut x = x0;
    let mut cur = first;
    let mut step = cfg.step_size;
    for _ in 0..cfg.iters {
        let Some(grad) = cur.grad.take().filter(|g| g.is_finite()) else {
            // No usable gradient: shrink the step and re-differentiate at the same point.
            step *= 0.5;
            match try_eval(&x, true)? {
                Some(e) if e.grad.as_ref().is_some_and(|g| g.is_finite()) => {
                    cur = e;
                    continue;
                }
                _ => break,
            }
        };
        let mut mean_abs = 0.0;
        for y in region.y..region.y + region.h {
            for xx in region.x..region.x + region.w {
                for ch in 0..3 {
                    mean_abs += grad.data()[(y * w + xx) * 3 + ch].as_f64().abs();
                }
            }
        }
        mean_abs /= (region.w * region.h * 3) as f64;
        if mean_abs == 0.0 {
            break;
        }
        let mut accepted = None;
        step = step.max(cfg.step_size);
        for _ in 0..=cfg.max_halvings {
            let mut cand = x.clone();
            for y in region.y..region.y + region.h {
                for xx in region.x..region.x + region.w {
                    for ch in 0..3 {
                        let o = (y * w + xx) * 3 + ch;
                        let v = cand.data()[o].as_f64() + step * grad.data()[o].as_f64() / mean_abs;
                        cand.data_mut()[o] = T::of(v.clamp(-0.5, 0.5));
                    }
                }
            }
            match try_eval(&cand, true)? {
                Some(e) if e.objective > cur.objective => {
                    accepted = Some((cand, e));
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some((cand, e)) = accepted else { break };
        objective.push(e.objective);
        x = cand;
        cur = e;
    }
    let after = cur.classes.clone();
    Ok(AdversarialResult {
        image: x.cast(),
        target_fraction_before: fraction(&before, region, w, target),
        target_fraction_after: fraction(&after, region, w, target),
        before,
        after,
        objective,
    })
}

