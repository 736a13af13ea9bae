//! The cellular automaton: state initialization, one stochastic update step, the
//! prediction head, and the stride-2 resolution adapters.

use cellseg_tensor::{gaussian, Graph, RngStream, Scalar, Tensor, Var};

use crate::config::{ArchConfig, FirstLayer};
use crate::error::{CoreError, Result};
use crate::params::{FirstLayerParams, RuleParams, UpdateRuleParams};

/// I.i.d. N(0, 1) states of shape `[batch, h, w, d]`.
pub fn init_state<T: Scalar>(
    batch: usize,
    h: usize,
    w: usize,
    d: usize,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    if batch == 0 || h == 0 || w == 0 || d == 0 {
        return Err(CoreError::config(format!(
            "state extents must be positive, got [{batch}, {h}, {w}, {d}]"
        )));
    }
    Ok(gaussian([batch, h, w, d], rng))
}

/// Random draws consumed by one update step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraws<T> {
    /// Per-cell update mask `[b, h, w, 1]`, 1 where the cell changes.
    pub mask: Tensor<T>,
    /// Reset noise `[b, h, w, d]`, present for resettable rules.
    pub noise: Option<Tensor<T>>,
}

impl<T: Scalar> StepDraws<T> {
    /// One stream per batch entry; each stream yields the entry's mask, then its noise.
    pub fn draw(cfg: &ArchConfig, h: usize, w: usize, streams: &mut [RngStream]) -> Self {
        let (b, d, n) = (streams.len(), cfg.cell_size, h * w);
        let mut mask = Vec::with_capacity(b * n);
        let mut noise = Vec::with_capacity(if cfg.resettable { b * n * d } else { 0 });
        for rng in streams.iter_mut() {
            for _ in 0..n {
                let on = rng.uniform() < cfg.update_prob;
                mask.push(if on { T::one() } else { T::zero() });
            }
            if cfg.resettable {
                noise.extend((0..n * d).map(|_| T::of(rng.normal())));
            }
        }
        StepDraws {
            mask: Tensor::from_vec([b, h, w, 1], mask).expect("sized above"),
            noise: cfg
                .resettable
                .then(|| Tensor::from_vec([b, h, w, d], noise).expect("sized above")),
        }
    }
}

/// Graph handles produced by one step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub state: Var,
    /// Gate activation `[b, h, w, 1]` for resettable rules.
    pub gate: Option<Var>,
    /// Post-activation output of layer 3.
    pub hidden: Var,
}

fn conv(
    g: &mut Graph<impl Scalar>,
    x: Var,
    c: &crate::params::Conv<Var>,
    stride: usize,
) -> Result<Var> {
    Ok(g.conv2d(x, c.kernel, c.bias, stride)?)
}

/// Records one update step of the whole batch in `g`.
///
/// `env` is the environment at state resolution (raw pixels, or their encoding).
pub fn step_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &RuleParams<Var>,
    cfg: &ArchConfig,
    state: Var,
    env: Var,
    draws: &StepDraws<T>,
) -> Result<StepVars> {
    let x = g.concat_channels(state, env)?;
    let mut h = match (&p.layer1, cfg.first_layer) {
        (FirstLayerParams::Full(c), FirstLayer::Full3x3) => conv(g, x, c, 1)?,
        (FirstLayerParams::Depthwise { spatial, mix }, FirstLayer::DepthwiseThen1x1) => {
            let s = g.depthwise_conv3x3(x, spatial.kernel, spatial.bias)?;
            conv(g, s, mix, 1)?
        }
        _ => {
            return Err(CoreError::config(
                "layer-1 parameters do not match first_layer",
            ))
        }
    };
    for i in 0..3 {
        if i > 0 {
            let layer = if i == 1 { &p.layer2 } else { &p.layer3 };
            h = conv(g, h, layer, 1)?;
        }
        if let Some(ns) = &p.norms {
            h = g.normalize(h, cfg.norm_kind, ns[i].gain, ns[i].bias)?;
        }
        h = g.relu(h)?;
    }
    let hidden = h;
    let u = conv(g, hidden, &p.layer4, 1)?;
    let candidate = if cfg.residual { g.add(u, state)? } else { u };
    let (gated, gate) = match (&p.gate, cfg.resettable) {
        (Some(gp), true) => {
            let noise = draws
                .noise
                .clone()
                .ok_or_else(|| CoreError::config("resettable step needs reset noise"))?;
            let logit = conv(g, hidden, gp, 1)?;
            let r = g.sigmoid(logit)?;
            let z = g.constant(noise);
            (g.lerp(r, z, candidate)?, Some(r))
        }
        (None, false) => (candidate, None),
        _ => return Err(CoreError::config("gate parameters do not match resettable")),
    };
    let m = g.constant(draws.mask.clone());
    let state = g.lerp(m, gated, state)?;
    Ok(StepVars {
        state,
        gate,
        hidden,
    })
}

/// Logits at image resolution, no softmax.
pub fn predict_graph<T: Scalar>(g: &mut Graph<T>, p: &RuleParams<Var>, state: Var) -> Result<Var> {
    match (&p.head, &p.decoder) {
        (Some(h), None) => conv(g, state, h, 1),
        (None, Some(dec)) => Ok(g.transpose_conv2d_s2(state, dec.kernel, dec.bias)?),
        _ => Err(CoreError::config(
            "exactly one of head/decoder must be present",
        )),
    }
}

/// Environment at state resolution: the pixels themselves, or their stride-2 encoding.
pub fn env_graph<T: Scalar>(g: &mut Graph<T>, p: &RuleParams<Var>, images: Var) -> Result<Var> {
    match &p.encoder {
        None => Ok(images),
        Some(enc) => {
            let (_, h, w, _) = g.shape(images).nhwc()?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(CoreError::config(format!(
                    "encoder input extents must be even, got {h}×{w}"
                )));
            }
            conv(g, images, enc, 2)
        }
    }
}

/// Per-batch-entry mean of a `[b, h, w, c]` tensor.
pub fn batch_means<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    let b = t.dims()[0];
    let n = t.len() / b.max(1);
    t.data()
        .chunks(n.max(1))
        .map(|c| c.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64)
        .collect()
}

/// Result of one inference step.
#[derive(Clone, Debug)]
pub struct StepResult<T> {
    pub state: Tensor<T>,
    /// Mean gate per batch entry, for resettable rules.
    pub mean_gate: Option<Vec<f64>>,
    pub hidden: Tensor<T>,
}

/// Trained rule packaged for inference: every call builds a throwaway graph with the
/// parameters as constants.
#[derive(Clone, Debug)]
pub struct Automaton<T> {
    pub cfg: ArchConfig,
    pub params: UpdateRuleParams<T>,
}

impl<T: Scalar> Automaton<T> {
    pub fn new(cfg: ArchConfig, params: UpdateRuleParams<T>) -> Result<Self> {
        cfg.validate()?;
        params.check(&cfg)?;
        Ok(Automaton { cfg, params })
    }

    fn bind(&self, g: &mut Graph<T>) -> RuleParams<Var> {
        self.params.bind(g, &self.cfg, false)
    }

    /// Encodes `images` `[b, H, W, 3]` to the state-resolution environment.
    pub fn environment(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.cfg.has_adapters() {
            return Ok(images.clone());
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(images.clone());
        let e = env_graph(&mut g, &p, x)?;
        Ok(g.value(e).clone())
    }

    /// Fresh N(0, 1) states matching `images` `[b, H, W, 3]`.
    pub fn init_state(&self, images: &Tensor<T>, rng: &mut RngStream) -> Result<Tensor<T>> {
        let (b, h, w, _) = images.shape().nhwc()?;
        let f = self.cfg.resolution_factor;
        init_state(b, self.cfg.state_extent(h)?, w / f, self.cfg.cell_size, rng)
    }

    /// One update; `step` is only used to label a divergence error.
    pub fn step(
        &self,
        state: &Tensor<T>,
        env: &Tensor<T>,
        draws: &StepDraws<T>,
        step: usize,
    ) -> Result<StepResult<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let s = g.constant(state.clone());
        let e = g.constant(env.clone());
        let out = match step_graph(&mut g, &p, &self.cfg, s, e, draws) {
            Ok(o) => o,
            Err(CoreError::Tensor(cellseg_tensor::TensorError::NonFinite { .. })) => {
                return Err(CoreError::NonFiniteState { step })
            }
            Err(e) => return Err(e),
        };
        Ok(StepResult {
            state: g.value(out.state).clone(),
            mean_gate: out.gate.map(|r| batch_means(g.value(r))),
            hidden: g.value(out.hidden).clone(),
        })
    }

    pub fn logits(&self, state: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let s = g.constant(state.clone());
        let l = predict_graph(&mut g, &p, s)?;
        Ok(g.value(l).clone())
    }
}

/// Arg-max class per pixel of `[b, h, w, c]` logits.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let c = logits.shape().channels();
    logits
        .data()
        .chunks(c)
        .map(|px| {
            let mut best = 0;
            for (i, v) in px.iter().enumerate() {
                if *v > px[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// First three state channels mapped per frame so the 1st–99th percentile spans
/// [0, 1], clamped; a degenerate range maps to 0.5.
pub fn state_rgb<T: Scalar>(state: &Tensor<T>) -> Result<Tensor<f32>> {
    let (b, h, w, d) = state.shape().nhwc()?;
    if d < 3 {
        return Err(CoreError::config(format!(
            "state_rgb needs d >= 3, got {d}"
        )));
    }
    let mut out = Vec::with_capacity(b * h * w * 3);
    for n in 0..b {
        let frame = &state.data()[n * h * w * d..(n + 1) * h * w * d];
        let mut vals: Vec<f64> = frame
            .chunks(d)
            .flat_map(|px| px[..3].iter().map(|v| v.as_f64()))
            .collect();
        let rgb = vals.clone();
        vals.sort_by(|a, b| a.total_cmp(b));
        let (lo, hi) = (percentile(&vals, 0.01), percentile(&vals, 0.99));
        let span = hi - lo;
        let flat = !(span > 1e-12 * hi.abs().max(lo.abs()).max(1.0));
        out.extend(rgb.iter().map(|&v| {
            if flat {
                0.5
            } else {
                ((v - lo) / span).clamp(0.0, 1.0) as f32
            }
        }));
    }
    Ok(Tensor::from_vec([b, h, w, 3], out)?)
}

/// Linear-interpolated percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + frac * (sorted[j] - sorted[i])
}
