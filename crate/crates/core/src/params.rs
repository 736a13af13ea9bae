//! Learned weights of the update rule, head, and resolution adapters.
//!
//! [`RuleParams`] is generic over the slot type so the same layout holds concrete tensors,
//! graph variables bound for one forward pass, or gradients.

use cellseg_tensor::{gaussian, Graph, Purpose, RngStream, Scalar, Shape, Tensor, Var};

use crate::config::{ArchConfig, FirstLayer, ENCODED_CHANNELS, IMAGE_CHANNELS};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<S> {
    pub kernel: S,
    pub bias: S,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FirstLayerParams<S> {
    Full(Conv<S>),
    Depthwise { spatial: Conv<S>, mix: Conv<S> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine<S> {
    pub gain: S,
    pub bias: S,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuleParams<S> {
    pub layer1: FirstLayerParams<S>,
    pub layer2: Conv<S>,
    pub layer3: Conv<S>,
    pub layer4: Conv<S>,
    /// One affine per normalized layer (1–3); absent when `norm_kind` is none.
    pub norms: Option<[Affine<S>; 3]>,
    pub gate: Option<Conv<S>>,
    /// 1×1 head; replaced by `decoder` when the state runs at half resolution.
    pub head: Option<Conv<S>>,
    pub encoder: Option<Conv<S>>,
    pub decoder: Option<Conv<S>>,
}

pub type UpdateRuleParams<T> = RuleParams<Tensor<T>>;

fn map_conv<S, U>(
    prefix: &str,
    c: &Conv<S>,
    f: &mut impl FnMut(&str, &S) -> Result<U>,
) -> Result<Conv<U>> {
    Ok(Conv {
        kernel: f(&format!("{prefix}.kernel"), &c.kernel)?,
        bias: f(&format!("{prefix}.bias"), &c.bias)?,
    })
}

fn visit_conv<S>(prefix: &str, c: &mut Conv<S>, f: &mut impl FnMut(&str, &mut S)) {
    f(&format!("{prefix}.kernel"), &mut c.kernel);
    f(&format!("{prefix}.bias"), &mut c.bias);
}

impl<S> RuleParams<S> {
    /// Maps every slot, in manifest order, to a new slot type.
    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &S) -> Result<U>) -> Result<RuleParams<U>> {
        let f = &mut f;
        let layer1 = match &self.layer1 {
            FirstLayerParams::Full(c) => FirstLayerParams::Full(map_conv("layer1", c, f)?),
            FirstLayerParams::Depthwise { spatial, mix } => FirstLayerParams::Depthwise {
                spatial: map_conv("layer1.depthwise", spatial, f)?,
                mix: map_conv("layer1.pointwise", mix, f)?,
            },
        };
        let layer2 = map_conv("layer2", &self.layer2, f)?;
        let layer3 = map_conv("layer3", &self.layer3, f)?;
        let layer4 = map_conv("layer4", &self.layer4, f)?;
        let norms = match &self.norms {
            Some(ns) => {
                let mut out = Vec::with_capacity(3);
                for (i, n) in ns.iter().enumerate() {
                    out.push(Affine {
                        gain: f(&format!("norm{}.gain", i + 1), &n.gain)?,
                        bias: f(&format!("norm{}.bias", i + 1), &n.bias)?,
                    });
                }
                let [a, b, c]: [Affine<U>; 3] = out.try_into().ok().expect("three norms");
                Some([a, b, c])
            }
            None => None,
        };
        Ok(RuleParams {
            layer1,
            layer2,
            layer3,
            layer4,
            norms,
            gate: self
                .gate
                .as_ref()
                .map(|c| map_conv("gate", c, f))
                .transpose()?,
            head: self
                .head
                .as_ref()
                .map(|c| map_conv("head", c, f))
                .transpose()?,
            encoder: self
                .encoder
                .as_ref()
                .map(|c| map_conv("encoder", c, f))
                .transpose()?,
            decoder: self
                .decoder
                .as_ref()
                .map(|c| map_conv("decoder", c, f))
                .transpose()?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &S) -> U) -> RuleParams<U> {
        self.try_map(|n, s| Ok(f(n, s))).expect("infallible map")
    }

    /// Visits every slot in manifest order.
    pub fn visit(&self, mut f: impl FnMut(&str, &S)) {
        let _ = self.map(|n, s| f(n, s));
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut S)) {
        let f = &mut f;
        match &mut self.layer1 {
            FirstLayerParams::Full(c) => visit_conv("layer1", c, f),
            FirstLayerParams::Depthwise { spatial, mix } => {
                visit_conv("layer1.depthwise", spatial, f);
                visit_conv("layer1.pointwise", mix, f);
            }
        }
        visit_conv("layer2", &mut self.layer2, f);
        visit_conv("layer3", &mut self.layer3, f);
        visit_conv("layer4", &mut self.layer4, f);
        if let Some(ns) = &mut self.norms {
            for (i, n) in ns.iter_mut().enumerate() {
                f(&format!("norm{}.gain", i + 1), &mut n.gain);
                f(&format!("norm{}.bias", i + 1), &mut n.bias);
            }
        }
        for (name, c) in [
            ("gate", &mut self.gate),
            ("head", &mut self.head),
            ("encoder", &mut self.encoder),
            ("decoder", &mut self.decoder),
        ] {
            if let Some(c) = c {
                visit_conv(name, c, f);
            }
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|n, _| out.push(n.to_string()));
        out
    }

    /// Slots as a flat list in manifest order.
    pub fn slots(&self) -> Vec<&S> {
        let mut out: Vec<&S> = Vec::new();
        // Walk fields directly so the references borrow from `self`.
        match &self.layer1 {
            FirstLayerParams::Full(c) => out.extend([&c.kernel, &c.bias]),
            FirstLayerParams::Depthwise { spatial, mix } => {
                out.extend([&spatial.kernel, &spatial.bias, &mix.kernel, &mix.bias])
            }
        }
        for c in [&self.layer2, &self.layer3, &self.layer4] {
            out.extend([&c.kernel, &c.bias]);
        }
        if let Some(ns) = &self.norms {
            for n in ns {
                out.extend([&n.gain, &n.bias]);
            }
        }
        for c in [&self.gate, &self.head, &self.encoder, &self.decoder]
            .into_iter()
            .flatten()
        {
            out.extend([&c.kernel, &c.bias]);
        }
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut S> {
        let mut out: Vec<&mut S> = Vec::new();
        match &mut self.layer1 {
            FirstLayerParams::Full(c) => out.extend([&mut c.kernel, &mut c.bias]),
            FirstLayerParams::Depthwise { spatial, mix } => out.extend([
                &mut spatial.kernel,
                &mut spatial.bias,
                &mut mix.kernel,
                &mut mix.bias,
            ]),
        }
        for c in [&mut self.layer2, &mut self.layer3, &mut self.layer4] {
            out.extend([&mut c.kernel, &mut c.bias]);
        }
        if let Some(ns) = &mut self.norms {
            for n in ns {
                out.extend([&mut n.gain, &mut n.bias]);
            }
        }
        for c in [
            &mut self.gate,
            &mut self.head,
            &mut self.encoder,
            &mut self.decoder,
        ]
        .into_iter()
        .flatten()
        {
            out.extend([&mut c.kernel, &mut c.bias]);
        }
        out
    }
}

/// Names of the layer-1 spatial kernels, which the random-filter ablation keeps frozen.
pub fn is_spatial_filter(name: &str) -> bool {
    name == "layer1.kernel" || name == "layer1.depthwise.kernel"
}

/// Whether the optimizer updates this tensor under `cfg`.
pub fn is_trainable(cfg: &ArchConfig, name: &str) -> bool {
    !(cfg.freeze_spatial_filters && is_spatial_filter(name))
}

/// Shapes of every tensor for `cfg`, in manifest order.
pub fn param_shapes(cfg: &ArchConfig) -> RuleParams<Shape> {
    let (d, hd, cin, nc) = (
        cfg.cell_size,
        cfg.hidden_size,
        cfg.input_channels(),
        cfg.num_classes,
    );
    let conv = |kernel: Vec<usize>, bias: usize| Conv {
        kernel: Shape::new(&kernel).expect("rank <= 4"),
        bias: Shape::from([bias]),
    };
    let layer1 = match cfg.first_layer {
        FirstLayer::Full3x3 => FirstLayerParams::Full(conv(vec![3, 3, cin, hd], hd)),
        FirstLayer::DepthwiseThen1x1 => FirstLayerParams::Depthwise {
            spatial: conv(vec![3, 3, cin], cin),
            mix: conv(vec![1, 1, cin, hd], hd),
        },
    };
    let affine = |c: usize| Affine {
        gain: Shape::from([c]),
        bias: Shape::from([c]),
    };
    RuleParams {
        layer1,
        layer2: conv(vec![1, 1, hd, hd], hd),
        layer3: conv(vec![1, 1, hd, hd], hd),
        layer4: conv(vec![1, 1, hd, d], d),
        norms: (!cfg.norm_kind.is_none()).then(|| [affine(hd), affine(hd), affine(hd)]),
        gate: cfg.resettable.then(|| conv(vec![1, 1, hd, 1], 1)),
        head: (!cfg.has_adapters()).then(|| conv(vec![1, 1, d, nc], nc)),
        encoder: cfg.has_adapters().then(|| {
            conv(
                vec![3, 3, IMAGE_CHANNELS, ENCODED_CHANNELS],
                ENCODED_CHANNELS,
            )
        }),
        decoder: cfg.has_adapters().then(|| conv(vec![3, 3, nc, d], nc)),
    }
}

/// Closed-form parameter counts, split by role.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    /// The four update layers.
    pub core: usize,
    pub gate: usize,
    pub head: usize,
    pub norm: usize,
    pub adapters: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.core + self.gate + self.head + self.norm + self.adapters
    }
}

pub fn param_breakdown(cfg: &ArchConfig) -> ParamBreakdown {
    let (d, hd, cin, nc) = (
        cfg.cell_size,
        cfg.hidden_size,
        cfg.input_channels(),
        cfg.num_classes,
    );
    let layer1 = match cfg.first_layer {
        FirstLayer::Full3x3 => 9 * cin * hd + hd,
        FirstLayer::DepthwiseThen1x1 => (9 * cin + cin) + (cin * hd + hd),
    };
    let core = layer1 + 2 * (hd * hd + hd) + (hd * d + d);
    let adapters = if cfg.has_adapters() {
        (9 * IMAGE_CHANNELS * ENCODED_CHANNELS + ENCODED_CHANNELS) + (9 * d * nc + nc)
    } else {
        0
    };
    ParamBreakdown {
        core,
        gate: if cfg.resettable { hd + 1 } else { 0 },
        head: if cfg.has_adapters() { 0 } else { d * nc + nc },
        norm: if cfg.norm_kind.is_none() {
            0
        } else {
            3 * 2 * hd
        },
        adapters,
    }
}

/// Exact number of trainable scalars (frozen spatial filters still count as parameters).
pub fn param_count(cfg: &ArchConfig) -> usize {
    param_breakdown(cfg).total()
}

/// Randomly initialized parameters drawn from the `Init` stream of `seed`.
///
/// ReLU layers use He-normal kernels. The update layer starts at zero so an untrained
/// rule leaves residual states untouched, and the gate starts mostly closed
/// (σ(−2) ≈ 0.12) so early training is not dominated by reset noise.
pub fn init_params<T: Scalar>(cfg: &ArchConfig, seed: u64) -> Result<UpdateRuleParams<T>> {
    cfg.validate()?;
    let shapes = param_shapes(cfg);
    let root = RngStream::for_purpose(seed, Purpose::Init);
    let mut index = 0u64;
    shapes.try_map(|name, shape| {
        index += 1;
        let mut rng = root.substream(index);
        let dims = shape.dims();
        let t = if name.ends_with(".gain") {
            Tensor::full(shape.clone(), T::one())
        } else if name == "gate.bias" {
            Tensor::full(shape.clone(), T::of(-2.0))
        } else if name.ends_with(".bias") || name.starts_with("layer4") {
            Tensor::zeros(shape.clone())
        } else {
            let fan_in: usize = match dims.len() {
                3 => 9,
                _ => dims[0] * dims[1] * dims[2],
            };
            let gain = if name.starts_with("head")
                || name.starts_with("gate")
                || name.starts_with("decoder")
            {
                1.0
            } else {
                2.0
            };
            let std = T::of((gain / fan_in as f64).sqrt());
            gaussian::<T>(shape.clone(), &mut rng).map(|v| v * std)
        };
        Ok(t)
    })
}

/// Parameters with every tensor zero (and unit norm gains), handy for analytic tests.
pub fn zero_params<T: Scalar>(cfg: &ArchConfig) -> UpdateRuleParams<T> {
    param_shapes(cfg).map(|name, shape| {
        if name.ends_with(".gain") {
            Tensor::full(shape.clone(), T::one())
        } else {
            Tensor::zeros(shape.clone())
        }
    })
}

impl<T: Scalar> UpdateRuleParams<T> {
    /// Registers every tensor in `g`: trainable ones as parameters, frozen ones (and all
    /// of them when `train` is false) as constants.
    pub fn bind(&self, g: &mut Graph<T>, cfg: &ArchConfig, train: bool) -> RuleParams<Var> {
        self.map(|name, t| {
            if train && is_trainable(cfg, name) {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    pub fn numel(&self) -> usize {
        self.slots().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> UpdateRuleParams<U> {
        self.map(|_, t| t.cast())
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check(&self, cfg: &ArchConfig) -> Result<()> {
        let want = param_shapes(cfg);
        let want_names = want.names();
        let have_names = self.names();
        if want_names != have_names {
            return Err(CoreError::config(format!(
                "parameter layout {have_names:?} does not match architecture {want_names:?}"
            )));
        }
        let mut err = None;
        let want_slots = want.slots();
        for ((t, w), name) in self.slots().iter().zip(want_slots).zip(&want_names) {
            if t.shape() != w && err.is_none() {
                err = Some(CoreError::config(format!(
                    "{name}: shape {} but architecture needs {w}",
                    t.shape()
                )));
            }
        }
        err.map_or(Ok(()), Err)
    }
}
