use cellseg_core::checkpoint::{decode_checkpoint, encode_checkpoint, CheckpointError};
use cellseg_core::model::{argmax_classes, env_graph, predict_graph, step_graph};
use cellseg_core::params::{param_breakdown, param_shapes};
use cellseg_core::*;
use cellseg_tensor::numcheck::{check_gradients, worst, CheckOptions};
use cellseg_tensor::{gaussian, Graph, Var};
use proptest::prelude::*;

fn arch(d: usize, hidden: usize) -> ArchConfig {
    ArchConfig {
        cell_size: d,
        hidden_size: hidden,
        ..ArchConfig::default()
    }
}

fn streams(seed: u64, b: usize) -> Vec<RngStream> {
    (0..b)
        .map(|j| RngStream::new(seed, 100 + j as u64))
        .collect()
}

#[test]
fn init_state_moments() {
    let s: Tensor<f64> = init_state(1, 48, 48, 48, &mut RngStream::new(3, 0)).unwrap();
    let n = s.len() as f64;
    let mean = s.data().iter().sum::<f64>() / n;
    let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.02, "{mean}");
    assert!((var.sqrt() - 1.0).abs() < 0.02, "{}", var.sqrt());
    let again: Tensor<f64> = init_state(1, 48, 48, 48, &mut RngStream::new(3, 0)).unwrap();
    assert_eq!(s, again);
    let other: Tensor<f64> = init_state(1, 48, 48, 48, &mut RngStream::new(3, 1)).unwrap();
    assert_ne!(s, other);
    assert!(init_state::<f32>(0, 4, 4, 4, &mut RngStream::new(3, 0)).is_err());
}

fn zero_automaton(resettable: bool, p: f64) -> Automaton<f64> {
    let cfg = ArchConfig {
        norm_kind: NormKind::None,
        resettable,
        update_prob: p,
        ..arch(6, 5)
    };
    Automaton::new(cfg.clone(), zero_params(&cfg)).unwrap()
}

#[test]
fn zero_network_is_identity() {
    for p in [0.5, 1.0] {
        let a = zero_automaton(false, p);
        let img = gaussian([2, 7, 5, 3], &mut RngStream::new(1, 1));
        let s = a.init_state(&img, &mut RngStream::new(1, 2)).unwrap();
        let draws = StepDraws::draw(&a.cfg, 7, 5, &mut streams(4, 2));
        let out = a.step(&s, &img, &draws, 0).unwrap();
        assert_eq!(out.state, s);
        assert!(out.mean_gate.is_none());
    }
}

#[test]
fn zero_resettable_mixes_half_noise() {
    let a = zero_automaton(true, 1.0);
    let img = gaussian([1, 4, 4, 3], &mut RngStream::new(1, 1));
    let s = a.init_state(&img, &mut RngStream::new(1, 2)).unwrap();
    let draws = StepDraws::draw(&a.cfg, 4, 4, &mut streams(5, 1));
    let out = a.step(&s, &img, &draws, 0).unwrap();
    let z = draws.noise.as_ref().unwrap();
    for ((n, z), s) in out.state.data().iter().zip(z.data()).zip(s.data()) {
        assert!((n - (0.5 * z + 0.5 * s)).abs() < 1e-12);
    }
    assert_eq!(out.mean_gate.unwrap(), vec![0.5]);
}

#[test]
fn update_mask_fraction() {
    // A zero non-residual rule moves every cell to 0, so changed cells are exactly the
    // mask-on cells.
    let cfg = ArchConfig {
        norm_kind: NormKind::None,
        residual: false,
        resettable: false,
        ..arch(4, 4)
    };
    let a = Automaton::new(cfg.clone(), zero_params::<f64>(&cfg)).unwrap();
    let img = Tensor::zeros([1, 48, 48, 3]);
    let s = Tensor::full([1, 48, 48, 4], 1.0);
    let draws = StepDraws::draw(&cfg, 48, 48, &mut streams(6, 1));
    let out = a.step(&s, &img, &draws, 0).unwrap();
    let changed = out.state.data().chunks(4).filter(|px| px[0] == 0.0).count();
    let frac = changed as f64 / (48.0 * 48.0);
    assert!((frac - 0.5).abs() < 0.02, "{frac}");
    // Masked cells keep all channels, updated cells change all channels.
    assert!(out
        .state
        .data()
        .chunks(4)
        .all(|px| px.iter().all(|&v| v == px[0])));
}

#[test]
fn bias_only_head() {
    let cfg = arch(4, 4);
    let mut p = zero_params::<f64>(&cfg);
    p.head.as_mut().unwrap().bias = Tensor::from_vec([3], vec![1.0, 0.0, -1.0]).unwrap();
    let a = Automaton::new(cfg, p).unwrap();
    let s = gaussian([2, 3, 3, 4], &mut RngStream::new(2, 2));
    let l = a.logits(&s).unwrap();
    assert_eq!(l.dims(), &[2, 3, 3, 3]);
    assert!(l.data().chunks(3).all(|px| px == [1.0, 0.0, -1.0]));
    assert!(argmax_classes(&l).iter().all(|&c| c == 0));
}

fn adapter_arch() -> ArchConfig {
    ArchConfig {
        resolution_factor: 2,
        ..arch(5, 4)
    }
}

#[test]
fn adapters_shapes() {
    let cfg = adapter_arch();
    let p = init_params::<f32>(&cfg, 1).unwrap();
    let a = Automaton::new(cfg.clone(), p).unwrap();
    let img = Tensor::zeros([1, 96, 96, 3]);
    let env = a.environment(&img).unwrap();
    assert_eq!(env.dims(), &[1, 48, 48, 8]);
    let s = a.init_state(&img, &mut RngStream::new(1, 1)).unwrap();
    assert_eq!(s.dims(), &[1, 48, 48, 5]);
    assert_eq!(a.logits(&s).unwrap().dims(), &[1, 96, 96, 3]);
    assert!(a.environment(&Tensor::zeros([1, 9, 8, 3])).is_err());

    let mut zp = zero_params::<f32>(&cfg);
    zp.encoder.as_mut().unwrap().bias =
        Tensor::from_vec([8], (0..8).map(|i| i as f32).collect()).unwrap();
    let a = Automaton::new(cfg, zp).unwrap();
    let env = a
        .environment(&gaussian([1, 6, 4, 3], &mut RngStream::new(1, 1)))
        .unwrap();
    assert!(env
        .data()
        .chunks(8)
        .all(|px| px == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
}

/// Loss through selected parameters with every other tensor fixed.
fn param_gradcheck(
    cfg: &ArchConfig,
    pick: &[&str],
    f: impl Fn(&mut Graph<f64>, &RuleParams<Var>) -> cellseg_core::Result<Var>,
) -> f64 {
    let base = init_params::<f64>(cfg, 7).unwrap();
    let names = base.names();
    let slots = base.slots();
    let idx: Vec<usize> = pick
        .iter()
        .map(|p| names.iter().position(|n| n == p).unwrap())
        .collect();
    let inputs: Vec<Tensor<f64>> = idx.iter().map(|&i| slots[i].clone()).collect();
    let reps = check_gradients(&inputs, &CheckOptions::default(), |g, vars| {
        let mut k = 0;
        let bound = base.map(|name, t| match pick.iter().position(|p| *p == name) {
            Some(j) => {
                k += 1;
                vars[j]
            }
            None => g.constant(t.clone()),
        });
        assert_eq!(k, pick.len());
        f(g, &bound).map_err(|e| match e {
            CoreError::Tensor(t) => t,
            other => panic!("{other}"),
        })
    })
    .unwrap();
    worst(&reps)
}

fn weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    gaussian(
        cellseg_tensor::Shape::new(shape).unwrap(),
        &mut RngStream::new(seed, 9),
    )
}

#[test]
fn head_decoder_encoder_gradients() {
    let cfg = arch(4, 3);
    let s = weights(&[2, 3, 3, 4], 1);
    let e = param_gradcheck(&cfg, &["head.kernel", "head.bias"], |g, p| {
        let x = g.constant(s.clone());
        let l = predict_graph(g, p, x)?;
        Ok(g.weighted_sum(l, &weights(&[2, 3, 3, 3], 2))?)
    });
    assert!(e < 1e-4, "head {e}");

    let cfg = adapter_arch();
    let s = weights(&[1, 3, 2, 5], 3);
    let e = param_gradcheck(&cfg, &["decoder.kernel", "decoder.bias"], |g, p| {
        let x = g.constant(s.clone());
        let l = predict_graph(g, p, x)?;
        Ok(g.weighted_sum(l, &weights(&[1, 6, 4, 3], 4))?)
    });
    assert!(e < 1e-4, "decoder {e}");

    let img = weights(&[1, 6, 4, 3], 5);
    let e = param_gradcheck(&cfg, &["encoder.kernel", "encoder.bias"], |g, p| {
        let x = g.constant(img.clone());
        let l = env_graph(g, p, x)?;
        Ok(g.weighted_sum(l, &weights(&[1, 3, 2, 8], 6))?)
    });
    assert!(e < 1e-4, "encoder {e}");
}

#[test]
fn step_gradients_all_variants() {
    for (first, norm) in [
        (FirstLayer::Full3x3, NormKind::Instance),
        (FirstLayer::DepthwiseThen1x1, NormKind::Channel),
        (FirstLayer::Full3x3, NormKind::BatchLive),
    ] {
        let cfg = ArchConfig {
            first_layer: first,
            norm_kind: norm,
            ..arch(3, 4)
        };
        let names: Vec<String> = param_shapes(&cfg).names();
        let pick: Vec<&str> = names
            .iter()
            .map(String::as_str)
            .filter(|n| !n.starts_with("head"))
            .collect();
        let s = weights(&[2, 4, 3, 3], 11);
        let img = weights(&[2, 4, 3, 3], 12);
        let draws = StepDraws::draw(&cfg, 4, 3, &mut streams(13, 2));
        let e = param_gradcheck(&cfg, &pick, |g, p| {
            let x = g.constant(s.clone());
            let env = g.constant(img.clone());
            let out = step_graph(g, p, &cfg, x, env, &draws)?;
            Ok(g.weighted_sum(out.state, &weights(&[2, 4, 3, 3], 14))?)
        });
        assert!(e < 1e-4, "{first:?}/{norm:?}: {e}");
    }
}

#[test]
fn param_counts_match_closed_form_and_manifest() {
    let rows = [
        (32, 48, 21_440, 8_350),
        (48, 72, 47_136, 18_270),
        (64, 96, 82_816, 32_030),
    ];
    for (d, h, full, dw) in rows {
        for (first, want) in [
            (FirstLayer::Full3x3, full),
            (FirstLayer::DepthwiseThen1x1, dw),
        ] {
            let cfg = ArchConfig {
                first_layer: first,
                norm_kind: NormKind::None,
                resettable: false,
                ..arch(d, h)
            };
            assert_eq!(param_breakdown(&cfg).core, want, "{d}/{h} {first:?}");
        }
    }
    for factor in [1, 2] {
        for resettable in [false, true] {
            for norm in [NormKind::None, NormKind::Instance] {
                for first in [FirstLayer::Full3x3, FirstLayer::DepthwiseThen1x1] {
                    let cfg = ArchConfig {
                        resolution_factor: factor,
                        resettable,
                        norm_kind: norm,
                        first_layer: first,
                        ..arch(32, 48)
                    };
                    let p = init_params::<f32>(&cfg, 0).unwrap();
                    assert_eq!(p.numel(), param_count(&cfg));
                }
            }
        }
    }
    let cfg = ArchConfig {
        resolution_factor: 2,
        ..arch(48, 64)
    };
    assert_eq!(param_breakdown(&cfg).adapters, 27 * 8 + 8 + 9 * 48 * 3 + 3);
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let cfg = ArchConfig {
        first_layer: FirstLayer::DepthwiseThen1x1,
        resolution_factor: 2,
        ..arch(5, 6)
    };
    let p = init_params::<f32>(&cfg, 42).unwrap();
    let meta = CheckpointMeta {
        step: 17,
        seed: 42,
        extra: serde_json::json!({"note": "x"}),
    };
    let bytes = encode_checkpoint(&p, &cfg, &meta).unwrap();
    assert_eq!(&bytes[..4], b"NCAW");
    let (q, cfg2, meta2) = decode_checkpoint::<f32>(&bytes).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(meta2, meta);
    for (a, b) in p.slots().iter().zip(q.slots()) {
        assert_eq!(a.shape(), b.shape());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        decode_checkpoint::<f32>(&bad),
        Err(CheckpointError::BadMagic)
    ));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(
        decode_checkpoint::<f32>(&bad),
        Err(CheckpointError::VersionMismatch { found: 2 })
    ));
    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(
        decode_checkpoint::<f32>(cut),
        Err(CheckpointError::TruncatedPayload { .. })
    ));
    let mut bad = bytes.clone();
    bad[20] = b'!';
    assert!(matches!(
        decode_checkpoint::<f32>(&bad),
        Err(CheckpointError::Corrupt(_))
    ));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ncaw");
    save_checkpoint(&p, &cfg, &meta, &path).unwrap();
    let (q, _, _) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(p, q);
}

#[test]
fn state_rgb_contract() {
    let flat = Tensor::full([1, 4, 4, 5], 3.0f32);
    assert!(state_rgb(&flat).unwrap().data().iter().all(|&v| v == 0.5));
    let s: Tensor<f32> = gaussian([2, 8, 8, 5], &mut RngStream::new(1, 1));
    let a = state_rgb(&s).unwrap();
    assert_eq!(a.dims(), &[2, 8, 8, 3]);
    assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(a, state_rgb(&s).unwrap());
    assert!(state_rgb(&Tensor::<f32>::zeros([1, 2, 2, 2])).is_err());
}

fn shift_grid(t: &Tensor<f64>, dx: isize, dy: isize) -> Tensor<f64> {
    let (b, h, w, c) = t.shape().nhwc().unwrap();
    let mut out = Tensor::zeros(t.shape().clone());
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as isize - dy, x as isize - dx);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                for ch in 0..c {
                    let v = t.at4(n, sy as usize, sx as usize, ch);
                    let o = out.offset4(n, y, x, ch);
                    out.data_mut()[o] = v;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn masked_cells_unchanged_and_gate_open_interval(seed in 0u64..10_000, p in 0.1f64..0.9) {
        let cfg = ArchConfig { update_prob: p, ..arch(4, 6) };
        let a = Automaton::new(cfg.clone(), init_params::<f64>(&cfg, seed).unwrap()).unwrap();
        let img = gaussian([2, 5, 6, 3], &mut RngStream::new(seed, 1)).map(|v: f64| v * 0.3);
        let s = a.init_state(&img, &mut RngStream::new(seed, 2)).unwrap();
        let draws = StepDraws::draw(&cfg, 5, 6, &mut streams(seed, 2));
        let out = a.step(&s, &img, &draws, 0).unwrap();
        for (cell, m) in draws.mask.data().iter().enumerate() {
            if *m == 0.0 {
                for ch in 0..4 {
                    prop_assert_eq!(out.state.data()[cell * 4 + ch].to_bits(), s.data()[cell * 4 + ch].to_bits());
                }
            }
        }
        for g in out.mean_gate.unwrap() {
            prop_assert!(g > 0.0 && g < 1.0);
        }
    }

    #[test]
    fn translation_equivariance(seed in 0u64..10_000, dx in -2isize..=2, dy in -2isize..=2) {
        // Instance norm pools over the whole frame, so equivariance is checked with the
        // per-pixel channel norm.
        let cfg = ArchConfig { norm_kind: NormKind::Channel, ..arch(4, 6) };
        let a = Automaton::new(cfg.clone(), init_params::<f64>(&cfg, seed).unwrap()).unwrap();
        let (h, w) = (11, 12);
        let img = gaussian([1, h, w, 3], &mut RngStream::new(seed, 1));
        let s = gaussian([1, h, w, 4], &mut RngStream::new(seed, 2));
        let draws = StepDraws::draw(&cfg, h, w, &mut streams(seed, 1));
        let shifted = StepDraws {
            mask: shift_grid(&draws.mask, dx, dy),
            noise: draws.noise.as_ref().map(|z| shift_grid(z, dx, dy)),
        };
        let base = a.step(&s, &img, &draws, 0).unwrap().state;
        let moved = a.step(&shift_grid(&s, dx, dy), &shift_grid(&img, dx, dy), &shifted, 0).unwrap().state;
        let expect = shift_grid(&base, dx, dy);
        let margin = 2 + dx.unsigned_abs().max(dy.unsigned_abs());
        for y in margin..h - margin {
            for x in margin..w - margin {
                for c in 0..4 {
                    let (u, v) = (moved.at4(0, y, x, c), expect.at4(0, y, x, c));
                    prop_assert!((u - v).abs() < 1e-12, "({}, {}, {}): {} vs {}", y, x, c, u, v);
                }
            }
        }
    }
}
