use cellseg_core::analysis::*;
use cellseg_core::data::perturb::Rect;
use cellseg_core::data::synthetic::{synthetic_sample, SyntheticSpec};
use cellseg_core::data::{LabelMask, Sample, OBJECT};
use cellseg_core::training::{TrainConfig, Trainer, UnrollSchedule};
use cellseg_core::*;
use proptest::prelude::*;

fn label(h: usize, w: usize, classes: Vec<u8>) -> LabelMask {
    LabelMask::new(h, w, classes).unwrap()
}

#[test]
fn iou_identical_and_disjoint() {
    let l = label(2, 3, vec![0, 1, 1, 0, 2, 1]);
    let r = iou(&l.classes, &l).unwrap();
    assert_eq!(r.iou, [Some(1.0), Some(1.0), Some(1.0)]);

    let l = label(1, 4, vec![0, 0, 1, 1]);
    let r = iou(&[1, 1, 0, 0], &l).unwrap();
    assert_eq!(r.iou[0], Some(0.0));
    assert_eq!(r.iou[1], Some(0.0));
    // Boundary is in neither map: absent, not 0 or 1.
    assert_eq!(r.iou[2], None);
    assert!(iou(&[0, 0], &l).is_err());
}

#[test]
fn iou_hand_counted_toy() {
    // Label: object on the top two rows (8 px). Prediction: object on rows 1–2 (8 px).
    // Overlap is row 1 (4 px), union 12 px.
    let mut lab = vec![0u8; 16];
    let mut pred = vec![0u8; 16];
    lab[..8].fill(1);
    pred[4..12].fill(1);
    let r = iou(&pred, &label(4, 4, lab)).unwrap();
    assert_eq!(r.intersection[1], 4);
    assert_eq!(r.union[1], 12);
    assert!((r.object().unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn pooled_counts_differ_from_image_mean() {
    let a = label(1, 4, vec![1, 1, 1, 1]);
    let b = label(1, 4, vec![0, 0, 0, 1]);
    let mut acc = IouCounts::default();
    acc.add(&[1, 1, 1, 1], &a.classes).unwrap();
    acc.add(&[0, 0, 0, 0], &b.classes).unwrap();
    let r = acc.report(7, "x");
    assert_eq!(r.object(), Some(4.0 / 5.0));
    assert_eq!((r.step, r.run_id.as_str()), (7, "x"));
}

proptest! {
    #[test]
    fn iou_symmetric_under_relabeling(data in prop::collection::vec((0u8..3, 0u8..3), 1..64), perm in 0usize..6) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let p = perms[perm];
        let pred: Vec<u8> = data.iter().map(|d| d.0).collect();
        let lab: Vec<u8> = data.iter().map(|d| d.1).collect();
        let n = pred.len();
        let r = iou(&pred, &label(1, n, lab.clone())).unwrap();
        let pred2: Vec<u8> = pred.iter().map(|&c| p[c as usize]).collect();
        let lab2: Vec<u8> = lab.iter().map(|&c| p[c as usize]).collect();
        let r2 = iou(&pred2, &label(1, n, lab2)).unwrap();
        for c in 0..3 {
            prop_assert_eq!(r.iou[c], r2.iou[p[c] as usize]);
        }
    }
}

fn samples(n: usize, count: usize) -> Vec<Sample> {
    let spec = SyntheticSpec {
        resolution: n,
        boundary_thickness: 1,
        count,
        seed: 3,
        ..SyntheticSpec::default()
    };
    (0..count).map(|i| synthetic_sample(&spec, i).unwrap()).collect()
}

fn random_model(cfg: ArchConfig, seed: u64) -> Automaton32 {
    // Perturb the zero-initialized last layer so the dynamics are not trivial.
    let mut p: Params32 = init_params(&cfg, seed).unwrap();
    let mut rng = RngStream::new(seed, 5);
    for v in p.layer4.kernel.data_mut() {
        *v = 0.05 * rng.normal() as f32;
    }
    Automaton::new(cfg, p).unwrap()
}

fn small(d: usize) -> ArchConfig {
    ArchConfig {
        cell_size: d,
        hidden_size: 8,
        ..ArchConfig::default()
    }
}

fn evo(steps: usize, every: usize) -> EvolutionConfig {
    EvolutionConfig {
        steps,
        record_every: every,
        seed: 4,
        chunk: 2,
        snapshot_steps: vec![0, steps],
        run_id: "t".into(),
    }
}

#[test]
fn zero_network_keeps_state_norm() {
    let cfg = ArchConfig {
        resettable: false,
        norm_kind: NormKind::None,
        ..small(4)
    };
    let model = Automaton::new(cfg.clone(), zero_params::<f32>(&cfg)).unwrap();
    let ev = run_evolution(&model, &samples(8, 3), &evo(12, 1)).unwrap();
    let l1: Vec<f64> = ev.records.iter().map(|r| r.state_l1).collect();
    assert!(l1.iter().all(|&v| v == l1[0]), "{l1:?}");
    assert!(ev.records[1..].iter().all(|r| r.delta_state_l1 == Some(0.0)));
}

#[test]
fn recorded_steps_follow_contract() {
    let model = random_model(small(4), 1);
    let ev = run_evolution(&model, &samples(8, 3), &evo(10, 3)).unwrap();
    let steps: Vec<usize> = ev.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 3, 6, 9]);
    assert!(ev.records[0].delta_state_l1.is_none() && ev.records[0].mean_gate.is_none());
    assert!(ev.records[1].mean_gate.unwrap() > 0.0);
    assert_eq!(ev.truncated_at, None);
    let snaps: Vec<usize> = ev.snapshots.iter().map(|s| s.step).collect();
    assert_eq!(snaps, vec![0, 10]);
}

#[test]
fn no_updates_means_constant_iou() {
    let cfg = ArchConfig {
        update_prob: 0.0,
        ..small(4)
    };
    let ev = run_evolution(&random_model(cfg, 2), &samples(8, 3), &evo(8, 1)).unwrap();
    let first = &ev.records[0].iou.iou;
    assert!(ev.records.iter().all(|r| &r.iou.iou == first));
}

#[test]
fn protocols_without_events_match_evolution() {
    let model = random_model(small(4), 3);
    let data = samples(8, 3);
    let base = run_evolution(&model, &data, &evo(9, 1)).unwrap();
    let change = run_image_change(&model, &data, 50, &evo(9, 1)).unwrap();
    let shift = run_shift(&model, &data, 4, 0, &evo(9, 1)).unwrap();
    assert_eq!(base.records, change.records);
    assert_eq!(base.records, shift.records);
    assert!(change.events.is_empty());
    assert_eq!(shift.events, vec![4, 8]);
    let again = run_evolution(&model, &data, &evo(9, 1)).unwrap();
    assert_eq!(base.records, again.records);
}

#[test]
fn results_do_not_depend_on_chunking() {
    let model = random_model(small(4), 3);
    let data = samples(8, 5);
    let a = run_evolution(&model, &data, &evo(5, 1)).unwrap();
    let b = run_evolution(&model, &data, &EvolutionConfig { chunk: 5, ..evo(5, 1) }).unwrap();
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.iou, y.iou);
        assert!((x.state_l1 - y.state_l1).abs() < 1e-9);
    }
}

#[test]
fn image_changes_swap_labels() {
    let model = random_model(small(4), 3);
    let data = samples(8, 4);
    let ev = run_image_change(&model, &data, 3, &evo(7, 1)).unwrap();
    assert_eq!(ev.events, vec![3, 6]);
    // Labels follow the swaps: the label pixel totals change at event steps only.
    let totals: Vec<[usize; 3]> = ev.records.iter().map(|r| r.iou.labeled).collect();
    assert_eq!(totals[0], totals[2]);
    assert_ne!(totals[2], totals[3]);
    assert_eq!(totals[3], totals[5]);
    assert!(run_image_change(&model, &data[..1], 3, &evo(7, 1)).is_err());
}

#[test]
fn delta_series_bound_raw_changes() {
    let model = random_model(small(4), 4);
    let ev = run_evolution(&model, &samples(8, 2), &evo(10, 1)).unwrap();
    for w in ev.records.windows(2) {
        let d = w[1].delta_state_l1.unwrap();
        assert!((w[1].state_l1 - w[0].state_l1).abs() <= d + 1e-9, "{w:?}");
        let d = w[1].delta_logits_l1.unwrap();
        assert!((w[1].logits_l1 - w[0].logits_l1).abs() <= d + 1e-9);
    }
}

#[test]
fn divergence_truncates_trace() {
    let cfg = ArchConfig {
        resettable: false,
        norm_kind: NormKind::None,
        residual: true,
        ..small(4)
    };
    // Large random weights with no normalization: the state grows geometrically.
    let mut rng = RngStream::new(8, 8);
    let p: Params32 = init_params::<f32>(&cfg, 8)
        .unwrap()
        .map(|_, t| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v = 3.0 * rng.normal() as f32);
            t
        });
    let model = Automaton::new(
        ArchConfig {
            update_prob: 1.0,
            ..cfg
        },
        p,
    )
    .unwrap();
    let ev = run_evolution(&model, &samples(8, 2), &evo(200, 1)).unwrap();
    let t = ev.truncated_at.expect("diverged");
    assert!(t > 1 && t < 200);
    assert_eq!(ev.records.last().unwrap().step, t - 1);
}

#[test]
fn shift_keeps_label_counts_up_to_stripe() {
    let model = random_model(small(4), 5);
    let data = samples(16, 2);
    let m = 3;
    let ev = run_shift(&model, &data, 2, m, &evo(6, 1)).unwrap();
    let base: usize = data.iter().map(|s| s.label.counts()[OBJECT as usize]).sum();
    for r in &ev.records {
        let obj = r.iou.labeled[OBJECT as usize];
        // Synthetic objects stay clear of the frame, so small shifts never cut them.
        assert!(obj <= base && base - obj <= 2 * m * 16 * 2, "{obj} vs {base}");
    }
}

#[test]
fn regime_detection_examples() {
    let cfg = RegimeConfig::default();
    let constant: Vec<(u64, f64)> = (0..5000).map(|i| (i, 0.4)).collect();
    assert_eq!(regime_trace(&constant, &cfg).unwrap(), None);

    let mut rng = RngStream::new(1, 1);
    let step: Vec<(u64, f64)> = (0..5000)
        .map(|i| (i, if i < 1000 { 0.5 } else { 0.2 } + 0.02 * rng.normal()))
        .collect();
    let c = regime_trace(&step, &cfg).unwrap().expect("change detected");
    assert!((c.step as i64 - 1000).abs() <= c.window as i64, "{c:?}");
    assert!(c.before > 0.4 && c.after < 0.3);

    let drift: Vec<(u64, f64)> = (0..5000).map(|i| (i, 0.6 - 0.3 * i as f64 / 5000.0)).collect();
    assert_eq!(regime_trace(&drift, &cfg).unwrap(), None);
    assert!(regime_trace(&step[..2], &cfg).is_err());
}

#[test]
fn adversarial_contracts() {
    let model = random_model(small(4), 6);
    let s = &samples(8, 1)[0];
    let region = Rect { x: 2, y: 2, w: 3, h: 3 };
    let cfg = AdversarialConfig {
        iters: 0,
        unroll_steps: 4,
        ..AdversarialConfig::default()
    };
    let r = adversarial_perturb(&model, &s.image, &region, OBJECT, &cfg).unwrap();
    assert_eq!(r.image, s.image);
    assert_eq!(r.before, r.after);

    let cfg = AdversarialConfig { iters: 5, ..cfg };
    let r = adversarial_perturb(&model, &s.image, &region, OBJECT, &cfg).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            for c in 0..3 {
                let o = (y * 8 + x) * 3 + c;
                if !region.contains(y, x) {
                    assert_eq!(r.image.data()[o].to_bits(), s.image.data()[o].to_bits());
                }
                assert!(r.image.data()[o].abs() <= 0.5);
            }
        }
    }
    assert!(r.objective.len() > 1);
    assert!(r.objective.windows(2).all(|w| w[1] > w[0]), "{:?}", r.objective);
    let outside = Rect { x: 6, y: 6, w: 3, h: 3 };
    assert!(adversarial_perturb(&model, &s.image, &outside, OBJECT, &cfg).is_err());
}

#[test]
fn adversarial_raises_target_fraction_on_trained_model() {
    let data = samples(16, 8);
    let cfg = TrainConfig {
        lr: 1e-2,
        batch: 4,
        steps: 400,
        seed: 2,
        arch: ArchConfig {
            cell_size: 8,
            hidden_size: 16,
            ..ArchConfig::default()
        },
        schedule: UnrollSchedule {
            target_steps: 8,
            mini_unroll: 4,
            ..UnrollSchedule::default()
        },
        ..TrainConfig::default()
    };
    let mut tr: Trainer<f32> = Trainer::new(cfg.clone(), data.clone()).unwrap();
    tr.run(None, |_| {}).unwrap();
    let model = Automaton::new(cfg.arch, tr.params).unwrap();
    // Gray out the object's bounding box, then ask for "object" there again.
    let s = &data[0];
    let obj: Vec<(usize, usize)> = (0..256)
        .filter(|&p| s.label.classes[p] == OBJECT)
        .map(|p| (p / 16, p % 16))
        .collect();
    let (y0, y1) = (obj.iter().map(|p| p.0).min().unwrap(), obj.iter().map(|p| p.0).max().unwrap());
    let (x0, x1) = (obj.iter().map(|p| p.1).min().unwrap(), obj.iter().map(|p| p.1).max().unwrap());
    let region = Rect { x: x0, y: y0, w: x1 - x0 + 1, h: y1 - y0 + 1 };
    let gray = cellseg_core::data::perturb::perturb(
        s,
        &cellseg_core::data::perturb::Perturbation::GrayRegion(region),
        &mut RngStream::new(0, 0),
    )
    .unwrap();
    let adv = AdversarialConfig {
        iters: 15,
        step_size: 0.1,
        unroll_steps: 8,
        ..AdversarialConfig::default()
    };
    let r = adversarial_perturb(&model, &gray.image, &region, OBJECT, &adv).unwrap();
    assert!(
        r.target_fraction_after > r.target_fraction_before,
        "{} -> {} ({:?})",
        r.target_fraction_before,
        r.target_fraction_after,
        r.objective
    );
}

#[test]
fn series_csv_layout() {
    let model = random_model(small(4), 7);
    let ev = run_evolution(&model, &samples(8, 2), &evo(4, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    write_series_csv(&path, &ev.series()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,iou_background,iou_object,iou_boundary,state_l1,logits_l1,delta_state_l1,delta_logits_l1,delta_pred_l1,mean_gate"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("0,") && rows[0].ends_with(",,,,"));
}
