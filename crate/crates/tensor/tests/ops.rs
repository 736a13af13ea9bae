use cellseg_tensor::{Graph, NormKind, Tensor, TensorError};

fn ramp(shape: [usize; 4], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|i| ((i as f64) * 0.37).sin() * scale).collect(),
    )
    .unwrap()
}

fn identity_kernel(c: usize) -> Tensor<f64> {
    let mut k = Tensor::zeros([3, 3, c, c]);
    for ch in 0..c {
        let off = ((4 * c) + ch) * c + ch; // (ky=1, kx=1, ci=ch, co=ch)
        k.data_mut()[off] = 1.0;
    }
    k
}

#[test]
fn conv_identity_kernel_is_identity() {
    let mut g = Graph::new();
    let x = g.constant(ramp([2, 5, 4, 3], 1.0));
    let k = g.constant(identity_kernel(3));
    let b = g.constant(Tensor::zeros([3]));
    let y = g.conv2d(x, k, b, 1).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn conv_all_ones_on_constant_field() {
    let mut g = Graph::new();
    let c = 0.75;
    let x = g.constant(Tensor::full([1, 5, 5, 1], c));
    let k = g.constant(Tensor::full([3, 3, 1, 1], 1.0));
    let b = g.constant(Tensor::zeros([1]));
    let y = g.conv2d(x, k, b, 1).unwrap();
    assert_eq!(g.value(y).at4(0, 2, 2, 0), 9.0 * c);
    // Zero padding: a corner sees 4 of its 9 taps.
    assert_eq!(g.value(y).at4(0, 0, 0, 0), 4.0 * c);
}

#[test]
fn conv_shape_contracts() {
    let mut g = Graph::new();
    let x = g.constant(ramp([1, 7, 6, 2], 1.0));
    let k3 = g.constant(Tensor::zeros([3, 3, 2, 4]));
    let b = g.constant(Tensor::zeros([4]));
    let s1 = g.conv2d(x, k3, b, 1).unwrap();
    assert_eq!(g.shape(s1).dims(), [1, 7, 6, 4]);
    let s2 = g.conv2d(x, k3, b, 2).unwrap();
    assert_eq!(g.shape(s2).dims(), [1, 4, 3, 4]);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(ramp([1, 4, 4, 3], 1.0));
    let k = g.constant(Tensor::zeros([3, 3, 2, 4]));
    let b = g.constant(Tensor::zeros([4]));
    assert!(matches!(
        g.conv2d(x, k, b, 1),
        Err(TensorError::ShapeMismatch { .. })
    ));
    let k5 = g.constant(Tensor::zeros([5, 5, 3, 4]));
    assert!(g.conv2d(x, k5, b, 1).is_err());
    let k1 = g.constant(Tensor::zeros([1, 1, 3, 4]));
    assert!(g.conv2d(x, k1, b, 3).is_err());
}

#[test]
fn conv_reports_non_finite_output() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full([1, 2, 2, 1], f64::MAX));
    let k = g.constant(Tensor::full([1, 1, 1, 1], 10.0));
    let b = g.constant(Tensor::zeros([1]));
    assert!(matches!(
        g.conv2d(x, k, b, 1),
        Err(TensorError::NonFinite { op: "conv2d" })
    ));
}

#[test]
fn depthwise_identity_and_single_channel_equivalence() {
    let mut g = Graph::new();
    let x = g.constant(ramp([1, 5, 5, 3], 1.0));
    let mut kid = Tensor::zeros([3, 3, 3]);
    for c in 0..3 {
        kid.data_mut()[4 * 3 + c] = 1.0;
    }
    let k = g.constant(kid);
    let b = g.constant(Tensor::zeros([3]));
    let y = g.depthwise_conv3x3(x, k, b).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let x1 = g.constant(ramp([2, 4, 5, 1], 2.0));
    let kd = ramp([3, 3, 1, 1], 1.0);
    let k_dw = g.constant(kd.clone().reshape([3, 3, 1]).unwrap());
    let k_full = g.constant(kd);
    let b1 = g.constant(Tensor::full([1], 0.3));
    let a = g.depthwise_conv3x3(x1, k_dw, b1).unwrap();
    let c = g.conv2d(x1, k_full, b1, 1).unwrap();
    for (p, q) in g.value(a).data().iter().zip(g.value(c).data()) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn depthwise_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(ramp([1, 4, 4, 3], 1.0));
    let k = g.constant(Tensor::zeros([3, 3, 2]));
    let b = g.constant(Tensor::zeros([3]));
    assert!(g.depthwise_conv3x3(x, k, b).is_err());
}

#[test]
fn transpose_conv_doubles_and_zero_kernel_gives_bias() {
    let mut g = Graph::new();
    let x = g.constant(ramp([1, 1, 1, 4], 1.0));
    let k = g.constant(Tensor::zeros([3, 3, 2, 4]));
    let b = g.constant(Tensor::from_vec([2], vec![0.5, -1.5]).unwrap());
    let y = g.transpose_conv2d_s2(x, k, b).unwrap();
    assert_eq!(g.shape(y).dims(), [1, 2, 2, 2]);
    for px in g.value(y).data().chunks(2) {
        assert_eq!(px, [0.5, -1.5]);
    }
    let x2 = g.constant(ramp([2, 3, 5, 4], 1.0));
    let y2 = g.transpose_conv2d_s2(x2, k, b).unwrap();
    assert_eq!(g.shape(y2).dims(), [2, 6, 10, 2]);
}

#[test]
fn pointwise_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec([3], vec![-2.0, 0.0, 3.0]).unwrap());
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), [0.0, 0.0, 3.0]);
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).item(), 0.5);
    let y = g.constant(Tensor::from_vec([3], vec![1.0, 2.0, 3.0]).unwrap());
    let m = g.mul(x, y).unwrap();
    assert_eq!(g.value(m).data(), [-2.0, 0.0, 9.0]);
    let sc = g.scale(y, 2.0).unwrap();
    assert_eq!(g.value(sc).data(), [2.0, 4.0, 6.0]);
    let bad = g.constant(Tensor::zeros([2]));
    assert!(g.add(x, bad).is_err());
}

#[test]
fn instance_norm_examples() {
    let mut g = Graph::new().with_norm_eps(1e-12);
    let one = g.constant(Tensor::full([1], 1.0));
    let zero = g.constant(Tensor::zeros([1]));
    let x = g.constant(Tensor::from_vec([1, 1, 2, 1], vec![1.0, 3.0]).unwrap());
    let y = g.normalize(x, NormKind::Instance, one, zero).unwrap();
    let v: &[f64] = g.value(y).data();
    assert!(
        (v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9,
        "{v:?}"
    );

    let mut g = Graph::new();
    let one = g.constant(Tensor::full([1], 1.0));
    let zero = g.constant(Tensor::zeros([1]));
    let c = g.constant(Tensor::full([1, 3, 3, 1], 4.2));
    let y = g.normalize(c, NormKind::Instance, one, zero).unwrap();
    assert!(g.value(y).data().iter().all(|v: &f64| v.abs() <= 1e-5));
}

#[test]
fn norm_axes_are_standardized() {
    let x = ramp([2, 3, 4, 5], 3.0);
    for kind in [NormKind::Instance, NormKind::BatchLive, NormKind::Channel] {
        let mut g = Graph::new().with_norm_eps(1e-12);
        let xv = g.constant(x.clone());
        let one = g.constant(Tensor::full([5], 1.0));
        let zero = g.constant(Tensor::zeros([5]));
        let y = g.normalize(xv, kind, one, zero).unwrap();
        let t = g.value(y);
        let mut groups: std::collections::HashMap<usize, Vec<f64>> = Default::default();
        for b in 0..2 {
            for p in 0..12 {
                for c in 0..5 {
                    let key = match kind {
                        NormKind::Instance => b * 5 + c,
                        NormKind::BatchLive => c,
                        NormKind::Channel => b * 12 + p,
                        NormKind::None => unreachable!(),
                    };
                    groups
                        .entry(key)
                        .or_default()
                        .push(t.data()[(b * 12 + p) * 5 + c]);
                }
            }
        }
        for vals in groups.values() {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "{kind:?} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "{kind:?} var {var}");
        }
    }
}

#[test]
fn norm_none_is_passthrough_and_empty_axis_errors() {
    let mut g = Graph::new();
    let x = g.constant(ramp([1, 2, 2, 2], 1.0));
    let p = g.constant(Tensor::zeros([2]));
    assert_eq!(g.normalize(x, NormKind::None, p, p).unwrap(), x);
    let e = g.constant(Tensor::zeros([1, 0, 2, 2]));
    assert!(matches!(
        g.normalize(e, NormKind::Instance, p, p),
        Err(TensorError::EmptyAxis { .. })
    ));
}

#[test]
fn xent_examples() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros([1, 2, 2, 3]));
    let mut y = Tensor::zeros([1, 2, 2, 3]);
    for p in 0..4 {
        y.data_mut()[p * 3 + p % 3] = 1.0;
    }
    let (l, n) = g.softmax_xent(logits, &y, &[true]).unwrap();
    assert_eq!(n, 4);
    assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);

    let mut sat = Tensor::zeros([1, 2, 2, 3]);
    for p in 0..4 {
        sat.data_mut()[p * 3 + p % 3] = 50.0;
    }
    let s = g.constant(sat);
    let (l, _) = g.softmax_xent(s, &y, &[true]).unwrap();
    assert!(g.value(l).item() < 1e-9);

    let (l, n) = g.softmax_xent(logits, &y, &[false]).unwrap();
    assert_eq!((n, g.value(l).item()), (0, 0.0));
}

#[test]
fn xent_empty_mask_has_zero_gradient() {
    let mut g = Graph::new();
    let logits = g.param(ramp([2, 2, 2, 3], 1.0));
    let y = Tensor::full([2, 2, 2, 3], 1.0 / 3.0);
    let (l, n) = g.softmax_xent(logits, &y, &[false, false]).unwrap();
    assert_eq!(n, 0);
    g.backward(l).unwrap();
    assert!(g.grad(logits).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_rows_sum_to_one() {
    let x = ramp([3, 4, 5, 7], 20.0);
    let p = cellseg_tensor::kernels::softmax::softmax_rows(x.data(), 7);
    for row in p.chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn backward_sum_and_square() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec([2], vec![1.0, 2.0]).unwrap());
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), [1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec([2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), [2.0, 4.0]);
    // A second call accumulates.
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), [4.0, 8.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::<f64>::zeros([2]));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::from_vec([2], vec![1.0, 2.0]).unwrap());
    let p = g.param(Tensor::from_vec([2], vec![3.0, 4.0]).unwrap());
    let m = g.mul(c, p).unwrap();
    let s = g.sum(m).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(p).unwrap().data(), [1.0, 2.0]);
}

#[test]
fn lerp_broadcasts_weight() {
    let mut g = Graph::new();
    let w = g.constant(Tensor::from_vec([1, 1, 2, 1], vec![0.0, 1.0]).unwrap());
    let a = g.constant(Tensor::full([1, 1, 2, 2], 5.0));
    let b = g.constant(Tensor::full([1, 1, 2, 2], -1.0));
    let y = g.lerp(w, a, b).unwrap();
    assert_eq!(g.value(y).data(), [-1.0, -1.0, 5.0, 5.0]);
}

#[test]
fn concat_interleaves_channels() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_vec([1, 1, 2, 1], vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::from_vec([1, 1, 2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let y = g.concat_channels(a, b).unwrap();
    assert_eq!(g.value(y).data(), [1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
}
