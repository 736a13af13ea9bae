//! Convolutions over NHWC tensors via im2col + GEMM.
//!
//! Kernels are stored `[kh, kw, cin, cout]`, which flattens to the `[kh*kw*cin, cout]`
//! matrix multiplying im2col rows ordered `(ky, kx, ci)`.

use super::gemm::gemm;
use crate::Scalar;

/// Geometry of a zero-padded cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// "Same" padding: `pad = (k - 1) / 2`, output extent `ceil(in / stride)`.
    pub fn same(
        batch: usize,
        h: usize,
        w: usize,
        cin: usize,
        k: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let pad = (k - 1) / 2;
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            batch,
            h,
            w,
            cin,
            kh: k,
            kw: k,
            cout,
            stride,
            pad,
            oh,
            ow,
        }
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    pub fn in_len(&self) -> usize {
        self.h * self.w * self.cin
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow * self.cout
    }
}

/// Rows `(oy, ox)`, columns `(ky, kx, ci)` for one batch entry.
fn im2col<T: Scalar>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let patch = g.patch();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * patch..][..patch];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    let dst = &mut row[(ky * g.kw + kx) * g.cin..][..g.cin];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        dst.copy_from_slice(&input[src..src + g.cin]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch rows back, accumulating into `out`.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], out: &mut [T]) {
    let patch = g.patch();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * patch..][..patch];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.kw + kx) * g.cin..][..g.cin];
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    for (o, &v) in out[dst..dst + g.cin].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn accumulate_bias_grad<T: Scalar>(grad_out: &[T], grad_bias: &mut [T]) {
    for row in grad_out.chunks_exact(grad_bias.len()) {
        for (gb, &g) in grad_bias.iter_mut().zip(row) {
            *gb += g;
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let rows = g.oh * g.ow;
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * g.patch()]
    };
    if g.is_pointwise() {
        let all = g.batch * rows;
        gemm(
            all,
            g.cin,
            g.cout,
            input,
            false,
            kernel,
            false,
            T::zero(),
            &mut out,
        );
    } else {
        for b in 0..g.batch {
            let x = &input[b * g.in_len()..][..g.in_len()];
            let y = &mut out[b * g.out_len()..][..g.out_len()];
            im2col(g, x, &mut cols);
            gemm(
                rows,
                g.patch(),
                g.cout,
                &cols,
                false,
                kernel,
                false,
                T::zero(),
                y,
            );
        }
    }
    add_bias(&mut out, bias);
    out
}

/// Accumulates gradients of a conv2d into whichever outputs are requested.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_kernel: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    if let Some(gb) = grad_bias {
        accumulate_bias_grad(grad_out, gb);
    }
    let rows = g.oh * g.ow;
    let patch = g.patch();
    if g.is_pointwise() {
        let all = g.batch * rows;
        if let Some(gk) = grad_kernel {
            gemm(
                g.cin,
                all,
                g.cout,
                input,
                true,
                grad_out,
                false,
                T::one(),
                gk,
            );
        }
        if let Some(gi) = grad_input {
            gemm(
                all,
                g.cout,
                g.cin,
                grad_out,
                false,
                kernel,
                true,
                T::one(),
                gi,
            );
        }
        return;
    }
    let mut cols = vec![T::zero(); rows * patch];
    let mut gcols = vec![T::zero(); rows * patch];
    for b in 0..g.batch {
        let x = &input[b * g.in_len()..][..g.in_len()];
        let dy = &grad_out[b * g.out_len()..][..g.out_len()];
        if let Some(gk) = grad_kernel.as_deref_mut() {
            im2col(g, x, &mut cols);
            gemm(patch, rows, g.cout, &cols, true, dy, false, T::one(), gk);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            let dx = &mut gi[b * g.in_len()..][..g.in_len()];
            gemm(
                rows,
                g.cout,
                patch,
                dy,
                false,
                kernel,
                true,
                T::zero(),
                &mut gcols,
            );
            col2im(g, &gcols, dx);
        }
    }
}

/// Transposed convolution defined as the input-adjoint of the strided conv `g`.
///
/// `input` has the conv's output geometry `[batch, oh, ow, cout]`; the result has the
/// conv's input geometry `[batch, h, w, cin]`. `kernel` is the conv kernel
/// `[kh, kw, cin, cout]` and `bias` has `cin` entries.
pub fn conv_transpose_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    let rows = g.oh * g.ow;
    let patch = g.patch();
    let mut out = vec![T::zero(); g.batch * g.in_len()];
    let mut cols = vec![T::zero(); rows * patch];
    for b in 0..g.batch {
        let y = &input[b * g.out_len()..][..g.out_len()];
        gemm(
            rows,
            g.cout,
            patch,
            y,
            false,
            kernel,
            true,
            T::zero(),
            &mut cols,
        );
        col2im(g, &cols, &mut out[b * g.in_len()..][..g.in_len()]);
    }
    add_bias(&mut out, bias);
    out
}

pub fn conv_transpose_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_kernel: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    if let Some(gb) = grad_bias {
        accumulate_bias_grad(grad_out, gb);
    }
    let rows = g.oh * g.ow;
    let patch = g.patch();
    let mut cols = vec![T::zero(); rows * patch];
    for b in 0..g.batch {
        let y = &input[b * g.out_len()..][..g.out_len()];
        let dz = &grad_out[b * g.in_len()..][..g.in_len()];
        im2col(g, dz, &mut cols);
        if let Some(gi) = grad_input.as_deref_mut() {
            let dy = &mut gi[b * g.out_len()..][..g.out_len()];
            gemm(
                rows,
                patch,
                g.cout,
                &cols,
                false,
                kernel,
                false,
                T::one(),
                dy,
            );
        }
        if let Some(gk) = grad_kernel.as_deref_mut() {
            gemm(patch, rows, g.cout, &cols, true, y, false, T::one(), gk);
        }
    }
}

/// Per-channel 3x3 cross-correlation, stride 1, zero padding 1. Kernel `[3, 3, c]`.
pub fn depthwise_forward<T: Scalar>(
    dims: (usize, usize, usize, usize),
    input: &[T],
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    let (b, h, w, c) = dims;
    let mut out = vec![T::zero(); input.len()];
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let o = ((n * h + y) * w + x) * c;
                out[o..o + c].copy_from_slice(bias);
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = ((n * h + iy as usize) * w + ix as usize) * c;
                        let k = (ky * 3 + kx) * c;
                        for ch in 0..c {
                            out[o + ch] += input[i + ch] * kernel[k + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Scalar>(
    dims: (usize, usize, usize, usize),
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_kernel: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let (b, h, w, c) = dims;
    if let Some(gb) = grad_bias {
        accumulate_bias_grad(grad_out, gb);
    }
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let o = ((n * h + y) * w + x) * c;
                let dy = &grad_out[o..o + c];
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = ((n * h + iy as usize) * w + ix as usize) * c;
                        let k = (ky * 3 + kx) * c;
                        if let Some(gi) = grad_input.as_deref_mut() {
                            for ch in 0..c {
                                gi[i + ch] += dy[ch] * kernel[k + ch];
                            }
                        }
                        if let Some(gk) = grad_kernel.as_deref_mut() {
                            for ch in 0..c {
                                gk[k + ch] += dy[ch] * input[i + ch];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation, independent of im2col.
    fn direct(g: &ConvGeom, x: &[f64], k: &[f64], bias: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_len()];
        for b in 0..g.batch {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    for co in 0..g.cout {
                        let mut acc = bias[co];
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                for ci in 0..g.cin {
                                    let xi =
                                        ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin + ci;
                                    let ki = ((ky * g.kw + kx) * g.cin + ci) * g.cout + co;
                                    acc += x[xi] * k[ki];
                                }
                            }
                        }
                        out[((b * g.oh + oy) * g.ow + ox) * g.cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    fn vals(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + seed) * 0.7311).sin()).collect()
    }

    #[test]
    fn matches_direct_for_all_geometries() {
        for &(h, w, k, stride) in &[
            (5, 4, 3, 1),
            (5, 5, 3, 2),
            (6, 4, 3, 2),
            (4, 3, 1, 1),
            (5, 3, 1, 2),
        ] {
            let g = ConvGeom::same(2, h, w, 3, k, 2, stride);
            let x = vals(2 * h * w * 3, 1.0);
            let kern = vals(k * k * 3 * 2, 2.0);
            let bias = vec![0.25, -0.5];
            let got = conv2d_forward(&g, &x, &kern, &bias);
            let want = direct(&g, &x, &kern, &bias);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{h}x{w} k{k} s{stride}");
            }
        }
    }

    #[test]
    fn stride_two_output_is_ceil_half() {
        for n in 1..10 {
            let g = ConvGeom::same(1, n, n, 1, 3, 1, 2);
            assert_eq!(g.oh, n.div_ceil(2));
            let g1 = ConvGeom::same(1, n, n, 1, 1, 1, 2);
            assert_eq!(g1.oh, n.div_ceil(2));
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let g = ConvGeom::same(2, 6, 4, 3, 3, 2, 2);
        let x = vals(g.batch * g.in_len(), 0.3);
        let y = vals(g.batch * g.out_len(), 5.0);
        let k = vals(9 * 3 * 2, 9.0);
        let cx = conv2d_forward(&g, &x, &k, &[0.0, 0.0]);
        let ty = conv_transpose_forward(&g, &y, &k, &[0.0, 0.0, 0.0]);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
