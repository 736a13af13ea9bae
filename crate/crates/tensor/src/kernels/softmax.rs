use crate::Scalar;

/// Row-wise softmax over the last axis (length `c`).
pub fn softmax_rows<T: Scalar>(logits: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    out
}

/// Result of the masked mean cross-entropy.
#[derive(Clone, Debug)]
pub struct XentForward<T> {
    pub loss: T,
    pub probs: Vec<T>,
    /// Contributing pixels; zero means the loss is defined as 0 with zero gradient.
    pub count: usize,
}

/// Mean over pixels of contributing batch entries of `-sum_j y_j log softmax(l)_j`.
///
/// `rows_per_entry` pixels belong to each batch entry, `mask[b]` selects entries.
pub fn xent_forward<T: Scalar>(
    logits: &[T],
    labels: &[T],
    c: usize,
    rows_per_entry: usize,
    mask: &[bool],
) -> XentForward<T> {
    let probs = softmax_rows(logits, c);
    let mut total = T::zero();
    let mut count = 0;
    for (b, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        for r in 0..rows_per_entry {
            let base = (b * rows_per_entry + r) * c;
            let row = &logits[base..base + c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for j in 0..c {
                let y = labels[base + j];
                if y != T::zero() {
                    total -= y * (row[j] - lse);
                }
            }
            count += 1;
        }
    }
    let loss = if count == 0 {
        T::zero()
    } else {
        total / T::of(count as f64)
    };
    XentForward { loss, probs, count }
}

/// Accumulates `upstream * (softmax - y) / count` on contributing rows.
#[allow(clippy::too_many_arguments)]
pub fn xent_backward<T: Scalar>(
    probs: &[T],
    labels: &[T],
    c: usize,
    rows_per_entry: usize,
    mask: &[bool],
    count: usize,
    upstream: T,
    grad: &mut [T],
) {
    if count == 0 {
        return;
    }
    let scale = upstream / T::of(count as f64);
    for (b, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        let start = b * rows_per_entry * c;
        let end = start + rows_per_entry * c;
        for i in start..end {
            grad[i] += scale * (probs[i] - labels[i]);
        }
    }
}
