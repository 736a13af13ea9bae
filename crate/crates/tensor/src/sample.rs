use crate::error::{Result, TensorError};
use crate::{RngStream, Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    /// Standard normal.
    Gaussian,
    /// Ones with probability `p`, zeros otherwise.
    Bernoulli(f64),
}

/// I.i.d. draws of the given shape. Samples are constants: nothing flows back through them.
pub fn sample<T: Scalar>(
    kind: Distribution,
    shape: impl Into<Shape>,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    let shape = shape.into();
    let n = shape.numel();
    let data = match kind {
        Distribution::Gaussian => (0..n).map(|_| T::of(rng.normal())).collect(),
        Distribution::Bernoulli(p) => {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(TensorError::invalid(
                    "sample",
                    format!("bernoulli probability {p} outside [0, 1]"),
                ));
            }
            (0..n)
                .map(|_| {
                    if rng.bernoulli(p) {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
                .collect()
        }
    };
    Tensor::from_vec(shape, data)
}

pub fn gaussian<T: Scalar>(shape: impl Into<Shape>, rng: &mut RngStream) -> Tensor<T> {
    sample(Distribution::Gaussian, shape, rng).expect("gaussian sampling is infallible")
}

pub fn bernoulli<T: Scalar>(
    shape: impl Into<Shape>,
    p: f64,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    sample(Distribution::Bernoulli(p), shape, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernoulli_extremes() {
        let mut rng = RngStream::new(0, 0);
        let z: Tensor<f32> = bernoulli([100], 0.0, &mut rng).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let o: Tensor<f32> = bernoulli([100], 1.0, &mut rng).unwrap();
        assert!(o.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bernoulli_rejects_bad_probability() {
        let mut rng = RngStream::new(0, 0);
        assert!(bernoulli::<f32>([4], 1.5, &mut rng).is_err());
        assert!(bernoulli::<f32>([4], -0.1, &mut rng).is_err());
        assert!(bernoulli::<f32>([4], f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn gaussian_moments() {
        // CLT: the sample mean of 1e6 draws has sd 1e-3, so 0.01 is a 10-sigma bound.
        let mut rng = RngStream::new(42, 1);
        let t: Tensor<f64> = gaussian([1_000_000], &mut rng);
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn bernoulli_half_fraction() {
        // sd of the fraction is 5e-4 at 1e6 draws; 0.003 is a 6-sigma bound.
        let mut rng = RngStream::new(42, 2);
        let t: Tensor<f64> = bernoulli([1_000_000], 0.5, &mut rng).unwrap();
        let frac = t.sum() / t.len() as f64;
        assert!((frac - 0.5).abs() < 0.003, "fraction {frac}");
    }
}
