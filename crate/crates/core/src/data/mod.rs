//! Segmentation samples: synthetic shapes, the Oxford-IIIT Pet loader, and the image
//! perturbations used by the adaptation experiments.

pub mod cache;
pub mod perturb;
pub mod pets;
pub mod synthetic;

use cellseg_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use perturb::{perturb, Perturbation, Rect};
pub use synthetic::{generate_synthetic, ShapeFamily, SyntheticSpec};

pub const BACKGROUND: u8 = 0;
pub const OBJECT: u8 = 1;
pub const BOUNDARY: u8 = 2;
pub const NUM_CLASSES: usize = 3;

/// Per-pixel class map with values in {background, object, boundary}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub h: usize,
    pub w: usize,
    pub classes: Vec<u8>,
}

impl LabelMask {
    pub fn new(h: usize, w: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != h * w {
            return Err(CoreError::data(format!(
                "label has {} pixels, expected {h}×{w}",
                classes.len()
            )));
        }
        if let Some(bad) = classes.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(CoreError::data(format!("label class {bad} out of range")));
        }
        Ok(LabelMask { h, w, classes })
    }

    pub fn filled(h: usize, w: usize, class: u8) -> Self {
        LabelMask {
            h,
            w,
            classes: vec![class; h * w],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.w + x]
    }

    /// `[1, h, w, 3]` one-hot encoding.
    pub fn one_hot<T: Scalar>(&self) -> Tensor<T> {
        let mut data = vec![T::zero(); self.classes.len() * NUM_CLASSES];
        for (i, &c) in self.classes.iter().enumerate() {
            data[i * NUM_CLASSES + c as usize] = T::one();
        }
        Tensor::from_vec([1, self.h, self.w, NUM_CLASSES], data).expect("sized above")
    }

    pub fn counts(&self) -> [usize; NUM_CLASSES] {
        let mut out = [0; NUM_CLASSES];
        for &c in &self.classes {
            out[c as usize] += 1;
        }
        out
    }
}

/// One image with its label. Images are `[1, h, w, 3]` with values in [−0.5, 0.5].
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: LabelMask,
    pub source: String,
}

impl Sample {
    pub fn new(image: Tensor<f32>, label: LabelMask, source: impl Into<String>) -> Result<Self> {
        let (b, h, w, c) = image.shape().nhwc()?;
        if b != 1 || c != 3 || h != label.h || w != label.w {
            return Err(CoreError::data(format!(
                "image {} does not match label {}×{}",
                image.shape(),
                label.h,
                label.w
            )));
        }
        Ok(Sample {
            image,
            label,
            source: source.into(),
        })
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.label.h, self.label.w)
    }
}

/// Stacks images and one-hot labels of several samples along the batch axis.
pub fn stack_samples<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.cast()).collect();
    let labels: Vec<Tensor<T>> = samples.iter().map(|s| s.label.one_hot()).collect();
    Ok((
        Tensor::stack_batch(&images.iter().collect::<Vec<_>>())?,
        Tensor::stack_batch(&labels.iter().collect::<Vec<_>>())?,
    ))
}

/// Which dataset a run uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        #[serde(default = "default_resolution")]
        resolution: usize,
        #[serde(default = "default_families")]
        families: Vec<ShapeFamily>,
        #[serde(default = "default_thickness")]
        boundary_thickness: usize,
        #[serde(default = "default_train_count")]
        train_count: usize,
        #[serde(default = "default_eval_count")]
        eval_count: usize,
        #[serde(default)]
        seed: u64,
    },
    Pets {
        root: std::path::PathBuf,
        #[serde(default = "default_resolution")]
        resolution: usize,
    },
}

fn default_resolution() -> usize {
    48
}
fn default_families() -> Vec<ShapeFamily> {
    ShapeFamily::ALL.to_vec()
}
fn default_thickness() -> usize {
    2
}
fn default_train_count() -> usize {
    1024
}
fn default_eval_count() -> usize {
    128
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            resolution: default_resolution(),
            families: default_families(),
            boundary_thickness: default_thickness(),
            train_count: default_train_count(),
            eval_count: default_eval_count(),
            seed: 0,
        }
    }
}

/// Key separating the eval split's seed from the train split's.
const EVAL_SPLIT_KEY: u64 = 0x00e7_a15e_ed00_0001;

impl DatasetConfig {
    pub fn synthetic(resolution: usize, train_count: usize, eval_count: usize, seed: u64) -> Self {
        DatasetConfig::Synthetic {
            resolution,
            families: default_families(),
            boundary_thickness: default_thickness(),
            train_count,
            eval_count,
            seed,
        }
    }

    pub fn resolution(&self) -> usize {
        match self {
            DatasetConfig::Synthetic { resolution, .. }
            | DatasetConfig::Pets { resolution, .. } => *resolution,
        }
    }

    pub fn with_resolution(&self, r: usize) -> Self {
        let mut out = self.clone();
        match &mut out {
            DatasetConfig::Synthetic { resolution, .. } | DatasetConfig::Pets { resolution, .. } => *resolution = r,
        }
        out
    }

    /// Loads `(train, eval)`.
    pub fn load(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        match self {
            DatasetConfig::Synthetic {
                resolution,
                families,
                boundary_thickness,
                train_count,
                eval_count,
                seed,
            } => {
                let spec = |count, seed| SyntheticSpec {
                    resolution: *resolution,
                    families: families.clone(),
                    boundary_thickness: *boundary_thickness,
                    count,
                    seed,
                    ..SyntheticSpec::default()
                };
                Ok((
                    generate_synthetic(&spec(*train_count, *seed))?,
                    generate_synthetic(&spec(*eval_count, seed ^ EVAL_SPLIT_KEY))?,
                ))
            }
            DatasetConfig::Pets { root, resolution } => {
                let loaded = pets::load_pets(root, *resolution)?;
                for (file, why) in &loaded.skipped {
                    log::warn!("skipped {file}: {why}");
                }
                Ok((loaded.train, loaded.eval))
            }
        }
    }
}
