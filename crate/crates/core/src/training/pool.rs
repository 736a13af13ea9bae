use cellseg_tensor::{RngStream, Tensor};

/// A persistent training slot. `None` image or state means "reset pending": the
/// replacement is drawn when the entry next enters a batch.
#[derive(Clone, Debug)]
pub struct PoolEntry<T> {
    pub id: usize,
    /// Index into the training set.
    pub sample: Option<usize>,
    /// `[1, h, w, d]` state.
    pub state: Option<Tensor<T>>,
    pub image_age: usize,
    pub state_age: usize,
}

impl<T> PoolEntry<T> {
    pub fn fresh(id: usize) -> Self {
        PoolEntry {
            id,
            sample: None,
            state: None,
            image_age: 0,
            state_age: 0,
        }
    }

    pub fn reset_image(&mut self) {
        self.sample = None;
        self.image_age = 0;
    }

    pub fn reset_state(&mut self) {
        self.state = None;
        self.state_age = 0;
    }
}

/// Independently per entry: with probability `rho_image` the image is replaced, with
/// probability `rho_state` the state is re-randomized. Each entry consumes exactly two
/// uniforms.
pub fn pool_resample<'a, T: 'a>(
    entries: impl IntoIterator<Item = &'a mut PoolEntry<T>>,
    rho_image: f64,
    rho_state: f64,
    rng: &mut RngStream,
) {
    for e in entries {
        let (ui, us) = (rng.uniform(), rng.uniform());
        if ui < rho_image {
            e.reset_image();
        }
        if us < rho_state {
            e.reset_state();
        }
    }
}
