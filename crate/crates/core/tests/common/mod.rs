//! Helpers shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;
use terramae::key;
use terramae::model::{SampleView, SourceInput};
use terramae::rng::keyed_rng;
use terramae::{Timestamp, NUM_PATCHES, PATCH_SIZE};

/// Owned data behind a [`SampleView`].
pub struct OwnedSample {
    pub timestamps: Vec<Timestamp>,
    pub sources: Vec<(usize, Array3<f32>)>,
}

impl OwnedSample {
    /// Standard-normal patches for `t` timesteps; `sources` lists
    /// `(model source id, bands)`.
    pub fn random(t: usize, sources: &[(usize, usize)], seed: u64) -> Self {
        let mut rng = keyed_rng(key![seed, "test-sample"]);
        let timestamps = (0..t)
            .map(|i| Timestamp::with_hour(2018 + (i % 4) as u16, 1 + (i % 12) as u8, 1 + (3 * i % 28) as u8, (5 * i % 24) as u8))
            .collect();
        let sources = sources
            .iter()
            .map(|&(id, bands)| {
                let dim = bands * PATCH_SIZE * PATCH_SIZE;
                let data = Array3::from_shape_simple_fn((t, NUM_PATCHES, dim), || rng.sample::<f32, _>(StandardNormal));
                (id, data)
            })
            .collect();
        Self { timestamps, sources }
    }

    pub fn view(&self) -> SampleView<'_> {
        SampleView {
            timestamps: &self.timestamps,
            sources: self.sources.iter().map(|(id, p)| SourceInput { source: *id, patches: p.view() }).collect(),
        }
    }
}
