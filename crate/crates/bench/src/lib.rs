//! Fixtures shared by the benchmarks.

use composer_core::autograd::Mat;
use composer_core::{generate_dataset, ClipFeatures, FeatureStats, Manifest, RawClip, SynthConfig, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub clips: Vec<RawClip>,
    pub manifest: Manifest,
    pub feats: Vec<ClipFeatures>,
    pub trainer: Trainer,
}

/// Desk preset on `n` synthetic clips with `persons` persons each.
pub fn desk(n: usize, persons: usize) -> Fixture {
    let (clips, manifest) = generate_dataset(&SynthConfig {
        n_clips: n,
        persons,
        width: 4000,
        ..Default::default()
    })
    .expect("synthetic data");
    let stats = FeatureStats::fit(&clips);
    let feats = clips.iter().map(|c| ClipFeatures::build(c, &manifest, &stats)).collect();
    let trainer = Trainer::new(TrainConfig::desk(), manifest.clone(), &clips).expect("desk trainer");
    Fixture {
        clips,
        manifest,
        feats,
        trainer,
    }
}

/// `n x d` matrix with unit rows.
pub fn unit_rows(n: usize, d: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Mat::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    for mut r in m.rows_mut() {
        let norm = r.dot(&r).sqrt();
        r /= norm;
    }
    m
}
