//! Training-time keypoint augmentations: mirror, rigid shifts, per-keypoint
//! jitter and actor dropout.
//!
//! All pixel outputs stay on the [`COORD_QUANTUM`] grid, so with zero jitter
//! a mirror applied twice and a shift followed by its negation reproduce the
//! input bit for bit. Missing frames are left untouched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{quantize, ClipFeatures, Manifest, RawClip, COORD_QUANTUM};

/// Per-augmentation application probabilities and magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub hmove_p: f64,
    pub vmove_p: f64,
    pub dropout_p: f64,
    pub move_bound: i64,
    pub perturb_px: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_p: 0.5,
            hmove_p: 0.5,
            vmove_p: 0.5,
            dropout_p: 0.5,
            move_bound: 10,
            perturb_px: 1.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            flip_p: 0.0,
            hmove_p: 0.0,
            vmove_p: 0.0,
            dropout_p: 0.0,
            move_bound: 10,
            perturb_px: 1.0,
        }
    }
}

fn jitter<R: Rng>(rng: &mut R, perturb: f64) -> f64 {
    if perturb > 0.0 {
        quantize(rng.random_range(-perturb..=perturb))
    } else {
        0.0
    }
}

/// Applies `f` to every present keypoint (persons and objects) together
/// with an independent per-axis jitter.
fn map_points<R: Rng>(clip: &mut RawClip, rng: &mut R, perturb: f64, f: impl Fn([f64; 2]) -> [f64; 2]) {
    for person in &mut clip.persons {
        for (frame, &present) in person.keypoints.iter_mut().zip(&person.present) {
            if !present {
                continue;
            }
            for k in frame.iter_mut() {
                let m = f(*k);
                *k = [m[0] + jitter(rng, perturb), m[1] + jitter(rng, perturb)];
            }
        }
    }
    for obj in &mut clip.objects {
        for (k, &present) in obj.keypoints.iter_mut().zip(&obj.present) {
            if present {
                let m = f(*k);
                *k = [m[0] + jitter(rng, perturb), m[1] + jitter(rng, perturb)];
            }
        }
    }
}

/// Mirrors every x about the frame, swaps left/right keypoint types and
/// remaps the group label through the manifest's flip table.
pub fn horizontal_flip<R: Rng>(clip: &RawClip, manifest: &Manifest, rng: &mut R, perturb: f64) -> RawClip {
    let w = clip.frame_width as f64;
    let swap = manifest.keypoint_flip();
    let mut out = clip.clone();
    for person in &mut out.persons {
        for frame in person.keypoints.iter_mut() {
            let old = frame.clone();
            for (j, k) in frame.iter_mut().enumerate() {
                *k = old[swap[j]];
            }
        }
        for conf in person.confidences.iter_mut() {
            let old = conf.clone();
            for (j, c) in conf.iter_mut().enumerate() {
                *c = old[swap[j]];
            }
        }
    }
    map_points(&mut out, rng, perturb, |k| [w - k[0], k[1]]);
    out.group_label = manifest.group_flip[clip.group_label];
    out
}

/// Shifts every x by one integer offset drawn from `[-bound, bound]`.
pub fn horizontal_move<R: Rng>(clip: &RawClip, rng: &mut R, bound: i64, perturb: f64) -> RawClip {
    let dx = rng.random_range(-bound..=bound) as f64;
    shift(clip, rng, [dx, 0.0], perturb)
}

/// Shifts every y by one integer offset drawn from `[-bound, bound]`.
pub fn vertical_move<R: Rng>(clip: &RawClip, rng: &mut R, bound: i64, perturb: f64) -> RawClip {
    let dy = rng.random_range(-bound..=bound) as f64;
    shift(clip, rng, [0.0, dy], perturb)
}

/// Rigid translation by a fixed offset plus jitter. Not clamped to the frame.
pub fn shift<R: Rng>(clip: &RawClip, rng: &mut R, offset: [f64; 2], perturb: f64) -> RawClip {
    debug_assert_eq!(quantize(offset[0]), offset[0]);
    let mut out = clip.clone();
    map_points(&mut out, rng, perturb, |k| [k[0] + offset[0], k[1] + offset[1]]);
    out
}

/// Zeroes the representation of one person in one frame, chosen uniformly
/// among present, not-yet-dropped person-frames.
pub fn actor_dropout<R: Rng>(features: &ClipFeatures, rng: &mut R) -> ClipFeatures {
    let candidates: Vec<usize> = (0..features.dropped.len())
        .filter(|&i| features.frame_present[i] && !features.dropped[i])
        .collect();
    let mut out = features.clone();
    if candidates.is_empty() {
        return out;
    }
    let pick = candidates[rng.random_range(0..candidates.len())];
    out.dropped[pick] = true;
    out
}

/// Applies each pixel-space augmentation with its own probability.
pub fn augment_clip<R: Rng>(clip: &RawClip, manifest: &Manifest, cfg: &AugmentConfig, rng: &mut R) -> RawClip {
    let mut out = clip.clone();
    if rng.random_bool(cfg.flip_p) {
        out = horizontal_flip(&out, manifest, rng, cfg.perturb_px);
    }
    if rng.random_bool(cfg.hmove_p) {
        out = horizontal_move(&out, rng, cfg.move_bound, cfg.perturb_px);
    }
    if rng.random_bool(cfg.vmove_p) {
        out = vertical_move(&out, rng, cfg.move_bound, cfg.perturb_px);
    }
    out
}

/// Feature-space augmentation applied after [`augment_clip`].
pub fn augment_features<R: Rng>(features: ClipFeatures, cfg: &AugmentConfig, rng: &mut R) -> ClipFeatures {
    if rng.random_bool(cfg.dropout_p) {
        actor_dropout(&features, rng)
    } else {
        features
    }
}

const _: () = assert!(COORD_QUANTUM > 0.0);
