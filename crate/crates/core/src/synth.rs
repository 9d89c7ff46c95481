//! Synthetic labelled clips with structure at several scales.
//!
//! Four classes: `left-converge`, `right-converge`, `left-raise`,
//! `right-raise`. People stand in a loose line that drifts toward the named
//! half of the frame. The actor at the front of the line carries a ball held
//! just above the head and performs the named gesture (wrists rise overhead,
//! or wrists close in front of the body). The person right behind performs
//! the other gesture. Everyone else idles. The line sits anywhere in the
//! frame, so which gesture counts depends on who leads relative to the
//! others, not on absolute positions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::skeleton::COCO_KEYPOINTS;
use crate::dataset::{quantize, Manifest, ObjectTrack, PersonTrack, RawClip};
use crate::error::DatasetError;

pub const CLASSES: [&str; 4] = ["left-converge", "right-converge", "left-raise", "right-raise"];
pub const ACTIONS: [&str; 2] = ["background", "key"];
pub const KEY_ACTION: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_clips: usize,
    pub frames: usize,
    pub persons: usize,
    pub noise_px: f64,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    /// Probability that a clip contains a distractor.
    pub distractor_p: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_clips: 400,
            frames: 10,
            persons: 5,
            noise_px: 2.0,
            seed: 7,
            width: 1920,
            height: 1080,
            distractor_p: 1.0,
        }
    }
}

/// Standing pose, pixels relative to the hip midpoint; the person's left
/// side appears at larger x.
const REST_POSE: [[f64; 2]; 17] = [
    [0.0, -150.0],
    [6.0, -156.0],
    [-6.0, -156.0],
    [12.0, -152.0],
    [-12.0, -152.0],
    [22.0, -120.0],
    [-22.0, -120.0],
    [28.0, -90.0],
    [-28.0, -90.0],
    [30.0, -62.0],
    [-30.0, -62.0],
    [12.0, 0.0],
    [-12.0, 0.0],
    [14.0, 45.0],
    [-14.0, 45.0],
    [15.0, 90.0],
    [-15.0, 90.0],
];

const BALL_ABOVE_NOSE: f64 = 40.0;
const MIN_GAP: f64 = 90.0;
const MAX_GAP: f64 = 140.0;
const MARGIN: f64 = 100.0;
const SPEED_JITTER: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Gesture {
    Idle,
    Raise,
    Converge,
}

/// Pose at progress `u ∈ [0, 1]` of a gesture, relative to the hip.
fn pose(g: Gesture, u: f64, sway: f64) -> [[f64; 2]; 17] {
    let mut k = REST_POSE;
    match g {
        Gesture::Idle => {
            for j in [7, 8, 9, 10] {
                k[j][1] += sway;
            }
        }
        Gesture::Raise => {
            for (j, side) in [(7, 1.0), (8, -1.0)] {
                k[j] = lerp(REST_POSE[j], [side * 30.0, -150.0], u);
            }
            for (j, side) in [(9, 1.0), (10, -1.0)] {
                k[j] = lerp(REST_POSE[j], [side * 20.0, -205.0], u);
            }
        }
        Gesture::Converge => {
            for (j, side) in [(7, 1.0), (8, -1.0)] {
                k[j] = lerp(REST_POSE[j], [side * 18.0, -82.0], u);
            }
            for (j, side) in [(9, 1.0), (10, -1.0)] {
                k[j] = lerp(REST_POSE[j], [side * 3.0, -62.0], u);
            }
        }
    }
    k
}

fn lerp(a: [f64; 2], b: [f64; 2], u: f64) -> [f64; 2] {
    [a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u]
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn manifest(persons: usize) -> Manifest {
    let names: Vec<String> = CLASSES.iter().map(|s| s.to_string()).collect();
    Manifest {
        num_joints: 17,
        max_persons: persons,
        max_objects: 1,
        num_groups: 2,
        group_flip: vec![1, 0, 3, 2],
        group_classes: names,
        action_classes: ACTIONS.iter().map(|s| s.to_string()).collect(),
        keypoint_names: COCO_KEYPOINTS.iter().map(|s| s.to_string()).collect(),
    }
}

fn clip(cfg: &SynthConfig, index: usize) -> RawClip {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(index as u64)));
    let label = index % CLASSES.len();
    let side = if label % 2 == 0 { -1.0 } else { 1.0 };
    let gesture = if label >= 2 { Gesture::Raise } else { Gesture::Converge };
    let other = if gesture == Gesture::Raise { Gesture::Converge } else { Gesture::Raise };
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let p = cfg.persons;
    let t_len = cfg.frames;

    // a line of people, left to right, placed anywhere that keeps the whole
    // walk inside the frame
    let mut line = vec![0.0];
    for i in 1..p {
        line.push(line[i - 1] + rng.random_range(MIN_GAP..MAX_GAP));
    }
    let span = line[p - 1];
    let group_speed = rng.random_range(6.0..12.0);
    let walk = (group_speed + SPEED_JITTER) * (t_len - 1) as f64;
    let (lo, hi) = if side > 0.0 {
        (MARGIN, w - MARGIN - span - walk)
    } else {
        (MARGIN + walk, w - MARGIN - span)
    };
    let x0 = if hi > lo { rng.random_range(lo..hi) } else { (lo + hi) / 2.0 };
    let speeds: Vec<f64> = (0..p)
        .map(|_| group_speed + rng.random_range(-SPEED_JITTER..SPEED_JITTER))
        .collect();
    // the leader walks in front, the distractor right behind; person slots
    // are a random permutation of line positions
    let (front, behind) = if side > 0.0 { (p - 1, p - 2) } else { (0, 1) };
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(&mut rng);
    let mut xs = vec![0.0; p];
    let mut speed = vec![0.0; p];
    for (k, &slot) in order.iter().enumerate() {
        xs[slot] = x0 + line[k];
        speed[slot] = speeds[k];
    }
    let designated = order[front];
    let ys: Vec<f64> = (0..p).map(|_| rng.random_range(260.0..h - 160.0)).collect();
    let distractor = rng.random_bool(cfg.distractor_p).then_some(order[behind]);
    let sway: Vec<f64> = (0..p).map(|_| rng.random_range(-4.0..4.0)).collect();
    let noise = Normal::new(0.0, cfg.noise_px.max(0.0)).expect("finite noise");
    let jitter = |rng: &mut ChaCha8Rng| if cfg.noise_px > 0.0 { noise.sample(rng) } else { 0.0 };
    let clamp = |v: f64, m: f64| quantize(v.clamp(0.0, m));

    let mut persons = Vec::with_capacity(p);
    let mut ball = Vec::with_capacity(t_len);
    for i in 0..p {
        let g = if i == designated {
            gesture
        } else if Some(i) == distractor {
            other
        } else {
            Gesture::Idle
        };
        let mut frames = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let u = if t_len > 1 { t as f64 / (t_len - 1) as f64 } else { 1.0 };
            let root = [xs[i] + side * speed[i] * t as f64, ys[i]];
            let s = (t as f64 * 0.9 + i as f64).sin() * sway[i];
            let kp = pose(g, u, s);
            let frame: Vec<[f64; 2]> = kp
                .iter()
                .map(|k| [clamp(root[0] + k[0] + jitter(&mut rng), w), clamp(root[1] + k[1] + jitter(&mut rng), h)])
                .collect();
            if i == designated {
                let nose = [root[0] + kp[0][0], root[1] + kp[0][1]];
                ball.push([
                    clamp(nose[0] + jitter(&mut rng), w),
                    clamp(nose[1] - BALL_ABOVE_NOSE + jitter(&mut rng), h),
                ]);
            }
            frames.push(frame);
        }
        persons.push(PersonTrack {
            person_index: i,
            keypoints: frames,
            confidences: vec![vec![1.0; 17]; t_len],
            present: vec![true; t_len],
            action: Some(if i == designated { KEY_ACTION } else { 0 }),
        });
    }
    RawClip {
        clip_id: format!("synth-{index:05}"),
        frame_width: cfg.width,
        frame_height: cfg.height,
        num_frames: t_len,
        persons,
        objects: vec![ObjectTrack {
            object_index: 0,
            keypoints: ball,
            present: vec![true; t_len],
        }],
        group_label: label,
    }
}

/// Clip `i` has class `i mod 4`, so classes are balanced whenever
/// `n_clips` is a multiple of four.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<(Vec<RawClip>, Manifest), DatasetError> {
    if cfg.persons < 2 {
        return Err(DatasetError::Manifest(format!("need at least 2 persons, got {}", cfg.persons)));
    }
    if cfg.frames < 2 {
        return Err(DatasetError::Manifest(format!("need at least 2 frames, got {}", cfg.frames)));
    }
    let m = manifest(cfg.persons);
    let clips: Vec<RawClip> = (0..cfg.n_clips).map(|i| clip(cfg, i)).collect();
    for c in &clips {
        c.validate(&m)?;
    }
    Ok((clips, m))
}

/// Every `every`-th clip (1-based) goes to the test split.
pub fn split_train_test(clips: Vec<RawClip>, every: usize) -> (Vec<RawClip>, Vec<RawClip>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, c) in clips.into_iter().enumerate() {
        if (i + 1) % every == 0 {
            test.push(c);
        } else {
            train.push(c);
        }
    }
    (train, test)
}
