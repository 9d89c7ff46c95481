//! Numeric per-keypoint features derived from raw pixel tracks.

use serde::{Deserialize, Serialize};

use super::skeleton::oks_kappas;
use super::{Manifest, PersonTrack, RawClip};

/// Mean and standard deviation of the x and y channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl ChannelStats {
    pub const IDENTITY: ChannelStats = ChannelStats {
        mean: [0.0, 0.0],
        std: [1.0, 1.0],
    };

    fn from_samples(samples: &[[f64; 2]]) -> Self {
        if samples.is_empty() {
            return Self::IDENTITY;
        }
        let n = samples.len() as f64;
        let mut mean = [0.0; 2];
        for s in samples {
            mean[0] += s[0];
            mean[1] += s[1];
        }
        mean = [mean[0] / n, mean[1] / n];
        let mut var = [0.0; 2];
        for s in samples {
            var[0] += (s[0] - mean[0]).powi(2);
            var[1] += (s[1] - mean[1]).powi(2);
        }
        ChannelStats {
            mean,
            std: [(var[0] / n).sqrt(), (var[1] / n).sqrt()],
        }
    }

    /// Zero-variance channels divide by 1.
    pub fn divisor(&self, c: usize) -> f64 {
        if self.std[c] > 0.0 {
            self.std[c]
        } else {
            1.0
        }
    }

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [
            (v[0] - self.mean[0]) / self.divisor(0),
            (v[1] - self.mean[1]) / self.divisor(1),
        ]
    }
}

/// Standardization statistics fitted on a training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub coords: ChannelStats,
    pub diffs: ChannelStats,
}

impl Default for FeatureStats {
    fn default() -> Self {
        FeatureStats {
            coords: ChannelStats::IDENTITY,
            diffs: ChannelStats::IDENTITY,
        }
    }
}

impl FeatureStats {
    /// Fits coordinate and temporal-difference statistics over every present
    /// person keypoint of `clips`.
    pub fn fit(clips: &[RawClip]) -> Self {
        let mut coords = Vec::new();
        let mut diffs = Vec::new();
        for clip in clips {
            for p in &clip.persons {
                for (t, frame) in p.keypoints.iter().enumerate() {
                    if !p.present[t] {
                        continue;
                    }
                    coords.extend_from_slice(frame);
                    if t > 0 && p.present[t - 1] {
                        for (a, b) in frame.iter().zip(&p.keypoints[t - 1]) {
                            diffs.push([a[0] - b[0], a[1] - b[1]]);
                        }
                    }
                }
            }
        }
        let stats = FeatureStats {
            coords: ChannelStats::from_samples(&coords),
            diffs: ChannelStats::from_samples(&diffs),
        };
        for (name, s) in [("coordinate", stats.coords), ("difference", stats.diffs)] {
            if s.std.iter().any(|&v| v == 0.0) {
                log::warn!("zero-variance {name} channel; dividing by 1 instead");
            }
        }
        stats
    }
}

/// Frame-to-frame differences; frame 0 and frames following a missing frame are 0.
pub fn temporal_differences(coords: &[Vec<[f64; 2]>], present: &[bool]) -> Vec<Vec<[f64; 2]>> {
    coords
        .iter()
        .enumerate()
        .map(|(t, frame)| {
            frame
                .iter()
                .enumerate()
                .map(|(j, k)| {
                    if t > 0 && present[t] && present[t - 1] {
                        let prev = coords[t - 1][j];
                        [k[0] - prev[0], k[1] - prev[1]]
                    } else {
                        [0.0, 0.0]
                    }
                })
                .collect()
        })
        .collect()
}

/// Standardized coordinates and standardized temporal differences for a
/// `T x j'` track. Missing frames get zeros in both outputs.
pub fn standardize_features(
    coords: &[Vec<[f64; 2]>],
    present: &[bool],
    stats: &FeatureStats,
) -> (Vec<Vec<[f64; 2]>>, Vec<Vec<[f64; 2]>>) {
    let diffs = temporal_differences(coords, present);
    let std_coords = coords
        .iter()
        .zip(present)
        .map(|(f, &p)| {
            f.iter()
                .map(|&k| if p { stats.coords.apply(k) } else { [0.0, 0.0] })
                .collect()
        })
        .collect();
    let std_diffs = diffs
        .iter()
        .zip(present)
        .map(|(f, &p)| {
            f.iter()
                .map(|&k| if p { stats.diffs.apply(k) } else { [0.0, 0.0] })
                .collect()
        })
        .collect();
    (std_coords, std_diffs)
}

fn bbox<'a>(points: impl Iterator<Item = &'a [f64; 2]>) -> Option<([f64; 2], [f64; 2])> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut any = false;
    for p in points {
        any = true;
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    any.then_some((lo, hi))
}

/// Coordinates relative to the person's bounding-box center, divided by the
/// box diagonal (floored at one pixel). The box spans all present frames.
/// Tracks with no present frame yield zeros.
pub fn personwise_normalize(track: &PersonTrack) -> Vec<Vec<[f64; 2]>> {
    let present_points = track
        .keypoints
        .iter()
        .zip(&track.present)
        .filter(|(_, &p)| p)
        .flat_map(|(f, _)| f.iter());
    let Some((lo, hi)) = bbox(present_points) else {
        return track
            .keypoints
            .iter()
            .map(|f| vec![[0.0, 0.0]; f.len()])
            .collect();
    };
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let diag = ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt().max(1.0);
    track
        .keypoints
        .iter()
        .zip(&track.present)
        .map(|(f, &p)| {
            f.iter()
                .map(|k| {
                    if p {
                        [(k[0] - center[0]) / diag, (k[1] - center[1]) / diag]
                    } else {
                        [0.0, 0.0]
                    }
                })
                .collect()
        })
        .collect()
}

/// Per keypoint type, the mean over consecutive present frame pairs of
/// `exp(-d² / (2 s² κ²))`, where `s²` is the bounding-box area at the
/// earlier frame (floored at 1 px²). Types with no valid pair get 0.
pub fn compute_oks_features(track: &PersonTrack, kappas: &[f64]) -> Vec<f64> {
    let j = track.num_joints();
    let mut sum = vec![0.0; j];
    let mut count = 0usize;
    for t in 0..track.num_frames().saturating_sub(1) {
        if !(track.present[t] && track.present[t + 1]) {
            continue;
        }
        let (lo, hi) = bbox(track.keypoints[t].iter()).expect("non-empty frame");
        let area = ((hi[0] - lo[0]) * (hi[1] - lo[1])).max(1.0);
        for (k, s) in sum.iter_mut().enumerate() {
            let a = track.keypoints[t][k];
            let b = track.keypoints[t + 1][k];
            let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
            *s += (-d2 / (2.0 * area * kappas[k] * kappas[k])).exp();
        }
        count += 1;
    }
    if count == 0 {
        return vec![0.0; j];
    }
    sum.into_iter().map(|s| s / count as f64).collect()
}

/// Every numeric input the tokenizer needs for one clip, padded to the
/// manifest's person and object capacity.
///
/// Person-keypoint arrays are indexed `[(p * T + t) * J + j]`, person-frame
/// arrays `[p * T + t]`, object arrays `[e * T + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatures {
    pub clip_id: String,
    pub num_frames: usize,
    pub num_persons: usize,
    pub num_joints: usize,
    pub num_objects: usize,
    pub person_present: Vec<bool>,
    pub frame_present: Vec<bool>,
    /// Pixel coordinates divided by frame size.
    pub image_xy: Vec<[f64; 2]>,
    pub std_xy: Vec<[f64; 2]>,
    pub std_dxy: Vec<[f64; 2]>,
    pub norm_xy: Vec<[f64; 2]>,
    /// `[p * J + j]`
    pub oks: Vec<f64>,
    /// Mean x per person slot; `+inf` for absent slots.
    pub mean_x: Vec<f64>,
    pub obj_present: Vec<bool>,
    pub obj_image_xy: Vec<[f64; 2]>,
    pub obj_std_xy: Vec<[f64; 2]>,
    pub obj_std_dxy: Vec<[f64; 2]>,
    /// Person-frames zeroed by actor dropout.
    pub dropped: Vec<bool>,
    pub group_label: usize,
    pub person_labels: Vec<Option<usize>>,
}

impl ClipFeatures {
    pub fn build(clip: &RawClip, manifest: &Manifest, stats: &FeatureStats) -> Self {
        let t_len = clip.num_frames;
        let j_len = manifest.num_joints;
        let p_len = manifest.max_persons;
        let e_len = manifest.max_objects;
        let kappas = oks_kappas(&manifest.keypoint_names);
        let (w, h) = (clip.frame_width as f64, clip.frame_height as f64);

        let mut f = ClipFeatures {
            clip_id: clip.clip_id.clone(),
            num_frames: t_len,
            num_persons: p_len,
            num_joints: j_len,
            num_objects: e_len,
            person_present: vec![false; p_len],
            frame_present: vec![false; p_len * t_len],
            image_xy: vec![[0.0; 2]; p_len * t_len * j_len],
            std_xy: vec![[0.0; 2]; p_len * t_len * j_len],
            std_dxy: vec![[0.0; 2]; p_len * t_len * j_len],
            norm_xy: vec![[0.0; 2]; p_len * t_len * j_len],
            oks: vec![0.0; p_len * j_len],
            mean_x: vec![f64::INFINITY; p_len],
            obj_present: vec![false; e_len * t_len],
            obj_image_xy: vec![[0.0; 2]; e_len * t_len],
            obj_std_xy: vec![[0.0; 2]; e_len * t_len],
            obj_std_dxy: vec![[0.0; 2]; e_len * t_len],
            dropped: vec![false; p_len * t_len],
            group_label: clip.group_label,
            person_labels: vec![None; p_len],
        };

        for (p, track) in clip.persons.iter().enumerate().take(p_len) {
            if !track.any_present() {
                continue;
            }
            f.person_present[p] = true;
            f.person_labels[p] = track.action;
            f.mean_x[p] = track.mean_x().unwrap_or(f64::INFINITY);
            let (sc, sd) = standardize_features(&track.keypoints, &track.present, stats);
            let norm = personwise_normalize(track);
            for t in 0..t_len {
                f.frame_present[p * t_len + t] = track.present[t];
                if !track.present[t] {
                    continue;
                }
                for j in 0..j_len {
                    let i = (p * t_len + t) * j_len + j;
                    let k = track.keypoints[t][j];
                    f.image_xy[i] = [k[0] / w, k[1] / h];
                    f.std_xy[i] = sc[t][j];
                    f.std_dxy[i] = sd[t][j];
                    f.norm_xy[i] = norm[t][j];
                }
            }
            let oks = compute_oks_features(track, &kappas);
            f.oks[p * j_len..(p + 1) * j_len].copy_from_slice(&oks);
        }

        for (e, obj) in clip.objects.iter().enumerate().take(e_len) {
            let as_track: Vec<Vec<[f64; 2]>> = obj.keypoints.iter().map(|k| vec![*k]).collect();
            let (sc, sd) = standardize_features(&as_track, &obj.present, stats);
            for t in 0..t_len {
                let i = e * t_len + t;
                f.obj_present[i] = obj.present[t];
                if obj.present[t] {
                    let k = obj.keypoints[t];
                    f.obj_image_xy[i] = [k[0] / w, k[1] / h];
                    f.obj_std_xy[i] = sc[t][0];
                    f.obj_std_dxy[i] = sd[t][0];
                }
            }
        }
        f
    }

    pub fn kp_index(&self, p: usize, t: usize, j: usize) -> usize {
        (p * self.num_frames + t) * self.num_joints + j
    }

    /// Whether person `p` contributes features at frame `t`.
    pub fn active(&self, p: usize, t: usize) -> bool {
        let i = p * self.num_frames + t;
        self.frame_present[i] && !self.dropped[i]
    }

    pub fn num_dropped(&self) -> usize {
        self.dropped.iter().filter(|&&d| d).count()
    }
}
