//! The 17-type COCO keypoint ordering, its limb graph and per-type OKS constants.
//!
//! | idx | keypoint        | κ (= 2σ) |
//! |-----|-----------------|----------|
//! | 0   | nose            | 0.052    |
//! | 1   | left_eye        | 0.050    |
//! | 2   | right_eye       | 0.050    |
//! | 3   | left_ear        | 0.070    |
//! | 4   | right_ear       | 0.070    |
//! | 5   | left_shoulder   | 0.158    |
//! | 6   | right_shoulder  | 0.158    |
//! | 7   | left_elbow      | 0.144    |
//! | 8   | right_elbow     | 0.144    |
//! | 9   | left_wrist      | 0.124    |
//! | 10  | right_wrist     | 0.124    |
//! | 11  | left_hip        | 0.214    |
//! | 12  | right_hip       | 0.214    |
//! | 13  | left_knee       | 0.174    |
//! | 14  | right_knee      | 0.174    |
//! | 15  | left_ankle      | 0.178    |
//! | 16  | right_ankle     | 0.178    |

use ndarray::Array2;

pub const COCO_KEYPOINTS: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// COCO per-keypoint standard deviations σ.
pub const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

pub const COCO_LIMBS: [(usize, usize); 19] = [
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
];

pub const LEFT_WRIST: usize = 9;
pub const RIGHT_WRIST: usize = 10;

/// Per-type OKS falloff κ = 2σ. Non-COCO skeletons fall back to the COCO mean.
pub fn oks_kappas(keypoint_names: &[String]) -> Vec<f64> {
    let mean = COCO_SIGMAS.iter().sum::<f64>() / COCO_SIGMAS.len() as f64;
    keypoint_names
        .iter()
        .map(|n| {
            let sigma = COCO_KEYPOINTS
                .iter()
                .position(|c| c == n)
                .map_or(mean, |i| COCO_SIGMAS[i]);
            2.0 * sigma
        })
        .collect()
}

/// Symmetric-normalized adjacency `D^-1/2 (A + I) D^-1/2` over the limb graph.
/// Keypoint names not in the COCO set only get self-loops.
pub fn normalized_adjacency(keypoint_names: &[String]) -> Array2<f64> {
    let n = keypoint_names.len();
    let mut a = Array2::<f64>::eye(n);
    let coco_index = |name: &str| COCO_KEYPOINTS.iter().position(|c| *c == name);
    let local: Vec<Option<usize>> = keypoint_names.iter().map(|k| coco_index(k)).collect();
    for &(u, v) in &COCO_LIMBS {
        let iu = local.iter().position(|&c| c == Some(u));
        let iv = local.iter().position(|&c| c == Some(v));
        if let (Some(i), Some(j)) = (iu, iv) {
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
    }
    let deg: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| a[[i, j]] / (deg[i] * deg[j]).sqrt())
}
