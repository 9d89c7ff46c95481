//! Keypoint-track clips: file format, validation, per-keypoint features and
//! person-to-group assignment.

mod features;
mod grouping;
mod io;
pub mod skeleton;

pub use features::{
    compute_oks_features, personwise_normalize, standardize_features, temporal_differences,
    ChannelStats, ClipFeatures, FeatureStats,
};
pub use grouping::{assign_groups_heuristic, assign_groups_kmeans, heuristic_from_mean_x, GroupAssignment, GroupingMethod};
pub use io::{load_clips, load_dataset, manifest_path_for, save_clips, save_dataset};

use serde::{Deserialize, Serialize};

use crate::error::DatasetError;

/// Coordinates are held on a dyadic grid of this many pixels so that mirror
/// and shift augmentations are exact in floating point.
pub const COORD_QUANTUM: f64 = 1.0 / 256.0;

pub fn quantize(v: f64) -> f64 {
    (v / COORD_QUANTUM).round() * COORD_QUANTUM
}

/// One person's keypoints over all frames of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonTrack {
    pub person_index: usize,
    /// `T x j'` pixel positions.
    pub keypoints: Vec<Vec<[f64; 2]>>,
    /// `T x j'` detector confidences in `[0, 1]`.
    pub confidences: Vec<Vec<f64>>,
    pub present: Vec<bool>,
    pub action: Option<usize>,
}

impl PersonTrack {
    pub fn num_frames(&self) -> usize {
        self.keypoints.len()
    }

    pub fn num_joints(&self) -> usize {
        self.keypoints.first().map_or(0, Vec::len)
    }

    pub fn any_present(&self) -> bool {
        self.present.iter().any(|&p| p)
    }

    /// Mean x over every keypoint of every present frame.
    pub fn mean_x(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (frame, &present) in self.keypoints.iter().zip(&self.present) {
            if present {
                for kp in frame {
                    sum += kp[0];
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub object_index: usize,
    /// One pixel position per frame.
    pub keypoints: Vec<[f64; 2]>,
    pub present: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawClip {
    pub clip_id: String,
    pub frame_width: u32,
    pub frame_height: u32,
    pub num_frames: usize,
    pub persons: Vec<PersonTrack>,
    pub objects: Vec<ObjectTrack>,
    pub group_label: usize,
}

impl RawClip {
    pub fn person_actions(&self) -> Vec<Option<usize>> {
        self.persons.iter().map(|p| p.action).collect()
    }

    /// Checks every structural invariant against the dataset manifest.
    pub fn validate(&self, manifest: &Manifest) -> Result<(), DatasetError> {
        let schema = |msg: String| DatasetError::Schema {
            clip: self.clip_id.clone(),
            msg,
        };
        if self.num_frames == 0 {
            return Err(schema("field `T` must be positive".into()));
        }
        if self.persons.len() > manifest.max_persons {
            return Err(schema(format!(
                "field `persons` has {} entries, manifest allows {}",
                self.persons.len(),
                manifest.max_persons
            )));
        }
        if self.objects.len() > manifest.max_objects {
            return Err(schema(format!(
                "field `objects` has {} entries, manifest allows {}",
                self.objects.len(),
                manifest.max_objects
            )));
        }
        if self.group_label >= manifest.group_classes.len() {
            return Err(schema(format!(
                "field `group_label` = {} out of range for {} classes",
                self.group_label,
                manifest.group_classes.len()
            )));
        }
        let (w, h) = (self.frame_width as f64, self.frame_height as f64);
        let in_bounds = |p: &[f64; 2]| p[0].is_finite() && p[1].is_finite() && (0.0..=w).contains(&p[0]) && (0.0..=h).contains(&p[1]);
        for person in &self.persons {
            let who = format!("person {}", person.person_index);
            if person.keypoints.len() != self.num_frames || person.present.len() != self.num_frames {
                return Err(schema(format!(
                    "{who}: field `kpts` has {} frames, expected T = {}",
                    person.keypoints.len(),
                    self.num_frames
                )));
            }
            for (t, frame) in person.keypoints.iter().enumerate() {
                if frame.len() != manifest.num_joints {
                    return Err(DatasetError::Dimension {
                        clip: self.clip_id.clone(),
                        msg: format!("{who} frame {t}: {} keypoints, manifest declares j' = {}", frame.len(), manifest.num_joints),
                    });
                }
                if person.present[t] {
                    if let Some(j) = frame.iter().position(|p| !in_bounds(p)) {
                        return Err(schema(format!("{who} frame {t} keypoint {j}: coordinate outside the frame")));
                    }
                }
            }
            for (t, conf) in person.confidences.iter().enumerate() {
                if conf.iter().any(|c| !(0.0..=1.0).contains(c)) {
                    return Err(schema(format!("{who} frame {t}: confidence outside [0, 1]")));
                }
            }
            if let Some(a) = person.action {
                if a >= manifest.action_classes.len() {
                    return Err(schema(format!("{who}: field `actions` = {a} out of range")));
                }
            }
        }
        for obj in &self.objects {
            let who = format!("object {}", obj.object_index);
            if obj.keypoints.len() != self.num_frames || obj.present.len() != self.num_frames {
                return Err(schema(format!(
                    "{who}: field `kpts` has {} frames, expected T = {}",
                    obj.keypoints.len(),
                    self.num_frames
                )));
            }
            for (t, p) in obj.keypoints.iter().enumerate() {
                if obj.present[t] && !in_bounds(p) {
                    return Err(schema(format!("{who} frame {t}: coordinate outside the frame")));
                }
            }
        }
        Ok(())
    }
}

/// Dataset-level declarations stored next to the clip file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_joints: usize,
    pub max_persons: usize,
    pub max_objects: usize,
    pub num_groups: usize,
    pub group_classes: Vec<String>,
    pub action_classes: Vec<String>,
    pub keypoint_names: Vec<String>,
    /// Group label after a horizontal mirror, indexed by the original label.
    pub group_flip: Vec<usize>,
}

impl Manifest {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |msg: String| DatasetError::Manifest(msg);
        if self.keypoint_names.len() != self.num_joints {
            return Err(bad(format!(
                "field `keypoint_names` has {} entries but `num_joints` = {}",
                self.keypoint_names.len(),
                self.num_joints
            )));
        }
        if self.group_flip.len() != self.group_classes.len() {
            return Err(bad("field `group_flip` must have one entry per group class".into()));
        }
        for (i, &f) in self.group_flip.iter().enumerate() {
            if f >= self.group_flip.len() || self.group_flip[f] != i {
                return Err(bad("field `group_flip` must be an involution".into()));
            }
        }
        if self.num_groups == 0 || self.max_persons == 0 {
            return Err(bad("fields `num_groups` and `max_persons` must be positive".into()));
        }
        Ok(())
    }

    /// Index of the mirror partner of each keypoint type (`left_*` ↔ `right_*`).
    pub fn keypoint_flip(&self) -> Vec<usize> {
        self.keypoint_names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                side_swapped_name(name)
                    .and_then(|partner| self.keypoint_names.iter().position(|n| *n == partner))
                    .unwrap_or(i)
            })
            .collect()
    }

    /// The 8-class volleyball label set with its mirror table.
    pub fn volleyball() -> Self {
        let group_classes: Vec<String> = [
            "r_set", "r_spike", "r-pass", "r_winpoint", "l_set", "l-spike", "l-pass", "l_winpoint",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let action_classes = [
            "waiting", "setting", "digging", "falling", "spiking", "blocking", "jumping", "moving", "standing",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        Manifest {
            num_joints: 17,
            max_persons: 12,
            max_objects: 1,
            num_groups: 2,
            group_flip: flip_table_from_names(&group_classes),
            group_classes,
            action_classes,
            keypoint_names: skeleton::COCO_KEYPOINTS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Collective-activity style: 13 persons, no object, side-insensitive labels.
    pub fn collective() -> Self {
        let group_classes: Vec<String> = ["crossing", "waiting", "queueing", "walking", "talking"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        Manifest {
            num_joints: 17,
            max_persons: 13,
            max_objects: 0,
            num_groups: 2,
            group_flip: flip_table_from_names(&group_classes),
            action_classes: group_classes.clone(),
            group_classes,
            keypoint_names: skeleton::COCO_KEYPOINTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

const SIDE_PAIRS: [(&str, &str); 4] = [("left", "right"), ("l_", "r_"), ("l-", "r-"), ("l", "r")];

/// Swaps a leading side marker (`left`/`right`, `l_`/`r_`, `l-`/`r-`).
pub fn side_swapped_name(name: &str) -> Option<String> {
    for (l, r) in SIDE_PAIRS {
        // Bare "l"/"r" only counts when followed by a separator.
        let bare = l.len() == 1;
        for (from, to) in [(l, r), (r, l)] {
            if let Some(rest) = name.strip_prefix(from) {
                if bare && !rest.starts_with(['_', '-', ' ']) {
                    continue;
                }
                return Some(format!("{to}{rest}"));
            }
        }
    }
    None
}

/// Builds a label mirror table by pairing side-prefixed class names;
/// names without a partner map to themselves.
pub fn flip_table_from_names(names: &[String]) -> Vec<usize> {
    names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            side_swapped_name(n)
                .and_then(|p| {
                    names.iter().position(|m| {
                        *m == p || m.replace('-', "_") == p.replace('-', "_")
                    })
                })
                .unwrap_or(i)
        })
        .collect()
}
