//! Softmax regression on flattened standardized coordinates.

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Mat};
use crate::dataset::{ClipFeatures, FeatureStats, Manifest, RawClip};

use super::{argmax, Adam};
use crate::params::{ParamKind, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearBaselineConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for LinearBaselineConfig {
    fn default() -> Self {
        LinearBaselineConfig {
            epochs: 300,
            lr: 1e-2,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearBaseline {
    pub stats: FeatureStats,
    /// `[weights (D x C); bias (1 x C)]`
    pub store: ParamStore,
}

/// Person keypoints then object keypoints, all frames, standardized.
pub fn flatten(f: &ClipFeatures) -> Vec<f64> {
    f.std_xy
        .iter()
        .chain(f.obj_std_xy.iter())
        .flat_map(|v| v.iter().copied())
        .collect()
}

fn design(clips: &[RawClip], manifest: &Manifest, stats: &FeatureStats) -> (Mat, Vec<usize>) {
    let rows: Vec<Vec<f64>> = clips
        .iter()
        .map(|c| flatten(&ClipFeatures::build(c, manifest, stats)))
        .collect();
    let d = rows.first().map_or(0, Vec::len);
    let x = Mat::from_shape_vec((rows.len(), d), rows.concat()).expect("equal widths");
    (x, clips.iter().map(|c| c.group_label).collect())
}

impl LinearBaseline {
    /// Full-batch Adam on the mean cross-entropy.
    pub fn fit(clips: &[RawClip], manifest: &Manifest, cfg: &LinearBaselineConfig) -> Self {
        let stats = FeatureStats::fit(clips);
        let (x, y) = design(clips, manifest, &stats);
        let (n, d) = x.dim();
        let c = manifest.group_classes.len();
        let mut store = ParamStore::new();
        let w = store.add("linear.w", ParamKind::Weight, Mat::zeros((d, c)));
        let b = store.add("linear.b", ParamKind::Bias, Mat::zeros((1, c)));
        let mut optim = Adam::new(&store);
        for _ in 0..cfg.epochs {
            let mut probs = softmax_rows(&(x.dot(store.get(w)) + store.get(b)));
            for (i, &yi) in y.iter().enumerate() {
                probs[[i, yi]] -= 1.0;
            }
            probs /= n.max(1) as f64;
            let gw = x.t().dot(&probs);
            let gb = probs.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
            optim.update(&mut store, &[Some(gw), Some(gb)], cfg.lr, cfg.weight_decay);
        }
        LinearBaseline { stats, store }
    }

    pub fn predict(&self, clip: &RawClip, manifest: &Manifest) -> usize {
        let f = ClipFeatures::build(clip, manifest, &self.stats);
        let x = Mat::from_shape_vec((1, f.std_xy.len() * 2 + f.obj_std_xy.len() * 2), flatten(&f)).expect("sized");
        let logits = x.dot(self.store.get(crate::params::ParamId(0))) + self.store.get(crate::params::ParamId(1));
        argmax(logits.row(0).iter().copied())
    }

    pub fn accuracy(&self, clips: &[RawClip], manifest: &Manifest) -> f64 {
        if clips.is_empty() {
            return 0.0;
        }
        let hits = clips.iter().filter(|c| self.predict(c, manifest) == c.group_label).count();
        hits as f64 / clips.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, split_train_test, SynthConfig};

    #[test]
    fn fits_its_own_training_set_better_than_chance() {
        let (clips, m) = generate_dataset(&SynthConfig {
            n_clips: 40,
            ..Default::default()
        })
        .unwrap();
        let (train, _) = split_train_test(clips, 5);
        let model = LinearBaseline::fit(&train, &m, &LinearBaselineConfig::default());
        assert!(model.accuracy(&train, &m) > 0.5);
    }
}
