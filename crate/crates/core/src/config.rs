//! Flat `key = value` configuration.
//!
//! Every key in [`KEYS`] must appear exactly once; unknown keys are rejected.
//! Blank lines and lines starting with `#` are ignored. List values are
//! comma-separated.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::cluster::ClusterConfig;
use crate::dataset::GroupingMethod;
use crate::error::ConfigError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub d_type: usize,
    pub d_fourier: usize,
    pub d_time: usize,
    pub d_mlp: usize,
    pub blocks: usize,
    /// Attention heads per scale.
    pub heads: [usize; 4],
    /// Encoder dropout rate per scale.
    pub dropout: [f64; 4],
    /// Number of active scales, counted from the keypoint scale.
    pub num_scales: usize,
    /// `false` removes every encoder: the group head reads pooled initial
    /// object and person tokens.
    pub multiscale: bool,
    pub grouping: GroupingMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// First epoch (0-based) that uses `lr_dropped`.
    pub lr_drop_epoch: usize,
    pub lr_dropped: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Auxiliary group predictions from early blocks and non-final scales.
    pub aux: bool,
}

impl TrainSettings {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr_dropped
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub cluster: ClusterConfig,
    pub aug: AugmentConfig,
    pub train: TrainSettings,
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("model.d", "token width d"),
    ("model.d_type", "keypoint-type embedding width"),
    ("model.d_fourier", "Fourier positional encoding width (even)"),
    ("model.d_time", "time positional encoding width"),
    ("model.d_mlp", "encoder MLP hidden width"),
    ("model.blocks", "number of stacked multiscale blocks M"),
    ("model.heads", "attention heads per scale, four comma-separated values"),
    ("model.dropout", "encoder dropout per scale, four comma-separated values"),
    ("model.num_scales", "active scales 1..4 (keypoint, +person, +interaction, +group)"),
    ("model.multiscale", "false: no encoders, pooled initial tokens feed the group head"),
    ("model.grouping", "heuristic | kmeans"),
    ("cluster.K", "number of prototypes"),
    ("cluster.tau", "softmax temperature of the swapped prediction"),
    ("cluster.eps", "entropic regularization of Sinkhorn-Knopp"),
    ("cluster.sinkhorn_iters", "Sinkhorn-Knopp rounds"),
    ("cluster.enabled", "include the clustering loss"),
    ("aug.flip_p", "horizontal flip probability"),
    ("aug.hmove_p", "horizontal move probability"),
    ("aug.vmove_p", "vertical move probability"),
    ("aug.dropout_p", "actor dropout probability"),
    ("aug.move_bound", "largest move offset in pixels"),
    ("aug.perturb_px", "per-keypoint jitter bound in pixels"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "clips per optimizer step"),
    ("train.lr", "initial learning rate"),
    ("train.lr_drop_epoch", "epoch from which train.lr_dropped applies"),
    ("train.lr_dropped", "learning rate after the drop"),
    ("train.weight_decay", "L2 weight decay (not applied to prototypes or layer norms)"),
    ("train.lambda", "weight of the last-block terms"),
    ("train.seed", "seed for initialization, shuffling, augmentation and dropout"),
    ("train.aux", "auxiliary group predictions"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        msg: e.to_string(),
    })
}

fn parse4<T: FromStr + Copy + Default>(key: &str, value: &str) -> Result<[T; 4], ConfigError>
where
    T::Err: Display,
{
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != 4 {
        return Err(ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
            msg: "expected four comma-separated values".into(),
        });
    }
    let mut out = [T::default(); 4];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse(key, p)?;
    }
    Ok(out)
}

fn join4<T: Display>(v: &[T; 4]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Full-scale hyperparameters.
    pub fn paper() -> Self {
        TrainConfig {
            model: ModelConfig {
                d: 256,
                d_type: 64,
                d_fourier: 64,
                d_time: 64,
                d_mlp: 1024,
                blocks: 2,
                heads: [2, 8, 2, 2],
                dropout: [0.5, 0.2, 0.2, 0.0],
                num_scales: 4,
                multiscale: true,
                grouping: GroupingMethod::Heuristic,
            },
            cluster: ClusterConfig::default(),
            aug: AugmentConfig::default(),
            train: TrainSettings {
                epochs: 45,
                batch_size: 256,
                lr: 5e-4,
                lr_drop_epoch: 40,
                lr_dropped: 1e-4,
                weight_decay: 1e-3,
                lambda: 3.0,
                seed: 0,
                aux: true,
            },
        }
    }

    /// Small preset that trains on a laptop CPU in minutes.
    pub fn desk() -> Self {
        let mut c = Self::paper();
        c.model.d = 32;
        c.model.d_type = 8;
        c.model.d_fourier = 8;
        c.model.d_time = 8;
        c.model.d_mlp = 128;
        c.model.heads = [2, 4, 2, 2];
        // at d = 32 and a few hundred steps, encoder dropout and a sharp
        // clustering softmax both stall the group head
        c.model.dropout = [0.0; 4];
        c.cluster.num_prototypes = 32;
        c.cluster.tau = 0.5;
        c.train.batch_size = 32;
        c.train.epochs = 30;
        c
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "model.d" => self.model.d = parse(key, v)?,
            "model.d_type" => self.model.d_type = parse(key, v)?,
            "model.d_fourier" => self.model.d_fourier = parse(key, v)?,
            "model.d_time" => self.model.d_time = parse(key, v)?,
            "model.d_mlp" => self.model.d_mlp = parse(key, v)?,
            "model.blocks" => self.model.blocks = parse(key, v)?,
            "model.heads" => self.model.heads = parse4(key, v)?,
            "model.dropout" => self.model.dropout = parse4(key, v)?,
            "model.num_scales" => self.model.num_scales = parse(key, v)?,
            "model.multiscale" => self.model.multiscale = parse(key, v)?,
            "model.grouping" => self.model.grouping = parse(key, v)?,
            "cluster.K" => self.cluster.num_prototypes = parse(key, v)?,
            "cluster.tau" => self.cluster.tau = parse(key, v)?,
            "cluster.eps" => self.cluster.eps = parse(key, v)?,
            "cluster.sinkhorn_iters" => self.cluster.sinkhorn_iters = parse(key, v)?,
            "cluster.enabled" => self.cluster.enabled = parse(key, v)?,
            "aug.flip_p" => self.aug.flip_p = parse(key, v)?,
            "aug.hmove_p" => self.aug.hmove_p = parse(key, v)?,
            "aug.vmove_p" => self.aug.vmove_p = parse(key, v)?,
            "aug.dropout_p" => self.aug.dropout_p = parse(key, v)?,
            "aug.move_bound" => self.aug.move_bound = parse(key, v)?,
            "aug.perturb_px" => self.aug.perturb_px = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.lr_drop_epoch" => self.train.lr_drop_epoch = parse(key, v)?,
            "train.lr_dropped" => self.train.lr_dropped = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.lambda" => self.train.lambda = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.aux" => self.train.aux = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "model.d" => self.model.d.to_string(),
            "model.d_type" => self.model.d_type.to_string(),
            "model.d_fourier" => self.model.d_fourier.to_string(),
            "model.d_time" => self.model.d_time.to_string(),
            "model.d_mlp" => self.model.d_mlp.to_string(),
            "model.blocks" => self.model.blocks.to_string(),
            "model.heads" => join4(&self.model.heads),
            "model.dropout" => join4(&self.model.dropout),
            "model.num_scales" => self.model.num_scales.to_string(),
            "model.multiscale" => self.model.multiscale.to_string(),
            "model.grouping" => match self.model.grouping {
                GroupingMethod::Heuristic => "heuristic".into(),
                GroupingMethod::Kmeans => "kmeans".into(),
            },
            "cluster.K" => self.cluster.num_prototypes.to_string(),
            "cluster.tau" => self.cluster.tau.to_string(),
            "cluster.eps" => self.cluster.eps.to_string(),
            "cluster.sinkhorn_iters" => self.cluster.sinkhorn_iters.to_string(),
            "cluster.enabled" => self.cluster.enabled.to_string(),
            "aug.flip_p" => self.aug.flip_p.to_string(),
            "aug.hmove_p" => self.aug.hmove_p.to_string(),
            "aug.vmove_p" => self.aug.vmove_p.to_string(),
            "aug.dropout_p" => self.aug.dropout_p.to_string(),
            "aug.move_bound" => self.aug.move_bound.to_string(),
            "aug.perturb_px" => self.aug.perturb_px.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.lr_drop_epoch" => self.train.lr_drop_epoch.to_string(),
            "train.lr_dropped" => self.train.lr_dropped.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.lambda" => self.train.lambda.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.aux" => self.train.aux.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value`. The key may omit its section prefix when the
    /// remainder is unambiguous (`num_scales=1`).
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::InvalidValue {
                key: assignment.into(),
                value: String::new(),
                msg: "expected key=value".into(),
            })?;
        let key = resolve_key(key.trim())?;
        self.set(key, value)?;
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            if KEYS.iter().all(|(name, _)| *name != k) {
                return Err(ConfigError::UnknownKey(k.into()));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(ConfigError::InvalidValue {
                    key: k.into(),
                    value: v.trim().into(),
                    msg: "key given more than once".into(),
                });
            }
        }
        let mut cfg = Self::paper();
        for (key, _) in KEYS {
            let v = entries.get(*key).ok_or_else(|| ConfigError::MissingKey((*key).into()))?;
            cfg.set(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// Every key, one per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: &str| ConfigError::InvalidValue {
            key: key.into(),
            value: self.get(key).unwrap_or_default(),
            msg: msg.into(),
        };
        let m = &self.model;
        if m.d == 0 {
            return Err(bad("model.d", "must be positive"));
        }
        if let Some(&h) = m.heads.iter().find(|&&h| h == 0 || m.d % h != 0) {
            return Err(bad("model.heads", &format!("{h} heads do not divide d = {}", m.d)));
        }
        if m.d_fourier % 2 != 0 {
            return Err(bad("model.d_fourier", "must be even"));
        }
        if !(1..=4).contains(&m.num_scales) {
            return Err(bad("model.num_scales", "must be in 1..=4"));
        }
        if m.blocks == 0 {
            return Err(bad("model.blocks", "must be at least 1"));
        }
        if m.dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(bad("model.dropout", "rates must lie in [0, 1)"));
        }
        if self.cluster.num_prototypes < 2 {
            return Err(bad("cluster.K", "need at least two prototypes"));
        }
        if self.cluster.tau <= 0.0 || self.cluster.eps <= 0.0 {
            return Err(bad("cluster.tau", "tau and eps must be positive"));
        }
        for key in ["aug.flip_p", "aug.hmove_p", "aug.vmove_p", "aug.dropout_p"] {
            let p: f64 = self.get(key).and_then(|s| s.parse().ok()).unwrap_or(-1.0);
            if !(0.0..=1.0).contains(&p) {
                return Err(bad(key, "probability must lie in [0, 1]"));
            }
        }
        if self.aug.move_bound < 0 || self.aug.perturb_px < 0.0 {
            return Err(bad("aug.move_bound", "bounds must be non-negative"));
        }
        if self.train.batch_size == 0 {
            return Err(bad("train.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Expands a possibly unqualified key to its full name.
pub fn resolve_key(key: &str) -> Result<&'static str, ConfigError> {
    if let Some((k, _)) = KEYS.iter().find(|(k, _)| *k == key) {
        return Ok(k);
    }
    let matches: Vec<&'static str> = KEYS
        .iter()
        .map(|(k, _)| *k)
        .filter(|k| k.split_once('.').is_some_and(|(_, rest)| rest == key))
        .collect();
    match matches.as_slice() {
        [one] => Ok(one),
        _ => Err(ConfigError::UnknownKey(key.into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let c = TrainConfig::desk();
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn missing_key_is_named() {
        let text: String = TrainConfig::desk()
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("cluster.tau"))
            .map(|l| format!("{l}\n"))
            .collect();
        match TrainConfig::from_text(&text) {
            Err(ConfigError::MissingKey(k)) => assert_eq!(k, "cluster.tau"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let text = TrainConfig::desk().to_text() + "model.depth = 3\n";
        assert!(matches!(TrainConfig::from_text(&text), Err(ConfigError::UnknownKey(_))));
    }

    #[test]
    fn short_override_resolves() {
        let mut c = TrainConfig::desk();
        c.apply_override("num_scales=1").unwrap();
        assert_eq!(c.model.num_scales, 1);
        c.apply_override("cluster.K=8").unwrap();
        assert_eq!(c.cluster.num_prototypes, 8);
        assert!(c.apply_override("num_scales=5").is_err());
        assert!(c.apply_override("nope=1").is_err());
    }

    #[test]
    fn desk_preset_values() {
        let c = TrainConfig::desk();
        assert_eq!((c.model.d, c.model.d_mlp, c.model.heads), (32, 128, [2, 4, 2, 2]));
        assert_eq!((c.train.batch_size, c.cluster.num_prototypes, c.train.epochs), (32, 32, 30));
        assert_eq!(c.train.lr_at(39), 5e-4);
        assert_eq!(c.train.lr_at(40), 1e-4);
        assert_eq!((c.model.dropout, c.cluster.tau), ([0.0; 4], 0.5));
        let p = TrainConfig::paper();
        assert_eq!((p.model.dropout, p.cluster.tau), ([0.5, 0.2, 0.2, 0.0], 0.1));
    }
}
