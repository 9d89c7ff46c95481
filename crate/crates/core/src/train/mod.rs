//! Optimization loop, evaluation and metrics.

mod baseline;
mod checkpoint;
mod gradcheck;
mod loss;
mod optim;

pub use baseline::{LinearBaseline, LinearBaselineConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{finite_difference_check, grad_check, relative_error, sample_coord, CoordCheck, GradCheckReport, REL_FLOOR};
pub use loss::{cross_entropy, total_loss, BatchLoss, LossTerms};
pub use optim::Adam;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_clip, augment_features};
use crate::autograd::{Mat, Tape};
use crate::config::TrainConfig;
use crate::dataset::{ClipFeatures, FeatureStats, Manifest, RawClip};
use crate::error::{Error, ModelError};
use crate::model::Model;
use crate::mstransformer::Mode;
use crate::params::Bound;

/// 64-bit FNV-1a, used to derive per-clip random streams from clip ids.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent deterministic stream for `(seed, purpose, a, b)`.
pub fn stream(seed: u64, purpose: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut s = seed ^ fnv1a(purpose.as_bytes());
    for x in [a, b] {
        s = s.rotate_left(23) ^ x.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        s = fnv1a(&s.to_le_bytes());
    }
    ChaCha8Rng::seed_from_u64(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Batch-averaged loss terms.
    pub loss: LossTerms,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,loss_total,loss_aux,loss_last,loss_person,loss_cluster,train_acc,val_acc";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        let val = self.val_acc.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, l.total, l.aux, l.last, l.person, l.cluster, self.train_acc, val
        )
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in history {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    /// `None` when the model has no person scale or no person is labelled.
    pub person_accuracy: Option<f64>,
    pub num_clips: usize,
}

/// Group predictions and person-action accuracy without augmentation or
/// dropout.
pub fn evaluate(model: &Model, clips: &[RawClip], manifest: &Manifest, stats: &FeatureStats, seed: u64) -> Result<EvalReport, ModelError> {
    let c = model.dims.group_classes;
    let mut confusion = vec![vec![0usize; c]; c];
    let (mut person_hits, mut person_total) = (0usize, 0usize);
    for clip in clips {
        let f = ClipFeatures::build(clip, manifest, stats);
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &model.store, false);
        let out = model.forward_clip(&mut tape, &p, &f, &mut Mode::eval(), seed)?;
        let logits = model.group_logits(&mut tape, &p, out.final_cls());
        confusion[f.group_label][argmax(tape.value(logits).row(0).iter().copied())] += 1;
        if let Some(persons) = out.persons {
            let pl = model.person_logits(&mut tape, &p, persons);
            for (pp, lab) in f.person_labels.iter().enumerate() {
                if let (true, Some(y)) = (f.person_present[pp], lab) {
                    person_total += 1;
                    if argmax(tape.value(pl).row(pp).iter().copied()) == *y {
                        person_hits += 1;
                    }
                }
            }
        }
    }
    let hits: usize = (0..c).map(|i| confusion[i][i]).sum();
    Ok(EvalReport {
        accuracy: if clips.is_empty() { 0.0 } else { hits as f64 / clips.len() as f64 },
        confusion,
        person_accuracy: (person_total > 0).then(|| person_hits as f64 / person_total as f64),
        num_clips: clips.len(),
    })
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub terms: LossTerms,
    pub correct: usize,
    pub batch: usize,
}

/// Model, optimizer and bookkeeping for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub manifest: Manifest,
    pub model: Model,
    pub optim: Adam,
    pub stats: FeatureStats,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl Trainer {
    /// Fits feature statistics on `train` and initializes the model.
    pub fn new(cfg: TrainConfig, manifest: Manifest, train: &[RawClip]) -> Result<Self, Error> {
        cfg.validate()?;
        let frames = train
            .first()
            .map(|c| c.num_frames)
            .ok_or_else(|| ModelError::Config("training set is empty".into()))?;
        let stats = FeatureStats::fit(train);
        let model = Model::new(&cfg.model, &manifest, frames, cfg.cluster.num_prototypes, cfg.train.seed)?;
        let optim = Adam::new(&model.store);
        Ok(Trainer {
            cfg,
            manifest,
            model,
            optim,
            stats,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Augmented features of one training clip.
    pub fn training_features(&self, clip: &RawClip, epoch: usize) -> ClipFeatures {
        let mut rng = stream(self.cfg.train.seed, "augment", epoch as u64, fnv1a(clip.clip_id.as_bytes()));
        let aug = augment_clip(clip, &self.manifest, &self.cfg.aug, &mut rng);
        let f = ClipFeatures::build(&aug, &self.manifest, &self.stats);
        augment_features(f, &self.cfg.aug, &mut rng)
    }

    /// Forward, backward and one optimizer step on prepared features.
    pub fn step(&mut self, feats: &[ClipFeatures], lr: f64, dropout_rng: &mut ChaCha8Rng) -> Result<StepResult, ModelError> {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &self.model.store, true);
        let mut outputs = Vec::with_capacity(feats.len());
        {
            let mut mode = Mode::train(dropout_rng);
            for f in feats {
                outputs.push(self.model.forward_clip(&mut tape, &p, f, &mut mode, self.cfg.train.seed)?);
            }
        }
        let refs: Vec<&ClipFeatures> = feats.iter().collect();
        let loss = total_loss(&mut tape, &p, &self.model, &outputs, &refs, &self.cfg, None);
        let grads = tape.backward(loss.total);
        let mut per_param: Vec<Option<Mat>> = vec![None; self.model.store.len()];
        for (id, g) in grads.param_grads() {
            per_param[id.0] = Some(g.clone());
        }
        self.optim.update(&mut self.model.store, &per_param, lr, self.cfg.train.weight_decay);
        let correct = feats
            .iter()
            .enumerate()
            .filter(|(i, f)| argmax(loss.final_logits.row(*i).iter().copied()) == f.group_label)
            .count();
        Ok(StepResult {
            terms: loss.terms,
            correct,
            batch: feats.len(),
        })
    }

    /// One pass over `train` in a seeded shuffled order.
    pub fn train_epoch(&mut self, train: &[RawClip], val: Option<&[RawClip]>) -> Result<EpochMetrics, ModelError> {
        let epoch = self.epoch;
        let seed = self.cfg.train.seed;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(seed, "shuffle", epoch as u64, 0));
        let lr = self.cfg.train.lr_at(epoch);
        let mut sum = LossTerms::default();
        let (mut correct, mut seen, mut batches) = (0, 0, 0);
        for (b, chunk) in order.chunks(self.cfg.train.batch_size).enumerate() {
            let feats: Vec<ClipFeatures> = chunk.iter().map(|&i| self.training_features(&train[i], epoch)).collect();
            let mut drop_rng = stream(seed, "dropout", epoch as u64, b as u64);
            let r = self.step(&feats, lr, &mut drop_rng)?;
            sum.add_scaled(&r.terms, 1.0);
            correct += r.correct;
            seen += r.batch;
            batches += 1;
        }
        let mut loss = LossTerms::default();
        loss.add_scaled(&sum, 1.0 / batches.max(1) as f64);
        let val_acc = match val {
            Some(v) => Some(evaluate(&self.model, v, &self.manifest, &self.stats, seed)?.accuracy),
            None => None,
        };
        let m = EpochMetrics {
            epoch,
            loss,
            train_acc: correct as f64 / seen.max(1) as f64,
            val_acc,
        };
        log::info!("{}", m.csv_row());
        self.history.push(m.clone());
        self.epoch += 1;
        Ok(m)
    }

    /// Runs the remaining epochs of the configured schedule.
    pub fn fit(&mut self, train: &[RawClip], val: Option<&[RawClip]>) -> Result<(), ModelError> {
        while self.epoch < self.cfg.train.epochs {
            self.train_epoch(train, val)?;
        }
        Ok(())
    }

    pub fn evaluate(&self, clips: &[RawClip]) -> Result<EvalReport, ModelError> {
        evaluate(&self.model, clips, &self.manifest, &self.stats, self.cfg.train.seed)
    }
}
