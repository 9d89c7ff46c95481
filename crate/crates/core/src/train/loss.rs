//! Classifier heads and the multitask objective.

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::cluster::cluster_loss;
use crate::config::TrainConfig;
use crate::dataset::ClipFeatures;
use crate::model::{ClipOutput, Model};
use crate::params::Bound;

/// Values of every term of one batch objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    /// Σ over early blocks of their per-scale group cross-entropies.
    pub aux: f64,
    pub last: f64,
    pub person: f64,
    pub cluster: f64,
}

impl LossTerms {
    pub fn add_scaled(&mut self, o: &LossTerms, k: f64) {
        self.total += k * o.total;
        self.aux += k * o.aux;
        self.last += k * o.last;
        self.person += k * o.person;
        self.cluster += k * o.cluster;
    }
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub terms: LossTerms,
    /// Codes per scale of the last block (empty without clustering).
    pub codes: Vec<Mat>,
    /// `B x C` logits of the evaluation representation.
    pub final_logits: Mat,
    /// True when the person term was skipped for lack of labelled persons.
    pub person_unlabelled: bool,
}

/// Mean cross-entropy of logit rows against class indices.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    let (n, c) = tape.shape(logits);
    assert_eq!(n, labels.len());
    let mut target = Mat::zeros((n, c));
    for (i, &y) in labels.iter().enumerate() {
        target[[i, y]] = -1.0 / n as f64;
    }
    let lp = tape.log_softmax(logits);
    let w = tape.mul_const(lp, target);
    tape.sum(w)
}

fn add_opt(tape: &mut Tape, acc: Option<Var>, x: Var) -> Option<Var> {
    Some(match acc {
        Some(a) => tape.add(a, x),
        None => x,
    })
}

/// `Σ_{m<M} aux(m) + λ (last + person + cluster)`.
///
/// With auxiliary prediction off only the final scale of the last block
/// contributes to `last`; otherwise every scale of the last block does.
/// `frozen` replaces the Sinkhorn codes (used by the gradient oracle).
pub fn total_loss(
    tape: &mut Tape,
    p: &Bound,
    model: &Model,
    outputs: &[ClipOutput],
    feats: &[&ClipFeatures],
    cfg: &TrainConfig,
    frozen: Option<&[Mat]>,
) -> BatchLoss {
    let labels: Vec<usize> = feats.iter().map(|f| f.group_label).collect();
    let num_blocks = outputs[0].cls.len();
    let num_scales = outputs[0].cls[0].len();

    let scale_ce = |tape: &mut Tape, m: usize, s: usize| -> (Var, Var) {
        let rows: Vec<Var> = outputs.iter().map(|o| o.cls[m][s]).collect();
        let x = tape.concat_rows(&rows);
        let logits = model.group_logits(tape, p, x);
        (cross_entropy(tape, logits, &labels), logits)
    };

    let mut aux = None;
    if cfg.train.aux {
        for m in 0..num_blocks - 1 {
            for s in 0..num_scales {
                let (ce, _) = scale_ce(tape, m, s);
                aux = add_opt(tape, aux, ce);
            }
        }
    }
    let mut last = None;
    let mut final_logits = None;
    let first = if cfg.train.aux { 0 } else { num_scales - 1 };
    for s in first..num_scales {
        let (ce, logits) = scale_ce(tape, num_blocks - 1, s);
        last = add_opt(tape, last, ce);
        if s == num_scales - 1 {
            final_logits = Some(tape.value(logits).clone());
        }
    }
    let last = last.expect("at least one scale");

    let mut person_unlabelled = false;
    let person = match outputs[0].persons {
        Some(_) => {
            let all: Vec<Var> = outputs.iter().map(|o| o.persons.unwrap()).collect();
            let x = tape.concat_rows(&all);
            let np = tape.shape(all[0]).0;
            let mut idx = Vec::new();
            let mut ys = Vec::new();
            for (b, f) in feats.iter().enumerate() {
                for pp in 0..np {
                    if let (true, Some(y)) = (f.person_present[pp], f.person_labels[pp]) {
                        idx.push(b * np + pp);
                        ys.push(y);
                    }
                }
            }
            if idx.is_empty() {
                person_unlabelled = true;
                log::warn!("no labelled persons in batch; person loss is 0");
                None
            } else {
                let sel = tape.gather_rows(x, &idx);
                let logits = model.person_logits(tape, p, sel);
                Some(cross_entropy(tape, logits, &ys))
            }
        }
        None => None,
    };

    let mut codes = Vec::new();
    let cluster = if cfg.cluster.enabled && num_scales >= 2 && model.cfg.multiscale {
        let reprs: Vec<Var> = (0..num_scales)
            .map(|s| {
                let rows: Vec<Var> = outputs.iter().map(|o| o.cls[num_blocks - 1][s]).collect();
                tape.concat_rows(&rows)
            })
            .collect();
        let (l, q) = cluster_loss(tape, &reprs, p.var(model.prototypes), &cfg.cluster, frozen);
        codes = q;
        Some(l)
    } else {
        None
    };

    let mut weighted = last;
    if let Some(x) = person {
        weighted = tape.add(weighted, x);
    }
    if let Some(x) = cluster {
        weighted = tape.add(weighted, x);
    }
    let weighted = tape.scale(weighted, cfg.train.lambda);
    let total = match aux {
        Some(a) => tape.add(a, weighted),
        None => weighted,
    };

    let val = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    let terms = LossTerms {
        total: tape.scalar(total),
        aux: val(tape, aux),
        last: tape.scalar(last),
        person: val(tape, person),
        cluster: val(tape, cluster),
    };
    BatchLoss {
        total,
        terms,
        codes,
        final_logits: final_logits.expect("final logits"),
        person_unlabelled,
    }
}
