//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use composer_core::autograd::{Mat, Tape};
use composer_core::cluster::sinkhorn_codes;
use composer_core::config::TrainConfig;
use composer_core::dataset::{ClipFeatures, FeatureStats, Manifest, RawClip};
use composer_core::model::Model;
use composer_core::mstransformer::Mode;
use composer_core::params::Bound;
use composer_core::synth::{generate_dataset, SynthConfig};
use composer_core::train::{total_loss, LossTerms};

pub fn synth(n_clips: usize) -> (Vec<RawClip>, Manifest) {
    generate_dataset(&SynthConfig {
        n_clips,
        ..Default::default()
    })
    .unwrap()
}

pub fn features(clips: &[RawClip], m: &Manifest) -> Vec<ClipFeatures> {
    let stats = FeatureStats::fit(clips);
    clips.iter().map(|c| ClipFeatures::build(c, m, &stats)).collect()
}

/// Mean of `−log softmax(row)[y]`, written out with plain arithmetic.
pub fn mean_ce(logits: &Mat, labels: &[usize]) -> f64 {
    let mut s = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        s += lse - row[y];
    }
    s / labels.len() as f64
}

fn head(model: &Model, w: composer_core::params::ParamId, b: composer_core::params::ParamId, x: &Mat) -> Mat {
    x.dot(model.store.get(w)) + model.store.get(b)
}

fn unit_rows(x: &Mat) -> Mat {
    let mut u = x.clone();
    for mut r in u.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    u
}

/// `−Σ q ⊙ log softmax(u Cᵀ / τ)`
fn code_ce(u: &Mat, c: &Mat, q: &Mat, tau: f64) -> f64 {
    let scores = u.dot(&c.t()) / tau;
    let mut s = 0.0;
    for (row, qrow) in scores.rows().into_iter().zip(q.rows()) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (v, qv) in row.iter().zip(qrow.iter()) {
            s -= qv * (v - lse);
        }
    }
    s
}

/// Loss terms recomputed from the eval-mode clip representations with plain
/// matrix arithmetic, following the ablation formulas directly.
pub fn hand_loss(model: &Model, feats: &[ClipFeatures], cfg: &TrainConfig) -> LossTerms {
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, &model.store, false);
    let outs: Vec<_> = feats
        .iter()
        .map(|f| model.forward_clip(&mut tape, &p, f, &mut Mode::eval(), cfg.train.seed).unwrap())
        .collect();
    let labels: Vec<usize> = feats.iter().map(|f| f.group_label).collect();
    let blocks = outs[0].cls.len();
    let scales = outs[0].cls[0].len();
    let stack = |m: usize, s: usize| -> Mat {
        let rows: Vec<f64> = outs.iter().flat_map(|o| tape.value(o.cls[m][s]).iter().copied().collect::<Vec<_>>()).collect();
        Mat::from_shape_vec((outs.len(), rows.len() / outs.len()), rows).unwrap()
    };
    let gh = model.group_head;
    let ce_at = |m: usize, s: usize| mean_ce(&head(model, gh.w, gh.b, &stack(m, s)), &labels);

    let aux: f64 = if cfg.train.aux {
        (0..blocks - 1).flat_map(|m| (0..scales).map(move |s| (m, s))).map(|(m, s)| ce_at(m, s)).sum()
    } else {
        0.0
    };
    let last: f64 = if cfg.train.aux {
        (0..scales).map(|s| ce_at(blocks - 1, s)).sum()
    } else {
        ce_at(blocks - 1, scales - 1)
    };

    let mut person_rows = Vec::new();
    let mut person_labels = Vec::new();
    for (o, f) in outs.iter().zip(feats) {
        let persons = tape.value(o.persons.unwrap());
        for (i, lab) in f.person_labels.iter().enumerate() {
            if let (true, Some(y)) = (f.person_present[i], lab) {
                person_rows.extend(persons.row(i).iter().copied());
                person_labels.push(*y);
            }
        }
    }
    let pm = Mat::from_shape_vec((person_labels.len(), model.cfg.d), person_rows).unwrap();
    let ph = model.person_head;
    let person = mean_ce(&head(model, ph.w, ph.b, &pm), &person_labels);

    let cluster = if cfg.cluster.enabled {
        let c = model.store.get(model.prototypes);
        let units: Vec<Mat> = (0..scales).map(|s| unit_rows(&stack(blocks - 1, s))).collect();
        let codes: Vec<Mat> = units
            .iter()
            .map(|u| sinkhorn_codes(u, c, cfg.cluster.eps, cfg.cluster.sinkhorn_iters).q)
            .collect();
        let mut sum = 0.0;
        for w in 0..scales {
            for s in w + 1..scales {
                sum += code_ce(&units[w], c, &codes[s], cfg.cluster.tau) + code_ce(&units[s], c, &codes[w], cfg.cluster.tau);
            }
        }
        sum / feats.len() as f64
    } else {
        0.0
    };
    LossTerms {
        total: aux + cfg.train.lambda * (last + person + cluster),
        aux,
        last,
        person,
        cluster,
    }
}

/// Loss terms reported by the implementation for the same eval-mode batch.
pub fn reported_loss(model: &Model, feats: &[ClipFeatures], cfg: &TrainConfig) -> LossTerms {
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, &model.store, false);
    let outs: Vec<_> = feats
        .iter()
        .map(|f| model.forward_clip(&mut tape, &p, f, &mut Mode::eval(), cfg.train.seed).unwrap())
        .collect();
    let refs: Vec<&ClipFeatures> = feats.iter().collect();
    total_loss(&mut tape, &p, model, &outs, &refs, cfg, None).terms
}

pub fn max_term_diff(a: &LossTerms, b: &LossTerms) -> f64 {
    [
        a.total - b.total,
        a.aux - b.aux,
        a.last - b.last,
        a.person - b.person,
        a.cluster - b.cluster,
    ]
    .iter()
    .fold(0.0f64, |m, d| m.max(d.abs()))
}
