//! Prototype clustering with swapped prediction across scales.
//!
//! Codes come from a few rounds of Sinkhorn-Knopp on the similarity between
//! projected clip representations and the prototype rows. They are computed
//! from plain values and enter the loss as constants; gradients reach the
//! representations and prototypes only through the softmax scores.

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub num_prototypes: usize,
    pub tau: f64,
    pub eps: f64,
    pub sinkhorn_iters: usize,
    pub enabled: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            num_prototypes: 1000,
            tau: 0.1,
            eps: 0.05,
            sinkhorn_iters: 3,
            enabled: true,
        }
    }
}

/// `v / ‖v‖₂`. The zero vector is returned unchanged with a warning.
pub fn project_unit_sphere(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        log::warn!("projecting a zero vector onto the unit sphere; leaving it at zero");
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

/// Output of [`sinkhorn_codes`].
#[derive(Debug, Clone, PartialEq)]
pub struct Codes {
    /// `B x K`; each row is a distribution (already rescaled by `B`).
    pub q: Mat,
    /// L1 distance of the column marginal from `1/K` after each round,
    /// measured before that round's row normalization restores the rows.
    pub violation: Vec<f64>,
}

/// Transport plan before the final rescale: rows sum to `1/B`, columns to
/// `1/K` up to solver convergence.
pub fn sinkhorn_plan(v: &Mat, c: &Mat, eps: f64, iters: usize) -> (Mat, Vec<f64>) {
    let b = v.nrows();
    let k = c.nrows();
    assert!(b >= 1 && k >= 2 && eps > 0.0, "sinkhorn: need B >= 1, K >= 2, eps > 0");
    let mut q = v.dot(&c.t()) / eps;
    for mut row in q.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
    }
    let total = q.sum();
    q /= total;

    let (row_mass, col_mass) = (1.0 / b as f64, 1.0 / k as f64);
    let mut violation = Vec::with_capacity(iters);
    for _ in 0..iters {
        for mut col in q.columns_mut() {
            let s = col.sum();
            if s > 0.0 {
                col *= col_mass / s;
            }
        }
        for mut row in q.rows_mut() {
            let s = row.sum();
            if s > 0.0 {
                row *= row_mass / s;
            }
        }
        let v: f64 = q.columns().into_iter().map(|c| (c.sum() - col_mass).abs()).sum();
        violation.push(v);
    }
    (q, violation)
}

/// Equipartitioned soft assignments of `B` unit rows to `K` prototypes.
pub fn sinkhorn_codes(v: &Mat, c: &Mat, eps: f64, iters: usize) -> Codes {
    let (mut q, violation) = sinkhorn_plan(v, c, eps, iters);
    q *= v.nrows() as f64;
    Codes { q, violation }
}

/// Cross-entropy between code rows `q` and `softmax(v Cᵀ / τ)`, summed over
/// rows. `v` and `c` are tape nodes; `q` is a constant.
pub fn code_cross_entropy(tape: &mut Tape, v: Var, c: Var, q: &Mat, tau: f64) -> Var {
    let scores = tape.matmul_nt(v, c);
    let scores = tape.scale(scores, 1.0 / tau);
    let logp = tape.log_softmax(scores);
    let weighted = tape.mul_const(logp, q.clone());
    let total = tape.sum(weighted);
    tape.scale(total, -1.0)
}

/// `ℓ(v_w, q_s) + ℓ(v_s, q_w)`, summed over batch rows.
pub fn swapped_pair_loss(tape: &mut Tape, v_w: Var, v_s: Var, q_w: &Mat, q_s: &Mat, c: Var, tau: f64) -> Var {
    let a = code_cross_entropy(tape, v_w, c, q_s, tau);
    let b = code_cross_entropy(tape, v_s, c, q_w, tau);
    tape.add(a, b)
}

/// Per-scale codes for a batch of raw (unprojected) representations.
pub fn batch_codes(reprs: &[Mat], prototypes: &Mat, cfg: &ClusterConfig) -> Vec<Mat> {
    reprs
        .iter()
        .map(|r| {
            let mut u = r.clone();
            for mut row in u.rows_mut() {
                let n = row.dot(&row).sqrt();
                if n > 0.0 {
                    row /= n;
                }
            }
            sinkhorn_codes(&u, prototypes, cfg.eps, cfg.sinkhorn_iters).q
        })
        .collect()
}

/// Swapped-prediction loss summed over every unordered pair of scales and
/// averaged over the batch.
///
/// `reprs` holds one `B x d` node per scale. Codes are recomputed from the
/// node values unless `frozen` supplies them.
pub fn cluster_loss(
    tape: &mut Tape,
    reprs: &[Var],
    prototypes: Var,
    cfg: &ClusterConfig,
    frozen: Option<&[Mat]>,
) -> (Var, Vec<Mat>) {
    let b = tape.shape(reprs[0]).0;
    if b == 1 {
        log::warn!("cluster loss on a batch of one: equipartition is degenerate");
    }
    let units: Vec<Var> = reprs.iter().map(|&r| tape.normalize_rows(r)).collect();
    let codes: Vec<Mat> = match frozen {
        Some(q) => q.to_vec(),
        None => units
            .iter()
            .map(|&u| sinkhorn_codes(tape.value(u), tape.value(prototypes), cfg.eps, cfg.sinkhorn_iters).q)
            .collect(),
    };
    let mut total: Option<Var> = None;
    for w in 0..units.len() {
        for s in w + 1..units.len() {
            let l = swapped_pair_loss(tape, units[w], units[s], &codes[w], &codes[s], prototypes, cfg.tau);
            total = Some(match total {
                Some(t) => tape.add(t, l),
                None => l,
            });
        }
    }
    let total = match total {
        Some(t) => tape.scale(t, 1.0 / b as f64),
        None => tape.constant(Mat::zeros((1, 1))),
    };
    (total, codes)
}

/// Rescales every prototype row to unit length.
pub fn normalize_prototypes(c: &mut Mat) {
    for mut row in c.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
}
