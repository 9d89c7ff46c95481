//! Central-difference verification of analytic gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape};
use crate::config::TrainConfig;
use crate::dataset::ClipFeatures;
use crate::model::Model;
use crate::mstransformer::Mode;
use crate::params::{Bound, ParamId, ParamStore};

use super::loss::total_loss;
use super::stream;

/// Below this magnitude the relative error is measured against the floor
/// instead, so that coordinates with vanishing gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub max_rel_err: f64,
    /// Sorted by decreasing relative error.
    pub coords: Vec<CoordCheck>,
    /// Sampled coordinates left out because `θ ± step` changed the sign of
    /// some ReLU input, where the function is not differentiable.
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn worst(&self, n: usize) -> &[CoordCheck] {
        &self.coords[..n.min(self.coords.len())]
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    fn finish(step: f64, mut coords: Vec<CoordCheck>, kinks: usize) -> Self {
        coords.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
        GradCheckReport {
            step,
            max_rel_err: coords.first().map_or(0.0, |c| c.rel_err),
            coords,
            kinks,
        }
    }
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Draws one parameter coordinate uniformly over all scalar entries.
pub fn sample_coord<R: Rng>(store: &ParamStore, rng: &mut R) -> (ParamId, usize, usize) {
    let total: usize = store.ids().map(|id| store.get(id).len()).sum();
    let mut k = rng.random_range(0..total);
    for id in store.ids() {
        let m = store.get(id);
        if k < m.len() {
            return (id, k / m.ncols(), k % m.ncols());
        }
        k -= m.len();
    }
    unreachable!("index within total")
}

/// Compares `analytic` against `(f(θ + h) − f(θ − h)) / 2h` at each coordinate.
///
/// `f` returns the loss and a signature of its piecewise-linear regime (see
/// [`Tape::relu_signature`]); coordinates whose perturbations leave the
/// regime of `θ` are counted in `kinks` instead of being compared.
pub fn finite_difference_check(
    store: &ParamStore,
    analytic: &[Option<Mat>],
    coords: &[(ParamId, usize, usize)],
    step: f64,
    mut f: impl FnMut(&ParamStore) -> (f64, u64),
) -> GradCheckReport {
    let (_, base) = f(store);
    let mut work = store.clone();
    let mut out = Vec::with_capacity(coords.len());
    let mut kinks = 0;
    for &(id, r, c) in coords {
        match probe(&mut work, analytic, (id, r, c), step, base, &mut f) {
            Some(check) => out.push(check),
            None => kinks += 1,
        }
    }
    GradCheckReport::finish(step, out, kinks)
}

fn probe(
    work: &mut ParamStore,
    analytic: &[Option<Mat>],
    (id, r, c): (ParamId, usize, usize),
    step: f64,
    base: u64,
    f: &mut impl FnMut(&ParamStore) -> (f64, u64),
) -> Option<CoordCheck> {
    let orig = work.get(id)[[r, c]];
    work.get_mut(id)[[r, c]] = orig + step;
    let (plus, sp) = f(work);
    work.get_mut(id)[[r, c]] = orig - step;
    let (minus, sm) = f(work);
    work.get_mut(id)[[r, c]] = orig;
    if sp != base || sm != base {
        return None;
    }
    let numeric = (plus - minus) / (2.0 * step);
    let a = analytic[id.0].as_ref().map_or(0.0, |g| g[[r, c]]);
    Some(CoordCheck {
        param: work.name(id).to_string(),
        row: r,
        col: c,
        analytic: a,
        numeric,
        rel_err: relative_error(a, numeric),
    })
}

/// Checks the gradient of the full training objective on `feats` at
/// `n_coords` coordinates where the objective is smooth.
///
/// Dropout masks are replayed from one seed for every evaluation and the
/// Sinkhorn codes are frozen at their unperturbed values, matching the
/// stop-gradient the analytic pass applies. Coordinates are drawn until
/// `n_coords` smooth ones are found or `20 n_coords` have been tried.
pub fn grad_check(model: &Model, feats: &[ClipFeatures], cfg: &TrainConfig, n_coords: usize, step: f64, seed: u64) -> GradCheckReport {
    let refs: Vec<&ClipFeatures> = feats.iter().collect();
    let run = |store: &ParamStore, trainable: bool, frozen: Option<&[Mat]>| {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, store, trainable);
        let mut rng = stream(seed, "gradcheck-dropout", 0, 0);
        let mut mode = Mode::train(&mut rng);
        let outs: Vec<_> = feats
            .iter()
            .map(|f| model.forward_clip(&mut tape, &p, f, &mut mode, cfg.train.seed).expect("forward"))
            .collect();
        let loss = total_loss(&mut tape, &p, model, &outs, &refs, cfg, frozen);
        (tape, loss)
    };
    let (tape, loss) = run(&model.store, true, None);
    let base = tape.relu_signature();
    let grads = tape.backward(loss.total);
    let mut analytic: Vec<Option<Mat>> = vec![None; model.store.len()];
    for (id, g) in grads.param_grads() {
        analytic[id.0] = Some(g.clone());
    }
    let codes = loss.codes.clone();
    let mut f = |s: &ParamStore| {
        let (t, l) = run(s, false, Some(&codes));
        (l.terms.total, t.relu_signature())
    };
    let mut rng = stream(seed, "gradcheck-coords", 0, 0);
    let mut work = model.store.clone();
    let mut out = Vec::with_capacity(n_coords);
    let mut kinks = 0;
    let mut tries = 0;
    while out.len() < n_coords && tries < 20 * n_coords {
        tries += 1;
        let coord = sample_coord(&model.store, &mut rng);
        match probe(&mut work, &analytic, coord, step, base, &mut f) {
            Some(check) => out.push(check),
            None => kinks += 1,
        }
    }
    GradCheckReport::finish(step, out, kinks)
}
