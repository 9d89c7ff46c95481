//! Transformer encoder and the multiscale block wiring.
//!
//! Within a block the keypoint encoder runs first. Its refined keypoints are
//! folded per person and added to the block's input person tokens to form
//! the person scale; the refined persons in turn feed both the interaction
//! and the group scale. `[CLS]` and object rows move from each encoder's
//! output straight into the next scale's input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Mat, Tape, Var};
use crate::config::ModelConfig;
use crate::dataset::GroupAssignment;
use crate::error::ModelError;
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tokenize::{aggregate_groups, pair_tokens, Dims, Ffn, ScaleSequences, TokenTag};

/// `softmax(Q Kᵀ / √d_k) V` on plain matrices; returns the output and the
/// attention matrix.
pub fn scaled_dot_attention(q: &Mat, k: &Mat, v: &Mat) -> (Mat, Mat) {
    let dk = q.ncols() as f64;
    let a = softmax_rows(&(q.dot(&k.t()) / dk.sqrt()));
    (a.dot(v), a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

impl EncoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, d_mlp: usize) -> Self {
        let mut lin = |suffix: &str, i: usize, o: usize, rng: &mut R| {
            let w = store.add(format!("{name}.{suffix}.w"), ParamKind::Weight, ParamStore::init_linear(rng, i, o));
            let b = store.add(format!("{name}.{suffix}.b"), ParamKind::Bias, Mat::zeros((1, o)));
            (w, b)
        };
        let (wq, bq) = lin("q", d, d, rng);
        let (wk, bk) = lin("k", d, d, rng);
        let (wv, bv) = lin("v", d, d, rng);
        let (wo, bo) = lin("o", d, d, rng);
        let (w1, b1) = lin("mlp1", d, d_mlp, rng);
        let (w2, b2) = lin("mlp2", d_mlp, d, rng);
        let mut norm = |suffix: &str, fill: f64| store.add(format!("{name}.{suffix}"), ParamKind::Norm, Mat::from_elem((1, d), fill));
        EncoderParams {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            w1,
            b1,
            w2,
            b2,
            ln1_gamma: norm("ln1.gamma", 1.0),
            ln1_beta: norm("ln1.beta", 0.0),
            ln2_gamma: norm("ln2.gamma", 1.0),
            ln2_beta: norm("ln2.beta", 0.0),
        }
    }
}

/// Dropout masks are drawn only when an rng is supplied.
pub struct Mode<'a> {
    pub rng: Option<&'a mut dyn rand::RngCore>,
}

impl<'a> Mode<'a> {
    pub fn eval() -> Self {
        Mode { rng: None }
    }

    pub fn train(rng: &'a mut dyn rand::RngCore) -> Self {
        Mode { rng: Some(rng) }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: &mut Mode) -> Var {
    let Some(rng) = mode.rng.as_mut() else { return x };
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let mask = Mat::from_shape_fn(tape.shape(x), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
    tape.mul_const(x, mask)
}

fn layer_norm(tape: &mut Tape, p: &Bound, x: Var, gamma: ParamId, beta: ParamId) -> Var {
    let n = tape.layer_norm(x);
    let s = tape.mul_row(n, p.var(gamma));
    tape.add_row(s, p.var(beta))
}

/// MSA, Add & Dropout & LN, MLP, Add & Dropout & LN. Returns the output and
/// the head-averaged attention matrix.
pub fn encoder_forward(
    tape: &mut Tape,
    p: &Bound,
    x: Var,
    enc: &EncoderParams,
    heads: usize,
    rate: f64,
    mode: &mut Mode,
) -> (Var, Mat) {
    let (n, d) = tape.shape(x);
    assert_eq!(d % heads, 0, "d must be divisible by the head count");
    let dk = d / heads;
    let q = tape.affine(x, p.var(enc.wq), p.var(enc.bq));
    let k = tape.affine(x, p.var(enc.wk), p.var(enc.bk));
    let v = tape.affine(x, p.var(enc.wv), p.var(enc.bv));
    let mut outs = Vec::with_capacity(heads);
    let mut attn = Mat::zeros((n, n));
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk);
        let kh = tape.slice_cols(k, h * dk, dk);
        let vh = tape.slice_cols(v, h * dk, dk);
        let s = tape.matmul_nt(qh, kh);
        let s = tape.scale(s, 1.0 / (dk as f64).sqrt());
        let a = tape.softmax(s);
        attn += tape.value(a);
        outs.push(tape.matmul(a, vh));
    }
    attn /= heads as f64;
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    let msa = tape.affine(cat, p.var(enc.wo), p.var(enc.bo));

    let y = tape.add(x, msa);
    let y = dropout(tape, y, rate, mode);
    let y = layer_norm(tape, p, y, enc.ln1_gamma, enc.ln1_beta);

    let h = tape.affine(y, p.var(enc.w1), p.var(enc.b1));
    let h = tape.relu(h);
    let mlp = tape.affine(h, p.var(enc.w2), p.var(enc.b2));
    let z = tape.add(y, mlp);
    let z = dropout(tape, z, rate, mode);
    (layer_norm(tape, p, z, enc.ln2_gamma, enc.ln2_beta), attn)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    /// One encoder per active scale.
    pub encoders: Vec<EncoderParams>,
    /// Refined keypoints of a person (concatenated) to a person token.
    pub keypoint_to_person: Option<Ffn>,
    /// Ordered pair of refined persons to an interaction token.
    pub person_to_interaction: Option<Ffn>,
    /// Concatenated members of a heuristic group to a group token.
    pub person_to_group: Option<Ffn>,
}

impl BlockParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &ModelConfig, dims: &Dims) -> Self {
        let d = cfg.d;
        let s = cfg.num_scales;
        let encoders = (0..s)
            .map(|i| EncoderParams::new(store, rng, &format!("{name}.enc{}", i + 1), d, cfg.d_mlp))
            .collect();
        let keypoint_to_person =
            (s >= 2).then(|| Ffn::new(store, rng, &format!("{name}.kp_to_person"), dims.joints * d, d, d));
        let person_to_interaction =
            (s >= 3).then(|| Ffn::new(store, rng, &format!("{name}.person_to_interaction"), 2 * d, d, d));
        let person_to_group = (s >= 4).then(|| {
            Ffn::new(store, rng, &format!("{name}.person_to_group"), dims.group_capacity() * d, d, d)
        });
        BlockParams {
            encoders,
            keypoint_to_person,
            person_to_interaction,
            person_to_group,
        }
    }
}

/// Cross-scale aggregation: what the finer actor tokens are folded into.
pub enum Aggregation<'a> {
    /// `j′` consecutive keypoint rows per person, concatenated.
    KeypointsToPersons { joints: usize },
    /// Ordered pairs of persons, concatenated.
    PersonsToInteractions,
    PersonsToGroups { assignment: &'a GroupAssignment, capacity: usize },
}

/// `aggregate(refined) + initial`.
pub fn aggregate_and_skip(tape: &mut Tape, p: &Bound, refined: Var, initial: Var, ffn: &Ffn, how: Aggregation) -> Var {
    let agg = match how {
        Aggregation::KeypointsToPersons { joints } => {
            let (n, d) = tape.shape(refined);
            let flat = tape.reshape(refined, n / joints, joints * d);
            ffn.forward(tape, p, flat)
        }
        Aggregation::PersonsToInteractions => pair_tokens(tape, p, ffn, refined),
        Aggregation::PersonsToGroups { assignment, capacity } => {
            aggregate_groups(tape, p, ffn, refined, assignment, capacity)
        }
    };
    assert_eq!(tape.shape(agg), tape.shape(initial), "aggregated and initial shapes differ");
    tape.add(agg, initial)
}

/// Attention matrix of one (block, scale) encoder, averaged over heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub block: usize,
    pub scale: usize,
    pub matrix: Mat,
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub refined: ScaleSequences,
    /// `1 x d` per scale.
    pub cls: Vec<Var>,
    pub attention: Vec<AttentionRecord>,
}

fn actor_rows(tape: &mut Tape, seq: Var, lead: usize) -> Var {
    let n = tape.shape(seq).0;
    tape.slice_rows(seq, lead, n - lead)
}

fn check_tags(tags: &[TokenTag], expect: impl Fn(&TokenTag) -> bool, lead: usize, what: &str) -> Result<(), ModelError> {
    if tags.len() < lead || !tags[lead..].iter().all(expect) {
        return Err(ModelError::TagMismatch(format!("expected {what} tokens after the lead rows")));
    }
    Ok(())
}

/// Runs the encoders of one block in scale order.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    tape: &mut Tape,
    p: &Bound,
    inputs: &ScaleSequences,
    initial: &ScaleSequences,
    block: &BlockParams,
    block_index: usize,
    cfg: &ModelConfig,
    dims: &Dims,
    assignment: Option<&GroupAssignment>,
    mode: &mut Mode,
) -> Result<BlockOutput, ModelError> {
    let lead = inputs.lead;
    let ns = inputs.num_scales();
    let mut refined: Vec<Var> = Vec::with_capacity(ns);
    let mut cls = Vec::with_capacity(ns);
    let mut attention = Vec::with_capacity(ns);
    let mut persons_refined = None;

    for s in 0..ns {
        let x = if s == 0 {
            inputs.seqs[0]
        } else {
            let carrier = if s == 3 { refined[2] } else { refined[s - 1] };
            let head = tape.slice_rows(carrier, 0, lead);
            let init_actor = actor_rows(tape, initial.seqs[s], lead);
            let actors = match s {
                1 => {
                    check_tags(&inputs.tags[0], |t| matches!(t, TokenTag::Keypoint { .. }), lead, "keypoint")?;
                    let kp = actor_rows(tape, refined[0], lead);
                    let ffn = block.keypoint_to_person.as_ref().expect("person aggregation");
                    aggregate_and_skip(tape, p, kp, init_actor, ffn, Aggregation::KeypointsToPersons { joints: dims.joints })
                }
                2 => {
                    check_tags(&inputs.tags[1], |t| matches!(t, TokenTag::Person { .. }), lead, "person")?;
                    let ffn = block.person_to_interaction.as_ref().expect("interaction aggregation");
                    aggregate_and_skip(tape, p, persons_refined.unwrap(), init_actor, ffn, Aggregation::PersonsToInteractions)
                }
                _ => {
                    let assignment = assignment.ok_or_else(|| ModelError::TagMismatch("group scale without an assignment".into()))?;
                    let ffn = block.person_to_group.as_ref().expect("group aggregation");
                    let how = Aggregation::PersonsToGroups {
                        assignment,
                        capacity: dims.group_capacity(),
                    };
                    aggregate_and_skip(tape, p, persons_refined.unwrap(), init_actor, ffn, how)
                }
            };
            tape.concat_rows(&[head, actors])
        };
        let (y, attn) = encoder_forward(tape, p, x, &block.encoders[s], cfg.heads[s], cfg.dropout[s], mode);
        if s == 1 {
            persons_refined = Some(actor_rows(tape, y, lead));
        }
        cls.push(tape.slice_rows(y, 0, 1));
        attention.push(AttentionRecord {
            block: block_index,
            scale: s,
            matrix: attn,
        });
        refined.push(y);
    }
    Ok(BlockOutput {
        refined: ScaleSequences {
            seqs: refined,
            tags: inputs.tags.clone(),
            lead,
        },
        cls,
        attention,
    })
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[block][scale]`, each `1 x d`.
    pub cls: Vec<Vec<Var>>,
    /// Refined person tokens of the last block, when the person scale is active.
    pub persons: Option<Var>,
    pub attention: Vec<AttentionRecord>,
}

impl ModelOutput {
    /// Clip representations of the last block, one per scale.
    pub fn last_cls(&self) -> &[Var] {
        self.cls.last().expect("at least one block")
    }
}

/// Stacks the blocks; each block's own inputs serve as its skip "initial".
#[allow(clippy::too_many_arguments)]
pub fn model_forward(
    tape: &mut Tape,
    p: &Bound,
    initial: &ScaleSequences,
    blocks: &[BlockParams],
    cfg: &ModelConfig,
    dims: &Dims,
    assignment: Option<&GroupAssignment>,
    mode: &mut Mode,
) -> Result<ModelOutput, ModelError> {
    let mut inputs = initial.clone();
    let mut cls = Vec::with_capacity(blocks.len());
    let mut attention = Vec::new();
    for (m, block) in blocks.iter().enumerate() {
        let out = block_forward(tape, p, &inputs, &inputs, block, m, cfg, dims, assignment, mode)?;
        cls.push(out.cls);
        attention.extend(out.attention);
        inputs = out.refined;
    }
    let persons = (inputs.num_scales() >= 2).then(|| actor_rows(tape, inputs.seqs[1], inputs.lead));
    Ok(ModelOutput { cls, persons, attention })
}
