//! All learnable parameters and the per-clip forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::cluster::normalize_prototypes;
use crate::config::ModelConfig;
use crate::dataset::{ClipFeatures, GroupAssignment, GroupingMethod, Manifest};
use crate::error::ModelError;
use crate::mstransformer::{aggregate_and_skip, model_forward, Aggregation, AttentionRecord, BlockParams, Mode};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tokenize::{tokenize_clip, Dims, EmbeddingTables, Ffn, TokenTag};

/// Affine classifier head `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Head {
    pub w: ParamId,
    pub b: ParamId,
}

impl Head {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, classes: usize) -> Self {
        Head {
            w: store.add(format!("{name}.w"), ParamKind::Weight, ParamStore::init_linear(rng, d, classes)),
            b: store.add(format!("{name}.b"), ParamKind::Bias, Mat::zeros((1, classes))),
        }
    }

    pub fn logits(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        tape.affine(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub dims: Dims,
    pub store: ParamStore,
    pub tables: EmbeddingTables,
    /// Empty when `cfg.multiscale` is off.
    pub blocks: Vec<BlockParams>,
    /// Keypoint-to-person aggregation used only without encoders.
    pub pooled_person: Option<Ffn>,
    pub group_head: Head,
    pub person_head: Head,
    pub prototypes: ParamId,
}

/// Head-averaged attention of one encoder with the identity of every token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub block: usize,
    pub scale: usize,
    pub tokens: Vec<TokenTag>,
    /// Row `i` is the distribution of token `i`'s attention over `tokens`.
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub clip_id: String,
    pub maps: Vec<AttentionMap>,
}

/// What one clip produces.
#[derive(Debug, Clone)]
pub struct ClipOutput {
    /// `[block][scale]` clip representations, each `1 x d`.
    pub cls: Vec<Vec<Var>>,
    pub persons: Option<Var>,
    pub attention: Vec<AttentionRecord>,
    pub tags: Vec<Vec<TokenTag>>,
    pub assignment: Option<GroupAssignment>,
}

impl ClipOutput {
    /// Representation used for the evaluation metric: last scale, last block.
    pub fn final_cls(&self) -> Var {
        *self.cls.last().and_then(|c| c.last()).expect("non-empty output")
    }
}

impl Model {
    pub fn new(cfg: &ModelConfig, manifest: &Manifest, frames: usize, num_prototypes: usize, seed: u64) -> Result<Self, ModelError> {
        let dims = Dims::new(manifest, frames);
        if cfg.num_scales >= 4 && cfg.grouping == GroupingMethod::Heuristic && dims.groups != 2 {
            return Err(ModelError::Config(format!(
                "the positional grouping heuristic forms two groups, manifest asks for {}",
                dims.groups
            )));
        }
        if cfg.num_scales >= 4 && dims.persons < dims.groups {
            return Err(ModelError::Config("fewer person slots than groups".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tables = EmbeddingTables::new(&mut store, &mut rng, cfg, &dims, &manifest.keypoint_names);
        let blocks = if cfg.multiscale {
            (0..cfg.blocks)
                .map(|m| BlockParams::new(&mut store, &mut rng, &format!("block{m}"), cfg, &dims))
                .collect()
        } else {
            Vec::new()
        };
        let pooled_person = (!cfg.multiscale)
            .then(|| Ffn::new(&mut store, &mut rng, "pooled.kp_to_person", dims.joints * cfg.d, cfg.d, cfg.d));
        let group_head = Head::new(&mut store, &mut rng, "head.group", cfg.d, dims.group_classes);
        let person_head = Head::new(&mut store, &mut rng, "head.person", cfg.d, dims.action_classes.max(1));
        let mut protos = ParamStore::init_normal(&mut rng, num_prototypes, cfg.d, 1.0);
        normalize_prototypes(&mut protos);
        let prototypes = store.add("prototypes", ParamKind::Prototype, protos);
        Ok(Model {
            cfg: cfg.clone(),
            dims,
            store,
            tables,
            blocks,
            pooled_person,
            group_head,
            person_head,
            prototypes,
        })
    }

    /// Tokenizes and runs one clip.
    pub fn forward_clip(
        &self,
        tape: &mut Tape,
        p: &Bound,
        f: &ClipFeatures,
        mode: &mut Mode,
        seed: u64,
    ) -> Result<ClipOutput, ModelError> {
        let cfg = &self.cfg;
        let num_scales = if cfg.multiscale { cfg.num_scales } else { 1 };
        let (init, seqs) = tokenize_clip(
            tape,
            p,
            &self.tables,
            f,
            &self.dims,
            num_scales,
            cfg.grouping,
            !cfg.multiscale,
            seed,
        );
        if !cfg.multiscale {
            let ffn = self.pooled_person.as_ref().expect("pooled person aggregation");
            let persons = aggregate_and_skip(
                tape,
                p,
                init.keypoints,
                init.persons.expect("person tokens"),
                ffn,
                Aggregation::KeypointsToPersons { joints: self.dims.joints },
            );
            let mut parts: Vec<Var> = init.objects.into_iter().collect();
            parts.push(persons);
            let all = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
            let n = tape.shape(all).0;
            let sum = tape.sum_rows(all);
            let pooled = tape.scale(sum, 1.0 / n as f64);
            return Ok(ClipOutput {
                cls: vec![vec![pooled]],
                persons: Some(persons),
                attention: Vec::new(),
                tags: Vec::new(),
                assignment: None,
            });
        }
        let out = model_forward(tape, p, &seqs, &self.blocks, cfg, &self.dims, init.assignment.as_ref(), mode)?;
        Ok(ClipOutput {
            cls: out.cls,
            persons: out.persons,
            attention: out.attention,
            tags: seqs.tags,
            assignment: init.assignment,
        })
    }

    pub fn group_logits(&self, tape: &mut Tape, p: &Bound, repr: Var) -> Var {
        self.group_head.logits(tape, p, repr)
    }

    pub fn person_logits(&self, tape: &mut Tape, p: &Bound, persons: Var) -> Var {
        self.person_head.logits(tape, p, persons)
    }

    /// Eval-mode attention of every encoder for one clip.
    pub fn export_attention(&self, f: &ClipFeatures, seed: u64) -> Result<AttentionExport, ModelError> {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &self.store, false);
        let out = self.forward_clip(&mut tape, &p, f, &mut Mode::eval(), seed)?;
        let maps = out
            .attention
            .into_iter()
            .map(|rec| AttentionMap {
                block: rec.block,
                scale: rec.scale,
                tokens: out.tags[rec.scale].clone(),
                weights: rec.matrix.rows().into_iter().map(|r| r.to_vec()).collect(),
            })
            .collect();
        Ok(AttentionExport {
            clip_id: f.clip_id.clone(),
            maps,
        })
    }

    /// Eval-mode group logits of one clip's final representation.
    pub fn predict(&self, f: &ClipFeatures, seed: u64) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &self.store, false);
        let out = self.forward_clip(&mut tape, &p, f, &mut Mode::eval(), seed)?;
        let logits = self.group_logits(&mut tape, &p, out.final_cls());
        Ok(tape.value(logits).iter().copied().collect())
    }
}
