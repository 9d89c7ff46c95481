//! Initial token embeddings and the four scale sequences.
//!
//! Each keypoint-frame is described by a composite vector laid out as
//!
//! ```text
//! [ type (d_type) | fourier (d_fourier) | time (d_time) | std xy (2) | std dxy (2) | person-normalized xy (2) | person OKS (j′) ]
//! ```
//!
//! Coordinate-derived blocks are zero for missing keypoints. A person-frame
//! removed by actor dropout is zero in every block.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::config::ModelConfig;
use crate::dataset::skeleton::normalized_adjacency;
use crate::dataset::{ClipFeatures, GroupAssignment, GroupingMethod, Manifest};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};

/// Data-dependent sizes: p′, j′, e′, g′, T and label counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub persons: usize,
    pub joints: usize,
    pub objects: usize,
    pub groups: usize,
    pub frames: usize,
    pub group_classes: usize,
    pub action_classes: usize,
}

impl Dims {
    pub fn new(manifest: &Manifest, frames: usize) -> Self {
        Dims {
            persons: manifest.max_persons,
            joints: manifest.num_joints,
            objects: manifest.max_objects,
            groups: manifest.num_groups,
            frames,
            group_classes: manifest.group_classes.len(),
            action_classes: manifest.action_classes.len(),
        }
    }

    /// Members per heuristic group, ⌈p′/2⌉.
    pub fn group_capacity(&self) -> usize {
        self.persons.div_ceil(2)
    }

    pub fn num_interactions(&self) -> usize {
        self.persons * self.persons.saturating_sub(1)
    }
}

/// Token counts of the four scales: `1+e′+p′j′`, `1+e′+p′`, `1+e′+p′(p′−1)`, `1+e′+g′`.
pub fn scale_lengths(persons: usize, joints: usize, objects: usize, groups: usize) -> [usize; 4] {
    let lead = 1 + objects;
    [
        lead + persons * joints,
        lead + persons,
        lead + persons * persons.saturating_sub(1),
        lead + groups,
    ]
}

/// Identity of one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenTag {
    Cls,
    Object { object: usize },
    Keypoint { person: usize, joint: usize },
    Person { person: usize },
    Interaction { from: usize, to: usize },
    Group { group: usize },
}

/// Ordered pairs `(p, q)`, `p != q`, lexicographic.
pub fn interaction_pairs(persons: usize) -> Vec<(usize, usize)> {
    (0..persons)
        .flat_map(|p| (0..persons).filter(move |&q| q != p).map(move |q| (p, q)))
        .collect()
}

/// Tags of scale `s` (0-based) in sequence order.
pub fn scale_tags(dims: &Dims, s: usize) -> Vec<TokenTag> {
    let mut tags = vec![TokenTag::Cls];
    tags.extend((0..dims.objects).map(|object| TokenTag::Object { object }));
    match s {
        0 => tags.extend(
            (0..dims.persons).flat_map(|person| (0..dims.joints).map(move |joint| TokenTag::Keypoint { person, joint })),
        ),
        1 => tags.extend((0..dims.persons).map(|person| TokenTag::Person { person })),
        2 => tags.extend(
            interaction_pairs(dims.persons)
                .into_iter()
                .map(|(from, to)| TokenTag::Interaction { from, to }),
        ),
        3 => tags.extend((0..dims.groups).map(|group| TokenTag::Group { group })),
        _ => panic!("scale index {s} out of range"),
    }
    tags
}

/// Two-layer perceptron `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ffn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Ffn {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, hidden: usize, out: usize) -> Self {
        Ffn {
            w1: store.add(format!("{name}.w1"), ParamKind::Weight, ParamStore::init_linear(rng, input, hidden)),
            b1: store.add(format!("{name}.b1"), ParamKind::Bias, Mat::zeros((1, hidden))),
            w2: store.add(format!("{name}.w2"), ParamKind::Weight, ParamStore::init_linear(rng, hidden, out)),
            b2: store.add(format!("{name}.b2"), ParamKind::Bias, Mat::zeros((1, out))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = tape.affine(x, p.var(self.w1), p.var(self.b1));
        let h = tape.relu(h);
        tape.affine(h, p.var(self.w2), p.var(self.b2))
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

pub const GCN_LAYERS: usize = 3;
const FOURIER_INIT_STD: f64 = 3.0;
const EMBED_INIT_STD: f64 = 0.5;

/// Width of the numeric tail of a keypoint composite: std xy, std dxy,
/// normalized xy.
pub const COORD_FEATURES: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub type_embed: ParamId,
    pub gcn: [ParamId; GCN_LAYERS],
    /// `2 x d_fourier/2` frequency matrix.
    pub fourier: ParamId,
    /// `T x d_time`
    pub time_pe: ParamId,
    /// `1 x d`
    pub cls: ParamId,
    pub keypoint_ffn: Ffn,
    pub person_ffn: Ffn,
    pub object_ffn: Option<Ffn>,
    pub interaction_ffn: Ffn,
    pub group_ffn: Ffn,
    /// Fixed normalized skeleton adjacency, `j′ x j′`.
    pub adjacency: Mat,
}

impl EmbeddingTables {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig, dims: &Dims, keypoint_names: &[String]) -> Self {
        let d = cfg.d;
        let type_embed = store.add(
            "embed.type",
            ParamKind::Embedding,
            ParamStore::init_normal(rng, dims.joints, cfg.d_type, EMBED_INIT_STD),
        );
        let gcn = std::array::from_fn(|l| {
            store.add(
                format!("embed.gcn{l}"),
                ParamKind::Weight,
                ParamStore::init_linear(rng, cfg.d_type, cfg.d_type),
            )
        });
        let fourier = store.add(
            "embed.fourier",
            ParamKind::Embedding,
            ParamStore::init_normal(rng, 2, cfg.d_fourier / 2, FOURIER_INIT_STD),
        );
        let time_pe = store.add(
            "embed.time",
            ParamKind::Embedding,
            ParamStore::init_normal(rng, dims.frames, cfg.d_time, EMBED_INIT_STD),
        );
        let cls = store.add("embed.cls", ParamKind::Embedding, ParamStore::init_normal(rng, 1, d, EMBED_INIT_STD));
        let kp_width = dims.frames * composite_width(cfg, dims);
        let keypoint_ffn = Ffn::new(store, rng, "embed.keypoint_ffn", kp_width, d, d);
        let person_ffn = Ffn::new(store, rng, "embed.person_ffn", dims.frames * dims.joints * 2, d, d);
        let object_ffn = (dims.objects > 0).then(|| {
            Ffn::new(store, rng, "embed.object_ffn", dims.frames * object_composite_width(cfg), d, d)
        });
        let interaction_ffn = Ffn::new(store, rng, "embed.interaction_ffn", 2 * d, d, d);
        let group_ffn = Ffn::new(store, rng, "embed.group_ffn", dims.group_capacity() * d, d, d);
        EmbeddingTables {
            type_embed,
            gcn,
            fourier,
            time_pe,
            cls,
            keypoint_ffn,
            person_ffn,
            object_ffn,
            interaction_ffn,
            group_ffn,
            adjacency: normalized_adjacency(keypoint_names),
        }
    }
}

/// Width of one keypoint-frame composite vector.
pub fn composite_width(cfg: &ModelConfig, dims: &Dims) -> usize {
    cfg.d_type + cfg.d_fourier + cfg.d_time + COORD_FEATURES + dims.joints
}

/// Width of one object-frame composite: time, fourier, std xy, std dxy.
pub fn object_composite_width(cfg: &ModelConfig) -> usize {
    cfg.d_time + cfg.d_fourier + 4
}

/// Graph-refined type embeddings, `j′ x d_type`.
pub fn type_embeddings(tape: &mut Tape, p: &Bound, tables: &EmbeddingTables) -> Var {
    let adj = tape.constant(tables.adjacency.clone());
    let mut h = p.var(tables.type_embed);
    for (l, &w) in tables.gcn.iter().enumerate() {
        let hw = tape.matmul(h, p.var(w));
        h = tape.matmul(adj, hw);
        if l + 1 < GCN_LAYERS {
            h = tape.relu(h);
        }
    }
    h
}

/// `[sin(2π xy F), cos(2π xy F)]` for every row of `xy`; rows with
/// `mask == 0` come out as zero.
pub fn fourier_encode(tape: &mut Tape, p: &Bound, tables: &EmbeddingTables, xy: Mat, mask: &[f64]) -> Var {
    let x = tape.constant(xy);
    let proj = tape.matmul(x, p.var(tables.fourier));
    let proj = tape.scale(proj, 2.0 * PI);
    let s = tape.sin(proj);
    let c = tape.cos(proj);
    let enc = tape.concat_cols(&[s, c]);
    let w = tape.shape(enc).1;
    let m = Mat::from_shape_fn((mask.len(), w), |(r, _)| mask[r]);
    tape.mul_const(enc, m)
}

/// Composite vectors for every (person, joint, frame), rows ordered
/// person-major, then joint, then frame.
pub fn keypoint_frame_composites(tape: &mut Tape, p: &Bound, tables: &EmbeddingTables, f: &ClipFeatures) -> Var {
    let (np, nj, nt) = (f.num_persons, f.num_joints, f.num_frames);
    let n = np * nj * nt;
    let mut joints = Vec::with_capacity(n);
    let mut frames = Vec::with_capacity(n);
    let mut xy = Mat::zeros((n, 2));
    let mut coord_mask = vec![0.0; n];
    let mut keep = vec![1.0; n];
    let mut numeric = Mat::zeros((n, COORD_FEATURES + nj));
    for pp in 0..np {
        for j in 0..nj {
            for t in 0..nt {
                let r = (pp * nj + j) * nt + t;
                joints.push(j);
                frames.push(t);
                let pf = pp * nt + t;
                if f.dropped[pf] {
                    keep[r] = 0.0;
                    continue;
                }
                if f.person_present[pp] {
                    for k in 0..nj {
                        numeric[[r, COORD_FEATURES + k]] = f.oks[pp * nj + k];
                    }
                }
                if !f.frame_present[pf] {
                    continue;
                }
                let i = f.kp_index(pp, t, j);
                coord_mask[r] = 1.0;
                xy[[r, 0]] = f.image_xy[i][0];
                xy[[r, 1]] = f.image_xy[i][1];
                let vals = [
                    f.std_xy[i][0],
                    f.std_xy[i][1],
                    f.std_dxy[i][0],
                    f.std_dxy[i][1],
                    f.norm_xy[i][0],
                    f.norm_xy[i][1],
                ];
                for (k, v) in vals.into_iter().enumerate() {
                    numeric[[r, k]] = v;
                }
            }
        }
    }
    let types = type_embeddings(tape, p, tables);
    let type_part = tape.gather_rows(types, &joints);
    let fourier = fourier_encode(tape, p, tables, xy, &coord_mask);
    let time_part = tape.gather_rows(p.var(tables.time_pe), &frames);
    let numeric = tape.constant(numeric);
    let all = tape.concat_cols(&[type_part, fourier, time_part, numeric]);
    if keep.iter().all(|&k| k == 1.0) {
        return all;
    }
    let w = tape.shape(all).1;
    let m = Mat::from_shape_fn((n, w), |(r, _)| keep[r]);
    tape.mul_const(all, m)
}

/// `p′j′ x d`, rows person-major then joint.
pub fn build_keypoint_tokens(tape: &mut Tape, p: &Bound, tables: &EmbeddingTables, f: &ClipFeatures) -> Var {
    let comp = keypoint_frame_composites(tape, p, tables, f);
    let (n, w) = tape.shape(comp);
    let rows = f.num_persons * f.num_joints;
    let flat = tape.reshape(comp, rows, n / rows * w);
    tables.keypoint_ffn.forward(tape, p, flat)
}

/// Concatenated standardized coordinates over all frames and joints, one
/// row per person slot.
pub fn person_coordinate_matrix(f: &ClipFeatures) -> Mat {
    let (np, nj, nt) = (f.num_persons, f.num_joints, f.num_frames);
    let mut m = Mat::zeros((np, nt * nj * 2));
    for pp in 0..np {
        for t in 0..nt {
            if !f.active(pp, t) {
                continue;
            }
            for j in 0..nj {
                let i = f.kp_index(pp, t, j);
                m[[pp, (t * nj + j) * 2]] = f.std_xy[i][0];
                m[[pp, (t * nj + j) * 2 + 1]] = f.std_xy[i][1];
            }
        }
    }
    m
}

/// `p′ x d`
pub fn build_person_tokens(tape: &mut Tape, p: &Bound, tables: &EmbeddingTables, f: &ClipFeatures) -> Var {
    let x = tape.constant(person_coordinate_matrix(f));
    tables.person_ffn.forward(tape, p, x)
}

/// `p′(p′−1) x d` from ordered pairs of person tokens through `ffn`.
pub fn pair_tokens(tape: &mut Tape, p: &Bound, ffn: &Ffn, persons: Var) -> Var {
    let n = tape.shape(persons).0;
    let pairs = interaction_pairs(n);
    let from: Vec<usize> = pairs.iter().map(|x| x.0).collect();
    let to: Vec<usize> = pairs.iter().map(|x| x.1).collect();
    let a = tape.gather_rows(persons, &from);
    let b = tape.gather_rows(persons, &to);
    let x = tape.concat_cols(&[a, b]);
    ffn.forward(tape, p, x)
}

pub fn build_interaction_tokens(tape: &mut Tape, p: &Bound, tables: &EmbeddingTables, persons: Var) -> Var {
    pair_tokens(tape, p, &tables.interaction_ffn, persons)
}

/// Group tokens from person tokens: concatenation of the (zero-padded)
/// member rows through `ffn` on the heuristic path, plain member sums on the
/// k-means path.
pub fn aggregate_groups(tape: &mut Tape, p: &Bound, ffn: &Ffn, persons: Var, assignment: &GroupAssignment, capacity: usize) -> Var {
    let (np, d) = tape.shape(persons);
    match assignment.method {
        GroupingMethod::Kmeans => {
            let g = assignment.num_groups();
            let mut member = Mat::zeros((g, np));
            for (pp, &grp) in assignment.mapping.iter().enumerate() {
                member[[grp, pp]] = 1.0;
            }
            let m = tape.constant(member);
            tape.matmul(m, persons)
        }
        GroupingMethod::Heuristic => {
            let mut rows = Vec::with_capacity(assignment.num_groups());
            for members in &assignment.members {
                assert!(members.len() <= capacity, "group larger than its capacity");
                let mut parts = vec![tape.gather_rows(persons, members)];
                if members.len() < capacity {
                    parts.push(tape.constant(Mat::zeros((capacity - members.len(), d))));
                }
                let block = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
                rows.push(tape.reshape(block, 1, capacity * d));
            }
            let x = tape.concat_rows(&rows);
            ffn.forward(tape, p, x)
        }
    }
}

pub fn build_group_tokens(tape: &mut Tape, p: &Bound, tables: &EmbeddingTables, persons: Var, assignment: &GroupAssignment, dims: &Dims) -> Var {
    aggregate_groups(tape, p, &tables.group_ffn, persons, assignment, dims.group_capacity())
}

/// Per-object composites `[time | fourier | std xy | std dxy]` concatenated over
/// frames and projected to `e′ x d`. `None` when `e′ = 0`.
pub fn build_object_tokens(tape: &mut Tape, p: &Bound, tables: &EmbeddingTables, f: &ClipFeatures) -> Option<Var> {
    let ffn = tables.object_ffn.as_ref()?;
    if f.num_objects == 0 {
        return None;
    }
    let (ne, nt) = (f.num_objects, f.num_frames);
    let n = ne * nt;
    let mut xy = Mat::zeros((n, 2));
    let mut mask = vec![0.0; n];
    let mut numeric = Mat::zeros((n, 4));
    let mut frames = Vec::with_capacity(n);
    for e in 0..ne {
        for t in 0..nt {
            let r = e * nt + t;
            frames.push(t);
            if !f.obj_present[r] {
                continue;
            }
            mask[r] = 1.0;
            xy[[r, 0]] = f.obj_image_xy[r][0];
            xy[[r, 1]] = f.obj_image_xy[r][1];
            numeric[[r, 0]] = f.obj_std_xy[r][0];
            numeric[[r, 1]] = f.obj_std_xy[r][1];
            numeric[[r, 2]] = f.obj_std_dxy[r][0];
            numeric[[r, 3]] = f.obj_std_dxy[r][1];
        }
    }
    let time_part = tape.gather_rows(p.var(tables.time_pe), &frames);
    let fourier = fourier_encode(tape, p, tables, xy, &mask);
    let numeric = tape.constant(numeric);
    let comp = tape.concat_cols(&[time_part, fourier, numeric]);
    let w = tape.shape(comp).1;
    let flat = tape.reshape(comp, ne, nt * w);
    Some(ffn.forward(tape, p, flat))
}

/// Initial tokens of every kind for one clip.
#[derive(Debug, Clone)]
pub struct InitialTokens {
    pub cls: Var,
    pub objects: Option<Var>,
    pub keypoints: Var,
    pub persons: Option<Var>,
    pub interactions: Option<Var>,
    pub groups: Option<Var>,
    pub assignment: Option<GroupAssignment>,
}

/// Token sequences of the active scales with their identity tags.
#[derive(Debug, Clone)]
pub struct ScaleSequences {
    pub seqs: Vec<Var>,
    pub tags: Vec<Vec<TokenTag>>,
    /// Leading `[CLS]` plus object rows.
    pub lead: usize,
}

impl ScaleSequences {
    pub fn lengths(&self) -> Vec<usize> {
        self.tags.iter().map(Vec::len).collect()
    }

    pub fn num_scales(&self) -> usize {
        self.seqs.len()
    }
}

/// `[CLS]`, then objects, then the actor tokens of each provided scale.
/// The same `[CLS]` and object nodes start every sequence.
pub fn assemble_scales(tape: &mut Tape, init: &InitialTokens, dims: &Dims, num_scales: usize) -> ScaleSequences {
    let actors = [Some(init.keypoints), init.persons, init.interactions, init.groups];
    let mut seqs = Vec::with_capacity(num_scales);
    let mut tags = Vec::with_capacity(num_scales);
    for (s, actor) in actors.iter().enumerate().take(num_scales) {
        let actor = actor.expect("actor tokens for every active scale");
        let mut parts = vec![init.cls];
        parts.extend(init.objects);
        parts.push(actor);
        seqs.push(tape.concat_rows(&parts));
        tags.push(scale_tags(dims, s));
    }
    for (s, (&v, t)) in seqs.iter().zip(&tags).enumerate() {
        assert_eq!(tape.shape(v).0, t.len(), "scale {s}: token count disagrees with tags");
    }
    ScaleSequences {
        seqs,
        tags,
        lead: 1 + dims.objects,
    }
}

/// Embeds one clip and assembles its scale sequences. Persons are built
/// whenever `num_scales >= 2` or `with_persons` is set.
pub fn tokenize_clip(
    tape: &mut Tape,
    p: &Bound,
    tables: &EmbeddingTables,
    f: &ClipFeatures,
    dims: &Dims,
    num_scales: usize,
    grouping: GroupingMethod,
    with_persons: bool,
    seed: u64,
) -> (InitialTokens, ScaleSequences) {
    let cls = p.var(tables.cls);
    let objects = build_object_tokens(tape, p, tables, f);
    let keypoints = build_keypoint_tokens(tape, p, tables, f);
    let persons = (num_scales >= 2 || with_persons).then(|| build_person_tokens(tape, p, tables, f));
    let interactions = (num_scales >= 3).then(|| build_interaction_tokens(tape, p, tables, persons.unwrap()));
    let mut assignment = None;
    let groups = (num_scales >= 4).then(|| {
        let persons = persons.unwrap();
        let a = match grouping {
            GroupingMethod::Heuristic => crate::dataset::heuristic_from_mean_x(&f.mean_x),
            GroupingMethod::Kmeans => crate::dataset::assign_groups_kmeans(tape.value(persons), dims.groups, seed),
        };
        let g = build_group_tokens(tape, p, tables, persons, &a, dims);
        assignment = Some(a);
        g
    });
    let init = InitialTokens {
        cls,
        objects,
        keypoints,
        persons,
        interactions,
        groups,
        assignment,
    };
    let seqs = assemble_scales(tape, &init, dims, num_scales);
    (init, seqs)
}
