//! Correction and augmentation objectives.
//!
//! Each term is available as a standalone scalar function over plain arrays
//! together with its gradient. [`evaluate_objective`] and
//! [`objective_gradient`] compose the terms of a stage over a posed rig and a
//! rigid object, pushing vertex gradients back to pose channels.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::body::{forward_kinematics, BodyError, ChannelGroup, Pose, RigidTransform, RomBounds, SkinnedModel};
use crate::geometry::{GeometryError, SpatialIndex};
use crate::math::{right_jacobian, Point, Vec3};
use crate::scene::{ObjectModel, ObjectState};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{stage:?} stage needs {what}")]
    MissingInput { stage: Stage, what: &'static str },
    #[error("human surface at frame {frame} is not watertight")]
    NotWatertight { frame: usize },
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn dim(msg: impl Into<String>) -> LossError {
    LossError::Dimension(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Hand,
    FullBody,
    Augment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Contact,
    Penetration,
    Smoothness,
    Prior,
    Reconstruction,
    Alignment,
    Regularization,
}

impl Term {
    pub const ALL: [Term; 7] = [
        Term::Contact,
        Term::Penetration,
        Term::Smoothness,
        Term::Prior,
        Term::Reconstruction,
        Term::Alignment,
        Term::Regularization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Contact => "contact",
            Term::Penetration => "penetration",
            Term::Smoothness => "smoothness",
            Term::Prior => "prior",
            Term::Reconstruction => "reconstruction",
            Term::Alignment => "alignment",
            Term::Regularization => "regularization",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Per-term weights, indexed by [`Term`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TermWeights(pub [f64; 7]);

impl TermWeights {
    pub fn zero() -> Self {
        TermWeights([0.0; 7])
    }

    pub fn with(mut self, term: Term, weight: f64) -> Self {
        self.0[term.index()] = weight;
        self
    }

    pub fn get(&self, term: Term) -> f64 {
        self.0[term.index()]
    }

    pub fn set(&mut self, term: Term, weight: f64) {
        self.0[term.index()] = weight;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossConfig {
    /// Distance at or below which a hand counts as touching.
    pub contact_threshold: f64,
    /// Distance above which a hand counts as free.
    pub no_contact_threshold: f64,
    /// Guard added to reference distances in the alignment weights.
    pub align_epsilon: f64,
    /// Only reference pairs at or below this distance enter the alignment sum.
    pub align_pair_cutoff: f64,
    /// Object vertices kept for alignment pairs.
    pub align_max_samples: usize,
    pub beta: f64,
    pub hand: TermWeights,
    pub full_body: TermWeights,
    pub augment: TermWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            contact_threshold: 0.02,
            no_contact_threshold: 0.10,
            align_epsilon: 0.01,
            align_pair_cutoff: 0.25,
            align_max_samples: 512,
            beta: 5.0,
            hand: TermWeights::zero()
                .with(Term::Contact, 1.0)
                .with(Term::Penetration, 5.0)
                .with(Term::Smoothness, 0.1)
                .with(Term::Prior, 1.0),
            full_body: TermWeights::zero()
                .with(Term::Penetration, 5.0)
                .with(Term::Smoothness, 0.1)
                .with(Term::Reconstruction, 1.0),
            augment: TermWeights::zero()
                .with(Term::Alignment, 1.0)
                .with(Term::Regularization, 1.0)
                .with(Term::Smoothness, 1.0),
        }
    }
}

impl LossConfig {
    pub fn weights(&self, stage: Stage) -> &TermWeights {
        match stage {
            Stage::Hand => &self.hand,
            Stage::FullBody => &self.full_body,
            Stage::Augment => &self.augment,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let scalars = [
            ("contact_threshold", self.contact_threshold),
            ("no_contact_threshold", self.no_contact_threshold),
            ("align_epsilon", self.align_epsilon),
            ("align_pair_cutoff", self.align_pair_cutoff),
            ("beta", self.beta),
        ];
        for (name, v) in scalars {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.contact_threshold >= self.no_contact_threshold {
            return Err(LossError::Config("contact_threshold must be below no_contact_threshold".into()));
        }
        if self.align_epsilon == 0.0 || self.beta == 0.0 {
            return Err(LossError::Config("align_epsilon and beta must be positive".into()));
        }
        for w in [&self.hand, &self.full_body, &self.augment] {
            if w.0.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(LossError::Config("term weights must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Piecewise-linear contact weight: 1 up to the contact threshold, 0 past the
/// no-contact threshold, linear in between.
pub fn contact_indicator(min_distance: f64, cfg: &LossConfig) -> f64 {
    let (lo, hi) = (cfg.contact_threshold, cfg.no_contact_threshold);
    if min_distance <= lo {
        return 1.0;
    }
    if min_distance > hi {
        return 0.0;
    }
    let slope = 1.0 / (hi - lo);
    (hi * slope - slope * min_distance).clamp(0.0, 1.0)
}

/// `Σᵢ cᵢ Σⱼ dⱼ[i]`. The gradient with respect to `dⱼ[i]` is `cᵢ`.
pub fn contact_loss(hand_distances: &[Vec<f64>], indicators: &[f64]) -> Result<f64, LossError> {
    if hand_distances.len() != indicators.len() {
        return Err(dim(format!("{} distance frames, {} indicators", hand_distances.len(), indicators.len())));
    }
    Ok(hand_distances.iter().zip(indicators).map(|(d, &c)| c * d.iter().sum::<f64>()).sum())
}

/// Sum of depths of object vertices inside the human, over all frames.
pub fn penetration_loss(object_vertices: &[Vec<Point>], human: &[SpatialIndex]) -> Result<f64, LossError> {
    if object_vertices.len() != human.len() {
        return Err(dim(format!("{} object frames, {} human surfaces", object_vertices.len(), human.len())));
    }
    let mut total = 0.0;
    for (frame, (verts, index)) in object_vertices.iter().zip(human).enumerate() {
        if !index.is_watertight() {
            return Err(LossError::NotWatertight { frame });
        }
        total += verts.iter().map(|v| (-index.signed_distance(v)).max(0.0)).sum::<f64>();
    }
    Ok(total)
}

fn check_rows(traj: &[Vec<f64>]) -> Result<usize, LossError> {
    let d = traj.first().map_or(0, Vec::len);
    if traj.iter().any(|r| r.len() != d) {
        return Err(dim("trajectory rows differ in length"));
    }
    Ok(d)
}

/// Squared first differences plus squared second differences.
pub fn smoothness_loss(traj: &[Vec<f64>]) -> Result<f64, LossError> {
    Ok(smoothness_with_grad(traj, false)?.0)
}

pub fn smoothness_grad(traj: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, LossError> {
    Ok(smoothness_with_grad(traj, true)?.1)
}

fn smoothness_with_grad(traj: &[Vec<f64>], want: bool) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    if traj.len() < 2 {
        return Err(dim(format!("smoothness needs at least 2 frames, got {}", traj.len())));
    }
    let d = check_rows(traj)?;
    let mut grad = if want { vec![vec![0.0; d]; traj.len()] } else { Vec::new() };
    let mut value = 0.0;
    for i in 0..traj.len() - 1 {
        for c in 0..d {
            let v = traj[i + 1][c] - traj[i][c];
            value += v * v;
            if want {
                grad[i + 1][c] += 2.0 * v;
                grad[i][c] -= 2.0 * v;
            }
        }
    }
    for i in 0..traj.len().saturating_sub(2) {
        for c in 0..d {
            let a = traj[i + 2][c] - 2.0 * traj[i + 1][c] + traj[i][c];
            value += a * a;
            if want {
                grad[i + 2][c] += 2.0 * a;
                grad[i + 1][c] -= 4.0 * a;
                grad[i][c] += 2.0 * a;
            }
        }
    }
    Ok((value, grad))
}

/// Squared violation of per-channel lower and upper bounds.
pub fn prior_loss(channels: &[Vec<f64>], bounds: &RomBounds) -> Result<f64, LossError> {
    Ok(prior_with_grad(channels, bounds, false)?.0)
}

pub fn prior_grad(channels: &[Vec<f64>], bounds: &RomBounds) -> Result<Vec<Vec<f64>>, LossError> {
    Ok(prior_with_grad(channels, bounds, true)?.1)
}

fn prior_with_grad(channels: &[Vec<f64>], bounds: &RomBounds, want: bool) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    if channels.iter().any(|r| r.len() != bounds.len()) {
        return Err(dim(format!("bounds cover {} channels", bounds.len())));
    }
    let mut value = 0.0;
    let mut grad = Vec::new();
    for row in channels {
        let mut g = vec![0.0; if want { row.len() } else { 0 }];
        for (c, &x) in row.iter().enumerate() {
            let below = (x - bounds.min[c]).min(0.0);
            let above = (x - bounds.max[c]).max(0.0);
            value += below * below + above * above;
            if want {
                g[c] = 2.0 * (below + above);
            }
        }
        if want {
            grad.push(g);
        }
    }
    Ok((value, grad))
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Adds `scale · (a − b)/‖a − b‖` to `out`; nothing at `a = b`.
fn add_norm_grad(out: &mut [f64], a: &[f64], b: &[f64], scale: f64) {
    let n = diff_norm(a, b);
    if n > 0.0 {
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o += scale * (x - y) / n;
        }
    }
}

fn check_pair(a: &[Vec<f64>], b: &[Vec<f64>], what: &str) -> Result<(), LossError> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(dim(format!("{what} shapes differ")));
    }
    Ok(())
}

/// `Σᵢ ‖hᵢ − hᵢ*‖ + ‖oᵢ − oᵢ*‖` with unsquared norms.
pub fn reconstruction_loss(
    human: &[Vec<f64>],
    human_ref: &[Vec<f64>],
    object: &[Vec<f64>],
    object_ref: &[Vec<f64>],
) -> Result<f64, LossError> {
    check_pair(human, human_ref, "human")?;
    check_pair(object, object_ref, "object")?;
    let h: f64 = human.iter().zip(human_ref).map(|(a, b)| diff_norm(a, b)).sum();
    let o: f64 = object.iter().zip(object_ref).map(|(a, b)| diff_norm(a, b)).sum();
    Ok(h + o)
}

/// Gradients of [`reconstruction_loss`] with respect to `human` and `object`.
pub fn reconstruction_grad(
    human: &[Vec<f64>],
    human_ref: &[Vec<f64>],
    object: &[Vec<f64>],
    object_ref: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), LossError> {
    check_pair(human, human_ref, "human")?;
    check_pair(object, object_ref, "object")?;
    let grad = |xs: &[Vec<f64>], refs: &[Vec<f64>]| -> Vec<Vec<f64>> {
        xs.iter()
            .zip(refs)
            .map(|(a, b)| {
                let mut g = vec![0.0; a.len()];
                add_norm_grad(&mut g, a, b, 1.0);
                g
            })
            .collect()
    };
    Ok((grad(human, human_ref), grad(object, object_ref)))
}

/// `Σ (D̂ − D)² / (D̂ + ε)²` over matching reference and current pair distances.
pub fn alignment_loss(reference: &[f64], current: &[f64], epsilon: f64) -> Result<f64, LossError> {
    if reference.len() != current.len() {
        return Err(dim(format!("{} reference pairs, {} current pairs", reference.len(), current.len())));
    }
    Ok(reference.iter().zip(current).map(|(&r, &d)| (r - d) * (r - d) / ((r + epsilon) * (r + epsilon))).sum())
}

/// Gradient of [`alignment_loss`] with respect to the current distances.
pub fn alignment_grad(reference: &[f64], current: &[f64], epsilon: f64) -> Result<Vec<f64>, LossError> {
    if reference.len() != current.len() {
        return Err(dim(format!("{} reference pairs, {} current pairs", reference.len(), current.len())));
    }
    Ok(reference.iter().zip(current).map(|(&r, &d)| 2.0 * (d - r) / ((r + epsilon) * (r + epsilon))).collect())
}

fn masked(row: &[f64], mask: &[bool]) -> Vec<f64> {
    row.iter().zip(mask).map(|(&x, &m)| if m { x } else { 0.0 }).collect()
}

/// `β Σᵢ ‖m ⊙ (hᵢ − hᵢ*)‖ + (1/β) Σᵢ ‖hᵢ − hᵢ*‖`.
pub fn regularization_loss(human: &[Vec<f64>], human_ref: &[Vec<f64>], mask: &[bool], beta: f64) -> Result<f64, LossError> {
    check_pair(human, human_ref, "human")?;
    if human.iter().any(|r| r.len() != mask.len()) {
        return Err(dim(format!("mask covers {} channels", mask.len())));
    }
    Ok(human
        .iter()
        .zip(human_ref)
        .map(|(a, b)| beta * diff_norm(&masked(a, mask), &masked(b, mask)) + diff_norm(a, b) / beta)
        .sum())
}

pub fn regularization_grad(
    human: &[Vec<f64>],
    human_ref: &[Vec<f64>],
    mask: &[bool],
    beta: f64,
) -> Result<Vec<Vec<f64>>, LossError> {
    check_pair(human, human_ref, "human")?;
    if human.iter().any(|r| r.len() != mask.len()) {
        return Err(dim(format!("mask covers {} channels", mask.len())));
    }
    Ok(human
        .iter()
        .zip(human_ref)
        .map(|(a, b)| {
            let mut g = vec![0.0; a.len()];
            add_norm_grad(&mut g, &masked(a, mask), &masked(b, mask), beta);
            add_norm_grad(&mut g, a, b, 1.0 / beta);
            g
        })
        .collect())
}

/// Per-frame contact indicators for each hand, frozen for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct HandIndicators {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

/// One marker/object-vertex pair with its reference distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignPair {
    pub frame: usize,
    /// Index into the model's marker list.
    pub marker: usize,
    /// Rest-frame object vertex.
    pub object_vertex: usize,
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignmentReference {
    pub pairs: Vec<AlignPair>,
}

impl AlignmentReference {
    /// Pairs between every marker and every sampled object vertex whose
    /// distance in the given configuration is at most `cutoff`.
    pub fn build(
        model: &SkinnedModel,
        object: &ObjectModel,
        poses: &[Vec<f64>],
        objects: &[ObjectState],
        cutoff: f64,
    ) -> Result<Self, LossError> {
        if poses.len() != objects.len() {
            return Err(dim("pose and object trajectories differ in length"));
        }
        let mut pairs = Vec::new();
        for (frame, (channels, state)) in poses.iter().zip(objects).enumerate() {
            let markers = skin_markers(model, channels)?;
            let of = state.transform();
            for &k in object.samples() {
                let v = of.apply(&object.mesh().vertices()[k]);
                for (marker, m) in markers.iter().enumerate() {
                    let d = (m - v).norm();
                    if d <= cutoff {
                        pairs.push(AlignPair { frame, marker, object_vertex: k, reference: d });
                    }
                }
            }
        }
        pairs.sort_by_key(|p| (p.frame, p.marker, p.object_vertex));
        Ok(AlignmentReference { pairs })
    }
}

/// Markers of one rig pose.
pub fn skin_markers(model: &SkinnedModel, channels: &[f64]) -> Result<Vec<Point>, LossError> {
    let pose = Pose::from_channels(channels, model.joint_count())?;
    let joints = forward_kinematics(&model.skeleton, &pose)?;
    Ok(model.skin_subset(&joints, &model.marker_ids))
}

/// Per-hand, per-frame indicators from the minimum hand-vertex distance to the object.
pub fn hand_indicators(
    model: &SkinnedModel,
    object: &ObjectModel,
    poses: &[Vec<f64>],
    objects: &[ObjectState],
    cfg: &LossConfig,
) -> Result<HandIndicators, LossError> {
    if poses.len() != objects.len() {
        return Err(dim("pose and object trajectories differ in length"));
    }
    let hands = [model.hand_vertices(&model.left_hand), model.hand_vertices(&model.right_hand)];
    let mut out = [Vec::new(), Vec::new()];
    for (channels, state) in poses.iter().zip(objects) {
        let pose = Pose::from_channels(channels, model.joint_count())?;
        let joints = forward_kinematics(&model.skeleton, &pose)?;
        let of = state.transform();
        for (h, ids) in hands.iter().enumerate() {
            let c = if ids.is_empty() {
                0.0
            } else {
                let min = model
                    .skin_subset(&joints, ids)
                    .iter()
                    .map(|x| object.nearest(&of, x).distance)
                    .fold(f64::INFINITY, f64::min);
                contact_indicator(min, cfg)
            };
            out[h].push(c);
        }
    }
    let [left, right] = out;
    Ok(HandIndicators { left, right })
}

/// Everything an objective evaluation may read. Stages error on missing inputs.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveState<'a> {
    pub model: &'a SkinnedModel,
    pub object: &'a ObjectModel,
    /// Current rig channels, L×C.
    pub poses: &'a [Vec<f64>],
    pub objects: &'a [ObjectState],
    pub reference_poses: Option<&'a [Vec<f64>]>,
    pub reference_objects: Option<&'a [ObjectState]>,
    pub indicators: Option<&'a HandIndicators>,
    pub alignment: Option<&'a AlignmentReference>,
    /// Channels of joints not involved in the interaction.
    pub regularization_mask: Option<&'a [bool]>,
}

/// Raw term values and their weighted contributions. Serializes as term-name
/// maps plus the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub raw: [f64; 7],
    pub weighted: [f64; 7],
}

impl Serialize for LossBreakdown {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let named = |values: &[f64; 7]| -> std::collections::BTreeMap<&'static str, f64> {
            Term::ALL.iter().map(|t| (t.name(), values[t.index()])).collect()
        };
        let mut st = serializer.serialize_struct("LossBreakdown", 3)?;
        st.serialize_field("total", &self.total())?;
        st.serialize_field("raw", &named(&self.raw))?;
        st.serialize_field("weighted", &named(&self.weighted))?;
        st.end()
    }
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.weighted.iter().sum()
    }

    pub fn raw(&self, term: Term) -> f64 {
        self.raw[term.index()]
    }

    pub fn weighted(&self, term: Term) -> f64 {
        self.weighted[term.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGradient {
    pub poses: Vec<Vec<f64>>,
    pub objects: Vec<[f64; 6]>,
}

pub fn stage_terms(stage: Stage) -> &'static [Term] {
    match stage {
        Stage::Hand => &[Term::Contact, Term::Penetration, Term::Smoothness, Term::Prior],
        Stage::FullBody => &[Term::Penetration, Term::Smoothness, Term::Reconstruction],
        Stage::Augment => &[Term::Alignment, Term::Regularization, Term::Smoothness],
    }
}

/// Weighted sum of the stage's terms. Terms with zero weight are skipped and
/// reported as zero.
pub fn evaluate_objective(stage: Stage, state: &ObjectiveState, cfg: &LossConfig) -> Result<(f64, LossBreakdown), LossError> {
    let (b, _) = objective_impl(stage, state, cfg, false)?;
    Ok((b.total(), b))
}

pub fn objective_gradient(
    stage: Stage,
    state: &ObjectiveState,
    cfg: &LossConfig,
) -> Result<(f64, LossBreakdown, ObjectiveGradient), LossError> {
    let (b, g) = objective_impl(stage, state, cfg, true)?;
    Ok((b.total(), b, g))
}

fn require<T>(stage: Stage, v: Option<T>, what: &'static str) -> Result<T, LossError> {
    v.ok_or(LossError::MissingInput { stage, what })
}

fn check_state(stage: Stage, s: &ObjectiveState) -> Result<(), LossError> {
    let frames = s.poses.len();
    let channels = s.model.channel_count();
    if frames < 2 {
        return Err(dim(format!("objective needs at least 2 frames, got {frames}")));
    }
    if s.objects.len() != frames {
        return Err(dim(format!("{frames} pose frames, {} object frames", s.objects.len())));
    }
    if s.poses.iter().any(|p| p.len() != channels) {
        return Err(dim(format!("pose rows must have {channels} channels")));
    }
    match stage {
        Stage::Hand => {
            let ind = require(stage, s.indicators, "hand contact indicators")?;
            if ind.left.len() != frames || ind.right.len() != frames {
                return Err(dim("indicator length differs from frame count"));
            }
        }
        Stage::FullBody => {
            let rp = require(stage, s.reference_poses, "reference poses")?;
            let ro = require(stage, s.reference_objects, "reference object poses")?;
            if rp.len() != frames || ro.len() != frames || rp.iter().any(|p| p.len() != channels) {
                return Err(dim("reference trajectories differ in shape"));
            }
        }
        Stage::Augment => {
            let al = require(stage, s.alignment, "alignment reference")?;
            let rp = require(stage, s.reference_poses, "reference poses")?;
            let mask = require(stage, s.regularization_mask, "regularization mask")?;
            if rp.len() != frames || rp.iter().any(|p| p.len() != channels) || mask.len() != channels {
                return Err(dim("reference poses or mask differ in shape"));
            }
            let markers = s.model.marker_ids.len();
            let verts = s.object.mesh().vertices().len();
            if al.pairs.iter().any(|p| p.frame >= frames || p.marker >= markers || p.object_vertex >= verts) {
                return Err(dim("alignment pair out of range"));
            }
        }
    }
    Ok(())
}

#[derive(Default)]
struct FrameTerms {
    raw: [f64; 7],
    pose_grad: Vec<f64>,
    object_grad: [f64; 6],
}

/// Accumulates gradients on points rigidly attached to the object.
struct ObjectWrench {
    force: Vec3,
    torque: Vec3,
}

impl ObjectWrench {
    fn add(&mut self, frame: &RigidTransform, point: &Point, g: Vec3) {
        self.force += g;
        self.torque += (point.coords - frame.translation).cross(&g);
    }

    fn to_grad(&self, state: &ObjectState, frame: &RigidTransform) -> [f64; 6] {
        let r = right_jacobian(&state.rotation).transpose() * (frame.rotation.transpose() * self.torque);
        [r.x, r.y, r.z, self.force.x, self.force.y, self.force.z]
    }
}

struct FrameContext<'a> {
    stage: Stage,
    state: &'a ObjectiveState<'a>,
    weights: &'a TermWeights,
    cfg: &'a LossConfig,
    hands: [Vec<usize>; 2],
    pairs_by_frame: Vec<&'a [AlignPair]>,
    want_grad: bool,
}

fn frame_terms(ctx: &FrameContext, i: usize) -> Result<FrameTerms, LossError> {
    let s = ctx.state;
    let model = s.model;
    let pose = Pose::from_channels(&s.poses[i], model.joint_count())?;
    let joints = forward_kinematics(&model.skeleton, &pose)?;
    let of = s.objects[i].transform();
    let mut out = FrameTerms::default();
    let mut human: Vec<(usize, Vec3)> = Vec::new();
    let mut wrench = ObjectWrench { force: Vec3::zeros(), torque: Vec3::zeros() };
    let w = |t: Term| ctx.weights.get(t);

    if ctx.stage == Stage::Hand && w(Term::Contact) > 0.0 {
        let ind = s.indicators.expect("checked");
        for (ids, c) in ctx.hands.iter().zip([ind.left[i], ind.right[i]]) {
            if c == 0.0 || ids.is_empty() {
                continue;
            }
            for (&v, x) in ids.iter().zip(model.skin_subset(&joints, ids)) {
                let hit = s.object.nearest(&of, &x);
                out.raw[Term::Contact.index()] += c * hit.distance;
                if ctx.want_grad && hit.distance > 0.0 {
                    let g = (x - hit.point) * (w(Term::Contact) * c / hit.distance);
                    human.push((v, g));
                    wrench.add(&of, &hit.point, -g);
                }
            }
        }
    }

    if matches!(ctx.stage, Stage::Hand | Stage::FullBody) && w(Term::Penetration) > 0.0 {
        let index = model.posed_surface(model.skin_all(&joints))?;
        if !index.is_watertight() {
            return Err(LossError::NotWatertight { frame: i });
        }
        let (lo, hi) = index.bounds();
        for rest in s.object.mesh().vertices() {
            let p = of.apply(rest);
            if (0..3).any(|a| p[a] < lo[a] || p[a] > hi[a]) {
                continue;
            }
            let (hit, sign) = index.signed_query(&p);
            if sign >= 0.0 || hit.distance == 0.0 {
                continue;
            }
            out.raw[Term::Penetration.index()] += hit.distance;
            if ctx.want_grad {
                let u = (p - hit.point) * (w(Term::Penetration) / hit.distance);
                wrench.add(&of, &p, u);
                let face = model.faces[hit.face];
                for (corner, &b) in face.iter().zip(&hit.barycentric) {
                    if b != 0.0 {
                        human.push((*corner, -u * b));
                    }
                }
            }
        }
    }

    if ctx.stage == Stage::Augment && w(Term::Alignment) > 0.0 {
        let pairs = ctx.pairs_by_frame[i];
        if !pairs.is_empty() {
            let markers = model.skin_subset(&joints, &model.marker_ids);
            let eps = ctx.cfg.align_epsilon;
            for p in pairs {
                let m = markers[p.marker];
                let v = of.apply(&s.object.mesh().vertices()[p.object_vertex]);
                let d = (m - v).norm();
                let e = d - p.reference;
                let weight = 1.0 / ((p.reference + eps) * (p.reference + eps));
                out.raw[Term::Alignment.index()] += weight * e * e;
                if ctx.want_grad && d > 0.0 {
                    let g = (m - v) * (w(Term::Alignment) * 2.0 * weight * e / d);
                    human.push((model.marker_ids[p.marker], g));
                    wrench.add(&of, &v, -g);
                }
            }
        }
    }

    if ctx.want_grad {
        out.pose_grad =
            if human.is_empty() { vec![0.0; model.channel_count()] } else { model.pose_vjp(&pose, &joints, &human) };
        out.object_grad = wrench.to_grad(&s.objects[i], &of);
    }
    Ok(out)
}

fn columns(rows: &[Vec<f64>], cols: &[usize]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| cols.iter().map(|&c| r[c]).collect()).collect()
}

fn scatter(into: &mut [Vec<f64>], grad: &[Vec<f64>], cols: &[usize], scale: f64) {
    for (dst, src) in into.iter_mut().zip(grad) {
        for (&c, g) in cols.iter().zip(src) {
            dst[c] += scale * g;
        }
    }
}

fn object_rows(objects: &[ObjectState]) -> Vec<Vec<f64>> {
    objects.iter().map(|o| o.to_array().to_vec()).collect()
}

fn objective_impl(
    stage: Stage,
    state: &ObjectiveState,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, ObjectiveGradient), LossError> {
    cfg.validate()?;
    check_state(stage, state)?;
    let model = state.model;
    let frames = state.poses.len();
    let weights = cfg.weights(stage);
    let w = |t: Term| weights.get(t);

    let mut pairs_by_frame: Vec<&[AlignPair]> = vec![&[]; frames];
    if let Some(al) = state.alignment {
        let mut start = 0;
        for (f, slot) in pairs_by_frame.iter_mut().enumerate() {
            let end = start + al.pairs[start..].iter().take_while(|p| p.frame == f).count();
            *slot = &al.pairs[start..end];
            start = end;
        }
        if start != al.pairs.len() {
            return Err(dim("alignment pairs must be sorted by frame"));
        }
    }
    let ctx = FrameContext {
        stage,
        state,
        weights,
        cfg,
        hands: [model.hand_vertices(&model.left_hand), model.hand_vertices(&model.right_hand)],
        pairs_by_frame,
        want_grad,
    };
    let per_frame: Vec<FrameTerms> =
        (0..frames).into_par_iter().map(|i| frame_terms(&ctx, i)).collect::<Result<_, _>>()?;

    let mut raw = [0.0; 7];
    let mut pose_grad = vec![vec![0.0; model.channel_count()]; if want_grad { frames } else { 0 }];
    let mut object_grad = vec![[0.0; 6]; if want_grad { frames } else { 0 }];
    for (i, f) in per_frame.iter().enumerate() {
        for (r, v) in raw.iter_mut().zip(&f.raw) {
            *r += v;
        }
        if want_grad {
            pose_grad[i] = f.pose_grad.clone();
            object_grad[i] = f.object_grad;
        }
    }

    if w(Term::Smoothness) > 0.0 {
        let cols: Vec<usize> = match stage {
            Stage::Hand => model.channels_in(&[ChannelGroup::LeftHand, ChannelGroup::RightHand]),
            _ => (0..model.channel_count()).collect(),
        };
        if !cols.is_empty() {
            let traj = columns(state.poses, &cols);
            let (v, g) = smoothness_with_grad(&traj, want_grad)?;
            raw[Term::Smoothness.index()] += v;
            if want_grad {
                scatter(&mut pose_grad, &g, &cols, w(Term::Smoothness));
            }
        }
        if stage == Stage::FullBody {
            let (v, g) = smoothness_with_grad(&object_rows(state.objects), want_grad)?;
            raw[Term::Smoothness.index()] += v;
            if want_grad {
                for (dst, src) in object_grad.iter_mut().zip(&g) {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w(Term::Smoothness) * s;
                    }
                }
            }
        }
    }

    if stage == Stage::Hand && w(Term::Prior) > 0.0 {
        let cols = model.channels_in(&[ChannelGroup::LeftHand, ChannelGroup::RightHand]);
        if !cols.is_empty() {
            let bounds = model.rom.select(&cols.iter().map(|c| c - 3).collect::<Vec<_>>());
            let (v, g) = prior_with_grad(&columns(state.poses, &cols), &bounds, want_grad)?;
            raw[Term::Prior.index()] += v;
            if want_grad {
                scatter(&mut pose_grad, &g, &cols, w(Term::Prior));
            }
        }
    }

    if stage == Stage::FullBody && w(Term::Reconstruction) > 0.0 {
        let hr = state.reference_poses.expect("checked");
        let (o, or) = (object_rows(state.objects), object_rows(state.reference_objects.expect("checked")));
        raw[Term::Reconstruction.index()] += reconstruction_loss(state.poses, hr, &o, &or)?;
        if want_grad {
            let (gh, go) = reconstruction_grad(state.poses, hr, &o, &or)?;
            let all: Vec<usize> = (0..model.channel_count()).collect();
            scatter(&mut pose_grad, &gh, &all, w(Term::Reconstruction));
            for (dst, src) in object_grad.iter_mut().zip(&go) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w(Term::Reconstruction) * s;
                }
            }
        }
    }

    if stage == Stage::Augment && w(Term::Regularization) > 0.0 {
        let hr = state.reference_poses.expect("checked");
        let mask = state.regularization_mask.expect("checked");
        raw[Term::Regularization.index()] += regularization_loss(state.poses, hr, mask, cfg.beta)?;
        if want_grad {
            let g = regularization_grad(state.poses, hr, mask, cfg.beta)?;
            let all: Vec<usize> = (0..model.channel_count()).collect();
            scatter(&mut pose_grad, &g, &all, w(Term::Regularization));
        }
    }

    let mut weighted = [0.0; 7];
    for t in Term::ALL {
        weighted[t.index()] = if weights.get(t) > 0.0 { weights.get(t) * raw[t.index()] } else { 0.0 };
    }
    Ok((LossBreakdown { raw, weighted }, ObjectiveGradient { poses: pose_grad, objects: object_grad }))
}
