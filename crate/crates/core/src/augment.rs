//! Contact-invariant augmentation: displace the object by a constant offset,
//! re-align the body so close marker/object pairs keep their distances, then
//! filter out implausible results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::body::{forward_kinematics, BodyError, Pose, SkinnedModel};
use crate::geometry::{GeometryError, TriangleMesh};
use crate::losses::{
    evaluate_objective, objective_gradient, AlignmentReference, LossBreakdown, LossConfig, LossError, ObjectiveState,
    Stage,
};
use crate::math::{Point, Vec3};
use crate::metrics::{self, MetricsError};
use crate::optimize::{minimize, ArtifactMetrics, MinimizeResult, OptimizeError, OptimizerConfig};
use crate::scene::{ObjectModel, ObjectState};
use crate::sequence::{markers_from_rig, InteractionSequence, PoseTrack, SequenceError};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation configuration: {0}")]
    Config(String),
    #[error("object mesh is not watertight")]
    NotWatertight,
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentConfig {
    /// Radius of the horizontal disk offsets are drawn from.
    pub horizontal_radius: f64,
    /// Vertical offsets are drawn from `[-vertical_range, vertical_range]`.
    pub vertical_range: f64,
    pub seed: u64,
    pub iterations: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    /// Deepest allowed penetration in either direction.
    pub max_penetration: f64,
    /// Closest allowed approach of markers on non-adjacent segments.
    pub min_self_distance: f64,
    /// Largest allowed final objective per frame.
    pub max_final_loss: f64,
    /// Largest allowed change of a reference contact-pair distance.
    pub max_contact_drift: f64,
    /// Largest allowed marker acceleration, meters per frame squared.
    pub max_marker_acceleration: f64,
    pub contact_ratio_threshold: f64,
    pub sample_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            horizontal_radius: 0.30,
            vertical_range: 0.0,
            seed: 0,
            iterations: 300,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            max_penetration: 0.02,
            min_self_distance: 0.01,
            max_final_loss: 5.0,
            max_contact_drift: 0.005,
            max_marker_acceleration: 0.05,
            contact_ratio_threshold: 0.02,
            sample_seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let nonneg = [
            ("horizontal_radius", self.horizontal_radius),
            ("vertical_range", self.vertical_range),
            ("max_penetration", self.max_penetration),
            ("min_self_distance", self.min_self_distance),
            ("max_final_loss", self.max_final_loss),
            ("max_contact_drift", self.max_contact_drift),
            ("max_marker_acceleration", self.max_marker_acceleration),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AugmentError::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.iterations < 1 {
            return Err(AugmentError::Config("iterations must be at least 1".into()));
        }
        if !(self.contact_ratio_threshold > 0.0) {
            return Err(AugmentError::Config("contact_ratio_threshold must be positive".into()));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

/// Offset drawn uniformly from the horizontal disk (area-uniform) plus a
/// uniform vertical component.
pub fn sample_displacement(rng: &mut impl Rng, cfg: &AugmentConfig) -> Vec3 {
    let radius = cfg.horizontal_radius * rng.random::<f64>().sqrt();
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    let vertical = if cfg.vertical_range > 0.0 { rng.random_range(-cfg.vertical_range..=cfg.vertical_range) } else { 0.0 };
    Vec3::new(radius * angle.cos(), radius * angle.sin(), vertical)
}

/// Independent seed for attempt `index` of a run seeded with `seed`.
pub fn attempt_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pose-channel mask of joints not involved in the interaction (`true` means
/// regularized strongly). Involved joints are the dominant joints of markers
/// in a reference pair within `contact_threshold`, plus their ancestors
/// below the root.
pub fn interaction_mask(model: &SkinnedModel, reference: &AlignmentReference, contact_threshold: f64) -> Vec<bool> {
    let joints = model.joint_count();
    let mut involved = vec![false; joints];
    for pair in reference.pairs.iter().filter(|p| p.reference <= contact_threshold) {
        let mut joint = Some(model.dominant_joint(model.marker_ids[pair.marker]));
        while let Some(j) = joint {
            if model.skeleton.parent(j).is_none() {
                break;
            }
            involved[j] = true;
            joint = model.skeleton.parent(j);
        }
    }
    let mut mask = vec![true; model.channel_count()];
    for (j, &inv) in involved.iter().enumerate() {
        if inv {
            mask[3 + 3 * j..6 + 3 * j].fill(false);
        }
    }
    mask
}

fn pose_frames(seq: &InteractionSequence) -> Result<Vec<Vec<f64>>, SequenceError> {
    (0..seq.frames()).map(|i| seq.pose_channels(i)).collect()
}

fn object_states(seq: &InteractionSequence) -> Vec<ObjectState> {
    seq.object_pose.iter().map(ObjectState::from_pose).collect()
}

/// The sequence with every object translation shifted by `offset` (rounded
/// to storage precision once, then added per frame).
pub fn displace_object(seq: &InteractionSequence, offset: &Vec3) -> InteractionSequence {
    let delta = [offset.x as f32, offset.y as f32, offset.z as f32];
    let mut out = seq.clone();
    for pose in &mut out.object_pose {
        for k in 0..3 {
            pose.translation[k] += delta[k];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentResult {
    #[serde(skip)]
    pub sequence: InteractionSequence,
    pub initial: LossBreakdown,
    pub best: LossBreakdown,
    pub result: MinimizeResult,
}

fn augment_state<'a>(
    model: &'a SkinnedModel,
    object: &'a ObjectModel,
    poses: &'a [Vec<f64>],
    objects: &'a [ObjectState],
    reference_poses: &'a [Vec<f64>],
    reference: &'a AlignmentReference,
    mask: &'a [bool],
) -> ObjectiveState<'a> {
    ObjectiveState {
        model,
        object,
        poses,
        objects,
        reference_poses: Some(reference_poses),
        reference_objects: None,
        indicators: None,
        alignment: Some(reference),
        regularization_mask: Some(mask),
    }
}

/// Optimizes all pose channels of `displaced` so marker/object distances
/// follow `reference`, with the object trajectory held fixed.
pub fn align_human(
    displaced: &InteractionSequence,
    reference_poses: &[Vec<f64>],
    reference: &AlignmentReference,
    mask: &[bool],
    model: &SkinnedModel,
    object: &ObjectModel,
    cfg: &AugmentConfig,
) -> Result<AlignmentResult, AugmentError> {
    let objects = object_states(displaced);
    let start = pose_frames(displaced)?;
    let channels = model.channel_count();
    let mut work = start.clone();
    let mut eval = |x: &[f64], want: bool| -> Result<(f64, Vec<f64>), OptimizeError> {
        for (row, chunk) in work.iter_mut().zip(x.chunks(channels)) {
            row.copy_from_slice(chunk);
        }
        if want {
            let (loss, _, g) = objective_gradient(Stage::Augment, &augment_state(model, object, &work, &objects, reference_poses, reference, mask), &cfg.loss)?;
            Ok((loss, g.poses.concat()))
        } else {
            Ok((evaluate_objective(Stage::Augment, &augment_state(model, object, &work, &objects, reference_poses, reference, mask), &cfg.loss)?.0, Vec::new()))
        }
    };
    let opt = OptimizerConfig { iterations: cfg.iterations, ..cfg.optimizer.clone() };
    let result = minimize(&start.concat(), &opt, &mut eval)?;
    let best_poses: Vec<Vec<f64>> = result.params.chunks(channels).map(<[f64]>::to_vec).collect();
    let initial = evaluate_objective(Stage::Augment, &augment_state(model, object, &start, &objects, reference_poses, reference, mask), &cfg.loss)?.1;
    let best = evaluate_objective(Stage::Augment, &augment_state(model, object, &best_poses, &objects, reference_poses, reference, mask), &cfg.loss)?.1;

    let mut sequence = displaced.clone();
    sequence.pose = Some(PoseTrack::from_frames(&best_poses));
    let markers = markers_from_rig(&sequence, model, &model.marker_ids)?;
    sequence.set_markers(&markers);
    Ok(AlignmentResult { sequence, initial, best, result })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// Human and object interpenetrate beyond the allowed depth.
    Penetration,
    /// Markers of non-adjacent body segments come too close.
    SelfPenetration,
    /// Some object vertex lies below the ground plane.
    BelowGround,
    /// The final objective is too high or reference contacts drifted.
    AlignmentLoss,
    /// Marker acceleration exceeds the limit.
    Jitter,
}

/// Measurements behind a filter decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FilterMeasurements {
    pub penetration_depth: f64,
    pub min_self_distance: f64,
    pub min_object_height: f64,
    pub final_loss_per_frame: f64,
    pub max_contact_drift: f64,
    pub max_marker_acceleration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterVerdict {
    pub accepted: bool,
    /// Every violated criterion, sorted.
    pub reasons: Vec<RejectReason>,
    pub measurements: FilterMeasurements,
}

/// Deepest penetration per frame in either direction: human vertices inside
/// the object, or object vertices inside the body.
fn two_way_penetration(
    model: &SkinnedModel,
    poses: &[Vec<f64>],
    object: &ObjectModel,
    objects: &[ObjectState],
) -> Result<f64, AugmentError> {
    let human = metrics::skin_frames(model, poses)?;
    let into_object = metrics::penetration_per_frame(&human, object, objects)?;
    let mut deepest = into_object.iter().copied().fold(0.0, f64::max);
    for (vertices, state) in human.into_iter().zip(objects) {
        deepest = deepest.max(object_inside_body(model, vertices, object, state)?);
    }
    Ok(deepest)
}

fn object_inside_body(
    model: &SkinnedModel,
    vertices: Vec<Point>,
    object: &ObjectModel,
    state: &ObjectState,
) -> Result<f64, AugmentError> {
    let surface = model.posed_surface(vertices)?;
    let frame = state.transform();
    Ok(object
        .mesh()
        .vertices()
        .iter()
        .map(|v| frame.apply(v))
        .filter(|p| surface.bounds_contain(p))
        .map(|p| -surface.signed_distance(&p))
        .fold(0.0, f64::max))
}

fn min_object_height(object: &ObjectModel, objects: &[ObjectState]) -> f64 {
    objects
        .iter()
        .flat_map(|s| {
            let frame = s.transform();
            object.mesh().vertices().iter().map(move |v| frame.apply(v).z)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Marker index pairs whose dominant joints are not equal, parent and
/// child, or siblings. Neighboring fingers sit close by design.
fn separated_marker_pairs(model: &SkinnedModel) -> Vec<(usize, usize)> {
    let joints: Vec<usize> = model.marker_ids.iter().map(|&v| model.dominant_joint(v)).collect();
    let parent = |j: usize| model.skeleton.parent(j);
    let adjacent = |a: usize, b: usize| a == b || parent(a) == Some(b) || parent(b) == Some(a) || parent(a) == parent(b);
    let mut pairs = Vec::new();
    for a in 0..joints.len() {
        for b in a + 1..joints.len() {
            if !adjacent(joints[a], joints[b]) {
                pairs.push((a, b));
            }
        }
    }
    pairs
}

fn max_marker_acceleration(seq: &InteractionSequence) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 1..seq.frames().saturating_sub(1) {
        for m in 0..seq.marker_count {
            let acc = seq.marker(i + 1, m) - 2.0 * seq.marker(i, m).coords + seq.marker(i - 1, m).coords;
            worst = worst.max(acc.coords.norm());
        }
    }
    worst
}

/// Checks an aligned candidate against the original it was derived from.
/// Reference pairs, the interaction mask and the final objective are all
/// recomputed here, so the verdict depends only on the two sequences.
pub fn filter_augmentation(
    candidate: &InteractionSequence,
    original: &InteractionSequence,
    model: &SkinnedModel,
    object: &ObjectModel,
    cfg: &AugmentConfig,
) -> Result<FilterVerdict, AugmentError> {
    cfg.validate()?;
    if candidate.frames() != original.frames() || candidate.marker_count != original.marker_count {
        return Err(SequenceError::Invalid("candidate and original differ in shape".into()).into());
    }
    let ref_poses = pose_frames(original)?;
    let poses = pose_frames(candidate)?;
    let ref_objects = object_states(original);
    let objects = object_states(candidate);
    let reference = AlignmentReference::build(model, object, &ref_poses, &ref_objects, cfg.loss.align_pair_cutoff)?;
    let mask = interaction_mask(model, &reference, cfg.loss.contact_threshold);

    let state = augment_state(model, object, &poses, &objects, &ref_poses, &reference, &mask);
    let final_loss = evaluate_objective(Stage::Augment, &state, &cfg.loss)?.0 / candidate.frames() as f64;

    let mut drift: f64 = 0.0;
    for pair in reference.pairs.iter().filter(|p| p.reference <= cfg.loss.contact_threshold) {
        let frame = objects[pair.frame].transform();
        let v = frame.apply(&object.mesh().vertices()[pair.object_vertex]);
        drift = drift.max(((candidate.marker(pair.frame, pair.marker) - v).norm() - pair.reference).abs());
    }

    let mut self_distance = f64::INFINITY;
    let pairs = separated_marker_pairs(model);
    for i in 0..candidate.frames() {
        for &(a, b) in &pairs {
            self_distance = self_distance.min((candidate.marker(i, a) - candidate.marker(i, b)).norm());
        }
    }

    let measurements = FilterMeasurements {
        penetration_depth: two_way_penetration(model, &poses, object, &objects)?,
        min_self_distance: self_distance,
        min_object_height: min_object_height(object, &objects),
        final_loss_per_frame: final_loss,
        max_contact_drift: drift,
        max_marker_acceleration: max_marker_acceleration(candidate),
    };
    let mut reasons = Vec::new();
    if measurements.penetration_depth > cfg.max_penetration {
        reasons.push(RejectReason::Penetration);
    }
    if measurements.min_self_distance < cfg.min_self_distance {
        reasons.push(RejectReason::SelfPenetration);
    }
    if measurements.min_object_height < candidate.ground_height {
        reasons.push(RejectReason::BelowGround);
    }
    if !(final_loss <= cfg.max_final_loss) || drift > cfg.max_contact_drift {
        reasons.push(RejectReason::AlignmentLoss);
    }
    if measurements.max_marker_acceleration > cfg.max_marker_acceleration {
        reasons.push(RejectReason::Jitter);
    }
    Ok(FilterVerdict { accepted: reasons.is_empty(), reasons, measurements })
}

/// Outcome of one augmentation attempt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentOutcome {
    pub seed: u64,
    pub offset: [f64; 3],
    /// Reasons the displacement itself was refused; alignment is skipped then.
    pub initial_reasons: Vec<RejectReason>,
    pub verdict: Option<FilterVerdict>,
    pub alignment: Option<AlignmentResult>,
    pub before: ArtifactMetrics,
    pub after: Option<ArtifactMetrics>,
    #[serde(skip)]
    pub accepted: Option<InteractionSequence>,
}

impl AugmentOutcome {
    pub fn is_accepted(&self) -> bool {
        self.accepted.is_some()
    }

    /// Every reason the attempt was rejected, sorted.
    pub fn reasons(&self) -> Vec<RejectReason> {
        let mut all = self.initial_reasons.clone();
        if let Some(v) = &self.verdict {
            all.extend(&v.reasons);
        }
        all.sort_unstable();
        all.dedup();
        all
    }
}

fn artifact_metrics(
    model: &SkinnedModel,
    seq: &InteractionSequence,
    object: &ObjectModel,
    threshold: f64,
) -> Result<ArtifactMetrics, AugmentError> {
    let human = metrics::skin_frames(model, &pose_frames(seq)?)?;
    let objects = object_states(seq);
    Ok(ArtifactMetrics {
        penetration_depth: metrics::penetration_depth(&human, object, &objects)?,
        contact_ratio: metrics::contact_ratio(&human, object, &objects, threshold)?,
    })
}

fn prepare(
    seq: &InteractionSequence,
    model: &SkinnedModel,
    object_mesh: &TriangleMesh,
    cfg: &AugmentConfig,
) -> Result<ObjectModel, AugmentError> {
    cfg.validate()?;
    seq.validate()?;
    let track = seq.pose.as_ref().ok_or(SequenceError::MissingPose)?;
    if track.channels != model.channel_count() {
        return Err(BodyError::ChannelCount { expected: model.channel_count(), got: track.channels }.into());
    }
    let object = ObjectModel::new(object_mesh.clone(), cfg.loss.align_max_samples, cfg.sample_seed)?;
    if !object.index().is_watertight() {
        return Err(AugmentError::NotWatertight);
    }
    Ok(object)
}

/// Runs displacement, alignment and filtering for a fixed offset.
pub fn augment_with_offset(
    seq: &InteractionSequence,
    model: &SkinnedModel,
    object_mesh: &TriangleMesh,
    offset: Vec3,
    cfg: &AugmentConfig,
) -> Result<AugmentOutcome, AugmentError> {
    let object = prepare(seq, model, object_mesh, cfg)?;
    attempt(seq, model, &object, offset, cfg.seed, cfg)
}

fn attempt(
    seq: &InteractionSequence,
    model: &SkinnedModel,
    object: &ObjectModel,
    offset: Vec3,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<AugmentOutcome, AugmentError> {
    let before = artifact_metrics(model, seq, object, cfg.contact_ratio_threshold)?;
    let displaced = displace_object(seq, &offset);
    let mut outcome = AugmentOutcome {
        seed,
        offset: [offset.x, offset.y, offset.z],
        initial_reasons: Vec::new(),
        verdict: None,
        alignment: None,
        before,
        after: None,
        accepted: None,
    };

    let objects = object_states(&displaced);
    if min_object_height(object, &objects) < seq.ground_height {
        outcome.initial_reasons.push(RejectReason::BelowGround);
    }
    let first_pose = Pose::from_channels(&seq.pose_channels(0)?, model.joint_count())?;
    let first_body = model.skin_all(&forward_kinematics(&model.skeleton, &first_pose)?);
    if object_inside_body(model, first_body, object, &objects[0])? > cfg.max_penetration {
        outcome.initial_reasons.push(RejectReason::Penetration);
    }
    if !outcome.initial_reasons.is_empty() {
        return Ok(outcome);
    }

    let ref_poses = pose_frames(seq)?;
    let reference = AlignmentReference::build(model, object, &ref_poses, &object_states(seq), cfg.loss.align_pair_cutoff)?;
    let mask = interaction_mask(model, &reference, cfg.loss.contact_threshold);
    let aligned = align_human(&displaced, &ref_poses, &reference, &mask, model, object, cfg)?;
    let verdict = filter_augmentation(&aligned.sequence, seq, model, object, cfg)?;
    outcome.after = Some(artifact_metrics(model, &aligned.sequence, object, cfg.contact_ratio_threshold)?);
    if verdict.accepted {
        outcome.accepted = Some(aligned.sequence.clone());
    }
    log::info!("augmentation seed {seed}: offset {offset:?}, reasons {:?}", verdict.reasons);
    outcome.verdict = Some(verdict);
    outcome.alignment = Some(aligned);
    Ok(outcome)
}

/// One augmentation attempt with the offset drawn from `cfg.seed`.
pub fn augment_sequence(
    seq: &InteractionSequence,
    model: &SkinnedModel,
    object_mesh: &TriangleMesh,
    cfg: &AugmentConfig,
) -> Result<AugmentOutcome, AugmentError> {
    let object = prepare(seq, model, object_mesh, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let offset = sample_displacement(&mut rng, cfg);
    attempt(seq, model, &object, offset, cfg.seed, cfg)
}
