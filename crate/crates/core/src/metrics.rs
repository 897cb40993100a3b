//! Geometric evaluation metrics for interaction sequences.
//!
//! Per-frame work runs in parallel; frame values are collected in order and
//! reduced sequentially, so results do not depend on the thread count.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::body::{forward_kinematics, BodyError, Pose, SkinnedModel};
use crate::geometry::{GeometryError, TriangleMesh};
use crate::math::Point;
use crate::scene::{to_local, ObjectModel, ObjectState};
use crate::sequence::{ContactLabels, InteractionSequence, ObjectPose, SequenceError};

const QUAT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Dimension(String),
    #[error("object mesh is not watertight")]
    NotWatertight,
    #[error("marker id {id} out of range for {markers} markers")]
    UnknownMarker { id: usize, markers: usize },
    #[error("frame {frame}: quaternion norm {norm} is not within 1e-6 of 1")]
    NonUnitQuaternion { frame: usize, norm: f64 },
    #[error("invalid metric parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn dim(msg: impl Into<String>) -> MetricsError {
    MetricsError::Dimension(msg.into())
}

/// What stood in for the human surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanSource {
    SkinnedVertices,
    Markers,
}

/// Skinned vertices of every frame.
pub fn skin_frames(model: &SkinnedModel, poses: &[Vec<f64>]) -> Result<Vec<Vec<Point>>, BodyError> {
    poses
        .par_iter()
        .map(|channels| {
            let pose = Pose::from_channels(channels, model.joint_count())?;
            Ok(model.skin_all(&forward_kinematics(&model.skeleton, &pose)?))
        })
        .collect()
}

/// Skinned vertices when a rig and pose track are available, markers otherwise.
pub fn human_points(
    seq: &InteractionSequence,
    model: Option<&SkinnedModel>,
) -> Result<(Vec<Vec<Point>>, HumanSource), MetricsError> {
    if let (Some(model), Some(_)) = (model, seq.pose.as_ref()) {
        let poses = (0..seq.frames()).map(|i| seq.pose_channels(i)).collect::<Result<Vec<_>, _>>()?;
        return Ok((skin_frames(model, &poses)?, HumanSource::SkinnedVertices));
    }
    Ok(((0..seq.frames()).map(|i| seq.frame_markers(i)).collect(), HumanSource::Markers))
}

fn check_frames(human: &[Vec<Point>], objects: &[ObjectState]) -> Result<(), MetricsError> {
    if human.len() != objects.len() {
        return Err(dim(format!("{} human frames, {} object frames", human.len(), objects.len())));
    }
    if human.is_empty() {
        return Err(dim("no frames"));
    }
    Ok(())
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Per-frame depth of the deepest human point inside the object, clamped at 0.
pub fn penetration_per_frame(
    human: &[Vec<Point>],
    object: &ObjectModel,
    objects: &[ObjectState],
) -> Result<Vec<f64>, MetricsError> {
    check_frames(human, objects)?;
    if !object.index().is_watertight() {
        return Err(MetricsError::NotWatertight);
    }
    let index = object.index();
    Ok(human
        .par_iter()
        .zip(objects.par_iter())
        .map(|(points, state)| {
            let frame = state.transform();
            points
                .iter()
                .map(|p| to_local(&frame, p))
                // only points inside the bounding box can have negative distance
                .filter(|q| index.bounds_contain(q))
                .map(|q| -index.signed_distance(&q))
                .fold(0.0, f64::max)
        })
        .collect())
}

pub fn penetration_depth(human: &[Vec<Point>], object: &ObjectModel, objects: &[ObjectState]) -> Result<f64, MetricsError> {
    Ok(mean(&penetration_per_frame(human, object, objects)?))
}

/// Per-frame fraction of human points within `threshold` of the object surface.
pub fn contact_ratio_per_frame(
    human: &[Vec<Point>],
    object: &ObjectModel,
    objects: &[ObjectState],
    threshold: f64,
) -> Result<Vec<f64>, MetricsError> {
    check_frames(human, objects)?;
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(MetricsError::Invalid(format!("contact threshold must be positive, got {threshold}")));
    }
    let index = object.index();
    let (lo, hi) = index.bounds();
    let near_box = |q: &Point| (0..3).all(|k| q[k] >= lo[k] - threshold && q[k] <= hi[k] + threshold);
    Ok(human
        .par_iter()
        .zip(objects.par_iter())
        .map(|(points, state)| {
            if points.is_empty() {
                return 0.0;
            }
            let frame = state.transform();
            let hits = points
                .iter()
                .map(|p| to_local(&frame, p))
                .filter(|q| near_box(q) && index.nearest_surface_point(q).distance <= threshold)
                .count();
            hits as f64 / points.len() as f64
        })
        .collect())
}

pub fn contact_ratio(
    human: &[Vec<Point>],
    object: &ObjectModel,
    objects: &[ObjectState],
    threshold: f64,
) -> Result<f64, MetricsError> {
    Ok(mean(&contact_ratio_per_frame(human, object, objects, threshold)?))
}

/// Marker-object contact labels: true iff the marker lies within `threshold`
/// of the posed object surface.
pub fn contact_labels(seq: &InteractionSequence, object: &ObjectModel, threshold: f64) -> Result<ContactLabels, MetricsError> {
    if !(threshold.is_finite() && threshold >= 0.0) {
        return Err(MetricsError::Invalid(format!("contact threshold must be nonnegative, got {threshold}")));
    }
    let markers = seq.marker_count;
    let data: Vec<bool> = (0..seq.frames())
        .into_par_iter()
        .flat_map_iter(|i| {
            let frame = ObjectState::from_pose(&seq.object_pose[i]).transform();
            (0..markers).map(move |m| object.nearest(&frame, &seq.marker(i, m)).distance <= threshold).collect::<Vec<_>>()
        })
        .collect();
    Ok(ContactLabels::new(seq.frames(), markers, data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContactScores {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion-matrix scores over all (frame, marker) cells. Precision and
/// recall are 0 when their denominators are empty.
pub fn contact_prf(pred: &ContactLabels, gt: &ContactLabels) -> Result<ContactScores, MetricsError> {
    if pred.frames() != gt.frames() || pred.markers() != gt.markers() {
        return Err(dim(format!(
            "predicted labels are {}×{}, ground truth {}×{}",
            pred.frames(),
            pred.markers(),
            gt.frames(),
            gt.markers()
        )));
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in pred.cells().iter().zip(gt.cells()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(ContactScores { precision, recall, accuracy: ratio(tp + tn, tp + fp + fneg + tn), f1 })
}

/// Mean horizontal displacement per frame of foot markers over steps where
/// the marker is within `height_threshold` of the ground at both ends.
pub fn foot_sliding(seq: &InteractionSequence, foot_markers: &[usize], height_threshold: f64) -> Result<f64, MetricsError> {
    if let Some(&id) = foot_markers.iter().find(|&&id| id >= seq.marker_count) {
        return Err(MetricsError::UnknownMarker { id, markers: seq.marker_count });
    }
    let limit = seq.ground_height + height_threshold;
    let mut total = 0.0;
    let mut steps = 0usize;
    for &m in foot_markers {
        for i in 1..seq.frames() {
            let (a, b) = (seq.marker(i - 1, m), seq.marker(i, m));
            if a.z <= limit && b.z <= limit {
                total += (b.x - a.x).hypot(b.y - a.y);
                steps += 1;
            }
        }
    }
    Ok(if steps == 0 { 0.0 } else { total / steps as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MpmpeMode {
    Global,
    /// Each frame is expressed relative to its own root marker first.
    Local,
}

/// Mean per-marker position error over frames × markers.
pub fn mpmpe(pred: &[Vec<Point>], gt: &[Vec<Point>], mode: MpmpeMode, root_marker: usize) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(a, b)| a.len() != b.len()) {
        return Err(dim("predicted and ground-truth markers differ in shape"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, b) in pred.iter().zip(gt) {
        let (ra, rb) = match mode {
            MpmpeMode::Global => (Point::origin().coords, Point::origin().coords),
            MpmpeMode::Local => {
                if root_marker >= a.len() {
                    return Err(MetricsError::UnknownMarker { id: root_marker, markers: a.len() });
                }
                (a[root_marker].coords, b[root_marker].coords)
            }
        };
        for (p, q) in a.iter().zip(b) {
            total += ((p.coords - ra) - (q.coords - rb)).norm();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

fn quat_f64(pose: &ObjectPose, frame: usize) -> Result<[f64; 4], MetricsError> {
    let norm = pose.quaternion_norm();
    if (norm - 1.0).abs() > QUAT_TOLERANCE {
        return Err(MetricsError::NonUnitQuaternion { frame, norm });
    }
    Ok(pose.rotation.map(f64::from))
}

/// Mean translation distance and mean L1 quaternion distance. Both signs of
/// the predicted quaternion describe the same rotation; the closer one counts.
pub fn object_pose_errors(pred: &[ObjectPose], gt: &[ObjectPose]) -> Result<(f64, f64), MetricsError> {
    if pred.len() != gt.len() {
        return Err(dim(format!("{} predicted object frames, {} ground truth", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut t_sum, mut r_sum) = (0.0, 0.0);
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        let (qp, qg) = (quat_f64(p, i)?, quat_f64(g, i)?);
        t_sum += (p.translation_f64() - g.translation_f64()).norm();
        let l1 = |sign: f64| qp.iter().zip(&qg).map(|(a, b)| (sign * a - b).abs()).sum::<f64>();
        r_sum += l1(1.0).min(l1(-1.0));
    }
    let n = pred.len() as f64;
    Ok((t_sum / n, r_sum / n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluateConfig {
    pub contact_threshold: f64,
    pub foot_height_threshold: f64,
    /// Markers used for foot sliding; empty disables the metric.
    pub foot_markers: Vec<usize>,
    /// Marker subtracted per frame for local MPMPE.
    pub root_marker: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig { contact_threshold: 0.02, foot_height_threshold: 0.05, foot_markers: Vec::new(), root_marker: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerFrame {
    pub penetration_depth: Vec<f64>,
    pub contact_ratio: Vec<f64>,
}

/// Metrics of one sequence. Fields that need a reference sequence or foot
/// markers are `None` without them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub human_vertices: HumanSource,
    pub contact_threshold: f64,
    pub penetration_depth: f64,
    pub contact_ratio: f64,
    pub foot_sliding: Option<f64>,
    pub contact_precision: Option<f64>,
    pub contact_recall: Option<f64>,
    pub contact_accuracy: Option<f64>,
    pub contact_f1: Option<f64>,
    pub mpmpe_global: Option<f64>,
    pub mpmpe_local: Option<f64>,
    pub t_err: Option<f64>,
    pub rot_err: Option<f64>,
    pub per_frame: PerFrame,
}

impl MetricsReport {
    /// Scalar fields as `(name, value)` rows; absent values are omitted.
    pub fn scalar_rows(&self) -> Vec<(&'static str, f64)> {
        let optional = [
            ("foot_sliding", self.foot_sliding),
            ("contact_precision", self.contact_precision),
            ("contact_recall", self.contact_recall),
            ("contact_accuracy", self.contact_accuracy),
            ("contact_f1", self.contact_f1),
            ("mpmpe_global", self.mpmpe_global),
            ("mpmpe_local", self.mpmpe_local),
            ("t_err", self.t_err),
            ("rot_err", self.rot_err),
        ];
        let mut rows = vec![
            ("contact_threshold", self.contact_threshold),
            ("penetration_depth", self.penetration_depth),
            ("contact_ratio", self.contact_ratio),
        ];
        rows.extend(optional.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!(
            "human_vertices,{}\n",
            match self.human_vertices {
                HumanSource::SkinnedVertices => "skinned_vertices",
                HumanSource::Markers => "markers",
            }
        ));
        for (k, v) in self.scalar_rows() {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

/// Evaluates `seq`, comparing against `reference` when given. Ground-truth
/// contact comes from the reference's stored labels, or is measured on it.
pub fn evaluate(
    seq: &InteractionSequence,
    reference: Option<&InteractionSequence>,
    object_mesh: &TriangleMesh,
    model: Option<&SkinnedModel>,
    cfg: &EvaluateConfig,
) -> Result<MetricsReport, MetricsError> {
    seq.validate()?;
    let object = ObjectModel::new(object_mesh.clone(), 0, 0)?;
    let (human, source) = human_points(seq, model)?;
    let states: Vec<ObjectState> = seq.object_pose.iter().map(ObjectState::from_pose).collect();
    let pen = penetration_per_frame(&human, &object, &states)?;
    let ratio = contact_ratio_per_frame(&human, &object, &states, cfg.contact_threshold)?;
    let foot_sliding = if cfg.foot_markers.is_empty() {
        None
    } else {
        Some(foot_sliding(seq, &cfg.foot_markers, cfg.foot_height_threshold)?)
    };
    let mut report = MetricsReport {
        human_vertices: source,
        contact_threshold: cfg.contact_threshold,
        penetration_depth: mean(&pen),
        contact_ratio: mean(&ratio),
        foot_sliding,
        contact_precision: None,
        contact_recall: None,
        contact_accuracy: None,
        contact_f1: None,
        mpmpe_global: None,
        mpmpe_local: None,
        t_err: None,
        rot_err: None,
        per_frame: PerFrame { penetration_depth: pen, contact_ratio: ratio },
    };
    if let Some(gt) = reference {
        gt.validate()?;
        if gt.frames() != seq.frames() || gt.marker_count != seq.marker_count {
            return Err(dim("reference sequence differs in frames or markers"));
        }
        let pred_labels = contact_labels(seq, &object, cfg.contact_threshold)?;
        let gt_labels = match &gt.contact {
            Some(labels) => labels.clone(),
            None => contact_labels(gt, &object, cfg.contact_threshold)?,
        };
        let scores = contact_prf(&pred_labels, &gt_labels)?;
        report.contact_precision = Some(scores.precision);
        report.contact_recall = Some(scores.recall);
        report.contact_accuracy = Some(scores.accuracy);
        report.contact_f1 = Some(scores.f1);
        let a: Vec<Vec<Point>> = (0..seq.frames()).map(|i| seq.frame_markers(i)).collect();
        let b: Vec<Vec<Point>> = (0..gt.frames()).map(|i| gt.frame_markers(i)).collect();
        report.mpmpe_global = Some(mpmpe(&a, &b, MpmpeMode::Global, cfg.root_marker)?);
        report.mpmpe_local = Some(mpmpe(&a, &b, MpmpeMode::Local, cfg.root_marker)?);
        let (t, r) = object_pose_errors(&seq.object_pose, &gt.object_pose)?;
        report.t_err = Some(t);
        report.rot_err = Some(r);
    }
    Ok(report)
}
