//! Generic articulated skinned body: forward kinematics, linear blend
//! skinning and the reverse-mode derivative of skinned positions with respect
//! to pose channels.
//!
//! Pose channels are laid out as `[root translation (3), joint 0 axis-angle (3),
//! joint 1 axis-angle (3), ...]`.

pub mod rig_file;

use std::sync::OnceLock;

use nalgebra::Matrix3;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{GeometryError, SpatialIndex, TriangleMesh};
use crate::math::{axis_angle_to_matrix, right_jacobian, Point, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BodyError {
    #[error("skeleton has no joints")]
    NoJoints,
    #[error("joint 0 must be the root (parent -1)")]
    RootHasParent,
    #[error("joint {joint} has parent {parent}; parents must precede their children")]
    BadParent { joint: usize, parent: i64 },
    #[error("joint {0} has a non-finite rest offset")]
    NonFiniteOffset(usize),
    #[error("vertex {vertex}: {message}")]
    BadWeights { vertex: usize, message: String },
    #[error("expected {expected} pose channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
    #[error("pose has {got} joint rotations but the skeleton has {expected} joints")]
    JointCount { expected: usize, got: usize },
    #[error("pose contains a non-finite value")]
    NonFinitePose,
    #[error("rom bound for channel {channel} has min {min} > max {max}")]
    BadBounds { channel: usize, min: f64, max: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error("rig surface: {0}")]
    Surface(#[from] GeometryError),
    #[error("rig file line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Kinematic tree with parent-relative rest offsets (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    parents: Vec<Option<usize>>,
    offsets: Vec<Vec3>,
}

impl Skeleton {
    /// `parents[0]` must be `None`; every other joint's parent must have a lower index.
    pub fn new(parents: Vec<Option<usize>>, offsets: Vec<Vec3>) -> Result<Self, BodyError> {
        if parents.is_empty() {
            return Err(BodyError::NoJoints);
        }
        if parents.len() != offsets.len() {
            return Err(BodyError::Invalid(format!("{} parents but {} offsets", parents.len(), offsets.len())));
        }
        if parents[0].is_some() {
            return Err(BodyError::RootHasParent);
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                Some(p) => return Err(BodyError::BadParent { joint: j, parent: *p as i64 }),
                None => return Err(BodyError::BadParent { joint: j, parent: -1 }),
            }
        }
        if let Some(j) = offsets.iter().position(|o| !o.iter().all(|c| c.is_finite())) {
            return Err(BodyError::NonFiniteOffset(j));
        }
        Ok(Skeleton { parents, offsets })
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn offset(&self, joint: usize) -> Vec3 {
        self.offsets[joint]
    }

    pub fn channel_count(&self) -> usize {
        3 + 3 * self.joint_count()
    }

    /// World-space joint origins with the identity pose.
    pub fn rest_positions(&self) -> Vec<Vec3> {
        let mut out: Vec<Vec3> = Vec::with_capacity(self.joint_count());
        for j in 0..self.joint_count() {
            let base = self.parents[j].map_or(Vec3::zeros(), |p| out[p]);
            out.push(base + self.offsets[j]);
        }
        out
    }

    /// True if `ancestor` lies on the path from `joint` to the root (inclusive).
    pub fn is_ancestor(&self, ancestor: usize, joint: usize) -> bool {
        let mut cur = Some(joint);
        while let Some(j) = cur {
            if j == ancestor {
                return true;
            }
            cur = self.parents[j];
        }
        false
    }
}

/// Root translation plus one axis-angle rotation per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub root_translation: Vec3,
    pub joint_rotation: Vec<Vec3>,
}

impl Pose {
    pub fn identity(joints: usize) -> Self {
        Pose { root_translation: Vec3::zeros(), joint_rotation: vec![Vec3::zeros(); joints] }
    }

    pub fn from_channels(channels: &[f64], joints: usize) -> Result<Self, BodyError> {
        let expected = 3 + 3 * joints;
        if channels.len() != expected {
            return Err(BodyError::ChannelCount { expected, got: channels.len() });
        }
        if !channels.iter().all(|c| c.is_finite()) {
            return Err(BodyError::NonFinitePose);
        }
        Ok(Pose {
            root_translation: Vec3::new(channels[0], channels[1], channels[2]),
            joint_rotation: channels[3..].chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
        })
    }

    pub fn to_channels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 + 3 * self.joint_rotation.len());
        out.extend(self.root_translation.iter());
        for r in &self.joint_rotation {
            out.extend(r.iter());
        }
        out
    }
}

/// Rotation then translation: `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn apply(&self, p: &Point) -> Point {
        Point::from(self.rotation * p.coords + self.translation)
    }
}

/// World transform of every joint. The root is `rotation(root axis-angle)`
/// placed at `root_translation + rest offset`; a child composes its parent
/// with its rest offset and then its own local rotation.
pub fn forward_kinematics(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<RigidTransform>, BodyError> {
    let joints = skeleton.joint_count();
    if pose.joint_rotation.len() != joints {
        return Err(BodyError::JointCount { expected: joints, got: pose.joint_rotation.len() });
    }
    let mut out: Vec<RigidTransform> = Vec::with_capacity(joints);
    for j in 0..joints {
        let local = axis_angle_to_matrix(&pose.joint_rotation[j]);
        let t = match skeleton.parents[j] {
            None => RigidTransform { rotation: local, translation: pose.root_translation + skeleton.offsets[0] },
            Some(p) => {
                let parent = out[p];
                RigidTransform {
                    rotation: parent.rotation * local,
                    translation: parent.translation + parent.rotation * skeleton.offsets[j],
                }
            }
        };
        out.push(t);
    }
    Ok(out)
}

/// Which optimization group a pose channel belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelGroup {
    Body,
    LeftHand,
    RightHand,
}

/// Per-rotation-channel bounds (radians); length `3 * joints`.
#[derive(Debug, Clone, PartialEq)]
pub struct RomBounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl RomBounds {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self, BodyError> {
        if min.len() != max.len() {
            return Err(BodyError::Invalid(format!("rom has {} minima but {} maxima", min.len(), max.len())));
        }
        for (channel, (&lo, &hi)) in min.iter().zip(&max).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(BodyError::BadBounds { channel, min: lo, max: hi });
            }
        }
        Ok(RomBounds { min, max })
    }

    pub fn unbounded(channels: usize) -> Self {
        RomBounds { min: vec![f64::NEG_INFINITY; channels], max: vec![f64::INFINITY; channels] }
    }

    pub fn len(&self) -> usize {
        self.min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_empty()
    }

    /// Bounds for a subset of channels, in the given order.
    pub fn select(&self, channels: &[usize]) -> RomBounds {
        RomBounds { min: channels.iter().map(|&c| self.min[c]).collect(), max: channels.iter().map(|&c| self.max[c]).collect() }
    }
}

/// Skeleton, rest surface, sparse skin weights and the annotations the
/// correction pipeline needs (marker vertices, hand joints, rotation bounds).
#[derive(Debug, Clone)]
pub struct SkinnedModel {
    pub skeleton: Skeleton,
    pub rest_vertices: Vec<Point>,
    /// Per-vertex `(joint, weight)` pairs.
    pub weights: Vec<Vec<(usize, f64)>>,
    /// Closed surface triangles over `rest_vertices` (may be empty).
    pub faces: Vec<[usize; 3]>,
    pub marker_ids: Vec<usize>,
    pub left_hand: Vec<usize>,
    pub right_hand: Vec<usize>,
    /// Bounds on pose channels `3..` (rotation channels only).
    pub rom: RomBounds,
    rest_joints: Vec<Vec3>,
    rest_surface: OnceLock<SpatialIndex>,
}

pub struct ModelParts {
    pub skeleton: Skeleton,
    pub rest_vertices: Vec<Point>,
    pub weights: Vec<Vec<(usize, f64)>>,
    pub faces: Vec<[usize; 3]>,
    pub marker_ids: Vec<usize>,
    pub left_hand: Vec<usize>,
    pub right_hand: Vec<usize>,
    pub rom: Option<RomBounds>,
}

impl SkinnedModel {
    pub fn new(parts: ModelParts) -> Result<Self, BodyError> {
        let ModelParts { skeleton, rest_vertices, weights, faces, marker_ids, left_hand, right_hand, rom } = parts;
        let joints = skeleton.joint_count();
        if weights.len() != rest_vertices.len() {
            return Err(BodyError::Invalid(format!(
                "{} weight rows for {} vertices",
                weights.len(),
                rest_vertices.len()
            )));
        }
        for (vertex, row) in weights.iter().enumerate() {
            let bad = |message: String| BodyError::BadWeights { vertex, message };
            if row.is_empty() {
                return Err(bad("no skin weights".into()));
            }
            let mut sum = 0.0;
            for &(j, w) in row {
                if j >= joints {
                    return Err(bad(format!("joint {j} does not exist")));
                }
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(bad(format!("weight {w} is negative or not finite")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(bad(format!("weights sum to {sum}")));
            }
        }
        if !faces.is_empty() {
            TriangleMesh::new(rest_vertices.clone(), faces.clone())?;
        }
        if let Some(&m) = marker_ids.iter().find(|&&m| m >= rest_vertices.len()) {
            return Err(BodyError::Invalid(format!("marker vertex {m} out of range")));
        }
        for &j in left_hand.iter().chain(&right_hand) {
            if j >= joints || j == 0 {
                return Err(BodyError::Invalid(format!("hand joint {j} is invalid")));
            }
        }
        if left_hand.iter().any(|j| right_hand.contains(j)) {
            return Err(BodyError::Invalid("a joint is listed for both hands".into()));
        }
        let rom = rom.unwrap_or_else(|| RomBounds::unbounded(3 * joints));
        if rom.len() != 3 * joints {
            return Err(BodyError::Invalid(format!("rom covers {} channels, expected {}", rom.len(), 3 * joints)));
        }
        let rest_joints = skeleton.rest_positions();
        Ok(SkinnedModel {
            skeleton,
            rest_vertices,
            weights,
            faces,
            marker_ids,
            left_hand,
            right_hand,
            rom,
            rest_joints,
            rest_surface: OnceLock::new(),
        })
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.joint_count()
    }

    pub fn channel_count(&self) -> usize {
        self.skeleton.channel_count()
    }

    /// Group of every pose channel; the root translation is body.
    pub fn channel_groups(&self) -> Vec<ChannelGroup> {
        let mut out = vec![ChannelGroup::Body; self.channel_count()];
        for (joints, group) in [(&self.left_hand, ChannelGroup::LeftHand), (&self.right_hand, ChannelGroup::RightHand)] {
            for &j in joints {
                for a in 0..3 {
                    out[3 + 3 * j + a] = group;
                }
            }
        }
        out
    }

    pub fn channels_in(&self, groups: &[ChannelGroup]) -> Vec<usize> {
        self.channel_groups().iter().enumerate().filter(|(_, g)| groups.contains(g)).map(|(c, _)| c).collect()
    }

    /// Joint carrying the largest skin weight of a vertex (lowest index on ties).
    pub fn dominant_joint(&self, vertex: usize) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for &(j, w) in &self.weights[vertex] {
            if w > best.1 || (w == best.1 && j < best.0) {
                best = (j, w);
            }
        }
        best.0
    }

    /// Vertices whose dominant joint belongs to the given hand joint list.
    pub fn hand_vertices(&self, hand: &[usize]) -> Vec<usize> {
        (0..self.rest_vertices.len()).filter(|&v| hand.contains(&self.dominant_joint(v))).collect()
    }

    pub fn surface(&self) -> Result<TriangleMesh, BodyError> {
        if self.faces.is_empty() {
            return Err(BodyError::Invalid("rig has no surface faces".into()));
        }
        Ok(TriangleMesh::new(self.rest_vertices.clone(), self.faces.clone())?)
    }

    /// Spatial index of the surface at the given skinned vertex positions.
    /// Adjacency is computed once for the rest surface and reused.
    pub fn posed_surface(&self, vertices: Vec<Point>) -> Result<SpatialIndex, BodyError> {
        if self.faces.is_empty() {
            return Err(BodyError::Invalid("rig has no surface faces".into()));
        }
        let rest = match self.rest_surface.get() {
            Some(index) => index,
            None => {
                let index = SpatialIndex::build(self.surface()?)?;
                self.rest_surface.get_or_init(|| index)
            }
        };
        Ok(rest.reposed(vertices)?)
    }

    fn skin_one(&self, frames: &[RigidTransform], v: usize) -> Point {
        // displacement form keeps the identity pose bit-exact
        let x = self.rest_vertices[v].coords;
        let mut acc = Vec3::zeros();
        for &(j, w) in &self.weights[v] {
            let f = &frames[j];
            let rel = x - self.rest_joints[j];
            acc += w * ((f.rotation * rel - rel) + (f.translation - self.rest_joints[j]));
        }
        Point::from(x + acc)
    }

    /// Skins the listed vertices with precomputed joint frames.
    pub fn skin_subset(&self, frames: &[RigidTransform], ids: &[usize]) -> Vec<Point> {
        ids.iter().map(|&v| self.skin_one(frames, v)).collect()
    }

    pub fn skin_all(&self, frames: &[RigidTransform]) -> Vec<Point> {
        (0..self.rest_vertices.len()).map(|v| self.skin_one(frames, v)).collect()
    }

    /// Gradient of `Σ g_v · skinned(v)` with respect to every pose channel.
    ///
    /// A rotation perturbation `dr` of joint `k` moves a rigidly attached point
    /// `p` by `(W_k J_r(r_k) dr) × (p - o_k)`, so each joint only needs the
    /// subtree sums of `w p × g` and `w g`.
    pub fn pose_vjp(&self, pose: &Pose, frames: &[RigidTransform], grads: &[(usize, Vec3)]) -> Vec<f64> {
        let joints = self.joint_count();
        let mut cross_sum = vec![Vec3::zeros(); joints];
        let mut force_sum = vec![Vec3::zeros(); joints];
        for &(v, g) in grads {
            let x = self.rest_vertices[v].coords;
            for &(j, w) in &self.weights[v] {
                let f = &frames[j];
                let p = f.rotation * (x - self.rest_joints[j]) + f.translation;
                cross_sum[j] += w * p.cross(&g);
                force_sum[j] += w * g;
            }
        }
        for j in (1..joints).rev() {
            let p = self.skeleton.parents[j].expect("non-root joint has a parent");
            let (c, f) = (cross_sum[j], force_sum[j]);
            cross_sum[p] += c;
            force_sum[p] += f;
        }
        let mut out = vec![0.0; self.channel_count()];
        out[..3].copy_from_slice(force_sum[0].as_slice());
        for k in 0..joints {
            let torque = cross_sum[k] - frames[k].translation.cross(&force_sum[k]);
            let g = right_jacobian(&pose.joint_rotation[k]).transpose() * (frames[k].rotation.transpose() * torque);
            out[3 + 3 * k..6 + 3 * k].copy_from_slice(g.as_slice());
        }
        out
    }
}

/// Linear blend skinning of every rest vertex.
pub fn skin_vertices(model: &SkinnedModel, pose: &Pose) -> Result<Vec<Point>, BodyError> {
    let frames = forward_kinematics(&model.skeleton, pose)?;
    Ok(model.skin_all(&frames))
}
