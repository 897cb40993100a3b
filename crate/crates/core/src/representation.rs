//! Feature channels for downstream models: marker kinematics, marker-to-object
//! vectors, foot contact, object pose, and the basis-point-set object encoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{GeometryError, SpatialIndex, TriangleMesh};
use crate::math::{Point, Vec3};
use crate::scene::{ObjectModel, ObjectState};
use crate::sequence::{InteractionSequence, SequenceError};

pub const DEFAULT_BPS_SIZE: usize = 256;

#[derive(Debug, Error)]
pub enum RepresentationError {
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("geometry to encode is empty")]
    EmptyGeometry,
    #[error("sequence needs at least 2 frames for features, got {0}")]
    TooShort(usize),
    #[error("marker id {id} out of range for {markers} markers")]
    UnknownMarker { id: usize, markers: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
}

/// Fixed random points inside a ball centered at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct BpsBasis {
    pub points: Vec<Point>,
    pub radius: f64,
    pub seed: u64,
}

/// Uniform samples in the ball of `radius` (rejection from the cube).
pub fn sample_bps_basis(seed: u64, n: usize, radius: f64) -> Result<BpsBasis, RepresentationError> {
    if n == 0 {
        return Err(RepresentationError::Invalid("basis size must be at least 1".into()));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(RepresentationError::Invalid(format!("basis radius must be positive, got {radius}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm_squared() <= 1.0 {
            points.push(Point::from(v * radius));
        }
    }
    Ok(BpsBasis { points, radius, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BpsMode {
    /// One distance per basis point.
    Distance,
    /// Offset from each basis point to its nearest geometry point.
    Delta,
}

impl BpsMode {
    pub fn width(self) -> usize {
        match self {
            BpsMode::Distance => 1,
            BpsMode::Delta => 3,
        }
    }
}

/// What a basis is encoded against.
#[derive(Debug, Clone, Copy)]
pub enum BpsGeometry<'a> {
    Points(&'a [Point]),
    Surface(&'a SpatialIndex),
}

fn nearest_point(points: &[Point], q: &Point) -> Point {
    // equal distances resolve to the lexicographically smallest point, so the
    // result does not depend on input order
    let key = |p: &Point| ((p - q).norm_squared(), p.x, p.y, p.z);
    let best = points.iter().min_by(|a, b| key(a).partial_cmp(&key(b)).expect("finite points")).expect("nonempty");
    *best
}

/// Encodes geometry already normalized into the basis ball.
pub fn bps_encode(geometry: BpsGeometry, basis: &BpsBasis, mode: BpsMode) -> Result<Vec<f64>, RepresentationError> {
    let nearest = |q: &Point| -> Point {
        match geometry {
            BpsGeometry::Points(points) => nearest_point(points, q),
            BpsGeometry::Surface(index) => index.nearest_surface_point(q).point,
        }
    };
    let empty = match geometry {
        BpsGeometry::Points(points) => points.is_empty(),
        BpsGeometry::Surface(index) => index.mesh().faces().is_empty(),
    };
    if empty {
        return Err(RepresentationError::EmptyGeometry);
    }
    let rows: Vec<Vec<f64>> = basis
        .points
        .par_iter()
        .map(|b| {
            let d = nearest(b) - b;
            match mode {
                BpsMode::Distance => vec![d.norm()],
                BpsMode::Delta => vec![d.x, d.y, d.z],
            }
        })
        .collect();
    Ok(rows.concat())
}

/// Object placement in basis coordinates: `(p - center) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BpsNormalization {
    pub center: [f64; 3],
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpsEncoding {
    pub features: Vec<f64>,
    pub normalization: BpsNormalization,
}

/// Centers the mesh at its vertex centroid, scales its farthest vertex onto
/// the basis sphere, and encodes the surface.
pub fn encode_object(mesh: &TriangleMesh, basis: &BpsBasis, mode: BpsMode) -> Result<BpsEncoding, RepresentationError> {
    if mesh.vertices().is_empty() || mesh.faces().is_empty() {
        return Err(RepresentationError::EmptyGeometry);
    }
    let center = mesh.centroid();
    let extent = mesh.vertices().iter().map(|v| (v - center).norm()).fold(0.0, f64::max);
    let scale = if extent > 0.0 { basis.radius / extent } else { 1.0 };
    let normalized = mesh.map_vertices(|v| Point::from((v - center) * scale))?;
    let index = SpatialIndex::build(normalized)?;
    Ok(BpsEncoding {
        features: bps_encode(BpsGeometry::Surface(&index), basis, mode)?,
        normalization: BpsNormalization { center: [center.x, center.y, center.z], scale },
    })
}

/// Vectors from each marker to its nearest point on the posed object.
pub fn compute_eta(markers: &[Vec<Point>], object: &ObjectModel, states: &[ObjectState]) -> Vec<Vec<Vec3>> {
    markers
        .par_iter()
        .zip(states.par_iter())
        .map(|(frame, state)| {
            let t = state.transform();
            frame.iter().map(|m| object.nearest(&t, m).point - m).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureConfig {
    /// A foot marker is grounded below this height above the ground plane.
    pub foot_height: f64,
    /// ...and below this horizontal speed, meters per second.
    pub foot_speed: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { foot_height: 0.05, foot_speed: 0.1 }
    }
}

/// Per-frame feature channels. Velocities use backward differences scaled
/// by the frame rate, with frame 0 set to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct HoiFeatures {
    pub markers: Vec<Vec<Point>>,
    pub velocities: Vec<Vec<Vec3>>,
    pub eta: Vec<Vec<Vec3>>,
    pub foot_contact: Vec<Vec<bool>>,
    /// Axis-angle rotation then translation.
    pub object: Vec<[f64; 6]>,
}

pub fn build_features(
    seq: &InteractionSequence,
    object_mesh: &TriangleMesh,
    foot_markers: &[usize],
    cfg: &FeatureConfig,
) -> Result<HoiFeatures, RepresentationError> {
    seq.validate()?;
    let frames = seq.frames();
    if frames < 2 {
        return Err(RepresentationError::TooShort(frames));
    }
    if let Some(&id) = foot_markers.iter().find(|&&id| id >= seq.marker_count) {
        return Err(RepresentationError::UnknownMarker { id, markers: seq.marker_count });
    }
    let markers: Vec<Vec<Point>> = (0..frames).map(|i| seq.frame_markers(i)).collect();
    let mut velocities = vec![vec![Vec3::zeros(); seq.marker_count]; frames];
    for i in 1..frames {
        for m in 0..seq.marker_count {
            velocities[i][m] = (markers[i][m] - markers[i - 1][m]) * seq.fps;
        }
    }
    let object = ObjectModel::new(object_mesh.clone(), 0, 0)?;
    let states: Vec<ObjectState> = seq.object_pose.iter().map(ObjectState::from_pose).collect();
    let eta = compute_eta(&markers, &object, &states);
    let foot_contact = (0..frames)
        .map(|i| {
            foot_markers
                .iter()
                .map(|&m| {
                    let v = velocities[i][m];
                    markers[i][m].z < seq.ground_height + cfg.foot_height && v.x.hypot(v.y) < cfg.foot_speed
                })
                .collect()
        })
        .collect();
    Ok(HoiFeatures { markers, velocities, eta, foot_contact, object: states.iter().map(ObjectState::to_array).collect() })
}
