//! Rigid object state shared by the losses, metrics and pipelines.
//!
//! Objects are queried in their rest frame: a world point is pulled back by
//! the inverse pose, so the object's spatial index is built once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body::RigidTransform;
use crate::geometry::{GeometryError, SpatialIndex, SurfacePoint, TriangleMesh};
use crate::math::{axis_angle_to_matrix, Point, Vec3};
use crate::sequence::ObjectPose;

/// Object pose as axis-angle rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectState {
    pub rotation: Vec3,
    pub translation: Vec3,
}

impl ObjectState {
    pub fn identity() -> Self {
        ObjectState { rotation: Vec3::zeros(), translation: Vec3::zeros() }
    }

    pub fn from_pose(pose: &ObjectPose) -> Self {
        ObjectState { rotation: pose.axis_angle(), translation: pose.translation_f64() }
    }

    pub fn to_pose(&self) -> ObjectPose {
        ObjectPose::from_axis_angle(&self.rotation, &self.translation)
    }

    pub fn from_array(a: &[f64]) -> Self {
        ObjectState { rotation: Vec3::new(a[0], a[1], a[2]), translation: Vec3::new(a[3], a[4], a[5]) }
    }

    pub fn to_array(&self) -> [f64; 6] {
        let (r, t) = (self.rotation, self.translation);
        [r.x, r.y, r.z, t.x, t.y, t.z]
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform { rotation: axis_angle_to_matrix(&self.rotation), translation: self.translation }
    }
}

/// A rigid object: its rest mesh index plus a fixed vertex subsample.
#[derive(Debug)]
pub struct ObjectModel {
    index: SpatialIndex,
    samples: Vec<usize>,
}

impl ObjectModel {
    pub fn new(mesh: TriangleMesh, max_samples: usize, seed: u64) -> Result<Self, GeometryError> {
        let samples = farthest_point_sampling(mesh.vertices(), max_samples, seed);
        Ok(ObjectModel { index: SpatialIndex::build(mesh)?, samples })
    }

    pub fn index(&self) -> &SpatialIndex {
        &self.index
    }

    pub fn mesh(&self) -> &TriangleMesh {
        self.index.mesh()
    }

    /// Rest-frame vertex indices chosen by farthest-point sampling.
    pub fn samples(&self) -> &[usize] {
        &self.samples
    }

    pub fn world_vertices(&self, frame: &RigidTransform) -> Vec<Point> {
        self.mesh().vertices().iter().map(|v| frame.apply(v)).collect()
    }

    /// Nearest surface point of the posed object, in world coordinates.
    pub fn nearest(&self, frame: &RigidTransform, query: &Point) -> SurfacePoint {
        let mut hit = self.index.nearest_surface_point(&to_local(frame, query));
        hit.point = frame.apply(&hit.point);
        hit
    }

    /// Signed distance to the posed object (negative inside).
    pub fn signed_distance(&self, frame: &RigidTransform, query: &Point) -> f64 {
        self.index.signed_distance(&to_local(frame, query))
    }
}

/// World point expressed in the object's rest frame.
pub fn to_local(frame: &RigidTransform, p: &Point) -> Point {
    Point::from(frame.rotation.transpose() * (p.coords - frame.translation))
}

/// Greedy farthest-point subsample of at most `k` indices. The first pick is
/// drawn from `seed`; ties go to the lower index.
pub fn farthest_point_sampling(points: &[Point], k: usize, seed: u64) -> Vec<usize> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    if k >= points.len() {
        return (0..points.len()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..points.len());
    let mut chosen = vec![first];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while chosen.len() < k {
        let mut best = 0;
        for (i, &d) in dist.iter().enumerate() {
            if d > dist[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, p) in points.iter().enumerate() {
            dist[i] = dist[i].min((p - points[best]).norm_squared());
        }
    }
    chosen.sort_unstable();
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::test_meshes::{cuboid, icosphere};

    #[test]
    fn state_round_trips_through_storage_pose() {
        let s = ObjectState { rotation: Vec3::new(0.1, -0.2, 0.3), translation: Vec3::new(1.0, 2.0, -0.5) };
        let back = ObjectState::from_pose(&s.to_pose());
        assert!((back.rotation - s.rotation).norm() < 1e-6);
        assert!((back.translation - s.translation).norm() < 1e-6);
        assert_eq!(ObjectState::from_array(&s.to_array()), s);
    }

    #[test]
    fn posed_queries_match_transformed_mesh() {
        let mesh = cuboid([-0.2, -0.1, -0.3], [0.2, 0.1, 0.3]);
        let state = ObjectState { rotation: Vec3::new(0.4, 0.2, -0.7), translation: Vec3::new(0.5, -1.0, 0.2) };
        let frame = state.transform();
        let object = ObjectModel::new(mesh.clone(), 16, 0).unwrap();
        let moved = SpatialIndex::build(mesh.map_vertices(|v| frame.apply(v)).unwrap()).unwrap();
        let inside = frame.apply(&Point::new(0.05, 0.02, 0.1));
        for q in [inside, Point::new(1.0, 0.0, 0.0), Point::new(0.6, -0.9, 0.6)] {
            let a = object.nearest(&frame, &q);
            let b = moved.nearest_surface_point(&q);
            assert!((a.distance - b.distance).abs() < 1e-12);
            assert!((a.point - b.point).norm() < 1e-12, "{q:?}: {:?} vs {:?}", a.point, b.point);
            assert!((object.signed_distance(&frame, &q) - moved.signed_distance(&q)).abs() < 1e-12);
        }
    }

    #[test]
    fn farthest_point_sampling_spreads_out() {
        let sphere = icosphere(1.0, 2);
        let pts = sphere.vertices();
        let picks = farthest_point_sampling(pts, 12, 3);
        assert_eq!(picks.len(), 12);
        assert_eq!(picks, farthest_point_sampling(pts, 12, 3));
        let min_gap = picks
            .iter()
            .flat_map(|&a| picks.iter().filter(move |&&b| b != a).map(move |&b| (pts[a] - pts[b]).norm()))
            .fold(f64::INFINITY, f64::min);
        assert!(min_gap > 0.5, "samples clumped: {min_gap}");
        assert_eq!(farthest_point_sampling(pts, 10_000, 0).len(), pts.len());
    }
}
