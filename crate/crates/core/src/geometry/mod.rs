//! Triangle meshes, nearest-surface queries and signed distances.
//!
//! A [`SpatialIndex`] wraps one [`TriangleMesh`] with a bounding-volume
//! hierarchy over its faces (and, lazily, over its vertices). Signs come from
//! angle-weighted pseudonormals, so they are only meaningful for closed,
//! consistently oriented meshes; [`SpatialIndex::is_watertight`] reports
//! whether the mesh passed that check at build time.

mod bvh;
mod index;
pub mod obj;
mod transfer;
mod triangle;

pub use index::{SpatialIndex, SurfacePoint};
pub use transfer::transfer_markers;
pub use triangle::{closest_point_on_triangle, Feature, TriangleProjection};

use crate::math::{Point, Vec3};
use thiserror::Error;

/// Faces whose doubled area falls at or below this are treated as degenerate.
const DEGENERATE_AREA2: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("face {face} references vertex {index} but the mesh has {count} vertices")]
    FaceIndexOutOfRange { face: usize, index: usize, count: usize },
    #[error("face {face} references the same vertex twice")]
    RepeatedVertex { face: usize },
    #[error("vertex {vertex} has a non-finite coordinate")]
    NonFiniteVertex { vertex: usize },
    #[error("degenerate (zero-area) faces: {0:?}")]
    DegenerateFaces(Vec<usize>),
    #[error("mesh is not watertight; signed distances are undefined")]
    NotWatertight,
    #[error("obj line {line}: {message}")]
    Obj { line: usize, message: String },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

/// Vertices in meters and 0-based triangle index triples.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Point>,
    faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    /// Validates indices, finiteness and face area.
    pub fn new(vertices: Vec<Point>, faces: Vec<[usize; 3]>) -> Result<Self, GeometryError> {
        for (i, v) in vertices.iter().enumerate() {
            if !v.coords.iter().all(|c| c.is_finite()) {
                return Err(GeometryError::NonFiniteVertex { vertex: i });
            }
        }
        let count = vertices.len();
        for (f, face) in faces.iter().enumerate() {
            for &index in face {
                if index >= count {
                    return Err(GeometryError::FaceIndexOutOfRange { face: f, index, count });
                }
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                return Err(GeometryError::RepeatedVertex { face: f });
            }
        }
        let mesh = TriangleMesh { vertices, faces };
        let degenerate: Vec<usize> = (0..mesh.faces.len())
            .filter(|&f| mesh.face_normal_unnormalized(f).norm_squared() <= DEGENERATE_AREA2 * DEGENERATE_AREA2)
            .collect();
        if !degenerate.is_empty() {
            return Err(GeometryError::DegenerateFaces(degenerate));
        }
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn triangle(&self, face: usize) -> [Point; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Cross product of the two edges leaving the first corner (twice the area).
    pub fn face_normal_unnormalized(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.triangle(face);
        (b - a).cross(&(c - a))
    }

    /// Same faces, new vertex positions. Used to re-pose a fixed topology.
    pub fn with_vertices(&self, vertices: Vec<Point>) -> Result<Self, GeometryError> {
        TriangleMesh::new(vertices, self.faces.clone())
    }

    /// Mean of the vertex positions.
    pub fn centroid(&self) -> Point {
        let n = self.vertices.len().max(1) as f64;
        let sum = self.vertices.iter().fold(Vec3::zeros(), |acc, v| acc + v.coords);
        Point::from(sum / n)
    }

    /// Applies `f` to every vertex.
    pub fn map_vertices(&self, f: impl FnMut(&Point) -> Point) -> Result<Self, GeometryError> {
        self.with_vertices(self.vertices.iter().map(f).collect())
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_face() {
        let vertices = vec![Point::origin(), Point::new(1.0, 0.0, 0.0), Point::new(0.0, 1.0, 0.0)];
        let err = TriangleMesh::new(vertices, vec![[0, 1, 3]]).unwrap_err();
        assert_eq!(err, GeometryError::FaceIndexOutOfRange { face: 0, index: 3, count: 3 });
    }

    #[test]
    fn rejects_repeated_and_degenerate_faces() {
        let vertices = vec![
            Point::origin(),
            Point::new(1.0, 0.0, 0.0),
            Point::new(2.0, 0.0, 0.0),
            Point::new(0.0, 1.0, 0.0),
        ];
        assert_eq!(
            TriangleMesh::new(vertices.clone(), vec![[0, 0, 1]]).unwrap_err(),
            GeometryError::RepeatedVertex { face: 0 }
        );
        assert_eq!(
            TriangleMesh::new(vertices, vec![[0, 1, 3], [0, 1, 2]]).unwrap_err(),
            GeometryError::DegenerateFaces(vec![1])
        );
    }

    #[test]
    fn rejects_non_finite_vertex() {
        let vertices = vec![Point::origin(), Point::new(f64::NAN, 0.0, 0.0), Point::new(0.0, 1.0, 0.0)];
        assert_eq!(
            TriangleMesh::new(vertices, vec![[0, 1, 2]]).unwrap_err(),
            GeometryError::NonFiniteVertex { vertex: 1 }
        );
    }
}
