use std::collections::HashMap;
use std::sync::OnceLock;

use super::bvh::{Aabb, Bvh};
use super::triangle::{closest_point_on_triangle, Feature};
use super::{GeometryError, TriangleMesh};
use crate::math::{Point, Vec3};

/// Result of a nearest-surface query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub point: Point,
    pub distance: f64,
    pub face: usize,
    /// Weights of the face corners (in the face's own vertex order).
    pub barycentric: [f64; 3],
    pub feature: Feature,
}

/// Immutable acceleration structure over one mesh.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    mesh: TriangleMesh,
    faces: Bvh,
    vertices: OnceLock<Bvh>,
    face_normals: Vec<Vec3>,
    edge_normals: Vec<[Vec3; 3]>,
    vertex_normals: Vec<Vec3>,
    /// Face across each edge, `NO_FACE` on a boundary.
    opposite: Vec<[usize; 3]>,
    watertight: bool,
}

const NO_FACE: usize = usize::MAX;

fn face_boxes(mesh: &TriangleMesh) -> Vec<Aabb> {
    (0..mesh.faces().len()).map(|f| Aabb::from_points(&mesh.triangle(f))).collect()
}

impl SpatialIndex {
    pub fn build(mesh: TriangleMesh) -> Result<Self, GeometryError> {
        if mesh.faces().is_empty() {
            return Err(GeometryError::EmptyMesh);
        }
        let faces = Bvh::build(&face_boxes(&mesh));

        // directed edge -> face that owns it
        let mut directed: HashMap<(usize, usize), usize> = HashMap::with_capacity(mesh.faces().len() * 3);
        let mut watertight = true;
        for (f, face) in mesh.faces().iter().enumerate() {
            for k in 0..3 {
                if directed.insert((face[k], face[(k + 1) % 3]), f).is_some() {
                    watertight = false;
                }
            }
        }
        let opposite: Vec<[usize; 3]> = mesh
            .faces()
            .iter()
            .map(|face| {
                std::array::from_fn(|k| directed.get(&(face[(k + 1) % 3], face[k])).copied().unwrap_or(NO_FACE))
            })
            .collect();
        if opposite.iter().flatten().any(|&g| g == NO_FACE) {
            watertight = false;
        }
        Ok(Self::assemble(mesh, faces, opposite, watertight))
    }

    /// Index over the same faces with moved vertices. Reuses the adjacency and
    /// refits the hierarchy instead of rebuilding it.
    pub fn reposed(&self, vertices: Vec<Point>) -> Result<Self, GeometryError> {
        let mesh = self.mesh.with_vertices(vertices)?;
        let faces = self.faces.refit(&face_boxes(&mesh));
        Ok(Self::assemble(mesh, faces, self.opposite.clone(), self.watertight))
    }

    fn assemble(mesh: TriangleMesh, faces: Bvh, opposite: Vec<[usize; 3]>, watertight: bool) -> Self {
        let face_normals: Vec<Vec3> =
            (0..mesh.faces().len()).map(|f| mesh.face_normal_unnormalized(f).normalize()).collect();
        let edge_normals = opposite
            .iter()
            .enumerate()
            .map(|(f, opp)| {
                opp.map(|g| {
                    if g == NO_FACE {
                        return face_normals[f];
                    }
                    let n = (face_normals[f] + face_normals[g]).normalize();
                    // opposite faces folded onto each other
                    if n.iter().all(|c| c.is_finite()) { n } else { face_normals[f] }
                })
            })
            .collect();

        let mut vertex_normals = vec![Vec3::zeros(); mesh.vertices().len()];
        for (f, face) in mesh.faces().iter().enumerate() {
            let tri = mesh.triangle(f);
            for k in 0..3 {
                let e1 = tri[(k + 1) % 3] - tri[k];
                let e2 = tri[(k + 2) % 3] - tri[k];
                let angle = e1.angle(&e2);
                vertex_normals[face[k]] += face_normals[f] * angle;
            }
        }
        for n in &mut vertex_normals {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        SpatialIndex {
            mesh,
            faces,
            vertices: OnceLock::new(),
            face_normals,
            edge_normals,
            vertex_normals,
            opposite,
            watertight,
        }
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }

    /// Every directed edge appears once and is matched by its reverse.
    pub fn is_watertight(&self) -> bool {
        self.watertight
    }

    pub fn require_watertight(&self) -> Result<(), GeometryError> {
        if self.watertight {
            Ok(())
        } else {
            Err(GeometryError::NotWatertight)
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.faces.leaf_count()
    }

    /// Axis-aligned bounds of the mesh as `(min, max)`.
    pub fn bounds(&self) -> (Point, Point) {
        let b = self.faces.bounds().expect("index has at least one face");
        (b.min, b.max)
    }

    /// True when `p` lies inside the mesh bounding box (cheap pre-test for sign queries).
    pub fn bounds_contain(&self, p: &Point) -> bool {
        self.faces.bounds().is_some_and(|b| b.contains(p))
    }

    pub fn nearest_surface_point(&self, query: &Point) -> SurfacePoint {
        let mesh = &self.mesh;
        let (face, d2, proj) = self
            .faces
            .nearest(query, |f| {
                let [a, b, c] = mesh.triangle(f);
                let proj = closest_point_on_triangle(query, &a, &b, &c);
                ((query - proj.point).norm_squared(), proj)
            })
            .expect("index has at least one face");
        SurfacePoint { point: proj.point, distance: d2.sqrt(), face, barycentric: proj.barycentric, feature: proj.feature }
    }

    /// Pseudonormal of the feature a surface point lies on.
    pub fn pseudonormal(&self, hit: &SurfacePoint) -> Vec3 {
        match hit.feature {
            Feature::Face => self.face_normals[hit.face],
            Feature::Edge(k) => self.edge_normals[hit.face][k as usize],
            Feature::Vertex(k) => self.vertex_normals[self.mesh.faces()[hit.face][k as usize]],
        }
    }

    /// Nearest point plus sign (`-1.0` inside, `1.0` outside or on the surface).
    pub fn signed_query(&self, query: &Point) -> (SurfacePoint, f64) {
        let hit = self.nearest_surface_point(query);
        let sign = if (query - hit.point).dot(&self.pseudonormal(&hit)) < 0.0 { -1.0 } else { 1.0 };
        (hit, sign)
    }

    /// Signed distance, negative inside. Only meaningful for watertight meshes.
    pub fn signed_distance(&self, query: &Point) -> f64 {
        let (hit, sign) = self.signed_query(query);
        sign * hit.distance
    }

    pub fn point_distances(&self, points: &[Point]) -> Vec<f64> {
        points.iter().map(|p| self.nearest_surface_point(p).distance).collect()
    }

    /// Nearest mesh vertex; ties go to the lowest index.
    pub fn nearest_vertex(&self, query: &Point) -> (usize, f64) {
        let verts = self.mesh.vertices();
        let bvh = self.vertices.get_or_init(|| {
            let boxes: Vec<Aabb> = verts.iter().map(|v| Aabb { min: *v, max: *v }).collect();
            Bvh::build(&boxes)
        });
        let (v, d2, ()) = bvh.nearest(query, |i| ((query - verts[i]).norm_squared(), ())).expect("non-empty mesh");
        (v, d2.sqrt())
    }
}
