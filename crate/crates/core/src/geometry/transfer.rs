use super::SpatialIndex;
use crate::math::Point;

/// Maps marker vertices of a source surface onto the nearest vertices of a
/// target surface that shares its shape. Ties go to the lowest target index.
///
/// Panics if a marker id is out of range for `source_vertices`.
pub fn transfer_markers(source_vertices: &[Point], target_index: &SpatialIndex, marker_ids: &[usize]) -> Vec<usize> {
    marker_ids.iter().map(|&id| target_index.nearest_vertex(&source_vertices[id]).0).collect()
}

#[cfg(test)]
mod tests {
    use super::super::test_meshes::icosphere;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_transfer() {
        let mesh = icosphere(1.0, 2);
        let index = SpatialIndex::build(mesh.clone()).unwrap();
        let ids = vec![0, 5, 17, 100];
        assert_eq!(transfer_markers(mesh.vertices(), &index, &ids), ids);
        assert!(transfer_markers(mesh.vertices(), &index, &[]).is_empty());
    }

    #[test]
    fn perturbed_target_error_is_bounded() {
        let mesh = icosphere(1.0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bound = 0.002 / 3f64.sqrt();
        let target = mesh
            .map_vertices(|v| {
                v + nalgebra::Vector3::new(
                    rng.random_range(-bound..bound),
                    rng.random_range(-bound..bound),
                    rng.random_range(-bound..bound),
                )
            })
            .unwrap();
        let index = SpatialIndex::build(target.clone()).unwrap();
        let ids: Vec<usize> = (0..mesh.vertices().len()).step_by(7).collect();
        let out = transfer_markers(mesh.vertices(), &index, &ids);
        for (&s, &t) in ids.iter().zip(&out) {
            assert!((mesh.vertices()[s] - target.vertices()[t]).norm() <= 0.002);
        }
        // idempotent on the target
        assert_eq!(transfer_markers(target.vertices(), &index, &out), out);
    }
}
