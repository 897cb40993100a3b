//! Small rotation helpers shared by the body, optimization and metrics code.

use nalgebra::{Matrix3, Point3, Quaternion, Rotation3, UnitQuaternion, Vector3};

pub type Point = Point3<f64>;
pub type Vec3 = Vector3<f64>;

/// Rodrigues: axis-angle vector to rotation matrix.
pub fn axis_angle_to_matrix(r: &Vec3) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(*r).into_inner()
}

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian of SO(3) at `r`: `R(r + dr) ≈ R(r) Exp(J_r(r) dr)`.
pub fn right_jacobian(r: &Vec3) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let k = skew(r);
    let k2 = k * k;
    if theta2 < 1e-10 {
        return Matrix3::identity() - 0.5 * k + k2 / 6.0;
    }
    let theta = theta2.sqrt();
    let a = (1.0 - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Matrix3::identity() - a * k + b * k2
}

/// Unit quaternion from a `wxyz` array; `None` when the norm is zero or not finite.
pub fn quat_from_wxyz(q: [f64; 4]) -> Option<UnitQuaternion<f64>> {
    let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
    let n = raw.norm();
    if !n.is_finite() || n == 0.0 {
        return None;
    }
    Some(UnitQuaternion::new_normalize(raw))
}

pub fn quat_to_wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Axis-angle vector of a unit quaternion, with angle in `[0, π]`.
pub fn quat_to_axis_angle(q: &UnitQuaternion<f64>) -> Vec3 {
    q.scaled_axis()
}

pub fn axis_angle_to_quat(r: &Vec3) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn right_jacobian_matches_finite_difference() {
        let r = Vec3::new(0.3, -0.7, 0.4);
        let y = Vec3::new(0.2, 0.5, -1.1);
        let jr = right_jacobian(&r);
        let base = axis_angle_to_matrix(&r);
        // d(R(r) y)/dr = -R [y]x J_r
        let analytic = -base * skew(&y) * jr;
        let h = 1e-6;
        for c in 0..3 {
            let mut rp = r;
            let mut rm = r;
            rp[c] += h;
            rm[c] -= h;
            let fd = (axis_angle_to_matrix(&rp) * y - axis_angle_to_matrix(&rm) * y) / (2.0 * h);
            assert!((fd - analytic.column(c)).norm() < 1e-8);
        }
    }

    #[test]
    fn right_jacobian_small_angle_branch_is_continuous() {
        let r = Vec3::new(1e-6, 0.0, 2e-6);
        let a = right_jacobian(&r);
        let b = right_jacobian(&(r * 1e4));
        assert!((a - Matrix3::identity()).norm() < 1e-5);
        assert!((b - Matrix3::identity()).norm() < 0.05);
    }

    #[test]
    fn quaternion_axis_angle_round_trip() {
        let r = Vec3::new(0.1, 0.2, -0.3);
        let q = axis_angle_to_quat(&r);
        assert!((quat_to_axis_angle(&q) - r).norm() < 1e-12);
        let wxyz = quat_to_wxyz(&q);
        let back = quat_from_wxyz(wxyz).unwrap();
        assert!(back.angle_to(&q) < 1e-12);
        assert!(quat_from_wxyz([0.0; 4]).is_none());
    }
}
