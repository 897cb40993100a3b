use crate::math::Point;

/// Which part of a triangle the closest point lies on. Corners and edges use
/// local numbering: edge `k` joins corner `k` and corner `(k + 1) % 3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Vertex(u8),
    Edge(u8),
    Face,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleProjection {
    pub point: Point,
    /// Weights of the three corners; they sum to one and reproduce `point`.
    pub barycentric: [f64; 3],
    pub feature: Feature,
}

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: &Point, a: &Point, b: &Point, c: &Point) -> TriangleProjection {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return vertex(*a, 0);
    }

    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return vertex(*b, 1);
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return TriangleProjection {
            point: a + ab * v,
            barycentric: [1.0 - v, v, 0.0],
            feature: Feature::Edge(0),
        };
    }

    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return vertex(*c, 2);
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return TriangleProjection {
            point: a + ac * w,
            barycentric: [1.0 - w, 0.0, w],
            feature: Feature::Edge(2),
        };
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return TriangleProjection {
            point: b + (c - b) * w,
            barycentric: [0.0, 1.0 - w, w],
            feature: Feature::Edge(1),
        };
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    // project along the normal: exact for queries already on the plane
    let n = ab.cross(&ac).normalize();
    TriangleProjection {
        point: p - n * ap.dot(&n),
        barycentric: [1.0 - v - w, v, w],
        feature: Feature::Face,
    }
}

fn vertex(point: Point, corner: u8) -> TriangleProjection {
    let mut barycentric = [0.0; 3];
    barycentric[corner as usize] = 1.0;
    TriangleProjection { point, barycentric, feature: Feature::Vertex(corner) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri() -> [Point; 3] {
        [Point::new(0.0, 0.0, 0.0), Point::new(1.0, 0.0, 0.0), Point::new(0.0, 1.0, 0.0)]
    }

    #[test]
    fn regions() {
        let [a, b, c] = tri();
        let cases = [
            (Point::new(0.2, 0.2, 1.0), Feature::Face, Point::new(0.2, 0.2, 0.0)),
            (Point::new(-1.0, -1.0, 0.0), Feature::Vertex(0), a),
            (Point::new(2.0, -0.5, 0.3), Feature::Vertex(1), b),
            (Point::new(-0.1, 3.0, 0.0), Feature::Vertex(2), c),
            (Point::new(0.5, -1.0, 0.0), Feature::Edge(0), Point::new(0.5, 0.0, 0.0)),
            (Point::new(1.0, 1.0, 0.0), Feature::Edge(1), Point::new(0.5, 0.5, 0.0)),
            (Point::new(-2.0, 0.5, 0.5), Feature::Edge(2), Point::new(0.0, 0.5, 0.0)),
        ];
        for (p, feature, expected) in cases {
            let proj = closest_point_on_triangle(&p, &a, &b, &c);
            assert_eq!(proj.feature, feature, "query {p:?}");
            assert!((proj.point - expected).norm() < 1e-12);
            let recon = a.coords * proj.barycentric[0] + b.coords * proj.barycentric[1] + c.coords * proj.barycentric[2];
            assert!((recon - proj.point.coords).norm() < 1e-12);
        }
    }
}
