use crate::math::{Point, Vec3};

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Aabb {
    pub min: Point,
    pub max: Point,
}

impl Aabb {
    pub fn empty() -> Self {
        Aabb { min: Point::from(Vec3::repeat(f64::INFINITY)), max: Point::from(Vec3::repeat(f64::NEG_INFINITY)) }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Point>) -> Self {
        let mut b = Aabb::empty();
        for p in points {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: &Point) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn merge(&self, other: &Aabb) -> Aabb {
        Aabb { min: self.min.inf(&other.min), max: self.max.sup(&other.max) }
    }

    pub fn center(&self) -> Point {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Squared distance from `p` to the box (zero inside).
    pub fn distance2(&self, p: &Point) -> f64 {
        let mut d = 0.0;
        for i in 0..3 {
            let v = if p[i] < self.min[i] {
                self.min[i] - p[i]
            } else if p[i] > self.max[i] {
                p[i] - self.max[i]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Binary bounding-volume hierarchy over opaque primitives identified by index.
///
/// Splits are median splits on the widest centroid axis with ties broken by
/// primitive index, so the tree only depends on the primitive set.
#[derive(Debug, Clone)]
pub(crate) struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl Bvh {
    pub fn build(boxes: &[Aabb]) -> Bvh {
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        let centers: Vec<Point> = boxes.iter().map(Aabb::center).collect();
        let mut nodes = Vec::with_capacity(2 * boxes.len() / LEAF_SIZE + 1);
        if !boxes.is_empty() {
            build_node(&mut nodes, &mut order, 0, boxes.len(), boxes, &centers);
        }
        Bvh { nodes, order }
    }

    /// Same tree shape with bounds recomputed for moved primitives.
    pub fn refit(&self, boxes: &[Aabb]) -> Bvh {
        let mut nodes = self.nodes.clone();
        // children always follow their parent, so a reverse sweep sees them first
        for id in (0..nodes.len()).rev() {
            let fresh = match &nodes[id] {
                Node::Leaf { start, end, .. } => {
                    let bounds = self.order[*start..*end].iter().fold(Aabb::empty(), |acc, &i| acc.merge(&boxes[i]));
                    Node::Leaf { bounds, start: *start, end: *end }
                }
                Node::Inner { left, right, .. } => {
                    let bounds = nodes[*left].bounds().merge(nodes[*right].bounds());
                    Node::Inner { bounds, left: *left, right: *right }
                }
            };
            nodes[id] = fresh;
        }
        Bvh { nodes, order: self.order.clone() }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn bounds(&self) -> Option<&Aabb> {
        self.nodes.first().map(Node::bounds)
    }

    /// Nearest primitive under `dist2`; ties go to the lower primitive index.
    pub fn nearest<T>(&self, query: &Point, mut dist2: impl FnMut(usize) -> (f64, T)) -> Option<(usize, f64, T)> {
        let mut best: Option<(usize, f64, T)> = None;
        if self.nodes.is_empty() {
            return None;
        }
        let mut stack: Vec<(usize, f64)> = vec![(0, self.nodes[0].bounds().distance2(query))];
        while let Some((node, lower)) = stack.pop() {
            if let Some((_, best_d, _)) = &best {
                if lower > *best_d {
                    continue;
                }
            }
            match &self.nodes[node] {
                Node::Leaf { start, end, .. } => {
                    for &prim in &self.order[*start..*end] {
                        let (d, payload) = dist2(prim);
                        let better = match &best {
                            None => true,
                            Some((bp, bd, _)) => d < *bd || (d == *bd && prim < *bp),
                        };
                        if better {
                            best = Some((prim, d, payload));
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[*left].bounds().distance2(query);
                    let dr = self.nodes[*right].bounds().distance2(query);
                    // push the farther child first so the nearer one is popped next
                    if dl <= dr {
                        stack.push((*right, dr));
                        stack.push((*left, dl));
                    } else {
                        stack.push((*left, dl));
                        stack.push((*right, dr));
                    }
                }
            }
        }
        best
    }
}

fn build_node(nodes: &mut Vec<Node>, order: &mut [usize], start: usize, end: usize, boxes: &[Aabb], centers: &[Point]) -> usize {
    let bounds = order[start..end].iter().fold(Aabb::empty(), |acc, &i| acc.merge(&boxes[i]));
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { bounds, start, end });
        return id;
    }
    let cbounds = Aabb::from_points(order[start..end].iter().map(|&i| &centers[i]));
    let extent = cbounds.max - cbounds.min;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    order[start..end].sort_by(|&a, &b| centers[a][axis].total_cmp(&centers[b][axis]).then(a.cmp(&b)));
    let mid = start + (end - start) / 2;
    nodes.push(Node::Leaf { bounds, start, end });
    let left = build_node(nodes, order, start, mid, boxes, centers);
    let right = build_node(nodes, order, mid, end, boxes, centers);
    nodes[id] = Node::Inner { bounds, left, right };
    id
}
