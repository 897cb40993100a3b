//! Synthetic rig and interaction scenes for tests, demos and the acceptance suite.
//!
//! The toy rig is z-up and faces +y. Every body segment is a closed box
//! rigidly bound to one joint; boxes are disjoint at rest, so the union is a
//! watertight surface.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body::{forward_kinematics, ModelParts, Pose, RomBounds, Skeleton, SkinnedModel};
use crate::geometry::{SpatialIndex, TriangleMesh};
use crate::math::{Point, Vec3};
use crate::scene::ObjectState;
use crate::sequence::{ContactLabels, InteractionSequence, PoseTrack};

pub const JOINT_NAMES: [&str; 24] = [
    "pelvis",
    "spine",
    "chest",
    "head",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "right_finger1_base",
    "right_finger1_tip",
    "right_finger2_base",
    "right_finger2_tip",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "left_finger1_base",
    "left_finger1_tip",
    "left_finger2_base",
    "left_finger2_tip",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
];

pub const SPINE: usize = 1;
pub const CHEST: usize = 2;
pub const RIGHT_SHOULDER: usize = 4;
pub const RIGHT_ELBOW: usize = 5;
pub const RIGHT_WRIST: usize = 6;
pub const RIGHT_FINGERS: [usize; 4] = [7, 8, 9, 10];
pub const LEFT_SHOULDER: usize = 11;
pub const LEFT_ELBOW: usize = 12;
pub const LEFT_WRIST: usize = 13;
pub const LEFT_FINGERS: [usize; 4] = [14, 15, 16, 17];

/// Index of the pelvis-front marker in the rig's marker list.
pub const ROOT_MARKER: usize = 0;
/// Toe and heel markers of both feet (indices into the marker list).
pub const FOOT_MARKERS: [usize; 4] = [23, 24, 27, 28];
/// Palm and fingertip markers of the right hand.
pub const RIGHT_HAND_MARKERS: [usize; 4] = [10, 11, 12, 13];

/// Default surface spacing of rig and object meshes (meters).
pub const SPACING: f64 = 0.03;
pub const OBJECT_SPACING: f64 = 0.01;
pub const FPS: f64 = 30.0;

fn joint_positions() -> [[f64; 3]; 24] {
    let arm = |s: f64| {
        [
            [0.22 * s, 0.0, 1.40],
            [0.22 * s, 0.28, 1.40],
            [0.22 * s, 0.52, 1.40],
            [0.24 * s, 0.60, 1.40],
            [0.24 * s, 0.645, 1.40],
            [0.20 * s, 0.60, 1.40],
            [0.20 * s, 0.645, 1.40],
        ]
    };
    let (r, l) = (arm(-1.0), arm(1.0));
    [
        [0.0, 0.0, 0.95],
        [0.0, 0.0, 1.10],
        [0.0, 0.0, 1.30],
        [0.0, 0.0, 1.55],
        r[0],
        r[1],
        r[2],
        r[3],
        r[4],
        r[5],
        r[6],
        l[0],
        l[1],
        l[2],
        l[3],
        l[4],
        l[5],
        l[6],
        [-0.1, 0.0, 0.90],
        [-0.1, 0.0, 0.50],
        [-0.1, 0.0, 0.08],
        [0.1, 0.0, 0.90],
        [0.1, 0.0, 0.50],
        [0.1, 0.0, 0.08],
    ]
}

const PARENTS: [i64; 24] = [-1, 0, 1, 2, 2, 4, 5, 6, 7, 6, 9, 2, 11, 12, 13, 14, 13, 16, 0, 18, 19, 0, 21, 22];

/// Box bounds of the segment bound to each joint.
fn segments() -> Vec<(usize, [f64; 3], [f64; 3])> {
    let mut out = vec![
        (0, [-0.16, -0.09, 0.90], [0.16, 0.09, 1.05]),
        (1, [-0.15, -0.09, 1.07], [0.15, 0.09, 1.22]),
        (2, [-0.17, -0.10, 1.24], [0.17, 0.10, 1.46]),
        (3, [-0.09, -0.10, 1.50], [0.09, 0.10, 1.72]),
    ];
    let x = |s: f64, a: f64, b: f64| if s < 0.0 { [-b, -a] } else { [a, b] };
    for (s, base) in [(-1.0, 4), (1.0, 11)] {
        let seg = |xs: [f64; 2], y: [f64; 2], z: [f64; 2]| ([xs[0], y[0], z[0]], [xs[1], y[1], z[1]]);
        let parts = [
            seg(x(s, 0.18, 0.26), [-0.03, 0.26], [1.36, 1.44]),
            seg(x(s, 0.185, 0.255), [0.28, 0.50], [1.365, 1.435]),
            seg(x(s, 0.18, 0.26), [0.52, 0.59], [1.39, 1.41]),
            seg(x(s, 0.225, 0.255), [0.60, 0.635], [1.39, 1.41]),
            seg(x(s, 0.225, 0.255), [0.645, 0.68], [1.39, 1.41]),
            seg(x(s, 0.185, 0.215), [0.60, 0.635], [1.39, 1.41]),
            seg(x(s, 0.185, 0.215), [0.645, 0.68], [1.39, 1.41]),
        ];
        for (k, (lo, hi)) in parts.into_iter().enumerate() {
            out.push((base + k, lo, hi));
        }
    }
    for (s, base) in [(-1.0, 18), (1.0, 21)] {
        out.push((base, [x(s, 0.04, 0.16)[0], -0.06, 0.52], [x(s, 0.04, 0.16)[1], 0.06, 0.88]));
        out.push((base + 1, [x(s, 0.05, 0.15)[0], -0.05, 0.10], [x(s, 0.05, 0.15)[1], 0.05, 0.48]));
        out.push((base + 2, [x(s, 0.05, 0.15)[0], -0.05, 0.0], [x(s, 0.05, 0.15)[1], 0.20, 0.07]));
    }
    out
}

/// Marker targets: the closest vertex of the given joint's segment is used.
fn marker_targets() -> Vec<(usize, [f64; 3])> {
    let mut out = vec![
        (0, [0.0, 0.09, 0.97]),
        (0, [0.0, -0.09, 0.97]),
        (1, [0.0, 0.09, 1.15]),
        (2, [0.0, 0.10, 1.35]),
        (2, [0.0, -0.10, 1.35]),
        (3, [0.0, 0.0, 1.72]),
        (3, [0.0, 0.10, 1.62]),
    ];
    for (s, base) in [(-1.0, 4), (1.0, 11)] {
        out.extend([
            (base, [0.22 * s, 0.13, 1.44]),
            (base + 1, [0.22 * s, 0.39, 1.435]),
            (base + 1, [0.22 * s, 0.39, 1.365]),
            (base + 2, [0.22 * s, 0.555, 1.39]),
            (base + 2, [0.22 * s, 0.555, 1.41]),
            (base + 4, [0.26 * s, 0.68, 1.39]),
            (base + 6, [0.18 * s, 0.68, 1.39]),
        ]);
    }
    for (s, base) in [(-1.0, 18), (1.0, 21)] {
        out.extend([
            (base + 1, [0.1 * s, 0.05, 0.48]),
            (base, [0.1 * s, 0.06, 0.70]),
            (base + 2, [0.1 * s, 0.20, 0.0]),
            (base + 2, [0.1 * s, -0.05, 0.0]),
        ]);
    }
    out
}

/// Closed box surface subdivided into a grid of roughly `spacing` cells,
/// outward-facing triangles.
pub fn box_surface(min: [f64; 3], max: [f64; 3], spacing: f64) -> (Vec<Point>, Vec<[usize; 3]>) {
    let n: [usize; 3] = std::array::from_fn(|a| (((max[a] - min[a]) / spacing).ceil() as usize).max(1));
    let mut ids: HashMap<[usize; 3], usize> = HashMap::new();
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    let mut vid = |c: [usize; 3], verts: &mut Vec<Point>| -> usize {
        *ids.entry(c).or_insert_with(|| {
            let p: [f64; 3] = std::array::from_fn(|a| {
                if c[a] == n[a] {
                    max[a]
                } else {
                    min[a] + (max[a] - min[a]) * c[a] as f64 / n[a] as f64
                }
            });
            verts.push(Point::new(p[0], p[1], p[2]));
            verts.len() - 1
        })
    };
    for a in 0..3 {
        let (u, v) = ((a + 1) % 3, (a + 2) % 3);
        for side in [0, n[a]] {
            for i in 0..n[u] {
                for j in 0..n[v] {
                    let corner = |di: usize, dj: usize| {
                        let mut c = [0; 3];
                        c[a] = side;
                        c[u] = i + di;
                        c[v] = j + dj;
                        c
                    };
                    let mut q = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
                    if side == 0 {
                        q.reverse();
                    }
                    let q = q.map(|c| vid(c, &mut verts));
                    faces.push([q[0], q[1], q[2]]);
                    faces.push([q[0], q[2], q[3]]);
                }
            }
        }
    }
    (verts, faces)
}

pub fn box_mesh(min: [f64; 3], max: [f64; 3], spacing: f64) -> TriangleMesh {
    let (v, f) = box_surface(min, max, spacing);
    TriangleMesh::new(v, f).expect("box surface is valid")
}

fn hand_rom(joints: usize) -> RomBounds {
    let mut rom = RomBounds::unbounded(3 * joints);
    for wrist in [RIGHT_WRIST, LEFT_WRIST] {
        for a in 0..3 {
            rom.min[3 * wrist + a] = -1.2;
            rom.max[3 * wrist + a] = 1.2;
        }
    }
    for f in RIGHT_FINGERS.iter().chain(&LEFT_FINGERS) {
        rom.min[3 * f] = -1.7;
        rom.max[3 * f] = 0.3;
        for a in 1..3 {
            rom.min[3 * f + a] = -0.3;
            rom.max[3 * f + a] = 0.3;
        }
    }
    rom
}

/// The 24-joint toy rig with surface spacing [`SPACING`].
pub fn toy_rig() -> SkinnedModel {
    toy_rig_with_spacing(SPACING)
}

pub fn toy_rig_with_spacing(spacing: f64) -> SkinnedModel {
    let pos = joint_positions();
    let parents: Vec<Option<usize>> = PARENTS.iter().map(|&p| (p >= 0).then_some(p as usize)).collect();
    let offsets: Vec<Vec3> = (0..24)
        .map(|j| {
            let here = Vec3::from(pos[j]);
            match parents[j] {
                Some(p) => here - Vec3::from(pos[p]),
                None => here,
            }
        })
        .collect();
    let skeleton = Skeleton::new(parents, offsets).expect("toy skeleton is valid");
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut weights = Vec::new();
    let mut ranges = vec![0..0; 24];
    for (joint, lo, hi) in segments() {
        let (v, f) = box_surface(lo, hi, spacing);
        let base = vertices.len();
        faces.extend(f.iter().map(|t| t.map(|i| i + base)));
        weights.extend(std::iter::repeat_n(vec![(joint, 1.0)], v.len()));
        vertices.extend(v);
        ranges[joint] = base..vertices.len();
    }
    let marker_ids = marker_targets()
        .into_iter()
        .map(|(joint, target)| {
            let t = Point::from(target);
            ranges[joint]
                .clone()
                .min_by(|&a, &b| (vertices[a] - t).norm().total_cmp(&(vertices[b] - t).norm()))
                .expect("segment has vertices")
        })
        .collect();
    SkinnedModel::new(ModelParts {
        skeleton,
        rest_vertices: vertices,
        weights,
        faces,
        marker_ids,
        left_hand: [LEFT_WRIST].into_iter().chain(LEFT_FINGERS).collect(),
        right_hand: [RIGHT_WRIST].into_iter().chain(RIGHT_FINGERS).collect(),
        rom: Some(hand_rom(24)),
    })
    .expect("toy rig is valid")
}

/// The rig with every triangle split into four and each vertex jittered by at
/// most `max_offset`; marker ids are left empty.
pub fn subdivided_rig(model: &SkinnedModel, max_offset: f64, seed: u64) -> SkinnedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vertices = model.rest_vertices.clone();
    let mut weights = model.weights.clone();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut faces = Vec::with_capacity(model.faces.len() * 4);
    for f in &model.faces {
        let mut mid = [0; 3];
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            mid[k] = *midpoint.entry(key).or_insert_with(|| {
                vertices.push(Point::from((vertices[a].coords + vertices[b].coords) * 0.5));
                weights.push(weights[a].clone());
                vertices.len() - 1
            });
        }
        faces.push([f[0], mid[0], mid[2]]);
        faces.push([mid[0], f[1], mid[1]]);
        faces.push([mid[2], mid[1], f[2]]);
        faces.push([mid[0], mid[1], mid[2]]);
    }
    for v in &mut vertices {
        let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let dir = if dir.norm() > 1e-9 { dir.normalize() } else { Vec3::x() };
        *v += dir * rng.random_range(0.0..max_offset);
    }
    SkinnedModel::new(ModelParts {
        skeleton: model.skeleton.clone(),
        rest_vertices: vertices,
        weights,
        faces,
        marker_ids: Vec::new(),
        left_hand: model.left_hand.clone(),
        right_hand: model.right_hand.clone(),
        rom: Some(model.rom.clone()),
    })
    .expect("subdivided rig is valid")
}

/// Rig channels built joint by joint from the identity pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseBuilder(pub Vec<f64>);

impl PoseBuilder {
    pub fn new(model: &SkinnedModel) -> Self {
        PoseBuilder(vec![0.0; model.channel_count()])
    }

    pub fn root(mut self, t: [f64; 3]) -> Self {
        self.0[..3].copy_from_slice(&t);
        self
    }

    pub fn joint(mut self, joint: usize, r: [f64; 3]) -> Self {
        self.0[3 + 3 * joint..6 + 3 * joint].copy_from_slice(&r);
        self
    }

    pub fn build(self) -> Vec<f64> {
        self.0
    }
}

/// Pose with the right arm bent to carry an object in front of the hip.
pub fn carry_pose(model: &SkinnedModel) -> PoseBuilder {
    PoseBuilder::new(model)
        .joint(RIGHT_SHOULDER, [-0.9, 0.0, 0.0])
        .joint(RIGHT_ELBOW, [1.3, 0.0, 0.0])
        .joint(RIGHT_WRIST, [-0.4, 0.0, 0.0])
}

/// A named synthetic interaction.
#[derive(Debug)]
pub struct Scene {
    pub name: &'static str,
    pub model: SkinnedModel,
    pub object: TriangleMesh,
    pub sequence: InteractionSequence,
    /// Ground truth says a hand touches the object.
    pub contact_flagged: bool,
}

/// Builds a sequence whose markers come from the rig and whose contact labels
/// mark markers within `contact_threshold` of the object.
pub fn make_sequence(
    model: &SkinnedModel,
    object: &TriangleMesh,
    poses: &[Vec<f64>],
    objects: &[ObjectState],
    contact_threshold: f64,
) -> InteractionSequence {
    let index = SpatialIndex::build(object.clone()).expect("object mesh is valid");
    let mut markers = Vec::new();
    for channels in poses {
        let pose = Pose::from_channels(channels, model.joint_count()).expect("pose matches rig");
        let frames = forward_kinematics(&model.skeleton, &pose).expect("finite pose");
        markers.push(model.skin_subset(&frames, &model.marker_ids));
    }
    let contact = ContactLabels::from_fn(poses.len(), model.marker_ids.len(), |i, m| {
        let f = objects[i].transform();
        let local = Point::from(f.rotation.transpose() * (markers[i][m].coords - f.translation));
        index.nearest_surface_point(&local).distance <= contact_threshold
    });
    let mut seq = InteractionSequence {
        fps: FPS,
        marker_count: 0,
        markers: Vec::new(),
        pose: Some(PoseTrack::from_frames(poses)),
        object_pose: objects.iter().map(ObjectState::to_pose).collect(),
        object_mesh: "object.obj".into(),
        ground_height: 0.0,
        contact: Some(contact),
    };
    seq.set_markers(&markers);
    seq
}

fn static_scene(
    name: &'static str,
    model: SkinnedModel,
    pose: Vec<f64>,
    object: TriangleMesh,
    frames: usize,
    contact_flagged: bool,
) -> Scene {
    let poses = vec![pose; frames];
    let objects = vec![ObjectState::identity(); frames];
    let sequence = make_sequence(&model, &object, &poses, &objects, 0.02);
    Scene { name, model, object, sequence, contact_flagged }
}

/// A box pushed 3 cm into the chest.
pub fn torso_penetration() -> Scene {
    let model = toy_rig();
    let pose = PoseBuilder::new(&model).build();
    let object = box_mesh([-0.10, 0.07, 1.26], [0.10, 0.27, 1.44], OBJECT_SPACING);
    static_scene("torso_penetration", model, pose, object, 5, false)
}

/// A box pressed 3 cm into the front of both thighs.
pub fn thigh_penetration() -> Scene {
    let model = toy_rig();
    let pose = PoseBuilder::new(&model).build();
    let object = box_mesh([-0.25, 0.03, 0.60], [0.25, 0.23, 0.80], OBJECT_SPACING);
    static_scene("thigh_penetration", model, pose, object, 5, false)
}

/// A box drifting into the chest: no contact in the first frame, 4 cm deep in the last.
pub fn moving_penetration() -> Scene {
    let model = toy_rig();
    let frames = 5;
    let poses = vec![PoseBuilder::new(&model).build(); frames];
    let object = box_mesh([-0.10, 0.0, 1.26], [0.10, 0.20, 1.44], OBJECT_SPACING);
    let objects: Vec<ObjectState> = (0..frames)
        .map(|i| ObjectState { rotation: Vec3::zeros(), translation: Vec3::new(0.0, 0.10 - 0.01 * i as f64, 0.0) })
        .collect();
    let sequence = make_sequence(&model, &object, &poses, &objects, 0.02);
    Scene { name: "moving_penetration", model, object, sequence, contact_flagged: false }
}

/// The right hand hovers 5 cm above a box.
pub fn floating_hand() -> Scene {
    let model = toy_rig();
    let pose = PoseBuilder::new(&model).build();
    let object = box_mesh([-0.31, 0.51, 1.14], [-0.13, 0.75, 1.34], OBJECT_SPACING);
    static_scene("floating_hand", model, pose, object, 5, true)
}

/// Both hands hover 4 cm above a wide box.
pub fn two_hand_floating() -> Scene {
    let model = toy_rig();
    let pose = PoseBuilder::new(&model).build();
    let object = box_mesh([-0.31, 0.51, 1.15], [0.31, 0.75, 1.35], OBJECT_SPACING);
    static_scene("two_hand_floating", model, pose, object, 5, true)
}

/// The right palm rests just above a box top while the stiff fingers stick out past its edge.
pub fn dead_hand() -> Scene {
    let model = toy_rig();
    let pose = PoseBuilder::new(&model).build();
    let object = box_mesh([-0.31, 0.51, 1.18], [-0.13, 0.60, 1.38], OBJECT_SPACING);
    static_scene("dead_hand", model, pose, object, 5, true)
}

/// A person walking slowly past a box on the floor; nothing touches.
pub fn clean_walk() -> Scene {
    let model = toy_rig();
    let frames = 5;
    let poses: Vec<Vec<f64>> =
        (0..frames).map(|i| PoseBuilder::new(&model).root([0.0, 0.01 * i as f64, 0.0]).build()).collect();
    let object = box_mesh([-0.15, 0.6, 0.0], [0.15, 0.9, 0.3], OBJECT_SPACING);
    let objects = vec![ObjectState::identity(); frames];
    let sequence = make_sequence(&model, &object, &poses, &objects, 0.02);
    Scene { name: "clean_walk", model, object, sequence, contact_flagged: false }
}

/// Right hand resting on top of a 20 cm box that is carried forward 1 cm per frame.
pub fn grasp_and_carry() -> Scene {
    let model = toy_rig();
    let base = carry_pose(&model).build();
    let pose = Pose::from_channels(&base, model.joint_count()).expect("pose matches rig");
    let frames0 = forward_kinematics(&model.skeleton, &pose).expect("finite pose");
    let hand = model.hand_vertices(&model.right_hand);
    let pts = model.skin_subset(&frames0, &hand);
    let min_z = pts.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / pts.len() as f64;
    let wrist_y = frames0[RIGHT_WRIST].translation.y;
    let top = min_z - 0.005;
    let object = box_mesh([cx - 0.10, wrist_y + 0.005, top - 0.20], [cx + 0.10, wrist_y + 0.205, top], OBJECT_SPACING);
    let frames = 6;
    let poses: Vec<Vec<f64>> = (0..frames)
        .map(|i| {
            let mut p = base.clone();
            p[1] = 0.01 * i as f64;
            p
        })
        .collect();
    let objects: Vec<ObjectState> = (0..frames)
        .map(|i| ObjectState { rotation: Vec3::zeros(), translation: Vec3::new(0.0, 0.01 * i as f64, 0.0) })
        .collect();
    let sequence = make_sequence(&model, &object, &poses, &objects, 0.02);
    Scene { name: "grasp_and_carry", model, object, sequence, contact_flagged: true }
}

/// The scenes with a correctable artifact.
pub fn artifact_scenes() -> Vec<Scene> {
    vec![torso_penetration(), moving_penetration(), thigh_penetration(), floating_hand(), two_hand_floating(), dead_hand()]
}
