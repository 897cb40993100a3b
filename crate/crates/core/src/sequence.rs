//! Interaction sequences and their on-disk bundle format.
//!
//! A bundle is a directory holding `manifest.txt` (UTF-8 `key=value` lines)
//! and raw little-endian arrays: `markers.f32` (L×M×3), `object_pose.f32`
//! (L×7, quaternion `wxyz` then translation `xyz`), optional `pose.f32`
//! (L×C rig channels) and optional `contact.u8` (L×M bytes, 0 or 1).
//! Dimensions live only in the manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::body::{forward_kinematics, BodyError, Pose, RigidTransform, SkinnedModel};
use crate::math::{axis_angle_to_quat, quat_from_wxyz, quat_to_axis_angle, quat_to_wxyz, Point, Vec3};

pub const MANIFEST: &str = "manifest.txt";
pub const MARKERS_FILE: &str = "markers.f32";
pub const OBJECT_POSE_FILE: &str = "object_pose.f32";
pub const POSE_FILE: &str = "pose.f32";
pub const CONTACT_FILE: &str = "contact.u8";

const QUAT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{file}: expected {expected} bytes from the manifest, found {found}")]
    Dimension { file: String, expected: usize, found: usize },
    #[error("frame {frame}: object quaternion norm {norm} is not within 1e-6 of 1")]
    NonUnitQuaternion { frame: usize, norm: f64 },
    #[error("{field}: non-finite value at frame {frame}")]
    NonFinite { field: &'static str, frame: usize },
    #[error("contact.u8: byte {index} is {value}, expected 0 or 1")]
    BadContactByte { index: usize, value: u8 },
    #[error("invalid sequence: {0}")]
    Invalid(String),
    #[error("sequence has no rig pose channels")]
    MissingPose,
    #[error(transparent)]
    Body(#[from] BodyError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectPose {
    /// Unit quaternion, `wxyz`.
    pub rotation: [f32; 4],
    pub translation: [f32; 3],
}

impl ObjectPose {
    pub fn identity() -> Self {
        ObjectPose { rotation: [1.0, 0.0, 0.0, 0.0], translation: [0.0; 3] }
    }

    /// From an axis-angle rotation and translation (f64), rounded to storage precision.
    pub fn from_axis_angle(rotation: &Vec3, translation: &Vec3) -> Self {
        let q = quat_to_wxyz(&axis_angle_to_quat(rotation));
        ObjectPose {
            rotation: q.map(|c| c as f32),
            translation: [translation.x as f32, translation.y as f32, translation.z as f32],
        }
    }

    pub fn transform(&self) -> RigidTransform {
        let q = quat_from_wxyz(self.rotation.map(f64::from)).unwrap_or_else(nalgebra::UnitQuaternion::identity);
        RigidTransform { rotation: q.to_rotation_matrix().into_inner(), translation: self.translation_f64() }
    }

    pub fn translation_f64(&self) -> Vec3 {
        Vec3::new(self.translation[0] as f64, self.translation[1] as f64, self.translation[2] as f64)
    }

    pub fn axis_angle(&self) -> Vec3 {
        quat_from_wxyz(self.rotation.map(f64::from)).map_or(Vec3::zeros(), |q| quat_to_axis_angle(&q))
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.rotation.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>().sqrt()
    }
}

/// Frame × marker boolean contact matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContactLabels {
    frames: usize,
    markers: usize,
    data: Vec<bool>,
}

impl ContactLabels {
    pub fn new(frames: usize, markers: usize, data: Vec<bool>) -> Result<Self, SequenceError> {
        if data.len() != frames * markers {
            return Err(SequenceError::Invalid(format!(
                "contact labels have {} cells, expected {frames}×{markers}",
                data.len()
            )));
        }
        Ok(ContactLabels { frames, markers, data })
    }

    pub fn from_fn(frames: usize, markers: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..frames).flat_map(|i| (0..markers).map(move |j| (i, j))).map(|(i, j)| f(i, j)).collect();
        ContactLabels { frames, markers, data }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn markers(&self) -> usize {
        self.markers
    }

    pub fn get(&self, frame: usize, marker: usize) -> bool {
        self.data[frame * self.markers + marker]
    }

    pub fn cells(&self) -> &[bool] {
        &self.data
    }
}

/// Rig pose channels per frame (`channels` values each).
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrack {
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PoseTrack {
    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn frame_f64(&self, i: usize) -> Vec<f64> {
        self.frame(i).iter().map(|&c| c as f64).collect()
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Self {
        let channels = frames.first().map_or(0, Vec::len);
        PoseTrack { channels, data: frames.iter().flat_map(|f| f.iter().map(|&c| c as f32)).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSequence {
    pub fps: f64,
    /// Markers per frame (M).
    pub marker_count: usize,
    /// Row-major L×M positions.
    pub markers: Vec<[f32; 3]>,
    pub pose: Option<PoseTrack>,
    pub object_pose: Vec<ObjectPose>,
    pub object_mesh: String,
    /// Height (z) of the floor.
    pub ground_height: f64,
    pub contact: Option<ContactLabels>,
}

impl InteractionSequence {
    pub fn frames(&self) -> usize {
        self.object_pose.len()
    }

    pub fn marker(&self, frame: usize, m: usize) -> Point {
        let p = self.markers[frame * self.marker_count + m];
        Point::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }

    pub fn frame_markers(&self, frame: usize) -> Vec<Point> {
        (0..self.marker_count).map(|m| self.marker(frame, m)).collect()
    }

    pub fn pose_channels(&self, frame: usize) -> Result<Vec<f64>, SequenceError> {
        Ok(self.pose.as_ref().ok_or(SequenceError::MissingPose)?.frame_f64(frame))
    }

    pub fn set_markers(&mut self, frames: &[Vec<Point>]) {
        self.marker_count = frames.first().map_or(0, Vec::len);
        self.markers = frames.iter().flatten().map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
    }

    /// Checks every structural invariant; errors name the offending frame or field.
    pub fn validate(&self) -> Result<(), SequenceError> {
        let frames = self.frames();
        if frames < 2 {
            return Err(SequenceError::Invalid(format!("need at least 2 frames, got {frames}")));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(SequenceError::Invalid(format!("fps must be positive, got {}", self.fps)));
        }
        if !self.ground_height.is_finite() {
            return Err(SequenceError::Invalid("ground_height is not finite".into()));
        }
        if self.object_mesh.contains('\n') || self.object_mesh.contains('=') {
            return Err(SequenceError::Invalid("object_mesh may not contain '=' or newlines".into()));
        }
        if self.markers.len() != frames * self.marker_count {
            return Err(SequenceError::Invalid(format!(
                "{} marker rows for {frames} frames × {} markers",
                self.markers.len(),
                self.marker_count
            )));
        }
        if let Some(i) = self.markers.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(SequenceError::NonFinite { field: "markers", frame: i / self.marker_count.max(1) });
        }
        for (frame, op) in self.object_pose.iter().enumerate() {
            if !op.rotation.iter().chain(&op.translation).all(|c| c.is_finite()) {
                return Err(SequenceError::NonFinite { field: "object_pose", frame });
            }
            let norm = op.quaternion_norm();
            if (norm - 1.0).abs() > QUAT_TOLERANCE {
                return Err(SequenceError::NonUnitQuaternion { frame, norm });
            }
        }
        if let Some(pose) = &self.pose {
            if pose.channels == 0 || pose.data.len() != frames * pose.channels {
                return Err(SequenceError::Invalid(format!(
                    "pose track has {} values for {frames} frames × {} channels",
                    pose.data.len(),
                    pose.channels
                )));
            }
            if let Some(i) = pose.data.iter().position(|c| !c.is_finite()) {
                return Err(SequenceError::NonFinite { field: "pose", frame: i / pose.channels });
            }
        }
        if let Some(c) = &self.contact {
            if c.frames != frames || c.markers != self.marker_count {
                return Err(SequenceError::Invalid(format!(
                    "contact labels are {}×{}, sequence is {frames}×{}",
                    c.frames, c.markers, self.marker_count
                )));
            }
        }
        Ok(())
    }

    pub fn manifest_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "fps={}", self.fps);
        let _ = writeln!(out, "frames={}", self.frames());
        let _ = writeln!(out, "markers={}", self.marker_count);
        let _ = writeln!(out, "object_mesh={}", self.object_mesh);
        let _ = writeln!(out, "ground_height={}", self.ground_height);
        if let Some(p) = &self.pose {
            let _ = writeln!(out, "pose_channels={}", p.channels);
        }
        out
    }
}

fn f32_bytes(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}

fn read_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SequenceError + '_ {
    move |source| SequenceError::Io { path: path.to_path_buf(), source }
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>, SequenceError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(SequenceError::MissingFile(path));
    }
    fs::read(&path).map_err(io_err(&path))
}

fn expect_bytes(file: &str, bytes: &[u8], expected: usize) -> Result<(), SequenceError> {
    if bytes.len() != expected {
        return Err(SequenceError::Dimension { file: file.to_string(), expected, found: bytes.len() });
    }
    Ok(())
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>, SequenceError> {
    const KEYS: [&str; 6] = ["fps", "frames", "markers", "object_mesh", "ground_height", "pose_channels"];
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| SequenceError::Manifest(format!("line {}: expected key=value", n + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(SequenceError::Manifest(format!("line {}: unknown key {k:?}", n + 1)));
        }
        if map.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(SequenceError::Manifest(format!("line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(map)
}

fn manifest_value<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T, SequenceError> {
    let raw = map.get(key).ok_or_else(|| SequenceError::Manifest(format!("missing key {key:?}")))?;
    raw.parse::<T>().map_err(|_| SequenceError::Manifest(format!("bad value {raw:?} for {key:?}")))
}

pub fn load_sequence(dir: &Path) -> Result<InteractionSequence, SequenceError> {
    let manifest_bytes = read_file(dir, MANIFEST)?;
    let text = String::from_utf8(manifest_bytes).map_err(|_| SequenceError::Manifest("not valid UTF-8".into()))?;
    let map = parse_manifest(&text)?;
    let fps: f64 = manifest_value(&map, "fps")?;
    let frames: usize = manifest_value(&map, "frames")?;
    let marker_count: usize = manifest_value(&map, "markers")?;
    let ground_height: f64 = manifest_value(&map, "ground_height")?;
    let object_mesh: String = manifest_value(&map, "object_mesh")?;
    let pose_channels: Option<usize> =
        if map.contains_key("pose_channels") { Some(manifest_value(&map, "pose_channels")?) } else { None };

    let markers_raw = read_file(dir, MARKERS_FILE)?;
    expect_bytes(MARKERS_FILE, &markers_raw, frames * marker_count * 3 * 4)?;
    let markers = read_f32(&markers_raw).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();

    let object_raw = read_file(dir, OBJECT_POSE_FILE)?;
    expect_bytes(OBJECT_POSE_FILE, &object_raw, frames * 7 * 4)?;
    let object_pose = read_f32(&object_raw)
        .chunks_exact(7)
        .map(|c| ObjectPose { rotation: [c[0], c[1], c[2], c[3]], translation: [c[4], c[5], c[6]] })
        .collect();

    let pose = match pose_channels {
        Some(channels) => {
            let raw = read_file(dir, POSE_FILE)?;
            expect_bytes(POSE_FILE, &raw, frames * channels * 4)?;
            Some(PoseTrack { channels, data: read_f32(&raw) })
        }
        None => None,
    };

    let contact_path = dir.join(CONTACT_FILE);
    let contact = if contact_path.exists() {
        let raw = fs::read(&contact_path).map_err(io_err(&contact_path))?;
        expect_bytes(CONTACT_FILE, &raw, frames * marker_count)?;
        if let Some((index, &value)) = raw.iter().enumerate().find(|(_, &b)| b > 1) {
            return Err(SequenceError::BadContactByte { index, value });
        }
        Some(ContactLabels { frames, markers: marker_count, data: raw.iter().map(|&b| b == 1).collect() })
    } else {
        None
    };

    let seq = InteractionSequence { fps, marker_count, markers, pose, object_pose, object_mesh, ground_height, contact };
    seq.validate()?;
    Ok(seq)
}

/// Writes a bundle. Output bytes depend only on the sequence contents.
pub fn save_sequence(seq: &InteractionSequence, dir: &Path) -> Result<(), SequenceError> {
    seq.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, bytes: &[u8]| -> Result<(), SequenceError> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))
    };
    write(MANIFEST, seq.manifest_text().as_bytes())?;
    write(MARKERS_FILE, &f32_bytes(seq.markers.iter().flatten().copied()))?;
    write(
        OBJECT_POSE_FILE,
        &f32_bytes(seq.object_pose.iter().flat_map(|p| p.rotation.into_iter().chain(p.translation))),
    )?;
    let pose_path = dir.join(POSE_FILE);
    match &seq.pose {
        Some(p) => write(POSE_FILE, &f32_bytes(p.data.iter().copied()))?,
        None if pose_path.exists() => fs::remove_file(&pose_path).map_err(io_err(&pose_path))?,
        None => {}
    }
    let contact_path = dir.join(CONTACT_FILE);
    match &seq.contact {
        Some(c) => write(CONTACT_FILE, &c.data.iter().map(|&b| b as u8).collect::<Vec<_>>())?,
        None if contact_path.exists() => fs::remove_file(&contact_path).map_err(io_err(&contact_path))?,
        None => {}
    }
    Ok(())
}

/// Skins each frame's pose and gathers the marker vertices (L×M positions).
pub fn markers_from_rig(
    seq: &InteractionSequence,
    model: &SkinnedModel,
    marker_ids: &[usize],
) -> Result<Vec<Vec<Point>>, SequenceError> {
    let track = seq.pose.as_ref().ok_or(SequenceError::MissingPose)?;
    if track.channels != model.channel_count() {
        return Err(SequenceError::Body(BodyError::ChannelCount { expected: model.channel_count(), got: track.channels }));
    }
    if let Some(&bad) = marker_ids.iter().find(|&&m| m >= model.rest_vertices.len()) {
        return Err(SequenceError::Invalid(format!("marker vertex {bad} out of range")));
    }
    (0..seq.frames())
        .map(|i| {
            let pose = Pose::from_channels(&track.frame_f64(i), model.joint_count())?;
            let frames = forward_kinematics(&model.skeleton, &pose)?;
            Ok(model.skin_subset(&frames, marker_ids))
        })
        .collect()
}
