//! On-disk fixtures and helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hoi_core::body::rig_file::to_rig_string;
use hoi_core::fixtures::Scene;
use hoi_core::geometry::obj::to_obj_string;
use hoi_core::sequence::save_sequence;

pub struct ScenePaths {
    pub bundle: PathBuf,
    pub mesh: PathBuf,
    pub rig: PathBuf,
}

/// Writes `<dir>/<scene name>/` as a bundle with its mesh inside, and the rig
/// as `<dir>/toy.rig`.
pub fn write_scene(dir: &Path, scene: &Scene) -> ScenePaths {
    let bundle = dir.join(scene.name);
    save_sequence(&scene.sequence, &bundle).unwrap();
    let mesh = bundle.join(&scene.sequence.object_mesh);
    std::fs::write(&mesh, to_obj_string(&scene.object)).unwrap();
    let rig = dir.join("toy.rig");
    if !rig.exists() {
        std::fs::write(&rig, to_rig_string(&scene.model)).unwrap();
    }
    ScenePaths { bundle, mesh, rig }
}

pub fn hoi<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hoi")).args(args).output().expect("binary runs")
}

pub fn p(path: &Path) -> String {
    path.display().to_string()
}

/// Every file under `root` keyed by its relative path.
pub fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().flatten().map(|e| e.path()).collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    if root.is_dir() {
        walk(root, root, &mut out);
    } else {
        out.insert(PathBuf::new(), std::fs::read(root).unwrap());
    }
    out
}

/// Same as [`tree_bytes`] without run manifests, which carry wall time.
pub fn output_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    tree_bytes(root).into_iter().filter(|(k, _)| !k.to_string_lossy().ends_with(".run.json")).collect()
}
