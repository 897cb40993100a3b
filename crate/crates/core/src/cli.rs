//! Command-line front end: `validate`, `correct`, `augment`, `evaluate`,
//! `encode-bps` and `batch`.
//!
//! Exit codes are 0 on success, 1 when inputs fail validation or processing,
//! and 2 on usage errors (bad flags, config keys or values). Every file is
//! written to a temporary sibling and renamed into place. Each run also writes
//! a `<report>.run.json` manifest with the effective configuration.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::augment::{attempt_seed, augment_sequence, AugmentOutcome, FilterMeasurements, RejectReason};
use crate::body::rig_file::load_rig;
use crate::body::SkinnedModel;
use crate::config::{ConfigError, RunConfig};
use crate::geometry::obj::load_obj;
use crate::geometry::{SpatialIndex, TriangleMesh};
use crate::metrics::{evaluate, MetricsReport};
use crate::optimize::{correct_sequence, ArtifactMetrics, CorrectionReport};
use crate::representation::{encode_object, sample_bps_basis, BpsMode, DEFAULT_BPS_SIZE};
use crate::sequence::{load_sequence, save_sequence, InteractionSequence, MANIFEST};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Name of the aggregate report written by `batch`.
pub const AGGREGATE_FILE: &str = "aggregate.json";
/// Per-sequence report name inside a batch output directory.
pub const SEQUENCE_REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "hoi", version, about = "Correct, augment and evaluate human-object interaction sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a sequence bundle, and optionally a rig and an object mesh.
    Validate(ValidateArgs),
    /// Remove penetration and restore hand contact.
    Correct(CorrectArgs),
    /// Displace the object and re-align the body to it.
    Augment(AugmentArgs),
    /// Compute interaction metrics.
    Evaluate(EvaluateArgs),
    /// Encode an object mesh against a seeded basis point set.
    EncodeBps(EncodeBpsArgs),
    /// Run correct, augment or evaluate over a list of bundles.
    Batch(BatchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable and applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Write the findings as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorrectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub rig: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Bundle directory for the corrected sequence.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub rig: PathBuf,
    /// Base seed; overrides `augment.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of attempts.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Accepted attempts are written here as `attempt_NNN` bundles.
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Ground-truth sequence for the comparison metrics.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub mesh: PathBuf,
    /// Rig for skinned-vertex metrics; markers are used without it.
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    /// Defaults to csv for a `.csv` report path and json otherwise.
    #[arg(long, value_enum)]
    pub format: Option<ReportFormat>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BpsModeArg {
    Distance,
    Delta,
}

#[derive(Debug, Args)]
pub struct EncodeBpsArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_BPS_SIZE)]
    pub dim: usize,
    #[arg(long, value_enum, default_value_t = BpsModeArg::Distance)]
    pub mode: BpsModeArg,
    /// Basis ball radius; the object is scaled to fit it.
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    /// Little-endian f32 feature file; `<output>.manifest.txt` describes it.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BatchCommand {
    Correct,
    Augment,
    Evaluate,
}

#[derive(Debug, Args)]
pub struct BatchArgs {
    /// Text file with one bundle path per line, relative to the file.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub command: BatchCommand,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Required for correct and augment.
    #[arg(long)]
    pub rig: Option<PathBuf>,
    /// Object mesh for every bundle; defaults to each bundle's own mesh file.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Sequences processed concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Why a run stopped.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Failure(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn fail(context: impl fmt::Display, e: impl fmt::Display) -> CliError {
    CliError::Failure(format!("{context}: {e}"))
}

/// Reproduction record written next to every report.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub argv: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub exit_code: u8,
    pub error: Option<String>,
    pub wall_time_seconds: f64,
}

struct RunRecord {
    command: &'static str,
    argv: Vec<String>,
    config: Option<RunConfig>,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest_path: Option<PathBuf>,
}

impl RunRecord {
    fn new(command: &'static str, argv: &[String]) -> Self {
        RunRecord {
            command,
            argv: argv.to_vec(),
            config: None,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            manifest_path: None,
        }
    }

    fn finish(&self, result: &Result<(), CliError>, started: Instant) {
        let manifest = RunManifest {
            command: self.command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            argv: self.argv.clone(),
            config: self.config.as_ref().map(|c| c.entries().into_iter().collect()).unwrap_or_default(),
            seeds: self.seeds.clone(),
            inputs: self.inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            exit_code: match result {
                Ok(()) => EXIT_OK,
                Err(e) => e.exit_code(),
            },
            error: result.as_ref().err().map(|e| e.to_string()),
            wall_time_seconds: started.elapsed().as_secs_f64(),
        };
        let Ok(json) = serde_json::to_string_pretty(&manifest) else { return };
        match &self.manifest_path {
            Some(path) => {
                if let Err(e) = write_atomic(path, json.as_bytes()) {
                    log::warn!("cannot write run manifest {}: {e}", path.display());
                }
            }
            None => log::info!("run manifest: {json}"),
        }
    }
}

/// `<path>.run.json`
pub fn run_manifest_path(report: &Path) -> PathBuf {
    let mut name = report.file_name().map(OsString::from).unwrap_or_default();
    name.push(".run.json");
    report.with_file_name(name)
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command, argv: &[String]) -> Result<(), CliError> {
    let started = Instant::now();
    let (name, result, record) = match command {
        Command::Validate(a) => with_record("validate", argv, |r| cmd_validate(&a, r)),
        Command::Correct(a) => with_record("correct", argv, |r| cmd_correct(&a, r)),
        Command::Augment(a) => with_record("augment", argv, |r| cmd_augment(&a, r)),
        Command::Evaluate(a) => with_record("evaluate", argv, |r| cmd_evaluate(&a, r)),
        Command::EncodeBps(a) => with_record("encode-bps", argv, |r| cmd_encode_bps(&a, r)),
        Command::Batch(a) => with_record("batch", argv, |r| cmd_batch(&a, r)),
    };
    log::debug!("{name} finished in {:.3} s", started.elapsed().as_secs_f64());
    record.finish(&result, started);
    result
}

fn with_record(
    name: &'static str,
    argv: &[String],
    f: impl FnOnce(&mut RunRecord) -> Result<(), CliError>,
) -> (&'static str, Result<(), CliError>, RunRecord) {
    let mut record = RunRecord::new(name, argv);
    let result = f(&mut record);
    (name, result, record)
}

// ---------------------------------------------------------------------------
// file helpers

/// Writes `bytes` to a temporary file beside `path` and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = parent_dir(path);
    std::fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::Builder::new().prefix(".hoi-").tempfile_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Builds a directory in a temporary sibling and renames it to `target`.
/// An existing `target` is replaced only when `replaceable` accepts it.
fn write_dir_atomic(
    target: &Path,
    replaceable: impl Fn(&Path) -> bool,
    fill: impl FnOnce(&Path) -> Result<(), CliError>,
) -> Result<(), CliError> {
    if target.exists() && !replaceable(target) {
        return Err(CliError::Usage(format!(
            "{} exists and is not a previous output; remove it or choose another path",
            target.display()
        )));
    }
    let dir = parent_dir(target);
    std::fs::create_dir_all(&dir).map_err(|e| fail(dir.display(), e))?;
    let tmp = tempfile::Builder::new().prefix(".hoi-").tempdir_in(&dir).map_err(|e| fail(dir.display(), e))?;
    fill(tmp.path())?;
    if target.exists() {
        std::fs::remove_dir_all(target).map_err(|e| fail(target.display(), e))?;
    }
    let kept = tmp.keep();
    std::fs::rename(&kept, target).map_err(|e| fail(target.display(), e))
}

fn is_empty_dir(path: &Path) -> bool {
    std::fs::read_dir(path).map(|mut d| d.next().is_none()).unwrap_or(false)
}

fn is_bundle_dir(path: &Path) -> bool {
    path.is_dir() && (path.join(MANIFEST).is_file() || is_empty_dir(path))
}

/// Only bundles, reports and run manifests written by earlier runs.
fn is_output_dir(path: &Path) -> bool {
    let Ok(entries) = std::fs::read_dir(path) else { return false };
    entries.flatten().all(|e| {
        let p = e.path();
        let name = e.file_name().to_string_lossy().into_owned();
        (p.is_dir() && is_bundle_dir(&p)) || name.ends_with(".json")
    })
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

fn refuse_overwrite(output: &Path, inputs: &[&Path]) -> Result<(), CliError> {
    for input in inputs {
        if same_path(output, input) || output.canonicalize().is_ok_and(|o| input.canonicalize().is_ok_and(|i| i.starts_with(&o))) {
            return Err(CliError::Usage(format!(
                "output {} would overwrite input {}",
                output.display(),
                input.display()
            )));
        }
    }
    Ok(())
}

fn json_bytes(value: &impl Serialize) -> Result<Vec<u8>, CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| fail("serializing report", e))?;
    text.push('\n');
    Ok(text.into_bytes())
}

fn write_file(path: &Path, bytes: &[u8], record: &mut RunRecord) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| fail(path.display(), e))?;
    record.outputs.push(path.to_path_buf());
    Ok(())
}

fn read_sequence(path: &Path) -> Result<InteractionSequence, CliError> {
    load_sequence(path).map_err(|e| fail(format!("bundle {}", path.display()), e))
}

fn read_mesh(path: &Path) -> Result<TriangleMesh, CliError> {
    load_obj(path).map_err(|e| fail(format!("mesh {}", path.display()), e))
}

fn read_rig(path: &Path) -> Result<SkinnedModel, CliError> {
    load_rig(path).map_err(|e| fail(format!("rig {}", path.display()), e))
}

fn load_config(args: &ConfigArgs, record: &mut RunRecord) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
        record.inputs.push(path.clone());
    }
    cfg.apply_overrides(&args.overrides)?;
    Ok(cfg)
}

/// Saves `seq` as a bundle with a copy of its object mesh beside it.
fn save_bundle(seq: &InteractionSequence, mesh: &Path, dir: &Path) -> Result<(), CliError> {
    save_sequence(seq, dir).map_err(|e| fail(dir.display(), e))?;
    let name = Path::new(&seq.object_mesh);
    if name.components().count() == 1 && !seq.object_mesh.is_empty() {
        std::fs::copy(mesh, dir.join(name)).map_err(|e| fail(mesh.display(), e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// validate

#[derive(Debug, Serialize)]
struct ValidateReport {
    valid: bool,
    frames: Option<usize>,
    markers: Option<usize>,
    pose_channels: Option<usize>,
    has_contact_labels: Option<bool>,
    mesh_vertices: Option<usize>,
    mesh_faces: Option<usize>,
    mesh_watertight: Option<bool>,
    problems: Vec<String>,
}

fn cmd_validate(a: &ValidateArgs, record: &mut RunRecord) -> Result<(), CliError> {
    record.inputs.push(a.input.clone());
    record.manifest_path = a.report.as_deref().map(run_manifest_path);
    let mut report = ValidateReport {
        valid: true,
        frames: None,
        markers: None,
        pose_channels: None,
        has_contact_labels: None,
        mesh_vertices: None,
        mesh_faces: None,
        mesh_watertight: None,
        problems: Vec::new(),
    };
    let seq = match load_sequence(&a.input) {
        Ok(s) => {
            report.frames = Some(s.frames());
            report.markers = Some(s.marker_count);
            report.pose_channels = s.pose.as_ref().map(|p| p.channels);
            report.has_contact_labels = Some(s.contact.is_some());
            Some(s)
        }
        Err(e) => {
            report.problems.push(format!("bundle: {e}"));
            None
        }
    };
    if let Some(rig) = &a.rig {
        record.inputs.push(rig.clone());
        match load_rig(rig) {
            Ok(model) => {
                if let Some(seq) = &seq {
                    match &seq.pose {
                        Some(p) if p.channels != model.channel_count() => report.problems.push(format!(
                            "rig has {} pose channels, bundle has {}",
                            model.channel_count(),
                            p.channels
                        )),
                        None => report.problems.push("bundle has no pose channels for the rig".into()),
                        _ => {}
                    }
                }
            }
            Err(e) => report.problems.push(format!("rig: {e}")),
        }
    }
    if let Some(mesh) = &a.mesh {
        record.inputs.push(mesh.clone());
        match load_obj(mesh).and_then(SpatialIndex::build) {
            Ok(index) => {
                report.mesh_vertices = Some(index.mesh().vertices().len());
                report.mesh_faces = Some(index.mesh().faces().len());
                report.mesh_watertight = Some(index.is_watertight());
                if !index.is_watertight() {
                    report.problems.push("mesh is not watertight".into());
                }
            }
            Err(e) => report.problems.push(format!("mesh: {e}")),
        }
    }
    report.valid = report.problems.is_empty();
    if let Some(path) = &a.report {
        write_file(path, &json_bytes(&report)?, record)?;
    }
    if report.valid {
        println!("valid: {}", a.input.display());
        Ok(())
    } else {
        for p in &report.problems {
            println!("invalid: {p}");
        }
        Err(CliError::Failure(format!("{} problem(s) found", report.problems.len())))
    }
}

// ---------------------------------------------------------------------------
// correct

/// Corrects one bundle; returns the corrected sequence and the report bytes.
fn correct_one(
    seq: &InteractionSequence,
    mesh: &TriangleMesh,
    model: &SkinnedModel,
    cfg: &RunConfig,
) -> Result<(InteractionSequence, CorrectionReport, Vec<u8>), CliError> {
    let (corrected, report) = correct_sequence(seq, model, mesh, &cfg.correction).map_err(|e| fail("correction", e))?;
    let bytes = json_bytes(&report)?;
    Ok((corrected, report, bytes))
}

fn cmd_correct(a: &CorrectArgs, record: &mut RunRecord) -> Result<(), CliError> {
    record.manifest_path = Some(run_manifest_path(&a.report));
    record.inputs.extend([a.input.clone(), a.mesh.clone(), a.rig.clone()]);
    let cfg = load_config(&a.config, record)?;
    cfg.correction.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    record.seeds.insert("correct.sample_seed".into(), cfg.correction.sample_seed);
    record.config = Some(cfg.clone());
    refuse_overwrite(&a.output, &[&a.input, &a.mesh, &a.rig])?;
    refuse_overwrite(&a.report, &[&a.input, &a.mesh, &a.rig])?;

    let seq = read_sequence(&a.input)?;
    let mesh = read_mesh(&a.mesh)?;
    let model = read_rig(&a.rig)?;
    let (corrected, report, bytes) = correct_one(&seq, &mesh, &model, &cfg)?;
    write_dir_atomic(&a.output, is_bundle_dir, |tmp| save_bundle(&corrected, &a.mesh, tmp))?;
    record.outputs.push(a.output.clone());
    write_file(&a.report, &bytes, record)?;
    println!(
        "penetration_depth {:.6} -> {:.6}, contact_ratio {:.6} -> {:.6}",
        report.before.penetration_depth,
        report.after.penetration_depth,
        report.before.contact_ratio,
        report.after.contact_ratio
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// augment

/// Seed stream of one sequence: the base seed mixed with a hash of the bundle
/// directory name, so results do not depend on batch order.
pub fn sequence_seed(seed: u64, bundle: &Path) -> u64 {
    let name = bundle
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .or_else(|| bundle.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_default();
    // FNV-1a
    let key = name.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    attempt_seed(seed, key)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricDeltas {
    pub penetration_depth: f64,
    pub contact_ratio: f64,
}

#[derive(Debug, Serialize)]
pub struct AttemptReport {
    pub index: usize,
    pub seed: u64,
    pub offset: [f64; 3],
    pub accepted: bool,
    pub reasons: Vec<RejectReason>,
    pub before: ArtifactMetrics,
    pub after: Option<ArtifactMetrics>,
    pub delta: Option<MetricDeltas>,
    pub filter: Option<FilterMeasurements>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Bundle directory relative to the output directory.
    pub output: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct AugmentReport {
    pub base_seed: u64,
    pub sequence_seed: u64,
    pub attempts: Vec<AttemptReport>,
    pub accepted: usize,
}

fn attempt_report(index: usize, o: &AugmentOutcome) -> AttemptReport {
    let delta = o.after.map(|after| MetricDeltas {
        penetration_depth: after.penetration_depth - o.before.penetration_depth,
        contact_ratio: after.contact_ratio - o.before.contact_ratio,
    });
    AttemptReport {
        index,
        seed: o.seed,
        offset: o.offset,
        accepted: o.is_accepted(),
        reasons: o.reasons(),
        before: o.before,
        after: o.after,
        delta,
        filter: o.verdict.as_ref().map(|v| v.measurements),
        initial_loss: o.alignment.as_ref().map(|al| al.initial.total()),
        final_loss: o.alignment.as_ref().map(|al| al.best.total()),
        output: o.is_accepted().then(|| attempt_dir_name(index)),
    }
}

fn attempt_dir_name(index: usize) -> String {
    format!("attempt_{index:03}")
}

struct AugmentRun {
    report: AugmentReport,
    accepted: Vec<(String, InteractionSequence)>,
}

fn augment_one(
    seq: &InteractionSequence,
    mesh: &TriangleMesh,
    model: &SkinnedModel,
    cfg: &RunConfig,
    stream: u64,
    count: usize,
) -> Result<AugmentRun, CliError> {
    let mut attempts = Vec::with_capacity(count);
    let mut accepted = Vec::new();
    for index in 0..count {
        let mut acfg = cfg.augment.clone();
        acfg.seed = attempt_seed(stream, index as u64);
        let outcome = augment_sequence(seq, model, mesh, &acfg).map_err(|e| fail(format!("attempt {index}"), e))?;
        if let Some(s) = &outcome.accepted {
            accepted.push((attempt_dir_name(index), s.clone()));
        }
        attempts.push(attempt_report(index, &outcome));
    }
    let report = AugmentReport { base_seed: cfg.augment.seed, sequence_seed: stream, accepted: accepted.len(), attempts };
    Ok(AugmentRun { report, accepted })
}

fn write_augment_dir(run: &AugmentRun, mesh: &Path, dir: &Path) -> Result<(), CliError> {
    for (name, seq) in &run.accepted {
        save_bundle(seq, mesh, &dir.join(name))?;
    }
    Ok(())
}

fn cmd_augment(a: &AugmentArgs, record: &mut RunRecord) -> Result<(), CliError> {
    record.manifest_path = Some(run_manifest_path(&a.report));
    record.inputs.extend([a.input.clone(), a.mesh.clone(), a.rig.clone()]);
    let mut cfg = load_config(&a.config, record)?;
    if let Some(seed) = a.seed {
        cfg.augment.seed = seed;
    }
    cfg.augment.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let stream = sequence_seed(cfg.augment.seed, &a.input);
    record.seeds.insert("augment.seed".into(), cfg.augment.seed);
    record.seeds.insert("sequence_seed".into(), stream);
    record.config = Some(cfg.clone());
    refuse_overwrite(&a.output_dir, &[&a.input, &a.mesh, &a.rig])?;
    refuse_overwrite(&a.report, &[&a.input, &a.mesh, &a.rig])?;

    let seq = read_sequence(&a.input)?;
    let mesh = read_mesh(&a.mesh)?;
    let model = read_rig(&a.rig)?;
    let run = augment_one(&seq, &mesh, &model, &cfg, stream, a.count)?;
    write_dir_atomic(&a.output_dir, |p| p.is_dir() && is_output_dir(p), |tmp| write_augment_dir(&run, &a.mesh, tmp))?;
    record.outputs.push(a.output_dir.clone());
    write_file(&a.report, &json_bytes(&run.report)?, record)?;
    println!("{} of {} attempts accepted", run.report.accepted, a.count);
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

fn evaluate_one(
    seq: &InteractionSequence,
    reference: Option<&InteractionSequence>,
    mesh: &TriangleMesh,
    model: Option<&SkinnedModel>,
    cfg: &RunConfig,
) -> Result<MetricsReport, CliError> {
    evaluate(seq, reference, mesh, model, &cfg.evaluate).map_err(|e| fail("evaluation", e))
}

fn cmd_evaluate(a: &EvaluateArgs, record: &mut RunRecord) -> Result<(), CliError> {
    record.manifest_path = Some(run_manifest_path(&a.report));
    record.inputs.extend([a.input.clone(), a.mesh.clone()]);
    record.inputs.extend(a.reference.iter().cloned());
    record.inputs.extend(a.rig.iter().cloned());
    let cfg = load_config(&a.config, record)?;
    record.config = Some(cfg.clone());
    let format = a.format.unwrap_or(if a.report.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        ReportFormat::Csv
    } else {
        ReportFormat::Json
    });
    refuse_overwrite(&a.report, &[&a.input, &a.mesh])?;

    let seq = read_sequence(&a.input)?;
    let reference = a.reference.as_deref().map(read_sequence).transpose()?;
    let mesh = read_mesh(&a.mesh)?;
    let model = a.rig.as_deref().map(read_rig).transpose()?;
    let report = evaluate_one(&seq, reference.as_ref(), &mesh, model.as_ref(), &cfg)?;
    let bytes = match format {
        ReportFormat::Json => json_bytes(&report)?,
        ReportFormat::Csv => report.to_csv().into_bytes(),
    };
    write_file(&a.report, &bytes, record)?;
    println!("penetration_depth {:.6}, contact_ratio {:.6}", report.penetration_depth, report.contact_ratio);
    Ok(())
}

// ---------------------------------------------------------------------------
// encode-bps

fn cmd_encode_bps(a: &EncodeBpsArgs, record: &mut RunRecord) -> Result<(), CliError> {
    record.manifest_path = Some(run_manifest_path(&a.output));
    record.inputs.push(a.mesh.clone());
    record.seeds.insert("seed".into(), a.seed);
    refuse_overwrite(&a.output, &[&a.mesh])?;
    if a.dim == 0 || !(a.radius.is_finite() && a.radius > 0.0) {
        return Err(CliError::Usage("--dim must be at least 1 and --radius positive".into()));
    }
    let mode = match a.mode {
        BpsModeArg::Distance => BpsMode::Distance,
        BpsModeArg::Delta => BpsMode::Delta,
    };
    let mesh = read_mesh(&a.mesh)?;
    let basis = sample_bps_basis(a.seed, a.dim, a.radius).map_err(|e| fail("basis", e))?;
    let encoding = encode_object(&mesh, &basis, mode).map_err(|e| fail("encoding", e))?;
    let bytes: Vec<u8> = encoding.features.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    let n = encoding.normalization;
    let manifest = format!(
        "format=bps\ndtype=f32le\ndim={}\nmode={}\nwidth={}\nvalues={}\nseed={}\nradius={}\ncenter={},{},{}\nscale={}\n",
        a.dim,
        match mode {
            BpsMode::Distance => "distance",
            BpsMode::Delta => "delta",
        },
        mode.width(),
        encoding.features.len(),
        a.seed,
        a.radius,
        n.center[0],
        n.center[1],
        n.center[2],
        n.scale
    );
    write_file(&a.output, &bytes, record)?;
    let mut manifest_path = a.output.clone().into_os_string();
    manifest_path.push(".manifest.txt");
    write_file(Path::new(&manifest_path), manifest.as_bytes(), record)?;
    println!("{} values written to {}", encoding.features.len(), a.output.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// batch

#[derive(Debug, Serialize)]
pub struct BatchEntry {
    pub name: String,
    pub input: String,
    pub ok: bool,
    pub error: Option<String>,
    /// Scalar results of this sequence, by name.
    pub summary: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize)]
pub struct AggregateReport {
    pub command: String,
    pub sequences: Vec<BatchEntry>,
    pub succeeded: usize,
    pub failed: usize,
    /// Mean of every summary value over the sequences that report it.
    pub means: BTreeMap<String, f64>,
}

/// Reads a batch manifest: one bundle path per line, `#` comments, paths
/// relative to the manifest's directory.
pub fn read_batch_manifest(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| fail(path.display(), e))?;
    let base = parent_dir(path);
    let bundles: Vec<PathBuf> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| base.join(l))
        .collect();
    if bundles.is_empty() {
        return Err(CliError::Usage(format!("batch manifest {} lists no bundles", path.display())));
    }
    Ok(bundles)
}

fn bundle_name(path: &Path) -> String {
    path.canonicalize()
        .ok()
        .as_deref()
        .unwrap_or(path)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into())
}

struct BatchContext<'a> {
    command: BatchCommand,
    model: Option<&'a SkinnedModel>,
    mesh_override: Option<&'a Path>,
    cfg: &'a RunConfig,
    count: usize,
}

fn batch_one(ctx: &BatchContext<'_>, bundle: &Path, out: &Path) -> Result<BTreeMap<String, f64>, CliError> {
    let seq = read_sequence(bundle)?;
    let mesh_path = match ctx.mesh_override {
        Some(p) => p.to_path_buf(),
        None => bundle.join(&seq.object_mesh),
    };
    let mesh = read_mesh(&mesh_path)?;
    let mut summary = BTreeMap::new();
    match ctx.command {
        BatchCommand::Correct => {
            let model = ctx.model.ok_or_else(|| CliError::Usage("batch correct needs --rig".into()))?;
            let (corrected, report, bytes) = correct_one(&seq, &mesh, model, ctx.cfg)?;
            write_dir_atomic(out, |p| p.is_dir() && is_output_dir(p), |tmp| {
                save_bundle(&corrected, &mesh_path, &tmp.join("bundle"))?;
                write_atomic(&tmp.join(SEQUENCE_REPORT_FILE), &bytes).map_err(|e| fail("report", e))
            })?;
            summary.insert("before.penetration_depth".into(), report.before.penetration_depth);
            summary.insert("after.penetration_depth".into(), report.after.penetration_depth);
            summary.insert("before.contact_ratio".into(), report.before.contact_ratio);
            summary.insert("after.contact_ratio".into(), report.after.contact_ratio);
        }
        BatchCommand::Augment => {
            let model = ctx.model.ok_or_else(|| CliError::Usage("batch augment needs --rig".into()))?;
            let stream = sequence_seed(ctx.cfg.augment.seed, bundle);
            let run = augment_one(&seq, &mesh, model, ctx.cfg, stream, ctx.count)?;
            let bytes = json_bytes(&run.report)?;
            write_dir_atomic(out, |p| p.is_dir() && is_output_dir(p), |tmp| {
                write_augment_dir(&run, &mesh_path, tmp)?;
                write_atomic(&tmp.join(SEQUENCE_REPORT_FILE), &bytes).map_err(|e| fail("report", e))
            })?;
            summary.insert("accepted".into(), run.report.accepted as f64);
            summary.insert("acceptance_rate".into(), run.report.accepted as f64 / ctx.count as f64);
        }
        BatchCommand::Evaluate => {
            let report = evaluate_one(&seq, None, &mesh, ctx.model, ctx.cfg)?;
            let bytes = json_bytes(&report)?;
            write_dir_atomic(out, |p| p.is_dir() && is_output_dir(p), |tmp| {
                write_atomic(&tmp.join(SEQUENCE_REPORT_FILE), &bytes).map_err(|e| fail("report", e))
            })?;
            for (k, v) in report.scalar_rows() {
                summary.insert(k.into(), v);
            }
        }
    }
    Ok(summary)
}

/// Means of each key over the entries that carry it, in key order.
pub fn aggregate_means(entries: &[BatchEntry]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.ok) {
        for (k, v) in &e.summary {
            let s = sums.entry(k.clone()).or_insert((0.0, 0));
            s.0 += v;
            s.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect()
}

fn cmd_batch(a: &BatchArgs, record: &mut RunRecord) -> Result<(), CliError> {
    let aggregate_path = a.out_dir.join(AGGREGATE_FILE);
    record.manifest_path = Some(run_manifest_path(&aggregate_path));
    record.inputs.push(a.manifest.clone());
    let mut cfg = load_config(&a.config, record)?;
    if let Some(seed) = a.seed {
        cfg.augment.seed = seed;
    }
    match a.command {
        BatchCommand::Correct => cfg.correction.validate().map_err(|e| CliError::Usage(e.to_string()))?,
        BatchCommand::Augment => cfg.augment.validate().map_err(|e| CliError::Usage(e.to_string()))?,
        BatchCommand::Evaluate => {}
    }
    if a.jobs == 0 || a.count == 0 {
        return Err(CliError::Usage("--jobs and --count must be at least 1".into()));
    }
    if a.command != BatchCommand::Evaluate && a.rig.is_none() {
        return Err(CliError::Usage("batch correct and augment need --rig".into()));
    }
    record.seeds.insert("augment.seed".into(), cfg.augment.seed);
    record.config = Some(cfg.clone());

    let bundles = read_batch_manifest(&a.manifest)?;
    let names: Vec<String> = bundles.iter().map(|b| bundle_name(b)).collect();
    let mut sorted = names.clone();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(CliError::Usage(format!("two bundles share the directory name {}", w[0])));
    }
    for b in &bundles {
        refuse_overwrite(&a.out_dir, &[b])?;
    }
    record.inputs.extend(bundles.iter().cloned());
    record.inputs.extend(a.rig.iter().cloned());
    record.inputs.extend(a.mesh.iter().cloned());
    let model = a.rig.as_deref().map(read_rig).transpose()?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| fail(a.out_dir.display(), e))?;

    let ctx = BatchContext { command: a.command, model: model.as_ref(), mesh_override: a.mesh.as_deref(), cfg: &cfg, count: a.count };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs).build().map_err(|e| fail("thread pool", e))?;
    let results: Vec<Result<BTreeMap<String, f64>, CliError>> = pool.install(|| {
        bundles.par_iter().zip(&names).map(|(b, name)| batch_one(&ctx, b, &a.out_dir.join(name))).collect()
    });

    let sequences: Vec<BatchEntry> = bundles
        .iter()
        .zip(names)
        .zip(results)
        .map(|((b, name), r)| {
            let input = b.display().to_string();
            match r {
                Ok(summary) => BatchEntry { name, input, ok: true, error: None, summary },
                Err(e) => {
                    log::warn!("{name}: {e}");
                    BatchEntry { name, input, ok: false, error: Some(e.to_string()), summary: BTreeMap::new() }
                }
            }
        })
        .collect();
    let failed = sequences.iter().filter(|e| !e.ok).count();
    let aggregate = AggregateReport {
        command: format!("{:?}", a.command).to_lowercase(),
        succeeded: sequences.len() - failed,
        failed,
        means: aggregate_means(&sequences),
        sequences,
    };
    for e in &aggregate.sequences {
        record.outputs.push(a.out_dir.join(&e.name));
    }
    write_file(&aggregate_path, &json_bytes(&aggregate)?, record)?;
    println!("{} succeeded, {} failed", aggregate.succeeded, aggregate.failed);
    if failed > 0 {
        Err(CliError::Failure(format!("{failed} sequence(s) failed")))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_path_appends_suffix() {
        assert_eq!(run_manifest_path(Path::new("out/r.json")), PathBuf::from("out/r.json.run.json"));
    }

    #[test]
    fn sequence_seed_depends_on_name_only() {
        let a = sequence_seed(5, Path::new("/nonexistent/x/walk"));
        assert_eq!(a, sequence_seed(5, Path::new("/elsewhere/walk")));
        assert_ne!(a, sequence_seed(5, Path::new("/elsewhere/carry")));
        assert_ne!(a, sequence_seed(6, Path::new("/elsewhere/walk")));
    }

    #[test]
    fn means_skip_failures_and_missing_keys() {
        let entry = |ok, pairs: &[(&str, f64)]| BatchEntry {
            name: String::new(),
            input: String::new(),
            ok,
            error: None,
            summary: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        };
        let means = aggregate_means(&[
            entry(true, &[("a", 1.0), ("b", 4.0)]),
            entry(true, &[("a", 3.0)]),
            entry(false, &[("a", 100.0)]),
        ]);
        assert_eq!(means["a"], 2.0);
        assert_eq!(means["b"], 4.0);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["hoi", "correct", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["hoi", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["hoi", "--help"]), EXIT_OK);
    }
}
