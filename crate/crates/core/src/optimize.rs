//! Deterministic first-order minimization and the staged correction pipeline.

use serde::Serialize;
use thiserror::Error;

use crate::body::{BodyError, ChannelGroup, SkinnedModel};
use crate::geometry::{GeometryError, TriangleMesh};
use crate::losses::{
    evaluate_objective, hand_indicators, objective_gradient, LossBreakdown, LossConfig, LossError, ObjectiveState,
    Stage,
};
use crate::metrics::{self, MetricsError};
use crate::scene::{ObjectModel, ObjectState};
use crate::sequence::{markers_from_rig, InteractionSequence, PoseTrack, SequenceError};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("non-finite loss or gradient at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error("object mesh is not watertight")]
    NotWatertight,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Fixed-step gradient descent.
    GradientDescent,
    /// Gradient descent with first and second moment adaptation.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub method: Method,
    pub gradient: GradientMode,
    /// Central-difference step in finite-difference mode.
    pub fd_step: f64,
    /// Step size at the last iteration relative to the first; cosine schedule
    /// in between. `1.0` keeps the step constant.
    pub final_step_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            iterations: 300,
            step_size: 0.01,
            method: Method::Adam,
            gradient: GradientMode::Analytic,
            fd_step: 1e-6,
            final_step_fraction: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        if self.iterations < 1 {
            return Err(OptimizeError::Config("iterations must be at least 1".into()));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(OptimizeError::Config(format!("step size must be positive, got {}", self.step_size)));
        }
        if !(self.fd_step.is_finite() && self.fd_step > 0.0) {
            return Err(OptimizeError::Config("fd_step must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.final_step_fraction) {
            return Err(OptimizeError::Config("final_step_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(OptimizeError::Config("Adam moments must lie in [0, 1) and epsilon must be positive".into()));
        }
        Ok(())
    }

    fn step_at(&self, t: usize) -> f64 {
        let progress = t as f64 / self.iterations.max(1) as f64;
        let f = self.final_step_fraction;
        self.step_size * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimizeResult {
    /// Best parameters seen, not necessarily the last iterate.
    #[serde(skip)]
    pub params: Vec<f64>,
    pub best_loss: f64,
    pub best_iteration: usize,
    /// Loss at every iterate, `iterations + 1` entries.
    pub trace: Vec<f64>,
    /// Running minimum of `trace`.
    pub best_trace: Vec<f64>,
}

/// Objective callback: returns the loss and, when asked, its gradient.
pub type ObjectiveFn<'a, E> = dyn FnMut(&[f64], bool) -> Result<(f64, Vec<f64>), E> + 'a;

/// Minimizes `objective` from `initial`. The objective is evaluated
/// `iterations + 1` times in analytic mode; finite-difference mode adds two
/// value evaluations per parameter per iteration.
pub fn minimize<E>(initial: &[f64], cfg: &OptimizerConfig, objective: &mut ObjectiveFn<'_, E>) -> Result<MinimizeResult, E>
where
    E: From<OptimizeError>,
{
    cfg.validate()?;
    let n = initial.len();
    let mut x = initial.to_vec();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut best_trace = Vec::with_capacity(cfg.iterations + 1);
    let mut best = (f64::INFINITY, x.clone(), 0);
    for t in 0..=cfg.iterations {
        let last = t == cfg.iterations;
        let (loss, grad) = match cfg.gradient {
            GradientMode::Analytic => objective(&x, !last)?,
            GradientMode::FiniteDifference => {
                let (loss, _) = objective(&x, false)?;
                let mut grad = vec![0.0; if last { 0 } else { n }];
                for (i, g) in grad.iter_mut().enumerate() {
                    let orig = x[i];
                    x[i] = orig + cfg.fd_step;
                    let (plus, _) = objective(&x, false)?;
                    x[i] = orig - cfg.fd_step;
                    let (minus, _) = objective(&x, false)?;
                    x[i] = orig;
                    *g = (plus - minus) / (2.0 * cfg.fd_step);
                }
                (loss, grad)
            }
        };
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(OptimizeError::NonFinite { iteration: t }.into());
        }
        if !last && grad.len() != n {
            return Err(OptimizeError::Config(format!("gradient has {} entries for {n} parameters", grad.len())).into());
        }
        trace.push(loss);
        if loss < best.0 {
            best = (loss, x.clone(), t);
        }
        best_trace.push(best.0);
        if last {
            break;
        }
        let step = cfg.step_at(t);
        match cfg.method {
            Method::GradientDescent => {
                for (xi, g) in x.iter_mut().zip(&grad) {
                    *xi -= step * g;
                }
            }
            Method::Adam => {
                let k = (t + 1) as i32;
                let c1 = 1.0 - cfg.beta1.powi(k);
                let c2 = 1.0 - cfg.beta2.powi(k);
                for i in 0..n {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
                    x[i] -= step * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
                }
            }
        }
    }
    let (best_loss, params, best_iteration) = best;
    Ok(MinimizeResult { params, best_loss, best_iteration, trace, best_trace })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectionConfig {
    /// Stages to run, in order. Only `full_body` and `hand` are valid.
    pub stages: Vec<Stage>,
    pub full_body_iterations: usize,
    pub hand_iterations: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    /// Keep the object trajectory fixed in the full-body stage.
    pub freeze_object: bool,
    pub full_body_channels: Vec<ChannelGroup>,
    pub hand_channels: Vec<ChannelGroup>,
    /// Distance under which a human vertex counts as touching, for the report.
    pub contact_ratio_threshold: f64,
    pub sample_seed: u64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            stages: vec![Stage::FullBody, Stage::Hand],
            full_body_iterations: 300,
            hand_iterations: 300,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            freeze_object: false,
            full_body_channels: vec![ChannelGroup::Body],
            hand_channels: vec![ChannelGroup::LeftHand, ChannelGroup::RightHand],
            contact_ratio_threshold: 0.02,
            sample_seed: 0,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        if self.full_body_iterations < 1 || self.hand_iterations < 1 {
            return Err(OptimizeError::Config("stage iterations must be at least 1".into()));
        }
        if self.stages.contains(&Stage::Augment) {
            return Err(OptimizeError::Config("the augment stage is not a correction stage".into()));
        }
        Ok(())
    }
}

/// Scene-level artifact measures before or after correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArtifactMetrics {
    pub penetration_depth: f64,
    pub contact_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub parameters: usize,
    pub initial: LossBreakdown,
    pub best: LossBreakdown,
    pub result: MinimizeResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectionReport {
    pub before: ArtifactMetrics,
    pub after: ArtifactMetrics,
    pub stages: Vec<StageReport>,
}

fn artifact_metrics(
    model: &SkinnedModel,
    object: &ObjectModel,
    poses: &[Vec<f64>],
    objects: &[ObjectState],
    threshold: f64,
) -> Result<ArtifactMetrics, OptimizeError> {
    let human = metrics::skin_frames(model, poses)?;
    Ok(ArtifactMetrics {
        penetration_depth: metrics::penetration_depth(&human, object, objects)?,
        contact_ratio: metrics::contact_ratio(&human, object, objects, threshold)?,
    })
}

/// Parameter layout of one stage: selected pose channels for every frame,
/// then optionally six object values per frame.
struct Layout {
    channels: Vec<usize>,
    frames: usize,
    with_object: bool,
}

impl Layout {
    fn len(&self) -> usize {
        self.frames * (self.channels.len() + if self.with_object { 6 } else { 0 })
    }

    fn pack(&self, poses: &[Vec<f64>], objects: &[ObjectState]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        for p in poses {
            x.extend(self.channels.iter().map(|&c| p[c]));
        }
        if self.with_object {
            for o in objects {
                x.extend(o.to_array());
            }
        }
        x
    }

    fn unpack(&self, x: &[f64], poses: &mut [Vec<f64>], objects: &mut [ObjectState]) {
        let k = self.channels.len();
        for (i, p) in poses.iter_mut().enumerate() {
            for (j, &c) in self.channels.iter().enumerate() {
                p[c] = x[i * k + j];
            }
        }
        if self.with_object {
            let base = self.frames * k;
            for (i, o) in objects.iter_mut().enumerate() {
                *o = ObjectState::from_array(&x[base + 6 * i..base + 6 * i + 6]);
            }
        }
    }

    fn pack_gradient(&self, pose_grad: &[Vec<f64>], object_grad: &[[f64; 6]]) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.len());
        for p in pose_grad {
            g.extend(self.channels.iter().map(|&c| p[c]));
        }
        if self.with_object {
            for o in object_grad {
                g.extend(o);
            }
        }
        g
    }
}

/// Runs the configured correction stages and returns the corrected sequence
/// with markers re-skinned from the corrected pose.
pub fn correct_sequence(
    seq: &InteractionSequence,
    model: &SkinnedModel,
    object_mesh: &TriangleMesh,
    cfg: &CorrectionConfig,
) -> Result<(InteractionSequence, CorrectionReport), OptimizeError> {
    cfg.validate()?;
    seq.validate()?;
    let track = seq.pose.as_ref().ok_or(SequenceError::MissingPose)?;
    if track.channels != model.channel_count() {
        return Err(BodyError::ChannelCount { expected: model.channel_count(), got: track.channels }.into());
    }
    let object = ObjectModel::new(object_mesh.clone(), cfg.loss.align_max_samples, cfg.sample_seed)?;
    if !object.index().is_watertight() {
        return Err(OptimizeError::NotWatertight);
    }
    let frames = seq.frames();
    let reference: Vec<Vec<f64>> = (0..frames).map(|i| track.frame_f64(i)).collect();
    let ref_objects: Vec<ObjectState> = seq.object_pose.iter().map(ObjectState::from_pose).collect();
    // frozen for the whole run: they encode the input's contact state
    let indicators = hand_indicators(model, &object, &reference, &ref_objects, &cfg.loss)?;

    let before = artifact_metrics(model, &object, &reference, &ref_objects, cfg.contact_ratio_threshold)?;
    let mut poses = reference.clone();
    let mut objects = ref_objects.clone();
    let mut reports = Vec::new();

    for &stage in &cfg.stages {
        let (groups, iterations, with_object) = match stage {
            Stage::FullBody => (&cfg.full_body_channels, cfg.full_body_iterations, !cfg.freeze_object),
            _ => (&cfg.hand_channels, cfg.hand_iterations, false),
        };
        let layout = Layout { channels: model.channels_in(groups), frames, with_object };
        let (mut work_poses, mut work_objects) = (poses.clone(), objects.clone());
        let mut eval = |x: &[f64], want: bool| -> Result<(f64, Vec<f64>), OptimizeError> {
            layout.unpack(x, &mut work_poses, &mut work_objects);
            let state = ObjectiveState {
                model,
                object: &object,
                poses: &work_poses,
                objects: &work_objects,
                reference_poses: Some(&reference),
                reference_objects: Some(&ref_objects),
                indicators: Some(&indicators),
                alignment: None,
                regularization_mask: None,
            };
            if want {
                let (loss, _, g) = objective_gradient(stage, &state, &cfg.loss)?;
                Ok((loss, layout.pack_gradient(&g.poses, &g.objects)))
            } else {
                Ok((evaluate_objective(stage, &state, &cfg.loss)?.0, Vec::new()))
            }
        };
        let x0 = layout.pack(&poses, &objects);
        let opt = OptimizerConfig { iterations, ..cfg.optimizer.clone() };
        let result = minimize(&x0, &opt, &mut eval)?;

        let breakdown = |p: &[Vec<f64>], o: &[ObjectState]| -> Result<LossBreakdown, OptimizeError> {
            let state = ObjectiveState {
                model,
                object: &object,
                poses: p,
                objects: o,
                reference_poses: Some(&reference),
                reference_objects: Some(&ref_objects),
                indicators: Some(&indicators),
                alignment: None,
                regularization_mask: None,
            };
            Ok(evaluate_objective(stage, &state, &cfg.loss)?.1)
        };
        let initial = breakdown(&poses, &objects)?;
        layout.unpack(&result.params, &mut poses, &mut objects);
        let best = breakdown(&poses, &objects)?;
        log::info!("{stage:?} stage: loss {:.6} -> {:.6}", initial.total(), best.total());
        reports.push(StageReport { stage, parameters: layout.len(), initial, best, result });
    }

    let mut out = seq.clone();
    out.pose = Some(PoseTrack::from_frames(&poses));
    out.object_pose = objects.iter().map(ObjectState::to_pose).collect();
    let markers = markers_from_rig(&out, model, &model.marker_ids)?;
    out.set_markers(&markers);
    out.validate()?;

    let stored: Vec<Vec<f64>> = (0..frames).map(|i| out.pose.as_ref().expect("set above").frame_f64(i)).collect();
    let stored_objects: Vec<ObjectState> = out.object_pose.iter().map(ObjectState::from_pose).collect();
    let after = artifact_metrics(model, &object, &stored, &stored_objects, cfg.contact_ratio_threshold)?;
    Ok((out, CorrectionReport { before, after, stages: reports }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(x: &[f64], want: bool) -> Result<(f64, Vec<f64>), OptimizeError> {
        let d = x[0] - 3.0;
        Ok((d * d, if want { vec![2.0 * d] } else { Vec::new() }))
    }

    #[test]
    fn quadratic_converges() {
        for method in [Method::GradientDescent, Method::Adam] {
            for gradient in [GradientMode::Analytic, GradientMode::FiniteDifference] {
                let cfg = OptimizerConfig { step_size: 0.1, method, gradient, ..OptimizerConfig::default() };
                let r = minimize(&[0.0], &cfg, &mut quadratic).unwrap();
                assert!((r.params[0] - 3.0).abs() < 1e-3, "{method:?} {gradient:?}: {}", r.params[0]);
                assert_eq!(r.trace.len(), 301);
                assert!(r.best_trace.windows(2).all(|w| w[1] <= w[0]));
            }
        }
    }

    #[test]
    fn finite_difference_agrees_with_analytic() {
        let cfg = OptimizerConfig { step_size: 0.1, ..OptimizerConfig::default() };
        let a = minimize(&[0.0], &cfg, &mut quadratic).unwrap();
        let cfg = OptimizerConfig { gradient: GradientMode::FiniteDifference, ..cfg };
        let b = minimize(&[0.0], &cfg, &mut quadratic).unwrap();
        assert!((a.params[0] - b.params[0]).abs() < 1e-3);
    }

    #[test]
    fn stationary_start_is_kept() {
        let r = minimize(&[3.0], &OptimizerConfig::default(), &mut quadratic).unwrap();
        assert_eq!(r.params, vec![3.0]);
        assert_eq!(r.best_loss, 0.0);
    }

    #[test]
    fn nan_aborts_with_iteration() {
        let mut calls = 0;
        let mut f = |x: &[f64], _: bool| -> Result<(f64, Vec<f64>), OptimizeError> {
            calls += 1;
            Ok((if calls == 4 { f64::NAN } else { x[0] * x[0] }, vec![2.0 * x[0]]))
        };
        let err = minimize(&[1.0], &OptimizerConfig::default(), &mut f).unwrap_err();
        assert!(matches!(err, OptimizeError::NonFinite { iteration: 3 }));
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = OptimizerConfig { iterations: 0, ..OptimizerConfig::default() };
        assert!(minimize(&[0.0], &cfg, &mut quadratic).is_err());
        let cfg = OptimizerConfig { step_size: -1.0, ..OptimizerConfig::default() };
        assert!(minimize(&[0.0], &cfg, &mut quadratic).is_err());
    }
}
