//! Flat `key = value` run configuration.
//!
//! Precedence is built-in default, then the config file, then command-line
//! overrides. Unknown and duplicate keys are errors. [`RunConfig::entries`]
//! lists every key with its effective value; feeding that listing back
//! through [`RunConfig::apply_text`] reproduces the configuration exactly.

use std::path::Path;

use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::body::ChannelGroup;
use crate::losses::{Stage, Term, TermWeights};
use crate::metrics::EvaluateConfig;
use crate::optimize::{CorrectionConfig, GradientMode, Method, OptimizerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key {key}")]
    Duplicate { line: usize, key: String },
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("{key}: cannot parse {value:?}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Every tunable of the command-line front end.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub correction: CorrectionConfig,
    pub augment: AugmentConfig,
    pub evaluate: EvaluateConfig,
}

/// Splits config text into `(line, key, value)` triples. `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.into() })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.into() });
        }
        if out.iter().any(|(_, k, _)| k == key) {
            return Err(ConfigError::Duplicate { line: i + 1, key: key.into() });
        }
        out.push((i + 1, key.into(), value.into()));
    }
    Ok(out)
}

fn bad(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::Value { key: key.into(), value: value.into(), reason: reason.to_string() }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn list<T>(key: &str, value: &str, item: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, ConfigError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| item(s.trim()).ok_or_else(|| bad(key, value, format!("unknown item {s:?}")))).collect()
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Hand => "hand",
        Stage::FullBody => "full_body",
        Stage::Augment => "augment",
    }
}

fn parse_stage(s: &str) -> Option<Stage> {
    [Stage::Hand, Stage::FullBody, Stage::Augment].into_iter().find(|&st| stage_name(st) == s)
}

fn group_name(g: ChannelGroup) -> &'static str {
    match g {
        ChannelGroup::Body => "body",
        ChannelGroup::LeftHand => "left_hand",
        ChannelGroup::RightHand => "right_hand",
    }
}

fn parse_group(s: &str) -> Option<ChannelGroup> {
    [ChannelGroup::Body, ChannelGroup::LeftHand, ChannelGroup::RightHand].into_iter().find(|&g| group_name(g) == s)
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

fn optimizer_entries(prefix: &str, o: &OptimizerConfig, out: &mut Vec<(String, String)>) {
    let method = match o.method {
        Method::Adam => "adam",
        Method::GradientDescent => "gradient_descent",
    };
    let gradient = match o.gradient {
        GradientMode::Analytic => "analytic",
        GradientMode::FiniteDifference => "finite_difference",
    };
    for (k, v) in [
        ("method", method.to_string()),
        ("gradient", gradient.to_string()),
        ("step_size", o.step_size.to_string()),
        ("fd_step", o.fd_step.to_string()),
        ("final_step_fraction", o.final_step_fraction.to_string()),
        ("beta1", o.beta1.to_string()),
        ("beta2", o.beta2.to_string()),
        ("epsilon", o.epsilon.to_string()),
    ] {
        out.push((format!("{prefix}.optimizer.{k}"), v));
    }
}

fn set_optimizer(o: &mut OptimizerConfig, field: &str, key: &str, value: &str) -> Result<bool, ConfigError> {
    match field {
        "method" => {
            o.method = match value {
                "adam" => Method::Adam,
                "gradient_descent" => Method::GradientDescent,
                _ => return Err(bad(key, value, "expected adam or gradient_descent")),
            }
        }
        "gradient" => {
            o.gradient = match value {
                "analytic" => GradientMode::Analytic,
                "finite_difference" => GradientMode::FiniteDifference,
                _ => return Err(bad(key, value, "expected analytic or finite_difference")),
            }
        }
        "step_size" => o.step_size = num(key, value)?,
        "fd_step" => o.fd_step = num(key, value)?,
        "final_step_fraction" => o.final_step_fraction = num(key, value)?,
        "beta1" => o.beta1 = num(key, value)?,
        "beta2" => o.beta2 = num(key, value)?,
        "epsilon" => o.epsilon = num(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn loss_entries(prefix: &str, l: &crate::losses::LossConfig, out: &mut Vec<(String, String)>) {
    for (k, v) in [
        ("contact_threshold", l.contact_threshold.to_string()),
        ("no_contact_threshold", l.no_contact_threshold.to_string()),
        ("align_epsilon", l.align_epsilon.to_string()),
        ("align_pair_cutoff", l.align_pair_cutoff.to_string()),
        ("align_max_samples", l.align_max_samples.to_string()),
        ("beta", l.beta.to_string()),
    ] {
        out.push((format!("{prefix}.loss.{k}"), v));
    }
    for (stage, weights) in [(Stage::Hand, &l.hand), (Stage::FullBody, &l.full_body), (Stage::Augment, &l.augment)] {
        for t in Term::ALL {
            out.push((format!("{prefix}.weight.{}.{}", stage_name(stage), t.name()), weights.get(t).to_string()));
        }
    }
}

fn set_loss(l: &mut crate::losses::LossConfig, rest: &str, key: &str, value: &str) -> Result<bool, ConfigError> {
    if let Some(field) = rest.strip_prefix("loss.") {
        match field {
            "contact_threshold" => l.contact_threshold = num(key, value)?,
            "no_contact_threshold" => l.no_contact_threshold = num(key, value)?,
            "align_epsilon" => l.align_epsilon = num(key, value)?,
            "align_pair_cutoff" => l.align_pair_cutoff = num(key, value)?,
            "align_max_samples" => l.align_max_samples = num(key, value)?,
            "beta" => l.beta = num(key, value)?,
            _ => return Ok(false),
        }
        return Ok(true);
    }
    if let Some(field) = rest.strip_prefix("weight.") {
        let Some((stage, term)) = field.split_once('.') else { return Ok(false) };
        let Some(stage) = parse_stage(stage) else { return Ok(false) };
        let Some(term) = Term::ALL.into_iter().find(|t| t.name() == term) else { return Ok(false) };
        let weights: &mut TermWeights = match stage {
            Stage::Hand => &mut l.hand,
            Stage::FullBody => &mut l.full_body,
            Stage::Augment => &mut l.augment,
        };
        weights.set(term, num(key, value)?);
        return Ok(true);
    }
    Ok(false)
}

impl RunConfig {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let c = &self.correction;
        let mut out: Vec<(String, String)> = vec![
            ("correct.stages".into(), join(&c.stages, |s| stage_name(*s).into())),
            ("correct.full_body_iterations".into(), c.full_body_iterations.to_string()),
            ("correct.hand_iterations".into(), c.hand_iterations.to_string()),
            ("correct.freeze_object".into(), c.freeze_object.to_string()),
            ("correct.full_body_channels".into(), join(&c.full_body_channels, |g| group_name(*g).into())),
            ("correct.hand_channels".into(), join(&c.hand_channels, |g| group_name(*g).into())),
            ("correct.contact_ratio_threshold".into(), c.contact_ratio_threshold.to_string()),
            ("correct.sample_seed".into(), c.sample_seed.to_string()),
        ];
        optimizer_entries("correct", &c.optimizer, &mut out);
        loss_entries("correct", &c.loss, &mut out);

        let a = &self.augment;
        for (k, v) in [
            ("horizontal_radius", a.horizontal_radius.to_string()),
            ("vertical_range", a.vertical_range.to_string()),
            ("seed", a.seed.to_string()),
            ("iterations", a.iterations.to_string()),
            ("max_penetration", a.max_penetration.to_string()),
            ("min_self_distance", a.min_self_distance.to_string()),
            ("max_final_loss", a.max_final_loss.to_string()),
            ("max_contact_drift", a.max_contact_drift.to_string()),
            ("max_marker_acceleration", a.max_marker_acceleration.to_string()),
            ("contact_ratio_threshold", a.contact_ratio_threshold.to_string()),
            ("sample_seed", a.sample_seed.to_string()),
        ] {
            out.push((format!("augment.{k}"), v));
        }
        optimizer_entries("augment", &a.optimizer, &mut out);
        loss_entries("augment", &a.loss, &mut out);

        let e = &self.evaluate;
        for (k, v) in [
            ("contact_threshold", e.contact_threshold.to_string()),
            ("foot_height_threshold", e.foot_height_threshold.to_string()),
            ("foot_markers", join(&e.foot_markers, |m| m.to_string())),
            ("root_marker", e.root_marker.to_string()),
        ] {
            out.push((format!("evaluate.{k}"), v));
        }
        out
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let known = if let Some(rest) = key.strip_prefix("correct.") {
            self.set_correction(rest, key, value)?
        } else if let Some(rest) = key.strip_prefix("augment.") {
            self.set_augment(rest, key, value)?
        } else if let Some(rest) = key.strip_prefix("evaluate.") {
            self.set_evaluate(rest, key, value)?
        } else {
            false
        };
        if known {
            Ok(())
        } else {
            Err(ConfigError::UnknownKey(key.into()))
        }
    }

    fn set_correction(&mut self, rest: &str, key: &str, value: &str) -> Result<bool, ConfigError> {
        let c = &mut self.correction;
        match rest {
            "stages" => c.stages = list(key, value, parse_stage)?,
            "full_body_iterations" => c.full_body_iterations = num(key, value)?,
            "hand_iterations" => c.hand_iterations = num(key, value)?,
            "freeze_object" => c.freeze_object = num(key, value)?,
            "full_body_channels" => c.full_body_channels = list(key, value, parse_group)?,
            "hand_channels" => c.hand_channels = list(key, value, parse_group)?,
            "contact_ratio_threshold" => c.contact_ratio_threshold = num(key, value)?,
            "sample_seed" => c.sample_seed = num(key, value)?,
            _ => {
                if let Some(field) = rest.strip_prefix("optimizer.") {
                    return set_optimizer(&mut c.optimizer, field, key, value);
                }
                return set_loss(&mut c.loss, rest, key, value);
            }
        }
        Ok(true)
    }

    fn set_augment(&mut self, rest: &str, key: &str, value: &str) -> Result<bool, ConfigError> {
        let a = &mut self.augment;
        match rest {
            "horizontal_radius" => a.horizontal_radius = num(key, value)?,
            "vertical_range" => a.vertical_range = num(key, value)?,
            "seed" => a.seed = num(key, value)?,
            "iterations" => a.iterations = num(key, value)?,
            "max_penetration" => a.max_penetration = num(key, value)?,
            "min_self_distance" => a.min_self_distance = num(key, value)?,
            "max_final_loss" => a.max_final_loss = num(key, value)?,
            "max_contact_drift" => a.max_contact_drift = num(key, value)?,
            "max_marker_acceleration" => a.max_marker_acceleration = num(key, value)?,
            "contact_ratio_threshold" => a.contact_ratio_threshold = num(key, value)?,
            "sample_seed" => a.sample_seed = num(key, value)?,
            _ => {
                if let Some(field) = rest.strip_prefix("optimizer.") {
                    return set_optimizer(&mut a.optimizer, field, key, value);
                }
                return set_loss(&mut a.loss, rest, key, value);
            }
        }
        Ok(true)
    }

    fn set_evaluate(&mut self, rest: &str, key: &str, value: &str) -> Result<bool, ConfigError> {
        let e = &mut self.evaluate;
        match rest {
            "contact_threshold" => e.contact_threshold = num(key, value)?,
            "foot_height_threshold" => e.foot_height_threshold = num(key, value)?,
            "foot_markers" => e.foot_markers = list(key, value, |s| s.parse().ok())?,
            "root_marker" => e.root_marker = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Applies config text on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (_, key, value) in parse_pairs(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        self.apply_text(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| ConfigError::Syntax { line: 0, text: item.clone() })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The effective configuration as config-file text.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
