//! `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys are dotted (`train.learning_rate`); unknown keys are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::diffusion::{SampleConfig, SigmaPolicy};
use crate::error::{Error, Result};
use crate::model::DenoiserSpec;
use crate::phantom::PhantomSpec;
use crate::schedule::NoiseSchedule;
use crate::trainer::{ConditionMode, TrainConfig};
use crate::volume::Dims3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k.split('.').all(|part| {
            !part.is_empty()
                && part
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        })
}

/// Splits text into entries; duplicate keys are rejected.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {line_no}: expected `key = value`, got {line:?}"
            ))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !valid_key(k) {
            return Err(Error::Config(format!("line {line_no}: invalid key {k:?}")));
        }
        if v.is_empty() {
            return Err(Error::Config(format!("line {line_no}: `{k}` has no value")));
        }
        if let Some(prev) = out.iter().find(|e| e.key == k) {
            return Err(Error::Config(format!(
                "line {line_no}: `{k}` already set on line {}",
                prev.line
            )));
        }
        out.push(Entry {
            key: k.to_string(),
            value: v.to_string(),
            line: line_no,
        });
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected true/false, got {value:?}"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_dims(key: &str, value: &str) -> Result<Dims3> {
    match parse_list(key, value)?[..] {
        [n] => Ok(Dims3::cube(n)),
        [x, y, z] => Ok(Dims3::new(x, y, z)),
        _ => Err(Error::Config(format!(
            "`{key}`: expected n or nx,ny,nz, got {value:?}"
        ))),
    }
}

fn sigma_name(s: SigmaPolicy) -> &'static str {
    match s {
        SigmaPolicy::Posterior => "posterior",
        SigmaPolicy::Beta => "beta",
        SigmaPolicy::Zero => "zero",
    }
}

fn condition_name(c: ConditionMode) -> &'static str {
    match c {
        ConditionMode::Mri => "mri",
        ConditionMode::MriGradient => "mri+gradient",
    }
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Every knob of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub condition: ConditionMode,
    /// pairs held out from the data directory for evaluation
    pub heldout: usize,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub model: DenoiserSpec,
    pub model_seed: u64,
    pub sample: SampleConfig,
    pub phantom: PhantomSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = NoiseSchedule::desk();
        let (b0, b1) = s.beta_range();
        RunConfig {
            train: TrainConfig::default(),
            condition: ConditionMode::Mri,
            heldout: 0,
            schedule_steps: s.steps(),
            beta_start: b0,
            beta_end: b1,
            model: DenoiserSpec::desk(),
            model_seed: 0,
            sample: SampleConfig::default(),
            phantom: PhantomSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for e in parse_entries(text)? {
            self.set(&e.key, &e.value)
                .map_err(|err| Error::Config(format!("line {}: {}", e.line, strip_config(err))))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides, e.g. from the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.learning_rate" => t.adam.lr = parse(key, v)?,
            "train.beta1" => t.adam.beta1 = parse(key, v)?,
            "train.beta2" => t.adam.beta2 = parse(key, v)?,
            "train.adam_eps" => t.adam.eps = parse(key, v)?,
            "train.loss_mode" => t.loss_mode = v.parse()?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.log_every" => t.log_every = parse(key, v)?,
            "train.max_steps" => {
                let n: usize = parse(key, v)?;
                t.max_steps = (n > 0).then_some(n);
            }
            "train.eval_seed" => t.eval_seed = parse(key, v)?,
            "train.eval_draws" => t.eval_draws = parse(key, v)?,
            "train.heldout" => self.heldout = parse(key, v)?,
            "train.condition" => {
                self.condition = match v {
                    "mri" => ConditionMode::Mri,
                    "mri+gradient" | "gradient" => ConditionMode::MriGradient,
                    _ => {
                        return Err(Error::Config(format!(
                            "`{key}`: expected mri or mri+gradient, got {v:?}"
                        )))
                    }
                };
                self.model.cond_channels = self.condition.channels();
            }
            "schedule.steps" => self.schedule_steps = parse(key, v)?,
            "schedule.beta_start" => self.beta_start = parse(key, v)?,
            "schedule.beta_end" => self.beta_end = parse(key, v)?,
            "model.channels" => self.model.channels = parse_list(key, v)?,
            "model.blocks_per_level" => self.model.blocks_per_level = parse(key, v)?,
            "model.time_embed_dim" => self.model.time_embed_dim = parse(key, v)?,
            "model.attention" => self.model.attention.enabled = parse_bool(key, v)?,
            "model.heads" => self.model.attention.heads = parse(key, v)?,
            "model.head_channels" => self.model.attention.head_channels = parse(key, v)?,
            "model.seed" => self.model_seed = parse(key, v)?,
            "sample.mc_repeats" => self.sample.mc_repeats = parse(key, v)?,
            "sample.seed" => self.sample.seed = parse(key, v)?,
            "sample.clamp_x0" => self.sample.clamp_x0 = parse_bool(key, v)?,
            "sample.final_noise_zero" => self.sample.final_noise_zero = parse_bool(key, v)?,
            "sample.sigma" => {
                self.sample.sigma = match v {
                    "posterior" => SigmaPolicy::Posterior,
                    "beta" => SigmaPolicy::Beta,
                    "zero" => SigmaPolicy::Zero,
                    _ => {
                        return Err(Error::Config(format!(
                            "`{key}`: expected posterior, beta or zero, got {v:?}"
                        )))
                    }
                }
            }
            "phantom.dims" => self.phantom.dims = parse_dims(key, v)?,
            "phantom.n_ellipsoids" => self.phantom.n_ellipsoids = parse(key, v)?,
            "phantom.noise_sigma" => self.phantom.noise_sigma = parse(key, v)?,
            "phantom.seed" => self.phantom.seed = parse(key, v)?,
            "phantom.masks" => self.phantom.masks = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule_steps, self.beta_start, self.beta_end)
            .map_err(|e| Error::Config(format!("schedule: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.schedule()?;
        if self.sample.mc_repeats == 0 {
            return Err(Error::Config("sample.mc_repeats must be at least 1".into()));
        }
        self.phantom
            .validate()
            .map_err(|e| Error::Config(format!("phantom: {e}")))?;
        Ok(())
    }

    /// Fully resolved configuration in the same text format, every key
    /// listed. Parsing it back yields an equal config.
    pub fn resolved(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let p = &self.phantom;
        let s = &self.sample;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.learning_rate", t.adam.lr.to_string());
        kv("train.beta1", t.adam.beta1.to_string());
        kv("train.beta2", t.adam.beta2.to_string());
        kv("train.adam_eps", t.adam.eps.to_string());
        kv("train.loss_mode", t.loss_mode.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.log_every", t.log_every.to_string());
        kv("train.max_steps", t.max_steps.unwrap_or(0).to_string());
        kv("train.eval_seed", t.eval_seed.to_string());
        kv("train.eval_draws", t.eval_draws.to_string());
        kv("train.heldout", self.heldout.to_string());
        kv(
            "train.condition",
            condition_name(self.condition).to_string(),
        );
        kv("schedule.steps", self.schedule_steps.to_string());
        kv("schedule.beta_start", self.beta_start.to_string());
        kv("schedule.beta_end", self.beta_end.to_string());
        kv("model.channels", join(&m.channels));
        kv("model.blocks_per_level", m.blocks_per_level.to_string());
        kv("model.time_embed_dim", m.time_embed_dim.to_string());
        kv("model.attention", m.attention.enabled.to_string());
        kv("model.heads", m.attention.heads.to_string());
        kv("model.head_channels", m.attention.head_channels.to_string());
        kv("model.seed", self.model_seed.to_string());
        kv("sample.mc_repeats", s.mc_repeats.to_string());
        kv("sample.seed", s.seed.to_string());
        kv("sample.clamp_x0", s.clamp_x0.to_string());
        kv("sample.final_noise_zero", s.final_noise_zero.to_string());
        kv("sample.sigma", sigma_name(s.sigma).to_string());
        kv("phantom.dims", join(&[p.dims.nx, p.dims.ny, p.dims.nz]));
        kv("phantom.n_ellipsoids", p.n_ellipsoids.to_string());
        kv("phantom.noise_sigma", p.noise_sigma.to_string());
        kv("phantom.seed", p.seed.to_string());
        kv("phantom.masks", p.masks.to_string());
        out
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}
