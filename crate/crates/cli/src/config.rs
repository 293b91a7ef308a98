//! Run configuration: `key = value` lines grouped into `model`, `train`,
//! `sample` and `data` sections.
//!
//! Keys may be written fully qualified (`train.lr = 1e-4`) or under a
//! `[train]` header. `#` starts a comment. Unknown keys are rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use uvseq::muvnet::ModelConfig;
use uvseq::sampler::SampleConfig;
use uvseq::trainer::TrainConfig;
use uvseq::{Error, Result};

/// Dataset location and run output, relative to the work directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dir: String,
    pub run_dir: String,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: "data".into(),
            run_dir: "run".into(),
            checkpoint_every: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub data: DataConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::param(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::param(key, format!("expected a boolean, got `{value}`"))),
    }
}

impl RunConfig {
    /// Every accepted key, in echo order.
    pub const KEYS: &'static [&'static str] = &[
        "model.patch",
        "model.dim",
        "model.heads",
        "model.depth",
        "model.lora_rank",
        "model.lora_alpha",
        "model.mlp_ratio",
        "model.freq_dim",
        "model.variant",
        "train.lr",
        "train.beta1",
        "train.beta2",
        "train.adam_eps",
        "train.weight_decay",
        "train.warmup",
        "train.steps",
        "train.ema_std",
        "train.batch_size",
        "train.accumulation",
        "train.p_img2tex",
        "train.p_geo2mv",
        "train.seed",
        "train.mode",
        "train.stage",
        "train.mix",
        "train.grad_clip",
        "train.k_min",
        "train.k_max",
        "train.weighting",
        "train.shift",
        "sample.steps",
        "sample.task",
        "sample.cf_view_index",
        "sample.seed",
        "sample.shifted_grid",
        "data.dir",
        "data.run_dir",
        "data.checkpoint_every",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, s, d) = (&mut self.model, &mut self.train, &mut self.sample, &mut self.data);
        match key {
            "model.patch" => m.patch = parse(key, v)?,
            "model.dim" => m.dim = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.depth" => m.depth = parse(key, v)?,
            "model.lora_rank" => m.lora_rank = parse(key, v)?,
            "model.lora_alpha" => m.lora_alpha = parse(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "model.freq_dim" => m.freq_dim = parse(key, v)?,
            "model.variant" => m.variant = v.parse()?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.adam_eps" => t.adam_eps = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.warmup" => t.warmup = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.ema_std" => t.ema_std = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.accumulation" => t.accumulation = parse(key, v)?,
            "train.p_img2tex" => t.p_img2tex = parse(key, v)?,
            "train.p_geo2mv" => t.p_geo2mv = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.mode" => t.mode = v.parse()?,
            "train.stage" => t.stage = parse(key, v)?,
            "train.mix" => t.mix = v.parse()?,
            "train.grad_clip" => t.grad_clip = parse(key, v)?,
            "train.k_min" => t.schedule.k_min = parse(key, v)?,
            "train.k_max" => t.schedule.k_max = parse(key, v)?,
            "train.weighting" => t.schedule.weighting = v.parse()?,
            "train.shift" => t.schedule.shift = parse(key, v)?,
            "sample.steps" => s.steps = parse(key, v)?,
            "sample.task" => s.task = v.parse()?,
            "sample.cf_view_index" => s.cf_view_index = parse(key, v)?,
            "sample.seed" => s.seed = parse(key, v)?,
            "sample.shifted_grid" => s.shifted_grid = parse_bool(key, v)?,
            "data.dir" => d.dir = v.to_string(),
            "data.run_dir" => d.run_dir = v.to_string(),
            "data.checkpoint_every" => d.checkpoint_every = parse(key, v)?,
            other => return Err(Error::param(other, "unknown configuration key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t, s, d) = (&self.model, &self.train, &self.sample, &self.data);
        Some(match key {
            "model.patch" => m.patch.to_string(),
            "model.dim" => m.dim.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.depth" => m.depth.to_string(),
            "model.lora_rank" => m.lora_rank.to_string(),
            "model.lora_alpha" => m.lora_alpha.to_string(),
            "model.mlp_ratio" => m.mlp_ratio.to_string(),
            "model.freq_dim" => m.freq_dim.to_string(),
            "model.variant" => m.variant.name().to_string(),
            "train.lr" => t.lr.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.adam_eps" => t.adam_eps.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.warmup" => t.warmup.to_string(),
            "train.steps" => t.steps.to_string(),
            "train.ema_std" => t.ema_std.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.accumulation" => t.accumulation.to_string(),
            "train.p_img2tex" => t.p_img2tex.to_string(),
            "train.p_geo2mv" => t.p_geo2mv.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.mode" => t.mode.name().to_string(),
            "train.stage" => t.stage.to_string(),
            "train.mix" => t.mix.name().to_string(),
            "train.grad_clip" => t.grad_clip.to_string(),
            "train.k_min" => t.schedule.k_min.to_string(),
            "train.k_max" => t.schedule.k_max.to_string(),
            "train.weighting" => t.schedule.weighting.name().to_string(),
            "train.shift" => t.schedule.shift.to_string(),
            "sample.steps" => s.steps.to_string(),
            "sample.task" => s.task.name().to_string(),
            "sample.cf_view_index" => s.cf_view_index.to_string(),
            "sample.seed" => s.seed.to_string(),
            "sample.shifted_grid" => s.shifted_grid.to_string(),
            "data.dir" => d.dir.clone(),
            "data.run_dir" => d.run_dir.clone(),
            "data.checkpoint_every" => d.checkpoint_every.to_string(),
            _ => return None,
        })
    }

    /// Applies a config file on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::param("config", format!("line {}: expected `key = value`", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let key = if k.contains('.') || section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            self.set(&key, v)?;
        }
        Ok(())
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::param("set", format!("`{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Every key with its effective value; parses back to the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in Self::KEYS {
            let (sec, name) = key.split_once('.').expect("qualified key");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {}", self.get(key).expect("known key"));
        }
        out
    }
}
