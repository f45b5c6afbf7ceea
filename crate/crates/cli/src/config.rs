//! Flat `key = value` run configuration.
//!
//! A file starts from a compiled-in preset (`preset = name`, default
//! `remind2reg`) and overrides individual keys. [`dump`] writes every key, so
//! `parse(dump(cfg)) == cfg`.
//!
//! ```text
//! preset = clem
//! level.3.search_radius = 5   # levels are numbered from 1, finest first
//! instopt.iterations = 30
//! refine = off
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use mcbo_core::cvxopt::ConvexSchedule;
use mcbo_core::fusion::FusionStrategy;
use mcbo_core::instopt::InstOptConfig;
use mcbo_core::pyramid::{default_refine, LevelConfig, PipelineConfig};

use crate::error::CliError;

pub const DEFAULT_PRESET: &str = "remind2reg";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub fusion: FusionStrategy,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let pipeline =
            PipelineConfig::preset(name).map_err(|e| CliError::from_core(e, "preset"))?;
        Ok(Self {
            pipeline,
            fusion: FusionStrategy::default(),
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.pipeline
            .validate()
            .map_err(|e| CliError::from_core(e, "config"))
    }
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

fn err(line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("line {line}: {msg}"))
}

fn value<T: FromStr>(e: &Entry) -> Result<T, CliError> {
    e.value
        .parse()
        .map_err(|_| err(e.line, format!("invalid value '{}' for {}", e.value, e.key)))
}

fn flag(e: &Entry) -> Result<bool, CliError> {
    match e.value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(err(
            e.line,
            format!("invalid boolean '{}' for {}", e.value, e.key),
        )),
    }
}

fn list(e: &Entry) -> Result<Vec<f64>, CliError> {
    e.value
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| err(e.line, format!("invalid list '{}' for {}", e.value, e.key)))
        })
        .collect()
}

fn entries(text: &str) -> Result<Vec<Entry<'_>>, CliError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(err(
                line,
                format!("expected 'key = value', got '{content}'"),
            ));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(err(line, "empty key"));
        }
        if !seen.insert(key) {
            return Err(err(line, format!("duplicate key {key}")));
        }
        out.push(Entry { line, key, value });
    }
    Ok(out)
}

fn set_instopt(io: &mut InstOptConfig, field: &str, e: &Entry) -> Result<(), CliError> {
    match field {
        "iterations" => io.iterations = value(e)?,
        "smooth_kernel" => io.smooth_kernel = value(e)?,
        "learning_rate" => io.learning_rate = value(e)?,
        "reg_weight" => io.reg_weight = value(e)?,
        "adam_beta1" => io.adam_beta1 = value(e)?,
        "adam_beta2" => io.adam_beta2 = value(e)?,
        "adam_eps" => io.adam_eps = value(e)?,
        "smooth_each_step" => io.smooth_each_step = flag(e)?,
        _ => return Err(err(e.line, format!("unknown key {}", e.key))),
    }
    Ok(())
}

fn set_level(lc: &mut LevelConfig, field: &str, e: &Entry) -> Result<(), CliError> {
    match field {
        "pool_factor" => lc.pool_factor = value(e)?,
        "search_radius" => lc.search_radius = value(e)?,
        "weight" => lc.weight = value(e)?,
        "coupling_weights" => lc.convex_schedule.coupling_weights = list(e)?,
        "smooth_kernel" => lc.convex_schedule.smooth_kernel = value(e)?,
        "smooth_passes" => lc.convex_schedule.smooth_passes = value(e)?,
        _ => return Err(err(e.line, format!("unknown key {}", e.key))),
    }
    Ok(())
}

/// Parse a config file. `base` is the preset used when the file has no
/// `preset` key. The result is not validated.
pub fn parse(text: &str, base: Option<&str>) -> Result<RunConfig, CliError> {
    let entries = entries(text)?;
    let preset_entry = entries.iter().find(|e| e.key == "preset");
    let mut cfg = match (preset_entry, base) {
        (Some(e), Some(b)) if e.value != b => {
            return Err(err(
                e.line,
                format!("preset '{}' conflicts with requested preset '{b}'", e.value),
            ));
        }
        (Some(e), _) => RunConfig::preset(e.value).map_err(|x| err(e.line, x))?,
        (None, Some(b)) => RunConfig::preset(b)?,
        (None, None) => {
            let mut c = RunConfig::preset(DEFAULT_PRESET)?;
            c.pipeline.preset_name = None;
            c
        }
    };

    let p = &mut cfg.pipeline;
    if let Some(e) = entries.iter().find(|e| e.key == "levels") {
        let n: usize = value(e)?;
        if n == 0 {
            return Err(err(e.line, "levels must be at least 1"));
        }
        // new levels must be filled in by level.N.* keys
        p.levels.resize(
            n,
            LevelConfig {
                pool_factor: 0,
                search_radius: 0,
                convex_schedule: ConvexSchedule::default(),
                weight: 0.0,
            },
        );
    }
    let mut instopt = (p.instopt.is_some(), p.instopt.clone().unwrap_or_default());
    let mut refine = (
        p.refine.is_some(),
        p.refine.clone().unwrap_or_else(default_refine),
    );

    for e in &entries {
        match e.key {
            "preset" | "levels" => {}
            "inverse_consistency_iters" => p.inverse_consistency_iters = value(e)?,
            "split_level1" => p.split_level1 = flag(e)?,
            "instopt" => instopt.0 = flag(e)?,
            "refine" => refine.0 = flag(e)?,
            "mind.dilation" => p.mind.dilation = value(e)?,
            "mind.patch_radius" => p.mind.patch_radius = value(e)?,
            "mind.epsilon" => p.mind.epsilon = value(e)?,
            "fusion.strategy" => {
                cfg.fusion = FusionStrategy::parse(e.value).map_err(|x| err(e.line, x))?;
            }
            key => {
                if let Some(field) = key.strip_prefix("instopt.") {
                    set_instopt(&mut instopt.1, field, e)?;
                } else if let Some(field) = key.strip_prefix("refine.") {
                    set_instopt(&mut refine.1, field, e)?;
                } else if let Some(rest) = key.strip_prefix("level.") {
                    let (idx, field) = rest
                        .split_once('.')
                        .ok_or_else(|| err(e.line, format!("unknown key {key}")))?;
                    let idx: usize = idx
                        .parse()
                        .map_err(|_| err(e.line, format!("bad level index in {key}")))?;
                    let count = p.levels.len();
                    let lc = idx
                        .checked_sub(1)
                        .and_then(|i| p.levels.get_mut(i))
                        .ok_or_else(|| {
                            err(e.line, format!("{key}: level index outside 1..={count}"))
                        })?;
                    set_level(lc, field, e)?;
                } else {
                    return Err(err(e.line, format!("unknown key {key}")));
                }
            }
        }
    }
    p.instopt = instopt.0.then_some(instopt.1);
    p.refine = refine.0.then_some(refine.1);
    Ok(cfg)
}

fn dump_instopt(out: &mut String, prefix: &str, io: &Option<InstOptConfig>) {
    let _ = writeln!(out, "{prefix} = {}", io.is_some());
    let Some(io) = io else { return };
    let _ = writeln!(out, "{prefix}.iterations = {}", io.iterations);
    let _ = writeln!(out, "{prefix}.smooth_kernel = {}", io.smooth_kernel);
    let _ = writeln!(out, "{prefix}.learning_rate = {}", io.learning_rate);
    let _ = writeln!(out, "{prefix}.reg_weight = {}", io.reg_weight);
    let _ = writeln!(out, "{prefix}.adam_beta1 = {}", io.adam_beta1);
    let _ = writeln!(out, "{prefix}.adam_beta2 = {}", io.adam_beta2);
    let _ = writeln!(out, "{prefix}.adam_eps = {}", io.adam_eps);
    let _ = writeln!(out, "{prefix}.smooth_each_step = {}", io.smooth_each_step);
}

/// Every key of the resolved configuration.
pub fn dump(cfg: &RunConfig) -> String {
    let p = &cfg.pipeline;
    let mut out = String::new();
    if let Some(name) = &p.preset_name {
        let _ = writeln!(out, "preset = {name}");
    }
    let _ = writeln!(out, "levels = {}", p.levels.len());
    for (i, l) in p.levels.iter().enumerate() {
        let k = i + 1;
        let s = &l.convex_schedule;
        let lambdas: Vec<String> = s.coupling_weights.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(out, "level.{k}.pool_factor = {}", l.pool_factor);
        let _ = writeln!(out, "level.{k}.search_radius = {}", l.search_radius);
        let _ = writeln!(out, "level.{k}.weight = {}", l.weight);
        let _ = writeln!(out, "level.{k}.coupling_weights = {}", lambdas.join(", "));
        let _ = writeln!(out, "level.{k}.smooth_kernel = {}", s.smooth_kernel);
        let _ = writeln!(out, "level.{k}.smooth_passes = {}", s.smooth_passes);
    }
    let _ = writeln!(
        out,
        "inverse_consistency_iters = {}",
        p.inverse_consistency_iters
    );
    let _ = writeln!(out, "split_level1 = {}", p.split_level1);
    dump_instopt(&mut out, "instopt", &p.instopt);
    dump_instopt(&mut out, "refine", &p.refine);
    let _ = writeln!(out, "mind.dilation = {}", p.mind.dilation);
    let _ = writeln!(out, "mind.patch_radius = {}", p.mind.patch_radius);
    let _ = writeln!(out, "mind.epsilon = {}", p.mind.epsilon);
    let _ = writeln!(out, "fusion.strategy = {}", cfg.fusion.name());
    out
}
