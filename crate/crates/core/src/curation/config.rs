//! Pipeline configuration.
//!
//! The file format is one `key = value` pair per line; `#` starts a comment
//! and blank lines are skipped. The first pair must be `version = 1`.
//! [`PipelineConfig::to_text`] writes every key with its current value, so a
//! default file documents all settings.

use std::path::{Path, PathBuf};

use crate::convnet::TrainSchedule;
use crate::error::{Error, Result};
use crate::io;
use crate::pseudo_label::SegmentParams;
use crate::synth::{SplitCounts, SynthSpec};

use super::finetune::PseudoLabelParams;

const CONFIG_VERSION: u32 = 1;

/// Whether fine-tuning trains on the new set alone or on the new set plus
/// the initial pseudo ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    Replace,
    Augment,
}

impl FinetuneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneMode::Replace => "replace",
            FinetuneMode::Augment => "augment",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Existing dataset; when absent a synthetic one is generated from
    /// `synth`.
    pub manifest: Option<PathBuf>,
    pub synth: SynthSpec,
    pub classifier: TrainSchedule,
    pub segmenter: TrainSchedule,
    pub finetune: TrainSchedule,
    pub pseudo: PseudoLabelParams,
    /// Fine-tuning gate threshold.
    pub mu: f64,
    pub finetune_enabled: bool,
    pub finetune_mode: FinetuneMode,
    pub finetune_rounds: usize,
    /// Hard threshold for the attention ablation masks.
    pub ablation_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            manifest: None,
            synth: SynthSpec::default(),
            classifier: TrainSchedule {
                learning_rate: 0.01,
                momentum: 0.9,
                batch_size: 16,
                iterations: 5000,
                seed: 0,
            },
            segmenter: TrainSchedule {
                learning_rate: 0.02,
                momentum: 0.9,
                batch_size: 8,
                iterations: 4000,
                seed: 0,
            },
            finetune: TrainSchedule {
                learning_rate: 0.01,
                momentum: 0.9,
                batch_size: 8,
                iterations: 600,
                seed: 0,
            },
            pseudo: PseudoLabelParams::default(),
            mu: 0.4,
            finetune_enabled: true,
            finetune_mode: FinetuneMode::Replace,
            finetune_rounds: 1,
            ablation_threshold: 0.5,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value '{value}' for '{key}'")))
}

fn set_schedule(s: &mut TrainSchedule, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "learning_rate" => s.learning_rate = parse_value(key, value)?,
        "momentum" => s.momentum = parse_value(key, value)?,
        "batch_size" => s.batch_size = parse_value(key, value)?,
        "iterations" => s.iterations = parse_value(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn schedule_lines(out: &mut String, prefix: &str, s: &TrainSchedule) {
    out.push_str(&format!("{prefix}.learning_rate = {}\n", s.learning_rate));
    out.push_str(&format!("{prefix}.momentum = {}\n", s.momentum));
    out.push_str(&format!("{prefix}.batch_size = {}\n", s.batch_size));
    out.push_str(&format!("{prefix}.iterations = {}\n", s.iterations));
}

impl PipelineConfig {
    /// Sets one key. Used by the file parser and by command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let synth = &mut self.synth;
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "manifest" => self.manifest = (!value.is_empty() && value != "-").then(|| PathBuf::from(value)),
            "synth.classes" => {
                synth.class_count = parse_value(key, value)?;
                synth.styles = SynthSpec::default_styles(synth.class_count);
            }
            "synth.height" => synth.height = parse_value(key, value)?,
            "synth.width" => synth.width = parse_value(key, value)?,
            "synth.attention_train" => synth.counts.attention_train = parse_value(key, value)?,
            "synth.finetune_pool" => synth.counts.finetune_pool = parse_value(key, value)?,
            "synth.eval" => synth.counts.eval = parse_value(key, value)?,
            "synth.noise_rate" => synth.noise_rate = parse_value(key, value)?,
            "synth.distractor_rate" => synth.distractor_rate = parse_value(key, value)?,
            "attention.lambda_forward" => self.pseudo.lambda_forward = parse_value(key, value)?,
            "attention.lambda_backward" => self.pseudo.lambda_backward = parse_value(key, value)?,
            "trimap.upper" => self.pseudo.upper = parse_value(key, value)?,
            "trimap.lower" => self.pseudo.lower = parse_value(key, value)?,
            "segments.count" => self.pseudo.segments.target_count = parse_value(key, value)?,
            "segments.compactness" => self.pseudo.segments.compactness = parse_value(key, value)?,
            "segments.iterations" => self.pseudo.segments.iterations = parse_value(key, value)?,
            "gate.mu" => self.mu = parse_value(key, value)?,
            "finetune.enabled" => self.finetune_enabled = parse_value(key, value)?,
            "finetune.mode" => {
                self.finetune_mode = match value {
                    "replace" => FinetuneMode::Replace,
                    "augment" => FinetuneMode::Augment,
                    _ => return Err(Error::config(format!("finetune.mode must be replace or augment, got '{value}'"))),
                }
            }
            "finetune.rounds" => self.finetune_rounds = parse_value(key, value)?,
            "ablation.threshold" => self.ablation_threshold = parse_value(key, value)?,
            _ => {
                let handled = match key.split_once('.') {
                    Some(("classifier", f)) => set_schedule(&mut self.classifier, f, key, value)?,
                    Some(("segmenter", f)) => set_schedule(&mut self.segmenter, f, key, value)?,
                    Some(("finetune", f)) => set_schedule(&mut self.finetune, f, key, value)?,
                    _ => false,
                };
                if !handled {
                    return Err(Error::config(format!("unknown key '{key}'")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pseudo.upper > self.pseudo.lower) {
            return Err(Error::config(format!(
                "trimap.upper ({}) must exceed trimap.lower ({})",
                self.pseudo.upper, self.pseudo.lower
            )));
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::config(format!("gate.mu ({}) must lie in (0, 1)", self.mu)));
        }
        if self.pseudo.segments.target_count == 0 {
            return Err(Error::config("segments.count must be positive"));
        }
        if self.manifest.is_none() {
            self.synth.validate()?;
        }
        Ok(())
    }

    /// Parses a config file body; relative `manifest` paths resolve against
    /// `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut offset = 0;
        let mut saw_version = false;
        for line in text.split_inclusive('\n') {
            let content = line.split('#').next().unwrap_or("").trim();
            if !content.is_empty() {
                let (key, value) = content
                    .split_once('=')
                    .ok_or_else(|| Error::parse("config", offset, "expected 'key = value'"))?;
                let (key, value) = (key.trim(), value.trim());
                if !saw_version {
                    if key != "version" {
                        return Err(Error::parse("config", offset, "first setting must be 'version'"));
                    }
                    if value != CONFIG_VERSION.to_string() {
                        return Err(Error::parse("config", offset, format!("unsupported config version {value}")));
                    }
                    saw_version = true;
                } else {
                    cfg.set(key, value).map_err(|e| Error::parse("config", offset, e.to_string()))?;
                }
            }
            offset += line.len();
        }
        if !saw_version {
            return Err(Error::parse("config", offset, "missing 'version' line"));
        }
        if let Some(m) = &cfg.manifest {
            if m.is_relative() {
                cfg.manifest = Some(base.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&io::read_text(path)?, &base)
    }

    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let mut out = format!("version = {CONFIG_VERSION}\nseed = {}\n", self.seed);
        out.push_str(&format!(
            "manifest = {}\n",
            self.manifest.as_ref().map_or("-".into(), |m| m.display().to_string())
        ));
        out.push_str(&format!("synth.classes = {}\n", s.class_count));
        out.push_str(&format!("synth.height = {}\n", s.height));
        out.push_str(&format!("synth.width = {}\n", s.width));
        out.push_str(&format!("synth.attention_train = {}\n", s.counts.attention_train));
        out.push_str(&format!("synth.finetune_pool = {}\n", s.counts.finetune_pool));
        out.push_str(&format!("synth.eval = {}\n", s.counts.eval));
        out.push_str(&format!("synth.noise_rate = {}\n", s.noise_rate));
        out.push_str(&format!("synth.distractor_rate = {}\n", s.distractor_rate));
        schedule_lines(&mut out, "classifier", &self.classifier);
        schedule_lines(&mut out, "segmenter", &self.segmenter);
        schedule_lines(&mut out, "finetune", &self.finetune);
        out.push_str(&format!("attention.lambda_forward = {}\n", self.pseudo.lambda_forward));
        out.push_str(&format!("attention.lambda_backward = {}\n", self.pseudo.lambda_backward));
        out.push_str(&format!("trimap.upper = {}\n", self.pseudo.upper));
        out.push_str(&format!("trimap.lower = {}\n", self.pseudo.lower));
        let seg: &SegmentParams = &self.pseudo.segments;
        out.push_str(&format!("segments.count = {}\n", seg.target_count));
        out.push_str(&format!("segments.compactness = {}\n", seg.compactness));
        out.push_str(&format!("segments.iterations = {}\n", seg.iterations));
        out.push_str(&format!("gate.mu = {}\n", self.mu));
        out.push_str(&format!("finetune.enabled = {}\n", self.finetune_enabled));
        out.push_str(&format!("finetune.mode = {}\n", self.finetune_mode.as_str()));
        out.push_str(&format!("finetune.rounds = {}\n", self.finetune_rounds));
        out.push_str(&format!("ablation.threshold = {}\n", self.ablation_threshold));
        out
    }

    /// A desk-sized configuration for tests and smoke runs.
    pub fn small(attention_train: usize, finetune_pool: usize, eval: usize) -> Self {
        let mut cfg = Self::default();
        cfg.synth.counts = SplitCounts {
            attention_train,
            finetune_pool,
            eval,
        };
        cfg
    }
}
