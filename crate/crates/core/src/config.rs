//! Run configuration: one TOML file, every field explicit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoding::DecodeOptions;
use crate::error::{Error, Result};
use crate::latent::{AnnealSchedule, LatentConfig};
use crate::model::{ModelConfig, Seq2Seq, TargetEncoderInput};
use crate::optim::AdamConfig;
use crate::synth::SynthSpec;

/// Environment variable that replaces `out_dir` when set.
pub const OUT_DIR_ENV: &str = "DOMAINGEN_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TargetEncoder,
    Moe,
    Vanilla,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::TargetEncoder => "target_encoder",
            Method::Moe => "moe",
            Method::Vanilla => "vanilla",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_peak: f64,
    pub warmup: u64,
    #[serde(flatten)]
    pub adam: AdamConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_peak: 3e-4,
            warmup: 4000,
            adam: AdamConfig::default(),
        }
    }
}

/// Either a generated corpus or three corpus files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

/// Fixed-shape synthetic batches for throughput measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup_steps: u64,
    pub timed_steps: u64,
    pub batch_size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 2,
            timed_steps: 8,
            batch_size: 32,
            src_len: 10,
            tgt_len: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_encoder_input: Option<TargetEncoderInput>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub steps: u64,
    pub batch_size: usize,
    /// Write a step record every `log_every` steps (and at the last step).
    pub log_every: u64,
    /// Validation loss every `valid_every` steps; `0` disables it.
    pub valid_every: u64,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<AnnealSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularizer: Option<LatentConfig>,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub decoding: DecodeOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchConfig>,
}

impl RunConfig {
    /// The desk-scale experiment for a given method.
    pub fn desk(method: Method, n_domains: usize, seed: u64) -> Self {
        let synth = SynthSpec::desk(seed);
        let vocab = synth.vocabulary().size();
        let steps = 8000;
        let te = method == Method::TargetEncoder;
        Self {
            method,
            target_encoder_input: te.then_some(TargetEncoderInput::Target),
            seed,
            out_dir: PathBuf::from("runs").join(method.name()),
            steps,
            batch_size: 32,
            log_every: 100,
            valid_every: 1000,
            model: ModelConfig::desk(vocab, if method == Method::Vanilla { 1 } else { n_domains }, seed),
            schedule: te.then(|| AnnealSchedule::new(steps)),
            regularizer: te.then(LatentConfig::default),
            optimizer: OptimizerConfig {
                lr_peak: 1e-3,
                warmup: 500,
                adam: AdamConfig::default(),
            },
            data: DataConfig {
                synth: Some(synth),
                train: None,
                valid: None,
                test: None,
            },
            decoding: DecodeOptions::default(),
            bench: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// `out_dir`, unless the override variable is set.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.log_every == 0 {
            return fail("log_every must be at least 1".into());
        }
        if !(self.optimizer.lr_peak > 0.0 && self.optimizer.lr_peak.is_finite()) {
            return fail(format!("lr_peak {} must be positive", self.optimizer.lr_peak));
        }
        if self.optimizer.warmup == 0 {
            return fail("warmup must be at least 1".into());
        }
        if self.decoding.beam_size == 0 {
            return fail("decoding.beam_size must be at least 1".into());
        }
        let te = self.method == Method::TargetEncoder;
        match (te, &self.schedule, &self.regularizer, self.target_encoder_input) {
            (true, Some(s), Some(r), Some(_)) => {
                s.validate()?;
                r.validate()?;
            }
            (true, ..) => {
                return fail("method target_encoder needs schedule, regularizer and target_encoder_input".into())
            }
            (false, None, None, None) => {}
            (false, ..) => {
                return fail(format!(
                    "schedule, regularizer and target_encoder_input only apply to target_encoder, not {}",
                    self.method.name()
                ))
            }
        }
        if self.method == Method::Vanilla && self.model.n_domains != 1 {
            return fail("method vanilla needs model.n_domains = 1".into());
        }
        match (&self.data.synth, &self.data.train) {
            (Some(s), None) => {
                if self.data.valid.is_some() || self.data.test.is_some() {
                    return fail("data.synth excludes corpus paths".into());
                }
                s.validate()?;
                let v = s.vocabulary().size();
                if self.model.src_vocab_size != v || self.model.tgt_vocab_size != v {
                    return fail(format!(
                        "model vocab sizes ({}, {}) differ from the synthetic vocabulary size {v}",
                        self.model.src_vocab_size, self.model.tgt_vocab_size
                    ));
                }
                if s.max_len + 2 > self.model.max_len {
                    return fail(format!(
                        "model.max_len {} is too short for targets of {} tokens plus marker and end",
                        self.model.max_len, s.max_len
                    ));
                }
            }
            (None, Some(_)) => {}
            _ => return fail("data needs exactly one of synth or train".into()),
        }
        Ok(())
    }

    /// Fresh model for this configuration.
    pub fn build_model(&self) -> Result<Seq2Seq> {
        match self.method {
            Method::TargetEncoder => Seq2Seq::with_target_encoder(
                &self.model,
                self.target_encoder_input.unwrap_or(TargetEncoderInput::Target),
            ),
            Method::Moe => Seq2Seq::with_domains(&self.model),
            Method::Vanilla => Seq2Seq::vanilla(&self.model),
        }
    }
}
