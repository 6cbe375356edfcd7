//! Flat run configuration: TOML file, then flag overrides.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use text2freq::aligner::{AlignTarget, AlignerConfig};
use text2freq::datagen::{GenSpec, TemplateSet};
use text2freq::forecaster::ForecastConfig;
use text2freq::freqvae::VaeConfig;
use text2freq::fusion::{FusionConfig, FusionMode};
use text2freq::training::TrainConfig;

use crate::error::BenchError;

pub const DEFAULT_OUT: &str = "t2f_out";
pub const OUT_ENV: &str = "T2F_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Trend + harmonics + noise, texts rendered from the future window.
    Synthetic,
    /// White-noise past, text-determined future.
    Oracle,
}

/// Every setting of a run. Keys are flat so a config file is a plain list of
/// `key = value` lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task_kind: TaskKind,
    pub pretrain_size: usize,
    pub task_size: usize,
    pub past_len: usize,
    pub horizon: usize,
    pub trend_min: f64,
    pub trend_max: f64,
    pub n_harmonics: usize,
    pub noise_std: f64,
    pub template_set: TemplateSet,
    pub trend_break: bool,
    /// Task corpus to use instead of generating one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// T2FE embedding file; hashed bag-of-words when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    pub embed_dim: usize,
    pub vae_hidden: usize,
    pub vae_latent: usize,
    pub vae_beta: f64,
    pub align_d_model: usize,
    pub align_heads: usize,
    pub align_layers: usize,
    pub align_tokens: usize,
    pub align_lambda: f64,
    pub n_lf: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub fc_d_model: usize,
    pub fc_heads: usize,
    pub fc_layers: usize,
    pub fuse_d: usize,
    pub fuse_heads: usize,
    pub mode: FusionMode,
    pub vae_epochs: usize,
    pub align_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Early-stopping patience for Stage 2; 0 disables it.
    pub patience: usize,
    /// Gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    /// Windows dropped at split boundaries; only matters for overlapping
    /// windows cut from one long series.
    pub split_purge: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from(DEFAULT_OUT),
            task_kind: TaskKind::Synthetic,
            pretrain_size: 2000,
            task_size: 300,
            past_len: 36,
            horizon: 12,
            trend_min: -0.3,
            trend_max: 0.3,
            n_harmonics: 2,
            noise_std: 0.2,
            template_set: TemplateSet::Rich,
            trend_break: true,
            dataset: None,
            embeddings: None,
            embed_dim: 64,
            vae_hidden: 64,
            vae_latent: 16,
            vae_beta: 1e-3,
            align_d_model: 32,
            align_heads: 4,
            align_layers: 2,
            align_tokens: 4,
            align_lambda: 1.0,
            n_lf: 3,
            patch_len: 6,
            stride: 3,
            fc_d_model: 32,
            fc_heads: 4,
            fc_layers: 2,
            fuse_d: 32,
            fuse_heads: 4,
            mode: FusionMode::Text2Freq,
            vae_epochs: 100,
            align_epochs: 100,
            stage2_epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            patience: 20,
            clip_norm: 5.0,
            split_purge: 0,
        }
    }
}

fn take<T: DeserializeOwned>(key: &str, v: toml::Value) -> Result<T, String> {
    v.try_into()
        .map_err(|e: toml::de::Error| format!("{key}: {}", e.message()))
}

impl RunConfig {
    /// Names accepted in config files.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "out_dir",
        "task_kind",
        "pretrain_size",
        "task_size",
        "past_len",
        "horizon",
        "trend_min",
        "trend_max",
        "n_harmonics",
        "noise_std",
        "template_set",
        "trend_break",
        "dataset",
        "embeddings",
        "embed_dim",
        "vae_hidden",
        "vae_latent",
        "vae_beta",
        "align_d_model",
        "align_heads",
        "align_layers",
        "align_tokens",
        "align_lambda",
        "n_lf",
        "patch_len",
        "stride",
        "fc_d_model",
        "fc_heads",
        "fc_layers",
        "fuse_d",
        "fuse_heads",
        "mode",
        "vae_epochs",
        "align_epochs",
        "stage2_epochs",
        "batch_size",
        "lr",
        "patience",
        "clip_norm",
        "split_purge",
    ];

    /// Set one key from a TOML value.
    pub fn set(&mut self, key: &str, v: toml::Value) -> Result<(), String> {
        match key {
            "seed" => self.seed = take(key, v)?,
            "out_dir" => self.out_dir = take(key, v)?,
            "task_kind" => self.task_kind = take(key, v)?,
            "pretrain_size" => self.pretrain_size = take(key, v)?,
            "task_size" => self.task_size = take(key, v)?,
            "past_len" => self.past_len = take(key, v)?,
            "horizon" => self.horizon = take(key, v)?,
            "trend_min" => self.trend_min = take(key, v)?,
            "trend_max" => self.trend_max = take(key, v)?,
            "n_harmonics" => self.n_harmonics = take(key, v)?,
            "noise_std" => self.noise_std = take(key, v)?,
            "template_set" => self.template_set = take(key, v)?,
            "trend_break" => self.trend_break = take(key, v)?,
            "dataset" => self.dataset = Some(take(key, v)?),
            "embeddings" => self.embeddings = Some(take(key, v)?),
            "embed_dim" => self.embed_dim = take(key, v)?,
            "vae_hidden" => self.vae_hidden = take(key, v)?,
            "vae_latent" => self.vae_latent = take(key, v)?,
            "vae_beta" => self.vae_beta = take(key, v)?,
            "align_d_model" => self.align_d_model = take(key, v)?,
            "align_heads" => self.align_heads = take(key, v)?,
            "align_layers" => self.align_layers = take(key, v)?,
            "align_tokens" => self.align_tokens = take(key, v)?,
            "align_lambda" => self.align_lambda = take(key, v)?,
            "n_lf" => self.n_lf = take(key, v)?,
            "patch_len" => self.patch_len = take(key, v)?,
            "stride" => self.stride = take(key, v)?,
            "fc_d_model" => self.fc_d_model = take(key, v)?,
            "fc_heads" => self.fc_heads = take(key, v)?,
            "fc_layers" => self.fc_layers = take(key, v)?,
            "fuse_d" => self.fuse_d = take(key, v)?,
            "fuse_heads" => self.fuse_heads = take(key, v)?,
            "mode" => {
                let s: String = take(key, v)?;
                self.mode = s.parse().map_err(|e| format!("mode: {e}"))?;
            }
            "vae_epochs" => self.vae_epochs = take(key, v)?,
            "align_epochs" => self.align_epochs = take(key, v)?,
            "stage2_epochs" => self.stage2_epochs = take(key, v)?,
            "batch_size" => self.batch_size = take(key, v)?,
            "lr" => self.lr = take(key, v)?,
            "patience" => self.patience = take(key, v)?,
            "clip_norm" => self.clip_norm = take(key, v)?,
            "split_purge" => self.split_purge = take(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parse a config file body on top of the defaults, reporting every bad
    /// key and value at once.
    pub fn from_toml_str(s: &str) -> Result<Self, BenchError> {
        let table: toml::Table = s
            .parse()
            .map_err(|e: toml::de::Error| BenchError::Config(vec![e.to_string()]))?;
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        for (k, v) in table {
            if let Err(e) = cfg.set(&k, v) {
                errors.push(e);
            }
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(BenchError::Config(errors))
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, BenchError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Range and consistency checks; every violation is listed.
    pub fn validate(&self) -> Result<(), BenchError> {
        let mut e = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                e.push(msg);
            }
        };
        need(
            self.horizon >= 2 && self.horizon % 2 == 0,
            format!("horizon must be even and >= 2, got {}", self.horizon),
        );
        need(
            self.past_len >= 2,
            format!("past_len must be >= 2, got {}", self.past_len),
        );
        need(
            self.n_lf >= 1 && self.n_lf <= self.horizon / 2,
            format!(
                "n_lf must be in 1..={}, got {}",
                self.horizon / 2,
                self.n_lf
            ),
        );
        need(
            self.pretrain_size >= 10,
            format!("pretrain_size must be >= 10, got {}", self.pretrain_size),
        );
        need(
            self.task_size >= 10,
            format!("task_size must be >= 10, got {}", self.task_size),
        );
        need(
            self.trend_min <= self.trend_max,
            "trend_min exceeds trend_max".into(),
        );
        need(
            self.noise_std >= 0.0,
            format!("noise_std must be >= 0, got {}", self.noise_std),
        );
        need(
            self.n_harmonics <= self.horizon / 2,
            format!(
                "n_harmonics must be <= {}, got {}",
                self.horizon / 2,
                self.n_harmonics
            ),
        );
        need(self.embed_dim >= 1, "embed_dim must be >= 1".into());
        need(
            self.vae_beta >= 0.0,
            format!("vae_beta must be >= 0, got {}", self.vae_beta),
        );
        need(self.align_lambda >= 0.0, "align_lambda must be >= 0".into());
        need(self.batch_size >= 1, "batch_size must be >= 1".into());
        need(
            self.lr > 0.0 && self.lr.is_finite(),
            format!("lr must be positive, got {}", self.lr),
        );
        need(self.clip_norm >= 0.0, "clip_norm must be >= 0".into());
        need(
            self.vae_epochs >= 1 && self.align_epochs >= 1 && self.stage2_epochs >= 1,
            "epoch counts must be >= 1".into(),
        );
        let checks = [
            ("vae", self.vae().validate().err()),
            (
                "aligner",
                self.aligner(
                    AlignTarget::FreqLatent,
                    self.n_lf.clamp(1, (self.horizon / 2).max(1)),
                )
                .validate()
                .err(),
            ),
            ("forecaster", self.forecast().validate().err()),
            ("fusion", self.fusion(self.mode).validate().err()),
        ];
        for (what, err) in checks {
            if let Some(err) = err {
                e.push(format!("{what}: {err}"));
            }
        }
        if e.is_empty() {
            Ok(())
        } else {
            Err(BenchError::Config(e))
        }
    }

    pub fn gen_spec(&self, n: usize, seed: u64, prefix: &str) -> GenSpec {
        GenSpec {
            n_instances: n,
            seed,
            past_len: self.past_len,
            horizon: self.horizon,
            trend_range: (self.trend_min, self.trend_max),
            n_harmonics: self.n_harmonics,
            noise_std: self.noise_std,
            template_set: self.template_set,
            trend_break: self.trend_break,
            id_prefix: prefix.into(),
        }
    }

    pub fn vae(&self) -> VaeConfig {
        VaeConfig {
            hidden_dim: self.vae_hidden,
            latent_dim: self.vae_latent,
            beta: self.vae_beta,
            ..VaeConfig::for_series_len(self.horizon)
        }
    }

    pub fn aligner(&self, target: AlignTarget, n_lf: usize) -> AlignerConfig {
        AlignerConfig {
            d_model: self.align_d_model,
            n_heads: self.align_heads,
            n_layers: self.align_layers,
            n_tokens: self.align_tokens,
            lambda: self.align_lambda,
            ..AlignerConfig::new(target, n_lf, self.embed_dim, self.vae_latent, self.horizon)
        }
    }

    pub fn forecast(&self) -> ForecastConfig {
        ForecastConfig {
            past_len: self.past_len,
            horizon: self.horizon,
            channels: 1,
            patch_len: self.patch_len,
            stride: self.stride,
            d_model: self.fc_d_model,
            n_heads: self.fc_heads,
            n_layers: self.fc_layers,
            target_channel: 0,
        }
    }

    pub fn fusion(&self, mode: FusionMode) -> FusionConfig {
        FusionConfig {
            mode,
            d_fuse: self.fuse_d,
            n_heads: self.fuse_heads,
        }
    }

    fn train(&self, epochs: usize, patience: Option<usize>) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            patience,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }

    pub fn vae_train(&self) -> TrainConfig {
        self.train(self.vae_epochs, None)
    }

    pub fn align_train(&self) -> TrainConfig {
        self.train(self.align_epochs, None)
    }

    pub fn stage2_train(&self) -> TrainConfig {
        self.train(
            self.stage2_epochs,
            (self.patience > 0).then_some(self.patience),
        )
    }
}

/// Output directory when neither the config nor a flag names one.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from)
}
