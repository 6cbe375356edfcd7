//! Channel-independent patch transformer forecaster.
//!
//! Each channel is z-scored with its own lookback statistics, cut into
//! patches, embedded with a shared linear map plus learned positional
//! embeddings, encoded, flattened and projected to the horizon. Loss and
//! metrics live in the normalized space of the target channel.

use serde::{Deserialize, Serialize};

use crate::datagen::PairedInstance;
use crate::diffcore::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, EncoderDims};
use crate::spectral::instance_normalize;
use crate::training::{minibatches, rng_stream, streams, EarlyStopping, TrainConfig};

pub const PREFIX: &str = "forecaster";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastConfig {
    pub past_len: usize,
    pub horizon: usize,
    pub channels: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub target_channel: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            past_len: 36,
            horizon: 12,
            channels: 1,
            patch_len: 6,
            stride: 3,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            target_channel: 0,
        }
    }
}

impl ForecastConfig {
    pub fn n_patches(&self) -> usize {
        (self.past_len - self.patch_len) / self.stride + 1
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims::new(self.d_model, self.n_heads, self.n_layers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.patch_len > self.past_len {
            return Err(Error::invalid(
                "forecaster",
                format!(
                    "patch_len {} must be in 1..={}",
                    self.patch_len, self.past_len
                ),
            ));
        }
        if self.stride == 0 {
            return Err(Error::invalid("forecaster", "stride must be >= 1"));
        }
        if self.target_channel >= self.channels {
            return Err(Error::invalid(
                "forecaster",
                format!(
                    "target_channel {} >= channels {}",
                    self.target_channel, self.channels
                ),
            ));
        }
        self.dims().validate()
    }

    /// Scalar parameter count implied by the architecture.
    pub fn param_count(&self) -> usize {
        let (d, np) = (self.d_model, self.n_patches());
        (self.patch_len * d + d)
            + np * d
            + self.dims().param_count()
            + (np * d * self.horizon + self.horizon)
    }
}

/// Patches `x[i·stride .. i·stride + patch_len]`; a trailing remainder is dropped.
pub fn patchify(x: &[f64], patch_len: usize, stride: usize) -> Result<Vec<Vec<f64>>> {
    if patch_len == 0 || patch_len > x.len() || stride == 0 {
        return Err(Error::invalid(
            "patchify",
            format!(
                "patch_len {patch_len}, stride {stride} invalid for length {}",
                x.len()
            ),
        ));
    }
    let n = (x.len() - patch_len) / stride + 1;
    Ok((0..n)
        .map(|i| x[i * stride..i * stride + patch_len].to_vec())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastOutput {
    /// Prediction in the channel's normalized space.
    pub y_hat: Vec<f64>,
    pub denorm_y_hat: Vec<f64>,
}

/// One channel of one instance, ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedChannel {
    /// Flattened `[n_patches, patch_len]` of the normalized lookback.
    pub patches: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl PreparedChannel {
    pub fn new(past: &[f64], cfg: &ForecastConfig) -> Result<Self> {
        if past.len() != cfg.past_len {
            return Err(Error::FeatureLength {
                expected: cfg.past_len,
                got: past.len(),
            });
        }
        let norm = instance_normalize(past);
        Ok(Self {
            patches: patchify(&norm.values, cfg.patch_len, cfg.stride)?.concat(),
            mean: norm.orig_mean,
            std: norm.orig_std,
        })
    }

    pub fn normalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.mean) / self.std).collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.std + self.mean).collect()
    }
}

/// Target-channel input plus the future in that channel's normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInstance {
    pub input: PreparedChannel,
    pub target: Vec<f64>,
}

pub fn prepare(data: &[PairedInstance], cfg: &ForecastConfig) -> Result<Vec<PreparedInstance>> {
    data.iter()
        .map(|inst| {
            if inst.channels() != cfg.channels {
                return Err(Error::invalid(
                    "forecaster",
                    format!(
                        "instance {} has {} channels, expected {}",
                        inst.id,
                        inst.channels(),
                        cfg.channels
                    ),
                ));
            }
            if inst.x_future.len() != cfg.horizon {
                return Err(Error::FeatureLength {
                    expected: cfg.horizon,
                    got: inst.x_future.len(),
                });
            }
            let input = PreparedChannel::new(&inst.channel(cfg.target_channel), cfg)?;
            let target = input.normalize(&inst.x_future);
            Ok(PreparedInstance { input, target })
        })
        .collect()
}

pub fn init_params(cfg: &ForecastConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = rng_stream(seed, streams::INIT);
    let mut s = ParamStore::new();
    let (d, np) = (cfg.d_model, cfg.n_patches());
    nn::init_linear(&mut s, "forecaster.embed", cfg.patch_len, d, &mut rng)?;
    s.uniform("forecaster.pos", &[np, d], 0.1, &mut rng)?;
    nn::init_encoder(&mut s, "forecaster.enc", &cfg.dims(), &mut rng)?;
    nn::init_linear(&mut s, "forecaster.head", np * d, cfg.horizon, &mut rng)?;
    Ok(s)
}

/// `[B, n_patches, patch_len]` normalized patches → `[B, T]` normalized forecast.
pub fn forecast_graph(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ForecastConfig,
    patches: Var,
) -> Result<Var> {
    let s = tape.shape(patches).to_vec();
    let np = cfg.n_patches();
    if s.len() != 3 || s[1] != np || s[2] != cfg.patch_len {
        return Err(Error::shape("forecast", &s, &[np, cfg.patch_len]));
    }
    let x = nn::linear(tape, store, "forecaster.embed", patches)?;
    let pos = tape.param(store, "forecaster.pos")?;
    let x = tape.add(x, pos)?;
    let h = nn::encoder(tape, store, "forecaster.enc", &cfg.dims(), x)?;
    let flat = tape.reshape(h, &[s[0], np * cfg.d_model])?;
    nn::linear(tape, store, "forecaster.head", flat)
}

/// Stack prepared channels into a `[B, n_patches, patch_len]` constant.
pub fn patches_node(
    tape: &mut Tape,
    inputs: &[&PreparedChannel],
    cfg: &ForecastConfig,
) -> Result<Var> {
    let flat: Vec<f64> = inputs
        .iter()
        .flat_map(|p| p.patches.iter().copied())
        .collect();
    tape.constant(flat, &[inputs.len(), cfg.n_patches(), cfg.patch_len])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    pub cfg: ForecastConfig,
    pub params: ParamStore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastEpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

impl Forecaster {
    pub fn new(cfg: ForecastConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: init_params(&cfg, seed)?,
            cfg,
        })
    }

    pub fn from_params(cfg: ForecastConfig, params: ParamStore) -> Result<Self> {
        let expected = init_params(&cfg, 0)?;
        for (name, p) in expected.iter() {
            let q = params
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.to_string()))?;
            if q.shape != p.shape {
                return Err(Error::shape("forecaster params", &p.shape, &q.shape));
            }
        }
        Ok(Self { cfg, params })
    }

    fn run(&self, inputs: &[&PreparedChannel]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let x = patches_node(&mut tape, inputs, &self.cfg)?;
        let y = forecast_graph(&mut tape, &self.params, &self.cfg, x)?;
        Ok(tape
            .value(y)
            .chunks(self.cfg.horizon)
            .map(<[f64]>::to_vec)
            .collect())
    }

    /// Forecast for every channel, each processed independently.
    pub fn forecast_channels(&self, x_past: &[Vec<f64>]) -> Result<Vec<ForecastOutput>> {
        if x_past.len() != self.cfg.past_len || x_past.iter().any(|r| r.len() != self.cfg.channels)
        {
            return Err(Error::invalid(
                "forecast",
                format!(
                    "expected [{}][{}] lookback",
                    self.cfg.past_len, self.cfg.channels
                ),
            ));
        }
        let chans = (0..self.cfg.channels)
            .map(|c| {
                let col: Vec<f64> = x_past.iter().map(|r| r[c]).collect();
                PreparedChannel::new(&col, &self.cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&PreparedChannel> = chans.iter().collect();
        let ys = self.run(&refs)?;
        Ok(chans
            .iter()
            .zip(ys)
            .map(|(p, y)| ForecastOutput {
                denorm_y_hat: p.denormalize(&y),
                y_hat: y,
            })
            .collect())
    }

    /// Forecast of the target channel.
    pub fn forecast(&self, x_past: &[Vec<f64>]) -> Result<ForecastOutput> {
        Ok(self
            .forecast_channels(x_past)?
            .swap_remove(self.cfg.target_channel))
    }

    /// Normalized predictions for prepared instances.
    pub fn predict(&self, data: &[PreparedInstance]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(256) {
            let refs: Vec<&PreparedChannel> = chunk.iter().map(|p| &p.input).collect();
            out.extend(self.run(&refs)?);
        }
        Ok(out)
    }

    /// Mean (MSE, MAE) in normalized space.
    pub fn evaluate(&self, data: &[PreparedInstance]) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let preds = self.predict(data)?;
        Ok(crate::aligner::series_metrics(
            preds
                .iter()
                .zip(data)
                .map(|(p, d)| (p.as_slice(), d.target.as_slice())),
        ))
    }
}

/// Minimize normalized MSE with early stopping on validation MSE; the
/// returned model holds the best validation parameters.
pub fn train_forecaster(
    train_set: &[PreparedInstance],
    val_set: &[PreparedInstance],
    cfg: &ForecastConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(Forecaster, Vec<ForecastEpochLog>)> {
    if train_set.is_empty() {
        return Err(Error::Empty("forecaster training set"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("forecaster validation set"));
    }
    let mut model = Forecaster::new(*cfg, seed)?;
    let mut best = model.params.clone();
    let mut stop = EarlyStopping::new(train.patience);
    let mut shuffle = rng_stream(seed, streams::SHUFFLE);
    let adam = train.adam();
    let mut log = Vec::new();
    for epoch in 0..train.epochs {
        let mut sum = 0.0;
        for batch in minibatches(train_set.len(), train.batch_size, &mut shuffle) {
            let mut tape = Tape::new();
            let inputs: Vec<&PreparedChannel> =
                batch.iter().map(|&i| &train_set[i].input).collect();
            let x = patches_node(&mut tape, &inputs, cfg)?;
            let y_hat = forecast_graph(&mut tape, &model.params, cfg, x)?;
            let ys: Vec<f64> = batch
                .iter()
                .flat_map(|&i| train_set[i].target.iter().copied())
                .collect();
            let y = tape.constant(ys, &[batch.len(), cfg.horizon])?;
            let loss = tape.mse(y_hat, y)?;
            let l = tape.scalar(loss);
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            sum += l * batch.len() as f64;
            tape.backward(loss)?;
            tape.accumulate_into(&mut model.params)?;
            if let Some(c) = train.clip_norm {
                model.params.clip_grad_norm(c);
            }
            model.params.adam_step(&adam)?;
        }
        let (val_mse, _) = model.evaluate(val_set)?;
        log.push(ForecastEpochLog {
            epoch,
            train_mse: sum / train_set.len() as f64,
            val_mse,
        });
        if stop.observe(epoch, val_mse) {
            best = model.params.clone();
        }
        if stop.should_stop(epoch) {
            break;
        }
    }
    model.params = best;
    Ok((model, log))
}

pub fn log_csv(log: &[ForecastEpochLog]) -> String {
    let mut s = String::from("epoch,train_mse,val_mse\n");
    for e in log {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.train_mse, e.val_mse));
    }
    s
}
