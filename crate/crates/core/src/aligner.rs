//! Stage 1: a transformer encoder that maps a text embedding into the VAE
//! latent space of low-frequency spectra, or straight to a series for the
//! direct text-to-series baseline.

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::freqvae::{self, FreqVae};
use crate::nn::{self, EncoderDims};
use crate::spectral::{self, instance_normalize};
use crate::textrep::TextEmbedding;
use crate::training::{minibatches, rng_stream, streams, TrainConfig};

pub use crate::nn::encoder as transformer_encoder;

pub const PREFIX: &str = "aligner";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignTarget {
    FreqLatent,
    SeriesDirect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_tokens: usize,
    pub target: AlignTarget,
    pub n_lf: usize,
    /// Text embedding width.
    pub embed_dim: usize,
    /// VAE latent width.
    pub latent_dim: usize,
    pub series_len: usize,
    /// Weight of the decoded-series MSE next to the latent MSE.
    pub lambda: f64,
}

impl AlignerConfig {
    pub fn new(
        target: AlignTarget,
        n_lf: usize,
        embed_dim: usize,
        latent_dim: usize,
        series_len: usize,
    ) -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            n_tokens: 4,
            target,
            n_lf,
            embed_dim,
            latent_dim,
            series_len,
            lambda: 1.0,
        }
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims::new(self.d_model, self.n_heads, self.n_layers)
    }

    pub fn out_dim(&self) -> usize {
        match self.target {
            AlignTarget::FreqLatent => self.latent_dim,
            AlignTarget::SeriesDirect => self.series_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        if self.n_tokens == 0 || self.embed_dim == 0 {
            return Err(Error::invalid(
                "aligner",
                "n_tokens and embed_dim must be >= 1",
            ));
        }
        if self.target == AlignTarget::FreqLatent {
            spectral::check_n_lf(self.n_lf, self.series_len)?;
        }
        Ok(())
    }
}

pub fn init_params(cfg: &AlignerConfig, prefix: &str, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = rng_stream(seed, streams::INIT);
    let mut s = ParamStore::new();
    nn::init_linear(
        &mut s,
        &format!("{prefix}.in"),
        cfg.embed_dim,
        cfg.n_tokens * cfg.d_model,
        &mut rng,
    )?;
    nn::init_encoder(&mut s, &format!("{prefix}.enc"), &cfg.dims(), &mut rng)?;
    nn::init_linear(
        &mut s,
        &format!("{prefix}.out"),
        cfg.d_model,
        cfg.out_dim(),
        &mut rng,
    )?;
    Ok(s)
}

/// `[B, D_e]` → `[B, out_dim]`: input projection, reshape to tokens,
/// encoder, mean over tokens, output projection.
pub fn map_text_graph(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &AlignerConfig,
    e: Var,
) -> Result<Var> {
    let s = tape.shape(e).to_vec();
    if s.len() != 2 || s[1] != cfg.embed_dim {
        return Err(Error::shape("map_text", &s, &[cfg.embed_dim]));
    }
    let b = s[0];
    let x = nn::linear(tape, store, &format!("{prefix}.in"), e)?;
    let x = tape.reshape(x, &[b, cfg.n_tokens, cfg.d_model])?;
    let h = nn::encoder(tape, store, &format!("{prefix}.enc"), &cfg.dims(), x)?;
    let pooled = tape.mean(h, 1)?;
    nn::linear(tape, store, &format!("{prefix}.out"), pooled)
}

/// Synthesis matrix as a constant node `[2·(T/2), T]`.
pub fn synthesis_node(tape: &mut Tape, series_len: usize, n_lf: usize) -> Result<Var> {
    let m = spectral::synthesis_matrix(series_len, n_lf)?;
    tape.constant(m, &[2 * (series_len / 2), series_len])
}

/// VAE decode, truncate to `n_lf`, inverse DFT: `[B, D_z]` → `[B, T]`.
pub fn decode_to_series_graph(
    tape: &mut Tape,
    vae: &ParamStore,
    z: Var,
    series_len: usize,
    n_lf: usize,
) -> Result<Var> {
    let f = freqvae::decode_graph(tape, vae, z)?;
    let synth = synthesis_node(tape, series_len, n_lf)?;
    tape.matmul(f, synth)
}

fn embeddings_node(tape: &mut Tape, rows: &[&[f64]], dim: usize) -> Result<Var> {
    let mut flat = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(Error::FeatureLength {
                expected: dim,
                got: r.len(),
            });
        }
        flat.extend_from_slice(r);
    }
    tape.constant(flat, &[rows.len(), dim])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aligner {
    pub cfg: AlignerConfig,
    pub params: ParamStore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignEpochLog {
    pub epoch: usize,
    pub latent_loss: f64,
    pub series_loss: f64,
    pub total: f64,
}

/// Output series `[B, T]` for a batch of embeddings. `vae` is required for
/// the frequency-latent target.
pub fn output_series_graph(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &AlignerConfig,
    vae: Option<&ParamStore>,
    e: Var,
) -> Result<(Var, Var)> {
    let mapped = map_text_graph(tape, store, prefix, cfg, e)?;
    let series = match cfg.target {
        AlignTarget::SeriesDirect => mapped,
        AlignTarget::FreqLatent => {
            let vae =
                vae.ok_or_else(|| Error::MissingParam("vae.* (frequency-latent target)".into()))?;
            decode_to_series_graph(tape, vae, mapped, cfg.series_len, cfg.n_lf)?
        }
    };
    Ok((mapped, series))
}

impl Aligner {
    pub fn new(cfg: AlignerConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: init_params(&cfg, PREFIX, seed)?,
            cfg,
        })
    }

    pub fn from_params(cfg: AlignerConfig, params: ParamStore) -> Result<Self> {
        let expected = init_params(&cfg, PREFIX, 0)?;
        for (name, p) in expected.iter() {
            let q = params
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.to_string()))?;
            if q.shape != p.shape {
                return Err(Error::shape("aligner params", &p.shape, &q.shape));
            }
        }
        Ok(Self { cfg, params })
    }

    /// Latent code (freq target) or series (direct target) for one embedding.
    pub fn map_text(&self, e: &TextEmbedding) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = embeddings_node(&mut tape, &[&e.vector], self.cfg.embed_dim)?;
        let y = map_text_graph(&mut tape, &self.params, PREFIX, &self.cfg, x)?;
        Ok(tape.value(y).to_vec())
    }

    /// Normalized-scale output series for a batch of embeddings.
    pub fn output_series(
        &self,
        vae: Option<&FreqVae>,
        embeddings: &[&[f64]],
    ) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let x = embeddings_node(&mut tape, embeddings, self.cfg.embed_dim)?;
        let (_, s) = output_series_graph(
            &mut tape,
            &self.params,
            PREFIX,
            &self.cfg,
            vae.map(|v| &v.params),
            x,
        )?;
        Ok(tape
            .value(s)
            .chunks(self.cfg.series_len)
            .map(<[f64]>::to_vec)
            .collect())
    }
}

/// A text embedding paired with the raw future window it describes.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignPair {
    pub embedding: Vec<f64>,
    pub future: Vec<f64>,
}

/// Stage-1 training. Loss per batch is
/// `MSE(latent, mu_vae(truncate(dft(normalize(y)))) + λ·MSE(series, normalize(y))`
/// for the frequency target, and `MSE(series, normalize(y))` for the direct one.
pub fn train_stage1(
    pairs: &[AlignPair],
    vae: Option<&FreqVae>,
    cfg: &AlignerConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(Aligner, Vec<AlignEpochLog>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("stage-1 training set"));
    }
    let vae = match cfg.target {
        AlignTarget::FreqLatent => Some(vae.ok_or_else(|| {
            Error::MissingParam("vae.* (frequency-latent target requires a trained VAE)".into())
        })?),
        AlignTarget::SeriesDirect => None,
    };
    // the decoder sits inside the graph but is not trained here
    let frozen_vae = vae.map(|v| {
        let mut p = v.params.clone();
        p.freeze_prefix("");
        p
    });
    let mut model = Aligner::new(*cfg, seed)?;
    let targets: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| instance_normalize(&p.future).values)
        .collect();
    for t in &targets {
        if t.len() != cfg.series_len {
            return Err(Error::FeatureLength {
                expected: cfg.series_len,
                got: t.len(),
            });
        }
    }
    let latents: Option<Vec<Vec<f64>>> = match vae {
        Some(v) => {
            let feats = targets
                .iter()
                .map(|t| Ok(spectral::dft_forward(t)?.truncate(cfg.n_lf)?.pack()))
                .collect::<Result<Vec<_>>>()?;
            let rows: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
            Some(v.encode_batch(&rows)?.into_iter().map(|c| c.mu).collect())
        }
        None => None,
    };
    let mut shuffle = rng_stream(seed, streams::SHUFFLE);
    let adam = train.adam();
    let mut log = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let (mut lat_sum, mut ser_sum, mut tot_sum) = (0.0, 0.0, 0.0);
        for batch in minibatches(pairs.len(), train.batch_size, &mut shuffle) {
            let n = batch.len() as f64;
            let mut tape = Tape::new();
            let emb: Vec<&[f64]> = batch
                .iter()
                .map(|&i| pairs[i].embedding.as_slice())
                .collect();
            let x = embeddings_node(&mut tape, &emb, cfg.embed_dim)?;
            let (mapped, series) = output_series_graph(
                &mut tape,
                &model.params,
                PREFIX,
                cfg,
                frozen_vae.as_ref(),
                x,
            )?;
            let ys: Vec<f64> = batch
                .iter()
                .flat_map(|&i| targets[i].iter().copied())
                .collect();
            let y = tape.constant(ys, &[batch.len(), cfg.series_len])?;
            let series_loss = tape.mse(series, y)?;
            let (loss, lat_val) = match &latents {
                Some(lat) => {
                    let zs: Vec<f64> = batch.iter().flat_map(|&i| lat[i].iter().copied()).collect();
                    let z = tape.constant(zs, &[batch.len(), cfg.latent_dim])?;
                    let latent_loss = tape.mse(mapped, z)?;
                    let weighted = tape.scale(series_loss, cfg.lambda);
                    (tape.add(latent_loss, weighted)?, tape.scalar(latent_loss))
                }
                None => (series_loss, 0.0),
            };
            let total = tape.scalar(loss);
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            lat_sum += lat_val * n;
            ser_sum += tape.scalar(series_loss) * n;
            tot_sum += total * n;
            tape.backward(loss)?;
            tape.accumulate_into(&mut model.params)?;
            if let Some(c) = train.clip_norm {
                model.params.clip_grad_norm(c);
            }
            model.params.adam_step(&adam)?;
        }
        let n = pairs.len() as f64;
        log.push(AlignEpochLog {
            epoch,
            latent_loss: lat_sum / n,
            series_loss: ser_sum / n,
            total: tot_sum / n,
        });
    }
    Ok((model, log))
}

/// Mean per-instance MSE and MAE between the produced series and the
/// normalized ground-truth future.
pub fn evaluate_alignment(
    test: &[AlignPair],
    model: &Aligner,
    vae: Option<&FreqVae>,
) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::Empty("alignment test set"));
    }
    let mut outputs = Vec::with_capacity(test.len());
    for chunk in test.chunks(256) {
        let emb: Vec<&[f64]> = chunk.iter().map(|p| p.embedding.as_slice()).collect();
        outputs.extend(model.output_series(vae, &emb)?);
    }
    let targets: Vec<Vec<f64>> = test
        .iter()
        .map(|p| instance_normalize(&p.future).values)
        .collect();
    Ok(series_metrics(
        outputs
            .iter()
            .zip(&targets)
            .map(|(a, b)| (a.as_slice(), b.as_slice())),
    ))
}

/// Mean over instances of per-instance (MSE, MAE).
pub fn series_metrics<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> (f64, f64) {
    let (mut mse, mut mae, mut n) = (0.0, 0.0, 0usize);
    for (y_hat, y) in pairs {
        mse += spectral::mse(y_hat, y);
        mae += spectral::mae(y_hat, y);
        n += 1;
    }
    (mse / n as f64, mae / n as f64)
}

/// Stage-1 log as CSV: `epoch,latent_loss,series_loss,total`.
pub fn log_csv(log: &[AlignEpochLog]) -> String {
    let mut s = String::from("epoch,latent_loss,series_loss,total\n");
    for e in log {
        s.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.latent_loss, e.series_loss, e.total
        ));
    }
    s
}
