//! Stage 2: fuse the frozen text branch with the patch forecaster.
//!
//! Both series are projected to `d_fuse`, a learned query attends over the
//! two tokens, and a zero-initialized projection maps the result back to the
//! horizon on top of a residual from the forecaster. The attention-fusion
//! baseline swaps the pretrained text branch for a fresh series-direct text
//! transformer trained end to end.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aligner::{self, AlignTarget, Aligner, AlignerConfig};
use crate::datagen::PairedInstance;
use crate::diffcore::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::forecaster::{
    self, ForecastConfig, ForecastEpochLog, Forecaster, PreparedChannel, PreparedInstance,
};
use crate::freqvae::{self, FreqVae};
use crate::nn;
use crate::textrep::{Embedder, TextEmbedding};
use crate::training::{minibatches, rng_stream, streams, EarlyStopping, TrainConfig};

pub const PREFIX: &str = "fusion";
pub const BASELINE_TEXT_PREFIX: &str = "textnet";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FusionMode {
    #[serde(rename = "text2freq")]
    Text2Freq,
    #[serde(rename = "attention_fusion")]
    AttentionFusion,
    #[serde(rename = "unimodal")]
    Unimodal,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [
        FusionMode::Text2Freq,
        FusionMode::AttentionFusion,
        FusionMode::Unimodal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Text2Freq => "text2freq",
            FusionMode::AttentionFusion => "attention_fusion",
            FusionMode::Unimodal => "unimodal",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text2freq" => Ok(FusionMode::Text2Freq),
            "attention_fusion" | "attention_fusion_baseline" => Ok(FusionMode::AttentionFusion),
            "unimodal" => Ok(FusionMode::Unimodal),
            other => Err(Error::invalid(
                "mode",
                format!("unknown mode `{other}` (text2freq | attention_fusion | unimodal)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub d_fuse: usize,
    pub n_heads: usize,
}

impl FusionConfig {
    pub fn new(mode: FusionMode) -> Self {
        Self {
            mode,
            d_fuse: 32,
            n_heads: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_fuse == 0 || self.d_fuse % self.n_heads != 0 {
            return Err(Error::invalid(
                "fusion",
                format!(
                    "d_fuse {} not divisible by n_heads {}",
                    self.d_fuse, self.n_heads
                ),
            ));
        }
        Ok(())
    }
}

/// Pretrained Stage-1 aligner and VAE.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Stack {
    pub aligner: Aligner,
    pub vae: FreqVae,
}

impl Stage1Stack {
    pub fn new(aligner: Aligner, vae: FreqVae) -> Result<Self> {
        if aligner.cfg.target != AlignTarget::FreqLatent {
            return Err(Error::invalid(
                "stage-1 stack",
                "aligner must target the frequency latent",
            ));
        }
        if aligner.cfg.latent_dim != vae.cfg.latent_dim {
            return Err(Error::invalid(
                "stage-1 stack",
                format!(
                    "aligner latent {} != vae latent {}",
                    aligner.cfg.latent_dim, vae.cfg.latent_dim
                ),
            ));
        }
        Ok(Self { aligner, vae })
    }

    pub fn n_lf(&self) -> usize {
        self.aligner.cfg.n_lf
    }
}

/// Band-limited normalized series predicted from one embedding by the frozen
/// Stage-1 stack.
pub fn text_branch(e: &TextEmbedding, stack: &Stage1Stack) -> Result<Vec<f64>> {
    Ok(stack
        .aligner
        .output_series(Some(&stack.vae), &[&e.vector])?
        .swap_remove(0))
}

pub fn init_fusion_params(cfg: &FusionConfig, horizon: usize, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = rng_stream(seed, streams::FUSION);
    let mut s = ParamStore::new();
    let d = cfg.d_fuse;
    nn::init_linear(&mut s, "fusion.ts", horizon, d, &mut rng)?;
    nn::init_linear(&mut s, "fusion.text", horizon, d, &mut rng)?;
    s.uniform("fusion.query", &[d], 1.0 / (d as f64).sqrt(), &mut rng)?;
    nn::init_linear(&mut s, "fusion.k", d, d, &mut rng)?;
    nn::init_linear(&mut s, "fusion.v", d, d, &mut rng)?;
    nn::init_linear_zero(&mut s, "fusion.out", d, horizon)?;
    Ok(s)
}

/// `y_ts, y_text: [B, T]` → fused `[B, T]` and per-head `[B, 1, 2]` weights.
pub fn fuse_graph(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &FusionConfig,
    y_ts: Var,
    y_text: Var,
) -> Result<(Var, Vec<Var>)> {
    let s = tape.shape(y_ts).to_vec();
    if s.len() != 2 || tape.shape(y_text) != s.as_slice() {
        return Err(Error::shape("fuse", &s, tape.shape(y_text)));
    }
    let (b, d) = (s[0], cfg.d_fuse);
    let a = nn::linear(tape, store, "fusion.ts", y_ts)?;
    let a = tape.reshape(a, &[b, 1, d])?;
    let t = nn::linear(tape, store, "fusion.text", y_text)?;
    let t = tape.reshape(t, &[b, 1, d])?;
    let tokens = tape.concat(&[a, t], 1)?;
    let zeros = tape.constant(vec![0.0; b * d], &[b, 1, d])?;
    let query = tape.param(store, "fusion.query")?;
    let q = tape.add(zeros, query)?;
    let k = nn::linear(tape, store, "fusion.k", tokens)?;
    let v = nn::linear(tape, store, "fusion.v", tokens)?;
    let (att, weights) = nn::multi_head_attention(tape, q, k, v, cfg.n_heads)?;
    let att = tape.reshape(att, &[b, d])?;
    let delta = nn::linear(tape, store, "fusion.out", att)?;
    Ok((tape.add(y_ts, delta)?, weights))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseOutput {
    pub y: Vec<f64>,
    /// Per-head weights on the (series, text) tokens.
    pub weights: Vec<[f64; 2]>,
}

pub fn fuse(
    y_ts: &[f64],
    y_text: &[f64],
    params: &ParamStore,
    cfg: &FusionConfig,
) -> Result<FuseOutput> {
    if y_ts.len() != y_text.len() {
        return Err(Error::shape("fuse", &[y_ts.len()], &[y_text.len()]));
    }
    let t = y_ts.len();
    let mut tape = Tape::new();
    let a = tape.constant(y_ts.to_vec(), &[1, t])?;
    let b = tape.constant(y_text.to_vec(), &[1, t])?;
    let (y, w) = fuse_graph(&mut tape, params, cfg, a, b)?;
    Ok(FuseOutput {
        y: tape.value(y).to_vec(),
        weights: w
            .iter()
            .map(|&h| {
                let v = tape.value(h);
                [v[0], v[1]]
            })
            .collect(),
    })
}

/// Forecaster input, normalized target and text embedding for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Instance {
    pub base: PreparedInstance,
    pub embedding: Vec<f64>,
}

pub fn prepare_stage2(
    data: &[PairedInstance],
    cfg: &ForecastConfig,
    embedder: &Embedder,
) -> Result<Vec<Stage2Instance>> {
    let base = forecaster::prepare(data, cfg)?;
    data.iter()
        .zip(base)
        .map(|(inst, base)| {
            let id = inst.embedding_id.as_deref().unwrap_or(&inst.id);
            Ok(Stage2Instance {
                base,
                embedding: embedder.embed(id, &inst.text)?.vector,
            })
        })
        .collect()
}

/// Forecaster, fusion layer and text branch in one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Model {
    pub fusion: FusionConfig,
    pub forecast: ForecastConfig,
    /// Text branch config: the frozen aligner for text2freq, the trainable
    /// series-direct network for the baseline.
    pub text: Option<AlignerConfig>,
    pub params: ParamStore,
}

fn text_prefix(mode: FusionMode) -> &'static str {
    match mode {
        FusionMode::AttentionFusion => BASELINE_TEXT_PREFIX,
        _ => aligner::PREFIX,
    }
}

/// Series-direct text network used by the attention-fusion baseline.
pub fn baseline_text_config(embed_dim: usize, horizon: usize) -> AlignerConfig {
    AlignerConfig::new(
        AlignTarget::SeriesDirect,
        horizon / 2,
        embed_dim,
        1,
        horizon,
    )
}

/// Initial Stage-2 model. The forecaster is drawn exactly as in
/// `Forecaster::new(fcfg, seed)`, so every mode starts from the same
/// unimodal predictions.
pub fn init_stage2(
    fcfg: &ForecastConfig,
    fusion: &FusionConfig,
    stage1: Option<&Stage1Stack>,
    embed_dim: usize,
    seed: u64,
) -> Result<Stage2Model> {
    let mut params = forecaster::init_params(fcfg, seed)?;
    let text = match fusion.mode {
        FusionMode::Unimodal => None,
        FusionMode::Text2Freq => {
            let st = stage1.ok_or_else(|| {
                Error::MissingParam("stage-1 aligner and vae (text2freq mode)".into())
            })?;
            if st.aligner.cfg.series_len != fcfg.horizon {
                return Err(Error::invalid(
                    "stage 2",
                    format!(
                        "aligner series length {} != horizon {}",
                        st.aligner.cfg.series_len, fcfg.horizon
                    ),
                ));
            }
            if st.aligner.cfg.embed_dim != embed_dim {
                return Err(Error::FeatureLength {
                    expected: st.aligner.cfg.embed_dim,
                    got: embed_dim,
                });
            }
            params.merge(init_fusion_params(fusion, fcfg.horizon, seed)?)?;
            params.merge(st.aligner.params.clone())?;
            params.merge(st.vae.params.clone())?;
            params.freeze_prefix(&format!("{}.", aligner::PREFIX));
            params.freeze_prefix(&format!("{}.", freqvae::PREFIX));
            Some(st.aligner.cfg)
        }
        FusionMode::AttentionFusion => {
            let tcfg = baseline_text_config(embed_dim, fcfg.horizon);
            params.merge(init_fusion_params(fusion, fcfg.horizon, seed)?)?;
            params.merge(aligner::init_params(
                &tcfg,
                BASELINE_TEXT_PREFIX,
                seed.wrapping_add(1),
            )?)?;
            Some(tcfg)
        }
    };
    Ok(Stage2Model {
        fusion: *fusion,
        forecast: *fcfg,
        text,
        params,
    })
}

/// Full Stage-2 forward for a batch: `[B, T]` normalized predictions.
pub fn stage2_graph(
    tape: &mut Tape,
    model: &Stage2Model,
    batch: &[&Stage2Instance],
) -> Result<Var> {
    let inputs: Vec<&PreparedChannel> = batch.iter().map(|s| &s.base.input).collect();
    let x = forecaster::patches_node(tape, &inputs, &model.forecast)?;
    let y_ts = forecaster::forecast_graph(tape, &model.params, &model.forecast, x)?;
    let Some(tcfg) = &model.text else {
        return Ok(y_ts);
    };
    let mut flat = Vec::with_capacity(batch.len() * tcfg.embed_dim);
    for s in batch {
        if s.embedding.len() != tcfg.embed_dim {
            return Err(Error::FeatureLength {
                expected: tcfg.embed_dim,
                got: s.embedding.len(),
            });
        }
        flat.extend_from_slice(&s.embedding);
    }
    let e = tape.constant(flat, &[batch.len(), tcfg.embed_dim])?;
    let vae = (tcfg.target == AlignTarget::FreqLatent).then_some(&model.params);
    let (_, y_text) = aligner::output_series_graph(
        tape,
        &model.params,
        text_prefix(model.fusion.mode),
        tcfg,
        vae,
        e,
    )?;
    let (y, _) = fuse_graph(tape, &model.params, &model.fusion, y_ts, y_text)?;
    Ok(y)
}

impl Stage2Model {
    pub fn mode(&self) -> FusionMode {
        self.fusion.mode
    }

    pub fn predict(&self, data: &[Stage2Instance]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(256) {
            let refs: Vec<&Stage2Instance> = chunk.iter().collect();
            let mut tape = Tape::new();
            let y = stage2_graph(&mut tape, self, &refs)?;
            out.extend(
                tape.value(y)
                    .chunks(self.forecast.horizon)
                    .map(<[f64]>::to_vec),
            );
        }
        Ok(out)
    }

    /// Mean (MSE, MAE) in the target channel's normalized space.
    pub fn evaluate(&self, data: &[Stage2Instance]) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let preds = self.predict(data)?;
        Ok(aligner::series_metrics(
            preds
                .iter()
                .zip(data)
                .map(|(p, d)| (p.as_slice(), d.base.target.as_slice())),
        ))
    }

    /// The forecaster alone, sharing this model's weights.
    pub fn forecaster(&self) -> Result<Forecaster> {
        Forecaster::from_params(
            self.forecast,
            self.params.extract(&format!("{}.", forecaster::PREFIX)),
        )
    }
}

/// Stage-2 training. Unimodal mode is exactly `train_forecaster`; the other
/// modes jointly train forecaster and fusion (plus the baseline text network)
/// with early stopping on validation MSE.
pub fn train_stage2(
    train_set: &[Stage2Instance],
    val_set: &[Stage2Instance],
    stage1: Option<&Stage1Stack>,
    fcfg: &ForecastConfig,
    fusion: &FusionConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(Stage2Model, Vec<ForecastEpochLog>)> {
    if train_set.is_empty() {
        return Err(Error::Empty("stage-2 training set"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("stage-2 validation set"));
    }
    if fusion.mode == FusionMode::Unimodal {
        let tr: Vec<PreparedInstance> = train_set.iter().map(|s| s.base.clone()).collect();
        let va: Vec<PreparedInstance> = val_set.iter().map(|s| s.base.clone()).collect();
        let (f, log) = forecaster::train_forecaster(&tr, &va, fcfg, train, seed)?;
        let model = Stage2Model {
            fusion: *fusion,
            forecast: *fcfg,
            text: None,
            params: f.params,
        };
        return Ok((model, log));
    }
    let mut model = init_stage2(fcfg, fusion, stage1, train_set[0].embedding.len(), seed)?;
    let mut best = model.params.clone();
    let mut stop = EarlyStopping::new(train.patience);
    let mut shuffle = rng_stream(seed, streams::SHUFFLE);
    let adam = train.adam();
    let mut log = Vec::new();
    for epoch in 0..train.epochs {
        let mut sum = 0.0;
        for batch in minibatches(train_set.len(), train.batch_size, &mut shuffle) {
            let refs: Vec<&Stage2Instance> = batch.iter().map(|&i| &train_set[i]).collect();
            let mut tape = Tape::new();
            let y_hat = stage2_graph(&mut tape, &model, &refs)?;
            let ys: Vec<f64> = refs
                .iter()
                .flat_map(|s| s.base.target.iter().copied())
                .collect();
            let y = tape.constant(ys, &[refs.len(), fcfg.horizon])?;
            let loss = tape.mse(y_hat, y)?;
            let l = tape.scalar(loss);
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            sum += l * refs.len() as f64;
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
