//! Gaussian VAE over packed low-frequency spectrum features. Its latent space
//! is the target the text aligner regresses onto.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::spectral::{self, SpectrumFeatures};
use crate::training::{minibatches, rng_stream, streams, TrainConfig};

pub const PREFIX: &str = "vae";
pub const LOGVAR_BOUND: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// `2·(T/2)`; the VAE always sees zero-padded full-length features.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub beta: f64,
    /// Highest truncation level present in the training set.
    pub n_lf: usize,
}

impl VaeConfig {
    pub fn for_series_len(len: usize) -> Self {
        Self {
            input_dim: 2 * (len / 2),
            hidden_dim: 64,
            latent_dim: 16,
            beta: 1e-3,
            n_lf: len / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.latent_dim == 0 {
            return Err(Error::invalid("vae", "all dims must be at least 1"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::invalid(
                "vae",
                format!("beta must be >= 0, got {}", self.beta),
            ));
        }
        Ok(())
    }
}

/// Posterior parameters for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    /// Clamped to `±LOGVAR_BOUND`.
    pub logvar: Vec<f64>,
}

impl LatentCode {
    /// `0.5·Σ (exp(logvar) + mu² − 1 − logvar)`.
    pub fn kl(&self) -> f64 {
        0.5 * self
            .mu
            .iter()
            .zip(&self.logvar)
            .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
            .sum::<f64>()
    }
}

/// `mu + exp(0.5·logvar) ⊙ noise`.
pub fn reparameterize(code: &LatentCode, noise: &[f64]) -> Vec<f64> {
    code.mu
        .iter()
        .zip(&code.logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreqVae {
    pub cfg: VaeConfig,
    pub params: ParamStore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeEpochLog {
    pub epoch: usize,
    pub recon_mse: f64,
    pub kl: f64,
}

pub fn init_params(cfg: &VaeConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = rng_stream(seed, streams::INIT);
    let mut s = ParamStore::new();
    nn::init_linear(&mut s, "vae.enc1", cfg.input_dim, cfg.hidden_dim, &mut rng)?;
    nn::init_linear(
        &mut s,
        "vae.enc_mu",
        cfg.hidden_dim,
        cfg.latent_dim,
        &mut rng,
    )?;
    nn::init_linear(
        &mut s,
        "vae.enc_logvar",
        cfg.hidden_dim,
        cfg.latent_dim,
        &mut rng,
    )?;
    nn::init_linear(&mut s, "vae.dec1", cfg.latent_dim, cfg.hidden_dim, &mut rng)?;
    nn::init_linear(&mut s, "vae.dec2", cfg.hidden_dim, cfg.input_dim, &mut rng)?;
    Ok(s)
}

/// Encoder graph: `[B, input_dim]` → (`mu`, clamped `logvar`), each `[B, D_z]`.
pub fn encode_graph(tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
    let h = nn::linear(tape, store, "vae.enc1", x)?;
    let h = tape.gelu(h);
    let mu = nn::linear(tape, store, "vae.enc_mu", h)?;
    let lv = nn::linear(tape, store, "vae.enc_logvar", h)?;
    let lv = tape.clamp(lv, -LOGVAR_BOUND, LOGVAR_BOUND);
    Ok((mu, lv))
}

/// Decoder graph: `[B, D_z]` → `[B, input_dim]`.
pub fn decode_graph(tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
    let h = nn::linear(tape, store, "vae.dec1", z)?;
    let h = tape.gelu(h);
    nn::linear(tape, store, "vae.dec2", h)
}

/// `z = mu + exp(0.5·logvar) ⊙ noise` in the graph.
pub fn reparameterize_graph(tape: &mut Tape, mu: Var, logvar: Var, noise: Var) -> Result<Var> {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let e = tape.mul(std, noise)?;
    tape.add(mu, e)
}

/// Batch-mean KL to a standard normal, summed over latent dims.
pub fn kl_graph(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let batch = if tape.shape(mu).len() == 2 {
        tape.shape(mu)[0]
    } else {
        1
    };
    let ev = tape.exp(logvar);
    let m2 = tape.square(mu);
    let a = tape.add(ev, m2)?;
    let a = tape.sub(a, logvar)?;
    let a = tape.add_scalar(a, -1.0);
    let s = tape.sum_all(a);
    Ok(tape.scale(s, 0.5 / batch as f64))
}

/// Reconstruction MSE plus `beta`·KL. Returns (total, mse, kl) nodes.
pub fn elbo_loss(
    tape: &mut Tape,
    f_in: Var,
    f_rec: Var,
    mu: Var,
    logvar: Var,
    beta: f64,
) -> Result<(Var, Var, Var)> {
    let rec = tape.mse(f_in, f_rec)?;
    let kl = kl_graph(tape, mu, logvar)?;
    let wkl = tape.scale(kl, beta);
    let total = tape.add(rec, wkl)?;
    Ok((total, rec, kl))
}

fn features_batch(tape: &mut Tape, rows: &[&[f64]], dim: usize) -> Result<Var> {
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

impl FreqVae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: init_params(&cfg, seed)?,
            cfg,
        })
    }

    /// Wrap loaded parameters (names under `vae.`).
    pub fn from_params(cfg: VaeConfig, params: ParamStore) -> Result<Self> {
        let expected = init_params(&cfg, 0)?;
        for (name, p) in expected.iter() {
            let q = params
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.to_string()))?;
            if q.shape != p.shape {
                return Err(Error::shape("vae params", &p.shape, &q.shape));
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn encode(&self, f: &SpectrumFeatures) -> Result<LatentCode> {
        Ok(self.encode_batch(&[f.as_slice()])?.remove(0))
    }

    pub fn encode_batch(&self, rows: &[&[f64]]) -> Result<Vec<LatentCode>> {
        let mut tape = Tape::new();
        let x = features_batch(&mut tape, rows, self.cfg.input_dim)?;
        let (mu, lv) = encode_graph(&mut tape, &self.params, x)?;
        let d = self.cfg.latent_dim;
        Ok(tape
            .value(mu)
            .chunks(d)
            .zip(tape.value(lv).chunks(d))
            .map(|(m, l)| LatentCode {
                mu: m.to_vec(),
                logvar: l.to_vec(),
            })
            .collect())
    }

    pub fn decode(&self, z: &[f64]) -> Result<SpectrumFeatures> {
        if z.len() != self.cfg.latent_dim {
            return Err(Error::FeatureLength {
                expected: self.cfg.latent_dim,
                got: z.len(),
            });
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.to_vec(), &[1, z.len()])?;
        let out = decode_graph(&mut tape, &self.params, zv)?;
        Ok(SpectrumFeatures(tape.value(out).to_vec()))
    }

    /// Mean reconstruction MSE of `decode(mu)` over a dataset.
    pub fn reconstruction_mse(&self, data: &[SpectrumFeatures]) -> Result<f64> {
        let rows: Vec<&[f64]> = data.iter().map(|f| f.as_slice()).collect();
        let codes = self.encode_batch(&rows)?;
        let mut total = 0.0;
        for (f, c) in data.iter().zip(&codes) {
            total += spectral::mse(f.as_slice(), self.decode(&c.mu)?.as_slice());
        }
        Ok(total / data.len() as f64)
    }
}

/// Train a VAE on spectrum features. The log has one entry per epoch with
/// batch-weighted reconstruction MSE and KL.
pub fn train_vae(
    data: &[SpectrumFeatures],
    cfg: &VaeConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(FreqVae, Vec<VaeEpochLog>)> {
    if data.is_empty() {
        return Err(Error::Empty("VAE training set"));
    }
    let mut vae = FreqVae::new(*cfg, seed)?;
    let mut shuffle = rng_stream(seed, streams::SHUFFLE);
    let mut noise_rng = rng_stream(seed, streams::NOISE);
    let adam = train.adam();
    let mut log = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let (mut rec_sum, mut kl_sum) = (0.0, 0.0);
        for batch in minibatches(data.len(), train.batch_size, &mut shuffle) {
            let rows: Vec<&[f64]> = batch.iter().map(|&i| data[i].as_slice()).collect();
            let mut tape = Tape::new();
            let x = features_batch(&mut tape, &rows, cfg.input_dim)?;
            let (mu, lv) = encode_graph(&mut tape, &vae.params, x)?;
            let noise: Vec<f64> = (0..rows.len() * cfg.latent_dim)
                .map(|_| StandardNormal.sample(&mut noise_rng))
                .collect();
            let noise = tape.constant(noise, &[rows.len(), cfg.latent_dim])?;
            let z = reparameterize_graph(&mut tape, mu, lv, noise)?;
            let rec = decode_graph(&mut tape, &vae.params, z)?;
            let (loss, r, k) = elbo_loss(&mut tape, x, rec, mu, lv, cfg.beta)?;
            if !tape.scalar(loss).is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            rec_sum += tape.scalar(r) * rows.len() as f64;
            kl_sum += tape.scalar(k) * rows.len() as f64;
            tape.backward(loss)?;
            tape.accumulate_into(&mut vae.params)?;
            if let Some(c) = train.clip_norm {
                vae.params.clip_grad_norm(c);
            }
            vae.params.adam_step(&adam)?;
        }
        log.push(VaeEpochLog {
            epoch,
            recon_mse: rec_sum / data.len() as f64,
            kl: kl_sum / data.len() as f64,
        });
    }
    Ok((vae, log))
}

/// Packed features of every normalized series at every truncation level
/// `1..=n_lf_max`, so one VAE covers all ablation settings.
pub fn training_features(series: &[Vec<f64>], n_lf_max: usize) -> Result<Vec<SpectrumFeatures>> {
    let mut out = Vec::with_capacity(series.len() * n_lf_max);
    for s in series {
        let sp = spectral::dft_forward(&spectral::instance_normalize(s).values)?;
        for n in 1..=n_lf_max {
            out.push(sp.truncate(n)?.pack());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed(cfg: &VaeConfig) -> FreqVae {
        let mut vae = FreqVae::new(*cfg, 0).unwrap();
        let names: Vec<String> = vae.params.names().map(str::to_string).collect();
        for n in names {
            vae.params
                .get_mut(&n)
                .unwrap()
                .values
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        vae
    }

    #[test]
    fn zero_network_encodes_to_standard_normal() {
        let cfg = VaeConfig::for_series_len(12);
        let vae = zeroed(&cfg);
        let code = vae.encode(&SpectrumFeatures(vec![0.0; 12])).unwrap();
        assert_eq!(code.mu, vec![0.0; 16]);
        assert_eq!(code.logvar, vec![0.0; 16]);
        assert_eq!(code.kl(), 0.0);
        assert_eq!(vae.decode(&code.mu).unwrap().0, vec![0.0; 12]);
    }

    #[test]
    fn shapes_and_dimension_errors() {
        let cfg = VaeConfig::for_series_len(12);
        let vae = FreqVae::new(cfg, 1).unwrap();
        let code = vae.encode(&SpectrumFeatures(vec![0.5; 12])).unwrap();
        assert_eq!((code.mu.len(), code.logvar.len()), (16, 16));
        assert_eq!(vae.decode(&code.mu).unwrap().len(), 12);
        assert!(vae.encode(&SpectrumFeatures(vec![0.0; 10])).is_err());
        assert!(vae.decode(&[0.0; 3]).is_err());
    }

    #[test]
    fn reparameterize_cases() {
        let code = LatentCode {
            mu: vec![1.0, -2.0],
            logvar: vec![0.0, 0.0],
        };
        assert_eq!(reparameterize(&code, &[0.0, 0.0]), code.mu);
        assert_eq!(reparameterize(&code, &[0.5, 1.0]), vec![1.5, -1.0]);
        let code = LatentCode {
            mu: vec![0.0; 3],
            logvar: vec![2.0 * 3f64.ln(); 3],
        };
        for z in reparameterize(&code, &[1.0; 3]) {
            assert!((z - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_closed_forms() {
        let c = LatentCode {
            mu: vec![1.0],
            logvar: vec![0.0],
        };
        assert_eq!(c.kl(), 0.5);
        let mut tape = Tape::new();
        let mu = tape.constant(vec![1.0], &[1, 1]).unwrap();
        let lv = tape.constant(vec![0.0], &[1, 1]).unwrap();
        let k = kl_graph(&mut tape, mu, lv).unwrap();
        assert_eq!(tape.scalar(k), 0.5);
    }

    #[test]
    fn perfect_reconstruction_zero_beta_is_zero_loss() {
        let mut tape = Tape::new();
        let f = tape.constant(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]).unwrap();
        let mu = tape.constant(vec![0.7, -0.2], &[1, 2]).unwrap();
        let lv = tape.constant(vec![0.1, 0.3], &[1, 2]).unwrap();
        let (loss, _, _) = elbo_loss(&mut tape, f, f, mu, lv, 0.0).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = VaeConfig::for_series_len(12);
        assert!(matches!(
            train_vae(&[], &cfg, &TrainConfig::default(), 0),
            Err(Error::Empty(_))
        ));
    }
}
