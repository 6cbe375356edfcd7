use serde::Serialize;
use text2freq::datagen::{derive_labels, describe_future, generate, GenSpec, Labels, TemplateSet};
use text2freq::spectral::{dft_forward, instance_normalize, low_pass};
use text2freq::textrep::embed_hashed_bow;

pub fn low_pass_view(series: &[f64], n_lf: usize) -> Result<Vec<f64>, String> {
    let z = instance_normalize(series);
    let y = low_pass(&z.values, n_lf).map_err(|e| e.to_string())?;
    Ok(z.denormalize(&y))
}

pub fn magnitudes(series: &[f64]) -> Result<Vec<f64>, String> {
    let z = instance_normalize(series);
    let sp = dft_forward(&z.values).map_err(|e| e.to_string())?;
    Ok(sp.coeffs().iter().map(|c| c.norm()).collect())
}

pub fn describe(series: &[f64]) -> Result<String, String> {
    if series.len() < 2 {
        return Err(format!("need at least 2 points, got {}", series.len()));
    }
    Ok(describe_future(series, TemplateSet::Rich))
}

#[derive(Debug, Serialize)]
pub struct DemoInstance {
    pub past: Vec<f64>,
    pub future: Vec<f64>,
    pub text: String,
    pub labels: Labels,
}

pub fn generate_instance(
    seed: u64,
    n_harmonics: usize,
    noise_std: f64,
    trend_break: bool,
) -> Result<String, String> {
    let spec = GenSpec {
        n_harmonics,
        noise_std,
        trend_break,
        ..GenSpec::new(1, seed)
    };
    let inst = generate(&spec).map_err(|e| e.to_string())?.remove(0);
    let out = DemoInstance {
        past: inst.x_past.iter().map(|row| row[0]).collect(),
        labels: derive_labels(&inst.x_future),
        future: inst.x_future,
        text: inst.text,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

pub fn embed(text: &str, dim: usize) -> Result<Vec<f64>, String> {
    embed_hashed_bow(text, dim)
        .map(|e| e.vector)
        .map_err(|e| e.to_string())
}
