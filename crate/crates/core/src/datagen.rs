//! Synthetic paired (series, text) corpora and loaders for real data.
//!
//! Generated texts are rendered from the *future* window, so they leak the
//! target by construction, mirroring description-of-the-future datasets.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::instance_normalize;
use crate::training::{rng_stream, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedInstance {
    pub id: String,
    /// `[L][C]`: one row per time step.
    pub x_past: Vec<Vec<f64>>,
    pub x_future: Vec<f64>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_id: Option<String>,
}

impl PairedInstance {
    pub fn channels(&self) -> usize {
        self.x_past.first().map_or(0, Vec::len)
    }

    /// Past values of one channel.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.x_past.iter().map(|row| row[c]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSet {
    Rich,
    TrendOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_instances: usize,
    pub seed: u64,
    pub past_len: usize,
    pub horizon: usize,
    /// Per-step slope range of the linear trend.
    pub trend_range: (f64, f64),
    /// Number of sinusoids; frequencies are whole cycles per horizon window.
    pub n_harmonics: usize,
    pub noise_std: f64,
    pub template_set: TemplateSet,
    /// Redraw the slope at the forecast origin (the trend stays continuous).
    /// Without a break the past fully reveals the future trend.
    pub trend_break: bool,
    pub id_prefix: String,
}

impl GenSpec {
    pub fn new(n_instances: usize, seed: u64) -> Self {
        Self {
            n_instances,
            seed,
            past_len: 36,
            horizon: 12,
            trend_range: (-0.3, 0.3),
            n_harmonics: 2,
            noise_std: 0.2,
            template_set: TemplateSet::Rich,
            trend_break: true,
            id_prefix: "s".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("gen", "noise_std must be >= 0"));
        }
        if self.n_harmonics > self.horizon / 2 {
            return Err(Error::invalid(
                "gen",
                format!(
                    "n_harmonics {} exceeds horizon/2 = {}",
                    self.n_harmonics,
                    self.horizon / 2
                ),
            ));
        }
        if self.trend_range.0 > self.trend_range.1 {
            return Err(Error::invalid("gen", "trend_range is reversed"));
        }
        if self.past_len < 2 || self.horizon < 2 {
            return Err(Error::invalid("gen", "past_len and horizon must be >= 2"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Labels and templates

/// Slope threshold (per step, on the z-scored future) separating flat from
/// a trend.
pub const FLAT_SLOPE: f64 = 0.05;
/// Upper bounds of the mild and moderate buckets on |slope|.
pub const MILD_SLOPE: f64 = 0.12;
pub const MODERATE_SLOPE: f64 = 0.22;
/// Residual std (after a linear fit of the z-scored future) above which the
/// window is choppy.
pub const CHOPPY_RESIDUAL: f64 = 0.5;
/// Extrema closer than this to either end count as endpoints.
pub const EDGE_MARGIN: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Magnitude {
    Mild,
    Moderate,
    Steep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Peak,
    Dip,
    Monotone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Volatility {
    Calm,
    Choppy,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Flat => "flat",
        })
    }
}

impl fmt::Display for Magnitude {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Magnitude::Mild => "mild",
            Magnitude::Moderate => "moderate",
            Magnitude::Steep => "steep",
        })
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Peak => "peak",
            Shape::Dip => "dip",
            Shape::Monotone => "monotone",
        })
    }
}

impl fmt::Display for Volatility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Volatility::Calm => "calm",
            Volatility::Choppy => "choppy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Labels {
    pub direction: Direction,
    pub magnitude: Magnitude,
    pub shape: Shape,
    pub volatility: Volatility,
}

/// Least-squares slope and residual std of `y` against `0..len`.
fn linear_fit(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let tm = (n - 1.0) / 2.0;
    let ym = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, v) in y.iter().enumerate() {
        let dt = i as f64 - tm;
        sxy += dt * (v - ym);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    let rss: f64 = y
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let r = v - ym - slope * (i as f64 - tm);
            r * r
        })
        .sum();
    (slope, (rss / n).sqrt())
}

fn argmax(y: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..y.len() {
        if y[i] > y[best] {
            best = i;
        }
    }
    best
}

/// Measure the template fields from a future window.
pub fn derive_labels(x_future: &[f64]) -> Labels {
    let z = instance_normalize(x_future).values;
    let (slope, resid) = linear_fit(&z);
    let direction = if slope > FLAT_SLOPE {
        Direction::Up
    } else if slope < -FLAT_SLOPE {
        Direction::Down
    } else {
        Direction::Flat
    };
    let magnitude = match slope.abs() {
        s if s < MILD_SLOPE => Magnitude::Mild,
        s if s < MODERATE_SLOPE => Magnitude::Moderate,
        _ => Magnitude::Steep,
    };
    let interior = |i: usize| i >= EDGE_MARGIN && i + EDGE_MARGIN < z.len();
    let neg: Vec<f64> = z.iter().map(|v| -v).collect();
    let shape = if interior(argmax(&z)) {
        Shape::Peak
    } else if interior(argmax(&neg)) {
        Shape::Dip
    } else {
        Shape::Monotone
    };
    let volatility = if resid > CHOPPY_RESIDUAL {
        Volatility::Choppy
    } else {
        Volatility::Calm
    };
    Labels {
        direction,
        magnitude,
        shape,
        volatility,
    }
}

pub fn render_text(labels: &Labels, set: TemplateSet) -> String {
    match set {
        TemplateSet::Rich => format!(
            "Over the coming window the series moves {} at a {} pace, forming a {} shape with {} fluctuations.",
            labels.direction, labels.magnitude, labels.shape, labels.volatility
        ),
        TemplateSet::TrendOnly => format!(
            "Over the coming window the series moves {} at a {} pace.",
            labels.direction, labels.magnitude
        ),
    }
}

/// Text for a future window; depends on nothing else.
pub fn describe_future(x_future: &[f64], set: TemplateSet) -> String {
    render_text(&derive_labels(x_future), set)
}

// ---------------------------------------------------------------------------
// Generation

/// Generate a corpus. Identical specs give identical corpora.
pub fn generate(spec: &GenSpec) -> Result<Vec<PairedInstance>> {
    spec.validate()?;
    let mut rng = rng_stream(spec.seed, streams::DATA);
    let (l, t) = (spec.past_len, spec.horizon);
    let noise =
        Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid("gen", e.to_string()))?;
    let width = (spec.n_instances.max(1) as f64).log10().floor() as usize + 1;
    let mut out = Vec::with_capacity(spec.n_instances);
    for i in 0..spec.n_instances {
        let level: f64 = StandardNormal.sample(&mut rng);
        let (lo, hi) = spec.trend_range;
        let slope_past = rng.random_range(lo..=hi);
        let slope_future = if spec.trend_break {
            rng.random_range(lo..=hi)
        } else {
            slope_past
        };
        let harmonics: Vec<(f64, f64, f64)> = (0..spec.n_harmonics)
            .map(|_| {
                let k = rng.random_range(1..=t / 2) as f64;
                let amp = rng.random_range(0.3..=1.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (k, amp, phase)
            })
            .collect();
        let series: Vec<f64> = (0..l + t)
            .map(|s| {
                let pivot = (l - 1) as f64;
                let sf = s as f64;
                let trend = slope_past * sf.min(pivot) + slope_future * (sf - pivot).max(0.0);
                let seasonal: f64 = harmonics
                    .iter()
                    .map(|(k, a, p)| a * (std::f64::consts::TAU * k * sf / t as f64 + p).sin())
                    .sum();
                level + trend + seasonal + noise.sample(&mut rng)
            })
            .collect();
        let x_future = series[l..].to_vec();
        out.push(PairedInstance {
            id: format!("{}{:0width$}", spec.id_prefix, i),
            x_past: series[..l].iter().map(|&v| vec![v]).collect(),
            text: describe_future(&x_future, spec.template_set),
            x_future,
            embedding_id: None,
        });
    }
    Ok(out)
}

/// Z-scored future pattern of one oracle class: a slope and a mid-window
/// bump, with an enveloped two-cycle wave in place of the featureless flat class.
fn oracle_pattern(class: usize, horizon: usize) -> Vec<f64> {
    const SLOPES: [f64; 3] = [0.3, -0.3, 0.0];
    const BUMPS: [f64; 3] = [1.5, -1.5, 0.0];
    let slope = SLOPES[class / 3];
    let bump = BUMPS[class % 3];
    let mid = (horizon - 1) as f64 / 2.0;
    let raw: Vec<f64> = (0..horizon)
        .map(|s| {
            let sf = s as f64;
            if slope == 0.0 && bump == 0.0 {
                // the envelope makes the interior crest the unique maximum
                let envelope = 1.0 + 0.5 * (std::f64::consts::PI * sf / (horizon - 1) as f64).sin();
                envelope * (std::f64::consts::TAU * 2.0 * sf / horizon as f64).cos()
                    - 0.1 * (sf - mid)
            } else {
                slope * (sf - mid) + bump * (std::f64::consts::PI * sf / (horizon - 1) as f64).sin()
            }
        })
        .collect();
    instance_normalize(&raw).values
}

pub const ORACLE_CLASSES: usize = 9;
pub const ORACLE_JITTER: f64 = 0.02;

/// A corpus where the past is white noise and the future is one of a few
/// fixed patterns named by its text. The pattern is placed at the past
/// window's level and scale, so after normalizing by past statistics the
/// target is the pattern itself: text determines it, the past does not.
pub fn generate_oracle(
    n_instances: usize,
    seed: u64,
    past_len: usize,
    horizon: usize,
) -> Result<Vec<PairedInstance>> {
    if past_len < 2 || horizon < 2 {
        return Err(Error::invalid(
            "oracle",
            "past_len and horizon must be >= 2",
        ));
    }
    let mut rng = rng_stream(seed, streams::DATA);
    let jitter = Normal::new(0.0, ORACLE_JITTER).expect("valid std");
    let mut out = Vec::with_capacity(n_instances);
    for i in 0..n_instances {
        let class = rng.random_range(0..ORACLE_CLASSES);
        let z0: f64 = StandardNormal.sample(&mut rng);
        let level = 5.0 * z0;
        let scale = rng.random_range(0.5..2.0);
        let past: Vec<f64> = (0..past_len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                level + scale * z
            })
            .collect();
        let stats = instance_normalize(&past);
        let x_future: Vec<f64> = oracle_pattern(class, horizon)
            .into_iter()
            .map(|v| stats.orig_mean + stats.orig_std * (v + jitter.sample(&mut rng)))
            .collect();
        out.push(PairedInstance {
            id: format!("o{i:05}"),
            x_past: past.into_iter().map(|v| vec![v]).collect(),
            text: describe_future(&x_future, TemplateSet::Rich),
            x_future,
            embedding_id: None,
        });
    }
    Ok(out)
}

/// Class of each oracle instance, recovered from the noiseless patterns by
/// nearest match in normalized space.
pub fn oracle_class(inst: &PairedInstance) -> usize {
    let past: Vec<f64> = inst.x_past.iter().map(|r| r[0]).collect();
    let target = instance_normalize(&past).apply(&inst.x_future);
    (0..ORACLE_CLASSES)
        .min_by(|&a, &b| {
            let da = crate::spectral::mse(&oracle_pattern(a, target.len()), &target);
            let db = crate::spectral::mse(&oracle_pattern(b, target.len()), &target);
            da.total_cmp(&db)
        })
        .expect("at least one class")
}

// ---------------------------------------------------------------------------
// Serialization and loaders

pub fn write_dataset<W: Write>(data: &[PairedInstance], w: &mut W) -> Result<()> {
    for inst in data {
        serde_json::to_writer(&mut *w, inst).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(data: &[PairedInstance], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(data, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<PairedInstance>> {
    let r = BufReader::new(File::open(path)?);
    let mut out: Vec<PairedInstance> = Vec::new();
    let mut seen = HashMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: PairedInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if seen.insert(inst.id.clone(), ()).is_some() {
            return Err(Error::DuplicateId(inst.id));
        }
        out.push(inst);
    }
    if out.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub past_len: usize,
    pub horizon: usize,
    pub target_channel: usize,
}

/// A raw sliding window from a CSV series.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub id: String,
    pub start: usize,
    pub x_past: Vec<Vec<f64>>,
    pub x_future: Vec<f64>,
}

/// Parse `date,value[,value...]` rows and cut stride-1 windows of length
/// `L + T`. Window ids are `w{start}` with `start` the first row index.
pub fn load_csv_series(path: impl AsRef<Path>, cfg: &WindowConfig) -> Result<Vec<Window>> {
    let r = BufReader::new(File::open(path)?);
    parse_csv_series(r, cfg)
}

pub fn parse_csv_series<R: BufRead>(r: R, cfg: &WindowConfig) -> Result<Vec<Window>> {
    let mut lines = r.lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => l?,
        None => return Err(Error::Empty("CSV file")),
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "date" {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `date,value[,value...]`, got `{header}`"),
        });
    }
    let channels = cols.len() - 1;
    if cfg.target_channel >= channels {
        return Err(Error::invalid(
            "csv",
            format!(
                "target channel {} but only {channels} value columns",
                cfg.target_channel
            ),
        ));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("{} fields, expected {}", fields.len(), cols.len()),
            });
        }
        let vals = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line: i + 1,
                        msg: format!("bad value `{f}`"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(vals);
    }
    let span = cfg.past_len + cfg.horizon;
    if rows.len() < span {
        return Err(Error::invalid(
            "csv",
            format!(
                "{} rows cannot hold one window of length {span}",
                rows.len()
            ),
        ));
    }
    Ok((0..=rows.len() - span)
        .map(|s| Window {
            id: format!("w{s}"),
            start: s,
            x_past: rows[s..s + cfg.past_len].to_vec(),
            x_future: rows[s + cfg.past_len..s + span]
                .iter()
                .map(|r| r[cfg.target_channel])
                .collect(),
        })
        .collect())
}

/// `id → text` from JSONL lines `{"id": ..., "text": ...}`.
pub fn load_text_jsonl(path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    parse_text_jsonl(BufReader::new(File::open(path)?))
}

pub fn parse_text_jsonl<R: BufRead>(r: R) -> Result<HashMap<String, String>> {
    #[derive(Deserialize)]
    struct Row {
        id: String,
        text: String,
    }
    let mut out = HashMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if out.contains_key(&row.id) {
            return Err(Error::DuplicateId(row.id));
        }
        out.insert(row.id, row.text);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingTextPolicy {
    #[default]
    Error,
    Empty,
}

/// Pair windows with their texts.
pub fn attach_texts(
    windows: Vec<Window>,
    texts: &HashMap<String, String>,
    policy: MissingTextPolicy,
) -> Result<Vec<PairedInstance>> {
    windows
        .into_iter()
        .map(|w| {
            let text = match (texts.get(&w.id), policy) {
                (Some(t), _) => t.clone(),
                (None, MissingTextPolicy::Empty) => String::new(),
                (None, MissingTextPolicy::Error) => return Err(Error::UnknownId(w.id)),
            };
            Ok(PairedInstance {
                id: w.id,
                x_past: w.x_past,
                x_future: w.x_future,
                text,
                embedding_id: None,
            })
        })
        .collect()
}

/// Index sets of a chronological split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Chronological 70/10/20 split of `n` windows. With `purge = w > 1`, the
/// first `w - 1` windows of the validation and test blocks are dropped so no
/// window shares a time step with a window of an earlier block (`w` is the
/// window length in steps, stride 1).
pub fn chronological_split(n: usize, purge: usize) -> SplitIndices {
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let gap = purge.saturating_sub(1);
    let val_start = (n_train + gap).min(n);
    let val_end = (n_train + n_val).min(n);
    let test_start = (val_end + gap).min(n);
    SplitIndices {
        train: (0..n_train.min(n)).collect(),
        val: (val_start..val_end.max(val_start)).collect(),
        test: (test_start..n).collect(),
    }
}
