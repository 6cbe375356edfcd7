//! The pipeline stages behind each subcommand. Every stage reads its inputs
//! from the output directory and writes its artifacts back there.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use text2freq::aligner::{self, AlignPair, AlignTarget, Aligner};
use text2freq::datagen::{self, PairedInstance, SplitIndices};
use text2freq::diffcore::checkpoint::{load_params, save_params};
use text2freq::forecaster::{self, ForecastEpochLog};
use text2freq::freqvae::{self, FreqVae, VaeEpochLog};
use text2freq::fusion::{self, FusionMode, Stage1Stack, Stage2Instance, Stage2Model};
use text2freq::textrep::{self, Embedder};

use crate::config::{RunConfig, TaskKind};
use crate::error::{BenchError, Result};
use crate::report::{argmin_setting, AblationRow, ExperimentReport, MethodRow, SplitInfo};

/// Artifact locations under one output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn file(&self, name: impl AsRef<Path>) -> PathBuf {
        self.root.join(name)
    }

    pub fn pretrain(&self) -> PathBuf {
        self.file("pretrain.jsonl")
    }
    pub fn task(&self) -> PathBuf {
        self.file("task.jsonl")
    }
    pub fn vae(&self) -> PathBuf {
        self.file("vae.t2fp")
    }
    pub fn aligner(&self, n_lf: usize) -> PathBuf {
        self.file(format!("aligner_n{n_lf}.t2fp"))
    }
    pub fn stage2(&self, mode: FusionMode) -> PathBuf {
        self.file(format!("stage2_{mode}.t2fp"))
    }
    pub fn ablation(&self, setting: &str) -> PathBuf {
        self.file(format!("ablate_{setting}.t2fp"))
    }
    pub fn log(&self, stem: &str) -> PathBuf {
        self.file(format!("{stem}_log.csv"))
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.file(format!("{name}.json"))
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> BenchError {
    let context = context.into();
    move |source| BenchError::Io { context, source }
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(io_err(path.display().to_string()))
}

fn require(path: PathBuf, stage: &'static str, command: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(BenchError::MissingArtifact {
            stage,
            command,
            path,
        })
    }
}

fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(BenchError::Numeric(format!("{what} is not finite")))
    }
}

pub fn embedder(cfg: &RunConfig) -> Result<Embedder> {
    match &cfg.embeddings {
        None => Ok(Embedder::HashedBow { dim: cfg.embed_dim }),
        Some(p) => {
            let f = textrep::load_embeddings(p)?;
            if f.dim != cfg.embed_dim {
                return Err(BenchError::Config(vec![format!(
                    "embed_dim = {} but {} holds {}-dimensional vectors",
                    cfg.embed_dim,
                    p.display(),
                    f.dim
                )]));
            }
            Ok(Embedder::Imported(f))
        }
    }
}

fn assumptions(cfg: &RunConfig) -> Vec<String> {
    let mut a = vec![
        "metrics are in normalized space: each target is scaled by its own past window's mean and std".to_string(),
        "splits are chronological 70/10/20 by instance order".to_string(),
        "the frequency ablation runs on the pretrain corpus, the method comparison on the task corpus".to_string(),
        format!(
            "pretrain corpus {} instances, task corpus {} instances, lookback {}, horizon {}",
            cfg.pretrain_size, cfg.task_size, cfg.past_len, cfg.horizon
        ),
    ];
    a.push(match cfg.embeddings {
        Some(ref p) => format!("text embeddings imported from {}", p.display()),
        None => format!(
            "text embeddings are {}-bucket hashed bag-of-words",
            cfg.embed_dim
        ),
    });
    a.push(match cfg.task_kind {
        TaskKind::Synthetic => {
            "corpora are synthetic trend + harmonics + noise with template texts".into()
        }
        TaskKind::Oracle => {
            "corpora are oracle data: white-noise past, text-determined future".into()
        }
    });
    a
}

// ---------------------------------------------------------------------------
// Data

fn generate_corpus(
    cfg: &RunConfig,
    n: usize,
    seed: u64,
    prefix: &str,
) -> Result<Vec<PairedInstance>> {
    Ok(match cfg.task_kind {
        TaskKind::Synthetic => datagen::generate(&cfg.gen_spec(n, seed, prefix))?,
        TaskKind::Oracle => datagen::generate_oracle(n, seed, cfg.past_len, cfg.horizon)?
            .into_iter()
            .map(|mut d| {
                d.id = format!("{prefix}{}", d.id);
                d
            })
            .collect(),
    })
}

/// Generate the pretrain and task corpora. A configured `dataset` replaces
/// the generated task corpus.
pub fn cmd_gen(cfg: &RunConfig, paths: &Paths) -> Result<(usize, usize)> {
    fs::create_dir_all(&paths.root).map_err(io_err(paths.root.display().to_string()))?;
    let pretrain = generate_corpus(cfg, cfg.pretrain_size, cfg.seed, "p")?;
    datagen::save_dataset(&pretrain, paths.pretrain())?;
    let n_task = if cfg.dataset.is_some() {
        load_task(cfg, paths)?.len()
    } else {
        let task = generate_corpus(cfg, cfg.task_size, cfg.seed.wrapping_add(1), "t")?;
        datagen::save_dataset(&task, paths.task())?;
        task.len()
    };
    Ok((pretrain.len(), n_task))
}

pub fn load_pretrain(paths: &Paths) -> Result<Vec<PairedInstance>> {
    let p = require(paths.pretrain(), "data generation", "gen")?;
    Ok(datagen::load_dataset(p)?)
}

pub fn load_task(cfg: &RunConfig, paths: &Paths) -> Result<Vec<PairedInstance>> {
    let data = match &cfg.dataset {
        Some(p) => datagen::load_dataset(p)?,
        None => datagen::load_dataset(require(paths.task(), "data generation", "gen")?)?,
    };
    let mut bad = Vec::new();
    for d in &data {
        if d.x_past.len() != cfg.past_len || d.x_future.len() != cfg.horizon {
            bad.push(format!(
                "instance {} has past {} / future {}, config expects {} / {}",
                d.id,
                d.x_past.len(),
                d.x_future.len(),
                cfg.past_len,
                cfg.horizon
            ));
        }
        if bad.len() >= 5 {
            break;
        }
    }
    if bad.is_empty() {
        Ok(data)
    } else {
        Err(BenchError::Config(bad))
    }
}

fn pick<T: Clone>(data: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

/// Stage-1 pairs of the pretrain corpus, split into (train, test).
pub fn pretrain_pairs(cfg: &RunConfig, paths: &Paths) -> Result<(Vec<AlignPair>, Vec<AlignPair>)> {
    let data = load_pretrain(paths)?;
    let emb = embedder(cfg)?;
    let pairs = data
        .iter()
        .map(|d| {
            let id = d.embedding_id.as_deref().unwrap_or(&d.id);
            Ok(AlignPair {
                embedding: emb.embed(id, &d.text)?.vector,
                future: d.x_future.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let split = datagen::chronological_split(pairs.len(), 0);
    Ok((pick(&pairs, &split.train), pick(&pairs, &split.test)))
}

// ---------------------------------------------------------------------------
// Stage 1

fn vae_log_csv(log: &[VaeEpochLog]) -> String {
    let mut s = String::from("epoch,recon_mse,kl\n");
    for e in log {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.recon_mse, e.kl));
    }
    s
}

/// Train the frequency VAE on every truncation level of the pretrain
/// training futures. Returns the final reconstruction MSE.
pub fn cmd_pretrain_vae(cfg: &RunConfig, paths: &Paths) -> Result<f64> {
    let (train, _) = pretrain_pairs(cfg, paths)?;
    let futures: Vec<Vec<f64>> = train.into_iter().map(|p| p.future).collect();
    let feats = freqvae::training_features(&futures, cfg.horizon / 2)?;
    let (vae, log) = freqvae::train_vae(&feats, &cfg.vae(), &cfg.vae_train(), cfg.seed)?;
    let last = log.last().map_or(f64::NAN, |e| e.recon_mse);
    check_finite("VAE reconstruction loss", &[last])?;
    save_params(&vae.params, "vae.", paths.vae())?;
    write(&paths.log("vae"), &vae_log_csv(&log))?;
    Ok(last)
}

pub fn load_vae(cfg: &RunConfig, paths: &Paths) -> Result<FreqVae> {
    let p = require(paths.vae(), "VAE pretraining", "pretrain-vae")?;
    Ok(FreqVae::from_params(cfg.vae(), load_params(p)?)?)
}

fn train_aligner(
    cfg: &RunConfig,
    target: AlignTarget,
    n_lf: usize,
    train: &[AlignPair],
    vae: &FreqVae,
    ckpt: &Path,
    log_path: &Path,
) -> Result<Aligner> {
    let acfg = cfg.aligner(target, n_lf);
    let vae = (target == AlignTarget::FreqLatent).then_some(vae);
    let (model, log) = aligner::train_stage1(train, vae, &acfg, &cfg.align_train(), cfg.seed)?;
    check_finite(
        "Stage-1 loss",
        &log.iter().map(|e| e.total).collect::<Vec<_>>(),
    )?;
    save_params(&model.params, "aligner.", ckpt)?;
    write(log_path, &aligner::log_csv(&log))?;
    Ok(model)
}

/// Stage-1 alignment at the configured `n_lf`. Returns test (MSE, MAE).
pub fn cmd_pretrain_align(cfg: &RunConfig, paths: &Paths) -> Result<(f64, f64)> {
    let vae = load_vae(cfg, paths)?;
    let (train, test) = pretrain_pairs(cfg, paths)?;
    let stem = format!("aligner_n{}", cfg.n_lf);
    let model = train_aligner(
        cfg,
        AlignTarget::FreqLatent,
        cfg.n_lf,
        &train,
        &vae,
        &paths.aligner(cfg.n_lf),
        &paths.log(&stem),
    )?;
    Ok(aligner::evaluate_alignment(&test, &model, Some(&vae))?)
}

pub fn load_stage1(cfg: &RunConfig, paths: &Paths) -> Result<Stage1Stack> {
    let vae = load_vae(cfg, paths)?;
    let p = require(
        paths.aligner(cfg.n_lf),
        "Stage-1 alignment",
        "pretrain-align",
    )?;
    let al = Aligner::from_params(
        cfg.aligner(AlignTarget::FreqLatent, cfg.n_lf),
        load_params(p)?,
    )?;
    Ok(Stage1Stack::new(al, vae)?)
}

// ---------------------------------------------------------------------------
// Stage 2

/// The task corpus prepared for Stage 2 and split once for every method.
pub struct TaskSplit {
    pub indices: SplitIndices,
    pub ids: Vec<String>,
    pub train: Vec<Stage2Instance>,
    pub val: Vec<Stage2Instance>,
    pub test: Vec<Stage2Instance>,
}

impl TaskSplit {
    pub fn fingerprint(&self) -> String {
        let mut s = String::new();
        for (tag, block) in [
            ("train", &self.indices.train),
            ("val", &self.indices.val),
            ("test", &self.indices.test),
        ] {
            s.push_str(tag);
            for &i in block {
                s.push(' ');
                s.push_str(&self.ids[i]);
            }
            s.push('\n');
        }
        format!("{:016x}", textrep::fnv1a64(s.as_bytes()))
    }

    pub fn info(&self, identical: bool) -> SplitInfo {
        SplitInfo {
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
            fingerprint: self.fingerprint(),
            identical_across_methods: identical,
        }
    }
}

pub fn task_split(cfg: &RunConfig, paths: &Paths) -> Result<TaskSplit> {
    let data = load_task(cfg, paths)?;
    let prepared = fusion::prepare_stage2(&data, &cfg.forecast(), &embedder(cfg)?)?;
    let indices = datagen::chronological_split(data.len(), cfg.split_purge);
    if indices.train.is_empty() || indices.val.is_empty() || indices.test.is_empty() {
        return Err(BenchError::Config(vec![format!(
            "task corpus of {} instances leaves an empty split block",
            data.len()
        )]));
    }
    Ok(TaskSplit {
        train: pick(&prepared, &indices.train),
        val: pick(&prepared, &indices.val),
        test: pick(&prepared, &indices.test),
        ids: data.into_iter().map(|d| d.id).collect(),
        indices,
    })
}

fn best_epoch(log: &[ForecastEpochLog]) -> usize {
    log.iter()
        .min_by(|a, b| a.val_mse.total_cmp(&b.val_mse))
        .map_or(0, |e| e.epoch)
}

/// One trained Stage-2 method, evaluated on the test block.
pub struct MethodRun {
    pub model: Stage2Model,
    pub row: MethodRow,
    pub fingerprint: String,
}

pub fn run_method(
    cfg: &RunConfig,
    paths: &Paths,
    mode: FusionMode,
    split: &TaskSplit,
    stage1: Option<&Stage1Stack>,
) -> Result<MethodRun> {
    let (model, log) = fusion::train_stage2(
        &split.train,
        &split.val,
        stage1,
        &cfg.forecast(),
        &cfg.fusion(mode),
        &cfg.stage2_train(),
        cfg.seed,
    )?;
    let (mse, mae) = model.evaluate(&split.test)?;
    check_finite(&format!("{mode} test metrics"), &[mse, mae])?;
    save_params(&model.params, "", paths.stage2(mode))?;
    write(
        &paths.log(&format!("stage2_{mode}")),
        &forecaster::log_csv(&log),
    )?;
    Ok(MethodRun {
        row: MethodRow {
            method: mode.as_str().into(),
            mse,
            mae,
            best_epoch: best_epoch(&log),
        },
        fingerprint: split.fingerprint(),
        model,
    })
}

fn stage1_for(cfg: &RunConfig, paths: &Paths, mode: FusionMode) -> Result<Option<Stage1Stack>> {
    if mode == FusionMode::Text2Freq {
        load_stage1(cfg, paths).map(Some)
    } else {
        Ok(None)
    }
}

/// Train the configured Stage-2 mode and save its checkpoint.
pub fn cmd_train(cfg: &RunConfig, paths: &Paths) -> Result<MethodRow> {
    let stage1 = stage1_for(cfg, paths, cfg.mode)?;
    let split = task_split(cfg, paths)?;
    Ok(run_method(cfg, paths, cfg.mode, &split, stage1.as_ref())?.row)
}

/// Rebuild a Stage-2 model from its checkpoint.
pub fn load_stage2(cfg: &RunConfig, paths: &Paths, mode: FusionMode) -> Result<Stage2Model> {
    let p = require(paths.stage2(mode), "Stage-2 training", "train")?;
    let text = match mode {
        FusionMode::Unimodal => None,
        FusionMode::Text2Freq => Some(cfg.aligner(AlignTarget::FreqLatent, cfg.n_lf)),
        FusionMode::AttentionFusion => {
            Some(fusion::baseline_text_config(cfg.embed_dim, cfg.horizon))
        }
    };
    let params = load_params(p)?;
    let mut expected = forecaster::init_params(&cfg.forecast(), 0)?;
    if let Some(tcfg) = &text {
        expected.merge(fusion::init_fusion_params(
            &cfg.fusion(mode),
            cfg.horizon,
            0,
        )?)?;
        if mode == FusionMode::Text2Freq {
            expected.merge(aligner::init_params(tcfg, aligner::PREFIX, 0)?)?;
            expected.merge(freqvae::init_params(&cfg.vae(), 0)?)?;
        } else {
            expected.merge(aligner::init_params(tcfg, fusion::BASELINE_TEXT_PREFIX, 0)?)?;
        }
    }
    for (name, p) in expected.iter() {
        match params.get(name) {
            Some(q) if q.shape == p.shape => {}
            _ => {
                return Err(BenchError::Config(vec![format!(
                    "checkpoint {} does not match the configured {mode} model at `{name}`",
                    paths.stage2(mode).display()
                )]))
            }
        }
    }
    Ok(Stage2Model {
        fusion: cfg.fusion(mode),
        forecast: cfg.forecast(),
        text,
        params,
    })
}

/// Evaluate the saved Stage-2 checkpoint of the configured mode on the test
/// block.
pub fn cmd_eval(cfg: &RunConfig, paths: &Paths) -> Result<ExperimentReport> {
    let model = load_stage2(cfg, paths, cfg.mode)?;
    let split = task_split(cfg, paths)?;
    let (mse, mae) = model.evaluate(&split.test)?;
    check_finite("test metrics", &[mse, mae])?;
    let mut report = ExperimentReport::new("eval", cfg);
    report.comparison.push(MethodRow {
        method: cfg.mode.as_str().into(),
        mse,
        mae,
        best_epoch: 0,
    });
    report.split = Some(split.info(true));
    report.assumptions = assumptions(cfg);
    write(
        &paths.report(&format!("eval_{}", cfg.mode)),
        &report.to_json(),
    )?;
    Ok(report)
}

/// Train and test all three methods on one shared split.
pub fn cmd_compare(cfg: &RunConfig, paths: &Paths) -> Result<ExperimentReport> {
    let split = task_split(cfg, paths)?;
    let stage1 = load_stage1(cfg, paths)?;
    let runs = FusionMode::ALL
        .par_iter()
        .map(|&mode| {
            let st = (mode == FusionMode::Text2Freq).then_some(&stage1);
            run_method(cfg, paths, mode, &split, st)
        })
        .collect::<Result<Vec<_>>>()?;
    let expected = split.fingerprint();
    if let Some(bad) = runs.iter().find(|r| r.fingerprint != expected) {
        return Err(BenchError::SplitMismatch(format!(
            "{} used split {} instead of {expected}",
            bad.row.method, bad.fingerprint
        )));
    }
    let mut report = ExperimentReport::new("compare", cfg);
    report.comparison = runs.into_iter().map(|r| r.row).collect();
    report.split = Some(split.info(true));
    report.assumptions = assumptions(cfg);
    write(&paths.report("compare"), &report.to_json())?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Ablation

/// Ablation settings in report order: the direct mapping, then every
/// truncation level.
pub fn ablation_settings(horizon: usize) -> Vec<(String, Option<usize>)> {
    std::iter::once(("text_series".to_string(), None))
        .chain((1..=horizon / 2).map(|n| (format!("text_freq_{n}"), Some(n))))
        .collect()
}

/// Stage-1 alignment for the direct target and every `n_lf`, evaluated on
/// the pretrain test block.
pub fn cmd_ablate(cfg: &RunConfig, paths: &Paths) -> Result<ExperimentReport> {
    let vae = load_vae(cfg, paths)?;
    let (train, test) = pretrain_pairs(cfg, paths)?;
    let settings = ablation_settings(cfg.horizon);
    let mut rows = settings
        .par_iter()
        .map(|(name, n_lf)| {
            let (target, n) = match n_lf {
                Some(n) => (AlignTarget::FreqLatent, *n),
                None => (AlignTarget::SeriesDirect, cfg.horizon / 2),
            };
            let model = train_aligner(
                cfg,
                target,
                n,
                &train,
                &vae,
                &paths.ablation(name),
                &paths.log(&format!("ablate_{name}")),
            )?;
            let (mse, mae) = aligner::evaluate_alignment(&test, &model, Some(&vae))?;
            check_finite(&format!("{name} metrics"), &[mse, mae])?;
            Ok(AblationRow {
                setting: name.clone(),
                n_lf: *n_lf,
                mse,
                mae,
                n_opt: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = ExperimentReport::new("ablate", cfg);
    if let Some(i) = argmin_setting(&rows) {
        rows[i].n_opt = true;
        report.n_opt = Some(rows[i].setting.clone());
    }
    report.ablation = rows;
    report.assumptions = assumptions(cfg);
    write(&paths.report("ablate"), &report.to_json())?;
    Ok(report)
}

/// Load one trained ablation aligner.
pub fn load_ablation_aligner(
    cfg: &RunConfig,
    paths: &Paths,
    setting: &str,
    n_lf: Option<usize>,
) -> Result<Aligner> {
    let p = require(paths.ablation(setting), "frequency ablation", "ablate")?;
    let acfg = match n_lf {
        Some(n) => cfg.aligner(AlignTarget::FreqLatent, n),
        None => cfg.aligner(AlignTarget::SeriesDirect, cfg.horizon / 2),
    };
    Ok(Aligner::from_params(acfg, load_params(p)?)?)
}
