//! Acceptance run: one PASS/FAIL line per criterion P1..P10.
//!
//! The process exits non-zero only if the harness itself breaks. A failing
//! criterion is reported, not hidden; set `T2F_ACCEPT_STRICT=1` to turn any
//! FAIL into a non-zero exit. `T2F_ACCEPT_DIR` keeps the artifacts.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::Rng;
use t2f_bench::config::{RunConfig, TaskKind};
use t2f_bench::pipeline::{self, Paths};
use t2f_bench::ExperimentReport;
use text2freq::aligner::{self, AlignTarget, AlignerConfig};
use text2freq::diffcore::gradcheck::{check, check_params, Input};
use text2freq::diffcore::{load_params, ParamStore, Tape, Var};
use text2freq::forecaster::{self, ForecastConfig, Forecaster, PreparedInstance};
use text2freq::freqvae::{self, FreqVae, VaeConfig};
use text2freq::fusion::{self, FusionConfig, FusionMode, Stage2Instance};
use text2freq::nn::{self, EncoderDims};
use text2freq::spectral::{self, dft_forward, dft_inverse, instance_normalize, low_pass};
use text2freq::training::{rng_stream, TrainConfig};

type Outcome = Result<(bool, String), String>;

struct Line {
    id: &'static str,
    title: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn rand_vec(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = rng_stream(seed, 99);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_series(seed: u64) -> Vec<f64> {
    instance_normalize(&rand_vec(12, seed, -3.0, 3.0)).values
}

// ---------------------------------------------------------------------------
// P1, P2

fn p1() -> Outcome {
    let (mut fwd, mut rt, mut pars) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..200 {
        let x = random_series(seed);
        let sp = dft_forward(&x).map_err(|e| e.to_string())?;
        for (k, c) in sp.coeffs().iter().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in x.iter().enumerate() {
                let a = 2.0 * PI * ((k + 1) * n) as f64 / 12.0;
                re += v * a.cos();
                im -= v * a.sin();
            }
            fwd = fwd.max((c.re - re).abs()).max((c.im - im).abs());
        }
        for (a, b) in x.iter().zip(dft_inverse(&sp)) {
            rt = rt.max((a - b).abs());
        }
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let c = sp.coeffs();
        let spec =
            c[..5].iter().map(|z| z.norm_sqr()).sum::<f64>() * 2.0 / 12.0 + c[5].norm_sqr() / 12.0;
        pars = pars.max((energy - spec).abs() / energy);
    }
    Ok((
        fwd <= 1e-9 && rt <= 1e-9 && pars <= 1e-8,
        format!("naive-DFT err {fwd:.1e}, round trip {rt:.1e}, Parseval rel {pars:.1e}"),
    ))
}

fn p2() -> Outcome {
    let mut violations = 0;
    let mut full = 0.0f64;
    for seed in 0..100 {
        let x = random_series(1000 + seed);
        let errs = (1..=6)
            .map(|n| low_pass(&x, n).map(|y| spectral::mse(&x, &y)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        violations += errs.windows(2).filter(|w| w[1] > w[0]).count();
        full = full.max(errs[5]);
    }
    Ok((
        violations == 0 && full <= 1e-20,
        format!("{violations} increases over 100 series, max MSE at n_lf=6 {full:.1e}"),
    ))
}

// ---------------------------------------------------------------------------
// P3

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

fn reduce(t: &mut Tape, x: Var) -> text2freq::Result<Var> {
    let shape = t.shape(x).to_vec();
    let w = t.constant(rand_vec(shape.iter().product(), 12345, -1.0, 1.0), &shape)?;
    let p = t.mul(x, w)?;
    Ok(t.sum_all(p))
}

fn input(shape: &[usize], seed: u64) -> Input {
    Input::new(rand_vec(shape.iter().product(), seed, -1.5, 1.5), shape)
}

fn randomize(store: &mut ParamStore, seed: u64) {
    let names: Vec<String> = store
        .names()
        .filter(|n| !store.is_frozen(n))
        .map(str::to_string)
        .collect();
    for (i, name) in names.iter().enumerate() {
        let p = store.get_mut(name).expect("present");
        p.values = rand_vec(p.values.len(), seed + i as u64, -0.6, 0.6);
    }
}

type OpCheck = (
    &'static str,
    Box<dyn Fn(&mut Tape, &[Var]) -> text2freq::Result<Var>>,
    Vec<Input>,
);

fn op_checks() -> Vec<OpCheck> {
    let a = input(&[2, 3, 4], 1);
    let b = input(&[3, 4], 2);
    let pos = Input::new(rand_vec(12, 3, 0.5, 2.0), &[3, 4]);
    let x = input(&[3, 5], 5);
    let xpos = Input::new(rand_vec(15, 6, 0.2, 3.0), &[3, 5]);
    let xc = Input::new(
        x.values
            .iter()
            .map(|v| {
                if v.abs() > 0.9 && v.abs() < 1.1 {
                    v * 1.5
                } else {
                    *v
                }
            })
            .collect(),
        &[3, 5],
    );
    macro_rules! op {
        ($name:expr, |$t:ident, $v:ident| $body:expr, $inputs:expr) => {
            (
                $name,
                Box::new(|$t: &mut Tape, $v: &[Var]| -> text2freq::Result<Var> {
                    let y = $body?;
                    reduce($t, y)
                }) as Box<dyn Fn(&mut Tape, &[Var]) -> text2freq::Result<Var>>,
                $inputs,
            )
        };
    }
    vec![
        op!("add", |t, v| t.add(v[0], v[1]), vec![a.clone(), b.clone()]),
        op!("sub", |t, v| t.sub(v[0], v[1]), vec![a.clone(), b.clone()]),
        op!("mul", |t, v| t.mul(v[0], v[1]), vec![a.clone(), b.clone()]),
        op!("div", |t, v| t.div(v[0], v[1]), vec![a.clone(), pos]),
        op!(
            "scale",
            |t, v| Ok::<_, text2freq::Error>(t.scale(v[0], -1.7)),
            vec![x.clone()]
        ),
        op!(
            "add_scalar",
            |t, v| Ok::<_, text2freq::Error>(t.add_scalar(v[0], 0.3)),
            vec![x.clone()]
        ),
        op!(
            "exp",
            |t, v| Ok::<_, text2freq::Error>(t.exp(v[0])),
            vec![x.clone()]
        ),
        op!(
            "log",
            |t, v| Ok::<_, text2freq::Error>(t.log(v[0])),
            vec![xpos]
        ),
        op!(
            "tanh",
            |t, v| Ok::<_, text2freq::Error>(t.tanh(v[0])),
            vec![x.clone()]
        ),
        op!(
            "gelu",
            |t, v| Ok::<_, text2freq::Error>(t.gelu(v[0])),
            vec![x.clone()]
        ),
        op!(
            "square",
            |t, v| Ok::<_, text2freq::Error>(t.square(v[0])),
            vec![x.clone()]
        ),
        op!(
            "clamp",
            |t, v| Ok::<_, text2freq::Error>(t.clamp(v[0], -1.0, 1.0)),
            vec![xc]
        ),
        op!(
            "matmul",
            |t, v| t.matmul(v[0], v[1]),
            vec![input(&[3, 4], 7), input(&[4, 2], 8)]
        ),
        op!(
            "matmul shared",
            |t, v| t.matmul(v[0], v[1]),
            vec![input(&[2, 3, 4], 9), input(&[4, 5], 10)]
        ),
        op!(
            "matmul batched",
            |t, v| t.matmul(v[0], v[1]),
            vec![input(&[2, 3, 4], 11), input(&[2, 4, 3], 12)]
        ),
        op!(
            "softmax",
            |t, v| Ok::<_, text2freq::Error>(t.softmax(v[0])),
            vec![input(&[2, 3, 5], 13)]
        ),
        op!(
            "layer_norm",
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
            vec![input(&[2, 3, 6], 14), input(&[6], 15), input(&[6], 16)]
        ),
        op!("reshape", |t, v| t.reshape(v[0], &[6, 4]), vec![a.clone()]),
        op!("transpose", |t, v| t.transpose(v[0]), vec![a.clone()]),
        op!(
            "concat",
            |t, v| t.concat(&[v[0], v[1]], 1),
            vec![a.clone(), input(&[2, 2, 4], 18)]
        ),
        op!("slice", |t, v| t.slice(v[0], 2, 1, 3), vec![a.clone()]),
        op!("sum", |t, v| t.sum(v[0], 1), vec![a.clone()]),
        op!("mean", |t, v| t.mean(v[0], 2), vec![a.clone()]),
        op!(
            "mse",
            |t, v| t.mse(v[0], v[1]),
            vec![a.clone(), input(&[2, 3, 4], 19)]
        ),
        op!(
            "multi_head_attention",
            |t, v| nn::multi_head_attention(t, v[0], v[1], v[2], 2).map(|(y, _)| y),
            vec![
                input(&[2, 1, 4], 21),
                input(&[2, 3, 4], 22),
                input(&[2, 3, 4], 23)
            ]
        ),
    ]
}

fn mini_vae() -> VaeConfig {
    VaeConfig {
        input_dim: 8,
        hidden_dim: 6,
        latent_dim: 3,
        beta: 0.5,
        n_lf: 4,
    }
}

fn mini_aligner(target: AlignTarget) -> AlignerConfig {
    AlignerConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        n_tokens: 2,
        lambda: 0.7,
        ..AlignerConfig::new(target, 2, 6, 3, 8)
    }
}

fn mini_forecast() -> ForecastConfig {
    ForecastConfig {
        past_len: 12,
        horizon: 8,
        channels: 1,
        patch_len: 4,
        stride: 4,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        target_channel: 0,
    }
}

type LossFn<'a> = Box<dyn Fn(&mut Tape, &ParamStore) -> text2freq::Result<Var> + 'a>;

fn p3() -> Outcome {
    let mut worst = (0.0f64, "");
    let mut checked = 0;
    let mut note = |name: &'static str, err: f64, n: usize| {
        checked += n;
        if err > worst.0 {
            worst = (err, name);
        }
    };
    for (name, f, inputs) in op_checks() {
        let r = check(f, &inputs, H, FLOOR).map_err(|e| format!("{name}: {e}"))?;
        note(name, r.max_rel_err, r.checked);
    }
    let e = rand_vec(3 * 6, 26, -1.0, 1.0);
    let y8 = rand_vec(3 * 8, 27, -1.0, 1.0);
    let z = rand_vec(3 * 3, 28, -1.0, 1.0);
    let x = rand_vec(4 * 8, 24, -1.0, 1.0);
    let noise = rand_vec(4 * 3, 25, -1.0, 1.0);

    let mut enc = ParamStore::new();
    let dims = EncoderDims::new(8, 2, 1);
    nn::init_encoder(&mut enc, "enc", &dims, &mut rng_stream(1, 1)).map_err(|e| e.to_string())?;
    randomize(&mut enc, 100);
    let xe = rand_vec(2 * 3 * 8, 20, -1.0, 1.0);

    let mut vae = freqvae::init_params(&mini_vae(), 2).map_err(|e| e.to_string())?;
    randomize(&mut vae, 200);
    let mut frozen_vae = vae.clone();
    frozen_vae.freeze_prefix("");

    let fcfg = mini_aligner(AlignTarget::FreqLatent);
    let mut al_f = aligner::init_params(&fcfg, "aligner", 4).map_err(|e| e.to_string())?;
    randomize(&mut al_f, 400);
    let dcfg = mini_aligner(AlignTarget::SeriesDirect);
    let mut al_d = aligner::init_params(&dcfg, "aligner", 5).map_err(|e| e.to_string())?;
    randomize(&mut al_d, 500);

    let fc = mini_forecast();
    let fus = FusionConfig {
        mode: FusionMode::Text2Freq,
        d_fuse: 4,
        n_heads: 2,
    };
    let stack = fusion::Stage1Stack::new(
        aligner::Aligner::from_params(fcfg, al_f.clone()).map_err(|e| e.to_string())?,
        FreqVae::from_params(mini_vae(), vae.clone()).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let mut t2f = fusion::init_stage2(&fc, &fus, Some(&stack), 6, 8).map_err(|e| e.to_string())?;
    randomize(&mut t2f.params, 800);
    let fus_b = FusionConfig {
        mode: FusionMode::AttentionFusion,
        ..fus
    };
    let mut af_params = forecaster::init_params(&fc, 9).map_err(|e| e.to_string())?;
    af_params
        .merge(fusion::init_fusion_params(&fus_b, 8, 9).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    af_params
        .merge(
            aligner::init_params(&dcfg, fusion::BASELINE_TEXT_PREFIX, 9)
                .map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
    let mut af = fusion::Stage2Model {
        fusion: fus_b,
        forecast: fc,
        text: Some(dcfg),
        params: af_params,
    };
    randomize(&mut af.params, 900);
    let insts: Vec<Stage2Instance> = (0..3)
        .map(|i| Stage2Instance {
            base: PreparedInstance {
                input: forecaster::PreparedChannel::new(&rand_vec(12, 30 + i, -2.0, 2.0), &fc)
                    .expect("valid"),
                target: rand_vec(8, 40 + i, -1.0, 1.0),
            },
            embedding: rand_vec(6, 50 + i, -1.0, 1.0),
        })
        .collect();
    let stage2_loss = |t: &mut Tape, m: &fusion::Stage2Model| -> text2freq::Result<Var> {
        let refs: Vec<&Stage2Instance> = insts.iter().collect();
        let y_hat = fusion::stage2_graph(t, m, &refs)?;
        let ys: Vec<f64> = insts.iter().flat_map(|s| s.base.target.clone()).collect();
        let y = t.constant(ys, &[3, 8])?;
        t.mse(y_hat, y)
    };

    let composites: Vec<(&'static str, ParamStore, LossFn)> = vec![
        (
            "encoder",
            enc,
            Box::new(|t, st| {
                let x = t.constant(xe.clone(), &[2, 3, 8])?;
                let y = nn::encoder(t, st, "enc", &dims, x)?;
                reduce(t, y)
            }),
        ),
        (
            "ELBO",
            vae,
            Box::new(|t, st| {
                let xv = t.constant(x.clone(), &[4, 8])?;
                let (mu, lv) = freqvae::encode_graph(t, st, xv)?;
                let n = t.constant(noise.clone(), &[4, 3])?;
                let zz = freqvae::reparameterize_graph(t, mu, lv, n)?;
                let rec = freqvae::decode_graph(t, st, zz)?;
                Ok(freqvae::elbo_loss(t, xv, rec, mu, lv, 0.5)?.0)
            }),
        ),
        (
            "Stage-1 frequency",
            al_f,
            Box::new(|t, st| {
                let ev = t.constant(e.clone(), &[3, 6])?;
                let (mapped, series) =
                    aligner::output_series_graph(t, st, "aligner", &fcfg, Some(&frozen_vae), ev)?;
                let zt = t.constant(z.clone(), &[3, 3])?;
                let yt = t.constant(y8.clone(), &[3, 8])?;
                let lat = t.mse(mapped, zt)?;
                let ser = t.mse(series, yt)?;
                let ser = t.scale(ser, fcfg.lambda);
                t.add(lat, ser)
            }),
        ),
        (
            "Stage-1 direct",
            al_d,
            Box::new(|t, st| {
                let ev = t.constant(e.clone(), &[3, 6])?;
                let (_, series) = aligner::output_series_graph(t, st, "aligner", &dcfg, None, ev)?;
                let yt = t.constant(y8.clone(), &[3, 8])?;
                t.mse(series, yt)
            }),
        ),
        (
            "Stage-2 text2freq",
            t2f.params.clone(),
            Box::new(|t, st| {
                let m = fusion::Stage2Model {
                    params: st.clone(),
                    ..t2f.clone()
                };
                stage2_loss(t, &m)
            }),
        ),
        (
            "Stage-2 attention fusion",
            af.params.clone(),
            Box::new(|t, st| {
                let m = fusion::Stage2Model {
                    params: st.clone(),
                    ..af.clone()
                };
                stage2_loss(t, &m)
            }),
        ),
    ];
    for (name, store, f) in &composites {
        let r = check_params(store, f, H, FLOOR).map_err(|e| format!("{name}: {e}"))?;
        if r.checked == 0 {
            return Err(format!("{name}: no trainable parameters checked"));
        }
        note(name, r.max_rel_err, r.checked);
    }
    Ok((
        worst.0 <= 1e-4,
        format!(
            "{checked} partials, worst rel err {:.1e} ({})",
            worst.0, worst.1
        ),
    ))
}

// ---------------------------------------------------------------------------
// P4

fn p4() -> Outcome {
    let mut rng = rng_stream(1, 9);
    let feats: Vec<_> = (0..32)
        .map(|_| {
            let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            dft_forward(&instance_normalize(&x).values).map(|s| s.pack())
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let all: Vec<f64> = feats.iter().flat_map(|f| f.0.clone()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
    let cfg = VaeConfig {
        beta: 0.0,
        ..VaeConfig::for_series_len(12)
    };
    let train = TrainConfig {
        epochs: 500,
        batch_size: 32,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let (vae, log) = freqvae::train_vae(&feats, &cfg, &train, 2).map_err(|e| e.to_string())?;
    let rec = vae.reconstruction_mse(&feats).map_err(|e| e.to_string())?;
    let min_kl = log.iter().map(|e| e.kl).fold(f64::INFINITY, f64::min);
    let codes = vae
        .encode_batch(&feats.iter().map(|f| f.as_slice()).collect::<Vec<_>>())
        .map_err(|e| e.to_string())?;
    let min_code_kl = codes.iter().map(|c| c.kl()).fold(f64::INFINITY, f64::min);
    Ok((
        rec < 0.1 * var && min_kl >= 0.0 && min_code_kl >= 0.0,
        format!(
            "reconstruction {rec:.2e} = {:.2}% of variance, min KL {:.2e}",
            100.0 * rec / var,
            min_kl.min(min_code_kl)
        ),
    ))
}

// ---------------------------------------------------------------------------
// Pipeline-backed criteria

struct Runs {
    cfg: RunConfig,
    paths: Paths,
    compare: ExperimentReport,
    compare_json: String,
    compare_time: Duration,
    ablate: ExperimentReport,
    ablate_json: String,
    ablate_time: Duration,
    oracle: ExperimentReport,
    oracle_time: Duration,
}

fn run_pipeline(
    cfg: &RunConfig,
    with_ablation: bool,
) -> Result<
    (
        ExperimentReport,
        Duration,
        Option<(ExperimentReport, Duration)>,
    ),
    String,
> {
    let paths = Paths::new(&cfg.out_dir);
    let t0 = Instant::now();
    pipeline::cmd_gen(cfg, &paths).map_err(|e| e.to_string())?;
    pipeline::cmd_pretrain_vae(cfg, &paths).map_err(|e| e.to_string())?;
    pipeline::cmd_pretrain_align(cfg, &paths).map_err(|e| e.to_string())?;
    let compare = pipeline::cmd_compare(cfg, &paths).map_err(|e| e.to_string())?;
    let compare_time = t0.elapsed();
    let ablate = if with_ablation {
        let t1 = Instant::now();
        let r = pipeline::cmd_ablate(cfg, &paths).map_err(|e| e.to_string())?;
        Some((r, t1.elapsed()))
    } else {
        None
    };
    Ok((compare, compare_time, ablate))
}

fn read(p: PathBuf) -> Result<String, String> {
    std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))
}

fn setup(root: &std::path::Path) -> Result<Runs, String> {
    let cfg = RunConfig {
        out_dir: root.join("synthetic"),
        ..RunConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let (compare, compare_time, ablate) = run_pipeline(&cfg, true)?;
    let (ablate, ablate_time) = ablate.expect("requested");
    let paths = Paths::new(&cfg.out_dir);
    let compare_json = read(paths.report("compare"))?;
    let ablate_json = read(paths.report("ablate"))?;
    let ocfg = RunConfig {
        out_dir: root.join("oracle"),
        task_kind: TaskKind::Oracle,
        ..RunConfig::default()
    };
    let (oracle, oracle_time, _) = run_pipeline(&ocfg, false)?;
    Ok(Runs {
        cfg,
        paths,
        compare,
        compare_json,
        compare_time,
        ablate,
        ablate_json,
        ablate_time,
        oracle,
        oracle_time,
    })
}

fn p5(r: &Runs) -> Outcome {
    let (_, test) = pipeline::pretrain_pairs(&r.cfg, &r.paths).map_err(|e| e.to_string())?;
    let vae = pipeline::load_vae(&r.cfg, &r.paths).map_err(|e| e.to_string())?;
    let emb: Vec<&[f64]> = test.iter().map(|p| p.embedding.as_slice()).collect();
    let mut worst = 0.0f64;
    let mut count = 0;
    let band = |y: &[f64], n: usize| -> Result<f64, String> {
        let sp = dft_forward(y).map_err(|e| e.to_string())?;
        Ok(sp.coeffs()[n..]
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max))
    };
    for (name, n_lf) in pipeline::ablation_settings(r.cfg.horizon) {
        let Some(n) = n_lf else { continue };
        let al = pipeline::load_ablation_aligner(&r.cfg, &r.paths, &name, n_lf)
            .map_err(|e| e.to_string())?;
        for y in al
            .output_series(Some(&vae), &emb)
            .map_err(|e| e.to_string())?
        {
            worst = worst.max(band(&y, n)?);
            count += 1;
        }
    }
    // the Stage-2 text branch itself, on the task corpus
    let stack = pipeline::load_stage1(&r.cfg, &r.paths).map_err(|e| e.to_string())?;
    let split = pipeline::task_split(&r.cfg, &r.paths).map_err(|e| e.to_string())?;
    for s in split.train.iter().chain(&split.val).chain(&split.test) {
        let e = text2freq::textrep::TextEmbedding {
            vector: s.embedding.clone(),
            source: text2freq::textrep::EmbeddingSource::HashedBow,
        };
        let y = fusion::text_branch(&e, &stack).map_err(|e| e.to_string())?;
        worst = worst.max(band(&y, stack.n_lf())?);
        count += 1;
    }
    Ok((
        worst <= 1e-9,
        format!("{count} outputs, max |bin| above n_lf {worst:.1e}"),
    ))
}

fn p6(r: &Runs) -> Outcome {
    let trained = load_params(r.paths.stage2(FusionMode::Text2Freq)).map_err(|e| e.to_string())?;
    let mut frozen = load_params(r.paths.aligner(r.cfg.n_lf)).map_err(|e| e.to_string())?;
    frozen
        .merge(load_params(r.paths.vae()).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mut differing = Vec::new();
    let mut scalars = 0;
    for (name, p) in frozen.iter() {
        let Some(q) = trained.get(name) else {
            return Err(format!("{name} missing from the Stage-2 checkpoint"));
        };
        scalars += p.values.len();
        let same = p.shape == q.shape
            && p.values
                .iter()
                .zip(&q.values)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            differing.push(name.to_string());
        }
    }
    let epochs = r.compare.method("text2freq").map_or(0, |m| m.best_epoch);
    Ok((
        differing.is_empty(),
        format!(
            "{} tensors / {scalars} scalars compared after Stage-2 training (best epoch {epochs}), {} differ",
            frozen.len(),
            differing.len()
        ),
    ))
}

fn p7(r: &Runs) -> Outcome {
    let get = |rep: &ExperimentReport, m: &str| {
        rep.method(m).map(|x| x.mse).ok_or(format!("{m} missing"))
    };
    let (t, a, u) = (
        get(&r.compare, "text2freq")?,
        get(&r.compare, "attention_fusion")?,
        get(&r.compare, "unimodal")?,
    );
    let (ot, oa, ou) = (
        get(&r.oracle, "text2freq")?,
        get(&r.oracle, "attention_fusion")?,
        get(&r.oracle, "unimodal")?,
    );
    let runtime = r.compare_time.max(r.oracle_time);
    let checks = [
        (
            t <= 0.9 * u,
            format!("synthetic text2freq {t:.4} <= 0.9 x unimodal {u:.4}"),
        ),
        (
            t <= a,
            format!("synthetic text2freq {t:.4} <= attention_fusion {a:.4}"),
        ),
        (
            ot <= 0.5 * ou,
            format!("oracle text2freq {ot:.4} <= 0.5 x unimodal {ou:.4}"),
        ),
        (
            ot < oa && oa < ou,
            format!("oracle ranking {ot:.4} < {oa:.4} < {ou:.4}"),
        ),
        (
            runtime < Duration::from_secs(600),
            format!("pipeline {:.0}s", runtime.as_secs_f64()),
        ),
    ];
    let detail = checks
        .iter()
        .map(|(ok, s)| format!("{}{s}", if *ok { "" } else { "NOT " }))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((checks.iter().all(|c| c.0), detail))
}

fn p8(r: &Runs) -> Outcome {
    let rows = &r.ablate.ablation;
    let series = r
        .ablate
        .setting("text_series")
        .map(|x| x.mse)
        .ok_or("text_series missing")?;
    let (best_name, best) = rows
        .iter()
        .filter(|x| x.n_lf.is_some())
        .map(|x| (x.setting.as_str(), x.mse))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or("no text_freq rows")?;
    let marked: Vec<&str> = rows
        .iter()
        .filter(|x| x.n_opt)
        .map(|x| x.setting.as_str())
        .collect();
    let shape = rows.len() == r.cfg.horizon / 2 + 1
        && marked.len() == 1
        && r.ablate.n_opt.as_deref() == Some(marked[0]);
    let fast = r.ablate_time < Duration::from_secs(600);
    Ok((
        best <= series && shape && fast,
        format!(
            "min text_freq {best:.4} ({best_name}) vs text_series {series:.4}; {} rows, N_opt {}; {:.0}s",
            rows.len(),
            marked.first().unwrap_or(&"none"),
            r.ablate_time.as_secs_f64()
        ),
    ))
}

fn p9(r: &Runs) -> Outcome {
    pipeline::cmd_compare(&r.cfg, &r.paths).map_err(|e| e.to_string())?;
    let c2 = read(r.paths.report("compare"))?;
    pipeline::cmd_ablate(&r.cfg, &r.paths).map_err(|e| e.to_string())?;
    let a2 = read(r.paths.report("ablate"))?;
    let (c_same, a_same) = (c2 == r.compare_json, a2 == r.ablate_json);
    Ok((
        c_same && a_same,
        format!(
            "compare rerun {} ({} bytes), ablate rerun {} ({} bytes)",
            if c_same { "identical" } else { "DIFFERS" },
            c2.len(),
            if a_same { "identical" } else { "DIFFERS" },
            a2.len()
        ),
    ))
}

fn p10(r: &Runs) -> Outcome {
    let stack = pipeline::load_stage1(&r.cfg, &r.paths).map_err(|e| e.to_string())?;
    let split = pipeline::task_split(&r.cfg, &r.paths).map_err(|e| e.to_string())?;
    let fcfg = r.cfg.forecast();
    let model = fusion::init_stage2(
        &fcfg,
        &r.cfg.fusion(FusionMode::Text2Freq),
        Some(&stack),
        r.cfg.embed_dim,
        r.cfg.seed,
    )
    .map_err(|e| e.to_string())?;
    let (t2f, _) = model.evaluate(&split.val).map_err(|e| e.to_string())?;
    let base: Vec<PreparedInstance> = split.val.iter().map(|s| s.base.clone()).collect();
    let (uni, _) = Forecaster::new(fcfg, r.cfg.seed)
        .and_then(|f| f.evaluate(&base))
        .map_err(|e| e.to_string())?;
    let diff = (t2f - uni).abs();
    Ok((
        diff <= 1e-12,
        format!("val MSE {t2f:.6} vs {uni:.6}, |diff| {diff:.1e}"),
    ))
}

// ---------------------------------------------------------------------------

fn timed(
    id: &'static str,
    title: &'static str,
    f: impl FnOnce() -> Outcome,
    limit: Option<Duration>,
) -> Line {
    let t0 = Instant::now();
    let out = f();
    let elapsed = t0.elapsed();
    let (mut pass, mut detail) = match out {
        Ok(x) => x,
        Err(e) => (false, format!("error: {e}")),
    };
    if let Some(l) = limit {
        if elapsed > l {
            pass = false;
            detail.push_str(&format!("; over the {}s budget", l.as_secs()));
        }
    }
    let line = Line {
        id,
        title,
        pass,
        detail,
        elapsed,
    };
    print_line(&line);
    line
}

fn print_line(l: &Line) {
    println!(
        "{} {:<4} {:<26} {:>7.1}s  {}",
        if l.pass { "PASS" } else { "FAIL" },
        l.id,
        l.title,
        l.elapsed.as_secs_f64(),
        l.detail
    );
}

fn main() {
    let keep = std::env::var_os("T2F_ACCEPT_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    println!("acceptance criteria (artifacts under {})", root.display());
    let mut lines = vec![
        timed("P1", "DFT correctness", p1, Some(Duration::from_secs(1))),
        timed(
            "P2",
            "projection monotonicity",
            p2,
            Some(Duration::from_secs(1)),
        ),
        timed(
            "P3",
            "autodiff vs finite diff",
            p3,
            Some(Duration::from_secs(30)),
        ),
        timed("P4", "VAE capacity", p4, Some(Duration::from_secs(60))),
    ];
    let t0 = Instant::now();
    match setup(&root) {
        Ok(runs) => {
            println!(
                "     pipeline runs finished in {:.0}s",
                t0.elapsed().as_secs_f64()
            );
            lines.push(timed("P5", "band-limit invariant", || p5(&runs), None));
            lines.push(timed("P6", "frozen Stage-1", || p6(&runs), None));
            lines.push(timed("P7", "directional comparison", || p7(&runs), None));
            lines.push(timed("P8", "directional ablation", || p8(&runs), None));
            lines.push(timed("P9", "determinism", || p9(&runs), None));
            lines.push(timed("P10", "residual identity", || p10(&runs), None));
        }
        Err(e) => {
            for (id, title) in [
                ("P5", "band-limit invariant"),
                ("P6", "frozen Stage-1"),
                ("P7", "directional comparison"),
                ("P8", "directional ablation"),
                ("P9", "determinism"),
                ("P10", "residual identity"),
            ] {
                let l = Line {
                    id,
                    title,
                    pass: false,
                    detail: format!("pipeline failed: {e}"),
                    elapsed: Duration::ZERO,
                };
                print_line(&l);
                lines.push(l);
            }
        }
    }
    let passed = lines.iter().filter(|l| l.pass).count();
    println!("{passed}/{} criteria pass", lines.len());
    if std::env::var_os("T2F_ACCEPT_STRICT").is_some() && passed < lines.len() {
        std::process::exit(1);
    }
}
