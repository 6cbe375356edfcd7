use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use t2f_bench::config::{default_out_dir, RunConfig};
use t2f_bench::pipeline::{self, Paths};
use t2f_bench::{BenchError, Result};
use text2freq::fusion::FusionMode;

#[derive(Parser)]
#[command(name = "t2f", about = "Text2Freq experiment harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the pretrain and task corpora
    Gen(Common),
    /// Train the frequency VAE on the pretrain corpus
    PretrainVae(Common),
    /// Train the Stage-1 text aligner at the configured n_lf
    PretrainAlign(Common),
    /// Train one Stage-2 method (--mode)
    Train(Common),
    /// Evaluate a trained Stage-2 checkpoint on the test split
    Eval(Common),
    /// Train and test all three methods on one split
    Compare(Common),
    /// Stage-1 alignment for the direct target and every n_lf
    Ablate(Common),
    /// Print the resolved configuration
    Config(Common),
}

#[derive(Args)]
struct Common {
    /// TOML file of flat `key = value` settings
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $T2F_OUT or ./t2f_out)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// text2freq | attention_fusion | unimodal
    #[arg(long)]
    mode: Option<FusionMode>,
    #[arg(long = "n-lf")]
    n_lf: Option<usize>,
    /// Task corpus (JSONL) used instead of the generated one
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// T2FE embedding file; hashed bag-of-words when omitted
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Extra overrides, `key=value` in config-file syntax
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig {
                out_dir: default_out_dir(),
                ..RunConfig::default()
            },
        };
        let mut errors = Vec::new();
        for kv in &self.set {
            let parsed = kv
                .split_once('=')
                .ok_or_else(|| format!("--set {kv}: expected KEY=VALUE"))
                .and_then(|(k, v)| {
                    let table: toml::Table = format!("{} = {}", k.trim(), v.trim())
                        .parse()
                        .map_err(|e: toml::de::Error| format!("--set {kv}: {}", e.message()))?;
                    let (k, v) = table
                        .into_iter()
                        .next()
                        .ok_or_else(|| format!("--set {kv}: empty"))?;
                    cfg.set(&k, v)
                });
            if let Err(e) = parsed {
                errors.push(e);
            }
        }
        if !errors.is_empty() {
            return Err(BenchError::Config(errors));
        }
        if let Some(v) = &self.out {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.n_lf {
            cfg.n_lf = v;
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = Some(v.clone());
        }
        if let Some(v) = &self.embeddings {
            cfg.embeddings = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let (common, cmd) = match &cli.command {
        Command::Gen(c) => (c, "gen"),
        Command::PretrainVae(c) => (c, "pretrain-vae"),
        Command::PretrainAlign(c) => (c, "pretrain-align"),
        Command::Train(c) => (c, "train"),
        Command::Eval(c) => (c, "eval"),
        Command::Compare(c) => (c, "compare"),
        Command::Ablate(c) => (c, "ablate"),
        Command::Config(c) => (c, "config"),
    };
    let cfg = common.resolve()?;
    let paths = Paths::new(&cfg.out_dir);
    if cmd != "config" && cmd != "gen" && !paths.root.is_dir() {
        return Err(BenchError::MissingArtifact {
            stage: "data generation",
            command: "gen",
            path: paths.root.clone(),
        });
    }
    match cmd {
        "config" => print!("{}", cfg.to_toml()),
        "gen" => {
            let (p, t) = pipeline::cmd_gen(&cfg, &paths)?;
            println!("pretrain corpus: {p} instances, task corpus: {t} instances");
        }
        "pretrain-vae" => {
            let rec = pipeline::cmd_pretrain_vae(&cfg, &paths)?;
            println!("VAE final reconstruction MSE {rec:.6}");
        }
        "pretrain-align" => {
            let (mse, mae) = pipeline::cmd_pretrain_align(&cfg, &paths)?;
            println!("aligner n_lf={} test MSE {mse:.4} MAE {mae:.4}", cfg.n_lf);
        }
        "train" => {
            let row = pipeline::cmd_train(&cfg, &paths)?;
            println!(
                "{} test MSE {:.4} MAE {:.4} (best epoch {})",
                row.method, row.mse, row.mae, row.best_epoch
            );
        }
        "eval" => print!("{}", pipeline::cmd_eval(&cfg, &paths)?.table()),
        "compare" => print!("{}", pipeline::cmd_compare(&cfg, &paths)?.table()),
        "ablate" => print!("{}", pipeline::cmd_ablate(&cfg, &paths)?.table()),
        _ => unreachable!(),
    }
    // the resolved config sits next to the artifacts it produced
    if cmd != "config" {
        std::fs::write(paths.root.join(format!("{cmd}.toml")), cfg.to_toml()).map_err(
            |source| BenchError::Io {
                context: "writing resolved config".into(),
                source,
            },
        )?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
