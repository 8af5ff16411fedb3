use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use epi_core::config::{Method, RunConfig};
use epi_core::pipeline::{experiment, Run};
use epi_core::Result;

/// Episodic curriculum training for multi-domain NMT adaptation.
///
/// Logging goes to stderr; set EPI_LOG_LEVEL to error, warn, info or debug.
#[derive(Parser, Debug)]
#[command(name = "epi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus, vocabulary and manifest.
    GenData(Common),
    /// Score seen-domain training data and write the curriculum plan.
    Score(Common),
    /// Train one method.
    Train(WithMethod),
    /// Fine-tune a trained method on every evaluation domain.
    Finetune(WithMethod),
    /// Before/After fine-tuning BLEU for one seed.
    Eval(OptionalMethod),
    /// Every method over all replicate seeds, plus swap, perturbation and
    /// divergence-bin studies. Builds missing artifacts.
    Experiment(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Build missing inputs (data, scores, checkpoints) instead of failing.
    #[arg(long)]
    build_deps: bool,
}

#[derive(Args, Debug)]
struct WithMethod {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    method: String,
}

#[derive(Args, Debug)]
struct OptionalMethod {
    #[command(flatten)]
    common: Common,
    /// Evaluate only this method; all configured methods otherwise.
    #[arg(long)]
    method: Option<String>,
}

fn load(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => {
            let cfg = load(&c)?;
            let r = Run::new(&cfg, cfg.seed, c.build_deps)?;
            r.gen_data()?;
            print_json(&serde_json::json!({ "data": r.dir().join("data") }));
        }
        Command::Score(c) => {
            let cfg = load(&c)?;
            let r = Run::new(&cfg, cfg.seed, c.build_deps)?;
            let s = r.score()?;
            print_json(&serde_json::to_value(&s.summary)?);
        }
        Command::Train(m) => {
            let method: Method = m.method.parse()?;
            let cfg = load(&m.common)?;
            let r = Run::new(&cfg, cfg.seed, m.common.build_deps)?;
            let t = r.train(method)?;
            print_json(&serde_json::json!({
                "method": method,
                "checkpoint": r.dir().join("models").join(format!("{method}.ckpt")),
                "checksum": t.model.checksum(),
            }));
        }
        Command::Finetune(m) => {
            let method: Method = m.method.parse()?;
            let cfg = load(&m.common)?;
            let r = Run::new(&cfg, cfg.seed, m.common.build_deps)?;
            let paths = r.finetune(method)?;
            print_json(&serde_json::json!({ "checkpoints": paths }));
        }
        Command::Eval(m) => {
            let cfg = load(&m.common)?;
            let methods = match &m.method {
                Some(name) => vec![name.parse()?],
                None => cfg.training.methods.clone(),
            };
            let r = Run::new(&cfg, cfg.seed, m.common.build_deps)?;
            let report = r.eval(&methods)?;
            let mut summary = serde_json::Map::new();
            for method in &methods {
                let n = method.name();
                summary.insert(
                    n.into(),
                    serde_json::json!({
                        "seen_before": report.domain_mean(n, true, |c| c.bleu_before.mean),
                        "seen_after": report.domain_mean(n, true, |c| c.bleu_after.mean),
                        "unseen_before": report.domain_mean(n, false, |c| c.bleu_before.mean),
                        "unseen_after": report.domain_mean(n, false, |c| c.bleu_after.mean),
                    }),
                );
            }
            print_json(&summary.into());
        }
        Command::Experiment(c) => {
            let cfg = load(&c)?;
            let b = experiment(&cfg)?;
            print_json(&serde_json::json!({
                "bundle": cfg.output_dir.join(&b.config_hash),
                "config_hash": b.config_hash,
                "seeds": b.seeds,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EPI_LOG_LEVEL", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("epi: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
