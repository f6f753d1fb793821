use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use magflow::config::RunConfig;
use magflow::model::Ablation;
use magflow::pipeline;
use magflow::Error;

#[derive(Parser, Debug)]
#[command(name = "magflow", version, about = "Direction-aware next-POI recommendation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the graph, direction basis and phase-token bank caches.
    Precompute(Common),
    /// Train a model variant on the training split.
    Train(Common),
    /// Evaluate a variant on the test split, overall and by asymmetry tertile.
    Eval(Common),
    /// Time inference over the configured sequence lengths.
    Bench(Common),
    /// Write a synthetic commuting corpus to the configured data path.
    Generate(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set q=0.15`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Model variant: none, no_phase, no_tc or real_mamba.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Worker threads for the parallel stages.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> magflow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        if let Some(a) = self.ablation {
            cfg.ablation = a;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 2,
        Error::Parse { .. } | Error::Invalid(_) | Error::Cache { .. } | Error::HashMismatch { .. } => 3,
        Error::NoConvergence { .. } | Error::Numerical { .. } => 4,
    }
}

fn run(cli: Cli) -> magflow::Result<()> {
    let (name, common) = match &cli.command {
        Command::Precompute(c) => ("precompute", c),
        Command::Train(c) => ("train", c),
        Command::Eval(c) => ("eval", c),
        Command::Bench(c) => ("bench", c),
        Command::Generate(c) => ("generate", c),
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(format!("--threads {n}: {e}")))?;
    }
    let cfg = common.load()?;
    log::debug!("{name} with\n{}", cfg.to_text());
    match cli.command {
        Command::Precompute(_) => {
            let r = pipeline::cmd_precompute(&cfg, cfg.ablation)?;
            print!("{}", r.summary());
            for b in &r.banks {
                println!("bank {}", b.display());
            }
        }
        Command::Train(_) => {
            let out = pipeline::cmd_train(&cfg, cfg.ablation)?;
            for e in &out.report.epochs {
                let v = e.val_mrr.map(|v| format!("  val MRR {v:.4}")).unwrap_or_default();
                println!("epoch {:>3}  loss {:.4}{v}", e.epoch, e.mean_loss);
            }
            if let Some(b) = out.report.best_epoch {
                println!("best epoch {b}");
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Eval(_) => {
            let out = pipeline::cmd_eval(&cfg, cfg.ablation)?;
            print!("{}", out.report.to_flat());
            println!("metrics {}", out.metrics.display());
        }
        Command::Bench(_) => {
            let rows = pipeline::cmd_bench(&cfg)?;
            print!("{}", magflow::train::bench::bench_csv(&rows));
        }
        Command::Generate(_) => {
            let n = pipeline::cmd_generate(&cfg)?;
            println!("wrote {n} check-ins to {}", cfg.data.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = format!("{:?}", cli.command).split('(').next().unwrap_or("").to_lowercase();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("magflow {name}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
