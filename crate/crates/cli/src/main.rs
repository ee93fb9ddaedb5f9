use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fusecal_core::config::RunConfig;
use fusecal_core::pipeline::{run_eval, run_generate, run_train, run_two_step, TrainSummary};
use fusecal_core::{Error, ErrorClass};

#[derive(Parser, Debug)]
#[command(name = "fusecal", version, about = "Multi-fidelity emulation and calibration runs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random substream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "FUSECAL_OUT")]
    out: Option<PathBuf>,
    /// Analytic sources to include, e.g. `s0,s2`.
    #[arg(long, global = true)]
    sources: Option<String>,
    /// Training epochs (all stages for two-step).
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Dot-path config override `key=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write analytic train/validation/test files and a manifest.
    Generate {
        /// Replace existing data files.
        #[arg(long)]
        force: bool,
    },
    /// Train from a fresh initialization.
    Train,
    /// Evaluate a checkpoint on the test set.
    Eval {
        /// Also run the exhaustive θ reference search.
        #[arg(long)]
        oracle: bool,
        /// Also export latent coordinates.
        #[arg(long)]
        latents: bool,
    },
    /// Run the configured calibration stages in sequence.
    TwoStep,
}

fn parse_sources(list: &str) -> Result<String, Error> {
    let ids = list
        .split(',')
        .map(|s| {
            let s = s.trim();
            s.strip_prefix('s')
                .unwrap_or(s)
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad source `{s}` in --sources")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<String> = ids.iter().map(usize::to_string).collect();
    Ok(format!("analytic.sources=[{}]", ids.join(", ")))
}

fn resolve(common: &Common, command: &Command) -> Result<RunConfig, Error> {
    let mut ov = common.set.clone();
    if let Some(seed) = common.seed {
        ov.push(format!("seed={seed}"));
    }
    if let Some(out) = &common.out {
        let out = out.to_str().ok_or_else(|| Error::Config("--out is not valid UTF-8".into()))?;
        ov.push(format!("paths.out_dir={}", toml_string(out)));
    }
    if let Some(list) = &common.sources {
        ov.push(parse_sources(list)?);
    }
    if let Command::Eval { oracle, latents } = command {
        if *oracle {
            ov.push("eval.oracle=true".into());
        }
        if *latents {
            ov.push("eval.latents=true".into());
        }
    }
    let mut cfg = RunConfig::load(common.config.as_deref(), &ov)?;
    if let Some(epochs) = common.epochs {
        cfg.train.epochs = epochs;
        for s in &mut cfg.steps {
            s.train.epochs = epochs;
        }
        cfg.validate()?;
    }
    Ok(cfg)
}

fn toml_string(s: &str) -> String {
    let escaped = s.replace('\\', "\\\\").replace('"', "\\\"");
    format!("\"{escaped}\"")
}

fn print_train(summary: &TrainSummary, cfg: &RunConfig) {
    for (k, stage) in summary.stages.iter().enumerate() {
        let val = stage.best_val.as_ref().map_or(String::from("-"), |r| format!("{:.6}", r.total));
        println!(
            "stage {}: best epoch {}, final train loss {:.6}, best val loss {val}",
            k + 1,
            stage.best_epoch,
            stage.final_train.total
        );
    }
    println!("checkpoint: {}", cfg.paths.checkpoint_path().display());
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = resolve(&cli.common, &cli.command)?;
    match cli.command {
        Command::Generate { force } => {
            let m = run_generate(&cfg, force)?;
            for (name, f) in [("train", &m.train), ("val", &m.val), ("test", &m.test)] {
                println!("{name}: {} rows per source {:?}", f.path.display(), f.counts);
            }
        }
        Command::Train => print_train(&run_train(&cfg)?, &cfg),
        Command::TwoStep => print_train(&run_two_step(&cfg)?, &cfg),
        Command::Eval { .. } => {
            let report = run_eval(&cfg)?;
            for row in &report.rrmse {
                let vals: Vec<String> = row.rrmse.iter().map(|v| format!("{v:.4}")).collect();
                println!("rrmse {:<24} {}", row.comparison, vals.join(" "));
            }
            for p in &report.posterior {
                println!(
                    "posterior {} {}: mean {:.4} std {:.4} 95% [{:.4}, {:.4}]",
                    p.source, p.param, p.mean, p.std, p.q025, p.q975
                );
            }
            for o in report.oracle.iter().flatten() {
                println!("theta_mse {} {:?} = {:?}", o.source, o.params, o.theta_mse);
            }
            println!("report: {}", cfg.paths.eval_dir().join("report.json").display());
        }
    }
    Ok(())
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Io => 1,
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
