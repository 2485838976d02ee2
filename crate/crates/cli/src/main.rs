use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dyskernel::commands;
use dyskernel::config::{RunConfig, Task, SEED_ENV};

/// Dynamic deformable kernels for 2-D image registration.
///
/// Every config key can be given as a flag: `--steps 50`, `--window=cross5`.
#[derive(Parser, Debug)]
#[command(name = "dyskernel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Config overrides as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint plus a step log.
    Train(Common),
    /// Register one pair with a trained checkpoint.
    Register(Common),
    /// Score a checkpoint on labelled pairs.
    Eval(Common),
    /// Finite-difference check of every op and of the full loss.
    Gradcheck(Common),
    /// Registration vs segmentation configuration counts over N.
    AnalyzeComplexity(Common),
    /// Cost and timing across window sizes.
    Bench(Common),
    /// Write synthetic pairs as PGM files.
    Synth(Common),
    /// Print the effective configuration.
    ShowConfig(Common),
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            bail!("unexpected argument '{arg}' (expected --key value)");
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().with_context(|| format!("flag --{flag} needs a value"))?;
                (flag.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

fn resolve(task: Task, common: &Common) -> Result<RunConfig> {
    let flags = parse_overrides(&common.overrides)?;
    let env_seed = std::env::var(SEED_ENV).ok();
    Ok(RunConfig::resolve(task, common.config.as_deref(), env_seed.as_deref(), &flags)?)
}

/// Outcome of a subcommand that ran but did not succeed.
#[derive(Debug)]
struct Failed(String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = resolve(Task::Train, &c)?;
            let out = commands::cmd_train(&cfg)?;
            if let (Some(first), Some(last)) = (out.steps.first(), out.steps.last()) {
                println!("loss {:.6} -> {:.6} over {} steps", first.loss, last.loss, out.steps.len());
            }
            println!("checkpoint {}", out.checkpoint.display());
            println!("log {}", out.log.display());
        }
        Command::Register(c) => {
            let cfg = resolve(Task::Register, &c)?;
            let out = commands::cmd_register(&cfg)?;
            println!(
                "phi_a2b max |d| {:.4}, phi_b2a max |d| {:.4}",
                out.phi_a2b.max_abs(),
                out.phi_b2a.max_abs()
            );
            println!("wrote {}", out.container.display());
        }
        Command::Eval(c) => {
            let cfg = resolve(Task::Eval, &c)?;
            let summary = commands::cmd_eval(&cfg)?;
            print!("{}", summary.report());
            println!("csv {}", cfg.output_dir.join(commands::EVAL_CSV).display());
        }
        Command::Gradcheck(c) => {
            let cfg = resolve(Task::Gradcheck, &c)?;
            let report = commands::cmd_gradcheck(&cfg)?;
            print!("{report}");
            if !report.passed() {
                let names: Vec<&str> = report.failures().map(|e| e.name.as_str()).collect();
                return Err(Failed(format!("gradient check failed for: {}", names.join(", "))).into());
            }
            println!("all gradient checks passed");
        }
        Command::AnalyzeComplexity(c) => {
            let cfg = resolve(Task::AnalyzeComplexity, &c)?;
            let out = commands::cmd_analyze_complexity(&cfg)?;
            commands::write_sweep_csv(std::io::stdout().lock(), &out.rows)?;
            println!("# crossover N* = {} (alpha {}, L {}, {})", out.crossover, cfg.alpha, cfg.labels, cfg.form);
        }
        Command::Bench(c) => {
            let cfg = resolve(Task::Bench, &c)?;
            let rows = commands::cmd_bench(&cfg)?;
            println!("k,|U|,flops,params,wall_ms");
            for r in rows {
                println!("{},{},{},{},{:.3}", r.k, r.taps, r.flops, r.params, r.wall_ms);
            }
        }
        Command::Synth(c) => {
            let cfg = resolve(Task::Synth, &c)?;
            let files = commands::cmd_synth(&cfg)?;
            println!("wrote {} files", files.len());
        }
        Command::ShowConfig(c) => {
            let flags = parse_overrides(&c.overrides)?;
            let mut cfg = RunConfig::default();
            if let Some(path) = &c.config {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                cfg.apply_text(&text)?;
            }
            if let Ok(seed) = std::env::var(SEED_ENV) {
                cfg.set("seed", &seed)?;
            }
            for (k, v) in &flags {
                cfg.set(k, v)?;
            }
            print!("{}", cfg.emit());
        }
    }
    Ok(())
}

/// 1 for bad input or configuration, 2 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<dyskernel::Error>() {
        return if e.is_validation() { 1 } else { 2 };
    }
    if err.is::<Failed>() {
        return 2;
    }
    // argument parsing problems
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
