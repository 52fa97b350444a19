//! `tada`: verification suites, cost reports and the synthetic demo.
//!
//! Exit status is 0 when every check passes, 1 when a check fails or
//! training diverges, and 2 on malformed input.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tada_core::cost::{Convention, OpCostQuery, OpKind};
use tada_core::harness::{
    cmd_cost, cmd_demo_synthetic, cmd_equivalence, cmd_gradcheck, demo_settings_from_config, op_cost_report, DemoModel,
    DemoResult, KeyValueConfig, SuiteResult, SyntheticTaskSpec, TrainConfig,
};
use tada_core::{DType, Error, Scalar};

#[derive(Debug, Parser)]
#[command(name = "tada", version, about = "Temporally-adaptive convolution checks and cost reports")]
struct Cli {
    /// Base seed; every case derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Scalar type for numeric suites.
    #[arg(long, global = true, default_value = "f64")]
    dtype: DType,
    /// Number of randomized cases (demo: number of consecutive seeds).
    #[arg(long, global = true)]
    cases: Option<usize>,
    /// Write a comma-separated report here.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Temporal convolution rewritten as calibrated spatial kernels, plus
    /// identity-init and materialized-kernel checks.
    Equivalence {
        /// Corrupt one temporal weight on one side; the suite must then fail.
        #[arg(long)]
        fault_injection: bool,
    },
    /// Finite-difference gradient check over the op zoo and the full block (f64 only).
    Gradcheck,
    /// FLOPs and parameters of a preset, a config file, or a single operator (`op`).
    Cost(CostArgs),
    /// Train a small network on the ramp-direction task.
    Demo {
        #[arg(long, default_value = "tada")]
        model: DemoModel,
        /// `key = value` file overriding task and optimiser settings; must set `seed`.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct CostArgs {
    /// Preset name, config file path, or `op`.
    target: String,
    #[arg(long, default_value = "table1")]
    convention: Convention,
    /// Baseline preset or file to report deltas against.
    #[arg(long)]
    compare: Option<String>,
    #[arg(long)]
    kind: Option<OpKind>,
    #[arg(long)]
    ci: Option<usize>,
    #[arg(long)]
    co: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    kt: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
}

impl CostArgs {
    fn query(&self) -> Result<OpCostQuery, Error> {
        let need = |v: Option<usize>, name: &str| v.ok_or_else(|| Error::Query(format!("`cost op` needs --{name}")));
        Ok(OpCostQuery {
            kind: self.kind.ok_or_else(|| Error::Query("`cost op` needs --kind".into()))?,
            ci: need(self.ci, "ci")?,
            co: need(self.co, "co")?,
            k: self.k,
            kt: self.kt,
            t: need(self.t, "t")?,
            h: need(self.h, "h")?,
            w: need(self.w, "w")?,
            r: self.r,
            convention: self.convention,
        })
    }
}

fn write_out(path: Option<&Path>, csv: &str) -> anyhow::Result<()> {
    if let Some(p) = path {
        std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn suite_csv(r: &SuiteResult) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["suite", "cases", "failures", "metric", "worst", "tolerance"])?;
    w.write_record([
        r.name.clone(),
        r.cases.to_string(),
        r.failures.to_string(),
        r.metric.to_string(),
        format!("{:e}", r.worst),
        format!("{:e}", r.tolerance),
    ])?;
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn demo_csv(runs: &[(u64, DemoResult)]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "model", "epoch", "loss", "train_accuracy", "test_accuracy", "reversed_accuracy"])?;
    for (seed, r) in runs {
        for e in &r.curve {
            w.write_record([
                seed.to_string(),
                r.model.name().to_string(),
                e.epoch.to_string(),
                format!("{:.9e}", e.loss),
                format!("{:.6}", e.train_accuracy),
                format!("{:.6}", r.test_accuracy),
                format!("{:.6}", r.reversed_accuracy),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn run_suite(cli: &Cli, result: SuiteResult) -> anyhow::Result<bool> {
    println!("{result}");
    write_out(cli.out.as_deref(), &suite_csv(&result)?)?;
    Ok(result.passed())
}

fn demo<S: Scalar>(task: &SyntheticTaskSpec, model: DemoModel, train: &TrainConfig, seeds: usize) -> Result<Vec<(u64, DemoResult)>, Error> {
    (0..seeds as u64)
        .map(|i| {
            let task = SyntheticTaskSpec { seed: task.seed + i, ..task.clone() };
            cmd_demo_synthetic::<S>(&task, model, train).map(|r| (task.seed, r))
        })
        .collect()
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::Equivalence { fault_injection } => {
            let cases = cli.cases.unwrap_or(100);
            let r = match cli.dtype {
                DType::F32 => cmd_equivalence::<f32>(cli.seed, cases, *fault_injection)?,
                DType::F64 => cmd_equivalence::<f64>(cli.seed, cases, *fault_injection)?,
            };
            run_suite(cli, r)
        }
        Command::Gradcheck => {
            if cli.dtype != DType::F64 {
                return Err(Error::Usage("gradcheck runs in f64 only".into()).into());
            }
            run_suite(cli, cmd_gradcheck(cli.seed, cli.cases.unwrap_or(50))?)
        }
        Command::Cost(args) => {
            let (report, delta) = if args.target == "op" {
                (op_cost_report(&args.query()?)?, None)
            } else {
                let o = cmd_cost(&args.target, args.convention, args.compare.as_deref())?;
                (o.report, o.delta)
            };
            print!("{report}");
            if let Some(d) = &delta {
                print!("{d}");
            }
            write_out(cli.out.as_deref(), &report.to_csv()?)?;
            Ok(true)
        }
        Command::Demo { model, config } => {
            let (task, train) = match config {
                Some(p) => demo_settings_from_config(&KeyValueConfig::load(p)?)?,
                None => (SyntheticTaskSpec { seed: cli.seed, ..Default::default() }, TrainConfig::default()),
            };
            let seeds = cli.cases.unwrap_or(1);
            if seeds == 0 {
                return Err(Error::Usage("--cases must be at least 1".into()).into());
            }
            let runs = match cli.dtype {
                DType::F32 => demo::<f32>(&task, *model, &train, seeds)?,
                DType::F64 => demo::<f64>(&task, *model, &train, seeds)?,
            };
            let mut ok = true;
            for (seed, r) in &runs {
                let last = r.curve.last().expect("at least one epoch");
                let verdict = match model.expectation() {
                    Some(e) => format!(", expected {e}: {}", if r.meets_expectation() { "PASS" } else { "FAIL" }),
                    None => String::new(),
                };
                println!(
                    "demo {} seed {seed}: {} epochs, loss {:.4}, train acc {:.4}, test acc {:.4}, reversed acc {:.4}{verdict}",
                    model.name(),
                    r.curve.len(),
                    last.loss,
                    last.train_accuracy,
                    r.test_accuracy,
                    r.reversed_accuracy,
                );
                ok &= r.meets_expectation();
            }
            write_out(cli.out.as_deref(), &demo_csv(&runs)?)?;
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Usage(_) | Error::Query(_) | Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
