use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use des_core::bench::{bench_comm, BenchConfig};
use des_core::config::{DataSource, RunConfig};
use des_core::cost::{reference_report, report_json, write_report_tsv, CommRow, CostInputs};
use des_core::error::DesError;
use des_core::exec::ExecMode;
use des_core::model::ops::fm2_combine;
use des_core::model::ModelKind;
use des_core::train::{train, write_outputs};
use des_core::verify::{run_all, VerifyConfig};

#[derive(Parser)]
#[command(name = "des", version, about = "Sharded training of sparse CTR models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and report held-out AUC and logloss per epoch.
    Train(TrainArgs),
    /// Run equivalence, identity, gradient and traffic checks.
    Verify(VerifyArgs),
    /// Measure per-worker traffic of one step per batch size.
    BenchComm(CommArgs),
    /// Print the analytic traffic report.
    Report(CommArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// A Criteo TSV file, or `synthetic`.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Restrict to one model.
    #[arg(long)]
    model: Option<ModelKind>,
    /// Restrict to one worker count.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct CommArgs {
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Restrict to one batch size of the reference workload.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exec(sequential: bool) -> ExecMode {
    if sequential {
        ExecMode::Sequential
    } else {
        ExecMode::default()
    }
}

fn run_train(a: TrainArgs) -> Result<bool> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(m) = a.model {
        cfg.model = m;
    }
    if let Some(n) = a.workers {
        cfg.workers = n;
    }
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.out.is_some() {
        cfg.out_dir = a.out.clone();
    }
    if a.sequential {
        cfg.exec = ExecMode::Sequential;
    }
    match a.data.as_deref() {
        None => {}
        Some("synthetic") => {
            if !matches!(cfg.data, DataSource::Synthetic { .. }) {
                cfg.data = DataSource::default();
            }
        }
        Some(path) => {
            cfg.data = DataSource::Criteo {
                path: path.into(),
                max_lines: None,
                hash_seed: 0,
            }
        }
    }
    cfg.validate()?;
    let outcome = train(&cfg)?;
    println!("step\tepoch\tauc\tlogloss\tfwd_bytes\tbwd_bytes\twall_ms");
    for m in &outcome.metrics {
        println!(
            "{}\t{}\t{:.6}\t{:.6}\t{}\t{}\t{:.1}",
            m.step, m.epoch, m.auc, m.logloss, m.fwd_bytes, m.bwd_bytes, m.wall_ms
        );
    }
    if let Some(dir) = &cfg.out_dir {
        let files = write_outputs(&cfg, &outcome, dir)?;
        eprintln!("wrote {} files to {}", files.len(), dir.display());
    }
    Ok(true)
}

fn run_verify(a: VerifyArgs) -> Result<bool> {
    let mut cfg = VerifyConfig {
        trials: a.trials,
        gradient_trials: a.trials.clamp(1, 50),
        fm_trials: a.trials * 10,
        seed: a.seed,
        exec: exec(a.sequential),
        ..VerifyConfig::default()
    };
    if let Some(m) = a.model {
        cfg.kinds = vec![m];
    }
    if let Some(n) = a.workers {
        if n == 0 {
            return Err(DesError::Config("workers must be at least 1".into()).into());
        }
        cfg.workers = vec![n];
    }
    let outcomes = run_all(&cfg, fm2_combine)?;
    let mut ok = true;
    for o in &outcomes {
        let status = if o.passed() { "pass" } else { "FAIL" };
        println!("{status}\t{}\tcases={}\tskipped={}\tmax_error={:.3e}", o.name, o.cases, o.skipped, o.max_error);
        for f in &o.failures {
            println!("\t{f}");
        }
        ok &= o.passed();
    }
    Ok(ok)
}

fn comm_config(a: &CommArgs) -> BenchConfig {
    let mut cfg = BenchConfig {
        template: CostInputs::new(a.workers, 1, 1),
        seed: a.seed,
        ..BenchConfig::default()
    };
    if let Some(b) = a.batch {
        cfg.cells.retain(|&(x, _)| x == b);
    }
    cfg
}

fn emit(rows: &[CommRow], out: Option<&Path>) -> Result<()> {
    write_report_tsv(rows, std::io::stdout().lock())?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_report_tsv(rows, std::fs::File::create(dir.join("comm.tsv"))?)?;
        std::fs::write(dir.join("comm.json"), serde_json::to_string_pretty(&report_json(rows))?)?;
    }
    Ok(())
}

fn run_bench(a: CommArgs) -> Result<bool> {
    let cfg = comm_config(&a);
    if cfg.cells.is_empty() {
        return Err(DesError::Config("batch size not in the reference workload".into()).into());
    }
    let rows = bench_comm(&cfg)?;
    emit(&rows, a.out.as_deref())?;
    Ok(rows.iter().all(|r| r.measured == Some(r.q_des)))
}

fn run_report(a: CommArgs) -> Result<bool> {
    let cfg = comm_config(&a);
    let mut rows = reference_report(a.workers, &cfg.template)?;
    rows.retain(|r| cfg.cells.iter().any(|&(b, _)| b == r.batch));
    emit(&rows, a.out.as_deref())?;
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Verify(a) => run_verify(a),
        Command::BenchComm(a) => run_bench(a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(
                e.downcast_ref::<DesError>(),
                Some(DesError::Config(_) | DesError::UndefinedRatio)
            );
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
