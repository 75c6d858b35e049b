use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use mles_core::eval::{self, serve, EvalError, HandleError, StubEvaluator, DEFAULT_TARGET_LEN};
use mles_core::gateway::{BudgetLedger, GatewayError};
use mles_core::model::RunLedger;
use mles_core::orchestrator::{replay, Backends, Engine, RunConfig, RunError, CONFIG_FILE, LEDGER_FILE};
use mles_core::{report, TaskKind};

#[derive(Parser)]
#[command(name = "mles", version, about = "Evolve programmatic control policies with language-model operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new run and search until a budget is spent.
    Run(RunArgs),
    /// Continue a run from its latest (or a given) checkpoint.
    Resume {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Regenerate convergence, lineage and summary files from the ledger.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Score the final pool as an ensemble on test seeds.
    Ensemble {
        #[arg(long)]
        run_dir: PathBuf,
        /// Comma-separated instance seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
        seeds: Vec<u64>,
        /// Output file; defaults to ensemble.json in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the evaluator protocol on stdin/stdout.
    Evaluator {
        /// Serve the deterministic stub instead of a simulator.
        #[arg(long, required = true)]
        stub: bool,
        #[arg(long, default_value_t = DEFAULT_TARGET_LEN)]
        target_len: usize,
        #[arg(long)]
        no_ensemble: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// run.toml to start from; otherwise defaults for `--task`.
    #[arg(long, conflicts_with = "task")]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    queries: Option<u64>,
    #[arg(long)]
    resets: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use the deterministic offline chat backend.
    #[arg(long)]
    stub_llm: bool,
    /// Use the in-process stub evaluator.
    #[arg(long)]
    stub_eval: bool,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = exit_code(&error);
        Failure { code, error }
    }
}

fn exit_code(error: &anyhow::Error) -> u8 {
    if let Some(e) = error.downcast_ref::<RunError>() {
        return match e {
            RunError::Config(_) | RunError::Gateway(_) => 2,
            RunError::BudgetExhausted(_) => 3,
            RunError::EvaluatorUnavailable(_) => 4,
            _ => 1,
        };
    }
    if error.downcast_ref::<GatewayError>().is_some() {
        return 2;
    }
    if let Some(e) = error.downcast_ref::<EvalError>() {
        return match e {
            EvalError::BudgetExhausted(_) => 3,
            EvalError::Unsupported(_) | EvalError::Unavailable(_) => 4,
            _ => 1,
        };
    }
    if error.downcast_ref::<HandleError>().is_some() {
        return 4;
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Resume { run_dir, checkpoint } => resume(&run_dir, checkpoint.as_deref()),
        Command::Report { run_dir } => write_reports(&run_dir),
        Command::Ensemble { run_dir, seeds, out } => ensemble(&run_dir, &seeds, out),
        Command::Evaluator {
            target_len,
            no_ensemble,
            ..
        } => evaluator(target_len, no_ensemble),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(&f.error));
            ExitCode::from(f.code)
        }
    }
}

/// The error chain, dropping causes the outer message already quotes.
fn describe(error: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in error.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let mut config = match (&args.config, args.task) {
        (Some(path), _) => RunConfig::load(path).map_err(RunError::from)?,
        (None, Some(task)) => RunConfig::new(task),
        (None, None) => return Err(Failure::from(anyhow!("either --config or --task is required")).with_code(2)),
    };
    if let Some(q) = args.queries {
        config.budgets.queries = q;
    }
    if args.resets.is_some() {
        config.budgets.resets = args.resets;
    }
    if let Some(s) = args.seed {
        config.run.seed = s;
    }
    if args.stub_llm {
        config.gateway.stub = true;
    }
    if args.stub_eval {
        config.evaluator.backend = "stub".into();
    }
    let backends = Backends::standard(config.pool.parents);
    let mut engine = Engine::create(config, &args.run_dir, backends)?;
    engine.initialize_population()?;
    search(&mut engine)
}

fn resume(run_dir: &Path, checkpoint: Option<&Path>) -> Result<(), Failure> {
    let config = RunConfig::load(&run_dir.join(CONFIG_FILE)).map_err(RunError::from)?;
    let mut engine = Engine::resume(run_dir, checkpoint, Backends::standard(config.pool.parents))?;
    search(&mut engine)
}

fn search(engine: &mut Engine) -> Result<(), Failure> {
    let state = engine.run_search()?.clone();
    report::write_reports(engine.run_dir(), engine.ledger())?;
    info!(
        "halted after generation {} ({:?}); queries {}/{}, resets {}/{}, best {:?}",
        state.generation,
        state.halted,
        state.budget.queries_used,
        state.budget.query_budget,
        state.budget.resets_used,
        state.budget.reset_budget,
        state.pool.best_score()
    );
    println!("{}", summary_line(engine.ledger())?);
    Ok(())
}

fn summary_line(ledger: &RunLedger) -> anyhow::Result<String> {
    let s = report::summary(ledger);
    Ok(format!(
        "generations={} queries_used={} resets_used={} seed_resets={} best_score={}",
        s.generations,
        s.queries_used,
        s.resets_used,
        s.seed_resets,
        s.best.map_or("none".to_string(), |b| b.score.to_string())
    ))
}

fn write_reports(run_dir: &Path) -> Result<(), Failure> {
    let ledger = RunLedger::load(&run_dir.join(LEDGER_FILE)).map_err(RunError::from)?;
    report::write_reports(run_dir, &ledger).context("writing reports")?;
    println!("{}", summary_line(&ledger)?);
    Ok(())
}

fn ensemble(run_dir: &Path, seeds: &[u64], out: Option<PathBuf>) -> Result<(), Failure> {
    let config = RunConfig::load(&run_dir.join(CONFIG_FILE)).map_err(RunError::from)?;
    let ledger = RunLedger::load(&run_dir.join(LEDGER_FILE)).map_err(RunError::from)?;
    let state = replay(&ledger, &config).map_err(RunError::from)?;
    let codes: Vec<String> = state.pool.members().iter().map(|m| m.code.clone()).collect();
    if codes.is_empty() {
        return Err(Failure::from(anyhow!("the run has an empty pool")));
    }
    let mut handle = Backends::standard(config.pool.parents).evaluators.open(&config.evaluator)?;
    // Test-time evaluation sits outside the search budget.
    let budget = BudgetLedger::new(0, u64::MAX);
    let result = eval::ensemble_evaluate(
        handle.as_mut(),
        config.task_kind(),
        codes,
        seeds,
        config.evaluator.limits(),
        &budget,
    );
    handle.shutdown();
    let scores = result?;
    let out = out.unwrap_or_else(|| run_dir.join("ensemble.json"));
    let mut json = serde_json::to_string_pretty(&scores).context("serializing scores")?;
    json.push('\n');
    std::fs::write(&out, json).with_context(|| format!("writing {}", out.display()))?;
    println!("policies={} mean={}", scores.policies, scores.mean);
    Ok(())
}

fn evaluator(target_len: usize, no_ensemble: bool) -> Result<(), Failure> {
    let mut server = StubEvaluator::new(target_len);
    if no_ensemble {
        server = server.without_ensemble();
    }
    serve(&mut server, BufReader::new(io::stdin().lock()), io::stdout().lock())?;
    Ok(())
}

impl Failure {
    fn with_code(mut self, code: u8) -> Self {
        self.code = code;
        self
    }
}
