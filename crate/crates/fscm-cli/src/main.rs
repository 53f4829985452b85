//! `fscm` — pipeline driver: simulate sessions, train click models,
//! evaluate, predict and inspect page DAGs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal
//! invariant violation.

mod config;
mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use fscm_core::checkpoint;
use fscm_core::data::{read_sessions, write_sessions, Session};
use fscm_core::metrics;
use fscm_core::model::{AblationFlags, ComparisonKind, ModelKind};
use fscm_core::numkit::Tape;
use fscm_core::page_dag::{PageDag, PageLayout};
use fscm_core::simulator::simulate_dataset;
use fscm_core::trainer::{self, TrainError};

use config::FileConfig;
use manifest::ManifestBuilder;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "fscm",
    version,
    about = "Click models for multi-block mobile pages: simulate, train, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sessions with the browsing simulator.
    Simulate(SimulateArgs),
    /// Train a click model on a session log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a session log (LL and AUC per orientation).
    Eval(EvalArgs),
    /// Print per-item click probabilities for a session file.
    Predict(PredictArgs),
    /// Show the examination DAG of a page layout.
    InspectDag(InspectArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of sessions to generate.
    #[arg(long)]
    sessions: usize,
    /// Master seed; each session derives its own stream.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    /// TOML config with a [simulator] section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineOpt {
    BlockWise,
    ListWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblationOpt {
    NoComparison,
    NoSkipEdges,
    ShareHv,
    ShareTm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ComparisonOpt {
    Inner,
    Neural,
    Kernel,
}

impl From<ComparisonOpt> for ComparisonKind {
    fn from(c: ComparisonOpt) -> ComparisonKind {
        match c {
            ComparisonOpt::Inner => ComparisonKind::Inner,
            ComparisonOpt::Neural => ComparisonKind::Neural,
            ComparisonOpt::Kernel => ComparisonKind::Kernel,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training sessions (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Validation sessions; defaults to splitting off the tail of --data.
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Fraction of --data held out when --val-data is absent.
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Checkpoint output path.
    #[arg(long)]
    model_out: PathBuf,
    /// Training log (JSONL); defaults to <model-out>.log.jsonl.
    #[arg(long)]
    log: Option<PathBuf>,
    /// TOML config with [model] and [train] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train a single-list GRU baseline instead of the full model.
    #[arg(long, value_enum)]
    baseline: Option<BaselineOpt>,
    /// Component ablations (repeatable).
    #[arg(long, value_enum)]
    ablation: Vec<AblationOpt>,
    /// Comparison function of the full model.
    #[arg(long, value_enum)]
    comparison: Option<ComparisonOpt>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Sessions to evaluate on (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-position CSV series for plotting here.
    #[arg(long)]
    emit_plot_data: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct PredictArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Sessions to score (JSONL).
    #[arg(long)]
    session_file: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// Layout spec: comma-separated orientation+count tokens, e.g. v6,h8,v6.
    #[arg(long)]
    layout: String,
    /// Build the DAG without block-skip edges.
    #[arg(long)]
    no_skip_edges: bool,
    /// Emit a machine-readable JSON document instead of tables.
    #[arg(long)]
    json: bool,
}

fn main() {
    let code = match std::panic::catch_unwind(run) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.code()
        }
        Err(_) => {
            eprintln!("error: internal invariant violation");
            3
        }
    };
    std::process::exit(code);
}

fn run() -> Result<(), CliError> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::InspectDag(args) => cmd_inspect(args),
    }
}

fn init_threads(threads: usize) {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .expect("thread pool initialized once");
    }
}

fn data_err(e: impl fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

/// Write to stdout, treating a closed pipe (e.g. `| head`) as success.
fn print_out(text: &str) -> Result<(), CliError> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(CliError::Data(format!("stdout: {e}"))),
    }
}

fn load_sessions(path: &Path) -> Result<Vec<Session>, CliError> {
    let sessions =
        read_sessions(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if sessions.is_empty() {
        return Err(CliError::Data(format!("{}: no sessions", path.display())));
    }
    Ok(sessions)
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    if args.sessions == 0 {
        return Err(CliError::Usage("--sessions must be at least 1".into()));
    }
    init_threads(args.threads);
    let file = FileConfig::load(args.config.as_deref())?;
    let sim = file.simulator();
    sim.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let builder = ManifestBuilder::new("simulate").seed(args.seed).config(&sim);
    let sessions = simulate_dataset(&sim, args.seed, args.sessions);
    write_sessions(&args.out, &sessions).map_err(data_err)?;
    builder.output(&args.out).write(&args.out)?;

    let clicks: usize = sessions.iter().map(|s| s.num_clicks()).sum();
    println!(
        "wrote {} sessions ({} items, {} clicks) to {}",
        sessions.len(),
        sessions.iter().map(|s| s.num_items()).sum::<usize>(),
        clicks,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    init_threads(args.threads);
    let file = FileConfig::load(args.config.as_deref())?;
    let mut model_config = file.model();
    let mut train_config = file.train();

    if args.baseline.is_some() && (!args.ablation.is_empty() || args.comparison.is_some()) {
        return Err(CliError::Usage(
            "--ablation and --comparison only apply to the full model".into(),
        ));
    }
    model_config.kind = match args.baseline {
        None => ModelKind::Fscm,
        Some(BaselineOpt::BlockWise) => ModelKind::BaselineBlockWise,
        Some(BaselineOpt::ListWise) => ModelKind::BaselineListWise,
    };
    let mut ablation = AblationFlags::none();
    for a in &args.ablation {
        match a {
            AblationOpt::NoComparison => ablation.no_comparison = true,
            AblationOpt::NoSkipEdges => ablation.no_skip_edges = true,
            AblationOpt::ShareHv => ablation.share_hv = true,
            AblationOpt::ShareTm => ablation.share_tm = true,
        }
    }
    if !args.ablation.is_empty() {
        model_config.ablation = ablation;
    }
    if let Some(c) = args.comparison {
        model_config.comparison = c.into();
    }
    if let Some(h) = args.hidden {
        model_config.hidden = h;
    }
    if let Some(l) = args.lambda {
        model_config.lambda = l;
    }
    if let Some(s) = args.seed {
        train_config.seed = s;
    }
    if let Some(lr) = args.learning_rate {
        train_config.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        train_config.batch_size = b;
    }
    if let Some(m) = args.max_epochs {
        train_config.max_epochs = m;
    }
    if let Some(p) = args.patience {
        train_config.patience = p;
    }
    if !(0.0..1.0).contains(&args.val_fraction) {
        return Err(CliError::Usage("--val-fraction must be in [0, 1)".into()));
    }

    let builder = ManifestBuilder::new("train")
        .seed(train_config.seed)
        .config(serde_json::json!({ "model": &model_config, "train": &train_config }))
        .input(&args.data);

    let all = load_sessions(&args.data)?;
    let (train_data, val_data): (Vec<Session>, Vec<Session>) = match &args.val_data {
        Some(path) => (all, load_sessions(path)?),
        None => {
            let n_val = ((all.len() as f64 * args.val_fraction).round() as usize)
                .clamp(1, all.len().saturating_sub(1).max(1));
            let split = all.len() - n_val;
            let (a, b) = all.split_at(split);
            (a.to_vec(), b.to_vec())
        }
    };

    let mut model = checkpoint::build_model(model_config, train_config.seed);
    let outcome =
        trainer::train(model.as_mut(), &train_data, &val_data, &train_config).map_err(|e| {
            match e {
                TrainError::BadConfig(m) => CliError::Usage(m),
                other => CliError::Data(other.to_string()),
            }
        })?;

    checkpoint::save(&args.model_out, model.as_ref()).map_err(data_err)?;

    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut name = args.model_out.file_name().unwrap_or_default().to_os_string();
        name.push(".log.jsonl");
        args.model_out.with_file_name(name)
    });
    let mut log_text = String::new();
    for record in &outcome.log {
        log_text.push_str(&serde_json::to_string(record).expect("record serializes"));
        log_text.push('\n');
    }
    std::fs::write(&log_path, log_text).map_err(data_err)?;

    builder.output(&args.model_out).output(&log_path).write(&args.model_out)?;

    let best = &outcome.log[outcome.best_epoch];
    println!(
        "trained {} epochs; best epoch {} val_ll {:.4} val_auc {}; checkpoint {}",
        outcome.epochs_run,
        outcome.best_epoch,
        best.val_ll,
        best.val_auc.map_or("n/a".into(), |a| format!("{a:.4}")),
        args.model_out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    init_threads(args.threads);
    let model = checkpoint::load(&args.model).map_err(data_err)?;
    let sessions = load_sessions(&args.data)?;
    let report = metrics::evaluate(model.as_ref(), &sessions).map_err(data_err)?;

    print!("{}", metrics::report_table(&report));
    for (name, split) in
        [("vertical", &report.vertical), ("horizontal", &report.horizontal), ("overall", &report.overall)]
    {
        if split.items > 0 && split.auc.is_none() {
            eprintln!("warning: {name} split is single-class; AUC is undefined");
        }
    }

    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(out, text + "\n").map_err(data_err)?;
        ManifestBuilder::new("eval")
            .config(serde_json::json!({ "model": args.model.display().to_string() }))
            .input(&args.data)
            .input(&args.model)
            .output(out)
            .write(out)?;
    }
    if let Some(plot) = &args.emit_plot_data {
        let csv = metrics::plot_data_csv(model.as_ref(), &sessions).map_err(data_err)?;
        std::fs::write(plot, csv).map_err(data_err)?;
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let model = checkpoint::load(&args.model).map_err(data_err)?;
    let sessions = load_sessions(&args.session_file)?;
    let mut out = String::new();
    for session in &sessions {
        let mut tape = Tape::new(model.params());
        let fwd = model.forward(&mut tape, session).map_err(data_err)?;
        for (node, &prob) in fwd.nodes.iter().zip(&fwd.probs) {
            let p = tape.scalar_value(prob);
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                session.session_id, node.block, node.pos, p
            ));
        }
    }
    print_out(&out)
}

fn cmd_inspect(args: InspectArgs) -> Result<(), CliError> {
    let layout = PageLayout::parse(&args.layout).map_err(|e| CliError::Usage(e.to_string()))?;
    let dag = PageDag::build(&layout, !args.no_skip_edges);

    if args.json {
        let nodes: Vec<serde_json::Value> = dag
            .topo_order()
            .iter()
            .map(|&n| {
                serde_json::json!({
                    "block": n.block,
                    "pos": n.pos,
                    "class": dag.class(n).label(),
                    "indegree": dag.indegree(n),
                    "outdegree": dag.successors(n).len(),
                })
            })
            .collect();
        let edges: Vec<serde_json::Value> = dag
            .edges()
            .iter()
            .map(|e| {
                serde_json::json!({
                    "type": e.edge_type.label(),
                    "source": [e.source.block, e.source.pos],
                    "target": [e.target.block, e.target.pos],
                })
            })
            .collect();
        let doc = serde_json::json!({
            "layout": layout.spec_string(),
            "skip_edges": !args.no_skip_edges,
            "nodes": nodes,
            "edges": edges,
        });
        let mut text = serde_json::to_string_pretty(&doc).expect("doc serializes");
        text.push('\n');
        return print_out(&text);
    }

    let mut out = format!(
        "layout {}: {} nodes, {} edges (skip edges {})\n\n",
        layout.spec_string(),
        dag.num_nodes(),
        dag.edges().len(),
        if args.no_skip_edges { "off" } else { "on" }
    );
    out.push_str(&format!("{:<12} {:>8} {:>8}\n", "edge", "source", "target"));
    for e in dag.edges() {
        out.push_str(&format!(
            "{:<12} {:>8} {:>8}\n",
            e.edge_type.label(),
            e.source.to_string(),
            e.target.to_string()
        ));
    }
    out.push_str(&format!("\n{:<8} {:<18} {:>4} {:>4}\n", "node", "class", "in", "out"));
    for &n in dag.topo_order() {
        out.push_str(&format!(
            "{:<8} {:<18} {:>4} {:>4}\n",
            n.to_string(),
            dag.class(n).label(),
            dag.indegree(n),
            dag.successors(n).len()
        ));
    }
    print_out(&out)
}
