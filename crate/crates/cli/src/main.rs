//! Command-line front end: explain a pipeline on a graph, evaluate explanations,
//! generate planted benchmarks, and cross-check Shapley estimators.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gemx::bandit::BanditMode;
use gemx::dot::{to_dot, DotOptions};
use gemx::explainer::{run_explainer, ExplainerConfig, RewardKind};
use gemx::graph::{read_graph, write_graph};
use gemx::log::emit_log;
use gemx::mcts::NodeOrder;
use gemx::metrics::{fidelity_report, ground_truth_scores, FidelityReport, GroundTruthScores};
use gemx::model::{load_pipeline, save_pipeline, EvalOptions, Scorer, Task};
use gemx::record::{read_record, write_record, ExplanationRecord, InputIds};
use gemx::shapley::{build_game, exact_shapley, mc_shapley, CooperativeGame, TableGame, BLOCK_PLAYER, ENUMERATION_CAP};
use gemx::synth::{planted_instance, write_truth, MotifKind, MotifSpec, PlantedConfig};
use gemx::{ComponentKind, Error, ExplanationTriple};
use serde_json::json;

#[derive(Parser)]
#[command(name = "gemx", version, about = "Shapley-guided explanations for graph-embedding + tabular pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for the best explanation triple and write the record, log and DOT file.
    Explain(ExplainArgs),
    /// Fidelity of saved explanations, plus ground-truth agreement when a truth file is given.
    Evaluate(EvaluateArgs),
    /// Generate a planted-motif benchmark instance.
    Synth(SynthArgs),
    /// Compare exact and sampled Shapley values on a small instance.
    OracleCheck(OracleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    LargeNode,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Low2high,
    High2low,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Contextual,
    Mab,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardArg {
    Shapley,
    FidelityPlus,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    pipeline: PathBuf,
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Explanation record path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    dot: Option<PathBuf>,
    #[arg(long, default_value = "#d62728")]
    highlight_color: String,
    #[arg(long, default_value = "#dddddd")]
    base_color: String,
    /// Explain this node (node-classification pipelines only).
    #[arg(long)]
    node: Option<usize>,
    /// Add fidelity of the chosen explanation to the record.
    #[arg(long)]
    fidelity: bool,
    /// Record wall time (makes records differ between runs).
    #[arg(long)]
    wall_time: bool,
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
    #[arg(short, long)]
    quiet: bool,

    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    budget_downstream: Option<usize>,
    #[arg(long)]
    budget_nodes: Option<usize>,
    #[arg(long)]
    budget_node_features: Option<usize>,
    #[arg(long)]
    min_downstream: Option<usize>,
    #[arg(long)]
    min_nodes: Option<usize>,
    #[arg(long)]
    min_node_features: Option<usize>,
    #[arg(long)]
    total_min: Option<usize>,
    #[arg(long)]
    lambda_subgraph: Option<f64>,
    #[arg(long)]
    lambda_nodefeat: Option<f64>,
    #[arg(long)]
    permutations: Option<usize>,
    #[arg(long)]
    prior_permutations: Option<usize>,
    #[arg(long)]
    exact_max_players: Option<usize>,
    #[arg(long)]
    t_b: Option<usize>,
    #[arg(long)]
    exploration_c: Option<f64>,
    #[arg(long)]
    n_child: Option<usize>,
    #[arg(long, value_enum)]
    node_order: Option<OrderArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    bandit_mode: Option<ModeArg>,
    /// Turn on the cost-limited variant with this base cost per pull.
    #[arg(long)]
    budget_limited_c_o: Option<f64>,
    #[arg(long)]
    oracle_refit_batch: Option<usize>,
    #[arg(long)]
    oracle_ridge: Option<f64>,
    #[arg(long)]
    randomize_child_order: bool,
    #[arg(long)]
    strict_priors: bool,
    #[arg(long, value_enum)]
    reward: Option<RewardArg>,
    #[arg(long)]
    structural_removal: bool,
}

impl ExplainArgs {
    fn run_config(&self) -> Result<ExplainerConfig> {
        let mut c = match (&self.config, self.preset) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            (None, Some(Preset::LargeNode)) => ExplainerConfig::large_node_preset(),
            (None, _) => ExplainerConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag { $field = v; })*
            };
        }
        set!(
            kappa => c.kappa,
            budget_downstream => c.budgets.downstream,
            budget_nodes => c.budgets.nodes,
            budget_node_features => c.budgets.node_features,
            min_downstream => c.minima.downstream,
            min_nodes => c.minima.nodes,
            min_node_features => c.minima.node_features,
            lambda_subgraph => c.lambda_subgraph,
            lambda_nodefeat => c.lambda_nodefeat,
            permutations => c.permutations,
            exact_max_players => c.exact_max_players,
            t_b => c.t_b,
            exploration_c => c.exploration_c,
            n_child => c.n_child,
            seed => c.seed,
            oracle_refit_batch => c.oracle_refit_batch,
            oracle_ridge => c.oracle_ridge,
        );
        if self.total_min.is_some() {
            c.total_min = self.total_min;
        }
        if self.prior_permutations.is_some() {
            c.prior_permutations = self.prior_permutations;
        }
        if let Some(o) = self.node_order {
            c.node_order = match o {
                OrderArg::Low2high => NodeOrder::Low2High,
                OrderArg::High2low => NodeOrder::High2Low,
            };
        }
        if let Some(m) = self.bandit_mode {
            c.bandit_mode = match m {
                ModeArg::Contextual => BanditMode::Contextual,
                ModeArg::Mab => BanditMode::Mab,
                ModeArg::Random => BanditMode::Random,
            };
        }
        if let Some(r) = self.reward {
            c.reward = match r {
                RewardArg::Shapley => RewardKind::Shapley,
                RewardArg::FidelityPlus => RewardKind::FidelityPlus,
            };
        }
        if let Some(c_o) = self.budget_limited_c_o {
            c.budget_limited.enabled = true;
            c.budget_limited.c_o = c_o;
        }
        c.randomize_child_order |= self.randomize_child_order;
        c.strict_priors |= self.strict_priors;
        c.structural_removal |= self.structural_removal;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pipeline: PathBuf,
    /// Input graph; repeat together with --record for several samples.
    #[arg(long, required = true)]
    graph: Vec<PathBuf>,
    #[arg(long, required = true)]
    record: Vec<PathBuf>,
    /// Ground-truth sidecar (single sample only).
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MotifArg {
    House,
    Cycle,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    base_nodes: usize,
    #[arg(long, default_value_t = 2)]
    attach: usize,
    #[arg(long, value_enum, default_value = "house")]
    motif: MotifArg,
    /// Cycle length for cycle motifs.
    #[arg(long, default_value_t = 6)]
    motif_size: usize,
    #[arg(long, default_value_t = 1)]
    attachments: usize,
    #[arg(long, default_value_t = 4)]
    node_features: usize,
    #[arg(long, default_value_t = 4)]
    downstream_features: usize,
    #[arg(long, default_value_t = 0)]
    designated: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OracleArgs {
    /// Check the built-in three-player table game instead of a pipeline.
    #[arg(long, conflicts_with_all = ["graph", "pipeline"])]
    fixture: bool,
    #[arg(long, required_unless_present = "fixture")]
    graph: Option<PathBuf>,
    #[arg(long, required_unless_present = "fixture")]
    pipeline: Option<PathBuf>,
    /// Explanation whose games are checked (full input when omitted).
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    permutations: usize,
    #[arg(long, default_value_t = 40)]
    seeds: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Explain(a) => cmd_explain(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Synth(a) => cmd_synth(a),
        Command::OracleCheck(a) => cmd_oracle_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 configuration, 3 input, 4 invariant violation.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::TooManyPlayers { .. } | Error::NoActiveArms) => 2,
        Some(Error::Invariant(_)) => 4,
        Some(_) => 3,
        None => 3,
    }
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let config = args.run_config()?;
    let graph = read_graph(&args.graph)?;
    let mut pipeline = load_pipeline(&args.pipeline)?;
    if let Some(v) = args.node {
        if !matches!(pipeline.task, Task::NodeClassification { .. }) {
            return Err(Error::Config("--node needs a node-classification pipeline".into()).into());
        }
        pipeline = pipeline.with_task_node(v);
    }
    let started = Instant::now();
    let outcome = run_explainer(&pipeline, &graph, &config)?;
    let mut record = ExplanationRecord::from_outcome(
        &outcome,
        InputIds {
            graph: args.graph.display().to_string(),
            pipeline: args.pipeline.display().to_string(),
        },
        &config,
        pipeline.task_node(),
    );
    if args.fidelity {
        record.fidelity = Some(fidelity_report(&pipeline, &[(&graph, &outcome.triple)])?);
    }
    if args.wall_time {
        record.wall_time_secs = Some(started.elapsed().as_secs_f64());
    }

    let log = emit_log(&outcome.events);
    if let Some(path) = &args.log {
        write_or_print(Some(path), &log)?;
    } else if args.verbose > 1 {
        eprint!("{log}");
    }
    if let Some(path) = &args.dot {
        let opts = DotOptions {
            highlight: args.highlight_color.clone(),
            base: args.base_color.clone(),
            ..Default::default()
        };
        write_or_print(Some(path), &to_dot(&graph, &outcome.triple, &opts))?;
    }
    match &args.out {
        Some(path) => write_record(path, &record)?,
        None => print!("{}", record.to_json()?),
    }
    if !args.quiet {
        let t = &outcome.triple;
        eprintln!(
            "explanation: {} nodes, {} node features, {} downstream features; score {:.6} (best of {} rollouts)",
            t.subgraph_nodes.len(),
            t.retained_node_features.len(),
            t.retained_downstream.len(),
            outcome.score.total,
            outcome.rollouts.len()
        );
        if args.verbose > 0 {
            eprintln!(
                "model evaluations {}, explored subgraphs {}, episodes {}",
                outcome.diagnostics.model_evaluations, outcome.diagnostics.explored_subgraphs, outcome.diagnostics.episodes
            );
        }
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    if args.graph.len() != args.record.len() {
        return Err(Error::Config(format!(
            "{} graphs but {} records; pass them in matching pairs",
            args.graph.len(),
            args.record.len()
        ))
        .into());
    }
    if args.truth.is_some() && args.graph.len() != 1 {
        return Err(Error::Config("--truth applies to a single sample".into()).into());
    }
    let pipeline = load_pipeline(&args.pipeline)?;
    let graphs = args.graph.iter().map(read_graph).collect::<gemx::Result<Vec<_>>>()?;
    let records = args.record.iter().map(read_record).collect::<gemx::Result<Vec<_>>>()?;
    let samples: Vec<_> = graphs.iter().zip(&records).map(|(g, r)| (g, &r.triple)).collect();
    let fidelity: FidelityReport = fidelity_report(&pipeline, &samples)?;
    let truth: Option<GroundTruthScores> = match &args.truth {
        Some(path) => {
            let truth = gemx::synth::read_truth(path)?;
            truth.validate(&graphs[0])?;
            Some(ground_truth_scores(&records[0].triple, &truth))
        }
        None => None,
    };
    let report = json!({ "fidelity": fidelity, "ground_truth": truth });
    let text = serde_json::to_string_pretty(&report)? + "\n";
    write_or_print(args.out.as_deref(), &text)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let motif = match args.motif {
        MotifArg::House => MotifSpec::house(args.attachments),
        MotifArg::Cycle => MotifSpec::cycle(args.motif_size, args.attachments),
    };
    let config = PlantedConfig {
        base_nodes: args.base_nodes,
        attach: args.attach,
        motif,
        node_features: args.node_features,
        downstream_features: args.downstream_features,
        designated: args.designated,
        ..Default::default()
    };
    let inst = planted_instance(&config, args.seed)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::Io {
        path: args.out_dir.clone(),
        source: e,
    })?;
    write_graph(args.out_dir.join("graph.json"), &inst.graph)?;
    save_pipeline(args.out_dir.join("pipeline.json"), &inst.pipeline)?;
    write_truth(args.out_dir.join("truth.json"), &inst.truth)?;
    let kind = match motif.kind {
        MotifKind::House => "house".to_string(),
        MotifKind::Cycle => format!("cycle({})", motif.size),
    };
    eprintln!(
        "wrote {} nodes with a {kind} motif at {:?} to {}",
        inst.graph.num_nodes(),
        inst.truth.motif_nodes,
        args.out_dir.display()
    );
    Ok(())
}

struct CheckLine {
    label: String,
    players: usize,
    exact: f64,
    max_error: f64,
    max_z: f64,
    within: u64,
}

fn check_game(label: &str, game: &dyn CooperativeGame, permutations: usize, seeds: u64) -> Result<CheckLine> {
    let exact = exact_shapley(game, BLOCK_PLAYER, ENUMERATION_CAP)?.value;
    let mut line = CheckLine {
        label: label.into(),
        players: game.num_players(),
        exact,
        max_error: 0.0,
        max_z: 0.0,
        within: 0,
    };
    for seed in 0..seeds {
        let est = mc_shapley(game, BLOCK_PLAYER, permutations, seed);
        let err = (est.value - exact).abs();
        let z = if est.std_error > 0.0 {
            err / est.std_error
        } else if err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        line.max_error = line.max_error.max(err);
        line.max_z = line.max_z.max(z);
        line.within += u64::from(z <= 3.0);
    }
    Ok(line)
}

fn cmd_oracle_check(args: OracleArgs) -> Result<()> {
    if args.permutations == 0 || args.seeds == 0 {
        return Err(Error::Config("permutations and seeds must be at least 1".into()).into());
    }
    let mut lines = Vec::new();
    if args.fixture {
        // v(∅)=0, v(1)=1, v(2)=2, v(3)=0, v(12)=4, v(13)=1, v(23)=2, v(123)=5
        let game = TableGame::new(3, vec![0.0, 1.0, 2.0, 4.0, 0.0, 1.0, 2.0, 5.0])?;
        let expected = [11.0 / 6.0, 17.0 / 6.0, 1.0 / 3.0];
        for (p, want) in expected.iter().enumerate() {
            let got = exact_shapley(&game, p, ENUMERATION_CAP)?.value;
            println!("fixture player {p}: exact {got:.12} expected {want:.12}");
            if (got - want).abs() > 1e-12 {
                return Err(Error::Invariant(format!("fixture player {p} gave {got}, expected {want}")).into());
            }
        }
        lines.push(check_game("fixture", &game, args.permutations, args.seeds)?);
    } else {
        let (gp, pp) = (args.graph.as_ref().expect("required"), args.pipeline.as_ref().expect("required"));
        let graph = read_graph(gp)?;
        let pipeline = load_pipeline(pp)?;
        let scorer = Scorer::new(&pipeline, &graph, EvalOptions::default())?;
        let triple = match &args.record {
            Some(r) => read_record(r)?.triple,
            None => ExplanationTriple::full(&graph),
        };
        for kind in ComponentKind::ALL {
            let game = build_game(&scorer, &triple, kind)?;
            lines.push(check_game(kind.label(), &game, args.permutations, args.seeds)?);
        }
    }
    let mut failed = false;
    for l in &lines {
        println!(
            "game {}: {} players, exact {:.9}, max |error| {:.3e}, max |z| {:.2}, within 3 se {}/{}",
            l.label, l.players, l.exact, l.max_error, l.max_z, l.within, args.seeds
        );
        failed |= (l.within as f64) < 0.95 * args.seeds as f64;
    }
    if failed {
        return Err(Error::Invariant("sampled estimates fell outside 3 standard errors too often".into()).into());
    }
    Ok(())
}
