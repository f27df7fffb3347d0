// SPDX-License-Identifier: MIT OR Apache-2.0

//! `moelab`: generate facts, plant them into a small MoE transformer, and
//! run attribution and intervention experiments on it.
//!
//! Exit codes: 0 success, 2 usage, 3 capacity/planting, 4 empty routing,
//! 5 numeric failure.

mod addr;
mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::json;

use addr::{ExpertArg, HeadArg};
use commands::UsageError;

#[derive(Parser, Debug)]
#[command(name = "moelab", version, about = "Planted-knowledge experiments on a small mixture-of-experts transformer")]
struct Cli {
    /// Print a JSON description of every command and flag, then exit
    #[arg(long, global = true)]
    help_json: bool,

    /// Record wall-clock duration in the run manifest
    #[arg(long, global = true)]
    timing: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a relational fact dataset
    GenData(GenDataArgs),
    /// Plant the dataset's facts into a model
    Plant(PlantArgs),
    /// Evaluate HIT@10 and MRR, optionally under interventions
    Eval(EvalArgs),
    /// Rank neurons for one relation by logit-lens importance
    Attribute(AttributeArgs),
    /// Block the most important experts and re-evaluate
    Ablate(AblateArgs),
    /// Head suppression, expert forcing and integrated gradients
    Causal(CausalArgs),
    /// Write table1.csv, curve.csv, correlation.csv and stages.json
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    relations: usize,
    #[arg(long, default_value_t = 20)]
    subjects: usize,
    #[arg(long, default_value_t = 1024)]
    vocab_budget: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlantArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// `deep`, `shallow`, or a plan JSON file
    #[arg(long, default_value = "deep")]
    plan: String,
    /// Model config JSON (required with a plan file)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelData {
    /// Model file (.moem)
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    io: ModelData,
    /// Block an expert, `layer:index` or `layer:s`
    #[arg(long)]
    block: Vec<ExpertArg>,
    /// Zero a head, `layer:head`
    #[arg(long)]
    suppress: Vec<HeadArg>,
    /// Force an expert into the active set
    #[arg(long)]
    force: Vec<ExpertArg>,
    /// default, only_shared, shared_plus_top<m>, top_only<m> or top_zero
    #[arg(long, default_value = "default")]
    mode: String,
    /// Restrict to one relation
    #[arg(long)]
    relation: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AttributeArgs {
    #[command(flatten)]
    io: ModelData,
    #[arg(long)]
    relation: String,
    #[arg(long, default_value_t = 100)]
    topk: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    io: ModelData,
    #[arg(long)]
    relation: String,
    /// Comma-separated block counts
    #[arg(long, default_value = "1,5,10")]
    sizes: String,
    /// Neurons used to rank experts
    #[arg(long, default_value_t = 100)]
    topk: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CausalArgs {
    #[command(flatten)]
    io: ModelData,
    /// Source head, `layer:head`
    #[arg(long)]
    head: HeadArg,
    /// Sink expert, `layer:index`
    #[arg(long)]
    expert: ExpertArg,
    #[arg(long, default_value_t = 256)]
    ig_steps: usize,
    #[arg(long)]
    relation: Option<String>,
    /// JSON array of d_model weights for a linear-probe sink
    #[arg(long)]
    linear_probe: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Model files
    #[arg(long, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Relation for the correlation scan (default: first populated)
    #[arg(long)]
    relation: Option<String>,
    /// `thirds` or `proportional`
    #[arg(long, default_value = "thirds")]
    stages: String,
    #[arg(long)]
    out: PathBuf,
}

fn help_json() -> serde_json::Value {
    let root = Cli::command();
    let arg_json = |a: &clap::Arg| {
        json!({
            "name": a.get_id().as_str(),
            "long": a.get_long(),
            "help": a.get_help().map(|h| h.to_string()),
            "required": a.is_required_set(),
            "takes_value": a.get_action().takes_values(),
            "multiple": matches!(a.get_action(), clap::ArgAction::Append),
            "default": a.get_default_values().iter().map(|v| v.to_string_lossy().into_owned()).collect::<Vec<_>>(),
        })
    };
    let commands: Vec<serde_json::Value> = root
        .get_subcommands()
        .map(|c| {
            json!({
                "name": c.get_name(),
                "about": c.get_about().map(|h| h.to_string()),
                "flags": c.get_arguments().filter(|a| !a.is_global_set()).map(arg_json).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({
        "name": root.get_name(),
        "version": env!("CARGO_PKG_VERSION"),
        "global_flags": root.get_arguments().map(arg_json).collect::<Vec<_>>(),
        "commands": commands,
        "exit_codes": {"0": "success", "2": "usage", "3": "capacity or planting", "4": "empty routing", "5": "numeric"},
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if let Some(e) = err.downcast_ref::<moelab::Error>() {
        use moelab::Error as E;
        return match e {
            E::Capacity(_) | E::Planting { .. } => 3,
            E::EmptyRouting { .. } => 4,
            E::Numeric(_) => 5,
            E::Domain(_)
            | E::Spec(_)
            | E::Config(_)
            | E::Vocabulary(_)
            | E::Dataset(_)
            | E::Format { .. }
            | E::Shape(_)
            | E::Json(_)
            | E::Io(_) => 2,
            _ => 1,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() || err.downcast_ref::<serde_json::Error>().is_some() {
        return 2;
    }
    1
}

fn run(cmd: Command, timing: bool) -> anyhow::Result<()> {
    let start = Instant::now();
    let run = match cmd {
        Command::GenData(a) => commands::gen_data(&commands::GenData {
            seed: a.seed,
            relations: a.relations,
            subjects: a.subjects,
            vocab_budget: a.vocab_budget,
            out: a.out,
        })?,
        Command::Plant(a) => commands::plant(&commands::Plant {
            data: a.data,
            plan: a.plan,
            config: a.config,
            seed: a.seed,
            out: a.out,
        })?,
        Command::Eval(a) => commands::eval(&commands::Eval {
            model: a.io.model,
            data: a.io.data,
            block: a.block,
            suppress: a.suppress,
            force: a.force,
            mode: a.mode,
            relation: a.relation,
            out: a.out,
        })?,
        Command::Attribute(a) => commands::attribute(&commands::Attribute {
            model: a.io.model,
            data: a.io.data,
            relation: a.relation,
            topk: a.topk,
            out: a.out,
        })?,
        Command::Ablate(a) => commands::ablate(&commands::Ablate {
            model: a.io.model,
            data: a.io.data,
            relation: a.relation,
            sizes: a.sizes,
            topk: a.topk,
            out: a.out,
        })?,
        Command::Causal(a) => commands::causal(&commands::Causal {
            model: a.io.model,
            data: a.io.data,
            head: a.head,
            expert: a.expert,
            ig_steps: a.ig_steps,
            relation: a.relation,
            linear_probe: a.linear_probe,
            out: a.out,
        })?,
        Command::Report(a) => commands::report(&commands::Report {
            inputs: a.inputs,
            data: a.data,
            relation: a.relation,
            stages: a.stages,
            out: a.out,
        })?,
    };
    run.finish(timing.then(|| start.elapsed().as_millis()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.help_json {
        println!("{}", serde_json::to_string_pretty(&help_json()).expect("help json"));
        return ExitCode::SUCCESS;
    }
    let Some(cmd) = cli.command else {
        let _ = Cli::command().print_help();
        return ExitCode::from(2);
    };
    match run(cmd, cli.timing) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
