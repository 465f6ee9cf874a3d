mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use itercqr::analysis::PlotFormat;
use itercqr::Error;

use config::Retriever;

#[derive(Debug, Parser)]
#[command(name = "itercqr", version, about = "Iterative conversational query reformulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Api,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SliceArg {
    Overall,
    Label,
    Pid,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Svg,
    Png,
}

impl From<FormatArg> for PlotFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Svg => PlotFormat::Svg,
            FormatArg::Png => PlotFormat::Png,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic conversational corpus with qrels and imperfect rewrites.
    SynthData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        sessions: usize,
        #[arg(long, default_value_t = 4)]
        turns: usize,
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
        /// Share of follow-up turns whose pronoun the rewrites resolve.
        #[arg(long, default_value_t = 0.5)]
        resolve_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the bootstrap dataset D0 from a rewrites file or an LLM API.
    Bootstrap {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        sessions: PathBuf,
        /// Rewrites JSONL (file mode).
        #[arg(long)]
        rewrites: Option<PathBuf>,
        /// Response cache JSONL (api mode).
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Config file whose [api] table configures the client.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode passages with the frozen hashing encoder.
    Embed {
        #[arg(long)]
        passages: PathBuf,
        #[arg(long, default_value_t = itercqr::embedding::DEFAULT_DIM)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the iterative training loop, resuming from an existing manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Halt once this iteration is complete.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Reformulate test queries with model M_t and retrieve passages.
    Retrieve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model_iter: usize,
        #[arg(long, value_enum)]
        retriever: Option<Retriever>,
        #[arg(long)]
        k: Option<usize>,
        /// Also write the reformulated queries as JSONL.
        #[arg(long)]
        queries_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a run file against qrels, optionally per topic-shift slice.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, value_enum, default_value = "overall")]
        slices: SliceArg,
        /// Sessions supplying topic-shift flags; required for non-overall slices.
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Query statistics across iterations, with trend plots.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Iteration range such as `0..3` (inclusive) or a single index.
        #[arg(long)]
        iters: String,
        #[arg(long, value_enum, default_value = "svg")]
        format: FormatArg,
        /// Count repeated tokens in Dice overlap.
        #[arg(long)]
        multiset: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::Bootstrap { .. } => "bootstrap",
            Command::Embed { .. } => "embed",
            Command::Train { .. } => "train",
            Command::Retrieve { .. } => "retrieve",
            Command::Evaluate { .. } => "evaluate",
            Command::Analyze { .. } => "analyze",
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Validation(_) | Error::Parse { .. } | Error::Format(_) | Error::Bounds { .. } | Error::Io { .. } => 2,
        Error::External(_) => 3,
        Error::Invariant(_) => 4,
    }
}

fn emit(summary: &Value) {
    println!("{}", serde_json::to_string(summary).expect("summary serializes"));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            emit(&json!({"status": "error", "exit_code": 2, "error": e.kind().to_string()}));
            return ExitCode::from(2);
        }
    };
    let name = cli.command.name();
    match commands::dispatch(cli.command) {
        Ok(mut summary) => {
            summary["command"] = json!(name);
            summary["status"] = json!("ok");
            emit(&summary);
            ExitCode::SUCCESS
        }
        Err(err) => {
            let code = exit_code(&err);
            log::error!("{err}");
            emit(&json!({"command": name, "status": "error", "exit_code": code, "error": err.to_string()}));
            ExitCode::from(code)
        }
    }
}
