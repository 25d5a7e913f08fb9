//! `callmask`: fact annotation, tokenization, masks, training, cascade generation and
//! evaluation from the command line.

mod artifact;
mod commands;
mod config;

use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Mutex;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use artifact::UserError;
use config::Sources;

#[derive(Parser)]
#[command(name = "callmask", about = "Token delegation toolkit: annotate, tokenize, mask, train, generate, evaluate")]
#[command(disable_version_flag = true)]
struct Cli {
    /// TOML settings file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed; every random stage derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Print the version.
    #[arg(long)]
    version: bool,
    /// With --version: print machine-readable JSON.
    #[arg(long, requires = "version")]
    json: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Label every word of CoNLL-U documents as fact, grammatical or other.
    Annotate(commands::annotate::Args),
    /// Propagate word labels to subword tokens and write a token-label file.
    Tokenize(commands::tokenize::Args),
    /// Build call and ignore masks for every canonical batch.
    Mask(commands::mask::Args),
    /// Train a small transformer with a delegation method.
    Train(commands::train::Args),
    /// Greedy cascade generation with a partner model.
    Generate(commands::generate::Args),
    /// Call and non-call validation losses; optional judge proposals.
    EvalLoss(commands::eval_loss::Args),
    /// Fact leakage: answer containment with calling disabled.
    Leakage(commands::leakage::Args),
    /// Judge the acceptability of proposed tokens.
    Judge(commands::judge::Args),
    /// Loss-quartile breakdown of judged tokens.
    Analyze(commands::analyze::Args),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Annotate(_) => "annotate",
            Command::Tokenize(_) => "tokenize",
            Command::Mask(_) => "mask",
            Command::Train(_) => "train",
            Command::Generate(_) => "generate",
            Command::EvalLoss(_) => "eval-loss",
            Command::Leakage(_) => "leakage",
            Command::Judge(_) => "judge",
            Command::Analyze(_) => "analyze",
        }
    }
}

const SUBCOMMANDS: [&str; 9] =
    ["annotate", "tokenize", "mask", "train", "generate", "eval-loss", "leakage", "judge", "analyze"];

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct GlobalSettings {
    seed: u64,
}

#[derive(Serialize)]
struct GlobalFlags {
    seed: Option<u64>,
}

/// Shared state handed to every subcommand.
pub struct Ctx {
    pub sources: Sources,
    pub seed: u64,
}

/// Resolved settings of the running subcommand, for the internal-error dump.
static RESOLVED: Mutex<Option<String>> = Mutex::new(None);

pub fn record_settings<S: Serialize>(stage: &str, settings: &S) {
    let text = format!("{stage}: {}", serde_json::to_string(settings).unwrap_or_default());
    *RESOLVED.lock().unwrap_or_else(|e| e.into_inner()) = Some(text);
}

fn version_json() -> String {
    use callmask::formats::{CHECKPOINT_MAGIC, FORMAT_VERSION, LOSS_MAGIC, MASK_MAGIC, TOKEN_LABEL_MAGIC};
    let magic = |m: [u8; 4]| String::from_utf8_lossy(&m).into_owned();
    serde_json::json!({
        "name": "callmask",
        "version": env!("CARGO_PKG_VERSION"),
        "format_version": FORMAT_VERSION,
        "formats": {
            "token_labels": magic(TOKEN_LABEL_MAGIC),
            "losses": magic(LOSS_MAGIC),
            "masks": magic(MASK_MAGIC),
            "checkpoint": magic(CHECKPOINT_MAGIC),
        },
        "subcommands": SUBCOMMANDS,
    })
    .to_string()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let Some(command) = cli.command else { unreachable!("checked by main") };
    let sources = Sources::load(cli.config.as_deref())?;
    let global: GlobalSettings = sources.resolve("global", &GlobalFlags { seed: cli.seed })?;
    let ctx = Ctx { sources, seed: global.seed };
    log::debug!("{} with root seed {}", command.name(), ctx.seed);
    match command {
        Command::Annotate(a) => commands::annotate::run(a, &ctx),
        Command::Tokenize(a) => commands::tokenize::run(a, &ctx),
        Command::Mask(a) => commands::mask::run(a, &ctx),
        Command::Train(a) => commands::train::run(a, &ctx),
        Command::Generate(a) => commands::generate::run(a, &ctx),
        Command::EvalLoss(a) => commands::eval_loss::run(a, &ctx),
        Command::Leakage(a) => commands::leakage::run(a, &ctx),
        Command::Judge(a) => commands::judge::run(a, &ctx),
        Command::Analyze(a) => commands::analyze::run(a, &ctx),
    }
}

fn internal_dump(subcommand: &str, message: &str) {
    eprintln!("internal error in `{subcommand}`: {message}");
    eprintln!("callmask {}", env!("CARGO_PKG_VERSION"));
    if let Some(s) = RESOLVED.lock().unwrap_or_else(|e| e.into_inner()).as_deref() {
        eprintln!("resolved settings: {s}");
    }
    eprintln!("please report this with the command line and the settings above");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.version {
        if cli.json {
            println!("{}", version_json());
        } else {
            println!("callmask {}", env!("CARGO_PKG_VERSION"));
        }
        return ExitCode::SUCCESS;
    }
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    let Some(name) = cli.command.as_ref().map(Command::name) else {
        let _ = Cli::command().write_help(&mut std::io::stderr());
        eprintln!("\nerror: a subcommand is required");
        return ExitCode::from(1);
    };
    match panic::catch_unwind(AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) if e.chain().any(|c| c.is::<UserError>()) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Ok(Err(e)) => {
            internal_dump(name, &format!("{e:?}"));
            ExitCode::from(2)
        }
        Err(p) => {
            let message = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            internal_dump(name, &message);
            ExitCode::from(2)
        }
    }
}
