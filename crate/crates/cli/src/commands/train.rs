use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use callmask::formats::write_losses;
use callmask_tinytrain::optim::AdamWConfig;
use callmask_tinytrain::{dump_losses, train, CheckpointPlan, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};

use super::mask::method_spec;
use super::{load_labels, load_losses, load_tokenizer_file};
use crate::artifact::{create, provenance, stage_seed, user, write_jsonl_header, Inputs};
use crate::{record_settings, Ctx};

#[derive(clap::Args)]
pub struct Args {
    /// Token-label file.
    #[arg(long)]
    labels: PathBuf,
    /// Tokenizer JSON; fixes the vocabulary.
    #[arg(long)]
    tokenizer: PathBuf,
    /// Directory for checkpoints (`final.ckpt`, `step-NNNNNNN.ckpt`).
    #[arg(long)]
    out_dir: PathBuf,
    /// Metrics JSONL (default: `<out-dir>/metrics.jsonl`).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Per-window reference-model losses, for rho1 and spacy_refloss.
    #[arg(long)]
    ref_losses: Option<PathBuf>,
    /// Write the trained model's per-window losses on the training corpus here.
    #[arg(long, value_name = "PATH")]
    losses_out: Option<PathBuf>,
    #[command(flatten)]
    flags: Flags,
}

#[derive(clap::Args, Serialize)]
struct Flags {
    /// Delegation method.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    grad_clip: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    /// Train on past `steps` until as many tokens were trained towards their true target as
    /// a run without masks would have.
    #[arg(long)]
    compensate: Option<bool>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    call_fraction: Option<f64>,
    #[arg(long)]
    ignore_fraction: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub method: String,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f32,
    pub warmup_steps: u64,
    pub grad_clip: f32,
    pub weight_decay: f32,
    pub compensate: bool,
    pub checkpoint_every: u64,
    pub call_fraction: f64,
    pub ignore_fraction: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            method: "baseline".into(),
            dim: 64,
            layers: 2,
            heads: 4,
            context: 64,
            batch_size: 8,
            steps: 200,
            learning_rate: 2e-3,
            warmup_steps: 20,
            grad_clip: 1.0,
            weight_decay: AdamWConfig::default().weight_decay,
            compensate: false,
            checkpoint_every: 0,
            call_fraction: 0.15,
            ignore_fraction: 0.15,
        }
    }
}

fn user_train_error(e: TrainError) -> anyhow::Error {
    match e {
        TrainError::Io(_) | TrainError::Checkpoint(_) => e.into(),
        other => user(other.to_string()),
    }
}

pub fn run(args: Args, ctx: &Ctx) -> Result<()> {
    let settings: Settings = ctx.sources.resolve("train", &args.flags)?;
    record_settings("train", &settings);
    let method =
        method_spec(&settings.method, settings.call_fraction, settings.ignore_fraction, stage_seed(ctx.seed, "mask"))?;
    let config = TrainConfig {
        dim: settings.dim,
        layers: settings.layers,
        heads: settings.heads,
        context: settings.context,
        batch_size: settings.batch_size,
        steps: settings.steps,
        learning_rate: settings.learning_rate,
        warmup_steps: settings.warmup_steps,
        seed: stage_seed(ctx.seed, "train"),
        method,
        grad_clip: settings.grad_clip,
        compensate: settings.compensate,
        checkpoint_every: settings.checkpoint_every,
        adam: AdamWConfig { weight_decay: settings.weight_decay, ..AdamWConfig::default() },
    };
    config.validate().map_err(user_train_error)?;
    config.model_config(1).validate().map_err(|e| user(format!("invalid model shape: {e}")))?;
    let mut inputs = Inputs::default();
    let tokenizer = load_tokenizer_file(&args.tokenizer, &mut inputs)?;
    let vocab = tokenizer.vocab().clone();
    let records = load_labels(&args.labels, &mut inputs)?;
    let refs = match &args.ref_losses {
        Some(p) => Some(load_losses(p, "ref_losses", &mut inputs)?),
        None if method.method.needs_ref_losses() => {
            return Err(user(format!("method {} needs --ref-losses", method.method)))
        }
        None => None,
    };
    let prov =
        provenance("train", ctx.seed, &serde_json::json!({ "settings": settings, "train_config": config }), &inputs);

    let metrics_path = args.metrics.clone().unwrap_or_else(|| args.out_dir.join("metrics.jsonl"));
    let mut metrics = create(&metrics_path)?;
    write_jsonl_header(&mut metrics, &prov)?;
    let mut write_error = None;
    let plan = CheckpointPlan { dir: Some(args.out_dir.clone()), provenance: Some(prov.clone()) };
    let out = train(&records, &vocab, &config, refs.as_deref(), &plan, |m| {
        if write_error.is_none() {
            if let Err(e) =
                serde_json::to_writer(&mut metrics, m).map_err(anyhow::Error::from).and_then(|_| Ok(writeln!(metrics)?))
            {
                write_error = Some(e);
            }
        }
    })
    .map_err(user_train_error)?;
    if let Some(e) = write_error {
        return Err(e);
    }
    metrics.flush()?;
    if let Some(path) = &args.losses_out {
        let losses = dump_losses(&out.model, &records, &vocab, config.context).map_err(user_train_error)?;
        write_losses(create(path)?, &prov, &losses)?;
    }
    let tail = out.metrics.iter().rev().take(10).map(|m| m.loss).sum::<f64>() / out.metrics.len().clamp(1, 10) as f64;
    log::info!("{} steps, {} tokens trained, recent loss {tail:.4}", out.steps_run, out.trained_tokens);
    Ok(())
}
