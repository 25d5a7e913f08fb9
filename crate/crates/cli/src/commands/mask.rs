use std::path::PathBuf;

use anyhow::Result;
use callmask::batching::{canonical_batches, BatchLayout, TokenStream};
use callmask::formats::{write_masks, MaskRecord};
use callmask::maskbuild::{build_mask, Method, MethodSpec};
use serde::{Deserialize, Serialize};

use super::{batch_losses, eot_of, load_labels, load_losses, load_tokenizer_file};
use crate::artifact::{create, provenance, stage_seed, user, user_at, Inputs};
use crate::{record_settings, Ctx};

#[derive(clap::Args)]
pub struct Args {
    /// Token-label file.
    #[arg(long)]
    labels: PathBuf,
    /// Tokenizer JSON (for the end-of-text id).
    #[arg(long)]
    tokenizer: PathBuf,
    /// Per-window losses of the current model.
    #[arg(long)]
    losses: Option<PathBuf>,
    /// Per-window losses of a reference model.
    #[arg(long)]
    ref_losses: Option<PathBuf>,
    /// Mask output file.
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    flags: Flags,
}

#[derive(clap::Args, Serialize)]
pub struct Flags {
    /// Delegation method.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    call_fraction: Option<f64>,
    #[arg(long)]
    ignore_fraction: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub method: String,
    pub context: usize,
    pub batch_size: usize,
    pub call_fraction: f64,
    pub ignore_fraction: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { method: "lacy".into(), context: 64, batch_size: 8, call_fraction: 0.15, ignore_fraction: 0.15 }
    }
}

pub fn method_spec(name: &str, call_fraction: f64, ignore_fraction: f64, seed: u64) -> Result<MethodSpec> {
    let method: Method = name.parse().map_err(user_at("method"))?;
    let spec = MethodSpec { method, call_fraction, ignore_fraction, rng_seed: seed };
    spec.validate().map_err(user_at("method"))?;
    Ok(spec)
}

pub fn run(args: Args, ctx: &Ctx) -> Result<()> {
    let settings: Settings = ctx.sources.resolve("mask", &args.flags)?;
    record_settings("mask", &settings);
    if settings.context == 0 || settings.batch_size == 0 {
        return Err(user("context and batch_size must be positive"));
    }
    let spec =
        method_spec(&settings.method, settings.call_fraction, settings.ignore_fraction, stage_seed(ctx.seed, "mask"))?;
    let mut inputs = Inputs::default();
    let tokenizer = load_tokenizer_file(&args.tokenizer, &mut inputs)?;
    let eot = eot_of(tokenizer.as_ref())?;
    let records = load_labels(&args.labels, &mut inputs)?;
    let stream = TokenStream::from_records(&records, eot);
    let layout = BatchLayout { context: settings.context, batch_size: settings.batch_size };
    let windows = stream.window_count(layout.context);
    let load =
        |path: &Option<PathBuf>, role: &str, needed: bool, inputs: &mut Inputs| -> Result<Option<Vec<Vec<f32>>>> {
            match path {
                Some(p) => {
                    let recs = load_losses(p, role, inputs)?;
                    Ok(Some(batch_losses(&recs, windows, layout.context, layout.batch_size, role)?))
                }
                None if needed => Err(user(format!("method {} needs --{}", spec.method, role.replace('_', "-")))),
                None => Ok(None),
            }
        };
    let losses = load(&args.losses, "losses", spec.method.needs_losses(), &mut inputs)?;
    let refs = load(&args.ref_losses, "ref_losses", spec.method.needs_ref_losses(), &mut inputs)?;

    let mut out = Vec::new();
    let mut warnings = 0;
    for batch in canonical_batches(&stream, layout, eot) {
        let b = batch.ordinal as usize;
        let l = losses.as_ref().map_or_else(|| vec![0.0; batch.targets.len()], |l| l[b].clone());
        let r = refs.as_ref().map(|r| r[b].clone());
        let mask = build_mask(&batch.training_batch(l, r), &spec).map_err(user_at(format!("batch {b}")))?;
        warnings += mask.warnings.len();
        out.push(MaskRecord { ordinal: batch.ordinal, call: mask.call, ignore: mask.ignore });
    }
    if warnings > 0 {
        log::warn!("{warnings} mask warnings (quota below one or clamped)");
    }
    let prov = provenance("mask", ctx.seed, &serde_json::json!({ "settings": settings, "method_spec": spec }), &inputs);
    write_masks(create(&args.out)?, &prov, &out)?;
    let calls: usize = out.iter().map(|m| m.call.iter().filter(|&&b| b).count()).sum();
    let ignores: usize = out.iter().map(|m| m.ignore.iter().filter(|&&b| b).count()).sum();
    log::info!("{} batches, {calls} calls, {ignores} ignored", out.len());
    Ok(())
}
