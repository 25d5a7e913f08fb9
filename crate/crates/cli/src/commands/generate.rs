use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use callmask::cascade::{
    connect_partner, encode_prompt, generate, CascadeConfig, CascadeSession, Partner, ScriptedPartner,
};
use serde::{Deserialize, Serialize};

use super::{check_vocab, load_model, load_tokenizer_file};
use crate::artifact::{create, output, provenance, read_text, user, user_at, write_jsonl_header, Inputs};
use crate::{record_settings, Ctx};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Prompt text file.
    #[arg(long)]
    prompt: PathBuf,
    /// `mock:<script>`, `exec:<command>` or `tcp:<host:port>`; without it every call falls
    /// back to the base model.
    #[arg(long)]
    partner: Option<String>,
    /// Generated text (default: standard output).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Per-step decision trace as JSONL.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    flags: Flags,
}

#[derive(clap::Args, Serialize)]
struct Flags {
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    repetition_penalty: Option<f32>,
    /// Calling budget as a fraction of emitted tokens.
    #[arg(long)]
    target_call_ratio: Option<f64>,
    /// Number of recent call logits the threshold is computed from.
    #[arg(long)]
    window: Option<usize>,
    /// Steps before the first calibrated call.
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long, value_parser = ["calibrated", "argmax", "suppressed"])]
    policy: Option<String>,
    #[arg(long)]
    max_retrieval_tokens: Option<usize>,
    #[arg(long)]
    max_candidates: Option<usize>,
    #[arg(long)]
    partner_retries: Option<usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Settings(pub CascadeConfig);

#[derive(Serialize)]
struct Summary {
    calls_made: u64,
    tokens_emitted: u64,
    target_ratio: f64,
    realized_ratio: f64,
}

pub fn run(args: Args, ctx: &Ctx) -> Result<()> {
    let Settings(config) = ctx.sources.resolve("generate", &args.flags)?;
    record_settings("generate", &config);
    if config.max_retrieval_tokens == 0 || !(0.0..=1.0).contains(&config.target_call_ratio) {
        return Err(user("max_retrieval_tokens must be positive and target_call_ratio within [0, 1]"));
    }
    let mut inputs = Inputs::default();
    let tokenizer = load_tokenizer_file(&args.tokenizer, &mut inputs)?;
    let model = load_model(&args.checkpoint, "checkpoint", &mut inputs)?;
    check_vocab(&model, tokenizer.as_ref())?;
    let prompt_text = read_text(&args.prompt)?;
    inputs.add("prompt", prompt_text.as_bytes());
    let partner: Box<dyn Partner> = match &args.partner {
        Some(spec) => {
            if let Some(path) = spec.strip_prefix("mock:") {
                inputs.add("partner_script", read_text(path.as_ref())?.as_bytes());
            }
            connect_partner(spec).map_err(user_at("partner"))?
        }
        None => Box::new(ScriptedPartner::constant("")),
    };
    let prompt = encode_prompt(tokenizer.as_ref(), &prompt_text).map_err(user_at(args.prompt.display()))?;
    let mut session = CascadeSession::new(config, prompt, tokenizer.as_ref(), partner.as_ref());
    let result = generate(&mut session, &model).map_err(user_at("generation"))?;
    let prov = provenance("generate", ctx.seed, &config, &inputs);

    let mut w = output(args.out.as_ref())?;
    w.write_all(result.text.as_bytes())?;
    w.flush()?;
    if let Some(path) = &args.trace {
        let mut t = create(path)?;
        write_jsonl_header(&mut t, &prov)?;
        for entry in &result.trace {
            serde_json::to_writer(&mut t, entry)?;
            writeln!(t)?;
        }
        let summary = Summary {
            calls_made: result.calls_made,
            tokens_emitted: result.tokens_emitted,
            target_ratio: result.target_ratio,
            realized_ratio: result.realized_ratio,
        };
        serde_json::to_writer(&mut t, &serde_json::json!({ "summary": summary }))?;
        writeln!(t)?;
        t.flush()?;
    }
    log::info!(
        "{} tokens, {} calls, realized ratio {:.3}",
        result.tokens_emitted,
        result.calls_made,
        result.realized_ratio
    );
    Ok(())
}
