use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use callmask::evalsuite::{contains_answer, fact_leakage, QaItem};
use serde::{Deserialize, Serialize};

use super::{check_vocab, load_model, load_tokenizer_file};
use crate::artifact::{output, provenance, read_bytes, read_jsonl, user, user_at, Inputs};
use crate::{record_settings, Ctx};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// JSONL of `{prompt, answer}`; prompts are encoded exactly as written.
    #[arg(long)]
    items: PathBuf,
    /// Report JSON (default: standard output).
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: Flags,
}

#[derive(clap::Args, Serialize)]
struct Flags {
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    repetition_penalty: Option<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub max_new_tokens: usize,
    pub repetition_penalty: f32,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { max_new_tokens: 8, repetition_penalty: 1.2 }
    }
}

#[derive(Serialize)]
struct ItemReport<'a> {
    prompt: &'a str,
    answer: &'a str,
    generation: &'a str,
    hit: bool,
}

pub fn run(args: Args, ctx: &Ctx) -> Result<()> {
    let settings: Settings = ctx.sources.resolve("leakage", &args.flags)?;
    record_settings("leakage", &settings);
    if settings.max_new_tokens == 0 || settings.repetition_penalty <= 0.0 {
        return Err(user("max_new_tokens and repetition_penalty must be positive"));
    }
    let mut inputs = Inputs::default();
    let tokenizer = load_tokenizer_file(&args.tokenizer, &mut inputs)?;
    let model = load_model(&args.checkpoint, "checkpoint", &mut inputs)?;
    check_vocab(&model, tokenizer.as_ref())?;
    inputs.add("items", &read_bytes(&args.items)?);
    let items: Vec<QaItem> = read_jsonl(&args.items)?.1;
    if items.is_empty() {
        return Err(user(format!("{}: no items", args.items.display())));
    }
    let report = fact_leakage(&model, tokenizer.as_ref(), &items, settings.max_new_tokens, settings.repetition_penalty)
        .map_err(user_at("leakage"))?;
    let per_item: Vec<ItemReport> = items
        .iter()
        .zip(&report.generations)
        .map(|(i, g)| ItemReport {
            prompt: &i.prompt,
            answer: &i.answer,
            generation: g,
            hit: contains_answer(g, &i.answer),
        })
        .collect();
    let prov = provenance("leakage", ctx.seed, &settings, &inputs);
    let doc = serde_json::json!({ "provenance": prov, "score": report.score, "items": per_item });
    let mut w = output(args.out.as_ref())?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w)?;
    w.flush()?;
    log::info!("leakage {:.4} over {} items", report.score, items.len());
    Ok(())
}
