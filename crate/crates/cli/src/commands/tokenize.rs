use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Result;
use callmask::factlabel::{group_annotations, AnnotatedWord, WordClass};
use callmask::formats::{write_token_labels, TokenLabelRecord};
use callmask::tokenmap::{
    convert_judge_annotations, delegated_calls, load_tokenizer, propagate_word_labels, BpeTrainer, LabeledWord,
    SubwordTokenizer,
};
use serde::{Deserialize, Serialize};

use super::annotate::RawDoc;
use super::load_tokenizer_file;
use crate::artifact::{create, provenance, read_bytes, read_jsonl, user, user_at, Inputs};
use crate::{record_settings, Ctx};

#[derive(clap::Args)]
pub struct Args {
    /// `annotate` output.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// JSONL of `{doc_id, text}` with database-lookup markup; supplies call labels.
    #[arg(long, value_name = "PATH")]
    judge_annotations: Option<PathBuf>,
    /// JSONL of `{doc_id, text}`; the annotations must reproduce each text exactly.
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Existing tokenizer JSON.
    #[arg(long, conflicts_with = "fit_tokenizer")]
    tokenizer: Option<PathBuf>,
    /// Train a BPE tokenizer on the annotated texts and write it here.
    #[arg(long, value_name = "PATH")]
    fit_tokenizer: Option<PathBuf>,
    /// Token-label output file.
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    flags: Flags,
}

#[derive(clap::Args, Serialize)]
struct Flags {
    /// Vocabulary size of a fitted tokenizer, without `<CALL>`.
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Smallest pair count a fitted tokenizer still merges.
    #[arg(long)]
    min_frequency: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub vocab_size: usize,
    pub min_frequency: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { vocab_size: 1000, min_frequency: 2 }
    }
}

struct Doc {
    id: String,
    words: Vec<AnnotatedWord>,
}

impl Doc {
    fn text(&self) -> String {
        self.words.iter().flat_map(|w| [w.surface.as_str(), w.space_after.as_str()]).collect()
    }
}

pub fn run(args: Args, ctx: &Ctx) -> Result<()> {
    let settings: Settings = ctx.sources.resolve("tokenize", &args.flags)?;
    record_settings("tokenize", &settings);
    let mut inputs = Inputs::default();
    let docs: Option<Vec<Doc>> = match &args.annotations {
        Some(p) => {
            inputs.add("annotations", &read_bytes(p)?);
            let words = read_jsonl::<AnnotatedWord>(p)?.1;
            Some(group_annotations(words).into_iter().map(|(id, words)| Doc { id, words }).collect())
        }
        None => None,
    };
    let judged: Option<Vec<RawDoc>> = match &args.judge_annotations {
        Some(p) => {
            inputs.add("judge_annotations", &read_bytes(p)?);
            Some(read_jsonl(p)?.1)
        }
        None => None,
    };
    if docs.is_none() && judged.is_none() {
        return Err(user("give --annotations, --judge-annotations or both"));
    }
    if let (Some(raw), Some(docs)) = (&args.raw, &docs) {
        inputs.add("raw", &read_bytes(raw)?);
        let texts: BTreeMap<String, String> =
            read_jsonl::<RawDoc>(raw)?.1.into_iter().map(|d| (d.doc_id, d.text)).collect();
        for d in docs {
            if texts.get(&d.id) != Some(&d.text()) {
                return Err(user(format!("annotations of {} do not reproduce its raw text", d.id)));
            }
        }
    }

    let tokenizer: Arc<dyn SubwordTokenizer> = match (&args.tokenizer, &args.fit_tokenizer) {
        (Some(p), _) => load_tokenizer_file(p, &mut inputs)?,
        (None, Some(out)) => {
            let Some(docs) = &docs else {
                return Err(user("--fit-tokenizer needs --annotations"));
            };
            let texts: Vec<String> = docs.iter().map(Doc::text).collect();
            let trainer = BpeTrainer { vocab_size: settings.vocab_size, min_frequency: settings.min_frequency };
            let bpe = trainer.train(texts.iter().map(String::as_str)).map_err(user_at("fitting the tokenizer"))?;
            let json = bpe.to_json();
            let mut value: serde_json::Value = serde_json::from_str(&json)?;
            let prov = provenance("tokenize", ctx.seed, &settings, &inputs);
            value["provenance"] = serde_json::to_value(&prov)?;
            let mut w = create(out)?;
            serde_json::to_writer_pretty(&mut w, &value)?;
            std::io::Write::write_all(&mut w, b"\n")?;
            inputs.add("tokenizer", json.as_bytes());
            load_tokenizer(&json)?
        }
        (None, None) => return Err(user("give --tokenizer or --fit-tokenizer")),
    };

    let tok = tokenizer.as_ref();
    let mut records = Vec::new();
    match (&docs, &judged) {
        (Some(docs), judged) => {
            let by_id: BTreeMap<&str, &str> =
                judged.iter().flatten().map(|d| (d.doc_id.as_str(), d.text.as_str())).collect();
            for d in docs {
                let words: Vec<LabeledWord> =
                    d.words.iter().map(|w| (w.surface.as_str(), w.space_after.as_str(), w.class)).collect();
                let seq = propagate_word_labels(&words, tok).map_err(user_at(&d.id))?;
                let calls = match by_id.get(d.id.as_str()) {
                    Some(annotated) => {
                        let conv = convert_judge_annotations(annotated, tok).map_err(user_at(&d.id))?;
                        let text = d.text();
                        if conv.clean_text != text {
                            return Err(user(format!("{}: judge annotations do not match the annotated text", d.id)));
                        }
                        delegated_calls(&text, &seq.token_ids, &conv.delegated, tok).map_err(user_at(&d.id))?
                    }
                    None => vec![false; seq.len()],
                };
                records.push(TokenLabelRecord {
                    doc_id: d.id.clone(),
                    token_ids: seq.token_ids,
                    classes: seq.classes,
                    calls,
                });
            }
        }
        (None, Some(judged)) => {
            for d in judged {
                let conv = convert_judge_annotations(&d.text, tok).map_err(user_at(&d.doc_id))?;
                let n = conv.token_ids.len();
                records.push(TokenLabelRecord {
                    doc_id: d.doc_id.clone(),
                    token_ids: conv.token_ids,
                    classes: vec![WordClass::Other; n],
                    calls: conv.calls,
                });
            }
        }
        (None, None) => unreachable!("checked above"),
    }
    let prov = provenance("tokenize", ctx.seed, &settings, &inputs);
    write_token_labels(create(&args.out)?, &prov, &records)?;
    let tokens: usize = records.iter().map(|r| r.token_ids.len()).sum();
    let facts: usize = records.iter().flat_map(|r| &r.classes).filter(|&&c| c == WordClass::Fact).count();
    log::info!(
        "{} documents, {tokens} tokens, fact fraction {:.4}",
        records.len(),
        facts as f64 / tokens.max(1) as f64
    );
    Ok(())
}
