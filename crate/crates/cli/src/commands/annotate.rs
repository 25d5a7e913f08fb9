use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use callmask::factlabel::{annotated_words, write_annotations, Labeler, LabelerConfig, WordClass};
use callmask::lingparse::conllu::write_jsonl;
use callmask::lingparse::read_conllu;
use serde::{Deserialize, Serialize};

use crate::artifact::{
    create, output, provenance, read_bytes, read_jsonl, read_text, user, user_at, write_jsonl_header, Inputs,
};
use crate::{record_settings, Ctx};

#[derive(clap::Args)]
pub struct Args {
    /// CoNLL-U input.
    input: PathBuf,
    /// Output JSONL (default: standard output).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// JSONL of `{doc_id, text}`; every document must reconstruct its text exactly.
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Also write the parsed documents as JSONL.
    #[arg(long, value_name = "PATH")]
    dump_docs: Option<PathBuf>,
    #[command(flatten)]
    flags: Flags,
}

#[derive(clap::Args, Serialize)]
struct Flags {
    /// Word-list file for the labeling rules (default: the bundled lists).
    #[arg(long)]
    lexicon: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub lexicon: Option<String>,
}

#[derive(Deserialize)]
pub struct RawDoc {
    pub doc_id: String,
    pub text: String,
}

pub fn run(args: Args, ctx: &Ctx) -> Result<()> {
    let settings: Settings = ctx.sources.resolve("annotate", &args.flags)?;
    record_settings("annotate", &settings);
    let mut inputs = Inputs::default();
    let bytes = read_bytes(&args.input)?;
    inputs.add("conllu", &bytes);
    let outcome = read_conllu(&bytes[..]).map_err(user_at(args.input.display()))?;
    if outcome.unknown_misc_keys > 0 {
        log::warn!("ignored {} unknown MISC keys", outcome.unknown_misc_keys);
    }
    let labeler = match &settings.lexicon {
        Some(p) => {
            let text = read_text(p.as_ref())?;
            inputs.add("lexicon", text.as_bytes());
            Labeler::new(LabelerConfig::parse(&text).map_err(user_at(p))?)
        }
        None => Labeler::default(),
    };
    if let Some(raw) = &args.raw {
        let bytes = read_bytes(raw)?;
        inputs.add("raw", &bytes);
        let texts: BTreeMap<String, String> =
            read_jsonl::<RawDoc>(raw)?.1.into_iter().map(|d| (d.doc_id, d.text)).collect();
        for doc in &outcome.documents {
            let text =
                texts.get(&doc.doc_id).ok_or_else(|| user(format!("{}: no text for {}", raw.display(), doc.doc_id)))?;
            doc.check_reconstruction(text).map_err(user_at(&doc.doc_id))?;
        }
    }
    let prov = provenance("annotate", ctx.seed, &settings, &inputs);
    if let Some(path) = &args.dump_docs {
        let mut w = create(path)?;
        write_jsonl_header(&mut w, &prov)?;
        write_jsonl(&outcome.documents, &mut w)?;
    }
    let mut w = output(args.out.as_ref())?;
    write_jsonl_header(&mut w, &prov)?;
    let (mut words, mut facts) = (0usize, 0usize);
    for doc in &outcome.documents {
        let labels = labeler.label_document(doc);
        words += labels.len();
        facts += labels.iter().filter(|l| l.class == WordClass::Fact).count();
        write_annotations(&annotated_words(doc, &labels), &mut w)?;
    }
    w.flush()?;
    log::info!("{} documents, {words} words, {facts} facts", outcome.documents.len());
    Ok(())
}
