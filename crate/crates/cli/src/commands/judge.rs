use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use callmask::cascade::{connect_partner, Partner};
use callmask::evalsuite::{judge_many, MockJudge};
use serde::{Deserialize, Serialize};

use super::eval_loss::Proposal;
use crate::artifact::{
    create, provenance, read_bytes, read_jsonl, read_text, user, user_at, write_jsonl_header, Inputs,
};
use crate::{record_settings, Ctx};

#[derive(clap::Args)]
pub struct Args {
    /// `eval-loss --proposals-out` file.
    #[arg(long)]
    proposals: PathBuf,
    /// `table:<tsv>` for the offline table judge, or a partner spec (`mock:`, `exec:`, `tcp:`).
    #[arg(long)]
    judge: String,
    /// Judged JSONL output.
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    flags: Flags,
}

#[derive(clap::Args, Serialize)]
struct Flags {
    /// Concurrent judge requests.
    #[arg(long)]
    max_in_flight: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub max_in_flight: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { max_in_flight: 4 }
    }
}

/// A judged position; the fields `analyze` reads plus the judge's explanation.
#[derive(Serialize)]
struct Judged<'a> {
    doc_id: &'a str,
    position: usize,
    loss: f64,
    is_fact: bool,
    proposed: &'a str,
    reference: &'a str,
    output: u8,
    explanation: &'a str,
}

pub fn run(args: Args, ctx: &Ctx) -> Result<()> {
    let settings: Settings = ctx.sources.resolve("judge", &args.flags)?;
    record_settings("judge", &settings);
    if settings.max_in_flight == 0 {
        return Err(user("max_in_flight must be positive"));
    }
    let mut inputs = Inputs::default();
    inputs.add("proposals", &read_bytes(&args.proposals)?);
    let proposals: Vec<Proposal> = read_jsonl(&args.proposals)?.1;
    let judge: Box<dyn Partner> = if let Some(path) = args.judge.strip_prefix("table:") {
        let text = read_text(path.as_ref())?;
        inputs.add("judge_table", text.as_bytes());
        Box::new(MockJudge::from_tsv(&text).map_err(user_at(path))?)
    } else {
        if let Some(path) = args.judge.strip_prefix("mock:") {
            inputs.add("judge_script", &read_bytes(path.as_ref())?);
        }
        connect_partner(&args.judge).map_err(user_at("judge"))?
    };
    let items: Vec<(String, String, String)> =
        proposals.iter().map(|p| (p.starting_text.clone(), p.proposed.clone(), p.reference.clone())).collect();
    let verdicts = judge_many(&items, judge.as_ref(), settings.max_in_flight);

    let prov = provenance("judge", ctx.seed, &settings, &inputs);
    let mut w = create(&args.out)?;
    write_jsonl_header(&mut w, &prov)?;
    let mut accepted = 0;
    for (p, v) in proposals.iter().zip(verdicts) {
        let v = v.with_context(|| format!("judging {} position {}", p.doc_id, p.position))?;
        accepted += v.output as usize;
        let j = Judged {
            doc_id: &p.doc_id,
            position: p.position,
            loss: p.loss,
            is_fact: p.is_fact,
            proposed: &p.proposed,
            reference: &p.reference,
            output: v.output,
            explanation: &v.explanation,
        };
        serde_json::to_writer(&mut w, &j)?;
        writeln!(w)?;
    }
    w.flush()?;
    log::info!("{accepted} of {} proposals acceptable", proposals.len());
    Ok(())
}
