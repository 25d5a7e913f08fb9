use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use callmask::batching::{canonical_batches, BatchLayout, TokenStream};
use callmask::cascade::argmax_excluding;
use callmask::evalsuite::{extract_eval_call_mask, masked_losses, CallLosses};
use callmask::factlabel::WordClass;
use callmask::objective::per_position_nll;
use callmask::tokenmap::SubwordTokenizer;
use serde::{Deserialize, Serialize};

use super::{check_vocab, eot_of, load_labels, load_model, load_tokenizer_file};
use crate::artifact::{create, output, provenance, stamp_csv, user, user_at, write_jsonl_header, Inputs};
use crate::{record_settings, Ctx};

#[derive(clap::Args)]
pub struct Args {
    /// Model under evaluation.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Baseline model, scored on the evaluated model's call mask.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Validation token-label file.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Loss CSV (default: standard output).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Per-position proposals (argmax token without `<CALL>`) as JSONL, for `judge`.
    #[arg(long, value_name = "PATH")]
    proposals_out: Option<PathBuf>,
    #[command(flatten)]
    flags: Flags,
}

#[derive(clap::Args, Serialize)]
struct Flags {
    #[arg(long)]
    batch_size: Option<usize>,
    /// Fraction of valid positions in each batch that form the call mask.
    #[arg(long)]
    fraction: Option<f64>,
    /// Stop after this many proposals; 0 keeps all.
    #[arg(long)]
    max_proposals: Option<usize>,
    /// Tokens of preceding text included with each proposal.
    #[arg(long)]
    proposal_context: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub batch_size: usize,
    pub fraction: f64,
    pub max_proposals: usize,
    pub proposal_context: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { batch_size: 8, fraction: 0.15, max_proposals: 0, proposal_context: 32 }
    }
}

/// One validation position offered to the judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub doc_id: String,
    /// Token index within the document.
    pub position: usize,
    /// NLL of the reference token under the call-excluded distribution.
    pub loss: f64,
    pub is_fact: bool,
    /// Whether the position is in the evaluation call mask.
    pub eval_call: bool,
    pub starting_text: String,
    pub proposed: String,
    pub reference: String,
}

#[derive(Default)]
struct Totals {
    call_sum: f64,
    call_n: usize,
    non_sum: f64,
    non_n: usize,
}

impl Totals {
    fn add(&mut self, l: &CallLosses) {
        self.call_sum += l.call.unwrap_or(0.0) * l.call_count as f64;
        self.call_n += l.call_count;
        self.non_sum += l.non_call.unwrap_or(0.0) * l.non_call_count as f64;
        self.non_n += l.non_call_count;
    }

    fn row(&self, name: &str) -> String {
        let mean = |s: f64, n: usize| if n == 0 { String::new() } else { format!("{:.6}", s / n as f64) };
        format!(
            "{name},{},{},{},{}\n",
            mean(self.call_sum, self.call_n),
            mean(self.non_sum, self.non_n),
            self.call_n,
            self.non_n
        )
    }
}

fn decode(tok: &dyn SubwordTokenizer, ids: &[u32]) -> Result<String> {
    tok.decode(ids).map_err(user_at("decoding"))
}

pub fn run(args: Args, ctx: &Ctx) -> Result<()> {
    let settings: Settings = ctx.sources.resolve("eval-loss", &args.flags)?;
    record_settings("eval-loss", &settings);
    if settings.batch_size == 0 || !(0.0..=1.0).contains(&settings.fraction) {
        return Err(user("batch_size must be positive and fraction within [0, 1]"));
    }
    let mut inputs = Inputs::default();
    let tokenizer = load_tokenizer_file(&args.tokenizer, &mut inputs)?;
    let tok = tokenizer.as_ref();
    let model = load_model(&args.checkpoint, "checkpoint", &mut inputs)?;
    check_vocab(&model, tok)?;
    let baseline = match &args.baseline {
        Some(p) => {
            let b = load_model(p, "baseline", &mut inputs)?;
            check_vocab(&b, tok)?;
            if b.config.context != model.config.context {
                return Err(user("baseline and model context lengths differ"));
            }
            Some(b)
        }
        None => None,
    };
    let records = load_labels(&args.labels, &mut inputs)?;
    let eot = eot_of(tok)?;
    let call = tok.vocab().call_token_id();
    let v = tok.vocab().size();
    let stream = TokenStream::from_records(&records, eot);
    // Document and in-document offset of every stream position; None for separators.
    let mut origin: Vec<Option<(usize, usize)>> = Vec::with_capacity(stream.len());
    for (d, r) in records.iter().enumerate() {
        origin.push(None);
        origin.extend((0..r.token_ids.len()).map(|k| Some((d, k))));
    }
    let layout = BatchLayout { context: model.config.context, batch_size: settings.batch_size };
    let prov = provenance("eval-loss", ctx.seed, &settings, &inputs);

    let mut proposals_w = match &args.proposals_out {
        Some(p) => {
            let mut w = create(p)?;
            write_jsonl_header(&mut w, &prov)?;
            Some(w)
        }
        None => None,
    };
    let mut proposals = 0usize;
    let (mut ours, mut theirs) = (Totals::default(), Totals::default());
    let mut top = 0usize;
    for batch in canonical_batches(&stream, layout, eot) {
        let slab = model.forward_train(&batch.inputs, batch.rows, batch.context).slab(v);
        let mask =
            extract_eval_call_mask(&slab, &batch.valid, call, settings.fraction).map_err(user_at("call mask"))?;
        top += mask.top_count;
        ours.add(&masked_losses(&slab, &batch.targets, &batch.valid, &mask.bits, call).map_err(user_at("losses"))?);
        if let Some(b) = &baseline {
            let bslab = b.forward_train(&batch.inputs, batch.rows, batch.context).slab(v);
            theirs.add(
                &masked_losses(&bslab, &batch.targets, &batch.valid, &mask.bits, call).map_err(user_at("losses"))?,
            );
        }
        let Some(w) = proposals_w.as_mut() else { continue };
        let nll = per_position_nll(&slab, &batch.targets, &batch.valid, call).map_err(user_at("losses"))?;
        for i in (0..batch.targets.len()).filter(|&i| batch.valid[i]) {
            if settings.max_proposals > 0 && proposals >= settings.max_proposals {
                break;
            }
            let (row, k) = (i / batch.context, i % batch.context);
            let window = batch.ordinal as usize * settings.batch_size + row;
            let Some((d, position)) = origin[window * batch.context + k + 1] else { continue };
            let inputs_row = &batch.inputs[row * batch.context..=i];
            let start = inputs_row.iter().rposition(|&t| t == eot).map_or(0, |p| p + 1);
            let start = start.max(inputs_row.len().saturating_sub(settings.proposal_context));
            let p = Proposal {
                doc_id: records[d].doc_id.clone(),
                position,
                loss: nll[i] as f64,
                is_fact: batch.classes[i] == WordClass::Fact,
                eval_call: mask.bits[i],
                starting_text: decode(tok, &inputs_row[start..])?,
                proposed: decode(tok, &[argmax_excluding(slab.row(i), call).0])?,
                reference: decode(tok, &[batch.targets[i]])?,
            };
            serde_json::to_writer(&mut *w, &p)?;
            writeln!(w)?;
            proposals += 1;
        }
    }
    if let Some(w) = proposals_w.as_mut() {
        w.flush()?;
    }
    let mut csv = String::from("model,call_loss,non_call_loss,call_count,non_call_count\n");
    csv.push_str(&ours.row("model"));
    if baseline.is_some() {
        csv.push_str(&theirs.row("baseline"));
    }
    let mut w = output(args.out.as_ref())?;
    w.write_all(stamp_csv(&prov, &csv).as_bytes())?;
    w.flush()?;
    log::info!("{} call positions ({top} with <CALL> on top), {proposals} proposals", ours.call_n);
    Ok(())
}
