use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use callmask::evalsuite::{analyze, rows_to_csv, write_svg, JudgedRecord};
use serde::{Deserialize, Serialize};

use crate::artifact::{create, output, provenance, read_bytes, read_jsonl, stamp_csv, stamp_svg, user_at, Inputs};
use crate::{record_settings, Ctx};

#[derive(clap::Args)]
pub struct Args {
    /// `judge` output.
    #[arg(long)]
    judged: PathBuf,
    /// Breakdown CSV (default: standard output).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Bar chart of accuracy and acceptability per loss quartile.
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {}

/// Judged lines carry an explanation that the breakdown does not use.
#[derive(Deserialize)]
struct Line {
    #[serde(flatten)]
    record: JudgedRecord,
    #[allow(dead_code)]
    #[serde(default)]
    explanation: String,
}

pub fn run(args: Args, ctx: &Ctx) -> Result<()> {
    let settings: Settings = ctx.sources.resolve("analyze", &serde_json::json!({}))?;
    record_settings("analyze", &settings);
    let mut inputs = Inputs::default();
    inputs.add("judged", &read_bytes(&args.judged)?);
    let records: Vec<JudgedRecord> = read_jsonl::<Line>(&args.judged)?.1.into_iter().map(|l| l.record).collect();
    let rows = analyze(&records).map_err(user_at(args.judged.display()))?;
    let prov = provenance("analyze", ctx.seed, &settings, &inputs);
    let mut w = output(args.out.as_ref())?;
    w.write_all(stamp_csv(&prov, &rows_to_csv(&rows)).as_bytes())?;
    w.flush()?;
    if let Some(path) = &args.svg {
        let mut s = create(path)?;
        s.write_all(stamp_svg(&prov, &write_svg(&rows)).as_bytes())?;
        s.flush()?;
    }
    log::info!("{} records in {} groups", records.len(), rows.len());
    Ok(())
}
