//! Loss-quartile by fact/non-fact breakdown of judged tokens: accuracy and acceptability.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// One judged validation position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedRecord {
    pub doc_id: String,
    pub position: usize,
    /// NLL of the ground-truth token.
    pub loss: f64,
    pub is_fact: bool,
    pub proposed: String,
    pub reference: String,
    pub output: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    /// 1 (lowest losses) to 4.
    pub quartile: u8,
    pub fact: bool,
    pub count: usize,
    pub loss_min: f64,
    pub loss_max: f64,
    pub accuracy: f64,
    pub acceptability: f64,
}

/// Quartiles are rank-based over all records (ties by input order); rows with no records
/// are omitted. Means are unweighted over tokens.
pub fn analyze(records: &[JudgedRecord]) -> Result<Vec<AnalysisRow>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyMean("judged records"));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[a].loss.total_cmp(&records[b].loss).then(a.cmp(&b)));
    let mut quartile = vec![0u8; n];
    for (rank, &i) in order.iter().enumerate() {
        quartile[i] = (4 * rank / n) as u8 + 1;
    }
    let mut rows = Vec::new();
    for q in 1..=4u8 {
        for fact in [false, true] {
            let group: Vec<&JudgedRecord> =
                (0..n).filter(|&i| quartile[i] == q && records[i].is_fact == fact).map(|i| &records[i]).collect();
            if group.is_empty() {
                continue;
            }
            let c = group.len() as f64;
            rows.push(AnalysisRow {
                quartile: q,
                fact,
                count: group.len(),
                loss_min: group.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min),
                loss_max: group.iter().map(|r| r.loss).fold(f64::NEG_INFINITY, f64::max),
                accuracy: group.iter().filter(|r| r.proposed == r.reference).count() as f64 / c,
                acceptability: group.iter().map(|r| r.output as f64).sum::<f64>() / c,
            });
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[AnalysisRow]) -> String {
    let mut out = String::from("quartile,class,count,loss_min,loss_max,accuracy,acceptability\n");
    for r in rows {
        let class = if r.fact { "fact" } else { "non_fact" };
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.quartile, class, r.count, r.loss_min, r.loss_max, r.accuracy, r.acceptability
        )
        .expect("write to string");
    }
    out
}

/// Two bar panels, accuracy on the left and acceptability on the right, grouped by
/// quartile with non-fact and fact bars side by side.
pub fn write_svg(rows: &[AnalysisRow]) -> String {
    const W: f64 = 360.0;
    const H: f64 = 240.0;
    const PAD: f64 = 40.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
        2.0 * W,
        H + 30.0
    )
    .unwrap();
    for (panel, title) in ["accuracy", "acceptability"].iter().enumerate() {
        let x0 = panel as f64 * W;
        let plot_h = H - 2.0 * PAD;
        writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, x0 + W / 2.0).unwrap();
        writeln!(
            s,
            r#"<line x1="{a}" y1="{b}" x2="{c}" y2="{b}" stroke="black"/><line x1="{a}" y1="{d}" x2="{a}" y2="{b}" stroke="black"/>"#,
            a = x0 + PAD,
            b = H - PAD,
            c = x0 + W - 10.0,
            d = PAD
        )
        .unwrap();
        let slot = (W - PAD - 10.0) / 4.0;
        for q in 1..=4u8 {
            let gx = x0 + PAD + (q - 1) as f64 * slot;
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">Q{q}</text>"#, gx + slot / 2.0, H - PAD + 14.0)
                .unwrap();
            for (k, fact) in [false, true].into_iter().enumerate() {
                let Some(r) = rows.iter().find(|r| r.quartile == q && r.fact == fact) else { continue };
                let v = if panel == 0 { r.accuracy } else { r.acceptability };
                let bh = v * plot_h;
                let color = if fact { "#c0504d" } else { "#4f81bd" };
                writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}"/>"#,
                    gx + 6.0 + k as f64 * (slot - 12.0) / 2.0,
                    H - PAD - bh,
                    (slot - 12.0) / 2.0,
                    bh
                )
                .unwrap();
            }
        }
    }
    writeln!(
        s,
        r##"<rect x="{x}" y="{y}" width="10" height="10" fill="#4f81bd"/><text x="{tx}" y="{ty}">non-fact</text><rect x="{x2}" y="{y}" width="10" height="10" fill="#c0504d"/><text x="{tx2}" y="{ty}">fact</text>"##,
        x = PAD,
        y = H + 8.0,
        tx = PAD + 14.0,
        ty = H + 17.0,
        x2 = PAD + 80.0,
        tx2 = PAD + 94.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}
