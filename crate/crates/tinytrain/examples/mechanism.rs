//! Trains baseline and lacy models on the synthetic fact corpus and reports where `<CALL>`
//! is the top prediction, plus fact leakage on world-table probes.
//!
//! Usage: `cargo run --release -p callmask-tinytrain --example mechanism -- [key=value ...]`
//! Keys: docs, steps, batch, lr, warmup, dim, layers, heads, seed, world_share, subjects,
//! values, subject_len, repeat, probes.

use std::collections::BTreeMap;
use std::time::Instant;

use callmask::evalsuite::fact_leakage;
use callmask::maskbuild::{Method, MethodSpec};
use callmask::tokenmap::SubwordTokenizer;
use callmask_tinytrain::{
    call_top_rates, leakage_probes, make_synthetic_fact_corpus, train, CheckpointPlan, SyntheticConfig, TrainConfig,
};

/// Call-top counts on non-fact targets, keyed by the class and the first letter of the target token.
fn breakdown(
    model: &callmask_tinytrain::Transformer,
    held: &callmask_tinytrain::SyntheticCorpus,
    vocab: &callmask::tokenmap::Vocabulary,
) {
    use callmask::model::LanguageModel;
    let call = vocab.call_token_id() as usize;
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in &held.records {
        let mut ids = vec![vocab.eot_id().unwrap()];
        ids.extend_from_slice(&r.token_ids[..r.token_ids.len() - 1]);
        let slab = model.forward(&ids);
        #[allow(clippy::needless_range_loop)]
        for i in 0..r.token_ids.len() {
            let row = slab.row(i);
            let top = row.iter().enumerate().all(|(j, &x)| j == call || row[call] >= x);
            let name = vocab.token(r.token_ids[i]).unwrap();
            let prev = vocab.token(ids[i]).unwrap();
            let after = if prev == "RE" { " after RE" } else { "" };
            let key = format!("{:?}/{}{after}", r.classes[i], if name == "RE" { name } else { &name[..1] });
            let e = counts.entry(key).or_default();
            e.0 += top as usize;
            e.1 += 1;
        }
    }
    for (k, (h, n)) in counts {
        println!("  {k}: {h}/{n}");
    }
}

fn main() {
    let args: BTreeMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map_or(d, |v| v.parse().expect("numeric argument"));
    let synth = SyntheticConfig {
        docs: get("docs", 3200.0) as usize,
        seed: get("seed", 0.0) as u64,
        world_share: get("world_share", 0.5),
        subject_symbols: get("subjects", 10.0) as usize,
        values: get("values", 8.0) as usize,
        subject_len: get("subject_len", 1.0) as usize,
        repeat_prob: get("repeat", 0.05),
        ..Default::default()
    };
    let corpus = make_synthetic_fact_corpus(&synth);
    let held = make_synthetic_fact_corpus(&SyntheticConfig { seed: synth.seed + 1_000_003, docs: 200, ..synth });
    let tok = corpus.tokenizer();
    let vocab = tok.vocab().clone();
    println!(
        "fact fraction {:.3}, clause prob {:.3}, vocab {}",
        corpus.fact_fraction(),
        corpus.clause_prob,
        vocab.size()
    );
    let probes = leakage_probes(&corpus, get("probes", 1000.0) as usize, 7);
    for method in [Method::Baseline, Method::Lacy] {
        let cfg = TrainConfig {
            dim: get("dim", 128.0) as usize,
            layers: get("layers", 2.0) as usize,
            heads: get("heads", 4.0) as usize,
            context: 64,
            batch_size: get("batch", 8.0) as usize,
            steps: get("steps", 390.0) as u64,
            learning_rate: get("lr", 2e-3) as f32,
            warmup_steps: get("warmup", 30.0) as u64,
            seed: synth.seed,
            method: MethodSpec::new(method),
            ..Default::default()
        };
        let t = Instant::now();
        let out = train(&corpus.records, &vocab, &cfg, None, &CheckpointPlan::default(), |_| {}).expect("training");
        let tokens: usize = out.metrics.iter().map(|m| m.valid_tokens).sum();
        let last = out.metrics.iter().rev().take(20).map(|m| m.loss).sum::<f64>() / 20.0;
        let rates = call_top_rates(&out.model, &held.records, &vocab);
        let leak = fact_leakage(&out.model, &tok, &probes, 1, 1.2).expect("leakage");
        println!(
            "{method}: {:.1}s tokens {tokens} final loss {last:.3} call-top fact {:.3} non-fact {:.4} leakage {:.3}",
            t.elapsed().as_secs_f64(),
            rates.fact,
            rates.non_fact,
            leak.score
        );
        if method == Method::Lacy {
            breakdown(&out.model, &held, &vocab);
        }
    }
}
