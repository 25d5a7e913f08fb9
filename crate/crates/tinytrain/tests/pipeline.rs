//! Synthetic corpus through training, loss dumps, reference-driven methods and checkpoints.

use std::fs::File;

use callmask::maskbuild::{Method, MethodSpec};
use callmask::model::LanguageModel;
use callmask::tokenmap::SubwordTokenizer;
use callmask_tinytrain::{
    call_top_rates, dump_losses, make_synthetic_fact_corpus, read_checkpoint, train, CheckpointPlan, SyntheticConfig,
    TrainConfig,
};

fn config(method: Method, steps: u64) -> TrainConfig {
    TrainConfig {
        dim: 32,
        layers: 1,
        heads: 2,
        context: 32,
        batch_size: 4,
        steps,
        learning_rate: 3e-3,
        warmup_steps: 2,
        seed: 5,
        method: MethodSpec::new(method),
        ..Default::default()
    }
}

#[test]
fn reference_losses_feed_rho1_and_spacy_refloss() {
    let corpus = make_synthetic_fact_corpus(&SyntheticConfig { docs: 40, ..Default::default() });
    let vocab = corpus.tokenizer().vocab().clone();
    let plan = CheckpointPlan::default();
    let reference = train(&corpus.records, &vocab, &config(Method::Baseline, 20), None, &plan, |_| {}).unwrap();
    let refs = dump_losses(&reference.model, &corpus.records, &vocab, 32).unwrap();
    assert!(refs.iter().flat_map(|r| &r.losses).all(|l| l.is_finite() && *l >= 0.0));

    for method in [Method::Rho1, Method::SpacyRefloss] {
        let cfg = config(method, 6);
        assert!(train(&corpus.records, &vocab, &cfg, None, &plan, |_| {}).is_err(), "{method} without refs");
        let out = train(&corpus.records, &vocab, &cfg, Some(&refs), &plan, |_| {}).unwrap();
        assert!(out.metrics.iter().all(|m| m.call_tokens > 0), "{method}");
    }
}

#[test]
fn final_checkpoint_reproduces_the_trained_model() {
    let corpus = make_synthetic_fact_corpus(&SyntheticConfig { docs: 30, ..Default::default() });
    let vocab = corpus.tokenizer().vocab().clone();
    let dir = tempfile::tempdir().unwrap();
    let plan = CheckpointPlan { dir: Some(dir.path().to_path_buf()), provenance: None };
    let out = train(&corpus.records, &vocab, &config(Method::LacyIgnorefacts, 8), None, &plan, |_| {}).unwrap();
    let ck = read_checkpoint(File::open(dir.path().join("final.ckpt")).unwrap()).unwrap();
    let tokens: Vec<u32> = corpus.records[0].token_ids[..20].to_vec();
    assert_eq!(ck.model.forward(&tokens), out.model.forward(&tokens));
    let a = call_top_rates(&ck.model, &corpus.records, &vocab);
    let b = call_top_rates(&out.model, &corpus.records, &vocab);
    assert_eq!((a.fact, a.non_fact), (b.fact, b.non_fact));
    assert_eq!(
        a.fact_positions + a.non_fact_positions,
        corpus.records.iter().map(|r| r.token_ids.len()).sum::<usize>()
    );
}
