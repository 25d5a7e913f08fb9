//! Synthetic fact corpus with a known labeling.
//!
//! A document opens with a subject (`subject_len` symbols), followed by a mix of filler
//! tokens and two-token clauses `R v`. Fillers walk a fixed cycle, so they are predictable
//! from the previous filler. A clause names a relation and its value. The first clause on a
//! relation in a document is a first mention: its value is labeled fact. Later clauses on the
//! same relation repeat the value, are introduced by a marker token `RE` and are labeled
//! other. Values come from a fixed world table indexed by subject and relation with
//! probability `world_share`, and are otherwise drawn uniformly for the document. Subject symbols are facts as well.
//!
//! The clause rate is tuned by bisection so that the fact-label fraction matches `fact_rate`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use callmask::evalsuite::QaItem;
use callmask::factlabel::WordClass;
use callmask::formats::TokenLabelRecord;
use callmask::maskbuild::batch_seed;
use callmask::tokenmap::{SubwordTokenizer, WordTokenizer, EOT_TOKEN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Seed of the world table; shared by training and held-out corpora.
    pub world_seed: u64,
    pub docs: usize,
    /// Tokens per document, excluding the leading end-of-text token.
    pub doc_len: usize,
    pub fact_rate: f64,
    pub subject_symbols: usize,
    pub subject_len: usize,
    pub relations: usize,
    pub values: usize,
    pub fillers: usize,
    /// Probability that a clause revisits an already mentioned relation.
    pub repeat_prob: f64,
    pub world_share: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            world_seed: 0,
            docs: 100,
            doc_len: 63,
            fact_rate: 0.25,
            subject_symbols: 10,
            subject_len: 1,
            relations: 16,
            values: 8,
            fillers: 27,
            repeat_prob: 0.05,
            world_share: 0.5,
        }
    }
}

impl SyntheticConfig {
    /// Base vocabulary size: end-of-text, subject symbols, relations, values, fillers and
    /// the repeat marker.
    pub fn base_vocab(&self) -> usize {
        2 + self.subject_symbols + self.relations + self.values + self.fillers
    }

    pub fn vocabulary(&self) -> Vec<String> {
        let mut v = vec![EOT_TOKEN.to_string()];
        v.extend((0..self.subject_symbols).map(|i| format!("S{i:02}")));
        v.extend((0..self.relations).map(|i| format!("R{i:02}")));
        v.extend((0..self.values).map(|i| format!("V{i:02}")));
        v.extend((0..self.fillers).map(|i| format!("W{i:02}")));
        v.push("RE".into());
        v
    }

    fn subject_id(&self, i: usize) -> u32 {
        (1 + i) as u32
    }

    fn relation_id(&self, i: usize) -> u32 {
        (1 + self.subject_symbols + i) as u32
    }

    fn value_id(&self, i: usize) -> u32 {
        (1 + self.subject_symbols + self.relations + i) as u32
    }

    fn filler_id(&self, i: usize) -> u32 {
        (1 + self.subject_symbols + self.relations + self.values + i) as u32
    }

    fn marker_id(&self) -> u32 {
        (1 + self.subject_symbols + self.relations + self.values + self.fillers) as u32
    }

    pub fn subject_count(&self) -> usize {
        self.subject_symbols.pow(self.subject_len as u32)
    }
}

/// Value index for every (subject, relation) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct World {
    relations: usize,
    table: Vec<u16>,
}

impl World {
    pub fn new(config: &SyntheticConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(config.world_seed, u64::MAX));
        let n = config.subject_count() * config.relations;
        World { relations: config.relations, table: (0..n).map(|_| rng.gen_range(0..config.values) as u16).collect() }
    }

    pub fn value(&self, subject: usize, relation: usize) -> usize {
        self.table[subject * self.relations + relation] as usize
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    /// Clause probability found by the fact-rate search.
    pub clause_prob: f64,
    pub records: Vec<TokenLabelRecord>,
    pub world: World,
}

impl SyntheticCorpus {
    pub fn tokenizer(&self) -> WordTokenizer {
        WordTokenizer::new(self.config.vocabulary()).expect("synthetic vocabulary is valid")
    }

    pub fn fact_fraction(&self) -> f64 {
        fact_fraction(&self.records)
    }
}

pub fn fact_fraction(records: &[TokenLabelRecord]) -> f64 {
    let total: usize = records.iter().map(|r| r.classes.len()).sum();
    let facts: usize = records.iter().flat_map(|r| &r.classes).filter(|&&c| c == WordClass::Fact).count();
    if total == 0 {
        0.0
    } else {
        facts as f64 / total as f64
    }
}

fn generate_doc(
    config: &SyntheticConfig,
    world: &World,
    clause_prob: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<u32>, Vec<WordClass>) {
    let c = config;
    let (mut ids, mut classes) = (Vec::with_capacity(c.doc_len), Vec::with_capacity(c.doc_len));
    let mut filler = 0usize;
    if c.fact_rate <= 0.0 {
        while ids.len() < c.doc_len {
            ids.push(c.filler_id(filler));
            classes.push(WordClass::Grammatical);
            filler = (filler + 1) % c.fillers;
        }
        return (ids, classes);
    }
    let mut subject = 0usize;
    for _ in 0..c.subject_len.min(c.doc_len) {
        let s = rng.gen_range(0..c.subject_symbols);
        subject = subject * c.subject_symbols + s;
        ids.push(c.subject_id(s));
        classes.push(WordClass::Fact);
    }
    let mut mentioned: Vec<(usize, usize)> = Vec::new();
    let mut fresh: Vec<usize> = (0..c.relations).collect();
    while ids.len() < c.doc_len {
        let room = c.doc_len - ids.len();
        if room >= 2 && rng.gen::<f64>() < clause_prob {
            let repeat = room >= 3 && !mentioned.is_empty() && (fresh.is_empty() || rng.gen::<f64>() < c.repeat_prob);
            if !repeat && fresh.is_empty() {
                ids.push(c.filler_id(filler));
                classes.push(WordClass::Grammatical);
                filler = (filler + 1) % c.fillers;
                continue;
            }
            let (relation, value, class) = if repeat {
                let &(r, v) = mentioned.choose(rng).expect("non-empty");
                ids.push(c.marker_id());
                classes.push(WordClass::Other);
                (r, v, WordClass::Other)
            } else {
                let r = fresh.swap_remove(rng.gen_range(0..fresh.len()));
                let v =
                    if rng.gen::<f64>() < c.world_share { world.value(subject, r) } else { rng.gen_range(0..c.values) };
                mentioned.push((r, v));
                (r, v, WordClass::Fact)
            };
            ids.push(c.relation_id(relation));
            classes.push(WordClass::Other);
            ids.push(c.value_id(value));
            classes.push(class);
        } else {
            ids.push(c.filler_id(filler));
            classes.push(WordClass::Grammatical);
            filler = (filler + 1) % c.fillers;
        }
    }
    (ids, classes)
}

fn generate_with(
    config: &SyntheticConfig,
    world: &World,
    clause_prob: f64,
    docs: usize,
    seed: u64,
) -> Vec<TokenLabelRecord> {
    (0..docs)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(seed, i as u64));
            let (token_ids, classes) = generate_doc(config, world, clause_prob, &mut rng);
            let n = token_ids.len();
            TokenLabelRecord { doc_id: format!("synth-{i:05}"), token_ids, classes, calls: vec![false; n] }
        })
        .collect()
}

/// Clause probability whose expected fact fraction is closest to the target, measured on a
/// fixed calibration sample.
fn tune_clause_prob(config: &SyntheticConfig, world: &World) -> f64 {
    if config.fact_rate <= 0.0 {
        return 0.0;
    }
    let sample = 400;
    let rate = |p: f64| fact_fraction(&generate_with(config, world, p, sample, batch_seed(config.seed, 0xCA11B)));
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    if rate(hi) <= config.fact_rate {
        log::warn!("fact rate {} is above the reachable maximum {:.3}", config.fact_rate, rate(hi));
        return hi;
    }
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < config.fact_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn make_synthetic_fact_corpus(config: &SyntheticConfig) -> SyntheticCorpus {
    let world = World::new(config);
    let clause_prob = tune_clause_prob(config, &world);
    let records = generate_with(config, &world, clause_prob, config.docs, config.seed);
    SyntheticCorpus { config: *config, clause_prob, records, world }
}

/// Questions `subject relation` whose answers are world-table values, for subjects and
/// relations sampled with `seed`.
pub fn leakage_probes(corpus: &SyntheticCorpus, count: usize, seed: u64) -> Vec<QaItem> {
    let c = &corpus.config;
    let tok = corpus.tokenizer();
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(seed, 0x9E0BE));
    (0..count)
        .map(|_| {
            let mut ids = vec![tok.vocab().eot_id().expect("synthetic vocabulary has end-of-text")];
            let mut subject = 0;
            for _ in 0..c.subject_len {
                let s = rng.gen_range(0..c.subject_symbols);
                subject = subject * c.subject_symbols + s;
                ids.push(c.subject_id(s));
            }
            let r = rng.gen_range(0..c.relations);
            ids.push(c.relation_id(r));
            let answer = tok.decode(&[c.value_id(corpus.world.value(subject, r))]).expect("known id");
            QaItem { prompt: tok.decode(&ids).expect("known ids"), answer }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fact_rate_zero_is_pure_pattern() {
        let c = make_synthetic_fact_corpus(&SyntheticConfig { fact_rate: 0.0, ..Default::default() });
        assert!(c.records.iter().flat_map(|r| &r.classes).all(|&k| k != WordClass::Fact));
        let w0 = c.config.filler_id(0);
        assert!(c.records.iter().all(|r| r.token_ids[0] == w0));
    }

    #[test]
    fn measured_fact_fraction_matches_target() {
        let c =
            make_synthetic_fact_corpus(&SyntheticConfig { fact_rate: 0.25, docs: 100, seed: 5, ..Default::default() });
        let f = c.fact_fraction();
        assert!((f - 0.25).abs() <= 0.03, "{f}");
    }

    #[test]
    fn repeats_are_labeled_other_and_copy_the_value() {
        let c = make_synthetic_fact_corpus(&SyntheticConfig { docs: 50, seed: 2, ..Default::default() });
        let cfg = c.config;
        let rel = cfg.relation_id(0)..cfg.relation_id(cfg.relations);
        let mut repeats = 0;
        for r in &c.records {
            let mut first = std::collections::BTreeMap::new();
            for i in 0..r.token_ids.len() - 1 {
                if !rel.contains(&r.token_ids[i]) {
                    continue;
                }
                let (relation, value, class) = (r.token_ids[i], r.token_ids[i + 1], r.classes[i + 1]);
                let marked = i > 0 && r.token_ids[i - 1] == cfg.marker_id();
                assert_eq!(marked, first.contains_key(&relation));
                match first.get(&relation) {
                    None => {
                        assert_eq!(class, WordClass::Fact);
                        first.insert(relation, value);
                    }
                    Some(&v) => {
                        assert_eq!((value, class), (v, WordClass::Other));
                        repeats += 1;
                    }
                }
            }
        }
        assert!(repeats > 0);
    }

    #[test]
    fn deterministic_and_world_shared() {
        let cfg = SyntheticConfig { docs: 20, ..Default::default() };
        let a = make_synthetic_fact_corpus(&cfg);
        let b = make_synthetic_fact_corpus(&cfg);
        assert_eq!(a.records, b.records);
        let held_out = make_synthetic_fact_corpus(&SyntheticConfig { seed: 99, ..cfg });
        assert_ne!(held_out.records, a.records);
        assert_eq!(held_out.world, a.world);
    }

    #[test]
    fn vocabulary_fits_with_call() {
        let cfg = SyntheticConfig::default();
        let c = make_synthetic_fact_corpus(&SyntheticConfig { docs: 2, ..cfg });
        assert_eq!(c.tokenizer().vocab().size(), 64);
        let probes = leakage_probes(&c, 3, 1);
        assert!(probes.iter().all(|p| p.prompt.starts_with("<|endoftext|> S") && p.answer.starts_with('V')));
    }
}
