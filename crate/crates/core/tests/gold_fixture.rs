//! The bundled wiki-style fixture against its hand-verified word labels.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use callmask::factlabel::{label_document, WordClass};
use callmask::lingparse::read_conllu;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/wiki").join(name)
}

fn gold() -> BTreeMap<String, Vec<(String, WordClass)>> {
    let text = fs::read_to_string(fixture("gold.tsv")).unwrap();
    let mut out: BTreeMap<String, Vec<(String, WordClass)>> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let class = match f[3] {
            "fact" => WordClass::Fact,
            "grammatical" => WordClass::Grammatical,
            "other" => WordClass::Other,
            c => panic!("unknown class {c}"),
        };
        let words = out.entry(f[0].to_string()).or_default();
        assert_eq!(f[1].parse::<usize>().unwrap(), words.len(), "gold rows out of order at {line}");
        words.push((f[2].to_string(), class));
    }
    out
}

#[test]
fn labels_match_gold() {
    let outcome = read_conllu(fs::read(fixture("corpus.conllu")).unwrap().as_slice()).unwrap();
    let gold = gold();
    assert_eq!(outcome.documents.len(), gold.len());
    let mut mismatches = Vec::new();
    for doc in &outcome.documents {
        let expected = &gold[&doc.doc_id];
        let labels = label_document(doc);
        assert_eq!(labels.len(), expected.len(), "{}", doc.doc_id);
        for (i, ((w, l), (surface, class))) in doc.words.iter().zip(&labels).zip(expected).enumerate() {
            assert_eq!(&w.surface, surface, "{} word {i}", doc.doc_id);
            if l.class != *class {
                mismatches
                    .push(format!("{} {i} {surface}: gold {class:?}, got {:?} ({:?})", doc.doc_id, l.class, l.reason));
            }
        }
    }
    assert!(mismatches.is_empty(), "{} mismatches:\n{}", mismatches.len(), mismatches.join("\n"));
}

#[test]
fn documents_reconstruct_raw_text() {
    let outcome = read_conllu(fs::read(fixture("corpus.conllu")).unwrap().as_slice()).unwrap();
    let raw = fs::read_to_string(fixture("raw.jsonl")).unwrap();
    let texts: Vec<serde_json::Value> = raw.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(texts.len(), outcome.documents.len());
    for (doc, t) in outcome.documents.iter().zip(&texts) {
        assert_eq!(t["doc_id"], doc.doc_id.as_str());
        doc.check_reconstruction(t["text"].as_str().unwrap()).unwrap();
    }
}
