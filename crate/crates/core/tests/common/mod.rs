#![allow(dead_code)]

use milel::candidates::{Mention, Sentence};
use milel::kb::{DanglingPolicy, KnowledgeBase};
use proptest::prelude::*;

pub const TOKENS: [&str; 6] = ["bill", "clinton", "paris", "texas", "hilton", "america"];

#[derive(Clone, Debug)]
pub struct RawKb {
    pub names: Vec<Vec<usize>>,
    pub types: Vec<Vec<usize>>,
    pub triples: Vec<(usize, usize)>,
}

impl RawKb {
    pub fn build(&self) -> KnowledgeBase {
        let entities = self
            .names
            .iter()
            .zip(&self.types)
            .enumerate()
            .map(|(i, (name, types))| {
                let name = name.iter().map(|&t| TOKENS[t]).collect::<Vec<_>>().join(" ");
                (format!("m.{i}"), name, types.iter().map(|t| format!("t{t}")).collect())
            })
            .collect();
        let triples = self.triples.iter().map(|&(s, o)| (format!("m.{s}"), "r".to_string(), format!("m.{o}"))).collect();
        KnowledgeBase::build(entities, triples, DanglingPolicy::Error).expect("valid kb").0
    }
}

pub fn raw_kb(max_entities: usize) -> impl Strategy<Value = RawKb> {
    (1..max_entities).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec(0..TOKENS.len(), 1..4), n),
            prop::collection::vec(prop::collection::vec(0..4usize, 0..3), n),
            prop::collection::vec((0..n, 0..n), 0..3 * n),
        )
            .prop_map(|(names, types, triples)| RawKb { names, types, triples })
    })
}

/// A sentence of pool tokens with 1 to 3 mentions over random spans.
pub fn sentence() -> impl Strategy<Value = Sentence> {
    prop::collection::vec(0..TOKENS.len(), 2..8).prop_flat_map(|toks| {
        let l = toks.len();
        prop::collection::vec((1..=l, 0..3usize), 1..4).prop_map(move |spans| Sentence {
            id: "s".into(),
            tokens: toks.iter().map(|&t| TOKENS[t].to_string()).collect(),
            mentions: spans
                .into_iter()
                .map(|(h, len)| Mention { sentence_id: String::new(), span: (h, (h + len).min(l)), ne_type: None, gold: None })
                .collect(),
        })
    })
}

/// Linear-scan name match: every mention token occurs in the entity name.
pub fn scan_match(kb: &KnowledgeBase, tokens: &[String]) -> Vec<usize> {
    let toks: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
    if toks.is_empty() {
        return Vec::new();
    }
    (0..kb.len()).filter(|&e| toks.iter().all(|t| kb.entity(e).name_tokens.contains(t))).collect()
}

pub fn scan_related(kb: &KnowledgeBase, a: usize, b: usize) -> bool {
    kb.triples().iter().any(|t| {
        let (s, o) = (kb.index_of(t.subject.as_str()).unwrap(), kb.index_of(t.object.as_str()).unwrap());
        (s == a && o == b) || (s == b && o == a)
    })
}
