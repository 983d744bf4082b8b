//! Data-point construction from a corpus and a KB.
//!
//! Positive sets come from three steps: surface matching, a relation filter
//! against the co-mentions' candidates (training only), and truncation by
//! prominence. Training points also get negatives sampled from the rest of
//! the KB.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::kb::{EntityId, KbError, KnowledgeBase};

pub const CORPUS_VERSION: u32 = 1;
pub const DATAPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NeType {
    #[serde(rename = "LOC")]
    Loc,
    #[serde(rename = "ORG")]
    Org,
    #[serde(rename = "PER")]
    Per,
    #[serde(rename = "MISC")]
    Misc,
}

impl NeType {
    pub const ALL: [NeType; 4] = [NeType::Loc, NeType::Org, NeType::Per, NeType::Misc];

    pub fn as_str(self) -> &'static str {
        match self {
            NeType::Loc => "LOC",
            NeType::Org => "ORG",
            NeType::Per => "PER",
            NeType::Misc => "MISC",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mention {
    #[serde(skip)]
    pub sentence_id: String,
    /// 1-based inclusive token span `(h, k)`.
    pub span: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ne_type: Option<NeType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<EntityId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub mentions: Vec<Mention>,
}

impl Sentence {
    pub fn mention_tokens(&self, mention: &Mention) -> &[String] {
        &self.tokens[mention.span.0 - 1..mention.span.1]
    }

    fn validate(&self) -> Result<(), String> {
        if self.tokens.is_empty() {
            return Err(format!("sentence {} has no tokens", self.id));
        }
        let l = self.tokens.len();
        for m in &self.mentions {
            let (h, k) = m.span;
            if !(1 <= h && h <= k && k <= l) {
                return Err(format!("sentence {}: span ({h}, {k}) outside 1..={l}", self.id));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataPoint {
    pub mention: Mention,
    /// Position of the mention within its sentence.
    pub mention_index: usize,
    pub positive: Vec<EntityId>,
    pub negative: Vec<EntityId>,
    /// Ground truth "E+ misses the gold entity", when the gold entity is known.
    pub noise_label: Option<bool>,
}

impl DataPoint {
    pub fn point_id(&self) -> String {
        point_id(&self.mention.sentence_id, self.mention_index)
    }

    pub fn gold_in_positive(&self) -> Option<bool> {
        self.mention.gold.as_ref().map(|g| self.positive.contains(g))
    }
}

pub fn point_id(sentence_id: &str, mention_index: usize) -> String {
    format!("{sentence_id}#{mention_index}")
}

#[derive(Debug, thiserror::Error)]
pub enum CandidateError {
    #[error("{file} line {line}: {detail}")]
    Format { file: &'static str, line: usize, detail: String },
    #[error("supervised mode needs a gold entity for every mention; {0} has none")]
    MissingGold(String),
    #[error("gold entity {gold} of {point} is not in the knowledge base")]
    UnknownGold { point: String, gold: String },
    #[error("cannot sample {requested} negatives: only {available} entities lie outside E+")]
    TooFewEntities { requested: usize, available: usize },
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    Train,
    Test,
    Supervised,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetConfig {
    pub cap: usize,
    pub n_neg: usize,
    pub mode: DatasetMode,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { cap: 100, n_neg: 10, mode: DatasetMode::Train }
    }
}

/// Keeps the sentences with at least two mentions.
pub fn select_training_sentences<'a>(corpus: impl IntoIterator<Item = &'a Sentence>) -> impl Iterator<Item = &'a Sentence> {
    corpus.into_iter().filter(|s| s.mentions.len() >= 2)
}

/// Positive sets for every mention of a sentence, as prominence indices.
pub fn positive_sets(kb: &KnowledgeBase, sentence: &Sentence, cap: usize, relation_filter: bool) -> Vec<Vec<usize>> {
    let step1: Vec<Vec<usize>> =
        sentence.mentions.iter().map(|m| kb.match_by_name(sentence.mention_tokens(m))).collect();

    let filtered = if relation_filter {
        // entity -> mentions it is an (uncapped) step-1 candidate for
        let mut owners: HashMap<usize, Vec<usize>> = HashMap::new();
        for (j, cands) in step1.iter().enumerate() {
            for &c in cands {
                owners.entry(c).or_default().push(j);
            }
        }
        step1
            .iter()
            .enumerate()
            .map(|(m, cands)| {
                cands
                    .iter()
                    .copied()
                    .filter(|&c| {
                        kb.neighbors(c)
                            .iter()
                            .any(|n| owners.get(n).is_some_and(|js| js.iter().any(|&j| j != m)))
                    })
                    .collect()
            })
            .collect()
    } else {
        step1
    };

    filtered
        .into_iter()
        .map(|mut c| {
            c.truncate(cap);
            c
        })
        .collect()
}

/// E+ for one mention of a sentence.
pub fn generate_positive_set(
    kb: &KnowledgeBase,
    sentence: &Sentence,
    mention_index: usize,
    cap: usize,
    relation_filter: bool,
) -> Vec<usize> {
    positive_sets(kb, sentence, cap, relation_filter).swap_remove(mention_index)
}

/// Samples `n` distinct entities uniformly from the KB minus `positive`.
pub fn sample_negatives<R: Rng>(
    kb: &KnowledgeBase,
    positive: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>, CandidateError> {
    let mut excluded = positive.to_vec();
    excluded.sort_unstable();
    excluded.dedup();
    let available = kb.len() - excluded.len();
    if n > available {
        return Err(CandidateError::TooFewEntities { requested: n, available });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // Draw ranks among the non-excluded entities, then map rank -> entity.
    Ok(sample(rng, available, n)
        .into_iter()
        .map(|mut rank| {
            for &x in &excluded {
                if x <= rank {
                    rank += 1;
                } else {
                    break;
                }
            }
            rank
        })
        .collect())
}

fn ids(kb: &KnowledgeBase, idx: &[usize]) -> Vec<EntityId> {
    idx.iter().map(|&e| kb.id_of(e).clone()).collect()
}

/// Builds data points in corpus order.
///
/// * train: sentences with >= 2 mentions, relation-filtered E+, sampled E-
/// * test: every sentence, surface-matched E+, empty E-
/// * supervised: every sentence, E+ = [gold], sampled E-
pub fn build_dataset<R: Rng>(
    kb: &KnowledgeBase,
    corpus: &[Sentence],
    config: DatasetConfig,
    rng: &mut R,
) -> Result<Vec<DataPoint>, CandidateError> {
    let sentences: Vec<&Sentence> = match config.mode {
        DatasetMode::Train => select_training_sentences(corpus).collect(),
        DatasetMode::Test | DatasetMode::Supervised => corpus.iter().collect(),
    };
    let mut points = Vec::new();
    for sentence in sentences {
        let sets = match config.mode {
            DatasetMode::Train => positive_sets(kb, sentence, config.cap, true),
            DatasetMode::Test => positive_sets(kb, sentence, config.cap, false),
            DatasetMode::Supervised => sentence
                .mentions
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let pid = point_id(&sentence.id, i);
                    let gold = m.gold.as_ref().ok_or_else(|| CandidateError::MissingGold(pid.clone()))?;
                    let g = kb
                        .index_of(gold.as_str())
                        .ok_or_else(|| CandidateError::UnknownGold { point: pid, gold: gold.0.clone() })?;
                    Ok(vec![g])
                })
                .collect::<Result<_, CandidateError>>()?,
        };
        for (i, (mention, positive)) in sentence.mentions.iter().zip(sets).enumerate() {
            let negative = match config.mode {
                DatasetMode::Test => Vec::new(),
                DatasetMode::Train | DatasetMode::Supervised => {
                    sample_negatives(kb, &positive, config.n_neg, rng)?
                }
            };
            let mut mention = mention.clone();
            mention.sentence_id = sentence.id.clone();
            let positive = ids(kb, &positive);
            let noise_label = mention.gold.as_ref().map(|g| !positive.contains(g));
            points.push(DataPoint { mention, mention_index: i, positive, negative: ids(kb, &negative), noise_label });
        }
    }
    Ok(points)
}

/// Fraction of points whose E+, truncated to `cap`, contains the gold entity.
/// Every point must carry a gold entity. An empty list has recall 0.
pub fn oracle_recall(points: &[DataPoint], cap: usize) -> Result<f64, CandidateError> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for p in points {
        let gold = p.mention.gold.as_ref().ok_or_else(|| CandidateError::MissingGold(p.point_id()))?;
        if p.positive.iter().take(cap).any(|e| e == gold) {
            hits += 1;
        }
    }
    Ok(hits as f64 / points.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct CorpusRecord {
    v: u32,
    id: String,
    tokens: Vec<String>,
    mentions: Vec<Mention>,
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<Sentence>, CandidateError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |detail: String| CandidateError::Format { file: "corpus", line: i + 1, detail };
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        if rec.v != CORPUS_VERSION {
            return Err(fail(format!("unsupported corpus record version {}", rec.v)));
        }
        let mut sentence = Sentence { id: rec.id, tokens: rec.tokens, mentions: rec.mentions };
        for m in &mut sentence.mentions {
            m.sentence_id = sentence.id.clone();
        }
        sentence.validate().map_err(fail)?;
        out.push(sentence);
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &[Sentence]) -> std::io::Result<()> {
    for s in corpus {
        let rec = CorpusRecord { v: CORPUS_VERSION, id: s.id.clone(), tokens: s.tokens.clone(), mentions: s.mentions.clone() };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct DataPointRecord {
    v: u32,
    sentence_id: String,
    mention: usize,
    span: (usize, usize),
    positive: Vec<EntityId>,
    negative: Vec<EntityId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_label: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<EntityId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ne_type: Option<NeType>,
}

pub fn write_datapoints<W: Write>(mut w: W, points: &[DataPoint]) -> std::io::Result<()> {
    for p in points {
        let rec = DataPointRecord {
            v: DATAPOINT_VERSION,
            sentence_id: p.mention.sentence_id.clone(),
            mention: p.mention_index,
            span: p.mention.span,
            positive: p.positive.clone(),
            negative: p.negative.clone(),
            noise_label: p.noise_label,
            gold: p.mention.gold.clone(),
            ne_type: p.mention.ne_type,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_datapoints<R: BufRead>(r: R) -> Result<Vec<DataPoint>, CandidateError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |detail: String| CandidateError::Format { file: "datapoints", line: i + 1, detail };
        let rec: DataPointRecord = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        if rec.v != DATAPOINT_VERSION {
            return Err(fail(format!("unsupported data point record version {}", rec.v)));
        }
        if rec.positive.iter().any(|e| rec.negative.contains(e)) {
            return Err(fail("E+ and E- overlap".into()));
        }
        out.push(DataPoint {
            mention: Mention { sentence_id: rec.sentence_id, span: rec.span, ne_type: rec.ne_type, gold: rec.gold },
            mention_index: rec.mention,
            positive: rec.positive,
            negative: rec.negative,
            noise_label: rec.noise_label,
        });
    }
    Ok(out)
}

/// Sidecar of ground-truth noise labels: `point id <TAB> true|false` per line.
pub fn write_noise_labels<'a, W: Write>(
    mut w: W,
    labels: impl IntoIterator<Item = (&'a str, bool)>,
) -> std::io::Result<()> {
    for (id, noisy) in labels {
        writeln!(w, "{id}\t{noisy}")?;
    }
    Ok(())
}

pub fn read_noise_labels<R: BufRead>(r: R) -> Result<HashMap<String, bool>, CandidateError> {
    let mut out = HashMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |detail: String| CandidateError::Format { file: "noise labels", line: i + 1, detail };
        let (id, value) = line.split_once('\t').ok_or_else(|| fail("expected id<TAB>bool".into()))?;
        let value: bool = value.trim().parse().map_err(|_| fail(format!("not a boolean: {value}")))?;
        out.insert(id.to_string(), value);
    }
    Ok(out)
}
