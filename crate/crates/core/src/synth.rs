//! Synthetic knowledge bases and corpora with known gold links and a
//! controlled fraction of noisy mentions.
//!
//! Entity names are two tokens drawn from a small shared pool, so a
//! one-token mention matches many entities. Each type owns a few cue tokens;
//! a mention is preceded by a cue of its entity's first type and followed by
//! a cue of its second, so the context reveals the gold types. Each sentence
//! mentions the two ends of a relation triple.
//!
//! A noisy mention keeps the cues of its gold entity but shows a name token of
//! a decoy entity that does not occur in the gold name. The decoy is related
//! to what the other mention resolves to, so it survives the relation filter.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::candidates::{point_id, write_corpus, write_noise_labels, Mention, NeType, Sentence};
use crate::kb::{DanglingPolicy, EntityId, KbError, KnowledgeBase};
use crate::vocab::write_word_vectors;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_types: usize,
    pub types_per_entity: usize,
    /// Number of relation triples.
    pub n_relations: usize,
    pub n_predicates: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Only 2 is supported: the two ends of a relation triple.
    pub mentions_per_sentence: usize,
    /// Number of filler words.
    pub vocab_size: usize,
    /// Number of distinct name tokens.
    pub name_pool: usize,
    pub cues_per_type: usize,
    /// Probability that a mention shows the full two-token name.
    pub full_name_rate: f64,
    /// Probability that a mention is noisy.
    pub noise_rate: f64,
    /// Emit type cues around mentions (off for the ablation).
    pub cues: bool,
    /// Dimension of the emitted word vectors.
    pub vector_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_entities: 500,
            n_types: 10,
            types_per_entity: 2,
            n_relations: 1000,
            n_predicates: 10,
            n_train: 2000,
            n_dev: 300,
            n_test: 300,
            mentions_per_sentence: 2,
            vocab_size: 200,
            name_pool: 100,
            cues_per_type: 2,
            full_name_rate: 0.15,
            noise_rate: 0.4,
            cues: true,
            vector_dim: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, SynthError>;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_entities", self.n_entities),
            ("n_types", self.n_types),
            ("types_per_entity", self.types_per_entity),
            ("n_relations", self.n_relations),
            ("n_predicates", self.n_predicates),
            ("n_train", self.n_train),
            ("vocab_size", self.vocab_size),
            ("name_pool", self.name_pool),
            ("cues_per_type", self.cues_per_type),
            ("vector_dim", self.vector_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(SynthError::Config(format!("{name} must be positive")));
            }
        }
        let fail = |msg: String| Err(SynthError::Config(msg));
        if self.mentions_per_sentence != 2 {
            return fail("mentions_per_sentence must be 2".into());
        }
        if self.types_per_entity > self.n_types {
            return fail(format!("types_per_entity {} exceeds n_types {}", self.types_per_entity, self.n_types));
        }
        let names = self.name_pool * (self.name_pool - 1);
        if self.n_entities > names {
            return fail(format!(
                "{} entities need distinct names but a pool of {} tokens gives only {names}",
                self.n_entities, self.name_pool
            ));
        }
        if self.n_entities < 2 {
            return fail("need at least 2 entities".into());
        }
        let pairs = self.n_entities * (self.n_entities - 1) / 2;
        if self.n_relations > pairs / 2 {
            return fail(format!("{} relations is too dense for {} entities", self.n_relations, self.n_entities));
        }
        for (name, p) in [("noise_rate", self.noise_rate), ("full_name_rate", self.full_name_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

fn type_name(t: usize) -> String {
    format!("type{t:02}")
}

fn name_token(i: usize) -> String {
    format!("n{i}")
}

fn cue_token(t: usize, j: usize) -> String {
    format!("cue{t}_{j}")
}

fn filler_token(i: usize) -> String {
    format!("w{i}")
}

/// NE class derived from an entity's first type.
pub fn ne_class(t: usize) -> NeType {
    NeType::ALL[t % NeType::ALL.len()]
}

/// A generated KB together with the ordered type list of every entity
/// (the KB itself stores types sorted).
#[derive(Clone, Debug)]
pub struct SynthKb {
    pub kb: KnowledgeBase,
    /// Type indices per entity, first type first, by prominence.
    pub entity_types: Vec<Vec<usize>>,
}

pub fn generate_kb(config: &SynthConfig) -> Result<SynthKb> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pairs: Vec<(usize, usize)> =
        (0..config.name_pool).flat_map(|a| (0..config.name_pool).filter(move |&b| b != a).map(move |b| (a, b))).collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(config.n_entities);

    let all_types: Vec<usize> = (0..config.n_types).collect();
    let mut entities = Vec::with_capacity(config.n_entities);
    let mut entity_types = Vec::with_capacity(config.n_entities);
    for (i, &(a, b)) in pairs.iter().enumerate() {
        let types: Vec<usize> = all_types.choose_multiple(&mut rng, config.types_per_entity).copied().collect();
        entities.push((
            format!("m.{i:05}"),
            format!("{} {}", name_token(a), name_token(b)),
            types.iter().map(|&t| type_name(t)).collect(),
        ));
        entity_types.push(types);
    }

    let mut seen = std::collections::HashSet::new();
    let mut triples = Vec::with_capacity(config.n_relations);
    while triples.len() < config.n_relations {
        let s = rng.gen_range(0..config.n_entities);
        let o = rng.gen_range(0..config.n_entities);
        if s == o || !seen.insert((s.min(o), s.max(o))) {
            continue;
        }
        let p = rng.gen_range(0..config.n_predicates);
        triples.push((entities[s].0.clone(), format!("rel{p}"), entities[o].0.clone()));
    }
    let (kb, _) = KnowledgeBase::build(entities, triples, DanglingPolicy::Error)?;
    Ok(SynthKb { kb, entity_types })
}

/// Sentences of one split plus the ground-truth noise label of every mention.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub sentences: Vec<Sentence>,
    pub noise_labels: Vec<(String, bool)>,
}

impl SynthCorpus {
    pub fn noise_fraction(&self) -> f64 {
        if self.noise_labels.is_empty() {
            return 0.0;
        }
        self.noise_labels.iter().filter(|(_, n)| *n).count() as f64 / self.noise_labels.len() as f64
    }
}

struct Generator<'a> {
    config: &'a SynthConfig,
    kb: &'a KnowledgeBase,
    types: &'a [Vec<usize>],
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn tokens_outside(&self, decoy: usize, gold: usize) -> Vec<String> {
        let gold_name = &self.kb.entity(gold).name_tokens;
        self.kb.entity(decoy).name_tokens.iter().filter(|t| !gold_name.contains(t)).cloned().collect()
    }

    /// Decoy for a noisy mention of `gold` whose partner resolves to `anchor`.
    fn decoy_near(&mut self, gold: usize, anchor: usize) -> Option<usize> {
        let options: Vec<usize> = self
            .kb
            .neighbors(anchor)
            .iter()
            .copied()
            .filter(|&x| x != gold && !self.tokens_outside(x, gold).is_empty())
            .collect();
        options.choose(&mut self.rng).copied()
    }

    /// Decoys for two noisy mentions: the ends of some other relation triple.
    fn decoy_pair(&mut self, g1: usize, g2: usize) -> Option<(usize, usize)> {
        for _ in 0..200 {
            let t = &self.kb.triples()[self.rng.gen_range(0..self.kb.triples().len())];
            let (mut a, mut b) = (self.kb.index_of(t.subject.as_str())?, self.kb.index_of(t.object.as_str())?);
            if self.rng.gen_bool(0.5) {
                std::mem::swap(&mut a, &mut b);
            }
            if a == g1 || b == g2 || self.tokens_outside(a, g1).is_empty() || self.tokens_outside(b, g2).is_empty() {
                continue;
            }
            return Some((a, b));
        }
        None
    }

    fn surface(&mut self, gold: usize, decoy: Option<usize>) -> Vec<String> {
        match decoy {
            Some(d) => vec![self.tokens_outside(d, gold).choose(&mut self.rng).expect("checked non-empty").clone()],
            None => {
                let name = &self.kb.entity(gold).name_tokens;
                if self.rng.gen_bool(self.config.full_name_rate) {
                    name.clone()
                } else {
                    vec![name.choose(&mut self.rng).expect("names are non-empty").clone()]
                }
            }
        }
    }

    fn cue(&mut self, entity: usize, slot: usize) -> String {
        let types = &self.types[entity];
        if self.config.cues {
            let t = types[slot.min(types.len() - 1)];
            cue_token(t, self.rng.gen_range(0..self.config.cues_per_type))
        } else {
            self.filler()
        }
    }

    fn filler(&mut self) -> String {
        filler_token(self.rng.gen_range(0..self.config.vocab_size))
    }

    fn sentence(&mut self, id: String) -> (Sentence, [bool; 2]) {
        let triples = self.kb.triples();
        let t = &triples[self.rng.gen_range(0..triples.len())];
        let mut golds = [
            self.kb.index_of(t.subject.as_str()).expect("triple ends are in the KB"),
            self.kb.index_of(t.object.as_str()).expect("triple ends are in the KB"),
        ];
        if self.rng.gen_bool(0.5) {
            golds.swap(0, 1);
        }
        let want_noise = [self.rng.gen_bool(self.config.noise_rate), self.rng.gen_bool(self.config.noise_rate)];
        let decoys = match want_noise {
            [false, false] => [None, None],
            [true, false] => [self.decoy_near(golds[0], golds[1]), None],
            [false, true] => [None, self.decoy_near(golds[1], golds[0])],
            [true, true] => match self.decoy_pair(golds[0], golds[1]) {
                Some((a, b)) => [Some(a), Some(b)],
                None => [None, None],
            },
        };

        let mut tokens = Vec::new();
        let mut mentions = Vec::new();
        for (i, &gold) in golds.iter().enumerate() {
            let lead = if i == 0 { self.rng.gen_range(1..=3) } else { self.rng.gen_range(1..=2) };
            for _ in 0..lead {
                let w = self.filler();
                tokens.push(w);
            }
            let before = self.cue(gold, 0);
            tokens.push(before);
            let surface = self.surface(gold, decoys[i]);
            let h = tokens.len() + 1;
            tokens.extend(surface);
            mentions.push(Mention {
                sentence_id: id.clone(),
                span: (h, tokens.len()),
                ne_type: Some(ne_class(self.types[gold][0])),
                gold: Some(self.kb.id_of(gold).clone()),
            });
            let after = self.cue(gold, 1);
            tokens.push(after);
        }
        for _ in 0..self.rng.gen_range(0..=2) {
            let w = self.filler();
            tokens.push(w);
        }
        (Sentence { id, tokens, mentions }, [decoys[0].is_some(), decoys[1].is_some()])
    }
}

/// Generates `n` sentences with ids `{prefix}-{i}`; `stream` separates the
/// random streams of different splits.
pub fn generate_corpus(synth: &SynthKb, config: &SynthConfig, prefix: &str, n: usize, stream: u64) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream + 1);
    let mut gen = Generator { config, kb: &synth.kb, types: &synth.entity_types, rng };
    let mut sentences = Vec::with_capacity(n);
    let mut noise_labels = Vec::with_capacity(2 * n);
    for i in 0..n {
        let (s, noisy) = gen.sentence(format!("{prefix}-{i:05}"));
        for (j, flag) in noisy.iter().enumerate() {
            noise_labels.push((point_id(&s.id, j), *flag));
        }
        sentences.push(s);
    }
    SynthCorpus { sentences, noise_labels }
}

/// All tokens the generator can emit.
pub fn vocabulary(config: &SynthConfig) -> Vec<String> {
    let mut out: Vec<String> = (0..config.vocab_size).map(filler_token).collect();
    out.extend((0..config.name_pool).map(name_token));
    for t in 0..config.n_types {
        out.extend((0..config.cues_per_type).map(|j| cue_token(t, j)));
    }
    out
}

/// Random uniform(-1, 1) vectors for the whole vocabulary.
pub fn word_vectors(config: &SynthConfig) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0xfeed);
    vocabulary(config)
        .into_iter()
        .map(|w| {
            let v = (0..config.vector_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (w, v)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub kb: SynthKb,
    pub train: SynthCorpus,
    pub dev: SynthCorpus,
    pub test: SynthCorpus,
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    let kb = generate_kb(config)?;
    let train = generate_corpus(&kb, config, "train", config.n_train, 0);
    let dev = generate_corpus(&kb, config, "dev", config.n_dev, 1);
    let test = generate_corpus(&kb, config, "test", config.n_test, 2);
    Ok(SynthDataset { kb, train, dev, test })
}

/// File names written by [`write_dataset`].
pub mod files {
    pub const ENTITIES: &str = "entities.tsv";
    pub const RELATIONS: &str = "relations.tsv";
    pub const VECTORS: &str = "vectors.txt";
    pub const CONFIG: &str = "synth.json";

    pub fn corpus(split: &str) -> String {
        format!("{split}.jsonl")
    }

    pub fn noise(split: &str) -> String {
        format!("{split}.noise.tsv")
    }
}

pub fn write_dataset(dir: &Path, config: &SynthConfig, data: &SynthDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let create = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
    let mut w = create(files::ENTITIES)?;
    data.kb.kb.write_entities(&mut w)?;
    w.flush()?;
    let mut w = create(files::RELATIONS)?;
    data.kb.kb.write_relations(&mut w)?;
    w.flush()?;
    for (split, corpus) in [("train", &data.train), ("dev", &data.dev), ("test", &data.test)] {
        let mut w = create(&files::corpus(split))?;
        write_corpus(&mut w, &corpus.sentences)?;
        w.flush()?;
        let mut w = create(&files::noise(split))?;
        write_noise_labels(&mut w, corpus.noise_labels.iter().map(|(id, n)| (id.as_str(), *n)))?;
        w.flush()?;
    }
    let vectors = word_vectors(config);
    let mut w = create(files::VECTORS)?;
    write_word_vectors(&mut w, vectors.iter().map(|(t, v)| (t.as_str(), v.as_slice())))?;
    w.flush()?;
    let mut w = create(files::CONFIG)?;
    serde_json::to_writer_pretty(&mut w, config).map_err(std::io::Error::from)?;
    w.flush()?;
    Ok(())
}

/// Gold id -> whether the generator made the mention noisy, keyed by point id.
pub fn label_map(corpus: &SynthCorpus) -> HashMap<String, bool> {
    corpus.noise_labels.iter().cloned().collect()
}

/// Gold entity of every mention, keyed by point id.
pub fn gold_map(corpus: &SynthCorpus) -> HashMap<String, EntityId> {
    corpus
        .sentences
        .iter()
        .flat_map(|s| {
            s.mentions.iter().enumerate().filter_map(|(i, m)| m.gold.clone().map(|g| (point_id(&s.id, i), g)))
        })
        .collect()
}
