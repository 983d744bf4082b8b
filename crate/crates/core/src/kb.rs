//! Knowledge base: entity names and types, relation triples, and the two
//! indexes candidate generation needs (an inverted token index over names and
//! an undirected relation adjacency).
//!
//! Entities are addressed internally by their prominence, i.e. their zero-based
//! position in the entity file. A KB is immutable once built.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub String);

impl EntityId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::borrow::Borrow<str> for EntityId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        EntityId(s.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub id: EntityId,
    pub name_tokens: Vec<String>,
    /// Sorted, deduplicated.
    pub types: Vec<String>,
    pub prominence: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationTriple {
    pub subject: EntityId,
    pub predicate: String,
    pub object: EntityId,
}

/// What to do with a triple whose endpoint is not in the entity table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DanglingPolicy {
    Error,
    #[default]
    SkipWithWarning,
}

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("{file} line {line}: {detail}")]
    Malformed { file: &'static str, line: usize, detail: String },
    #[error("entities line {line}: duplicate entity id {id}")]
    DuplicateId { line: usize, id: String },
    #[error("relations line {line}: unknown entity id {id}")]
    DanglingRelation { line: usize, id: String },
    #[error("unknown entity id {0}")]
    UnknownEntity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercases tokens and drops tokens made only of punctuation.
pub fn normalize_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    tokens
        .into_iter()
        .filter(|t| t.chars().any(|c| !c.is_ascii_punctuation() && !c.is_whitespace()))
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub skipped_relations: usize,
}

#[derive(Clone, Debug)]
pub struct KnowledgeBase {
    entities: Vec<Entity>,
    index_of: HashMap<EntityId, usize>,
    triples: Vec<RelationTriple>,
    token_index: HashMap<String, Vec<usize>>,
    adjacency: Vec<Vec<usize>>,
}

impl KnowledgeBase {
    /// Builds and indexes a KB. Entities are given in prominence order as
    /// `(id, surface name, types)`; triples as `(subject, predicate, object)`.
    pub fn build(
        entities: Vec<(String, String, Vec<String>)>,
        triples: Vec<(String, String, String)>,
        policy: DanglingPolicy,
    ) -> Result<(Self, LoadStats), KbError> {
        let mut table = Vec::with_capacity(entities.len());
        let mut index_of = HashMap::with_capacity(entities.len());
        for (line, (id, name, types)) in entities.into_iter().enumerate() {
            let name_tokens = normalize_tokens(name.split_whitespace());
            if id.is_empty() {
                return Err(KbError::Malformed { file: "entities", line: line + 1, detail: "empty id".into() });
            }
            if name_tokens.is_empty() {
                return Err(KbError::Malformed {
                    file: "entities",
                    line: line + 1,
                    detail: format!("entity {id} has no name tokens"),
                });
            }
            let id = EntityId(id);
            if index_of.insert(id.clone(), line).is_some() {
                return Err(KbError::DuplicateId { line: line + 1, id: id.0 });
            }
            let mut types: Vec<String> = types.into_iter().filter(|t| !t.is_empty()).collect();
            types.sort();
            types.dedup();
            table.push(Entity { id, name_tokens, types, prominence: line });
        }

        let mut token_index: HashMap<String, Vec<usize>> = HashMap::new();
        for e in &table {
            let unique: HashSet<&String> = e.name_tokens.iter().collect();
            for t in unique {
                token_index.entry(t.clone()).or_default().push(e.prominence);
            }
        }

        let mut stats = LoadStats::default();
        let mut adjacency = vec![Vec::new(); table.len()];
        let mut kept = Vec::with_capacity(triples.len());
        for (line, (s, p, o)) in triples.into_iter().enumerate() {
            let ends = [index_of.get(s.as_str()).copied(), index_of.get(o.as_str()).copied()];
            match ends {
                [Some(a), Some(b)] => {
                    adjacency[a].push(b);
                    adjacency[b].push(a);
                    kept.push(RelationTriple { subject: EntityId(s), predicate: p, object: EntityId(o) });
                }
                _ => {
                    let missing = if ends[0].is_none() { s } else { o };
                    match policy {
                        DanglingPolicy::Error => {
                            return Err(KbError::DanglingRelation { line: line + 1, id: missing })
                        }
                        DanglingPolicy::SkipWithWarning => {
                            log::warn!("relations line {}: skipping triple with unknown entity {missing}", line + 1);
                            stats.skipped_relations += 1;
                        }
                    }
                }
            }
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
            adj.dedup();
        }

        Ok((KnowledgeBase { entities: table, index_of, triples: kept, token_index, adjacency }, stats))
    }

    /// Parses the tab-separated entity and relation files.
    pub fn load<E: BufRead, R: BufRead>(
        entity_stream: E,
        relation_stream: R,
        policy: DanglingPolicy,
    ) -> Result<(Self, LoadStats), KbError> {
        let mut entities = Vec::new();
        for (i, line) in entity_stream.lines().enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(KbError::Malformed {
                    file: "entities",
                    line: i + 1,
                    detail: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let types = fields[2].split(',').map(|t| t.trim().to_string()).collect();
            entities.push((fields[0].trim().to_string(), fields[1].to_string(), types));
        }
        let mut triples = Vec::new();
        for (i, line) in relation_stream.lines().enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.trim().is_empty()) {
                return Err(KbError::Malformed {
                    file: "relations",
                    line: i + 1,
                    detail: "expected subject, predicate and object separated by tabs".into(),
                });
            }
            triples.push((fields[0].trim().to_string(), fields[1].trim().to_string(), fields[2].trim().to_string()));
        }
        Self::build(entities, triples, policy)
    }

    pub fn write_entities<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.entities {
            writeln!(w, "{}\t{}\t{}", e.id, e.name_tokens.join(" "), e.types.join(","))?;
        }
        Ok(())
    }

    pub fn write_relations<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for t in &self.triples {
            writeln!(w, "{}\t{}\t{}", t.subject, t.predicate, t.object)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, prominence: usize) -> &Entity {
        &self.entities[prominence]
    }

    pub fn triples(&self) -> &[RelationTriple] {
        &self.triples
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index_of.get(id).copied()
    }

    pub fn resolve(&self, id: &str) -> Result<usize, KbError> {
        self.index_of(id).ok_or_else(|| KbError::UnknownEntity(id.to_string()))
    }

    pub fn id_of(&self, prominence: usize) -> &EntityId {
        &self.entities[prominence].id
    }

    /// Posting list for a normalized token, ascending by prominence.
    pub fn postings(&self, token: &str) -> &[usize] {
        self.token_index.get(token).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn vocabulary_size(&self) -> usize {
        self.token_index.len()
    }

    pub fn neighbors(&self, prominence: usize) -> &[usize] {
        &self.adjacency[prominence]
    }

    /// Number of entities taking part in at least one triple.
    pub fn adjacency_len(&self) -> usize {
        self.adjacency.iter().filter(|a| !a.is_empty()).count()
    }

    /// Every entity whose name contains all of the mention's words, ascending
    /// by prominence. Matching is set-based over normalized tokens.
    pub fn match_by_name<S: AsRef<str>>(&self, mention_tokens: &[S]) -> Vec<usize> {
        let mut tokens = normalize_tokens(mention_tokens.iter().map(AsRef::as_ref));
        tokens.sort();
        tokens.dedup();
        if tokens.is_empty() {
            return Vec::new();
        }
        let mut lists: Vec<&[usize]> = tokens.iter().map(|t| self.postings(t)).collect();
        lists.sort_by_key(|l| l.len());
        let mut result = lists[0].to_vec();
        for list in &lists[1..] {
            result.retain(|e| list.binary_search(e).is_ok());
            if result.is_empty() {
                break;
            }
        }
        result
    }

    pub fn match_ids<S: AsRef<str>>(&self, mention_tokens: &[S]) -> Vec<EntityId> {
        self.match_by_name(mention_tokens).into_iter().map(|e| self.id_of(e).clone()).collect()
    }

    /// True iff some triple links the two entities, in either direction.
    pub fn related_idx(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    pub fn related(&self, a: &str, b: &str) -> Result<bool, KbError> {
        Ok(self.related_idx(self.resolve(a)?, self.resolve(b)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ENTITIES: &str = "\
m.bill_clinton\tBill Clinton\tpeople.person,government.politician
m.presidency\tPresidency of Bill Clinton\tgovernment.presidency
m.usa\tUnited States of America\tlocation.country
m.america_song\tAmerica\tmusic.composition
m.bill_clinton_ep\tBill Clinton\ttv.tv_series_episode,base.type_ontology.non_agent
";
    const RELATIONS: &str = "m.bill_clinton\tperson.person.nationality\tm.usa\n";

    fn kb() -> KnowledgeBase {
        KnowledgeBase::load(ENTITIES.as_bytes(), RELATIONS.as_bytes(), DanglingPolicy::Error).unwrap().0
    }

    #[test]
    fn small_kb_counts() {
        let ents = "a\tAlpha\tt1\nb\tBeta\t\nc\tGamma Beta\tt2,t1\n";
        let (kb, _) =
            KnowledgeBase::load(ents.as_bytes(), "a\tp\tb\n".as_bytes(), DanglingPolicy::Error).unwrap();
        assert_eq!(kb.len(), 3);
        assert_eq!(kb.adjacency_len(), 2);
        assert!(kb.entity(1).types.is_empty());
        assert_eq!(kb.entity(2).types, vec!["t1", "t2"]);
        assert_eq!(kb.entity(2).prominence, 2);
    }

    #[test]
    fn empty_relation_stream() {
        let (kb, _) = KnowledgeBase::load(ENTITIES.as_bytes(), "".as_bytes(), DanglingPolicy::Error).unwrap();
        assert_eq!(kb.adjacency_len(), 0);
        assert_eq!(kb.match_by_name(&["america"]), vec![2, 3]);
        assert!(!kb.related("m.bill_clinton", "m.usa").unwrap());
    }

    #[test]
    fn dangling_relation_strict_names_the_id() {
        let err = KnowledgeBase::load(ENTITIES.as_bytes(), "m.usa\tp\tm.nowhere\n".as_bytes(), DanglingPolicy::Error)
            .unwrap_err();
        assert!(err.to_string().contains("m.nowhere"), "{err}");
    }

    #[test]
    fn dangling_relation_skipped_by_default() {
        let (kb, stats) = KnowledgeBase::load(
            ENTITIES.as_bytes(),
            "m.usa\tp\tm.nowhere\nm.usa\tp\tm.america_song\n".as_bytes(),
            DanglingPolicy::default(),
        )
        .unwrap();
        assert_eq!(stats.skipped_relations, 1);
        assert_eq!(kb.triples().len(), 1);
    }

    #[test]
    fn malformed_record_reports_line() {
        let err = KnowledgeBase::load("a\tAlpha\t\nbroken line\n".as_bytes(), "".as_bytes(), DanglingPolicy::Error)
            .unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn bill_clinton_matches_both_names_containing_both_words() {
        let kb = kb();
        let ids = kb.match_ids(&["Bill", "Clinton"]);
        let ids: Vec<&str> = ids.iter().map(EntityId::as_str).collect();
        assert_eq!(ids, vec!["m.bill_clinton", "m.presidency", "m.bill_clinton_ep"]);
    }

    #[test]
    fn america_matches_nation_and_song() {
        let kb = kb();
        let ids = kb.match_ids(&["America"]);
        assert_eq!(ids, vec![EntityId::from("m.usa"), EntityId::from("m.america_song")]);
    }

    #[test]
    fn absent_token_matches_nothing() {
        assert!(kb().match_by_name(&["zanzibar"]).is_empty());
    }

    #[test]
    fn duplicate_and_punctuation_tokens_are_ignored() {
        let kb = kb();
        assert_eq!(kb.match_by_name(&["clinton", "CLINTON", ","]), kb.match_by_name(&["clinton"]));
    }

    #[test]
    fn nationality_triple_relates_both_directions() {
        let kb = kb();
        assert!(kb.related("m.bill_clinton", "m.usa").unwrap());
        assert!(kb.related("m.usa", "m.bill_clinton").unwrap());
        assert!(!kb.related("m.usa", "m.usa").unwrap());
        assert!(kb.related("m.usa", "m.unknown").is_err());
    }
}
