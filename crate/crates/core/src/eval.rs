//! Test-time linking (with optional abstention) and the micro P/R/F1,
//! per-NE-type, and noise-detector analyses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::argmax_first;
use crate::candidates::{DataPoint, NeType, Sentence};
use crate::kb::{normalize_tokens, EntityId, KnowledgeBase};
use crate::model::{ElModel, EntityTypes, Instance, ModelError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub point_id: String,
    /// `None` when E+ is empty or the model abstained.
    pub predicted: Option<EntityId>,
    pub p_noise: Option<f64>,
    pub best_score: Option<f64>,
}

/// Model outputs for one instance, reusable across abstention thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct PointScores {
    pub point_id: String,
    /// E+ in prominence order.
    pub positive: Vec<EntityId>,
    pub scores: Vec<f64>,
    pub p_noise: Option<f64>,
}

impl PointScores {
    /// Argmax over E+ (first in prominence order on ties); abstains when
    /// `tau` is given and `p_noise > tau`.
    pub fn decide(&self, tau: Option<f64>) -> Prediction {
        let mut pred =
            Prediction { point_id: self.point_id.clone(), predicted: None, p_noise: self.p_noise, best_score: None };
        if self.scores.is_empty() {
            return pred;
        }
        let best = argmax_first(&self.scores);
        pred.best_score = Some(self.scores[best]);
        let abstain = matches!((tau, self.p_noise), (Some(t), Some(p)) if p > t);
        if !abstain {
            pred.predicted = Some(self.positive[best].clone());
        }
        pred
    }
}

pub fn score_points(
    model: &ElModel,
    kb: &KnowledgeBase,
    types: &EntityTypes,
    instances: &[Instance],
) -> Result<Vec<PointScores>, ModelError> {
    instances
        .iter()
        .map(|inst| {
            let (scores, p_noise) = model.evaluate_point(types, inst)?;
            Ok(PointScores {
                point_id: inst.point_id.clone(),
                positive: inst.positive.iter().map(|&e| kb.id_of(e).clone()).collect(),
                scores,
                p_noise,
            })
        })
        .collect()
}

/// Picks the highest-scoring entity of E+.
pub fn link(model: &ElModel, kb: &KnowledgeBase, types: &EntityTypes, inst: &Instance) -> Result<Prediction, ModelError> {
    Ok(score_points(model, kb, types, std::slice::from_ref(inst))?.remove(0).decide(None))
}

/// Like [`link`], but emits nothing when `p_N(1 | m, c, E+) > tau`.
pub fn link_with_abstain(
    model: &ElModel,
    kb: &KnowledgeBase,
    types: &EntityTypes,
    inst: &Instance,
    tau: f64,
) -> Result<Prediction, ModelError> {
    Ok(score_points(model, kb, types, std::slice::from_ref(inst))?.remove(0).decide(Some(tau)))
}

/// Baseline: the first E+ entity (by prominence) whose name equals the
/// mention, else the first E+ entity.
pub fn name_matching(kb: &KnowledgeBase, sentence: &Sentence, point: &DataPoint) -> Prediction {
    let surface = normalize_tokens(sentence.mention_tokens(&point.mention).iter().map(String::as_str));
    let exact = point.positive.iter().find(|id| kb.index_of(id.as_str()).is_some_and(|e| kb.entity(e).name_tokens == surface));
    Prediction {
        point_id: point.point_id(),
        predicted: exact.or(point.positive.first()).cloned(),
        p_noise: None,
        best_score: None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    /// Every mention counts.
    All,
    /// Only mentions whose E+ contains the gold entity.
    InEPlus,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::All => "all",
            Setting::InEPlus => "in-e-plus",
        }
    }
}

/// What evaluation needs to know about each mention.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldRecord {
    pub point_id: String,
    pub gold: EntityId,
    pub gold_in_positive: bool,
    pub ne_type: Option<NeType>,
}

impl GoldRecord {
    fn in_setting(&self, setting: Setting) -> bool {
        setting == Setting::All || self.gold_in_positive
    }
}

pub fn gold_records(kb: &KnowledgeBase, instances: &[Instance]) -> Result<Vec<GoldRecord>, ModelError> {
    instances
        .iter()
        .map(|inst| {
            let gold = inst
                .gold
                .clone()
                .ok_or_else(|| ModelError::Data(format!("{} has no gold entity", inst.point_id)))?;
            Ok(GoldRecord {
                point_id: inst.point_id.clone(),
                gold_in_positive: inst.gold_in_positive(kb).unwrap_or(false),
                gold,
                ne_type: inst.ne_type,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_mentions: usize,
    pub n_emitted: usize,
    pub n_correct: usize,
    pub per_type_error: BTreeMap<NeType, f64>,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro precision (correct / emitted), recall (correct / mentions) and F1
/// over the mentions of `setting`. `predictions[i]` belongs to `golds[i]`.
pub fn evaluate(predictions: &[Prediction], golds: &[GoldRecord], setting: Setting) -> EvalReport {
    assert_eq!(predictions.len(), golds.len(), "one prediction per gold record");
    let (mut n, mut emitted, mut correct) = (0, 0, 0);
    for (p, g) in predictions.iter().zip(golds) {
        if !g.in_setting(setting) {
            continue;
        }
        n += 1;
        if let Some(e) = &p.predicted {
            emitted += 1;
            if *e == g.gold {
                correct += 1;
            }
        }
    }
    let precision = ratio(correct, emitted);
    let recall = ratio(correct, n);
    EvalReport {
        setting,
        precision,
        recall,
        f1: f1_score(precision, recall),
        n_mentions: n,
        n_emitted: emitted,
        n_correct: correct,
        per_type_error: per_type_errors(predictions, golds, setting),
    }
}

/// `1 - correct / mentions` for every NE type present in the setting.
pub fn per_type_errors(predictions: &[Prediction], golds: &[GoldRecord], setting: Setting) -> BTreeMap<NeType, f64> {
    let mut counts: BTreeMap<NeType, (usize, usize)> = BTreeMap::new();
    for (p, g) in predictions.iter().zip(golds) {
        let Some(t) = g.ne_type else { continue };
        if !g.in_setting(setting) {
            continue;
        }
        let entry = counts.entry(t).or_default();
        entry.1 += 1;
        if p.predicted.as_ref() == Some(&g.gold) {
            entry.0 += 1;
        }
    }
    counts.into_iter().map(|(t, (c, n))| (t, 1.0 - c as f64 / n as f64)).collect()
}

/// For each threshold, `#valid with p < tau / #all with p < tau`; `None`
/// where no point falls below the threshold.
pub fn nd_accuracy_curve(points: &[(f64, bool)], grid: &[f64]) -> Vec<(f64, Option<f64>)> {
    grid.iter()
        .map(|&tau| {
            let below: Vec<bool> = points.iter().filter(|(p, _)| *p < tau).map(|&(_, valid)| valid).collect();
            let acc = if below.is_empty() {
                None
            } else {
                Some(below.iter().filter(|&&v| v).count() as f64 / below.len() as f64)
            };
            (tau, acc)
        })
        .collect()
}

/// The threshold grid {0.1, 0.2, ..., 0.9}.
pub fn default_tau_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Human-readable table of reports, one row per (system, report).
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:<10} {:>7} {:>7} {:>7} {:>8} {:>8} {:>8}  {}\n",
        "system", "setting", "P", "R", "F1", "mentions", "emitted", "correct", "errors by type (%)"
    ));
    for (system, r) in rows {
        let types: Vec<String> =
            r.per_type_error.iter().map(|(t, e)| format!("{}={:.2}", t.as_str(), 100.0 * e)).collect();
        out.push_str(&format!(
            "{:<16} {:<10} {:>7.2} {:>7.2} {:>7.2} {:>8} {:>8} {:>8}  {}\n",
            system,
            r.setting.as_str(),
            100.0 * r.precision,
            100.0 * r.recall,
            100.0 * r.f1,
            r.n_mentions,
            r.n_emitted,
            r.n_correct,
            types.join(" ")
        ));
    }
    out
}
