use milel::candidates::NeType;
use milel::eval::*;
use milel::kb::EntityId;
use proptest::prelude::*;

fn id(i: usize) -> EntityId {
    EntityId(format!("e{i}"))
}

#[derive(Clone, Debug)]
struct Row {
    gold: usize,
    in_positive: bool,
    positive: Vec<usize>,
    scores: Vec<f64>,
    p_noise: f64,
}

fn row() -> impl Strategy<Value = Row> {
    (0usize..4, any::<bool>(), prop::collection::vec(0usize..4, 0..4), 0.0f64..1.0).prop_flat_map(|(gold, inp, pos, p)| {
        let n = pos.len();
        prop::collection::vec(-2.0f64..2.0, n).prop_map(move |scores| Row {
            gold,
            in_positive: inp,
            positive: pos.clone(),
            scores,
            p_noise: p,
        })
    })
}

fn materialize(rows: &[Row]) -> (Vec<PointScores>, Vec<GoldRecord>) {
    let scores = rows
        .iter()
        .enumerate()
        .map(|(i, r)| PointScores {
            point_id: format!("p{i}"),
            positive: r.positive.iter().map(|&e| id(e)).collect(),
            scores: r.scores.clone(),
            p_noise: Some(r.p_noise),
        })
        .collect();
    let golds = rows
        .iter()
        .enumerate()
        .map(|(i, r)| GoldRecord {
            point_id: format!("p{i}"),
            gold: id(r.gold),
            gold_in_positive: r.in_positive,
            ne_type: Some(NeType::ALL[i % 4]),
        })
        .collect();
    (scores, golds)
}

/// Reference: one pass per quantity, no shared bookkeeping.
fn reference(preds: &[Prediction], golds: &[GoldRecord], setting: Setting) -> (f64, f64, f64) {
    let keep = |g: &GoldRecord| setting == Setting::All || g.gold_in_positive;
    let mentions = golds.iter().filter(|g| keep(g)).count();
    let emitted = preds.iter().zip(golds).filter(|(p, g)| keep(g) && p.predicted.is_some()).count();
    let correct = preds.iter().zip(golds).filter(|(p, g)| keep(g) && p.predicted.as_ref() == Some(&g.gold)).count();
    let p = if emitted == 0 { 0.0 } else { correct as f64 / emitted as f64 };
    let r = if mentions == 0 { 0.0 } else { correct as f64 / mentions as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

proptest! {
    #[test]
    fn evaluate_matches_reference(rows in prop::collection::vec(row(), 0..100), tau in prop::option::of(0.0f64..1.0)) {
        let (scores, golds) = materialize(&rows);
        let preds: Vec<Prediction> = scores.iter().map(|s| s.decide(tau)).collect();
        for setting in [Setting::All, Setting::InEPlus] {
            let rep = evaluate(&preds, &golds, setting);
            let (p, r, f) = reference(&preds, &golds, setting);
            prop_assert_eq!((rep.precision, rep.recall), (p, r));
            prop_assert!((rep.f1 - f).abs() < 1e-12);
        }
    }

    #[test]
    fn f1_lies_between_precision_and_recall(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
        let f = f1_score(p, r);
        prop_assert_eq!(f, f1_score(r, p));
        prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
    }

    #[test]
    fn abstention_only_removes_predictions(rows in prop::collection::vec(row(), 1..100), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (scores, golds) = materialize(&rows);
        let at = |t: f64| scores.iter().map(|s| s.decide(Some(t))).collect::<Vec<_>>();
        let (p_lo, p_hi) = (at(lo), at(hi));
        for (a, b) in p_lo.iter().zip(&p_hi) {
            if a.predicted.is_some() {
                prop_assert_eq!(&a.predicted, &b.predicted);
            }
        }
        let never: Vec<_> = scores.iter().map(|s| s.decide(None)).collect();
        let r_never = evaluate(&never, &golds, Setting::All).recall;
        prop_assert!(evaluate(&p_hi, &golds, Setting::All).recall <= r_never);
        prop_assert!(evaluate(&p_lo, &golds, Setting::All).recall <= evaluate(&p_hi, &golds, Setting::All).recall);
    }

    #[test]
    fn in_e_plus_recall_is_selection_accuracy(rows in prop::collection::vec(row(), 1..100)) {
        let rows: Vec<Row> = rows
            .into_iter()
            .filter(|r| !r.positive.is_empty())
            .map(|mut r| {
                r.in_positive = r.positive.contains(&r.gold);
                r
            })
            .collect();
        let (scores, golds) = materialize(&rows);
        let preds: Vec<_> = scores.iter().map(|s| s.decide(None)).collect();
        let rep = evaluate(&preds, &golds, Setting::InEPlus);
        let answerable: Vec<_> = preds.iter().zip(&golds).filter(|(_, g)| g.gold_in_positive).collect();
        let accuracy = if answerable.is_empty() {
            0.0
        } else {
            answerable.iter().filter(|(p, g)| p.predicted.as_ref() == Some(&g.gold)).count() as f64 / answerable.len() as f64
        };
        prop_assert_eq!(rep.recall, accuracy);
    }

    #[test]
    fn nd_curve_matches_counting(points in prop::collection::vec((0.0f64..1.0, any::<bool>()), 0..50)) {
        let grid = default_tau_grid();
        for (tau, acc) in nd_accuracy_curve(&points, &grid) {
            let below: Vec<_> = points.iter().filter(|(p, _)| *p < tau).collect();
            let expected = (!below.is_empty()).then(|| below.iter().filter(|(_, v)| *v).count() as f64 / below.len() as f64);
            prop_assert_eq!(acc, expected);
        }
    }
}
