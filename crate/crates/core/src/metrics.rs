//! Evaluation metrics: triplet Recall@K, mean Recall@K, accuracy,
//! rounds-to-target and communication cost, plus the per-round history
//! records they are reported in.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::semantics::Triplet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("K must be >= 1")]
    ZeroK,
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("invalid prediction for scene `{scene_id}`: {reason}")]
    InvalidPrediction { scene_id: String, reason: String },
}

type Result<T> = std::result::Result<T, MetricError>;

/// Recall cut-offs reported per round.
pub const RECALL_KS: [usize; 3] = [20, 50, 100];

/// Ranked triplet predictions for one scene, scores non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletPrediction {
    pub scene_id: String,
    ranked: Vec<(Triplet, f64)>,
}

impl TripletPrediction {
    /// Accepts an already ranked list, checking the ordering and uniqueness.
    pub fn new(scene_id: impl Into<String>, ranked: Vec<(Triplet, f64)>) -> Result<Self> {
        let scene_id = scene_id.into();
        let invalid = |reason: &str| MetricError::InvalidPrediction {
            scene_id: scene_id.clone(),
            reason: reason.into(),
        };
        if ranked.windows(2).any(|w| w[1].1 > w[0].1) {
            return Err(invalid("scores are not non-increasing"));
        }
        let distinct: BTreeSet<_> = ranked.iter().map(|(t, _)| t).collect();
        if distinct.len() != ranked.len() {
            return Err(invalid("duplicate triplet"));
        }
        Ok(Self { scene_id, ranked })
    }

    /// Ranks scored triplets by score (descending), then triplet order.
    /// Duplicates keep their highest score.
    pub fn from_scores(scene_id: impl Into<String>, scored: Vec<(Triplet, f64)>) -> Self {
        let mut best: BTreeMap<Triplet, f64> = BTreeMap::new();
        for (t, s) in scored {
            best.entry(t).and_modify(|b| *b = b.max(s)).or_insert(s);
        }
        let mut ranked: Vec<_> = best.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Self {
            scene_id: scene_id.into(),
            ranked,
        }
    }

    pub fn ranked(&self) -> &[(Triplet, f64)] {
        &self.ranked
    }

    pub fn top_k(&self, k: usize) -> impl Iterator<Item = &Triplet> {
        self.ranked.iter().take(k).map(|(t, _)| t)
    }
}

fn hits(gt: &BTreeSet<Triplet>, pred: &TripletPrediction, k: usize) -> BTreeSet<Triplet> {
    pred.top_k(k).filter(|t| gt.contains(t)).copied().collect()
}

/// `|gt ∩ top-K| / |gt|` for one scene.
pub fn recall_at_k(gt: &BTreeSet<Triplet>, pred: &TripletPrediction, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    if gt.is_empty() {
        return Err(MetricError::EmptyGroundTruth);
    }
    Ok(hits(gt, pred, k).len() as f64 / gt.len() as f64)
}

fn check_scenes(gts: &[BTreeSet<Triplet>], preds: &[TripletPrediction], k: usize) -> Result<()> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    if gts.len() != preds.len() {
        return Err(MetricError::LengthMismatch(gts.len(), preds.len()));
    }
    if gts.iter().all(BTreeSet::is_empty) {
        return Err(MetricError::EmptyGroundTruth);
    }
    Ok(())
}

/// Triplet recall micro-aggregated over scenes: total hits / total gt.
/// Scenes without ground truth do not contribute.
pub fn micro_recall_at_k(
    gts: &[BTreeSet<Triplet>],
    preds: &[TripletPrediction],
    k: usize,
) -> Result<f64> {
    check_scenes(gts, preds, k)?;
    let (hit, total) = gts
        .iter()
        .zip(preds)
        .fold((0usize, 0usize), |(h, t), (gt, pred)| {
            (h + hits(gt, pred, k).len(), t + gt.len())
        });
    Ok(hit as f64 / total as f64)
}

/// Per-predicate recall over all scenes, averaged with equal weight over the
/// predicate categories present in the ground truth.
pub fn mean_recall_at_k(
    gts: &[BTreeSet<Triplet>],
    preds: &[TripletPrediction],
    k: usize,
) -> Result<f64> {
    check_scenes(gts, preds, k)?;
    let mut per_predicate: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (gt, pred) in gts.iter().zip(preds) {
        let found = hits(gt, pred, k);
        for t in gt {
            let entry = per_predicate.entry(t.predicate).or_default();
            entry.1 += 1;
            if found.contains(t) {
                entry.0 += 1;
            }
        }
    }
    let sum: f64 = per_predicate
        .values()
        .map(|&(h, t)| h as f64 / t as f64)
        .sum();
    Ok(sum / per_predicate.len() as f64)
}

pub fn accuracy(gt: &[usize], predicted: &[usize]) -> Result<f64> {
    if gt.len() != predicted.len() {
        return Err(MetricError::LengthMismatch(gt.len(), predicted.len()));
    }
    if gt.is_empty() {
        return Err(MetricError::Empty);
    }
    let correct = gt.iter().zip(predicted).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / gt.len() as f64)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let comb2 = |n: usize| (n * n.saturating_sub(1)) as f64 / 2.0;
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| comb2(n)).sum();
    let sum_rows: f64 = rows.values().map(|&n| comb2(n)).sum();
    let sum_cols: f64 = cols.values().map(|&n| comb2(n)).sum();
    let expected = sum_rows * sum_cols / comb2(a.len()).max(1.0);
    let max_index = 0.5 * (sum_rows + sum_cols);
    if max_index == expected {
        // Both labelings trivial (all-in-one or all-singletons).
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

/// Metric columns of a round record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Loss,
    Acc,
    Recall(usize),
    MeanRecall(usize),
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Loss,
        Metric::Acc,
        Metric::Recall(20),
        Metric::Recall(50),
        Metric::Recall(100),
        Metric::MeanRecall(20),
        Metric::MeanRecall(50),
        Metric::MeanRecall(100),
    ];
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Loss => f.write_str("loss"),
            Metric::Acc => f.write_str("acc"),
            Metric::Recall(k) => write!(f, "r{k}"),
            Metric::MeanRecall(k) => write!(f, "mr{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| MetricError::UnknownMetric(s.to_string()))
    }
}

/// Metrics of one federated round. Rounds are numbered from 1; metric fields
/// are `None` for rounds that were not evaluated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub loss: Option<f64>,
    pub acc: Option<f64>,
    pub r20: Option<f64>,
    pub r50: Option<f64>,
    pub r100: Option<f64>,
    pub mr20: Option<f64>,
    pub mr50: Option<f64>,
    pub mr100: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
    #[serde(rename = "final", default)]
    pub is_final: bool,
}

impl RoundRecord {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Loss => self.loss,
            Metric::Acc => self.acc,
            Metric::Recall(20) => self.r20,
            Metric::Recall(50) => self.r50,
            Metric::Recall(100) => self.r100,
            Metric::MeanRecall(20) => self.mr20,
            Metric::MeanRecall(50) => self.mr50,
            Metric::MeanRecall(100) => self.mr100,
            _ => None,
        }
    }

    pub fn evaluated(&self) -> bool {
        self.acc.is_some()
    }
}

/// Per-round records of one simulation run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundHistory {
    pub records: Vec<RoundRecord>,
}

/// Fixed CSV column order.
pub const HISTORY_CSV_HEADER: &str = "round,loss,acc,r20,r50,r100,mr20,mr50,mr100";

impl RoundHistory {
    pub fn final_record(&self) -> Option<&RoundRecord> {
        self.records.iter().rev().find(|r| r.is_final).or(self.records.last())
    }

    /// Last evaluated value of `metric`.
    pub fn final_value(&self, metric: Metric) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.get(metric))
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_CSV_HEADER}\n");
        for r in &self.records {
            let _ = write!(out, "{}", r.round);
            for m in Metric::ALL {
                match r.get(m) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Earliest round whose `metric` reaches `target`; `None` if it never does.
pub fn rounds_to_target(history: &RoundHistory, metric: &str, target: f64) -> Result<Option<usize>> {
    let metric: Metric = metric.parse()?;
    Ok(history
        .records
        .iter()
        .find(|r| r.get(metric).is_some_and(|v| v >= target))
        .map(|r| r.round))
}

/// Parameters transmitted over a run: parameter count times rounds.
pub fn communication_cost(param_count: u64, rounds: u64) -> u128 {
    u128::from(param_count) * u128::from(rounds)
}

/// Cost relative to a baseline cost.
pub fn relative_cost(cost: u128, baseline: u128) -> f64 {
    cost as f64 / baseline as f64
}

/// One row of a communication-cost comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub label: String,
    pub final_value: Option<f64>,
    pub rounds: Option<usize>,
    pub param_count: u64,
    pub cost: Option<u128>,
    pub ratio: Option<f64>,
}

/// Rounds-to-target and communication cost per labeled history, relative to
/// the first row (the baseline).
pub fn cost_table(
    runs: &[(String, u64, RoundHistory)],
    metric: &str,
    target: f64,
) -> Result<Vec<CostRow>> {
    let parsed: Metric = metric.parse()?;
    let mut rows = Vec::with_capacity(runs.len());
    for (label, params, history) in runs {
        let rounds = rounds_to_target(history, metric, target)?;
        rows.push(CostRow {
            label: label.clone(),
            final_value: history.final_value(parsed),
            rounds,
            param_count: *params,
            cost: rounds.map(|r| communication_cost(*params, r as u64)),
            ratio: None,
        });
    }
    let baseline = rows.first().and_then(|r| r.cost);
    for row in &mut rows {
        row.ratio = match (row.cost, baseline) {
            (Some(c), Some(b)) if b > 0 => Some(relative_cost(c, b)),
            _ => None,
        };
    }
    Ok(rows)
}

pub fn cost_table_csv(rows: &[CostRow], metric: &str) -> String {
    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut out = format!("label,final_{metric},rounds_to_target,param_count,comm_cost,relative_cost\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.label,
            opt(r.final_value.map(|v| v.to_string())),
            opt(r.rounds.map(|v| v.to_string())),
            r.param_count,
            opt(r.cost.map(|v| v.to_string())),
            opt(r.ratio.map(|v| format!("{v:.3}"))),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: usize, o: usize, p: usize) -> Triplet {
        Triplet::new(s, o, p)
    }

    fn gt(ts: &[Triplet]) -> BTreeSet<Triplet> {
        ts.iter().copied().collect()
    }

    fn ranked(ts: &[Triplet]) -> TripletPrediction {
        let n = ts.len() as f64;
        TripletPrediction::new(
            "s",
            ts.iter().enumerate().map(|(i, &x)| (x, n - i as f64)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn recall_worked_examples() {
        let (t1, t2, x) = (t(0, 1, 2), t(3, 4, 5), t(9, 9, 9));
        let g = gt(&[t1, t2]);
        assert_eq!(recall_at_k(&g, &ranked(&[t1, x, t2]), 2).unwrap(), 0.5);
        assert_eq!(recall_at_k(&g, &ranked(&[t2, t1, x]), 2).unwrap(), 1.0);
        assert_eq!(recall_at_k(&g, &ranked(&[]), 20).unwrap(), 0.0);
        assert_eq!(recall_at_k(&g, &ranked(&[t1]), 0), Err(MetricError::ZeroK));
        assert_eq!(
            recall_at_k(&BTreeSet::new(), &ranked(&[t1]), 1),
            Err(MetricError::EmptyGroundTruth)
        );
    }

    #[test]
    fn prediction_validation_and_ranking() {
        assert!(TripletPrediction::new("s", vec![(t(0, 0, 0), 0.1), (t(0, 0, 1), 0.5)]).is_err());
        assert!(TripletPrediction::new("s", vec![(t(0, 0, 0), 0.5), (t(0, 0, 0), 0.1)]).is_err());
        let p = TripletPrediction::from_scores(
            "s",
            vec![(t(2, 0, 0), 0.5), (t(1, 0, 0), 0.5), (t(0, 0, 0), 0.9), (t(1, 0, 0), 0.2)],
        );
        let order: Vec<_> = p.top_k(3).copied().collect();
        assert_eq!(order, vec![t(0, 0, 0), t(1, 0, 0), t(2, 0, 0)]);
    }

    #[test]
    fn mean_recall_examples() {
        let a = t(0, 0, 0);
        let b = t(1, 1, 1);
        let gts = vec![gt(&[a, b])];
        let preds = vec![ranked(&[a, t(5, 5, 5), b])];
        assert_eq!(mean_recall_at_k(&gts, &preds, 1).unwrap(), 0.5);
        let single = vec![gt(&[a, t(1, 1, 0)])];
        let preds = vec![ranked(&[a, t(5, 5, 5)])];
        assert_eq!(
            mean_recall_at_k(&single, &preds, 2).unwrap(),
            micro_recall_at_k(&single, &preds, 2).unwrap()
        );
    }

    #[test]
    fn skewed_categories() {
        // Predicate 0: 99 of 100 recovered; predicate 1: 0 of 1.
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        for i in 0..100 {
            let x = t(i % 13, 0, 0);
            gts.push(gt(&[x]));
            preds.push(if i == 0 { ranked(&[]) } else { ranked(&[x]) });
        }
        gts.push(gt(&[t(0, 0, 1)]));
        preds.push(ranked(&[t(0, 0, 2)]));
        let micro = micro_recall_at_k(&gts, &preds, 20).unwrap();
        let macro_ = mean_recall_at_k(&gts, &preds, 20).unwrap();
        assert!((micro - 99.0 / 101.0).abs() < 1e-15);
        assert!((macro_ - 0.495).abs() < 1e-15);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 0, 1], &[1, 0, 1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 0, 1], &[0, 1, 1, 0]).unwrap(), 0.5);
        assert!(accuracy(&[0], &[0, 1]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    fn history(values: &[f64]) -> RoundHistory {
        RoundHistory {
            records: values
                .iter()
                .enumerate()
                .map(|(i, &v)| RoundRecord {
                    round: i + 1,
                    acc: Some(v),
                    ..Default::default()
                })
                .collect(),
        }
    }

    #[test]
    fn rounds_to_target_examples() {
        let h = history(&[80.0, 84.0, 86.0]);
        assert_eq!(rounds_to_target(&h, "acc", 85.0).unwrap(), Some(3));
        assert_eq!(rounds_to_target(&h, "acc", 90.0).unwrap(), None);
        assert_eq!(rounds_to_target(&h, "acc", 80.0).unwrap(), Some(1));
        assert_eq!(
            rounds_to_target(&h, "bleu", 1.0),
            Err(MetricError::UnknownMetric("bleu".into()))
        );
    }

    #[test]
    fn communication_cost_examples() {
        assert_eq!(communication_cost(189, 0), 0);
        assert_eq!(communication_cost(2, 3), 6);
        assert_eq!(format!("{:.2}", relative_cost(63, 64)), "0.98");
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.to_string().parse::<Metric>().unwrap(), m);
        }
        let header: Vec<String> = std::iter::once("round".to_string())
            .chain(Metric::ALL.iter().map(|m| m.to_string()))
            .collect();
        assert_eq!(header.join(","), HISTORY_CSV_HEADER);
    }

    #[test]
    fn history_csv_has_blank_unevaluated_cells() {
        let h = RoundHistory {
            records: vec![
                RoundRecord {
                    round: 1,
                    ..Default::default()
                },
                RoundRecord {
                    round: 2,
                    loss: Some(1.5),
                    acc: Some(0.5),
                    is_final: true,
                    ..Default::default()
                },
            ],
        };
        let csv = h.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[1], "1,,,,,,,,");
        assert_eq!(lines[2], "2,1.5,0.5,,,,,,");
        let line = h.to_jsonl();
        let back: RoundRecord = serde_json::from_str(line.lines().nth(1).unwrap()).unwrap();
        assert_eq!(back, h.records[1]);
        assert!(line.contains(r#""final":true"#));
    }

    #[test]
    fn ari_basics() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[2, 2, 2]).unwrap(), 1.0);
        // Known value: sklearn adjusted_rand_score([0,0,1,1],[0,0,1,2]) = 0.5714285714285715
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap();
        assert!((v - 0.571_428_571_428_571_5).abs() < 1e-12);
    }

    #[test]
    fn cost_table_relative_to_first() {
        let runs = vec![
            ("a".to_string(), 10, history(&[0.1, 0.5, 0.9])),
            ("b".to_string(), 10, history(&[0.9])),
            ("c".to_string(), 10, history(&[0.1])),
        ];
        let rows = cost_table(&runs, "acc", 0.8).unwrap();
        assert_eq!(rows[0].cost, Some(30));
        assert_eq!(rows[1].ratio, Some(1.0 / 3.0));
        assert_eq!(rows[2].rounds, None);
        let csv = cost_table_csv(&rows, "acc");
        assert!(csv.starts_with("label,final_acc,"));
        assert_eq!(csv.lines().count(), 4);
    }

    proptest! {
        #[test]
        fn recall_monotone_in_k(
            gt_set in prop::collection::btree_set((0usize..4, 0usize..4, 0usize..3), 1..10),
            pred in prop::collection::vec(((0usize..4, 0usize..4, 0usize..3), 0.0..1.0f64), 0..40),
        ) {
            let g: BTreeSet<Triplet> = gt_set.into_iter().map(|(a, b, c)| Triplet::new(a, b, c)).collect();
            let p = TripletPrediction::from_scores("s", pred.into_iter().map(|((a, b, c), s)| (Triplet::new(a, b, c), s)).collect());
            let mut last = 0.0;
            for k in 1..45 {
                let r = recall_at_k(&g, &p, k).unwrap();
                prop_assert!(r >= last && (0.0..=1.0).contains(&r));
                last = r;
            }
        }

        #[test]
        fn rounds_to_target_matches_scan(values in prop::collection::vec(0.0..1.0f64, 0..30), target in 0.0..1.0f64) {
            let h = history(&values);
            let mut expected = None;
            for (i, v) in values.iter().enumerate() {
                if *v >= target {
                    expected = Some(i + 1);
                    break;
                }
            }
            prop_assert_eq!(rounds_to_target(&h, "acc", target).unwrap(), expected);
        }
    }
}
