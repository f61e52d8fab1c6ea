//! Evaluation protocol: ranked metrics at K, macro/micro F1 with a sigmoid
//! decision threshold, per-bucket F1@3 breakdown, and minority-class
//! reporting.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Bucket;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("relevant set is empty")]
    EmptyRelevant,
    #[error("K must be at least 1")]
    ZeroK,
    #[error("decision threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("score vector length {got} does not match |C| = {expected}")]
    WrongScoreLength { expected: usize, got: usize },
    #[error("minority size {m} exceeds |C| = {num_categories}")]
    MinorityTooLarge { m: usize, num_categories: usize },
    #[error("no queries to evaluate")]
    EmptyTestSet,
}

/// Scores for one query plus the induced ranking: descending score, ties
/// broken by ascending category id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub scores: Vec<f64>,
    pub ranked: Vec<usize>,
}

impl Prediction {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut ranked: Vec<usize> = (0..scores.len()).collect();
        ranked.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .expect("scores are finite")
                .then(a.cmp(&b))
        });
        Prediction { scores, ranked }
    }
}

/// P@K, R@K, F1@K, AP@K for one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: f64,
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn ranking_metrics_at_k(
    ranked: &[usize],
    relevant: &BTreeSet<usize>,
    k: usize,
) -> Result<RankMetrics, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if relevant.is_empty() {
        return Err(EvalError::EmptyRelevant);
    }
    let top = &ranked[..k.min(ranked.len())];
    let mut hits = 0usize;
    let mut ap_sum = 0.0;
    for (pos, cat) in top.iter().enumerate() {
        if relevant.contains(cat) {
            hits += 1;
            ap_sum += hits as f64 / (pos + 1) as f64;
        }
    }
    let precision = hits as f64 / k as f64;
    let recall = hits as f64 / relevant.len() as f64;
    Ok(RankMetrics {
        precision,
        recall,
        f1: f1_of(precision, recall),
        ap: ap_sum / k.min(relevant.len()) as f64,
    })
}

/// Set-valued macro/micro F1. A category is predicted when the sigmoid of
/// its score clears `threshold`. Classes with neither gold labels nor
/// predictions in the split are excluded from the macro average.
pub fn macro_micro_f1(
    predictions: &[Prediction],
    gold: &[BTreeSet<usize>],
    num_categories: usize,
    threshold: f64,
) -> Result<(f64, f64), EvalError> {
    let (per_class, _) = class_confusions(predictions, gold, num_categories, threshold)?;
    let mut macro_sum = 0.0;
    let mut macro_n = 0usize;
    let (mut tp_all, mut fp_all, mut fn_all) = (0u64, 0u64, 0u64);
    for &(tp, fp, fneg) in &per_class {
        tp_all += tp;
        fp_all += fp;
        fn_all += fneg;
        if tp + fp + fneg > 0 {
            macro_sum += confusion_f1(tp, fp, fneg);
            macro_n += 1;
        }
    }
    let macro_f1 = if macro_n == 0 {
        0.0
    } else {
        macro_sum / macro_n as f64
    };
    Ok((macro_f1, confusion_f1(tp_all, fp_all, fn_all)))
}

fn confusion_f1(tp: u64, fp: u64, fneg: u64) -> f64 {
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Per-class (TP, FP, FN) plus the per-query predicted sets.
fn class_confusions(
    predictions: &[Prediction],
    gold: &[BTreeSet<usize>],
    num_categories: usize,
    threshold: f64,
) -> Result<(Vec<(u64, u64, u64)>, Vec<BTreeSet<usize>>), EvalError> {
    if !(0.0..1.0).contains(&threshold) || threshold == 0.0 {
        return Err(EvalError::BadThreshold(threshold));
    }
    assert_eq!(predictions.len(), gold.len(), "prediction/gold length mismatch");
    // sigma(s) >= t  <=>  s >= logit(t); avoids exp per score
    let cutoff = (threshold / (1.0 - threshold)).ln();
    let mut per_class = vec![(0u64, 0u64, 0u64); num_categories];
    let mut decided = Vec::with_capacity(predictions.len());
    for (pred, rel) in predictions.iter().zip(gold) {
        if pred.scores.len() != num_categories {
            return Err(EvalError::WrongScoreLength {
                expected: num_categories,
                got: pred.scores.len(),
            });
        }
        let chosen: BTreeSet<usize> = (0..num_categories)
            .filter(|&c| pred.scores[c] >= cutoff)
            .collect();
        for c in 0..num_categories {
            match (chosen.contains(&c), rel.contains(&c)) {
                (true, true) => per_class[c].0 += 1,
                (true, false) => per_class[c].1 += 1,
                (false, true) => per_class[c].2 += 1,
                (false, false) => {}
            }
        }
        decided.push(chosen);
    }
    Ok((per_class, decided))
}

/// Mean per-query F1@3 within each traffic bucket. Buckets with no test
/// queries are absent from the map.
pub fn bucket_report(
    predictions: &[Prediction],
    gold: &[BTreeSet<usize>],
    buckets: &[Bucket],
) -> Result<BTreeMap<Bucket, f64>, EvalError> {
    assert_eq!(predictions.len(), buckets.len(), "prediction/bucket length mismatch");
    let mut sums: BTreeMap<Bucket, (f64, usize)> = BTreeMap::new();
    for ((pred, rel), &bucket) in predictions.iter().zip(gold).zip(buckets) {
        let m = ranking_metrics_at_k(&pred.ranked, rel, 3)?;
        let e = sums.entry(bucket).or_insert((0.0, 0));
        e.0 += m.f1;
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(b, (sum, n))| (b, sum / n as f64))
        .collect())
}

/// The m least-frequent training classes, ties broken by ascending id.
pub fn minority_classes(class_frequencies: &[u64], m: usize) -> Result<Vec<usize>, EvalError> {
    if m > class_frequencies.len() {
        return Err(EvalError::MinorityTooLarge {
            m,
            num_categories: class_frequencies.len(),
        });
    }
    let mut ids: Vec<usize> = (0..class_frequencies.len()).collect();
    ids.sort_by_key(|&c| (class_frequencies[c], c));
    ids.truncate(m);
    Ok(ids)
}

/// Macro F1 restricted to the m classes with the smallest training-set
/// frequency.
pub fn minority_report(
    predictions: &[Prediction],
    gold: &[BTreeSet<usize>],
    class_frequencies: &[u64],
    m: usize,
    threshold: f64,
) -> Result<f64, EvalError> {
    let minority = minority_classes(class_frequencies, m)?;
    let (per_class, _) = class_confusions(predictions, gold, class_frequencies.len(), threshold)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for &c in &minority {
        let (tp, fp, fneg) = per_class[c];
        if tp + fp + fneg > 0 {
            sum += confusion_f1(tp, fp, fneg);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Mean ranked metrics at one K over a query set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanRankMetrics {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map: f64,
}

pub const REPORT_KS: [usize; 3] = [1, 3, 5];
pub const REPORT_VERSION: u32 = 1;

/// The full evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub num_queries: usize,
    pub num_categories: usize,
    pub threshold: f64,
    pub minority_m: usize,
    pub at_k: Vec<MeanRankMetrics>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    /// bucket label -> mean F1@3; absent buckets omitted
    pub bucket_f1_at_3: BTreeMap<String, f64>,
    pub minority_macro_f1: f64,
}

/// Assemble the report from already-scored predictions.
pub fn evaluate_predictions(
    predictions: &[Prediction],
    gold: &[BTreeSet<usize>],
    buckets: &[Bucket],
    class_frequencies: &[u64],
    num_categories: usize,
    threshold: f64,
    minority_m: usize,
) -> Result<EvalReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut at_k = Vec::new();
    for &k in &REPORT_KS {
        let mut acc = (0.0, 0.0, 0.0, 0.0);
        for (pred, rel) in predictions.iter().zip(gold) {
            let m = ranking_metrics_at_k(&pred.ranked, rel, k)?;
            acc.0 += m.precision;
            acc.1 += m.recall;
            acc.2 += m.f1;
            acc.3 += m.ap;
        }
        let n = predictions.len() as f64;
        at_k.push(MeanRankMetrics {
            k,
            precision: acc.0 / n,
            recall: acc.1 / n,
            f1: acc.2 / n,
            map: acc.3 / n,
        });
    }
    let (macro_f1, micro_f1) = macro_micro_f1(predictions, gold, num_categories, threshold)?;
    let bucket_f1 = bucket_report(predictions, gold, buckets)?;
    let minority_macro_f1 =
        minority_report(predictions, gold, class_frequencies, minority_m, threshold)?;
    Ok(EvalReport {
        version: REPORT_VERSION,
        num_queries: predictions.len(),
        num_categories,
        threshold,
        minority_m,
        at_k,
        macro_f1,
        micro_f1,
        bucket_f1_at_3: bucket_f1
            .into_iter()
            .map(|(b, v)| (b.to_string(), v))
            .collect(),
        minority_macro_f1,
    })
}

impl EvalReport {
    /// Flat CSV companion: one metric per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for m in &self.at_k {
            out.push_str(&format!("precision_at_{},{}\n", m.k, m.precision));
            out.push_str(&format!("recall_at_{},{}\n", m.k, m.recall));
            out.push_str(&format!("f1_at_{},{}\n", m.k, m.f1));
            out.push_str(&format!("map_at_{},{}\n", m.k, m.map));
        }
        out.push_str(&format!("macro_f1,{}\n", self.macro_f1));
        out.push_str(&format!("micro_f1,{}\n", self.micro_f1));
        for (b, v) in &self.bucket_f1_at_3 {
            out.push_str(&format!("bucket_{b}_f1_at_3,{v}\n"));
        }
        out.push_str(&format!("minority_macro_f1,{}\n", self.minority_macro_f1));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::rng_from_seed;
    use rand::Rng;

    fn set(ids: &[usize]) -> BTreeSet<usize> {
        ids.iter().copied().collect()
    }

    /// Direct-definition oracle for the @K metrics.
    fn oracle_at_k(ranked: &[usize], relevant: &BTreeSet<usize>, k: usize) -> RankMetrics {
        let top: Vec<usize> = ranked.iter().copied().take(k).collect();
        let hits = top.iter().filter(|c| relevant.contains(c)).count() as f64;
        let p = hits / k as f64;
        let r = hits / relevant.len() as f64;
        let mut ap = 0.0;
        for i in 0..top.len() {
            if relevant.contains(&top[i]) {
                let prefix_hits =
                    top[..=i].iter().filter(|c| relevant.contains(c)).count() as f64;
                ap += prefix_hits / (i + 1) as f64;
            }
        }
        ap /= k.min(relevant.len()) as f64;
        RankMetrics {
            precision: p,
            recall: r,
            f1: f1_of(p, r),
            ap,
        }
    }

    #[test]
    fn ranking_breaks_ties_by_ascending_id() {
        let p = Prediction::from_scores(vec![0.5, 0.9, 0.5, 0.1]);
        assert_eq!(p.ranked, vec![1, 0, 2, 3]);
    }

    #[test]
    fn perfect_ranking_has_unit_ap() {
        let m = ranking_metrics_at_k(&[2, 0, 1, 3], &set(&[2, 0]), 5).unwrap();
        assert_eq!(m.ap, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.precision, 2.0 / 5.0);
    }

    #[test]
    fn spec_hand_example_ap() {
        // relevant {a,b} = {0,1}, ranking [a,x,b,y,z], K=5
        let m = ranking_metrics_at_k(&[0, 2, 1, 3, 4], &set(&[0, 1]), 5).unwrap();
        assert!((m.precision - 0.4).abs() < 1e-15);
        assert_eq!(m.recall, 1.0);
        let expected_ap = 0.5 * (1.0 + 2.0 / 3.0);
        assert!((m.ap - expected_ap).abs() < 1e-15);
        assert!((m.ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn no_hits_gives_zeros() {
        let m = ranking_metrics_at_k(&[3, 4, 5, 0, 1], &set(&[0, 1]), 3).unwrap();
        assert_eq!(
            (m.precision, m.recall, m.f1, m.ap),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn empty_relevant_rejected() {
        assert!(ranking_metrics_at_k(&[0, 1], &BTreeSet::new(), 3).is_err());
        assert!(ranking_metrics_at_k(&[0, 1], &set(&[0]), 0).is_err());
    }

    #[test]
    fn hit_counts_are_integers() {
        let mut rng = rng_from_seed(12);
        for _ in 0..100 {
            let c = rng.gen_range(2..10usize);
            let scores: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p = Prediction::from_scores(scores);
            let rel: BTreeSet<usize> =
                (0..c).filter(|_| rng.gen_bool(0.4)).collect();
            if rel.is_empty() {
                continue;
            }
            for k in [1, 3, 5] {
                let m = ranking_metrics_at_k(&p.ranked, &rel, k).unwrap();
                let hits_p = m.precision * k as f64;
                let hits_r = m.recall * rel.len() as f64;
                assert!((hits_p - hits_p.round()).abs() < 1e-9);
                assert!((hits_r - hits_r.round()).abs() < 1e-9);
                assert!((0.0..=1.0).contains(&m.ap));
            }
        }
    }

    #[test]
    fn metrics_match_oracle_on_random_instances() {
        let mut rng = rng_from_seed(13);
        for _ in 0..100 {
            let c = rng.gen_range(2..=10usize);
            let scores: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let p = Prediction::from_scores(scores);
            let mut rel: BTreeSet<usize> = (0..c).filter(|_| rng.gen_bool(0.3)).collect();
            rel.insert(rng.gen_range(0..c));
            for k in [1, 2, 3, 5, 7] {
                let got = ranking_metrics_at_k(&p.ranked, &rel, k).unwrap();
                let want = oracle_at_k(&p.ranked, &rel, k);
                assert!((got.precision - want.precision).abs() < 1e-12);
                assert!((got.recall - want.recall).abs() < 1e-12);
                assert!((got.f1 - want.f1).abs() < 1e-12);
                assert!((got.ap - want.ap).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn irrelevant_category_below_k_changes_nothing() {
        let rel = set(&[0, 3]);
        let a = ranking_metrics_at_k(&[0, 3, 1, 2, 4, 5], &rel, 3).unwrap();
        let b = ranking_metrics_at_k(&[0, 3, 1, 2, 5, 4], &rel, 3).unwrap();
        assert_eq!(a, b);
    }

    /// Build a prediction that decides exactly the given categories at
    /// threshold 0.5 (scores +-2 straddle the zero-logit cutoff).
    fn decide(chosen: &[usize], c: usize) -> Prediction {
        let scores = (0..c)
            .map(|i| if chosen.contains(&i) { 2.0 } else { -2.0 })
            .collect();
        Prediction::from_scores(scores)
    }

    #[test]
    fn perfect_predictions_give_unit_f1() {
        let preds = vec![decide(&[0, 2], 3), decide(&[1], 3)];
        let gold = vec![set(&[0, 2]), set(&[1])];
        let (macro_f1, micro_f1) = macro_micro_f1(&preds, &gold, 3, 0.5).unwrap();
        assert_eq!(macro_f1, 1.0);
        assert_eq!(micro_f1, 1.0);
    }

    #[test]
    fn spec_hand_example_macro_micro() {
        // class 0: TP=1; class 1: FN=1
        let preds = vec![decide(&[0], 2)];
        let gold = vec![set(&[0, 1])];
        let (macro_f1, micro_f1) = macro_micro_f1(&preds, &gold, 2, 0.5).unwrap();
        assert!((macro_f1 - 0.5).abs() < 1e-15);
        assert!((micro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((micro_f1 - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn untouched_classes_are_excluded_from_macro() {
        // |C| = 5 but only classes 0 and 1 ever appear
        let preds = vec![decide(&[0], 5)];
        let gold = vec![set(&[0, 1])];
        let (macro_f1, _) = macro_micro_f1(&preds, &gold, 5, 0.5).unwrap();
        assert!((macro_f1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn false_positive_only_class_counts_as_zero() {
        // class 1 has one FP and no gold: included with F1 = 0
        let preds = vec![decide(&[0, 1], 3)];
        let gold = vec![set(&[0])];
        let (macro_f1, _) = macro_micro_f1(&preds, &gold, 3, 0.5).unwrap();
        assert!((macro_f1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn micro_f1_matches_pooled_brute_force() {
        let mut rng = rng_from_seed(14);
        for _ in 0..100 {
            let c = rng.gen_range(2..=10usize);
            let n = rng.gen_range(1..=8usize);
            let mut preds = Vec::new();
            let mut gold = Vec::new();
            for _ in 0..n {
                let scores: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
                preds.push(Prediction::from_scores(scores));
                let mut g: BTreeSet<usize> = (0..c).filter(|_| rng.gen_bool(0.3)).collect();
                g.insert(rng.gen_range(0..c));
                gold.push(g);
            }
            let (_, micro) = macro_micro_f1(&preds, &gold, c, 0.5).unwrap();
            // brute force: pool every (query, class) decision
            let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
            for (p, g) in preds.iter().zip(&gold) {
                for cls in 0..c {
                    let chosen = 1.0 / (1.0 + (-p.scores[cls]).exp()) >= 0.5;
                    match (chosen, g.contains(&cls)) {
                        (true, true) => tp += 1.0,
                        (true, false) => fp += 1.0,
                        (false, true) => fneg += 1.0,
                        _ => {}
                    }
                }
            }
            let prec = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
            let rec = if tp + fneg == 0.0 { 0.0 } else { tp / (tp + fneg) };
            assert!((micro - f1_of(prec, rec)).abs() < 1e-12);
        }
    }

    #[test]
    fn bucket_report_matches_per_query_recomputation() {
        let mut rng = rng_from_seed(15);
        let c = 8;
        let mut preds = Vec::new();
        let mut gold = Vec::new();
        let mut buckets = Vec::new();
        for i in 0..50 {
            let scores: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            preds.push(Prediction::from_scores(scores));
            let mut g: BTreeSet<usize> = (0..c).filter(|_| rng.gen_bool(0.3)).collect();
            g.insert(rng.gen_range(0..c));
            gold.push(g);
            buckets.push(Bucket::ALL[i % 3]);
        }
        let report = bucket_report(&preds, &gold, &buckets).unwrap();
        for &b in &Bucket::ALL {
            let mut sum = 0.0;
            let mut n = 0;
            for i in 0..50 {
                if buckets[i] == b {
                    sum += ranking_metrics_at_k(&preds[i].ranked, &gold[i], 3)
                        .unwrap()
                        .f1;
                    n += 1;
                }
            }
            assert!((report[&b] - sum / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_bucket_is_absent() {
        let preds = vec![decide(&[0], 3)];
        let gold = vec![set(&[0])];
        let report = bucket_report(&preds, &gold, &[Bucket::Head]).unwrap();
        assert!(report.contains_key(&Bucket::Head));
        assert!(!report.contains_key(&Bucket::Tail));
    }

    #[test]
    fn minority_selection_orders_by_frequency_then_id() {
        let freqs = vec![5, 1, 3, 1, 9];
        assert_eq!(minority_classes(&freqs, 3).unwrap(), vec![1, 3, 2]);
        assert!(minority_classes(&freqs, 6).is_err());
    }

    #[test]
    fn minority_full_set_equals_macro() {
        let preds = vec![decide(&[0], 2), decide(&[1], 2)];
        let gold = vec![set(&[0, 1]), set(&[1])];
        let (macro_f1, _) = macro_micro_f1(&preds, &gold, 2, 0.5).unwrap();
        let minority = minority_report(&preds, &gold, &[3, 1], 2, 0.5).unwrap();
        assert!((macro_f1 - minority).abs() < 1e-15);
    }

    #[test]
    fn minority_single_perfect_class() {
        let preds = vec![decide(&[1], 2)];
        let gold = vec![set(&[1])];
        let v = minority_report(&preds, &gold, &[7, 2], 1, 0.5).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn report_assembles_and_map_matches_mean_ap() {
        let mut rng = rng_from_seed(16);
        let c = 6;
        let mut preds = Vec::new();
        let mut gold = Vec::new();
        let mut buckets = Vec::new();
        for i in 0..30 {
            let scores: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            preds.push(Prediction::from_scores(scores));
            let mut g: BTreeSet<usize> = (0..c).filter(|_| rng.gen_bool(0.4)).collect();
            g.insert(rng.gen_range(0..c));
            gold.push(g);
            buckets.push(Bucket::ALL[i % 3]);
        }
        let freqs = vec![10, 2, 30, 1, 5, 8];
        let report =
            evaluate_predictions(&preds, &gold, &buckets, &freqs, c, 0.5, 3).unwrap();
        assert_eq!(report.at_k.len(), 3);
        let map5 = report.at_k.iter().find(|m| m.k == 5).unwrap().map;
        let mean_ap: f64 = preds
            .iter()
            .zip(&gold)
            .map(|(p, g)| ranking_metrics_at_k(&p.ranked, g, 5).unwrap().ap)
            .sum::<f64>()
            / preds.len() as f64;
        assert!((map5 - mean_ap).abs() < 1e-12);
        for m in &report.at_k {
            for v in [m.precision, m.recall, m.f1, m.map] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("metric,value\n"));
        assert!(csv.contains("map_at_5,"));
        assert!(csv.contains("minority_macro_f1,"));
    }
}
