//! Statistical comparison of product sets and report generation.
//!
//! The centerpiece is a Monte Carlo permutation test on medians or means of
//! per-product weekly net margins, with add-one smoothing so the p-value is
//! never exactly zero. Each permutation draws its labels from an RNG stream
//! derived from the master seed and the permutation index, so the result
//! does not depend on how permutations would be partitioned across workers.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{week_of, BasketDistribution, Transaction};
use crate::discount::{interval_stats, PricingStrategy, ThresholdScheme};
use crate::error::{Error, Result};

/// Group statistic compared by the permutation test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    MedianDiff,
    MeanDiff,
}

/// Sidedness of the test. One-sided tests "A larger than B".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    OneSided,
    TwoSided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTestResult {
    pub kind: StatKind,
    pub tail: Tail,
    /// Observed statistic `stat(A) - stat(B)`.
    pub observed: f64,
    pub permutations: u32,
    /// `(1 + #{permuted >= observed}) / (permutations + 1)`.
    pub p_value: f64,
    pub seed: u64,
    /// Set when every pooled value is identical (the test is vacuous).
    pub degenerate: bool,
    /// Permuted statistics, for histogram emission.
    pub permuted: Vec<f64>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn group_stat(kind: StatKind, values: &[f64]) -> f64 {
    match kind {
        StatKind::MeanDiff => values.iter().sum::<f64>() / values.len() as f64,
        StatKind::MedianDiff => {
            let mut v = values.to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
            median(&v)
        }
    }
}

/// One-sided (or two-sided) Monte Carlo permutation test of
/// `stat(A) > stat(B)`, shuffling group labels while preserving sizes.
pub fn permutation_test(
    group_a: &[f64],
    group_b: &[f64],
    kind: StatKind,
    tail: Tail,
    permutations: u32,
    seed: u64,
) -> Result<PermutationTestResult> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::EmptyInput("both permutation-test groups must be non-empty"));
    }
    if permutations < 1 {
        return Err(Error::InvalidInput("need at least one permutation".into()));
    }
    if group_a.iter().chain(group_b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("group values must be finite".into()));
    }

    let observed = group_stat(kind, group_a) - group_stat(kind, group_b);
    let pooled: Vec<f64> = group_a.iter().chain(group_b).copied().collect();
    let degenerate = pooled.windows(2).all(|w| w[0] == w[1]);
    let n_a = group_a.len();

    let mut exceed = 0u64;
    let mut permuted = Vec::with_capacity(permutations as usize);
    let mut indices: Vec<usize> = (0..pooled.len()).collect();
    let mut scratch_a = vec![0.0; n_a];
    let mut scratch_b = vec![0.0; pooled.len() - n_a];
    for rep in 0..permutations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(rep as u64 + 1);
        // Fisher-Yates over the pooled indices
        for i in (1..indices.len()).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            indices.swap(i, j);
        }
        for (slot, &idx) in scratch_a.iter_mut().zip(&indices[..n_a]) {
            *slot = pooled[idx];
        }
        for (slot, &idx) in scratch_b.iter_mut().zip(&indices[n_a..]) {
            *slot = pooled[idx];
        }
        let stat = group_stat(kind, &scratch_a) - group_stat(kind, &scratch_b);
        permuted.push(stat);
        let hit = match tail {
            Tail::OneSided => stat >= observed,
            Tail::TwoSided => stat.abs() >= observed.abs(),
        };
        if hit {
            exceed += 1;
        }
    }

    let p_value = (1.0 + exceed as f64) / (permutations as f64 + 1.0);
    Ok(PermutationTestResult {
        kind,
        tail,
        observed,
        permutations,
        p_value,
        seed,
        degenerate,
        permuted,
    })
}

/// Weekly net margins realized by one product's transaction log under a
/// posted strategy history: for each strategy week, units are grouped by
/// the interval whose price they paid and the per-round profit
/// `sum_i (p_i - c) * v_i` is evaluated. Weeks without transactions yield 0.
///
/// A transaction priced at a value not present in its week's strategy is a
/// data inconsistency and fails the computation.
pub fn weekly_net_margins(
    txns: &[Transaction],
    strategies: &[(u32, PricingStrategy)],
    cost: f64,
    origin: DateTime<Utc>,
) -> Result<Vec<(u32, f64)>> {
    let by_week: BTreeMap<u32, &PricingStrategy> =
        strategies.iter().map(|(w, s)| (*w, s)).collect();
    let mut interval_units: BTreeMap<u32, Vec<u64>> = by_week
        .iter()
        .map(|(&w, s)| (w, vec![0u64; s.eta()]))
        .collect();

    for t in txns {
        if t.timestamp < origin {
            return Err(Error::DataInconsistency(format!(
                "transaction at {} precedes the aggregation origin",
                t.timestamp
            )));
        }
        let week = week_of(origin, t.timestamp);
        let Some(strategy) = by_week.get(&week) else {
            return Err(Error::DataInconsistency(format!(
                "no strategy recorded for week {week}"
            )));
        };
        let idx = strategy
            .prices()
            .iter()
            .position(|&p| (p - t.unit_price).abs() <= 1e-9 * p.abs().max(1.0))
            .ok_or_else(|| {
                Error::DataInconsistency(format!(
                    "week {week}: transaction priced at {} not in strategy {:?}",
                    t.unit_price,
                    strategy.prices()
                ))
            })?;
        interval_units.get_mut(&week).expect("present")[idx] += t.units as u64;
    }

    Ok(by_week
        .iter()
        .map(|(&week, strategy)| {
            let units = &interval_units[&week];
            let margin: f64 = units
                .iter()
                .zip(strategy.prices().iter())
                .map(|(&v, &p)| (p - cost) * v as f64)
                .sum();
            (week, margin)
        })
        .collect())
}

/// Per-interval change in basket shares and the change in mean units per
/// basket between two distributions under one threshold scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaShiftReport {
    /// `share_after - share_before` per interval.
    pub delta_shares: Vec<f64>,
    /// `mean units after - mean units before`.
    pub delta_mean_units: f64,
    pub shares_before: Vec<f64>,
    pub shares_after: Vec<f64>,
}

pub fn beta_shift_report(
    before: &BasketDistribution,
    after: &BasketDistribution,
    scheme: &ThresholdScheme,
) -> BetaShiftReport {
    let b = interval_stats(before, scheme);
    let a = interval_stats(after, scheme);
    BetaShiftReport {
        delta_shares: a
            .shares
            .iter()
            .zip(b.shares.iter())
            .map(|(&x, &y)| x - y)
            .collect(),
        delta_mean_units: a.overall_mean - b.overall_mean,
        shares_before: b.shares,
        shares_after: a.shares,
    }
}

/// Weekly margin series of one product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductSeries {
    pub product_id: String,
    pub weekly: Vec<(u32, f64)>,
}

impl ProductSeries {
    fn average_over(&self, from_week: u32) -> Option<f64> {
        let vals: Vec<f64> = self
            .weekly
            .iter()
            .filter(|(w, _)| *w >= from_week)
            .map(|(_, m)| *m)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    fn average_before(&self, before_week: u32) -> Option<f64> {
        let vals: Vec<f64> = self
            .weekly
            .iter()
            .filter(|(w, _)| *w < before_week)
            .map(|(_, m)| *m)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Side-by-side comparison of two product sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbReport {
    /// Per-product average weekly net margins over the test window.
    pub per_product_a: Vec<(String, f64)>,
    pub per_product_b: Vec<(String, f64)>,
    pub mean_margin_a: f64,
    pub mean_margin_b: f64,
    /// Ratio of set-level average margins, A over B.
    pub ratio: f64,
    pub median_test: PermutationTestResult,
    pub mean_test: PermutationTestResult,
    /// Fraction of products whose test-window average beats their own
    /// reference-window average; present only when a reference split is
    /// given.
    pub improvement_share_a: Option<f64>,
    pub improvement_share_b: Option<f64>,
}

/// Builds the A/B report from per-product weekly margin series.
///
/// `reference_split`, when given, divides each series at that week:
/// earlier weeks form the reference period (for improvement shares),
/// later weeks the test window. Without it the whole series is the test
/// window.
pub fn ab_report(
    set_a: &[ProductSeries],
    set_b: &[ProductSeries],
    reference_split: Option<u32>,
    tail: Tail,
    permutations: u32,
    seed: u64,
) -> Result<AbReport> {
    let from_week = reference_split.unwrap_or(0);
    let averages = |set: &[ProductSeries]| -> Result<Vec<(String, f64)>> {
        set.iter()
            .map(|p| {
                p.average_over(from_week)
                    .map(|m| (p.product_id.clone(), m))
                    .ok_or_else(|| {
                        Error::InvalidInput(format!("product {} has no test-window margins", p.product_id))
                    })
            })
            .collect()
    };
    let per_product_a = averages(set_a)?;
    let per_product_b = averages(set_b)?;

    let values_a: Vec<f64> = per_product_a.iter().map(|(_, m)| *m).collect();
    let values_b: Vec<f64> = per_product_b.iter().map(|(_, m)| *m).collect();
    let mean_margin_a = values_a.iter().sum::<f64>() / values_a.len() as f64;
    let mean_margin_b = values_b.iter().sum::<f64>() / values_b.len() as f64;

    let median_test = permutation_test(&values_a, &values_b, StatKind::MedianDiff, tail, permutations, seed)?;
    let mean_test = permutation_test(&values_a, &values_b, StatKind::MeanDiff, tail, permutations, seed.wrapping_add(1))?;

    let improvement = |set: &[ProductSeries]| -> Option<f64> {
        let split = reference_split?;
        let mut improved = 0usize;
        let mut counted = 0usize;
        for p in set {
            if let (Some(before), Some(after)) = (p.average_before(split), p.average_over(split)) {
                counted += 1;
                if after > before {
                    improved += 1;
                }
            }
        }
        (counted > 0).then(|| improved as f64 / counted as f64)
    };

    Ok(AbReport {
        improvement_share_a: improvement(set_a),
        improvement_share_b: improvement(set_b),
        per_product_a,
        per_product_b,
        mean_margin_a,
        mean_margin_b,
        ratio: mean_margin_a / mean_margin_b,
        median_test,
        mean_test,
    })
}

/// Equal-width histogram of the permuted statistics: `(lo, hi, count)` rows.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, u64)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return vec![(lo, hi, values.len() as u64)];
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + width * i as f64, lo + width * (i + 1) as f64, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn origin() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 1, 4, 0, 0, 0).unwrap()
    }

    fn txn(day_offset: i64, price: f64, units: u32) -> Transaction {
        Transaction {
            timestamp: origin() + chrono::Duration::days(day_offset),
            product_id: "P".into(),
            customer_id: format!("g{day_offset}"),
            unit_price: price,
            units,
            unit_cost: 3.0,
        }
    }

    #[test]
    fn identical_groups_large_p() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let r = permutation_test(&a, &a, StatKind::MeanDiff, Tail::OneSided, 2000, 1).unwrap();
        assert!(r.p_value >= 0.3, "p = {}", r.p_value);
    }

    #[test]
    fn huge_shift_small_p() {
        let a: Vec<f64> = (0..50).map(|i| 100.0 + (i % 7) as f64).collect();
        let b: Vec<f64> = (0..50).map(|i| (i % 7) as f64).collect();
        let r = permutation_test(&a, &b, StatKind::MeanDiff, Tail::OneSided, 10_000, 2).unwrap();
        assert!(r.p_value <= 0.001, "p = {}", r.p_value);
        let r = permutation_test(&a, &b, StatKind::MedianDiff, Tail::OneSided, 10_000, 2).unwrap();
        assert!(r.p_value <= 0.001, "p = {}", r.p_value);
    }

    #[test]
    fn single_permutation_p_values() {
        let a = vec![5.0, 6.0];
        let b = vec![1.0, 2.0];
        for seed in 0..20 {
            let r = permutation_test(&a, &b, StatKind::MeanDiff, Tail::OneSided, 1, seed).unwrap();
            assert!(r.p_value == 0.5 || r.p_value == 1.0, "p = {}", r.p_value);
        }
    }

    #[test]
    fn degenerate_all_identical() {
        let a = vec![2.0, 2.0];
        let b = vec![2.0, 2.0, 2.0];
        let r = permutation_test(&a, &b, StatKind::MedianDiff, Tail::OneSided, 100, 3).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = vec![1.0, 4.0, 2.0];
        let b = vec![3.0, 0.5];
        let r1 = permutation_test(&a, &b, StatKind::MeanDiff, Tail::OneSided, 500, 9).unwrap();
        let r2 = permutation_test(&a, &b, StatKind::MeanDiff, Tail::OneSided, 500, 9).unwrap();
        assert_eq!(r1.p_value, r2.p_value);
        assert_eq!(r1.permuted, r2.permuted);
    }

    #[test]
    fn two_sided_counts_both_tails() {
        let a = vec![0.0, 0.0, 0.0];
        let b = vec![10.0, 10.0];
        let one = permutation_test(&a, &b, StatKind::MeanDiff, Tail::OneSided, 2000, 4).unwrap();
        let two = permutation_test(&a, &b, StatKind::MeanDiff, Tail::TwoSided, 2000, 4).unwrap();
        // observed is deeply negative: one-sided p is ~1, two-sided is small
        assert!(one.p_value > 0.9);
        assert!(two.p_value < 0.1);
    }

    #[test]
    fn weekly_margins_direct_arithmetic() {
        // one week, prices [6,5,4], c = 3, interval volumes [10,4,2] -> 40
        let strategy = PricingStrategy::new(vec![1, 3, 5], vec![6.0, 5.0, 4.0]).unwrap();
        let txns = vec![
            txn(0, 6.0, 2),
            txn(1, 6.0, 2),
            txn(1, 6.0, 2),
            txn(2, 6.0, 2),
            txn(2, 6.0, 2),
            txn(3, 5.0, 4),
            txn(5, 4.0, 2),
        ];
        let res = weekly_net_margins(&txns, &[(0, strategy)], 3.0, origin()).unwrap();
        assert_eq!(res, vec![(0, 40.0)]);
    }

    #[test]
    fn weekly_margins_empty_week_zero() {
        let strategy = PricingStrategy::single(6.0).unwrap();
        let res = weekly_net_margins(&[], &[(0, strategy.clone()), (1, strategy)], 3.0, origin()).unwrap();
        assert_eq!(res, vec![(0, 0.0), (1, 0.0)]);
    }

    #[test]
    fn weekly_margins_order_invariant() {
        let strategy = PricingStrategy::new(vec![1, 3], vec![6.0, 5.0]).unwrap();
        let mut txns = vec![txn(0, 6.0, 1), txn(1, 5.0, 4), txn(2, 6.0, 2)];
        let forward = weekly_net_margins(&txns, &[(0, strategy.clone())], 3.0, origin()).unwrap();
        txns.reverse();
        let backward = weekly_net_margins(&txns, &[(0, strategy)], 3.0, origin()).unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn weekly_margins_detect_inconsistent_price() {
        let strategy = PricingStrategy::single(6.0).unwrap();
        let txns = vec![txn(0, 5.5, 1)];
        assert!(matches!(
            weekly_net_margins(&txns, &[(0, strategy)], 3.0, origin()),
            Err(Error::DataInconsistency(_))
        ));
    }

    #[test]
    fn beta_shift_zero_for_identical() {
        let dist = crate::data::basket_distribution(&[txn(0, 6.0, 1), txn(1, 6.0, 4)]).unwrap();
        let scheme = ThresholdScheme::new(vec![1, 3]).unwrap();
        let report = beta_shift_report(&dist, &dist, &scheme);
        assert!(report.delta_shares.iter().all(|&d| d == 0.0));
        assert_eq!(report.delta_mean_units, 0.0);
    }

    #[test]
    fn beta_shift_signs() {
        // mass moves from z = 1 to z = 4 under omega = [1, 3]
        let before = crate::data::basket_distribution(&[
            txn(0, 6.0, 1),
            txn(1, 6.0, 1),
            txn(2, 6.0, 1),
            txn(3, 6.0, 4),
        ])
        .unwrap();
        let after = crate::data::basket_distribution(&[
            txn(0, 6.0, 1),
            txn(1, 6.0, 4),
            txn(2, 6.0, 4),
            txn(3, 6.0, 4),
        ])
        .unwrap();
        let scheme = ThresholdScheme::new(vec![1, 3]).unwrap();
        let report = beta_shift_report(&before, &after, &scheme);
        assert!(report.delta_shares[0] < 0.0);
        assert!(report.delta_shares[1] > 0.0);
        assert!(report.delta_mean_units > 0.0);
    }

    #[test]
    fn histogram_covers_all_values() {
        let values = vec![0.0, 0.5, 1.0, 1.5, 2.0];
        let bins = histogram(&values, 4);
        assert_eq!(bins.len(), 4);
        assert_eq!(bins.iter().map(|&(_, _, c)| c).sum::<u64>(), 5);
    }

    #[test]
    fn ab_report_ratio_and_improvement() {
        let series = |id: &str, pre: f64, post: f64| ProductSeries {
            product_id: id.into(),
            weekly: vec![(0, pre), (1, pre), (2, post), (3, post)],
        };
        let a = vec![series("a1", 1.0, 3.0), series("a2", 2.0, 4.0)];
        let b = vec![series("b1", 1.0, 1.0), series("b2", 2.0, 1.5)];
        let report = ab_report(&a, &b, Some(2), Tail::OneSided, 200, 5).unwrap();
        assert!((report.mean_margin_a - 3.5).abs() < 1e-12);
        assert!((report.mean_margin_b - 1.25).abs() < 1e-12);
        assert!((report.ratio - 2.8).abs() < 1e-12);
        assert_eq!(report.improvement_share_a, Some(1.0));
        assert_eq!(report.improvement_share_b, Some(0.0));
    }
}
