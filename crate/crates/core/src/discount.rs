//! Phase 2: volume-discount learning.
//!
//! Given the phase-1 optimal price, this module estimates the buyback
//! probability from repeat-purchase counts, selects volume thresholds from
//! the basket-size distribution, and computes per-threshold discounts and
//! margins so that the expected margin of the threshold strategy matches the
//! single-price optimum.

use serde::{Deserialize, Serialize};

use crate::data::{BasketDistribution, CustomerIndex, TimeInterval, Transaction};
use crate::error::{Error, Result};
use crate::optimizer::PricingDecision;

/// Buyback probability estimated from a measure/control period pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuybackEstimate {
    /// gamma = returns / (returns + non_returns), or the configured default
    /// when no customer purchased in the measure period.
    pub gamma: f64,
    pub returns: u64,
    pub non_returns: u64,
    pub measure: TimeInterval,
    pub control: TimeInterval,
    /// Set when the estimate fell back to the configured default.
    pub defaulted: bool,
}

/// Volume thresholds: the first is always 1 and they strictly increase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdScheme {
    thresholds: Vec<u32>,
}

impl ThresholdScheme {
    pub fn new(thresholds: Vec<u32>) -> Result<Self> {
        if thresholds.first() != Some(&1) {
            return Err(Error::InvalidInput("first threshold must be 1".into()));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("thresholds must strictly increase".into()));
        }
        Ok(Self { thresholds })
    }

    pub fn thresholds(&self) -> &[u32] {
        &self.thresholds
    }

    /// Number of volume intervals (the effective eta).
    pub fn eta(&self) -> usize {
        self.thresholds.len()
    }

    /// Index of the interval containing a basket of `units` items.
    pub fn interval_of(&self, units: u32) -> usize {
        debug_assert!(units >= 1);
        match self.thresholds.binary_search(&units) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }
}

/// Outcome of threshold selection: the scheme plus how many intervals were
/// requested (duplicates from the quantile rule can reduce the count).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdSelection {
    pub scheme: ThresholdScheme,
    pub requested_eta: usize,
}

impl ThresholdSelection {
    pub fn reduced(&self) -> bool {
        self.scheme.eta() < self.requested_eta
    }
}

/// Per-interval basket share and mean basket volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalStats {
    /// Basket share per interval; sums to 1.
    pub shares: Vec<f64>,
    /// Mean basket volume per interval; interval midpoint when empty.
    pub mean_volumes: Vec<f64>,
    /// Mean basket volume over the whole distribution.
    pub overall_mean: f64,
    /// Indices of intervals that contained no baskets.
    pub empty_intervals: Vec<usize>,
}

impl IntervalStats {
    pub fn eta(&self) -> usize {
        self.shares.len()
    }
}

/// Discounts and margins for every interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountSchedule {
    /// Discount per interval; the first is 0 and they never decrease.
    pub discounts: Vec<f64>,
    /// Single-unit margin chosen so the margin identity holds.
    pub base_margin: f64,
    /// Per-interval margins `base_margin * (1 - discount_k)`.
    pub margins: Vec<f64>,
    /// Per-interval unit prices `cost + margin_k`.
    pub prices: Vec<f64>,
    /// Customer need (total units) used in the discount bound.
    pub need: u32,
}

/// The algorithm's output: thresholds with their unit prices, satisfying
/// `omega_1 = 1`, strictly increasing thresholds and strictly decreasing
/// positive prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingStrategy {
    thresholds: Vec<u32>,
    prices: Vec<f64>,
}

impl PricingStrategy {
    pub fn new(thresholds: Vec<u32>, prices: Vec<f64>) -> Result<Self> {
        let scheme = ThresholdScheme::new(thresholds)?;
        if prices.len() != scheme.eta() {
            return Err(Error::InvalidInput("one price per threshold required".into()));
        }
        if prices.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::InvalidInput("strategy prices must be > 0".into()));
        }
        if prices.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidInput("strategy prices must strictly decrease".into()));
        }
        Ok(Self {
            thresholds: scheme.thresholds,
            prices,
        })
    }

    pub fn single(price: f64) -> Result<Self> {
        Self::new(vec![1], vec![price])
    }

    pub fn thresholds(&self) -> &[u32] {
        &self.thresholds
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn eta(&self) -> usize {
        self.thresholds.len()
    }

    pub fn scheme(&self) -> ThresholdScheme {
        ThresholdScheme::new(self.thresholds.clone()).expect("valid by construction")
    }

    pub fn interval_of(&self, units: u32) -> usize {
        match self.thresholds.binary_search(&units) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }

    /// Unit price paid by a basket of `units` items.
    pub fn unit_price_for(&self, units: u32) -> f64 {
        self.prices[self.interval_of(units)]
    }

    /// Total paid by a basket of `units` items.
    pub fn basket_price(&self, units: u32) -> f64 {
        units as f64 * self.unit_price_for(units)
    }
}

/// Everything phase 2 produced for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledStrategy {
    pub strategy: PricingStrategy,
    /// Discounts aligned with the posted intervals (after merging intervals
    /// whose prices came out equal).
    pub discounts: Vec<f64>,
    pub gamma: f64,
    pub need: u32,
    pub schedule: DiscountSchedule,
    pub stats: IntervalStats,
    pub requested_eta: usize,
}

/// Estimates the buyback probability from repeat purchases.
///
/// Returns counted in the measure period: a customer with n purchases there
/// already came back n - 1 times, and once more if seen again in the control
/// period. Non-returns are measure-period customers never seen in control.
pub fn estimate_gamma(
    index: &CustomerIndex,
    measure: &TimeInterval,
    control: &TimeInterval,
    default_gamma: f64,
) -> Result<BuybackEstimate> {
    if measure.overlaps(control) {
        return Err(Error::OverlappingPeriods(
            control.start.to_string(),
            control.end.to_string(),
        ));
    }
    let total_measure = index.total_purchases(measure)?;
    let h_measure = index.customers(measure)?;
    let h_control = index.customers(control)?;
    let overlap = h_measure.intersection(&h_control).count() as u64;
    let uniques = h_measure.len() as u64;

    let returns = total_measure - uniques + overlap;
    let non_returns = uniques - overlap;
    let (gamma, defaulted) = if returns + non_returns == 0 {
        (default_gamma, true)
    } else {
        (returns as f64 / (returns + non_returns) as f64, false)
    };
    Ok(BuybackEstimate {
        gamma,
        returns,
        non_returns,
        measure: *measure,
        control: *control,
        defaulted,
    })
}

/// Position of the k-th quantile element (1-based) in the unit-weighted
/// multiset: `ceil(|Q| * k / eta)`.
fn quantile_position(total: u64, k: u64, eta: u64) -> u64 {
    (total * k).div_ceil(eta)
}

/// Selects thresholds by splitting the unit-weighted basket multiset into
/// equally sized parts.
///
/// The multiset holds each basket size z repeated `q(z) * z` times; the
/// quantile rule extracts eta - 1 candidate thresholds, the first threshold
/// is forced to 1, and duplicates are dropped (reducing the effective eta,
/// reported via [`ThresholdSelection`]).
pub fn select_thresholds(dist: &BasketDistribution, eta: usize) -> Result<ThresholdSelection> {
    if eta < 1 {
        return Err(Error::InvalidInput("eta must be >= 1".into()));
    }
    let total = dist.total_units();
    let mut thresholds = vec![1u32];
    if eta > 1 {
        let positions: Vec<u64> = (1..eta as u64)
            .map(|k| quantile_position(total, k, eta as u64))
            .collect();
        let mut cum = 0u64;
        let mut pos_iter = positions.iter().peekable();
        for (z, q) in dist.iter() {
            cum += q * z as u64;
            while let Some(&&p) = pos_iter.peek() {
                if p <= cum {
                    if *thresholds.last().expect("non-empty") < z {
                        thresholds.push(z);
                    }
                    pos_iter.next();
                } else {
                    break;
                }
            }
        }
    }
    Ok(ThresholdSelection {
        scheme: ThresholdScheme::new(thresholds)?,
        requested_eta: eta,
    })
}

/// Computes per-interval basket shares and mean volumes.
///
/// The k-th interval covers basket sizes from its threshold up to (but not
/// including) the next threshold; the last interval is open-ended. Empty
/// intervals get their midpoint as mean volume and are reported in
/// `empty_intervals`.
pub fn interval_stats(dist: &BasketDistribution, scheme: &ThresholdScheme) -> IntervalStats {
    let omega = scheme.thresholds();
    let eta = omega.len();
    let b = dist.n_baskets() as f64;

    let mut shares = vec![0.0; eta];
    let mut unit_sums = vec![0u64; eta];
    let mut basket_sums = vec![0u64; eta];
    for (z, q) in dist.iter() {
        let k = scheme.interval_of(z);
        basket_sums[k] += q;
        unit_sums[k] += q * z as u64;
    }

    let mut mean_volumes = vec![0.0; eta];
    let mut empty_intervals = Vec::new();
    for k in 0..eta {
        shares[k] = basket_sums[k] as f64 / b;
        if basket_sums[k] > 0 {
            mean_volumes[k] = unit_sums[k] as f64 / basket_sums[k] as f64;
        } else {
            empty_intervals.push(k);
            mean_volumes[k] = if k + 1 < eta {
                (omega[k] as f64 + (omega[k + 1] - 1) as f64) / 2.0
            } else {
                omega[k] as f64
            };
        }
    }

    IntervalStats {
        shares,
        mean_volumes,
        overall_mean: dist.mean_volume(),
        empty_intervals,
    }
}

/// Purchases needed to cover a need of `need` units in baskets of
/// `mean_volume` units, `ceil(need / mean_volume)`, guarded against
/// floating-point edges just below an integer.
fn purchases_to_cover(need: u32, mean_volume: f64) -> u32 {
    ((need as f64 / mean_volume) - 1e-9).ceil().max(1.0) as u32
}

fn is_gamma_one(gamma: f64) -> bool {
    1.0 - gamma < 1e-12
}

/// Maximal admissible discount for an interval with mean volume
/// `mean_volume`: the value at which the interval's expected margin equals
/// the single-unit expected margin.
///
/// At gamma = 1 the continuous extension `1 - need / (mean * ceil)` is used.
pub fn discount_bound(gamma: f64, need: u32, mean_volume: f64) -> f64 {
    let m = purchases_to_cover(need, mean_volume);
    if is_gamma_one(gamma) {
        1.0 - need as f64 / (mean_volume * m as f64)
    } else {
        1.0 - (1.0 - gamma.powi(need as i32)) / (mean_volume * (1.0 - gamma.powi(m as i32)))
    }
}

/// Discount vector with the first interval pinned at zero and later
/// intervals set AT the bound, clamped to `[0, 1)` and made non-decreasing
/// by a running maximum.
pub fn compute_discounts(stats: &IntervalStats, gamma: f64, need: u32) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidInput(format!("gamma must be in [0, 1], got {gamma}")));
    }
    if need < 1 {
        return Err(Error::InvalidInput("need must be >= 1".into()));
    }
    if stats.mean_volumes.iter().any(|&v| v < 1.0) {
        return Err(Error::InvalidInput("interval mean volumes must be >= 1".into()));
    }
    let mut discounts = vec![0.0];
    let mut running = 0.0f64;
    for k in 1..stats.eta() {
        let bound = discount_bound(gamma, need, stats.mean_volumes[k]).clamp(0.0, 1.0 - 1e-12);
        running = running.max(bound);
        discounts.push(running);
    }
    Ok(discounts)
}

/// Expected margin from one customer with a total need of `need` units who
/// always buys baskets of `mean_volume` units at discount `discount`:
/// the truncated geometric sum of per-purchase margins.
///
/// With `mean_volume = 1` and `discount = 0` this is the single-unit case.
pub fn expected_margin(base_margin: f64, gamma: f64, need: u32, mean_volume: f64, discount: f64) -> f64 {
    let m = purchases_to_cover(need, mean_volume);
    let geo = if is_gamma_one(gamma) {
        m as f64
    } else {
        (1.0 - gamma.powi(m as i32)) / (1.0 - gamma)
    };
    geo * (1.0 - discount) * base_margin * mean_volume
}

/// Computes the base margin making the volume-weighted margin of the
/// discounted schedule coincide with the single-price optimum
/// (`sum_k mean_volume_k * margin_k = optimal_margin * overall_mean`), then
/// derives per-interval margins and prices.
pub fn compute_margins(
    stats: &IntervalStats,
    discounts: &[f64],
    optimal_margin: f64,
    cost: f64,
    need: u32,
) -> Result<DiscountSchedule> {
    if !(optimal_margin > 0.0) {
        return Err(Error::InvalidInput(format!(
            "optimal margin must be > 0, got {optimal_margin}"
        )));
    }
    if !(cost >= 0.0) {
        return Err(Error::InvalidInput("cost must be >= 0".into()));
    }
    if discounts.len() != stats.eta() {
        return Err(Error::InvalidInput("one discount per interval required".into()));
    }
    if discounts.first() != Some(&0.0) {
        return Err(Error::InvalidInput("first discount must be 0".into()));
    }
    if discounts.iter().any(|&d| !(0.0..1.0).contains(&d)) {
        return Err(Error::InvalidInput("discounts must lie in [0, 1)".into()));
    }
    let denom: f64 = discounts
        .iter()
        .zip(stats.mean_volumes.iter())
        .map(|(&d, &v)| (1.0 - d) * v)
        .sum();
    assert!(denom > 0.0, "denominator positive since discounts < 1 and volumes >= 1");
    let base_margin = optimal_margin * stats.overall_mean / denom;
    let margins: Vec<f64> = discounts.iter().map(|&d| base_margin * (1.0 - d)).collect();
    let prices: Vec<f64> = margins.iter().map(|&m| cost + m).collect();
    Ok(DiscountSchedule {
        discounts: discounts.to_vec(),
        base_margin,
        margins,
        prices,
        need,
    })
}

/// Runs the whole phase-2 pipeline for one round.
///
/// The customer need is floored at the largest threshold so the discount
/// bound always refers to a need coverable by the top interval. Intervals
/// whose computed prices came out equal are merged (the posted strategy
/// must have strictly decreasing prices); merging never changes what any
/// basket pays.
pub fn assemble_strategy(
    decision: &PricingDecision,
    dist: &BasketDistribution,
    gamma: f64,
    eta: usize,
    need: u32,
    cost: f64,
) -> Result<AssembledStrategy> {
    let optimal_margin = decision.price - cost;
    if !(optimal_margin > 0.0) {
        return Err(Error::InvalidInput(format!(
            "optimal price {} must exceed cost {cost}",
            decision.price
        )));
    }
    let selection = select_thresholds(dist, eta)?;
    let scheme = &selection.scheme;
    let need = need.max(*scheme.thresholds().last().expect("non-empty")).max(1);
    let stats = interval_stats(dist, scheme);
    let discounts = compute_discounts(&stats, gamma, need)?;
    let schedule = compute_margins(&stats, &discounts, optimal_margin, cost, need)?;

    let mut thresholds = Vec::new();
    let mut prices = Vec::new();
    let mut kept_discounts = Vec::new();
    for k in 0..scheme.eta() {
        if prices.last().map(|&p: &f64| schedule.prices[k] < p).unwrap_or(true) {
            thresholds.push(scheme.thresholds()[k]);
            prices.push(schedule.prices[k]);
            kept_discounts.push(schedule.discounts[k]);
        }
    }
    let strategy = PricingStrategy::new(thresholds, prices)?;
    Ok(AssembledStrategy {
        strategy,
        discounts: kept_discounts,
        gamma,
        need,
        schedule,
        stats,
        requested_eta: eta,
    })
}

/// Rounded mean of total units per customer, the data-driven default for
/// the need parameter.
pub fn estimate_need(txns: &[Transaction]) -> Result<u32> {
    if txns.is_empty() {
        return Err(Error::EmptyInput("need estimation requires transactions"));
    }
    let mut customers = std::collections::HashSet::new();
    let mut units = 0u64;
    for t in txns {
        customers.insert(t.customer_id.as_str());
        units += t.units as u64;
    }
    Ok(((units as f64 / customers.len() as f64).round() as u32).max(1))
}
