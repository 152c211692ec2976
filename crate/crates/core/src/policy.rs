//! Closed-loop pricing policies: the full two-phase algorithm and the
//! baselines it is compared against.

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{aggregate_weekly, basket_distribution, build_customer_index, TimeInterval, Transaction, WEEK_SECONDS};
use crate::demand::BasisConfig;
use crate::discount::{assemble_strategy, estimate_gamma, estimate_need, AssembledStrategy, PricingStrategy};
use crate::error::Result;
use crate::optimizer::{run_round, PriceGrid, PricingDecision};
use crate::sim::PricingPolicy;

/// Tunables of the two-phase policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvdbConfig {
    pub basis: BasisConfig,
    /// Number of volume thresholds to post (1 disables phase 2).
    pub eta: usize,
    /// Buyback probability used when the estimator has no data.
    pub gamma_default: f64,
    /// Overrides the data-driven customer-need estimate.
    pub need_override: Option<u32>,
    /// Explicit measure/control periods for buyback estimation; when
    /// absent, the trailing year of history is split into two halves.
    pub gamma_periods: Option<(TimeInterval, TimeInterval)>,
    /// Weeks of history required before discounts are attempted; below
    /// this the policy posts the single phase-1 price.
    pub min_discount_history: u32,
    /// Re-center the lognormal price-coefficient prior each round so its
    /// implied volume matches the observed mean weekly volume. Without
    /// this, a prior scaled far below the market's true volume keeps
    /// unexplored prices pessimistic and stalls exploration.
    pub adaptive_prior_scale: bool,
}

impl Default for PvdbConfig {
    fn default() -> Self {
        Self {
            basis: BasisConfig::default(),
            eta: 3,
            gamma_default: 0.5,
            need_override: None,
            gamma_periods: None,
            min_discount_history: 2,
            adaptive_prior_scale: true,
        }
    }
}

/// Builds the basis spec for one fitting round from the observed data:
/// tanh shifts over the observed price range (grid bounds when empty), RBF
/// centers over the observed weeks, and, when requested, the price prior
/// re-centered on the observed volume scale.
pub fn data_driven_spec(
    basis: &BasisConfig,
    aggregates: &[crate::data::WeeklyAggregate],
    grid: &PriceGrid,
    week: u32,
    adaptive_prior: bool,
) -> Result<crate::demand::BasisSpec> {
    let (min_p, max_p) = if aggregates.is_empty() {
        (grid.min_price(), grid.max_price())
    } else {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for a in aggregates {
            lo = lo.min(a.avg_price);
            hi = hi.max(a.avg_price);
        }
        (lo, hi)
    };
    let min_week = aggregates.first().map(|a| a.week_index).unwrap_or(0);
    let mut basis = basis.clone();
    if adaptive_prior && !aggregates.is_empty() {
        // U coefficients at basis values ~1/2 should add up to the mean
        // weekly volume
        let mean_volume =
            aggregates.iter().map(|a| a.total_volume as f64).sum::<f64>() / aggregates.len() as f64;
        let per_basis =
            (mean_volume.max(1.0) / (0.5 * basis.n_price_bases.max(1) as f64)).max(1.0);
        basis.price_prior.mean = per_basis.ln();
    }
    basis.build(min_p, max_p, min_week, week.max(min_week))
}

/// The full algorithm as a closed-loop policy: every round refits the
/// demand posterior on the aggregated history, draws one Thompson sample,
/// maximizes sampled profit on the grid, then layers the volume-discount
/// schedule on top of the chosen price.
pub struct PvdbPolicy {
    cfg: PvdbConfig,
    grid: PriceGrid,
    unit_cost: f64,
    origin: DateTime<Utc>,
    rng: ChaCha8Rng,
    decisions: Vec<PricingDecision>,
    assembled: Vec<(u32, AssembledStrategy)>,
}

impl PvdbPolicy {
    pub fn new(cfg: PvdbConfig, grid: PriceGrid, unit_cost: f64, origin: DateTime<Utc>, seed: u64) -> Self {
        Self {
            cfg,
            grid,
            unit_cost,
            origin,
            rng: ChaCha8Rng::seed_from_u64(seed),
            decisions: Vec::new(),
            assembled: Vec::new(),
        }
    }

    /// Phase-1 decisions recorded so far, one per round.
    pub fn decisions(&self) -> &[PricingDecision] {
        &self.decisions
    }

    /// Phase-2 outputs recorded so far, tagged by round (single-price
    /// rounds record nothing).
    pub fn assembled(&self) -> &[(u32, AssembledStrategy)] {
        &self.assembled
    }

    fn build_spec(&self, aggregates: &[crate::data::WeeklyAggregate], week: u32) -> Result<crate::demand::BasisSpec> {
        data_driven_spec(&self.cfg.basis, aggregates, &self.grid, week, self.cfg.adaptive_prior_scale)
    }

    /// Derived measure/control split: the trailing year of history (or all
    /// of it, if shorter) halved.
    fn derived_periods(&self, week: u32) -> Option<(TimeInterval, TimeInterval)> {
        if week < self.cfg.min_discount_history.max(2) {
            return None;
        }
        let span_weeks = week.min(52) as i64;
        let now = self.origin + Duration::seconds(week as i64 * WEEK_SECONDS);
        let start = now - Duration::seconds(span_weeks * WEEK_SECONDS);
        let mid = start + (now - start) / 2;
        let measure = TimeInterval::new(start, mid).ok()?;
        let control = TimeInterval::new(mid, now).ok()?;
        Some((measure, control))
    }

    fn phase_two(
        &mut self,
        history: &[Transaction],
        decision: &PricingDecision,
        week: u32,
    ) -> Result<Option<AssembledStrategy>> {
        if self.cfg.eta <= 1 || week < self.cfg.min_discount_history {
            return Ok(None);
        }
        let Ok(dist) = basket_distribution(history) else {
            return Ok(None);
        };
        let periods = self.cfg.gamma_periods.or_else(|| self.derived_periods(week));
        let gamma = match periods {
            Some((measure, control)) => {
                let index = build_customer_index(history, &[measure, control])?;
                let est = estimate_gamma(&index, &measure, &control, self.cfg.gamma_default)?;
                // the discount bound needs gamma < 1; back off to the default
                // when every measured customer returned
                if est.gamma >= 1.0 {
                    self.cfg.gamma_default
                } else {
                    est.gamma
                }
            }
            None => self.cfg.gamma_default,
        };
        let need = match self.cfg.need_override {
            Some(n) => n,
            None => estimate_need(history)?,
        };
        let assembled = assemble_strategy(decision, &dist, gamma, self.cfg.eta, need, self.unit_cost)?;
        Ok(Some(assembled))
    }
}

impl PricingPolicy for PvdbPolicy {
    fn decide(&mut self, history: &[Transaction], week: u32) -> Result<PricingStrategy> {
        let mut aggregates = aggregate_weekly(history, self.origin)?;
        // Rounds we priced ourselves that produced no transactions are real
        // zero-volume observations of the demand curve at the posted price;
        // without them, Thompson sampling keeps gambling on prices the
        // market already refused.
        let seen: std::collections::BTreeSet<u32> =
            aggregates.iter().map(|a| a.week_index).collect();
        for d in &self.decisions {
            if d.week_index < week && !seen.contains(&d.week_index) {
                aggregates.push(crate::data::WeeklyAggregate {
                    week_index: d.week_index,
                    avg_price: d.price,
                    total_volume: 0,
                    n_transactions: 0,
                });
            }
        }
        aggregates.sort_by_key(|a| a.week_index);
        let spec = self.build_spec(&aggregates, week)?;
        let decision = run_round(&aggregates, &spec, &self.grid, self.unit_cost, week, &mut self.rng)?;
        let strategy = match self.phase_two(history, &decision, week)? {
            Some(assembled) => {
                let s = assembled.strategy.clone();
                self.assembled.push((week, assembled));
                s
            }
            None => PricingStrategy::single(decision.price)?,
        };
        self.decisions.push(decision);
        Ok(strategy)
    }
}

/// Posts the same strategy every round (clairvoyant baselines, A/B control
/// arms).
pub struct FixedPolicy {
    strategy: PricingStrategy,
}

impl FixedPolicy {
    pub fn new(strategy: PricingStrategy) -> Self {
        Self { strategy }
    }
}

impl PricingPolicy for FixedPolicy {
    fn decide(&mut self, _history: &[Transaction], _week: u32) -> Result<PricingStrategy> {
        Ok(self.strategy.clone())
    }
}

/// Posts a uniformly random grid price every round.
pub struct RandomPolicy {
    grid: PriceGrid,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(grid: PriceGrid, seed: u64) -> Self {
        Self {
            grid,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl PricingPolicy for RandomPolicy {
    fn decide(&mut self, _history: &[Transaction], _week: u32) -> Result<PricingStrategy> {
        let i = self.rng.random_range(0..self.grid.prices().len());
        PricingStrategy::single(self.grid.prices()[i])
    }
}
