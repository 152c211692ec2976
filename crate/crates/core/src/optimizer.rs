//! Phase 1: per-round Thompson selection of the optimal average price.
//!
//! Each round draws one demand curve from the posterior and maximizes
//! sampled profit `(p - c) * v(p, week)` exhaustively over a discrete price
//! grid, breaking ties toward the lowest price.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::WeeklyAggregate;
use crate::demand::{fit_posterior, sample_demand, BasisSpec, DemandSample};
use crate::error::{Error, Result};

/// Finite, strictly increasing set of candidate prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceGrid {
    prices: Vec<f64>,
}

impl PriceGrid {
    pub fn new(prices: Vec<f64>) -> Result<Self> {
        if prices.is_empty() {
            return Err(Error::EmptyInput("price grid"));
        }
        if prices.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput("grid prices must be finite and > 0".into()));
        }
        if prices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("grid prices must be strictly increasing".into()));
        }
        Ok(Self { prices })
    }

    /// Grid spanning margins `[cost*(1+min_margin), cost*(1+max_margin)]`
    /// in steps of `cost * step` (margins relative to unit cost).
    pub fn from_margins(cost: f64, min_margin: f64, max_margin: f64, step: f64) -> Result<Self> {
        if !(cost > 0.0) {
            return Err(Error::InvalidInput("margin grid needs cost > 0".into()));
        }
        if !(step > 0.0) || !(max_margin >= min_margin) || !(min_margin > 0.0) {
            return Err(Error::InvalidInput(format!(
                "bad grid parameters: min {min_margin}, max {max_margin}, step {step}"
            )));
        }
        let mut prices = Vec::new();
        let mut m = min_margin;
        while m <= max_margin + 1e-12 {
            prices.push(cost * (1.0 + m));
            m += step;
        }
        Self::new(prices)
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn min_price(&self) -> f64 {
        self.prices[0]
    }

    pub fn max_price(&self) -> f64 {
        *self.prices.last().expect("non-empty")
    }

    pub fn contains(&self, price: f64) -> bool {
        self.prices.iter().any(|&p| p == price)
    }
}

/// Outcome of one pricing round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingDecision {
    pub week_index: u32,
    /// Chosen grid price p*.
    pub price: f64,
    /// Sampled expected volume at the chosen price.
    pub sampled_volume: f64,
    /// Sampled expected profit `(p* - c) * v(p*)`.
    pub sampled_profit: f64,
}

/// Exhaustive profit maximization of one sampled demand curve over the grid.
///
/// Only prices strictly above the unit cost are considered; ties are broken
/// toward the lowest price.
pub fn optimal_price(
    sample: &DemandSample,
    grid: &PriceGrid,
    cost: f64,
    week: u32,
) -> Result<PricingDecision> {
    if !(cost >= 0.0) {
        return Err(Error::InvalidInput(format!("cost must be >= 0, got {cost}")));
    }
    let mut best: Option<PricingDecision> = None;
    for &p in grid.prices() {
        if p <= cost {
            continue;
        }
        let volume = sample.volume(p, week)?;
        let profit = (p - cost) * volume;
        let better = match &best {
            None => true,
            Some(b) => profit > b.sampled_profit,
        };
        if better {
            best = Some(PricingDecision {
                week_index: week,
                price: p,
                sampled_volume: volume,
                sampled_profit: profit,
            });
        }
    }
    best.ok_or(Error::NoProfitablePrice { cost })
}

/// One full phase-1 round: fit the posterior on the history, draw one
/// Thompson sample, maximize sampled profit on the grid.
///
/// Deterministic given `(history, rng state)`. An empty history prices from
/// a pure prior draw.
pub fn run_round<R: Rng + ?Sized>(
    history: &[WeeklyAggregate],
    spec: &BasisSpec,
    grid: &PriceGrid,
    cost: f64,
    week: u32,
    rng: &mut R,
) -> Result<PricingDecision> {
    let post = fit_posterior(spec, history)?;
    let sample = sample_demand(&post, spec, rng)?;
    optimal_price(&sample, grid, cost, week)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{sample_demand, GaussianPrior, PosteriorState, TanhBasis};
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A demand sample with hand-picked values on a tiny grid, built from a
    /// single very wide tanh basis plus per-price lookups is awkward, so the
    /// tests drive `optimal_price` through a deterministic posterior with a
    /// step-shaped basis layout instead.
    fn sample_with(coef_latent: Vec<f64>, spec: &BasisSpec) -> DemandSample {
        let n = coef_latent.len();
        let post = PosteriorState {
            latent_mean: DVector::from_vec(coef_latent),
            latent_cov: DMatrix::zeros(n, n),
            n_price: spec.n_price(),
            noise_variance: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        sample_demand(&post, spec, &mut rng).unwrap()
    }

    fn flat_spec() -> BasisSpec {
        // one extremely wide basis: effectively constant demand over the grid
        BasisSpec {
            price_bases: vec![TanhBasis { shift: 5.0, scale: 1e9 }],
            time_bases: vec![],
            price_priors: vec![GaussianPrior::new(0.0, 1.0)],
            time_priors: vec![],
            noise_variance: 1.0,
            profile_noise: false,
            noise_floor: 1e-6,
        }
    }

    #[test]
    fn constant_demand_picks_highest_price() {
        let spec = flat_spec();
        // theta = 20 -> volume ~ 10 everywhere (basis value is ~1/2)
        let sample = sample_with(vec![20f64.ln()], &spec);
        let grid = PriceGrid::new(vec![4.0, 5.0, 6.0]).unwrap();
        let d = optimal_price(&sample, &grid, 3.0, 0).unwrap();
        assert_eq!(d.price, 6.0);
        assert!((d.sampled_profit - 30.0).abs() < 1e-6);
    }

    #[test]
    fn decreasing_demand_brute_force() {
        // steep basis straddling the grid: v(4) ~ 10, v(5) ~ 6, v(6) ~ 2
        // built by direct construction of the sample is fiddly; use the
        // derived profits {10, 12, 6} -> price 5 via a two-basis layout.
        let spec = BasisSpec {
            price_bases: vec![
                TanhBasis { shift: 5.0, scale: 0.8 },
                TanhBasis { shift: 5.0, scale: 1e9 },
            ],
            time_bases: vec![],
            price_priors: vec![GaussianPrior::new(0.0, 1.0); 2],
            time_priors: vec![],
            noise_variance: 1.0,
            profile_noise: false,
            noise_floor: 1e-6,
        };
        let sample = sample_with(vec![8f64.ln(), 4f64.ln()], &spec);
        let grid = PriceGrid::new(vec![4.0, 5.0, 6.0]).unwrap();
        // independent brute force over the same sampled curve
        let c = 3.0;
        let mut best_price = f64::NAN;
        let mut best_profit = f64::NEG_INFINITY;
        for &p in grid.prices() {
            let profit = (p - c) * sample.volume(p, 0).unwrap();
            if profit > best_profit {
                best_profit = profit;
                best_price = p;
            }
        }
        let d = optimal_price(&sample, &grid, c, 0).unwrap();
        assert_eq!(d.price, best_price);
        assert!((d.sampled_profit - best_profit).abs() < 1e-12);
    }

    #[test]
    fn tie_breaks_to_lowest_price() {
        let spec = flat_spec();
        // zero demand everywhere: every price yields profit 0, ties all around
        let post = PosteriorState {
            latent_mean: DVector::from_vec(vec![-800.0]),
            latent_cov: DMatrix::zeros(1, 1),
            n_price: 1,
            noise_variance: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sample = sample_demand(&post, &spec, &mut rng).unwrap();
        let grid = PriceGrid::new(vec![4.0, 5.0, 6.0]).unwrap();
        let d = optimal_price(&sample, &grid, 3.0, 0).unwrap();
        assert_eq!(d.price, 4.0);
    }

    #[test]
    fn all_prices_at_or_below_cost_error() {
        let spec = flat_spec();
        let sample = sample_with(vec![1.0], &spec);
        let grid = PriceGrid::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            optimal_price(&sample, &grid, 3.0, 0),
            Err(Error::NoProfitablePrice { .. })
        ));
    }

    #[test]
    fn prices_below_cost_are_skipped() {
        let spec = flat_spec();
        let sample = sample_with(vec![20f64.ln()], &spec);
        let grid = PriceGrid::new(vec![1.0, 2.0, 6.0]).unwrap();
        let d = optimal_price(&sample, &grid, 3.0, 0).unwrap();
        assert_eq!(d.price, 6.0);
    }

    #[test]
    fn margin_grid_construction() {
        let grid = PriceGrid::from_margins(10.0, 0.05, 1.5, 0.01).unwrap();
        assert_eq!(grid.min_price(), 10.0 * 1.05);
        assert!((grid.max_price() - 25.0).abs() < 1e-9);
        assert_eq!(grid.prices().len(), 146);
    }

    #[test]
    fn run_round_is_deterministic() {
        let spec = flat_spec();
        let grid = PriceGrid::new(vec![4.0, 5.0, 6.0]).unwrap();
        let history = vec![WeeklyAggregate {
            week_index: 0,
            avg_price: 5.0,
            total_volume: 9,
            n_transactions: 3,
        }];
        let a = run_round(&history, &spec, &grid, 3.0, 1, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = run_round(&history, &spec, &grid, 3.0, 1, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_history_prices_from_prior() {
        let spec = flat_spec();
        let grid = PriceGrid::new(vec![4.0, 5.0, 6.0]).unwrap();
        let d = run_round(&[], &spec, &grid, 3.0, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(grid.contains(d.price));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // chosen price is always a grid member above cost whenever one exists
            #[test]
            fn chosen_price_on_grid_above_cost(
                raw in proptest::collection::vec(0.5f64..30.0, 1..12),
                cost in 0.0f64..20.0,
                latent in -2.0f64..4.0,
                seed in 0u64..1000,
            ) {
                let mut prices: Vec<f64> = raw;
                prices.sort_by(|a, b| a.partial_cmp(b).unwrap());
                prices.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
                let grid = PriceGrid::new(prices).unwrap();
                let spec = BasisSpec {
                    price_bases: vec![
                        TanhBasis { shift: 10.0, scale: 3.0 },
                        TanhBasis { shift: 20.0, scale: 5.0 },
                    ],
                    time_bases: vec![],
                    price_priors: vec![GaussianPrior::new(latent, 0.5); 2],
                    time_priors: vec![],
                    noise_variance: 1.0,
                    profile_noise: false,
                    noise_floor: 1e-6,
                };
                let post = crate::demand::fit_posterior(&spec, &[]).unwrap();
                let sample = sample_demand(&post, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                match optimal_price(&sample, &grid, cost, 0) {
                    Ok(d) => {
                        prop_assert!(grid.contains(d.price));
                        prop_assert!(d.price > cost);
                    }
                    Err(Error::NoProfitablePrice { .. }) => {
                        prop_assert!(grid.prices().iter().all(|&p| p <= cost));
                    }
                    Err(e) => return Err(TestCaseError::fail(format!("unexpected error {e}"))),
                }
            }
        }
    }
}
