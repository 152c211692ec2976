//! Simulation campaigns and statistical reports: the `simulate`, `abtest`
//! and `report` commands.

use std::path::Path;

use anyhow::{bail, Context, Result};

use pvdb_core::config::{derive_seed, EngineConfig};
use pvdb_core::data::Transaction;
use pvdb_core::discount::PricingStrategy;
use pvdb_core::error::Result as CoreResult;
use pvdb_core::eval::{ab_report, ProductSeries, Tail};
use pvdb_core::optimizer::PricingDecision;
use pvdb_core::policy::{FixedPolicy, PvdbPolicy, RandomPolicy};
use pvdb_core::sim::{oracle_price, simulate_horizon, MarketConfig, PricingPolicy, SimOutcome};

use crate::files::{self, StrategyRow};

fn tail(config: &EngineConfig) -> Tail {
    if config.evaluation.two_sided {
        Tail::TwoSided
    } else {
        Tail::OneSided
    }
}

fn market_config(config: &EngineConfig, label: &str) -> Result<MarketConfig> {
    let section = config
        .market
        .as_ref()
        .context("config has no [market] section")?;
    Ok(section.to_market_config(derive_seed(config.seed, label))?)
}

fn strategy_rows(product: &str, outcome: &SimOutcome, policy: &PvdbPolicy) -> Vec<StrategyRow> {
    let assembled: std::collections::BTreeMap<u32, _> =
        policy.assembled().iter().map(|(w, a)| (*w, a)).collect();
    outcome
        .weeks
        .iter()
        .map(|rec| match assembled.get(&rec.week) {
            Some(a) => StrategyRow::from_assembled(product, rec.week, a),
            None => StrategyRow::single(product, rec.week, rec.strategy.prices()[0]),
        })
        .collect()
}

/// Closed-loop run of the configured market under the two-phase policy.
pub fn cmd_simulate(config: &EngineConfig, _base: &Path) -> Result<()> {
    let market = market_config(config, "simulate/market")?;
    let grid = config.grid.build(market.unit_cost)?;
    market.validate_against_grid(&grid)?;
    let mut policy = PvdbPolicy::new(
        config.pvdb_config()?,
        grid,
        market.unit_cost,
        market.origin,
        derive_seed(config.seed, "simulate/policy"),
    );
    let outcome = simulate_horizon(&market, &mut policy)?;

    let out = &config.paths.output_dir;
    files::ensure_dir(out)?;
    files::write_transactions(&out.join("transactions.csv"), &outcome.transactions)?;
    let decisions: Vec<(String, PricingDecision)> = policy
        .decisions()
        .iter()
        .map(|d| (market.product_id.clone(), d.clone()))
        .collect();
    files::write_decisions(&out.join("decisions.csv"), &decisions)?;
    files::write_strategies(
        &out.join("strategy.csv"),
        config.discount.eta,
        &strategy_rows(&market.product_id, &outcome, &policy),
    )?;
    let margins: Vec<(String, u32, f64)> = outcome
        .weeks
        .iter()
        .map(|w| (market.product_id.clone(), w.week, w.profit))
        .collect();
    files::write_margins(&out.join("margins.csv"), &margins)?;

    let total_units: u64 = outcome
        .weeks
        .iter()
        .map(|w| w.interval_units.iter().sum::<u64>())
        .sum();
    let mut summary = String::new();
    summary.push_str(&format!("product: {}\n", market.product_id));
    summary.push_str(&format!("weeks: {}\n", outcome.weeks.len()));
    summary.push_str(&format!("transactions: {}\n", outcome.transactions.len()));
    summary.push_str(&format!("units sold: {total_units}\n"));
    summary.push_str(&format!("total profit: {}\n", outcome.total_profit()));
    std::fs::write(out.join("summary.txt"), summary)?;
    println!(
        "simulated {} weeks, {} transactions, total profit {}",
        outcome.weeks.len(),
        outcome.transactions.len(),
        outcome.total_profit()
    );
    Ok(())
}

/// Baseline arm for A/B runs.
enum Baseline {
    Oracle,
    Random,
}

impl Baseline {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "oracle" => Ok(Baseline::Oracle),
            "random" => Ok(Baseline::Random),
            other => bail!("unknown abtest baseline {other:?} (expected \"oracle\" or \"random\")"),
        }
    }

    fn build(
        &self,
        market: &MarketConfig,
        grid: &pvdb_core::optimizer::PriceGrid,
        seed: u64,
    ) -> CoreResult<Box<dyn PricingPolicy>> {
        Ok(match self {
            Baseline::Oracle => {
                let price = oracle_price(market, grid, 0)?.price;
                Box::new(FixedPolicy::new(PricingStrategy::single(price)?))
            }
            Baseline::Random => Box::new(RandomPolicy::new(grid.clone(), seed)),
        })
    }
}

/// Runs the baseline for the first `switch_week` rounds, the treatment
/// policy afterwards.
struct SwitchPolicy {
    baseline: Box<dyn PricingPolicy>,
    treatment: PvdbPolicy,
    switch_week: u32,
}

impl PricingPolicy for SwitchPolicy {
    fn decide(&mut self, history: &[Transaction], week: u32) -> CoreResult<PricingStrategy> {
        if week < self.switch_week {
            self.baseline.decide(history, week)
        } else {
            self.treatment.decide(history, week)
        }
    }
}

/// Simulated A/B campaign: set A is priced by the algorithm (after an
/// optional shared baseline pre-period), set B by the baseline policy.
/// Each product is an independent market instance with a derived seed.
pub fn cmd_abtest(config: &EngineConfig, _base: &Path) -> Result<()> {
    let section = config
        .market
        .as_ref()
        .context("config has no [market] section")?;
    let ab = &config.abtest;
    let baseline = Baseline::parse(&ab.baseline)?;
    if ab.products_a == 0 || ab.products_b == 0 {
        bail!("abtest needs at least one product per set");
    }

    let out = &config.paths.output_dir;
    files::ensure_dir(out)?;

    let mut margins_a = Vec::new();
    let mut margins_b = Vec::new();
    let mut series_a = Vec::new();
    let mut series_b = Vec::new();
    let mut txns_a: Vec<Transaction> = Vec::new();
    let mut txns_b: Vec<Transaction> = Vec::new();
    let mut decisions_a: Vec<(String, PricingDecision)> = Vec::new();
    let mut strategies_a: Vec<StrategyRow> = Vec::new();

    for k in 0..ab.products_a {
        let pid = format!("A{k:02}");
        let mut market =
            section.to_market_config(derive_seed(config.seed, &format!("abtest/market/{pid}")))?;
        market.product_id = pid.clone();
        if ab.pre_weeks >= market.horizon_weeks {
            bail!("pre_weeks must be below the horizon");
        }
        let grid = config.grid.build(market.unit_cost)?;
        market.validate_against_grid(&grid)?;
        let treatment = PvdbPolicy::new(
            config.pvdb_config()?,
            grid.clone(),
            market.unit_cost,
            market.origin,
            derive_seed(config.seed, &format!("abtest/policy/{pid}")),
        );
        let mut policy = SwitchPolicy {
            baseline: baseline.build(&market, &grid, derive_seed(config.seed, &format!("abtest/base/{pid}")))?,
            treatment,
            switch_week: ab.pre_weeks,
        };
        let outcome = simulate_horizon(&market, &mut policy)?;
        for w in &outcome.weeks {
            margins_a.push((pid.clone(), w.week, w.profit));
        }
        series_a.push(ProductSeries {
            product_id: pid.clone(),
            weekly: outcome.weeks.iter().map(|w| (w.week, w.profit)).collect(),
        });
        decisions_a.extend(
            policy
                .treatment
                .decisions()
                .iter()
                .map(|d| (pid.clone(), d.clone())),
        );
        strategies_a.extend(strategy_rows(&pid, &outcome, &policy.treatment));
        txns_a.extend(outcome.transactions);
    }

    for k in 0..ab.products_b {
        let pid = format!("B{k:02}");
        let mut market =
            section.to_market_config(derive_seed(config.seed, &format!("abtest/market/{pid}")))?;
        market.product_id = pid.clone();
        let grid = config.grid.build(market.unit_cost)?;
        market.validate_against_grid(&grid)?;
        let mut policy =
            baseline.build(&market, &grid, derive_seed(config.seed, &format!("abtest/base/{pid}")))?;
        let outcome = simulate_horizon(&market, policy.as_mut())?;
        for w in &outcome.weeks {
            margins_b.push((pid.clone(), w.week, w.profit));
        }
        series_b.push(ProductSeries {
            product_id: pid.clone(),
            weekly: outcome.weeks.iter().map(|w| (w.week, w.profit)).collect(),
        });
        txns_b.extend(outcome.transactions);
    }

    files::write_margins(&out.join("margins_a.csv"), &margins_a)?;
    files::write_margins(&out.join("margins_b.csv"), &margins_b)?;
    files::write_transactions(&out.join("transactions_a.csv"), &txns_a)?;
    files::write_transactions(&out.join("transactions_b.csv"), &txns_b)?;
    files::write_decisions(&out.join("decisions_a.csv"), &decisions_a)?;
    files::write_strategies(&out.join("strategy_a.csv"), config.discount.eta, &strategies_a)?;

    let split = (ab.pre_weeks > 0).then_some(ab.pre_weeks);
    let report = ab_report(
        &series_a,
        &series_b,
        split,
        tail(config),
        config.evaluation.permutations,
        derive_seed(config.seed, "abtest/tests"),
    )?;
    files::write_report(out, &report, config.evaluation.histogram_bins)?;
    println!(
        "A/B done: ratio {} | median p {} | mean p {}",
        report.ratio, report.median_test.p_value, report.mean_test.p_value
    );
    Ok(())
}

/// Builds the statistical report from two existing weekly-margin CSVs.
pub fn cmd_report(
    config: &EngineConfig,
    _base: &Path,
    a: &Path,
    b: &Path,
    split: Option<u32>,
) -> Result<()> {
    let series_a = files::read_margins(a)?;
    let series_b = files::read_margins(b)?;
    if series_a.is_empty() || series_b.is_empty() {
        bail!("both margin files must contain at least one product");
    }
    let report = ab_report(
        &series_a,
        &series_b,
        split,
        tail(config),
        config.evaluation.permutations,
        derive_seed(config.seed, "report"),
    )?;
    let out = &config.paths.output_dir;
    files::ensure_dir(out)?;
    files::write_report(out, &report, config.evaluation.histogram_bins)?;
    println!(
        "ratio {} | median p {} | mean p {}",
        report.ratio, report.median_test.p_value, report.mean_test.p_value
    );
    Ok(())
}
