//! Per-product pricing pipeline: the `price` and `discounts` commands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Duration, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pvdb_core::config::{derive_seed, resolve, EngineConfig};
use pvdb_core::data::{
    aggregate_weekly, basket_distribution, build_customer_index, ingest_csv, latest_unit_cost,
    list_products, TimeInterval, Transaction, WeeklyAggregate, WEEK_SECONDS,
};
use pvdb_core::demand::{fit_posterior, sample_demand};
use pvdb_core::discount::{assemble_strategy, estimate_gamma, estimate_need};
use pvdb_core::optimizer::{optimal_price, PricingDecision};
use pvdb_core::policy::data_driven_spec;

use crate::files::{self, StrategyRow};

fn transactions_path(config: &EngineConfig, base: &Path) -> Result<PathBuf> {
    let p = config
        .paths
        .transactions
        .as_ref()
        .context("config has no [paths].transactions entry")?;
    Ok(resolve(base, p))
}

/// Runs both phases for one or all products and writes the decision and
/// strategy logs. Failures on individual products do not abort the rest;
/// they are reported at the end with a non-zero exit.
pub fn cmd_price(
    config: &EngineConfig,
    base: &Path,
    product: Option<&str>,
    week: Option<u32>,
) -> Result<()> {
    let tx_path = transactions_path(config, base)?;
    let products: Vec<String> = match product {
        Some(p) => vec![p.to_string()],
        None => list_products(&tx_path)?,
    };
    if products.is_empty() {
        bail!("no products found in {}", tx_path.display());
    }
    let out = &config.paths.output_dir;
    files::ensure_dir(out)?;

    let mut decisions: Vec<(String, PricingDecision)> = Vec::new();
    let mut strategies: Vec<StrategyRow> = Vec::new();
    let mut failures = Vec::new();
    for pid in &products {
        match price_one(config, &tx_path, pid, week) {
            Ok((decision, row, posterior)) => {
                if let Some(p) = &config.paths.posterior {
                    let path = posterior_path(base, p, pid);
                    std::fs::write(&path, posterior)
                        .with_context(|| format!("writing {}", path.display()))?;
                }
                decisions.push((pid.clone(), decision));
                strategies.push(row);
            }
            Err(e) => {
                eprintln!("{pid}: {e:#}");
                failures.push(pid.clone());
            }
        }
    }
    files::write_decisions(&out.join("decisions.csv"), &decisions)?;
    files::write_strategies(&out.join("strategy.csv"), config.discount.eta, &strategies)?;
    for (pid, d) in &decisions {
        println!(
            "{pid}: week {} price {} (sampled volume {}, sampled profit {})",
            d.week_index, d.price, d.sampled_volume, d.sampled_profit
        );
    }
    if !failures.is_empty() {
        bail!("{} of {} products failed: {}", failures.len(), products.len(), failures.join(", "));
    }
    Ok(())
}

fn posterior_path(base: &Path, configured: &Path, product: &str) -> PathBuf {
    let resolved = resolve(base, configured);
    let stem = resolved
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "posterior".into());
    resolved.with_file_name(format!("{stem}_{product}.json"))
}

fn price_one(
    config: &EngineConfig,
    tx_path: &Path,
    product: &str,
    week: Option<u32>,
) -> Result<(PricingDecision, StrategyRow, String)> {
    let txns = ingest_csv(tx_path, product)?;
    if txns.is_empty() {
        bail!("no transactions for product {product}");
    }
    let origin = txns[0].timestamp;
    let aggregates = aggregate_weekly(&txns, origin)?;
    let last_week = aggregates.last().expect("non-empty").week_index;
    let week = week.unwrap_or(last_week + 1);

    let history: Vec<WeeklyAggregate> =
        aggregates.into_iter().filter(|a| a.week_index < week).collect();
    let cutoff = origin + Duration::seconds(week as i64 * WEEK_SECONDS);
    let hist_txns: Vec<Transaction> =
        txns.into_iter().filter(|t| t.timestamp < cutoff).collect();
    if hist_txns.is_empty() {
        bail!("no transactions for product {product} before week {week}");
    }

    let cost = latest_unit_cost(&hist_txns).expect("non-empty");
    if !(cost > 0.0) {
        bail!("product {product}: unit cost {cost} must be positive to build the margin grid");
    }
    let grid = config.grid.build(cost)?;
    let basis = config.basis.to_basis_config();
    let spec = data_driven_spec(&basis, &history, &grid, week, config.basis.adaptive_prior_scale)?;
    let posterior = fit_posterior(&spec, &history)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        config.seed,
        &format!("price/{product}/{week}"),
    ));
    let sample = sample_demand(&posterior, &spec, &mut rng)?;
    let decision = optimal_price(&sample, &grid, cost, week)?;

    let row = phase_two_row(config, &hist_txns, &decision, product, week, cost, origin)?;
    Ok((decision, row, posterior.to_json()))
}

/// Default buyback estimation windows: the year preceding the priced week
/// (clipped to the data span), split into two halves.
fn default_gamma_periods(
    origin: DateTime<Utc>,
    week: u32,
) -> Option<(TimeInterval, TimeInterval)> {
    let pricing_start = origin + Duration::seconds(week as i64 * WEEK_SECONDS);
    let year_back = pricing_start - Duration::seconds(52 * WEEK_SECONDS);
    let start = year_back.max(origin);
    if pricing_start - start < Duration::seconds(2 * WEEK_SECONDS) {
        return None;
    }
    let mid = start + (pricing_start - start) / 2;
    let measure = TimeInterval::new(start, mid).ok()?;
    let control = TimeInterval::new(mid, pricing_start).ok()?;
    Some((measure, control))
}

fn estimate_gamma_for(
    config: &EngineConfig,
    txns: &[Transaction],
    origin: DateTime<Utc>,
    week: u32,
    product: &str,
) -> Result<f64> {
    let default = config.discount.gamma_default;
    let periods = match config.discount.explicit_periods()? {
        Some(p) => Some(p),
        None => default_gamma_periods(origin, week),
    };
    let Some((measure, control)) = periods else {
        eprintln!("{product}: history too short for buyback estimation, using default gamma {default}");
        return Ok(default);
    };
    let index = build_customer_index(txns, &[measure, control])?;
    let est = estimate_gamma(&index, &measure, &control, default)?;
    if est.defaulted {
        eprintln!("{product}: no customers in the measure period, using default gamma {default}");
    }
    // the discount bound needs gamma < 1
    if est.gamma >= 1.0 {
        eprintln!("{product}: estimated gamma {} is degenerate, using default {default}", est.gamma);
        return Ok(default);
    }
    Ok(est.gamma)
}

fn phase_two_row(
    config: &EngineConfig,
    hist_txns: &[Transaction],
    decision: &PricingDecision,
    product: &str,
    week: u32,
    cost: f64,
    origin: DateTime<Utc>,
) -> Result<StrategyRow> {
    let eta = config.discount.eta;
    if eta == 1 {
        return Ok(StrategyRow::single(product, week, decision.price));
    }
    let dist = basket_distribution(hist_txns)?;
    let gamma = estimate_gamma_for(config, hist_txns, origin, week, product)?;
    let need = match config.discount.need_override {
        Some(n) => n,
        None => estimate_need(hist_txns)?,
    };
    let assembled = assemble_strategy(decision, &dist, gamma, eta, need, cost)?;
    if assembled.strategy.eta() < eta {
        eprintln!(
            "{product}: effective thresholds reduced to {} (requested {eta})",
            assembled.strategy.eta()
        );
    }
    Ok(StrategyRow::from_assembled(product, week, &assembled))
}

/// Phase 2 alone: discount schedule for a given target price.
pub fn cmd_discounts(
    config: &EngineConfig,
    base: &Path,
    product: &str,
    price: f64,
    week: Option<u32>,
) -> Result<()> {
    let tx_path = transactions_path(config, base)?;
    let txns = ingest_csv(&tx_path, product)?;
    if txns.is_empty() {
        bail!("no transactions for product {product}");
    }
    let origin = txns[0].timestamp;
    let aggregates = aggregate_weekly(&txns, origin)?;
    let week = week.unwrap_or(aggregates.last().expect("non-empty").week_index + 1);
    let cost = latest_unit_cost(&txns).expect("non-empty");
    if !(price > cost) {
        bail!("target price {price} must exceed the unit cost {cost}");
    }
    let decision = PricingDecision {
        week_index: week,
        price,
        sampled_volume: 0.0,
        sampled_profit: 0.0,
    };
    let row = phase_two_row(config, &txns, &decision, product, week, cost, origin)?;
    let out = &config.paths.output_dir;
    files::ensure_dir(out)?;
    files::write_strategies(&out.join("strategy.csv"), config.discount.eta, &[row.clone()])?;
    println!(
        "{product}: week {week} thresholds {:?} prices {:?}",
        row.thresholds, row.prices
    );
    Ok(())
}
