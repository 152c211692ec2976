//! Artifact readers and writers.
//!
//! All numbers are written with Rust's shortest round-trip formatting, so a
//! rerun with the same config and seed reproduces every file byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use pvdb_core::data::{write_csv, Transaction};
use pvdb_core::discount::AssembledStrategy;
use pvdb_core::eval::{histogram, AbReport, PermutationTestResult, ProductSeries};
use pvdb_core::optimizer::PricingDecision;

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("writing {}", path.display()))?,
    ))
}

/// One strategy log row. Single-price rounds leave the buyback and need
/// columns empty.
#[derive(Debug, Clone)]
pub struct StrategyRow {
    pub product_id: String,
    pub week: u32,
    pub thresholds: Vec<u32>,
    pub prices: Vec<f64>,
    pub gamma: Option<f64>,
    pub need: Option<u32>,
    pub discounts: Vec<f64>,
}

impl StrategyRow {
    pub fn single(product_id: &str, week: u32, price: f64) -> Self {
        Self {
            product_id: product_id.into(),
            week,
            thresholds: vec![1],
            prices: vec![price],
            gamma: None,
            need: None,
            discounts: vec![0.0],
        }
    }

    pub fn from_assembled(product_id: &str, week: u32, a: &AssembledStrategy) -> Self {
        Self {
            product_id: product_id.into(),
            week,
            thresholds: a.strategy.thresholds().to_vec(),
            prices: a.strategy.prices().to_vec(),
            gamma: Some(a.gamma),
            need: Some(a.need),
            discounts: a.discounts.clone(),
        }
    }
}

pub fn write_decisions(path: &Path, rows: &[(String, PricingDecision)]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "week_index,product_id,price,sampled_volume,sampled_profit")?;
    for (product, d) in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            d.week_index, product, d.price, d.sampled_volume, d.sampled_profit
        )?;
    }
    Ok(())
}

/// Strategy CSV with one threshold/price/discount column group per interval
/// up to `eta`; rows with fewer effective intervals leave the extra columns
/// empty.
pub fn write_strategies(path: &Path, eta: usize, rows: &[StrategyRow]) -> Result<()> {
    let mut w = create(path)?;
    let mut header = vec!["product_id".to_string(), "week_index".to_string()];
    header.extend((1..=eta).map(|k| format!("omega_{k}")));
    header.extend((1..=eta).map(|k| format!("price_{k}")));
    header.push("gamma".into());
    header.push("N".into());
    header.extend((1..=eta).map(|k| format!("delta_{k}")));
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let mut fields = vec![row.product_id.clone(), row.week.to_string()];
        for k in 0..eta {
            fields.push(row.thresholds.get(k).map(|v| v.to_string()).unwrap_or_default());
        }
        for k in 0..eta {
            fields.push(row.prices.get(k).map(|v| v.to_string()).unwrap_or_default());
        }
        fields.push(row.gamma.map(|g| g.to_string()).unwrap_or_default());
        fields.push(row.need.map(|n| n.to_string()).unwrap_or_default());
        for k in 0..eta {
            fields.push(row.discounts.get(k).map(|v| v.to_string()).unwrap_or_default());
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn write_margins(path: &Path, rows: &[(String, u32, f64)]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "product_id,week_index,margin")?;
    for (product, week, margin) in rows {
        writeln!(w, "{product},{week},{margin}")?;
    }
    Ok(())
}

pub fn read_margins(path: &Path) -> Result<Vec<ProductSeries>> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == "product_id,week_index,margin" => {}
        other => bail!("{}: expected margin CSV header, got {other:?}", path.display()),
    }
    let mut by_product: BTreeMap<String, Vec<(u32, f64)>> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            bail!("{} line {}: expected 3 fields", path.display(), i + 2);
        }
        let week: u32 = parts[1].parse().with_context(|| format!("line {}", i + 2))?;
        let margin: f64 = parts[2].parse().with_context(|| format!("line {}", i + 2))?;
        by_product.entry(parts[0].to_string()).or_default().push((week, margin));
    }
    Ok(by_product
        .into_iter()
        .map(|(product_id, weekly)| ProductSeries { product_id, weekly })
        .collect())
}

pub fn write_transactions(path: &Path, txns: &[Transaction]) -> Result<()> {
    let mut w = create(path)?;
    write_csv(&mut w, txns)?;
    Ok(())
}

pub fn write_histogram(path: &Path, values: &[f64], bins: usize) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "bin_lo,bin_hi,count")?;
    for (lo, hi, count) in histogram(values, bins) {
        writeln!(w, "{lo},{hi},{count}")?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn test_summary(label: &str, t: &PermutationTestResult) -> String {
    format!(
        "{label}: observed difference {}, p-value {} ({} permutations{})",
        t.observed,
        t.p_value,
        t.permutations,
        if t.degenerate { ", degenerate" } else { "" }
    )
}

pub fn write_report(dir: &Path, report: &AbReport, bins: usize) -> Result<()> {
    let mut csv = create(&dir.join("report.csv"))?;
    writeln!(csv, "metric,value")?;
    writeln!(csv, "mean_margin_a,{}", report.mean_margin_a)?;
    writeln!(csv, "mean_margin_b,{}", report.mean_margin_b)?;
    writeln!(csv, "ratio_a_over_b,{}", report.ratio)?;
    writeln!(csv, "median_diff_observed,{}", report.median_test.observed)?;
    writeln!(csv, "median_diff_p,{}", report.median_test.p_value)?;
    writeln!(csv, "mean_diff_observed,{}", report.mean_test.observed)?;
    writeln!(csv, "mean_diff_p,{}", report.mean_test.p_value)?;
    writeln!(csv, "improvement_share_a,{}", fmt_opt(report.improvement_share_a))?;
    writeln!(csv, "improvement_share_b,{}", fmt_opt(report.improvement_share_b))?;
    drop(csv);

    let mut per = create(&dir.join("per_product.csv"))?;
    writeln!(per, "set,product_id,avg_weekly_margin")?;
    for (pid, m) in &report.per_product_a {
        writeln!(per, "A,{pid},{m}")?;
    }
    for (pid, m) in &report.per_product_b {
        writeln!(per, "B,{pid},{m}")?;
    }
    drop(per);

    write_histogram(&dir.join("hist_median.csv"), &report.median_test.permuted, bins)?;
    write_histogram(&dir.join("hist_mean.csv"), &report.mean_test.permuted, bins)?;

    let mut txt = create(&dir.join("report.txt"))?;
    writeln!(txt, "A/B comparison of average weekly net margins")?;
    writeln!(txt, "set A: {} products, mean {}", report.per_product_a.len(), report.mean_margin_a)?;
    writeln!(txt, "set B: {} products, mean {}", report.per_product_b.len(), report.mean_margin_b)?;
    writeln!(txt, "ratio A/B: {}", report.ratio)?;
    writeln!(txt, "{}", test_summary("median test", &report.median_test))?;
    writeln!(txt, "{}", test_summary("mean test", &report.mean_test))?;
    if let (Some(a), Some(b)) = (report.improvement_share_a, report.improvement_share_b) {
        writeln!(txt, "improvement share vs reference window: A {a}, B {b}")?;
    }
    Ok(())
}
