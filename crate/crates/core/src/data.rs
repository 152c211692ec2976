//! Transaction data model and the aggregates feeding both pricing phases.
//!
//! Everything downstream — demand fitting, threshold selection, buyback
//! estimation, the simulator's output — speaks the CSV schema defined here:
//!
//! ```text
//! timestamp,product_id,customer_id,unit_price,units,unit_cost
//! ```
//!
//! Timestamps are RFC 3339, prices use a decimal point and no thousands
//! separators. All types are immutable values after construction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Expected CSV header, in order.
pub const CSV_COLUMNS: [&str; 6] = [
    "timestamp",
    "product_id",
    "customer_id",
    "unit_price",
    "units",
    "unit_cost",
];

/// Seconds in one pricing round (the weekly cadence).
pub const WEEK_SECONDS: i64 = 7 * 24 * 3600;

/// One purchase record, the sole input of the whole pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub timestamp: DateTime<Utc>,
    pub product_id: String,
    pub customer_id: String,
    /// Price per unit actually paid, > 0.
    pub unit_price: f64,
    /// Units in the basket, >= 1.
    pub units: u32,
    /// Cost per unit, >= 0.
    pub unit_cost: f64,
}

impl Transaction {
    fn check(&self) -> std::result::Result<(), String> {
        if self.units < 1 {
            return Err(format!("units must be >= 1, got {}", self.units));
        }
        if !(self.unit_price > 0.0) {
            return Err(format!("unit_price must be > 0, got {}", self.unit_price));
        }
        if !(self.unit_cost >= 0.0) {
            return Err(format!("unit_cost must be >= 0, got {}", self.unit_cost));
        }
        Ok(())
    }
}

/// Half-open time interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeInterval {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl TimeInterval {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>) -> Result<Self> {
        if end <= start {
            return Err(Error::InvalidInput(format!(
                "interval end {end} must be after start {start}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.start <= t && t < self.end
    }

    pub fn overlaps(&self, other: &TimeInterval) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Per-round pair of average price and total volume for one week.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyAggregate {
    /// Round index t, counted in 7-day buckets from the aggregation origin.
    pub week_index: u32,
    /// Volume-weighted mean of unit prices over the week's transactions.
    pub avg_price: f64,
    /// Sum of units over the week's transactions.
    pub total_volume: u64,
    pub n_transactions: usize,
}

/// Distribution of basket sizes: for each unit count z, the number of
/// baskets that contained exactly z units.
///
/// Proportions are derived from exact counts so that `count(z)` always
/// reconstructs the original basket count without rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasketDistribution {
    counts: BTreeMap<u32, u64>,
    n_baskets: u64,
}

impl BasketDistribution {
    /// Build directly from basket counts per unit size.
    pub fn from_counts(counts: BTreeMap<u32, u64>) -> Result<Self> {
        let counts: BTreeMap<u32, u64> = counts.into_iter().filter(|&(_, q)| q > 0).collect();
        if counts.keys().any(|&z| z == 0) {
            return Err(Error::InvalidInput("basket size 0 is not valid".into()));
        }
        let n_baskets: u64 = counts.values().sum();
        if n_baskets == 0 {
            return Err(Error::EmptyInput("basket distribution"));
        }
        Ok(Self { counts, n_baskets })
    }

    /// Total number of baskets B.
    pub fn n_baskets(&self) -> u64 {
        self.n_baskets
    }

    /// Number of baskets containing exactly `z` units (the function q).
    pub fn count(&self, z: u32) -> u64 {
        self.counts.get(&z).copied().unwrap_or(0)
    }

    /// Proportion of baskets containing exactly `z` units.
    pub fn proportion(&self, z: u32) -> f64 {
        self.count(z) as f64 / self.n_baskets as f64
    }

    /// Iterator over `(z, count)` pairs in increasing z.
    pub fn iter(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.counts.iter().map(|(&z, &q)| (z, q))
    }

    /// Largest basket size with a non-zero count.
    pub fn max_size(&self) -> u32 {
        *self.counts.keys().next_back().expect("non-empty by construction")
    }

    /// Mean units per basket.
    pub fn mean_volume(&self) -> f64 {
        let total_units: u64 = self.counts.iter().map(|(&z, &q)| z as u64 * q).sum();
        total_units as f64 / self.n_baskets as f64
    }

    /// Total units across all baskets (the cardinality of the threshold
    /// multiset, where each size z is repeated `count(z) * z` times).
    pub fn total_units(&self) -> u64 {
        self.counts.iter().map(|(&z, &q)| z as u64 * q).sum()
    }
}

/// Per-period purchase counts and unique-customer sets, the inputs of
/// buyback-probability estimation.
#[derive(Debug, Clone)]
pub struct CustomerIndex {
    periods: Vec<(TimeInterval, HashMap<String, u64>)>,
}

impl CustomerIndex {
    fn lookup(&self, period: &TimeInterval) -> Result<&HashMap<String, u64>> {
        self.periods
            .iter()
            .find(|(iv, _)| iv == period)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::PeriodNotIndexed(period.start.to_string(), period.end.to_string()))
    }

    /// Number of purchases customer `g` made in `period`.
    pub fn purchases(&self, customer: &str, period: &TimeInterval) -> Result<u64> {
        Ok(self.lookup(period)?.get(customer).copied().unwrap_or(0))
    }

    /// Total purchases in `period`, summed over customers.
    pub fn total_purchases(&self, period: &TimeInterval) -> Result<u64> {
        Ok(self.lookup(period)?.values().sum())
    }

    /// Set of unique customers with at least one purchase in `period`.
    pub fn customers(&self, period: &TimeInterval) -> Result<HashSet<&str>> {
        Ok(self.lookup(period)?.keys().map(String::as_str).collect())
    }
}

/// Reads the transaction CSV and returns the time-sorted transactions for
/// one product. Rows for other products are skipped; malformed rows fail
/// with their line number.
pub fn ingest_csv(path: impl AsRef<Path>, product_id: &str) -> Result<Vec<Transaction>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Header(e.to_string()))?
        .clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != CSV_COLUMNS {
        return Err(Error::Header(format!(
            "expected columns {:?}, got {:?}",
            CSV_COLUMNS, got
        )));
    }

    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::row(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != CSV_COLUMNS.len() {
            return Err(Error::row(
                line,
                format!("expected {} fields, got {}", CSV_COLUMNS.len(), record.len()),
            ));
        }
        if &record[1] != product_id {
            continue;
        }
        let txn = parse_row(&record, line)?;
        out.push(txn);
    }
    out.sort_by_key(|t| t.timestamp);
    Ok(out)
}

fn parse_row(record: &csv::StringRecord, line: u64) -> Result<Transaction> {
    let timestamp = DateTime::parse_from_rfc3339(&record[0])
        .map_err(|e| Error::row(line, format!("bad timestamp {:?}: {e}", &record[0])))?
        .with_timezone(&Utc);
    let unit_price: f64 = record[3]
        .parse()
        .map_err(|e| Error::row(line, format!("bad unit_price {:?}: {e}", &record[3])))?;
    let units: u32 = record[4]
        .parse()
        .map_err(|e| Error::row(line, format!("bad units {:?}: {e}", &record[4])))?;
    let unit_cost: f64 = record[5]
        .parse()
        .map_err(|e| Error::row(line, format!("bad unit_cost {:?}: {e}", &record[5])))?;
    let txn = Transaction {
        timestamp,
        product_id: record[1].to_string(),
        customer_id: record[2].to_string(),
        unit_price,
        units,
        unit_cost,
    };
    txn.check().map_err(|reason| Error::row(line, reason))?;
    Ok(txn)
}

/// Writes transactions in the canonical CSV schema.
pub fn write_csv<W: std::io::Write>(w: &mut W, txns: &[Transaction]) -> std::io::Result<()> {
    writeln!(w, "{}", CSV_COLUMNS.join(","))?;
    for t in txns {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            t.timestamp.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            t.product_id,
            t.customer_id,
            t.unit_price,
            t.units,
            t.unit_cost
        )?;
    }
    Ok(())
}

/// Index of the 7-day bucket containing `t`, counted from `origin`.
pub fn week_of(origin: DateTime<Utc>, t: DateTime<Utc>) -> u32 {
    debug_assert!(t >= origin);
    ((t - origin).num_seconds() / WEEK_SECONDS) as u32
}

/// Groups time-sorted transactions into 7-day buckets from `origin` and
/// emits one aggregate per non-empty bucket.
///
/// The average price is the volume-weighted mean of unit prices, so that
/// `avg_price * total_volume` equals the week's realized revenue. Weeks
/// with no transactions emit no aggregate.
pub fn aggregate_weekly(
    txns: &[Transaction],
    origin: DateTime<Utc>,
) -> Result<Vec<WeeklyAggregate>> {
    if let Some(first) = txns.first() {
        if origin > first.timestamp {
            return Err(Error::InvalidInput(format!(
                "origin {origin} is after the first transaction {}",
                first.timestamp
            )));
        }
    }
    if txns.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
        return Err(Error::InvalidInput(
            "transactions must be sorted by timestamp".into(),
        ));
    }

    let mut buckets: BTreeMap<u32, Vec<&Transaction>> = BTreeMap::new();
    for t in txns {
        buckets.entry(week_of(origin, t.timestamp)).or_default().push(t);
    }

    Ok(buckets
        .into_iter()
        .map(|(week_index, group)| {
            let total_volume: u64 = group.iter().map(|t| t.units as u64).sum();
            let revenue: f64 = group
                .iter()
                .map(|t| t.unit_price * t.units as f64)
                .sum();
            WeeklyAggregate {
                week_index,
                avg_price: revenue / total_volume as f64,
                total_volume,
                n_transactions: group.len(),
            }
        })
        .collect())
}

/// Counts baskets by unit size over the whole transaction sequence.
pub fn basket_distribution(txns: &[Transaction]) -> Result<BasketDistribution> {
    if txns.is_empty() {
        return Err(Error::EmptyInput("basket distribution needs transactions"));
    }
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for t in txns {
        *counts.entry(t.units).or_insert(0) += 1;
    }
    BasketDistribution::from_counts(counts)
}

/// Builds per-period purchase counts for the supplied pairwise-disjoint
/// periods. Transactions outside every period are ignored.
pub fn build_customer_index(
    txns: &[Transaction],
    periods: &[TimeInterval],
) -> Result<CustomerIndex> {
    for i in 0..periods.len() {
        for j in (i + 1)..periods.len() {
            if periods[i].overlaps(&periods[j]) {
                return Err(Error::OverlappingPeriods(
                    periods[j].start.to_string(),
                    periods[j].end.to_string(),
                ));
            }
        }
    }
    let mut out: Vec<(TimeInterval, HashMap<String, u64>)> =
        periods.iter().map(|iv| (*iv, HashMap::new())).collect();
    for t in txns {
        for (iv, counts) in out.iter_mut() {
            if iv.contains(t.timestamp) {
                *counts.entry(t.customer_id.clone()).or_insert(0) += 1;
                break;
            }
        }
    }
    Ok(CustomerIndex { periods: out })
}

/// Latest observed unit cost, used as the constant c of the pricing round.
pub fn latest_unit_cost(txns: &[Transaction]) -> Option<f64> {
    txns.iter()
        .max_by_key(|t| t.timestamp)
        .map(|t| t.unit_cost)
}

/// Distinct product identifiers present in a transaction CSV, sorted.
pub fn list_products(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Header(e.to_string()))?
        .clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != CSV_COLUMNS {
        return Err(Error::Header(format!(
            "expected columns {:?}, got {:?}",
            CSV_COLUMNS, got
        )));
    }
    let mut products = std::collections::BTreeSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::row(line, e.to_string())
        })?;
        if record.len() > 1 {
            products.insert(record[1].to_string());
        }
    }
    Ok(products.into_iter().collect())
}
