//! Engine configuration: one TOML file wires data paths, grid and basis
//! hyperparameters, discount settings, the simulator market and the
//! evaluation harness. The master seed is mandatory so that every command
//! is reproducible from the file alone.

use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::data::TimeInterval;
use crate::demand::{BasisConfig, GaussianPrior};
use crate::error::{Error, Result};
use crate::optimizer::PriceGrid;
use crate::policy::PvdbConfig;
use crate::sim::{ClassMix, DemandForm, MarketConfig};

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    /// Transaction CSV consumed by `price` / `discounts` / `report`.
    pub transactions: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Where to persist the fitted posterior between rounds.
    pub posterior: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            transactions: None,
            output_dir: default_output_dir(),
            posterior: None,
        }
    }
}

fn default_min_margin() -> f64 {
    0.05
}
fn default_max_margin() -> f64 {
    1.5
}
fn default_step() -> f64 {
    0.01
}

/// Price grid as margins over unit cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    #[serde(default = "default_min_margin")]
    pub min_margin: f64,
    #[serde(default = "default_max_margin")]
    pub max_margin: f64,
    #[serde(default = "default_step")]
    pub step: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            min_margin: default_min_margin(),
            max_margin: default_max_margin(),
            step: default_step(),
        }
    }
}

impl GridConfig {
    pub fn build(&self, cost: f64) -> Result<PriceGrid> {
        PriceGrid::from_margins(cost, self.min_margin, self.max_margin, self.step)
    }
}

fn default_true() -> bool {
    true
}
fn default_price_bases() -> usize {
    8
}
fn default_time_rbfs() -> usize {
    4
}
fn default_poly_degrees() -> Vec<u32> {
    vec![0, 1]
}
fn default_noise_variance() -> f64 {
    1.0
}
fn default_noise_floor() -> f64 {
    1e-6
}
fn default_price_prior_spread() -> f64 {
    1.0
}
fn default_time_prior_variance() -> f64 {
    10.0
}

/// Basis layout and priors, flattened for the TOML surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSection {
    #[serde(default = "default_price_bases")]
    pub price_bases: usize,
    #[serde(default = "default_time_rbfs")]
    pub time_rbfs: usize,
    #[serde(default = "default_poly_degrees")]
    pub poly_degrees: Vec<u32>,
    #[serde(default)]
    pub price_prior_location: f64,
    #[serde(default = "default_price_prior_spread")]
    pub price_prior_spread: f64,
    #[serde(default)]
    pub time_prior_mean: f64,
    #[serde(default = "default_time_prior_variance")]
    pub time_prior_variance: f64,
    #[serde(default = "default_noise_variance")]
    pub noise_variance: f64,
    #[serde(default = "default_true")]
    pub profile_noise: bool,
    #[serde(default = "default_noise_floor")]
    pub noise_floor: f64,
    /// Re-center the price-coefficient prior on the observed volume scale
    /// each round.
    #[serde(default = "default_true")]
    pub adaptive_prior_scale: bool,
}

impl Default for BasisSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

impl BasisSection {
    pub fn to_basis_config(&self) -> BasisConfig {
        BasisConfig {
            n_price_bases: self.price_bases,
            n_time_rbfs: self.time_rbfs,
            poly_degrees: self.poly_degrees.clone(),
            price_prior: GaussianPrior::new(self.price_prior_location, self.price_prior_spread),
            time_prior: GaussianPrior::new(self.time_prior_mean, self.time_prior_variance),
            noise_variance: self.noise_variance,
            profile_noise: self.profile_noise,
            noise_floor: self.noise_floor,
        }
    }
}

fn default_eta() -> usize {
    3
}
fn default_gamma() -> f64 {
    0.5
}
fn default_min_discount_history() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountSection {
    #[serde(default = "default_eta")]
    pub eta: usize,
    #[serde(default = "default_gamma")]
    pub gamma_default: f64,
    pub need_override: Option<u32>,
    /// Explicit measure period (RFC 3339 start/end); defaults to the first
    /// half of the year preceding the priced week.
    pub measure_start: Option<DateTime<Utc>>,
    pub measure_end: Option<DateTime<Utc>>,
    pub control_start: Option<DateTime<Utc>>,
    pub control_end: Option<DateTime<Utc>>,
    #[serde(default = "default_min_discount_history")]
    pub min_discount_history: u32,
}

impl Default for DiscountSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

impl DiscountSection {
    pub fn explicit_periods(&self) -> Result<Option<(TimeInterval, TimeInterval)>> {
        match (self.measure_start, self.measure_end, self.control_start, self.control_end) {
            (Some(ms), Some(me), Some(cs), Some(ce)) => {
                let measure = TimeInterval::new(ms, me)?;
                let control = TimeInterval::new(cs, ce)?;
                if measure.overlaps(&control) {
                    return Err(Error::Config("measure and control periods overlap".into()));
                }
                Ok(Some((measure, control)))
            }
            (None, None, None, None) => Ok(None),
            _ => Err(Error::Config(
                "measure/control periods must be given completely or not at all".into(),
            )),
        }
    }
}

fn default_permutations() -> u32 {
    10_000
}
fn default_histogram_bins() -> usize {
    40
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSection {
    #[serde(default = "default_permutations")]
    pub permutations: u32,
    #[serde(default = "default_histogram_bins")]
    pub histogram_bins: usize,
    /// One-sided tests by default; set for the two-sided variant.
    #[serde(default)]
    pub two_sided: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

fn default_products() -> u32 {
    4
}

/// Simulated A/B campaign shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbTestSection {
    #[serde(default = "default_products")]
    pub products_a: u32,
    #[serde(default = "default_products")]
    pub products_b: u32,
    /// Weeks both sets spend on the baseline before A switches to the
    /// algorithm; also the reference window for improvement shares.
    #[serde(default)]
    pub pre_weeks: u32,
    /// Baseline arm: "oracle" posts the clairvoyant fixed price, "random"
    /// draws a grid price each week.
    #[serde(default = "default_baseline")]
    pub baseline: String,
}

fn default_baseline() -> String {
    "oracle".into()
}

impl Default for AbTestSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

fn default_origin() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 1, 6, 0, 0, 0).unwrap()
}

/// Simulator market, mirrored from [`MarketConfig`] with defaults suited to
/// a desk-scale run. Profiles default to flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSection {
    #[serde(default = "default_product_id")]
    pub product_id: String,
    pub base_rate: f64,
    pub elasticity: f64,
    #[serde(default = "default_form")]
    pub form: String,
    #[serde(default)]
    pub logistic_midpoint: f64,
    #[serde(default = "default_flat_week")]
    pub weekly_profile: Vec<f64>,
    #[serde(default = "default_flat_year")]
    pub annual_profile: Vec<f64>,
    #[serde(default)]
    pub business_fraction: f64,
    pub private_baskets: Vec<(u32, f64)>,
    #[serde(default)]
    pub business_baskets: Vec<(u32, f64)>,
    #[serde(default)]
    pub buyback: f64,
    pub unit_cost: f64,
    pub weekly_arrivals: f64,
    pub horizon_weeks: u32,
    #[serde(default = "default_origin")]
    pub origin: DateTime<Utc>,
}

fn default_product_id() -> String {
    "SIM".into()
}
fn default_form() -> String {
    "exponential".into()
}
fn default_flat_week() -> Vec<f64> {
    vec![1.0; 7]
}
fn default_flat_year() -> Vec<f64> {
    vec![1.0; 52]
}

impl MarketSection {
    pub fn to_market_config(&self, seed: u64) -> Result<MarketConfig> {
        let form = match self.form.as_str() {
            "exponential" => DemandForm::Exponential,
            "logistic" => DemandForm::Logistic {
                midpoint: self.logistic_midpoint,
            },
            other => return Err(Error::Config(format!("unknown demand form {other:?}"))),
        };
        let business_baskets = if self.business_baskets.is_empty() {
            self.private_baskets.clone()
        } else {
            self.business_baskets.clone()
        };
        let cfg = MarketConfig {
            product_id: self.product_id.clone(),
            base_rate: self.base_rate,
            elasticity: self.elasticity,
            form,
            weekly_profile: self.weekly_profile.clone(),
            annual_profile: self.annual_profile.clone(),
            class_mix: ClassMix {
                business_fraction: self.business_fraction,
                private_baskets: self.private_baskets.clone(),
                business_baskets,
            },
            buyback: self.buyback,
            unit_cost: self.unit_cost,
            weekly_arrivals: self.weekly_arrivals,
            horizon_weeks: self.horizon_weeks,
            seed,
            origin: self.origin,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The whole engine configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Master seed; every derived RNG stream comes from it.
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub basis: BasisSection,
    #[serde(default)]
    pub discount: DiscountSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub abtest: AbTestSection,
    pub market: Option<MarketSection>,
}

impl EngineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: EngineConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(cfg)
    }

    /// Paths in the file resolve relative to the file's directory.
    pub fn validate(&self, base: &Path) -> Result<()> {
        if let Some(t) = &self.paths.transactions {
            let resolved = resolve(base, t);
            if !resolved.exists() {
                return Err(Error::Config(format!(
                    "transactions file {} does not exist",
                    resolved.display()
                )));
            }
        }
        if self.discount.eta < 1 {
            return Err(Error::Config("eta must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.discount.gamma_default) {
            return Err(Error::Config("gamma_default must be in [0, 1)".into()));
        }
        self.discount.explicit_periods()?;
        if let Some(m) = &self.market {
            m.to_market_config(self.seed)?;
        }
        Ok(())
    }

    pub fn pvdb_config(&self) -> Result<PvdbConfig> {
        Ok(PvdbConfig {
            basis: self.basis.to_basis_config(),
            eta: self.discount.eta,
            gamma_default: self.discount.gamma_default,
            need_override: self.discount.need_override,
            gamma_periods: self.discount.explicit_periods()?,
            min_discount_history: self.discount.min_discount_history,
            adaptive_prior_scale: self.basis.adaptive_prior_scale,
        })
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Derives a stable sub-seed for a named RNG stream from the master seed,
/// so independent pipeline stages never share randomness and every run is
/// reproducible from the config file alone.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the master seed, splitmix64 finish
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ master.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: EngineConfig = toml::from_str("seed = 42").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.discount.eta, 3);
        assert_eq!(cfg.evaluation.permutations, 10_000);
        assert_eq!(cfg.grid.min_margin, 0.05);
        assert_eq!(cfg.basis.price_bases, 8);
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(toml::from_str::<EngineConfig>("").is_err());
    }

    #[test]
    fn market_section_round_trips() {
        let text = r#"
seed = 7

[market]
base_rate = 60000.0
elasticity = 0.5
business_fraction = 0.3
private_baskets = [[1, 0.6], [2, 0.3], [3, 0.1]]
business_baskets = [[4, 0.5], [8, 0.3], [12, 0.2]]
unit_cost = 10.0
weekly_arrivals = 150.0
horizon_weeks = 20
buyback = 0.3
"#;
        let cfg: EngineConfig = toml::from_str(text).unwrap();
        let market = cfg.market.unwrap().to_market_config(cfg.seed).unwrap();
        assert_eq!(market.horizon_weeks, 20);
        assert_eq!(market.annual_profile.len(), 52);
        assert!((market.class_mix.mean_basket() - (0.7 * 1.5 + 0.3 * 6.8)).abs() < 1e-9);
    }

    #[test]
    fn partial_gamma_periods_rejected() {
        let text = r#"
seed = 1
[discount]
measure_start = "2020-01-01T00:00:00Z"
measure_end = "2020-07-01T00:00:00Z"
"#;
        let cfg: EngineConfig = toml::from_str(text).unwrap();
        assert!(cfg.validate(Path::new(".")).is_err());
    }

    #[test]
    fn missing_transactions_file_rejected() {
        let text = r#"
seed = 1
[paths]
transactions = "does/not/exist.csv"
"#;
        let cfg: EngineConfig = toml::from_str(text).unwrap();
        assert!(cfg.validate(Path::new("/tmp")).is_err());
    }
}
