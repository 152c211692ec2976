//! Bayesian linear regression of weekly volume on price and time bases.
//!
//! The model is linear in basis functions but the price coefficients are
//! forced positive by writing them as `theta_u = exp(psi_u)` with Gaussian
//! priors on `psi_u` (equivalently, lognormal priors on `theta_u`). Because
//! every price basis is strictly decreasing in price, positive coefficients
//! make every sampled demand curve monotone non-increasing in price.
//!
//! Inference: the MAP of the latent vector (log-price coefficients
//! concatenated with time coefficients) is found by a damped Newton method
//! with backtracking line search, observation noise is ML-profiled, and the
//! posterior is Laplace-approximated by the inverse Hessian at the MAP.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::WeeklyAggregate;
use crate::error::{Error, Result};

/// Format tag for persisted posterior documents.
pub const POSTERIOR_FORMAT_VERSION: u32 = 1;

/// Reverted hyperbolic tangent price basis:
/// `phi(p) = (1 - tanh((p - shift)/scale)) / 2`, strictly decreasing in p.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TanhBasis {
    pub shift: f64,
    pub scale: f64,
}

impl TanhBasis {
    pub fn eval(&self, price: f64) -> f64 {
        (1.0 - ((price - self.shift) / self.scale).tanh()) / 2.0
    }
}

/// Time basis: a Gaussian RBF over the week index, or a polynomial term.
///
/// Polynomials are evaluated on `week / scale` so that all basis values stay
/// O(1) over the horizon; `scale` is part of the basis definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TimeBasis {
    Rbf { center: f64, width: f64 },
    Poly { degree: u32, scale: f64 },
}

impl TimeBasis {
    pub fn eval(&self, week: f64) -> f64 {
        match *self {
            TimeBasis::Rbf { center, width } => {
                let z = (week - center) / width;
                (-0.5 * z * z).exp()
            }
            TimeBasis::Poly { degree, scale } => (week / scale).powi(degree as i32),
        }
    }
}

/// Gaussian prior on one latent coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianPrior {
    pub fn new(mean: f64, variance: f64) -> Self {
        Self { mean, variance }
    }
}

/// Full basis layout plus priors and observation-noise settings.
///
/// Price-coefficient priors are on the log scale (lognormal location and
/// spread for the positive coefficient itself).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub price_bases: Vec<TanhBasis>,
    pub time_bases: Vec<TimeBasis>,
    pub price_priors: Vec<GaussianPrior>,
    pub time_priors: Vec<GaussianPrior>,
    /// Initial observation-noise variance; replaced by the profiled ML
    /// estimate when `profile_noise` is set.
    pub noise_variance: f64,
    pub profile_noise: bool,
    pub noise_floor: f64,
}

impl BasisSpec {
    pub fn n_price(&self) -> usize {
        self.price_bases.len()
    }

    pub fn n_time(&self) -> usize {
        self.time_bases.len()
    }

    pub fn dim(&self) -> usize {
        self.n_price() + self.n_time()
    }

    pub fn validate(&self) -> Result<()> {
        if self.price_bases.is_empty() {
            return Err(Error::InvalidInput("at least one price basis required".into()));
        }
        if self.price_bases.iter().any(|b| !(b.scale > 0.0)) {
            return Err(Error::InvalidInput("price basis scales must be > 0".into()));
        }
        for tb in &self.time_bases {
            match *tb {
                TimeBasis::Rbf { width, .. } if !(width > 0.0) => {
                    return Err(Error::InvalidInput("RBF widths must be > 0".into()));
                }
                TimeBasis::Poly { scale, .. } if !(scale > 0.0) => {
                    return Err(Error::InvalidInput("poly scales must be > 0".into()));
                }
                _ => {}
            }
        }
        if self.price_priors.len() != self.n_price() || self.time_priors.len() != self.n_time() {
            return Err(Error::InvalidInput(
                "prior count must match basis count".into(),
            ));
        }
        if self
            .price_priors
            .iter()
            .chain(self.time_priors.iter())
            .any(|p| !(p.variance > 0.0))
        {
            return Err(Error::InvalidInput("prior variances must be > 0".into()));
        }
        if !(self.noise_variance > 0.0) || !(self.noise_floor > 0.0) {
            return Err(Error::InvalidInput("noise variance and floor must be > 0".into()));
        }
        Ok(())
    }

    fn prior_mean(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.price_priors
                .iter()
                .chain(self.time_priors.iter())
                .map(|p| p.mean),
        )
    }

    fn prior_variance(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.price_priors
                .iter()
                .chain(self.time_priors.iter())
                .map(|p| p.variance),
        )
    }
}

/// Data-driven basis placement.
///
/// Tanh shifts sit on an even grid over `[0.5 * min_price, 1.5 * max_price]`
/// with scale equal to half the grid spacing, so each basis transitions over
/// roughly one grid cell and the model can represent (and stay uncertain
/// about) local demand structure; RBF centers sit on an even grid over the
/// observed week range with width equal to their spacing; polynomial terms
/// are scaled by the week range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub n_price_bases: usize,
    pub n_time_rbfs: usize,
    pub poly_degrees: Vec<u32>,
    /// Lognormal prior (location, spread variance) shared by price coefficients.
    pub price_prior: GaussianPrior,
    /// Gaussian prior shared by time coefficients.
    pub time_prior: GaussianPrior,
    pub noise_variance: f64,
    pub profile_noise: bool,
    pub noise_floor: f64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            n_price_bases: 8,
            n_time_rbfs: 4,
            poly_degrees: vec![0, 1],
            price_prior: GaussianPrior::new(0.0, 1.0),
            time_prior: GaussianPrior::new(0.0, 10.0),
            noise_variance: 1.0,
            profile_noise: true,
            noise_floor: 1e-6,
        }
    }
}

impl BasisConfig {
    /// Builds a concrete spec for the observed price and week ranges.
    pub fn build(&self, min_price: f64, max_price: f64, min_week: u32, max_week: u32) -> Result<BasisSpec> {
        if !(min_price > 0.0) || max_price < min_price {
            return Err(Error::InvalidInput(format!(
                "bad observed price range [{min_price}, {max_price}]"
            )));
        }
        let lo = 0.5 * min_price;
        let hi = 1.5 * max_price;
        let u = self.n_price_bases.max(1);
        let spacing = if u > 1 { (hi - lo) / (u - 1) as f64 } else { (hi - lo) / 2.0 };
        let scale = if spacing > 0.0 { spacing / 2.0 } else { 0.1 * hi.max(1.0) };
        let price_bases: Vec<TanhBasis> = (0..u)
            .map(|i| TanhBasis {
                shift: if u > 1 { lo + spacing * i as f64 } else { (lo + hi) / 2.0 },
                scale,
            })
            .collect();

        let mut time_bases = Vec::new();
        let w_lo = min_week as f64;
        let w_hi = max_week.max(min_week) as f64;
        if self.n_time_rbfs > 0 {
            let n = self.n_time_rbfs;
            let span = w_hi - w_lo;
            let step = if n > 1 { span / (n - 1) as f64 } else { span / 2.0 };
            let width = if step > 0.0 { step } else { 1.0 };
            for i in 0..n {
                let center = if n > 1 { w_lo + step * i as f64 } else { (w_lo + w_hi) / 2.0 };
                time_bases.push(TimeBasis::Rbf { center, width });
            }
        }
        let poly_scale = w_hi.max(1.0);
        for &degree in &self.poly_degrees {
            time_bases.push(TimeBasis::Poly { degree, scale: poly_scale });
        }

        let spec = BasisSpec {
            price_priors: vec![self.price_prior; price_bases.len()],
            time_priors: vec![self.time_prior; time_bases.len()],
            price_bases,
            time_bases,
            noise_variance: self.noise_variance,
            profile_noise: self.profile_noise,
            noise_floor: self.noise_floor,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Row of basis evaluations `[phi_1(p) .. phi_U(p), phi_1(w) .. phi_D(w)]`.
pub fn design_row(spec: &BasisSpec, price: f64, week: u32) -> Result<DVector<f64>> {
    if !(price > 0.0) {
        return Err(Error::InvalidInput(format!("price must be > 0, got {price}")));
    }
    let w = week as f64;
    Ok(DVector::from_iterator(
        spec.dim(),
        spec.price_bases
            .iter()
            .map(|b| b.eval(price))
            .chain(spec.time_bases.iter().map(|b| b.eval(w))),
    ))
}

/// Latent posterior of the demand model.
///
/// The first `n_price` coordinates live on the log scale: the demand
/// coefficient is their exponential.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    pub latent_mean: DVector<f64>,
    pub latent_cov: DMatrix<f64>,
    pub n_price: usize,
    pub noise_variance: f64,
}

#[derive(Serialize, Deserialize)]
struct PosteriorDoc {
    version: u32,
    n_price: usize,
    latent_mean: Vec<f64>,
    latent_cov: Vec<Vec<f64>>,
    noise_variance: f64,
}

impl PosteriorState {
    pub fn dim(&self) -> usize {
        self.latent_mean.len()
    }

    /// Checks symmetry (1e-9) and positive definiteness of the covariance.
    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.latent_cov.nrows() != n || self.latent_cov.ncols() != n || self.n_price > n {
            return Err(Error::InvalidInput("posterior dimensions disagree".into()));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.latent_cov[(i, j)] - self.latent_cov[(j, i)]).abs() > 1e-9 {
                    return Err(Error::InvalidInput("covariance is not symmetric".into()));
                }
            }
        }
        if nalgebra::Cholesky::new(symmetrize(&self.latent_cov)).is_none() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(())
    }

    /// Demand coefficients at the posterior mode (price part exponentiated).
    pub fn map_coefficients(&self) -> DVector<f64> {
        coefficients_from_latent(&self.latent_mean, self.n_price)
    }

    pub fn to_json(&self) -> String {
        let n = self.dim();
        let doc = PosteriorDoc {
            version: POSTERIOR_FORMAT_VERSION,
            n_price: self.n_price,
            latent_mean: self.latent_mean.iter().copied().collect(),
            latent_cov: (0..n)
                .map(|i| (0..n).map(|j| self.latent_cov[(i, j)]).collect())
                .collect(),
            noise_variance: self.noise_variance,
        };
        serde_json::to_string_pretty(&doc).expect("posterior serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PosteriorDoc =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(e.to_string()))?;
        if doc.version != POSTERIOR_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported posterior format version {}",
                doc.version
            )));
        }
        let n = doc.latent_mean.len();
        if doc.latent_cov.len() != n || doc.latent_cov.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidInput("covariance shape mismatch".into()));
        }
        let state = PosteriorState {
            latent_mean: DVector::from_vec(doc.latent_mean),
            latent_cov: DMatrix::from_fn(n, n, |i, j| doc.latent_cov[i][j]),
            n_price: doc.n_price,
            noise_variance: doc.noise_variance,
        };
        state.validate()?;
        Ok(state)
    }
}

/// One Thompson draw: a concrete demand curve with positive price
/// coefficients, evaluable at any (price, week).
#[derive(Debug, Clone)]
pub struct DemandSample {
    spec: BasisSpec,
    coefficients: DVector<f64>,
}

impl DemandSample {
    pub fn coefficients(&self) -> &DVector<f64> {
        &self.coefficients
    }

    /// Sampled expected volume at `(price, week)`, clipped below at zero.
    pub fn volume(&self, price: f64, week: u32) -> Result<f64> {
        let row = design_row(&self.spec, price, week)?;
        Ok(row.dot(&self.coefficients).max(0.0))
    }
}

fn coefficients_from_latent(latent: &DVector<f64>, n_price: usize) -> DVector<f64> {
    DVector::from_iterator(
        latent.len(),
        latent
            .iter()
            .enumerate()
            .map(|(i, &v)| if i < n_price { v.exp() } else { v }),
    )
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Negative log-posterior of the latent vector at fixed noise variance,
/// with analytic gradient and Hessian.
///
/// Public so that independent oracles (finite differences) can be run
/// against the analytic derivatives.
#[derive(Debug, Clone)]
pub struct MapObjective {
    design: DMatrix<f64>,
    targets: DVector<f64>,
    prior_mean: DVector<f64>,
    prior_precision: DVector<f64>,
    n_price: usize,
    noise_variance: f64,
}

impl MapObjective {
    pub fn new(spec: &BasisSpec, data: &[WeeklyAggregate]) -> Result<Self> {
        spec.validate()?;
        let rows: Vec<DVector<f64>> = data
            .iter()
            .map(|a| design_row(spec, a.avg_price, a.week_index))
            .collect::<Result<_>>()?;
        let design = DMatrix::from_fn(data.len(), spec.dim(), |i, j| rows[i][j]);
        let targets = DVector::from_iterator(data.len(), data.iter().map(|a| a.total_volume as f64));
        let variances = spec.prior_variance();
        Ok(Self {
            design,
            targets,
            prior_mean: spec.prior_mean(),
            prior_precision: variances.map(|v| 1.0 / v),
            n_price: spec.n_price(),
            noise_variance: spec.noise_variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    pub fn n_obs(&self) -> usize {
        self.targets.len()
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn set_noise_variance(&mut self, sigma2: f64) {
        self.noise_variance = sigma2;
    }

    /// Natural-scale coefficients for a latent vector.
    pub fn coefficients(&self, latent: &DVector<f64>) -> DVector<f64> {
        coefficients_from_latent(latent, self.n_price)
    }

    /// Model predictions for every observation row.
    fn predictions(&self, latent: &DVector<f64>) -> DVector<f64> {
        &self.design * self.coefficients(latent)
    }

    pub fn residuals(&self, latent: &DVector<f64>) -> DVector<f64> {
        self.predictions(latent) - &self.targets
    }

    pub fn value(&self, latent: &DVector<f64>) -> f64 {
        let r = self.residuals(latent);
        let data_term = r.norm_squared() / (2.0 * self.noise_variance);
        let d = latent - &self.prior_mean;
        let prior_term: f64 = d
            .iter()
            .zip(self.prior_precision.iter())
            .map(|(di, pi)| di * di * pi)
            .sum::<f64>()
            / 2.0;
        data_term + prior_term
    }

    /// Magnitude scale of the objective evaluation: the same sums with all
    /// cancellation removed. `EPSILON` times this bounds the rounding noise
    /// of `value`, which is the smallest decrease a line search can certify.
    fn value_scale(&self, latent: &DVector<f64>) -> f64 {
        let m = self.predictions(latent);
        let data_term: f64 = m
            .iter()
            .zip(self.targets.iter())
            .map(|(mi, yi)| (mi.abs() + yi.abs()).powi(2))
            .sum::<f64>()
            / (2.0 * self.noise_variance);
        let d = latent - &self.prior_mean;
        let prior_term: f64 = d
            .iter()
            .zip(self.prior_precision.iter())
            .map(|(di, pi)| di * di * pi)
            .sum::<f64>()
            / 2.0;
        data_term + prior_term
    }

    pub fn gradient(&self, latent: &DVector<f64>) -> DVector<f64> {
        let r = self.residuals(latent);
        let coef = self.coefficients(latent);
        // d model / d latent_j is X_j * exp(latent_j) for price coords, X_j otherwise
        let mut grad = DVector::zeros(self.dim());
        for j in 0..self.dim() {
            let col = self.design.column(j);
            let chain = if j < self.n_price { coef[j] } else { 1.0 };
            grad[j] = col.dot(&r) * chain / self.noise_variance;
        }
        for j in 0..self.dim() {
            grad[j] += (latent[j] - self.prior_mean[j]) * self.prior_precision[j];
        }
        grad
    }

    /// Jacobian of the model wrt the latent vector.
    fn model_jacobian(&self, latent: &DVector<f64>) -> DMatrix<f64> {
        let coef = self.coefficients(latent);
        let mut jac = self.design.clone();
        for j in 0..self.n_price {
            let c = coef[j];
            for i in 0..jac.nrows() {
                jac[(i, j)] *= c;
            }
        }
        jac
    }

    /// Gauss-Newton curvature `J^T J / sigma^2 + prior precision`: positive
    /// definite everywhere, used for search directions.
    pub fn gauss_newton(&self, latent: &DVector<f64>) -> DMatrix<f64> {
        let jac = self.model_jacobian(latent);
        let mut gn = jac.transpose() * &jac / self.noise_variance;
        for j in 0..self.dim() {
            gn[(j, j)] += self.prior_precision[j];
        }
        gn
    }

    pub fn hessian(&self, latent: &DVector<f64>) -> DMatrix<f64> {
        let r = self.residuals(latent);
        let coef = self.coefficients(latent);
        let mut hess = self.gauss_newton(latent);
        // curvature of the exp-reparameterized coordinates
        for j in 0..self.n_price {
            let col = self.design.column(j);
            hess[(j, j)] += col.dot(&r) * coef[j] / self.noise_variance;
        }
        hess
    }
}

const MAX_MAP_ITERATIONS: usize = 500;
const GRAD_TOLERANCE: f64 = 1e-8;
/// Below this gradient norm the exact Hessian replaces the Gauss-Newton
/// approximation, buying quadratic convergence for the endgame.
const NEWTON_SWITCH: f64 = 1.0;

struct MinimizeOutcome {
    w: DVector<f64>,
    converged: bool,
    grad_norm: f64,
}

/// Damped Gauss-Newton/Newton minimization with a backtracking line search.
///
/// The PD Gauss-Newton matrix steers the search far from the optimum; once
/// the gradient is small the exact Hessian takes over for a quadratic
/// endgame. Close to the optimum the predicted decrease of a step can drop
/// below the floating-point resolution of the objective, so the line search
/// cannot certify progress even though the step is sound; such steps are
/// taken unguarded (with a small budget), and in the quadratic regime one
/// of them lands the gradient at the rounding floor. Returns best effort:
/// the caller decides whether a non-converged interim solve matters.
fn minimize(obj: &MapObjective, start: DVector<f64>) -> MinimizeOutcome {
    let mut w = start;
    let mut f = obj.value(&w);
    let mut grad_norm = f64::INFINITY;
    let mut unguarded_budget = 5u32;
    for _ in 0..MAX_MAP_ITERATIONS {
        let g = obj.gradient(&w);
        grad_norm = g.norm();
        if grad_norm <= GRAD_TOLERANCE {
            return MinimizeOutcome { w, converged: true, grad_norm };
        }
        let h = if grad_norm <= NEWTON_SWITCH {
            obj.hessian(&w)
        } else {
            obj.gauss_newton(&w)
        };
        let mut dir = newton_direction(&h, &g);
        // near-singular curvature can blow the direction up beyond what the
        // backtracking range can correct
        let max_len = 1e3 * (1.0 + w.norm());
        let len = dir.norm();
        if len > max_len {
            dir *= max_len / len;
        }
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            dir = -&g;
            slope = -grad_norm * grad_norm;
        }
        let mut step = 1.0;
        let mut advanced = false;
        while step >= 1e-16 {
            let cand = &w + &dir * step;
            let fc = obj.value(&cand);
            if fc.is_finite() && fc < f {
                w = cand;
                f = fc;
                advanced = true;
                break;
            }
            step *= 0.5;
        }
        if !advanced {
            let noise_floor = f64::EPSILON * obj.value_scale(&w).max(f.abs()).max(1.0);
            let resolvable = -slope > 16.0 * noise_floor;
            if resolvable || unguarded_budget == 0 {
                break;
            }
            unguarded_budget -= 1;
            let cand = &w + &dir;
            let fc = obj.value(&cand);
            if !fc.is_finite() {
                break;
            }
            w = cand;
            f = fc;
        }
    }
    MinimizeOutcome { w, converged: false, grad_norm }
}

/// Solves `H d = -g`, adding escalating ridge terms until `H` factorizes.
fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    let scale = hess.diagonal().amax().max(1e-12);
    for &mult in &[0.0, 1e-12, 1e-9, 1e-6, 1e-3, 1.0] {
        let mut damped = symmetrize(hess);
        if mult > 0.0 {
            for i in 0..damped.nrows() {
                damped[(i, i)] += mult * scale;
            }
        }
        if let Some(chol) = nalgebra::Cholesky::new(damped) {
            return -chol.solve(grad);
        }
    }
    -grad.clone()
}

/// Laplace covariance: inverse Hessian at the MAP, with jitter escalation
/// when the factorization fails.
fn laplace_covariance(obj: &MapObjective, map: &DVector<f64>) -> Result<DMatrix<f64>> {
    let hess = symmetrize(&obj.hessian(map));
    let scale = hess.diagonal().amax().max(1e-12);
    for &mult in &[0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2] {
        let mut jittered = hess.clone();
        if mult > 0.0 {
            for i in 0..jittered.nrows() {
                jittered[(i, i)] += mult * scale;
            }
        }
        if let Some(chol) = nalgebra::Cholesky::new(jittered) {
            return Ok(symmetrize(&chol.inverse()));
        }
    }
    Err(Error::NotPositiveDefinite)
}

/// Fits the posterior on the weekly aggregates.
///
/// Empty data returns the prior unchanged. Otherwise the MAP is found by
/// damped Newton (gradient tolerance 1e-8, at most 500 iterations per inner
/// solve) and, when `profile_noise` is set, the observation-noise variance
/// alternates with the MAP as the ML estimate `RSS / n`, floored at
/// `noise_floor`.
pub fn fit_posterior(spec: &BasisSpec, data: &[WeeklyAggregate]) -> Result<PosteriorState> {
    spec.validate()?;
    if data.is_empty() {
        let state = PosteriorState {
            latent_mean: spec.prior_mean(),
            latent_cov: DMatrix::from_diagonal(&spec.prior_variance()),
            n_price: spec.n_price(),
            noise_variance: spec.noise_variance,
        };
        state.validate()?;
        return Ok(state);
    }

    let mut obj = MapObjective::new(spec, data)?;
    let n = data.len() as f64;
    if spec.profile_noise {
        // Volumes are counts, so Poisson-like noise (variance ~ mean) is
        // the natural scale until the ML profile takes over; the sample
        // variance accelerates the profile when data allows it.
        let mean = obj.targets.iter().sum::<f64>() / n;
        let mut init = spec.noise_variance.max(spec.noise_floor).max(mean);
        if data.len() >= 2 {
            let var = obj.targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
            init = init.max(var);
        }
        obj.set_noise_variance(init);
    }

    // The ML noise estimate RSS/n is only meaningful with residual degrees
    // of freedom; at n <= dim the regression interpolates and the estimate
    // collapses, so profiling waits for more data.
    let profile = spec.profile_noise && data.len() > spec.dim();
    let mut w = spec.prior_mean();
    const MAX_PROFILE_ROUNDS: usize = 100;
    for _ in 0..MAX_PROFILE_ROUNDS {
        // interim solves may stall; the noise update reshapes the
        // objective, so only the final polish has to converge
        w = minimize(&obj, w).w;
        if !profile {
            break;
        }
        let rss = obj.residuals(&w).norm_squared();
        let updated = (rss / n).max(spec.noise_floor);
        let current = obj.noise_variance();
        obj.set_noise_variance(updated);
        if (updated - current).abs() <= 1e-8 * current {
            break;
        }
    }
    // final polish at the settled noise level
    let polish = minimize(&obj, w);
    if !polish.converged {
        return Err(Error::NonConvergence {
            iterations: MAX_MAP_ITERATIONS,
            grad_norm: polish.grad_norm,
        });
    }
    let w = polish.w;

    let cov = laplace_covariance(&obj, &w)?;
    let state = PosteriorState {
        latent_mean: w,
        latent_cov: cov,
        n_price: spec.n_price(),
        noise_variance: obj.noise_variance(),
    };
    state.validate()?;
    Ok(state)
}

/// Draws one demand curve from the posterior (Thompson sampling step).
///
/// The latent draw is `mean + L z` where `L` comes from the spectral square
/// root of the covariance (eigenvalues clamped at zero, so a degenerate
/// covariance degrades to a deterministic draw), and the price coordinates
/// are exponentiated, keeping them strictly positive.
pub fn sample_demand<R: Rng + ?Sized>(
    post: &PosteriorState,
    spec: &BasisSpec,
    rng: &mut R,
) -> Result<DemandSample> {
    if post.dim() != spec.dim() || post.n_price != spec.n_price() {
        return Err(Error::InvalidInput(
            "posterior and basis spec dimensions disagree".into(),
        ));
    }
    let n = post.dim();
    let eig = symmetrize(&post.latent_cov).symmetric_eigen();
    let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
    let mut scaled = z;
    for i in 0..n {
        scaled[i] *= eig.eigenvalues[i].max(0.0).sqrt();
    }
    let latent = &post.latent_mean + &eig.eigenvectors * scaled;
    Ok(DemandSample {
        spec: spec.clone(),
        coefficients: coefficients_from_latent(&latent, post.n_price),
    })
}

/// Plug-in expected volume at the MAP, clipped below at zero.
pub fn predict_mean(post: &PosteriorState, spec: &BasisSpec, price: f64, week: u32) -> Result<f64> {
    if post.dim() != spec.dim() || post.n_price != spec.n_price() {
        return Err(Error::InvalidInput(
            "posterior and basis spec dimensions disagree".into(),
        ));
    }
    let row = design_row(spec, price, week)?;
    Ok(row.dot(&post.map_coefficients()).max(0.0))
}
