//! Taste-prior machinery: finite Dirichlet draws, truncated stick-breaking
//! draws from a Dirichlet process, Lambert W, and log-normal Laplace
//! transforms.

use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::core::{DomainError, GridDistribution};
use crate::numeric::log_sum_exp;

#[derive(Debug, Error)]
pub enum BayesError {
    #[error("lambert_w requires x >= 0, got {0}")]
    NegativeArgument(f64),
    #[error("lambert_w did not converge for x = {0}")]
    NonConvergence(f64),
    #[error("invalid input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Principal branch of the Lambert W function on x >= 0, solved by Halley
/// iteration to 1e-12 relative residual in w*exp(w).
pub fn lambert_w(x: f64) -> Result<f64, BayesError> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(BayesError::NegativeArgument(x));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    // ln(1+x) tracks W on [0, inf) closely enough for Halley to take over.
    let mut w = x.ln_1p();
    if w > 2.0 {
        let l = x.ln();
        w = l - l.ln();
    }
    for _ in 0..60 {
        let e = w.exp();
        let r = w * e - x;
        let dw = r / (e * (w + 1.0) - (w + 2.0) * r / (2.0 * w + 2.0));
        w -= dw;
        if dw.abs() <= 1e-15 * w.abs().max(1e-15) {
            break;
        }
    }
    let residual = (w * w.exp() - x).abs();
    if residual > 1e-12 * x.max(1.0) {
        return Err(BayesError::NonConvergence(x));
    }
    Ok(w)
}

// Composite-Simpson grid on [-13, 13] for integrals against the standard
// normal density; node count chosen so the rule is accurate to ~1e-10
// absolute for the double-exponential integrands below.
const SIMPSON_NODES: usize = 16001;
const SIMPSON_RANGE: f64 = 13.0;

struct SimpsonGrid {
    eps: Vec<f64>,
    /// ln(simpson weight * standard normal density) per node.
    log_wphi: Vec<f64>,
}

fn simpson_grid() -> &'static SimpsonGrid {
    static GRID: OnceLock<SimpsonGrid> = OnceLock::new();
    GRID.get_or_init(|| {
        let n = SIMPSON_NODES;
        let h = 2.0 * SIMPSON_RANGE / (n - 1) as f64;
        let mut eps = Vec::with_capacity(n);
        let mut log_wphi = Vec::with_capacity(n);
        let log_norm = -0.5 * (2.0 * std::f64::consts::PI).ln();
        for i in 0..n {
            let e = -SIMPSON_RANGE + h * i as f64;
            let coeff = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            eps.push(e);
            log_wphi.push((coeff * h / 3.0).ln() + log_norm - 0.5 * e * e);
        }
        SimpsonGrid { eps, log_wphi }
    })
}

/// ln E[exp(-x * A)] for A = exp(mu + sigma Z), Z standard normal, by
/// quadrature in log space (usable far below f64 underflow).
pub fn lognormal_log_mgf(mu: f64, sigma: f64, x: f64) -> Result<f64, BayesError> {
    check_lognormal_args(mu, sigma, x)?;
    if x == 0.0 {
        return Ok(0.0);
    }
    let grid = simpson_grid();
    let mut terms = Vec::with_capacity(grid.eps.len());
    for (e, lw) in grid.eps.iter().zip(&grid.log_wphi) {
        let a = (mu + sigma * e).exp();
        terms.push(lw - x * a);
    }
    Ok(log_sum_exp(&terms).min(0.0))
}

/// E[A exp(-A t)] / E[exp(-A t)] for a log-normal A: the exponential tilt
/// shifts the log-mean by sigma^2, so two quadratures give the ratio.
pub fn lognormal_tilted_mean(mu: f64, sigma: f64, t: f64) -> Result<f64, BayesError> {
    let num = lognormal_log_mgf(mu + sigma * sigma, sigma, t)?;
    let den = lognormal_log_mgf(mu, sigma, t)?;
    Ok((mu + 0.5 * sigma * sigma + num - den).exp())
}

/// E[exp(-x A)] for log-normal A via the Lambert-W quasi closed form
///
///   exp(-w^2/(2 sigma^2) - w/sigma^2) / sqrt(1 + w),  w = W(x sigma^2 e^mu),
///
/// cross-checked against quadrature; when the closed form drifts beyond
/// 0.5% relative it is replaced by the quadrature value. The sigma^2 in
/// both exponent terms is the marginal's own variance parameter.
pub fn lognormal_mgf(mu: f64, sigma: f64, x: f64) -> Result<f64, BayesError> {
    check_lognormal_args(mu, sigma, x)?;
    if x == 0.0 {
        return Ok(1.0);
    }
    let quad = lognormal_log_mgf(mu, sigma, x)?.exp();
    let w = lambert_w(x * sigma * sigma * mu.exp())?;
    let s2 = sigma * sigma;
    let closed = (-w * w / (2.0 * s2) - w / s2).exp() / (1.0 + w).sqrt();
    if (closed - quad).abs() <= 5e-3 * quad.max(1e-300) {
        Ok(closed)
    } else {
        Ok(quad)
    }
}

/// Fixed-seed Monte Carlo estimate of E[exp(-x A)]; returns the mean and
/// its standard error.
pub fn lognormal_mgf_mc(mu: f64, sigma: f64, x: f64, draws: u64, seed: u64) -> (f64, f64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let z: f64 = rng.sample(StandardNormal);
        let v = (-x * (mu + sigma * z).exp()).exp();
        sum += v;
        sum_sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) / n;
    (mean, var.sqrt())
}

fn check_lognormal_args(mu: f64, sigma: f64, x: f64) -> Result<(), BayesError> {
    if !mu.is_finite() || !(sigma.is_finite() && sigma > 0.0) {
        return Err(BayesError::BadInput(format!(
            "log-normal parameters out of range: mu = {mu}, sigma = {sigma}"
        )));
    }
    if !(x.is_finite() && x >= 0.0) {
        return Err(BayesError::BadInput(format!(
            "Laplace transform argument must be finite and non-negative, got {x}"
        )));
    }
    Ok(())
}

/// One draw from a finite Dirichlet distribution via gamma normalization.
pub fn dirichlet_sample<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>, BayesError> {
    if alpha.is_empty() || !alpha.iter().all(|a| a.is_finite() && *a > 0.0) {
        return Err(BayesError::BadInput("dirichlet requires strictly positive alphas".into()));
    }
    let mut draws = Vec::with_capacity(alpha.len());
    let mut total = 0.0;
    for &a in alpha {
        let g = GammaDist::new(a, 1.0)
            .map_err(|e| BayesError::BadInput(format!("gamma({a}, 1): {e}")))?
            .sample(rng);
        draws.push(g);
        total += g;
    }
    if !(total > 0.0) {
        return Err(BayesError::BadInput("all gamma draws were zero".into()));
    }
    for d in &mut draws {
        *d /= total;
    }
    Ok(draws)
}

/// Base measure of a Dirichlet process prior over taste parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseMeasure {
    LogNormal { mu: f64, sigma: f64 },
}

impl BaseMeasure {
    pub fn validate(&self) -> Result<(), BayesError> {
        let BaseMeasure::LogNormal { mu, sigma } = self;
        if !mu.is_finite() || !(sigma.is_finite() && *sigma > 0.0) {
            return Err(BayesError::BadInput(format!(
                "log-normal base needs finite mu and sigma > 0, got ({mu}, {sigma})"
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let BaseMeasure::LogNormal { mu, sigma } = self;
        let z: f64 = rng.sample(StandardNormal);
        (mu + sigma * z).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let BaseMeasure::LogNormal { mu, sigma } = self;
        if x <= 0.0 {
            return 0.0;
        }
        standard_normal_cdf((x.ln() - mu) / sigma)
    }
}

pub fn standard_normal_cdf(z: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    static NORMAL: OnceLock<Normal> = OnceLock::new();
    NORMAL.get_or_init(|| Normal::new(0.0, 1.0).unwrap()).cdf(z)
}

pub fn standard_normal_quantile(q: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    static NORMAL: OnceLock<Normal> = OnceLock::new();
    NORMAL.get_or_init(|| Normal::new(0.0, 1.0).unwrap()).inverse_cdf(q)
}

/// Truncated Dirichlet process: base measure, concentration c > 0, and the
/// number of sticks kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirichletProcessSpec {
    pub base: BaseMeasure,
    pub concentration: f64,
    pub truncation: usize,
}

impl DirichletProcessSpec {
    pub fn validate(&self) -> Result<(), BayesError> {
        self.base.validate()?;
        if !(self.concentration.is_finite() && self.concentration > 0.0) {
            return Err(BayesError::BadInput(format!(
                "concentration must be positive, got {}",
                self.concentration
            )));
        }
        if self.truncation == 0 {
            return Err(BayesError::BadInput("truncation must be at least 1".into()));
        }
        Ok(())
    }
}

/// One truncated stick-breaking draw: breaks W_l ~ Beta(1, c) via inverse
/// CDF (one uniform per stick, so a fixed seed varies smoothly with c),
/// atoms from the base, weights renormalized to unit mass, equal atoms
/// merged, support sorted.
pub fn stick_breaking_draw<R: Rng + ?Sized>(
    spec: &DirichletProcessSpec,
    rng: &mut R,
) -> Result<GridDistribution, BayesError> {
    spec.validate()?;
    let l = spec.truncation;
    let c = spec.concentration;
    let mut atoms = Vec::with_capacity(l);
    let mut weights = Vec::with_capacity(l);
    let mut remaining = 1.0f64;
    for _ in 0..l {
        let u: f64 = rng.gen();
        let v = spec.base.sample(rng);
        // W = 1 - (1-u)^(1/c), the Beta(1, c) quantile at u.
        let w = -((-u).ln_1p() / c).exp_m1();
        atoms.push(v);
        weights.push(w * remaining);
        remaining *= 1.0 - w;
    }

    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&i, &j| atoms[i].partial_cmp(&atoms[j]).unwrap());
    let mut merged_atoms: Vec<f64> = Vec::with_capacity(l);
    let mut merged_weights: Vec<f64> = Vec::with_capacity(l);
    for idx in order {
        if merged_atoms.last() == Some(&atoms[idx]) {
            *merged_weights.last_mut().unwrap() += weights[idx];
        } else {
            merged_atoms.push(atoms[idx]);
            merged_weights.push(weights[idx]);
        }
    }
    let total: f64 = merged_weights.iter().sum();
    if !(total > 0.0) {
        return Err(BayesError::BadInput("stick-breaking produced zero mass".into()));
    }
    for w in &mut merged_weights {
        *w /= total;
    }
    // Absorb the last rounding crumb so the mass is exactly 1.
    let sum: f64 = merged_weights.iter().sum();
    let imax = merged_weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    merged_weights[imax] += 1.0 - sum;
    Ok(GridDistribution::new(merged_atoms, merged_weights)?)
}

/// Hyperparameter of the two-marginal Dirichlet-process taste prior:
/// (mu_j, sigma_j) index the log-normal base and c_j the concentration for
/// each good's marginal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameter {
    pub mu1: f64,
    pub sigma1: f64,
    pub c1: f64,
    pub mu2: f64,
    pub sigma2: f64,
    pub c2: f64,
}

impl Hyperparameter {
    pub fn validate(&self) -> Result<(), BayesError> {
        for (name, v) in [("sigma1", self.sigma1), ("c1", self.c1), ("sigma2", self.sigma2), ("c2", self.c2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(BayesError::BadInput(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.mu1.is_finite() || !self.mu2.is_finite() {
            return Err(BayesError::BadInput("mu1 and mu2 must be finite".into()));
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.mu1, self.sigma1, self.c1, self.mu2, self.sigma2, self.c2]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Hyperparameter { mu1: a[0], sigma1: a[1], c1: a[2], mu2: a[3], sigma2: a[4], c2: a[5] }
    }

    /// Dirichlet-process spec for one good's marginal (good = 1 or 2).
    pub fn marginal(&self, good: u8, truncation: usize) -> DirichletProcessSpec {
        let (mu, sigma, c) = match good {
            1 => (self.mu1, self.sigma1, self.c1),
            2 => (self.mu2, self.sigma2, self.c2),
            _ => panic!("good must be 1 or 2"),
        };
        DirichletProcessSpec {
            base: BaseMeasure::LogNormal { mu, sigma },
            concentration: c,
            truncation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lambert_w_known_values() {
        assert_eq!(lambert_w(0.0).unwrap(), 0.0);
        assert!((lambert_w(std::f64::consts::E).unwrap() - 1.0).abs() < 1e-14);
        assert!((lambert_w(1.0).unwrap() - 0.567_143_290_409_783_8).abs() < 1e-12);
        assert!(lambert_w(-0.1).is_err());
    }

    #[test]
    fn lambert_w_round_trip_over_wide_range() {
        for k in -60..=60 {
            let x = (k as f64 * 0.25).exp();
            let w = lambert_w(x).unwrap();
            assert!(
                (w * w.exp() - x).abs() <= 1e-12 * x.max(1.0),
                "round trip failed at x = {x}"
            );
        }
    }

    #[test]
    fn lognormal_mgf_boundary_cases() {
        assert_eq!(lognormal_mgf(0.3, 1.0, 0.0).unwrap(), 1.0);
        // sigma -> 0 collapses to a point mass at e^mu.
        let v = lognormal_mgf(0.0, 1e-8, 1.0).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-6);
        let v = lognormal_mgf(0.7, 1e-8, 2.0).unwrap();
        assert!((v - (-2.0 * (0.7f64).exp()).exp()).abs() < 1e-6);
        assert!(lognormal_mgf(0.0, -1.0, 1.0).is_err());
        assert!(lognormal_mgf(0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn lognormal_mgf_tracks_monte_carlo() {
        for (mu, sigma, x) in [(0.0, 1.0, 1.0), (0.5, 0.6, 2.0), (-0.3, 1.5, 0.7), (0.0, 2.5, 1.0)] {
            let (mc, se) = lognormal_mgf_mc(mu, sigma, x, 400_000, 77);
            let v = lognormal_mgf(mu, sigma, x).unwrap();
            let tol = (3.0 * se).max(1e-2 * mc);
            assert!(
                (v - mc).abs() <= tol,
                "mgf({mu}, {sigma}, {x}) = {v} vs mc {mc} +- {se}"
            );
        }
    }

    #[test]
    fn quadrature_matches_monte_carlo_tightly() {
        let (mc, se) = lognormal_mgf_mc(0.0, 1.0, 1.0, 1_000_000, 1234);
        let q = lognormal_log_mgf(0.0, 1.0, 1.0).unwrap().exp();
        assert!((q - mc).abs() <= 3.0 * se, "quad {q} vs mc {mc} +- {se}");
    }

    #[test]
    fn tilted_mean_matches_monte_carlo_ratio() {
        use rand::Rng;
        let (mu, sigma, t) = (0.2, 0.9, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..400_000 {
            let z: f64 = rng.sample(StandardNormal);
            let a = (mu + sigma * z).exp();
            let e = (-t * a).exp();
            num += a * e;
            den += e;
        }
        let mc = num / den;
        let v = lognormal_tilted_mean(mu, sigma, t).unwrap();
        assert!((v - mc).abs() < 5e-3 * mc, "tilted mean {v} vs mc {mc}");
    }

    #[test]
    fn dirichlet_moments_match_theory() {
        let alpha = [2.0, 2.0];
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for _ in 0..n {
            let q = dirichlet_sample(&alpha, &mut rng).unwrap();
            mean += q[0];
            m2 += q[0] * q[0];
        }
        mean /= n as f64;
        let var = m2 / n as f64 - mean * mean;
        // E[Q1] = 0.5, V(Q1) = 0.5 * 0.5 / (1 + 4) = 0.05
        let se_mean = (0.05f64 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se_mean);
        assert!((var - 0.05).abs() < 0.005);
        assert!(dirichlet_sample(&[1.0, -1.0], &mut rng).is_err());
    }

    #[test]
    fn stick_breaking_single_stick_is_a_point() {
        let spec = DirichletProcessSpec {
            base: BaseMeasure::LogNormal { mu: 0.0, sigma: 1.0 },
            concentration: 2.0,
            truncation: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = stick_breaking_draw(&spec, &mut rng).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.weights()[0], 1.0);
    }

    #[test]
    fn stick_breaking_draws_are_sorted_unit_mass_probabilities() {
        let spec = DirichletProcessSpec {
            base: BaseMeasure::LogNormal { mu: 0.3, sigma: 0.8 },
            concentration: 5.0,
            truncation: 200,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let g = stick_breaking_draw(&spec, &mut rng).unwrap();
            assert!(g.is_probability());
            assert!(g.atoms().windows(2).all(|w| w[0] < w[1]));
            assert!(g.atoms().iter().all(|a| *a > 0.0));
        }
    }

    #[test]
    fn tiny_concentration_puts_all_mass_on_one_atom() {
        let spec = DirichletProcessSpec {
            base: BaseMeasure::LogNormal { mu: 0.0, sigma: 1.0 },
            concentration: 1e-9,
            truncation: 50,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = stick_breaking_draw(&spec, &mut rng).unwrap();
        let max_w = g.weights().iter().cloned().fold(0.0, f64::max);
        assert!(max_w > 1.0 - 1e-6);
    }

    #[test]
    fn stick_breaking_mean_matches_base_measure() {
        // E[G(C)] = base(C) for any fixed set C; take C = (0, 1].
        let spec = DirichletProcessSpec {
            base: BaseMeasure::LogNormal { mu: 0.0, sigma: 1.0 },
            concentration: 10.0,
            truncation: 400,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 500;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let g = stick_breaking_draw(&spec, &mut rng).unwrap();
            let m = g.mass_at_most(1.0);
            sum += m;
            sum_sq += m * m;
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!((mean - 0.5).abs() <= 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn concentration_tightens_draws_around_base() {
        // V(G(C)) = base(C)(1 - base(C)) / (c + 1): decreasing in c.
        let mut vars = Vec::new();
        for (seed, c) in [(31u64, 1.0), (32, 10.0), (33, 100.0)] {
            let spec = DirichletProcessSpec {
                base: BaseMeasure::LogNormal { mu: 0.0, sigma: 1.0 },
                concentration: c,
                truncation: 600,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 300;
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let m = stick_breaking_draw(&spec, &mut rng).unwrap().mass_at_most(1.0);
                s += m;
                s2 += m * m;
            }
            let mean = s / n as f64;
            vars.push((s2 / n as f64 - mean * mean).max(0.0));
        }
        assert!(vars[0] > vars[1] && vars[1] > vars[2], "variances {vars:?}");
    }

    #[test]
    fn high_concentration_draws_stay_near_base_cdf() {
        // For a Dirichlet process, sqrt(c+1) * sup|G - F| converges to the
        // sup of a Brownian bridge, whose 95th percentile is 1.3581. At
        // c = 100 that puts the 95% Kolmogorov-distance quantile near
        // 1.3581/sqrt(101) = 0.135 (an independent simulation agrees and
        // puts P(KD < 0.1) near 0.78, not 0.95).
        let spec = DirichletProcessSpec {
            base: BaseMeasure::LogNormal { mu: 0.0, sigma: 1.0 },
            concentration: 100.0,
            truncation: 1000,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let draws = 200;
        let mut within_bridge_quantile = 0;
        let mut within_tenth = 0;
        for _ in 0..draws {
            let g = stick_breaking_draw(&spec, &mut rng).unwrap();
            let mut ks = 0.0f64;
            let mut cum = 0.0;
            for (a, w) in g.atoms().iter().zip(g.weights()) {
                let base = spec.base.cdf(*a);
                ks = ks.max((cum - base).abs());
                cum += w;
                ks = ks.max((cum - base).abs());
            }
            if ks < 0.14 {
                within_bridge_quantile += 1;
            }
            if ks < 0.1 {
                within_tenth += 1;
            }
        }
        assert!(
            within_bridge_quantile * 100 >= draws * 95,
            "only {within_bridge_quantile}/{draws} draws within Kolmogorov distance 0.14"
        );
        assert!(
            (120..=185).contains(&within_tenth),
            "{within_tenth}/{draws} draws within 0.1, expected near 78%"
        );
    }

    #[test]
    fn hyperparameter_round_trip_and_validation() {
        let theta = Hyperparameter { mu1: 0.8, sigma1: 1.0, c1: 20.0, mu2: 0.3, sigma2: 0.8, c2: 5.0 };
        theta.validate().unwrap();
        assert_eq!(Hyperparameter::from_array(theta.to_array()), theta);
        let bad = Hyperparameter { sigma1: -1.0, ..theta };
        assert!(bad.validate().is_err());
        let spec = theta.marginal(2, 100);
        assert_eq!(spec.concentration, 5.0);
        assert_eq!(spec.truncation, 100);
    }
}
