//! Laboratory for non-parametric random-utility demand systems.
//!
//! Two model families are implemented: SARA (stochastic absolute risk
//! aversion, a mixture of negative-exponential utilities over random
//! risk-aversion pairs) and SSF (stochastic safety-first, a mixture of
//! kinked linear utilities with a random intake limit). Around them sit
//! a synthetic scanner-panel simulator with Dirichlet-process taste priors,
//! a simulated-moment hyperparameter estimator, and a posterior filter that
//! projects taste distributions onto the first-order-condition restrictions
//! implied by observed purchases.

pub mod bayes;
pub mod cli;
pub mod core;
pub mod estimate;
pub mod filter;
pub mod numeric;
pub mod panel;
pub mod sara;
pub mod ssf;

#[cfg(test)]
pub(crate) mod testutil {
    use crate::core::GridDistribution;
    use rand::Rng;

    /// Discretize a gamma law onto n log-spaced atoms on [e^-10, e^10] by
    /// assigning each atom the probability of its surrounding cell.
    pub fn gamma_grid(shape: f64, rate: f64, n: usize) -> GridDistribution {
        use statrs::distribution::{ContinuousCDF, Gamma};
        let d = Gamma::new(shape, rate).unwrap();
        let (lo, hi) = (-10.0f64, 10.0f64);
        let step = (hi - lo) / (n - 1) as f64;
        let atoms: Vec<f64> = (0..n).map(|i| (lo + step * i as f64).exp()).collect();
        let mut weights = Vec::with_capacity(n);
        let mut prev_cdf = 0.0;
        for i in 0..n {
            let right = if i + 1 < n { (atoms[i] * atoms[i + 1]).sqrt() } else { f64::INFINITY };
            let c = if right.is_finite() { d.cdf(right) } else { 1.0 };
            weights.push(c - prev_cdf);
            prev_cdf = c;
        }
        GridDistribution::new(atoms, weights).unwrap().normalized().unwrap()
    }

    /// Small random probability grid with atoms in [e^-2, e^2].
    pub fn random_grid<R: Rng>(rng: &mut R) -> GridDistribution {
        let n = rng.gen_range(2..6);
        let mut atoms: Vec<f64> = (0..n).map(|_| (rng.gen_range(-2.0..2.0f64)).exp()).collect();
        atoms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        atoms.dedup();
        let weights: Vec<f64> = (0..atoms.len()).map(|_| rng.gen_range(0.1..1.0)).collect();
        GridDistribution::new(atoms, weights).unwrap().normalized().unwrap()
    }
}
