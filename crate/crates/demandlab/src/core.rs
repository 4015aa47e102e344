//! Domain types shared by every module: consumption bundles, budget/price
//! designs, corner regimes, discrete taste distributions, taste
//! specifications, and masked panel observations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::log_sum_exp;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("bundle quantities must be finite and non-negative, got ({0}, {1})")]
    BadBundle(f64, f64),
    #[error("design requires finite y > 0 and p > 0, got (y = {0}, p = {1})")]
    BadDesign(f64, f64),
    #[error("grid atoms must be finite, strictly positive and strictly increasing")]
    BadAtoms,
    #[error("grid has {atoms} atoms but {weights} weights")]
    LengthMismatch { atoms: usize, weights: usize },
    #[error("grid weights must be finite")]
    BadWeights,
    #[error("grid weights sum to {0}, cannot normalize")]
    DegenerateMass(f64),
    #[error("taste specification invalid: {0}")]
    BadTaste(String),
    #[error("observation violates masking: {0}")]
    Masking(String),
}

/// Quantities of the two goods. Corner solutions carry exact zeros.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub x1: f64,
    pub x2: f64,
}

impl Bundle {
    pub fn new(x1: f64, x2: f64) -> Result<Self, DomainError> {
        if !(x1.is_finite() && x2.is_finite() && x1 >= 0.0 && x2 >= 0.0) {
            return Err(DomainError::BadBundle(x1, x2));
        }
        Ok(Bundle { x1, x2 })
    }
}

/// Normalized budget y and relative price p; the budget set is
/// p*x1 + x2 <= y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub y: f64,
    pub p: f64,
}

impl Design {
    pub fn new(y: f64, p: f64) -> Result<Self, DomainError> {
        if !(y.is_finite() && p.is_finite() && y > 0.0 && p > 0.0) {
            return Err(DomainError::BadDesign(y, p));
        }
        Ok(Design { y, p })
    }
}

/// Which goods carry positive quantity. Zero is compared exactly: corner
/// solutions are constructed with literal zeros, never rounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    BothZero,
    OnlyGood1,
    OnlyGood2,
    Interior,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::BothZero => "both_zero",
            Regime::OnlyGood1 => "only_good1",
            Regime::OnlyGood2 => "only_good2",
            Regime::Interior => "interior",
        }
    }
}

pub fn classify_regime(x: Bundle) -> Regime {
    match (x.x1 > 0.0, x.x2 > 0.0) {
        (false, false) => Regime::BothZero,
        (true, false) => Regime::OnlyGood1,
        (false, true) => Regime::OnlyGood2,
        (true, true) => Regime::Interior,
    }
}

/// Finite discrete distribution on strictly positive support points.
///
/// Weights are plain reals: the posterior filter moves through signed
/// vectors before clipping, so negativity is representable. A valid
/// probability state has non-negative weights summing to 1 within 1e-12;
/// `is_probability` checks exactly that.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid")]
pub struct GridDistribution {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Deserialize)]
struct RawGrid {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl TryFrom<RawGrid> for GridDistribution {
    type Error = DomainError;
    fn try_from(raw: RawGrid) -> Result<Self, DomainError> {
        GridDistribution::new(raw.atoms, raw.weights)
    }
}

impl GridDistribution {
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self, DomainError> {
        if atoms.is_empty() || !atoms.iter().all(|a| a.is_finite() && *a > 0.0) {
            return Err(DomainError::BadAtoms);
        }
        if atoms.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DomainError::BadAtoms);
        }
        if atoms.len() != weights.len() {
            return Err(DomainError::LengthMismatch { atoms: atoms.len(), weights: weights.len() });
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(DomainError::BadWeights);
        }
        Ok(GridDistribution { atoms, weights })
    }

    pub fn point_mass(a: f64) -> Result<Self, DomainError> {
        Self::new(vec![a], vec![1.0])
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn is_probability(&self) -> bool {
        self.weights.iter().all(|w| *w >= 0.0)
            && (self.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12
    }

    /// Same atoms, new weights; lengths must match.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self, DomainError> {
        Self::new(self.atoms.clone(), weights)
    }

    /// Rescale weights to unit mass. Errors when the total is not positive.
    pub fn normalized(mut self) -> Result<Self, DomainError> {
        let total: f64 = self.weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(DomainError::DegenerateMass(total));
        }
        for w in &mut self.weights {
            *w /= total;
        }
        Ok(self)
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(a, w)| a * w).sum()
    }

    /// Total weight on atoms <= c.
    pub fn mass_at_most(&self, c: f64) -> f64 {
        self.atoms
            .iter()
            .zip(&self.weights)
            .take_while(|(a, _)| **a <= c)
            .map(|(_, w)| w)
            .sum()
    }

    /// Total weight on atoms strictly above s. Assumes a probability state.
    pub fn survival(&self, s: f64) -> f64 {
        self.atoms
            .iter()
            .zip(&self.weights)
            .skip_while(|(a, _)| **a <= s)
            .map(|(_, w)| w)
            .sum()
    }

    /// log E[exp(-A t)], computed with the maximum exponent factored out so
    /// that wide grids (atoms up to e^10) stay representable. Zero-weight
    /// atoms are skipped; requires a probability state for meaning.
    pub fn log_laplace(&self, t: f64) -> f64 {
        let terms: Vec<f64> = self
            .atoms
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(a, w)| w.ln() - a * t)
            .collect();
        log_sum_exp(&terms)
    }

    /// E[A exp(-A t)] / E[exp(-A t)]: the mean of A under the
    /// exponentially tilted distribution. Stable for any real t.
    pub fn tilted_mean(&self, t: f64) -> f64 {
        let mut m = f64::NEG_INFINITY;
        for (a, w) in self.atoms.iter().zip(&self.weights) {
            if *w > 0.0 {
                m = m.max(w.ln() - a * t);
            }
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (a, w) in self.atoms.iter().zip(&self.weights) {
            if *w > 0.0 {
                let e = (w.ln() - a * t - m).exp();
                num += a * e;
                den += e;
            }
        }
        num / den
    }

    /// The single positive-weight atom, if there is exactly one.
    pub fn effective_point(&self) -> Option<f64> {
        let mut found = None;
        for (a, w) in self.atoms.iter().zip(&self.weights) {
            if *w > 0.0 {
                if found.is_some() {
                    return None;
                }
                found = Some(*a);
            }
        }
        found
    }
}

/// One-dimensional taste marginal: a degenerate point, a gamma law
/// (Laplace transform (1 + v/rate)^(-shape)), or a discrete grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OneDimSpec {
    PointMass { a: f64 },
    Gamma { shape: f64, rate: f64 },
    Grid(GridDistribution),
}

impl OneDimSpec {
    pub fn validate(&self) -> Result<(), DomainError> {
        match self {
            OneDimSpec::PointMass { a } => {
                if !(a.is_finite() && *a >= 0.0) {
                    return Err(DomainError::BadTaste(format!("point mass at {a} out of range")));
                }
            }
            OneDimSpec::Gamma { shape, rate } => {
                if !(shape.is_finite() && *shape > 0.0 && rate.is_finite() && *rate > 0.0) {
                    return Err(DomainError::BadTaste(format!(
                        "gamma marginal needs shape > 0 and rate > 0, got ({shape}, {rate})"
                    )));
                }
            }
            OneDimSpec::Grid(g) => {
                if !g.is_probability() {
                    return Err(DomainError::BadTaste("grid marginal is not a probability".into()));
                }
            }
        }
        Ok(())
    }
}

/// Joint taste specification for the two-good models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TasteSpec {
    /// Degenerate pair (a1, a2): risk-neutral limit with constant MRS.
    PointMass { a1: f64, a2: f64 },
    /// Independent gamma marginals; everything is closed-form.
    GammaGamma { shape1: f64, rate1: f64, shape2: f64, rate2: f64 },
    /// Relative preference A1 with an exponential intake limit
    /// A2 ~ Exp(lambda); the satiation-frontier family.
    ExpThresholdLaplace { a1: OneDimSpec, lambda: f64 },
    /// Independent log-normal marginals, exp(mu_j + sigma_j Z).
    LogNormal { mu1: f64, sigma1: f64, mu2: f64, sigma2: f64 },
    /// Independent discrete marginals.
    IndependentGrids { pi1: GridDistribution, pi2: GridDistribution },
    /// A_j = C + B_j with a shared component C: marginals become dependent.
    CommonComponent { common: OneDimSpec, good1: OneDimSpec, good2: OneDimSpec },
}

impl TasteSpec {
    pub fn validate(&self) -> Result<(), DomainError> {
        match self {
            TasteSpec::PointMass { a1, a2 } => {
                if !(a1.is_finite() && a2.is_finite() && *a1 > 0.0 && *a2 > 0.0) {
                    return Err(DomainError::BadTaste(format!("point mass ({a1}, {a2}) out of range")));
                }
            }
            TasteSpec::GammaGamma { shape1, rate1, shape2, rate2 } => {
                for (name, v) in [("shape1", shape1), ("rate1", rate1), ("shape2", shape2), ("rate2", rate2)] {
                    if !(v.is_finite() && *v > 0.0) {
                        return Err(DomainError::BadTaste(format!("{name} must be positive, got {v}")));
                    }
                }
            }
            TasteSpec::ExpThresholdLaplace { a1, lambda } => {
                a1.validate()?;
                if !(lambda.is_finite() && *lambda > 0.0) {
                    return Err(DomainError::BadTaste(format!("lambda must be positive, got {lambda}")));
                }
            }
            TasteSpec::LogNormal { mu1, sigma1, mu2, sigma2 } => {
                if !(mu1.is_finite() && mu2.is_finite()) {
                    return Err(DomainError::BadTaste("log-normal mu must be finite".into()));
                }
                if !(sigma1.is_finite() && *sigma1 > 0.0 && sigma2.is_finite() && *sigma2 > 0.0) {
                    return Err(DomainError::BadTaste("log-normal sigma must be positive".into()));
                }
            }
            TasteSpec::IndependentGrids { pi1, pi2 } => {
                if !pi1.is_probability() || !pi2.is_probability() {
                    return Err(DomainError::BadTaste("grid marginals must be probabilities".into()));
                }
            }
            TasteSpec::CommonComponent { common, good1, good2 } => {
                common.validate()?;
                good1.validate()?;
                good2.validate()?;
            }
        }
        Ok(())
    }
}

/// One consumer-period record after observability masking: quantities are
/// always seen, the budget y only when good 2 was bought, the price p only
/// when both goods were bought.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelObservation {
    pub segment_id: u32,
    pub consumer_id: u32,
    pub period: u32,
    pub regime: Regime,
    pub x1: f64,
    pub x2: f64,
    pub y: Option<f64>,
    pub p: Option<f64>,
}

impl PanelObservation {
    pub fn validate(&self) -> Result<(), DomainError> {
        Bundle::new(self.x1, self.x2)?;
        let regime = classify_regime(Bundle { x1: self.x1, x2: self.x2 });
        if regime != self.regime {
            return Err(DomainError::Masking(format!(
                "regime tag {} does not match quantities ({}, {})",
                self.regime.name(),
                self.x1,
                self.x2
            )));
        }
        if self.y.is_some() != (self.x2 > 0.0) {
            return Err(DomainError::Masking(
                "budget y must be present exactly when x2 > 0".into(),
            ));
        }
        if self.p.is_some() != (self.x1 > 0.0 && self.x2 > 0.0) {
            return Err(DomainError::Masking(
                "price p must be present exactly when x1 > 0 and x2 > 0".into(),
            ));
        }
        if let Some(y) = self.y {
            if !(y.is_finite() && y > 0.0) {
                return Err(DomainError::Masking(format!("budget y = {y} out of range")));
            }
        }
        if let Some(p) = self.p {
            if !(p.is_finite() && p > 0.0) {
                return Err(DomainError::Masking(format!("price p = {p} out of range")));
            }
        }
        Ok(())
    }
}

/// Apply the observability mask to a solved bundle at a known design.
pub fn mask_observation(
    segment_id: u32,
    consumer_id: u32,
    period: u32,
    x: Bundle,
    z: Design,
) -> PanelObservation {
    let regime = classify_regime(x);
    PanelObservation {
        segment_id,
        consumer_id,
        period,
        regime,
        x1: x.x1,
        x2: x.x2,
        y: (x.x2 > 0.0).then_some(z.y),
        p: (x.x1 > 0.0 && x.x2 > 0.0).then_some(z.p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn regime_classification_uses_exact_zero() {
        assert_eq!(classify_regime(Bundle { x1: 0.0, x2: 0.0 }), Regime::BothZero);
        assert_eq!(classify_regime(Bundle { x1: 1e-300, x2: 0.0 }), Regime::OnlyGood1);
        assert_eq!(classify_regime(Bundle { x1: 0.0, x2: 2.0 }), Regime::OnlyGood2);
        assert_eq!(classify_regime(Bundle { x1: 1.0, x2: 2.0 }), Regime::Interior);
    }

    #[test]
    fn bundle_and_design_reject_bad_values() {
        assert!(Bundle::new(-1.0, 0.0).is_err());
        assert!(Bundle::new(f64::NAN, 0.0).is_err());
        assert!(Bundle::new(0.0, 0.0).is_ok());
        assert!(Design::new(0.0, 1.0).is_err());
        assert!(Design::new(1.0, f64::INFINITY).is_err());
        assert!(Design::new(4.0, 1.0).is_ok());
    }

    #[test]
    fn grid_rejects_unsorted_or_nonpositive_atoms() {
        assert!(GridDistribution::new(vec![1.0, 1.0], vec![0.5, 0.5]).is_err());
        assert!(GridDistribution::new(vec![2.0, 1.0], vec![0.5, 0.5]).is_err());
        assert!(GridDistribution::new(vec![0.0, 1.0], vec![0.5, 0.5]).is_err());
        assert!(GridDistribution::new(vec![1.0], vec![0.5, 0.5]).is_err());
        assert!(GridDistribution::new(vec![], vec![]).is_err());
        let g = GridDistribution::new(vec![1.0, 2.0], vec![0.25, 0.75]).unwrap();
        assert!(g.is_probability());
    }

    #[test]
    fn grid_allows_signed_weights_but_flags_them() {
        let g = GridDistribution::new(vec![1.0, 2.0], vec![1.2, -0.2]).unwrap();
        assert!(!g.is_probability());
        assert!((g.weights()[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn tilted_mean_matches_direct_ratio_on_small_grid() {
        let g = GridDistribution::new(vec![0.5, 1.0, 2.0], vec![0.2, 0.3, 0.5]).unwrap();
        let t = 0.7;
        let num: f64 = g.atoms().iter().zip(g.weights()).map(|(a, w)| w * a * (-a * t).exp()).sum();
        let den: f64 = g.atoms().iter().zip(g.weights()).map(|(a, w)| w * (-a * t).exp()).sum();
        assert!((g.tilted_mean(t) - num / den).abs() < 1e-14);
        assert!((g.log_laplace(t) - den.ln()).abs() < 1e-14);
    }

    #[test]
    fn tilted_mean_survives_extreme_arguments() {
        let g = GridDistribution::new(vec![(-10.0f64).exp(), 1.0, (10.0f64).exp()], vec![0.4, 0.3, 0.3]).unwrap();
        // At huge t only the smallest atom matters; at t = -3 the largest
        // dominates. A naive ratio would be 0/0 or inf/inf.
        assert!((g.tilted_mean(1e4) - (-10.0f64).exp()).abs() < 1e-12);
        assert!((g.tilted_mean(-3.0) - (10.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn survival_is_strict() {
        let g = GridDistribution::new(vec![1.0, 2.0, 3.0], vec![0.2, 0.3, 0.5]).unwrap();
        assert!((g.survival(2.0) - 0.5).abs() < 1e-15);
        assert!((g.survival(1.999) - 0.8).abs() < 1e-15);
        assert!((g.survival(0.0) - 1.0).abs() < 1e-15);
        assert_eq!(g.survival(3.0), 0.0);
    }

    #[test]
    fn effective_point_ignores_zero_weight_atoms() {
        let g = GridDistribution::new(vec![1.0, 2.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(g.effective_point(), Some(2.0));
        let g = GridDistribution::new(vec![1.0, 2.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(g.effective_point(), None);
    }

    #[test]
    fn grid_json_round_trip_and_validation() {
        let g = GridDistribution::new(vec![0.5, 1.5], vec![0.4, 0.6]).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert!(s.contains("\"atoms\""));
        let back: GridDistribution = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
        let bad: Result<GridDistribution, _> = serde_json::from_str(r#"{"atoms":[2.0,1.0],"weights":[0.5,0.5]}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn masking_follows_purchases() {
        let z = Design { y: 4.0, p: 1.0 };
        let interior = mask_observation(0, 1, 2, Bundle { x1: 2.0, x2: 2.0 }, z);
        assert_eq!(interior.y, Some(4.0));
        assert_eq!(interior.p, Some(1.0));
        interior.validate().unwrap();

        let good1 = mask_observation(0, 1, 2, Bundle { x1: 4.0, x2: 0.0 }, z);
        assert_eq!(good1.y, None);
        assert_eq!(good1.p, None);
        good1.validate().unwrap();

        let good2 = mask_observation(0, 1, 2, Bundle { x1: 0.0, x2: 4.0 }, z);
        assert_eq!(good2.y, Some(4.0));
        assert_eq!(good2.p, None);
        good2.validate().unwrap();
    }

    #[test]
    fn validate_rejects_price_without_budget() {
        let bad = PanelObservation {
            segment_id: 0,
            consumer_id: 0,
            period: 0,
            regime: Regime::OnlyGood1,
            x1: 1.0,
            x2: 0.0,
            y: None,
            p: Some(1.0),
        };
        assert!(matches!(bad.validate(), Err(DomainError::Masking(_))));
    }

    proptest! {
        #[test]
        fn masked_observations_always_validate(
            x1 in 0.0f64..10.0,
            x2 in 0.0f64..10.0,
            y in 0.1f64..20.0,
            p in 0.1f64..10.0,
        ) {
            let obs = mask_observation(1, 2, 3, Bundle { x1, x2 }, Design { y, p });
            prop_assert!(obs.validate().is_ok());
            // p never observed without y
            prop_assert!(!(obs.p.is_some() && obs.y.is_none()));
        }

        #[test]
        fn grid_construction_accepts_sorted_positive_atoms(n in 1usize..20) {
            let atoms: Vec<f64> = (0..n).map(|i| 0.5 + i as f64).collect();
            let weights: Vec<f64> = (0..n).map(|_| 1.0 / n as f64).collect();
            let g = GridDistribution::new(atoms, weights).unwrap();
            prop_assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
