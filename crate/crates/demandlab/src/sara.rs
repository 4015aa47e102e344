//! Utility engine for the stochastic absolute-risk-aversion family:
//! U(x) = -E[exp(-A1 x1 - A2 x2)] over a random taste pair (A1, A2).
//! Marginal rate of substitution, risk aversion, indifference curves, and
//! the three-regime demand solver, with closed forms where the gamma
//! family admits them and a monotone numeric path everywhere else.

use thiserror::Error;

use crate::bayes::{self, BayesError};
use crate::core::{Bundle, Design, DomainError, GridDistribution, OneDimSpec, Regime, TasteSpec};
use crate::numeric::{solve_decreasing, BracketEnd, RootError};

// exp underflows to 0 a little below this; utilities are capped here so
// they stay strictly negative.
const MIN_LOG_UTILITY: f64 = -744.0;

#[derive(Debug, Error)]
pub enum SaraError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Bayes(#[from] BayesError),
    #[error(transparent)]
    Root(#[from] RootError),
    #[error("log utility {0} exceeds the exponent range; taste grid and bundle are mismatched")]
    ExponentRange(f64),
    #[error("expectation ratio denominator underflowed")]
    Underflow,
    #[error("utility level {u} is not attainable at x1 = {x1}")]
    Unattainable { x1: f64, u: f64 },
    #[error("{0}")]
    Unsupported(&'static str),
}

/// One taste marginal with a tractable Laplace transform.
#[derive(Debug, Clone)]
pub(crate) enum Marginal {
    Point(f64),
    Gamma { shape: f64, rate: f64 },
    Grid(GridDistribution),
    LogNormal { mu: f64, sigma: f64 },
}

impl Marginal {
    pub(crate) fn from_one_dim(spec: &OneDimSpec) -> Marginal {
        match spec {
            OneDimSpec::PointMass { a } => Marginal::Point(*a),
            OneDimSpec::Gamma { shape, rate } => Marginal::Gamma { shape: *shape, rate: *rate },
            OneDimSpec::Grid(g) => Marginal::Grid(g.clone()),
        }
    }

    /// ln E[exp(-A t)].
    pub(crate) fn log_laplace(&self, t: f64) -> Result<f64, SaraError> {
        match self {
            Marginal::Point(a) => Ok(-a * t),
            Marginal::Gamma { shape, rate } => Ok(-shape * (t / rate).ln_1p()),
            Marginal::Grid(g) => Ok(g.log_laplace(t)),
            Marginal::LogNormal { mu, sigma } => Ok(bayes::lognormal_log_mgf(*mu, *sigma, t)?),
        }
    }

    /// E[A exp(-A t)] / E[exp(-A t)].
    pub(crate) fn tilted_mean(&self, t: f64) -> Result<f64, SaraError> {
        match self {
            Marginal::Point(a) => Ok(*a),
            Marginal::Gamma { shape, rate } => Ok(shape / (rate + t)),
            Marginal::Grid(g) => Ok(g.tilted_mean(t)),
            Marginal::LogNormal { mu, sigma } => Ok(bayes::lognormal_tilted_mean(*mu, *sigma, t)?),
        }
    }

    fn effective_point(&self) -> Option<f64> {
        match self {
            Marginal::Point(a) => Some(*a),
            Marginal::Grid(g) => g.effective_point(),
            _ => None,
        }
    }

    fn mean(&self) -> f64 {
        match self {
            Marginal::Point(a) => *a,
            Marginal::Gamma { shape, rate } => shape / rate,
            Marginal::Grid(g) => g.mean(),
            Marginal::LogNormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
        }
    }
}

#[derive(Debug, Clone)]
enum SaraKind {
    Independent { m1: Marginal, m2: Marginal },
    /// A_j = C + B_j with one shared draw of C.
    Common { c: Marginal, b1: Marginal, b2: Marginal },
}

#[derive(Debug, Clone)]
pub struct SaraModel {
    kind: SaraKind,
    gamma: Option<(f64, f64, f64, f64)>,
}

impl SaraModel {
    pub fn new(taste: &TasteSpec) -> Result<Self, SaraError> {
        taste.validate()?;
        let kind = match taste {
            TasteSpec::PointMass { a1, a2 } => {
                SaraKind::Independent { m1: Marginal::Point(*a1), m2: Marginal::Point(*a2) }
            }
            TasteSpec::GammaGamma { shape1, rate1, shape2, rate2 } => SaraKind::Independent {
                m1: Marginal::Gamma { shape: *shape1, rate: *rate1 },
                m2: Marginal::Gamma { shape: *shape2, rate: *rate2 },
            },
            TasteSpec::LogNormal { mu1, sigma1, mu2, sigma2 } => SaraKind::Independent {
                m1: Marginal::LogNormal { mu: *mu1, sigma: *sigma1 },
                m2: Marginal::LogNormal { mu: *mu2, sigma: *sigma2 },
            },
            TasteSpec::IndependentGrids { pi1, pi2 } => {
                SaraKind::Independent { m1: Marginal::Grid(pi1.clone()), m2: Marginal::Grid(pi2.clone()) }
            }
            TasteSpec::CommonComponent { common, good1, good2 } => SaraKind::Common {
                c: Marginal::from_one_dim(common),
                b1: Marginal::from_one_dim(good1),
                b2: Marginal::from_one_dim(good2),
            },
            TasteSpec::ExpThresholdLaplace { .. } => {
                return Err(SaraError::Unsupported(
                    "exponential-threshold tastes define a satiation model, not this family",
                ));
            }
        };
        match &kind {
            SaraKind::Independent { m1, m2 } => {
                if !(m1.mean() > 0.0 && m2.mean() > 0.0) {
                    return Err(DomainError::BadTaste("both marginals must be strictly positive".into()).into());
                }
            }
            SaraKind::Common { c, b1, b2 } => {
                if !(c.mean() + b1.mean() > 0.0 && c.mean() + b2.mean() > 0.0) {
                    return Err(DomainError::BadTaste(
                        "each good needs positive mass from the common or own component".into(),
                    )
                    .into());
                }
                // A degenerate pair of equal own components under a spread
                // common draw puts all joint mass on the ray a1 = a2, where
                // the utility loses strict concavity.
                if c.effective_point().is_none() {
                    if let (Some(v1), Some(v2)) = (b1.effective_point(), b2.effective_point()) {
                        if v1 == v2 {
                            return Err(DomainError::BadTaste(
                                "joint taste concentrates on a single ray; preferences degenerate to a linear index"
                                    .into(),
                            )
                            .into());
                        }
                    }
                }
            }
        }
        let gamma = match taste {
            TasteSpec::GammaGamma { shape1, rate1, shape2, rate2 } => {
                Some((*shape1, *rate1, *shape2, *rate2))
            }
            _ => None,
        };
        Ok(SaraModel { kind, gamma })
    }

    /// Constant MRS a1/a2 when the joint taste is a single atom.
    fn effective_ratio(&self) -> Option<f64> {
        match &self.kind {
            SaraKind::Independent { m1, m2 } => Some(m1.effective_point()? / m2.effective_point()?),
            SaraKind::Common { c, b1, b2 } => {
                let c = c.effective_point()?;
                Some((c + b1.effective_point()?) / (c + b2.effective_point()?))
            }
        }
    }

    fn log_utility(&self, x: Bundle) -> Result<f64, SaraError> {
        let l = match &self.kind {
            SaraKind::Independent { m1, m2 } => m1.log_laplace(x.x1)? + m2.log_laplace(x.x2)?,
            SaraKind::Common { c, b1, b2 } => {
                c.log_laplace(x.x1 + x.x2)? + b1.log_laplace(x.x1)? + b2.log_laplace(x.x2)?
            }
        };
        if l < MIN_LOG_UTILITY || !l.is_finite() {
            return Err(SaraError::ExponentRange(l));
        }
        Ok(l)
    }

    /// U(x) = -E[exp(-A'x)], always in (-1, 0] territory for probability
    /// tastes and strictly negative.
    pub fn utility(&self, x: Bundle) -> Result<f64, SaraError> {
        Ok(-self.log_utility(x)?.exp())
    }

    /// Marginal rate of substitution E[A1 e^{-A'x}] / E[A2 e^{-A'x}].
    pub fn mrs(&self, x: Bundle) -> Result<f64, SaraError> {
        self.mrs_with_power(x, 1.0)
    }

    /// MRS of the utility raised to a positive power: the power scales both
    /// marginal utilities by the same factor, so the ratio must not move.
    pub fn mrs_with_power(&self, x: Bundle, power: f64) -> Result<f64, SaraError> {
        let (num, den) = match &self.kind {
            SaraKind::Independent { m1, m2 } => {
                (power * m1.tilted_mean(x.x1)?, power * m2.tilted_mean(x.x2)?)
            }
            SaraKind::Common { c, b1, b2 } => {
                let mc = c.tilted_mean(x.x1 + x.x2)?;
                (power * (mc + b1.tilted_mean(x.x1)?), power * (mc + b2.tilted_mean(x.x2)?))
            }
        };
        if !(den > 0.0) || !den.is_finite() {
            return Err(SaraError::Underflow);
        }
        Ok(num / den)
    }

    /// Absolute risk aversion in the good-1 direction,
    /// E[A1 e^{-A1 x1}] / E[e^{-A1 x1}]; hyperbolic nu1/(rate1 + x1) for a
    /// gamma marginal.
    pub fn risk_aversion_good1(&self, x1: f64) -> Result<f64, SaraError> {
        match &self.kind {
            SaraKind::Independent { m1, .. } => m1.tilted_mean(x1),
            SaraKind::Common { .. } => Err(SaraError::Unsupported(
                "risk aversion along one good requires independent marginals",
            )),
        }
    }

    /// x2 level tracing the indifference curve through utility u at x1.
    pub fn indifference_curve(&self, x1: f64, u: f64) -> Result<f64, SaraError> {
        if !(u < 0.0) {
            return Err(SaraError::Unattainable { x1, u });
        }
        let floor = self.utility(Bundle::new(x1, 0.0)?)?;
        if u < floor {
            return Err(SaraError::Unattainable { x1, u });
        }
        if u == floor {
            return Ok(0.0);
        }
        if let Some((nu1, a1, nu2, a2)) = self.gamma {
            // (a2/(a2+x2))^nu2 = -u ((a1+x1)/a1)^nu1, solved for x2.
            let q = -u * ((a1 + x1) / a1).powf(nu1);
            return Ok(a2 * (q.powf(-1.0 / nu2) - 1.0));
        }
        // U(x1, .) rises monotonically to 0, so u - U crosses zero once.
        let target = |x2: f64| {
            let v = self.utility(Bundle::new(x1, x2.max(0.0)).unwrap()).unwrap_or(f64::NAN);
            u - v
        };
        let x2 = solve_decreasing(target, 0.0, 1.0, BracketEnd::Open(0.0), BracketEnd::Unbounded, 1e-12)?;
        Ok(x2)
    }

    /// Budget-constrained demand with the corner regimes: the interior
    /// first-order condition MRS(x1, y - p x1) = p is solved on [0, y/p]
    /// and clamped to whichever corner applies when it has no root there.
    pub fn demand(&self, z: Design) -> Result<(Bundle, Regime), SaraError> {
        let (y, p) = (z.y, z.p);
        let cap = y / p;
        if let Some(a0) = self.effective_ratio() {
            // Linear-index preferences: all-or-nothing by price, ties to
            // good 1.
            return if p <= a0 {
                Ok((Bundle::new(cap, 0.0)?, Regime::OnlyGood1))
            } else {
                Ok((Bundle::new(0.0, y)?, Regime::OnlyGood2))
            };
        }
        if let Some((nu1, a1, nu2, a2)) = self.gamma {
            let regime = gamma_regime_region(nu1, a1, nu2, a2, z);
            return match regime {
                Regime::OnlyGood1 => Ok((Bundle::new(cap, 0.0)?, regime)),
                Regime::OnlyGood2 => Ok((Bundle::new(0.0, y)?, regime)),
                _ => {
                    let t1 = nu1 * y - p * nu2 * a1 + nu1 * a2;
                    let x1 = (t1 / ((nu1 + nu2) * p)).min(cap);
                    let x2 = (y - p * x1).max(0.0);
                    Ok((Bundle::new(x1, x2)?, Regime::Interior))
                }
            };
        }
        self.demand_numeric(z)
    }

    /// Bisection fallback on the log first-order condition
    /// ln MRS(x1, y - p x1) - ln p, which crosses zero exactly once on the
    /// budget segment.
    pub(crate) fn demand_numeric(&self, z: Design) -> Result<(Bundle, Regime), SaraError> {
        let (y, p) = (z.y, z.p);
        let cap = y / p;
        let log_p = p.ln();
        let failure = std::cell::RefCell::new(None);
        let g = |x1: f64| {
            let x2 = (y - p * x1).max(0.0);
            match self.mrs(Bundle { x1: x1.max(0.0), x2 }) {
                Ok(m) => m.ln() - log_p,
                Err(e) => {
                    *failure.borrow_mut() = Some(e);
                    f64::NAN
                }
            }
        };
        let at_cap = g(cap);
        if let Some(e) = failure.borrow_mut().take() {
            return Err(e);
        }
        if at_cap >= 0.0 {
            return Ok((Bundle::new(cap, 0.0)?, Regime::OnlyGood1));
        }
        let at_zero = g(0.0);
        if let Some(e) = failure.borrow_mut().take() {
            return Err(e);
        }
        if at_zero <= 0.0 {
            return Ok((Bundle::new(0.0, y)?, Regime::OnlyGood2));
        }
        let x1 = solve_decreasing(g, 0.0, cap, BracketEnd::Open(0.0), BracketEnd::Open(cap), 1e-12)?;
        if let Some(e) = failure.borrow_mut().take() {
            return Err(e);
        }
        let x2 = (y - p * x1).max(0.0);
        Ok((Bundle::new(x1, x2)?, Regime::Interior))
    }
}

/// Demand regime of the gamma-gamma model straight from the inequality
/// region: interior iff both
///   nu1 y - p nu2 rate1 + nu1 rate2 > 0   (otherwise only good 2)
///   nu2 y + p nu2 rate1 - nu1 rate2 > 0   (otherwise only good 1)
/// hold; their sum is (nu1+nu2) y > 0, so at most one can fail.
pub fn gamma_regime_region(nu1: f64, rate1: f64, nu2: f64, rate2: f64, z: Design) -> Regime {
    let t1 = nu1 * z.y - z.p * nu2 * rate1 + nu1 * rate2;
    let t2 = nu2 * z.y + z.p * nu2 * rate1 - nu1 * rate2;
    if t2 <= 0.0 {
        Regime::OnlyGood1
    } else if t1 <= 0.0 {
        Regime::OnlyGood2
    } else {
        Regime::Interior
    }
}
