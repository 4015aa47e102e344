//! Utility engine for the stochastic safety-first family:
//! U(x) = E[min{x1 + A1 x2, A2}], a mixture of kinked linear utilities in
//! which A1 is a random relative preference and A2 a random intake limit.
//! Closed forms cover the exponential-limit case with a gamma preference;
//! a breakpoint scan handles discrete joint tastes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{Bundle, Design, DomainError, GridDistribution, Regime, TasteSpec};
use crate::numeric::{solve_decreasing, BracketEnd, RootError};
use crate::sara::{Marginal, SaraError, SaraModel};

#[derive(Debug, Error)]
pub enum SsfError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Model(#[from] SaraError),
    #[error(transparent)]
    Root(#[from] RootError),
    #[error("no taste atom stays below its intake limit at this bundle")]
    EmptyConditioning,
    #[error("the first-order condition has no root at relative price {0}")]
    InversionDomain(f64),
    #[error("{0}")]
    Unsupported(&'static str),
}

/// Discrete joint distribution over preference-limit pairs (a1, a2),
/// a1 >= 0, a2 > 0, weights a probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawJointGrid")]
pub struct JointGridDistribution {
    atoms: Vec<(f64, f64)>,
    weights: Vec<f64>,
}

#[derive(Deserialize)]
struct RawJointGrid {
    atoms: Vec<(f64, f64)>,
    weights: Vec<f64>,
}

impl TryFrom<RawJointGrid> for JointGridDistribution {
    type Error = DomainError;
    fn try_from(raw: RawJointGrid) -> Result<Self, DomainError> {
        JointGridDistribution::new(raw.atoms, raw.weights)
    }
}

impl JointGridDistribution {
    pub fn new(atoms: Vec<(f64, f64)>, weights: Vec<f64>) -> Result<Self, DomainError> {
        if atoms.is_empty() || !atoms.iter().all(|(a1, a2)| a1.is_finite() && *a1 >= 0.0 && a2.is_finite() && *a2 > 0.0)
        {
            return Err(DomainError::BadAtoms);
        }
        if atoms.len() != weights.len() {
            return Err(DomainError::LengthMismatch { atoms: atoms.len(), weights: weights.len() });
        }
        if !weights.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(DomainError::BadWeights);
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(DomainError::DegenerateMass(total));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(JointGridDistribution { atoms, weights })
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Debug, Clone)]
enum SsfKind {
    /// A2 ~ Exp(lambda) independent of A1.
    ExpThreshold { a1: Marginal, lambda: f64 },
    JointGrid(JointGridDistribution),
}

#[derive(Debug, Clone)]
pub struct SsfModel {
    kind: SsfKind,
}

impl SsfModel {
    /// Builds the exponential-limit model from a taste spec; other variants
    /// belong to the risk-aversion family.
    pub fn new(taste: &TasteSpec) -> Result<Self, SsfError> {
        taste.validate()?;
        match taste {
            TasteSpec::ExpThresholdLaplace { a1, lambda } => Ok(SsfModel {
                kind: SsfKind::ExpThreshold { a1: Marginal::from_one_dim(a1), lambda: *lambda },
            }),
            _ => Err(SsfError::Unsupported(
                "safety-first models need an exponential intake limit or an explicit joint grid",
            )),
        }
    }

    pub fn from_joint_grid(pi: JointGridDistribution) -> SsfModel {
        SsfModel { kind: SsfKind::JointGrid(pi) }
    }

    /// E[min{x1 + A1 x2, A2}].
    pub fn utility(&self, x: Bundle) -> Result<f64, SsfError> {
        match &self.kind {
            SsfKind::ExpThreshold { a1, lambda } => {
                // E[min{s, A2} | A1] = (1 - e^{-lambda s})/lambda for
                // s = x1 + A1 x2; averaging over A1 pulls in the Laplace
                // transform at lambda x2.
                let log_psi = a1.log_laplace(lambda * x.x2)?;
                Ok((1.0 - (-lambda * x.x1 + log_psi).exp()) / lambda)
            }
            SsfKind::JointGrid(pi) => Ok(pi
                .atoms
                .iter()
                .zip(&pi.weights)
                .map(|((a1, a2), w)| w * (x.x1 + a1 * x.x2).min(*a2))
                .sum()),
        }
    }

    /// 1 / E[A1 | x1 + A1 x2 < A2]: the inverse conditional mean of the
    /// relative preference among tastes still below their limit.
    pub fn mrs(&self, x: Bundle) -> Result<f64, SsfError> {
        match &self.kind {
            SsfKind::ExpThreshold { a1, lambda } => {
                // Exponential survival e^{-lambda(x1 + a x2)} tilts the A1
                // law by lambda x2; x1 drops out of the ratio.
                Ok(1.0 / a1.tilted_mean(lambda * x.x2)?)
            }
            SsfKind::JointGrid(pi) => {
                let (mut num, mut den) = (0.0, 0.0);
                for ((a1, a2), w) in pi.atoms.iter().zip(&pi.weights) {
                    if *w > 0.0 && x.x1 + a1 * x.x2 < *a2 {
                        num += w * a1;
                        den += w;
                    }
                }
                if den == 0.0 {
                    return Err(SsfError::EmptyConditioning);
                }
                Ok(den / num)
            }
        }
    }

    /// Budget-constrained demand. The interior condition equates the
    /// conditional-mean preference with 1/p; corners apply when it has no
    /// root on the budget segment.
    pub fn demand(&self, z: Design) -> Result<(Bundle, Regime), SsfError> {
        let (y, p) = (z.y, z.p);
        let cap = y / p;
        match &self.kind {
            SsfKind::ExpThreshold { a1, lambda } => {
                if let Marginal::Gamma { shape, rate } = a1 {
                    // X1* = (y - v*/lambda)/p with v* = shape p - rate.
                    let t = (shape * p - rate) / lambda;
                    return if t <= 0.0 {
                        Ok((Bundle::new(cap, 0.0)?, Regime::OnlyGood1))
                    } else if t >= y {
                        Ok((Bundle::new(0.0, y)?, Regime::OnlyGood2))
                    } else {
                        let x1 = (y - t) / p;
                        let x2 = (y - p * x1).max(0.0);
                        Ok((Bundle::new(x1, x2)?, Regime::Interior))
                    };
                }
                let inv_p = 1.0 / p;
                let m0 = a1.tilted_mean(0.0)?;
                if m0 <= inv_p {
                    return Ok((Bundle::new(cap, 0.0)?, Regime::OnlyGood1));
                }
                let m_end = a1.tilted_mean(lambda * y)?;
                if m_end >= inv_p {
                    return Ok((Bundle::new(0.0, y)?, Regime::OnlyGood2));
                }
                let f = |v: f64| a1.tilted_mean(v).map(|m| m - inv_p).unwrap_or(f64::NAN);
                let v = solve_decreasing(
                    f,
                    0.0,
                    lambda * y,
                    BracketEnd::Open(0.0),
                    BracketEnd::Open(lambda * y),
                    1e-12,
                )?;
                let x2 = v / lambda;
                let x1 = (y - x2) / p;
                let x2 = (y - p * x1).max(0.0);
                Ok((Bundle::new(x1, x2)?, Regime::Interior))
            }
            SsfKind::JointGrid(pi) => self.joint_grid_demand(pi, z),
        }
    }

    /// Along the budget line the marginal value of x1 is the step function
    /// sum_k w_k (1 - p a1_k) 1{x1 (1 - p a1_k) < a2_k - a1_k y}, which only
    /// steps down. Demand is the smallest breakpoint where it reaches zero.
    fn joint_grid_demand(&self, pi: &JointGridDistribution, z: Design) -> Result<(Bundle, Regime), SsfError> {
        let (y, p) = (z.y, z.p);
        let cap = y / p;
        let slope = |x1: f64| -> f64 {
            pi.atoms
                .iter()
                .zip(&pi.weights)
                .map(|((a1, a2), w)| {
                    let c = 1.0 - p * a1;
                    if x1 + a1 * (y - p * x1) < *a2 {
                        w * c
                    } else {
                        0.0
                    }
                })
                .sum()
        };
        let mut breaks: Vec<f64> = pi
            .atoms
            .iter()
            .filter_map(|(a1, a2)| {
                let c = 1.0 - p * a1;
                if c == 0.0 {
                    return None;
                }
                let b = (a2 - a1 * y) / c;
                (b > 0.0 && b < cap).then_some(b)
            })
            .collect();
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breaks.dedup();
        // Evaluate the slope on each open interval between breakpoints.
        let mut edges = Vec::with_capacity(breaks.len() + 2);
        edges.push(0.0);
        edges.extend_from_slice(&breaks);
        edges.push(cap);
        for i in 0..edges.len() - 1 {
            let mid = 0.5 * (edges[i] + edges[i + 1]);
            if slope(mid) <= 0.0 {
                return if i == 0 {
                    Ok((Bundle::new(0.0, y)?, Regime::OnlyGood2))
                } else {
                    let x1 = edges[i];
                    let x2 = (y - p * x1).max(0.0);
                    Ok((Bundle::new(x1, x2)?, Regime::Interior))
                };
            }
        }
        Ok((Bundle::new(cap, 0.0)?, Regime::OnlyGood1))
    }

    /// Interior demand ignoring the clamp, as a function of (y, p); used to
    /// differentiate demand without corner artifacts.
    fn unclamped_x1(&self, y: f64, p: f64) -> Result<f64, SsfError> {
        match &self.kind {
            SsfKind::ExpThreshold { a1, lambda } => {
                let v = match a1 {
                    Marginal::Gamma { shape, rate } => shape * p - rate,
                    _ => {
                        let inv_p = 1.0 / p;
                        let m0 = a1.tilted_mean(0.0)?;
                        if m0 < inv_p {
                            return Err(SsfError::InversionDomain(p));
                        }
                        let f = |v: f64| a1.tilted_mean(v).map(|m| m - inv_p).unwrap_or(f64::NAN);
                        solve_decreasing(
                            f,
                            0.0,
                            (lambda * y).max(1.0),
                            BracketEnd::Open(0.0),
                            BracketEnd::Unbounded,
                            1e-12,
                        )
                        .map_err(|_| SsfError::InversionDomain(p))?
                    }
                };
                Ok((y - v / lambda) / p)
            }
            SsfKind::JointGrid(_) => Err(SsfError::Unsupported(
                "the Slutsky coefficient needs the smooth exponential-limit demand",
            )),
        }
    }

    /// Slutsky coefficient dX1/dp + X1 dX1/dy by central finite differences
    /// (relative step 1e-5) on the unclamped interior demand; equals
    /// -shape/(lambda p) when the preference is gamma.
    pub fn slutsky_coefficient(&self, z: Design) -> Result<f64, SsfError> {
        let (y, p) = (z.y, z.p);
        let x1 = self.unclamped_x1(y, p)?;
        let dp = 1e-5 * p;
        let dy = 1e-5 * y;
        let dxdp = (self.unclamped_x1(y, p + dp)? - self.unclamped_x1(y, p - dp)?) / (2.0 * dp);
        let dxdy = (self.unclamped_x1(y + dy, p)? - self.unclamped_x1(y - dy, p)?) / (2.0 * dy);
        Ok(dxdp + x1 * dxdy)
    }
}

/// The safety-first model with unit exponential limit and preference law
/// pi2 orders bundles exactly like the risk-aversion model with a unit
/// point mass on good 1 and pi2 on good 2: both MRS values are returned
/// and must agree.
pub fn ssf_as_sara_check(pi2: &GridDistribution, x: Bundle) -> Result<(f64, f64), SsfError> {
    let ssf = SsfModel::new(&TasteSpec::ExpThresholdLaplace {
        a1: crate::core::OneDimSpec::Grid(pi2.clone()),
        lambda: 1.0,
    })?;
    let sara = SaraModel::new(&TasteSpec::IndependentGrids {
        pi1: GridDistribution::point_mass(1.0)?,
        pi2: pi2.clone(),
    })?;
    Ok((ssf.mrs(x)?, sara.mrs(x)?))
}
