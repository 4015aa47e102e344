//! Posterior filtering of per-segment taste distributions: prior draws are
//! discretized onto a fixed grid and pushed onto the set of weight vectors
//! satisfying the observed first-order conditions, by alternating
//! closed-form least-squares projections. The mass clipped away by the
//! non-negativity adjustment is tracked as a bounded-rationality ratio.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bayes::{stick_breaking_draw, BayesError, Hyperparameter};
use crate::core::{
    Bundle, DomainError, GridDistribution, OneDimSpec, PanelObservation, Regime, TasteSpec,
};
use crate::numeric::derive_seed;
use crate::panel::ModelKind;
use crate::sara::{SaraError, SaraModel};
use crate::ssf::{SsfError, SsfModel};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Bayes(#[from] BayesError),
    #[error(transparent)]
    Sara(#[from] SaraError),
    #[error(transparent)]
    Ssf(#[from] SsfError),
    #[error("observation {0} is not interior; restrictions need both quantities and the price")]
    NonInterior(usize),
    #[error("{rows} restriction rows cannot be solved on a {grid}-point grid")]
    TooManyRestrictions { rows: usize, grid: usize },
    #[error("constraint system is numerically singular")]
    Singular,
    #[error("invalid filter configuration: {0}")]
    BadConfig(String),
}

/// Discretization grid: `count` log-spaced support points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub count: usize,
    pub log_lo: f64,
    pub log_hi: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { count: 500, log_lo: -10.0, log_hi: 10.0 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.count < 2 {
            return Err(FilterError::BadConfig("grid needs at least 2 points".into()));
        }
        if !(self.log_lo.is_finite() && self.log_hi.is_finite() && self.log_lo < self.log_hi) {
            return Err(FilterError::BadConfig("grid log-range must be a finite interval".into()));
        }
        Ok(())
    }

    pub fn atoms(&self) -> Vec<f64> {
        let step = (self.log_hi - self.log_lo) / (self.count - 1) as f64;
        (0..self.count).map(|i| (self.log_lo + i as f64 * step).exp()).collect()
    }

    /// Weight vector over the grid: each atom's mass moves to the nearest
    /// grid point in log space, clamped at the range ends.
    /// Each atom's mass is split between the two bracketing grid points in
    /// proportion to log-distance; atoms outside the range collapse onto the
    /// nearest endpoint. Splitting keeps smooth functionals of the
    /// distribution accurate to second order in the grid spacing.
    pub fn discretize(&self, dist: &GridDistribution) -> Vec<f64> {
        let step = (self.log_hi - self.log_lo) / (self.count - 1) as f64;
        let mut w = vec![0.0; self.count];
        for (a, m) in dist.atoms().iter().zip(dist.weights()) {
            let t = (a.ln() - self.log_lo) / step;
            if t <= 0.0 {
                w[0] += m;
            } else if t >= (self.count - 1) as f64 {
                w[self.count - 1] += m;
            } else {
                let lo = t.floor() as usize;
                let frac = t - lo as f64;
                w[lo] += m * (1.0 - frac);
                w[lo + 1] += m * frac;
            }
        }
        w
    }
}

fn default_draws() -> u32 {
    100
}

fn default_max_steps() -> u32 {
    500
}

fn default_tol() -> f64 {
    1e-9
}

fn default_ridge_scale() -> f64 {
    1e-8
}

fn default_clip() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    #[serde(default)]
    pub grid: GridSpec,
    /// Prior draws filtered and averaged per segment.
    #[serde(default = "default_draws")]
    pub draws: u32,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    /// Convergence tolerance on the max-abs weight change per alternation.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Ridge added to the projection normal matrix, as a fraction of its
    /// mean diagonal.
    #[serde(default = "default_ridge_scale")]
    pub ridge_scale: f64,
    /// Clip negative weights to zero and renormalize after each step.
    /// Disabling this exposes the raw alternation, mainly for diagnostics.
    #[serde(default = "default_clip")]
    pub clip: bool,
    pub prior: Hyperparameter,
    /// Stick-breaking truncation for the prior draws.
    pub truncation: usize,
    pub model: ModelKind,
    pub seed: u64,
    #[serde(default)]
    pub test_bundles: Vec<Bundle>,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        self.grid.validate()?;
        if self.draws == 0 || self.max_steps == 0 {
            return Err(FilterError::BadConfig("draws and max_steps must be at least 1".into()));
        }
        if !(self.tol > 0.0) || !(self.ridge_scale >= 0.0) {
            return Err(FilterError::BadConfig(
                "tolerance must be positive and the ridge scale non-negative".into(),
            ));
        }
        if self.truncation == 0 {
            return Err(FilterError::BadConfig("truncation must be at least 1".into()));
        }
        self.prior.validate()?;
        self.model.validate().map_err(|e| FilterError::BadConfig(e.to_string()))?;
        for b in &self.test_bundles {
            Bundle::new(b.x1, b.x2)?;
        }
        Ok(())
    }
}

/// Restriction rows for one side of the bilinear system, plus the trailing
/// unit-mass row. Rows are scaled to unit max-abs.
#[derive(Debug, Clone)]
pub struct MrsConstraintSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Good1,
    Good2,
}

/// Interior rows of a segment, with per-observation exponential tables over
/// a fixed column grid so the constraint matrix can be refilled cheaply as
/// the opposite side's weights move.
struct SegmentTables {
    n: usize,
    cols: usize,
    prices: Vec<f64>,
    /// e1[r*cols + j] = exp(-g_j x1_r); e1a additionally carries the g_j
    /// factor. e2/e2a are the same tables in x2.
    e1: Vec<f64>,
    e1a: Vec<f64>,
    e2: Vec<f64>,
    e2a: Vec<f64>,
}

impl SegmentTables {
    fn new(obs: &[&PanelObservation], grid1: &[f64], grid2: &[f64]) -> Result<Self, FilterError> {
        let n = obs.len();
        let cols = grid1.len();
        debug_assert_eq!(grid2.len(), cols);
        let mut t = SegmentTables {
            n,
            cols,
            prices: Vec::with_capacity(n),
            e1: Vec::with_capacity(n * cols),
            e1a: Vec::with_capacity(n * cols),
            e2: Vec::with_capacity(n * cols),
            e2a: Vec::with_capacity(n * cols),
        };
        for (r, o) in obs.iter().enumerate() {
            if o.regime != Regime::Interior || o.p.is_none() {
                return Err(FilterError::NonInterior(r));
            }
            t.prices.push(o.p.unwrap());
            for g in grid1 {
                let e = (-g * o.x1).exp();
                t.e1.push(e);
                t.e1a.push(g * e);
            }
            for g in grid2 {
                let e = (-g * o.x2).exp();
                t.e2.push(e);
                t.e2a.push(g * e);
            }
        }
        Ok(t)
    }

    /// Fills `a`/`b` with the restriction rows for `side` given the other
    /// side's current weights, then the unit-mass row.
    fn fill(&self, side: Side, other: &DVector<f64>, a: &mut DMatrix<f64>, b: &mut DVector<f64>) {
        debug_assert_eq!(a.nrows(), self.n + 1);
        debug_assert_eq!(a.ncols(), self.cols);
        for r in 0..self.n {
            let lo = r * self.cols;
            let hi = lo + self.cols;
            let p = self.prices[r];
            // Expectations under the frozen side; direct sums are safe here
            // because every table entry lies in [0, max_atom].
            let (own, own_a, mut lvl, mut drv) = match side {
                Side::Good1 => (&self.e1[lo..hi], &self.e1a[lo..hi], 0.0, 0.0),
                Side::Good2 => (&self.e2[lo..hi], &self.e2a[lo..hi], 0.0, 0.0),
            };
            let (oth, oth_a) = match side {
                Side::Good1 => (&self.e2[lo..hi], &self.e2a[lo..hi]),
                Side::Good2 => (&self.e1[lo..hi], &self.e1a[lo..hi]),
            };
            for ((w, t), ta) in other.iter().zip(oth).zip(oth_a) {
                lvl += w * t;
                drv += w * ta;
            }
            let mut maxabs = 0.0f64;
            for j in 0..self.cols {
                // Good 1 rows: e^{-g x1}(g*E[e^{-A2 x2}] - p*E[A2 e^{-A2 x2}]).
                // Good 2 rows swap which side carries the taste factor.
                let v = match side {
                    Side::Good1 => own_a[j] * lvl - p * own[j] * drv,
                    Side::Good2 => own[j] * drv - p * own_a[j] * lvl,
                };
                a[(r, j)] = v;
                maxabs = maxabs.max(v.abs());
            }
            if maxabs > 0.0 {
                for j in 0..self.cols {
                    a[(r, j)] /= maxabs;
                }
            }
            b[r] = 0.0;
        }
        for j in 0..self.cols {
            a[(self.n, j)] = 1.0;
        }
        b[self.n] = 1.0;
    }
}

/// Restriction system for one side of the risk-aversion model: row r states
/// that the marginal-rate condition at interior observation r holds under
/// the weights being solved for, given the other good's distribution.
pub fn build_constraints(
    obs: &[PanelObservation],
    grid: &[f64],
    pi_other: &GridDistribution,
    side: Side,
) -> Result<MrsConstraintSystem, FilterError> {
    let refs: Vec<&PanelObservation> = obs.iter().collect();
    let n = refs.len();
    if n + 1 > grid.len() {
        return Err(FilterError::TooManyRestrictions { rows: n, grid: grid.len() });
    }
    let (grid1, grid2): (&[f64], &[f64]) = match side {
        Side::Good1 => (grid, pi_other.atoms()),
        Side::Good2 => (pi_other.atoms(), grid),
    };
    // Tables need a common column count per side; build directly instead.
    let mut a = DMatrix::zeros(n + 1, grid.len());
    let mut b = DVector::zeros(n + 1);
    for (r, o) in refs.iter().enumerate() {
        if o.regime != Regime::Interior || o.p.is_none() {
            return Err(FilterError::NonInterior(r));
        }
        let p = o.p.unwrap();
        let (own_x, oth_x) = match side {
            Side::Good1 => (o.x1, o.x2),
            Side::Good2 => (o.x2, o.x1),
        };
        let oth_grid = match side {
            Side::Good1 => grid2,
            Side::Good2 => grid1,
        };
        let mut lvl = 0.0;
        let mut drv = 0.0;
        for (g, w) in oth_grid.iter().zip(pi_other.weights()) {
            let e = (-g * oth_x).exp();
            lvl += w * e;
            drv += w * g * e;
        }
        let mut maxabs = 0.0f64;
        for (j, g) in grid.iter().enumerate() {
            let e = (-g * own_x).exp();
            let v = match side {
                Side::Good1 => g * e * lvl - p * e * drv,
                Side::Good2 => e * drv - p * g * e * lvl,
            };
            a[(r, j)] = v;
            maxabs = maxabs.max(v.abs());
        }
        if maxabs > 0.0 {
            for j in 0..grid.len() {
                a[(r, j)] /= maxabs;
            }
        }
    }
    for j in 0..grid.len() {
        a[(n, j)] = 1.0;
    }
    b[n] = 1.0;
    Ok(MrsConstraintSystem { a, b })
}

/// Restriction system for the safety-first model. The marginal-rate
/// condition is linear in the single taste distribution, so the matrix does
/// not depend on any current iterate: row r is e^{-g lambda x2_r}(1 - p_r g).
pub fn build_ssf_constraints(
    obs: &[PanelObservation],
    grid: &[f64],
    lambda: f64,
) -> Result<MrsConstraintSystem, FilterError> {
    let n = obs.len();
    if n + 1 > grid.len() {
        return Err(FilterError::TooManyRestrictions { rows: n, grid: grid.len() });
    }
    let mut a = DMatrix::zeros(n + 1, grid.len());
    let mut b = DVector::zeros(n + 1);
    for (r, o) in obs.iter().enumerate() {
        if o.regime != Regime::Interior || o.p.is_none() {
            return Err(FilterError::NonInterior(r));
        }
        let p = o.p.unwrap();
        let mut maxabs = 0.0f64;
        for (j, g) in grid.iter().enumerate() {
            let v = (-g * lambda * o.x2).exp() * (1.0 - p * g);
            a[(r, j)] = v;
            maxabs = maxabs.max(v.abs());
        }
        if maxabs > 0.0 {
            for j in 0..grid.len() {
                a[(r, j)] /= maxabs;
            }
        }
    }
    for j in 0..grid.len() {
        a[(n, j)] = 1.0;
    }
    b[n] = 1.0;
    Ok(MrsConstraintSystem { a, b })
}

/// Minimum-distance update: the closest point to `w0` satisfying Aw = b,
/// computed as w0 + A'(AA' + eps I)^{-1}(b - A w0). eps = 0 gives the exact
/// projection when AA' is well conditioned.
pub fn project(
    w0: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    eps: f64,
) -> Result<DVector<f64>, FilterError> {
    let mut aat = a * a.transpose();
    if eps > 0.0 {
        for i in 0..aat.nrows() {
            aat[(i, i)] += eps;
        }
    }
    let chol = aat.cholesky().ok_or(FilterError::Singular)?;
    let resid = b - a * w0;
    let lambda = chol.solve(&resid);
    let w = w0 + a.transpose() * lambda;
    if !w.iter().all(|v| v.is_finite()) {
        return Err(FilterError::Singular);
    }
    Ok(w)
}

/// Rank-truncated variant used inside the alternation. Near-duplicate
/// restriction rows make AA' numerically singular; a ridge keeps the solve
/// bounded but amplifies the residual along weak singular modes, and the
/// amplified error feeds back through the next refill of the constraint
/// matrix until the iterates ring at O(0.1) regardless of the data. Cutting
/// the spectrum at the same eps scale instead makes weak modes contribute
/// nothing, so a feasible anchor stays a fixed point.
fn project_truncated(
    w0: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    eps: f64,
) -> Result<DVector<f64>, FilterError> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or(FilterError::Singular)?;
    let v_t = svd.v_t.as_ref().ok_or(FilterError::Singular)?;
    let resid = b - a * w0;
    let mut y = u.transpose() * resid;
    for (i, s) in svd.singular_values.iter().enumerate() {
        y[i] = if s * s > eps { y[i] / s } else { 0.0 };
    }
    let w = w0 + v_t.transpose() * y;
    if !w.iter().all(|v| v.is_finite()) {
        return Err(FilterError::Singular);
    }
    Ok(w)
}

/// Share of negative mass in a signed weight vector: sum of negative parts
/// over sum of absolute values, 0 for the all-zero vector.
pub fn br_ratio(weights: &[f64]) -> f64 {
    let mut acc = (0.0, 0.0);
    accumulate_signs(&mut acc, weights);
    if acc.1 > 0.0 {
        acc.0 / acc.1
    } else {
        0.0
    }
}

fn accumulate_signs(acc: &mut (f64, f64), w: &[f64]) {
    for x in w {
        acc.1 += x.abs();
        if *x < 0.0 {
            acc.0 -= x;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterDiagnostics {
    pub iterations: u32,
    pub converged: bool,
    pub br1: f64,
    pub br2: Option<f64>,
    /// Pre-clip distance to the prior anchor after each alternation,
    /// ||w1 - anchor1||^2 + ||w2 - anchor2||^2.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Weights over the config grid.
    pub pi1: Vec<f64>,
    pub pi2: Option<Vec<f64>>,
    pub diagnostics: FilterDiagnostics,
}

fn clip_renorm(w: &DVector<f64>, fallback: &DVector<f64>) -> DVector<f64> {
    let mut v = w.map(|x| x.max(0.0));
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v /= s;
        v
    } else {
        fallback.clone()
    }
}

fn frob_sq(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// Filters one prior draw against a segment's interior observations.
/// The alternation projects the fixed discretized draw onto each side's
/// restriction set in turn; non-convergence within the step cap is reported
/// in the diagnostics, not as an error.
pub fn filter_segment(
    obs: &[PanelObservation],
    prior1: &GridDistribution,
    prior2: Option<&GridDistribution>,
    cfg: &FilterConfig,
) -> Result<FilterOutcome, FilterError> {
    cfg.validate()?;
    let two_sided = match cfg.model {
        ModelKind::Sara => {
            if prior2.is_none() {
                return Err(FilterError::BadConfig(
                    "the risk-aversion model filters two marginals; the second prior draw is missing".into(),
                ));
            }
            true
        }
        ModelKind::Ssf { .. } => false,
    };
    let grid = cfg.grid.atoms();
    let cols = grid.len();
    let interior: Vec<&PanelObservation> =
        obs.iter().filter(|o| o.regime == Regime::Interior).collect();
    let n = interior.len();
    if n + 1 > cols {
        return Err(FilterError::TooManyRestrictions { rows: n, grid: cols });
    }

    let anchor1 = DVector::from_vec(cfg.grid.discretize(prior1));
    let anchor2 = prior2.map(|p| DVector::from_vec(cfg.grid.discretize(p)));

    if n == 0 {
        return Ok(FilterOutcome {
            pi1: anchor1.as_slice().to_vec(),
            pi2: anchor2.map(|a| a.as_slice().to_vec()),
            diagnostics: FilterDiagnostics {
                iterations: 0,
                converged: true,
                br1: 0.0,
                br2: if two_sided { Some(0.0) } else { None },
                objective_trace: Vec::new(),
            },
        });
    }

    let mut a = DMatrix::zeros(n + 1, cols);
    let mut b = DVector::zeros(n + 1);
    let tables = if two_sided {
        Some(SegmentTables::new(&interior, &grid, &grid)?)
    } else {
        let lambda = match cfg.model {
            ModelKind::Ssf { lambda } => lambda,
            ModelKind::Sara => unreachable!(),
        };
        let sys = build_ssf_constraints(
            &interior.iter().map(|o| (*o).clone()).collect::<Vec<_>>(),
            &grid,
            lambda,
        )?;
        a = sys.a;
        b = sys.b;
        None
    };

    let mut cur1 = anchor1.clone();
    let mut cur2 = anchor2.clone();
    // BR numerators/denominators accumulate over every pre-clip projection:
    // how much mass the constraint corrections wanted below zero, summed
    // across alternation steps.
    let mut acc1 = (0.0, 0.0);
    let mut acc2 = (0.0, 0.0);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..cfg.max_steps {
        iterations += 1;
        let mut objective = 0.0;

        if let Some(t) = &tables {
            t.fill(Side::Good1, cur2.as_ref().unwrap(), &mut a, &mut b);
        }
        let eps = cfg.ridge_scale * frob_sq(&a) / (n + 1) as f64;
        let raw1 = project(&anchor1, &a, &b, eps)?;
        accumulate_signs(&mut acc1, raw1.as_slice());
        objective += (&raw1 - &anchor1).norm_squared();
        let new1 = if cfg.clip { clip_renorm(&raw1, &anchor1) } else { raw1 };

        let new2 = if let (Some(t), Some(anc2)) = (&tables, &anchor2) {
            t.fill(Side::Good2, &new1, &mut a, &mut b);
            let eps = cfg.ridge_scale * frob_sq(&a) / (n + 1) as f64;
            let raw2 = project(anc2, &a, &b, eps)?;
            accumulate_signs(&mut acc2, raw2.as_slice());
            objective += (&raw2 - anc2).norm_squared();
            Some(if cfg.clip { clip_renorm(&raw2, anc2) } else { raw2 })
        } else {
            None
        };
        trace.push(objective);

        let mut delta = (&new1 - &cur1).amax();
        if let (Some(n2), Some(c2)) = (&new2, &cur2) {
            delta = delta.max((n2 - c2).amax());
        }
        cur1 = new1;
        if new2.is_some() {
            cur2 = new2;
        }
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }

    let br1 = if acc1.1 > 0.0 { acc1.0 / acc1.1 } else { 0.0 };
    let br2 = if two_sided {
        Some(if acc2.1 > 0.0 { acc2.0 / acc2.1 } else { 0.0 })
    } else {
        None
    };
    Ok(FilterOutcome {
        pi1: cur1.as_slice().to_vec(),
        pi2: cur2.map(|v| v.as_slice().to_vec()),
        diagnostics: FilterDiagnostics { iterations, converged, br1, br2, objective_trace: trace },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MrsSample {
    pub x1: f64,
    pub x2: f64,
    /// One value per prior draw.
    pub draws: Vec<f64>,
    /// Value under the averaged posterior pair.
    pub posterior_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorSummary {
    pub segment_id: u32,
    pub pi1: GridDistribution,
    pub pi2: Option<GridDistribution>,
    pub br1: f64,
    pub br2: Option<f64>,
    pub draws: u32,
    pub converged_draws: u32,
    pub mean_iterations: f64,
    pub mrs_samples: Vec<MrsSample>,
}

fn model_on_grid(
    grid: &[f64],
    w1: &[f64],
    w2: Option<&[f64]>,
    model: ModelKind,
) -> Result<DemandOnGrid, FilterError> {
    match model {
        ModelKind::Sara => {
            let pi1 = GridDistribution::new(grid.to_vec(), w1.to_vec())?;
            let pi2 = GridDistribution::new(grid.to_vec(), w2.unwrap().to_vec())?;
            Ok(DemandOnGrid::Sara(SaraModel::new(&TasteSpec::IndependentGrids { pi1, pi2 })?))
        }
        ModelKind::Ssf { lambda } => {
            let pi1 = GridDistribution::new(grid.to_vec(), w1.to_vec())?;
            Ok(DemandOnGrid::Ssf(SsfModel::new(&TasteSpec::ExpThresholdLaplace {
                a1: OneDimSpec::Grid(pi1),
                lambda,
            })?))
        }
    }
}

enum DemandOnGrid {
    Sara(SaraModel),
    Ssf(SsfModel),
}

impl DemandOnGrid {
    fn mrs(&self, x: Bundle) -> Result<f64, FilterError> {
        match self {
            DemandOnGrid::Sara(m) => Ok(m.mrs(x)?),
            DemandOnGrid::Ssf(m) => Ok(m.mrs(x)?),
        }
    }
}

/// Full posterior for one segment: `cfg.draws` independent prior draws,
/// each filtered, averaged atomwise on the common grid. Deterministic in
/// (seed, segment id) regardless of thread count.
pub fn filter_posterior(
    obs: &[PanelObservation],
    segment_id: u32,
    cfg: &FilterConfig,
) -> Result<PosteriorSummary, FilterError> {
    cfg.validate()?;
    if obs.iter().any(|o| o.segment_id != segment_id) {
        return Err(FilterError::BadConfig(
            "observations from a different segment were passed to the filter".into(),
        ));
    }
    let grid = cfg.grid.atoms();
    let outcomes: Result<Vec<FilterOutcome>, FilterError> = (0..cfg.draws)
        .into_par_iter()
        .map(|s| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, segment_id as u64, s as u64));
            let draw1 = stick_breaking_draw(&cfg.prior.marginal(1, cfg.truncation), &mut rng)?;
            let draw2 = match cfg.model {
                ModelKind::Sara => {
                    Some(stick_breaking_draw(&cfg.prior.marginal(2, cfg.truncation), &mut rng)?)
                }
                ModelKind::Ssf { .. } => None,
            };
            filter_segment(obs, &draw1, draw2.as_ref(), cfg)
        })
        .collect();
    let outcomes = outcomes?;

    let s = outcomes.len() as f64;
    let mut mean1 = vec![0.0; grid.len()];
    let mut mean2 = outcomes[0].pi2.as_ref().map(|_| vec![0.0; grid.len()]);
    for o in &outcomes {
        for (m, w) in mean1.iter_mut().zip(&o.pi1) {
            *m += w / s;
        }
        if let (Some(m2), Some(w2)) = (&mut mean2, &o.pi2) {
            for (m, w) in m2.iter_mut().zip(w2) {
                *m += w / s;
            }
        }
    }

    let mut mrs_samples = Vec::with_capacity(cfg.test_bundles.len());
    if !cfg.test_bundles.is_empty() {
        let per_draw: Result<Vec<Vec<f64>>, FilterError> = outcomes
            .iter()
            .map(|o| {
                let m = model_on_grid(&grid, &o.pi1, o.pi2.as_deref(), cfg.model)?;
                cfg.test_bundles.iter().map(|x| m.mrs(*x)).collect()
            })
            .collect();
        let per_draw = per_draw?;
        let posterior = model_on_grid(&grid, &mean1, mean2.as_deref(), cfg.model)?;
        for (k, x) in cfg.test_bundles.iter().enumerate() {
            mrs_samples.push(MrsSample {
                x1: x.x1,
                x2: x.x2,
                draws: per_draw.iter().map(|d| d[k]).collect(),
                posterior_mean: posterior.mrs(*x)?,
            });
        }
    }

    Ok(PosteriorSummary {
        segment_id,
        pi1: GridDistribution::new(grid.clone(), mean1)?,
        pi2: match mean2 {
            Some(m) => Some(GridDistribution::new(grid.clone(), m)?),
            None => None,
        },
        br1: outcomes.iter().map(|o| o.diagnostics.br1).sum::<f64>() / s,
        br2: if outcomes[0].diagnostics.br2.is_some() {
            Some(outcomes.iter().filter_map(|o| o.diagnostics.br2).sum::<f64>() / s)
        } else {
            None
        },
        draws: cfg.draws,
        converged_draws: outcomes.iter().filter(|o| o.diagnostics.converged).count() as u32,
        mean_iterations: outcomes.iter().map(|o| o.diagnostics.iterations as f64).sum::<f64>() / s,
        mrs_samples,
    })
}

/// Bounded-rationality ratios published for this filter on retail scanner
/// data, per good, for two regional segments. The underlying panel is
/// proprietary; the values are comparison points, not reproducible targets.
pub const REFERENCE_BR: [(&str, f64, f64); 2] =
    [("California", 0.15, 0.20), ("Florida", 0.17, 0.21)];
