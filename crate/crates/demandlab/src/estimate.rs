//! Hyperparameter estimation by simulated method of moments: panel moments
//! are matched against moments of panels re-simulated at candidate
//! hyperparameters, with common random numbers across candidates so the
//! objective is a deterministic function of the candidate alone.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bayes::Hyperparameter;
use crate::core::{DomainError, PanelObservation, Regime};
use crate::panel::{simulate_panel, PanelConfig, PanelError};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("moment {0} has no observations in its base")]
    EmptyMomentBase(&'static str),
    #[error("cannot compute moments of an empty panel")]
    EmptyPanel,
    #[error("invalid estimation configuration: {0}")]
    BadConfig(String),
}

/// Panel moments with enough bookkeeping to build a weighting matrix:
/// each entry carries its sampling variance and base size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentVector {
    pub labels: Vec<&'static str>,
    pub values: Vec<f64>,
    /// Variance of each estimate (statistic variance over its base size).
    pub variances: Vec<f64>,
    pub counts: Vec<usize>,
}

impl MomentVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, label: &str) -> Option<f64> {
        self.labels.iter().position(|l| *l == label).map(|i| self.values[i])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize(label: &'static str, stats: &[f64]) -> Result<(f64, f64), EstimateError> {
    if stats.is_empty() {
        return Err(EstimateError::EmptyMomentBase(label));
    }
    let n = stats.len() as f64;
    let m = mean(stats);
    let spread = stats.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / n;
    Ok((m, spread / n))
}

/// The default moment list. Marginal moments run over observations with any
/// positive consumption; moments touching the price need both quantities
/// positive for the price to be observed at all; budget moments need only
/// the second quantity positive.
pub fn compute_moments(panel: &[PanelObservation]) -> Result<MomentVector, EstimateError> {
    if panel.is_empty() {
        return Err(EstimateError::EmptyPanel);
    }
    for o in panel {
        o.validate()?;
    }
    let positive: Vec<&PanelObservation> =
        panel.iter().filter(|o| o.regime != Regime::BothZero).collect();
    let interior: Vec<&PanelObservation> =
        panel.iter().filter(|o| o.regime == Regime::Interior).collect();
    let budget_seen: Vec<&PanelObservation> = panel.iter().filter(|o| o.x2 > 0.0).collect();

    let mut out = MomentVector {
        labels: Vec::new(),
        values: Vec::new(),
        variances: Vec::new(),
        counts: Vec::new(),
    };
    let mut add = |label: &'static str, stats: Vec<f64>| -> Result<(), EstimateError> {
        let (value, variance) = summarize(label, &stats)?;
        out.labels.push(label);
        out.values.push(value);
        out.variances.push(variance);
        out.counts.push(stats.len());
        Ok(())
    };

    let x1_pos: Vec<f64> = positive.iter().map(|o| o.x1).collect();
    let x2_pos: Vec<f64> = positive.iter().map(|o| o.x2).collect();
    add("mean_x1", x1_pos.clone())?;
    let m1 = mean(&x1_pos);
    add("var_x1", x1_pos.iter().map(|x| (x - m1) * (x - m1)).collect())?;
    add("mean_x2", x2_pos.clone())?;
    let m2 = mean(&x2_pos);
    add("var_x2", x2_pos.iter().map(|x| (x - m2) * (x - m2)).collect())?;

    // Masking guarantees both y and p on interior rows and y wherever x2 > 0;
    // rows were validated above.
    let int: Vec<(f64, f64, f64, f64)> =
        interior.iter().map(|o| (o.x1, o.x2, o.y.unwrap(), o.p.unwrap())).collect();
    add("logx1_logp", int.iter().map(|(x1, _, _, p)| x1.ln() * p.ln()).collect())?;
    add("logx2_logp", int.iter().map(|(_, x2, _, p)| x2.ln() * p.ln()).collect())?;
    add("logx1_logy", int.iter().map(|(x1, _, y, _)| x1.ln() * y.ln()).collect())?;
    add("logx2_logy", int.iter().map(|(_, x2, y, _)| x2.ln() * y.ln()).collect())?;
    add("x1_p", int.iter().map(|(x1, _, _, p)| x1 * p).collect())?;
    add("x2_p", int.iter().map(|(_, x2, _, p)| x2 * p).collect())?;
    add("x1_logp", int.iter().map(|(x1, _, _, p)| x1 * p.ln()).collect())?;
    add("x2_logp", int.iter().map(|(_, x2, _, p)| x2 * p.ln()).collect())?;

    let bud: Vec<(f64, f64, f64)> =
        budget_seen.iter().map(|o| (o.x1, o.x2, o.y.unwrap())).collect();
    add("x1_y", bud.iter().map(|(x1, _, y)| x1 * y).collect())?;
    add("x2_y", bud.iter().map(|(_, x2, y)| x2 * y).collect())?;
    add("x1_logy", bud.iter().map(|(x1, _, y)| x1 * y.ln()).collect())?;
    add("x2_logy", bud.iter().map(|(_, x2, y)| x2 * y.ln()).collect())?;

    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Diagonal of inverse sampling variances of the data moments.
    #[default]
    InverseVariance,
    Identity,
}

pub(crate) fn weight_vector(data: &MomentVector, weighting: Weighting) -> Vec<f64> {
    match weighting {
        Weighting::Identity => vec![1.0; data.len()],
        Weighting::InverseVariance => {
            data.variances.iter().map(|v| 1.0 / v.max(1e-12)).collect()
        }
    }
}

pub(crate) fn weighted_ssd(data: &[f64], sim: &[f64], weights: &[f64]) -> f64 {
    data.iter()
        .zip(sim)
        .zip(weights)
        .map(|((d, s), w)| w * (d - s) * (d - s))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsmConfig {
    /// Search box, componentwise over (mu1, sigma1, c1, mu2, sigma2, c2).
    pub lower: [f64; 6],
    pub upper: [f64; 6],
    pub budget: u32,
    #[serde(default)]
    pub weighting: Weighting,
    /// Panel shape re-simulated at every candidate. Its `theta` is replaced
    /// by the candidate; its `seed` is the common-random-number seed shared
    /// by all evaluations. The shape need not match the data panel.
    pub simulation: PanelConfig,
    pub search_seed: u64,
}

impl MsmConfig {
    pub fn validate(&self) -> Result<(), EstimateError> {
        if self.budget == 0 {
            return Err(EstimateError::BadConfig("search budget must be at least 1".into()));
        }
        for j in 0..6 {
            if !(self.lower[j].is_finite() && self.upper[j].is_finite() && self.lower[j] <= self.upper[j]) {
                return Err(EstimateError::BadConfig(format!(
                    "box component {j} is not a finite ordered interval"
                )));
            }
        }
        for j in [1usize, 2, 4, 5] {
            if self.lower[j] <= 0.0 {
                return Err(EstimateError::BadConfig(
                    "spread and concentration bounds must be positive".into(),
                ));
            }
        }
        self.simulation.validate()?;
        Ok(())
    }
}

/// Weighted squared distance between the data moments and moments simulated
/// at `theta` under the config's fixed seed. A candidate whose panel leaves
/// some moment without a base cannot match the data, so it scores +inf
/// rather than aborting the search.
pub fn msm_objective(
    theta: Hyperparameter,
    data: &MomentVector,
    cfg: &MsmConfig,
) -> Result<f64, EstimateError> {
    let mut sim_cfg = cfg.simulation;
    sim_cfg.theta = theta;
    let sim = simulate_panel(&sim_cfg)?;
    match compute_moments(&sim.observations) {
        Ok(sim_moments) => {
            debug_assert_eq!(sim_moments.labels, data.labels);
            let w = weight_vector(data, cfg.weighting);
            Ok(weighted_ssd(&data.values, &sim_moments.values, &w))
        }
        Err(EstimateError::EmptyMomentBase(_)) | Err(EstimateError::EmptyPanel) => {
            Ok(f64::INFINITY)
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MsmReport {
    pub theta_hat: Hyperparameter,
    pub objective: f64,
    /// Objective at every candidate, in sampling order.
    pub trace: Vec<f64>,
    /// False when no candidate after the first beat the first.
    pub improved: bool,
    pub search_seed: u64,
    pub simulation_seed: u64,
    pub moment_labels: Vec<&'static str>,
    pub data_moments: Vec<f64>,
}

/// Uniform random search over the box: candidates are drawn up front from
/// the search seed, scored independently (in parallel), and the first
/// minimum in sampling order wins.
pub fn estimate_theta(
    panel: &[PanelObservation],
    cfg: &MsmConfig,
) -> Result<MsmReport, EstimateError> {
    cfg.validate()?;
    let data = compute_moments(panel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.search_seed);
    let candidates: Vec<Hyperparameter> = (0..cfg.budget)
        .map(|_| {
            let mut a = [0.0f64; 6];
            for (j, slot) in a.iter_mut().enumerate() {
                let u: f64 = rng.gen();
                *slot = cfg.lower[j] + u * (cfg.upper[j] - cfg.lower[j]);
            }
            Hyperparameter::from_array(a)
        })
        .collect();
    let trace: Result<Vec<f64>, EstimateError> = candidates
        .par_iter()
        .map(|theta| msm_objective(*theta, &data, cfg))
        .collect();
    let trace = trace?;
    let mut best = 0usize;
    for (i, v) in trace.iter().enumerate() {
        if *v < trace[best] {
            best = i;
        }
    }
    Ok(MsmReport {
        theta_hat: candidates[best],
        objective: trace[best],
        improved: best != 0 && trace[best] < trace[0],
        trace,
        search_seed: cfg.search_seed,
        simulation_seed: cfg.simulation.seed,
        moment_labels: data.labels.clone(),
        data_moments: data.values.clone(),
    })
}

/// Hyperparameter point estimate published for this demand system on retail
/// scanner data. The underlying panel is proprietary, so the value serves
/// as a comparison point in reports, not a reproducible target.
pub const REFERENCE_THETA: Hyperparameter = Hyperparameter {
    mu1: 0.7987,
    sigma1: 3.5516,
    c1: 45.0951,
    mu2: 0.1201,
    sigma2: 3.6597,
    c2: 3.5544,
};
