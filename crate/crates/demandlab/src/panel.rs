//! Synthetic scanner-panel generation and panel file I/O. Each segment
//! gets a taste distribution drawn from the Dirichlet-process prior, each
//! consumer-period an exogenous design; demand is solved exactly and then
//! masked down to what a scanner would record.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::bayes::{stick_breaking_draw, BayesError, Hyperparameter};
use crate::core::{
    classify_regime, mask_observation, Bundle, Design, DomainError, GridDistribution,
    OneDimSpec, PanelObservation, Regime, TasteSpec,
};
use crate::numeric::derive_seed;
use crate::sara::{SaraError, SaraModel};
use crate::ssf::{SsfError, SsfModel};

#[derive(Debug, Error)]
pub enum PanelError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Bayes(#[from] BayesError),
    #[error(transparent)]
    Sara(#[from] SaraError),
    #[error(transparent)]
    Ssf(#[from] SsfError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: u64, msg: String },
    #[error("invalid panel configuration: {0}")]
    BadConfig(String),
}

/// Exogenous design distribution: log-normal budget and relative price,
/// each truncated above, plus a point mass of no-purchase periods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignSampler {
    pub y_mu: f64,
    pub y_sigma: f64,
    pub y_cap: f64,
    pub p_mu: f64,
    pub p_sigma: f64,
    pub p_cap: f64,
    pub zero_mass: f64,
}

impl Default for DesignSampler {
    fn default() -> Self {
        DesignSampler {
            y_mu: 0.5,
            y_sigma: 1.0,
            y_cap: 50.0,
            p_mu: 0.3,
            p_sigma: 0.8,
            p_cap: 20.0,
            zero_mass: 0.0,
        }
    }
}

impl DesignSampler {
    pub fn validate(&self) -> Result<(), PanelError> {
        if !(self.y_sigma > 0.0 && self.p_sigma > 0.0 && self.y_cap > 0.0 && self.p_cap > 0.0) {
            return Err(PanelError::BadConfig("design scales and caps must be positive".into()));
        }
        if !self.y_mu.is_finite() || !self.p_mu.is_finite() {
            return Err(PanelError::BadConfig("design locations must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.zero_mass) {
            return Err(PanelError::BadConfig(format!(
                "zero-expenditure mass must lie in [0, 1), got {}",
                self.zero_mass
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Design {
        let y = truncated_lognormal(rng, self.y_mu, self.y_sigma, self.y_cap);
        let p = truncated_lognormal(rng, self.p_mu, self.p_sigma, self.p_cap);
        Design { y, p }
    }
}

fn truncated_lognormal<R: Rng + ?Sized>(rng: &mut R, mu: f64, sigma: f64, cap: f64) -> f64 {
    use rand_distr::StandardNormal;
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let v = (mu + sigma * z).exp();
        if v > 0.0 && v <= cap {
            return v;
        }
    }
}

/// Which demand system generates the quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Sara,
    /// Safety-first demand with intake limit A2 ~ Exp(lambda); only the
    /// good-1 marginal of the prior is used.
    Ssf { lambda: f64 },
}

impl ModelKind {
    pub fn validate(&self) -> Result<(), PanelError> {
        if let ModelKind::Ssf { lambda } = self {
            if !(lambda.is_finite() && *lambda > 0.0) {
                return Err(PanelError::BadConfig(format!("lambda must be positive, got {lambda}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelConfig {
    pub segments: u32,
    pub consumers: u32,
    pub periods: u32,
    pub model: ModelKind,
    pub theta: Hyperparameter,
    #[serde(default)]
    pub design: DesignSampler,
    /// Stick-breaking truncation for each segment's taste draw.
    pub truncation: usize,
    pub seed: u64,
}

impl PanelConfig {
    pub fn validate(&self) -> Result<(), PanelError> {
        if self.segments == 0 || self.consumers == 0 || self.periods == 0 {
            return Err(PanelError::BadConfig("segments, consumers and periods must be at least 1".into()));
        }
        if self.truncation == 0 {
            return Err(PanelError::BadConfig("truncation must be at least 1".into()));
        }
        self.model.validate()?;
        self.design.validate()?;
        self.theta.validate().map_err(PanelError::Bayes)?;
        Ok(())
    }
}

/// Ground truth for one segment: the realized taste marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTruth {
    pub segment_id: u32,
    pub pi1: GridDistribution,
    /// Present for the risk-aversion model; the safety-first intake limit
    /// is parametric, so nothing is drawn for good 2.
    pub pi2: Option<GridDistribution>,
}

/// One demand system bound to a segment's realized tastes.
#[derive(Debug, Clone)]
pub enum SegmentModel {
    Sara(SaraModel),
    Ssf(SsfModel),
}

impl SegmentModel {
    pub fn from_truth(kind: ModelKind, truth: &SegmentTruth) -> Result<Self, PanelError> {
        match kind {
            ModelKind::Sara => {
                let pi2 = truth.pi2.clone().ok_or_else(|| {
                    PanelError::BadConfig("risk-aversion truth needs a second marginal".into())
                })?;
                Ok(SegmentModel::Sara(SaraModel::new(&TasteSpec::IndependentGrids {
                    pi1: truth.pi1.clone(),
                    pi2,
                })?))
            }
            ModelKind::Ssf { lambda } => Ok(SegmentModel::Ssf(SsfModel::new(
                &TasteSpec::ExpThresholdLaplace { a1: OneDimSpec::Grid(truth.pi1.clone()), lambda },
            )?)),
        }
    }

    pub fn demand(&self, z: Design) -> Result<(Bundle, Regime), PanelError> {
        match self {
            SegmentModel::Sara(m) => Ok(m.demand(z)?),
            SegmentModel::Ssf(m) => Ok(m.demand(z)?),
        }
    }

    pub fn mrs(&self, x: Bundle) -> Result<f64, PanelError> {
        match self {
            SegmentModel::Sara(m) => Ok(m.mrs(x)?),
            SegmentModel::Ssf(m) => Ok(m.mrs(x)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub observations: Vec<PanelObservation>,
    pub truth: Vec<SegmentTruth>,
}

// Stream purposes under one master seed; each (segment, purpose) pair gets
// its own generator so thread scheduling cannot reorder draws.
const STREAM_PI1: u64 = 0;
const STREAM_PI2: u64 = 1;
const STREAM_DESIGN: u64 = 2;

/// Draws a segment's taste marginals from the prior without touching the
/// design stream.
pub fn draw_segment_truth(cfg: &PanelConfig, segment_id: u32) -> Result<SegmentTruth, PanelError> {
    let mut rng1 = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, segment_id as u64, STREAM_PI1));
    let pi1 = stick_breaking_draw(&cfg.theta.marginal(1, cfg.truncation), &mut rng1)?;
    let pi2 = match cfg.model {
        ModelKind::Sara => {
            let mut rng2 =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, segment_id as u64, STREAM_PI2));
            Some(stick_breaking_draw(&cfg.theta.marginal(2, cfg.truncation), &mut rng2)?)
        }
        ModelKind::Ssf { .. } => None,
    };
    Ok(SegmentTruth { segment_id, pi1, pi2 })
}

fn simulate_segment(
    cfg: &PanelConfig,
    segment_id: u32,
) -> Result<(SegmentTruth, Vec<PanelObservation>), PanelError> {
    let truth = draw_segment_truth(cfg, segment_id)?;
    let model = SegmentModel::from_truth(cfg.model, &truth)?;
    let mut design_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, segment_id as u64, STREAM_DESIGN));
    let mut rows = Vec::with_capacity((cfg.consumers * cfg.periods) as usize);
    for consumer in 0..cfg.consumers {
        for period in 0..cfg.periods {
            let skip: f64 = design_rng.gen();
            if skip < cfg.design.zero_mass {
                rows.push(PanelObservation {
                    segment_id,
                    consumer_id: consumer,
                    period,
                    regime: Regime::BothZero,
                    x1: 0.0,
                    x2: 0.0,
                    y: None,
                    p: None,
                });
                continue;
            }
            let z = cfg.design.sample(&mut design_rng);
            let (x, _) = model.demand(z)?;
            rows.push(mask_observation(segment_id, consumer, period, x, z));
        }
    }
    Ok((truth, rows))
}

/// Simulates the full panel: per-segment taste draws, exogenous designs,
/// exact demand, observability masking. Deterministic for a fixed seed
/// regardless of thread count.
pub fn simulate_panel(cfg: &PanelConfig) -> Result<SimulatedPanel, PanelError> {
    cfg.validate()?;
    let segments: Result<Vec<_>, PanelError> = (0..cfg.segments)
        .into_par_iter()
        .map(|m| simulate_segment(cfg, m))
        .collect();
    let mut observations = Vec::new();
    let mut truth = Vec::new();
    for (t, rows) in segments? {
        truth.push(t);
        observations.extend(rows);
    }
    Ok(SimulatedPanel { observations, truth })
}

const PANEL_HEADER: [&str; 7] = ["segment_id", "consumer_id", "period", "x1", "x2", "y", "p"];

pub fn write_panel<P: AsRef<Path>>(observations: &[PanelObservation], path: P) -> Result<(), PanelError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PANEL_HEADER)?;
    for o in observations {
        w.write_record([
            o.segment_id.to_string(),
            o.consumer_id.to_string(),
            o.period.to_string(),
            o.x1.to_string(),
            o.x2.to_string(),
            o.y.map(|v| v.to_string()).unwrap_or_default(),
            o.p.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(s: &str, name: &str, line: u64) -> Result<T, PanelError> {
    s.trim().parse().map_err(|_| PanelError::Malformed {
        line,
        msg: format!("cannot parse {name} from {s:?}"),
    })
}

fn parse_optional(s: &str, name: &str, line: u64) -> Result<Option<f64>, PanelError> {
    let t = s.trim();
    if t.is_empty() {
        return Ok(None);
    }
    Ok(Some(parse_field::<f64>(t, name, line)?))
}

/// Reads a panel CSV, recomputing each row's regime from the quantities and
/// enforcing the masking invariants. Errors carry the offending line.
pub fn read_panel<P: AsRef<Path>>(path: P) -> Result<Vec<PanelObservation>, PanelError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    {
        let headers = r.headers()?;
        let got: Vec<&str> = headers.iter().collect();
        if got != PANEL_HEADER {
            return Err(PanelError::Malformed {
                line: 1,
                msg: format!("unexpected header {got:?}"),
            });
        }
    }
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != PANEL_HEADER.len() {
            return Err(PanelError::Malformed {
                line,
                msg: format!("expected {} fields, got {}", PANEL_HEADER.len(), record.len()),
            });
        }
        let x1: f64 = parse_field(&record[3], "x1", line)?;
        let x2: f64 = parse_field(&record[4], "x2", line)?;
        let obs = PanelObservation {
            segment_id: parse_field(&record[0], "segment_id", line)?,
            consumer_id: parse_field(&record[1], "consumer_id", line)?,
            period: parse_field(&record[2], "period", line)?,
            regime: classify_regime(Bundle { x1, x2 }),
            x1,
            x2,
            y: parse_optional(&record[5], "y", line)?,
            p: parse_optional(&record[6], "p", line)?,
        };
        obs.validate().map_err(|e| PanelError::Malformed { line, msg: e.to_string() })?;
        out.push(obs);
    }
    Ok(out)
}

pub fn write_truth<P: AsRef<Path>>(truth: &[SegmentTruth], path: P) -> Result<(), PanelError> {
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), truth)
        .map_err(|e| PanelError::BadConfig(format!("cannot encode truth: {e}")))?;
    Ok(())
}

pub fn read_truth<P: AsRef<Path>>(path: P) -> Result<Vec<SegmentTruth>, PanelError> {
    let f = std::fs::File::open(path)?;
    serde_json::from_reader(std::io::BufReader::new(f))
        .map_err(|e| PanelError::BadConfig(format!("cannot decode truth: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_theta() -> Hyperparameter {
        Hyperparameter { mu1: 0.4, sigma1: 0.9, c1: 8.0, mu2: 0.1, sigma2: 0.7, c2: 6.0 }
    }

    fn base_config() -> PanelConfig {
        PanelConfig {
            segments: 3,
            consumers: 10,
            periods: 4,
            model: ModelKind::Sara,
            theta: small_theta(),
            design: DesignSampler::default(),
            truncation: 60,
            seed: 99,
        }
    }

    #[test]
    fn degenerate_prior_reproduces_point_demand() {
        // A vanishing base spread pins every atom at e^mu, so demand must
        // match the degenerate-taste corner rule.
        let cfg = PanelConfig {
            segments: 1,
            consumers: 1,
            periods: 1,
            model: ModelKind::Sara,
            theta: Hyperparameter {
                mu1: 0.6,
                sigma1: 1e-9,
                c1: 5.0,
                mu2: -0.2,
                sigma2: 1e-9,
                c2: 5.0,
            },
            design: DesignSampler::default(),
            truncation: 40,
            seed: 7,
        };
        let panel = simulate_panel(&cfg).unwrap();
        assert_eq!(panel.observations.len(), 1);
        let obs = &panel.observations[0];
        let point = SaraModel::new(&TasteSpec::PointMass {
            a1: (0.6f64).exp(),
            a2: (-0.2f64).exp(),
        })
        .unwrap();
        // Recover the design the simulation used from its own stream.
        let mut design_rng = ChaCha8Rng::seed_from_u64(derive_seed(7, 0, STREAM_DESIGN));
        let _skip: f64 = design_rng.gen();
        let z = cfg.design.sample(&mut design_rng);
        let (want, _) = point.demand(z).unwrap();
        assert!((obs.x1 - want.x1).abs() < 1e-6 * want.x1.max(1.0), "{} vs {}", obs.x1, want.x1);
        assert!((obs.x2 - want.x2).abs() < 1e-6 * want.x2.max(1.0));
    }

    #[test]
    fn zero_mass_controls_both_zero_share() {
        let cfg = PanelConfig {
            segments: 4,
            consumers: 50,
            periods: 10,
            design: DesignSampler { zero_mass: 0.43, ..DesignSampler::default() },
            ..base_config()
        };
        let panel = simulate_panel(&cfg).unwrap();
        let n = panel.observations.len() as f64;
        let zeros =
            panel.observations.iter().filter(|o| o.regime == Regime::BothZero).count() as f64;
        let share = zeros / n;
        let se = (0.43 * 0.57 / n).sqrt();
        assert!((share - 0.43).abs() <= 3.0 * se, "share {share}, se {se}");
    }

    #[test]
    fn same_seed_gives_identical_panels() {
        let cfg = base_config();
        let a = simulate_panel(&cfg).unwrap();
        let b = simulate_panel(&cfg).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_panel(&a.observations, &pa).unwrap();
        write_panel(&b.observations, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let cfg = PanelConfig { segments: 6, ..base_config() };
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| simulate_panel(&cfg).unwrap());
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| simulate_panel(&cfg).unwrap());
        assert_eq!(one, four);
    }

    #[test]
    fn interior_rows_are_rational_under_true_tastes() {
        for model in [ModelKind::Sara, ModelKind::Ssf { lambda: 0.8 }] {
            let cfg = PanelConfig { model, ..base_config() };
            let panel = simulate_panel(&cfg).unwrap();
            let mut interior = 0;
            for obs in &panel.observations {
                if obs.regime != Regime::Interior {
                    continue;
                }
                interior += 1;
                let truth = &panel.truth[obs.segment_id as usize];
                let m = SegmentModel::from_truth(cfg.model, truth).unwrap();
                let mrs = m.mrs(Bundle::new(obs.x1, obs.x2).unwrap()).unwrap();
                let p = obs.p.unwrap();
                assert!((mrs - p).abs() < 1e-8 * p.max(1.0), "mrs {mrs} vs p {p}");
            }
            assert!(interior > 0, "no interior rows simulated for {model:?}");
        }
    }

    #[test]
    fn segments_are_statistically_independent() {
        let cfg = PanelConfig {
            segments: 2,
            consumers: 200,
            periods: 2,
            ..base_config()
        };
        let panel = simulate_panel(&cfg).unwrap();
        let a: Vec<f64> = panel
            .observations
            .iter()
            .filter(|o| o.segment_id == 0)
            .map(|o| o.x1)
            .collect();
        let b: Vec<f64> = panel
            .observations
            .iter()
            .filter(|o| o.segment_id == 1)
            .map(|o| o.x1)
            .collect();
        let n = a.len() as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(&b) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        let r = cov / (va.sqrt() * vb.sqrt());
        assert!(r.abs() < 3.5 / n.sqrt(), "cross-segment correlation {r}");
    }

    #[test]
    fn panel_round_trips_through_csv() {
        let cfg = PanelConfig {
            segments: 5,
            consumers: 25,
            periods: 8,
            design: DesignSampler { zero_mass: 0.2, ..DesignSampler::default() },
            ..base_config()
        };
        let panel = simulate_panel(&cfg).unwrap();
        assert_eq!(panel.observations.len(), 1000);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        write_panel(&panel.observations, &path).unwrap();
        let back = read_panel(&path).unwrap();
        assert_eq!(panel.observations, back);
    }

    #[test]
    fn truth_round_trips_through_json() {
        let cfg = base_config();
        let panel = simulate_panel(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.json");
        write_truth(&panel.truth, &path).unwrap();
        let back = read_truth(&path).unwrap();
        assert_eq!(panel.truth, back);
    }

    #[test]
    fn masking_violations_are_rejected_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        // price present without budget on data line 3
        std::fs::write(
            &path,
            "segment_id,consumer_id,period,x1,x2,y,p\n0,0,0,1.5,2.5,4.0,1.0\n0,0,1,1.5,0,,2.0\n",
        )
        .unwrap();
        match read_panel(&path) {
            Err(PanelError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected masking failure, got {other:?}"),
        }
    }

    #[test]
    fn header_only_file_is_an_empty_panel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "segment_id,consumer_id,period,x1,x2,y,p\n").unwrap();
        assert!(read_panel(&path).unwrap().is_empty());
    }

    #[test]
    fn unparseable_quantity_reports_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbled.csv");
        std::fs::write(
            &path,
            "segment_id,consumer_id,period,x1,x2,y,p\n0,0,0,oops,2.5,4.0,1.0\n",
        )
        .unwrap();
        match read_panel(&path) {
            Err(PanelError::Malformed { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("x1"));
            }
            other => panic!("expected parse failure, got {other:?}"),
        }
    }
}
