use demandlab::bayes::{stick_breaking_draw, Hyperparameter};
use demandlab::core::{classify_regime, GridDistribution, PanelObservation, Regime};
use demandlab::filter::{filter_segment, FilterConfig, GridSpec};
use demandlab::panel::{DesignSampler, ModelKind, SegmentModel, SegmentTruth};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn snap(dist: &GridDistribution, grid: &GridSpec) -> GridDistribution {
    let w = grid.discretize(dist);
    let atoms = grid.atoms();
    let (mut a2, mut w2) = (Vec::new(), Vec::new());
    for (a, m) in atoms.iter().zip(&w) {
        if *m > 0.0 {
            a2.push(*a);
            w2.push(*m);
        }
    }
    GridDistribution::new(a2, w2).unwrap()
}

fn simulate_on_grid(theta: Hyperparameter, truncation: usize, grid: &GridSpec, seed: u64) -> (Vec<PanelObservation>, SegmentTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pi1 = snap(&stick_breaking_draw(&theta.marginal(1, truncation), &mut rng).unwrap(), grid);
    let pi2 = snap(&stick_breaking_draw(&theta.marginal(2, truncation), &mut rng).unwrap(), grid);
    let truth = SegmentTruth { segment_id: 0, pi1, pi2: Some(pi2.clone()) };
    let model = SegmentModel::from_truth(ModelKind::Sara, &truth).unwrap();
    let sampler = DesignSampler::default();
    let mut obs = Vec::new();
    for i in 0..30u32 {
        for t in 0..4u32 {
            let z = sampler.sample(&mut rng);
            let (x, regime) = model.demand(z).unwrap();
            obs.push(PanelObservation {
                segment_id: 0,
                consumer_id: i,
                period: t,
                x1: x.x1,
                x2: x.x2,
                y: if regime == Regime::BothZero { None } else { Some(z.y) },
                p: if regime == Regime::Interior { Some(z.p) } else { None },
                regime: classify_regime(x),
            });
        }
    }
    (obs, truth)
}

fn mean_br(obs: &[PanelObservation], cfg: &FilterConfig, s_draws: u64) -> (f64, f64, f64) {
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    let mut iters = 0.0;
    for s in 0..s_draws {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
        let d1 = stick_breaking_draw(&cfg.prior.marginal(1, cfg.truncation), &mut rng).unwrap();
        let d2 = stick_breaking_draw(&cfg.prior.marginal(2, cfg.truncation), &mut rng).unwrap();
        let out = filter_segment(obs, &d1, Some(&d2), cfg).unwrap();
        b1 += out.diagnostics.br1 / s_draws as f64;
        b2 += out.diagnostics.br2.unwrap() / s_draws as f64;
        iters += out.diagnostics.iterations as f64 / s_draws as f64;
    }
    (b1, b2, iters)
}

fn contaminate(obs: &[PanelObservation], frac: f64, seed: u64) -> Vec<PanelObservation> {
    let mut rows = obs.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for o in rows.iter_mut().filter(|o| o.regime == Regime::Interior) {
        if rng.gen::<f64>() < frac {
            let y = o.y.unwrap();
            let p = o.p.unwrap();
            let share: f64 = 0.05 + 0.9 * rng.gen::<f64>();
            o.x1 = share * y / p;
            o.x2 = y - p * o.x1;
        }
    }
    rows
}

fn diagnostics() {
    use demandlab::filter::{build_constraints, Side};
    let c = 200.0;
    let theta = Hyperparameter { mu1: 0.4, sigma1: 0.35, c1: c, mu2: 0.1, sigma2: 0.3, c2: c };
    let truncation = (9.0 * (c + 1.0)) as usize;
    let grid = GridSpec { count: 120, log_lo: -10.0, log_hi: 10.0 };
    let (obs, truth) = simulate_on_grid(theta, truncation, &grid, 2042);
    let interior: Vec<PanelObservation> =
        obs.iter().filter(|o| o.regime == Regime::Interior).cloned().collect();
    let model = SegmentModel::from_truth(ModelKind::Sara, &truth).unwrap();
    for o in interior.iter().take(5) {
        let m = model.mrs(demandlab::core::Bundle { x1: o.x1, x2: o.x2 }).unwrap();
        let p = o.p.unwrap();
        println!("mrs {m:.9} p {p:.9} rel {:.2e}", (m - p).abs() / p);
    }
    // residual of the snapped truth against the side-1 system built at truth2
    let w1 = grid.discretize(&truth.pi1);
    let sys = build_constraints(&interior, &grid.atoms(), truth.pi2.as_ref().unwrap(), Side::Good1).unwrap();
    let wv = nalgebra::DVector::from_vec(w1);
    let r = &sys.a * &wv - &sys.b;
    let mut worst = 0.0f64;
    for v in r.iter() {
        worst = worst.max(v.abs());
    }
    println!("max |A1(truth2)·truth1 - b| = {worst:.3e} over {} rows", r.len());

    let cfg = FilterConfig {
        grid,
        draws: 1,
        max_steps: 4,
        tol: 1e-9,
        ridge_scale: 1e-8,
        clip: true,
        prior: theta,
        truncation,
        model: ModelKind::Sara,
        seed: 7,
        test_bundles: vec![],
    };
    let out = filter_segment(&obs, &truth.pi1, truth.pi2.as_ref(), &cfg).unwrap();
    println!(
        "truth-anchor: iters {} br ({:.4},{:.4}) trace {:?}",
        out.diagnostics.iterations,
        out.diagnostics.br1,
        out.diagnostics.br2.unwrap(),
        out.diagnostics.objective_trace
    );
}

fn main() {
    diagnostics();
    for c in [45.0, 200.0] {
        let theta = Hyperparameter { mu1: 0.4, sigma1: 0.35, c1: c, mu2: 0.1, sigma2: 0.3, c2: c };
        let truncation = (9.0 * (c + 1.0)) as usize;
        for (count, lo, hi) in [(120usize, -1.1, 1.8), (120, -10.0, 10.0)] {
            let grid = GridSpec { count, log_lo: lo, log_hi: hi };
            let (obs, truth) = simulate_on_grid(theta, truncation, &grid, 2042);
            let interior = obs.iter().filter(|o| o.regime == Regime::Interior).count();
            for scale in [1e-3, 1e-2, 1e-1, 1.0] {
                let cfg = FilterConfig {
                    grid,
                    draws: 1,
                    max_steps: 500,
                    tol: 1e-9,
                    ridge_scale: scale,
                    clip: true,
                    prior: theta,
                    truncation,
                    model: ModelKind::Sara,
                    seed: 7,
                    test_bundles: vec![],
                };
                let t0 = std::time::Instant::now();
                let tout = filter_segment(&obs, &truth.pi1, truth.pi2.as_ref(), &cfg).unwrap();
                print!(
                    "c={c} J={count} [{lo},{hi}] eps={scale:.0e} n={interior}: truth ({:.4},{:.4}) it {};",
                    tout.diagnostics.br1,
                    tout.diagnostics.br2.unwrap(),
                    tout.diagnostics.iterations
                );
                let (b1, b2, it) = mean_br(&obs, &cfg, 12);
                print!(" rat ({b1:.3},{b2:.3}) it {it:.1};");
                for frac in [0.1, 0.3, 0.5] {
                    let rows = contaminate(&obs, frac, 9);
                    let (b1, b2, _) = mean_br(&rows, &cfg, 12);
                    print!(" {:.0}% ({b1:.3},{b2:.3});", frac * 100.0);
                }
                println!(" {:.2?}", t0.elapsed());
            }
        }
    }
}
