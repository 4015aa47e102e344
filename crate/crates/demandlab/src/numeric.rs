//! Scalar numeric helpers: stabilized exponential sums, monotone root
//! finding with bracket expansion, and seed derivation.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RootError {
    #[error("no sign change found after {0} bracket expansions")]
    BracketExpansion(u32),
    #[error("objective returned a non-finite value at x = {0}")]
    NonFinite(f64),
}

/// log(sum(exp(t))) with the maximum factored out. Empty input gives -inf.
pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = terms.iter().map(|t| (t - m).exp()).sum();
    m + s.ln()
}

/// One end of a root bracket: open boundary the bracket may approach but
/// never reach, or no boundary at all.
#[derive(Debug, Clone, Copy)]
pub enum BracketEnd {
    Open(f64),
    Unbounded,
}

const MAX_EXPANSIONS: u32 = 200;

/// Root of a (weakly) decreasing function. The initial interval [lo, hi] is
/// expanded toward the bracket ends until f changes sign: doubling steps on
/// an unbounded side, geometric approach on an open boundary. Bisection then
/// narrows the interval below `xtol` (absolute).
pub fn solve_decreasing<F: FnMut(f64) -> f64>(
    mut f: F,
    mut lo: f64,
    mut hi: f64,
    lo_end: BracketEnd,
    hi_end: BracketEnd,
    xtol: f64,
) -> Result<f64, RootError> {
    let mut f_lo = checked(&mut f, lo)?;
    let mut f_hi = checked(&mut f, hi)?;

    let mut step = (hi - lo).max(1.0);
    let mut n = 0;
    while f_lo < 0.0 {
        // Root lies below lo; push lo toward its end.
        n += 1;
        if n > MAX_EXPANSIONS {
            return Err(RootError::BracketExpansion(MAX_EXPANSIONS));
        }
        hi = lo;
        f_hi = f_lo;
        lo = match lo_end {
            BracketEnd::Unbounded => {
                let next = lo - step;
                step *= 2.0;
                next
            }
            BracketEnd::Open(b) => {
                if lo <= b {
                    return Err(RootError::BracketExpansion(n));
                }
                b + 0.5 * (lo - b)
            }
        };
        f_lo = checked(&mut f, lo)?;
    }
    let mut n = 0;
    while f_hi > 0.0 {
        n += 1;
        if n > MAX_EXPANSIONS {
            return Err(RootError::BracketExpansion(MAX_EXPANSIONS));
        }
        lo = hi;
        f_lo = f_hi;
        hi = match hi_end {
            BracketEnd::Unbounded => {
                let next = hi + step;
                step *= 2.0;
                next
            }
            BracketEnd::Open(b) => {
                if hi >= b {
                    return Err(RootError::BracketExpansion(n));
                }
                b - 0.5 * (b - hi)
            }
        };
        f_hi = checked(&mut f, hi)?;
    }

    // Invariant: f(lo) >= 0 >= f(hi).
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    // Illinois false position: the stale endpoint's value is halved when the
    // same side moves twice running, which keeps both ends advancing. Every
    // third step bisects outright so the bracket width shrinks geometrically
    // no matter how the secant points land.
    let mut moved: i8 = 0;
    for i in 0..200 {
        if (hi - lo) <= xtol {
            break;
        }
        let mut x = if i % 3 == 2 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * (f_lo / (f_lo - f_hi))
        };
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
            if x <= lo || x >= hi {
                break; // interval at floating-point resolution
            }
        }
        let fx = checked(&mut f, x)?;
        if fx > 0.0 {
            lo = x;
            f_lo = fx;
            if moved == 1 {
                f_hi *= 0.5;
            }
            moved = 1;
        } else if fx < 0.0 {
            hi = x;
            f_hi = fx;
            if moved == -1 {
                f_lo *= 0.5;
            }
            moved = -1;
        } else {
            return Ok(x);
        }
    }
    Ok(0.5 * (lo + hi))
}

fn checked<F: FnMut(f64) -> f64>(f: &mut F, x: f64) -> Result<f64, RootError> {
    let v = f(x);
    if v.is_nan() {
        return Err(RootError::NonFinite(x));
    }
    Ok(v)
}

/// SplitMix64 finalizer; the standard avalanche used for stream derivation.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic per-task seed: one master seed plus two task coordinates
/// (e.g. segment index and a purpose tag) gives independent streams.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(master ^ a.wrapping_mul(0xd1342543de82ef95)) ^ b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_naive_on_moderate_terms() {
        let terms = [-1.0f64, 0.5, 2.0, -3.0];
        let naive: f64 = terms.iter().map(|t| t.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&terms) - naive).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_large_negative_shifts() {
        let terms = [-1000.0, -1001.0];
        let got = log_sum_exp(&terms);
        let want = -1000.0 + (1.0 + (-1.0f64).exp()).ln();
        assert!((got - want).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn solve_decreasing_finds_root_inside_bracket() {
        let root = solve_decreasing(|x| 2.0 - x, 0.0, 10.0, BracketEnd::Unbounded, BracketEnd::Unbounded, 1e-13).unwrap();
        assert!((root - 2.0).abs() < 1e-12);
    }

    #[test]
    fn solve_decreasing_expands_upward_and_downward() {
        let up = solve_decreasing(|x| 50.0 - x, 0.0, 1.0, BracketEnd::Unbounded, BracketEnd::Unbounded, 1e-12).unwrap();
        assert!((up - 50.0).abs() < 1e-10);
        let down = solve_decreasing(|x| -5.0 - x, 0.0, 1.0, BracketEnd::Unbounded, BracketEnd::Unbounded, 1e-12).unwrap();
        assert!((down + 5.0).abs() < 1e-10);
    }

    #[test]
    fn solve_decreasing_approaches_open_boundary() {
        // Root at x = -0.9 with a pole at the open end x = -1.
        let f = |x: f64| 1.0 / (1.0 + x) - 10.0;
        let root = solve_decreasing(f, 0.0, 1.0, BracketEnd::Open(-1.0), BracketEnd::Unbounded, 1e-13).unwrap();
        assert!((root + 0.9).abs() < 1e-11);
    }

    #[test]
    fn solve_decreasing_reports_missing_sign_change() {
        let err = solve_decreasing(|_| 1.0, 0.0, 1.0, BracketEnd::Unbounded, BracketEnd::Unbounded, 1e-12).unwrap_err();
        assert_eq!(err, RootError::BracketExpansion(MAX_EXPANSIONS));
        let err = solve_decreasing(|_| 1.0, 0.0, 1.0, BracketEnd::Unbounded, BracketEnd::Open(2.0), 1e-12).unwrap_err();
        assert!(matches!(err, RootError::BracketExpansion(_)));
    }

    #[test]
    fn derived_seeds_differ_across_tasks() {
        let s = derive_seed(42, 0, 0);
        assert_ne!(s, derive_seed(42, 1, 0));
        assert_ne!(s, derive_seed(42, 0, 1));
        assert_ne!(s, derive_seed(43, 0, 0));
        assert_eq!(s, derive_seed(42, 0, 0));
    }
}
