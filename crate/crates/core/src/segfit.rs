//! Classical segmented least-squares baseline.
//!
//! Stage 1 fits log-signal over the high-b shell (b above the threshold),
//! where the perfusion compartment has decayed away: the slope gives d and
//! the zero-b intercept gives f = 1 - exp(intercept). Stage 2 recovers d_star
//! by a golden-section line search on the full-model squared error with d and
//! f held fixed. Stage 3 polishes all three parameters jointly with a
//! bound-constrained Levenberg-Marquardt pass; without it the perfusion tail
//! that leaks into the high-b shell biases d and f beyond usable accuracy.

use crate::error::{Error, Result};
use crate::ivim::{IvimParams, SignalRecord};

/// b-value separating the perfusion-dominated from the diffusion-dominated
/// shell, s/mm^2.
pub const DEFAULT_B_THRESHOLD: f64 = 200.0;

/// Box constraints for the fit; wider than the training prior on purpose, the
/// baseline gets the whole physically plausible range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitBounds {
    pub d: (f64, f64),
    pub f: (f64, f64),
    pub d_star: (f64, f64),
}

impl Default for FitBounds {
    fn default() -> Self {
        FitBounds {
            d: (0.0, 5.0e-3),
            f: (0.0, 1.0),
            d_star: (0.0, 0.5),
        }
    }
}

impl FitBounds {
    fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.d, self.f, self.d_star] {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::invalid(format!(
                    "fit bounds must be finite with min < max, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    fn clamp(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0].clamp(self.d.0, self.d.1),
            p[1].clamp(self.f.0, self.f.1),
            p[2].clamp(self.d_star.0, self.d_star.1),
        ]
    }
}

/// Outcome of one voxel fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub params: IvimParams,
    /// Sum of squared residuals over the full schedule.
    pub sse: f64,
    /// True when the final stage reached a stationary point (or a bound);
    /// false for degenerate inputs that ended at a partial estimate.
    pub converged: bool,
    /// Line-search plus accepted refinement iterations.
    pub iterations: usize,
}

fn model(b: &[f64], p: [f64; 3]) -> Vec<f64> {
    b.iter()
        .map(|&bv| p[1] * (-bv * p[2]).exp() + (1.0 - p[1]) * (-bv * p[0]).exp())
        .collect()
}

fn sse(b: &[f64], s: &[f64], p: [f64; 3]) -> f64 {
    model(b, p)
        .iter()
        .zip(s.iter())
        .map(|(m, v)| (m - v) * (m - v))
        .sum()
}

/// Solves a 3x3 system by Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
fn solve3(a: [[f64; 3]; 3], rhs: [f64; 3]) -> Option<[f64; 3]> {
    let mut m = [[0.0; 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&a[i]);
        m[i][3] = rhs[i];
    }
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        for row in col + 1..3 {
            let factor = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= factor * m[col][k];
            }
        }
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let mut acc = m[i][3];
        for j in i + 1..3 {
            acc -= m[i][j] * x[j];
        }
        x[i] = acc / m[i][i];
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Segmented fit with the default threshold and bounds.
pub fn fit_segmented(record: &SignalRecord) -> Result<FitResult> {
    fit_segmented_with(record, DEFAULT_B_THRESHOLD, &FitBounds::default())
}

/// Segmented fit of one normalized record.
///
/// Requires at least three b-values strictly above the threshold and two at
/// or below it. Never panics on noisy input: degenerate stages fall back to
/// partial estimates flagged `converged: false`.
pub fn fit_segmented_with(
    record: &SignalRecord,
    b_threshold: f64,
    bounds: &FitBounds,
) -> Result<FitResult> {
    if !record.normalized {
        return Err(Error::invalid("segmented fit expects a normalized record"));
    }
    if !b_threshold.is_finite() || b_threshold <= 0.0 {
        return Err(Error::invalid(format!(
            "b threshold must be positive, got {b_threshold}"
        )));
    }
    bounds.validate()?;
    let b = record.schedule.values();
    let s = &record.s;
    let n_high = b.iter().filter(|&&bv| bv > b_threshold).count();
    let n_low = b.len() - n_high;
    if n_high < 3 || n_low < 2 {
        return Err(Error::invalid(format!(
            "need at least 3 b-values above and 2 at or below {b_threshold}, got {n_high} above, {n_low} below"
        )));
    }

    // Stage 1: log-linear diffusion fit on the high-b shell.
    let high: Vec<(f64, f64)> = b
        .iter()
        .zip(s.iter())
        .filter(|(&bv, &sv)| bv > b_threshold && sv > 0.0)
        .map(|(&bv, &sv)| (bv, sv.ln()))
        .collect();
    if high.len() < 3 {
        // Too many vanished samples to take logs; report the flat partial fit.
        let p = bounds.clamp([0.0, 0.0, bounds.d_star.0]);
        return Ok(FitResult {
            params: IvimParams::new(p[0], p[1], p[2]),
            sse: sse(b, s, p),
            converged: false,
            iterations: 0,
        });
    }
    let n = high.len() as f64;
    let mean_b = high.iter().map(|(bv, _)| bv).sum::<f64>() / n;
    let mean_l = high.iter().map(|(_, l)| l).sum::<f64>() / n;
    let sxx: f64 = high.iter().map(|(bv, _)| (bv - mean_b) * (bv - mean_b)).sum();
    let sxy: f64 = high
        .iter()
        .map(|(bv, l)| (bv - mean_b) * (l - mean_l))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_l - slope * mean_b;
    let mut p = bounds.clamp([-slope, 1.0 - intercept.exp(), bounds.d_star.0]);

    // Stage 2: golden-section search for d_star with d and f fixed.
    let mut iterations = 0usize;
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = bounds.d_star;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = sse(b, s, [p[0], p[1], x1]);
    let mut f2 = sse(b, s, [p[0], p[1], x2]);
    for _ in 0..80 {
        iterations += 1;
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = sse(b, s, [p[0], p[1], x1]);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = sse(b, s, [p[0], p[1], x2]);
        }
    }
    p[2] = 0.5 * (lo + hi);

    // Stage 3: joint bounded Levenberg-Marquardt refinement.
    let mut cost = sse(b, s, p);
    let mut lambda = 1e-3;
    let mut converged = false;
    for _ in 0..100 {
        let m = model(b, p);
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (i, &bv) in b.iter().enumerate() {
            let ed = (-bv * p[0]).exp();
            let es = (-bv * p[2]).exp();
            let row = [-(1.0 - p[1]) * bv * ed, es - ed, -p[1] * bv * es];
            let r = m[i] - s[i];
            for j in 0..3 {
                jtr[j] += row[j] * r;
                for k in 0..3 {
                    jtj[j][k] += row[j] * row[k];
                }
            }
        }
        let grad_inf = jtr.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if grad_inf < 1e-12 * (1.0 + cost) {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = jtj;
            for j in 0..3 {
                damped[j][j] += lambda * jtj[j][j].max(1e-12);
            }
            let Some(delta) = solve3(damped, [-jtr[0], -jtr[1], -jtr[2]]) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = bounds.clamp([p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]]);
            let new_cost = sse(b, s, candidate);
            if new_cost.is_finite() && new_cost < cost {
                let gain = cost - new_cost;
                p = candidate;
                cost = new_cost;
                lambda = (lambda / 3.0).max(1e-12);
                iterations += 1;
                accepted = true;
                if gain <= 1e-14 * (1.0 + cost) {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent direction left at this scale; treat as stationary.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    Ok(FitResult {
        params: IvimParams::new(p[0], p[1], p[2]),
        sse: cost,
        converged,
        iterations,
    })
}
