//! Randomized cross-checks of the fast solvers against the exact ones.
//!
//! Used by `skim oracle-check`. Each trial draws one k-means instance, one
//! convex and one arbitrary error matrix, and one small scaling problem.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::allocation::{allocate_dp_oracle, allocate_greedy, allocation_error, AllocInit, BitAllocation, ErrorMatrix};
use crate::calibration::{HessianProxy, Sensitivity};
use crate::error::Result;
use crate::kmeans1d::{kmeans_exact_dp, kmeans_lloyd, KmeansConfig};
use crate::matrix::Matrix;
use crate::scaling::{compute_labels, loss_and_grad, ScalingVector};

/// Relative tolerance for calling a Lloyd objective equal to the optimum.
pub const KMEANS_MATCH_TOL: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSummary {
    pub trials: usize,
    pub kmeans_exact: usize,
    /// Trials where Lloyd beat the exact solver; always a bug.
    pub kmeans_violations: usize,
    pub kmeans_worst_gap: f64,
    pub convex_mismatches: usize,
    /// Arbitrary matrices where DP was worse than greedy at equal budget.
    pub alloc_violations: usize,
    /// Relative greedy-over-DP gaps on arbitrary matrices, sorted.
    pub alloc_gaps: Vec<f64>,
    pub grad_max_rel_err: f64,
}

impl OracleSummary {
    pub fn passed(&self) -> bool {
        self.kmeans_violations == 0
            && self.convex_mismatches == 0
            && self.alloc_violations == 0
            && self.grad_max_rel_err < GRAD_TOL
    }

    pub fn gap_quantile(&self, q: f64) -> f64 {
        if self.alloc_gaps.is_empty() {
            return 0.0;
        }
        let idx = ((self.alloc_gaps.len() - 1) as f64 * q).round() as usize;
        self.alloc_gaps[idx]
    }
}

/// Per-row errors whose successive reductions are non-increasing.
pub fn random_convex_errors(rng: &mut ChaCha8Rng, n: usize, b_min: u8, b_max: u8) -> Result<ErrorMatrix> {
    let widths = (b_max - b_min + 1) as usize;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let mut gains: Vec<f64> = (1..widths).map(|_| rng.random_range(0.0..1.0)).collect();
            gains.sort_by(|a, b| b.total_cmp(a));
            let mut e = rng.random_range(0.5..2.0) + gains.iter().sum::<f64>();
            let mut row = vec![e];
            for d in gains {
                e -= d;
                row.push(e);
            }
            row
        })
        .collect();
    ErrorMatrix::from_rows(b_min, b_max, &rows)
}

pub fn random_arbitrary_errors(rng: &mut ChaCha8Rng, n: usize, b_min: u8, b_max: u8) -> Result<ErrorMatrix> {
    let widths = (b_max - b_min + 1) as usize;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..widths).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    ErrorMatrix::from_rows(b_min, b_max, &rows)
}

/// Largest relative deviation between the analytic gradient and central
/// differences on a random instance with one-bit rows. Needs `m >= 3` so
/// that some cluster holds more than one column and the loss is not zero.
pub fn gradient_check(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Result<f64> {
    let w = Matrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
    let g = Sensitivity::new(Matrix::from_fn(n, m, |_, _| rng.random_range(0.1..1.0)))?;
    let x = Matrix::from_fn(m, m + 2, |_, _| rng.random_range(-1.0..1.0));
    let h = HessianProxy::new(x.gram())?;
    let alloc = BitAllocation::uniform(n, 1);
    let alpha = ScalingVector::new((0..m).map(|_| rng.random_range(0.5..2.0)).collect())?;
    let labels = compute_labels(&w, &alpha, &g, &alloc, &KmeansConfig::default())?;
    let (loss, grad) = loss_and_grad(&w, &labels, &g, &h, &alpha)?;
    let scale = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut worst = 0.0f64;
    for p in 0..m {
        let step = 1e-5 * alpha.as_slice()[p];
        let mut up = alpha.as_slice().to_vec();
        let mut dn = up.clone();
        up[p] += step;
        dn[p] -= step;
        let lu = loss_and_grad(&w, &labels, &g, &h, &ScalingVector::new(up)?)?.0;
        let ld = loss_and_grad(&w, &labels, &g, &h, &ScalingVector::new(dn)?)?.0;
        let fd = (lu - ld) / (2.0 * step);
        // Rounding in lu - ld leaves about eps·loss/step of noise in fd.
        let noise = 1e4 * f64::EPSILON * loss / step;
        let denom = fd.abs().max(grad[p].abs()).max(1e-6 * scale).max(noise).max(f64::MIN_POSITIVE);
        worst = worst.max((fd - grad[p]).abs() / denom);
    }
    Ok(worst)
}

pub fn run_oracle_suite(seed: u64, trials: usize) -> Result<OracleSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = OracleSummary {
        trials,
        kmeans_exact: 0,
        kmeans_violations: 0,
        kmeans_worst_gap: 0.0,
        convex_mismatches: 0,
        alloc_violations: 0,
        alloc_gaps: Vec::with_capacity(trials),
        grad_max_rel_err: 0.0,
    };
    for t in 0..trials {
        let m = rng.random_range(1..=64);
        let k = rng.random_range(1..=8);
        let values: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let dp = kmeans_exact_dp(&values, &weights, k)?.objective;
        let lloyd = kmeans_lloyd(&values, &weights, k, seed.wrapping_add(t as u64), 10)?.objective;
        let slack = KMEANS_MATCH_TOL * dp.abs().max(1e-300);
        if dp > lloyd + slack {
            s.kmeans_violations += 1;
        }
        if lloyd <= dp + slack {
            s.kmeans_exact += 1;
        } else {
            s.kmeans_worst_gap = s.kmeans_worst_gap.max((lloyd - dp) / dp);
        }

        let n = rng.random_range(1..=64);
        // Integral totals keep the two budgets identical.
        let total = rng.random_range(2 * n..=4 * n);
        let bit = total as f64 / n as f64;
        let convex = random_convex_errors(&mut rng, n, 2, 4)?;
        let g = allocation_error(&convex, &allocate_greedy(&convex, bit, AllocInit::Min)?)?;
        let d = allocation_error(&convex, &allocate_dp_oracle(&convex, bit)?)?;
        if (g - d).abs() > 1e-12 * d.abs().max(1.0) {
            s.convex_mismatches += 1;
        }

        let arbitrary = random_arbitrary_errors(&mut rng, n, 2, 4)?;
        let g = allocation_error(&arbitrary, &allocate_greedy(&arbitrary, bit, AllocInit::Min)?)?;
        let d = allocation_error(&arbitrary, &allocate_dp_oracle(&arbitrary, bit)?)?;
        if d > g + 1e-12 * g.abs().max(1.0) {
            s.alloc_violations += 1;
        }
        s.alloc_gaps.push(if d > 0.0 { (g - d) / d } else { 0.0 });

        let (gn, gm) = (rng.random_range(1..=8), rng.random_range(3..=12));
        s.grad_max_rel_err = s.grad_max_rel_err.max(gradient_check(&mut rng, gn, gm)?);
    }
    s.alloc_gaps.sort_by(f64::total_cmp);
    Ok(s)
}
