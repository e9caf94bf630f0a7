//! Per-row bit allocation under an average-bit budget.
//!
//! The error of every row at every candidate width is recorded once into an
//! [`ErrorMatrix`]; any target average bit can then be served from it.
//! [`allocate_greedy`] is the production allocator, [`allocate_dp_oracle`]
//! solves the same knapsack exactly for comparison.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{err_l_full, HessianProxy, Sensitivity};
use crate::error::{shape_err, Error, Result};
use crate::kmeans1d::{reconstruct_row, KmeansConfig};
use crate::matrix::Matrix;
use crate::store::Bundle;

/// Widest code the packing format supports.
pub const MAX_BITS: u8 = 8;
/// Largest `n * (b_max - b_min)` accepted by the DP oracle.
pub const DP_CELL_LIMIT: usize = 1 << 20;

/// `E[i][b - b_min]`: layer-wise error of row `i` clustered at `b` bits.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMatrix {
    b_min: u8,
    b_max: u8,
    errors: Matrix,
}

pub(crate) fn check_bit_range(b_min: u8, b_max: u8) -> Result<()> {
    if b_min < 1 || b_min > b_max || b_max > MAX_BITS {
        return Err(Error::InvalidArgument(format!(
            "bit range must satisfy 1 <= b_min <= b_max <= {MAX_BITS}, got [{b_min}, {b_max}]"
        )));
    }
    Ok(())
}

impl ErrorMatrix {
    pub fn new(b_min: u8, b_max: u8, errors: Matrix) -> Result<Self> {
        check_bit_range(b_min, b_max)?;
        if errors.cols() != (b_max - b_min + 1) as usize {
            return Err(shape_err(format!(
                "error matrix has {} columns, bit range [{b_min}, {b_max}] needs {}",
                errors.cols(),
                b_max - b_min + 1
            )));
        }
        errors.ensure_finite()?;
        if errors.as_slice().iter().any(|&e| e < 0.0) {
            return Err(Error::InvalidArgument("error matrix entries must be >= 0".into()));
        }
        Ok(ErrorMatrix { b_min, b_max, errors })
    }

    pub fn from_rows(b_min: u8, b_max: u8, rows: &[Vec<f64>]) -> Result<Self> {
        let cols = (b_max.max(b_min) - b_min + 1) as usize;
        let m = if rows.is_empty() { Matrix::zeros(0, cols) } else { Matrix::from_rows(rows)? };
        ErrorMatrix::new(b_min, b_max, m)
    }

    pub fn n(&self) -> usize {
        self.errors.rows()
    }

    pub fn b_min(&self) -> u8 {
        self.b_min
    }

    pub fn b_max(&self) -> u8 {
        self.b_max
    }

    pub fn get(&self, row: usize, bits: u8) -> f64 {
        self.errors.get(row, (bits - self.b_min) as usize)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.errors
    }

    /// Bundle with tensor `E` and metadata `b_min`, `b_max`.
    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new();
        b.push(self.errors.clone().with_name("E"));
        b.set_meta("b_min", self.b_min.to_string());
        b.set_meta("b_max", self.b_max.to_string());
        b
    }

    pub fn from_bundle(bundle: &Bundle) -> Result<Self> {
        let parse = |key: &str| -> Result<u8> {
            bundle
                .meta(key)
                .ok_or_else(|| Error::Format(format!("error bundle lacks `{key}` metadata")))?
                .parse()
                .map_err(|_| Error::Format(format!("`{key}` metadata is not a bit width")))
        };
        let e = bundle.require("E")?.clone();
        ErrorMatrix::new(parse("b_min")?, parse("b_max")?, e)
    }
}

/// Clusters every row at every width in `[b_min, b_max]` with sensitivity
/// weights and records the layer-wise error of the reconstruction.
pub fn record_error_matrix(
    w: &Matrix,
    g: &Sensitivity,
    h: &HessianProxy,
    b_min: u8,
    b_max: u8,
    kmeans: &KmeansConfig,
) -> Result<ErrorMatrix> {
    check_bit_range(b_min, b_max)?;
    if g.shape() != w.shape() {
        return Err(shape_err(format!("W is {:?} but G is {:?}", w.shape(), g.shape())));
    }
    if h.dim() != w.cols() {
        return Err(shape_err(format!("W has {} columns but H is {}x{}", w.cols(), h.dim(), h.dim())));
    }
    let rows: Vec<Vec<f64>> = (0..w.rows())
        .into_par_iter()
        .map(|i| {
            (b_min..=b_max)
                .map(|b| {
                    let res = kmeans.cluster_row(i, b, w.row(i), g.row(i))?;
                    err_l_full(w.row(i), &reconstruct_row(&res), h)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let cols = (b_max - b_min + 1) as usize;
    let data = rows.into_iter().flatten().collect();
    ErrorMatrix::new(b_min, b_max, Matrix::new(w.rows(), cols, data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocInit {
    /// Every row starts at `b_min`.
    #[default]
    Min,
    /// Every row starts at `floor(bit)`.
    Floor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitAllocation {
    pub bits: Vec<u8>,
    pub target: f64,
    /// Set when every row hit `b_max` before the budget was met.
    pub saturated: bool,
}

impl BitAllocation {
    pub fn uniform(n: usize, bits: u8) -> Self {
        BitAllocation { bits: vec![bits; n], target: bits as f64, saturated: false }
    }

    pub fn n(&self) -> usize {
        self.bits.len()
    }

    pub fn total_bits(&self) -> u64 {
        self.bits.iter().map(|&b| b as u64).sum()
    }

    pub fn average(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.total_bits() as f64 / self.bits.len() as f64
        }
    }

    /// Row counts for each width in `[b_min, b_max]`.
    pub fn histogram(&self, b_min: u8, b_max: u8) -> Vec<(u8, usize)> {
        (b_min..=b_max).map(|b| (b, self.bits.iter().filter(|&&x| x == b).count())).collect()
    }
}

fn check_target(bit: f64, b_min: u8, b_max: u8) -> Result<()> {
    if !bit.is_finite() || bit < b_min as f64 || bit > b_max as f64 {
        return Err(Error::InfeasibleBudget { bit, b_min, b_max });
    }
    Ok(())
}

// n·bit is computed in floating point; a 1e-9 slack keeps e.g. 10 × 3.2 at 32.
fn greedy_budget(n: usize, bit: f64) -> u64 {
    (n as f64 * bit - 1e-9).ceil().max(0.0) as u64
}

fn dp_budget(n: usize, bit: f64) -> u64 {
    (n as f64 * bit + 1e-9).floor().max(0.0) as u64
}

#[derive(Debug, PartialEq)]
struct Candidate {
    gain: f64,
    row: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain.total_cmp(&other.gain).then_with(|| other.row.cmp(&self.row))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Grants one bit at a time to the row with the largest error reduction
/// `E[i][b_i] - E[i][b_i + 1]` until the total reaches `n·bit`. The budget
/// is checked before each grant; ties go to the lowest row index.
pub fn allocate_greedy(e: &ErrorMatrix, bit: f64, init: AllocInit) -> Result<BitAllocation> {
    let (b_min, b_max) = (e.b_min, e.b_max);
    check_target(bit, b_min, b_max)?;
    let n = e.n();
    let start = match init {
        AllocInit::Min => b_min,
        AllocInit::Floor => (bit.floor() as u8).clamp(b_min, b_max),
    };
    let mut bits = vec![start; n];
    let mut total = start as u64 * n as u64;
    let budget = greedy_budget(n, bit);

    let gain = |row: usize, b: u8| e.get(row, b) - e.get(row, b + 1);
    let mut heap: BinaryHeap<Candidate> = (0..n)
        .filter(|_| start < b_max)
        .map(|row| Candidate { gain: gain(row, start), row })
        .collect();

    while total < budget {
        let Some(Candidate { row, .. }) = heap.pop() else { break };
        bits[row] += 1;
        total += 1;
        if bits[row] < b_max {
            heap.push(Candidate { gain: gain(row, bits[row]), row });
        }
    }
    Ok(BitAllocation { bits, target: bit, saturated: total < budget })
}

/// Exact minimiser of `Σ E[i][b_i]` subject to `Σ b_i <= floor(n·bit)`.
pub fn allocate_dp_oracle(e: &ErrorMatrix, bit: f64) -> Result<BitAllocation> {
    let (b_min, b_max) = (e.b_min, e.b_max);
    check_target(bit, b_min, b_max)?;
    let n = e.n();
    let levels = (b_max - b_min) as usize;
    let cells = n.saturating_mul(levels);
    if cells > DP_CELL_LIMIT {
        return Err(Error::ScaleGuard { what: "knapsack DP allocation", size: cells, limit: DP_CELL_LIMIT });
    }
    let cap = (dp_budget(n, bit) - b_min as u64 * n as u64).min(cells as u64) as usize;

    // best[x]: minimum error of the rows so far using exactly x extra bits
    let mut best = vec![f64::INFINITY; cap + 1];
    best[0] = 0.0;
    let mut choice = vec![0u8; n * (cap + 1)];
    for i in 0..n {
        let mut next = vec![f64::INFINITY; cap + 1];
        for x in 0..=cap {
            for t in 0..=levels.min(x) {
                let prev = best[x - t];
                if prev.is_infinite() {
                    continue;
                }
                let v = prev + e.get(i, b_min + t as u8);
                if v < next[x] {
                    next[x] = v;
                    choice[i * (cap + 1) + x] = t as u8;
                }
            }
        }
        best = next;
    }
    let mut x = (0..=cap)
        .min_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)))
        .unwrap_or(0);
    let mut bits = vec![b_min; n];
    for i in (0..n).rev() {
        let t = choice[i * (cap + 1) + x];
        bits[i] = b_min + t;
        x -= t as usize;
    }
    Ok(BitAllocation { bits, target: bit, saturated: false })
}

pub fn allocation_error(e: &ErrorMatrix, alloc: &BitAllocation) -> Result<f64> {
    if alloc.n() != e.n() {
        return Err(shape_err(format!("allocation has {} rows, error matrix {}", alloc.n(), e.n())));
    }
    let mut total = 0.0;
    for (i, &b) in alloc.bits.iter().enumerate() {
        if b < e.b_min || b > e.b_max {
            return Err(Error::InvalidArgument(format!("row {i} has {b} bits outside [{}, {}]", e.b_min, e.b_max)));
        }
        total += e.get(i, b);
    }
    Ok(total)
}
