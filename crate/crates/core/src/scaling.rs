//! Column scaling vector trained with cluster labels held fixed.
//!
//! Quantization with scaling reads `Wq = dequant(quant(W / α)) * α`
//! (element-wise, `α` broadcast over rows). Once the labels are fixed,
//! every centroid is a sensitivity-weighted mean of `W / α` over its
//! members, so `Wq` is a smooth function of `α` and the layer-wise loss
//! `Σ_i r_i H r_iᵀ` (with `r_i = w_i - wq_i`) can be minimised by gradient
//! descent. Labels are recomputed between outer iterations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::BitAllocation;
use crate::calibration::{quad_form, HessianProxy, Sensitivity};
use crate::error::{shape_err, Error, Result};
use crate::kmeans1d::{floor_weights, KmeansConfig};
use crate::matrix::{dot, Matrix};

pub const ALPHA_MIN: f64 = 1e-4;
pub const ALPHA_MAX: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingVector(Vec<f64>);

impl ScalingVector {
    pub fn ones(m: usize) -> Self {
        ScalingVector(vec![1.0; m])
    }

    /// Fails on entries outside `[ALPHA_MIN, ALPHA_MAX]`.
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if let Some(a) = alpha.iter().find(|a| !(ALPHA_MIN..=ALPHA_MAX).contains(*a)) {
            return Err(Error::InvalidArgument(format!(
                "scale {a} outside [{ALPHA_MIN}, {ALPHA_MAX}]"
            )));
        }
        Ok(ScalingVector(alpha))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn clamp_in_place(&mut self) {
        for a in &mut self.0 {
            *a = a.clamp(ALPHA_MIN, ALPHA_MAX);
        }
    }
}

/// Row-major `n x m` cluster labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMatrix {
    n: usize,
    m: usize,
    labels: Vec<u32>,
}

impl LabelMatrix {
    pub fn new(n: usize, m: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != n * m {
            return Err(shape_err(format!("{} labels for a {n}x{m} layer", labels.len())));
        }
        Ok(LabelMatrix { n, m, labels })
    }

    pub fn from_rows(rows: Vec<Vec<u32>>) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(shape_err("ragged label rows"));
        }
        let n = rows.len();
        LabelMatrix::new(n, m, rows.into_iter().flatten().collect())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.labels[i * self.m..(i + 1) * self.m]
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.labels[i * self.m + j]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.labels
    }

    /// Every label of row `i` must be below `2^bits[i]`.
    pub fn check_against(&self, alloc: &BitAllocation) -> Result<()> {
        if alloc.n() != self.n {
            return Err(shape_err(format!("{} label rows but {} allocated rows", self.n, alloc.n())));
        }
        for (i, &b) in alloc.bits.iter().enumerate() {
            if let Some(&l) = self.row(i).iter().find(|&&l| (l as u64) >= 1u64 << b) {
                return Err(Error::InvalidArgument(format!("row {i}: label {l} needs more than {b} bits")));
            }
        }
        Ok(())
    }
}

/// Per-row centroid lists in full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebooks {
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    /// Multiplicative learning-rate decay applied every `decay_every` steps.
    pub decay: f64,
    pub decay_every: usize,
    pub max_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            decay: 0.5,
            decay_every: 40,
            max_steps: 120,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) || self.decay_every == 0 {
            return Err(Error::InvalidArgument(format!(
                "adam needs lr > 0, 0 < decay <= 1 and decay_every > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * self.decay.powi((step / self.decay_every) as i32)
    }
}

fn check_layer(w: &Matrix, g: &Sensitivity, alpha: &ScalingVector) -> Result<()> {
    if g.shape() != w.shape() {
        return Err(shape_err(format!("W is {:?} but G is {:?}", w.shape(), g.shape())));
    }
    if alpha.len() != w.cols() {
        return Err(shape_err(format!("{} scales for {} columns", alpha.len(), w.cols())));
    }
    Ok(())
}

fn scaled_row(w: &[f64], alpha: &[f64]) -> Vec<f64> {
    w.iter().zip(alpha).map(|(x, a)| x / a).collect()
}

/// Clusters `W[i,:] / α` with weights `G[i,:]` into `2^bits[i]` groups.
pub fn compute_labels(
    w: &Matrix,
    alpha: &ScalingVector,
    g: &Sensitivity,
    alloc: &BitAllocation,
    kmeans: &KmeansConfig,
) -> Result<LabelMatrix> {
    check_layer(w, g, alpha)?;
    if alloc.n() != w.rows() {
        return Err(shape_err(format!("allocation has {} rows, W has {}", alloc.n(), w.rows())));
    }
    let rows: Vec<Vec<u32>> = (0..w.rows())
        .into_par_iter()
        .map(|i| {
            let v = scaled_row(w.row(i), alpha.as_slice());
            Ok(kmeans.cluster_row(i, alloc.bits[i], &v, g.row(i))?.labels)
        })
        .collect::<Result<_>>()?;
    LabelMatrix::new(w.rows(), w.cols(), rows.into_iter().flatten().collect())
}

/// Weighted per-label means of one scaled row, clamped into the member
/// range. Returns `(centroids, total weight per label)`.
fn row_centroids(values: &[f64], weights: &[f64], labels: &[u32]) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut sum_w = vec![0.0; k];
    let mut sum_wv = vec![0.0; k];
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    for ((&v, &wt), &l) in values.iter().zip(weights).zip(labels) {
        let l = l as usize;
        sum_w[l] += wt;
        sum_wv[l] += wt * v;
        lo[l] = lo[l].min(v);
        hi[l] = hi[l].max(v);
    }
    let mut c = Vec::with_capacity(k);
    for l in 0..k {
        // Unused label values get a placeholder nobody reads.
        c.push(if sum_w[l] > 0.0 { (sum_wv[l] / sum_w[l]).clamp(lo[l], hi[l]) } else { 0.0 });
    }
    Ok((c, sum_w))
}

/// Sensitivity-weighted mean of `W / α` over each label class.
pub fn calc_centroids(
    w: &Matrix,
    alpha: &ScalingVector,
    labels: &LabelMatrix,
    g: &Sensitivity,
    alloc: &BitAllocation,
) -> Result<Codebooks> {
    check_layer(w, g, alpha)?;
    if labels.shape() != w.shape() {
        return Err(shape_err(format!("labels {:?} for W {:?}", labels.shape(), w.shape())));
    }
    labels.check_against(alloc)?;
    let rows = (0..w.rows())
        .map(|i| {
            let v = scaled_row(w.row(i), alpha.as_slice());
            let wf = floor_weights(g.row(i))?;
            Ok(row_centroids(&v, &wf, labels.row(i))?.0)
        })
        .collect::<Result<_>>()?;
    Ok(Codebooks { rows })
}

/// `Wq[i][j] = codebook[i][label(i, j)] * α_j`.
pub fn reconstruct_weights(codebooks: &Codebooks, labels: &LabelMatrix, alpha: &ScalingVector) -> Result<Matrix> {
    let (n, m) = labels.shape();
    if codebooks.rows.len() != n || alpha.len() != m {
        return Err(shape_err("codebooks, labels and scales disagree on shape"));
    }
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let book = &codebooks.rows[i];
        for (j, (&l, &a)) in labels.row(i).iter().zip(alpha.as_slice()).enumerate() {
            let c = *book
                .get(l as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("row {i}: label {l} has no centroid")))?;
            out.set(i, j, c * a);
        }
    }
    Ok(out)
}

/// Loss and gradient evaluator for a fixed labelling.
struct FixedGrouping<'a> {
    w: &'a Matrix,
    labels: &'a LabelMatrix,
    weights: Vec<Vec<f64>>,
    h: &'a HessianProxy,
    symmetric: bool,
}

impl<'a> FixedGrouping<'a> {
    fn new(w: &'a Matrix, labels: &'a LabelMatrix, g: &Sensitivity, h: &'a HessianProxy) -> Result<Self> {
        if g.shape() != w.shape() || labels.shape() != w.shape() {
            return Err(shape_err("W, G and labels must share a shape"));
        }
        if h.dim() != w.cols() {
            return Err(shape_err(format!("H is {0}x{0} for {1} columns", h.dim(), w.cols())));
        }
        let weights = (0..w.rows()).map(|i| floor_weights(g.row(i))).collect::<Result<_>>()?;
        let hm = &h.h;
        let m = hm.rows();
        let symmetric = (0..m).all(|a| (a + 1..m).all(|b| hm.get(a, b) == hm.get(b, a)));
        Ok(FixedGrouping { w, labels, weights, h, symmetric })
    }

    fn row_loss_grad(&self, i: usize, alpha: &[f64]) -> Result<(f64, Vec<f64>)> {
        let w = self.w.row(i);
        let wf = &self.weights[i];
        let labels = self.labels.row(i);
        let (c, gsum) = row_centroids(&scaled_row(w, alpha), wf, labels)?;
        let r: Vec<f64> = (0..w.len()).map(|j| w[j] - alpha[j] * c[labels[j] as usize]).collect();
        let hm = &self.h.h;
        let loss = quad_form(hm, &r);

        // u = dLoss/dWq = -(H + Hᵀ) r
        let hr: Vec<f64> = (0..r.len()).map(|a| dot(hm.row(a), &r)).collect();
        let u: Vec<f64> = if self.symmetric {
            hr.iter().map(|v| -2.0 * v).collect()
        } else {
            let mut htr = vec![0.0; r.len()];
            for (a, &ra) in r.iter().enumerate() {
                for (t, &hv) in htr.iter_mut().zip(hm.row(a)) {
                    *t += ra * hv;
                }
            }
            hr.iter().zip(&htr).map(|(x, y)| -(x + y)).collect()
        };

        // Wq_j = α_j c_l, c_l = Σ_{p∈l} f_p w_p / α_p / Σ_{p∈l} f_p
        let mut through_centroid = vec![0.0; c.len()];
        for ((&uj, &aj), &l) in u.iter().zip(alpha).zip(labels) {
            through_centroid[l as usize] += uj * aj;
        }
        let grad = (0..w.len())
            .map(|p| {
                let l = labels[p] as usize;
                u[p] * c[l] - through_centroid[l] * wf[p] * w[p] / (alpha[p] * alpha[p] * gsum[l])
            })
            .collect();
        Ok((loss, grad))
    }

    fn loss_grad(&self, alpha: &ScalingVector) -> Result<(f64, Vec<f64>)> {
        let a = alpha.as_slice();
        let parts: Vec<(f64, Vec<f64>)> = (0..self.w.rows())
            .into_par_iter()
            .map(|i| self.row_loss_grad(i, a))
            .collect::<Result<_>>()?;
        // fixed row order keeps results independent of the thread count
        let mut loss = 0.0;
        let mut grad = vec![0.0; a.len()];
        for (l, g) in parts {
            loss += l;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scaling loss or gradient".into()));
        }
        Ok((loss.max(0.0), grad))
    }
}

/// Layer-wise loss of the fixed-label quantization at `α`, and its
/// gradient with respect to `α`.
pub fn loss_and_grad(
    w: &Matrix,
    labels: &LabelMatrix,
    g: &Sensitivity,
    h: &HessianProxy,
    alpha: &ScalingVector,
) -> Result<(f64, Vec<f64>)> {
    check_layer(w, g, alpha)?;
    FixedGrouping::new(w, labels, g, h)?.loss_grad(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaFit {
    /// Best α observed.
    pub alpha: ScalingVector,
    pub loss: f64,
    pub initial_loss: f64,
    pub trace: Vec<TraceStep>,
}

/// Early stop once the loss has moved by at most `STALL_TOL` (relative)
/// for this many consecutive steps.
const STALL_STEPS: usize = 10;
const STALL_TOL: f64 = 1e-10;

/// Adam on `α` from all ones; see [`optimize_alpha_from`].
pub fn optimize_alpha(
    w: &Matrix,
    labels: &LabelMatrix,
    g: &Sensitivity,
    h: &HessianProxy,
    cfg: &AdamConfig,
) -> Result<AlphaFit> {
    optimize_alpha_from(w, labels, g, h, cfg, ScalingVector::ones(w.cols()))
}

/// Runs at most `max_steps` Adam steps with step-decayed learning rate,
/// clamping `α` into its box after every step, and returns the best `α`
/// seen (including the starting point).
pub fn optimize_alpha_from(
    w: &Matrix,
    labels: &LabelMatrix,
    g: &Sensitivity,
    h: &HessianProxy,
    cfg: &AdamConfig,
    start: ScalingVector,
) -> Result<AlphaFit> {
    cfg.validate()?;
    check_layer(w, g, &start)?;
    let problem = FixedGrouping::new(w, labels, g, h)?;
    let mut alpha = start;
    alpha.clamp_in_place();
    let m = alpha.len();
    let mut m1 = vec![0.0; m];
    let mut m2 = vec![0.0; m];

    let mut trace = Vec::with_capacity(cfg.max_steps + 1);
    let mut best = alpha.clone();
    let mut best_loss = f64::INFINITY;
    let mut initial_loss = None;
    let mut stall = 0;
    let mut prev_loss: Option<f64> = None;

    for step in 0..=cfg.max_steps {
        let (loss, grad) = problem.loss_grad(&alpha)?;
        let lr = cfg.lr_at(step);
        trace.push(TraceStep { step, loss, lr });
        if let Some(prev) = prev_loss {
            stall = if (prev - loss).abs() <= STALL_TOL * prev { stall + 1 } else { 0 };
        }
        prev_loss = Some(loss);
        initial_loss.get_or_insert(loss);
        if loss < best_loss {
            best_loss = loss;
            best = alpha.clone();
        }
        if step == cfg.max_steps || loss == 0.0 || stall >= STALL_STEPS {
            break;
        }

        let t = (step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (j, a) in alpha.0.iter_mut().enumerate() {
            m1[j] = cfg.beta1 * m1[j] + (1.0 - cfg.beta1) * grad[j];
            m2[j] = cfg.beta2 * m2[j] + (1.0 - cfg.beta2) * grad[j] * grad[j];
            let mh = m1[j] / bc1;
            let vh = m2[j] / bc2;
            *a -= lr * mh / (vh.sqrt() + cfg.eps);
        }
        alpha.clamp_in_place();
    }

    Ok(AlphaFit { alpha: best, loss: best_loss, initial_loss: initial_loss.unwrap_or(0.0), trace })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterativeResult {
    pub labels: LabelMatrix,
    pub codebooks: Codebooks,
    pub alpha: ScalingVector,
    /// Loss of the first labelling at `α = 1`.
    pub initial_loss: f64,
    /// Best loss found so far, recorded after each outer iteration.
    pub best_losses: Vec<f64>,
    pub traces: Vec<Vec<TraceStep>>,
}

impl IterativeResult {
    pub fn loss(&self) -> f64 {
        *self.best_losses.last().unwrap_or(&self.initial_loss)
    }
}

/// Alternates label computation at the current `α` with Adam on `α` for
/// `iterations` rounds, keeping the best (labels, α) pair across rounds.
pub fn iterative_optimize(
    w: &Matrix,
    g: &Sensitivity,
    h: &HessianProxy,
    alloc: &BitAllocation,
    iterations: usize,
    cfg: &AdamConfig,
    kmeans: &KmeansConfig,
) -> Result<IterativeResult> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("at least one iteration is required".into()));
    }
    let mut alpha = ScalingVector::ones(w.cols());
    let mut best: Option<(LabelMatrix, ScalingVector, f64)> = None;
    let mut best_losses = Vec::with_capacity(iterations);
    let mut traces = Vec::with_capacity(iterations);
    let mut initial_loss = 0.0;

    for it in 0..iterations {
        let labels = compute_labels(w, &alpha, g, alloc, kmeans)?;
        let fit = optimize_alpha_from(w, &labels, g, h, cfg, alpha.clone())?;
        if it == 0 {
            initial_loss = fit.initial_loss;
        }
        traces.push(fit.trace);
        alpha = fit.alpha.clone();
        if best.as_ref().is_none_or(|b| fit.loss < b.2) {
            best = Some((labels, fit.alpha, fit.loss));
        }
        best_losses.push(best.as_ref().unwrap().2);
    }

    let (labels, alpha, _) = best.unwrap();
    let codebooks = calc_centroids(w, &alpha, &labels, g, alloc)?;
    Ok(IterativeResult { labels, codebooks, alpha, initial_loss, best_losses, traces })
}
