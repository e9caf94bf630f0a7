//! Calibration statistics and the four reconstruction-error evaluators.
//!
//! For a layer `Y = W X` with `W` of shape `n x m` and inputs `X` of shape
//! `m x k`, each calibration sample carries `X` and the gradient `Gy`
//! (`n x k`) of the final loss with respect to `Y`. The weight gradient of
//! row `i` is then `g_i = Gy[i,:] Xᵀ`.
//!
//! * layer-wise, full Hessian proxy: `r H rᵀ` with `H = mean(X Xᵀ)`
//! * layer-wise, diagonal: `Σ_j H_jj r_j²`
//! * sensitivity, diagonal: `Σ_j G_ij r_j²` with `G = mean(g²)`
//! * sensitivity, full: `r F_i rᵀ` with `F_i = mean(g_iᵀ g_i)`
//!
//! All statistics are means over the sample set.

use crate::error::{shape_err, Error, Result};
use crate::matrix::{dot, Matrix};

/// One calibration sample: layer input and output gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibSample {
    pub x: Matrix,
    pub gy: Matrix,
}

impl CalibSample {
    pub fn new(x: Matrix, gy: Matrix) -> Result<Self> {
        if x.cols() != gy.cols() {
            return Err(shape_err(format!(
                "X has {} columns but Gy has {}",
                x.cols(),
                gy.cols()
            )));
        }
        Ok(CalibSample { x, gy })
    }

    /// Weight gradient `Gy Xᵀ` (`n x m`).
    pub fn weight_gradient(&self) -> Matrix {
        let mut out = Matrix::zeros(self.gy.rows(), self.x.rows());
        for i in 0..self.gy.rows() {
            let gi = self.gy.row(i);
            for j in 0..self.x.rows() {
                out.set(i, j, dot(gi, self.x.row(j)));
            }
        }
        out
    }
}

/// Per-element averaged squared weight gradient (`n x m`, nonnegative).
#[derive(Debug, Clone, PartialEq)]
pub struct Sensitivity {
    pub g: Matrix,
}

impl Sensitivity {
    pub fn new(g: Matrix) -> Result<Self> {
        g.ensure_finite()?;
        if g.as_slice().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("sensitivity entries must be >= 0".into()));
        }
        Ok(Sensitivity { g })
    }

    /// All-ones sensitivity, i.e. unweighted clustering.
    pub fn uniform(n: usize, m: usize) -> Self {
        Sensitivity { g: Matrix::from_fn(n, m, |_, _| 1.0) }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.g.row(i)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.g.shape()
    }
}

/// Mean of `X Xᵀ` over samples, plus its diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianProxy {
    pub h: Matrix,
    pub diag: Vec<f64>,
}

impl HessianProxy {
    pub fn new(h: Matrix) -> Result<Self> {
        if h.rows() != h.cols() {
            return Err(shape_err(format!("Hessian proxy must be square, got {:?}", h.shape())));
        }
        h.ensure_finite()?;
        let diag = h.diagonal();
        Ok(HessianProxy { h, diag })
    }

    pub fn identity(m: usize) -> Self {
        HessianProxy { h: Matrix::identity(m), diag: vec![1.0; m] }
    }

    pub fn dim(&self) -> usize {
        self.h.rows()
    }

    /// Checks symmetry to `1e-9` relative and `vᵀHv >= -1e-9 |v|²`
    /// on the supplied probe vectors.
    pub fn check(&self, probes: &[Vec<f64>]) -> Result<()> {
        check_sym_psd(&self.h, probes)?;
        if self.diag != self.h.diagonal() {
            return Err(Error::Format("diagH does not match diagonal of H".into()));
        }
        Ok(())
    }
}

/// Per-row full Fisher blocks `F_i` (`m x m` each).
#[derive(Debug, Clone, PartialEq)]
pub struct RowFisherFull {
    pub blocks: Vec<Matrix>,
}

/// Largest `n * m²` accepted by [`accumulate_row_fisher_full`].
pub const ROW_FISHER_LIMIT: usize = 1 << 26;

fn check_sym_psd(h: &Matrix, probes: &[Vec<f64>]) -> Result<()> {
    let m = h.rows();
    let scale = h.max_abs().max(f64::MIN_POSITIVE);
    for i in 0..m {
        for j in i + 1..m {
            if (h.get(i, j) - h.get(j, i)).abs() > 1e-9 * scale {
                return Err(Error::Format(format!("matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    for v in probes {
        if v.len() != m {
            return Err(shape_err("probe length"));
        }
        let q = quad_form(h, v);
        if q < -1e-9 * dot(v, v) * scale {
            return Err(Error::NotPsd(q));
        }
    }
    Ok(())
}

fn check_samples(samples: &[CalibSample]) -> Result<(usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("calibration needs at least one sample".into()))?;
    let (n, m) = (first.gy.rows(), first.x.rows());
    for (d, s) in samples.iter().enumerate() {
        if s.gy.rows() != n || s.x.rows() != m || s.x.cols() != s.gy.cols() {
            return Err(shape_err(format!(
                "sample {d}: X {:?}, Gy {:?}; expected X {m}xk and Gy {n}xk",
                s.x.shape(),
                s.gy.shape()
            )));
        }
    }
    Ok((n, m))
}

pub fn accumulate_sensitivity(samples: &[CalibSample]) -> Result<Sensitivity> {
    let (n, m) = check_samples(samples)?;
    let mut g = Matrix::zeros(n, m);
    for s in samples {
        let gw = s.weight_gradient();
        for (acc, v) in g.as_mut_slice().iter_mut().zip(gw.as_slice()) {
            *acc += v * v;
        }
    }
    Sensitivity::new(g.scale(1.0 / samples.len() as f64))
}

pub fn accumulate_hessian_proxy(samples: &[CalibSample]) -> Result<HessianProxy> {
    let (_, m) = check_samples(samples)?;
    let mut h = Matrix::zeros(m, m);
    for s in samples {
        h = h.add(&s.x.gram())?;
    }
    HessianProxy::new(h.scale(1.0 / samples.len() as f64))
}

pub fn accumulate_row_fisher_full(samples: &[CalibSample]) -> Result<RowFisherFull> {
    let (n, m) = check_samples(samples)?;
    let size = n.saturating_mul(m).saturating_mul(m);
    if size > ROW_FISHER_LIMIT {
        return Err(Error::ScaleGuard { what: "row-wise full Fisher", size, limit: ROW_FISHER_LIMIT });
    }
    let mut blocks = vec![Matrix::zeros(m, m); n];
    let inv = 1.0 / samples.len() as f64;
    for s in samples {
        let gw = s.weight_gradient();
        for (i, block) in blocks.iter_mut().enumerate() {
            let gi = gw.row(i);
            for a in 0..m {
                for b in 0..m {
                    let v = block.get(a, b) + inv * gi[a] * gi[b];
                    block.set(a, b, v);
                }
            }
        }
    }
    Ok(RowFisherFull { blocks })
}

/// `v H vᵀ` without clamping.
pub fn quad_form(h: &Matrix, v: &[f64]) -> f64 {
    v.iter().enumerate().map(|(a, &va)| if va == 0.0 { 0.0 } else { va * dot(h.row(a), v) }).sum()
}

/// Clamps a quadratic form that is PSD in exact arithmetic. Values below
/// `-1e-9` of the absolute-value bound are reported as errors.
fn clamp_psd(q: f64, h: &Matrix, r: &[f64]) -> Result<f64> {
    if !q.is_finite() {
        return Err(Error::NonFinite("quadratic form".into()));
    }
    if q >= 0.0 {
        return Ok(q);
    }
    let bound: f64 = r
        .iter()
        .enumerate()
        .map(|(a, &ra)| ra.abs() * h.row(a).iter().zip(r).map(|(x, y)| (x * y).abs()).sum::<f64>())
        .sum();
    if q < -1e-9 * bound {
        Err(Error::NotPsd(q))
    } else {
        Ok(0.0)
    }
}

fn residual(w: &[f64], wq: &[f64]) -> Result<Vec<f64>> {
    if w.len() != wq.len() {
        return Err(shape_err(format!("row lengths {} and {}", w.len(), wq.len())));
    }
    Ok(w.iter().zip(wq).map(|(a, b)| a - b).collect())
}

/// Layer-wise error of one row with the full Hessian proxy.
pub fn err_l_full(w: &[f64], wq: &[f64], h: &HessianProxy) -> Result<f64> {
    let r = residual(w, wq)?;
    if r.len() != h.dim() {
        return Err(shape_err(format!("row length {} vs H dim {}", r.len(), h.dim())));
    }
    clamp_psd(quad_form(&h.h, &r), &h.h, &r)
}

fn weighted_sq(w: &[f64], wq: &[f64], weights: &[f64]) -> Result<f64> {
    let r = residual(w, wq)?;
    if weights.len() != r.len() {
        return Err(shape_err(format!("{} weights for row length {}", weights.len(), r.len())));
    }
    Ok(r.iter().zip(weights).map(|(x, c)| c * x * x).sum::<f64>().max(0.0))
}

/// Layer-wise error of one row with only the diagonal of `H`.
pub fn err_l_diag(w: &[f64], wq: &[f64], diag_h: &[f64]) -> Result<f64> {
    weighted_sq(w, wq, diag_h)
}

/// Sensitivity-weighted element-wise error of one row.
pub fn err_s_diag(w: &[f64], wq: &[f64], g_row: &[f64]) -> Result<f64> {
    weighted_sq(w, wq, g_row)
}

/// Sensitivity error of one row with the full per-row Fisher block.
pub fn err_s_full(w: &[f64], wq: &[f64], f_i: &Matrix) -> Result<f64> {
    let r = residual(w, wq)?;
    if f_i.shape() != (r.len(), r.len()) {
        return Err(shape_err(format!("Fisher block {:?} for row length {}", f_i.shape(), r.len())));
    }
    clamp_psd(quad_form(f_i, &r), f_i, &r)
}

/// Sum of [`err_l_full`] over all rows.
pub fn err_matrix_l_full(w: &Matrix, wq: &Matrix, h: &HessianProxy) -> Result<f64> {
    if w.shape() != wq.shape() {
        return Err(shape_err(format!("{:?} vs {:?}", w.shape(), wq.shape())));
    }
    let mut total = 0.0;
    for i in 0..w.rows() {
        total += err_l_full(w.row(i), wq.row(i), h)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn zero_gy_gives_zero_sensitivity_and_fisher() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = CalibSample::new(rand_matrix(&mut rng, 4, 3), Matrix::zeros(2, 3)).unwrap();
        let g = accumulate_sensitivity(std::slice::from_ref(&s)).unwrap();
        assert!(g.g.as_slice().iter().all(|&v| v == 0.0));
        let f = accumulate_row_fisher_full(&[s]).unwrap();
        assert!(f.blocks.iter().all(|b| b.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn unit_vectors_light_single_entry() {
        // k = 1, X = e_2 (m = 4), Gy = e_1 (n = 3)
        let x = Matrix::from_fn(4, 1, |j, _| if j == 2 { 1.0 } else { 0.0 });
        let gy = Matrix::from_fn(3, 1, |i, _| if i == 1 { 1.0 } else { 0.0 });
        let g = accumulate_sensitivity(&[CalibSample::new(x, gy).unwrap()]).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let expect = if (i, j) == (1, 2) { 1.0 } else { 0.0 };
                assert_eq!(g.g.get(i, j), expect);
            }
        }
    }

    #[test]
    fn sensitivity_matches_per_sample_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, m, k) = (3, 4, 5);
        let samples: Vec<_> = (0..2)
            .map(|_| CalibSample::new(rand_matrix(&mut rng, m, k), rand_matrix(&mut rng, n, k)).unwrap())
            .collect();
        let g = accumulate_sensitivity(&samples).unwrap();
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for s in &samples {
                    let mut gij = 0.0;
                    for t in 0..k {
                        gij += s.gy.get(i, t) * s.x.get(j, t);
                    }
                    acc += gij * gij;
                }
                assert!(rel(g.g.get(i, j), acc / 2.0) < 1e-12);
            }
        }
    }

    #[test]
    fn hessian_identity_and_sign_cancellation() {
        let s = CalibSample::new(Matrix::identity(3), Matrix::zeros(1, 3)).unwrap();
        assert_eq!(accumulate_hessian_proxy(&[s]).unwrap().h, Matrix::identity(3));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_matrix(&mut rng, 4, 6);
        let gy = Matrix::zeros(2, 6);
        let one = accumulate_hessian_proxy(&[CalibSample::new(x.clone(), gy.clone()).unwrap()]).unwrap();
        let two = accumulate_hessian_proxy(&[
            CalibSample::new(x.clone(), gy.clone()).unwrap(),
            CalibSample::new(x.scale(-1.0), gy).unwrap(),
        ])
        .unwrap();
        for (a, b) in one.h.as_slice().iter().zip(two.h.as_slice()) {
            assert!(rel(*a, *b) < 1e-15 || (a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn hessian_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, k) = (4, 7);
        let x = rand_matrix(&mut rng, m, k);
        let hp = accumulate_hessian_proxy(&[CalibSample::new(x.clone(), Matrix::zeros(1, k)).unwrap()]).unwrap();
        for a in 0..m {
            for b in 0..m {
                let mut s = 0.0;
                for t in 0..k {
                    s += x.get(a, t) * x.get(b, t);
                }
                assert!((hp.h.get(a, b) - s).abs() < 1e-12);
            }
            assert_eq!(hp.diag[a], hp.h.get(a, a));
        }
        let probes: Vec<Vec<f64>> = (0..8).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        hp.check(&probes).unwrap();
    }

    #[test]
    fn fisher_rank_one_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = CalibSample::new(rand_matrix(&mut rng, 3, 1), rand_matrix(&mut rng, 2, 1)).unwrap();
        let f = accumulate_row_fisher_full(std::slice::from_ref(&s)).unwrap();
        let gw = s.weight_gradient();
        for i in 0..2 {
            for a in 0..3 {
                for b in 0..3 {
                    assert!((f.blocks[i].get(a, b) - gw.get(i, a) * gw.get(i, b)).abs() < 1e-14);
                }
            }
        }

        let samples: Vec<_> = (0..2)
            .map(|_| CalibSample::new(rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 2, 4)).unwrap())
            .collect();
        let f = accumulate_row_fisher_full(&samples).unwrap();
        for i in 0..2 {
            for a in 0..3 {
                for b in 0..3 {
                    let mut acc = 0.0;
                    for s in &samples {
                        let g = s.weight_gradient();
                        acc += g.get(i, a) * g.get(i, b);
                    }
                    assert!((f.blocks[i].get(a, b) - acc / 2.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fisher_guard() {
        let s = CalibSample::new(Matrix::zeros(4096, 1), Matrix::zeros(8, 1)).unwrap();
        assert!(matches!(
            accumulate_row_fisher_full(&[s]),
            Err(Error::ScaleGuard { .. })
        ));
    }

    #[test]
    fn empty_and_mismatched_samples() {
        assert!(accumulate_sensitivity(&[]).is_err());
        assert!(accumulate_hessian_proxy(&[]).is_err());
        let a = CalibSample::new(Matrix::zeros(3, 2), Matrix::zeros(2, 2)).unwrap();
        let b = CalibSample::new(Matrix::zeros(4, 2), Matrix::zeros(2, 2)).unwrap();
        assert!(matches!(accumulate_hessian_proxy(&[a, b]), Err(Error::Shape(_))));
        assert!(CalibSample::new(Matrix::zeros(3, 2), Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn evaluators_zero_on_equal_rows() {
        let w = [0.3, -1.0, 2.0];
        let h = HessianProxy::identity(3);
        assert_eq!(err_l_full(&w, &w, &h).unwrap(), 0.0);
        assert_eq!(err_l_diag(&w, &w, &[1.0; 3]).unwrap(), 0.0);
        assert_eq!(err_s_diag(&w, &w, &[2.0; 3]).unwrap(), 0.0);
        assert_eq!(err_s_full(&w, &w, &Matrix::identity(3)).unwrap(), 0.0);
    }

    #[test]
    fn identity_weighting_is_squared_norm() {
        let w = [1.0, 2.0, 3.0];
        let wq = [0.5, 2.0, 4.0];
        let h = HessianProxy::identity(3);
        assert!((err_l_full(&w, &wq, &h).unwrap() - 1.25).abs() < 1e-15);
        assert!((err_l_diag(&w, &wq, &[1.0; 3]).unwrap() - 1.25).abs() < 1e-15);
        assert!((err_s_diag(&w, &wq, &[1.0; 3]).unwrap() - 1.25).abs() < 1e-15);
    }

    #[test]
    fn l_full_matches_rx_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (m, k) = (5, 9);
        let x = rand_matrix(&mut rng, m, k);
        let hp = HessianProxy::new(x.gram()).unwrap();
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wq: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = Matrix::row_vector(&residual(&w, &wq).unwrap());
        let direct = r.matmul(&x).unwrap().frobenius_sq();
        assert!(rel(err_l_full(&w, &wq, &hp).unwrap(), direct) < 1e-10);
    }

    #[test]
    fn l_diag_equals_l_full_without_off_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_matrix(&mut rng, 6, 10);
        let hp = HessianProxy::new(x.gram()).unwrap();
        let diag_only = HessianProxy::new(Matrix::from_fn(6, 6, |a, b| if a == b { hp.h.get(a, a) } else { 0.0 })).unwrap();
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wq: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = err_l_diag(&w, &wq, &hp.diag).unwrap();
        let b = err_l_full(&w, &wq, &diag_only).unwrap();
        assert!(rel(a, b) < 1e-12);
    }

    #[test]
    fn s_diag_matches_loop_and_s_full_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = 7;
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wq: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..3.0)).collect();
        let mut expect = 0.0;
        for j in 0..m {
            expect += g[j] * (w[j] - wq[j]) * (w[j] - wq[j]);
        }
        assert!(rel(err_s_diag(&w, &wq, &g).unwrap(), expect) < 1e-13);

        // single-sample Fisher block is rank one: error is (r · g)²
        let s = CalibSample::new(rand_matrix(&mut rng, m, 3), rand_matrix(&mut rng, 1, 3)).unwrap();
        let f = accumulate_row_fisher_full(std::slice::from_ref(&s)).unwrap();
        let gw = s.weight_gradient();
        let r = residual(&w, &wq).unwrap();
        let scalar = dot(&r, gw.row(0)).powi(2);
        assert!(rel(err_s_full(&w, &wq, &f.blocks[0]).unwrap(), scalar) < 1e-10);

        // diagonal of F_i is the sensitivity row
        let diag_f = Matrix::from_fn(m, m, |a, b| if a == b { f.blocks[0].get(a, a) } else { 0.0 });
        let sens = accumulate_sensitivity(&[s]).unwrap();
        let a = err_s_full(&w, &wq, &diag_f).unwrap();
        let b = err_s_diag(&w, &wq, sens.row(0)).unwrap();
        assert!(rel(a, b) < 1e-12);
    }

    #[test]
    fn matrix_error_is_frobenius_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, m, k) = (4, 6, 8);
        let x = rand_matrix(&mut rng, m, k);
        let w = rand_matrix(&mut rng, n, m);
        let wq = rand_matrix(&mut rng, n, m);
        let hp = HessianProxy::new(x.gram()).unwrap();
        let total = err_matrix_l_full(&w, &wq, &hp).unwrap();
        let by_row: f64 = (0..n).map(|i| err_l_full(w.row(i), wq.row(i), &hp).unwrap()).sum();
        assert_eq!(total, by_row);
        let frob = w.sub(&wq).unwrap().matmul(&x).unwrap().frobenius_sq();
        assert!(rel(total, frob) < 1e-10);
        assert_eq!(err_matrix_l_full(&w, &w, &hp).unwrap(), 0.0);
    }

    #[test]
    fn gy_scaling_is_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_matrix(&mut rng, 3, 4);
        let gy = rand_matrix(&mut rng, 2, 4);
        let base = accumulate_sensitivity(&[CalibSample::new(x.clone(), gy.clone()).unwrap()]).unwrap();
        let scaled = accumulate_sensitivity(&[CalibSample::new(x.clone(), gy.scale(3.0)).unwrap()]).unwrap();
        for (a, b) in base.g.as_slice().iter().zip(scaled.g.as_slice()) {
            assert!(rel(a * 9.0, *b) < 1e-12 || (a * 9.0 - b).abs() < 1e-14);
        }
        let fb = accumulate_row_fisher_full(&[CalibSample::new(x.clone(), gy.clone()).unwrap()]).unwrap();
        let fs = accumulate_row_fisher_full(&[CalibSample::new(x, gy.scale(3.0)).unwrap()]).unwrap();
        for (a, b) in fb.blocks.iter().zip(&fs.blocks) {
            for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((p * 9.0 - q).abs() <= 1e-12 * q.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn indefinite_weighting_is_rejected() {
        let h = HessianProxy::new(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap()).unwrap();
        assert!(matches!(err_l_full(&[0.0, 1.0], &[0.0, 0.0], &h), Err(Error::NotPsd(_))));
        assert!(h.check(&[vec![0.0, 1.0]]).is_err());
    }
}
