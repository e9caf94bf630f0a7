//! End-to-end layer quantization and synthetic fixtures.
//!
//! Objective wiring is fixed: clustering uses sensitivity weights, while
//! the recorded per-row errors and the scaling loss use the layer-wise
//! error with the full Hessian proxy.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::allocation::{
    allocate_dp_oracle, allocate_greedy, allocation_error, check_bit_range, record_error_matrix,
    AllocInit, BitAllocation, ErrorMatrix,
};
use crate::calibration::{
    accumulate_hessian_proxy, accumulate_sensitivity, err_l_full, CalibSample, HessianProxy, Sensitivity,
};
use crate::error::{shape_err, Error, Result};
use crate::kmeans1d::KmeansConfig;
use crate::matrix::Matrix;
use crate::packing::{dequantize, size_report, QuantizedLayer, SizeReport};
use crate::scaling::{
    calc_centroids, compute_labels, iterative_optimize, reconstruct_weights, AdamConfig, ScalingVector, TraceStep,
};
use crate::store::Bundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Standard,
    /// Mixed precision off at integral bits, floor-initialised allocation
    /// at fractional bits.
    OptStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub target_bit: f64,
    pub b_min: u8,
    pub b_max: u8,
    pub mixed_precision: bool,
    pub preset: Preset,
    pub allocation_init: AllocInit,
    pub scaling: bool,
    pub iterations: usize,
    pub kmeans: KmeansConfig,
    pub adam: AdamConfig,
    /// Also solve the allocation exactly and report the greedy gap.
    pub oracle: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            target_bit: 3.0,
            b_min: 2,
            b_max: 4,
            mixed_precision: true,
            preset: Preset::Standard,
            allocation_init: AllocInit::Min,
            scaling: true,
            iterations: 1,
            kmeans: KmeansConfig::default(),
            adam: AdamConfig::default(),
            oracle: false,
        }
    }
}

fn is_integral(bit: f64) -> bool {
    bit.fract() == 0.0
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        check_bit_range(self.b_min, self.b_max)?;
        if !self.target_bit.is_finite() || self.target_bit < self.b_min as f64 || self.target_bit > self.b_max as f64 {
            return Err(Error::InfeasibleBudget { bit: self.target_bit, b_min: self.b_min, b_max: self.b_max });
        }
        if !self.effective_mixed() && !is_integral(self.target_bit) {
            return Err(Error::InvalidArgument(format!(
                "mixed precision is off, so the target bit must be an integer, got {}",
                self.target_bit
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        if self.kmeans.restarts == 0 {
            return Err(Error::InvalidArgument("restarts must be at least 1".into()));
        }
        self.adam.validate()
    }

    pub fn effective_mixed(&self) -> bool {
        self.mixed_precision && !(self.preset == Preset::OptStyle && is_integral(self.target_bit))
    }

    pub fn effective_init(&self) -> AllocInit {
        if self.preset == Preset::OptStyle && !is_integral(self.target_bit) {
            AllocInit::Floor
        } else {
            self.allocation_init
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitCount {
    pub bits: u8,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleGap {
    pub greedy_error: f64,
    pub dp_error: f64,
    pub greedy_average_bits: f64,
    pub dp_average_bits: f64,
    /// `greedy_error - dp_error`; negative when the greedy's extra partial
    /// bit buys more than the exact solver could under its floor budget.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub meta: BTreeMap<String, String>,
    pub n: usize,
    pub m: usize,
    pub target_bit: f64,
    pub b_min: u8,
    pub b_max: u8,
    pub mixed_precision: bool,
    pub scaling: bool,
    pub average_bits: f64,
    pub saturated: bool,
    pub bit_histogram: Vec<BitCount>,
    pub row_bits: Vec<u8>,
    /// Layer-wise error of each row after quantization (full precision).
    pub row_errors: Vec<f64>,
    /// Recorded `E`, one row per channel, when it was computed.
    pub recorded_errors: Option<Vec<Vec<f64>>>,
    /// Loss with the final labels' grouping at `α = 1`.
    pub loss_alpha_one: f64,
    pub loss_final: f64,
    /// Loss after binary16 codebooks and binary32 scales.
    pub loss_packed: f64,
    pub best_losses: Vec<f64>,
    pub oracle: Option<OracleGap>,
    pub size: SizeReport,
    pub trace: Vec<TraceStep>,
    pub wall_time_ms: f64,
}

impl QuantReport {
    /// JSON with `wall_time_ms` zeroed, for reproducibility comparisons.
    pub fn to_json_without_time(&self) -> Result<String> {
        let mut r = self.clone();
        r.wall_time_ms = 0.0;
        Ok(serde_json::to_string_pretty(&r)?)
    }
}

fn check_shapes(w: &Matrix, g: &Sensitivity, h: &HessianProxy) -> Result<()> {
    if g.shape() != w.shape() {
        return Err(shape_err(format!("W is {:?} but G is {:?}", w.shape(), g.shape())));
    }
    if h.dim() != w.cols() {
        return Err(shape_err(format!("W has {} columns but H is {1}x{1}", w.cols(), h.dim())));
    }
    Ok(())
}

fn row_errors(w: &Matrix, wq: &Matrix, h: &HessianProxy) -> Result<Vec<f64>> {
    (0..w.rows()).map(|i| err_l_full(w.row(i), wq.row(i), h)).collect()
}

/// Layer-wise loss of clustering every row at its allocated width with
/// `α = 1`. Equals `allocation_error(E, alloc)` for an `E` recorded with
/// the same k-means configuration.
pub fn grouping_only_loss(
    w: &Matrix,
    g: &Sensitivity,
    h: &HessianProxy,
    alloc: &BitAllocation,
    kmeans: &KmeansConfig,
) -> Result<f64> {
    check_shapes(w, g, h)?;
    let ones = ScalingVector::ones(w.cols());
    let labels = compute_labels(w, &ones, g, alloc, kmeans)?;
    let books = calc_centroids(w, &ones, &labels, g, alloc)?;
    let wq = reconstruct_weights(&books, &labels, &ones)?;
    Ok(row_errors(w, &wq, h)?.iter().sum())
}

/// Runs the whole pipeline on one layer: error recording (or `cached`),
/// bit allocation, clustering, optional scaling training, and packing.
pub fn quantize_layer(
    w: &Matrix,
    g: &Sensitivity,
    h: &HessianProxy,
    cfg: &PipelineConfig,
    cached: Option<&ErrorMatrix>,
) -> Result<(QuantizedLayer, QuantReport)> {
    let started = Instant::now();
    cfg.validate()?;
    check_shapes(w, g, h)?;
    let (n, m) = w.shape();

    let mixed = cfg.effective_mixed();
    let errors = if mixed || cfg.oracle {
        match cached {
            Some(e) => {
                if e.n() != n || e.b_min() != cfg.b_min || e.b_max() != cfg.b_max {
                    return Err(shape_err(format!(
                        "cached error matrix is {} rows over [{}, {}], layer needs {n} rows over [{}, {}]",
                        e.n(),
                        e.b_min(),
                        e.b_max(),
                        cfg.b_min,
                        cfg.b_max
                    )));
                }
                Some(e.clone())
            }
            None => Some(record_error_matrix(w, g, h, cfg.b_min, cfg.b_max, &cfg.kmeans)?),
        }
    } else {
        None
    };

    let alloc = match (&errors, mixed) {
        (Some(e), true) => allocate_greedy(e, cfg.target_bit, cfg.effective_init())?,
        _ => BitAllocation::uniform(n, cfg.target_bit.round() as u8),
    };

    let oracle = match (&errors, cfg.oracle) {
        (Some(e), true) => {
            let dp = allocate_dp_oracle(e, cfg.target_bit)?;
            let greedy_error = allocation_error(e, &alloc)?;
            let dp_error = allocation_error(e, &dp)?;
            Some(OracleGap {
                greedy_error,
                dp_error,
                greedy_average_bits: alloc.average(),
                dp_average_bits: dp.average(),
                gap: greedy_error - dp_error,
            })
        }
        _ => None,
    };

    let ones = ScalingVector::ones(m);
    let (labels, books, alpha, loss_alpha_one, best_losses, trace) = if cfg.scaling {
        let res = iterative_optimize(w, g, h, &alloc, cfg.iterations, &cfg.adam, &cfg.kmeans)?;
        let loss_alpha_one = res.initial_loss;
        let trace = res.traces.iter().flatten().copied().collect();
        (res.labels, res.codebooks, res.alpha, loss_alpha_one, res.best_losses, trace)
    } else {
        let labels = compute_labels(w, &ones, g, &alloc, &cfg.kmeans)?;
        let books = calc_centroids(w, &ones, &labels, g, &alloc)?;
        (labels, books, ones, f64::NAN, Vec::new(), Vec::new())
    };

    let wq = reconstruct_weights(&books, &labels, &alpha)?;
    let per_row = row_errors(w, &wq, h)?;
    let loss_final: f64 = per_row.iter().sum();
    let loss_alpha_one = if cfg.scaling { loss_alpha_one } else { loss_final };

    let layer = QuantizedLayer::new(cfg.b_min, cfg.b_max, alloc.bits.clone(), labels, &books, &alpha)?;
    let packed_wq = dequantize(&layer)?;
    let loss_packed = row_errors(w, &packed_wq, h)?.iter().sum();

    let mut meta = BTreeMap::new();
    if let Some(name) = w.name() {
        meta.insert("layer".to_string(), name.to_string());
    }
    meta.insert("target_bit".to_string(), cfg.target_bit.to_string());

    let report = QuantReport {
        meta,
        n,
        m,
        target_bit: cfg.target_bit,
        b_min: cfg.b_min,
        b_max: cfg.b_max,
        mixed_precision: mixed,
        scaling: cfg.scaling,
        average_bits: alloc.average(),
        saturated: alloc.saturated,
        bit_histogram: alloc
            .histogram(cfg.b_min, cfg.b_max)
            .into_iter()
            .map(|(bits, rows)| BitCount { bits, rows })
            .collect(),
        row_bits: alloc.bits.clone(),
        row_errors: per_row,
        recorded_errors: errors.as_ref().map(|e| e.matrix().row_iter().map(<[f64]>::to_vec).collect()),
        loss_alpha_one,
        loss_final,
        loss_packed,
        best_losses,
        oracle,
        size: size_report(&layer),
        trace,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok((layer, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub columns: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    /// Tokens per calibration sample.
    pub k: usize,
    pub num_samples: usize,
    /// σ of the log-normal per-row scale.
    pub row_sigma: f64,
    pub outliers: Option<OutlierSpec>,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec { seed: 0, n: 64, m: 128, k: 32, num_samples: 8, row_sigma: 0.5, outliers: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub w: Matrix,
    pub samples: Vec<CalibSample>,
    /// Columns multiplied by the outlier scale, ascending.
    pub outlier_columns: Vec<usize>,
}

impl Fixture {
    pub fn sensitivity(&self) -> Result<Sensitivity> {
        accumulate_sensitivity(&self.samples)
    }

    pub fn hessian(&self) -> Result<HessianProxy> {
        accumulate_hessian_proxy(&self.samples)
    }

    /// Tensors `W`, `X.<d>`, `Gy.<d>`.
    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new();
        b.push(self.w.clone().with_name("W"));
        for (d, s) in self.samples.iter().enumerate() {
            b.push(s.x.clone().with_name(format!("X.{d}")));
            b.push(s.gy.clone().with_name(format!("Gy.{d}")));
        }
        b
    }

    pub fn from_bundle(bundle: &Bundle) -> Result<Fixture> {
        let w = bundle.require("W")?.clone();
        let mut samples = Vec::new();
        for d in 0.. {
            let (Some(x), Some(gy)) = (bundle.get(&format!("X.{d}")), bundle.get(&format!("Gy.{d}"))) else {
                break;
            };
            samples.push(CalibSample::new(x.clone(), gy.clone())?);
        }
        if samples.is_empty() {
            return Err(Error::Format("bundle has no `X.0`/`Gy.0` calibration samples".into()));
        }
        Ok(Fixture { w, samples, outlier_columns: Vec::new() })
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian weights with log-normal per-row scales, optional outlier
/// columns, and Gaussian calibration inputs and output gradients.
pub fn generate_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    if spec.n == 0 || spec.m == 0 || spec.k == 0 || spec.num_samples == 0 {
        return Err(Error::InvalidArgument("fixture dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let row_scale: Vec<f64> = (0..spec.n).map(|_| (spec.row_sigma * normal(&mut rng)).exp()).collect();
    let mut w = Matrix::from_fn(spec.n, spec.m, |i, _| row_scale[i] * normal(&mut rng)).with_name("W");

    let mut outlier_columns = Vec::new();
    if let Some(o) = spec.outliers {
        if o.columns > spec.m {
            return Err(Error::InvalidArgument(format!("{} outlier columns in a {}-column layer", o.columns, spec.m)));
        }
        let mut cols: Vec<usize> = (0..spec.m).collect();
        for t in 0..o.columns {
            let pick = rng.random_range(t..spec.m);
            cols.swap(t, pick);
        }
        outlier_columns = cols[..o.columns].to_vec();
        outlier_columns.sort_unstable();
        for &j in &outlier_columns {
            for i in 0..spec.n {
                let v = w.get(i, j) * o.scale;
                w.set(i, j, v);
            }
        }
    }

    let samples = (0..spec.num_samples)
        .map(|d| {
            let x = Matrix::from_fn(spec.m, spec.k, |_, _| normal(&mut rng)).with_name(format!("X.{d}"));
            let gy = Matrix::from_fn(spec.n, spec.k, |_, _| normal(&mut rng)).with_name(format!("Gy.{d}"));
            CalibSample::new(x, gy)
        })
        .collect::<Result<_>>()?;
    Ok(Fixture { w, samples, outlier_columns })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kmeans1d::reconstruct_row;
    use crate::packing::{pack, unpack};

    fn small() -> (Matrix, Sensitivity, HessianProxy) {
        let f = generate_fixture(&FixtureSpec { seed: 3, n: 16, m: 24, k: 12, num_samples: 3, ..Default::default() }).unwrap();
        (f.w.clone(), f.sensitivity().unwrap(), f.hessian().unwrap())
    }

    #[test]
    fn plain_uniform_is_direct_clustering() {
        let (w, g, h) = small();
        let cfg = PipelineConfig { target_bit: 3.0, mixed_precision: false, scaling: false, ..Default::default() };
        let (layer, report) = quantize_layer(&w, &g, &h, &cfg, None).unwrap();
        assert!(layer.bits.iter().all(|&b| b == 3));
        for i in 0..w.rows() {
            let r = cfg.kmeans.cluster_row(i, 3, w.row(i), g.row(i)).unwrap();
            assert_eq!(layer.labels.row(i), r.labels.as_slice());
            let e = err_l_full(w.row(i), &reconstruct_row(&r), &h).unwrap();
            assert!((report.row_errors[i] - e).abs() <= 1e-12 * e);
        }
        assert!(report.recorded_errors.is_none());
        assert_eq!(report.loss_alpha_one, report.loss_final);
        assert_eq!(report.size.label_bits_per_weight, 3.0);
    }

    #[test]
    fn scaling_never_exceeds_unit_alpha_loss() {
        let (w, g, h) = small();
        let cfg = PipelineConfig { target_bit: 2.5, ..Default::default() };
        let (_, report) = quantize_layer(&w, &g, &h, &cfg, None).unwrap();
        assert!(report.loss_final <= report.loss_alpha_one * (1.0 + 1e-12));
        let sum: usize = report.bit_histogram.iter().map(|b| b.rows).sum();
        assert_eq!(sum, 16);
        assert!(report.average_bits >= 2.5 && report.average_bits < 2.5 + 1.0 / 16.0);
    }

    #[test]
    fn recorded_errors_reproduce_grouping_loss() {
        let (w, g, h) = small();
        let k = KmeansConfig::default();
        let e = record_error_matrix(&w, &g, &h, 2, 4, &k).unwrap();
        let alloc = allocate_greedy(&e, 3.25, AllocInit::Min).unwrap();
        let direct = grouping_only_loss(&w, &g, &h, &alloc, &k).unwrap();
        let from_e = allocation_error(&e, &alloc).unwrap();
        assert!((direct - from_e).abs() <= 1e-12 * direct);
    }

    #[test]
    fn cached_errors_are_reused() {
        let (w, g, h) = small();
        let cfg = PipelineConfig { target_bit: 3.0, scaling: false, ..Default::default() };
        let e = record_error_matrix(&w, &g, &h, 2, 4, &cfg.kmeans).unwrap();
        let (a, ra) = quantize_layer(&w, &g, &h, &cfg, Some(&e)).unwrap();
        let (b, rb) = quantize_layer(&w, &g, &h, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.recorded_errors, rb.recorded_errors);
        let wrong = ErrorMatrix::from_rows(2, 3, &vec![vec![1.0, 0.5]; 16]).unwrap();
        assert!(quantize_layer(&w, &g, &h, &cfg, Some(&wrong)).is_err());
    }

    #[test]
    fn pipeline_output_roundtrips_through_packing() {
        let (w, g, h) = small();
        let cfg = PipelineConfig { target_bit: 3.5, oracle: true, ..Default::default() };
        let (layer, report) = quantize_layer(&w, &g, &h, &cfg, None).unwrap();
        let blob = pack(&layer).unwrap();
        assert_eq!(unpack(&blob).unwrap(), layer);
        assert_eq!(report.size.total_bytes, blob.as_bytes().len());
        let gap = report.oracle.unwrap();
        assert!(gap.dp_average_bits <= 3.5);
    }

    #[test]
    fn config_validation() {
        let bad = PipelineConfig { target_bit: 5.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::InfeasibleBudget { .. })));
        let frac_uniform = PipelineConfig { target_bit: 3.2, mixed_precision: false, ..Default::default() };
        assert!(frac_uniform.validate().is_err());
        let opt = PipelineConfig { target_bit: 3.0, preset: Preset::OptStyle, ..Default::default() };
        assert!(!opt.effective_mixed());
        let opt_frac = PipelineConfig { target_bit: 3.2, preset: Preset::OptStyle, ..Default::default() };
        assert!(opt_frac.effective_mixed());
        assert_eq!(opt_frac.effective_init(), AllocInit::Floor);
        let parsed: PipelineConfig = serde_json::from_str(r#"{"target_bit": 2.5, "adam": {"lr": 0.02, "decay": 0.5, "decay_every": 40, "max_steps": 10, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}}"#).unwrap();
        assert_eq!(parsed.b_max, 4);
        assert_eq!(parsed.adam.max_steps, 10);
    }

    #[test]
    fn fixtures_are_deterministic() {
        let spec = FixtureSpec { seed: 9, n: 8, m: 10, k: 4, num_samples: 2, outliers: Some(OutlierSpec { columns: 2, scale: 100.0 }), ..Default::default() };
        let a = generate_fixture(&spec).unwrap();
        let b = generate_fixture(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.outlier_columns.len(), 2);
        let back = Fixture::from_bundle(&Bundle::decode(&a.to_bundle().encode().unwrap()).unwrap()).unwrap();
        assert_eq!(back.w, a.w);
        assert_eq!(back.samples, a.samples);
    }
}
