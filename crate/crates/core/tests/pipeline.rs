use proptest::prelude::*;
use skim::allocation::{allocate_greedy, allocation_error, record_error_matrix};
use skim::packing::{pack, unpack};
use skim::pipeline::{generate_fixture, grouping_only_loss, quantize_layer, FixtureSpec, OutlierSpec};
use skim::{AllocInit, PipelineConfig};

fn spec(seed: u64) -> FixtureSpec {
    FixtureSpec { seed, n: 20, m: 32, k: 16, num_samples: 2, row_sigma: 1.0, outliers: Some(OutlierSpec { columns: 1, scale: 50.0 }) }
}

#[test]
fn cached_errors_serve_several_budgets() {
    let f = generate_fixture(&spec(1)).unwrap();
    let (g, h) = (f.sensitivity().unwrap(), f.hessian().unwrap());
    let cfg = PipelineConfig { target_bit: 3.0, scaling: false, ..Default::default() };
    let e = record_error_matrix(&f.w, &g, &h, 2, 4, &cfg.kmeans).unwrap();
    for bit in [3.0, 3.2] {
        let cfg = PipelineConfig { target_bit: bit, ..cfg.clone() };
        let (_, cached) = quantize_layer(&f.w, &g, &h, &cfg, Some(&e)).unwrap();
        let (_, fresh) = quantize_layer(&f.w, &g, &h, &cfg, None).unwrap();
        assert_eq!(cached.row_bits, fresh.row_bits);
        assert_eq!(cached.recorded_errors, fresh.recorded_errors);
        assert_eq!(cached.loss_final, fresh.loss_final);
    }
}

#[test]
fn no_outlier_fixture_has_even_column_variance() {
    let f = generate_fixture(&FixtureSpec { seed: 4, n: 64, m: 32, row_sigma: 0.5, outliers: None, ..Default::default() }).unwrap();
    let var: Vec<f64> = (0..32).map(|j| (0..64).map(|i| f.w.get(i, j).powi(2)).sum::<f64>() / 64.0).collect();
    let (lo, hi) = var.iter().fold((f64::MAX, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    assert!(hi / lo < 10.0, "column variances span {lo}..{hi}");
}

#[test]
fn wide_row_scales_spread_errors() {
    let f = generate_fixture(&FixtureSpec { seed: 6, n: 64, m: 64, k: 32, num_samples: 2, row_sigma: 1.0, outliers: None }).unwrap();
    let (g, h) = (f.sensitivity().unwrap(), f.hessian().unwrap());
    let e = record_error_matrix(&f.w, &g, &h, 3, 3, &Default::default()).unwrap();
    let col: Vec<f64> = (0..64).map(|i| e.get(i, 3)).collect();
    let (lo, hi) = col.iter().fold((f64::MAX, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    assert!(hi / lo >= 10.0, "errors span {lo}..{hi}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn full_pipeline_invariants(seed in 0u64..1000, bit in 2.0f64..4.0, iters in 1usize..3) {
        let f = generate_fixture(&spec(seed)).unwrap();
        let (g, h) = (f.sensitivity().unwrap(), f.hessian().unwrap());
        let mut cfg = PipelineConfig { target_bit: bit, iterations: iters, ..Default::default() };
        cfg.adam.max_steps = 30;
        let (layer, report) = quantize_layer(&f.w, &g, &h, &cfg, None).unwrap();

        prop_assert!(report.loss_final >= 0.0 && report.loss_packed >= 0.0);
        prop_assert!(report.loss_final <= report.loss_alpha_one);
        prop_assert_eq!(report.bit_histogram.iter().map(|b| b.rows).sum::<usize>(), 20);
        prop_assert!(report.average_bits >= bit - 1e-12 && report.average_bits < bit + 1.0 / 20.0 + 1e-12);

        // The α = 1 loss equals the grouping-only loss at the same allocation.
        let e = record_error_matrix(&f.w, &g, &h, 2, 4, &cfg.kmeans).unwrap();
        let alloc = allocate_greedy(&e, bit, AllocInit::Min).unwrap();
        prop_assert_eq!(&alloc.bits, &report.row_bits);
        let grouping = grouping_only_loss(&f.w, &g, &h, &alloc, &cfg.kmeans).unwrap();
        let from_e = allocation_error(&e, &alloc).unwrap();
        prop_assert!((grouping - report.loss_alpha_one).abs() <= 1e-9 * grouping);
        prop_assert!((from_e - grouping).abs() <= 1e-9 * grouping);

        let blob = pack(&layer).unwrap();
        prop_assert_eq!(unpack(&blob).unwrap(), layer);
    }
}
