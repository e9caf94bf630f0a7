//! Quantizes a synthetic layer end to end and compares mixed precision
//! plus scaling against plain uniform clustering.

use skim::packing::pack;
use skim::pipeline::{generate_fixture, quantize_layer, FixtureSpec, OutlierSpec};
use skim::PipelineConfig;

pub fn run_example() -> skim::Result<()> {
    let spec = FixtureSpec {
        seed: 7,
        n: 48,
        m: 96,
        k: 32,
        num_samples: 2,
        row_sigma: 1.0,
        outliers: Some(OutlierSpec { columns: 2, scale: 100.0 }),
    };
    let f = generate_fixture(&spec)?;
    let (g, h) = (f.sensitivity()?, f.hessian()?);

    let plain = PipelineConfig { target_bit: 3.0, mixed_precision: false, scaling: false, ..Default::default() };
    let full = PipelineConfig { target_bit: 3.2, oracle: true, ..Default::default() };

    for (name, cfg) in [("uniform 3-bit", plain), ("mixed 3.2-bit + scaling", full)] {
        let (layer, report) = quantize_layer(&f.w, &g, &h, &cfg, None)?;
        let bytes = pack(&layer)?.into_bytes().len();
        println!(
            "{name:<24} loss {:.6e}  packed {:.6e}  {:.3} bits/weight  {bytes} bytes",
            report.loss_final, report.loss_packed, report.size.effective_bits_per_weight
        );
        if let Some(gap) = report.oracle {
            println!("{:<24} greedy {:.6e} vs exact {:.6e}", "", gap.greedy_error, gap.dp_error);
        }
    }
    Ok(())
}

fn main() -> skim::Result<()> {
    run_example()
}
