//! Trains the column scaling vector on a layer with a few outlier columns
//! and prints the loss curve.

use skim::pipeline::{generate_fixture, FixtureSpec, OutlierSpec};
use skim::scaling::iterative_optimize;
use skim::{AdamConfig, BitAllocation, KmeansConfig};

pub fn run_example() -> skim::Result<()> {
    let spec = FixtureSpec {
        seed: 2,
        n: 32,
        m: 64,
        k: 32,
        num_samples: 2,
        row_sigma: 1.0,
        outliers: Some(OutlierSpec { columns: 2, scale: 100.0 }),
    };
    let f = generate_fixture(&spec)?;
    let (g, h) = (f.sensitivity()?, f.hessian()?);
    let alloc = BitAllocation::uniform(32, 3);

    let res = iterative_optimize(&f.w, &g, &h, &alloc, 2, &AdamConfig::default(), &KmeansConfig::default())?;
    for (it, trace) in res.traces.iter().enumerate() {
        let last = trace.last().map_or(f64::NAN, |t| t.loss);
        println!("iteration {it}: {} steps, {:.6e} -> {:.6e}", trace.len(), trace[0].loss, last);
    }
    println!("alpha = 1 loss {:.6e}, best {:.6e}", res.initial_loss, res.loss());
    let outliers: Vec<f64> = f.outlier_columns.iter().map(|&j| res.alpha.as_slice()[j]).collect();
    println!("alpha on outlier columns {outliers:?}");
    Ok(())
}

fn main() -> skim::Result<()> {
    run_example()
}
