//! Records the per-row error matrix of a layer with strongly uneven rows
//! and hands out 3.2 bits per weight on average.

use skim::allocation::{allocate_dp_oracle, allocate_greedy, allocation_error, record_error_matrix};
use skim::pipeline::{generate_fixture, FixtureSpec};
use skim::{AllocInit, BitAllocation, KmeansConfig};

pub fn run_example() -> skim::Result<()> {
    let f = generate_fixture(&FixtureSpec { seed: 5, n: 32, m: 64, k: 32, num_samples: 2, row_sigma: 1.0, outliers: None })?;
    let (g, h) = (f.sensitivity()?, f.hessian()?);
    let e = record_error_matrix(&f.w, &g, &h, 2, 4, &KmeansConfig::default())?;

    let uniform = allocation_error(&e, &BitAllocation::uniform(32, 3))?;
    let greedy = allocate_greedy(&e, 3.2, AllocInit::Min)?;
    let exact = allocate_dp_oracle(&e, 3.2)?;

    println!("uniform 3-bit  {uniform:.6e}");
    println!("greedy 3.2-bit {:.6e} ({:.4} bits)", allocation_error(&e, &greedy)?, greedy.average());
    println!("exact 3.2-bit  {:.6e} ({:.4} bits)", allocation_error(&e, &exact)?, exact.average());
    for (bits, rows) in greedy.histogram(2, 4) {
        println!("  {bits}-bit rows: {rows}");
    }
    Ok(())
}

fn main() -> skim::Result<()> {
    run_example()
}
