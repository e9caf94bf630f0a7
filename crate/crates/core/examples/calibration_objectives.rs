//! Accumulates `G` and `H` from calibration samples and compares the four
//! per-row error measures on one perturbed row.

use skim::calibration::{
    accumulate_hessian_proxy, accumulate_row_fisher_full, accumulate_sensitivity, err_l_diag, err_l_full,
    err_s_diag, err_s_full,
};
use skim::pipeline::{generate_fixture, FixtureSpec};

pub fn run_example() -> skim::Result<()> {
    let f = generate_fixture(&FixtureSpec { seed: 1, n: 4, m: 8, k: 16, num_samples: 4, ..Default::default() })?;
    let g = accumulate_sensitivity(&f.samples)?;
    let h = accumulate_hessian_proxy(&f.samples)?;
    let fisher = accumulate_row_fisher_full(&f.samples)?;

    let w = f.w.row(0);
    let wq: Vec<f64> = w.iter().map(|v| (v * 4.0).round() / 4.0).collect();

    println!("row 0 rounded to a 0.25 grid:");
    println!("  L-full {:.6e}", err_l_full(w, &wq, &h)?);
    println!("  L-diag {:.6e}", err_l_diag(w, &wq, &h.diag)?);
    println!("  S-diag {:.6e}", err_s_diag(w, &wq, g.row(0))?);
    println!("  S-full {:.6e}", err_s_full(w, &wq, &fisher.blocks[0])?);
    Ok(())
}

fn main() -> skim::Result<()> {
    run_example()
}
