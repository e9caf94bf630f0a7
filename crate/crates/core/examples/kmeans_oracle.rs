//! Clusters one weighted row with Lloyd's algorithm and checks it against
//! the exact dynamic-programming solution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skim::kmeans1d::{kmeans_exact_dp, kmeans_lloyd};

pub fn run_example() -> skim::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let values: Vec<f64> = (0..48).map(|_| rng.random_range(-2.0..2.0)).collect();
    let weights: Vec<f64> = (0..48).map(|_| rng.random_range(0.0..1.0)).collect();

    for k in [2, 4, 8] {
        let lloyd = kmeans_lloyd(&values, &weights, k, 0, 10)?;
        let exact = kmeans_exact_dp(&values, &weights, k)?;
        assert!(exact.objective <= lloyd.objective * (1.0 + 1e-12));
        println!(
            "k={k}: lloyd {:.6e}  exact {:.6e}  gap {:.2e}",
            lloyd.objective,
            exact.objective,
            (lloyd.objective - exact.objective) / exact.objective
        );
    }
    Ok(())
}

fn main() -> skim::Result<()> {
    run_example()
}
