//! Writes a couple of named tensors to an SKB1 bundle and reads them back.

use skim::{Bundle, Matrix};

pub fn run_example() -> skim::Result<()> {
    let w = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.25).with_name("W");
    let bias = Matrix::row_vector(&[0.5, -1.0, 2.0]).with_name("b");

    let mut bundle = Bundle::new();
    bundle.push(w.clone());
    bundle.push_f32(bias);
    bundle.set_meta("layer", "mlp.up_proj");

    let dir = std::env::temp_dir().join(format!("skim-bundle-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("layer.skb");
    bundle.save(&path)?;

    let back = Bundle::load(&path)?;
    assert_eq!(back.require("W")?, &w);
    println!("{} tensors, layer = {:?}", back.len(), back.meta("layer"));
    for t in back.tensors() {
        println!("  {:<4} {}x{}", t.name().unwrap_or("?"), t.rows(), t.cols());
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

fn main() -> skim::Result<()> {
    run_example()
}
