//! Packs a small mixed-precision layer into SKQ1 bytes and back.

use skim::packing::{dequantize, pack, size_report, unpack};
use skim::{Codebooks, LabelMatrix, QuantizedLayer, ScalingVector};

pub fn run_example() -> skim::Result<()> {
    let bits = vec![2, 3, 2];
    let labels = LabelMatrix::from_rows(vec![vec![0, 1, 2, 3], vec![7, 6, 5, 4], vec![3, 3, 0, 0]])?;
    let books = Codebooks {
        rows: vec![
            vec![-1.5, -0.5, 0.5, 1.5],
            (0..8).map(|c| c as f64 * 0.125).collect(),
            vec![-0.25, 0.0, 0.25, 0.75],
        ],
    };
    let alpha = ScalingVector::new(vec![1.0, 2.0, 0.5, 1.0])?;
    let layer = QuantizedLayer::new(2, 3, bits, labels, &books, &alpha)?;

    let blob = pack(&layer)?;
    let back = unpack(&blob)?;
    assert_eq!(back, layer);
    assert_eq!(pack(&back)?.as_bytes(), blob.as_bytes());

    let r = size_report(&layer);
    println!("{} bytes: labels {}, codebooks {}, scales {}", r.total_bytes, r.label_bytes, r.codebook_bytes, r.alpha_bytes);
    println!("label bits/weight {:.4}", r.label_bits_per_weight);
    println!("{:?}", dequantize(&back)?.row(1));
    Ok(())
}

fn main() -> skim::Result<()> {
    run_example()
}
