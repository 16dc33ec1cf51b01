//! Central-difference gradient check on random graphs that use every op.
//!
//! ```text
//! cargo run --release --example grad_check -- [nets]
//! ```

use accgrad::netgen::{all_op_kinds, check_seed};

fn main() -> accgrad::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(100);
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        worst = worst.max(check_seed(seed, 1e-6)?);
    }
    println!("{n} nets over ops {:?}", all_op_kinds());
    println!("worst relative error {worst:.3e}");
    Ok(())
}
