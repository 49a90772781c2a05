//! Linear probes on frozen image embeddings with shrinking label budgets.
//!
//! `cargo run --release --example linear_probe -- [checkpoint] [dataset]`

mod common;

use medmoe::harness::linear_probe;
use medmoe::Error;

fn main() -> medmoe::Result<()> {
    let (ck, ds) = common::checkpoint_and_data()?;
    for fraction in [1.0, 0.5, 0.1, 0.05, 0.01] {
        match linear_probe(&ck, &ds, fraction, 0) {
            Ok(r) => println!("fraction {fraction:<5} {:>4} labelled  accuracy {:.3}", r.train_samples, r.accuracy),
            Err(Error::InsufficientData(why)) => println!("fraction {fraction:<5} skipped: {why}"),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}
