//! Runs hard-routed inference over the whole corpus with both routing heads
//! and prints how samples spread over experts.
//!
//! `cargo run --release --example count_experts -- [checkpoint] [dataset]`

mod common;

use medmoe::harness::eval::model_for;
use medmoe::harness::{run_inference, RouterInput};

fn main() -> medmoe::Result<()> {
    let (ck, ds) = common::checkpoint_and_data()?;
    let model = model_for(&ck)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    for ri in [RouterInput::Text, RouterInput::Image] {
        let s = run_inference(&model, &ck.params, &ds, &all, ri, ck.config.tau, 32)?;
        println!("router_input={ri}: {} samples, histogram {:?}", s.samples, s.histogram);
        for (m, row) in s.by_modality.iter().enumerate() {
            println!("  modality {m} -> {row:?}");
        }
        println!("  concentration per modality {:?}", s.concentration());
    }
    Ok(())
}
