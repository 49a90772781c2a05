//! Zero-shot classification of validation images against one prompt per
//! (modality, class).
//!
//! `cargo run --release --example zero_shot -- [checkpoint] [dataset]`

mod common;

use medmoe::harness::{zero_shot_eval, PromptTable};

fn main() -> medmoe::Result<()> {
    let (ck, ds) = common::checkpoint_and_data()?;
    let prompts = PromptTable::from_vocab(&ds.vocab);
    for ((m, c), p) in prompts.prompts.iter().take(3) {
        let words: Vec<&str> = p.iter().map(|&t| ds.vocab.tokens[t].as_str()).collect();
        println!("prompt ({m}, {c}): {}", words.join(" "));
    }
    let (_, val) = ds.split();
    let r = zero_shot_eval(&ck, &ds, &val, &prompts)?;
    for (m, a) in r.per_modality.iter().enumerate() {
        println!("modality {m}: {:.1}%", 100.0 * a);
    }
    println!("overall {:.1}% on {} samples (chance {:.1}%)", 100.0 * r.overall, r.samples, 100.0 / ds.vocab.classes as f64);
    Ok(())
}
