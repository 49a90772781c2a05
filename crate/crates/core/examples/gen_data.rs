//! Writes a synthetic corpus and shows a few of its records.
//!
//! `cargo run --example gen_data -- <dir> [seed]`

use medmoe::synthcorpus::{generate_corpus, CorpusConfig, Dataset};

fn main() -> medmoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "data".into());
    let seed = args.next().map(|s| s.parse().expect("seed must be an integer")).unwrap_or(0);
    let cfg = CorpusConfig { seed, ..Default::default() };
    let records = generate_corpus(&cfg, dir.as_ref())?;
    let ds = Dataset::open(dir.as_ref())?;
    let (train, val) = ds.split();
    println!("{} samples, {} train / {} val, vocabulary of {}", records.len(), train.len(), val.len(), ds.vocab.len());
    for r in records.iter().step_by(cfg.samples_per_modality / 2) {
        let words: Vec<&str> = r.token_ids.iter().map(|&t| ds.vocab.tokens[t].as_str()).collect();
        println!("#{:<4} modality {} class {}  {}", r.id, r.modality, r.class, words.join(" "));
    }
    Ok(())
}
