use std::path::PathBuf;

use medmoe::harness::{train_on, Checkpoint, TrainConfig};
use medmoe::synthcorpus::{generate_corpus, CorpusConfig, Dataset};

/// `<checkpoint> [dataset]` from the command line, or else a tiny corpus
/// and a short training run under the system temp directory.
pub fn checkpoint_and_data() -> medmoe::Result<(Checkpoint, Dataset)> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Some(ck) = args.first() {
        let ck = Checkpoint::load(&PathBuf::from(ck))?;
        let dir = args.get(1).map(PathBuf::from).unwrap_or_else(|| ck.config.dataset.clone());
        let mut ds = Dataset::open(&dir)?;
        ds.preload()?;
        return Ok((ck, ds));
    }
    let dir = std::env::temp_dir().join("medmoe-example-corpus");
    generate_corpus(
        &CorpusConfig {
            samples_per_modality: 40,
            seed: 7,
            ..Default::default()
        },
        &dir,
    )?;
    let mut ds = Dataset::open(&dir)?;
    ds.preload()?;
    let cfg = TrainConfig {
        dataset: dir,
        batch_size: 16,
        steps: 150,
        widths: vec![8, 16, 16, 32],
        embed_dim: 32,
        router_hidden: 16,
        seed: 1,
        ..Default::default()
    };
    eprintln!("no checkpoint given; training a small model for {} steps", cfg.steps);
    Ok((train_on(&cfg, &ds, |_| {})?.checkpoint, ds))
}
