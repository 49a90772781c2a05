//! Trains a small model on a small corpus and prints the loss trajectory.

use medmoe::harness::{train_on, TrainConfig};
use medmoe::synthcorpus::{generate_corpus, CorpusConfig, Dataset};

fn main() -> medmoe::Result<()> {
    let dir = std::env::temp_dir().join("medmoe-train-tiny");
    generate_corpus(
        &CorpusConfig {
            height: 32,
            width: 32,
            samples_per_modality: 40,
            seed: 3,
            ..Default::default()
        },
        &dir,
    )?;
    let mut ds = Dataset::open(&dir)?;
    ds.preload()?;
    let cfg = TrainConfig {
        dataset: dir,
        batch_size: 16,
        steps: 200,
        experts: 4,
        widths: vec![8, 16, 16, 32],
        embed_dim: 32,
        router_hidden: 16,
        seed: 5,
        ..Default::default()
    };
    let out = train_on(&cfg, &ds, |r| {
        if r.step % 20 == 0 {
            println!(
                "step {:>3}  total {:.4}  global {:.4}  local {:.4}  aux {:.4}  router acc {:.2}/{:.2}  load {:?}",
                r.step,
                r.bundle.total,
                r.bundle.global_loss,
                r.bundle.local_loss,
                r.bundle.aux_loss,
                r.route_acc_text,
                r.route_acc_image,
                r.activations
            );
        }
    })?;
    let path = std::env::temp_dir().join("medmoe-train-tiny.mmck");
    out.checkpoint.save(&path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}
