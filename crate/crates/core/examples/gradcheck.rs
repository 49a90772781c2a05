//! Central finite differences against backprop for the full training loss
//! of a tiny model, across every parameter group.

use medmoe::harness::{init_model, LossConfig, TrainConfig};
use medmoe::moe::ActivationCounter;
use medmoe::ndtensor::check::grad_check_params;
use medmoe::synthcorpus::{generate_corpus, CorpusConfig, Dataset};

fn main() -> medmoe::Result<()> {
    let dir = std::env::temp_dir().join("medmoe-gradcheck");
    let corpus = CorpusConfig {
        height: 32,
        width: 32,
        samples_per_modality: 4,
        seed: 1,
        ..Default::default()
    };
    generate_corpus(&corpus, &dir)?;
    let ds = Dataset::open(&dir)?;
    let cfg = TrainConfig {
        batch_size: 4,
        experts: 2,
        embed_dim: 16,
        router_hidden: 8,
        widths: vec![4, 8, 8, 8],
        seed: 3,
        ..Default::default()
    };
    let (model, store) = init_model(&cfg, &ds)?;
    let batch = ds.load_batch(&[0, 5, 10, 15])?;
    let loss = LossConfig::from(&cfg);
    let names: Vec<String> = store.iter().filter(|(_, t)| t.requires_grad()).map(|(k, _)| k.clone()).collect();
    let t = std::time::Instant::now();
    let report = grad_check_params(&store, &names, 1e-5, 3, |ctx| {
        let mut counter = ActivationCounter::new(cfg.experts);
        Ok(model.train_pass(ctx, &batch, &loss, &mut counter)?.total)
    })?;
    println!(
        "{} tensors, {} coordinates: max relative error {:.3e}, max absolute error {:.3e} ({:.1}s)",
        names.len(),
        report.checked,
        report.max_rel_error,
        report.max_abs_error,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
