//! Word-to-region attention heatmaps (PGM) and the routed expert's scale
//! weights for a few samples.
//!
//! `cargo run --release --example export_attention -- [checkpoint] [dataset]`

mod common;

use medmoe::harness::export_attention;

fn main() -> medmoe::Result<()> {
    let (ck, ds) = common::checkpoint_and_data()?;
    let root = std::env::temp_dir().join("medmoe-attention");
    let (_, val) = ds.split();
    for &i in val.iter().step_by(val.len().div_ceil(4).max(1)) {
        let dir = root.join(format!("sample{:04}", ds.records[i].id));
        let r = export_attention(&ck, &ds, i, &dir)?;
        let beta: Vec<String> = r.mean_beta.iter().map(|b| format!("{b:.3}")).collect();
        println!(
            "sample {} (modality {}): expert {}, beta per level [{}], {} maps in {}",
            ds.records[i].id,
            ds.records[i].modality,
            r.expert,
            beta.join(", "),
            r.maps.len(),
            dir.display()
        );
    }
    Ok(())
}
