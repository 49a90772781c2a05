use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use medmoe::harness::{self, Checkpoint, PromptTable, RouterInput, TrainConfig};
use medmoe::synthcorpus::{generate_corpus, CorpusConfig, Dataset};

#[derive(Parser)]
#[command(name = "medmoe", version, about = "Hard-routed mixture-of-experts lab on a synthetic image/report corpus")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus directory.
    GenData(GenData),
    /// Train and write checkpoint.mmck, metrics.log, eval.log, timing.log into `out`.
    Train(Train),
    /// Zero-shot accuracy per modality.
    EvalZeroshot(Eval),
    /// Linear probe on frozen image embeddings.
    Probe(Probe),
    /// Word-level attention heatmaps for one sample.
    ExportAttn(ExportAttn),
    /// Expert activation histogram over the whole dataset.
    CountExperts(Eval),
    /// Print checkpoint entries and configuration.
    InspectCkpt {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    samples_per_modality: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    modalities: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    max_distractors: usize,
}

/// Every training key as an optional `--key value` override.
#[derive(Args)]
struct Train {
    /// `key = value` file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    experts: Option<String>,
    #[arg(long)]
    align_level: Option<String>,
    #[arg(long)]
    embed_dim: Option<String>,
    #[arg(long)]
    router_hidden: Option<String>,
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    router_input: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    grad_accum: Option<String>,
    #[arg(long)]
    local_loss_denominator: Option<String>,
    #[arg(long)]
    symmetric_global: Option<String>,
    /// Print every n-th step record to stderr.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

impl Train {
    fn overrides(&self) -> Vec<(String, String)> {
        let pairs = [
            ("dataset", &self.dataset),
            ("out", &self.out),
            ("batch_size", &self.batch_size),
            ("steps", &self.steps),
            ("lr", &self.lr),
            ("momentum", &self.momentum),
            ("tau", &self.tau),
            ("lambda", &self.lambda),
            ("experts", &self.experts),
            ("align_level", &self.align_level),
            ("embed_dim", &self.embed_dim),
            ("router_hidden", &self.router_hidden),
            ("widths", &self.widths),
            ("router_input", &self.router_input),
            ("eval_every", &self.eval_every),
            ("grad_accum", &self.grad_accum),
            ("local_loss_denominator", &self.local_loss_denominator),
            ("symmetric_global", &self.symmetric_global),
        ];
        let mut out: Vec<(String, String)> = pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        out.push(("seed".into(), self.seed.to_string()));
        out
    }
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    /// Defaults to the dataset recorded in the checkpoint.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Overrides the checkpoint's inference routing head.
    #[arg(long)]
    router_input: Option<RouterInputArg>,
    /// Samples to evaluate: validation split, training split or everything.
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RouterInputArg {
    Text,
    Image,
}

#[derive(Args)]
struct Probe {
    #[command(flatten)]
    eval: Eval,
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    /// Seed of the stratified subset draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportAttn {
    #[command(flatten)]
    eval: Eval,
    /// Sample id as listed in the manifest.
    #[arg(long)]
    sample: u64,
    #[arg(long)]
    out: PathBuf,
}

fn open(e: &Eval) -> Result<(Checkpoint, Dataset)> {
    let mut ck = Checkpoint::load(&e.ckpt).with_context(|| format!("loading {}", e.ckpt.display()))?;
    if let Some(r) = e.router_input {
        ck.config.router_input = match r {
            RouterInputArg::Text => RouterInput::Text,
            RouterInputArg::Image => RouterInput::Image,
        };
    }
    let dir: &Path = e.dataset.as_deref().unwrap_or(&ck.config.dataset);
    let mut ds = Dataset::open(dir).with_context(|| format!("opening dataset {}", dir.display()))?;
    ds.preload()?;
    Ok((ck, ds))
}

fn split(ds: &Dataset, which: &str) -> Result<Vec<usize>> {
    let (train, val) = ds.split();
    Ok(match which {
        "val" => val,
        "train" => train,
        "all" => (0..ds.len()).collect(),
        other => anyhow::bail!("--split must be val, train or all, got {other}"),
    })
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData(a) => {
            let cfg = CorpusConfig {
                height: a.height,
                width: a.width,
                samples_per_modality: a.samples_per_modality,
                modalities: a.modalities,
                classes: a.classes,
                max_distractors: a.max_distractors,
                noise: a.noise,
                seed: a.seed,
            };
            let recs = generate_corpus(&cfg, &a.out)?;
            println!("wrote {} samples to {}", recs.len(), a.out.display());
        }
        Cmd::Train(a) => {
            let cfg = TrainConfig::from_sources(a.config.as_deref(), &a.overrides())?;
            let every = a.log_every.max(1);
            let out = harness::train(&cfg, |r| {
                if r.step % every == 0 || r.step == 1 {
                    eprintln!("{}", r.to_line());
                }
            })?;
            println!(
                "trained {} steps; checkpoint at {}",
                out.records.len(),
                cfg.out.join("checkpoint.mmck").display()
            );
        }
        Cmd::EvalZeroshot(e) => {
            let (ck, ds) = open(&e)?;
            let idx = split(&ds, &e.split)?;
            let r = harness::zero_shot_eval(&ck, &ds, &idx, &PromptTable::from_vocab(&ds.vocab))?;
            for (m, acc) in r.per_modality.iter().enumerate() {
                println!("modality={m} accuracy={acc:.4}");
            }
            println!("macro={:.4} overall={:.4} samples={}", r.macro_avg, r.overall, r.samples);
        }
        Cmd::Probe(p) => {
            let (ck, ds) = open(&p.eval)?;
            let r = harness::linear_probe(&ck, &ds, p.fraction, p.seed)?;
            println!("fraction={} train_samples={} accuracy={:.4}", r.fraction, r.train_samples, r.accuracy);
        }
        Cmd::ExportAttn(x) => {
            let (ck, ds) = open(&x.eval)?;
            let index = ds
                .records
                .iter()
                .position(|r| r.id == x.sample)
                .ok_or(medmoe::Error::IndexOutOfRange {
                    index: x.sample as usize,
                    len: ds.len(),
                })?;
            let r = harness::export_attention(&ck, &ds, index, &x.out)?;
            for p in &r.maps {
                println!("{}", p.display());
            }
            println!("{}", r.summary.display());
        }
        Cmd::CountExperts(e) => {
            let (ck, ds) = open(&e)?;
            let idx = split(&ds, &e.split)?;
            let model = harness::eval::model_for(&ck)?;
            let s = harness::run_inference(
                &model,
                &ck.params,
                &ds,
                &idx,
                ck.config.router_input,
                ck.config.tau,
                ck.config.batch_size,
            )?;
            for (k, n) in &s.histogram {
                println!("expert={k} samples={n}");
            }
            for (m, row) in s.by_modality.iter().enumerate() {
                println!("modality={m} per_expert={row:?}");
            }
            println!("total={}", s.histogram.values().sum::<u64>());
        }
        Cmd::InspectCkpt { ckpt } => {
            let ck = Checkpoint::load(&ckpt)?;
            print!("{}", ck.describe());
        }
    }
    Ok(())
}
