//! SGD-with-momentum training loop and its metrics log.

use std::collections::BTreeMap;
use std::fs;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, VERSION};
use super::config::{RouterInput, TrainConfig};
use super::eval::run_inference;
use super::model::{LossConfig, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::moe::ActivationCounter;
use crate::ndtensor::{Ctx, ParamStore};
use crate::objectives::LossBundle;
use crate::synthcorpus::Dataset;

/// One metrics-log record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub bundle: LossBundle,
    pub aux_parts: [f64; 3],
    pub route_acc_text: f64,
    pub route_acc_image: f64,
    /// Samples served by each expert during this step.
    pub activations: Vec<u64>,
}

impl StepRecord {
    /// Space-separated `key=value` pairs. Floats use Rust's shortest
    /// round-trip formatting, so identical runs give identical lines.
    pub fn to_line(&self) -> String {
        let b = &self.bundle;
        let mut s = format!(
            "step={} total={} global={} local={} aux={} aux_head={} aux_text_router={} aux_image_router={} route_acc_text={} route_acc_image={}",
            self.step,
            b.total,
            b.global_loss,
            b.local_loss,
            b.aux_loss,
            self.aux_parts[0],
            self.aux_parts[1],
            self.aux_parts[2],
            self.route_acc_text,
            self.route_acc_image
        );
        for (k, n) in self.activations.iter().enumerate() {
            s.push_str(&format!(" act{k}={n}"));
        }
        s
    }

    pub fn parse_line(line: &str) -> BTreeMap<String, String> {
        line.split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn metrics_text(&self) -> String {
        self.records.iter().map(|r| r.to_line() + "\n").collect()
    }
}

fn accuracy(pred: &[usize], target: &[usize]) -> f64 {
    pred.iter().zip(target).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Micro-batch `u` of the run: epochs are fresh permutations of the
/// training split drawn from `(seed, epoch)`, partial tail batches dropped.
struct Shuffle {
    train: Vec<usize>,
    batch: usize,
    seed: u64,
    epoch: Option<usize>,
    order: Vec<usize>,
}

impl Shuffle {
    fn batch(&mut self, u: usize) -> &[usize] {
        let per_epoch = self.train.len() / self.batch;
        let epoch = u / per_epoch;
        if self.epoch != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(1 + epoch as u64);
            self.order = self.train.clone();
            self.order.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        let pos = (u % per_epoch) * self.batch;
        &self.order[pos..pos + self.batch]
    }
}

fn non_finite(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFiniteOutput { .. } | Error::NonFiniteInput { .. } => Error::NonFiniteLoss { step },
        other => other,
    }
}

/// Fresh model and parameters for `cfg` on `ds`.
pub fn init_model(cfg: &TrainConfig, ds: &Dataset) -> Result<(Model, ParamStore)> {
    let model = Model::new(ModelConfig::new(cfg, ds.vocab.len(), ds.vocab.modalities))?;
    let mut store = ParamStore::new();
    model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    Ok((model, store))
}

/// Trains on an opened dataset without touching the file system.
/// `on_step` sees every record as it is produced.
pub fn train_on(cfg: &TrainConfig, ds: &Dataset, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    train_inner(cfg, ds, &mut on_step, &mut |_, _| Ok(()))
}

type EvalHook<'a> = dyn FnMut(usize, &ParamStore) -> Result<()> + 'a;

fn train_inner(
    cfg: &TrainConfig,
    ds: &Dataset,
    on_step: &mut dyn FnMut(&StepRecord),
    on_eval: &mut EvalHook<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (model, mut store) = init_model(cfg, ds)?;
    let (train, _) = ds.split();
    if train.len() < cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "training split has {} samples, fewer than batch_size {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let mut shuffle = Shuffle {
        train,
        batch: cfg.batch_size,
        seed: cfg.seed,
        epoch: None,
        order: Vec::new(),
    };
    let loss_cfg = LossConfig::from(cfg);
    let mut velocity: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut records = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        store.zero_grad();
        let mut sum = LossBundle::combine(0.0, 0.0, 0.0, cfg.tau, cfg.lambda);
        let mut aux_parts = [0.0; 3];
        let (mut acc_t, mut acc_i) = (0.0, 0.0);
        let mut counter = ActivationCounter::new(cfg.experts);
        for a in 0..cfg.grad_accum {
            let idx = shuffle.batch((step - 1) * cfg.grad_accum + a).to_vec();
            let batch = ds.load_batch(&idx)?;
            let mut ctx = Ctx::new(&store, true);
            let pass = model
                .train_pass(&mut ctx, &batch, &loss_cfg, &mut counter)
                .map_err(non_finite(step))?;
            if !pass.bundle.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let (mut g, bn) = ctx.finish();
            g.backward(pass.total).map_err(non_finite(step))?;
            g.accumulate_param_grads(&mut store)?;
            bn.apply(&mut store)?;
            let k = cfg.grad_accum as f64;
            let b = &pass.bundle;
            sum = LossBundle::combine(
                sum.global_loss + b.global_loss / k,
                sum.local_loss + b.local_loss / k,
                sum.aux_loss + b.aux_loss / k,
                cfg.tau,
                cfg.lambda,
            );
            for (s, p) in aux_parts.iter_mut().zip(pass.aux_parts) {
                *s += p / k;
            }
            let targets = model.router_targets(&batch.modality);
            acc_t += accuracy(&pass.text_selected, &targets) / k;
            acc_i += accuracy(&pass.image_selected, &targets) / k;
        }
        let scale = 1.0 / cfg.grad_accum as f64;
        for (name, t) in store.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let n = t.numel();
            let v = velocity.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            for (vi, gi) in v.iter_mut().zip(&grad) {
                *vi = cfg.momentum * *vi + gi * scale;
            }
            for (p, vi) in t.data_mut().iter_mut().zip(v.iter()) {
                *p -= cfg.lr * vi;
            }
            if t.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
        }

        let rec = StepRecord {
            step,
            bundle: sum,
            aux_parts,
            route_acc_text: acc_t,
            route_acc_image: acc_i,
            activations: counter.samples.clone(),
        };
        on_step(&rec);
        records.push(rec);
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < cfg.steps {
            on_eval(step, &store)?;
        }
    }

    store.zero_grad();
    store.round_to_f32();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            version: VERSION,
            params: store,
            config: cfg.clone(),
            step: cfg.steps as u64,
        },
        records,
    })
}

/// Full run: opens `cfg.dataset`, trains, and writes into `cfg.out`:
/// `checkpoint.mmck`, `metrics.log` (one record per step), `eval.log`
/// (validation routing at each cadence point and at the end) and
/// `timing.log` (wall-clock per step, kept apart so `metrics.log` stays
/// reproducible).
pub fn train(cfg: &TrainConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut ds = Dataset::open(&cfg.dataset)?;
    ds.preload()?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let ckpt_path = cfg.out.join("checkpoint.mmck");
    let mut metrics = String::new();
    let mut timing = String::new();
    let mut eval_log = String::new();
    let (_, val) = ds.split();
    let start = Instant::now();
    let mut last = start;

    let mut step_hook = |r: &StepRecord| {
        metrics.push_str(&r.to_line());
        metrics.push('\n');
        let now = Instant::now();
        timing.push_str(&format!(
            "step={} seconds={:.4} elapsed={:.2}\n",
            r.step,
            (now - last).as_secs_f64(),
            (now - start).as_secs_f64()
        ));
        last = now;
        on_step(r);
    };
    let model_cfg = ModelConfig::new(cfg, ds.vocab.len(), ds.vocab.modalities);
    let mut eval_hook = |step: usize, store: &ParamStore| -> Result<()> {
        let mut snap = store.clone();
        snap.zero_grad();
        snap.round_to_f32();
        let ck = Checkpoint {
            version: VERSION,
            params: snap,
            config: cfg.clone(),
            step: step as u64,
        };
        ck.save(&ckpt_path)?;
        let model = Model::new(model_cfg.clone())?;
        let s = run_inference(&model, &ck.params, &ds, &val, RouterInput::Image, cfg.tau, cfg.batch_size)?;
        eval_log.push_str(&format!("step={step} {}\n", s.to_line()));
        Ok(())
    };
    let out = train_inner(cfg, &ds, &mut step_hook, &mut eval_hook)?;

    let model = Model::new(model_cfg)?;
    let s = run_inference(&model, &out.checkpoint.params, &ds, &val, RouterInput::Image, cfg.tau, cfg.batch_size)?;
    eval_log.push_str(&format!("step={} {}\n", cfg.steps, s.to_line()));
    out.checkpoint.save(&ckpt_path)?;
    for (name, text) in [("metrics.log", &metrics), ("timing.log", &timing), ("eval.log", &eval_log)] {
        let p = cfg.out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(out)
}
