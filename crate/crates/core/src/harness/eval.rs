//! Inference-side tools: routed inference summaries, zero-shot
//! classification, linear probing and attention-map export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::RouterInput;
use super::model::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::moe::{argmax, ActivationCounter};
use crate::ndtensor::{kernels, Ctx, ParamStore};
use crate::synthcorpus::{Dataset, Vocab};

pub const PROBE_ITERATIONS: usize = 500;
pub const PROBE_LR: f64 = 0.1;

/// Rebuilds the model described by a checkpoint.
pub fn model_for(ckpt: &Checkpoint) -> Result<Model> {
    Model::new(ModelConfig::infer(&ckpt.config, &ckpt.params)?)
}

/// Aggregates of one routed inference sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceSummary {
    pub samples: usize,
    /// Expert index → samples it served.
    pub histogram: BTreeMap<usize, u64>,
    /// `[modality][expert]` sample counts.
    pub by_modality: Vec<Vec<u64>>,
    pub route_acc_text: f64,
    pub route_acc_image: f64,
    /// `[modality][level]` mean β of the expert that served each sample.
    pub mean_beta: Vec<Vec<f64>>,
}

impl InferenceSummary {
    /// Largest share of any single expert within each modality.
    pub fn concentration(&self) -> Vec<f64> {
        self.by_modality
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    *row.iter().max().expect("non-empty") as f64 / n as f64
                }
            })
            .collect()
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "samples={} val_route_acc_text={} val_route_acc_image={}",
            self.samples, self.route_acc_text, self.route_acc_image
        );
        for (k, n) in &self.histogram {
            s.push_str(&format!(" act{k}={n}"));
        }
        for (m, betas) in self.mean_beta.iter().enumerate() {
            for (l, b) in betas.iter().enumerate() {
                s.push_str(&format!(" beta_m{m}_l{}={b}", l + 1));
            }
        }
        s
    }
}

/// Runs routed inference over `indices` in eval mode, `chunk` samples at a
/// time. Panics if any sample is served by other than exactly one expert.
pub fn run_inference(
    model: &Model,
    store: &ParamStore,
    ds: &Dataset,
    indices: &[usize],
    router_input: RouterInput,
    tau: f64,
    chunk: usize,
) -> Result<InferenceSummary> {
    let k = model.cfg.experts;
    let nl = model.cfg.widths.len();
    let nm = ds.vocab.modalities;
    let mut counter = ActivationCounter::new(k);
    let mut by_modality = vec![vec![0u64; k]; nm];
    let mut beta_sum = vec![vec![0.0; nl]; nm];
    let mut per_mod = vec![0usize; nm];
    let (mut hit_t, mut hit_i) = (0usize, 0usize);
    for part in indices.chunks(chunk.max(1)) {
        let batch = ds.load_batch(part)?;
        let mut ctx = Ctx::new(store, false);
        let inf = model.infer(&mut ctx, &batch, router_input, tau, &mut counter)?;
        assert!(
            counter.last_batch.iter().all(|&n| n == 1),
            "hard routing violated: {:?}",
            counter.last_batch
        );
        let targets = model.router_targets(&batch.modality);
        let beta = ctx.g.value(inf.local.beta);
        let m = beta.shape()[2] * beta.shape()[3];
        for (i, &y) in batch.modality.iter().enumerate() {
            hit_t += usize::from(inf.encoded.text_route.selected[i] == targets[i]);
            hit_i += usize::from(inf.encoded.image_route.selected[i] == targets[i]);
            by_modality[y][inf.selected[i]] += 1;
            per_mod[y] += 1;
            for (l, acc) in beta_sum[y].iter_mut().enumerate() {
                let s = &beta.data()[(i * nl + l) * m..(i * nl + l + 1) * m];
                *acc += s.iter().sum::<f64>() / m as f64;
            }
        }
    }
    let n = indices.len();
    let mean_beta = beta_sum
        .iter()
        .zip(&per_mod)
        .map(|(row, &c)| row.iter().map(|b| if c == 0 { 0.0 } else { b / c as f64 }).collect())
        .collect();
    let summary = InferenceSummary {
        samples: n,
        histogram: counter.histogram(),
        by_modality,
        route_acc_text: hit_t as f64 / n.max(1) as f64,
        route_acc_image: hit_i as f64 / n.max(1) as f64,
        mean_beta,
    };
    assert_eq!(counter.total_samples(), n as u64, "activation counts must equal sample count");
    Ok(summary)
}

/// Expert index → samples served, over the whole dataset, routed per the
/// checkpoint's `router_input`.
pub fn count_active_experts(ckpt: &Checkpoint, ds: &Dataset) -> Result<InferenceSummary> {
    let model = model_for(ckpt)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    run_inference(
        &model,
        &ckpt.params,
        ds,
        &all,
        ckpt.config.router_input,
        ckpt.config.tau,
        ckpt.config.batch_size,
    )
}

/// Class descriptions for zero-shot classification, keyed by (modality, class).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTable {
    pub modalities: usize,
    pub classes: usize,
    pub prompts: BTreeMap<(usize, usize), Vec<usize>>,
}

impl PromptTable {
    /// Modality token followed by both finding words of the class.
    pub fn from_vocab(v: &Vocab) -> Self {
        let mut prompts = BTreeMap::new();
        for m in 0..v.modalities {
            for c in 0..v.classes {
                prompts.insert((m, c), v.prompt(m, c));
            }
        }
        Self {
            modalities: v.modalities,
            classes: v.classes,
            prompts,
        }
    }

    pub fn check(&self) -> Result<()> {
        for m in 0..self.modalities {
            for c in 0..self.classes {
                if self.prompts.get(&(m, c)).is_none_or(Vec::is_empty) {
                    return Err(Error::MissingPrompt { modality: m, class: c });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotReport {
    pub per_modality: Vec<f64>,
    pub macro_avg: f64,
    /// Micro average over all evaluated samples.
    pub overall: f64,
    pub samples: usize,
}

/// Index of the candidate with the highest cosine similarity to `v`.
pub fn zero_shot_predict(v: &[f64], candidates: &[Vec<f64>]) -> usize {
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| {
            let nc = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / (nv * nc)
        })
        .collect();
    argmax(&scores)
}

/// Scores precomputed image embeddings against prompt embeddings; each
/// sample competes only among the classes of its own modality.
pub fn zero_shot_score(
    v_g: &[Vec<f64>],
    modality: &[usize],
    class: &[usize],
    prompt_emb: &BTreeMap<(usize, usize), Vec<f64>>,
    modalities: usize,
    classes: usize,
) -> Result<ZeroShotReport> {
    let mut hits = vec![0usize; modalities];
    let mut totals = vec![0usize; modalities];
    for ((v, &m), &c) in v_g.iter().zip(modality).zip(class) {
        let cands = (0..classes)
            .map(|k| {
                prompt_emb
                    .get(&(m, k))
                    .cloned()
                    .ok_or(Error::MissingPrompt { modality: m, class: k })
            })
            .collect::<Result<Vec<_>>>()?;
        totals[m] += 1;
        hits[m] += usize::from(zero_shot_predict(v, &cands) == c);
    }
    let per_modality: Vec<f64> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect();
    let present: Vec<f64> = per_modality
        .iter()
        .zip(&totals)
        .filter(|(_, &t)| t > 0)
        .map(|(&a, _)| a)
        .collect();
    let samples: usize = totals.iter().sum();
    Ok(ZeroShotReport {
        macro_avg: present.iter().sum::<f64>() / present.len().max(1) as f64,
        overall: hits.iter().sum::<usize>() as f64 / samples.max(1) as f64,
        per_modality,
        samples,
    })
}

/// Unit-norm global image embeddings for dataset positions, eval mode.
pub fn image_embeddings(model: &Model, store: &ParamStore, ds: &Dataset, indices: &[usize], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(indices.len());
    for part in indices.chunks(chunk.max(1)) {
        let batch = ds.load_batch(part)?;
        out.extend(model.embed_images(store, &batch.images)?);
    }
    Ok(out)
}

/// Zero-shot accuracy on `indices`: each image is matched against the
/// prompt embeddings of its modality's classes.
pub fn zero_shot_eval(ckpt: &Checkpoint, ds: &Dataset, indices: &[usize], prompts: &PromptTable) -> Result<ZeroShotReport> {
    prompts.check()?;
    let model = model_for(ckpt)?;
    let keys: Vec<(usize, usize)> = prompts.prompts.keys().copied().collect();
    let reports: Vec<Vec<usize>> = keys.iter().map(|k| prompts.prompts[k].clone()).collect();
    let emb = model.embed_reports(&ckpt.params, &reports)?;
    let prompt_emb: BTreeMap<_, _> = keys.into_iter().zip(emb).collect();
    let v_g = image_embeddings(&model, &ckpt.params, ds, indices, ckpt.config.batch_size)?;
    let modality: Vec<usize> = indices.iter().map(|&i| ds.records[i].modality).collect();
    let class: Vec<usize> = indices.iter().map(|&i| ds.records[i].class).collect();
    zero_shot_score(&v_g, &modality, &class, &prompt_emb, prompts.modalities, prompts.classes)
}

/// Softmax-regression weights `[D+1][C]`, the last row being the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weights: Vec<Vec<f64>>,
    pub classes: usize,
}

impl LinearClassifier {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..self.classes)
            .map(|c| self.weights[d][c] + x.iter().enumerate().map(|(j, xj)| xj * self.weights[j][c]).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let hits = x.iter().zip(y).filter(|(xi, &yi)| self.predict(xi) == yi).count();
        hits as f64 / x.len().max(1) as f64
    }
}

/// Full-batch gradient descent on mean softmax cross-entropy from zero
/// weights.
pub fn fit_softmax_regression(x: &[Vec<f64>], y: &[usize], classes: usize, iters: usize, lr: f64) -> Result<LinearClassifier> {
    if x.is_empty() {
        return Err(Error::InsufficientData("no training samples".into()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    let d = x[0].len();
    let mut clf = LinearClassifier {
        weights: vec![vec![0.0; classes]; d + 1],
        classes,
    };
    let n = x.len() as f64;
    for _ in 0..iters {
        let mut grad = vec![vec![0.0; classes]; d + 1];
        for (xi, &yi) in x.iter().zip(y) {
            let l = clf.logits(xi);
            let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|v| (v - mx).exp()).sum();
            for c in 0..classes {
                let p = (l[c] - mx).exp() / z - f64::from(u8::from(c == yi));
                for j in 0..d {
                    grad[j][c] += p * xi[j] / n;
                }
                grad[d][c] += p / n;
            }
        }
        for (w, g) in clf.weights.iter_mut().zip(&grad) {
            for (wc, gc) in w.iter_mut().zip(g) {
                *wc -= lr * gc;
            }
        }
    }
    Ok(clf)
}

/// Per class, a seeded random `round(fraction · count)` of `pool`.
pub fn stratified_subset(pool: &[usize], labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = pool.iter().copied().filter(|&i| labels[i] == c).collect();
        let take = (fraction * members.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::InsufficientData(format!(
                "fraction {fraction} leaves no sample of class {c} ({} available)",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub fraction: f64,
    pub train_samples: usize,
    pub accuracy: f64,
}

/// Linear probe of frozen `v_g` features on the class label: fit on a
/// stratified `fraction` of the training split, score on the validation split.
pub fn linear_probe(ckpt: &Checkpoint, ds: &Dataset, fraction: f64, seed: u64) -> Result<ProbeReport> {
    let labels: Vec<usize> = ds.records.iter().map(|r| r.class).collect();
    let classes = ds.vocab.classes;
    let (train, val) = ds.split();
    let subset = stratified_subset(&train, &labels, classes, fraction, seed)?;
    let model = model_for(ckpt)?;
    let chunk = ckpt.config.batch_size;
    let xtr = image_embeddings(&model, &ckpt.params, ds, &subset, chunk)?;
    let ytr: Vec<usize> = subset.iter().map(|&i| labels[i]).collect();
    let xva = image_embeddings(&model, &ckpt.params, ds, &val, chunk)?;
    let yva: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
    let clf = fit_softmax_regression(&xtr, &ytr, classes, PROBE_ITERATIONS, PROBE_LR)?;
    Ok(ProbeReport {
        fraction,
        train_samples: subset.len(),
        accuracy: clf.accuracy(&xva, &yva),
    })
}

/// Binary PGM bytes: `P5\n{w} {h}\n255\n` then `w·h` row-major bytes.
pub fn pgm_bytes(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), w * h, "pixel count must match the header");
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Min-max scaling to `0..=255` with rounding; a constant map becomes all zeros.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    pub maps: Vec<PathBuf>,
    pub summary: PathBuf,
    pub expert: usize,
    pub mean_beta: Vec<f64>,
}

/// Writes one heatmap per valid token of dataset position `index` plus
/// `scale_weights.txt` with the routed expert's mean β per level.
pub fn export_attention(ckpt: &Checkpoint, ds: &Dataset, index: usize, out_dir: &Path) -> Result<AttentionExport> {
    if index >= ds.len() {
        return Err(Error::IndexOutOfRange { index, len: ds.len() });
    }
    let model = model_for(ckpt)?;
    let batch = ds.load_batch(&[index])?;
    let mut ctx = Ctx::new(&ckpt.params, false);
    let mut counter = ActivationCounter::new(model.cfg.experts);
    let inf = model.infer(&mut ctx, &batch, ckpt.config.router_input, ckpt.config.tau, &mut counter)?;
    let (gh, gw) = inf.local.grid_size;
    let (h, w) = (batch.images.shape()[2], batch.images.shape()[3]);
    let a = ctx.g.value(inf.attention.a);
    let m = gh * gw;
    let valid = batch.tokens.valid_len[0];
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut maps = Vec::with_capacity(valid);
    for i in 0..valid {
        let row = &a.data()[i * m..(i + 1) * m];
        let up = kernels::bilinear_forward(1, gh, gw, h, w, row);
        let name = &ds.vocab.tokens[batch.tokens.row(0)[i]];
        let path = out_dir.join(format!("token{i:02}_{name}.pgm"));
        fs::write(&path, pgm_bytes(w, h, &to_gray(&up))).map_err(|e| Error::io(&path, e))?;
        maps.push(path);
    }
    let nl = model.cfg.widths.len();
    let beta = ctx.g.value(inf.local.beta);
    let mean_beta: Vec<f64> = (0..nl)
        .map(|l| beta.data()[l * m..(l + 1) * m].iter().sum::<f64>() / m as f64)
        .collect();
    let mut text = format!(
        "sample={} modality={} class={} expert={}\n",
        batch.ids[0], batch.modality[0], batch.class_label[0], inf.selected[0]
    );
    for (l, b) in mean_beta.iter().enumerate() {
        text.push_str(&format!("level{}={b}\n", l + 1));
    }
    let summary = out_dir.join("scale_weights.txt");
    fs::write(&summary, text).map_err(|e| Error::io(&summary, e))?;
    Ok(AttentionExport {
        maps,
        summary,
        expert: inf.selected[0],
        mean_beta,
    })
}
