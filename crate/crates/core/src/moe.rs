//! Hard-routed mixture of experts over a feature pyramid.
//!
//! A router maps a global embedding to expert scores
//! `α = softmax(W2 · relu(W1 · x))` and picks `k* = argmax α` (lowest index
//! on ties). Only expert `k*` runs for a sample. Each expert projects every
//! pyramid level to `D` channels, resizes it onto the alignment grid, runs a
//! shared three-layer conv body over the levels, predicts per-location
//! scale weights `β` and fuses `V = Σ_l β_l ⊙ F_l`.
//!
//! The selected expert's output is used as-is (no `α` multiplier), so the
//! router receives gradient only from losses placed directly on its logits.

use std::collections::BTreeMap;

use rand::Rng;

use crate::encoders::FeaturePyramid;
use crate::error::{Error, Result};
use crate::ndtensor::{init_conv_bn, Ctx, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct RouterConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub experts: usize,
}

/// Two-layer bias-free MLP router stored under `{prefix}.w1`, `{prefix}.w2`.
#[derive(Debug, Clone)]
pub struct Router {
    pub prefix: String,
    pub cfg: RouterConfig,
}

/// Scores and per-sample selection for one batch.
#[derive(Debug, Clone)]
pub struct RouterDecision {
    /// Pre-softmax scores `[B, K]`.
    pub logits: Var,
    /// `α: [B, K]`, rows sum to one.
    pub alpha: Var,
    pub selected: Vec<usize>,
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Router {
    pub fn new(prefix: &str, cfg: RouterConfig) -> Result<Self> {
        if cfg.experts == 0 || cfg.hidden == 0 || cfg.input_dim == 0 {
            return Err(Error::InvalidConfig(format!("router dimensions must be positive: {cfg:?}")));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            cfg,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let c = &self.cfg;
        store.insert_he(&format!("{}.w1", self.prefix), &[c.input_dim, c.hidden], c.input_dim, rng)?;
        store.insert_he(&format!("{}.w2", self.prefix), &[c.hidden, c.experts], c.hidden, rng)
    }

    pub fn route(&self, ctx: &mut Ctx<'_>, input: Var) -> Result<RouterDecision> {
        let s = ctx.g.shape(input).to_vec();
        if s.len() != 2 || s[1] != self.cfg.input_dim {
            return Err(Error::shape("route", &s, &[0, self.cfg.input_dim]));
        }
        let w1 = ctx.p(&format!("{}.w1", self.prefix))?;
        let w2 = ctx.p(&format!("{}.w2", self.prefix))?;
        let h = ctx.g.matmul(input, w1)?;
        let h = ctx.g.relu(h)?;
        let logits = ctx.g.matmul(h, w2)?;
        let alpha = ctx.g.softmax(logits, 1)?;
        let k = self.cfg.experts;
        let selected = ctx.g.data(alpha).chunks(k).map(argmax).collect();
        Ok(RouterDecision { logits, alpha, selected })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertConfig {
    /// Channel widths of the incoming pyramid levels.
    pub level_widths: Vec<usize>,
    pub embed_dim: usize,
    pub body_layers: usize,
}

/// One expert branch, parameters under `expert{index}.`.
#[derive(Debug, Clone)]
pub struct Expert {
    pub index: usize,
    pub cfg: ExpertConfig,
}

/// Output of one expert on a (sub-)batch.
#[derive(Debug, Clone)]
pub struct ExpertOutput {
    /// Per-level maps after projection, alignment and the conv body, each `[b, D, h*, w*]`.
    pub per_scale: Vec<Var>,
    /// `β: [b, L, h*, w*]`, softmax over the level axis.
    pub beta: Var,
    /// `Σ_l β_l ⊙ F_l: [b, D, h*, w*]` before normalisation.
    pub fused: Var,
    /// Local grid `V: [b, M, D]` with unit-norm rows, `M = h*·w*`.
    pub grid: Var,
}

impl Expert {
    pub fn prefix(&self) -> String {
        format!("expert{}", self.index)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let p = self.prefix();
        let d = self.cfg.embed_dim;
        let levels = self.cfg.level_widths.len();
        for (l, &c) in self.cfg.level_widths.iter().enumerate() {
            store.insert_he(&format!("{p}.proj{}.w", l + 1), &[d, c, 1, 1], c, rng)?;
            store.insert_const(&format!("{p}.proj{}.b", l + 1), &[d], 0.0, true)?;
        }
        for i in 0..self.cfg.body_layers {
            init_conv_bn(store, &format!("{p}.body{}", i + 1), d, d, 3, rng)?;
        }
        store.insert_he(&format!("{p}.attn.w"), &[levels, levels * d, 1, 1], levels * d, rng)?;
        store.insert_const(&format!("{p}.attn.b"), &[levels], 0.0, true)
    }

    /// Runs the branch on `levels` (one `[b, C_l, h_l, w_l]` map per level),
    /// aligning everything to the spatial size of level `align_level` (1-based).
    pub fn forward(&self, ctx: &mut Ctx<'_>, levels: &[Var], align_level: usize) -> Result<ExpertOutput> {
        let nl = self.cfg.level_widths.len();
        if levels.len() != nl {
            return Err(Error::InvalidConfig(format!("expert expects {nl} levels, got {}", levels.len())));
        }
        if align_level < 1 || align_level > nl {
            return Err(Error::InvalidLevel {
                level: align_level,
                levels: nl,
            });
        }
        let p = self.prefix();
        let d = self.cfg.embed_dim;
        let target = ctx.g.shape(levels[align_level - 1]).to_vec();
        let (b, th, tw) = (target[0], target[2], target[3]);

        let mut aligned = Vec::with_capacity(nl);
        for (l, &x) in levels.iter().enumerate() {
            let w = ctx.p(&format!("{p}.proj{}.w", l + 1))?;
            let bias = ctx.p(&format!("{p}.proj{}.b", l + 1))?;
            let y = ctx.g.conv2d(x, w, 1, 0)?;
            let bias = ctx.g.reshape(bias, &[1, d, 1, 1])?;
            let y = ctx.g.add(y, bias)?;
            let s = ctx.g.shape(y);
            let y = if s[2] == th && s[3] == tw {
                y
            } else {
                ctx.g.bilinear_resize(y, th, tw)?
            };
            aligned.push(y);
        }

        // all levels share the body: stack them along the batch axis
        let mut body = ctx.g.concat(&aligned, 0)?;
        for i in 0..self.cfg.body_layers {
            body = ctx.conv_bn_relu(&format!("{p}.body{}", i + 1), body, 1, 1)?;
        }
        let per_scale = (0..nl)
            .map(|l| ctx.g.slice(body, 0, l * b, b))
            .collect::<Result<Vec<_>>>()?;

        let cat = ctx.g.concat(&per_scale, 1)?;
        let aw = ctx.p(&format!("{p}.attn.w"))?;
        let ab = ctx.p(&format!("{p}.attn.b"))?;
        let logits = ctx.g.conv2d(cat, aw, 1, 0)?;
        let ab = ctx.g.reshape(ab, &[1, nl, 1, 1])?;
        let logits = ctx.g.add(logits, ab)?;
        let beta = ctx.g.softmax(logits, 1)?;

        let mut fused = None;
        for (l, &f) in per_scale.iter().enumerate() {
            let bl = ctx.g.slice(beta, 1, l, 1)?;
            let term = ctx.g.mul(f, bl)?;
            fused = Some(match fused {
                None => term,
                Some(acc) => ctx.g.add(acc, term)?,
            });
        }
        let fused = fused.expect("at least one level");
        let flat = ctx.g.reshape(fused, &[b, d, th * tw])?;
        let grid = ctx.g.permute(flat, &[0, 2, 1])?;
        let grid = ctx.g.l2_normalize(grid, 2)?;
        Ok(ExpertOutput {
            per_scale,
            beta,
            fused,
            grid,
        })
    }
}

/// Expert invocation accounting.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActivationCounter {
    /// Grouped forward runs per expert.
    pub runs: Vec<u64>,
    /// Samples processed per expert.
    pub samples: Vec<u64>,
    /// Expert forward invocations seen by each sample of the latest batch.
    pub last_batch: Vec<u32>,
}

impl ActivationCounter {
    pub fn new(experts: usize) -> Self {
        Self {
            runs: vec![0; experts],
            samples: vec![0; experts],
            last_batch: Vec::new(),
        }
    }

    pub fn total_samples(&self) -> u64 {
        self.samples.iter().sum()
    }

    /// Expert index → samples routed to it.
    pub fn histogram(&self) -> BTreeMap<usize, u64> {
        self.samples.iter().copied().enumerate().collect()
    }

    /// `act{k}=n` pairs for the metrics log.
    pub fn to_metrics(&self) -> String {
        self.samples
            .iter()
            .enumerate()
            .map(|(k, n)| format!("act{k}={n}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Fused local representation for a full batch.
#[derive(Debug, Clone)]
pub struct LocalFeatures {
    /// `V_local: [B, M, D]` in original batch order.
    pub grid: Var,
    /// `β` of the expert that served each sample, `[B, L, h*, w*]`.
    pub beta: Var,
    pub grid_size: (usize, usize),
}

/// Runs only the selected expert for every sample. Samples are grouped by
/// expert so each expert executes at most once per batch; results are
/// reassembled in batch order.
pub fn local_features(
    ctx: &mut Ctx<'_>,
    pyramid: &FeaturePyramid,
    selected: &[usize],
    experts: &[Expert],
    align_level: usize,
    counter: &mut ActivationCounter,
) -> Result<LocalFeatures> {
    let k = experts.len();
    if let Some(&bad) = selected.iter().find(|&&s| s >= k) {
        return Err(Error::IndexOutOfRange { index: bad, len: k });
    }
    let b = ctx.g.shape(pyramid.levels[0])[0];
    if selected.len() != b {
        return Err(Error::shape("local_features", &[b], &[selected.len()]));
    }
    if align_level < 1 || align_level > pyramid.levels.len() {
        return Err(Error::InvalidLevel {
            level: align_level,
            levels: pyramid.levels.len(),
        });
    }
    if counter.runs.len() != k {
        *counter = ActivationCounter::new(k);
    }
    counter.last_batch = vec![0; b];

    let mut order = Vec::with_capacity(b);
    let mut grids = Vec::new();
    let mut betas = Vec::new();
    for (e, expert) in experts.iter().enumerate() {
        let idx: Vec<usize> = (0..b).filter(|&i| selected[i] == e).collect();
        if idx.is_empty() {
            continue;
        }
        let levels = if idx.len() == b {
            pyramid.levels.clone()
        } else {
            pyramid
                .levels
                .iter()
                .map(|&l| ctx.g.gather(l, &idx))
                .collect::<Result<Vec<_>>>()?
        };
        let out = expert.forward(ctx, &levels, align_level)?;
        counter.runs[e] += 1;
        counter.samples[e] += idx.len() as u64;
        for &i in &idx {
            counter.last_batch[i] += 1;
        }
        order.extend(idx);
        grids.push(out.grid);
        betas.push(out.beta);
    }

    let (grid, beta) = if grids.len() == 1 {
        (grids[0], betas[0])
    } else {
        let mut inverse = vec![0; b];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos;
        }
        let g = ctx.g.concat(&grids, 0)?;
        let bt = ctx.g.concat(&betas, 0)?;
        (ctx.g.gather(g, &inverse)?, ctx.g.gather(bt, &inverse)?)
    };
    let s = ctx.g.shape(beta);
    let grid_size = (s[2], s[3]);
    Ok(LocalFeatures { grid, beta, grid_size })
}
