use super::graph::{BatchStats, Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

/// Running-statistic updates collected during a training forward pass.
#[derive(Debug, Default)]
pub struct BnUpdates(Vec<(String, BatchStats)>);

impl BnUpdates {
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        for (prefix, stats) in &self.0 {
            let (m, v) = store.pair_mut(&format!("{prefix}.running_mean"), &format!("{prefix}.running_var"))?;
            stats.fold_into(m, v);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A forward pass over a parameter store: the graph being built, the
/// train/eval switch, and pending batch-norm updates. The store is only
/// borrowed, so evaluation can never mutate it.
pub struct Ctx<'a> {
    pub g: Graph,
    pub params: &'a ParamStore,
    pub training: bool,
    bn: BnUpdates,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParamStore, training: bool) -> Self {
        Self {
            g: Graph::new(),
            params,
            training,
            bn: BnUpdates::default(),
        }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        self.g.param(self.params, name)
    }

    /// Batch norm with parameters `{prefix}.gamma`, `{prefix}.beta` and
    /// buffers `{prefix}.running_mean`, `{prefix}.running_var`.
    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let rm = self.params.get(&format!("{prefix}.running_mean"))?;
        let rv = self.params.get(&format!("{prefix}.running_var"))?;
        let (y, stats) = self.g.batch_norm2d(x, gamma, beta, rm, rv, self.training)?;
        if let Some(s) = stats {
            self.bn.0.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    /// conv (no bias) → batch norm → relu, with weights `{prefix}.w` and
    /// batch norm under `{prefix}.bn`.
    pub fn conv_bn_relu(&mut self, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let y = self.g.conv2d(x, w, stride, pad)?;
        let y = self.batch_norm(&format!("{prefix}.bn"), y)?;
        self.g.relu(y)
    }

    /// `x·{prefix}.w + {prefix}.b`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.g.linear(x, w, Some(b))
    }

    pub fn finish(self) -> (Graph, BnUpdates) {
        (self.g, self.bn)
    }
}

/// Registers `{prefix}.w: [out, in, k, k]` and its batch norm.
pub fn init_conv_bn<R: rand::Rng>(
    store: &mut ParamStore,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert_he(&format!("{prefix}.w"), &[out_ch, in_ch, k, k], in_ch * k * k, rng)?;
    init_bn(store, &format!("{prefix}.bn"), out_ch)
}

pub fn init_bn(store: &mut ParamStore, prefix: &str, ch: usize) -> Result<()> {
    store.insert_const(&format!("{prefix}.gamma"), &[ch], 1.0, true)?;
    store.insert_const(&format!("{prefix}.beta"), &[ch], 0.0, true)?;
    store.insert_const(&format!("{prefix}.running_mean"), &[ch], 0.0, false)?;
    store.insert_const(&format!("{prefix}.running_var"), &[ch], 1.0, false)
}

/// Registers a linear layer `{prefix}.w: [in, out]`, `{prefix}.b: [out]`.
pub fn init_linear<R: rand::Rng>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert_he(&format!("{prefix}.w"), &[fan_in, fan_out], fan_in, rng)?;
    store.insert_const(&format!("{prefix}.b"), &[fan_out], 0.0, true)
}
