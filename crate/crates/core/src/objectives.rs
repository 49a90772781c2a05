//! Training objectives: global image-report contrastive loss, word-region
//! local contrastive loss, auxiliary report-type cross-entropy and their
//! weighted sum. Every loss is a mean over the batch.

use rand::Rng;

use crate::encoders::TextEncoding;
use crate::error::{Error, Result};
use crate::ndtensor::{Ctx, Graph, ParamStore, Var};

/// Unit-norm tolerance for contrastive inputs.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// Which tokens form the denominator of the local loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LocalDenominator {
    /// Other tokens of the same report.
    #[default]
    Tokens,
    /// Every valid token of every report in the batch.
    Batch,
}

impl std::str::FromStr for LocalDenominator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tokens" => Ok(Self::Tokens),
            "batch" => Ok(Self::Batch),
            _ => Err(Error::InvalidConfig(format!("local_loss_denominator must be tokens|batch, got {s}"))),
        }
    }
}

impl std::fmt::Display for LocalDenominator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Tokens => "tokens",
            Self::Batch => "batch",
        })
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

fn check_unit_rows(g: &Graph, v: Var) -> Result<()> {
    let s = g.shape(v);
    let d = s[s.len() - 1];
    for (row, chunk) in g.data(v).chunks(d).enumerate() {
        let norm = chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NonNormalizedInput { row, norm });
        }
    }
    Ok(())
}

/// `mean_i −log( exp(sim(v_i, t_i)/τ) / Σ_j exp(sim(v_i, t_j)/τ) )` with
/// cosine similarity and matched pairs on the diagonal. `symmetric` adds
/// the text→image direction and averages the two.
pub fn global_contrastive(g: &mut Graph, v_g: Var, t_g: Var, tau: f64, symmetric: bool) -> Result<Var> {
    check_tau(tau)?;
    let (sv, st) = (g.shape(v_g).to_vec(), g.shape(t_g).to_vec());
    if sv.len() != 2 || sv != st {
        return Err(Error::shape("global_contrastive", &sv, &st));
    }
    check_unit_rows(g, v_g)?;
    check_unit_rows(g, t_g)?;
    let b = sv[0];
    let targets: Vec<usize> = (0..b).collect();
    let weights = vec![1.0 / b as f64; b];
    let sim = g.cosine_similarity_matrix(v_g, t_g)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let i2t = g.softmax_cross_entropy(logits, &targets, &weights, None)?;
    if !symmetric {
        return Ok(i2t);
    }
    let lt = g.transpose_last(logits)?;
    let t2i = g.softmax_cross_entropy(lt, &targets, &weights, None)?;
    let both = g.add(i2t, t2i)?;
    g.scale(both, 0.5)
}

/// Token-to-region attention weights and context vectors.
#[derive(Debug, Clone)]
pub struct WordRegionAttention {
    /// `a: [B, N, M]`, softmax over regions.
    pub a: Var,
    /// `c: [B, N, D]`, `c_i = Σ_j a_ij v_j`.
    pub c: Var,
    pub valid_len: Vec<usize>,
}

/// `a_ij = softmax_j(t_iᵀ v_j / τ)`, `c_i = Σ_j a_ij v_j`. Rows for padding
/// tokens are computed but carry no weight in any loss.
pub fn word_region_attention(g: &mut Graph, text: &TextEncoding, grid: Var, tau: f64) -> Result<WordRegionAttention> {
    check_tau(tau)?;
    let (st, sv) = (g.shape(text.tokens).to_vec(), g.shape(grid).to_vec());
    if st.len() != 3 || sv.len() != 3 || st[0] != sv[0] || st[2] != sv[2] || text.valid_len.len() != st[0] {
        return Err(Error::shape("word_region_attention", &st, &sv));
    }
    let vt = g.transpose_last(grid)?;
    let logits = g.bmm(text.tokens, vt)?;
    let logits = g.scale(logits, 1.0 / tau)?;
    let a = g.softmax(logits, 2)?;
    let c = g.bmm(a, grid)?;
    Ok(WordRegionAttention {
        a,
        c,
        valid_len: text.valid_len.clone(),
    })
}

/// Per report, `Σ_i −log( exp(sim(c_i, t_i)/τ) / Σ_j exp(sim(c_i, t_j)/τ) )`
/// over valid tokens, divided by the valid token count; then the batch mean.
pub fn local_contrastive(
    g: &mut Graph,
    att: &WordRegionAttention,
    text: &TextEncoding,
    tau: f64,
    denominator: LocalDenominator,
) -> Result<Var> {
    check_tau(tau)?;
    let s = g.shape(text.tokens).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    if g.shape(att.c) != s.as_slice() {
        return Err(Error::shape("local_contrastive", g.shape(att.c), &s));
    }
    if let Some(i) = text.valid_len.iter().position(|&l| l == 0) {
        return Err(Error::EmptyReport { sample: i });
    }
    let cn = g.l2_normalize(att.c, 2)?;
    let tn = g.l2_normalize(text.tokens, 2)?;
    let lens = &text.valid_len;
    let mut targets = vec![0; b * n];
    let mut weights = vec![0.0; b * n];
    for bi in 0..b {
        for i in 0..lens[bi] {
            weights[bi * n + i] = 1.0 / (lens[bi] * b) as f64;
        }
    }
    match denominator {
        LocalDenominator::Tokens => {
            let tt = g.transpose_last(tn)?;
            let sim = g.bmm(cn, tt)?;
            let logits = g.scale(sim, 1.0 / tau)?;
            let logits = g.reshape(logits, &[b * n, n])?;
            let mut mask = vec![false; b * n * n];
            for bi in 0..b {
                for i in 0..n {
                    targets[bi * n + i] = i;
                    for j in 0..lens[bi] {
                        mask[(bi * n + i) * n + j] = true;
                    }
                }
            }
            g.softmax_cross_entropy(logits, &targets, &weights, Some(&mask))
        }
        LocalDenominator::Batch => {
            let c2 = g.reshape(cn, &[b * n, d])?;
            let t2 = g.reshape(tn, &[b * n, d])?;
            let tt = g.transpose_last(t2)?;
            let sim = g.matmul(c2, tt)?;
            let logits = g.scale(sim, 1.0 / tau)?;
            let col_live: Vec<bool> = (0..b * n).map(|c| c % n < lens[c / n]).collect();
            let mut mask = Vec::with_capacity(b * n * b * n);
            for r in 0..b * n {
                targets[r] = r;
                mask.extend_from_slice(&col_live);
            }
            g.softmax_cross_entropy(logits, &targets, &weights, Some(&mask))
        }
    }
}

/// Mean cross-entropy of `softmax(logits)` against integer labels.
pub fn classification_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("classification_loss", &s, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
        return Err(Error::LabelOutOfRange { label: bad, classes: s[1] });
    }
    let w = vec![1.0 / s[0] as f64; s[0]];
    g.softmax_cross_entropy(logits, labels, &w, None)
}

/// Report-type classifier `W_c: [D, C_mod]` on the global report embedding.
#[derive(Debug, Clone)]
pub struct AuxHead {
    pub prefix: String,
    pub embed_dim: usize,
    pub classes: usize,
}

impl AuxHead {
    pub fn new(prefix: &str, embed_dim: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidConfig(format!("aux head needs at least 2 classes, got {classes}")));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            embed_dim,
            classes,
        })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        store.insert_he(&self.weight_name(), &[self.embed_dim, self.classes], self.embed_dim, rng)
    }

    pub fn logits(&self, ctx: &mut Ctx<'_>, t_g: Var) -> Result<Var> {
        let w = ctx.p(&self.weight_name())?;
        ctx.g.matmul(t_g, w)
    }
}

/// `CrossEntropy(W_c · t_g, y)`, batch mean.
pub fn aux_loss(ctx: &mut Ctx<'_>, t_g: Var, head: &AuxHead, y: &[usize]) -> Result<Var> {
    let logits = head.logits(ctx, t_g)?;
    classification_loss(&mut ctx.g, logits, y)
}

/// Scalar loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub global_loss: f64,
    pub local_loss: f64,
    pub aux_loss: f64,
    pub total: f64,
    pub tau: f64,
    pub lambda: f64,
}

impl LossBundle {
    /// `total = (global + local) + λ·aux`, always in that order.
    pub fn combine(global_loss: f64, local_loss: f64, aux_loss: f64, tau: f64, lambda: f64) -> Self {
        Self {
            global_loss,
            local_loss,
            aux_loss,
            total: (global_loss + local_loss) + lambda * aux_loss,
            tau,
            lambda,
        }
    }
}

/// Adds `global + local + λ·aux` to the graph, returning the total node and
/// the value bundle. The node value equals `bundle.total` bit for bit.
pub fn total_loss(g: &mut Graph, global: Var, local: Var, aux: Var, tau: f64, lambda: f64) -> Result<(Var, LossBundle)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    let gl = g.add(global, local)?;
    let weighted = g.scale(aux, lambda)?;
    let total = g.add(gl, weighted)?;
    let bundle = LossBundle::combine(g.data(global)[0], g.data(local)[0], g.data(aux)[0], tau, lambda);
    debug_assert_eq!(bundle.total, g.data(total)[0]);
    Ok((total, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::Tensor;

    #[test]
    fn bundle_arithmetic() {
        let b = LossBundle::combine(0.3, 0.5, 0.2, 0.07, 1.0);
        assert!((b.total - 1.0).abs() < 1e-15);
        let z = LossBundle::combine(0.3, 0.5, 0.2, 0.07, 0.0);
        assert_eq!(z.total, 0.3 + 0.5);
        let one = LossBundle::combine(0.3, 0.5, 0.2, 0.07, 0.4);
        let two = LossBundle::combine(0.3, 0.5, 0.2, 0.07, 0.8);
        assert!(((two.total - one.total) - 0.2 * 0.4).abs() < 1e-15);
    }

    #[test]
    fn graph_total_matches_bundle() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(0.31).unwrap()).unwrap();
        let b = g.leaf(Tensor::scalar(0.77).unwrap()).unwrap();
        let c = g.leaf(Tensor::scalar(1.13).unwrap()).unwrap();
        let (t, bundle) = total_loss(&mut g, a, b, c, 0.07, 0.5).unwrap();
        assert_eq!(g.data(t)[0], bundle.total);
        assert!(total_loss(&mut g, a, b, c, 0.07, -1.0).is_err());
    }

    #[test]
    fn temperature_and_norm_are_validated() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        let bad = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        assert!(matches!(global_contrastive(&mut g, v, v, 0.0, false), Err(Error::InvalidTemperature(_))));
        assert!(matches!(global_contrastive(&mut g, v, bad, 1.0, false), Err(Error::NonNormalizedInput { .. })));
        let l = global_contrastive(&mut g, v, v, 1.0, false).unwrap();
        assert_eq!(g.data(l)[0], 0.0);
    }

    #[test]
    fn denominator_parses() {
        assert_eq!("tokens".parse::<LocalDenominator>().unwrap(), LocalDenominator::Tokens);
        assert_eq!("batch".parse::<LocalDenominator>().unwrap().to_string(), "batch");
        assert!("words".parse::<LocalDenominator>().is_err());
    }
}
