//! Multi-scale image encoder and token-level text encoder.
//!
//! The image side is a strided-convolution pyramid: a 4×4/stride-4 stem,
//! then one stage per pyramid level (stage 1 at stride 1, every later stage
//! halves the resolution), each stage two conv→batch-norm→relu blocks.
//! For an `H×W` input the levels sit at `H/4, H/8, H/16, H/32`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndtensor::{init_conv_bn, init_linear, Ctx, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderConfig {
    pub in_channels: usize,
    /// Channel width of each pyramid level; its length is the level count L.
    pub widths: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![32, 64, 128, 256],
            embed_dim: 128,
        }
    }
}

impl ImageEncoderConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Input sides must be multiples of the coarsest stride `4·2^(L−1)`.
    pub fn granularity(&self) -> usize {
        4 << (self.levels() - 1)
    }

    /// Spatial size of each pyramid level for an `h×w` input.
    pub fn schedule(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let q = self.granularity();
        if h < q || w < q || !h.is_multiple_of(q) || !w.is_multiple_of(q) {
            return Err(Error::BadResolution { h, w });
        }
        Ok((0..self.levels()).map(|l| (h >> (l + 2), w >> (l + 2))).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.windows(2).any(|p| p[1] < p[0]) || self.widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "pyramid widths must be non-empty, positive and non-decreasing: {:?}",
                self.widths
            )));
        }
        if self.embed_dim == 0 || self.in_channels == 0 {
            return Err(Error::InvalidConfig("zero embed_dim or in_channels".into()));
        }
        Ok(())
    }
}

/// Per-level feature maps `F^(l): [B, C_l, h_l, w_l]`, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub base_resolution: (usize, usize),
}

/// `v_g: [B, D]`, rows unit-norm.
#[derive(Debug, Clone, Copy)]
pub struct GlobalImageEmbedding {
    pub v_g: Var,
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub cfg: ImageEncoderConfig,
}

impl ImageEncoder {
    pub fn new(cfg: ImageEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let w = &self.cfg.widths;
        init_conv_bn(store, "img.stem", self.cfg.in_channels, w[0], 4, rng)?;
        for l in 0..w.len() {
            let cin = if l == 0 { w[0] } else { w[l - 1] };
            init_conv_bn(store, &format!("img.s{}.c1", l + 1), cin, w[l], 3, rng)?;
            init_conv_bn(store, &format!("img.s{}.c2", l + 1), w[l], w[l], 3, rng)?;
        }
        init_linear(store, "img.proj", w[w.len() - 1], self.cfg.embed_dim, rng)
    }

    /// `images: [B, C_in, H, W]` → pyramid and unit-norm global embedding
    /// (spatial mean of the coarsest level, linear projection, L2 norm).
    pub fn forward(&self, ctx: &mut Ctx<'_>, images: Var) -> Result<(FeaturePyramid, GlobalImageEmbedding)> {
        let s = ctx.g.shape(images).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(Error::shape("encode_image", &s, &[0, self.cfg.in_channels, 0, 0]));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        self.cfg.schedule(h, w)?;
        let mut x = ctx.conv_bn_relu("img.stem", images, 4, 0)?;
        let mut levels = Vec::with_capacity(self.cfg.levels());
        for l in 0..self.cfg.levels() {
            let stride = if l == 0 { 1 } else { 2 };
            x = ctx.conv_bn_relu(&format!("img.s{}.c1", l + 1), x, stride, 1)?;
            x = ctx.conv_bn_relu(&format!("img.s{}.c2", l + 1), x, 1, 1)?;
            levels.push(x);
        }
        let last = ctx.g.shape(x).to_vec();
        let flat = ctx.g.reshape(x, &[b, last[1], last[2] * last[3]])?;
        let pooled = ctx.g.mean_axis(flat, 2)?;
        let pooled = ctx.g.reshape(pooled, &[b, last[1]])?;
        let proj = ctx.linear("img.proj", pooled)?;
        let v_g = ctx.g.l2_normalize(proj, 1)?;
        Ok((
            FeaturePyramid {
                levels,
                base_resolution: (h, w),
            },
            GlobalImageEmbedding { v_g },
        ))
    }
}

/// Padded token matrix. Positions at or beyond `valid_len[b]` are padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub width: usize,
    pub valid_len: Vec<usize>,
}

impl TokenBatch {
    /// Pads `reports` with `pad_id` to the longest length.
    pub fn from_reports(reports: &[Vec<usize>], pad_id: usize) -> Result<Self> {
        let width = reports.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(reports.len() * width);
        for (i, r) in reports.iter().enumerate() {
            if r.is_empty() {
                return Err(Error::EmptyReport { sample: i });
            }
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(pad_id, width - r.len()));
        }
        Ok(Self {
            ids,
            batch: reports.len(),
            width,
            valid_len: reports.iter().map(Vec::len).collect(),
        })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.width..b * self.width + self.valid_len[b]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
}

/// `tokens: [B, N, D]` (T) and `global: [B, D]` (t_g), all rows unit-norm.
#[derive(Debug, Clone)]
pub struct TextEncoding {
    pub tokens: Var,
    pub global: Var,
    pub valid_len: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
}

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig) -> Result<Self> {
        if cfg.vocab_size == 0 || cfg.embed_dim == 0 {
            return Err(Error::InvalidConfig("empty vocabulary or zero embed_dim".into()));
        }
        Ok(Self { cfg })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let d = self.cfg.embed_dim;
        store.insert_he("txt.embed", &[self.cfg.vocab_size, d], d, rng)?;
        init_linear(store, "txt.mlp1", d, d, rng)?;
        init_linear(store, "txt.mlp2", d, d, rng)?;
        init_linear(store, "txt.proj", d, d, rng)
    }

    /// Embedding lookup → two-layer MLP per token gives T; the mean of the
    /// MLP outputs over valid tokens, linearly projected, gives t_g. Padding
    /// rows are multiplied by zero in the pooling matrix, so their content
    /// never reaches t_g.
    pub fn forward(&self, ctx: &mut Ctx<'_>, batch: &TokenBatch) -> Result<TextEncoding> {
        let (b, n, d) = (batch.batch, batch.width, self.cfg.embed_dim);
        if batch.ids.len() != b * n || batch.valid_len.len() != b {
            return Err(Error::shape("encode_text", &[b, n], &[batch.ids.len()]));
        }
        for (i, &len) in batch.valid_len.iter().enumerate() {
            if len == 0 {
                return Err(Error::EmptyReport { sample: i });
            }
            if len > n {
                return Err(Error::shape("encode_text", &[b, n], &[len]));
            }
        }
        for (pos, &id) in batch.ids.iter().enumerate() {
            let valid = pos % n < batch.valid_len[pos / n];
            if id >= self.cfg.vocab_size && valid {
                return Err(Error::UnknownToken {
                    id,
                    vocab: self.cfg.vocab_size,
                });
            }
        }
        // padding ids outside the vocabulary are tolerated and read row 0
        let ids: Vec<usize> = batch
            .ids
            .iter()
            .map(|&id| if id < self.cfg.vocab_size { id } else { 0 })
            .collect();
        let table = ctx.p("txt.embed")?;
        let e = ctx.g.gather(table, &ids)?;
        let h = ctx.linear("txt.mlp1", e)?;
        let h = ctx.g.relu(h)?;
        let h = ctx.linear("txt.mlp2", h)?;

        let tok = ctx.g.l2_normalize(h, 1)?;
        let tokens = ctx.g.reshape(tok, &[b, n, d])?;

        let mut pool = vec![0.0; b * b * n];
        for (s, &len) in batch.valid_len.iter().enumerate() {
            for j in 0..len {
                pool[s * b * n + s * n + j] = 1.0 / len as f64;
            }
        }
        let pool = ctx.g.constant(&[b, b * n], pool)?;
        let mean = ctx.g.matmul(pool, h)?;
        let proj = ctx.linear("txt.proj", mean)?;
        let global = ctx.g.l2_normalize(proj, 1)?;
        Ok(TextEncoding {
            tokens,
            global,
            valid_len: batch.valid_len.clone(),
        })
    }
}
