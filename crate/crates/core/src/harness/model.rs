//! The full model: encoders, text and image routers, experts and the
//! report-type head, wired into training and inference passes.

use rand::Rng;

use super::config::{RouterInput, TrainConfig};
use crate::encoders::{
    FeaturePyramid, ImageEncoder, ImageEncoderConfig, TextEncoder, TextEncoderConfig, TextEncoding, TokenBatch,
};
use crate::error::{Error, Result};
use crate::moe::{local_features, ActivationCounter, Expert, ExpertConfig, LocalFeatures, Router, RouterConfig, RouterDecision};
use crate::ndtensor::{Ctx, ParamStore, Tensor, Var};
use crate::objectives::{
    classification_loss, global_contrastive, local_contrastive, total_loss, word_region_attention, AuxHead,
    LocalDenominator, LossBundle, WordRegionAttention,
};
use crate::synthcorpus::Batch;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub modalities: usize,
    pub experts: usize,
    pub router_hidden: usize,
    pub align_level: usize,
    pub body_layers: usize,
}

impl ModelConfig {
    pub fn new(cfg: &TrainConfig, vocab_size: usize, modalities: usize) -> Self {
        Self {
            widths: cfg.widths.clone(),
            embed_dim: cfg.embed_dim,
            vocab_size,
            modalities,
            experts: cfg.experts,
            router_hidden: cfg.router_hidden,
            align_level: cfg.align_level,
            body_layers: 3,
        }
    }

    /// Recovers vocabulary size and modality count from stored shapes.
    pub fn infer(cfg: &TrainConfig, store: &ParamStore) -> Result<Self> {
        let embed = store.get("txt.embed")?.shape().to_vec();
        let aux = store.get("aux.w")?.shape().to_vec();
        Ok(Self::new(cfg, embed[0], aux[1]))
    }
}

/// Loss hyperparameters of one training pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub denominator: LocalDenominator,
    pub symmetric: bool,
}

impl From<&TrainConfig> for LossConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            tau: c.tau,
            lambda: c.lambda,
            denominator: c.local_loss_denominator,
            symmetric: c.symmetric_global,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub text_router: Router,
    pub image_router: Router,
    pub experts: Vec<Expert>,
    pub aux: AuxHead,
}

/// Everything both passes share.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub pyramid: FeaturePyramid,
    pub v_g: Var,
    pub text: TextEncoding,
    pub text_route: RouterDecision,
    pub image_route: RouterDecision,
}

#[derive(Debug, Clone)]
pub struct TrainPass {
    pub total: Var,
    pub bundle: LossBundle,
    /// Cross-entropy of the report-type head and of both routers; their sum is `bundle.aux_loss`.
    pub aux_parts: [f64; 3],
    pub text_selected: Vec<usize>,
    pub image_selected: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct InferencePass {
    pub encoded: Encoded,
    pub selected: Vec<usize>,
    pub local: LocalFeatures,
    pub attention: WordRegionAttention,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let image = ImageEncoder::new(ImageEncoderConfig {
            in_channels: 3,
            widths: cfg.widths.clone(),
            embed_dim: cfg.embed_dim,
        })?;
        let text = TextEncoder::new(TextEncoderConfig {
            vocab_size: cfg.vocab_size,
            embed_dim: cfg.embed_dim,
        })?;
        let rc = RouterConfig {
            input_dim: cfg.embed_dim,
            hidden: cfg.router_hidden,
            experts: cfg.experts,
        };
        let experts = (0..cfg.experts)
            .map(|index| Expert {
                index,
                cfg: ExpertConfig {
                    level_widths: cfg.widths.clone(),
                    embed_dim: cfg.embed_dim,
                    body_layers: cfg.body_layers,
                },
            })
            .collect();
        if cfg.align_level < 1 || cfg.align_level > cfg.widths.len() {
            return Err(Error::InvalidLevel {
                level: cfg.align_level,
                levels: cfg.widths.len(),
            });
        }
        Ok(Self {
            image,
            text,
            text_router: Router::new("router_text", rc.clone())?,
            image_router: Router::new("router_image", rc)?,
            experts,
            aux: AuxHead::new("aux", cfg.embed_dim, cfg.modalities)?,
            cfg,
        })
    }

    /// Registers every parameter. Values are rounded to f32 so that a
    /// checkpoint written before any update reproduces them exactly.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.image.init(store, rng)?;
        self.text.init(store, rng)?;
        self.text_router.init(store, rng)?;
        self.image_router.init(store, rng)?;
        for e in &self.experts {
            e.init(store, rng)?;
        }
        self.aux.init(store, rng)?;
        store.round_to_f32();
        Ok(())
    }

    pub fn encode(&self, ctx: &mut Ctx<'_>, batch: &Batch) -> Result<Encoded> {
        let images = ctx.g.constant(batch.images.shape(), batch.images.data().to_vec())?;
        let (pyramid, gi) = self.image.forward(ctx, images)?;
        let text = self.text.forward(ctx, &batch.tokens)?;
        let text_route = self.text_router.route(ctx, text.global)?;
        let image_route = self.image_router.route(ctx, gi.v_g)?;
        Ok(Encoded {
            pyramid,
            v_g: gi.v_g,
            text,
            text_route,
            image_route,
        })
    }

    /// Router targets: the modality label, folded modulo K when there are
    /// fewer experts than modalities.
    pub fn router_targets(&self, y: &[usize]) -> Vec<usize> {
        y.iter().map(|&m| m % self.cfg.experts).collect()
    }

    /// Training pass: local features come from the text-routed expert.
    pub fn train_pass(
        &self,
        ctx: &mut Ctx<'_>,
        batch: &Batch,
        loss: &LossConfig,
        counter: &mut ActivationCounter,
    ) -> Result<TrainPass> {
        let enc = self.encode(ctx, batch)?;
        let selected = enc.text_route.selected.clone();
        let local = local_features(ctx, &enc.pyramid, &selected, &self.experts, self.cfg.align_level, counter)?;
        let global = global_contrastive(&mut ctx.g, enc.v_g, enc.text.global, loss.tau, loss.symmetric)?;
        let att = word_region_attention(&mut ctx.g, &enc.text, local.grid, loss.tau)?;
        let local_l = local_contrastive(&mut ctx.g, &att, &enc.text, loss.tau, loss.denominator)?;

        let head_logits = self.aux.logits(ctx, enc.text.global)?;
        let head = classification_loss(&mut ctx.g, head_logits, &batch.modality)?;
        let targets = self.router_targets(&batch.modality);
        let tr = classification_loss(&mut ctx.g, enc.text_route.logits, &targets)?;
        let ir = classification_loss(&mut ctx.g, enc.image_route.logits, &targets)?;
        let aux_parts = [ctx.g.data(head)[0], ctx.g.data(tr)[0], ctx.g.data(ir)[0]];
        let aux = ctx.g.add(head, tr)?;
        let aux = ctx.g.add(aux, ir)?;
        let (total, bundle) = total_loss(&mut ctx.g, global, local_l, aux, loss.tau, loss.lambda)?;
        Ok(TrainPass {
            total,
            bundle,
            aux_parts,
            text_selected: selected,
            image_selected: enc.image_route.selected,
        })
    }

    /// Inference pass: routes with the requested head, runs only the
    /// selected experts and computes word-region attention.
    pub fn infer(
        &self,
        ctx: &mut Ctx<'_>,
        batch: &Batch,
        router_input: RouterInput,
        tau: f64,
        counter: &mut ActivationCounter,
    ) -> Result<InferencePass> {
        let enc = self.encode(ctx, batch)?;
        let selected = match router_input {
            RouterInput::Text => enc.text_route.selected.clone(),
            RouterInput::Image => enc.image_route.selected.clone(),
        };
        let local = local_features(ctx, &enc.pyramid, &selected, &self.experts, self.cfg.align_level, counter)?;
        let attention = word_region_attention(&mut ctx.g, &enc.text, local.grid, tau)?;
        Ok(InferencePass {
            encoded: enc,
            selected,
            local,
            attention,
        })
    }

    /// Unit-norm global text embeddings of arbitrary token sequences, eval mode.
    pub fn embed_reports(&self, store: &ParamStore, reports: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut ctx = Ctx::new(store, false);
        let tb = TokenBatch::from_reports(reports, crate::synthcorpus::PAD_ID)?;
        let te = self.text.forward(&mut ctx, &tb)?;
        Ok(rows(ctx.g.value(te.global)))
    }

    /// Unit-norm global image embeddings, eval mode.
    pub fn embed_images(&self, store: &ParamStore, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut ctx = Ctx::new(store, false);
        let x = ctx.g.constant(images.shape(), images.data().to_vec())?;
        let (_, gi) = self.image.forward(&mut ctx, x)?;
        Ok(rows(ctx.g.value(gi.v_g)))
    }
}

pub(crate) fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[t.rank() - 1];
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}
