//! Encoder and decoder wired together, plus parameter accounting.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, Provenance, TokenSequence, TOKEN_INIT};
use crate::error::{Error, Result};
use crate::imaging::RasterImage;
use crate::nn::{Init, LayerNorm, Linear, ParamLayout, ParamStore, TransformerBlock};
use crate::patching::{gather_rows, patchify, MaskPlan};
use crate::posenc::PosEncSettings;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub posenc: PosEncSettings,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.token_grid_side != self.encoder.grid_side() {
            return Err(Error::Config(format!(
                "decoder.token_grid_side is {} but the encoder grid is {} ({} / {})",
                self.decoder.token_grid_side,
                self.encoder.grid_side(),
                self.encoder.input_size,
                self.encoder.patch_size
            )));
        }
        if self.decoder.out_chans != self.encoder.in_chans {
            return Err(Error::Config(format!(
                "decoder.out_chans {} differs from encoder.in_chans {}",
                self.decoder.out_chans, self.encoder.in_chans
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ScaleMae {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    layout: ParamLayout,
}

impl ScaleMae {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = ParamLayout::new();
        let encoder = Encoder::declare(&mut layout, &cfg.encoder, &cfg.posenc)?;
        let decoder = Decoder::declare(
            &mut layout,
            &cfg.decoder,
            cfg.encoder.embed_dim,
            cfg.encoder.use_gsd_posenc,
            &cfg.posenc,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            layout,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        ParamStore::initialize(self.layout.clone(), seed)
    }

    pub fn check_params<T: Scalar>(&self, p: &ParamStore<T>) -> Result<()> {
        if p.layout() != &self.layout {
            return Err(Error::Shape("parameter store does not match the model layout".into()));
        }
        Ok(())
    }

    /// Normed encoder latents for the visible patches of `input`; the class
    /// token (if any) is row 0.
    pub fn latents_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        input: &RasterImage<T>,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let ec = &self.cfg.encoder;
        if input.height() != ec.input_size || input.width() != ec.input_size {
            return Err(Error::Shape(format!(
                "encoder input must be {0}x{0}, got {1}x{2}",
                ec.input_size,
                input.height(),
                input.width()
            )));
        }
        let pg = patchify(input, ec.patch_size)?;
        if plan.n_patches != pg.n_patches() {
            return Err(Error::Shape(format!(
                "mask plan covers {} patches, image has {}",
                plan.n_patches,
                pg.n_patches()
            )));
        }
        let x = g.input(gather_rows(&pg.patches, &plan.visible_idx));
        let t = self.encoder.embed_graph(g, p, x)?;
        let y = self.encoder.encode_graph(g, p, t, &plan.visible_idx, input.gsd())?;
        Ok(self.encoder.final_norm(g, p, y))
    }

    /// Low and high prediction rows for one (already normalized) input.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        input: &RasterImage<T>,
        plan: &MaskPlan,
    ) -> Result<(Var, Var)> {
        let lat = self.latents_graph(g, p, input, plan)?;
        self.decoder
            .forward_graph(g, p, lat, self.encoder.cls_token.is_some(), plan, input.gsd())
    }

    /// Unmasked, normed encoder output.
    pub fn encode_full<T: Scalar>(&self, p: &ParamStore<T>, input: &RasterImage<T>) -> Result<TokenSequence<T>> {
        let mut g = Graph::new();
        let plan = MaskPlan::all_visible(self.cfg.encoder.n_patches());
        let y = self.latents_graph(&mut g, p, input, &plan)?;
        Ok(TokenSequence {
            tokens: g.value(y).clone(),
            provenance: Provenance::VisibleOnly,
            has_class_token: self.encoder.cls_token.is_some(),
        })
    }
}

/// Layout of the standard MAE decoder (embed, mask token, `depth` blocks,
/// norm, per-patch pixel head) for comparison.
pub fn mae_decoder_layout(enc: &EncoderConfig, dec: &DecoderConfig, depth: usize) -> ParamLayout {
    let mut l = ParamLayout::new();
    let dd = dec.decode_dim;
    Linear::declare(&mut l, "mae_decoder.embed", enc.embed_dim, dd);
    l.declare("mae_decoder.mask_token", 1, dd, Init::Uniform { bound: TOKEN_INIT });
    for i in 0..depth {
        TransformerBlock::declare(&mut l, &format!("mae_decoder.blocks.{i}"), dd, dec.decode_heads, dec.mlp_ratio);
    }
    LayerNorm::declare(&mut l, "mae_decoder.norm", dd);
    Linear::declare(&mut l, "mae_decoder.pred", dd, enc.patch_dim());
    l
}

pub const MAE_DECODER_DEPTH: usize = 8;

/// Module groups reported by [`param_report`], as name prefixes.
pub const REPORT_GROUPS: [&str; 11] = [
    "encoder.patch_embed",
    "encoder.cls_token",
    "encoder.blocks",
    "encoder.norm",
    "decoder.embed",
    "decoder.mask_token",
    "decoder.blocks",
    "decoder.norm",
    "decoder.upsample",
    "decoder.lb_low",
    "decoder.lb_high",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub groups: Vec<(String, usize)>,
    pub encoder_total: usize,
    pub decoder_total: usize,
    pub total: usize,
    pub mae_decoder_depth: usize,
    pub mae_decoder_total: usize,
    pub mae_total: usize,
}

pub fn param_report(model: &ScaleMae) -> ParamReport {
    let l = model.layout();
    let groups = REPORT_GROUPS
        .iter()
        .map(|&g| {
            let n = l
                .specs()
                .iter()
                .filter(|s| s.name == g || s.name.starts_with(&format!("{g}.")))
                .map(|s| s.numel())
                .sum();
            (g.to_string(), n)
        })
        .collect();
    let encoder_total = l.count_prefix("encoder.");
    let decoder_total = l.count_prefix("decoder.");
    let mae_decoder_total = mae_decoder_layout(&model.cfg.encoder, &model.cfg.decoder, MAE_DECODER_DEPTH).total();
    ParamReport {
        groups,
        encoder_total,
        decoder_total,
        total: l.total(),
        mae_decoder_depth: MAE_DECODER_DEPTH,
        mae_decoder_total,
        mae_total: encoder_total + mae_decoder_total,
    }
}

impl ParamReport {
    /// Aligned plain-text table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut line = |name: &str, n: usize| s.push_str(&format!("{name:<28} {n:>14}\n"));
        for (g, n) in &self.groups {
            line(g, *n);
        }
        line("encoder total", self.encoder_total);
        line("decoder total", self.decoder_total);
        line("scale-mae total", self.total);
        line(&format!("mae decoder ({} blocks)", self.mae_decoder_depth), self.mae_decoder_total);
        line("mae total", self.mae_total);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig::toy(),
            decoder: DecoderConfig::toy(),
            posenc: PosEncSettings::default(),
        }
    }

    #[test]
    fn depth_zero_encoder_count_is_closed_form() {
        let mut cfg = toy();
        cfg.encoder.depth = 0;
        let m = ScaleMae::new(&cfg).unwrap();
        let r = param_report(&m);
        let (pd, d) = (8 * 8 * 3, 64);
        // projection + bias, class token, final norm
        assert_eq!(r.encoder_total, pd * d + d + d + 2 * d);
        cfg.encoder.use_class_token = false;
        let r2 = param_report(&ScaleMae::new(&cfg).unwrap());
        assert_eq!(r2.encoder_total, pd * d + d + 2 * d);
    }

    #[test]
    fn depth_is_additive() {
        let block = |d: usize, h: usize| {
            let mut l = ParamLayout::new();
            TransformerBlock::declare(&mut l, "b", d, h, 4.0);
            l.total()
        };
        let mut cfg = toy();
        let base = param_report(&ScaleMae::new(&cfg).unwrap());
        cfg.encoder.depth *= 2;
        cfg.decoder.decode_depth *= 2;
        let doubled = param_report(&ScaleMae::new(&cfg).unwrap());
        assert_eq!(doubled.encoder_total - base.encoder_total, 4 * block(64, 4));
        assert_eq!(doubled.decoder_total - base.decoder_total, 3 * block(32, 4));
        let groups: usize = base.groups.iter().map(|g| g.1).sum();
        assert_eq!(groups, base.total);
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let mut cfg = toy();
        cfg.decoder.token_grid_side = 7;
        assert!(ScaleMae::new(&cfg).is_err());
    }

    #[test]
    fn forward_shapes() {
        let m = ScaleMae::new(&toy()).unwrap();
        let p = m.init_params::<f32>(0);
        let img = RasterImage::<f32>::from_fn(64, 64, 3, 2.0, |y, x, c| ((y + x + c) % 7) as f32 / 7.0).unwrap();
        let plan = crate::patching::sample_mask(64, 0.75, 1).unwrap();
        let mut g = Graph::new();
        let (lo, hi) = m.forward_graph(&mut g, &p, &img, &plan).unwrap();
        assert_eq!(g.value(lo).shape(), (64 * 64, 3));
        assert_eq!(g.value(hi).shape(), (128 * 128, 3));
        let full = m.encode_full(&p, &img).unwrap();
        assert_eq!(full.tokens.shape(), (65, 64));
        let small = RasterImage::<f32>::constant(32, 32, 3, 0.0, 1.0).unwrap();
        assert!(m.encode_full(&p, &small).is_err());
    }
}
