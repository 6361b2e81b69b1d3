//! Transformer decoding, progressive transpose-conv upsampling, and the two
//! Laplacian reconstruction branches.
//!
//! For a token grid of side `n` the upsampling stage emits maps of side `2n`
//! and `4n`. Each branch chains its feature-mapping blocks, zero or more ×2
//! upsample blocks, and a ×4 reconstruction block. A branch with output side
//! `S` reads the `4n` map when `S / 4 = 4n * 2^u` (with `u` upsample blocks)
//! and the `2n` map when `S / 4 = 2n`. With the 14-token grid this puts the
//! 224 branch on the 56 map and the 448 branch on the 56 map plus one upsample
//! block; with an 8-token grid and 64/128 outputs the low branch reads the 16
//! map.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{check_gsd, posenc_rows, Provenance, TokenSequence, TOKEN_INIT};
use crate::error::{Error, Result};
use crate::imaging::RasterImage;
use crate::nn::{ConvTranspose, DepthwiseConv, Init, LayerNorm, Linear, ParamId, ParamLayout, ParamStore, TransformerBlock};
use crate::patching::MaskPlan;
use crate::posenc::PosEncSettings;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which positional encoding the decoder adds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderPosenc {
    /// Same choice as the encoder's `use_gsd_posenc`.
    #[default]
    FollowEncoder,
    Gsd,
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// 0 is accepted and skips the transformer stage entirely.
    pub decode_depth: usize,
    pub decode_dim: usize,
    pub decode_heads: usize,
    pub mlp_ratio: f64,
    pub token_grid_side: usize,
    pub low_out_size: usize,
    pub high_out_size: usize,
    pub feature_map_blocks_per_lb: usize,
    /// Width inside the Laplacian branches; 0 means `decode_dim`.
    pub lb_channels: usize,
    pub posenc: DecoderPosenc,
    pub out_chans: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl DecoderConfig {
    pub fn toy() -> Self {
        Self {
            decode_depth: 3,
            decode_dim: 32,
            decode_heads: 4,
            mlp_ratio: 4.0,
            token_grid_side: 8,
            low_out_size: 64,
            high_out_size: 128,
            feature_map_blocks_per_lb: 2,
            lb_channels: 16,
            posenc: DecoderPosenc::FollowEncoder,
            out_chans: 3,
        }
    }

    /// 224-input ViT presets share this decoder.
    pub fn vit() -> Self {
        Self {
            decode_dim: 512,
            decode_heads: 16,
            token_grid_side: 14,
            low_out_size: 224,
            high_out_size: 448,
            lb_channels: 0,
            ..Self::toy()
        }
    }

    pub fn lb_width(&self) -> usize {
        if self.lb_channels == 0 {
            self.decode_dim
        } else {
            self.lb_channels
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.decode_dim == 0 || self.decode_dim % 4 != 0 {
            return bad(format!("decoder.decode_dim must be a positive multiple of 4, got {}", self.decode_dim));
        }
        if self.decode_heads == 0 || self.decode_dim % self.decode_heads != 0 {
            return bad(format!(
                "decoder.decode_dim {} is not divisible by decoder.decode_heads {}",
                self.decode_dim, self.decode_heads
            ));
        }
        if self.token_grid_side == 0 || self.out_chans == 0 || !(self.mlp_ratio > 0.0) {
            return bad("decoder.token_grid_side, decoder.out_chans and decoder.mlp_ratio must be positive".into());
        }
        plan_branch(self.token_grid_side, self.low_out_size)?;
        plan_branch(self.token_grid_side, self.high_out_size)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Low,
    High,
}

impl Band {
    pub fn name(self) -> &'static str {
        match self {
            Band::Low => "low",
            Band::High => "high",
        }
    }
}

/// Which upsampled map a branch reads and how many ×2 blocks it inserts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchPlan {
    /// 2 for the `2n` map, 4 for the `4n` map.
    pub source_factor: usize,
    pub upsample_blocks: usize,
}

impl BranchPlan {
    pub fn source_side(&self, grid: usize) -> usize {
        self.source_factor * grid
    }
}

pub fn plan_branch(grid: usize, out_size: usize) -> Result<BranchPlan> {
    let err = || {
        Error::Shape(format!(
            "output side {out_size} is unreachable from a {grid}-token grid: it must equal 8*{grid} or 16*{grid}*2^u \
             (reconstruction block is x4 from a x2 or x4 map, upsample blocks add x2 each)"
        ))
    };
    if grid == 0 || out_size % 4 != 0 {
        return Err(err());
    }
    let rb_in = out_size / 4;
    if rb_in % (4 * grid) == 0 && (rb_in / (4 * grid)).is_power_of_two() {
        return Ok(BranchPlan {
            source_factor: 4,
            upsample_blocks: (rb_in / (4 * grid)).trailing_zeros() as usize,
        });
    }
    if rb_in == 2 * grid {
        return Ok(BranchPlan {
            source_factor: 2,
            upsample_blocks: 0,
        });
    }
    Err(err())
}

/// Square `side x side` map stored `(side*side) x channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
    pub side: usize,
}

/// 3×3 depthwise conv, GELU, 1×1 conv.
#[derive(Clone, Debug)]
pub struct FeatureMappingBlock {
    pub dw: DepthwiseConv,
    pub pw: Linear,
}

/// 2×2 stride-2 transpose conv, LayerNorm, GELU.
#[derive(Clone, Debug)]
pub struct UpsampleBlock {
    pub conv: ConvTranspose,
    pub norm: LayerNorm,
}

/// 4×4 stride-2 transpose conv, 3×3 depthwise, GELU, 1×1 conv, 2×2 stride-2
/// transpose conv to image channels.
#[derive(Clone, Debug)]
pub struct ReconstructionBlock {
    pub up4: ConvTranspose,
    pub dw: DepthwiseConv,
    pub pw: Linear,
    pub up2: ConvTranspose,
}

#[derive(Clone, Debug)]
pub struct LaplacianBlock {
    pub band: Band,
    pub plan: BranchPlan,
    pub fmbs: Vec<FeatureMappingBlock>,
    pub ups: Vec<UpsampleBlock>,
    pub recon: ReconstructionBlock,
}

impl LaplacianBlock {
    fn declare(layout: &mut ParamLayout, cfg: &DecoderConfig, band: Band) -> Result<Self> {
        let out_size = match band {
            Band::Low => cfg.low_out_size,
            Band::High => cfg.high_out_size,
        };
        let plan = plan_branch(cfg.token_grid_side, out_size)?;
        let name = format!("decoder.lb_{}", band.name());
        let c = cfg.lb_width();
        let fmbs = (0..cfg.feature_map_blocks_per_lb)
            .map(|i| {
                let c_in = if i == 0 { cfg.decode_dim } else { c };
                FeatureMappingBlock {
                    dw: DepthwiseConv::declare(layout, &format!("{name}.fmb.{i}.dw"), c_in, 3),
                    pw: Linear::declare(layout, &format!("{name}.fmb.{i}.pw"), c_in, c),
                }
            })
            .collect::<Vec<_>>();
        let c_first = if fmbs.is_empty() { cfg.decode_dim } else { c };
        let ups = (0..plan.upsample_blocks)
            .map(|i| {
                let c_in = if i == 0 { c_first } else { c };
                UpsampleBlock {
                    conv: ConvTranspose::declare(layout, &format!("{name}.up.{i}.conv"), c_in, c, 2, 2, 0),
                    norm: LayerNorm::declare(layout, &format!("{name}.up.{i}.norm"), c),
                }
            })
            .collect::<Vec<_>>();
        let c_rb = if fmbs.is_empty() && ups.is_empty() { cfg.decode_dim } else { c };
        let recon = ReconstructionBlock {
            up4: ConvTranspose::declare(layout, &format!("{name}.recon.up4"), c_rb, c, 4, 2, 1),
            dw: DepthwiseConv::declare(layout, &format!("{name}.recon.dw"), c, 3),
            pw: Linear::declare(layout, &format!("{name}.recon.pw"), c, c),
            up2: ConvTranspose::declare(layout, &format!("{name}.recon.up2"), c, cfg.out_chans, 2, 2, 0),
        };
        Ok(Self {
            band,
            plan,
            fmbs,
            ups,
            recon,
        })
    }

    /// Runs the branch on its source map of side `side`; returns the image
    /// rows and the output side.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var, side: usize) -> Result<(Var, usize)> {
        let mut x = x;
        let mut side = side;
        for fmb in &self.fmbs {
            let h = fmb.dw.forward(g, p, x, side)?;
            let h = g.gelu(h);
            x = fmb.pw.forward(g, p, h);
        }
        for up in &self.ups {
            x = up.conv.forward(g, p, x, side)?;
            side = up.conv.out_side(side);
            x = up.norm.forward(g, p, x);
            x = g.gelu(x);
        }
        let rb = &self.recon;
        x = rb.up4.forward(g, p, x, side)?;
        side = rb.up4.out_side(side);
        x = rb.dw.forward(g, p, x, side)?;
        x = g.gelu(x);
        x = rb.pw.forward(g, p, x);
        x = rb.up2.forward(g, p, x, side)?;
        side = rb.up2.out_side(side);
        Ok((x, side))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub posenc: PosEncSettings,
    /// Resolved GSD flag for the decoder positional encoding.
    pub use_gsd_posenc: bool,
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub up1: ConvTranspose,
    pub up_norm: LayerNorm,
    pub up2: ConvTranspose,
    pub lb_low: LaplacianBlock,
    pub lb_high: LaplacianBlock,
}

impl Decoder {
    pub fn declare(
        layout: &mut ParamLayout,
        cfg: &DecoderConfig,
        encoder_dim: usize,
        encoder_gsd_posenc: bool,
        posenc: &PosEncSettings,
    ) -> Result<Self> {
        cfg.validate()?;
        let dd = cfg.decode_dim;
        let use_gsd_posenc = match cfg.posenc {
            DecoderPosenc::FollowEncoder => encoder_gsd_posenc,
            DecoderPosenc::Gsd => true,
            DecoderPosenc::Standard => false,
        };
        let embed = Linear::declare(layout, "decoder.embed", encoder_dim, dd);
        let mask_token = layout.declare("decoder.mask_token", 1, dd, Init::Uniform { bound: TOKEN_INIT });
        let blocks = (0..cfg.decode_depth)
            .map(|i| {
                TransformerBlock::declare(layout, &format!("decoder.blocks.{i}"), dd, cfg.decode_heads, cfg.mlp_ratio)
            })
            .collect();
        let norm = LayerNorm::declare(layout, "decoder.norm", dd);
        let up1 = ConvTranspose::declare(layout, "decoder.upsample.conv1", dd, dd, 2, 2, 0);
        let up_norm = LayerNorm::declare(layout, "decoder.upsample.norm", dd);
        let up2 = ConvTranspose::declare(layout, "decoder.upsample.conv2", dd, dd, 2, 2, 0);
        let lb_low = LaplacianBlock::declare(layout, cfg, Band::Low)?;
        let lb_high = LaplacianBlock::declare(layout, cfg, Band::High)?;
        Ok(Self {
            cfg: cfg.clone(),
            posenc: posenc.clone(),
            use_gsd_posenc,
            embed,
            mask_token,
            blocks,
            norm,
            up1,
            up_norm,
            up2,
            lb_low,
            lb_high,
        })
    }

    fn n_tokens(&self) -> usize {
        self.cfg.token_grid_side * self.cfg.token_grid_side
    }

    /// Encoder latents (class token first if `has_cls`) to `N x decode_dim`
    /// full-grid tokens, class token dropped.
    pub fn decode_tokens_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        latents: Var,
        has_cls: bool,
        plan: &MaskPlan,
        gsd: f64,
    ) -> Result<Var> {
        let n = self.n_tokens();
        let rows = g.value(latents).rows();
        let n_vis = plan.visible_idx.len();
        if plan.n_patches != n || rows != n_vis + usize::from(has_cls) {
            return Err(Error::Shape(format!(
                "decoder got {rows} latent rows for a plan with {n_vis} visible of {} patches (grid has {n})",
                plan.n_patches
            )));
        }
        let gsd = if self.use_gsd_posenc {
            check_gsd(gsd)?;
            Some(gsd)
        } else {
            None
        };
        let x = self.embed.forward(g, p, latents);
        let (cls, vis) = if has_cls {
            (Some(g.slice_rows(x, 0, 1)), g.slice_rows(x, 1, n_vis))
        } else {
            (None, x)
        };
        let mask = g.param(p, self.mask_token);
        let full = g.scatter(vis, mask, &plan.visible_idx, &plan.masked_idx);
        let all: Vec<usize> = (0..n).collect();
        let pos = posenc_rows(self.cfg.token_grid_side, self.cfg.decode_dim, gsd, &self.posenc, &all)?;
        let pos = g.input(pos);
        let mut x = g.add(full, pos);
        if let Some(cls) = cls {
            x = g.concat_rows(&[cls, x]);
        }
        for blk in &self.blocks {
            x = blk.forward(g, p, x);
        }
        if has_cls {
            x = g.slice_rows(x, 1, n);
        }
        Ok(x)
    }

    /// Returns the `2n` and `4n` maps.
    pub fn upsample_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, tokens: Var) -> Result<(Var, Var)> {
        let rows = g.value(tokens).rows();
        let side = (rows as f64).sqrt().round() as usize;
        if side * side != rows || side != self.cfg.token_grid_side {
            return Err(Error::Shape(format!(
                "upsampling needs {}x{} tokens, got {rows}",
                self.cfg.token_grid_side, self.cfg.token_grid_side
            )));
        }
        let x = self.norm.forward(g, p, tokens);
        let x = self.up1.forward(g, p, x, side)?;
        let x = self.up_norm.forward(g, p, x);
        let map2 = g.gelu(x);
        let map4 = self.up2.forward(g, p, map2, 2 * side)?;
        Ok((map2, map4))
    }

    pub fn branch(&self, band: Band) -> &LaplacianBlock {
        match band {
            Band::Low => &self.lb_low,
            Band::High => &self.lb_high,
        }
    }

    /// Low and high prediction rows, `(low_out^2) x C` and `(high_out^2) x C`.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        latents: Var,
        has_cls: bool,
        plan: &MaskPlan,
        gsd: f64,
    ) -> Result<(Var, Var)> {
        let tokens = self.decode_tokens_graph(g, p, latents, has_cls, plan, gsd)?;
        let (map2, map4) = self.upsample_graph(g, p, tokens)?;
        let n = self.cfg.token_grid_side;
        let mut outs = [None, None];
        for (slot, band) in outs.iter_mut().zip([Band::Low, Band::High]) {
            let lb = self.branch(band);
            let src = if lb.plan.source_factor == 2 { map2 } else { map4 };
            *slot = Some(lb.forward(g, p, src, lb.plan.source_side(n))?.0);
        }
        Ok((outs[0].unwrap(), outs[1].unwrap()))
    }

    pub fn decode_tokens<T: Scalar>(
        &self,
        latents: &TokenSequence<T>,
        plan: &MaskPlan,
        gsd: f64,
        p: &ParamStore<T>,
    ) -> Result<TokenSequence<T>> {
        let mut g = Graph::new();
        let x = g.input(latents.tokens.clone());
        let y = self.decode_tokens_graph(&mut g, p, x, latents.has_class_token, plan, gsd)?;
        Ok(TokenSequence {
            tokens: g.value(y).clone(),
            provenance: Provenance::FullWithMaskTokens,
            has_class_token: false,
        })
    }

    pub fn upsample_stage<T: Scalar>(
        &self,
        tokens: &TokenSequence<T>,
        p: &ParamStore<T>,
    ) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        if tokens.has_class_token {
            return Err(Error::InvalidArgument("drop the class token before upsampling".into()));
        }
        let mut g = Graph::new();
        let x = g.input(tokens.tokens.clone());
        let (a, b) = self.upsample_graph(&mut g, p, x)?;
        let n = self.cfg.token_grid_side;
        Ok((
            FeatureMap {
                values: g.value(a).clone(),
                side: 2 * n,
            },
            FeatureMap {
                values: g.value(b).clone(),
                side: 4 * n,
            },
        ))
    }

    /// Runs one branch on `fm`, which must be the map that branch reads.
    pub fn laplacian_block<T: Scalar>(
        &self,
        fm: &FeatureMap<T>,
        band: Band,
        out_gsd: f64,
        p: &ParamStore<T>,
    ) -> Result<RasterImage<T>> {
        let lb = self.branch(band);
        let want = lb.plan.source_side(self.cfg.token_grid_side);
        if fm.side != want || fm.values.rows() != fm.side * fm.side {
            return Err(Error::Shape(format!(
                "{} branch needs a {want}-side map (x{} of the token grid), got side {}",
                band.name(),
                lb.plan.source_factor,
                fm.side
            )));
        }
        let mut g = Graph::new();
        let x = g.input(fm.values.clone());
        let (y, side) = lb.forward(&mut g, p, x, fm.side)?;
        RasterImage::new(side, side, g.value(y).clone(), out_gsd)
    }

    /// Predictions as images. `gsd` is the input image's GSD; outputs carry
    /// the GSD of their own resolution.
    pub fn decode_forward<T: Scalar>(
        &self,
        latents: &TokenSequence<T>,
        plan: &MaskPlan,
        gsd: f64,
        input_size: usize,
        p: &ParamStore<T>,
    ) -> Result<(RasterImage<T>, RasterImage<T>)> {
        let mut g = Graph::new();
        let x = g.input(latents.tokens.clone());
        let (lo, hi) = self.forward_graph(&mut g, p, x, latents.has_class_token, plan, gsd)?;
        let (ls, hs) = (self.cfg.low_out_size, self.cfg.high_out_size);
        let scale = |s: usize| gsd * input_size as f64 / s as f64;
        Ok((
            RasterImage::new(ls, ls, g.value(lo).clone(), scale(ls))?,
            RasterImage::new(hs, hs, g.value(hi).clone(), scale(hs))?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ConvTGeom;
    use crate::nn::gradcheck::central_differences;
    use crate::nn::oracle::block_ref;
    use crate::patching::sample_mask;

    fn small(grid: usize, low: usize, high: usize, depth: usize) -> DecoderConfig {
        DecoderConfig {
            decode_depth: depth,
            decode_dim: 8,
            decode_heads: 2,
            mlp_ratio: 2.0,
            token_grid_side: grid,
            low_out_size: low,
            high_out_size: high,
            feature_map_blocks_per_lb: 2,
            lb_channels: 4,
            posenc: DecoderPosenc::FollowEncoder,
            out_chans: 3,
        }
    }

    fn build(cfg: &DecoderConfig, enc_dim: usize, seed: u64) -> (Decoder, ParamStore<f64>) {
        let mut layout = ParamLayout::new();
        let dec = Decoder::declare(&mut layout, cfg, enc_dim, true, &PosEncSettings::default()).unwrap();
        (dec, ParamStore::initialize(layout, seed))
    }

    fn latents(rows: usize, dim: usize, cls: bool) -> TokenSequence<f64> {
        TokenSequence {
            tokens: Tensor::from_fn(rows, dim, |r, c| ((r * 7 + c * 3) % 9) as f64 * 0.25 - 1.0),
            provenance: Provenance::VisibleOnly,
            has_class_token: cls,
        }
    }

    #[test]
    fn branch_planning() {
        let p = |g, s| plan_branch(g, s).unwrap();
        assert_eq!(p(14, 224), BranchPlan { source_factor: 4, upsample_blocks: 0 });
        assert_eq!(p(14, 448), BranchPlan { source_factor: 4, upsample_blocks: 1 });
        assert_eq!(p(8, 64), BranchPlan { source_factor: 2, upsample_blocks: 0 });
        assert_eq!(p(8, 128), BranchPlan { source_factor: 4, upsample_blocks: 0 });
        let e = plan_branch(14, 300).unwrap_err().to_string();
        assert!(e.contains("8*14") && e.contains("16*14"), "{e}");
        assert!(plan_branch(14, 112).is_ok());
        assert!(plan_branch(14, 120).is_err());
    }

    #[test]
    fn fourteen_grid_gives_28_and_56_maps() {
        let cfg = DecoderConfig {
            decode_dim: 4,
            decode_heads: 1,
            ..small(14, 224, 448, 1)
        };
        let (dec, p) = build(&cfg, 8, 1);
        let toks = TokenSequence {
            tokens: Tensor::from_fn(196, 4, |r, c| (r + c) as f64 * 0.01),
            provenance: Provenance::FullWithMaskTokens,
            has_class_token: false,
        };
        let (a, b) = dec.upsample_stage(&toks, &p).unwrap();
        assert_eq!((a.side, a.values.shape()), (28, (784, 4)));
        assert_eq!((b.side, b.values.shape()), (56, (3136, 4)));
        let lo = dec.laplacian_block(&b, Band::Low, 1.0, &p).unwrap();
        assert_eq!((lo.height(), lo.width(), lo.channels()), (224, 224, 3));
        let hi = dec.laplacian_block(&b, Band::High, 0.5, &p).unwrap();
        assert_eq!((hi.height(), hi.width(), hi.channels()), (448, 448, 3));
        let e = dec.laplacian_block(&a, Band::Low, 1.0, &p).unwrap_err().to_string();
        assert!(e.contains("56-side") && e.contains("x4"), "{e}");
        let odd = TokenSequence {
            tokens: Tensor::zeros(195, 4),
            ..toks
        };
        assert!(dec.upsample_stage(&odd, &p).is_err());
    }

    #[test]
    fn zero_deconvolutions_give_bias_maps() {
        let cfg = small(2, 16, 32, 1);
        let (dec, mut p) = build(&cfg, 8, 2);
        for id in [dec.up1.w, dec.up2.w] {
            p.get_mut(id).scale(0.0);
        }
        *p.get_mut(dec.up2.b) = Tensor::from_fn(1, 8, |_, c| c as f64);
        let toks = TokenSequence {
            tokens: Tensor::from_fn(4, 8, |r, c| (r * c) as f64),
            provenance: Provenance::FullWithMaskTokens,
            has_class_token: false,
        };
        let (_, b) = dec.upsample_stage(&toks, &p).unwrap();
        for r in 0..64 {
            assert_eq!(b.values.row(r), p.get(dec.up2.b).row(0));
        }
    }

    #[test]
    fn unit_impulse_transpose_convs_match_hand_arithmetic() {
        // 2x2 single-channel input
        let x = Tensor::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::zeros(1, 1);
        // kernel 2, stride 2: impulse at tap (0,0) places x[i,j] at (2i,2j)
        let mut w = Tensor::zeros(1, 4);
        w.set(0, 0, 1.0);
        let geom = ConvTGeom { in_side: 2, kernel: 2, stride: 2, pad: 0 };
        let y = crate::autograd::conv_transpose_forward(&x, &w, &b, geom).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 0.0, 2.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
            3.0, 0.0, 4.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(y.data(), &want);
        // kernel 4, stride 2, pad 1: impulse at tap (1,1) lands at 2i+1-1 = 2i
        let mut w = Tensor::zeros(1, 16);
        w.set(0, 5, 1.0);
        let geom = ConvTGeom { in_side: 2, kernel: 4, stride: 2, pad: 1 };
        let y = crate::autograd::conv_transpose_forward(&x, &w, &b, geom).unwrap();
        assert_eq!(y.data(), &want);
        // all-ones 2x2 kernel replicates each pixel into its block
        let w = Tensor::filled(1, 4, 1.0);
        let geom = ConvTGeom { in_side: 2, kernel: 2, stride: 2, pad: 0 };
        let y = crate::autograd::conv_transpose_forward(&x, &w, &b, geom).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &want);
    }

    #[test]
    fn zero_parameters_give_bias_images() {
        let cfg = small(2, 16, 32, 1);
        let (dec, mut p) = build(&cfg, 8, 3);
        for t in p.values_mut() {
            t.scale(0.0);
        }
        let bias = [0.5, -1.0, 2.0];
        for band in [Band::Low, Band::High] {
            *p.get_mut(dec.branch(band).recon.up2.b) = Tensor::from_vec(1, 3, bias.to_vec()).unwrap();
        }
        let plan = sample_mask(4, 0.5, 0).unwrap();
        let (lo, hi) = dec.decode_forward(&latents(3, 8, true), &plan, 1.0, 8, &p).unwrap();
        assert_eq!((lo.height(), hi.height()), (16, 32));
        for img in [&lo, &hi] {
            for r in 0..img.pixels().rows() {
                assert_eq!(img.pixels().row(r), &bias);
            }
        }
    }

    #[test]
    fn toy_shapes_and_determinism() {
        let cfg = DecoderConfig::toy();
        let (dec, p) = build(&cfg, 64, 4);
        let plan = sample_mask(64, 0.75, 3).unwrap();
        let lat = latents(17, 64, true);
        let (lo, hi) = dec.decode_forward(&lat, &plan, 2.0, 64, &p).unwrap();
        assert_eq!(lo.pixels().shape(), (64 * 64, 3));
        assert_eq!(hi.pixels().shape(), (128 * 128, 3));
        assert_eq!(lo.gsd(), 2.0);
        assert_eq!(hi.gsd(), 1.0);
        let again = dec.decode_forward(&lat, &plan, 2.0, 64, &p).unwrap();
        assert_eq!((lo, hi), again);
        assert!(dec.decode_forward(&latents(16, 64, true), &plan, 2.0, 64, &p).is_err());
    }

    #[test]
    fn depth_zero_is_scatter_plus_posenc() {
        let cfg = small(3, 24, 96, 0);
        let (dec, p) = build(&cfg, 8, 5);
        let plan = sample_mask(9, 0.5, 8).unwrap();
        let lat = latents(plan.visible_idx.len() + 1, 8, true);
        let out = dec.decode_tokens(&lat, &plan, 1.5, &p).unwrap();
        assert_eq!(out.tokens.shape(), (9, 8));
        let mut g = Graph::new();
        let xv = g.input(lat.tokens.clone());
        let emb = dec.embed.forward(&mut g, &p, xv);
        let emb = g.value(emb).clone();
        let pos = posenc_rows::<f64>(3, 8, Some(1.5), &dec.posenc, &(0..9).collect::<Vec<_>>()).unwrap();
        let mask = p.get(dec.mask_token);
        for (j, &i) in plan.visible_idx.iter().enumerate() {
            for c in 0..8 {
                assert_eq!(out.tokens.get(i, c), emb.get(j + 1, c) + pos.get(i, c));
            }
        }
        for &i in &plan.masked_idx {
            for c in 0..8 {
                assert_eq!(out.tokens.get(i, c), mask.get(0, c) + pos.get(i, c));
            }
        }
    }

    #[test]
    fn all_visible_plan_has_no_mask_tokens() {
        let cfg = small(2, 16, 32, 0);
        let (dec, mut p) = build(&cfg, 8, 6);
        *p.get_mut(dec.mask_token) = Tensor::filled(1, 8, 1e6);
        let plan = MaskPlan::all_visible(4);
        let out = dec.decode_tokens(&latents(5, 8, true), &plan, 1.0, &p).unwrap();
        assert!(out.tokens.data().iter().all(|v| v.abs() < 1e3));
    }

    #[test]
    fn two_by_two_grid_matches_scalar_oracle() {
        let cfg = DecoderConfig {
            decode_heads: 1,
            ..small(2, 16, 32, 1)
        };
        let (dec, p) = build(&cfg, 8, 7);
        let plan = MaskPlan::from_visible(4, vec![0, 3]).unwrap();
        let lat = latents(3, 8, true);
        let out = dec.decode_tokens(&lat, &plan, 1.0, &p).unwrap();
        // hand-assemble the block input: cls, then scattered tokens + posenc
        let mut g = Graph::new();
        let xv = g.input(lat.tokens.clone());
        let emb = dec.embed.forward(&mut g, &p, xv);
        let emb = g.value(emb).clone();
        let pos = posenc_rows::<f64>(2, 8, Some(1.0), &dec.posenc, &[0, 1, 2, 3]).unwrap();
        let mask = p.get(dec.mask_token);
        let x = Tensor::from_fn(5, 8, |r, c| match r {
            0 => emb.get(0, c),
            1 => emb.get(1, c) + pos.get(0, c),
            4 => emb.get(2, c) + pos.get(3, c),
            _ => mask.get(0, c) + pos.get(r - 1, c),
        });
        let want = block_ref(&x, &dec.blocks[0], &p);
        for r in 0..4 {
            for c in 0..8 {
                let (a, b) = (out.tokens.get(r, c), want.get(r + 1, c));
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn summed_output_gradients_match_finite_differences() {
        let cfg = small(2, 16, 32, 1);
        let (dec, mut p) = build(&cfg, 8, 8);
        let plan = sample_mask(4, 0.5, 2).unwrap();
        let lat = latents(3, 8, true);
        let run = |p: &ParamStore<f64>| {
            let mut g = Graph::new();
            let x = g.input(lat.tokens.clone());
            let (lo, hi) = dec.forward_graph(&mut g, p, x, true, &plan, 1.0).unwrap();
            let a = g.sum_all(lo);
            let b = g.sum_all(hi);
            let l = g.weighted_sum(&[(a, 1.0), (b, 0.5)]);
            (g, l)
        };
        let (g, l) = run(&p);
        let analytic = g.backward(l, &p).flatten();
        let probes: Vec<usize> = (0..p.total()).step_by(11).collect();
        for pr in central_differences(&mut p, &probes, &analytic, 1e-5, |s| {
            let (g, l) = run(s);
            g.scalar(l)
        }) {
            assert!(pr.rel_error(1e-6) < 1e-3, "{:?} {:?}", pr, p.locate(pr.flat_index));
        }
    }

    #[test]
    fn posenc_override() {
        let mut cfg = small(2, 16, 32, 0);
        cfg.posenc = DecoderPosenc::Standard;
        let mut layout = ParamLayout::new();
        let dec = Decoder::declare(&mut layout, &cfg, 8, true, &PosEncSettings::default()).unwrap();
        assert!(!dec.use_gsd_posenc);
        cfg.posenc = DecoderPosenc::Gsd;
        let dec = Decoder::declare(&mut ParamLayout::new(), &cfg, 8, false, &PosEncSettings::default()).unwrap();
        assert!(dec.use_gsd_posenc);
    }
}
