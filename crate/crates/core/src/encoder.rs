//! Patch embedding and the ViT encoder over visible tokens.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, ParamId, ParamLayout, ParamStore, TransformerBlock};
use crate::patching::{MaskPlan, PatchGrid};
use crate::posenc::{positional_grid, PosEncSettings};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Init bound for the learned class and mask tokens.
pub(crate) const TOKEN_INIT: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub use_gsd_posenc: bool,
    pub use_class_token: bool,
    pub input_size: usize,
    pub in_chans: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            use_gsd_posenc: true,
            use_class_token: true,
            input_size: 64,
            in_chans: 3,
        }
    }

    pub fn vit_base() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            input_size: 224,
            ..Self::toy()
        }
    }

    pub fn vit_large() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 1024,
            depth: 24,
            heads: 16,
            input_size: 224,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return bad(format!("encoder.embed_dim must be a positive multiple of 4, got {}", self.embed_dim));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "encoder.embed_dim {} is not divisible by encoder.heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return bad(format!(
                "encoder.input_size {} is not a multiple of encoder.patch_size {}",
                self.input_size, self.patch_size
            ));
        }
        if self.in_chans == 0 || !(self.mlp_ratio > 0.0) {
            return bad("encoder.in_chans and encoder.mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_chans
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    VisibleOnly,
    FullWithMaskTokens,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub provenance: Provenance,
    /// Row 0 is the class token.
    pub has_class_token: bool,
}

impl<T: Scalar> TokenSequence<T> {
    /// Token rows without the class token.
    pub fn patch_tokens(&self) -> Tensor<T> {
        if !self.has_class_token {
            return self.tokens.clone();
        }
        let (n, d) = self.tokens.shape();
        Tensor::from_vec(n - 1, d, self.tokens.data()[d..].to_vec()).expect("row slice")
    }
}

/// Positional rows for the given token indices. The GSD-scaled table is used
/// when `gsd` is `Some`.
pub(crate) fn posenc_rows<T: Scalar>(
    grid_side: usize,
    dim: usize,
    gsd: Option<f64>,
    settings: &PosEncSettings,
    idx: &[usize],
) -> Result<Tensor<T>> {
    let grid = positional_grid::<T>(grid_side, gsd, &settings.for_dim(dim))?;
    Ok(crate::patching::gather_rows(&grid.values, idx))
}

pub(crate) fn check_gsd(gsd: f64) -> Result<()> {
    if gsd > 0.0 && gsd.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("gsd must be positive, got {gsd}")))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub posenc: PosEncSettings,
    pub patch_embed: Linear,
    pub cls_token: Option<ParamId>,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn declare(layout: &mut ParamLayout, cfg: &EncoderConfig, posenc: &PosEncSettings) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch_embed = Linear::declare(layout, "encoder.patch_embed", cfg.patch_dim(), d);
        let cls_token = cfg
            .use_class_token
            .then(|| layout.declare("encoder.cls_token", 1, d, Init::Uniform { bound: TOKEN_INIT }));
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::declare(layout, &format!("encoder.blocks.{i}"), d, cfg.heads, cfg.mlp_ratio))
            .collect();
        let norm = LayerNorm::declare(layout, "encoder.norm", d);
        Ok(Self {
            cfg: cfg.clone(),
            posenc: posenc.clone(),
            patch_embed,
            cls_token,
            blocks,
            norm,
        })
    }

    /// `n x (P*P*C)` patch rows to `n x D` tokens.
    pub fn embed_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, patches: Var) -> Result<Var> {
        let cols = g.value(patches).cols();
        if cols != self.cfg.patch_dim() {
            return Err(Error::Shape(format!(
                "patch vectors have length {cols}, encoder expects {}",
                self.cfg.patch_dim()
            )));
        }
        Ok(self.patch_embed.forward(g, p, patches))
    }

    /// Adds positional rows for `positions`, prepends the class token (zero
    /// positional row) and runs the blocks. No final norm.
    pub fn encode_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        tokens: Var,
        positions: &[usize],
        gsd: f64,
    ) -> Result<Var> {
        let (n, d) = g.value(tokens).shape();
        if n != positions.len() || d != self.cfg.embed_dim {
            return Err(Error::Shape(format!(
                "encoder got {n}x{d} tokens for {} positions at dim {}",
                positions.len(),
                self.cfg.embed_dim
            )));
        }
        let gsd = if self.cfg.use_gsd_posenc {
            check_gsd(gsd)?;
            Some(gsd)
        } else {
            None
        };
        let pos = posenc_rows(self.cfg.grid_side(), d, gsd, &self.posenc, positions)?;
        let pos = g.input(pos);
        let mut x = g.add(tokens, pos);
        if let Some(cls) = self.cls_token {
            let cls = g.param(p, cls);
            x = g.concat_rows(&[cls, x]);
        }
        for blk in &self.blocks {
            x = blk.forward(g, p, x);
        }
        Ok(x)
    }

    pub fn final_norm<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        self.norm.forward(g, p, x)
    }

    pub fn embed_patches<T: Scalar>(&self, pg: &PatchGrid<T>, p: &ParamStore<T>) -> Result<TokenSequence<T>> {
        let mut g = Graph::new();
        let x = g.input(pg.patches.clone());
        let y = self.embed_graph(&mut g, p, x)?;
        Ok(TokenSequence {
            tokens: g.value(y).clone(),
            provenance: Provenance::VisibleOnly,
            has_class_token: false,
        })
    }

    /// `seq` must hold exactly the visible tokens of `plan`, in
    /// `plan.visible_idx` order.
    pub fn encode<T: Scalar>(
        &self,
        seq: &TokenSequence<T>,
        plan: &MaskPlan,
        gsd: f64,
        p: &ParamStore<T>,
    ) -> Result<TokenSequence<T>> {
        if seq.provenance != Provenance::VisibleOnly || seq.has_class_token {
            return Err(Error::InvalidArgument("encoder input must be visible patch tokens".into()));
        }
        if plan.n_patches != self.cfg.n_patches() {
            return Err(Error::Shape(format!(
                "mask plan covers {} patches, encoder grid has {}",
                plan.n_patches,
                self.cfg.n_patches()
            )));
        }
        let mut g = Graph::new();
        let x = g.input(seq.tokens.clone());
        let y = self.encode_graph(&mut g, p, x, &plan.visible_idx, gsd)?;
        Ok(TokenSequence {
            tokens: g.value(y).clone(),
            provenance: Provenance::VisibleOnly,
            has_class_token: self.cls_token.is_some(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::central_differences;
    use crate::nn::oracle::block_ref;
    use crate::patching::sample_mask;

    fn tiny(depth: usize, heads: usize, dim: usize) -> EncoderConfig {
        EncoderConfig {
            patch_size: 2,
            embed_dim: dim,
            depth,
            heads,
            mlp_ratio: 2.0,
            use_gsd_posenc: true,
            use_class_token: true,
            input_size: 8,
            in_chans: 1,
        }
    }

    fn build(cfg: &EncoderConfig, seed: u64) -> (Encoder, ParamStore<f64>) {
        let mut layout = ParamLayout::new();
        let enc = Encoder::declare(&mut layout, cfg, &PosEncSettings::default()).unwrap();
        (enc, ParamStore::initialize(layout, seed))
    }

    fn grid(n: usize, dim: usize, seed: u64) -> PatchGrid<f64> {
        PatchGrid {
            patches: Tensor::from_fn(n, dim, |r, c| (((r * 31 + c * 17 + seed as usize) % 23) as f64) / 11.0 - 1.0),
            grid_side: (n as f64).sqrt() as usize,
            patch_size: 2,
            channels: 1,
            source_gsd: 1.0,
        }
    }

    #[test]
    fn zero_projection_gives_zero_tokens() {
        let cfg = tiny(0, 1, 8);
        let (enc, mut p) = build(&cfg, 1);
        p.get_mut(enc.patch_embed.w).scale(0.0);
        let seq = enc.embed_patches(&grid(16, 4, 0), &p).unwrap();
        assert!(seq.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_passes_patches_through() {
        let cfg = EncoderConfig {
            embed_dim: 4,
            ..tiny(0, 1, 4)
        };
        let (enc, mut p) = build(&cfg, 1);
        *p.get_mut(enc.patch_embed.w) = Tensor::from_fn(4, 4, |r, c| if r == c { 1.0 } else { 0.0 });
        let pg = grid(16, 4, 3);
        assert_eq!(enc.embed_patches(&pg, &p).unwrap().tokens, pg.patches);
    }

    #[test]
    fn embedding_matches_triple_loop() {
        let cfg = tiny(0, 1, 8);
        let (enc, mut p) = build(&cfg, 5);
        *p.get_mut(enc.patch_embed.b) = Tensor::from_fn(1, 8, |_, c| c as f64 * 0.1);
        let pg = grid(4, 4, 7);
        let got = enc.embed_patches(&pg, &p).unwrap().tokens;
        let (w, b) = (p.get(enc.patch_embed.w), p.get(enc.patch_embed.b));
        for i in 0..4 {
            for j in 0..8 {
                let mut acc = b.get(0, j);
                for k in 0..4 {
                    acc += pg.patches.get(i, k) * w.get(k, j);
                }
                assert!((got.get(i, j) - acc).abs() < 1e-12);
            }
        }
        let short = grid(4, 3, 0);
        assert!(enc.embed_patches(&short, &p).is_err());
    }

    #[test]
    fn depth_zero_adds_selected_posenc_rows_and_class_token() {
        let cfg = tiny(0, 1, 8);
        let (enc, p) = build(&cfg, 2);
        let plan = sample_mask(16, 0.75, 11).unwrap();
        let seq = TokenSequence {
            tokens: Tensor::from_fn(4, 8, |r, c| (r * 8 + c) as f64),
            provenance: Provenance::VisibleOnly,
            has_class_token: false,
        };
        let gsd = 3.0;
        let out = enc.encode(&seq, &plan, gsd, &p).unwrap();
        let full = crate::posenc::gsd_2d_sincos::<f64>(4, gsd, &PosEncSettings::default().for_dim(8)).unwrap();
        assert_eq!(out.tokens.row(0), p.get(enc.cls_token.unwrap()).row(0));
        for (j, &pos) in plan.visible_idx.iter().enumerate() {
            for c in 0..8 {
                let want = seq.tokens.get(j, c) + full.values.get(pos, c);
                assert_eq!(out.tokens.get(j + 1, c), want);
            }
        }
    }

    #[test]
    fn reference_gsd_matches_standard_path() {
        let mut cfg = tiny(1, 2, 8);
        let (enc, p) = build(&cfg, 3);
        let plan = sample_mask(16, 0.5, 1).unwrap();
        let seq = TokenSequence {
            tokens: Tensor::from_fn(8, 8, |r, c| ((r + c) % 5) as f64 * 0.2),
            provenance: Provenance::VisibleOnly,
            has_class_token: false,
        };
        let a = enc.encode(&seq, &plan, 1.0, &p).unwrap();
        cfg.use_gsd_posenc = false;
        let (enc_std, _) = build(&cfg, 3);
        let b = enc_std.encode(&seq, &plan, 123.0, &p).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert!(enc.encode(&seq, &plan, 0.0, &p).is_err());
        assert!(enc.encode(&seq, &plan, -1.0, &p).is_err());
    }

    #[test]
    fn single_block_matches_scalar_attention_oracle() {
        let cfg = EncoderConfig {
            use_class_token: false,
            ..tiny(1, 1, 8)
        };
        let (enc, p) = build(&cfg, 4);
        let plan = MaskPlan::from_visible(16, vec![5, 9]).unwrap();
        let tokens = Tensor::from_fn(2, 8, |r, c| ((r * 3 + c) % 7) as f64 * 0.3 - 0.9);
        let seq = TokenSequence {
            tokens: tokens.clone(),
            provenance: Provenance::VisibleOnly,
            has_class_token: false,
        };
        let out = enc.encode(&seq, &plan, 2.0, &p).unwrap();
        let mut x = tokens;
        let pos = posenc_rows::<f64>(4, 8, Some(2.0), &enc.posenc, &[5, 9]).unwrap();
        x.add_assign(&pos);
        let want = block_ref(&x, &enc.blocks[0], &p);
        for (a, b) in out.tokens.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn permuting_visible_tokens_permutes_outputs() {
        let cfg = EncoderConfig {
            use_class_token: false,
            ..tiny(2, 2, 8)
        };
        let (enc, p) = build(&cfg, 6);
        let idx = vec![1, 4, 7, 12];
        let tokens = Tensor::from_fn(4, 8, |r, c| ((r * 5 + c * 3) % 11) as f64 * 0.2 - 1.0);
        let perm = [2, 0, 3, 1];
        let run = |rows: &[usize]| {
            let mut g = Graph::new();
            let t = g.input(crate::patching::gather_rows(&tokens, rows));
            let pos: Vec<usize> = rows.iter().map(|&r| idx[r]).collect();
            let y = enc.encode_graph(&mut g, &p, t, &pos, 1.5).unwrap();
            g.value(y).clone()
        };
        let base = run(&[0, 1, 2, 3]);
        let shuffled = run(&perm);
        for (j, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((shuffled.get(j, c) - base.get(src, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = tiny(2, 2, 8);
        let (enc, p) = build(&cfg, 8);
        let plan = sample_mask(16, 0.75, 2).unwrap();
        let seq = enc.embed_patches(&grid(16, 4, 1), &p).unwrap();
        let vis = TokenSequence {
            tokens: crate::patching::gather_rows(&seq.tokens, &plan.visible_idx),
            ..seq
        };
        let a = enc.encode(&vis, &plan, 0.5, &p).unwrap();
        let b = enc.encode(&vis, &plan, 0.5, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = tiny(1, 2, 16);
        let (enc, mut p) = build(&cfg, 9);
        let pg = grid(16, 4, 2);
        let plan = sample_mask(16, 0.5, 4).unwrap();
        let target = Tensor::from_fn(9, 16, |r, c| ((r + 2 * c) % 3) as f64 - 1.0);
        let run = |p: &ParamStore<f64>| {
            let mut g = Graph::new();
            let x = g.input(crate::patching::gather_rows(&pg.patches, &plan.visible_idx));
            let t = enc.embed_graph(&mut g, p, x).unwrap();
            let y = enc.encode_graph(&mut g, p, t, &plan.visible_idx, 2.0).unwrap();
            let y = enc.final_norm(&mut g, p, y);
            let l = g.mse(y, &target, None).unwrap();
            (g, l)
        };
        let (g, l) = run(&p);
        let analytic = g.backward(l, &p).flatten();
        let probes: Vec<usize> = (0..p.total()).step_by(7).collect();
        for pr in central_differences(&mut p, &probes, &analytic, 1e-5, |s| {
            let (g, l) = run(s);
            g.scalar(l)
        }) {
            assert!(pr.rel_error(1e-7) < 1e-3, "{:?} {:?}", pr, p.locate(pr.flat_index));
        }
    }

    #[test]
    fn presets_validate() {
        for c in [EncoderConfig::toy(), EncoderConfig::vit_base(), EncoderConfig::vit_large()] {
            c.validate().unwrap();
        }
        assert_eq!(EncoderConfig::vit_large().n_patches(), 196);
        let bad = EncoderConfig { heads: 3, ..EncoderConfig::toy() };
        assert!(bad.validate().is_err());
    }
}
