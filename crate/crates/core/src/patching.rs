//! Patchification, random masking and mask-token scattering.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RasterImage;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major sequence of flattened `P x P x C` patches.
///
/// Each patch row is laid out `(py, px, c)` with channel fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T> {
    pub patches: Tensor<T>,
    pub grid_side: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub source_gsd: f64,
}

impl<T: Scalar> PatchGrid<T> {
    pub fn n_patches(&self) -> usize {
        self.patches.rows()
    }

    /// Ground spacing between adjacent patch centers.
    pub fn patch_gsd(&self) -> f64 {
        self.source_gsd * self.patch_size as f64
    }
}

pub fn patchify<T: Scalar>(img: &RasterImage<T>, patch: usize) -> Result<PatchGrid<T>> {
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    if !img.is_square() {
        return Err(Error::InvalidArgument(format!(
            "patchify expects a square image, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    let side = img.height();
    if side % patch != 0 {
        return Err(Error::NotDivisible {
            side,
            patch,
            pad: patch - side % patch,
        });
    }
    let g = side / patch;
    let c = img.channels();
    let mut patches = Tensor::zeros(g * g, patch * patch * c);
    let src = img.pixels();
    for gy in 0..g {
        for gx in 0..g {
            let row = patches.row_mut(gy * g + gx);
            for py in 0..patch {
                let y = gy * patch + py;
                let start = y * side + gx * patch;
                for px in 0..patch {
                    let dst = (py * patch + px) * c;
                    row[dst..dst + c].copy_from_slice(src.row(start + px));
                }
            }
        }
    }
    Ok(PatchGrid {
        patches,
        grid_side: g,
        patch_size: patch,
        channels: c,
        source_gsd: img.gsd(),
    })
}

pub fn unpatchify<T: Scalar>(pg: &PatchGrid<T>) -> Result<RasterImage<T>> {
    let (g, p, c) = (pg.grid_side, pg.patch_size, pg.channels);
    if g == 0 || p == 0 || c == 0 || pg.patches.rows() != g * g || pg.patches.cols() != p * p * c {
        return Err(Error::Shape(format!(
            "patch grid {}x{} inconsistent with side {g}, patch {p}, channels {c}",
            pg.patches.rows(),
            pg.patches.cols()
        )));
    }
    let side = g * p;
    let mut pixels = Tensor::zeros(side * side, c);
    for gy in 0..g {
        for gx in 0..g {
            let row = pg.patches.row(gy * g + gx);
            for py in 0..p {
                for px in 0..p {
                    let src = (py * p + px) * c;
                    let dst = (gy * p + py) * side + gx * p + px;
                    pixels.row_mut(dst).copy_from_slice(&row[src..src + c]);
                }
            }
        }
    }
    RasterImage::new(side, side, pixels, pg.source_gsd)
}

/// Which patches the encoder sees.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub n_patches: usize,
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    /// Stored as bits so the plan stays `Eq`.
    mask_ratio_bits: u64,
    pub seed: u64,
}

impl MaskPlan {
    pub fn mask_ratio(&self) -> f64 {
        f64::from_bits(self.mask_ratio_bits)
    }

    /// Plan with every patch visible (evaluation / no masking).
    pub fn all_visible(n_patches: usize) -> Self {
        Self {
            n_patches,
            visible_idx: (0..n_patches).collect(),
            masked_idx: Vec::new(),
            mask_ratio_bits: 0f64.to_bits(),
            seed: 0,
        }
    }

    /// Plan from an explicit visible set; the rest is masked.
    pub fn from_visible(n_patches: usize, mut visible: Vec<usize>) -> Result<Self> {
        visible.sort_unstable();
        visible.dedup();
        if visible.is_empty() || visible.last().is_some_and(|&v| v >= n_patches) {
            return Err(Error::InvalidArgument(format!(
                "visible set must be non-empty and within 0..{n_patches}"
            )));
        }
        let masked_idx = (0..n_patches).filter(|i| visible.binary_search(i).is_err()).collect();
        let ratio = 1.0 - visible.len() as f64 / n_patches as f64;
        Ok(Self {
            n_patches,
            visible_idx: visible,
            masked_idx,
            mask_ratio_bits: ratio.to_bits(),
            seed: 0,
        })
    }

    /// Per-patch flags, `true` where masked.
    pub fn masked_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.n_patches];
        for &i in &self.masked_idx {
            flags[i] = true;
        }
        flags
    }
}

/// Number of visible patches: `round_ties_even(n * (1 - ratio))`.
pub fn visible_count(n_patches: usize, mask_ratio: f64) -> usize {
    (n_patches as f64 * (1.0 - mask_ratio)).round_ties_even() as usize
}

/// Uniform random subset without replacement via a seeded shuffle.
pub fn sample_mask(n_patches: usize, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio must lie in (0, 1), got {mask_ratio}"
        )));
    }
    let keep = visible_count(n_patches, mask_ratio);
    if keep == 0 {
        return Err(Error::NoVisiblePatches {
            n: n_patches,
            ratio: mask_ratio,
        });
    }
    let mut order: Vec<usize> = (0..n_patches).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut visible_idx = order[..keep].to_vec();
    let mut masked_idx = order[keep..].to_vec();
    visible_idx.sort_unstable();
    masked_idx.sort_unstable();
    Ok(MaskPlan {
        n_patches,
        visible_idx,
        masked_idx,
        mask_ratio_bits: mask_ratio.to_bits(),
        seed,
    })
}

/// Selects the rows of `x` at `idx`.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(idx.len(), x.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(x.row(i));
    }
    out
}

/// Places `visible` rows at `plan.visible_idx` and `mask_token` everywhere
/// else, producing `n_patches` rows.
pub fn scatter_with_mask_tokens<T: Scalar>(
    visible: &Tensor<T>,
    plan: &MaskPlan,
    mask_token: &[T],
) -> Result<Tensor<T>> {
    if visible.rows() != plan.visible_idx.len() {
        return Err(Error::Shape(format!(
            "{} visible tokens for a plan with {} visible patches",
            visible.rows(),
            plan.visible_idx.len()
        )));
    }
    if mask_token.len() != visible.cols() {
        return Err(Error::Shape(format!(
            "mask token has {} dims, tokens have {}",
            mask_token.len(),
            visible.cols()
        )));
    }
    let mut out = Tensor::zeros(plan.n_patches, visible.cols());
    for &m in &plan.masked_idx {
        out.row_mut(m).copy_from_slice(mask_token);
    }
    for (r, &v) in plan.visible_idx.iter().enumerate() {
        out.row_mut(v).copy_from_slice(visible.row(r));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(side: usize, c: usize, seed: u64) -> RasterImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RasterImage::from_fn(side, side, c, 1.0, |_, _, _| rng.gen()).unwrap()
    }

    #[test]
    fn default_grid_has_196_patches() {
        let img = RasterImage::<f32>::constant(224, 224, 3, 0.1, 0.6).unwrap();
        let pg = patchify(&img, 16).unwrap();
        assert_eq!(pg.patches.shape(), (196, 16 * 16 * 3));
        assert_eq!(pg.grid_side, 14);
    }

    #[test]
    fn patch_zero_is_top_left_block() {
        let img = RasterImage::<f64>::from_fn(4, 4, 1, 1.0, |y, x, _| (y * 4 + x) as f64).unwrap();
        let pg = patchify(&img, 2).unwrap();
        assert_eq!(pg.patches.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(pg.patches.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(pg.patches.row(2), &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(pg.patches.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn non_divisible_reports_padding() {
        let img = random_image(10, 1, 0);
        match patchify(&img, 4) {
            Err(Error::NotDivisible { pad, .. }) => assert_eq!(pad, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_patches_give_constant_image() {
        let pg = PatchGrid {
            patches: Tensor::<f64>::filled(4, 2 * 2 * 3, 0.25),
            grid_side: 2,
            patch_size: 2,
            channels: 3,
            source_gsd: 1.0,
        };
        let img = unpatchify(&pg).unwrap();
        assert!(img.pixels().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn permuted_patches_restore_original() {
        let img = random_image(8, 3, 1);
        let pg = patchify(&img, 2).unwrap();
        let n = pg.n_patches();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
        let shuffled = gather_rows(&pg.patches, &perm);
        let mut inverse = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let restored = PatchGrid {
            patches: gather_rows(&shuffled, &inverse),
            ..pg.clone()
        };
        assert_eq!(unpatchify(&restored).unwrap(), img);
    }

    #[test]
    fn unpatchify_rejects_inconsistent_fields() {
        let mut pg = patchify(&random_image(4, 1, 2), 2).unwrap();
        pg.grid_side = 3;
        assert!(unpatchify(&pg).is_err());
    }

    #[test]
    fn default_mask_keeps_49() {
        let plan = sample_mask(196, 0.75, 11).unwrap();
        assert_eq!(plan.visible_idx.len(), 49);
        assert_eq!(plan.masked_idx.len(), 147);
        assert_eq!(plan, sample_mask(196, 0.75, 11).unwrap());
    }

    #[test]
    fn ties_round_to_even() {
        // 10 * 0.25 = 2.5 -> 2, 14 * 0.25 = 3.5 -> 4
        assert_eq!(visible_count(10, 0.75), 2);
        assert_eq!(visible_count(14, 0.75), 4);
    }

    #[test]
    fn invalid_ratios_error() {
        assert!(sample_mask(10, 0.0, 0).is_err());
        assert!(sample_mask(10, 1.0, 0).is_err());
        assert!(matches!(sample_mask(4, 0.9, 0), Err(Error::NoVisiblePatches { .. })));
    }

    #[test]
    fn mask_frequency_is_uniform() {
        let (n, m, draws) = (16usize, 0.75, 10_000u64);
        let mut counts = vec![0usize; n];
        for s in 0..draws {
            for i in sample_mask(n, m, s).unwrap().masked_idx {
                counts[i] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - m).abs() <= 0.02, "{freq}");
        }
    }

    #[test]
    fn all_visible_scatter_is_identity() {
        let x = Tensor::<f64>::from_fn(5, 3, |r, c| (r * 3 + c) as f64);
        let plan = MaskPlan::all_visible(5);
        assert_eq!(scatter_with_mask_tokens(&x, &plan, &[9.0; 3]).unwrap(), x);
    }

    #[test]
    fn single_visible_scatter() {
        let plan = MaskPlan::from_visible(6, vec![4]).unwrap();
        let x = Tensor::<f64>::filled(1, 2, 1.0);
        let out = scatter_with_mask_tokens(&x, &plan, &[-1.0, -2.0]).unwrap();
        for r in 0..6 {
            let expect: &[f64] = if r == 4 { &[1.0, 1.0] } else { &[-1.0, -2.0] };
            assert_eq!(out.row(r), expect);
        }
        assert!(scatter_with_mask_tokens(&Tensor::filled(2, 2, 0.0), &plan, &[0.0; 2]).is_err());
    }

    proptest! {
        #[test]
        fn patchify_round_trip(g in 1usize..5, p in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
            let img = random_image(g * p, c, seed);
            let pg = patchify(&img, p).unwrap();
            prop_assert_eq!(unpatchify(&pg).unwrap(), img);
        }

        #[test]
        fn plan_partitions_and_scatter_gathers(n in 2usize..80, m in 0.05f64..0.95, seed in any::<u64>()) {
            prop_assume!(visible_count(n, m) > 0);
            let plan = sample_mask(n, m, seed).unwrap();
            let mut all: Vec<usize> = plan.visible_idx.iter().chain(&plan.masked_idx).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(plan.visible_idx.len(), visible_count(n, m));

            let x = Tensor::<f64>::from_fn(plan.visible_idx.len(), 3, |r, c| (r * 7 + c) as f64);
            let token = [0.5, -0.5, 2.0];
            let full = scatter_with_mask_tokens(&x, &plan, &token).unwrap();
            prop_assert_eq!(gather_rows(&full, &plan.visible_idx), x);
            for &i in &plan.masked_idx {
                prop_assert_eq!(full.row(i), &token[..]);
            }
        }
    }
}
