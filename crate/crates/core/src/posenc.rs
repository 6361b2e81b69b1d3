//! 2-D sine/cosine positional encodings, standard and GSD-scaled.
//!
//! Token `t` of a `side x side` grid sits at column `x = t % side` and row
//! `y = t / side`. The first `D/2` features encode `x` and the last `D/2`
//! encode `y`; inside each half, features alternate `sin, cos` with the
//! frequency index `i` running over `0..D/4`:
//!
//! ```text
//! half[2i]   = sin(pos * w_i)
//! half[2i+1] = cos(pos * w_i),   w_i = temperature^(-2i / (D/2))
//! ```
//!
//! The GSD variant replaces `pos` with `pos * scale`, where by default
//! `scale = gsd / reference_gsd`, so the phase is proportional to ground
//! distance. A coarse grid covering the same ground as a fine grid then reads
//! out the matching subsection of the fine grid's waveform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which way the GSD ratio multiplies the position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GsdFactorOrientation {
    /// `pos * gsd / reference`: phase tracks ground distance.
    #[default]
    GroundDistance,
    /// `pos * reference / gsd`: the ratio as literally printed in the
    /// original formulation.
    InverseRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosEncConfig {
    pub embed_dim: usize,
    pub temperature: f64,
    pub reference_gsd: f64,
    pub gsd_factor_orientation: GsdFactorOrientation,
}

impl Default for PosEncConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            temperature: 10_000.0,
            reference_gsd: 1.0,
            gsd_factor_orientation: GsdFactorOrientation::GroundDistance,
        }
    }
}

impl PosEncConfig {
    pub fn with_dim(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "positional embedding dim must be a positive multiple of 4, got {}",
                self.embed_dim
            )));
        }
        if !(self.temperature > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must exceed 1, got {}",
                self.temperature
            )));
        }
        if !(self.reference_gsd > 0.0 && self.reference_gsd.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "reference gsd must be positive, got {}",
                self.reference_gsd
            )));
        }
        Ok(())
    }

    /// Position multiplier for an image at `gsd`.
    pub fn scale_for(&self, gsd: f64) -> f64 {
        match self.gsd_factor_orientation {
            GsdFactorOrientation::GroundDistance => gsd / self.reference_gsd,
            GsdFactorOrientation::InverseRatio => self.reference_gsd / gsd,
        }
    }
}

/// Encoding knobs shared by encoder and decoder; the width comes from the
/// consuming module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosEncSettings {
    pub temperature: f64,
    pub reference_gsd: f64,
    pub gsd_factor_orientation: GsdFactorOrientation,
}

impl Default for PosEncSettings {
    fn default() -> Self {
        let d = PosEncConfig::default();
        Self {
            temperature: d.temperature,
            reference_gsd: d.reference_gsd,
            gsd_factor_orientation: d.gsd_factor_orientation,
        }
    }
}

impl PosEncSettings {
    pub fn for_dim(&self, embed_dim: usize) -> PosEncConfig {
        PosEncConfig {
            embed_dim,
            temperature: self.temperature,
            reference_gsd: self.reference_gsd,
            gsd_factor_orientation: self.gsd_factor_orientation,
        }
    }
}

/// `N x D` table of positional vectors for a square token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalGrid<T> {
    pub values: Tensor<T>,
    pub grid_side: usize,
    /// `None` for the standard (unscaled) encoding.
    pub gsd_used: Option<f64>,
}

fn axis_frequencies<T: Scalar>(cfg: &PosEncConfig) -> Vec<T> {
    let half = cfg.embed_dim / 2;
    let temp = T::from_f64_lossy(cfg.temperature);
    (0..half / 2)
        .map(|i| {
            let exponent = T::from_usize_lossy(2 * i) / T::from_usize_lossy(half);
            T::one() / temp.powf(exponent)
        })
        .collect()
}

fn fill_axis<T: Scalar>(out: &mut [T], pos: T, freqs: &[T]) {
    for (i, &w) in freqs.iter().enumerate() {
        let (s, c) = (pos * w).sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
}

fn build<T: Scalar>(grid_side: usize, scale: T, cfg: &PosEncConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    if grid_side == 0 {
        return Err(Error::InvalidArgument("grid side must be at least 1".into()));
    }
    let d = cfg.embed_dim;
    let half = d / 2;
    let freqs = axis_frequencies::<T>(cfg);
    let mut values = Tensor::zeros(grid_side * grid_side, d);
    for t in 0..grid_side * grid_side {
        let x = T::from_usize_lossy(t % grid_side) * scale;
        let y = T::from_usize_lossy(t / grid_side) * scale;
        let row = values.row_mut(t);
        let (rx, ry) = row.split_at_mut(half);
        fill_axis(rx, x, &freqs);
        fill_axis(ry, y, &freqs);
    }
    Ok(values)
}

/// Resolution-relative encoding: positions are raw patch indices.
pub fn standard_2d_sincos<T: Scalar>(grid_side: usize, cfg: &PosEncConfig) -> Result<PositionalGrid<T>> {
    Ok(PositionalGrid {
        values: build(grid_side, T::one(), cfg)?,
        grid_side,
        gsd_used: None,
    })
}

/// Ground-referenced encoding for an image whose patch grid has spacing `gsd`
/// in the units of `cfg.reference_gsd`.
pub fn gsd_2d_sincos<T: Scalar>(grid_side: usize, gsd: f64, cfg: &PosEncConfig) -> Result<PositionalGrid<T>> {
    if !(gsd > 0.0 && gsd.is_finite()) {
        return Err(Error::InvalidArgument(format!("gsd must be positive, got {gsd}")));
    }
    let scale = T::from_f64_lossy(cfg.scale_for(gsd));
    Ok(PositionalGrid {
        values: build(grid_side, scale, cfg)?,
        grid_side,
        gsd_used: Some(gsd),
    })
}

/// Dispatches on the GSD flag used by the encoder and decoder.
pub fn positional_grid<T: Scalar>(
    grid_side: usize,
    gsd: Option<f64>,
    cfg: &PosEncConfig,
) -> Result<PositionalGrid<T>> {
    match gsd {
        Some(g) => gsd_2d_sincos(grid_side, g, cfg),
        None => standard_2d_sincos(grid_side, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Scalar evaluation of one entry straight from the sin/cos definition.
    fn entry(pos_x: f64, pos_y: f64, feature: usize, d: usize, temp: f64) -> f64 {
        let half = d / 2;
        let (pos, j) = if feature < half { (pos_x, feature) } else { (pos_y, feature - half) };
        let i = j / 2;
        let arg = pos / temp.powf((2 * i) as f64 / half as f64);
        if j % 2 == 0 {
            arg.sin()
        } else {
            arg.cos()
        }
    }

    #[test]
    fn origin_token_is_sin_zero_cos_one() {
        let g = standard_2d_sincos::<f64>(4, &PosEncConfig::with_dim(16)).unwrap();
        for (f, &v) in g.values.row(0).iter().enumerate() {
            assert_eq!(v, if f % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn first_frequency_is_unit() {
        let g = standard_2d_sincos::<f64>(4, &PosEncConfig::with_dim(16)).unwrap();
        // token 1 is x = 1, y = 0
        assert_eq!(g.values.get(1, 0), 1f64.sin());
        assert_eq!(g.values.get(1, 1), 1f64.cos());
    }

    #[test]
    fn small_grid_matches_direct_evaluation() {
        let cfg = PosEncConfig::with_dim(8);
        let g = standard_2d_sincos::<f64>(3, &cfg).unwrap();
        for t in 0..9 {
            for f in 0..8 {
                let e = entry((t % 3) as f64, (t / 3) as f64, f, 8, 1e4);
                assert!((g.values.get(t, f) - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn reference_gsd_reduces_to_standard() {
        let cfg = PosEncConfig::with_dim(32);
        let a = gsd_2d_sincos::<f64>(7, 1.0, &cfg).unwrap();
        let b = standard_2d_sincos::<f64>(7, &cfg).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn doubled_gsd_reads_doubled_position() {
        let cfg = PosEncConfig::with_dim(16);
        let coarse = gsd_2d_sincos::<f64>(4, 2.0, &cfg).unwrap();
        let fine = standard_2d_sincos::<f64>(8, &cfg).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(coarse.values.row(y * 4 + x), fine.values.row(2 * y * 8 + 2 * x));
            }
        }
    }

    #[test]
    fn inverse_orientation_uses_reciprocal() {
        let cfg = PosEncConfig {
            gsd_factor_orientation: GsdFactorOrientation::InverseRatio,
            ..PosEncConfig::with_dim(16)
        };
        let a = gsd_2d_sincos::<f64>(4, 0.5, &cfg).unwrap();
        let b = gsd_2d_sincos::<f64>(4, 2.0, &PosEncConfig::with_dim(16)).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn bad_config_rejected() {
        assert!(standard_2d_sincos::<f64>(4, &PosEncConfig::with_dim(6)).is_err());
        assert!(gsd_2d_sincos::<f64>(4, 0.0, &PosEncConfig::with_dim(8)).is_err());
        let cfg = PosEncConfig {
            temperature: 1.0,
            ..PosEncConfig::with_dim(8)
        };
        assert!(standard_2d_sincos::<f64>(4, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn range_and_pythagoras(side in 1usize..9, quarter in 1usize..9, gsd in 0.05f64..20.0) {
            let g = gsd_2d_sincos::<f64>(side, gsd, &PosEncConfig::with_dim(quarter * 4)).unwrap();
            for r in 0..g.values.rows() {
                let row = g.values.row(r);
                for pair in row.chunks(2) {
                    prop_assert!(pair[0].abs() <= 1.0 && pair[1].abs() <= 1.0);
                    prop_assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn ground_alignment_integer_factor(n in 1usize..7, s in 1usize..5, g in 0.1f64..5.0, quarter in 1usize..6) {
            let cfg = PosEncConfig::with_dim(quarter * 4);
            let coarse = gsd_2d_sincos::<f64>(n, s as f64 * g, &cfg).unwrap();
            let fine = gsd_2d_sincos::<f64>(s * n, g, &cfg).unwrap();
            for y in 0..n {
                for x in 0..n {
                    let a = coarse.values.row(y * n + x);
                    let b = fine.values.row(s * y * s * n + s * x);
                    for (u, v) in a.iter().zip(b) {
                        prop_assert!((u - v).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
