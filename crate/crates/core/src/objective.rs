//! Dual-band reconstruction loss: L2 on the low-frequency image, L1 on the
//! high-frequency residual, mean-reduced.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::resample::AxisWeights;
use crate::imaging::{BandpassTargets, RasterImage};
use crate::patching::MaskPlan;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    #[default]
    Dual,
    LowOnly,
    HighOnly,
    /// L2 between `upsample(low_pred) + high_pred` and the original crop.
    Combined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub low_weight: f64,
    pub high_weight: f64,
    pub target_mode: TargetMode,
    /// Restrict the low-band L2 to pixels under masked patches.
    pub masked_only_low: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            low_weight: 1.0,
            high_weight: 1.0,
            target_mode: TargetMode::Dual,
            masked_only_low: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w >= 0.0 && w.is_finite();
        if !ok(self.low_weight) || !ok(self.high_weight) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative (low={}, high={})",
                self.low_weight, self.high_weight
            )));
        }
        if self.low_weight == 0.0 && self.high_weight == 0.0 {
            return Err(Error::Config("loss.low_weight and loss.high_weight are both zero".into()));
        }
        Ok(())
    }

    fn uses_low(&self) -> bool {
        matches!(self.target_mode, TargetMode::Dual | TargetMode::LowOnly)
    }

    fn uses_high(&self) -> bool {
        matches!(self.target_mode, TargetMode::Dual | TargetMode::HighOnly)
    }
}

/// Per-term values. Terms not active in the current mode are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub low: Option<f64>,
    pub high: Option<f64>,
    pub combined: Option<f64>,
}

/// Loss nodes on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub low: Option<Var>,
    pub high: Option<Var>,
    pub combined: Option<Var>,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Option<Var>| x.map(|x| g.scalar(x).as_f64());
        LossBreakdown {
            total: g.scalar(self.total).as_f64(),
            low: v(self.low),
            high: v(self.high),
            combined: v(self.combined),
        }
    }
}

/// 1 for pixels of a `side x side` image lying under a masked patch of the
/// `grid x grid` plan, 0 elsewhere; row-major pixel order.
pub fn masked_pixel_weights<T: Scalar>(plan: &MaskPlan, grid: usize, side: usize) -> Result<Vec<T>> {
    if grid == 0 || side % grid != 0 || plan.n_patches != grid * grid {
        return Err(Error::Shape(format!(
            "cannot map a {}-patch plan on a {grid} grid onto a {side}-pixel image",
            plan.n_patches
        )));
    }
    let flags = plan.masked_flags();
    let cell = side / grid;
    Ok((0..side * side)
        .map(|i| {
            let (y, x) = (i / side, i % side);
            if flags[(y / cell) * grid + x / cell] {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect())
}

fn check_shape<T: Scalar>(what: &str, pred: &Tensor<T>, target: &RasterImage<T>) -> Result<()> {
    if pred.shape() != target.pixels().shape() {
        return Err(Error::Shape(format!(
            "{what} prediction is {:?}, target {}x{}x{} needs {:?}",
            pred.shape(),
            target.height(),
            target.width(),
            target.channels(),
            target.pixels().shape()
        )));
    }
    Ok(())
}

/// Builds the loss for prediction rows `low_pred` (`low^2 x C`) and
/// `high_pred` (`high^2 x C`). `low_mask` supplies per-pixel weights for the
/// low term when `masked_only_low` is set.
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    low_pred: Var,
    high_pred: Var,
    targets: &BandpassTargets<T>,
    cfg: &LossConfig,
    low_mask: Option<Vec<T>>,
) -> Result<LossVars> {
    cfg.validate()?;
    let mut terms = Vec::new();
    let mut out = LossVars {
        total: low_pred,
        low: None,
        high: None,
        combined: None,
    };
    if cfg.uses_low() {
        check_shape("low", g.value(low_pred), &targets.low)?;
        let weights = if cfg.masked_only_low { low_mask } else { None };
        let l = g.mse(low_pred, targets.low.pixels(), weights)?;
        terms.push((l, c(cfg.low_weight)));
        out.low = Some(l);
    }
    if cfg.uses_high() {
        check_shape("high", g.value(high_pred), &targets.high)?;
        let h = g.mae(high_pred, targets.high.pixels())?;
        terms.push((h, c(cfg.high_weight)));
        out.high = Some(h);
    }
    if cfg.target_mode == TargetMode::Combined {
        let hr = targets.recombined()?;
        check_shape("high", g.value(high_pred), &hr)?;
        let (ls, hs) = (targets.low.height(), hr.height());
        if g.value(low_pred).rows() != ls * ls {
            return Err(Error::Shape(format!(
                "low prediction has {} rows, expected {}",
                g.value(low_pred).rows(),
                ls * ls
            )));
        }
        let up = g.resample(low_pred, AxisWeights::new(ls, hs), AxisWeights::new(ls, hs));
        let sum = g.add(up, high_pred);
        let l = g.mse(sum, hr.pixels(), None)?;
        terms.push((l, T::one()));
        out.combined = Some(l);
    }
    out.total = g.weighted_sum(&terms);
    Ok(out)
}

pub fn reconstruction_loss<T: Scalar>(
    low_pred: &RasterImage<T>,
    high_pred: &RasterImage<T>,
    targets: &BandpassTargets<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let lo = g.input(low_pred.pixels().clone());
    let hi = g.input(high_pred.pixels().clone());
    Ok(loss_graph(&mut g, lo, hi, targets, cfg, None)?.breakdown(&g))
}
