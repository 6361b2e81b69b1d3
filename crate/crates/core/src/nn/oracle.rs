//! Scalar-loop reference implementations used by tests.

use crate::autograd::gelu;
use crate::nn::layers::{TransformerBlock, LN_EPS};
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub fn ln_ref(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(a, (gg, bb))| (a - m) / (v + LN_EPS).sqrt() * gg + bb)
        .collect()
}

pub fn lin_ref(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    (0..w.cols())
        .map(|o| b.get(0, o) + (0..w.rows()).map(|i| x[i] * w.get(i, o)).sum::<f64>())
        .collect()
}

/// Token-by-token evaluation with explicit loops over heads and keys.
pub fn block_ref(x: &Tensor<f64>, blk: &TransformerBlock, p: &ParamStore<f64>) -> Tensor<f64> {
    let (n, d) = x.shape();
    let heads = blk.attn.heads;
    let dh = d / heads;
    let v = |id: ParamId| p.get(id);
    let h1: Vec<Vec<f64>> = (0..n)
        .map(|t| ln_ref(x.row(t), v(blk.norm1.gamma).row(0), v(blk.norm1.beta).row(0)))
        .collect();
    let qkv: Vec<Vec<f64>> = h1
        .iter()
        .map(|r| lin_ref(r, v(blk.attn.qkv.w), v(blk.attn.qkv.b)))
        .collect();
    let mut x1 = x.clone();
    for t in 0..n {
        let mut merged = vec![0.0; d];
        for h in 0..heads {
            let q = &qkv[t][h * dh..(h + 1) * dh];
            let scores: Vec<f64> = (0..n)
                .map(|s| {
                    let k = &qkv[s][d + h * dh..d + (h + 1) * dh];
                    q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for (s, sc) in scores.iter().enumerate() {
                let a = (sc - mx).exp() / z;
                for j in 0..dh {
                    merged[h * dh + j] += a * qkv[s][2 * d + h * dh + j];
                }
            }
        }
        let o = lin_ref(&merged, v(blk.attn.proj.w), v(blk.attn.proj.b));
        for j in 0..d {
            x1.set(t, j, x1.get(t, j) + o[j]);
        }
    }
    let mut out = x1.clone();
    for t in 0..n {
        let h = ln_ref(x1.row(t), v(blk.norm2.gamma).row(0), v(blk.norm2.beta).row(0));
        let hid: Vec<f64> = lin_ref(&h, v(blk.fc1.w), v(blk.fc1.b)).into_iter().map(gelu).collect();
        let o = lin_ref(&hid, v(blk.fc2.w), v(blk.fc2.b));
        for j in 0..d {
            out.set(t, j, out.get(t, j) + o[j]);
        }
    }
    out
}

