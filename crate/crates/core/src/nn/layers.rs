use crate::autograd::{ConvTGeom, Graph, Var};
use crate::error::Result;
use crate::nn::params::{Init, ParamId, ParamLayout, ParamStore};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-6;

/// `y = x W + b`, `W` stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn declare(layout: &mut ParamLayout, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: layout.declare(
                format!("{name}.weight"),
                d_in,
                d_out,
                Init::Xavier {
                    fan_in: d_in,
                    fan_out: d_out,
                    gain: 1.0,
                },
            ),
            b: layout.declare(format!("{name}.bias"), 1, d_out, Init::Zeros),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn declare(layout: &mut ParamLayout, name: &str, dim: usize) -> Self {
        Self {
            gamma: layout.declare(format!("{name}.weight"), 1, dim, Init::Ones),
            beta: layout.declare(format!("{name}.bias"), 1, dim, Init::Zeros),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(p, self.gamma);
        let beta = g.param(p, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Transposed convolution over square `(s*s) x c` maps.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose {
    pub fn declare(
        layout: &mut ParamLayout,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        // taps reaching each output pixel per input channel
        let reach = (kernel / stride).max(1).pow(2);
        Self {
            w: layout.declare(
                format!("{name}.weight"),
                c_in,
                kernel * kernel * c_out,
                Init::Xavier {
                    fan_in: c_in * reach,
                    fan_out: c_out * reach,
                    gain: 1.0,
                },
            ),
            b: layout.declare(format!("{name}.bias"), 1, c_out, Init::Zeros),
            kernel,
            stride,
            pad,
        }
    }

    pub fn geom(&self, in_side: usize) -> ConvTGeom {
        ConvTGeom {
            in_side,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn out_side(&self, in_side: usize) -> usize {
        self.geom(in_side).out_side()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var, in_side: usize) -> Result<Var> {
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        g.conv_transpose(x, w, b, self.geom(in_side))
    }
}

/// Depthwise `k x k` convolution, same padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

impl DepthwiseConv {
    pub fn declare(layout: &mut ParamLayout, name: &str, channels: usize, kernel: usize) -> Self {
        let taps = kernel * kernel;
        Self {
            w: layout.declare(
                format!("{name}.weight"),
                taps,
                channels,
                Init::Xavier {
                    fan_in: taps,
                    fan_out: taps,
                    gain: 1.0,
                },
            ),
            b: layout.declare(format!("{name}.bias"), 1, channels, Init::Zeros),
            kernel,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var, side: usize) -> Result<Var> {
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        g.depthwise(x, w, b, side, self.kernel)
    }
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn declare(layout: &mut ParamLayout, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            qkv: Linear::declare(layout, &format!("{name}.qkv"), dim, 3 * dim),
            proj: Linear::declare(layout, &format!("{name}.proj"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let qkv = self.qkv.forward(g, p, x);
        let dh = self.dim / self.heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * dh, dh);
            let k = g.slice_cols(qkv, self.dim + h * dh, dh);
            let v = g.slice_cols(qkv, 2 * self.dim + h * dh, dh);
            let s = g.matmul_t(q, k);
            let s = g.scale(s, scale);
            let a = g.softmax(s);
            outs.push(g.matmul(a, v));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.proj.forward(g, p, merged)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn declare(layout: &mut ParamLayout, name: &str, dim: usize, heads: usize, mlp_ratio: f64) -> Self {
        let hidden = (dim as f64 * mlp_ratio).round() as usize;
        Self {
            norm1: LayerNorm::declare(layout, &format!("{name}.norm1"), dim),
            attn: Attention::declare(layout, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::declare(layout, &format!("{name}.norm2"), dim),
            fc1: Linear::declare(layout, &format!("{name}.mlp.fc1"), dim, hidden),
            fc2: Linear::declare(layout, &format!("{name}.mlp.fc2"), hidden, dim),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let h = self.norm1.forward(g, p, x);
        let h = self.attn.forward(g, p, h);
        let x = g.add(x, h);
        let h = self.norm2.forward(g, p, x);
        let h = self.fc1.forward(g, p, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h);
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::oracle::{block_ref, lin_ref};
    use crate::tensor::Tensor;

    #[test]
    fn transformer_block_matches_scalar_oracle() {
        for (heads, seed) in [(1, 3u64), (2, 4), (4, 5)] {
            let mut layout = ParamLayout::new();
            let blk = TransformerBlock::declare(&mut layout, "b", 8, heads, 2.0);
            // non-trivial norm affine so gamma/beta take part
            let mut p = ParamStore::<f64>::initialize(layout, seed);
            for id in [blk.norm1.gamma, blk.norm2.beta, blk.attn.qkv.b] {
                let t = p.get_mut(id);
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v += 0.1 * i as f64 - 0.3;
                }
            }
            let x = Tensor::from_fn(5, 8, |r, c| ((r * 13 + c * 5) % 11) as f64 / 5.0 - 1.0);
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = blk.forward(&mut g, &p, xv);
            let want = block_ref(&x, &blk, &p);
            let got = g.value(y);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn linear_is_matrix_projection() {
        let mut layout = ParamLayout::new();
        let lin = Linear::declare(&mut layout, "l", 3, 2);
        let p = ParamStore::<f64>::initialize(layout, 8);
        let x = Tensor::from_fn(4, 3, |r, c| (r + 2 * c) as f64 * 0.25);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = lin.forward(&mut g, &p, xv);
        for r in 0..4 {
            let want = lin_ref(x.row(r), p.get(lin.w), p.get(lin.b));
            for (a, b) in g.value(y).row(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layout_names_and_counts() {
        let mut layout = ParamLayout::new();
        TransformerBlock::declare(&mut layout, "enc.blocks.0", 16, 2, 4.0);
        // 2 norms + qkv + proj + fc1 + fc2
        let expect = 2 * 32 + (16 * 48 + 48) + (16 * 16 + 16) + (16 * 64 + 64) + (64 * 16 + 16);
        assert_eq!(layout.total(), expect);
        assert_eq!(layout.count_prefix("enc.blocks.0.attn"), 16 * 48 + 48 + 16 * 16 + 16);
        assert!(layout.specs().iter().any(|s| s.name == "enc.blocks.0.mlp.fc1.weight"));
    }
}
