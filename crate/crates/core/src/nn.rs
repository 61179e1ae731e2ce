//! Transformer building blocks shared by the encoder and decoders.

use crate::numerics::{Graph, Init, ParamId, ParamKind, ParamRegistry, Scalar, Var};
use crate::Result;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

/// `y = x·W + b` with `W[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn declare(reg: &mut ParamRegistry, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = reg.declare(format!("{name}.w"), &[in_dim, out_dim], Init::Normal { std: INIT_STD }, ParamKind::Weight);
        let b = reg.declare(format!("{name}.b"), &[out_dim], Init::Zeros, ParamKind::Bias);
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn declare(reg: &mut ParamRegistry, name: &str, dim: usize) -> Self {
        let gamma = reg.declare(format!("{name}.gamma"), &[dim], Init::Ones, ParamKind::NormGain);
        let beta = reg.declare(format!("{name}.beta"), &[dim], Init::Zeros, ParamKind::NormBias);
        LayerNorm { gamma, beta }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        Ok(g.layer_norm(x, gamma, beta, F::lit(LN_EPS))?)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn declare(reg: &mut ParamRegistry, name: &str, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::declare(reg, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::declare(reg, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn declare(reg: &mut ParamRegistry, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Attention {
            q: Linear::declare(reg, &format!("{name}.q"), dim, dim),
            k: Linear::declare(reg, &format!("{name}.k"), dim, dim),
            v: Linear::declare(reg, &format!("{name}.v"), dim, dim),
            out: Linear::declare(reg, &format!("{name}.out"), dim, dim),
            heads,
        }
    }

    /// Returns the projected output and the raw attention node (whose
    /// saved weights can be read with [`Graph::attention_probs`]).
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, query: Var, context: Var) -> Result<(Var, Var)> {
        self.forward_segments(g, query, context, 1)
    }

    /// Attention over `segments` sequences stacked along the rows.
    pub fn forward_segments<F: Scalar>(&self, g: &mut Graph<F>, query: Var, context: Var, segments: usize) -> Result<(Var, Var)> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let a = g.segmented_attention(q, k, v, self.heads, segments)?;
        Ok((self.out.forward(g, a)?, a))
    }
}

/// Pre-norm block: global self-attention then FFN, each with a residual.
#[derive(Clone, Debug)]
pub struct SelfBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl SelfBlock {
    pub fn declare(reg: &mut ParamRegistry, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        SelfBlock {
            norm1: LayerNorm::declare(reg, &format!("{name}.norm1"), dim),
            attn: Attention::declare(reg, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::declare(reg, &format!("{name}.norm2"), dim),
            mlp: Mlp::declare(reg, &format!("{name}.mlp"), dim, dim * mlp_ratio),
        }
    }

    /// Returns the block output and its attention node.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Result<(Var, Var)> {
        self.forward_segments(g, x, 1)
    }

    pub fn forward_segments<F: Scalar>(&self, g: &mut Graph<F>, x: Var, segments: usize) -> Result<(Var, Var)> {
        let h = self.norm1.forward(g, x)?;
        let (a, probs) = self.attn.forward_segments(g, h, h, segments)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        Ok((g.add(x, m)?, probs))
    }
}

/// Pre-norm decoder block: self-attention, cross-attention to a fixed
/// condition sequence, then FFN. Only the query stream is updated.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub norm1: LayerNorm,
    pub self_attn: Attention,
    pub norm2: LayerNorm,
    pub cross_attn: Attention,
    pub norm3: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    pub fn declare(reg: &mut ParamRegistry, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        CrossBlock {
            norm1: LayerNorm::declare(reg, &format!("{name}.norm1"), dim),
            self_attn: Attention::declare(reg, &format!("{name}.self_attn"), dim, heads),
            norm2: LayerNorm::declare(reg, &format!("{name}.norm2"), dim),
            cross_attn: Attention::declare(reg, &format!("{name}.cross_attn"), dim, heads),
            norm3: LayerNorm::declare(reg, &format!("{name}.norm3"), dim),
            mlp: Mlp::declare(reg, &format!("{name}.mlp"), dim, dim * mlp_ratio),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var, kv: Var) -> Result<Var> {
        self.forward_segments(g, x, kv, 1)
    }

    /// Segment `s` of `x` attends to itself and to segment `s` of `kv`.
    pub fn forward_segments<F: Scalar>(&self, g: &mut Graph<F>, x: Var, kv: Var, segments: usize) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let (a, _) = self.self_attn.forward_segments(g, h, h, segments)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let (c, _) = self.cross_attn.forward_segments(g, h, kv, segments)?;
        let x = g.add(x, c)?;
        let h = self.norm3.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        Ok(g.add(x, m)?)
    }
}
