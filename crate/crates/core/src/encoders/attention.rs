use rand_chacha::ChaCha8Rng;
use triplex_tensor::{Graph, Real, Var};

use crate::error::{CoreError, Result};
use crate::nn::{Bound, LayerNorm, Linear, Mlp, ParamStore};

/// Scaled dot-product attention with learned query/key/value/output
/// projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct Attended {
    /// `[B, Tq, d]`
    pub output: Var,
    /// Attention probabilities, `[B * heads, Tq, Tk]`.
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "heads must divide dim");
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
            dim,
        }
    }

    fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[b, t, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        Ok(g.reshape(x, &[b * self.heads, t, dh])?)
    }

    /// `query: [B, Tq, d]` attends over `context: [B, Tk, d]`. `bias` is
    /// added to the scaled scores and must be `[Tq, Tk]` (shared by all
    /// heads) or `[heads, Tq, Tk]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        query: Var,
        context: Var,
        bias: Option<Var>,
    ) -> Result<Attended> {
        let (qs, cs) = (g.shape(query).to_vec(), g.shape(context).to_vec());
        if qs.len() != 3
            || cs.len() != 3
            || qs[0] != cs[0]
            || qs[2] != self.dim
            || cs[2] != self.dim
        {
            return Err(CoreError::Tensor(
                triplex_tensor::TensorError::ShapeMismatch {
                    op: "attention",
                    lhs: qs,
                    rhs: cs,
                },
            ));
        }
        let (b, tq, tk) = (qs[0], qs[1], cs[1]);
        let dh = self.dim / self.heads;

        let q = self.query.forward(g, p, query)?;
        let k = self.key.forward(g, p, context)?;
        let v = self.value.forward(g, p, context)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;

        let scores = g.bmm(q, k, true)?;
        let mut scores = g.scale(scores, T::from_f64_lossy(1.0 / (dh as f64).sqrt()));
        if let Some(bias) = bias {
            let s = g.reshape(scores, &[b, self.heads, tq, tk])?;
            let s = g.add(s, bias)?;
            scores = g.reshape(s, &[b * self.heads, tq, tk])?;
        }
        let weights = g.softmax(scores);
        let ctx = g.bmm(weights, v, false)?;
        let ctx = g.reshape(ctx, &[b, self.heads, tq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, tq, self.dim])?;
        let output = self.output.forward(g, p, ctx)?;
        Ok(Attended { output, weights })
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                dim,
                dim * mlp_ratio,
                dropout,
                rng,
            ),
            dropout,
        }
    }

    /// `x: [B, T, d]` -> `[B, T, d]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &mut Bound,
        x: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        Ok(self.forward_attended(g, p, x, bias)?.output)
    }

    /// Like [`Self::forward`], also returning the attention probabilities.
    pub fn forward_attended<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &mut Bound,
        x: Var,
        bias: Option<Var>,
    ) -> Result<Attended> {
        let h = self.norm1.forward(g, p, x)?;
        let att = self.attn.forward(g, p, h, h, bias)?;
        let a = p.dropout(g, att.output, self.dropout)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, p, x)?;
        let m = self.mlp.forward(g, p, h)?;
        Ok(Attended {
            output: g.add(x, m)?,
            weights: att.weights,
        })
    }
}

/// Pre-norm block where a query sequence attends over a separate context.
/// The context is read-only: only the query stream is updated.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub norm_query: LayerNorm,
    pub norm_context: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub dropout: f64,
}

impl CrossAttentionBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            norm_query: LayerNorm::new(store, &format!("{name}.norm_q"), dim),
            norm_context: LayerNorm::new(store, &format!("{name}.norm_kv"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                dim,
                dim * mlp_ratio,
                dropout,
                rng,
            ),
            dropout,
        }
    }

    /// `query: [B, Tq, d]`, `context: [B, Tk, d]` -> `[B, Tq, d]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &mut Bound,
        query: Var,
        context: Var,
    ) -> Result<Var> {
        let q = self.norm_query.forward(g, p, query)?;
        let c = self.norm_context.forward(g, p, context)?;
        let a = self.attn.forward(g, p, q, c, None)?.output;
        let a = p.dropout(g, a, self.dropout)?;
        let x = g.add(query, a)?;
        let h = self.norm2.forward(g, p, x)?;
        let m = self.mlp.forward(g, p, h)?;
        Ok(g.add(x, m)?)
    }
}
