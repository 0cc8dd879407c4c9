//! Cross-attention fusion of the three token streams, the four prediction
//! heads, and the fusion loss.

use rand_chacha::ChaCha8Rng;
use triplex_tensor::{Graph, Real, Tensor, Var};

use crate::encoders::{CrossAttentionBlock, EncoderConfig};
use crate::error::{CoreError, Result};
use crate::nn::{Bound, Linear, ParamStore};

/// Global tokens query the target tokens and, separately, the neighbor
/// tokens. Target and neighbor tokens never attend to each other.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub target_blocks: Vec<CrossAttentionBlock>,
    pub neighbor_blocks: Vec<CrossAttentionBlock>,
}

/// Graph handles of a batched fusion pass; every vector is `[B, d]`.
#[derive(Clone, Copy, Debug)]
pub struct FusedVars {
    pub z_gt: Var,
    pub z_gn: Var,
    pub z_gtn: Var,
}

impl FusionLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut stack = |prefix: &str, rng: &mut ChaCha8Rng| {
            (0..cfg.depth1)
                .map(|i| {
                    CrossAttentionBlock::new(
                        store,
                        &format!("fusion.{prefix}{i}"),
                        cfg.d,
                        cfg.num_heads1,
                        cfg.mlp_ratio1,
                        cfg.dropout1,
                        rng,
                    )
                })
                .collect::<Vec<_>>()
        };
        let target_blocks = stack("target", rng);
        let neighbor_blocks = stack("neighbor", rng);
        Self {
            target_blocks,
            neighbor_blocks,
        }
    }

    /// `z_gl: [B, d]`, `z_ta: [B, 49, d]`, `z_ne: [B, 25, d]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &mut Bound,
        z_gl: Var,
        z_ta: Var,
        z_ne: Var,
    ) -> Result<FusedVars> {
        let s = g.shape(z_gl).to_vec();
        if s.len() != 2 {
            return Err(CoreError::invalid(format!(
                "global query must be [B, d], got {s:?}"
            )));
        }
        let (b, d) = (s[0], s[1]);
        let query = g.reshape(z_gl, &[b, 1, d])?;
        let mut gt = query;
        for block in &self.target_blocks {
            gt = block.forward(g, p, gt, z_ta)?;
        }
        let mut gn = query;
        for block in &self.neighbor_blocks {
            gn = block.forward(g, p, gn, z_ne)?;
        }
        let z_gt = g.reshape(gt, &[b, d])?;
        let z_gn = g.reshape(gn, &[b, d])?;
        let z_gtn = g.add(z_gt, z_gn)?;
        Ok(FusedVars { z_gt, z_gn, z_gtn })
    }
}

/// Four independent fully connected heads mapping `d` to the `m` genes.
#[derive(Clone, Debug)]
pub struct PredictionHeads {
    pub target: Linear,
    pub neighbor: Linear,
    pub global: Linear,
    pub fusion: Linear,
}

/// Graph handles of the four `[B, m]` predictions.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub q_ta: Var,
    pub q_ne: Var,
    pub q_gl: Var,
    pub q_f: Var,
}

impl PredictionHeads {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        d: usize,
        m: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            target: Linear::new(store, "head.target", d, m, true, rng),
            neighbor: Linear::new(store, "head.neighbor", d, m, true, rng),
            global: Linear::new(store, "head.global", d, m, true, rng),
            fusion: Linear::new(store, "head.fusion", d, m, true, rng),
        }
    }

    pub fn genes(&self) -> usize {
        self.fusion.out_dim
    }

    /// Target and neighbor tokens are mean-pooled over their token axis
    /// before their heads.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z_ta: Var,
        z_ne: Var,
        z_gl: Var,
        z_gtn: Var,
    ) -> Result<HeadVars> {
        let ta = g.mean_axis(z_ta, 1)?;
        let ne = g.mean_axis(z_ne, 1)?;
        Ok(HeadVars {
            q_ta: self.target.forward(g, p, ta)?,
            q_ne: self.neighbor.forward(g, p, ne)?,
            q_gl: self.global.forward(g, p, z_gl)?,
            q_f: self.fusion.forward(g, p, z_gtn)?,
        })
    }
}

/// Per-spot fused vectors and the four predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput<T> {
    pub z_gt: Vec<T>,
    pub z_gn: Vec<T>,
    pub z_gtn: Vec<T>,
    pub q_ta: Vec<T>,
    pub q_ne: Vec<T>,
    pub q_gl: Vec<T>,
    pub q_f: Vec<T>,
}

/// The four loss terms and their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_ta: f64,
    pub l_ne: f64,
    pub l_gl: f64,
    pub l_f: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Builds a breakdown whose total is exactly the sum of the terms.
    pub fn from_terms(l_ta: f64, l_ne: f64, l_gl: f64, l_f: f64, alpha: f64) -> Self {
        Self {
            l_ta,
            l_ne,
            l_gl,
            l_f,
            alpha,
            total: l_ta + l_ne + l_gl + l_f,
        }
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::Config(format!(
            "alpha={alpha} must lie in [0, 1]"
        )));
    }
    Ok(())
}

fn mean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Each branch `j` blends its error to the truth with its error to the
/// fusion prediction: `(1 - alpha) mse(q_j, y) + alpha mse(q_j, q_f)`. The
/// fusion head is scored against the truth alone.
pub fn fusion_loss(
    q_ta: &[f64],
    q_ne: &[f64],
    q_gl: &[f64],
    q_f: &[f64],
    y: &[f64],
    alpha: f64,
) -> Result<LossBreakdown> {
    check_alpha(alpha)?;
    let m = y.len();
    if m == 0 || [q_ta, q_ne, q_gl, q_f].iter().any(|q| q.len() != m) {
        return Err(CoreError::invalid(
            "fusion_loss: predictions and truth must share a non-zero length",
        ));
    }
    let branch = |q: &[f64]| (1.0 - alpha) * mean_sq(q, y) + alpha * mean_sq(q, q_f);
    Ok(LossBreakdown::from_terms(
        branch(q_ta),
        branch(q_ne),
        branch(q_gl),
        mean_sq(q_f, y),
        alpha,
    ))
}

/// Graph handles of the loss terms. `total` is the scalar to differentiate.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_ta: Var,
    pub l_ne: Var,
    pub l_gl: Var,
    pub l_f: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>, alpha: f64) -> Result<LossBreakdown> {
        let v = |x: Var| -> Result<f64> { Ok(g.value(x).item()?.to_f64_lossy()) };
        Ok(LossBreakdown::from_terms(
            v(self.l_ta)?,
            v(self.l_ne)?,
            v(self.l_gl)?,
            v(self.l_f)?,
            alpha,
        ))
    }
}

/// Differentiable fusion loss averaged over a batch of `[B, m]`
/// predictions. When `detach_soft_targets` is set, no gradient flows into
/// the fusion head through the distillation terms.
pub fn fusion_loss_graph<T: Real>(
    g: &mut Graph<T>,
    heads: &HeadVars,
    y: &Tensor<T>,
    alpha: f64,
    detach_soft_targets: bool,
) -> Result<LossVars> {
    check_alpha(alpha)?;
    if g.shape(heads.q_f) != y.shape() {
        return Err(CoreError::Tensor(
            triplex_tensor::TensorError::ShapeMismatch {
                op: "fusion_loss",
                lhs: g.shape(heads.q_f).to_vec(),
                rhs: y.shape().to_vec(),
            },
        ));
    }
    let y = g.constant(y.clone());
    let soft = if detach_soft_targets {
        g.detach(heads.q_f)
    } else {
        heads.q_f
    };
    let mse = |g: &mut Graph<T>, a: Var, b: Var| -> Result<Var> {
        let diff = g.sub(a, b)?;
        let sq = g.square(diff);
        Ok(g.mean(sq))
    };
    let branch = |g: &mut Graph<T>, q: Var| -> Result<Var> {
        let hard = mse(g, q, y)?;
        let distill = mse(g, q, soft)?;
        let hard = g.scale(hard, T::from_f64_lossy(1.0 - alpha));
        let distill = g.scale(distill, T::from_f64_lossy(alpha));
        Ok(g.add(hard, distill)?)
    };
    let l_ta = branch(g, heads.q_ta)?;
    let l_ne = branch(g, heads.q_ne)?;
    let l_gl = branch(g, heads.q_gl)?;
    let l_f = mse(g, heads.q_f, y)?;
    let total = g.add(l_ta, l_ne)?;
    let total = g.add(total, l_gl)?;
    let total = g.add(total, l_f)?;
    Ok(LossVars {
        l_ta,
        l_ne,
        l_gl,
        l_f,
        total,
    })
}
