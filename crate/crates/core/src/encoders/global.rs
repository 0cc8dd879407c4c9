use rand_chacha::ChaCha8Rng;
use triplex_tensor::{Graph, Real, Var};

use super::apeg::{Apeg, GridCoordinates};
use super::attention::TransformerBlock;
use super::config::EncoderConfig;
use crate::error::{CoreError, Result};
use crate::nn::{Bound, Linear, ParamStore};

/// Encodes the pooled features of every spot on a slide jointly: a
/// projection, one transformer block, the grid position encoding, and the
/// remaining blocks. Row `i` of the output belongs to spot `i`.
#[derive(Clone, Debug)]
pub struct GlobalEncoder {
    pub proj: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub apeg: Apeg,
}

impl GlobalEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        feature_dim: usize,
        cfg: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let proj = Linear::new(store, "global.proj", feature_dim, cfg.d, true, rng);
        let mut blocks = Vec::new();
        let mut apeg = None;
        for i in 0..cfg.depth2 {
            blocks.push(TransformerBlock::new(
                store,
                &format!("global.block{i}"),
                cfg.d,
                cfg.num_heads2,
                cfg.mlp_ratio2,
                cfg.dropout2,
                rng,
            ));
            if i == 0 {
                apeg = Some(Apeg::new(store, "global.apeg", cfg.d, cfg.apeg_kernel, rng));
            }
        }
        Self {
            proj,
            blocks,
            apeg: apeg.expect("depth2 >= 1"),
        }
    }

    /// `features: [n, feature_dim]` -> `[n, d]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &mut Bound,
        features: Var,
        coords: &GridCoordinates,
    ) -> Result<Var> {
        let s = g.shape(features);
        if s.len() != 2 || s[0] != coords.len() || s[1] != self.proj.in_dim {
            return Err(CoreError::invalid(format!(
                "global features must be [{}, {}], got {s:?}",
                coords.len(),
                self.proj.in_dim
            )));
        }
        let (n, d) = (coords.len(), self.apeg.dim);
        let x = self.proj.forward(g, p, features)?;
        let x = g.reshape(x, &[1, n, d])?;
        let x = self.blocks[0].forward(g, p, x, None)?;
        let x = g.reshape(x, &[n, d])?;
        let x = self.apeg.forward(g, p, x, coords)?;
        let mut x = g.reshape(x, &[1, n, d])?;
        for block in &self.blocks[1..] {
            x = block.forward(g, p, x, None)?;
        }
        Ok(g.reshape(x, &[n, d])?)
    }
}
