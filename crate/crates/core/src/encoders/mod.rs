//! Target, neighbor and global encoders.

mod apeg;
mod attention;
mod config;
mod global;
mod neighbor;
mod target;
mod trunk;

pub use apeg::{Apeg, GridCoordinates};
pub use attention::{Attended, CrossAttentionBlock, MultiHeadAttention, TransformerBlock};
pub use config::{Activation, EncoderConfig};
pub use global::GlobalEncoder;
pub use neighbor::{NeighborEncoder, NeighborTrace, RelativeBias};
pub use target::TargetEncoder;
pub use trunk::{ConvTrunk, FEATURE_GRID, PATCH_SIZE};

use triplex_tensor::{Real, Tensor};

use crate::error::{CoreError, Result};

/// Tokens per target patch (a 7x7 feature map).
pub const TARGET_TOKENS: usize = 49;
/// Sub-patches per neighbor view (a 5x5 tiling).
pub const NEIGHBOR_TOKENS: usize = 25;
pub const NEIGHBOR_GRID: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    Target,
    Neighbor,
    Global,
}

/// A `k x d` block of embedding tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix<T> {
    pub tokens: Tensor<T>,
    pub role: TokenRole,
}

impl<T: Real> TokenMatrix<T> {
    /// `expected_rows` is the slide's spot count for global tokens and is
    /// ignored for the fixed-size roles.
    pub fn new(tokens: Tensor<T>, role: TokenRole, expected_rows: usize) -> Result<Self> {
        let rows = match role {
            TokenRole::Target => TARGET_TOKENS,
            TokenRole::Neighbor => NEIGHBOR_TOKENS,
            TokenRole::Global => expected_rows,
        };
        if tokens.ndim() != 2 || tokens.shape()[0] != rows {
            return Err(CoreError::invalid(format!(
                "{role:?} tokens must have {rows} rows, got shape {:?}",
                tokens.shape()
            )));
        }
        if !tokens.is_finite() {
            return Err(CoreError::NonFinite(format!("{role:?} tokens")));
        }
        Ok(Self { tokens, role })
    }

    pub fn rows(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.tokens.data()[i * d..(i + 1) * d]
    }
}
