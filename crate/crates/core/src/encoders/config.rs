use serde::{Deserialize, Serialize};
use triplex_tensor::{Graph, Real, Var};

use crate::error::{CoreError, Result};

/// Transformer hyperparameters. Suffix 1 is the fusion layer, 2 the global
/// encoder and 3 the neighbor encoder; defaults are the BC1 selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d: usize,
    pub depth1: usize,
    pub depth2: usize,
    pub depth3: usize,
    pub num_heads1: usize,
    pub num_heads2: usize,
    pub num_heads3: usize,
    pub mlp_ratio1: usize,
    pub mlp_ratio2: usize,
    pub mlp_ratio3: usize,
    pub dropout1: f64,
    pub dropout2: f64,
    pub dropout3: f64,
    pub apeg_kernel: usize,
    /// One relative-position bias table per head instead of a shared one.
    pub per_head_bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 512,
            depth1: 1,
            depth2: 3,
            depth3: 3,
            num_heads1: 4,
            num_heads2: 16,
            num_heads3: 16,
            mlp_ratio1: 4,
            mlp_ratio2: 4,
            mlp_ratio3: 1,
            dropout1: 0.2,
            dropout2: 0.1,
            dropout3: 0.3,
            apeg_kernel: 3,
            per_head_bias: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::Config(msg));
        if self.d == 0 {
            return fail("d must be positive".into());
        }
        for (name, depth) in [
            ("depth1", self.depth1),
            ("depth2", self.depth2),
            ("depth3", self.depth3),
        ] {
            if depth == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        for (name, heads) in [
            ("num_heads1", self.num_heads1),
            ("num_heads2", self.num_heads2),
            ("num_heads3", self.num_heads3),
        ] {
            if heads == 0 || self.d % heads != 0 {
                return fail(format!("{name}={heads} must divide d={}", self.d));
            }
        }
        for (name, ratio) in [
            ("mlp_ratio1", self.mlp_ratio1),
            ("mlp_ratio2", self.mlp_ratio2),
            ("mlp_ratio3", self.mlp_ratio3),
        ] {
            if ratio == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        for (name, p) in [
            ("dropout1", self.dropout1),
            ("dropout2", self.dropout2),
            ("dropout3", self.dropout3),
        ] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name}={p} must lie in [0, 1)"));
            }
        }
        if self.apeg_kernel % 2 == 0 {
            return fail(format!("apeg_kernel={} must be odd", self.apeg_kernel));
        }
        Ok(())
    }
}

/// Nonlinearity applied after the target token projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    Identity,
}

impl Default for Activation {
    fn default() -> Self {
        Self::Gelu
    }
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Self::Gelu => g.gelu(x),
            Self::Relu => g.relu(x),
            Self::Identity => x,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        EncoderConfig::default().validate().unwrap();
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = EncoderConfig {
            d: 30,
            num_heads2: 4,
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig {
            depth3: 0,
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
