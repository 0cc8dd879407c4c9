use rand_chacha::ChaCha8Rng;
use triplex_tensor::{Graph, Real, Var};

use super::config::Activation;
use super::trunk::ConvTrunk;
use super::TARGET_TOKENS;
use crate::error::{CoreError, Result};
use crate::nn::{Bound, Linear, ParamStore};

/// Embeds the 49 tokens of a target patch.
///
/// With precomputed features the trainable path is a projection to `d`
/// followed by the configured activation. With images, a trainable
/// [`ConvTrunk`] first produces the 49 feature tokens.
#[derive(Clone, Debug)]
pub struct TargetEncoder {
    pub trunk: Option<ConvTrunk>,
    pub proj: Linear,
    pub activation: Activation,
}

impl TargetEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        feature_dim: usize,
        d: usize,
        activation: Activation,
        trunk: Option<ConvTrunk>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            trunk,
            proj: Linear::new(store, "target.proj", feature_dim, d, true, rng),
            activation,
        }
    }

    /// `features: [B, 49, feature_dim]` -> `[B, 49, d]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        let s = g.shape(features);
        if s.len() != 3 || s[1] != TARGET_TOKENS || s[2] != self.proj.in_dim {
            return Err(CoreError::invalid(format!(
                "target features must be [B, {TARGET_TOKENS}, {}], got {s:?}",
                self.proj.in_dim
            )));
        }
        let z = self.proj.forward(g, p, features)?;
        Ok(self.activation.apply(g, z))
    }

    /// `images: [B, 3, 224, 224]` -> `[B, 49, d]` through the trunk.
    pub fn forward_images<T: Real>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Var> {
        let trunk = self
            .trunk
            .as_ref()
            .ok_or_else(|| CoreError::invalid("target encoder has no image trunk"))?;
        let features = trunk.forward(g, p, images)?;
        self.forward(g, p, features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use triplex_tensor::Tensor;

    fn encoder(
        store: &mut ParamStore<f64>,
        fdim: usize,
        d: usize,
        act: Activation,
    ) -> TargetEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        TargetEncoder::new(store, fdim, d, act, None, &mut rng)
    }

    fn run(store: &ParamStore<f64>, enc: &TargetEncoder, x: Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, store, false);
        let x = g.constant(x);
        let y = enc.forward(&mut g, &p, x).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn identity_projection_passes_features_through() {
        let d = 512;
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, d, d, Activation::Identity);
        store.set(enc.proj.weight, Tensor::eye(d)).unwrap();
        store
            .set(enc.proj.bias.unwrap(), Tensor::zeros([d]))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([1, 49, d], 1.0, &mut rng);
        let y = run(&store, &enc, x.clone());
        assert_eq!(y.max_abs_diff(&x), 0.0);
    }

    #[test]
    fn zero_input_gives_equal_bias_rows() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 6, 4, Activation::Gelu);
        let bias = Tensor::new([4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        store.set(enc.proj.bias.unwrap(), bias.clone()).unwrap();
        let y = run(&store, &enc, Tensor::zeros([1, 49, 6]));
        let want: Vec<f64> = bias.data().iter().map(|&b| gelu_oracle(b)).collect();
        for r in 0..49 {
            for c in 0..4 {
                assert!((y.data()[r * 4 + c] - want[c]).abs() < 1e-12);
            }
        }
    }

    fn gelu_oracle(x: f64) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
    }

    #[test]
    fn matches_direct_matmul() {
        let (f, d) = (7, 5);
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, f, d, Activation::Identity);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        store
            .set(enc.proj.bias.unwrap(), Tensor::randn([d], 1.0, &mut rng))
            .unwrap();
        let x = Tensor::randn([1, 49, f], 1.0, &mut rng);
        let y = run(&store, &enc, x.clone());
        let w = store.get(enc.proj.weight);
        let b = store.get(enc.proj.bias.unwrap());
        for r in 0..49 {
            for c in 0..d {
                let mut want = b.data()[c];
                for k in 0..f {
                    want += x.data()[r * f + k] * w.data()[k * d + c];
                }
                assert!((y.data()[r * d + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_wrong_token_count() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, 4, 4, Activation::Gelu);
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &store, false);
        let x = g.constant(Tensor::zeros([1, 48, 4]));
        assert!(enc.forward(&mut g, &p, x).is_err());
    }
}
