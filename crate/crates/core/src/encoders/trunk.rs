use rand_chacha::ChaCha8Rng;
use triplex_tensor::{Conv2dSpec, Graph, Padding, Real, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::nn::{normal, Bound, ParamId, ParamStore};

/// Side length of a spot image.
pub const PATCH_SIZE: usize = 224;
/// Side length of the trunk's output feature map.
pub const FEATURE_GRID: usize = 7;

const POOL: usize = 4;
const WIDTHS: [usize; 4] = [3, 16, 32, 64];

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

/// Small convolutional feature extractor: a 4x4 average pool, three 3x3
/// stride-2 convolutions and a 1x1 projection, each followed by ReLU.
/// A `3 x 224 x 224` image becomes a `7 x 7 x out_dim` feature map.
///
/// Replicate padding keeps a constant image constant across the map.
#[derive(Clone, Debug)]
pub struct ConvTrunk {
    layers: Vec<ConvLayer>,
    pub out_dim: usize,
}

impl ConvTrunk {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::new();
        for (i, pair) in WIDTHS.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            layers.push(ConvLayer {
                weight: store.add(
                    format!("{name}.conv{i}.weight"),
                    normal(&[cout, cin, 3, 3], std, rng),
                ),
                bias: store.add(format!("{name}.conv{i}.bias"), Tensor::zeros([cout])),
                stride: 2,
            });
        }
        let cin = WIDTHS[WIDTHS.len() - 1];
        let std = (2.0 / cin as f64).sqrt();
        layers.push(ConvLayer {
            weight: store.add(
                format!("{name}.proj.weight"),
                normal(&[out_dim, cin, 1, 1], std, rng),
            ),
            bias: store.add(format!("{name}.proj.bias"), Tensor::zeros([out_dim])),
            stride: 1,
        });
        Self { layers, out_dim }
    }

    /// `images: [N, 3, 224, 224]` -> `[N, 49, out_dim]` tokens (row-major
    /// over the 7x7 map).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != PATCH_SIZE || s[3] != PATCH_SIZE {
            return Err(CoreError::invalid(format!(
                "trunk expects [N, 3, {PATCH_SIZE}, {PATCH_SIZE}] images, got {s:?}"
            )));
        }
        let n = s[0];
        let mut x = g.avg_pool2d(images, POOL)?;
        for layer in &self.layers {
            let spec = Conv2dSpec {
                stride: layer.stride,
                padding: Padding::Replicate,
                groups: 1,
            };
            x = g.conv2d(x, p.var(layer.weight), Some(p.var(layer.bias)), spec)?;
            x = g.relu(x);
        }
        let x = g.reshape(x, &[n, self.out_dim, FEATURE_GRID * FEATURE_GRID])?;
        Ok(g.permute(x, &[0, 2, 1])?)
    }

    /// Token map and its mean over the 49 positions, `[N, out_dim]`.
    pub fn forward_pooled<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        images: Var,
    ) -> Result<(Var, Var)> {
        let tokens = self.forward(g, p, images)?;
        let pooled = g.mean_axis(tokens, 1)?;
        Ok((tokens, pooled))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn constant_image_gives_identical_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let trunk = ConvTrunk::new(&mut store, "trunk", 8, &mut rng);
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &store, false);
        let img = g.constant(Tensor::full([1, 3, PATCH_SIZE, PATCH_SIZE], 0.6));
        let (tokens, pooled) = trunk.forward_pooled(&mut g, &p, img).unwrap();
        let t = g.value(tokens);
        assert_eq!(t.shape(), &[1, 49, 8]);
        for r in 1..49 {
            assert_eq!(&t.data()[r * 8..(r + 1) * 8], &t.data()[..8]);
        }
        assert_eq!(g.value(pooled).shape(), &[1, 8]);
    }
}
