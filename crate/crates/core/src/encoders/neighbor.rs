use rand_chacha::ChaCha8Rng;
use triplex_tensor::{Graph, Real, Tensor, Var};

use super::attention::TransformerBlock;
use super::config::EncoderConfig;
use super::{NEIGHBOR_GRID, NEIGHBOR_TOKENS};
use crate::error::{CoreError, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore};

/// Number of distinct offsets along one axis of the 5x5 grid (-4..=4).
const SPAN: usize = 2 * NEIGHBOR_GRID - 1;

/// Learned additive attention bias indexed by the grid offset between a
/// query token and a key token.
///
/// The table has one row per offset `(dr, dc)` in `[-4, 4]^2`, at row
/// `(dr + 4) * 9 + (dc + 4)`, where `dr = row(key) - row(query)` and
/// likewise for columns. It has one column when shared by all heads, or
/// one per head.
#[derive(Clone, Debug)]
pub struct RelativeBias {
    pub table: ParamId,
    pub heads: usize,
}

impl RelativeBias {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, heads: usize) -> Self {
        Self {
            table: store.add(format!("{name}.table"), Tensor::zeros([SPAN * SPAN, heads])),
            heads,
        }
    }

    /// Table row used for query token `q` and key token `k` (row-major 5x5).
    pub fn offset_index(q: usize, k: usize) -> usize {
        let (qr, qc) = ((q / NEIGHBOR_GRID) as isize, (q % NEIGHBOR_GRID) as isize);
        let (kr, kc) = ((k / NEIGHBOR_GRID) as isize, (k % NEIGHBOR_GRID) as isize);
        let half = (NEIGHBOR_GRID - 1) as isize;
        ((kr - qr + half) * SPAN as isize + (kc - qc + half)) as usize
    }

    /// Bias as `[25, 25]` (shared) or `[heads, 25, 25]` (per head).
    pub fn matrix<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
        let n = NEIGHBOR_TOKENS;
        let index: Vec<usize> = (0..n * n)
            .map(|i| Self::offset_index(i / n, i % n))
            .collect();
        let rows = g.gather_rows(p.var(self.table), &index)?;
        if self.heads == 1 {
            Ok(g.reshape(rows, &[n, n])?)
        } else {
            let cols = g.transpose(rows)?;
            Ok(g.reshape(cols, &[self.heads, n, n])?)
        }
    }
}

/// Self-attention over the 25 sub-patch features of the neighbor view, with
/// relative position bias in every block.
#[derive(Clone, Debug)]
pub struct NeighborEncoder {
    pub proj: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub biases: Vec<RelativeBias>,
}

/// Output tokens plus the attention probabilities of every block.
pub struct NeighborTrace {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl NeighborEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        feature_dim: usize,
        cfg: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let proj = Linear::new(store, "neighbor.proj", feature_dim, cfg.d, true, rng);
        let bias_heads = if cfg.per_head_bias { cfg.num_heads3 } else { 1 };
        let mut blocks = Vec::new();
        let mut biases = Vec::new();
        for i in 0..cfg.depth3 {
            let name = format!("neighbor.block{i}");
            blocks.push(TransformerBlock::new(
                store,
                &name,
                cfg.d,
                cfg.num_heads3,
                cfg.mlp_ratio3,
                cfg.dropout3,
                rng,
            ));
            biases.push(RelativeBias::new(store, &format!("{name}.rel"), bias_heads));
        }
        Self {
            proj,
            blocks,
            biases,
        }
    }

    /// `features: [B, 25, feature_dim]` -> `[B, 25, d]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &mut Bound, features: Var) -> Result<Var> {
        Ok(self.forward_traced(g, p, features)?.output)
    }

    pub fn forward_traced<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &mut Bound,
        features: Var,
    ) -> Result<NeighborTrace> {
        let s = g.shape(features);
        if s.len() != 3 || s[1] != NEIGHBOR_TOKENS || s[2] != self.proj.in_dim {
            return Err(CoreError::invalid(format!(
                "neighbor features must be [B, {NEIGHBOR_TOKENS}, {}], got {s:?}",
                self.proj.in_dim
            )));
        }
        let mut x = self.proj.forward(g, p, features)?;
        let mut weights = Vec::with_capacity(self.blocks.len());
        for (block, bias) in self.blocks.iter().zip(&self.biases) {
            let b = bias.matrix(g, p)?;
            let att = block.forward_attended(g, p, x, Some(b))?;
            x = att.output;
            weights.push(att.weights);
        }
        Ok(NeighborTrace { output: x, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg(per_head: bool) -> EncoderConfig {
        EncoderConfig {
            d: 8,
            depth3: 2,
            num_heads3: 2,
            mlp_ratio3: 1,
            dropout3: 0.0,
            per_head_bias: per_head,
            ..EncoderConfig::default()
        }
    }

    fn build(per_head: bool) -> (ParamStore<f64>, NeighborEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = NeighborEncoder::new(&mut store, 6, &small_cfg(per_head), &mut rng);
        (store, enc)
    }

    fn run(
        store: &ParamStore<f64>,
        enc: &NeighborEncoder,
        x: Tensor<f64>,
    ) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let mut p = Bound::new(&mut g, store, false);
        let x = g.constant(x);
        let t = enc.forward_traced(&mut g, &mut p, x).unwrap();
        let w = t.weights.iter().map(|&w| g.value(w).clone()).collect();
        (g.value(t.output).clone(), w)
    }

    #[test]
    fn offset_index_covers_the_table() {
        assert_eq!(RelativeBias::offset_index(0, 0), 40);
        assert_eq!(RelativeBias::offset_index(24, 0), 0);
        assert_eq!(RelativeBias::offset_index(0, 24), 80);
        assert_eq!(RelativeBias::offset_index(7, 8), 41);
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let (store, enc) = build(false);
        let row: Vec<f64> = vec![0.3, -0.2, 1.0, 0.5, 0.0, -1.5];
        let x = Tensor::from_fn([1, 25, 6], |i| row[i % 6]);
        let (out, weights) = run(&store, &enc, x);
        for w in &weights {
            for &v in w.data() {
                assert!((v - 1.0 / 25.0).abs() < 1e-12);
            }
        }
        let d = 8;
        for r in 1..25 {
            for c in 0..d {
                assert!((out.data()[r * d + c] - out.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_offset_bias_concentrates_on_diagonal() {
        let (mut store, enc) = build(true);
        for bias in &enc.biases {
            let mut table = Tensor::zeros([SPAN * SPAN, 2]);
            table.data_mut()[40 * 2] = 20.0;
            table.data_mut()[40 * 2 + 1] = 20.0;
            store.set(bias.table, table).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, weights) = run(&store, &enc, Tensor::randn([1, 25, 6], 0.5, &mut rng));
        for w in &weights {
            for h in 0..2 {
                for q in 0..25 {
                    assert!(w.get(&[h, q, q]) > 0.99);
                }
            }
        }
    }

    #[test]
    fn positions_break_permutation_equivariance() {
        let (mut store, enc) = build(false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for bias in &enc.biases {
            store
                .set(bias.table, Tensor::randn([SPAN * SPAN, 1], 1.0, &mut rng))
                .unwrap();
        }
        let x = Tensor::randn([1, 25, 6], 1.0, &mut rng);
        // Swap tokens 0 and 24 in the input only.
        let mut y = x.clone();
        for c in 0..6 {
            y.data_mut().swap(c, 24 * 6 + c);
        }
        let (ox, _) = run(&store, &enc, x);
        let (mut oy, _) = run(&store, &enc, y);
        for c in 0..8 {
            oy.data_mut().swap(c, 24 * 8 + c);
        }
        assert!(ox.max_abs_diff(&oy) > 1e-3);
    }
}
