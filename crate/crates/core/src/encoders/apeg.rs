use std::collections::HashSet;

use rand_chacha::ChaCha8Rng;
use triplex_tensor::{Conv2dSpec, Graph, Padding, Real, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::nn::{normal, Bound, ParamId, ParamStore};

/// Grid cell of every global token, and the extents of the grid they live on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridCoordinates {
    cells: Vec<(usize, usize)>,
    h: usize,
    w: usize,
}

impl GridCoordinates {
    /// `cells[i] = (grid_x, grid_y)` of token `i`. The grid spans
    /// `0..=max(grid_x)` by `0..=max(grid_y)`.
    pub fn new(cells: Vec<(usize, usize)>) -> Result<Self> {
        if cells.is_empty() {
            return Err(CoreError::invalid("grid needs at least one token"));
        }
        let mut seen = HashSet::with_capacity(cells.len());
        for &(x, y) in &cells {
            if !seen.insert((x, y)) {
                return Err(CoreError::invalid(format!(
                    "duplicate grid coordinate ({x}, {y})"
                )));
            }
        }
        let h = cells.iter().map(|c| c.0).max().expect("non-empty") + 1;
        let w = cells.iter().map(|c| c.1).max().expect("non-empty") + 1;
        Ok(Self { cells, h, w })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    /// Grid extents `(h, w)`.
    pub fn extents(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Row-major cell index of every token on the `h x w` grid.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.cells.iter().map(|&(x, y)| x * self.w + y).collect()
    }

    pub fn occupancy(&self) -> Vec<bool> {
        let mut occ = vec![false; self.h * self.w];
        for i in self.flat_indices() {
            occ[i] = true;
        }
        occ
    }

    /// Reorders tokens: entry `i` of the result is entry `order[i]` here.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        Self::new(order.iter().map(|&i| self.cells[i]).collect())
    }
}

/// Position encoding for tokens on an irregular grid: scatter to a dense
/// zero-filled grid, convolve depthwise, zero the empty cells again, gather
/// back, and add to the input.
#[derive(Clone, Debug)]
pub struct Apeg {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub dim: usize,
}

impl Apeg {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = 1.0 / kernel as f64;
        Self {
            weight: store.add(
                format!("{name}.weight"),
                normal(&[dim, 1, kernel, kernel], std, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim])),
            kernel,
            dim,
        }
    }

    /// `tokens: [n, d]` -> `[n, d]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tokens: Var,
        coords: &GridCoordinates,
    ) -> Result<Var> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 2 || shape[0] != coords.len() || shape[1] != self.dim {
            return Err(CoreError::invalid(format!(
                "apeg expects [{}, {}] tokens, got {shape:?}",
                coords.len(),
                self.dim
            )));
        }
        let (h, w) = coords.extents();
        let index = coords.flat_indices();
        let d = self.dim;

        let grid = g.scatter_rows(tokens, &index, h * w)?;
        let grid = g.transpose(grid)?;
        let grid = g.reshape(grid, &[1, d, h, w])?;
        let spec = Conv2dSpec {
            stride: 1,
            padding: Padding::Zeros,
            groups: d,
        };
        let conv = g.conv2d(grid, p.var(self.weight), Some(p.var(self.bias)), spec)?;
        let occupied = coords.occupancy();
        let mask = Tensor::from_fn([h, w], |i| if occupied[i] { T::one() } else { T::zero() });
        let mask = g.constant(mask);
        let conv = g.mul(conv, mask)?;
        let conv = g.reshape(conv, &[d, h * w])?;
        let conv = g.transpose(conv)?;
        let back = g.gather_rows(conv, &index)?;
        Ok(g.add(tokens, back)?)
    }
}
