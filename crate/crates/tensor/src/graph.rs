use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::real::{gemm, MatRef, Real};
use crate::tensor::{check_shape, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    Replicate,
}

/// Stride, padding and grouping of a "same"-padded convolution with an
/// odd square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: Padding::Zeros,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Gelu,
    Sin,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Unary(usize, Unary),
    Matmul(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
    MeanAxis {
        a: usize,
        axis: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    GatherRows {
        a: usize,
        index: Vec<usize>,
    },
    ScatterRows {
        a: usize,
        index: Vec<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        groups: usize,
        geom: ConvGeometry,
    },
    AvgPool2d {
        a: usize,
        k: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of recorded operations.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction and backward is a single reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients of the leaves that requested them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Number of trailing repeats when `b` is broadcast over `a`.
///
/// `b`'s shape, with leading unit dimensions dropped, must equal the
/// trailing dimensions of `a`'s shape.
fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    let lead = b.iter().take_while(|&&d| d == 1).count();
    let core = &b[lead..];
    if core.len() > a.len() || a[a.len() - core.len()..] != *core {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(a[..a.len() - core.len()].iter().product())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn make(&self, shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape, data).expect("kernel produced a consistent shape")
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad(false))
    }

    /// A constant copy of `v`'s value; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn broadcast_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, usize)> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        suffix_broadcast(op, av.shape(), bv.shape())?;
        let bn = bv.numel();
        let data = av
            .data()
            .chunks_exact(bn)
            .flat_map(|chunk| chunk.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok((self.make(av.shape().to_vec(), data), bn))
    }

    /// `a + b`, with `b` broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    /// Elementwise product, with `b` broadcast like in [`Self::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.nodes[a.0].value.map(|x| x * c);
        self.push(t, Op::Scale(a.0, c), &[a.0])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("identical shapes")
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let t = match kind {
            Unary::Relu => self.nodes[a.0].value.map(|x| x.max(T::zero())),
            Unary::Gelu => self.nodes[a.0].value.map(kernels::gelu),
            Unary::Sin => self.nodes[a.0].value.map(T::sin),
        };
        self.push(t, Op::Unary(a.0, kind), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }

    /// `a[..., k] x b[k, n] -> [..., n]`: leading dimensions of `a` are
    /// treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let k = *av.shape().last().expect("rank >= 1");
        if bv.ndim() != 2 || bv.shape()[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let n = bv.shape()[1];
        let rows = av.numel() / k;
        let mut out = vec![T::zero(); rows * n];
        gemm(
            rows,
            k,
            n,
            MatRef::rows(av.data(), k),
            MatRef::rows(bv.data(), n),
            false,
            &mut out,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        let t = self.make(shape, out);
        Ok(self.push(t, Op::Matmul(a.0, b.0), &[a.0, b.0]))
    }

    /// `x w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Batched matmul: `a[B, m, k] x b[B, k, n]`, or `x b[B, n, k]^T` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        if av.ndim() != 3 || bv.ndim() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(mismatch());
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            return Err(mismatch());
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let ab = &av.data()[i * m * k..(i + 1) * m * k];
            let bb = &bv.data()[i * k * n..(i + 1) * k * n];
            let bref = if trans_b {
                MatRef::trans(bb, k)
            } else {
                MatRef::rows(bb, n)
            };
            gemm(
                m,
                k,
                n,
                MatRef::rows(ab, k),
                bref,
                false,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let t = self.make(vec![batch, m, n], out);
        Ok(self.push(
            t,
            Op::Bmm {
                a: a.0,
                b: b.0,
                trans_b,
            },
            &[a.0, b.0],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let len = *av.shape().last().expect("rank >= 1");
        let t = self.make(av.shape().to_vec(), kernels::softmax_rows(av.data(), len));
        self.push(t, Op::Softmax(a.0), &[a.0])
    }

    /// Layer normalization over the last axis followed by `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let n = *xv.shape().last().expect("rank >= 1");
        for p in [gamma, beta] {
            let pv = &self.nodes[p.0].value;
            if pv.shape() != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
        }
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let eps = T::from_f64_lossy(eps);
        let nt = T::from_usize(n).expect("usize");
        let rows = xv.numel() / n;
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = self.make(xv.shape().to_vec(), out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(t, Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let n = T::from_usize(av.numel()).expect("usize");
        let t = Tensor::scalar(av.sum() / n);
        self.push(t, Op::Mean(a.0), &[a.0])
    }

    /// Mean over `axis`, which is removed from the shape (a rank-1 input
    /// yields shape `[1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if axis >= av.ndim() {
            return Err(TensorError::InvalidArgument {
                op: "mean_axis",
                reason: format!("axis {axis} out of range for shape {:?}", av.shape()),
            });
        }
        let (outer, len, inner) = split_axis(av.shape(), axis);
        let lt = T::from_usize(len).expect("usize");
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &av.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= lt);
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = self.make(shape, out);
        Ok(self.push(t, Op::MeanAxis { a: a.0, axis }, &[a.0]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = self.make(shape, out);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            t,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let numel = check_shape(shape)?;
        if numel != av.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: av.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = self.make(shape.to_vec(), av.to_vec());
        Ok(self.push(t, Op::Reshape(a.0), &[a.0]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let mut seen = vec![false; av.ndim()];
        let valid = perm.len() == av.ndim()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!(
                    "{perm:?} is not a permutation of the axes of {:?}",
                    av.shape()
                ),
            });
        }
        let data = kernels::permute(av.data(), av.shape(), perm);
        let shape = perm.iter().map(|&p| av.shape()[p]).collect();
        let t = self.make(shape, data);
        Ok(self.push(
            t,
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
            &[a.0],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.nodes[a.0].value.ndim();
        if rank < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: "needs rank >= 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    /// Selects rows (slices along axis 0). Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let rows = av.shape()[0];
        let cols = av.numel() / rows;
        if index.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                reason: "empty index".into(),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                reason: format!("row {bad} out of range for shape {:?}", av.shape()),
            });
        }
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(&av.data()[i * cols..(i + 1) * cols]);
        }
        let mut shape = av.shape().to_vec();
        shape[0] = index.len();
        let t = self.make(shape, out);
        Ok(self.push(
            t,
            Op::GatherRows {
                a: a.0,
                index: index.to_vec(),
            },
            &[a.0],
        ))
    }

    /// Places row `i` of `a` at row `index[i]` of a zero tensor with `rows`
    /// rows; repeated indices add up.
    pub fn scatter_rows(&mut self, a: Var, index: &[usize], rows: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if index.len() != av.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "scatter_rows",
                reason: format!("row {bad} out of range for {rows} rows"),
            });
        }
        let cols = av.numel() / index.len();
        let mut out = vec![T::zero(); rows * cols];
        for (src, &i) in av.data().chunks_exact(cols).zip(index) {
            for (d, &s) in out[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                *d += s;
            }
        }
        let mut shape = av.shape().to_vec();
        shape[0] = rows;
        let t = self.make(shape, out);
        Ok(self.push(
            t,
            Op::ScatterRows {
                a: a.0,
                index: index.to_vec(),
            },
            &[a.0],
        ))
    }

    /// 2-D convolution of `x[N, C, H, W]` with `w[O, C/groups, k, k]` (`k`
    /// odd) and "same" padding; output spatial size is `ceil(H / stride)`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: xv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        };
        if xv.ndim() != 4 || wv.ndim() != 4 {
            return Err(mismatch());
        }
        let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (o, cg, k, k2) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        let groups = spec.groups;
        if groups == 0 || c % groups != 0 || o % groups != 0 || cg != c / groups || k != k2 {
            return Err(mismatch());
        }
        if k % 2 == 0 || spec.stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!(
                    "kernel size {k} must be odd and stride {} positive",
                    spec.stride
                ),
            });
        }
        if let Some(b) = bias {
            let bv = &self.nodes[b.0].value;
            if bv.shape() != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: wv.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
        }
        let geom = ConvGeometry::new(h, wd, k, spec.stride, spec.padding == Padding::Replicate);
        let out_hw = geom.out_hw();
        let og = o / groups;
        let ckk = cg * k * k;
        let mut out = vec![T::zero(); n * o * out_hw];
        let mut cols = vec![T::zero(); ckk * out_hw];
        for img in 0..n {
            for g in 0..groups {
                let planes =
                    &xv.data()[(img * c + g * cg) * h * wd..(img * c + (g + 1) * cg) * h * wd];
                geom.im2col(planes, cg, &mut cols);
                let wg = &wv.data()[g * og * ckk..(g + 1) * og * ckk];
                let dst = &mut out[(img * o + g * og) * out_hw..(img * o + (g + 1) * og) * out_hw];
                gemm(
                    og,
                    ckk,
                    out_hw,
                    MatRef::rows(wg, ckk),
                    MatRef::rows(&cols, out_hw),
                    false,
                    dst,
                );
            }
            if let Some(b) = bias {
                let bv = self.nodes[b.0].value.data();
                for (ch, &bias_v) in bv.iter().enumerate() {
                    let dst = &mut out[(img * o + ch) * out_hw..(img * o + ch + 1) * out_hw];
                    dst.iter_mut().for_each(|v| *v += bias_v);
                }
            }
        }
        let t = self.make(vec![n, o, geom.out_h, geom.out_w], out);
        let mut inputs = vec![x.0, w.0];
        inputs.extend(bias.map(|b| b.0));
        Ok(self.push(
            t,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                groups,
                geom,
            },
            &inputs,
        ))
    }

    /// Non-overlapping `k x k` average pooling of `x[N, C, H, W]`.
    pub fn avg_pool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.ndim() != 4 || k == 0 || av.shape()[2] % k != 0 || av.shape()[3] % k != 0 {
            return Err(TensorError::InvalidArgument {
                op: "avg_pool2d",
                reason: format!("window {k} does not tile shape {:?}", av.shape()),
            });
        }
        let (nc, h, w) = (av.shape()[0] * av.shape()[1], av.shape()[2], av.shape()[3]);
        let (oh, ow) = (h / k, w / k);
        let norm = T::from_usize(k * k).expect("usize");
        let mut out = vec![T::zero(); nc * oh * ow];
        for p in 0..nc {
            let plane = &av.data()[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    out[p * oh * ow + (y / k) * ow + x / k] += plane[y * w + x];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= norm);
        let t = self.make(vec![av.shape()[0], av.shape()[1], oh, ow], out);
        Ok(self.push(t, Op::AvgPool2d { a: a.0, k }, &[a.0]))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf recorded with `requires_grad` gets a gradient (zeros if
    /// the loss does not depend on it). The tape can only be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;

        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        fn slot<'g, T: Real>(
            grads: &'g mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            id: usize,
        ) -> Option<&'g mut Vec<T>> {
            if !nodes[id].requires_grad {
                return None;
            }
            Some(grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.numel()]))
        }

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = nodes[i].op {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let val = |id: usize| nodes[id].value.data();
            let shape = |id: usize| nodes[id].value.shape();
            match &nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(nodes[i].op, Op::Sub(..)) {
                        -T::one()
                    } else {
                        T::one()
                    };
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&dy).for_each(|(g, &d)| *g += d);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        let bn = gb.len();
                        for chunk in dy.chunks_exact(bn) {
                            gb.iter_mut().zip(chunk).for_each(|(g, &d)| *g += sign * d);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let bn = bv.len();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (gc, dc) in ga.chunks_exact_mut(bn).zip(dy.chunks_exact(bn)) {
                            for j in 0..bn {
                                gc[j] += dc[j] * bv[j];
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for (ac, dc) in av.chunks_exact(bn).zip(dy.chunks_exact(bn)) {
                            for j in 0..bn {
                                gb[j] += dc[j] * ac[j];
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&dy).for_each(|(g, &d)| *g += d * *c);
                    }
                }
                Op::Unary(a, kind) => {
                    let av = val(*a);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((g, &d), &x) in ga.iter_mut().zip(&dy).zip(av) {
                            let local = match kind {
                                Unary::Relu => {
                                    if x > T::zero() {
                                        T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                                Unary::Gelu => kernels::gelu_grad(x),
                                Unary::Sin => x.cos(),
                            };
                            *g += d * local;
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (k, n) = (shape(*b)[0], shape(*b)[1]);
                    let rows = av.len() / k;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        gemm(
                            rows,
                            n,
                            k,
                            MatRef::rows(&dy, n),
                            MatRef::trans(bv, n),
                            true,
                            ga,
                        );
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        gemm(
                            k,
                            rows,
                            n,
                            MatRef::trans(av, k),
                            MatRef::rows(&dy, n),
                            true,
                            gb,
                        );
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (batch, m, k) = (shape(*a)[0], shape(*a)[1], shape(*a)[2]);
                    let n = shape(i)[2];
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for bi in 0..batch {
                            let d = &dy[bi * m * n..(bi + 1) * m * n];
                            let bb = &bv[bi * k * n..(bi + 1) * k * n];
                            let bref = if *trans_b {
                                MatRef::rows(bb, k)
                            } else {
                                MatRef::trans(bb, n)
                            };
                            gemm(
                                m,
                                n,
                                k,
                                MatRef::rows(d, n),
                                bref,
                                true,
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for bi in 0..batch {
                            let d = &dy[bi * m * n..(bi + 1) * m * n];
                            let ab = &av[bi * m * k..(bi + 1) * m * k];
                            let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                            if *trans_b {
                                gemm(n, m, k, MatRef::trans(d, n), MatRef::rows(ab, k), true, dst);
                            } else {
                                gemm(k, m, n, MatRef::trans(ab, k), MatRef::rows(d, n), true, dst);
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = val(i);
                    let len = *shape(i).last().expect("rank >= 1");
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((gr, dr), yr) in ga
                            .chunks_exact_mut(len)
                            .zip(dy.chunks_exact(len))
                            .zip(y.chunks_exact(len))
                        {
                            let dot: T = dr.iter().zip(yr).map(|(&d, &y)| d * y).sum();
                            for j in 0..len {
                                gr[j] += yr[j] * (dr[j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let g = val(*gamma);
                    let n = g.len();
                    let nt = T::from_usize(n).expect("usize");
                    if let Some(gg) = slot(&mut grads, nodes, *gamma) {
                        for (dr, hr) in dy.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                            for j in 0..n {
                                gg[j] += dr[j] * hr[j];
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *beta) {
                        for dr in dy.chunks_exact(n) {
                            gb.iter_mut().zip(dr).for_each(|(g, &d)| *g += d);
                        }
                    }
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (r, ((gr, dr), hr)) in gx
                            .chunks_exact_mut(n)
                            .zip(dy.chunks_exact(n))
                            .zip(xhat.chunks_exact(n))
                            .enumerate()
                        {
                            let mut mean_d = T::zero();
                            let mut mean_dh = T::zero();
                            for j in 0..n {
                                let dh = dr[j] * g[j];
                                mean_d += dh;
                                mean_dh += dh * hr[j];
                            }
                            mean_d /= nt;
                            mean_dh /= nt;
                            for j in 0..n {
                                let dh = dr[j] * g[j];
                                gr[j] += rstd[r] * (dh - mean_d - hr[j] * mean_dh);
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().for_each(|g| *g += dy[0]);
                    }
                }
                Op::Mean(a) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        let d = dy[0] / T::from_usize(ga.len()).expect("usize");
                        ga.iter_mut().for_each(|g| *g += d);
                    }
                }
                Op::MeanAxis { a, axis } => {
                    let (outer, len, inner) = split_axis(shape(*a), *axis);
                    let lt = T::from_usize(len).expect("usize");
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for o in 0..outer {
                            let src = &dy[o * inner..(o + 1) * inner];
                            for l in 0..len {
                                let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                                dst.iter_mut().zip(src).for_each(|(g, &d)| *g += d / lt);
                            }
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = split_axis(shape(i), *axis);
                    let mut start = 0;
                    for &p in parts {
                        let len = shape(p)[*axis];
                        if let Some(gp) = slot(&mut grads, nodes, p) {
                            for o in 0..outer {
                                let src = &dy[(o * total + start) * inner
                                    ..(o * total + start + len) * inner];
                                let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                                dst.iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                            }
                        }
                        start += len;
                    }
                }
                Op::Reshape(a) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&dy).for_each(|(g, &d)| *g += d);
                    }
                }
                Op::Permute { a, perm } => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        let back =
                            kernels::permute(&dy, shape(i), &kernels::inverse_permutation(perm));
                        ga.iter_mut().zip(&back).for_each(|(g, &d)| *g += d);
                    }
                }
                Op::GatherRows { a, index } => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        let cols = dy.len() / index.len();
                        for (src, &r) in dy.chunks_exact(cols).zip(index) {
                            let dst = &mut ga[r * cols..(r + 1) * cols];
                            dst.iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                        }
                    }
                }
                Op::ScatterRows { a, index } => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        let cols = ga.len() / index.len();
                        for (dst, &r) in ga.chunks_exact_mut(cols).zip(index) {
                            let src = &dy[r * cols..(r + 1) * cols];
                            dst.iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                        }
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    bias,
                    groups,
                    geom,
                } => {
                    let (xs, ws) = (shape(*x), shape(*w));
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let (o, cg, k) = (ws[0], ws[1], ws[2]);
                    let og = o / groups;
                    let ckk = cg * k * k;
                    let out_hw = geom.out_hw();
                    let (xv, wv) = (val(*x), val(*w));
                    if let Some(b) = bias {
                        if let Some(gb) = slot(&mut grads, nodes, *b) {
                            for img in 0..n {
                                for ch in 0..o {
                                    let src =
                                        &dy[(img * o + ch) * out_hw..(img * o + ch + 1) * out_hw];
                                    gb[ch] += src.iter().copied().sum::<T>();
                                }
                            }
                        }
                    }
                    let mut cols = vec![T::zero(); ckk * out_hw];
                    if nodes[*w].requires_grad {
                        for img in 0..n {
                            for g in 0..*groups {
                                let planes =
                                    &xv[(img * c + g * cg) * hw..(img * c + (g + 1) * cg) * hw];
                                geom.im2col(planes, cg, &mut cols);
                                let d = &dy[(img * o + g * og) * out_hw
                                    ..(img * o + (g + 1) * og) * out_hw];
                                let gw = slot(&mut grads, nodes, *w).expect("requires grad");
                                gemm(
                                    og,
                                    out_hw,
                                    ckk,
                                    MatRef::rows(d, out_hw),
                                    MatRef::trans(&cols, out_hw),
                                    true,
                                    &mut gw[g * og * ckk..(g + 1) * og * ckk],
                                );
                            }
                        }
                    }
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for img in 0..n {
                            for g in 0..*groups {
                                let d = &dy[(img * o + g * og) * out_hw
                                    ..(img * o + (g + 1) * og) * out_hw];
                                let wg = &wv[g * og * ckk..(g + 1) * og * ckk];
                                gemm(
                                    ckk,
                                    og,
                                    out_hw,
                                    MatRef::trans(wg, ckk),
                                    MatRef::rows(d, out_hw),
                                    false,
                                    &mut cols,
                                );
                                let planes =
                                    &mut gx[(img * c + g * cg) * hw..(img * c + (g + 1) * cg) * hw];
                                geom.col2im(&cols, cg, planes);
                            }
                        }
                    }
                }
                Op::AvgPool2d { a, k } => {
                    let s = shape(*a);
                    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                    let (oh, ow) = (h / k, w / k);
                    let norm = T::from_usize(k * k).expect("usize");
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for p in 0..nc {
                            for y in 0..h {
                                for x in 0..w {
                                    ga[p * h * w + y * w + x] +=
                                        dy[p * oh * ow + (y / k) * ow + x / k] / norm;
                                }
                            }
                        }
                    }
                }
            }
        }

        let out = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => {
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("leaf shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}
