//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every kernel appends one node holding its forward value and enough saved
//! state to run its vector-Jacobian product. Node indices are assigned in
//! creation order, so walking the tape backwards visits each node once in
//! reverse topological order.

use super::tensor::{matmul, Real, Tensor};

/// Clamp applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, T),
    Embed { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Dropout { x: Var, mask: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Pick { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Rows { x: Var, start: usize },
    Transpose(Var),
    Reshape(Var),
    MaskFill { x: Var, idx: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Operation recorder; exclusively owned by one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(usize, Var)>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a registered parameter id, summed over every time the
    /// parameter was placed on the tape.
    pub fn param(&self, id: usize) -> Option<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for &(pid, var) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.grads[var.0] {
                match &mut acc {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Leaf that is a trainable parameter; its gradient is reported under `id`.
    pub fn param(&mut self, id: usize, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push((id, v));
        v
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let out = matmul(self.value(a), self.value(b), trans_a, trans_b);
        self.push(out, Op::MatMul { a, b, trans_a, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `[C]` bias to every row of an `[R, C]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        assert_eq!(vb.len(), c, "bias length mismatch");
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o = *o + *b;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data);
        self.push(out, Op::AddRow { x, bias })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| *v * c).collect());
        self.push(out, Op::Scale(x, c))
    }

    /// Gathers rows of `table` (`[V, D]`) into an `[ids.len(), D]` matrix.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let d = vt.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < vt.rows(), "embedding id {id} out of range");
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data);
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = vx.cols();
        let eps = T::lit(eps);
        let cn = T::lit(c as f64);
        let mut out = Vec::with_capacity(vx.len());
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(vx.rows());
        for row in vx.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / cn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (*v - mean) * r;
                xhat.push(h);
                out.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data);
        self.push(out, Op::Gelu(x))
    }

    /// Multiplies by a precomputed mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Var {
        let vx = self.value(x);
        assert_eq!(mask.len(), vx.len(), "dropout mask length mismatch");
        let data = vx.data().iter().zip(&mask).map(|(a, m)| *a * *m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data);
        self.push(out, Op::Dropout { x, mask })
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let mut data = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(c) {
            data.extend(softmax_slice(row));
        }
        let out = Tensor::new(vx.shape().to_vec(), data);
        self.push(out, Op::Softmax(x))
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let mut data = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
            data.extend(row.iter().map(|v| *v - lse));
        }
        let out = Tensor::new(vx.shape().to_vec(), data);
        self.push(out, Op::LogSoftmax(x))
    }

    /// Natural log with inputs clamped below at [`PROB_FLOOR`].
    pub fn log(&mut self, x: Var) -> Var {
        let floor = T::lit(PROB_FLOOR);
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v.max(floor).ln()).collect();
        let out = Tensor::new(vx.shape().to_vec(), data);
        self.push(out, Op::Log(x))
    }

    /// Gathers flat-indexed entries into a vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let vx = self.value(x);
        let data = idx.iter().map(|&i| vx.data()[i]).collect();
        let out = Tensor::new(vec![idx.len()], data);
        self.push(out, Op::Pick { x, idx: idx.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        assert!(!vx.is_empty(), "mean of an empty tensor");
        let s = vx.data().iter().copied().sum::<T>() / T::lit(vx.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Contiguous row slice `start..end` of a matrix.
    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        assert!(start <= end && end <= vx.rows(), "row slice out of range");
        let out = Tensor::new(vec![end - start, c], vx.data()[start * c..end * c].to_vec());
        self.push(out, Op::Rows { x, start })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = vx.data()[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], data), Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        self.push(out, Op::Reshape(x))
    }

    /// Overwrites flat-indexed entries with a constant; no gradient flows
    /// through the overwritten entries.
    pub fn mask_fill(&mut self, x: Var, idx: &[usize], value: T) -> Var {
        let mut out = self.value(x).clone();
        for &i in idx {
            out.data_mut()[i] = value;
        }
        self.push(out, Op::MaskFill { x, idx: idx.to_vec() })
    }

    /// Multi-head scaled dot-product self-attention over `[L, D]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (l, d) = (vq.rows(), vq.cols());
        assert!(d % heads == 0, "hidden size not divisible by heads");
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); heads * l * l];
        let mut out = vec![T::zero(); l * d];
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * l * l..(h + 1) * l * l];
            T::gemm(
                l,
                dh,
                l,
                scale,
                &vq.data()[off..],
                d as isize,
                1,
                &vk.data()[off..],
                1,
                d as isize,
                T::zero(),
                p,
                l as isize,
                1,
            );
            for row in p.chunks_mut(l) {
                let sm = softmax_slice(row);
                row.copy_from_slice(&sm);
            }
            T::gemm(
                l,
                l,
                dh,
                T::one(),
                p,
                l as isize,
                1,
                &vv.data()[off..],
                d as isize,
                1,
                T::zero(),
                &mut out[off..],
                d as isize,
                1,
            );
        }
        let out = Tensor::new(vec![l, d], out);
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![T::one()],
        ));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_a, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                // C = op(A)·op(B)
                let ga = if *trans_a {
                    matmul(vb, g, *trans_b, true)
                } else {
                    matmul(g, vb, false, !*trans_b)
                };
                let gb = if *trans_b {
                    matmul(g, va, true, *trans_a)
                } else {
                    matmul(va, g, !*trans_a, false)
                };
                accum(grads, *a, ga.reshaped(va.shape().to_vec()));
                accum(grads, *b, gb.reshaped(vb.shape().to_vec()));
            }
            Op::Add(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::AddRow { x, bias } => {
                let c = g.cols();
                let mut gb = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc = *acc + *v;
                    }
                }
                accum(grads, *x, g.clone());
                let shape = self.value(*bias).shape().to_vec();
                accum(grads, *bias, Tensor::new(shape, gb));
            }
            Op::Scale(x, c) => {
                let data = g.data().iter().map(|v| *v * *c).collect();
                accum(grads, *x, Tensor::new(g.shape().to_vec(), data));
            }
            Op::Embed { table, ids } => {
                let vt = self.value(*table);
                let d = vt.cols();
                let mut gt = Tensor::zeros(vt.shape().to_vec());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id * d..(id + 1) * d];
                    for (o, v) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *o = *o + *v;
                    }
                }
                accum(grads, *table, gt);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let vg = self.value(*gamma);
                let c = g.cols();
                let cn = T::lit(c as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.len()];
                for (r, grow) in g.data().chunks(c).enumerate() {
                    let xh = &xhat[r * c..(r + 1) * c];
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..c {
                        let dxh = grow[j] * vg.data()[j];
                        sum_d = sum_d + dxh;
                        sum_dx = sum_dx + dxh * xh[j];
                        dgamma[j] = dgamma[j] + grow[j] * xh[j];
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                    let md = sum_d / cn;
                    let mdx = sum_dx / cn;
                    for j in 0..c {
                        let dxh = grow[j] * vg.data()[j];
                        dx[r * c + j] = rstd[r] * (dxh - md - xh[j] * mdx);
                    }
                }
                accum(grads, *x, Tensor::new(g.shape().to_vec(), dx));
                accum(grads, *gamma, Tensor::new(vg.shape().to_vec(), dgamma));
                let bshape = self.value(*beta).shape().to_vec();
                accum(grads, *beta, Tensor::new(bshape, dbeta));
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let data = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv * gelu_grad(v))
                    .collect();
                accum(grads, *x, Tensor::new(g.shape().to_vec(), data));
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(a, m)| *a * *m).collect();
                accum(grads, *x, Tensor::new(g.shape().to_vec(), data));
            }
            Op::Softmax(x) => {
                let p = &node.value;
                let c = p.cols();
                let mut dx = Vec::with_capacity(p.len());
                for (prow, grow) in p.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot = prow.iter().zip(grow).map(|(a, b)| *a * *b).sum::<T>();
                    dx.extend(prow.iter().zip(grow).map(|(pv, gv)| *pv * (*gv - dot)));
                }
                accum(grads, *x, Tensor::new(g.shape().to_vec(), dx));
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yrow, grow) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let gs = grow.iter().copied().sum::<T>();
                    dx.extend(yrow.iter().zip(grow).map(|(yv, gv)| *gv - yv.exp() * gs));
                }
                accum(grads, *x, Tensor::new(g.shape().to_vec(), dx));
            }
            Op::Log(x) => {
                let floor = T::lit(PROB_FLOOR);
                let vx = self.value(*x);
                let data = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(v, gv)| if *v >= floor { *gv / *v } else { T::zero() })
                    .collect();
                accum(grads, *x, Tensor::new(g.shape().to_vec(), data));
            }
            Op::Pick { x, idx } => {
                let vx = self.value(*x);
                let mut gx = Tensor::zeros(vx.shape().to_vec());
                for (k, &i) in idx.iter().enumerate() {
                    gx.data_mut()[i] = gx.data()[i] + g.data()[k];
                }
                accum(grads, *x, gx);
            }
            Op::Sum(x) => {
                let vx = self.value(*x);
                accum(grads, *x, Tensor::filled(vx.shape().to_vec(), g.data()[0]));
            }
            Op::Mean(x) => {
                let vx = self.value(*x);
                let v = g.data()[0] / T::lit(vx.len() as f64);
                accum(grads, *x, Tensor::filled(vx.shape().to_vec(), v));
            }
            Op::Rows { x, start } => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut gx = Tensor::zeros(vx.shape().to_vec());
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                accum(grads, *x, gx);
            }
            Op::Transpose(x) => {
                let (r, c) = (g.rows(), g.cols());
                let mut data = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        data[j * r + i] = g.data()[i * c + j];
                    }
                }
                let shape = self.value(*x).shape().to_vec();
                accum(grads, *x, Tensor::new(shape, data));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accum(grads, *x, g.clone().reshaped(shape));
            }
            Op::MaskFill { x, idx } => {
                let mut gx = g.clone();
                for &i in idx {
                    gx.data_mut()[i] = T::zero();
                }
                accum(grads, *x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, probs, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<T>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (l, d) = (vq.rows(), vq.cols());
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); l * d];
        let mut dk = vec![T::zero(); l * d];
        let mut dv = vec![T::zero(); l * d];
        let mut dp = vec![T::zero(); l * l];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * l * l..(h + 1) * l * l];
            // dP = dO · Vᵀ
            T::gemm(
                l,
                dh,
                l,
                T::one(),
                &g.data()[off..],
                d as isize,
                1,
                &vv.data()[off..],
                1,
                d as isize,
                T::zero(),
                &mut dp,
                l as isize,
                1,
            );
            // dV += Pᵀ · dO
            T::gemm(
                l,
                l,
                dh,
                T::one(),
                p,
                1,
                l as isize,
                &g.data()[off..],
                d as isize,
                1,
                T::one(),
                &mut dv[off..],
                d as isize,
                1,
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
            for (prow, drow) in p.chunks(l).zip(dp.chunks_mut(l)) {
                let dot = prow.iter().zip(drow.iter()).map(|(a, b)| *a * *b).sum::<T>();
                for (dv_, pv) in drow.iter_mut().zip(prow) {
                    *dv_ = *pv * (*dv_ - dot) * scale;
                }
            }
            // dQ += dS · K
            T::gemm(
                l,
                l,
                dh,
                T::one(),
                &dp,
                l as isize,
                1,
                &vk.data()[off..],
                d as isize,
                1,
                T::one(),
                &mut dq[off..],
                d as isize,
                1,
            );
            // dK += dSᵀ · Q
            T::gemm(
                l,
                l,
                dh,
                T::one(),
                &dp,
                1,
                l as isize,
                &vq.data()[off..],
                d as isize,
                1,
                T::one(),
                &mut dk[off..],
                d as isize,
                1,
            );
        }
        accum(grads, q, Tensor::new(vec![l, d], dq));
        accum(grads, k, Tensor::new(vec![l, d], dk));
        accum(grads, v, Tensor::new(vec![l, d], dv));
    }
}

fn accum<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Max-shifted softmax of one row.
pub(crate) fn softmax_slice<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|v| (*v - max).exp()).collect();
    let z = exps.iter().copied().sum::<T>();
    exps.into_iter().map(|e| e / z).collect()
}
