//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so creation order is a valid
//! topological order and the backward pass is a single reverse sweep.
//! Operations are coarse-grained (a whole convolution, a whole attention
//! layer) so the tape stays short even for the full matcher.

use std::sync::Arc;

use super::plan::IndexPlan;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
/// Probabilities below this are clamped before taking the log.
pub const NLL_FLOOR: f64 = 1e-12;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Reshape(Var),
    Sum(Var),
    MeanRows {
        x: Var,
        idx: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Upsample2x(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    InnerProduct {
        a: Var,
        b: Var,
    },
    MatMulNt {
        a: Var,
        b: Var,
        scale: T,
    },
    IndexedDot {
        a: Var,
        b: Var,
        plan: Arc<IndexPlan>,
        scale: T,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        plan: Option<Arc<IndexPlan>>,
        probs: Vec<T>,
    },
    Nll {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<T>,
        clamped: Vec<bool>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape. Build with the op methods, then call
/// [`Graph::backward`] on a scalar output.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); len])
    }
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{}: {:?} vs {:?}",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = self.value(a);
        let out = Tensor::from_fn(va.shape(), |i| va.data()[i] * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::from_fn(va.shape(), |i| va.data()[i].max(T::zero()));
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Mean of the rows of `x` (`[N x C]`) selected by `idx`.
    pub fn mean_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (n, c) = (vx.rows(), vx.last_dim());
        if idx.is_empty() {
            return Err(Error::Argument("mean over an empty index set".into()));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("row {} of {}", bad, n)));
        }
        let inv = T::one() / T::from_f64(idx.len() as f64);
        let mut out = vec![T::zero(); c];
        for &i in idx {
            for (o, v) in out.iter_mut().zip(vx.row(i)) {
                *o += *v;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::vector(out),
            Op::MeanRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// `x [N x Cin] · w [Cin x Cout] + b [Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.shape().len() != 2 || vx.last_dim() != vw.shape()[0] {
            return Err(dim_err(format!(
                "linear: input {:?} against weight {:?}",
                vx.shape(),
                vw.shape()
            )));
        }
        let (n, cin, cout) = (vx.rows(), vw.shape()[0], vw.shape()[1]);
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(dim_err(format!("linear bias needs {} entries", cout)));
            }
        }
        let mut out = vec![T::zero(); n * cout];
        let (xd, wd) = (vx.data(), vw.data());
        for r in 0..n {
            let orow = &mut out[r * cout..(r + 1) * cout];
            if let Some(b) = b {
                orow.copy_from_slice(self.nodes[b.0].value.data());
            }
            for ci in 0..cin {
                let xv = xd[r * cin + ci];
                let wrow = &wd[ci * cout..(ci + 1) * cout];
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * *wv;
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let out = Tensor::new(shape, out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(dim_err(format!("layer norm over {} channels", c)));
        }
        let n = vx.rows();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let eps = T::from_f64(LN_EPS);
        let inv_c = T::one() / T::from_f64(c as f64);
        let mut xhat = vec![T::zero(); n * c];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * c];
        for r in 0..n {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + bt[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Cross-correlation of `x [H x W x Cin]` with `w [k x k x Cin x Cout]`,
    /// zero padding `k / 2`. Stride 1 keeps the size, stride 2 halves it.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[0] != ws[1] || ws[0] % 2 == 0 {
            return Err(dim_err(format!(
                "conv2d: input {:?} with kernel {:?}",
                xs, ws
            )));
        }
        if xs[2] != ws[2] {
            return Err(dim_err(format!(
                "conv2d: {} input channels against kernel expecting {}",
                xs[2], ws[2]
            )));
        }
        if stride == 0 {
            return Err(Error::Argument("conv2d stride must be positive".into()));
        }
        let cout = ws[3];
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(dim_err(format!("conv bias needs {} entries", cout)));
            }
        }
        let geo = ConvGeometry::new(xs, ws, stride);
        let mut out = vec![T::zero(); geo.ho * geo.wo * cout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for chunk in out.chunks_mut(cout) {
                chunk.copy_from_slice(bd);
            }
        }
        conv_forward(&geo, vx.data(), vw.data(), &mut out);
        let out = Tensor::new(vec![geo.ho, geo.wo, cout], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride }, ng))
    }

    /// Nearest-neighbour 2x upsampling of `[H x W x C]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 {
            return Err(dim_err(format!("upsample2x needs HxWxC, got {:?}", s)));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut out = vec![T::zero(); 4 * h * w * c];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let src = ((y / 2) * w + xx / 2) * c;
                let dst = (y * 2 * w + xx) * c;
                out[dst..dst + c].copy_from_slice(&vx.data()[src..src + c]);
            }
        }
        let out = Tensor::new(vec![2 * h, 2 * w, c], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Upsample2x(x), ng))
    }

    /// Rows of `x [N x C]` selected by `idx`, duplicates allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (n, c) = (vx.rows(), vx.last_dim());
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("gather row {} of {}", bad, n)));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(vx.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// `out[i] = a · b[i]` for `a [C]`, `b [N x C]`.
    pub fn inner_product(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.last_dim() || va.is_empty() {
            return Err(dim_err(format!(
                "inner product of {:?} with rows of {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out: Vec<T> = (0..vb.rows()).map(|i| dot(va.data(), vb.row(i))).collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::vector(out), Op::InnerProduct { a, b }, ng))
    }

    /// `scale · a bᵀ` for `a [M x C]`, `b [N x C]`, giving `[M x N]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var, scale: T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.last_dim() != vb.last_dim() {
            return Err(dim_err(format!(
                "matmul_nt channels {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, n) = (va.rows(), vb.rows());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            dots_into(va.row(i), vb.data(), 0..n, &mut out);
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let out = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMulNt { a, b, scale }, ng))
    }

    /// `out[i, j] = scale · a[i] · b[plan[i, j]]`, giving `[M x K]`.
    pub fn indexed_dot(&mut self, a: Var, b: Var, plan: Arc<IndexPlan>, scale: T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.last_dim() != vb.last_dim() {
            return Err(dim_err(format!(
                "indexed dot channels {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        if plan.rows() != va.rows() {
            return Err(dim_err(format!(
                "plan has {} rows for {} queries",
                plan.rows(),
                va.rows()
            )));
        }
        plan.check_bounds(vb.rows())?;
        let k = plan.width();
        let mut out = Vec::with_capacity(va.rows() * k);
        for i in 0..va.rows() {
            dots_into(va.row(i), vb.data(), plan.row(i).iter().map(|&key| key as usize), &mut out);
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let out = Tensor::new(vec![va.rows(), k], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::IndexedDot { a, b, plan, scale }, ng))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(Error::Argument("softmax of an empty tensor".into()));
        }
        if !vx.all_finite() {
            return Err(Error::Numeric("non-finite softmax input".into()));
        }
        let c = vx.last_dim();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Multi-head scaled dot-product attention. `q [M x H·D]`, `k`, `v`
    /// `[N x H·D]`. With a plan, query `i` attends only to keys
    /// `plan.row(i)`; without one it attends to every key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        plan: Option<Arc<IndexPlan>>,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let c = vq.last_dim();
        if heads == 0 || c % heads != 0 || vk.last_dim() != c || vv.last_dim() != c {
            return Err(dim_err(format!(
                "attention: q {:?}, k {:?}, v {:?}, {} heads",
                vq.shape(),
                vk.shape(),
                vv.shape(),
                heads
            )));
        }
        if vk.rows() != vv.rows() {
            return Err(dim_err("attention keys and values differ in count".into()));
        }
        let (m, n) = (vq.rows(), vk.rows());
        if let Some(p) = &plan {
            if p.rows() != m {
                return Err(dim_err(format!("plan has {} rows for {} queries", p.rows(), m)));
            }
            p.check_bounds(n)?;
        }
        let d = c / heads;
        let scale = T::one() / T::from_f64(d as f64).sqrt();
        let width = plan.as_ref().map_or(n, |p| p.width());
        let mut probs = vec![T::zero(); heads * m * width];
        let mut out = vec![T::zero(); m * c];
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        for h in 0..heads {
            let off = h * d;
            for i in 0..m {
                let qi = &qd[i * c + off..i * c + off + d];
                let p = &mut probs[(h * m + i) * width..(h * m + i + 1) * width];
                match &plan {
                    Some(plan) => {
                        for (s, &key) in p.iter_mut().zip(plan.row(i)) {
                            let kj = key as usize * c + off;
                            *s = dot(qi, &kd[kj..kj + d]) * scale;
                        }
                    }
                    None => {
                        for (j, s) in p.iter_mut().enumerate() {
                            *s = dot(qi, &kd[j * c + off..j * c + off + d]) * scale;
                        }
                    }
                }
                softmax_in_place(p);
                let oi = &mut out[i * c + off..i * c + off + d];
                for (jj, &pj) in p.iter().enumerate() {
                    let j = match &plan {
                        Some(plan) => plan.row(i)[jj] as usize,
                        None => jj,
                    };
                    let vj = &vd[j * c + off..j * c + off + d];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += pj * *x;
                    }
                }
            }
        }
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite attention output".into()));
        }
        let out = Tensor::new(vec![m, c], out)?;
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                plan,
                probs,
            },
            ng,
        ))
    }

    /// Summed negative log-likelihood `Σ −ln softmax(logits[row])[col]`
    /// over `targets`. Probabilities under [`NLL_FLOOR`] are clamped and
    /// contribute no gradient; the second return value counts them.
    pub fn nll(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<(Var, usize)> {
        let vl = self.value(logits);
        let (rows, c) = (vl.rows(), vl.last_dim());
        if !vl.all_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        if let Some(&(r, col)) = targets.iter().find(|&&(r, col)| r >= rows || col >= c) {
            return Err(Error::Index(format!(
                "nll target ({}, {}) outside {}x{} logits",
                r, col, rows, c
            )));
        }
        let mut probs = vl.data().to_vec();
        for row in probs.chunks_mut(c) {
            softmax_in_place(row);
        }
        let floor = T::from_f64(NLL_FLOOR);
        let mut total = T::zero();
        let mut clamped = Vec::with_capacity(targets.len());
        for &(r, col) in targets {
            let p = probs[r * c + col];
            let hit = p < floor;
            clamped.push(hit);
            total += if hit {
                -floor.ln()
            } else {
                // log-softmax directly: avoids ln of a rounded probability.
                let row = vl.row(r);
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|v| (*v - mx).exp()).sum::<T>().ln() + mx;
                lse - row[col]
            };
        }
        let n_clamped = clamped.iter().filter(|c| **c).count();
        let ng = self.ng(&[logits]);
        let var = self.push(
            Tensor::scalar(total),
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                probs,
                clamped,
            },
            ng,
        );
        Ok((var, n_clamped))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(dim_err(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient at node {}", i)));
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y * *s);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if va[i] > T::zero() {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MeanRows { x, idx } => {
                let c = self.value(*x).last_dim();
                let inv = T::one() / T::from_f64(idx.len() as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for &i in idx {
                        for j in 0..c {
                            gx[i * c + j] += g[j] * inv;
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, cin, cout) = (vx.rows(), vw.shape()[0], vw.shape()[1]);
                let (xd, wd) = (vx.data(), vw.data());
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..n {
                        let grow = &g[r * cout..(r + 1) * cout];
                        for ci in 0..cin {
                            gx[r * cin + ci] += dot(grow, &wd[ci * cout..(ci + 1) * cout]);
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for r in 0..n {
                        let grow = &g[r * cout..(r + 1) * cout];
                        for ci in 0..cin {
                            let xv = xd[r * cin + ci];
                            let wrow = &mut gw[ci * cout..(ci + 1) * cout];
                            for (o, gv) in wrow.iter_mut().zip(grow) {
                                *o += xv * *gv;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for grow in g.chunks(cout) {
                            gb.iter_mut().zip(grow).for_each(|(o, v)| *o += *v);
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
                let c = self.value(*x).last_dim();
                let gam = self.value(*gamma).data();
                let inv_c = T::one() / T::from_f64(c as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dxh = gr[j] * gam[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            let dxh = gr[j] * gam[j];
                            gx[r * c + j] += *rs * (dxh - m1 - xh[j] * m2);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (gr, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * xh[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(o, v)| *o += *v);
                    }
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let geo = ConvGeometry::new(vx.shape(), vw.shape(), *stride);
                if let Some(gx) = self.acc(grads, *x) {
                    conv_backward_input(&geo, g, vw.data(), gx);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    conv_backward_weight(&geo, g, vx.data(), gw);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for grow in g.chunks(geo.cout) {
                            gb.iter_mut().zip(grow).for_each(|(o, v)| *o += *v);
                        }
                    }
                }
            }
            Op::Upsample2x(x) => {
                let s = self.value(*x).shape().to_vec();
                let (w, c) = (s[1], s[2]);
                if let Some(gx) = self.acc(grads, *x) {
                    for y in 0..2 * s[0] {
                        for xx in 0..2 * w {
                            let src = (y * 2 * w + xx) * c;
                            let dst = ((y / 2) * w + xx / 2) * c;
                            for j in 0..c {
                                gx[dst + j] += g[src + j];
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).last_dim();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::InnerProduct { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let c = va.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        for j in 0..c {
                            ga[j] += *gi * vb.data()[i * c + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        for j in 0..c {
                            gb[i * c + j] += *gi * va.data()[j];
                        }
                    }
                }
            }
            Op::MatMulNt { a, b, scale } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, n, c) = (va.rows(), vb.rows(), va.last_dim());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j] * *scale;
                            let bj = vb.row(j);
                            for t in 0..c {
                                ga[i * c + t] += gij * bj[t];
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..m {
                        let ai = va.row(i);
                        for j in 0..n {
                            let gij = g[i * n + j] * *scale;
                            for t in 0..c {
                                gb[j * c + t] += gij * ai[t];
                            }
                        }
                    }
                }
            }
            Op::IndexedDot { a, b, plan, scale } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, c, k) = (va.rows(), va.last_dim(), plan.width());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for (j, &key) in plan.row(i).iter().enumerate() {
                            let gij = g[i * k + j] * *scale;
                            let bj = vb.row(key as usize);
                            for t in 0..c {
                                ga[i * c + t] += gij * bj[t];
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..m {
                        let ai = va.row(i);
                        for (j, &key) in plan.row(i).iter().enumerate() {
                            let gij = g[i * k + j] * *scale;
                            let base = key as usize * c;
                            for t in 0..c {
                                gb[base + t] += gij * ai[t];
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..y.len() / c {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let s = dot(yr, gr);
                        for j in 0..c {
                            gx[r * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                plan,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, plan.as_deref(), probs, g, grads),
            Op::Nll {
                logits,
                targets,
                probs,
                clamped,
            } => {
                let c = self.value(*logits).last_dim();
                if let Some(gl) = self.acc(grads, *logits) {
                    for (&(r, col), &hit) in targets.iter().zip(clamped) {
                        if hit {
                            continue;
                        }
                        for j in 0..c {
                            gl[r * c + j] += g[0] * probs[r * c + j];
                        }
                        gl[r * c + col] -= g[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        plan: Option<&IndexPlan>,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let c = vq.last_dim();
        let (m, n) = (vq.rows(), vk.rows());
        let d = c / heads;
        let scale = T::one() / T::from_f64(d as f64).sqrt();
        let width = plan.map_or(n, |p| p.width());
        let key = |i: usize, jj: usize| plan.map_or(jj, |p| p.row(i)[jj] as usize);

        // dL/dscore for every (head, query, key slot); shared by q and k grads.
        let mut dscore = vec![T::zero(); heads * m * width];
        let mut dp = vec![T::zero(); width];
        for h in 0..heads {
            let off = h * d;
            for i in 0..m {
                let gi = &g[i * c + off..i * c + off + d];
                let base = (h * m + i) * width;
                let p = &probs[base..base + width];
                let mut s = T::zero();
                for jj in 0..width {
                    let j = key(i, jj);
                    dp[jj] = dot(gi, &vv.data()[j * c + off..j * c + off + d]);
                    s += dp[jj] * p[jj];
                }
                for jj in 0..width {
                    dscore[base + jj] = p[jj] * (dp[jj] - s) * scale;
                }
            }
        }
        if let Some(gv) = self.acc(grads, v) {
            for h in 0..heads {
                let off = h * d;
                for i in 0..m {
                    let gi = &g[i * c + off..i * c + off + d];
                    let base = (h * m + i) * width;
                    for jj in 0..width {
                        let pj = probs[base + jj];
                        let j = key(i, jj);
                        let dst = &mut gv[j * c + off..j * c + off + d];
                        for (o, x) in dst.iter_mut().zip(gi) {
                            *o += pj * *x;
                        }
                    }
                }
            }
        }
        if let Some(gq) = self.acc(grads, q) {
            for h in 0..heads {
                let off = h * d;
                for i in 0..m {
                    let base = (h * m + i) * width;
                    let dst = &mut gq[i * c + off..i * c + off + d];
                    for jj in 0..width {
                        let ds = dscore[base + jj];
                        let j = key(i, jj);
                        let kj = &vk.data()[j * c + off..j * c + off + d];
                        for (o, x) in dst.iter_mut().zip(kj) {
                            *o += ds * *x;
                        }
                    }
                }
            }
        }
        if let Some(gk) = self.acc(grads, k) {
            for h in 0..heads {
                let off = h * d;
                for i in 0..m {
                    let base = (h * m + i) * width;
                    let qi = &vq.data()[i * c + off..i * c + off + d];
                    for jj in 0..width {
                        let ds = dscore[base + jj];
                        let j = key(i, jj);
                        let dst = &mut gk[j * c + off..j * c + off + d];
                        for (o, x) in dst.iter_mut().zip(qi) {
                            *o += ds * *x;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

/// Four [`dot`]s of `a` at once, each summed in the same order as `dot`.
#[inline]
pub(crate) fn dot4<T: Scalar>(a: &[T], b: [&[T]; 4]) -> [T; 4] {
    let n = a.len();
    let (b0, b1, b2, b3) = (&b[0][..n], &b[1][..n], &b[2][..n], &b[3][..n]);
    let mut s = [T::zero(); 4];
    for i in 0..n {
        let x = a[i];
        s[0] += x * b0[i];
        s[1] += x * b1[i];
        s[2] += x * b2[i];
        s[3] += x * b3[i];
    }
    s
}

/// `a` against each `c`-wide row of `keys` picked by `rows`, appended to
/// `out`.
pub(crate) fn dots_into<T: Scalar>(a: &[T], keys: &[T], rows: impl ExactSizeIterator<Item = usize>, out: &mut Vec<T>) {
    let c = a.len();
    let key = |j: usize| &keys[j * c..(j + 1) * c];
    out.reserve(rows.len());
    let mut rows = rows.peekable();
    loop {
        let mut idx = [0usize; 4];
        let mut n = 0;
        while n < 4 {
            match rows.next() {
                Some(j) => {
                    idx[n] = j;
                    n += 1;
                }
                None => break,
            }
        }
        if n == 4 {
            out.extend(dot4(a, [key(idx[0]), key(idx[1]), key(idx[2]), key(idx[3])]));
        } else {
            out.extend(idx[..n].iter().map(|&j| dot(a, key(j))));
            break;
        }
    }
}

/// Stable in-place softmax of one row.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    let inv = T::one() / s;
    row.iter_mut().for_each(|v| *v *= inv);
}

struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize) -> Self {
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (k, cout) = (ws[0], ws[3]);
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeometry {
            h,
            w,
            cin,
            cout,
            k,
            pad,
            stride,
            ho,
            wo,
        }
    }

    /// Input coordinate for output `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

fn conv_forward<T: Scalar>(geo: &ConvGeometry, x: &[T], w: &[T], out: &mut [T]) {
    let (cin, cout, k) = (geo.cin, geo.cout, geo.k);
    for oy in 0..geo.ho {
        for ox in 0..geo.wo {
            let o = &mut out[(oy * geo.wo + ox) * cout..(oy * geo.wo + ox + 1) * cout];
            for ky in 0..k {
                let Some(iy) = geo.src(oy, ky, geo.h) else { continue };
                for kx in 0..k {
                    let Some(ix) = geo.src(ox, kx, geo.w) else { continue };
                    let xin = &x[(iy * geo.w + ix) * cin..(iy * geo.w + ix + 1) * cin];
                    let wbase = (ky * k + kx) * cin * cout;
                    for (ci, xv) in xin.iter().enumerate() {
                        let wrow = &w[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (ov, wv) in o.iter_mut().zip(wrow) {
                            *ov += *xv * *wv;
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input<T: Scalar>(geo: &ConvGeometry, g: &[T], w: &[T], gx: &mut [T]) {
    let (cin, cout, k) = (geo.cin, geo.cout, geo.k);
    for oy in 0..geo.ho {
        for ox in 0..geo.wo {
            let go = &g[(oy * geo.wo + ox) * cout..(oy * geo.wo + ox + 1) * cout];
            for ky in 0..k {
                let Some(iy) = geo.src(oy, ky, geo.h) else { continue };
                for kx in 0..k {
                    let Some(ix) = geo.src(ox, kx, geo.w) else { continue };
                    let gin = &mut gx[(iy * geo.w + ix) * cin..(iy * geo.w + ix + 1) * cin];
                    let wbase = (ky * k + kx) * cin * cout;
                    for (ci, gv) in gin.iter_mut().enumerate() {
                        *gv += dot(go, &w[wbase + ci * cout..wbase + (ci + 1) * cout]);
                    }
                }
            }
        }
    }
}

fn conv_backward_weight<T: Scalar>(geo: &ConvGeometry, g: &[T], x: &[T], gw: &mut [T]) {
    let (cin, cout, k) = (geo.cin, geo.cout, geo.k);
    for oy in 0..geo.ho {
        for ox in 0..geo.wo {
            let go = &g[(oy * geo.wo + ox) * cout..(oy * geo.wo + ox + 1) * cout];
            for ky in 0..k {
                let Some(iy) = geo.src(oy, ky, geo.h) else { continue };
                for kx in 0..k {
                    let Some(ix) = geo.src(ox, kx, geo.w) else { continue };
                    let xin = &x[(iy * geo.w + ix) * cin..(iy * geo.w + ix + 1) * cin];
                    let wbase = (ky * k + kx) * cin * cout;
                    for (ci, xv) in xin.iter().enumerate() {
                        let wrow = &mut gw[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (o, gv) in wrow.iter_mut().zip(go) {
                            *o += *xv * *gv;
                        }
                    }
                }
            }
        }
    }
}
