//! Reverse-mode tape. Every primitive appends a node holding its output value
//! and enough context to propagate gradients; `backward` replays the nodes in
//! exact reverse order, summing contributions into shared inputs.

use rand::Rng;

use super::value::numel;
use super::{counter, Mask, Real, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::mutation::{self, Mutation};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        plan: MatmulPlan,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: R,
    },
    Relu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<R>,
        rstd: Vec<R>,
    },
    Sum {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        map: Mapper,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        a: Var,
        keep: Vec<R>,
    },
}

#[derive(Debug)]
struct Node<R> {
    shape: Vec<usize>,
    value: Vec<R>,
    op: Op<R>,
    requires_grad: bool,
}

#[derive(Debug)]
struct MatmulPlan {
    p: usize,
    q: usize,
    r: usize,
    /// (a matrix index, b matrix index) for each output matrix, in order.
    pairs: Vec<(usize, usize)>,
}

/// Flat output index → flat source index under broadcasting or permutation.
#[derive(Clone, Debug)]
enum Mapper {
    Identity,
    Scalar,
    /// Source is a trailing suffix of the output shape.
    Modulo(usize),
    General {
        out_shape: Vec<usize>,
        strides: Vec<usize>,
    },
}

impl Mapper {
    fn broadcast(out: &[usize], src: &[usize]) -> Mapper {
        if out == src {
            return Mapper::Identity;
        }
        let n = numel(src);
        if n == 1 {
            return Mapper::Scalar;
        }
        let offset = out.len() - src.len();
        let trimmed: Vec<usize> = src.iter().copied().skip_while(|&e| e == 1).collect();
        if out.ends_with(&trimmed) && numel(&trimmed) == n {
            return Mapper::Modulo(n);
        }
        let mut src_strides = vec![0usize; src.len()];
        let mut acc = 1;
        for i in (0..src.len()).rev() {
            src_strides[i] = acc;
            acc *= src[i];
        }
        let strides = (0..out.len())
            .map(|d| {
                if d < offset || src[d - offset] == 1 {
                    0
                } else {
                    src_strides[d - offset]
                }
            })
            .collect();
        Mapper::General {
            out_shape: out.to_vec(),
            strides,
        }
    }

    fn permute(src: &[usize], axes: &[usize]) -> (Vec<usize>, Mapper) {
        let mut src_strides = vec![0usize; src.len()];
        let mut acc = 1;
        for i in (0..src.len()).rev() {
            src_strides[i] = acc;
            acc *= src[i];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
        let strides = axes.iter().map(|&a| src_strides[a]).collect();
        (
            out_shape.clone(),
            Mapper::General {
                out_shape,
                strides,
            },
        )
    }

    #[inline]
    fn map(&self, i: usize) -> usize {
        match self {
            Mapper::Identity => i,
            Mapper::Scalar => 0,
            Mapper::Modulo(n) => i % n,
            Mapper::General { out_shape, strides } => {
                let mut rem = i;
                let mut src = 0;
                for d in (0..out_shape.len()).rev() {
                    let e = out_shape[d];
                    src += (rem % e) * strides[d];
                    rem /= e;
                }
                src
            }
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Recording of primitive operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
    check_finite: bool,
    backward_done: bool,
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: false,
            backward_done: false,
        }
    }

    /// Enables the NaN/Inf check on every primitive output.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<R>,
        op: Op<R>,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<R> {
        &self.nodes[v.0]
    }

    /// Records a tensor; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<R>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor<R>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_f64(&mut self, shape: &[usize], data: &[f64]) -> Result<Var> {
        Ok(self.constant(&Tensor::from_f64(shape, data)?))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[R] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<R> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- linear algebra -------------------------------------------------

    /// Batched matrix product `[..., p, q] · [..., q, r]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes: `[..., p, q] · [..., r, q]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err(format!("matmul needs rank ≥ 2 operands, got {sa:?} and {sb:?}"));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (qb, r) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if q != qb {
            return shape_err(format!(
                "matmul inner extents differ: {sa:?} · {sb:?}{}",
                if trans_b { "ᵀ" } else { "" }
            ));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let Some(batch) = broadcast_shape(ba, bb) else {
            return shape_err(format!("matmul batch axes {ba:?} and {bb:?} do not broadcast"));
        };
        let n_out = numel(&batch);
        let (map_a, map_b) = (Mapper::broadcast(&batch, ba), Mapper::broadcast(&batch, bb));
        let pairs: Vec<(usize, usize)> =
            (0..n_out).map(|i| (map_a.map(i), map_b.map(i))).collect();

        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        let mut out = vec![R::zero(); n_out * p * r];
        for (o, &(ia, ib)) in pairs.iter().enumerate() {
            R::gemm(
                false,
                trans_b,
                p,
                q,
                r,
                &va[ia * p * q..(ia + 1) * p * q],
                &vb[ib * q * r..(ib + 1) * q * r],
                &mut out[o * p * r..(o + 1) * p * r],
                false,
            );
        }
        counter::add(n_out * p * q * r);
        let mut shape = batch;
        shape.extend([p, r]);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(
            "matmul",
            shape,
            out,
            Op::MatMul {
                a,
                b,
                trans_b,
                plan: MatmulPlan { p, q, r, pairs },
            },
            rg,
        )
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(R, R) -> R,
    ) -> Result<(Vec<usize>, Vec<R>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let Some(out_shape) = broadcast_shape(sa, sb) else {
            return shape_err(format!("{name}: shapes {sa:?} and {sb:?} do not broadcast"));
        };
        let (ma, mb) = (
            Mapper::broadcast(&out_shape, sa),
            Mapper::broadcast(&out_shape, sb),
        );
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        let n = numel(&out_shape);
        let out = match (&ma, &mb) {
            (Mapper::Identity, Mapper::Identity) => {
                va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
            }
            _ => (0..n).map(|i| f(va[ma.map(i)], vb[mb.map(i)])).collect(),
        };
        Ok((out_shape, out))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("add", shape, out, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("sub", shape, out, Op::Sub { a, b }, rg)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("mul", a, b, |x, y| x * y)?;
        counter::add(out.len());
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push("mul", shape, out, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let factor = R::from_f64(factor);
        let out: Vec<R> = self.value(a).iter().map(|&x| x * factor).collect();
        counter::add(out.len());
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push("scale", shape, out, Op::Scale { a, factor }, rg)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > R::zero() { x } else { R::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push("relu", shape, out, Op::Relu { a }, rg)
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::Input(format!("dropout rate {rate} must be < 1")));
        }
        let scale = R::from_f64(1.0 / (1.0 - rate));
        let keep: Vec<R> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { R::zero() } else { scale })
            .collect();
        let out = self.value(a).iter().zip(&keep).map(|(&x, &k)| x * k).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push("dropout", shape, out, Op::Dropout { a, keep }, rg)
    }

    // ---- normalisation --------------------------------------------------

    /// Row-wise softmax over the last axis, computed with max subtraction.
    ///
    /// `mask` entries of `-inf` produce exact zeros and receive no gradient.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some(&cols) = shape.last() else {
            return shape_err("softmax of a scalar");
        };
        let rows_per_matrix = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        if let Some(m) = mask {
            if m.cols() != cols || (m.rows() != 1 && m.rows() != rows_per_matrix) {
                return shape_err(format!(
                    "mask {}×{} does not broadcast onto logits {shape:?}",
                    m.rows(),
                    m.cols()
                ));
            }
        }
        let x = self.value(a);
        let mut out = vec![R::zero(); x.len()];
        for (row, (xs, ys)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let qrow = row % rows_per_matrix;
            let kept = |j: usize| mask.is_none_or(|m| !m.is_blocked(qrow, j));
            let mut max = R::neg_infinity();
            for (j, &v) in xs.iter().enumerate() {
                if kept(j) && v > max {
                    max = v;
                }
            }
            if max == R::neg_infinity() {
                return Err(Error::FullyMasked { row });
            }
            let mut total = R::zero();
            for (j, (&v, y)) in xs.iter().zip(ys.iter_mut()).enumerate() {
                if kept(j) {
                    *y = (v - max).exp();
                    total += *y;
                }
            }
            for y in ys.iter_mut() {
                *y /= total;
            }
        }
        let rg = self.requires_grad(a);
        self.push("softmax_rows", shape, out, Op::Softmax { a }, rg)
    }

    /// Row-wise `log softmax` over the last axis.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some(&cols) = shape.last() else {
            return shape_err("log_softmax of a scalar");
        };
        let x = self.value(a);
        let mut out = vec![R::zero(); x.len()];
        for (xs, ys) in x.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = xs.iter().copied().fold(R::neg_infinity(), R::max);
            let lse = xs.iter().map(|&v| (v - max).exp()).sum::<R>().ln() + max;
            for (y, &v) in ys.iter_mut().zip(xs) {
                *y = v - lse;
            }
        }
        let rg = self.requires_grad(a);
        self.push("log_softmax_rows", shape, out, Op::LogSoftmax { a }, rg)
    }

    /// Normalises each row of the last axis to zero mean and unit variance,
    /// then applies `gain` and `shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&d) = shape.last() else {
            return shape_err("layer_norm of a scalar");
        };
        if d < 2 {
            return shape_err(format!("layer_norm needs a feature axis ≥ 2, got {shape:?}"));
        }
        if self.shape(gain) != [d] || self.shape(shift) != [d] {
            return shape_err(format!(
                "layer_norm gain {:?} / shift {:?} for features {d}",
                self.shape(gain),
                self.shape(shift)
            ));
        }
        let eps = R::from_f64(eps);
        let dn = R::from_f64(d as f64);
        let (xv, g, s) = (
            &self.node(x).value,
            &self.node(gain).value,
            &self.node(shift).value,
        );
        let rows = xv.len() / d;
        let mut xhat = vec![R::zero(); xv.len()];
        let mut rstd = vec![R::zero(); rows];
        let mut out = vec![R::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<R>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dn;
            let inv = R::one() / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + s[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(shift);
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            },
            rg,
        )
    }

    // ---- reductions and layout -----------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).iter().copied().sum::<R>();
        let rg = self.requires_grad(a);
        self.push("sum", Vec::new(), vec![total], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape(a)));
        }
        let value = self.value(a).to_vec();
        let rg = self.requires_grad(a);
        self.push("reshape", shape.to_vec(), value, Op::Reshape { a }, rg)
    }

    /// Reorders axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        let mut seen = vec![false; src.len()];
        if axes.len() != src.len() || axes.iter().any(|&x| x >= src.len() || std::mem::replace(&mut seen[x], true)) {
            return shape_err(format!("{axes:?} is not a permutation of the axes of {src:?}"));
        }
        let (shape, map) = Mapper::permute(&src, axes);
        let v = self.value(a);
        let out = (0..v.len()).map(|i| v[map.map(i)]).collect();
        let rg = self.requires_grad(a);
        self.push("permute", shape, out, Op::Permute { a, map }, rg)
    }

    /// Selects rows of a `[V, d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [v, d] = self.shape(table)[..] else {
            return shape_err(format!("gather_rows needs a matrix, got {:?}", self.shape(table)));
        };
        if ids.is_empty() {
            return Err(Error::Input("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("row id {bad} out of range for {v} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(table);
        self.push(
            "gather_rows",
            vec![ids.len(), d],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    ///
    /// Can be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; record a fresh one".into(),
            ));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.node(loss).shape
            )));
        }
        if !self.node(loss).requires_grad {
            return Err(Error::Backward(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&self.nodes, node, &g, &mut grads);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn slot<'a, R: Real>(
    nodes: &[Node<R>],
    grads: &'a mut [Option<Vec<R>>],
    v: Var,
) -> Option<&'a mut Vec<R>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![R::zero(); len]))
}

fn backprop<R: Real>(nodes: &[Node<R>], node: &Node<R>, g: &[R], grads: &mut [Option<Vec<R>>]) {
    let val = |v: Var| -> &[R] { &nodes[v.0].value };
    let shp = |v: Var| -> &[usize] { &nodes[v.0].shape };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b, plan } => {
            let MatmulPlan { p, q, r, pairs } = plan;
            let (p, q, r) = (*p, *q, *r);
            if let Some(ga) = slot(nodes, grads, *a) {
                let vb = val(*b);
                for (o, &(ia, ib)) in pairs.iter().enumerate() {
                    let gs = &g[o * p * r..(o + 1) * p * r];
                    let bs = &vb[ib * q * r..(ib + 1) * q * r];
                    let dst = &mut ga[ia * p * q..(ia + 1) * p * q];
                    // dA = G · op(B)ᵀ
                    R::gemm(false, !*trans_b, p, r, q, gs, bs, dst, true);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let va = val(*a);
                for (o, &(ia, ib)) in pairs.iter().enumerate() {
                    let gs = &g[o * p * r..(o + 1) * p * r];
                    let as_ = &va[ia * p * q..(ia + 1) * p * q];
                    let dst = &mut gb[ib * q * r..(ib + 1) * q * r];
                    if *trans_b {
                        // dB = Gᵀ · A  (r×q)
                        R::gemm(true, false, r, p, q, gs, as_, dst, true);
                    } else {
                        // dB = Aᵀ · G  (q×r)
                        R::gemm(true, false, q, p, r, as_, gs, dst, true);
                    }
                }
            }
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(node.op, Op::Sub { .. }) { -R::one() } else { R::one() };
            for (v, s) in [(*a, R::one()), (*b, sign)] {
                let m = Mapper::broadcast(&node.shape, shp(v));
                if let Some(gv) = slot(nodes, grads, v) {
                    for (i, &gi) in g.iter().enumerate() {
                        gv[m.map(i)] += s * gi;
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            let ma = Mapper::broadcast(&node.shape, shp(*a));
            let mb = Mapper::broadcast(&node.shape, shp(*b));
            let (va, vb) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, &gi) in g.iter().enumerate() {
                    ga[ma.map(i)] += gi * vb[mb.map(i)];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (i, &gi) in g.iter().enumerate() {
                    gb[mb.map(i)] += gi * va[ma.map(i)];
                }
            }
        }
        Op::Scale { a, factor } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi * *factor;
                }
            }
        }
        Op::Relu { a } => {
            let va = val(*a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(va) {
                    if x > R::zero() {
                        *d += gi;
                    }
                }
            }
        }
        Op::Dropout { a, keep } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &gi), &k) in ga.iter_mut().zip(g).zip(keep) {
                    *d += gi * k;
                }
            }
        }
        Op::Softmax { a } => {
            let cols = *node.shape.last().expect("softmax output has a last axis");
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((ys, gs), ds) in node
                    .value
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(ga.chunks_mut(cols))
                {
                    let dot: R = ys.iter().zip(gs).map(|(&y, &gi)| y * gi).sum();
                    for ((d, &y), &gi) in ds.iter_mut().zip(ys).zip(gs) {
                        *d += y * (gi - dot);
                    }
                }
            }
        }
        Op::LogSoftmax { a } => {
            let cols = *node.shape.last().expect("log_softmax output has a last axis");
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((ys, gs), ds) in node
                    .value
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(ga.chunks_mut(cols))
                {
                    let total: R = gs.iter().copied().sum();
                    for ((d, &y), &gi) in ds.iter_mut().zip(ys).zip(gs) {
                        *d += gi - y.exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            shift,
            xhat,
            rstd,
        } => {
            let d = *node.shape.last().expect("layer_norm has a feature axis");
            let dn = R::from_f64(d as f64);
            let gv = val(*gain).to_vec();
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (gs, hs) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gs[j] * hs[j];
                    }
                }
            }
            if let Some(gs_) = slot(nodes, grads, *shift) {
                for gs in g.chunks(d) {
                    for j in 0..d {
                        gs_[j] += gs[j];
                    }
                }
            }
            let broken = mutation::is(Mutation::LayerNormGrad);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, (gs, hs)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_dh = R::zero();
                    let mut mean_dh_h = R::zero();
                    for j in 0..d {
                        let dh = gs[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hs[j];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    if broken {
                        mean_dh_h = R::zero();
                    }
                    for j in 0..d {
                        let dh = gs[j] * gv[j];
                        gx[r * d + j] += rstd[r] * (dh - mean_dh - hs[j] * mean_dh_h);
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Reshape { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
        Op::Permute { a, map } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, &gi) in g.iter().enumerate() {
                    ga[map.map(i)] += gi;
                }
            }
        }
        Op::GatherRows { table, ids } => {
            let d = node.shape[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[row * d + j];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::{finite_diff_grad, relative_error};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    fn p(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        t(shape, data).with_requires_grad(true)
    }

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for q in 0..k {
                    c[i * n + j] += a[i * k + q] * b[q * n + j];
                }
            }
        }
        c
    }

    fn pseudo(n: usize, salt: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * 0.731 + salt).sin()).collect()
    }

    #[test]
    fn matmul_small_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(&t(&[2, 2], &[3., 4., 5., 6.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[3., 4., 5., 6.]);
        let a = tape.constant(&t(&[1, 1], &[2.]));
        let b = tape.constant(&t(&[1, 1], &[3.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[6.]);
        assert!(tape.matmul(a, c).is_ok());
        let bad = tape.constant(&t(&[2, 3], &[0.; 6]));
        assert!(matches!(tape.matmul(bad, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let (a, b) = (pseudo(20, 0.1), pseudo(15, 0.9));
        let mut tape = Tape::new();
        let va = tape.constant(&t(&[4, 5], &a));
        let vb = tape.constant(&t(&[5, 3], &b));
        let c = tape.matmul(va, vb).unwrap();
        for (x, y) in tape.value(c).iter().zip(naive(4, 5, 3, &a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[3, 2], &[0., 0., 1000., 0., 2f64.ln(), 0.]));
        let s = tape.softmax_rows(x, None).unwrap();
        let v = tape.value(s);
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert_eq!(&v[2..4], &[1.0, 0.0]);
        assert!((v[4] - 2.0 / 3.0).abs() < 1e-15 && (v[5] - 1.0 / 3.0).abs() < 1e-15);
        let u = tape.constant(&t(&[1, 4], &[0.; 4]));
        let s = tape.softmax_rows(u, None).unwrap();
        assert_eq!(tape.value(s), &[0.25; 4]);
    }

    #[test]
    fn masked_softmax_zeroes_and_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(&p(&[2, 2], &[0.3, 0.9, -0.2, 0.4]));
        let s = tape.softmax_rows(x, Some(&Mask::causal(2))).unwrap();
        assert_eq!(tape.value(s)[0], 1.0);
        assert_eq!(tape.value(s)[1], 0.0);
        let w = tape.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
        let m = tape.mul(s, w).unwrap();
        let l = tape.sum(m).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap()[1], 0.0);

        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 2], &[0., 0.]));
        let all = Mask::key_padding(&[true, true]);
        assert!(matches!(
            tape.softmax_rows(x, Some(&all)),
            Err(Error::FullyMasked { row: 0 })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let cases: [(&[f64], f64, f64, &[f64]); 3] = [
            (&[1., 1., 1., 1.], 1., 0., &[0., 0., 0., 0.]),
            (&[1., -1.], 1., 0., &[1., -1.]),
            (&[0., 2.], 2., 1., &[-1., 3.]),
        ];
        for (x, g, s, want) in cases {
            let d = x.len();
            let mut tape = Tape::new();
            let xv = tape.constant(&t(&[d], x));
            let gv = tape.constant(&t(&[d], &vec![g; d]));
            let sv = tape.constant(&t(&[d], &vec![s; d]));
            let y = tape.layer_norm(xv, gv, sv, 1e-6).unwrap();
            for (a, b) in tape.value(y).iter().zip(want) {
                assert!((a - b).abs() < 1e-5, "{x:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn relu_values_and_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(&p(&[4], &[-1., 0., 2., 3.]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0., 0., 2., 3.]);
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0., 0., 1., 1.]);

        let mut tape = Tape::new();
        let x = tape.leaf(&p(&[2], &[-3., -0.5]));
        let y = tape.relu(x).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.value(y), &[0., 0.]);
        assert_eq!(tape.grad(x).unwrap(), &[0., 0.]);
    }

    #[test]
    fn backward_examples_and_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(&p(&[3], &[1., 2., 3.]));
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 1., 1.]);
        assert!(matches!(tape.backward(l), Err(Error::Backward(_))));

        let mut tape = Tape::new();
        let x = tape.leaf(&p(&[2], &[1., 2.]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., 4.]);

        let mut tape = Tape::new();
        let x = tape.leaf(&p(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
        let c = tape.constant(&t(&[1], &[1.]));
        let l = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::Backward(_))));
    }

    #[test]
    fn finite_check_is_opt_in() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1], &[f64::MAX]));
        assert!(tape.scale(x, 10.0).is_ok());
        let mut tape = Tape::new().with_finite_check(true);
        let x = tape.constant(&t(&[1], &[f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn permute_and_broadcast_layouts() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        assert_eq!(tape.value(y), &[1., 4., 2., 5., 3., 6.]);
        let col = tape.constant(&t(&[2, 1], &[10., 20.]));
        let z = tape.add(x, col).unwrap();
        assert_eq!(tape.value(z), &[11., 12., 13., 24., 25., 26.]);
        let row = tape.constant(&t(&[3], &[1., 1., 1.]));
        let z = tape.sub(x, row).unwrap();
        assert_eq!(tape.value(z), &[0., 1., 2., 3., 4., 5.]);
        assert!(tape.permute(x, &[0, 0]).is_err());
    }

    /// Gradient of every primitive against central differences.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let x0 = t(&[2, 3, 4], &pseudo(24, 0.3));
        let w0 = t(&[4, 4], &pseudo(16, 1.7));
        let row0 = t(&[3, 1], &pseudo(3, 2.2));
        let gain0 = t(&[4], &pseudo(4, 0.5));
        let table0 = t(&[5, 4], &pseudo(20, 4.1));
        let weights = t(&[2, 4, 3], &pseudo(24, 3.3));

        #[derive(Clone, Copy, PartialEq)]
        enum Which {
            X,
            W,
            Row,
            Gain,
            Table,
        }
        let run = |which: Which, sub: &Tensor<f64>| -> Result<(f64, Vec<f64>)> {
            let mut tape = Tape::new();
            let pick = |w: Which, base: &Tensor<f64>| {
                let v = if w == which {
                    sub.clone()
                } else {
                    base.clone()
                };
                v.with_requires_grad(true)
            };
            let x = tape.leaf(&pick(Which::X, &x0));
            let w = tape.leaf(&pick(Which::W, &w0));
            let row = tape.leaf(&pick(Which::Row, &row0));
            let gain = tape.leaf(&pick(Which::Gain, &gain0));
            let table = tape.leaf(&pick(Which::Table, &table0));
            let shift = tape.constant(&t(&[4], &[0.1, -0.2, 0.0, 0.3]));
            let xw = tape.matmul(x, w)?;
            let xwt = tape.matmul_t(xw, x)?; // [2,3,3]
            let xwt = tape.add(xwt, row)?;
            let sm = tape.softmax_rows(xwt, Some(&Mask::causal(3)))?;
            let ctx = tape.matmul(sm, x)?; // [2,3,4]
            let g = tape.gather_rows(table, &[1, 3, 1])?;
            let ctx = tape.mul(ctx, g)?;
            let ctx = tape.sub(ctx, x)?;
            let ln = tape.layer_norm(ctx, gain, shift, 1e-6)?;
            let r = tape.relu(ln)?;
            let r = tape.scale(r, 1.3)?;
            let pm = tape.permute(r, &[1, 0, 2])?;
            let rs = tape.reshape(pm, &[2, 3, 4])?;
            let lsm = tape.log_softmax_rows(rs)?;
            let cst = tape.constant(&weights.clone().reshape(&[2, 3, 4])?);
            let prod = tape.mul(lsm, cst)?;
            let loss = tape.sum(prod)?;
            let val = tape.value(loss)[0];
            tape.backward(loss)?;
            let v = match which {
                Which::X => x,
                Which::W => w,
                Which::Row => row,
                Which::Gain => gain,
                Which::Table => table,
            };
            Ok((val, tape.grad(v).unwrap().to_vec()))
        };
        for (which, base) in [
            (Which::X, &x0),
            (Which::W, &w0),
            (Which::Row, &row0),
            (Which::Gain, &gain0),
            (Which::Table, &table0),
        ] {
            let (_, bp) = run(which, base).unwrap();
            let fd = finite_diff_grad(|s| Ok(run(which, s)?.0), base, 1e-6).unwrap();
            let err = relative_error(&bp, fd.data(), 1e-8);
            assert!(err < 1e-6, "relative error {err}");
        }
    }

    #[test]
    fn multiple_consumers_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(&p(&[2], &[1.5, -2.0]));
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let l = tape.sum(b).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0f64..2.0, rows * cols)
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            x in prop::collection::vec(-50.0f64..50.0, 12),
            blocked in prop::collection::vec(any::<bool>(), 4),
        ) {
            let mut pad = blocked.clone();
            pad[0] = false;
            let mask = Mask::key_padding(&pad);
            let mut tape = Tape::new();
            let v = tape.constant(&t(&[3, 4], &x));
            let s = tape.softmax_rows(v, Some(&mask)).unwrap();
            for row in tape.value(s).chunks(4) {
                let total: f64 = row.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                for (j, &p) in row.iter().enumerate() {
                    if pad[j] { prop_assert_eq!(p, 0.0); }
                }
            }
            let mut t32 = Tape::<f32>::new();
            let v = t32.constant(&Tensor::from_f64(&[3, 4], &x).unwrap());
            let s = t32.softmax_rows(v, None).unwrap();
            for row in t32.value(s).chunks(4) {
                prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn matmul_is_associative(a in matrix(3, 4), b in matrix(4, 2), c in matrix(2, 5)) {
            let mut tape = Tape::new();
            let (va, vb, vc) = (
                tape.constant(&t(&[3, 4], &a)),
                tape.constant(&t(&[4, 2], &b)),
                tape.constant(&t(&[2, 5], &c)),
            );
            let ab = tape.matmul(va, vb).unwrap();
            let left = tape.matmul(ab, vc).unwrap();
            let bc = tape.matmul(vb, vc).unwrap();
            let right = tape.matmul(va, bc).unwrap();
            for (x, y) in tape.value(left).iter().zip(tape.value(right)) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn forward_is_deterministic(a in matrix(4, 6)) {
            let run = || {
                let mut tape = Tape::<f32>::new();
                let x = tape.leaf(&Tensor::from_f64(&[4, 6], &a).unwrap().with_requires_grad(true));
                let y = tape.matmul_t(x, x).unwrap();
                let s = tape.softmax_rows(y, None).unwrap();
                let l = tape.sum(s).unwrap();
                tape.backward(l).unwrap();
                (tape.value(s).to_vec(), tape.grad(x).unwrap().to_vec())
            };
            let (a1, g1) = run();
            let (a2, g2) = run();
            prop_assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert!(g1.iter().zip(&g2).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
