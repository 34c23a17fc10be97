//! Recorded-operation reverse-mode differentiation.
//!
//! A `Tape` is rebuilt for every forward pass (define-by-run). Operations
//! append nodes in execution order, so every node's inputs precede it and a
//! single reverse sweep visits each operation exactly once. All tape tensors
//! are 2-D; vectors are `[1 x n]` rows and scalars are `[1 x 1]`.
//!
//! Tapes are single-threaded. Concurrent scoring jobs each own a private
//! tape over a shared immutable [`ParamSet`].

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Reduction mode for [`Tape::pool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Mean,
    Last,
}

enum Op<F> {
    Const,
    Leaf(ParamId),
    EmbedRows {
        table: ParamId,
        rows: Vec<usize>,
    },
    Matmul(Var, Var),
    /// a [m x k] times b-transpose where b is [n x k].
    MatmulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Row-broadcast add: x [r x c] + row [1 x c].
    AddRow(Var, Var),
    /// Broadcast multiply by a scalar-valued var: x [r x c] * s [1 x 1].
    MulScalar(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    /// ln(max(x, floor)) elementwise.
    LogClamped(Var, F),
    SoftmaxRows(Var),
    Slice {
        x: Var,
        r0: usize,
        c0: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    PoolMax {
        x: Var,
        arg: Vec<usize>,
    },
    PoolMean {
        x: Var,
        len: usize,
    },
    Sum(Var),
    Reshape(Var),
}

struct Node<F> {
    value: Tensor<F>,
    needs_grad: bool,
    op: Op<F>,
}

pub struct Tape<'p, F: Scalar> {
    params: &'p ParamSet<F>,
    nodes: Vec<Node<F>>,
    leaf_of_param: Vec<Option<Var>>,
}

impl<'p, F: Scalar> Tape<'p, F> {
    pub fn new(params: &'p ParamSet<F>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            leaf_of_param: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, needs_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- leaves ------------------------------------------------------

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, false, Op::Const)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros(vec![rows, cols]))
    }

    /// Register a parameter as a leaf. Repeated calls for the same parameter
    /// return the same node, so fan-out accumulates gradients additively.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaf_of_param[id.index()] {
            return v;
        }
        let p = self.params.get(id);
        let v = self.push(p.value.clone(), !p.frozen, Op::Leaf(id));
        self.leaf_of_param[id.index()] = Some(v);
        v
    }

    /// Gather rows of an embedding table without putting the whole table on
    /// the tape. Gradients scatter-add back into the table rows.
    pub fn embed(&mut self, table: ParamId, rows: &[usize]) -> Result<Var> {
        let p = self.params.get(table);
        let (n, cols) = (p.value.rows(), p.value.cols());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::Bounds {
                    op: "embed",
                    index: r,
                    limit: n,
                });
            }
            data.extend_from_slice(&p.value.data()[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::matrix(rows.len(), cols, data)?;
        Ok(self.push(
            value,
            !p.frozen,
            Op::EmbedRows {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    // ---- arithmetic ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.cols() != bv.rows() {
            return Err(Error::Shape {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![F::zero(); m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == F::zero() {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + aip * brow[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, needs, Op::Matmul(a, b)))
    }

    /// `a · bᵀ` for a `[m x k]`, b `[n x k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.cols() != bv.cols() {
            return Err(Error::Shape {
                op: "matmul_t",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![F::zero(); m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            for j in 0..n {
                let mut s = F::zero();
                let arow = &ad[i * k..(i + 1) * k];
                let brow = &bd[j * k..(j + 1) * k];
                for p in 0..k {
                    s = s + arow[p] * brow[p];
                }
                out[i * n + j] = s;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, needs, Op::MatmulT(a, b)))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: op_name,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: xv.shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(xv.data()[i * c + j] + rv.data()[j]);
            }
        }
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(Tensor::matrix(r, c, data)?, needs, Op::AddRow(x, row)))
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = &self.nodes[s.0].value;
        if !sv.is_scalar() {
            return Err(Error::Shape {
                op: "mul_scalar",
                left: self.nodes[x.0].value.shape().to_vec(),
                right: sv.shape().to_vec(),
            });
        }
        let k = sv.item();
        let value = self.nodes[x.0].value.map(|v| v * k);
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(value, needs, Op::MulScalar(x, s)))
    }

    pub fn scale(&mut self, x: Var, k: F) -> Var {
        let value = self.nodes[x.0].value.map(|v| v * k);
        let needs = self.needs(x);
        self.push(value, needs, Op::Scale(x, k))
    }

    // ---- nonlinearities ------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.max(F::zero()));
        let needs = self.needs(x);
        self.push(value, needs, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = F::one();
        let value = self.nodes[x.0].value.map(|v| one / (one + (-v).exp()));
        let needs = self.needs(x);
        self.push(value, needs, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.tanh());
        let needs = self.needs(x);
        self.push(value, needs, Op::Tanh(x))
    }

    /// Elementwise `ln(max(x, floor))`; the clamp keeps vanishing
    /// probabilities from producing infinities.
    pub fn log_clamped(&mut self, x: Var, floor: F) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.max(floor).ln());
        let needs = self.needs(x);
        self.push(value, needs, Op::LogClamped(x, floor))
    }

    // ---- softmax ---------------------------------------------------------

    /// Row-wise softmax. `mask`, when given, marks valid cells; masked cells
    /// come out exactly zero and each row normalizes over its valid cells.
    /// A row with no valid cell comes out all-zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (r, c) = (xv.rows(), xv.cols());
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::Shape {
                    op: "softmax_rows",
                    left: xv.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let valid = |j: usize| mask.map_or(true, |m| m[i * c + j]);
            let mut mx: Option<F> = None;
            for j in 0..c {
                if valid(j) {
                    mx = Some(match mx {
                        Some(m) => m.max(row[j]),
                        None => row[j],
                    });
                }
            }
            let Some(mx) = mx else { continue }; // all-invalid row stays zero
            let mut z = F::zero();
            for j in 0..c {
                if valid(j) {
                    let e = (row[j] - mx).exp();
                    out[i * c + j] = e;
                    z = z + e;
                }
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / z;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(r, c, out)?, needs, Op::SoftmaxRows(x)))
    }

    // ---- shape ops -------------------------------------------------------

    pub fn slice(&mut self, x: Var, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (r, c) = (xv.rows(), xv.cols());
        if r1 > r || c1 > c || r0 > r1 || c0 > c1 {
            return Err(Error::Bounds {
                op: "slice",
                index: r1.max(c1),
                limit: r.max(c),
            });
        }
        let mut data = Vec::with_capacity((r1 - r0) * (c1 - c0));
        for i in r0..r1 {
            data.extend_from_slice(&xv.data()[i * c + c0..i * c + c1]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::matrix(r1 - r0, c1 - c0, data)?,
            needs,
            Op::Slice { x, r0, c0 },
        ))
    }

    pub fn rows(&mut self, x: Var, r0: usize, r1: usize) -> Result<Var> {
        let c = self.nodes[x.0].value.cols();
        self.slice(x, r0, r1, 0, c)
    }

    pub fn cols(&mut self, x: Var, c0: usize, c1: usize) -> Result<Var> {
        let r = self.nodes[x.0].value.rows();
        self.slice(x, 0, r, c0, c1)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.cols() != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: vec![rows, c],
                    right: pv.shape().to_vec(),
                });
            }
            rows += pv.rows();
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::matrix(rows, c, data)?,
            needs,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.nodes[parts[0].0].value.rows();
        let mut cols = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.rows() != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: vec![r, cols],
                    right: pv.shape().to_vec(),
                });
            }
            cols += pv.cols();
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let pv = &self.nodes[p.0].value;
                let pc = pv.cols();
                data.extend_from_slice(&pv.data()[i * pc..(i + 1) * pc]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::matrix(r, cols, data)?,
            needs,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if rows * cols != xv.numel() {
            return Err(Error::Shape {
                op: "reshape",
                left: xv.shape().to_vec(),
                right: vec![rows, cols],
            });
        }
        let value = Tensor::matrix(rows, cols, xv.data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::Reshape(x)))
    }

    // ---- reductions --------------------------------------------------------

    /// Column-wise max over the first `len` rows -> `[1 x c]`.
    pub fn pool_max(&mut self, x: Var, len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (r, c) = (xv.rows(), xv.cols());
        if len > r {
            return Err(Error::Bounds {
                op: "pool_max",
                index: len,
                limit: r,
            });
        }
        if len == 0 {
            return Ok(self.zeros(1, c));
        }
        let mut out = vec![F::zero(); c];
        let mut arg = vec![0usize; c];
        for j in 0..c {
            let mut best = xv.data()[j];
            let mut bi = 0;
            for i in 1..len {
                let v = xv.data()[i * c + j];
                if v > best {
                    best = v;
                    bi = i;
                }
            }
            out[j] = best;
            arg[j] = bi;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::row(out), needs, Op::PoolMax { x, arg }))
    }

    /// Column-wise mean over the first `len` rows -> `[1 x c]`.
    pub fn pool_mean(&mut self, x: Var, len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (r, c) = (xv.rows(), xv.cols());
        if len > r {
            return Err(Error::Bounds {
                op: "pool_mean",
                index: len,
                limit: r,
            });
        }
        if len == 0 {
            return Ok(self.zeros(1, c));
        }
        let inv = F::one() / F::from_f64(len as f64);
        let mut out = vec![F::zero(); c];
        for i in 0..len {
            for j in 0..c {
                out[j] = out[j] + xv.data()[i * c + j];
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::row(out), needs, Op::PoolMean { x, len }))
    }

    /// Reduce the first `len` rows of `x` to a single row.
    pub fn pool(&mut self, x: Var, mode: PoolMode, len: usize) -> Result<Var> {
        match mode {
            PoolMode::Max => self.pool_max(x, len),
            PoolMode::Mean => self.pool_mean(x, len),
            PoolMode::Last => {
                let xv = &self.nodes[x.0].value;
                let (r, c) = (xv.rows(), xv.cols());
                if len > r {
                    return Err(Error::Bounds {
                        op: "pool_last",
                        index: len,
                        limit: r,
                    });
                }
                if len == 0 {
                    return Ok(self.zeros(1, c));
                }
                self.rows(x, len - 1, len)
            }
        }
    }

    /// Sum of all elements -> `[1 x 1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = F::zero();
        for &v in self.nodes[x.0].value.data() {
            acc = acc + v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(acc), needs, Op::Sum(x))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// trainable parameter reachable from `loss`; unreachable parameters
    /// read back as zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::Shape {
                op: "backward",
                left: lv.shape().to_vec(),
                right: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize(loss.0 + 1, None);
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        let mut out = Gradients::new(self.params.len());

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Leaf(pid) => out.accumulate(*pid, &g),
                Op::EmbedRows { table, rows } => {
                    let shape = self.params.value(*table).shape().to_vec();
                    out.scatter_rows(*table, &shape, rows, &g);
                }
                Op::Matmul(a, b) => {
                    // y = a b:  da = g bT, db = aT g
                    if self.needs(*a) {
                        let bv = &self.nodes[b.0].value;
                        let (m, n, k) = (g.rows(), g.cols(), bv.rows());
                        let mut da = vec![F::zero(); m * k];
                        for r in 0..m {
                            for p in 0..k {
                                let mut s = F::zero();
                                for j in 0..n {
                                    s = s + g.data()[r * n + j] * bv.data()[p * n + j];
                                }
                                da[r * k + p] = s;
                            }
                        }
                        accum(&mut grads[a.0], &self.nodes[a.0].value, m, k, da);
                    }
                    if self.needs(*b) {
                        let av = &self.nodes[a.0].value;
                        let (m, n, k) = (g.rows(), g.cols(), av.cols());
                        let mut db = vec![F::zero(); k * n];
                        for r in 0..m {
                            for p in 0..k {
                                let arp = av.data()[r * k + p];
                                if arp == F::zero() {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] = db[p * n + j] + arp * g.data()[r * n + j];
                                }
                            }
                        }
                        accum(&mut grads[b.0], &self.nodes[b.0].value, k, n, db);
                    }
                }
                Op::MatmulT(a, b) => {
                    // y = a bT: da = g b, db = gT a
                    if self.needs(*a) {
                        let bv = &self.nodes[b.0].value;
                        let (m, n, k) = (g.rows(), g.cols(), bv.cols());
                        let mut da = vec![F::zero(); m * k];
                        for r in 0..m {
                            for j in 0..n {
                                let grj = g.data()[r * n + j];
                                if grj == F::zero() {
                                    continue;
                                }
                                for p in 0..k {
                                    da[r * k + p] = da[r * k + p] + grj * bv.data()[j * k + p];
                                }
                            }
                        }
                        accum(&mut grads[a.0], &self.nodes[a.0].value, m, k, da);
                    }
                    if self.needs(*b) {
                        let av = &self.nodes[a.0].value;
                        let (m, n, k) = (g.rows(), g.cols(), av.cols());
                        let mut db = vec![F::zero(); n * k];
                        for r in 0..m {
                            for j in 0..n {
                                let grj = g.data()[r * n + j];
                                if grj == F::zero() {
                                    continue;
                                }
                                for p in 0..k {
                                    db[j * k + p] = db[j * k + p] + grj * av.data()[r * k + p];
                                }
                            }
                        }
                        accum(&mut grads[b.0], &self.nodes[b.0].value, n, k, db);
                    }
                }
                Op::Add(a, b) => {
                    self.accum_same(&mut grads, *a, g.data(), |x| x);
                    self.accum_same(&mut grads, *b, g.data(), |x| x);
                }
                Op::Sub(a, b) => {
                    self.accum_same(&mut grads, *a, g.data(), |x| x);
                    self.accum_same(&mut grads, *b, g.data(), |x| -x);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let bd = self.nodes[b.0].value.data();
                        let da: Vec<F> =
                            g.data().iter().zip(bd).map(|(&gi, &bi)| gi * bi).collect();
                        self.accum_vec(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let ad = self.nodes[a.0].value.data();
                        let db: Vec<F> =
                            g.data().iter().zip(ad).map(|(&gi, &ai)| gi * ai).collect();
                        self.accum_vec(&mut grads, *b, db);
                    }
                }
                Op::AddRow(x, row) => {
                    self.accum_same(&mut grads, *x, g.data(), |v| v);
                    if self.needs(*row) {
                        let (r, c) = (g.rows(), g.cols());
                        let mut dr = vec![F::zero(); c];
                        for i in 0..r {
                            for j in 0..c {
                                dr[j] = dr[j] + g.data()[i * c + j];
                            }
                        }
                        self.accum_vec(&mut grads, *row, dr);
                    }
                }
                Op::MulScalar(x, s) => {
                    if self.needs(*x) {
                        let k = self.nodes[s.0].value.item();
                        let dx: Vec<F> = g.data().iter().map(|&gi| gi * k).collect();
                        self.accum_vec(&mut grads, *x, dx);
                    }
                    if self.needs(*s) {
                        let xd = self.nodes[x.0].value.data();
                        let mut ds = F::zero();
                        for (&gi, &xi) in g.data().iter().zip(xd) {
                            ds = ds + gi * xi;
                        }
                        self.accum_vec(&mut grads, *s, vec![ds]);
                    }
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    self.accum_same(&mut grads, *x, g.data(), |v| v * k);
                }
                Op::Relu(x) => {
                    if self.needs(*x) {
                        let xd = self.nodes[x.0].value.data();
                        let dx: Vec<F> = g
                            .data()
                            .iter()
                            .zip(xd)
                            .map(|(&gi, &xi)| if xi > F::zero() { gi } else { F::zero() })
                            .collect();
                        self.accum_vec(&mut grads, *x, dx);
                    }
                }
                Op::Sigmoid(x) => {
                    if self.needs(*x) {
                        let yd = self.nodes[i].value.data();
                        let dx: Vec<F> = g
                            .data()
                            .iter()
                            .zip(yd)
                            .map(|(&gi, &yi)| gi * yi * (F::one() - yi))
                            .collect();
                        self.accum_vec(&mut grads, *x, dx);
                    }
                }
                Op::Tanh(x) => {
                    if self.needs(*x) {
                        let yd = self.nodes[i].value.data();
                        let dx: Vec<F> = g
                            .data()
                            .iter()
                            .zip(yd)
                            .map(|(&gi, &yi)| gi * (F::one() - yi * yi))
                            .collect();
                        self.accum_vec(&mut grads, *x, dx);
                    }
                }
                Op::LogClamped(x, floor) => {
                    if self.needs(*x) {
                        let xd = self.nodes[x.0].value.data();
                        let fl = *floor;
                        let dx: Vec<F> = g
                            .data()
                            .iter()
                            .zip(xd)
                            .map(|(&gi, &xi)| if xi >= fl { gi / xi } else { F::zero() })
                            .collect();
                        self.accum_vec(&mut grads, *x, dx);
                    }
                }
                Op::SoftmaxRows(x) => {
                    if self.needs(*x) {
                        let y = &self.nodes[i].value;
                        let (r, c) = (y.rows(), y.cols());
                        let mut dx = vec![F::zero(); r * c];
                        for ri in 0..r {
                            let mut dot = F::zero();
                            for j in 0..c {
                                dot = dot + y.data()[ri * c + j] * g.data()[ri * c + j];
                            }
                            for j in 0..c {
                                let yj = y.data()[ri * c + j];
                                dx[ri * c + j] = yj * (g.data()[ri * c + j] - dot);
                            }
                        }
                        self.accum_vec(&mut grads, *x, dx);
                    }
                }
                Op::Slice { x, r0, c0 } => {
                    if self.needs(*x) {
                        let xv = &self.nodes[x.0].value;
                        let (xr, xc) = (xv.rows(), xv.cols());
                        let (gr, gc) = (g.rows(), g.cols());
                        let mut dx = vec![F::zero(); xr * xc];
                        for ri in 0..gr {
                            for j in 0..gc {
                                dx[(r0 + ri) * xc + (c0 + j)] = g.data()[ri * gc + j];
                            }
                        }
                        self.accum_vec(&mut grads, *x, dx);
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut r0 = 0;
                    for &p in parts {
                        let pr = self.nodes[p.0].value.rows();
                        if self.needs(p) {
                            let dp = g.data()[r0 * c..(r0 + pr) * c].to_vec();
                            self.accum_vec(&mut grads, p, dp);
                        }
                        r0 += pr;
                    }
                }
                Op::ConcatCols(parts) => {
                    let r = g.rows();
                    let gc = g.cols();
                    let mut c0 = 0;
                    for &p in parts {
                        let pc = self.nodes[p.0].value.cols();
                        if self.needs(p) {
                            let mut dp = Vec::with_capacity(r * pc);
                            for ri in 0..r {
                                dp.extend_from_slice(&g.data()[ri * gc + c0..ri * gc + c0 + pc]);
                            }
                            self.accum_vec(&mut grads, p, dp);
                        }
                        c0 += pc;
                    }
                }
                Op::PoolMax { x, arg, .. } => {
                    if self.needs(*x) {
                        let xv = &self.nodes[x.0].value;
                        let (xr, xc) = (xv.rows(), xv.cols());
                        let mut dx = vec![F::zero(); xr * xc];
                        for (j, &ai) in arg.iter().enumerate() {
                            dx[ai * xc + j] = g.data()[j];
                        }
                        self.accum_vec(&mut grads, *x, dx);
                    }
                }
                Op::PoolMean { x, len } => {
                    if self.needs(*x) {
                        let xv = &self.nodes[x.0].value;
                        let (xr, xc) = (xv.rows(), xv.cols());
                        let inv = F::one() / F::from_f64(*len as f64);
                        let mut dx = vec![F::zero(); xr * xc];
                        for ri in 0..*len {
                            for j in 0..xc {
                                dx[ri * xc + j] = g.data()[j] * inv;
                            }
                        }
                        self.accum_vec(&mut grads, *x, dx);
                    }
                }
                Op::Sum(x) => {
                    if self.needs(*x) {
                        let gi = g.item();
                        let n = self.nodes[x.0].value.numel();
                        self.accum_vec(&mut grads, *x, vec![gi; n]);
                    }
                }
                Op::Reshape(x) => {
                    self.accum_same(&mut grads, *x, g.data(), |v| v);
                }
            }
        }
        Ok(out)
    }

    fn accum_same(
        &self,
        grads: &mut [Option<Tensor<F>>],
        target: Var,
        g: &[F],
        f: impl Fn(F) -> F,
    ) {
        if !self.needs(target) {
            return;
        }
        let mapped: Vec<F> = g.iter().map(|&x| f(x)).collect();
        self.accum_vec(grads, target, mapped);
    }

    fn accum_vec(&self, grads: &mut [Option<Tensor<F>>], target: Var, dv: Vec<F>) {
        let shape = self.nodes[target.0].value.shape().to_vec();
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(&dv) {
                    *a = *a + *b;
                }
            }
            None => {
                grads[target.0] = Some(Tensor::new(shape, dv).expect("gradient shape"));
            }
        }
    }
}

fn accum<F: Scalar>(
    slot: &mut Option<Tensor<F>>,
    like: &Tensor<F>,
    rows: usize,
    cols: usize,
    dv: Vec<F>,
) {
    debug_assert_eq!(like.numel(), rows * cols);
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(&dv) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(Tensor::matrix(rows, cols, dv).expect("gradient shape")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng::Rng;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let ps = ParamSet::<f64>::new();
        let mut tape = Tape::new(&ps);
        let i2 = tape.constant(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(2, 2, &[3.5, -1.25, 0.75, 2.0]));
        let y = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(a).data());
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let ps = ParamSet::<f64>::new();
        let mut tape = Tape::new(&ps);
        let a = tape.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(2, 1, &[1.0, 1.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let ps = ParamSet::<f64>::new();
        let mut tape = Tape::new(&ps);
        let z = tape.zeros(3, 2);
        let b = tape.constant(t(2, 4, &[1.0; 8]));
        let y = tape.matmul(z, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let ps = ParamSet::<f64>::new();
        let mut tape = Tape::new(&ps);
        let a = tape.zeros(2, 3);
        let b = tape.zeros(2, 3);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_row() {
        let ps = ParamSet::<f64>::new();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(t(1, 2, &[0.0, 0.0]));
        let y = tape.softmax_rows(x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_scalar_oracle() {
        let ps = ParamSet::<f64>::new();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(t(1, 2, &[1.0, 0.0]));
        let y = tape.softmax_rows(x, None).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.7311).abs() < 1e-4);
        assert!((d[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_masked_cell_is_exactly_zero() {
        let ps = ParamSet::<f64>::new();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(t(1, 2, &[5.0, 9.0]));
        let y = tape.softmax_rows(x, Some(&[true, false])).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_all_invalid_row_is_zero() {
        let ps = ParamSet::<f64>::new();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(t(2, 2, &[5.0, 9.0, 1.0, 2.0]));
        let y = tape
            .softmax_rows(x, Some(&[false, false, true, true]))
            .unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[0..2], &[0.0, 0.0]);
        assert!((d[2] + d[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_stay_in_unit_interval() {
        let mut rng = Rng::new(41);
        let ps = ParamSet::<f64>::new();
        let mut tape = Tape::new(&ps);
        for _ in 0..50 {
            let (r, c) = (1 + rng.below(4), 1 + rng.below(6));
            let data: Vec<f64> = (0..r * c).map(|_| rng.uniform(-8.0, 8.0)).collect();
            let x = tape.constant(Tensor::matrix(r, c, data).unwrap());
            let y = tape.softmax_rows(x, None).unwrap();
            let v = tape.value(y);
            for i in 0..r {
                let row = &v.data()[i * c..(i + 1) * c];
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn pool_singleton() {
        let ps = ParamSet::<f64>::new();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(t(1, 2, &[7.0, 8.0]));
        for mode in [PoolMode::Max, PoolMode::Mean, PoolMode::Last] {
            let y = tape.pool(x, mode, 1).unwrap();
            assert_eq!(tape.value(y).data(), &[7.0, 8.0]);
        }
    }

    #[test]
    fn pool_hand_arithmetic() {
        let ps = ParamSet::<f64>::new();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(t(2, 2, &[1.0, 4.0, 3.0, 2.0]));
        let mx = tape.pool(x, PoolMode::Max, 2).unwrap();
        let mn = tape.pool(x, PoolMode::Mean, 2).unwrap();
        assert_eq!(tape.value(mx).data(), &[3.0, 4.0]);
        assert_eq!(tape.value(mn).data(), &[2.0, 3.0]);
    }

    #[test]
    fn pool_ignores_rows_beyond_length() {
        let ps = ParamSet::<f64>::new();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(t(2, 2, &[1.0, 1.0, 9.0, 9.0]));
        for mode in [PoolMode::Max, PoolMode::Mean, PoolMode::Last] {
            let y = tape.pool(x, mode, 1).unwrap();
            assert_eq!(tape.value(y).data(), &[1.0, 1.0], "{mode:?}");
        }
    }

    #[test]
    fn pool_length_zero_gives_zero_vector() {
        let ps = ParamSet::<f64>::new();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(t(2, 3, &[1.0; 6]));
        for mode in [PoolMode::Max, PoolMode::Mean, PoolMode::Last] {
            let y = tape.pool(x, mode, 0).unwrap();
            assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn pool_length_beyond_rows_is_bounds_error() {
        let ps = ParamSet::<f64>::new();
        let mut tape = Tape::new(&ps);
        let x = tape.zeros(2, 2);
        assert!(tape.pool(x, PoolMode::Max, 3).is_err());
    }

    #[test]
    fn backward_of_squared_weights_is_two_w() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", t(2, 3, &[0.5, -1.0, 2.0, 0.0, 3.0, -0.25]), false);
        let mut tape = Tape::new(&ps);
        let wv = tape.param(w);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(w).unwrap();
        for (gi, wi) in g.data().iter().zip(ps.value(w).data()) {
            assert_eq!(*gi, 2.0 * wi);
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", t(1, 2, &[1.0, 2.0]), false);
        let mut tape = Tape::new(&ps);
        let wv = tape.param(w);
        assert!(tape.backward(wv).is_err());
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut ps = ParamSet::<f64>::new();
        let used = ps.add("used", t(1, 2, &[1.0, 2.0]), false);
        let unused = ps.add("unused", t(1, 2, &[3.0, 4.0]), false);
        let mut tape = Tape::new(&ps);
        let uv = tape.param(used);
        let sq = tape.mul(uv, uv).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.component(unused, 0), 0.0);
    }

    #[test]
    fn fanout_accumulates_additively() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", t(1, 1, &[3.0]), false);
        let mut tape = Tape::new(&ps);
        let wv = tape.param(w);
        let a = tape.add(wv, wv).unwrap(); // 2w
        let loss = tape.sum(a);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.component(w, 0), 2.0);
    }

    #[test]
    fn forward_is_deterministic_for_identical_inputs() {
        let run = || {
            let mut rng = Rng::new(99);
            let mut ps = ParamSet::<f64>::new();
            let data: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let w = ps.add("w", Tensor::matrix(3, 4, data).unwrap(), false);
            let mut tape = Tape::new(&ps);
            let wv = tape.param(w);
            let s = tape.sigmoid(wv);
            let sm = tape.softmax_rows(s, None).unwrap();
            let loss = tape.sum(sm);
            tape.value(loss).item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    /// Builds a one-op graph on fresh params and compares recorded gradients
    /// against central differences, over many random small shapes.
    fn check_op(
        name: &str,
        rng: &mut Rng,
        shapes: &[(usize, usize)],
        lo: f64,
        hi: f64,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    ) {
        let mut ps = ParamSet::<f64>::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let data: Vec<f64> = (0..r * c).map(|_| rng.uniform(lo, hi)).collect();
                ps.add(format!("p{i}"), Tensor::matrix(r, c, data).unwrap(), false)
            })
            .collect();
        let loss_of = |ps: &ParamSet<f64>| {
            let mut tape = Tape::new(ps);
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
            let out = build(&mut tape, &vars);
            let sq = tape.tanh(out);
            let loss = tape.sum(sq);
            tape.value(loss).item()
        };
        let grads = {
            let mut tape = Tape::new(&ps);
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
            let out = build(&mut tape, &vars);
            let sq = tape.tanh(out);
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap()
        };
        let report = gradcheck::check(&mut ps, &grads, 4, 1e-5, 1e-6, 7, |ps| loss_of(ps));
        assert!(
            report.max_rel_err < 1e-4,
            "{name}: max rel err {} (worst tensor {:?})",
            report.max_rel_err,
            report.worst()
        );
    }

    #[test]
    fn gradient_check_every_op_on_random_shapes() {
        let mut rng = Rng::new(2024);
        for round in 0..20 {
            let m = 1 + rng.below(4);
            let k = 1 + rng.below(4);
            let n = 1 + rng.below(4);
            check_op("matmul", &mut rng, &[(m, k), (k, n)], -1.0, 1.0, |t, v| {
                t.matmul(v[0], v[1]).unwrap()
            });
            check_op("matmul_t", &mut rng, &[(m, k), (n, k)], -1.0, 1.0, |t, v| {
                t.matmul_t(v[0], v[1]).unwrap()
            });
            check_op("add", &mut rng, &[(m, n), (m, n)], -1.0, 1.0, |t, v| {
                t.add(v[0], v[1]).unwrap()
            });
            check_op("sub", &mut rng, &[(m, n), (m, n)], -1.0, 1.0, |t, v| {
                t.sub(v[0], v[1]).unwrap()
            });
            check_op("mul", &mut rng, &[(m, n), (m, n)], -1.0, 1.0, |t, v| {
                t.mul(v[0], v[1]).unwrap()
            });
            check_op("add_row", &mut rng, &[(m, n), (1, n)], -1.0, 1.0, |t, v| {
                t.add_row(v[0], v[1]).unwrap()
            });
            check_op(
                "mul_scalar",
                &mut rng,
                &[(m, n), (1, 1)],
                -1.0,
                1.0,
                |t, v| t.mul_scalar(v[0], v[1]).unwrap(),
            );
            check_op("scale", &mut rng, &[(m, n)], -1.0, 1.0, |t, v| {
                t.scale(v[0], -1.75)
            });
            // keep relu inputs away from the kink at zero
            check_op("relu_pos", &mut rng, &[(m, n)], 0.05, 1.0, |t, v| t.relu(v[0]));
            check_op("relu_neg", &mut rng, &[(m, n)], -1.0, -0.05, |t, v| t.relu(v[0]));
            check_op("sigmoid", &mut rng, &[(m, n)], -2.0, 2.0, |t, v| {
                t.sigmoid(v[0])
            });
            check_op("tanh", &mut rng, &[(m, n)], -2.0, 2.0, |t, v| t.tanh(v[0]));
            check_op("log_clamped", &mut rng, &[(m, n)], 0.05, 2.0, |t, v| {
                t.log_clamped(v[0], 1e-12)
            });
            check_op("softmax_rows", &mut rng, &[(m, n)], -2.0, 2.0, |t, v| {
                t.softmax_rows(v[0], None).unwrap()
            });
            if n >= 2 {
                let mask: Vec<bool> = (0..m * n).map(|i| i % n != 1).collect();
                let mask2 = mask.clone();
                check_op(
                    "softmax_rows_masked",
                    &mut rng,
                    &[(m, n)],
                    -2.0,
                    2.0,
                    move |t, v| t.softmax_rows(v[0], Some(&mask2)).unwrap(),
                );
                let _ = mask;
            }
            check_op("slice", &mut rng, &[(m + 1, n + 1)], -1.0, 1.0, |t, v| {
                t.slice(v[0], 1, m + 1, 0, n).unwrap()
            });
            check_op(
                "concat_rows",
                &mut rng,
                &[(m, n), (k, n)],
                -1.0,
                1.0,
                |t, v| t.concat_rows(&[v[0], v[1]]).unwrap(),
            );
            check_op(
                "concat_cols",
                &mut rng,
                &[(m, n), (m, k)],
                -1.0,
                1.0,
                |t, v| t.concat_cols(&[v[0], v[1]]).unwrap(),
            );
            check_op("pool_max", &mut rng, &[(m + 1, n)], -1.0, 1.0, |t, v| {
                t.pool_max(v[0], m).unwrap()
            });
            check_op("pool_mean", &mut rng, &[(m + 1, n)], -1.0, 1.0, |t, v| {
                t.pool_mean(v[0], m).unwrap()
            });
            check_op("reshape", &mut rng, &[(m, n)], -1.0, 1.0, |t, v| {
                t.reshape(v[0], n, m).unwrap()
            });
            check_op("sum_fanout", &mut rng, &[(m, n)], -1.0, 1.0, |t, v| {
                let a = t.mul(v[0], v[0]).unwrap();
                let b = t.add(a, v[0]).unwrap();
                let s = t.sum(b);
                let s2 = t.mul(s, s).unwrap();
                s2
            });
            // embedding gather with repeated rows exercises scatter-add
            if round < 5 {
                let vocab = 4 + rng.below(4);
                let dim = 1 + rng.below(4);
                let rows: Vec<usize> = (0..6).map(|_| rng.below(vocab)).collect();
                let rows2 = rows.clone();
                check_op(
                    "embed",
                    &mut rng,
                    &[(vocab, dim)],
                    -1.0,
                    1.0,
                    move |t, v| {
                        let id = match t.nodes[v[0].0].op {
                            Op::Leaf(pid) => pid,
                            _ => unreachable!(),
                        };
                        t.embed(id, &rows2).unwrap()
                    },
                );
                let _ = rows;
            }
        }
    }
}
