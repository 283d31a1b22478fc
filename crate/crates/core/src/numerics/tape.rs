//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! as borrowed leaves of a [`ParamStore`], so building a tape never copies
//! the embedding tables; their gradients land in a [`ParamGrads`] buffer.

use crate::error::{Error, Result};
use crate::numerics::sinkhorn::sinkhorn;
use crate::numerics::{ParamGrads, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    SqrtPos(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    RepeatRows(Var),
    Gather(Var, Vec<usize>),
    DilatedConv { input: Var, kernel: Var, taps: usize, gap: usize },
    MaxRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    Bce(Var, Vec<f64>),
    Mae(Var, Vec<f64>),
    W2Gauss([Var; 4]),
    KlGauss([Var; 4]),
    SqDist(Var, Var),
    Transport(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
}

/// Probability clip applied before the logarithms of the BCE loss.
pub const BCE_CLIP: f64 = 1e-7;

pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, y) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    }
    out
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .params
                .expect("param leaf without store")
                .value(*id),
        }
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_row(&mut self, data: Vec<f64>) -> Var {
        self.leaf(Tensor::row(data))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.params.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// `a · b` for `a: m x k`, `b: k x n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = av[i * k..(i + 1) * k]
                    .iter()
                    .zip(&bv[j * k..(j + 1) * k])
                    .map(|(x, y)| x * y)
                    .sum();
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b)))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::dim(name, format!("{da:?} vs {db:?}")));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(self.push(Tensor::matrix(da.0, da.1, out)?, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the `1 x n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let ((m, n), (br, bc)) = (self.dims(a), self.dims(bias));
        if br != 1 || bc != n {
            return Err(Error::dim("add_row", format!("{m}x{n} + {br}x{bc}")));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(&bv).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRow(a, bias)))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (m, n) = self.dims(a);
        let out = self.value(a).data().iter().map(|x| f(*x)).collect();
        self.push(Tensor::matrix(m, n, out).expect("shape preserved"), op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, logistic, Op::Sigmoid(a))
    }

    /// Elementwise `sqrt(max(x, 0))`.
    pub fn sqrt_pos(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0).sqrt(), Op::SqrtPos(a))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient passes only where the
    /// input lies inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        self.push(Tensor::matrix(m, n, out).expect("shape preserved"), Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.dims(*p).0)
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        if let Some(bad) = parts.iter().find(|p| self.dims(**p).0 != rows) {
            return Err(Error::dim(
                "concat_cols",
                format!("row count {} vs {rows}", self.dims(*bad).0),
            ));
        }
        let total: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        Ok(self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| self.dims(*p).1)
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        if let Some(bad) = parts.iter().find(|p| self.dims(**p).1 != cols) {
            return Err(Error::dim(
                "concat_rows",
                format!("column count {} vs {cols}", self.dims(*bad).1),
            ));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            rows += self.dims(*p).0;
            out.extend_from_slice(self.value(*p).data());
        }
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > n {
            return Err(Error::dim("slice_cols", format!("{start}+{len} > {n}")));
        }
        let t = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(m, len, out)?, Op::SliceCols(a, start)))
    }

    /// Stacks `times` copies of the `1 x n` row `a`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m != 1 {
            return Err(Error::dim("repeat_rows", format!("expected one row, got {m}")));
        }
        let row = self.value(a).data().to_vec();
        let out = row.iter().copied().cycle().take(n * times).collect();
        Ok(self.push(Tensor::matrix(times, n, out)?, Op::RepeatRows(a)))
    }

    /// Rows `indices` of `table`, in order.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(table);
        if let Some(bad) = indices.iter().find(|i| **i >= m) {
            return Err(Error::Catalog(format!("row {bad} out of range for table of {m}")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * n);
        for i in indices {
            out.extend_from_slice(t.row_slice(*i));
        }
        Ok(self.push(
            Tensor::matrix(indices.len(), n, out)?,
            Op::Gather(table, indices.to_vec()),
        ))
    }

    /// Dilated temporal convolution of `input: L x d` with a kernel of
    /// `taps` rows per channel, stored as `(taps*d) x c`. Consecutive taps are
    /// `gap + 1` positions apart; output has `L - (taps-1)(gap+1)` rows.
    pub fn dilated_conv(&mut self, input: Var, kernel: Var, gap: usize) -> Result<Var> {
        let ((len, d), (kr, c)) = (self.dims(input), self.dims(kernel));
        if d == 0 || kr % d != 0 || kr == 0 {
            return Err(Error::dim(
                "dilated_conv",
                format!("kernel rows {kr} not a positive multiple of width {d}"),
            ));
        }
        let taps = kr / d;
        let coverage = (taps - 1) * (gap + 1) + 1;
        if coverage > len {
            return Err(Error::dim(
                "dilated_conv",
                format!("coverage {coverage} exceeds length {len}"),
            ));
        }
        let steps = len - coverage + 1;
        let (p, k) = (self.value(input).data(), self.value(kernel).data());
        let mut out = vec![0.0; steps * c];
        for t in 0..steps {
            let o = &mut out[t * c..(t + 1) * c];
            for a in 0..taps {
                let src = &p[(t + a * (gap + 1)) * d..(t + a * (gap + 1) + 1) * d];
                for (e, x) in src.iter().enumerate() {
                    if *x == 0.0 {
                        continue;
                    }
                    let krow = &k[(a * d + e) * c..(a * d + e + 1) * c];
                    o.iter_mut().zip(krow).for_each(|(o, w)| *o += x * w);
                }
            }
        }
        Ok(self.push(
            Tensor::matrix(steps, c, out)?,
            Op::DilatedConv {
                input,
                kernel,
                taps,
                gap,
            },
        ))
    }

    /// Column-wise maximum over rows, `m x n -> 1 x n`.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m == 0 {
            return Err(Error::dim("max_rows", "no rows"));
        }
        let t = self.value(a);
        let mut arg = vec![0usize; n];
        let mut best = t.row_slice(0).to_vec();
        for r in 1..m {
            for (j, x) in t.row_slice(r).iter().enumerate() {
                if *x > best[j] {
                    best[j] = *x;
                    arg[j] = r;
                }
            }
        }
        Ok(self.push(Tensor::row(best), Op::MaxRows(a, arg)))
    }

    /// Column-wise mean over rows, `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m == 0 {
            return Err(Error::dim("mean_rows", "no rows"));
        }
        let t = self.value(a);
        let mut out = vec![0.0; n];
        for r in 0..m {
            out.iter_mut().zip(t.row_slice(r)).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        Ok(self.push(Tensor::row(out), Op::MeanRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`,
    /// with `p` clipped to `[BCE_CLIP, 1 - BCE_CLIP]`.
    pub fn bce(&mut self, p: Var, target: Vec<f64>) -> Result<Var> {
        let pv = self.value(p).data();
        if pv.is_empty() || pv.len() != target.len() {
            return Err(Error::dim(
                "bce",
                format!("{} predictions vs {} targets", pv.len(), target.len()),
            ));
        }
        let n = pv.len() as f64;
        let loss = pv
            .iter()
            .zip(&target)
            .map(|(p, y)| {
                let q = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::Bce(p, target)))
    }

    /// Mean absolute error of `p` against `target`.
    pub fn mae(&mut self, p: Var, target: Vec<f64>) -> Result<Var> {
        let pv = self.value(p).data();
        if pv.is_empty() || pv.len() != target.len() {
            return Err(Error::dim(
                "mae",
                format!("{} predictions vs {} targets", pv.len(), target.len()),
            ));
        }
        let n = pv.len() as f64;
        let loss = pv.iter().zip(&target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mae(p, target)))
    }

    fn gauss_args(&self, name: &'static str, args: [Var; 4]) -> Result<usize> {
        let n = self.value(args[0]).len();
        if args.iter().any(|a| self.value(*a).len() != n) {
            return Err(Error::dim(name, "mean/scale vectors differ in length"));
        }
        if [args[1], args[3]]
            .iter()
            .any(|s| self.value(*s).data().iter().any(|x| *x <= 0.0))
        {
            return Err(Error::numeric(name, "non-positive scale"));
        }
        Ok(n)
    }

    /// Closed-form 2-Wasserstein distance between two diagonal Gaussians,
    /// `sqrt(|mu_t - mu_c|^2 + |sigma_t - sigma_c|^2)`.
    pub fn w2_gauss(&mut self, mu_t: Var, s_t: Var, mu_c: Var, s_c: Var) -> Result<Var> {
        let args = [mu_t, s_t, mu_c, s_c];
        self.gauss_args("w2_gauss", args)?;
        let sq = |a: Var, b: Var| -> f64 {
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum()
        };
        let d = (sq(mu_t, mu_c) + sq(s_t, s_c)).sqrt();
        Ok(self.push(Tensor::scalar(d), Op::W2Gauss(args)))
    }

    /// `KL(N(mu_t, sigma_t^2) || N(mu_c, sigma_c^2))` for diagonal Gaussians.
    pub fn kl_gauss(&mut self, mu_t: Var, s_t: Var, mu_c: Var, s_c: Var) -> Result<Var> {
        let args = [mu_t, s_t, mu_c, s_c];
        let n = self.gauss_args("kl_gauss", args)?;
        let v = |x: Var| self.value(x).data();
        let (mt, st, mc, sc) = (v(mu_t), v(s_t), v(mu_c), v(s_c));
        let kl = (0..n)
            .map(|i| {
                let dm = mt[i] - mc[i];
                (sc[i] / st[i]).ln() + (st[i] * st[i] + dm * dm) / (2.0 * sc[i] * sc[i]) - 0.5
            })
            .sum();
        Ok(self.push(Tensor::scalar(kl), Op::KlGauss(args)))
    }

    /// Pairwise squared Euclidean distances between the rows of `x` and `y`.
    pub fn sq_dist(&mut self, x: Var, y: Var) -> Result<Var> {
        let ((n, d), (m, d2)) = (self.dims(x), self.dims(y));
        if d != d2 {
            return Err(Error::dim("sq_dist", format!("widths {d} vs {d2}")));
        }
        let (xv, yv) = (self.value(x), self.value(y));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xi = xv.row_slice(i);
            for j in 0..m {
                out[i * m + j] = xi
                    .iter()
                    .zip(yv.row_slice(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::SqDist(x, y)))
    }

    /// Entropic transport objective `<T*, C> + lambda KL(T* || a b^T)` between
    /// uniform weights on the rows and columns of `cost`. Its gradient with
    /// respect to the cost is the optimal plan.
    pub fn transport_cost(&mut self, cost: Var, lambda: f64, iters: usize) -> Result<Var> {
        let (m, n) = self.dims(cost);
        let a = vec![1.0 / m as f64; m];
        let b = vec![1.0 / n as f64; n];
        let out = sinkhorn(&a, &b, self.value(cost), lambda, iters)?;
        Ok(self.push(Tensor::scalar(out.objective), Op::Transport(cost, out.plan)))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::dim("backward", "output must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        let mut param_grads: Vec<(ParamId, Vec<f64>)> = Vec::new();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric("backward", format!("non-finite gradient at node {idx}")));
            }
            self.propagate(idx, &g, &mut grads, &mut param_grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params: param_grads,
        })
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut Vec<(ParamId, Vec<f64>)>,
    ) -> Result<()> {
        let out = self.value(Var(idx));
        let (m, n) = (out.rows(), out.cols());
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = self.value(v).len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Param(id) => params.push((*id, g.to_vec())),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = self.value(*a).cols();
                acc(grads, *a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += (0..n).map(|j| g[i * n + j] * bv[p * n + j]).sum::<f64>();
                        }
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let row = &mut gb[p * n..(p + 1) * n];
                            row.iter_mut().zip(&g[i * n..(i + 1) * n]).for_each(|(o, gv)| *o += x * gv);
                        }
                    }
                });
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = self.value(*a).cols();
                acc(grads, *a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for p in 0..k {
                                ga[i * k + p] += gv * bv[j * k + p];
                            }
                        }
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for p in 0..k {
                                gb[j * k + p] += gv * av[i * k + p];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(grads, *a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(grads, *b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(grads, *b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc(grads, *a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(grads, *bias, &mut |gb| {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(grads, *a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x));
            }
            Op::AddScalar(a) => {
                acc(grads, *a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(grads, *a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                acc(grads, *a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::SqrtPos(a) => {
                let y = out.data();
                acc(grads, *a, &mut |ga| {
                    for i in 0..ga.len() {
                        if y[i] > 0.0 {
                            ga[i] += g[i] * 0.5 / y[i];
                        }
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).data();
                acc(grads, *a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] >= *lo && av[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = out.data();
                acc(grads, *a, &mut |ga| {
                    for r in 0..m {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(grads, *p, &mut |gp| {
                        for r in 0..m {
                            let src = &g[r * n + offset..r * n + offset + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(o, x)| *o += x);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    let src = &g[offset..offset + len];
                    acc(grads, *p, &mut |gp| gp.iter_mut().zip(src).for_each(|(o, x)| *o += x));
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let w = self.value(*a).cols();
                acc(grads, *a, &mut |ga| {
                    for r in 0..m {
                        let dst = &mut ga[r * w + start..r * w + start + n];
                        dst.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::RepeatRows(a) => {
                acc(grads, *a, &mut |ga| {
                    for row in g.chunks(n) {
                        ga.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::Gather(table, indices) => {
                acc(grads, *table, &mut |gt| {
                    for (r, i) in indices.iter().enumerate() {
                        let dst = &mut gt[i * n..(i + 1) * n];
                        dst.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::DilatedConv {
                input,
                kernel,
                taps,
                gap,
            } => {
                let d = self.value(*input).cols();
                let (p, k) = (self.value(*input).data(), self.value(*kernel).data());
                let c = n;
                acc(grads, *input, &mut |gp| {
                    for t in 0..m {
                        let gt = &g[t * c..(t + 1) * c];
                        for a in 0..*taps {
                            let row = t + a * (gap + 1);
                            for e in 0..d {
                                let krow = &k[(a * d + e) * c..(a * d + e + 1) * c];
                                gp[row * d + e] += krow.iter().zip(gt).map(|(w, x)| w * x).sum::<f64>();
                            }
                        }
                    }
                });
                acc(grads, *kernel, &mut |gk| {
                    for t in 0..m {
                        let gt = &g[t * c..(t + 1) * c];
                        for a in 0..*taps {
                            let row = t + a * (gap + 1);
                            for e in 0..d {
                                let x = p[row * d + e];
                                if x == 0.0 {
                                    continue;
                                }
                                let dst = &mut gk[(a * d + e) * c..(a * d + e + 1) * c];
                                dst.iter_mut().zip(gt).for_each(|(o, gv)| *o += x * gv);
                            }
                        }
                    }
                });
            }
            Op::MaxRows(a, arg) => {
                acc(grads, *a, &mut |ga| {
                    for (j, r) in arg.iter().enumerate() {
                        ga[r * n + j] += g[j];
                    }
                });
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                acc(grads, *a, &mut |ga| {
                    for row in ga.chunks_mut(n) {
                        row.iter_mut().zip(g).for_each(|(o, x)| *o += x / rows as f64);
                    }
                });
            }
            Op::Sum(a) => {
                acc(grads, *a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Bce(p, target) => {
                let pv = self.value(*p).data();
                let len = pv.len() as f64;
                acc(grads, *p, &mut |gp| {
                    for i in 0..gp.len() {
                        let q = pv[i];
                        if q <= BCE_CLIP || q >= 1.0 - BCE_CLIP {
                            continue;
                        }
                        let y = target[i];
                        gp[i] += g[0] * (-(y / q) + (1.0 - y) / (1.0 - q)) / len;
                    }
                });
            }
            Op::Mae(p, target) => {
                let pv = self.value(*p).data();
                let len = pv.len() as f64;
                acc(grads, *p, &mut |gp| {
                    for i in 0..gp.len() {
                        let diff = pv[i] - target[i];
                        let s = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gp[i] += g[0] * s / len;
                    }
                });
            }
            Op::W2Gauss([mu_t, s_t, mu_c, s_c]) => {
                let dist = out.data()[0];
                if dist > 0.0 {
                    for (x, y) in [(*mu_t, *mu_c), (*s_t, *s_c)] {
                        let diff: Vec<f64> = self
                            .value(x)
                            .data()
                            .iter()
                            .zip(self.value(y).data())
                            .map(|(a, b)| g[0] * (a - b) / dist)
                            .collect();
                        acc(grads, x, &mut |gx| gx.iter_mut().zip(&diff).for_each(|(o, d)| *o += d));
                        acc(grads, y, &mut |gy| gy.iter_mut().zip(&diff).for_each(|(o, d)| *o -= d));
                    }
                }
            }
            Op::KlGauss([mu_t, s_t, mu_c, s_c]) => {
                let v = |x: &Var| self.value(*x).data();
                let (mt, st, mc, sc) = (v(mu_t), v(s_t), v(mu_c), v(s_c));
                let k = mt.len();
                let dm: Vec<f64> = (0..k).map(|i| (mt[i] - mc[i]) / (sc[i] * sc[i])).collect();
                acc(grads, *mu_t, &mut |o| (0..k).for_each(|i| o[i] += g[0] * dm[i]));
                acc(grads, *mu_c, &mut |o| (0..k).for_each(|i| o[i] -= g[0] * dm[i]));
                acc(grads, *s_t, &mut |o| {
                    (0..k).for_each(|i| o[i] += g[0] * (-1.0 / st[i] + st[i] / (sc[i] * sc[i])))
                });
                acc(grads, *s_c, &mut |o| {
                    (0..k).for_each(|i| {
                        let d = mt[i] - mc[i];
                        o[i] += g[0] * (1.0 / sc[i] - (st[i] * st[i] + d * d) / sc[i].powi(3))
                    })
                });
            }
            Op::SqDist(x, y) => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                let d = xv.cols();
                acc(grads, *x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            let w = 2.0 * g[i * n + j];
                            for e in 0..d {
                                gx[i * d + e] += w * (xv.get(i, e) - yv.get(j, e));
                            }
                        }
                    }
                });
                acc(grads, *y, &mut |gy| {
                    for i in 0..m {
                        for j in 0..n {
                            let w = 2.0 * g[i * n + j];
                            for e in 0..d {
                                gy[j * d + e] -= w * (xv.get(i, e) - yv.get(j, e));
                            }
                        }
                    }
                });
            }
            Op::Transport(cost, plan) => {
                acc(grads, *cost, &mut |gc| gc.iter_mut().zip(plan).for_each(|(o, t)| *o += g[0] * t));
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient into `into`.
    pub fn accumulate(&self, into: &mut ParamGrads) {
        for (id, g) in &self.params {
            into.get_mut(*id).iter_mut().zip(g).for_each(|(o, x)| *o += x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_values_and_shape_errors() {
        let mut t = Tape::new();
        let a = t.leaf(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = t.leaf(m(2, 1, &[1.0, -1.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[-1.0, -1.0]);
        assert!(matches!(t.matmul(b, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let a = t.leaf(m(2, 3, &[1000.0, 0.0, -1000.0, 0.1, 0.2, 0.3]));
        let s = t.softmax_rows(a);
        for r in 0..2 {
            let sum: f64 = t.value(s).row_slice(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn param_gradients_route_to_store() {
        let mut store = ParamStore::new();
        let w = store.insert("w", m(1, 2, &[2.0, 3.0])).unwrap();
        let mut t = Tape::with_params(&store);
        let wv = t.param(w);
        let x = t.leaf(m(2, 1, &[5.0, 7.0]));
        let y = t.matmul(wv, x).unwrap();
        let grads = t.backward(y).unwrap();
        let mut pg = store.zero_grads();
        grads.accumulate(&mut pg);
        assert_eq!(pg.get(w), &[5.0, 7.0]);
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut t = Tape::new();
        let table = t.leaf(m(2, 2, &[0.0; 4]));
        assert!(matches!(t.gather(table, &[2]), Err(Error::Catalog(_))));
    }

    #[test]
    fn bce_clip_floor() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::row(vec![1.0, 0.0]));
        let l = t.bce(p, vec![1.0, 0.0]).unwrap();
        let expected = -(1.0 - BCE_CLIP).ln();
        assert!((t.scalar(l) - expected).abs() < 1e-15);
    }
}
