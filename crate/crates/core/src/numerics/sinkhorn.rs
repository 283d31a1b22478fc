//! Entropic optimal transport by Sinkhorn-Knopp matrix scaling.
//!
//! The solver keeps dual potentials `f`, `g` in the log domain and runs the
//! scaling iterations on an absorbed kernel `exp((f_i + g_j - C_ij) / lambda)`.
//! Whenever a scaling vector drifts more than `e^ABSORB_LOG` away from one it
//! is folded back into the potentials and the kernel is rebuilt, so
//! `exp(-C/lambda)` never has to be formed directly and cannot underflow to an
//! all-zero row.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const ABSORB_LOG: f64 = 30.0;
/// Marginal L1 residual above which the result carries a warning.
pub const RESIDUAL_WARN: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct SinkhornOutput {
    /// `<plan, cost>`.
    pub cost: f64,
    /// Regularized objective `<plan, cost> + lambda * KL(plan || a b^T)`;
    /// its gradient with respect to the cost is the plan.
    pub objective: f64,
    /// Row-major `m x n` transport plan.
    pub plan: Vec<f64>,
    /// Sum of absolute row and column marginal errors.
    pub residual: f64,
    pub warning: Option<String>,
}

fn check_weights(name: &str, w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sinkhorn: `{name}` must be nonnegative and finite"
        )));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "sinkhorn: `{name}` sums to {s}, expected 1"
        )));
    }
    Ok(())
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|x| (x - m).exp()).sum::<f64>().ln()
}

struct Solver<'a> {
    a: &'a [f64],
    b: &'a [f64],
    c: &'a [f64],
    m: usize,
    n: usize,
    lambda: f64,
    f: Vec<f64>,
    g: Vec<f64>,
    kernel: Vec<f64>,
}

impl Solver<'_> {
    /// One exact log-domain row and column update of the potentials.
    fn log_step(&mut self) {
        let (m, n, lam) = (self.m, self.n, self.lambda);
        for i in 0..m {
            let row = &self.c[i * n..(i + 1) * n];
            let lse = log_sum_exp(self.g.iter().zip(row).map(|(g, c)| (g - c) / lam));
            self.f[i] = if self.a[i] > 0.0 {
                lam * (self.a[i].ln() - lse)
            } else {
                f64::NEG_INFINITY
            };
        }
        for j in 0..n {
            let lse = log_sum_exp((0..m).map(|i| (self.f[i] - self.c[i * n + j]) / lam));
            self.g[j] = if self.b[j] > 0.0 {
                lam * (self.b[j].ln() - lse)
            } else {
                f64::NEG_INFINITY
            };
        }
    }

    fn rebuild_kernel(&mut self) {
        let (n, lam) = (self.n, self.lambda);
        for i in 0..self.m {
            let fi = self.f[i];
            let row = &self.c[i * n..(i + 1) * n];
            let out = &mut self.kernel[i * n..(i + 1) * n];
            for ((k, c), g) in out.iter_mut().zip(row).zip(&self.g) {
                let e = (fi + g - c) / lam;
                *k = if e.is_nan() { 0.0 } else { e.exp() };
            }
        }
    }

    fn absorb(&mut self, u: &mut [f64], v: &mut [f64]) {
        for (f, u) in self.f.iter_mut().zip(u.iter_mut()) {
            if *u > 0.0 && u.is_finite() {
                *f += self.lambda * u.ln();
            }
            *u = 1.0;
        }
        for (g, v) in self.g.iter_mut().zip(v.iter_mut()) {
            if *v > 0.0 && v.is_finite() {
                *g += self.lambda * v.ln();
            }
            *v = 1.0;
        }
    }
}

fn scale_into(target: &[f64], denom: &[f64], out: &mut [f64]) -> bool {
    let mut healthy = true;
    for ((o, t), d) in out.iter_mut().zip(target).zip(denom) {
        if *t == 0.0 {
            *o = 0.0;
        } else {
            *o = t / d;
            if !o.is_finite() || o.ln().abs() > ABSORB_LOG {
                healthy = false;
            }
        }
    }
    healthy
}

/// Entropic transport cost `<T, C>` after `iters` row/column scalings.
pub fn sinkhorn(
    a: &[f64],
    b: &[f64],
    cost: &Tensor,
    lambda: f64,
    iters: usize,
) -> Result<SinkhornOutput> {
    let (m, n) = (a.len(), b.len());
    if cost.rows() != m || cost.cols() != n {
        return Err(Error::dim(
            "sinkhorn",
            format!("cost is {}x{}, weights are {m} and {n}", cost.rows(), cost.cols()),
        ));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sinkhorn: lambda must be positive, got {lambda}"
        )));
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("sinkhorn: iters must be >= 1".into()));
    }
    check_weights("a", a)?;
    check_weights("b", b)?;
    if !cost.is_finite() {
        return Err(Error::numeric("sinkhorn", "non-finite cost entries"));
    }

    let mut s = Solver {
        a,
        b,
        c: cost.data(),
        m,
        n,
        lambda,
        f: vec![0.0; m],
        g: vec![0.0; n],
        kernel: vec![0.0; m * n],
    };
    s.log_step();
    s.rebuild_kernel();

    let mut u = vec![1.0; m];
    let mut v = vec![1.0; n];
    let mut kv = vec![0.0; m];
    let mut ktu = vec![0.0; n];
    for _ in 1..iters {
        for (i, out) in kv.iter_mut().enumerate() {
            let row = &s.kernel[i * n..(i + 1) * n];
            *out = row.iter().zip(&v).map(|(k, v)| k * v).sum();
        }
        let rows_ok = scale_into(a, &kv, &mut u);
        if !rows_ok {
            // The log step recomputes both potentials exactly from `g`.
            s.absorb(&mut u, &mut v);
            s.log_step();
            s.rebuild_kernel();
            continue;
        }
        ktu.fill(0.0);
        for i in 0..m {
            let ui = u[i];
            if ui == 0.0 {
                continue;
            }
            let row = &s.kernel[i * n..(i + 1) * n];
            for (acc, k) in ktu.iter_mut().zip(row) {
                *acc += k * ui;
            }
        }
        let cols_ok = scale_into(b, &ktu, &mut v);
        if !cols_ok {
            s.absorb(&mut u, &mut v);
            s.log_step();
            s.rebuild_kernel();
        }
    }

    let mut plan = vec![0.0; m * n];
    let mut total = 0.0;
    let mut kl = 0.0;
    let mut row_err = vec![0.0; m];
    let mut col_sum = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            let t = u[i] * s.kernel[i * n + j] * v[j];
            plan[i * n + j] = t;
            total += t * s.c[i * n + j];
            if t > 0.0 {
                kl += t * (t / (a[i] * b[j])).ln();
            }
            row_err[i] += t;
            col_sum[j] += t;
        }
    }
    let residual = row_err.iter().zip(a).map(|(r, a)| (r - a).abs()).sum::<f64>()
        + col_sum.iter().zip(b).map(|(c, b)| (c - b).abs()).sum::<f64>();
    if !total.is_finite() {
        return Err(Error::numeric("sinkhorn", "transport cost is not finite"));
    }
    let warning = (residual > RESIDUAL_WARN).then(|| {
        format!("marginal residual {residual:.3e} after {iters} iterations (lambda {lambda})")
    });
    Ok(SinkhornOutput {
        cost: total,
        objective: total + lambda * kl,
        plan,
        residual,
        warning,
    })
}
