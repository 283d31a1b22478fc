//! Differentiable kernels shared by the model: a reverse-mode tape,
//! attention, dilated convolution, a two-layer perceptron, Sinkhorn transport
//! and a finite-difference gradient checker.

mod params;
pub mod sinkhorn;
mod tape;
mod tensor;

pub use params::{Param, ParamGrads, ParamId, ParamStore};
pub use sinkhorn::{sinkhorn, SinkhornOutput};
pub use tape::{Gradients, Tape, Var, BCE_CLIP};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Output of [`sdpa`]: the attended values and the attention distribution.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

/// Scaled dot-product attention `softmax(Q Kᵀ / sqrt(d)) V`.
pub fn sdpa(tape: &mut Tape<'_>, q: Var, k: Var, v: Var) -> Result<Attention> {
    let d = tape.value(q).cols();
    if d == 0 {
        return Err(Error::dim("sdpa", "key width must be >= 1"));
    }
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::dim(
            "sdpa",
            format!(
                "{} keys vs {} values",
                tape.value(k).rows(),
                tape.value(v).rows()
            ),
        ));
    }
    let logits = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    let output = tape.matmul(weights, v)?;
    Ok(Attention { output, weights })
}

/// `relu(x W_h + b_h) W_o + b_o` for row-vector inputs.
pub fn mlp2(tape: &mut Tape<'_>, x: Var, w_h: Var, b_h: Var, w_o: Var, b_o: Var) -> Result<Var> {
    let h = tape.matmul(x, w_h)?;
    let h = tape.add_row(h, b_h)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w_o)?;
    tape.add_row(o, b_o)
}

/// Maximum relative error between the tape gradient of a scalar function and
/// central differences with step `eps`, measured as
/// `|analytic - numeric| / max(1, |analytic|)` over every input coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[which].len()]);
        if analytic.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("grad_check", "non-finite analytic gradient"));
        }
        for (i, a) in analytic.iter().enumerate() {
            let orig = inputs[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::row(v.to_vec())
    }

    #[test]
    fn sdpa_single_key_returns_value() {
        let mut t = Tape::new();
        let q = t.leaf(row(&[0.3, -2.0]));
        let k = t.leaf(row(&[1.0, 5.0]));
        let v = t.leaf(row(&[4.0, 2.0, 9.0]));
        let att = sdpa(&mut t, q, k, v).unwrap();
        assert_eq!(t.value(att.output).data(), &[4.0, 2.0, 9.0]);
    }

    #[test]
    fn sdpa_hand_case() {
        // weights e/(e+1/e) = 0.880797, value 2 * 0.880797 = 1.761594
        let mut t = Tape::new();
        let q = t.leaf(row(&[1.0]));
        let k = t.leaf(Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap());
        let v = t.leaf(Tensor::matrix(2, 1, vec![2.0, 0.0]).unwrap());
        let att = sdpa(&mut t, q, k, v).unwrap();
        let w = t.value(att.weights).data();
        assert!((w[0] - 0.880797).abs() < 1e-6 && (w[1] - 0.119203).abs() < 1e-6);
        assert!((t.scalar(att.output) - 1.761594).abs() < 1e-6);
    }

    #[test]
    fn sdpa_zero_query_is_column_mean() {
        let mut t = Tape::new();
        let q = t.leaf(row(&[0.0, 0.0]));
        let k = t.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, -3.0, 0.5, 7.0, 1.0]).unwrap());
        let v = t.leaf(Tensor::matrix(3, 1, vec![1.0, 2.0, 6.0]).unwrap());
        let att = sdpa(&mut t, q, k, v).unwrap();
        assert!((t.scalar(att.output) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sdpa_rejects_mismatch() {
        let mut t = Tape::new();
        let q = t.leaf(row(&[1.0, 0.0]));
        let k = t.leaf(row(&[1.0]));
        let v = t.leaf(row(&[1.0]));
        assert!(matches!(sdpa(&mut t, q, k, v), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mlp2_scalar_cases() {
        for (x, expected) in [(3.0, 7.0), (-1.0, 1.0)] {
            let mut t = Tape::new();
            let xv = t.leaf(row(&[x]));
            let wh = t.leaf(row(&[1.0]));
            let bh = t.leaf(row(&[0.0]));
            let wo = t.leaf(row(&[2.0]));
            let bo = t.leaf(row(&[1.0]));
            let y = mlp2(&mut t, xv, wh, bh, wo, bo).unwrap();
            assert_eq!(t.scalar(y), expected);
        }
    }

    #[test]
    fn mlp2_zero_params() {
        let mut t = Tape::new();
        let x = t.leaf(row(&[1.0, -2.0]));
        let wh = t.leaf(Tensor::zeros(vec![2, 3]));
        let bh = t.leaf(Tensor::zeros(vec![1, 3]));
        let wo = t.leaf(Tensor::zeros(vec![3, 2]));
        let bo = t.leaf(Tensor::zeros(vec![1, 2]));
        let y = mlp2(&mut t, x, wh, bh, wo, bo).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn dilated_conv_hand_cases() {
        let p = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let mut t = Tape::new();
        let pv = t.leaf(p);
        let kv = t.leaf(k);
        let plain = t.dilated_conv(pv, kv, 0).unwrap();
        assert_eq!(t.value(plain).data(), &[3.0, 5.0]);
        let dilated = t.dilated_conv(pv, kv, 1).unwrap();
        assert_eq!(t.value(dilated).data(), &[4.0]);
        assert!(matches!(t.dilated_conv(pv, kv, 2), Err(Error::Dimension { .. })));
    }

    #[test]
    fn dilated_conv_unit_kernel_projects() {
        let p = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let k = Tensor::new(vec![1, 3, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let mut t = Tape::new();
        let (pv, kv) = (t.leaf(p), t.leaf(k));
        let out = t.dilated_conv(pv, kv, 0).unwrap();
        assert_eq!(t.value(out).data(), &[1.0, 4.0]);
    }

    #[test]
    fn grad_check_affine_is_exact() {
        let err = grad_check(
            |t, v| {
                let s = t.scale(v[0], 3.0);
                let s = t.add_scalar(s, 1.0);
                Ok(t.sum(s))
            },
            &[row(&[0.5, -1.5, 2.0])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
