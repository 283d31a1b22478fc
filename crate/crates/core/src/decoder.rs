//! Interest decoder: fuses the deterministic context, the latent sample and
//! the query feature, then scores every item.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{Tape, Var};

/// `relu([parts...] W_d + b_d)`; `parts` are concatenated column-wise and
/// must share a row count.
pub fn reconstruct(tape: &mut Tape<'_>, parts: &[Var], w_d: Var, b_d: Var) -> Result<Var> {
    let x = tape.concat_cols(parts)?;
    let h = tape.matmul(x, w_d)?;
    let h = tape.add_row(h, b_d)?;
    Ok(tape.relu(h))
}

/// Item probabilities `sigmoid([d_q, e_u] W_p + b_p)`; one row per query.
pub fn predict_preferences(tape: &mut Tape<'_>, d_q: Var, e_u: Var, w_p: Var, b_p: Var) -> Result<Var> {
    let rows = tape.value(d_q).rows();
    let e = if tape.value(e_u).rows() == rows {
        e_u
    } else {
        tape.repeat_rows(e_u, rows)?
    };
    let x = tape.concat_cols(&[d_q, e])?;
    let logits = tape.matmul(x, w_p)?;
    let logits = tape.add_row(logits, b_p)?;
    Ok(tape.sigmoid(logits))
}

/// Scores over the catalog for one query. `y[c]` belongs to item `c + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceVector {
    pub y: Vec<f64>,
    pub user: Option<usize>,
    /// Start position of the query window in the user's sequence.
    pub query_start: usize,
}

impl PreferenceVector {
    pub fn score(&self, item: usize) -> Option<f64> {
        item.checked_sub(1).and_then(|c| self.y.get(c).copied())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopK {
    /// Item indices, best first.
    pub items: Vec<usize>,
    /// Set when fewer than the requested number of items were available.
    pub warning: Option<String>,
}

/// Best `k` items by score, skipping `exclude`; ties go to the lower index.
pub fn top_k(y: &[f64], k: usize, exclude: &[usize]) -> TopK {
    let mut order: Vec<usize> = (1..=y.len()).filter(|i| !exclude.contains(i)).collect();
    let warning = (k > order.len()).then(|| {
        format!("requested top {k} but only {} candidates remain", order.len())
    });
    let take = k.min(order.len());
    let cmp = |a: &usize, b: &usize| y[*b - 1].total_cmp(&y[*a - 1]).then(a.cmp(b));
    if take < order.len() && take > 0 {
        order.select_nth_unstable_by(take - 1, cmp);
        order.truncate(take);
    }
    order.sort_by(cmp);
    order.truncate(take);
    TopK { items: order, warning }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn zero_everything_reconstructs_zero() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::row(vec![0.0; 2]));
        let b = t.leaf(Tensor::row(vec![0.0; 3]));
        let w = t.leaf(Tensor::zeros(vec![5, 4]));
        let bias = t.leaf(Tensor::zeros(vec![1, 4]));
        let d = reconstruct(&mut t, &[a, b], w, bias).unwrap();
        assert_eq!(t.value(d).data(), &[0.0; 4]);
    }

    #[test]
    fn negative_preactivation_clamps() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::row(vec![1.0]));
        let w = t.leaf(Tensor::row(vec![-2.0, 3.0]));
        let bias = t.leaf(Tensor::row(vec![0.5, 0.0]));
        let d = reconstruct(&mut t, &[a], w, bias).unwrap();
        assert_eq!(t.value(d).data(), &[0.0, 3.0]);
    }

    #[test]
    fn hand_scored_catalog() {
        let mut t = Tape::new();
        let d_q = t.leaf(Tensor::row(vec![1.0]));
        let e_u = t.leaf(Tensor::row(vec![-1.0]));
        let w = t.leaf(Tensor::matrix(2, 3, vec![1.0, 0.0, 2.0, 1.0, 1.0, 0.0]).unwrap());
        let b = t.leaf(Tensor::row(vec![0.0, 0.5, -1.0]));
        let y = predict_preferences(&mut t, d_q, e_u, w, b).unwrap();
        let logistic = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect = [logistic(0.0), logistic(-0.5), logistic(1.0)];
        for (a, e) in t.value(y).data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weights_score_one_half() {
        let mut t = Tape::new();
        let d_q = t.leaf(Tensor::matrix(2, 2, vec![3.0, -1.0, 0.2, 8.0]).unwrap());
        let e_u = t.leaf(Tensor::row(vec![1.0, 1.0]));
        let w = t.leaf(Tensor::zeros(vec![4, 5]));
        let b = t.leaf(Tensor::zeros(vec![1, 5]));
        let y = predict_preferences(&mut t, d_q, e_u, w, b).unwrap();
        assert_eq!(t.value(y).shape(), &[2, 5]);
        assert!(t.value(y).data().iter().all(|p| *p == 0.5));
    }

    #[test]
    fn top_k_orders_and_breaks_ties() {
        let mut y = vec![0.1; 10];
        y[6] = 0.9;
        assert_eq!(top_k(&y, 3, &[]).items, vec![7, 1, 2]);
        assert_eq!(top_k(&[0.5; 6], 4, &[]).items, vec![1, 2, 3, 4]);
        assert_eq!(top_k(&y, 3, &[7, 1]).items, vec![2, 3, 4]);
    }

    #[test]
    fn top_k_clamps_with_warning() {
        let r = top_k(&[0.2, 0.4, 0.3], 5, &[2]);
        assert_eq!(r.items, vec![3, 1]);
        assert!(r.warning.is_some());
        assert!(top_k(&[0.2, 0.4], 2, &[]).warning.is_none());
    }
}
