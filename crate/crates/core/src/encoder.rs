//! Attentive interest encoder: window embeddings, multi-scale dilated
//! convolution features and self-attention across a user's windows.

use rand::Rng;

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::numerics::{sdpa, ParamId, ParamStore, Tape, Tensor, Var};

/// Item and user embedding tables held in a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTables {
    /// `(|I| + 1) x d`; row [`PAD`] stays zero.
    pub item: ParamId,
    /// `|U| x d`.
    pub user: ParamId,
    pub d: usize,
}

/// Tensor of i.i.d. draws from `U(-bound, bound)`.
pub fn uniform_tensor<R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

pub fn init_embeddings<R: Rng + ?Sized>(
    store: &mut ParamStore,
    items: usize,
    users: usize,
    d: usize,
    rng: &mut R,
) -> Result<EmbeddingTables> {
    if d == 0 {
        return Err(Error::InvalidArgument("embedding width must be >= 1".into()));
    }
    let bound = 1.0 / (d as f64).sqrt();
    let mut item_table = uniform_tensor(vec![items + 1, d], bound, rng);
    item_table.data_mut()[PAD * d..(PAD + 1) * d].fill(0.0);
    let user_table = uniform_tensor(vec![users, d], bound, rng);
    Ok(EmbeddingTables {
        item: store.insert("enc.item_table", item_table)?,
        user: store.insert("enc.user_table", user_table)?,
        d,
    })
}

/// The `L x d` "image" of a window: row `t` is the embedding of `items[t]`.
pub fn stack_embeddings(tape: &mut Tape<'_>, tables: &EmbeddingTables, items: &[usize]) -> Result<Var> {
    let table = tape.param(tables.item);
    tape.gather(table, items)
}

/// Number of kernels at dilation gap `s` for window length `l`.
pub fn kernel_plan(l: usize, s: usize) -> usize {
    (l + s) / (s + 1)
}

/// Receptive field of a kernel of `h` taps at gap `s`.
pub fn coverage(h: usize, s: usize) -> usize {
    (h - 1) * (s + 1) + 1
}

#[derive(Debug, Clone)]
pub struct KernelGroup {
    pub gap: usize,
    /// Kernel `i` has `i + 1` taps and shape `[i + 1, d, n_f]`.
    pub kernels: Vec<ParamId>,
}

#[derive(Debug, Clone)]
pub struct KernelBank {
    pub groups: Vec<KernelGroup>,
    pub window: usize,
    pub n_f: usize,
}

impl KernelBank {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        window: usize,
        d: usize,
        n_f: usize,
        gaps: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut groups = Vec::with_capacity(gaps.len());
        for &s in gaps {
            let n_s = kernel_plan(window, s);
            let mut kernels = Vec::with_capacity(n_s);
            for h in 1..=n_s {
                let bound = 1.0 / ((h * d) as f64).sqrt();
                let k = uniform_tensor(vec![h, d, n_f], bound, rng);
                kernels.push(store.insert(format!("enc.k.s{s}.h{h}"), k)?);
            }
            groups.push(KernelGroup { gap: s, kernels });
        }
        Ok(Self { groups, window, n_f })
    }

    pub fn feature_width(&self) -> usize {
        self.groups.len() * self.n_f
    }
}

/// Interest feature of one window: per kernel, dilated convolution then
/// max-pooling over time; kernels of one gap are averaged and the group
/// averages concatenated. Returns a `1 x (groups * n_f)` row.
pub fn multiscale_features(tape: &mut Tape<'_>, p: Var, bank: &KernelBank) -> Result<Var> {
    if tape.value(p).rows() != bank.window {
        return Err(Error::dim(
            "multiscale_features",
            format!("window of {} rows, bank built for {}", tape.value(p).rows(), bank.window),
        ));
    }
    let mut parts = Vec::with_capacity(bank.groups.len());
    for group in &bank.groups {
        let mut pooled = Vec::with_capacity(group.kernels.len());
        for id in &group.kernels {
            let k = tape.param(*id);
            let conv = tape.dilated_conv(p, k, group.gap)?;
            pooled.push(tape.max_rows(conv)?);
        }
        let stacked = tape.concat_rows(&pooled)?;
        parts.push(tape.mean_rows(stacked)?);
    }
    tape.concat_cols(&parts)
}

/// Projections of the cross-window self-attention.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Multi-head self-attention over the rows of `f_set`. Head outputs are
/// concatenated, so the output width is that of `w_v`.
pub fn self_attend(tape: &mut Tape<'_>, f_set: Var, w: AttentionWeights, heads: usize) -> Result<Var> {
    let width = tape.value(w.w_v).cols();
    let key_width = tape.value(w.w_q).cols();
    if heads == 0 || width % heads != 0 || key_width % heads != 0 {
        return Err(Error::dim("self_attend", format!("{heads} heads do not divide {width}")));
    }
    let q = tape.matmul(f_set, w.w_q)?;
    let k = tape.matmul(f_set, w.w_k)?;
    let v = tape.matmul(f_set, w.w_v)?;
    if heads == 1 {
        return Ok(sdpa(tape, q, k, v)?.output);
    }
    let (kh, vh) = (key_width / heads, width / heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * kh, kh)?;
        let kh_ = tape.slice_cols(k, h * kh, kh)?;
        let vh_ = tape.slice_cols(v, h * vh, vh)?;
        outs.push(sdpa(tape, qh, kh_, vh_)?.output);
    }
    tape.concat_cols(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_plan_examples() {
        assert_eq!(kernel_plan(5, 0), 5);
        assert_eq!(kernel_plan(5, 1), 3);
        assert_eq!(kernel_plan(5, 2), 2);
    }

    #[test]
    fn every_planned_kernel_fits() {
        for l in 1..=20 {
            for s in 0..=2 {
                for h in 1..=kernel_plan(l, s) {
                    assert!(coverage(h, s) <= l, "L={l} s={s} h={h}");
                }
                assert!(coverage(kernel_plan(l, s) + 1, s) > l);
            }
        }
    }

    #[test]
    fn embeddings_are_bounded_and_padded() {
        let mut store = ParamStore::new();
        let t = init_embeddings(&mut store, 10, 4, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let items = store.value(t.item);
        assert_eq!(items.shape(), &[11, 64]);
        assert_eq!(items.row_slice(PAD).iter().map(|x| x.abs()).sum::<f64>(), 0.0);
        assert!(items.data().iter().all(|x| x.abs() <= 0.125));

        let mut again = ParamStore::new();
        init_embeddings(&mut again, 10, 4, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(again.value(t.item), items);
        assert_eq!(again.value(t.user), store.value(t.user));
    }

    #[test]
    fn stack_of_pads_is_zero() {
        let mut store = ParamStore::new();
        let t = init_embeddings(&mut store, 5, 1, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut tape = Tape::with_params(&store);
        let p = stack_embeddings(&mut tape, &t, &[0, 0, 0]).unwrap();
        assert!(tape.value(p).data().iter().all(|x| *x == 0.0));
        let one = stack_embeddings(&mut tape, &t, &[4]).unwrap();
        assert_eq!(tape.value(one).data(), store.value(t.item).row_slice(4));
        assert!(matches!(stack_embeddings(&mut tape, &t, &[6]), Err(Error::Catalog(_))));
    }

    #[test]
    fn single_row_attention_is_value_projection() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        let w = AttentionWeights {
            w_q: tape.leaf(Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap()),
            w_k: tape.leaf(Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap()),
            w_v: tape.leaf(Tensor::matrix(2, 1, vec![0.5, -1.0]).unwrap()),
        };
        let r = self_attend(&mut tape, f, w, 1).unwrap();
        assert_eq!(tape.value(r).data(), &[-1.5]);
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let row = uniform_tensor(vec![1, 4], 1.0, &mut rng).into_data();
        let f = tape.leaf(Tensor::matrix(3, 4, row.repeat(3)).unwrap());
        let w = AttentionWeights {
            w_q: tape.leaf(uniform_tensor(vec![4, 4], 1.0, &mut rng)),
            w_k: tape.leaf(uniform_tensor(vec![4, 4], 1.0, &mut rng)),
            w_v: tape.leaf(uniform_tensor(vec![4, 4], 1.0, &mut rng)),
        };
        let r = self_attend(&mut tape, f, w, 2).unwrap();
        let out = tape.value(r);
        for i in 1..3 {
            assert_eq!(out.row_slice(i), out.row_slice(0));
        }
    }

    #[test]
    fn zero_window_gives_zero_features() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bank = KernelBank::init(&mut store, 5, 3, 4, &[0, 1, 2], &mut rng).unwrap();
        assert_eq!(bank.feature_width(), 12);
        let mut tape = Tape::with_params(&store);
        let p = tape.leaf(Tensor::zeros(vec![5, 3]));
        let f = multiscale_features(&mut tape, p, &bank).unwrap();
        assert_eq!(tape.value(f).shape(), &[1, 12]);
        assert!(tape.value(f).data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn undilated_bank_has_one_group() {
        let mut store = ParamStore::new();
        let bank = KernelBank::init(&mut store, 5, 2, 3, &[0], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(bank.feature_width(), 3);
        assert_eq!(store.len(), 5);
    }
}
