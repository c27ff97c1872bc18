use autograd::{grad_check, Graph, ParamId, ParamStore, Result, Tensor, Var};
use proptest::prelude::*;

/// Deterministic pseudo-random fill in [-1, 1).
fn fill(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn check<F>(store: &ParamStore, ids: &[ParamId], f: F)
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let report = grad_check(f, store, ids, 1e-4).unwrap();
    assert!(report.passed, "{:?}", report.worst);
}

/// Weighted sum so that every output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let w = g.constant(fill(g.shape(x), seed))?;
    let p = g.mul(x, w)?;
    g.sum(p)
}

#[test]
fn matmul_and_bias() {
    let mut s = ParamStore::new();
    let a = s.insert("a", fill(&[3, 4], 1)).unwrap();
    let b = s.insert("b", fill(&[4, 2], 2)).unwrap();
    let c = s.insert("c", fill(&[2], 3)).unwrap();
    check(&s, &[a, b, c], |g, s| {
        let (av, bv, cv) = (g.param(s, a), g.param(s, b), g.param(s, c));
        let y = g.matmul(av, bv)?;
        let y = g.add_bias(y, cv)?;
        weighted_sum(g, y, 9)
    });
}

#[test]
fn batch_matmul_both_layouts() {
    let mut s = ParamStore::new();
    let a = s.insert("a", fill(&[2, 3, 4], 4)).unwrap();
    let b = s.insert("b", fill(&[2, 4, 5], 5)).unwrap();
    let bt = s.insert("bt", fill(&[2, 5, 4], 6)).unwrap();
    check(&s, &[a, b, bt], |g, s| {
        let (av, bv, btv) = (g.param(s, a), g.param(s, b), g.param(s, bt));
        let y1 = g.batch_matmul(av, bv, false)?;
        let y2 = g.batch_matmul(av, btv, true)?;
        let l1 = weighted_sum(g, y1, 10)?;
        let l2 = weighted_sum(g, y2, 11)?;
        g.add(l1, l2)
    });
}

#[test]
fn elementwise_and_activations() {
    let mut s = ParamStore::new();
    let a = s.insert("a", fill(&[6], 7)).unwrap();
    let b = s.insert("b", fill(&[6], 8)).unwrap();
    check(&s, &[a, b], |g, s| {
        let (av, bv) = (g.param(s, a), g.param(s, b));
        let x = g.mul(av, bv)?;
        let x = g.sub(x, bv)?;
        let x = g.add(x, av)?;
        let x = g.scale(x, 1.7)?;
        let l = g.leaky_relu(x, 0.01)?;
        let sg = g.sigmoid(x)?;
        let ls = g.log_sigmoid(x)?;
        let y = g.add(l, sg)?;
        let y = g.add(y, ls)?;
        let m = g.mean(y)?;
        let w = weighted_sum(g, y, 12)?;
        g.add(m, w)
    });
}

#[test]
fn softmax_rows_and_nll() {
    let mut s = ParamStore::new();
    let a = s.insert("a", fill(&[3, 4], 13)).unwrap();
    check(&s, &[a], |g, s| {
        let av = g.param(s, a);
        let p = g.softmax(av)?;
        let nll = g.nll(p, &[0, 3, 1])?;
        let w = weighted_sum(g, p, 14)?;
        g.add(nll, w)
    });
}

#[test]
fn row_ops_gather_slice_concat_reshape() {
    let mut s = ParamStore::new();
    let t = s.insert("t", fill(&[5, 3], 15)).unwrap();
    let v = s.insert("v", fill(&[4], 16)).unwrap();
    check(&s, &[t, v], |g, s| {
        let (tv, vv) = (g.param(s, t), g.param(s, v));
        let rows = g.gather_rows(tv, &[4, 0, 4, 2])?;
        let sl = g.slice_rows(tv, 1, 5)?;
        let dot = g.row_dot(rows, sl)?;
        let sq = g.sum_sq_rows(rows)?;
        let scaled = g.mul_rows(sl, vv)?;
        let cat = g.concat(&[rows, scaled], 1)?;
        let flat = g.reshape(cat, &[24])?;
        let picked = g.gather_elems(flat, &[0, 5, 5, 23])?;
        let a = weighted_sum(g, dot, 17)?;
        let b = weighted_sum(g, sq, 18)?;
        let c = weighted_sum(g, flat, 19)?;
        let d = weighted_sum(g, picked, 20)?;
        let ab = g.add(a, b)?;
        let cd = g.add(c, d)?;
        g.add(ab, cd)
    });
}

#[test]
fn unfold_and_involution() {
    let mut s = ParamStore::new();
    let x = s.insert("x", fill(&[2, 5, 3], 21)).unwrap();
    let k = s.insert("k", fill(&[10, 3 * 2], 22)).unwrap();
    check(&s, &[x, k], |g, s| {
        let (xv, kv) = (g.param(s, x), g.param(s, k));
        let win = g.unfold1d(xv, 3)?;
        let out = g.involution(kv, win, 3, 2)?;
        weighted_sum(g, out, 23)
    });
}

#[test]
fn bce_on_sigmoid() {
    let mut s = ParamStore::new();
    let a = s.insert("a", fill(&[6], 24)).unwrap();
    check(&s, &[a], |g, s| {
        let av = g.param(s, a);
        let p = g.sigmoid(av)?;
        g.bce(p, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0])
    });
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut base = ParamStore::new();
    let w = base.insert("w", fill(&[3, 3], 25)).unwrap();
    let x = fill(&[2, 3], 26);
    let f = |g: &mut Graph, v: Var| -> Result<Var> {
        let xv = g.constant(x.clone())?;
        let y = g.matmul(xv, v)?;
        let y = g.leaky_relu(y, 0.01)?;
        weighted_sum(g, y, 27)
    };
    let h = |g: &mut Graph, v: Var| -> Result<Var> {
        let p = g.softmax(v)?;
        weighted_sum(g, p, 28)
    };

    let grad_of = |which: u8| {
        let mut s = base.clone();
        let mut g = Graph::new();
        let v = g.param(&s, w);
        let loss = match which {
            0 => f(&mut g, v).unwrap(),
            1 => h(&mut g, v).unwrap(),
            _ => {
                let a = f(&mut g, v).unwrap();
                let b = h(&mut g, v).unwrap();
                g.add(a, b).unwrap()
            }
        };
        g.backward(loss, &mut s).unwrap();
        s.grad(w).clone()
    };
    let (gf, gh, gsum) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..gsum.len() {
        assert!((gsum.data()[i] - gf.data()[i] - gh.data()[i]).abs() < 1e-14);
    }
}

proptest! {
    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        row in prop::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(row.clone())).unwrap();
        let shifted = g.constant(Tensor::vector(row.iter().map(|v| v + shift).collect())).unwrap();
        let p = g.softmax(x).unwrap();
        let q = g.softmax(shifted).unwrap();
        let sum: f64 = g.value(p).data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        for (a, b) in g.value(p).data().iter().zip(g.value(q).data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
