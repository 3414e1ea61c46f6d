//! Finite-difference verification of every backward implementation, in f64.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use terradiff_autograd::check::{numeric_grad, rel_err};
use terradiff_autograd::{ParamStore, Tape, Var};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn randu(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let mut a = ArrayD::<f64>::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = rng.random::<f64>() * 2.0 - 1.0;
    }
    a
}

/// Checks d(loss)/d(param) for every element of every registered parameter,
/// where `f` builds the graph from leaves inserted for each parameter.
fn check_all<F>(store: &mut ParamStore<f64>, f: F)
where
    F: Fn(&Tape<f64>, &[Var]) -> Var,
{
    let loss_of = |s: &ParamStore<f64>| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = s.iter().map(|(id, _)| tape.param(s, id)).collect();
        let loss = f(&tape, &vars);
        tape.scalar(loss)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = store.iter().map(|(id, _)| tape.param(store, id)).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss);

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).len();
        let analytic: Vec<f64> = {
            let g = grads
                .of_param(id)
                .unwrap_or_else(|| panic!("no grad for {}", store.name(id)));
            g.iter().copied().collect()
        };
        for flat in 0..n {
            let num = numeric_grad(store, id, flat, EPS, &loss_of);
            let err = rel_err(analytic[flat], num);
            assert!(
                err < TOL,
                "param {} elem {}: analytic {} vs numeric {} (rel err {})",
                store.name(id),
                flat,
                analytic[flat],
                num,
                err
            );
        }
    }
}

fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        store.add(*name, randu(shape, &mut rng));
    }
    store
}

#[test]
fn elementwise_ops() {
    let mut store = store_with(&[("a", &[3, 4]), ("b", &[3, 4])], 1);
    check_all(&mut store, |t, v| {
        let s = t.add(v[0], v[1]);
        let d = t.sub(s, v[1]);
        let m = t.mul(d, v[1]);
        let sc = t.scale(m, 0.7);
        t.mean_all(sc)
    });
}

#[test]
fn activations() {
    let mut store = store_with(&[("a", &[2, 5])], 2);
    check_all(&mut store, |t, v| {
        let s = t.silu(v[0]);
        let h = t.tanh(s);
        t.mean_all(h)
    });
}

#[test]
fn softmax() {
    let mut store = store_with(&[("a", &[2, 3, 4])], 3);
    check_all(&mut store, |t, v| {
        let y = t.softmax_last(v[0]);
        let sq = t.mul(y, y);
        t.mean_all(sq)
    });
}

#[test]
fn bias_and_broadcast() {
    let mut store = store_with(
        &[("x", &[2, 3, 2, 2]), ("b", &[3]), ("s", &[2, 3]), ("v", &[2, 4])],
        4,
    );
    check_all(&mut store, |t, v| {
        let y = t.add_bias_ch(v[0], v[1]);
        let y = t.add_per_sample_ch(y, v[2]);
        let m = t.mean_all(y);
        let b = t.broadcast_spatial(v[3], 2, 3);
        let mb = t.mean_all(b);
        let r = t.repeat_new_axis(v[3], 1, 3);
        let mr = t.mean_all(r);
        let s1 = t.add(m, mb);
        let sq = t.mul(s1, mr);
        t.mean_all(sq)
    });
}

#[test]
fn structural_ops() {
    let mut store = store_with(&[("a", &[2, 3, 4]), ("b", &[2, 3, 4])], 5);
    check_all(&mut store, |t, v| {
        let c = t.concat(1, &[v[0], v[1]]);
        let r = t.reshape(c, &[2, 24]);
        let p = t.permute(r, &[1, 0]);
        let s = t.sum_axis(p, 1);
        let m = t.mean_axis(v[1], 2);
        let m2 = t.reshape(m, &[6]);
        let s2 = t.mul(s, t.concat(0, &[m2, m2, m2, m2]));
        t.mean_all(s2)
    });
}

#[test]
fn matmul_family() {
    let mut store = store_with(
        &[
            ("a", &[3, 4]),
            ("b", &[4, 2]),
            ("ba", &[2, 3, 4]),
            ("bb", &[2, 4, 5]),
            ("bc", &[2, 5, 4]),
            ("w", &[6, 4]),
            ("bias", &[6]),
        ],
        6,
    );
    check_all(&mut store, |t, v| {
        let mm = t.matmul(v[0], v[1]);
        let l1 = t.mean_all(mm);
        let bm = t.bmm(v[2], v[3]);
        let l2 = t.mean_all(bm);
        let bn = t.bmm_nt(v[2], v[4]);
        let l3 = t.mean_all(bn);
        let lin = t.linear(v[0], v[5], v[6]);
        let l4 = t.mean_all(lin);
        let s = t.add(l1, l2);
        let s = t.add(s, l3);
        let s = t.add(s, l4);
        t.mul(s, s)
    });
}

#[test]
fn conv2d_stride1_pad1() {
    let mut store = store_with(&[("x", &[2, 3, 5, 5]), ("w", &[4, 3, 3, 3]), ("b", &[4])], 7);
    check_all(&mut store, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 1, 1);
        let y = t.silu(y);
        t.mean_all(y)
    });
}

#[test]
fn conv2d_stride2() {
    let mut store = store_with(&[("x", &[1, 2, 6, 6]), ("w", &[3, 2, 3, 3]), ("b", &[3])], 8);
    check_all(&mut store, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], 2, 1);
        t.mean_all(t.mul(y, y))
    });
}

#[test]
fn temporal_conv_k3() {
    let mut store = store_with(&[("x", &[2, 4, 3, 2, 2]), ("w", &[5, 3, 3]), ("b", &[5])], 9);
    check_all(&mut store, |t, v| {
        let y = t.temporal_conv(v[0], v[1], v[2]);
        t.mean_all(t.mul(y, y))
    });
}

#[test]
fn temporal_conv_k1() {
    let mut store = store_with(&[("x", &[1, 3, 2, 2, 2]), ("w", &[2, 2, 1]), ("b", &[2])], 10);
    check_all(&mut store, |t, v| {
        let y = t.temporal_conv(v[0], v[1], v[2]);
        t.mean_all(t.mul(y, y))
    });
}

#[test]
fn upsample() {
    let mut store = store_with(&[("x", &[2, 3, 3, 3])], 11);
    check_all(&mut store, |t, v| {
        let y = t.upsample_nearest_2x(v[0]);
        t.mean_all(t.mul(y, y))
    });
}

#[test]
fn norms() {
    let mut store = store_with(
        &[
            ("x", &[2, 4, 3, 3]),
            ("g", &[4]),
            ("b", &[4]),
            ("lx", &[2, 3, 5]),
            ("lg", &[5]),
            ("lb", &[5]),
        ],
        12,
    );
    check_all(&mut store, |t, v| {
        let y = t.group_norm(v[0], v[1], v[2], 2, 1e-5);
        let l1 = t.mean_all(t.mul(y, y));
        let z = t.layer_norm(v[3], v[4], v[5], 1e-5);
        let l2 = t.mean_all(t.mul(z, z));
        t.add(l1, l2)
    });
}

#[test]
fn embedding_lookup() {
    let mut store = store_with(&[("table", &[7, 3])], 13);
    let ids = ndarray::array![[0usize, 3, 3], [6, 1, 0]];
    check_all(&mut store, move |t, v| {
        let e = t.embedding(v[0], &ids);
        t.mean_all(t.mul(e, e))
    });
}

#[test]
fn losses() {
    let mut store = store_with(&[("p", &[3, 4]), ("q", &[3, 4]), ("mu", &[2, 3]), ("lv", &[2, 3])], 14);
    check_all(&mut store, |t, v| {
        let l1 = t.mse(v[0], v[1]);
        let l2 = t.kl_standard_normal(v[2], v[3]);
        t.add(l1, l2)
    });
}

#[test]
fn scalar_gate_and_consts() {
    let mut store = store_with(&[("x", &[2, 3]), ("a", &[1])], 15);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let c = randu(&[2, 3], &mut rng);
    let m = randu(&[2, 1], &mut rng);
    check_all(&mut store, move |t, v| {
        let y = t.mul_scalar_var(v[0], v[1]);
        let y = t.add_const(y, &c);
        let y = t.mul_const(y, &m);
        t.mean_all(t.mul(y, y))
    });
}

#[test]
fn param_reuse_accumulates() {
    // the same parameter used twice must receive the sum of both paths
    let mut store = store_with(&[("x", &[2, 2])], 16);
    check_all(&mut store, |t, v| {
        let y = t.mul(v[0], v[0]);
        let z = t.add(y, v[0]);
        t.mean_all(z)
    });
}

#[test]
fn determinism_bitwise() {
    let store = store_with(&[("x", &[4, 8, 8, 8]), ("w", &[8, 8, 3, 3]), ("b", &[8])], 17);
    let run = || -> (Vec<f64>, Vec<f64>) {
        let t = Tape::new();
        let vars: Vec<Var> = store.iter().map(|(id, _)| t.param(&store, id)).collect();
        let y = t.conv2d(vars[0], vars[1], vars[2], 1, 1);
        let y = t.silu(y);
        let loss = t.mean_all(t.mul(y, y));
        let g = t.backward(loss);
        (
            t.value(y).iter().copied().collect(),
            g.of_param(store.iter().next().unwrap().0)
                .unwrap()
                .iter()
                .copied()
                .collect(),
        )
    };
    let (y1, g1) = run();
    let (y2, g2) = run();
    assert!(y1.iter().zip(&y2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn exp_op() {
    let mut store = store_with(&[("a", &[2, 3])], 18);
    check_all(&mut store, |t, v| {
        let y = t.exp(v[0]);
        t.mean_all(t.mul(y, y))
    });
}
