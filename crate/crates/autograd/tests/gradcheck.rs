//! Every op against central finite differences.

use autograd::{GradBuffer, Graph, ParamId, ParamStore, Tensor, Var};
use proptest::prelude::*;

fn lcg_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(rows, cols, |_, _| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

/// Checks d(build)/d(param) for every parameter in `store` against central differences.
fn check(store: &ParamStore, build: &dyn Fn(&mut Graph<'_>, &[Var]) -> Var) {
    let eps = 1e-5;
    let analytic = {
        let mut g = Graph::new(Some(store));
        let vars: Vec<Var> = store.ids().map(|id| g.param(store, id)).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let mut buf = GradBuffer::new(store);
        grads.accumulate_into(&g, &mut buf);
        buf
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::inference();
        let vars: Vec<Var> = s.ids().map(|id| g.param(s, id)).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };
    for id in store.ids() {
        let n = store.get(id).len();
        for k in 0..n {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[k] += eps;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[k] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "param {} [{k}]: analytic {a} numeric {numeric}", store.name(id));
        }
    }
}

fn store_of(shapes: &[(usize, usize)], seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, &(r, c)) in shapes.iter().enumerate() {
        s.add(format!("p{i}"), lcg_tensor(r, c, seed + i as u64));
    }
    s
}

/// Reduces a tensor to a scalar with non-uniform weights so every entry matters.
fn weighted_sum(g: &mut Graph<'_>, v: Var) -> Var {
    let (r, c) = g.shape(v);
    let w = g.constant(Tensor::from_fn(r, c, |i, j| 0.3 + 0.17 * i as f64 - 0.11 * j as f64));
    let m = g.mul(v, w);
    g.sum(m)
}

#[test]
fn matmul_and_transposed_matmul() {
    let s = store_of(&[(3, 4), (4, 2), (5, 4)], 1);
    check(&s, &|g, p| {
        let ab = g.matmul(p[0], p[1]);
        let act = g.matmul_t(p[0], p[2]);
        let l1 = weighted_sum(g, ab);
        let l2 = weighted_sum(g, act);
        g.add(l1, l2)
    });
}

#[test]
fn elementwise_ops() {
    let s = store_of(&[(2, 3), (2, 3)], 2);
    check(&s, &|g, p| {
        let a = g.add(p[0], p[1]);
        let b = g.sub(a, p[1]);
        let c = g.mul(b, p[1]);
        let d = g.scale(c, -1.7);
        let e = g.tanh(d);
        let f = g.sigmoid(e);
        let h = g.gelu(f);
        let i = g.relu(p[0]);
        let x = g.add(h, i);
        weighted_sum(g, x)
    });
}

#[test]
fn row_broadcasts() {
    let s = store_of(&[(3, 4), (1, 4), (1, 4)], 3);
    check(&s, &|g, p| {
        let a = g.mul_row(p[0], p[1]);
        let b = g.add_row(a, p[2]);
        weighted_sum(g, b)
    });
}

#[test]
fn softmax_log_softmax_layer_norm() {
    let s = store_of(&[(3, 5)], 4);
    check(&s, &|g, p| {
        let a = g.softmax(p[0]);
        let b = g.log_softmax(p[0]);
        let c = g.layer_norm(p[0], 1e-5);
        let ab = g.add(a, b);
        let abc = g.add(ab, c);
        weighted_sum(g, abc)
    });
}

#[test]
fn gather_concat_slice() {
    let s = store_of(&[(6, 3), (2, 3), (2, 2)], 5);
    check(&s, &|g, p| {
        let rows = g.gather(p[0], &[4, 1, 4, 0]);
        let cat = g.concat_rows(&[rows, p[1]]);
        let top = g.slice_rows(cat, 1, 3);
        let left = g.slice_cols(p[1], 1, 2);
        let wide = g.concat_cols(&[left, p[2]]);
        let l1 = weighted_sum(g, top);
        let l2 = weighted_sum(g, wide);
        g.add(l1, l2)
    });
}

#[test]
fn reductions_and_pick() {
    let s = store_of(&[(4, 3)], 6);
    check(&s, &|g, p| {
        let m = g.mean_rows(p[0]);
        let mx = g.max_rows(p[0]);
        let pk = g.pick(p[0], &[(0, 1), (3, 2), (0, 1)]);
        let l1 = weighted_sum(g, m);
        let l2 = weighted_sum(g, mx);
        let l3 = weighted_sum(g, pk);
        let l = g.add(l1, l2);
        g.add(l, l3)
    });
}

#[test]
fn straight_through_routes_gradient_to_soft_input() {
    let mut store = ParamStore::new();
    let id = store.add("logits", Tensor::row_vector(vec![0.2, 1.5, -0.3]));
    let mut g = Graph::new(Some(&store));
    let logits = g.param(&store, id);
    let soft = g.softmax(logits);
    let hard = Tensor::one_hot(&[1], 3);
    let st = g.straight_through(hard.clone(), soft);
    assert_eq!(g.value(st), &hard);
    let w = g.constant(Tensor::row_vector(vec![1.0, -2.0, 0.5]));
    let prod = g.mul(st, w);
    let loss = g.sum(prod);
    let grads = g.backward(loss);
    let via_st = grads.wrt(logits).unwrap().clone();

    let mut g2 = Graph::new(Some(&store));
    let logits2 = g2.param(&store, id);
    let soft2 = g2.softmax(logits2);
    let w2 = g2.constant(Tensor::row_vector(vec![1.0, -2.0, 0.5]));
    let prod2 = g2.mul(soft2, w2);
    let loss2 = g2.sum(prod2);
    let grads2 = g2.backward(loss2);
    assert_eq!(&via_st, grads2.wrt(logits2).unwrap());
    let _ = ParamId(0);
}

#[test]
fn frozen_store_parameters_get_no_gradient_but_pass_it_through() {
    let trainable = store_of(&[(1, 3)], 7);
    let frozen = store_of(&[(3, 2)], 8);
    let mut g = Graph::new(Some(&trainable));
    let x = g.param(&trainable, ParamId(0));
    let w = g.param(&frozen, ParamId(0));
    assert!(!g.requires_grad(w));
    let y = g.matmul(x, w);
    let loss = g.sum(y);
    let grads = g.backward(loss);
    assert!(grads.wrt(w).is_none());
    assert!(grads.wrt(x).is_some());
    let params: Vec<_> = grads.params(&g).collect();
    assert_eq!(params.len(), 1);
}

proptest! {
    #[test]
    fn softmax_gradient_sums_to_zero(vals in proptest::collection::vec(-5.0f64..5.0, 2..8)) {
        let n = vals.len();
        let mut g = Graph::inference();
        let x = g.variable(Tensor::row_vector(vals));
        let s = g.softmax(x);
        let w = g.constant(Tensor::from_fn(1, n, |_, c| c as f64));
        let m = g.mul(s, w);
        let loss = g.sum(m);
        let grads = g.backward(loss);
        let total: f64 = grads.wrt(x).unwrap().data().iter().sum();
        prop_assert!(total.abs() < 1e-12);
    }
}
