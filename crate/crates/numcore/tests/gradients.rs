use eqg_numcore::{
    finite_diff_check, layers::INIT_RANGE, lstm_cell, params::uniform, sigmoid, LstmState, LstmWeights,
    NumError, ParamStore, Tape, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scalar LSTM step written directly from the gate equations.
fn scalar_lstm_step(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    w_ih: &Tensor,
    w_hh: &Tensor,
    bias: &Tensor,
) -> (Vec<f64>, Vec<f64>) {
    let hs = h.len();
    let pre = |gate: usize, unit: usize| {
        let col = gate * hs + unit;
        let mut z = bias.data()[col];
        for (i, xi) in x.iter().enumerate() {
            z += xi * w_ih.at(i, col);
        }
        for (j, hj) in h.iter().enumerate() {
            z += hj * w_hh.at(j, col);
        }
        z
    };
    let mut h_new = vec![0.0; hs];
    let mut c_new = vec![0.0; hs];
    for u in 0..hs {
        let i = sigmoid(pre(0, u));
        let f = sigmoid(pre(1, u));
        let g = pre(2, u).tanh();
        let o = sigmoid(pre(3, u));
        c_new[u] = f * c[u] + i * g;
        h_new[u] = o * c_new[u].tanh();
    }
    (h_new, c_new)
}

#[test]
fn lstm_cell_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let w = LstmWeights::new(&mut store, "cell", 3, 2, &mut rng).unwrap();
    // Push weights away from the tiny init range so every gate is exercised.
    for id in [w.input, w.hidden, w.bias] {
        *store.get_mut(id) = uniform(store.get(id).shape(), 1.5, &mut rng);
    }
    let x = vec![0.4, -1.1, 0.7];
    let h0 = vec![0.2, -0.3];
    let c0 = vec![-0.5, 0.9];

    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(Tensor::row(x.clone()));
    let state = LstmState {
        h: tape.constant(Tensor::row(h0.clone())),
        c: tape.constant(Tensor::row(c0.clone())),
    };
    let next = lstm_cell(&mut tape, xv, state, &w).unwrap();

    let (h_ref, c_ref) = scalar_lstm_step(&x, &h0, &c0, store.get(w.input), store.get(w.hidden), store.get(w.bias));
    for (a, b) in tape.value(next.h).data().iter().zip(&h_ref) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    for (a, b) in tape.value(next.c).data().iter().zip(&c_ref) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn thirty_parameter_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParamStore::new();
    let w1 = store.add("w1", uniform(&[3, 5], 1.0, &mut rng)).unwrap();
    let b1 = store.add("b1", uniform(&[1, 5], 1.0, &mut rng)).unwrap();
    let w2 = store.add("w2", uniform(&[5, 2], 1.0, &mut rng)).unwrap();
    assert_eq!(store.num_scalars(), 30);
    let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.3, -0.7]]).unwrap();

    let report = finite_diff_check::<NumError, _>(&mut store, 1e-5, |tape| {
        let xv = tape.constant(x.clone());
        let (w1, b1, w2) = (tape.param(w1), tape.param(b1), tape.param(w2));
        let h = tape.matmul(xv, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h);
        let o = tape.matmul(h, w2)?;
        let p = tape.softmax(o, 1)?;
        let picked = tape.gather(p, &[0, 3])?;
        let lp = tape.log(picked);
        let s = tape.sum(lp);
        Ok(tape.scale(s, -1.0))
    })
    .unwrap();
    assert_eq!(report.coordinates, 30);
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn every_primitive_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let a = store.add("a", uniform(&[3, 4], 1.0, &mut rng)).unwrap();
    let b = store.add("b", uniform(&[3, 4], 1.0, &mut rng)).unwrap();
    let r = store.add("r", uniform(&[1, 4], 1.0, &mut rng)).unwrap();
    let s = store.add("s", Tensor::scalar(1.7)).unwrap();
    let table = store.add("table", uniform(&[5, 4], 1.0, &mut rng)).unwrap();

    let report = finite_diff_check::<NumError, _>(&mut store, 1e-5, |tape| {
        let (a, b, r, s, table) = (tape.param(a), tape.param(b), tape.param(r), tape.param(s), tape.param(table));
        let sum = tape.add(a, b)?;
        let diff = tape.sub(sum, b)?;
        let prod = tape.mul(diff, b)?;
        let shifted = tape.add_row(prod, r)?;
        let scaled = tape.mul_scalar(shifted, s)?;
        let divided = tape.div_scalar(scaled, s)?;
        let divided = tape.div_scalar(divided, s)?;
        let sig = tape.sigmoid(divided);
        let soft_rows = tape.softmax(sig, 1)?;
        let soft_cols = tape.softmax(a, 0)?;
        let both = tape.concat(&[soft_rows, soft_cols], 0)?;
        let wide = tape.concat(&[both, both], 1)?;
        let cols = tape.slice_cols(wide, 2, 4)?;
        let rows = tape.slice_rows(cols, 1, 4)?;
        let t = tape.transpose(rows)?;
        let m = tape.matmul(t, rows)?;
        let emb = tape.embedding(table, &[4, 0, 4])?;
        let emb_t = tape.transpose(emb)?;
        let mixed = tape.matmul(m, emb_t)?;
        let masked = tape.mask_fill(mixed, &[false, true, false, false, false, true, false, false, false, false, false, false], 0.0)?;
        let maxed = tape.max_over(masked, 1)?;
        let first = tape.row(a, 0)?;
        let rep = tape.repeat_rows(first, 2)?;
        let rep_tanh = tape.tanh(rep);
        let rep_max = tape.max_over(rep_tanh, 0)?;
        let relu_in = tape.affine(rep_max, 2.0, 0.1);
        let relu = tape.relu(relu_in);
        let soft = tape.softmax(relu, 1)?;
        let scattered = tape.scatter_max(soft, &[1, 0, 1, 2], 4)?;
        let padded = tape.pad_cols(scattered, 6)?;
        let pm = tape.one_minus(padded);
        let pm_sum = tape.sum(pm);
        let mx_sum = tape.sum(maxed);
        let total = tape.add(pm_sum, mx_sum)?;
        let dropped = tape.mul_const(total, vec![0.5])?;
        Ok(dropped)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn repeated_parameter_use_accumulates() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row(vec![0.3, -0.8])).unwrap();
    let report = finite_diff_check::<NumError, _>(&mut store, 1e-5, |tape| {
        let a = tape.param(w);
        let b = tape.param(w);
        let p = tape.mul(a, b)?;
        let t = tape.tanh(p);
        let q = tape.mul(t, a)?;
        Ok(tape.sum(q))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-7, "{report:?}");
}

#[test]
fn identical_seeds_give_identical_init() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        LstmWeights::new(&mut store, "l", 4, 3, &mut rng).unwrap();
        store
    };
    assert_eq!(build(), build());
    let store = build();
    assert!(store.iter().all(|(_, n, t)| n.ends_with("bias") || t.data().iter().all(|v| v.abs() <= INIT_RANGE)));
}

proptest! {
    #[test]
    fn softmax_rows_are_positive_and_sum_to_one(values in prop::collection::vec(-30.0f64..30.0, 1..40), cols in 1usize..8) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let t = Tensor::new(vec![rows, cols], values[..rows * cols].to_vec()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let y = tape.softmax(x, 1).unwrap();
        let out = tape.value(y);
        for r in 0..rows {
            let row = out.row_slice(r);
            prop_assert!(row.iter().all(|v| *v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_over_gradient_hits_exactly_one_element(values in prop::collection::vec(-3i32..3, 1..12)) {
        let data: Vec<f64> = values.iter().map(|v| *v as f64).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![data.len()], data.clone()).unwrap());
        let m = tape.max_over(x, 0).unwrap();
        let grads = tape.backward(m).unwrap();
        let g = grads.leaf(x).unwrap().data();
        let hits: Vec<usize> = g.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
        let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let first = data.iter().position(|v| *v == max).unwrap();
        prop_assert_eq!(hits, vec![first]);
    }
}
