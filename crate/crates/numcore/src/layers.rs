//! Layer primitives composed from tape operations.

use rand::Rng;

use crate::params::{uniform, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::{NumError, Result, Tensor};

/// Weights are drawn from `uniform(-INIT_RANGE, INIT_RANGE)`.
pub const INIT_RANGE: f64 = 0.08;

/// Affine map `x W + b` over the rows of `x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), uniform(&[in_dim, out_dim], INIT_RANGE, rng))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]))?)
        } else {
            None
        };
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// LSTM weights with gates stacked as `[input, forget, cell, output]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmWeights {
    pub input: ParamId,
    pub hidden: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden_size: usize,
}

impl LstmWeights {
    /// Uniform weights, zero bias except the forget gate which starts at 1.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let h = hidden_size;
        let input = store.add(format!("{name}.w_ih"), uniform(&[in_dim, 4 * h], INIT_RANGE, rng))?;
        let hidden = store.add(format!("{name}.w_hh"), uniform(&[h, 4 * h], INIT_RANGE, rng))?;
        let mut b = Tensor::zeros(&[1, 4 * h]);
        b.data_mut()[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
        let bias = store.add(format!("{name}.bias"), b)?;
        Ok(LstmWeights { input, hidden, bias, in_dim, hidden_size })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape<'_>, hidden_size: usize) -> Self {
        LstmState {
            h: tape.constant(Tensor::zeros(&[1, hidden_size])),
            c: tape.constant(Tensor::zeros(&[1, hidden_size])),
        }
    }
}

fn gates_to_state(tape: &mut Tape<'_>, gates: Var, c_prev: Var, h: usize) -> Result<LstmState> {
    let i = tape.slice_cols(gates, 0, h)?;
    let f = tape.slice_cols(gates, h, h)?;
    let g = tape.slice_cols(gates, 2 * h, h)?;
    let o = tape.slice_cols(gates, 3 * h, h)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// One LSTM step on a `1 x in_dim` input.
pub fn lstm_cell(tape: &mut Tape<'_>, x: Var, prev: LstmState, w: &LstmWeights) -> Result<LstmState> {
    let wi = tape.param(w.input);
    let wh = tape.param(w.hidden);
    let b = tape.param(w.bias);
    let xi = tape.matmul(x, wi)?;
    let hh = tape.matmul(prev.h, wh)?;
    let pre = tape.add(xi, hh)?;
    let gates = tape.add_row(pre, b)?;
    gates_to_state(tape, gates, prev.c, w.hidden_size)
}

/// Runs an LSTM over the rows of `xs` (`n x in_dim`), right to left when
/// `reverse` is set. Returns the `n x hidden` outputs in input order and
/// the state after the last processed step.
pub fn lstm_sequence(
    tape: &mut Tape<'_>,
    xs: Var,
    w: &LstmWeights,
    init: LstmState,
    reverse: bool,
) -> Result<(Var, LstmState)> {
    let n = tape.value(xs).rows();
    if n == 0 {
        return Err(NumError::InvalidArgument("empty sequence".to_string()));
    }
    let wi = tape.param(w.input);
    let wh = tape.param(w.hidden);
    let b = tape.param(w.bias);
    let proj = tape.matmul(xs, wi)?;
    let proj = tape.add_row(proj, b)?;
    let mut state = init;
    let mut outputs = vec![state.h; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let xt = tape.row(proj, t)?;
        let hh = tape.matmul(state.h, wh)?;
        let gates = tape.add(xt, hh)?;
        state = gates_to_state(tape, gates, state.c, w.hidden_size)?;
        outputs[t] = state.h;
    }
    let stacked = tape.concat(&outputs, 0)?;
    Ok((stacked, state))
}

/// Bidirectional pass: `n x 2H` outputs (forward half first) plus the
/// final forward state and the final backward state (the one at row 0).
pub fn bilstm(
    tape: &mut Tape<'_>,
    xs: Var,
    fwd: &LstmWeights,
    bwd: &LstmWeights,
) -> Result<(Var, LstmState, LstmState)> {
    let f0 = LstmState::zeros(tape, fwd.hidden_size);
    let b0 = LstmState::zeros(tape, bwd.hidden_size);
    let (fo, fs) = lstm_sequence(tape, xs, fwd, f0, false)?;
    let (bo, bs) = lstm_sequence(tape, xs, bwd, b0, true)?;
    let out = tape.concat(&[fo, bo], 1)?;
    Ok((out, fs, bs))
}

/// Inverted dropout. `rng = None` means inference, which is the identity.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape<'_>, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NumError::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let n = tape.value(x).len();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.mul_const(x, mask)
}
