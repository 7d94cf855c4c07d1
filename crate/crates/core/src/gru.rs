//! Gated recurrent unit shared by the encoder and the enrichment head.
//!
//! Gate layout follows the common (reset, update, candidate) ordering:
//!
//! ```text
//! r  = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z  = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + r ∘ (W_hn h + b_hn))
//! h' = (1 - z) ∘ n + z ∘ h
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Real, Tape, Var};
use crate::params::{Bound, ParamSet};

pub fn init<T: Real, R: Rng>(params: &mut ParamSet<T>, prefix: &str, input: usize, hidden: usize, rng: &mut R) {
    params.init_uniform(&format!("{prefix}.w_ih"), &[3 * hidden, input], input, rng);
    params.init_uniform(&format!("{prefix}.w_hh"), &[3 * hidden, hidden], hidden, rng);
    params.init_uniform(&format!("{prefix}.b_ih"), &[3 * hidden], input, rng);
    params.init_uniform(&format!("{prefix}.b_hh"), &[3 * hidden], hidden, rng);
}

/// Borrowed view of one cell's weights for untracked evaluation.
#[derive(Clone, Copy, Debug)]
pub struct GruCell<'a, T: Real> {
    w_ih: &'a [T],
    w_hh: &'a [T],
    b_ih: &'a [T],
    b_hh: &'a [T],
    pub input: usize,
    pub hidden: usize,
}

impl<'a, T: Real> GruCell<'a, T> {
    pub fn from_params(params: &'a ParamSet<T>, prefix: &str) -> Result<Self> {
        let w_ih = params.get(&format!("{prefix}.w_ih"))?;
        let w_hh = params.get(&format!("{prefix}.w_hh"))?;
        let hidden = w_hh.cols();
        let input = w_ih.cols();
        if w_ih.rows() != 3 * hidden || w_hh.rows() != 3 * hidden {
            return Err(Error::shape("gru", w_ih.shape(), w_hh.shape()));
        }
        Ok(GruCell {
            w_ih: w_ih.data(),
            w_hh: w_hh.data(),
            b_ih: params.get(&format!("{prefix}.b_ih"))?.data(),
            b_hh: params.get(&format!("{prefix}.b_hh"))?.data(),
            input,
            hidden,
        })
    }

    /// `W_ih x + b_ih`, the part of a step that does not depend on the state.
    pub fn input_projection(&self, x: &[T]) -> Vec<T> {
        let mut gi = self.b_ih.to_vec();
        matvec_acc(self.w_ih, x, &mut gi);
        gi
    }

    pub fn step(&self, x: &[T], h: &[T]) -> Result<Vec<T>> {
        if x.len() != self.input || h.len() != self.hidden {
            return Err(Error::shape("gru step", &[self.input, self.hidden], &[x.len(), h.len()]));
        }
        Ok(self.step_projected(&self.input_projection(x), h))
    }

    /// Step given a precomputed input projection of length 3·hidden.
    pub fn step_projected(&self, gi: &[T], h: &[T]) -> Vec<T> {
        let hd = self.hidden;
        let mut gh = self.b_hh.to_vec();
        matvec_acc(self.w_hh, h, &mut gh);
        (0..hd)
            .map(|j| {
                let r = sigmoid(gi[j] + gh[j]);
                let z = sigmoid(gi[hd + j] + gh[hd + j]);
                let n = (gi[2 * hd + j] + r * gh[2 * hd + j]).tanh();
                (T::one() - z) * n + z * h[j]
            })
            .collect()
    }
}

/// `out += W x` for row-major `W` with `out.len()` rows.
pub fn matvec_acc<T: Real>(w: &[T], x: &[T], out: &mut [T]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = *o + row.iter().zip(x).map(|(a, b)| *a * *b).sum::<T>();
    }
}

/// Tape handles for one cell.
#[derive(Clone, Copy, Debug)]
pub struct TapeGru {
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
    pub hidden: usize,
}

impl TapeGru {
    pub fn bind<T: Real>(tape: &Tape<T>, bound: &Bound, prefix: &str) -> Result<Self> {
        let w_hh = bound.var(&format!("{prefix}.w_hh"))?;
        Ok(TapeGru {
            w_ih: bound.var(&format!("{prefix}.w_ih"))?,
            w_hh,
            b_ih: bound.var(&format!("{prefix}.b_ih"))?,
            b_hh: bound.var(&format!("{prefix}.b_hh"))?,
            hidden: tape.shape(w_hh)[1],
        })
    }

    /// One step over a batch: `x` is B×input, `h` is B×hidden.
    pub fn step<T: Real>(&self, tape: &mut Tape<T>, x: Var, h: Var) -> Result<Var> {
        let gi = tape.matmul_bt(x, self.w_ih)?;
        let gi = tape.add_bias(gi, self.b_ih)?;
        let gh = tape.matmul_bt(h, self.w_hh)?;
        let gh = tape.add_bias(gh, self.b_hh)?;

        tape.gru_gates(gi, gh, h)
    }
}
