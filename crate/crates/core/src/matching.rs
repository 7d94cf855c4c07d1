//! Bi-Encoder scoring head: a pairwise comparison feature followed by a
//! two-layer feed-forward scorer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gru::matvec_acc;
use crate::numerics::{Real, Tape, Var};
use crate::params::{Bound, ParamSet};

pub const BE_SCORER: &str = "be.scorer";
pub const BE_PREFIX: &str = "be.";

/// How two vectors are turned into a comparison feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparison {
    /// `[a, b, a-b, a-b, (a-b)∘(b-a)]`, width 5d.
    #[default]
    Literal,
    /// `[a, b, a∘b, (a-b)∘(a-b)]`, width 4d.
    Canonical,
    /// `[a, b]`, width 2d.
    Concat,
}

impl Comparison {
    pub fn width(self, d: usize) -> usize {
        match self {
            Comparison::Literal => 5 * d,
            Comparison::Canonical => 4 * d,
            Comparison::Concat => 2 * d,
        }
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparison::Literal => "literal",
            Comparison::Canonical => "canonical",
            Comparison::Concat => "concat",
        })
    }
}

impl FromStr for Comparison {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Comparison::Literal),
            "canonical" => Ok(Comparison::Canonical),
            "concat" => Ok(Comparison::Concat),
            other => Err(Error::Config(format!("unknown comparison variant {other:?}"))),
        }
    }
}

/// SubMult comparison of two equal-length vectors.
pub fn submult<T: Real>(a: &[T], b: &[T], variant: Comparison) -> Result<Vec<T>> {
    if a.len() != b.len() {
        return Err(Error::shape("submult", &[a.len()], &[b.len()]));
    }
    let d = a.len();
    let mut out = Vec::with_capacity(variant.width(d));
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    match variant {
        Comparison::Literal => {
            let diff: Vec<T> = a.iter().zip(b).map(|(x, y)| *x - *y).collect();
            out.extend_from_slice(&diff);
            out.extend_from_slice(&diff);
            out.extend(a.iter().zip(b).map(|(x, y)| (*x - *y) * (*y - *x)));
        }
        Comparison::Canonical => {
            out.extend(a.iter().zip(b).map(|(x, y)| *x * *y));
            out.extend(a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)));
        }
        Comparison::Concat => {}
    }
    Ok(out)
}

/// Batched comparison of two P×d nodes, giving P×width.
pub fn submult_tape<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, variant: Comparison) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape("submult", tape.shape(a), tape.shape(b)));
    }
    match variant {
        Comparison::Literal => {
            let diff = tape.sub(a, b)?;
            let sq = tape.mul(diff, diff)?;
            let neg = tape.neg(sq);
            tape.concat_cols(&[a, b, diff, diff, neg])
        }
        Comparison::Canonical => {
            let prod = tape.mul(a, b)?;
            let diff = tape.sub(a, b)?;
            let sq = tape.mul(diff, diff)?;
            tape.concat_cols(&[a, b, prod, sq])
        }
        Comparison::Concat => tape.concat_cols(&[a, b]),
    }
}

/// Two-layer scorer `w2·relu(w1·x + b1) + b2` stored under `prefix`.
pub fn init_scorer<T: Real, R: Rng>(params: &mut ParamSet<T>, prefix: &str, input: usize, hidden: usize, rng: &mut R) {
    params.init_uniform(&format!("{prefix}.w1"), &[hidden, input], input, rng);
    params.init_uniform(&format!("{prefix}.b1"), &[hidden], input, rng);
    params.init_uniform(&format!("{prefix}.w2"), &[1, hidden], hidden, rng);
    params.init_uniform(&format!("{prefix}.b2"), &[1], hidden, rng);
}

/// Borrowed scorer weights.
#[derive(Clone, Copy, Debug)]
pub struct Scorer<'a, T: Real> {
    w1: &'a [T],
    b1: &'a [T],
    w2: &'a [T],
    b2: T,
    pub input: usize,
    pub hidden: usize,
}

impl<'a, T: Real> Scorer<'a, T> {
    pub fn from_params(params: &'a ParamSet<T>, prefix: &str) -> Result<Self> {
        let w1 = params.get(&format!("{prefix}.w1"))?;
        let b1 = params.get(&format!("{prefix}.b1"))?;
        let w2 = params.get(&format!("{prefix}.w2"))?;
        let b2 = params.get(&format!("{prefix}.b2"))?;
        let (hidden, input) = (w1.rows(), w1.cols());
        if b1.len() != hidden || w2.len() != hidden || b2.len() != 1 {
            return Err(Error::shape("scorer", w1.shape(), w2.shape()));
        }
        Ok(Scorer {
            w1: w1.data(),
            b1: b1.data(),
            w2: w2.data(),
            b2: b2.data()[0],
            input,
            hidden,
        })
    }

    pub fn score(&self, features: &[T]) -> Result<T> {
        if features.len() != self.input {
            return Err(Error::shape("scorer", &[self.hidden, self.input], &[features.len()]));
        }
        let mut hid = self.b1.to_vec();
        matvec_acc(self.w1, features, &mut hid);
        Ok(hid
            .iter()
            .zip(self.w2)
            .fold(self.b2, |acc, (h, w)| acc + h.max(T::zero()) * *w))
    }
}

/// Tape version of [`Scorer::score`] over a P×input node, giving P×1.
pub fn scorer_tape<T: Real>(tape: &mut Tape<T>, bound: &Bound, prefix: &str, features: Var) -> Result<Var> {
    let w1 = bound.var(&format!("{prefix}.w1"))?;
    let b1 = bound.var(&format!("{prefix}.b1"))?;
    let w2 = bound.var(&format!("{prefix}.w2"))?;
    let b2 = bound.var(&format!("{prefix}.b2"))?;
    let h = tape.matmul_bt(features, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h);
    let s = tape.matmul_bt(h, w2)?;
    tape.add_bias(s, b2)
}

/// Plain Bi-Encoder logit for one (context, response) pair.
pub fn biencoder_score<T: Real>(context: &[T], response: &[T], params: &ParamSet<T>, variant: Comparison) -> Result<T> {
    Scorer::from_params(params, BE_SCORER)?.score(&submult(context, response, variant)?)
}
