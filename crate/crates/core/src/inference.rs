//! Allocation-light scoring with frozen weights.
//!
//! The head's GRU input for a neighbor `N` is `W·cmp(C, N)`. For every
//! comparison variant this expands into
//!
//! ```text
//! P·C + R·C² + Q·N + S·N² + T·(C∘N)
//! ```
//!
//! The `N`-only part is computed once per stored context
//! ([`ContextProjections`]) and the `C`-only part once per query
//! ([`Query`]), leaving one `3h×d` product per neighbor. Results equal the
//! reference path in [`crate::enrichment`] up to float rounding.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::enrichment::{HeadOptions, ATT_HIDDEN, ATT_RESPONSE, ATT_SCORE, CE_SCORER, GRU_BACKWARD, GRU_FORWARD};
use crate::error::{Error, Result};
use crate::gru::matvec_acc;
use crate::matching::{Comparison, BE_SCORER};
use crate::numerics::{sigmoid, softmax_in_place};
use crate::params::ParamSet;
use crate::store::EmbeddingStore;

/// `out += W x` with eight independent partial sums per row, which the
/// compiler can vectorize.
fn matvec_lanes(w: &[f32], x: &[f32], out: &mut [f32]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut acc = [0.0f32; 8];
        let mut rc = row.chunks_exact(8);
        let mut xc = x.chunks_exact(8);
        for (r, v) in (&mut rc).zip(&mut xc) {
            for l in 0..8 {
                acc[l] += r[l] * v[l];
            }
        }
        let tail: f32 = rc.remainder().iter().zip(xc.remainder()).map(|(a, b)| a * b).sum();
        *o += acc.iter().sum::<f32>() + tail;
    }
}

/// Owned two-layer scorer, `w2·relu(w1·x + b1) + b2`.
#[derive(Clone, Debug)]
struct OwnedScorer {
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: f32,
}

impl OwnedScorer {
    fn from_params(params: &ParamSet<f32>, prefix: &str, input: usize) -> Result<Self> {
        let w1 = params.get(&format!("{prefix}.w1"))?;
        let b1 = params.get(&format!("{prefix}.b1"))?;
        let w2 = params.get(&format!("{prefix}.w2"))?;
        let b2 = params.get(&format!("{prefix}.b2"))?;
        if w1.cols() != input || b1.len() != w1.rows() || w2.len() != w1.rows() || b2.len() != 1 {
            return Err(Error::shape("scorer", w1.shape(), &[input]));
        }
        Ok(OwnedScorer {
            w1: w1.data().to_vec(),
            b1: b1.data().to_vec(),
            w2: w2.data().to_vec(),
            b2: b2.data()[0],
        })
    }

    /// Same operation order as [`crate::matching::Scorer::score`], so the
    /// result is bit-identical.
    fn score(&self, features: &[f32], hidden: &mut Vec<f32>) -> f32 {
        hidden.clear();
        hidden.extend_from_slice(&self.b1);
        matvec_acc(&self.w1, features, hidden);
        hidden
            .iter()
            .zip(&self.w2)
            .fold(self.b2, |acc, (h, w)| acc + h.max(0.0) * *w)
    }
}

/// One GRU direction with its input weights split by term.
#[derive(Clone, Debug)]
struct SplitCell {
    hidden: usize,
    /// Each `3h×d`, row-major. `r`, `s`, `t` are empty for concatenation.
    p: Vec<f32>,
    r: Vec<f32>,
    q: Vec<f32>,
    s: Vec<f32>,
    t: Vec<f32>,
    b_ih: Vec<f32>,
    w_hh: Vec<f32>,
    b_hh: Vec<f32>,
}

fn block(w: &[f32], rows: usize, width: usize, d: usize, b: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        out.extend_from_slice(&w[r * width + b * d..r * width + (b + 1) * d]);
    }
    out
}

fn combine(terms: &[(f32, &[f32])]) -> Vec<f32> {
    let mut out = vec![0.0; terms[0].1.len()];
    for (c, m) in terms {
        for (o, v) in out.iter_mut().zip(m.iter()) {
            *o += c * v;
        }
    }
    out
}

impl SplitCell {
    fn from_params(params: &ParamSet<f32>, prefix: &str, d: usize, variant: Comparison) -> Result<Self> {
        let w_ih = params.get(&format!("{prefix}.w_ih"))?;
        let w_hh = params.get(&format!("{prefix}.w_hh"))?;
        let hidden = w_hh.cols();
        let rows = 3 * hidden;
        let width = variant.width(d);
        if w_ih.rows() != rows || w_ih.cols() != width || w_hh.rows() != rows {
            return Err(Error::shape("gru", w_ih.shape(), &[rows, width]));
        }
        let a: Vec<Vec<f32>> = (0..width / d).map(|b| block(w_ih.data(), rows, width, d, b)).collect();
        let (p, r, q, s, t) = match variant {
            // [C, N, C-N, C-N, -(C-N)²]
            Comparison::Literal => (
                combine(&[(1.0, &a[0]), (1.0, &a[2]), (1.0, &a[3])]),
                combine(&[(-1.0, &a[4])]),
                combine(&[(1.0, &a[1]), (-1.0, &a[2]), (-1.0, &a[3])]),
                combine(&[(-1.0, &a[4])]),
                combine(&[(2.0, &a[4])]),
            ),
            // [C, N, C∘N, (C-N)²]
            Comparison::Canonical => (
                a[0].clone(),
                a[3].clone(),
                a[1].clone(),
                a[3].clone(),
                combine(&[(1.0, &a[2]), (-2.0, &a[3])]),
            ),
            Comparison::Concat => (a[0].clone(), Vec::new(), a[1].clone(), Vec::new(), Vec::new()),
        };
        Ok(SplitCell {
            hidden,
            p,
            r,
            q,
            s,
            t,
            b_ih: params.get(&format!("{prefix}.b_ih"))?.data().to_vec(),
            w_hh: w_hh.data().to_vec(),
            b_hh: params.get(&format!("{prefix}.b_hh"))?.data().to_vec(),
        })
    }

    /// `Q·N + S·N²` appended to `out`.
    fn project_neighbor(&self, n: &[f32], out: &mut Vec<f32>) {
        let start = out.len();
        out.resize(start + 3 * self.hidden, 0.0);
        let slot = &mut out[start..];
        matvec_lanes(&self.q, n, slot);
        if !self.s.is_empty() {
            let sq: Vec<f32> = n.iter().map(|v| v * v).collect();
            matvec_lanes(&self.s, &sq, slot);
        }
    }

    /// `(P·C + R·C² + b_ih, T∘C)` with `T∘C` scaling column `j` by `C_j`.
    fn project_query(&self, c: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let mut base = self.b_ih.clone();
        matvec_lanes(&self.p, c, &mut base);
        if !self.r.is_empty() {
            let sq: Vec<f32> = c.iter().map(|v| v * v).collect();
            matvec_lanes(&self.r, &sq, &mut base);
        }
        let cross = if self.t.is_empty() {
            Vec::new()
        } else {
            self.t
                .chunks_exact(c.len())
                .flat_map(|row| row.iter().zip(c).map(|(w, x)| w * x))
                .collect()
        };
        (base, cross)
    }

    /// One step in place given the full input projection `gi`.
    fn step(&self, gi: &[f32], h: &mut [f32], gh: &mut Vec<f32>) {
        let hd = self.hidden;
        gh.clear();
        gh.extend_from_slice(&self.b_hh);
        matvec_lanes(&self.w_hh, h, gh);
        for j in 0..hd {
            let r = sigmoid(gi[j] + gh[j]);
            let z = sigmoid(gi[hd + j] + gh[hd + j]);
            let n = (gi[2 * hd + j] + r * gh[2 * hd + j]).tanh();
            h[j] = (1.0 - z) * n + z * h[j];
        }
    }
}

/// Per-row `Q·N + S·N²` for both directions of every stored context.
#[derive(Clone, Debug)]
pub struct ContextProjections {
    fingerprint: u64,
    width: usize,
    data: Vec<f32>,
}

impl ContextProjections {
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.width.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

/// Per-query terms, computed once per live context.
#[derive(Clone, Debug)]
pub struct Query {
    context: Vec<f32>,
    base: [Vec<f32>; 2],
    cross: [Vec<f32>; 2],
}

/// Result of one enriched score: logit, attention weights, σ(G) and `Ĉ`.
pub type HeadOutput = (f32, Vec<f32>, Vec<f32>, Vec<f32>);

/// Frozen weights of both scorers and the enrichment head, resolved once.
#[derive(Clone, Debug)]
pub struct CompiledHead {
    d: usize,
    variant: Comparison,
    options: HeadOptions,
    cells: [SplitCell; 2],
    att_hidden: Vec<f32>,
    att_response: Vec<f32>,
    att_score: Vec<f32>,
    be: OwnedScorer,
    ce: OwnedScorer,
    fingerprint: u64,
}

/// Hash of every parameter name and bit pattern.
pub fn fingerprint(params: &ParamSet<f32>) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, t) in params.iter() {
        name.hash(&mut h);
        t.shape().hash(&mut h);
        for v in t.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

impl CompiledHead {
    pub fn new(params: &ParamSet<f32>, d: usize, variant: Comparison, options: HeadOptions) -> Result<Self> {
        let width = variant.width(d);
        let att_hidden = params.get(ATT_HIDDEN)?;
        let att_response = params.get(ATT_RESPONSE)?;
        let att_score = params.get(ATT_SCORE)?;
        let cells = [
            SplitCell::from_params(params, GRU_FORWARD, d, variant)?,
            SplitCell::from_params(params, GRU_BACKWARD, d, variant)?,
        ];
        let a = att_hidden.rows();
        if cells[0].hidden != d
            || cells[1].hidden != d
            || att_hidden.cols() != 2 * d
            || att_response.shape() != [a, d]
            || att_score.len() != a
        {
            return Err(Error::shape("enrichment head", att_hidden.shape(), &[a, 2 * d]));
        }
        Ok(CompiledHead {
            d,
            variant,
            options,
            cells,
            att_hidden: att_hidden.data().to_vec(),
            att_response: att_response.data().to_vec(),
            att_score: att_score.data().to_vec(),
            be: OwnedScorer::from_params(params, BE_SCORER, width)?,
            ce: OwnedScorer::from_params(params, CE_SCORER, width)?,
            fingerprint: fingerprint(params),
        })
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Neighbor-side projections for every row of a context store.
    pub fn project_contexts(&self, contexts: &EmbeddingStore) -> Result<ContextProjections> {
        if contexts.dim() != self.d {
            return Err(Error::shape("project_contexts", &[contexts.dim()], &[self.d]));
        }
        let width = 6 * self.d;
        let mut data = Vec::with_capacity(contexts.len() * width);
        for i in 0..contexts.len() {
            for cell in &self.cells {
                cell.project_neighbor(contexts.row(i), &mut data);
            }
        }
        Ok(ContextProjections {
            fingerprint: self.fingerprint,
            width,
            data,
        })
    }

    pub fn query(&self, context: &[f32]) -> Result<Query> {
        if context.len() != self.d {
            return Err(Error::shape("query", &[context.len()], &[self.d]));
        }
        let (b0, c0) = self.cells[0].project_query(context);
        let (b1, c1) = self.cells[1].project_query(context);
        Ok(Query {
            context: context.to_vec(),
            base: [b0, b1],
            cross: [c0, c1],
        })
    }

    /// Bi-Encoder logit; bit-identical to [`crate::matching::biencoder_score`].
    pub fn biencoder(&self, context: &[f32], response: &[f32]) -> Result<f32> {
        let f = crate::matching::submult(context, response, self.variant)?;
        Ok(self.be.score(&f, &mut Vec::new()))
    }

    /// Enriched logit from neighbor vectors and their stored projections.
    /// With no neighbors this is the Bi-Encoder logit.
    pub fn score(
        &self,
        query: &Query,
        response: &[f32],
        neighbors: &[&[f32]],
        projections: &[&[f32]],
    ) -> Result<HeadOutput> {
        let d = self.d;
        if response.len() != d || neighbors.len() != projections.len() {
            return Err(Error::shape("score", &[response.len(), neighbors.len()], &[d, projections.len()]));
        }
        if neighbors.is_empty() {
            return Ok((self.biencoder(&query.context, response)?, Vec::new(), Vec::new(), Vec::new()));
        }
        let k = neighbors.len();
        let g = 3 * d;
        let mut gh = Vec::with_capacity(g);
        let mut gi = vec![0.0f32; g];
        // states[t] = [forward_t ; backward_t]
        let mut states = vec![0.0f32; k * 2 * d];
        for (dir, cell) in self.cells.iter().enumerate() {
            let mut h = vec![0.0f32; d];
            for i in 0..k {
                let t = if dir == 0 { i } else { k - 1 - i };
                let n = neighbors[t];
                let proj = &projections[t][dir * g..(dir + 1) * g];
                if n.len() != d || projections[t].len() != 2 * g {
                    return Err(Error::shape("neighbor", &[n.len()], &[d]));
                }
                for ((o, b), p) in gi.iter_mut().zip(&query.base[dir]).zip(proj) {
                    *o = b + p;
                }
                if !query.cross[dir].is_empty() {
                    matvec_lanes(&query.cross[dir], n, &mut gi);
                }
                cell.step(&gi, &mut h, &mut gh);
                states[t * 2 * d + dir * d..t * 2 * d + (dir + 1) * d].copy_from_slice(&h);
            }
        }
        let weights = if self.options.attention {
            let a = self.att_score.len();
            let mut pr = vec![0.0f32; a];
            matvec_lanes(&self.att_response, response, &mut pr);
            let mut u = vec![0.0f32; a];
            let mut scores: Vec<f32> = states
                .chunks_exact(2 * d)
                .map(|h| {
                    u.copy_from_slice(&pr);
                    matvec_lanes(&self.att_hidden, h, &mut u);
                    u.iter().zip(&self.att_score).map(|(x, w)| x.tanh() * w).sum::<f32>()
                })
                .collect();
            softmax_in_place(&mut scores);
            scores
        } else {
            vec![1.0 / k as f32; k]
        };
        let mut pooled = vec![0.0f32; 2 * d];
        for (h, w) in states.chunks_exact(2 * d).zip(&weights) {
            for (o, v) in pooled.iter_mut().zip(h) {
                *o += w * v;
            }
        }
        let (enriched, control) = pooled.split_at(d);
        let (fused, gate): (Vec<f32>, Vec<f32>) = if self.options.gate {
            let gate: Vec<f32> = control.iter().map(|v| sigmoid(*v)).collect();
            let fused = (0..d)
                .map(|i| gate[i] * enriched[i] + (1.0 - gate[i]) * query.context[i])
                .collect();
            (fused, gate)
        } else {
            (enriched.to_vec(), Vec::new())
        };
        let f = crate::matching::submult(&fused, response, self.variant)?;
        let s = self.ce.score(&f, &mut gh);
        Ok((s, weights, gate, pooled))
    }
}
