//! Merge-order search over a token sequence: greedy easy-first reduction,
//! straight-through Gumbel selection, stochastic top-k beam search, root
//! marginalization, and an exhaustive enumeration oracle.

mod engine;
mod oracle;

use std::ops::Range;

use rand::distributions::Open01;
use rand::{Rng, RngCore};

use crate::autodiff::{RowRef, Tape, Var};
use crate::cells::{disentangled_scores_rows, entangled_scores_rows, grc_compose_rows, GrcParams, ScorerParams};
use crate::error::{contract, Result};

pub use engine::{beam_encode, encode_batch, BeamTree, Encoded, TreeNode};
pub use oracle::{exhaustive_merge_oracle, OracleSequence};

/// How adjacent pairs are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    /// Compose every candidate pair with the cell, then score the parent.
    Entangled,
    /// Score the raw child pair; compose only what gets selected.
    Disentangled,
}

/// Reduction strategy for [`encode_batch`].
#[derive(Clone, Copy, Debug)]
pub enum Strategy<'a> {
    /// Replay the given merge trace for each sample.
    Forced(&'a [Vec<usize>]),
    /// Beam search with `k` beams.
    Beam { k: usize, mode: ScoreMode },
    /// Greedy selection with straight-through soft weights.
    SoftGreedy { mode: ScoreMode, temperature: f64 },
}

/// Cell and scorer parameter handles shared by every strategy. Replaying a
/// forced trace needs no scorer.
#[derive(Clone, Copy, Debug)]
pub struct Modules<'a> {
    pub cell: &'a GrcParams,
    scorer: Option<&'a ScorerParams>,
}

impl<'a> Modules<'a> {
    pub fn new(cell: &'a GrcParams, scorer: &'a ScorerParams) -> Self {
        Modules {
            cell,
            scorer: Some(scorer),
        }
    }

    pub fn cell_only(cell: &'a GrcParams) -> Self {
        Modules { cell, scorer: None }
    }

    pub(crate) fn scorer(&self) -> Result<&'a ScorerParams> {
        self.scorer.ok_or_else(|| contract("this strategy needs a scorer"))
    }
}

pub(crate) fn gumbel(rng: &mut dyn RngCore) -> f64 {
    let u: f64 = rng.sample(Open01);
    -(-u.ln()).ln()
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Top-`k` of `log_probs`, optionally after adding independent Gumbel(0,1)
/// noise (sampling without replacement from the Plackett–Luce distribution).
/// Returns `(index, log_prob)` in descending perturbed order, ties toward
/// the lower index. `k > m` returns all `m`.
pub fn stochastic_topk(log_probs: &[f64], k: usize, noise: Option<&mut dyn RngCore>) -> Vec<(usize, f64)> {
    let keys: Vec<f64> = match noise {
        Some(rng) => log_probs.iter().map(|&v| v + gumbel(rng)).collect(),
        None => log_probs.to_vec(),
    };
    let mut order: Vec<usize> = (0..log_probs.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.into_iter().map(|i| (i, log_probs[i])).collect()
}

/// Straight-through selection within each segment: the forward value is a
/// one-hot at the argmax of `(scores + g) / temperature`, the backward pass
/// uses the gradient of the soft weights. Returns the selector and the
/// chosen offset inside each segment.
pub(crate) fn ste_select_segments<'t>(
    scores: Var<'t>,
    segs: &[Range<usize>],
    temperature: f64,
    mut noise: Option<&mut dyn RngCore>,
) -> Result<(Var<'t>, Vec<usize>)> {
    if temperature <= 0.0 {
        return Err(contract(format!("temperature must be positive, got {temperature}")));
    }
    let tape = scores.tape();
    let m = scores.numel();
    let logits = match noise.as_deref_mut() {
        Some(rng) => {
            let g: Vec<f64> = (0..m).map(|_| gumbel(rng)).collect();
            scores.add(tape.constant(crate::autodiff::Tensor::vector(g)))?
        }
        None => scores,
    }
    .scale(1.0 / temperature);
    let soft = logits.segment_softmax(segs)?;
    let lv = logits.data();
    let mut hard = vec![0.0; m];
    let mut picks = Vec::with_capacity(segs.len());
    for sg in segs {
        let j = argmax(&lv[sg.clone()]);
        hard[sg.start + j] = 1.0;
        picks.push(j);
    }
    Ok((soft.straight_through(hard)?, picks))
}

/// Straight-through Gumbel selection over a score vector of length `m ≥ 1`.
pub fn gumbel_ste_select<'t>(scores: Var<'t>, temperature: f64, noise: Option<&mut dyn RngCore>) -> Result<Var<'t>> {
    let m = scores.numel();
    if m == 0 {
        return Err(contract("selection over zero scores"));
    }
    let flat = scores.reshape(vec![m])?;
    Ok(ste_select_segments(flat, &[0..m], temperature, noise)?.0)
}

/// One hard easy-first reduction of `h` (`n × d`): the best-scoring adjacent
/// pair is replaced by its composition and every other row is copied.
pub fn greedy_reduce_step<'t>(tape: &'t Tape, h: Var<'t>, m: Modules<'_>, mode: ScoreMode) -> Result<Var<'t>> {
    let n = h.rows();
    if n < 2 {
        return Err(contract(format!("greedy reduction needs n >= 2, got {n}")));
    }
    let d = h.cols();
    let rows: Vec<RowRef<'t>> = (0..n).map(|i| h.row(i)).collect();
    let (j, parent) = if n == 2 {
        (0, grc_compose_rows(tape, &rows[..1], &rows[1..], m.cell)?.row(0))
    } else {
        let (left, right) = (&rows[..n - 1], &rows[1..]);
        let (parents, raw) = match mode {
            ScoreMode::Entangled => {
                let (p, s) = entangled_scores_rows(tape, left, right, m.cell, m.scorer()?)?;
                (Some(p), s)
            }
            ScoreMode::Disentangled => (None, disentangled_scores_rows(tape, left, right, m.scorer()?)?),
        };
        let lp = raw.segment_log_softmax(&[0..n - 1])?;
        let j = argmax(&lp.data());
        let parent = match parents {
            Some(p) => p.row(j),
            None => grc_compose_rows(tape, &left[j..j + 1], &right[j..j + 1], m.cell)?.row(0),
        };
        (j, parent)
    };
    let mut out = rows[..j].to_vec();
    out.push(parent);
    out.extend_from_slice(&rows[j + 2..]);
    tape.gather_rows(&out, 0, d)
}

/// `Σ_i softmax(scores)_i · roots_i` for `roots` of shape `K × d`.
pub fn marginalize_roots<'t>(roots: Var<'t>, scores: Var<'t>) -> Result<Var<'t>> {
    let k = roots.rows();
    if k == 0 || scores.numel() != k {
        return Err(crate::error::Error::Shape {
            op: "marginalize_roots",
            left: roots.shape(),
            right: scores.shape(),
        });
    }
    let w = scores.reshape(vec![k])?.softmax();
    w.segment_weighted_sum(roots, &[0..k])?.reshape(vec![roots.cols()])
}

/// Reborrows an optional generator for a single call.
pub(crate) fn reborrow<'a>(noise: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match noise {
        Some(r) => Some(&mut **r),
        None => None,
    }
}
