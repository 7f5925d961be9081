//! Batched reduction engine. Every step processes all live beams of all
//! samples together; sequences hold row references so unchanged nodes are
//! never copied.

use std::ops::Range;

use rand::RngCore;

use super::{ste_select_segments, stochastic_topk, Modules, ScoreMode, Strategy};
use crate::autodiff::{Piece, RowRef, Tape, Tensor, Var};
use crate::cells::{disentangled_scores_rows, entangled_scores_rows, grc_compose_rows};
use crate::error::{contract, Error, Result};

/// A node of an induced tree.
#[derive(Clone, Copy, Debug)]
pub struct TreeNode<'t> {
    pub vec: RowRef<'t>,
    /// 0 for terminals, otherwise 1 + the larger child height.
    pub height: usize,
    /// Covered terminal positions `lo..hi`.
    pub lo: usize,
    pub hi: usize,
}

/// Non-terminals of one beam in creation order (the root is last).
#[derive(Clone, Debug, Default)]
pub struct BeamTree<'t> {
    pub nonterminals: Vec<TreeNode<'t>>,
}

/// Result of encoding one sample.
#[derive(Debug)]
pub struct Encoded<'t> {
    /// `B × d` root vectors, `1 ≤ B ≤ K`.
    pub roots: Var<'t>,
    /// `[B]` accumulated log-softmax scores.
    pub scores: Var<'t>,
    pub traces: Vec<Vec<usize>>,
    pub trees: Vec<BeamTree<'t>>,
}

#[derive(Clone)]
struct Beam<'t> {
    seq: Vec<TreeNode<'t>>,
    score: Piece<'t>,
    score_val: f64,
    trace: Vec<usize>,
    tree: BeamTree<'t>,
}

impl<'t> Beam<'t> {
    fn merged(&self, j: usize, parent: RowRef<'t>) -> Self {
        let (l, r) = (self.seq[j], self.seq[j + 1]);
        let node = TreeNode {
            vec: parent,
            height: 1 + l.height.max(r.height),
            lo: l.lo,
            hi: r.hi,
        };
        let mut seq = Vec::with_capacity(self.seq.len() - 1);
        seq.extend_from_slice(&self.seq[..j]);
        seq.push(node);
        seq.extend_from_slice(&self.seq[j + 2..]);
        let mut trace = self.trace.clone();
        trace.push(j);
        let mut tree = self.tree.clone();
        tree.nonterminals.push(node);
        Beam {
            seq,
            score: self.score,
            score_val: self.score_val,
            trace,
            tree,
        }
    }
}

/// A selected merge: sample, parent beam, pair index, and the flat
/// candidate index when the merge was scored.
struct Choice {
    sample: usize,
    beam: usize,
    j: usize,
    flat: Option<usize>,
}

fn initial_beams<'t>(tape: &'t Tape, xs: &[Var<'t>]) -> Result<Vec<Vec<Beam<'t>>>> {
    let zero = tape.constant(Tensor::zeros(vec![xs.len().max(1)]));
    xs.iter()
        .enumerate()
        .map(|(s, x)| {
            let n = x.rows();
            if x.numel() == 0 || x.shape().len() != 2 {
                return Err(contract(format!("cannot encode an input of shape {:?}", x.shape())));
            }
            let seq = (0..n)
                .map(|i| TreeNode {
                    vec: x.row(i),
                    height: 0,
                    lo: i,
                    hi: i + 1,
                })
                .collect();
            Ok(vec![Beam {
                seq,
                score: Piece {
                    src: zero,
                    offset: s,
                    len: 1,
                },
                score_val: 0.0,
                trace: Vec::new(),
                tree: BeamTree::default(),
            }])
        })
        .collect()
}

/// Encodes every sample of `xs` (each `n_b × d`, `n_b ≥ 1`) with one shared
/// tape. `noise` enables Gumbel perturbation; without it selection is
/// deterministic.
pub fn encode_batch<'t>(
    tape: &'t Tape,
    xs: &[Var<'t>],
    strategy: Strategy<'_>,
    m: Modules<'_>,
    noise: Option<&mut dyn RngCore>,
) -> Result<Vec<Encoded<'t>>> {
    if let Strategy::SoftGreedy { mode, temperature } = strategy {
        return soft_greedy(tape, xs, m, mode, temperature, noise);
    }
    if let Strategy::Forced(traces) = strategy {
        if traces.len() != xs.len() {
            return Err(contract(format!("{} traces for {} samples", traces.len(), xs.len())));
        }
        for (t, x) in traces.iter().zip(xs) {
            if t.len() + 1 != x.rows() {
                return Err(Error::Trace(format!(
                    "trace of length {} for {} terminals",
                    t.len(),
                    x.rows()
                )));
            }
        }
    }
    if let Strategy::Beam { k: 0, .. } = strategy {
        return Err(contract("beam size must be at least 1"));
    }
    let mut noise = noise;
    let mut states = initial_beams(tape, xs)?;
    let mut step = 0;
    loop {
        let live: Vec<usize> = (0..states.len()).filter(|&s| states[s][0].seq.len() >= 2).collect();
        if live.is_empty() {
            break;
        }
        if let Some(limit) = crate::memory::budget_exceeded() {
            return Err(Error::OverBudget(limit));
        }
        let mut choices: Vec<Choice> = Vec::new();
        let mut scored: Option<(Var<'t>, Option<Var<'t>>)> = None;
        match strategy {
            Strategy::Forced(traces) => {
                for &s in &live {
                    let j = traces[s][step];
                    let len = states[s][0].seq.len();
                    if j + 1 >= len {
                        return Err(Error::Trace(format!(
                            "merge index {j} at step {step} with {len} nodes"
                        )));
                    }
                    choices.push(Choice {
                        sample: s,
                        beam: 0,
                        j,
                        flat: None,
                    });
                }
            }
            Strategy::Beam { k, mode } => {
                let mut left = Vec::new();
                let mut right = Vec::new();
                let mut segs: Vec<Range<usize>> = Vec::new();
                let mut owners: Vec<(usize, usize)> = Vec::new();
                for &s in &live {
                    for (b, beam) in states[s].iter().enumerate() {
                        let len = beam.seq.len();
                        if len == 2 {
                            choices.push(Choice {
                                sample: s,
                                beam: b,
                                j: 0,
                                flat: None,
                            });
                            continue;
                        }
                        let start = left.len();
                        for i in 0..len - 1 {
                            left.push(beam.seq[i].vec);
                            right.push(beam.seq[i + 1].vec);
                        }
                        segs.push(start..left.len());
                        owners.push((s, b));
                    }
                }
                if !segs.is_empty() {
                    let (parents, raw) = match mode {
                        ScoreMode::Entangled => {
                            let (p, r) = entangled_scores_rows(tape, &left, &right, m.cell, m.scorer()?)?;
                            (Some(p), r)
                        }
                        ScoreMode::Disentangled => (None, disentangled_scores_rows(tape, &left, &right, m.scorer()?)?),
                    };
                    let lp = raw.segment_log_softmax(&segs)?;
                    let lpv = lp.data();
                    // (sample, candidate score, beam, j, flat)
                    let mut pool: Vec<(usize, f64, usize, usize, usize)> = Vec::new();
                    for (sg, &(s, b)) in segs.iter().zip(&owners) {
                        let width = sg.len();
                        for (j, v) in stochastic_topk(&lpv[sg.clone()], k.min(width), super::reborrow(&mut noise)) {
                            pool.push((s, states[s][b].score_val + v, b, j, sg.start + j));
                        }
                    }
                    let mut at = 0;
                    while at < pool.len() {
                        let s = pool[at].0;
                        let end = at + pool[at..].iter().take_while(|c| c.0 == s).count();
                        let group = &mut pool[at..end];
                        let beams = &states[s];
                        group.sort_by(|a, b| {
                            b.1.total_cmp(&a.1).then_with(|| {
                                beams[a.2].trace.iter().chain([&a.3]).cmp(beams[b.2].trace.iter().chain([&b.3]))
                            })
                        });
                        for c in group.iter().take(k) {
                            choices.push(Choice {
                                sample: s,
                                beam: c.2,
                                j: c.3,
                                flat: Some(c.4),
                            });
                        }
                        at = end;
                    }
                    scored = Some((lp, parents));
                }
            }
            Strategy::SoftGreedy { .. } => unreachable!(),
        }

        let entangled_parents = scored.as_ref().and_then(|(_, p)| *p);
        let mut compose_idx = Vec::new();
        let (mut cl, mut cr) = (Vec::new(), Vec::new());
        for (c, ch) in choices.iter().enumerate() {
            if ch.flat.is_none() || entangled_parents.is_none() {
                let seq = &states[ch.sample][ch.beam].seq;
                cl.push(seq[ch.j].vec);
                cr.push(seq[ch.j + 1].vec);
                compose_idx.push(c);
            }
        }
        let mut parents: Vec<Option<RowRef<'t>>> = vec![None; choices.len()];
        if !cl.is_empty() {
            let p = grc_compose_rows(tape, &cl, &cr, m.cell)?;
            for (t, &c) in compose_idx.iter().enumerate() {
                parents[c] = Some(p.row(t));
            }
        }
        if let Some(p) = entangled_parents {
            for (c, ch) in choices.iter().enumerate() {
                if let Some(f) = ch.flat {
                    parents[c] = Some(p.row(f));
                }
            }
        }

        let mut fresh: Vec<Vec<Beam<'t>>> = live.iter().map(|_| Vec::new()).collect();
        let slot = |s: usize| live.iter().position(|&x| x == s).unwrap();
        let mut upd: Vec<(usize, usize)> = Vec::new();
        let (mut prev, mut incs) = (Vec::new(), Vec::new());
        for (c, ch) in choices.iter().enumerate() {
            let beam = states[ch.sample][ch.beam].merged(ch.j, parents[c].expect("parent assigned"));
            let dst = &mut fresh[slot(ch.sample)];
            if let (Some(f), Some((lp, _))) = (ch.flat, &scored) {
                upd.push((slot(ch.sample), dst.len()));
                prev.push(beam.score);
                incs.push(Piece {
                    src: *lp,
                    offset: f,
                    len: 1,
                });
            }
            dst.push(beam);
        }
        if !upd.is_empty() {
            let n = upd.len();
            let lpv = scored.as_ref().unwrap().0.data();
            let total = tape.gather(vec![n], &prev)?.add(tape.gather(vec![n], &incs)?)?;
            let tv = total.data();
            for (t, &(sl, b)) in upd.iter().enumerate() {
                let beam = &mut fresh[sl][b];
                beam.score = Piece {
                    src: total,
                    offset: t,
                    len: 1,
                };
                debug_assert!((beam.score_val + lpv[incs[t].offset] - tv[t]).abs() < 1e-9);
                beam.score_val = tv[t];
            }
        }
        for (sl, &s) in live.iter().enumerate() {
            states[s] = std::mem::take(&mut fresh[sl]);
        }
        step += 1;
    }

    let d = xs.first().map(|x| x.cols()).unwrap_or(0);
    states
        .into_iter()
        .map(|beams| {
            let refs: Vec<RowRef<'t>> = beams.iter().map(|b| b.seq[0].vec).collect();
            let pieces: Vec<Piece<'t>> = beams.iter().map(|b| b.score).collect();
            Ok(Encoded {
                roots: tape.gather_rows(&refs, 0, d)?,
                scores: tape.gather(vec![beams.len()], &pieces)?,
                traces: beams.iter().map(|b| b.trace.clone()).collect(),
                trees: beams.into_iter().map(|b| b.tree).collect(),
            })
        })
        .collect()
}

/// Single-sample beam search returning at most `k` beams.
pub fn beam_encode<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    k: usize,
    m: Modules<'_>,
    mode: ScoreMode,
    noise: Option<&mut dyn RngCore>,
) -> Result<Encoded<'t>> {
    let mut out = encode_batch(tape, &[x], Strategy::Beam { k, mode }, m, noise)?;
    Ok(out.pop().expect("one sample in, one out"))
}

/// Greedy reduction with straight-through selection. The new sequence is
/// `ℓ_i·H_i + y_i·P_i + r_i·H_{i+1}` with `ℓ = 1 − cumsum(y)` and
/// `r = cumsum(y) − y`; in disentangled mode a single parent is composed
/// from the selector-weighted children.
fn soft_greedy<'t>(
    tape: &'t Tape,
    xs: &[Var<'t>],
    m: Modules<'_>,
    mode: ScoreMode,
    temperature: f64,
    mut noise: Option<&mut dyn RngCore>,
) -> Result<Vec<Encoded<'t>>> {
    let mut states = initial_beams(tape, xs)?;
    let d = xs.first().map(|x| x.cols()).unwrap_or(0);
    loop {
        let live: Vec<usize> = (0..states.len()).filter(|&s| states[s][0].seq.len() >= 2).collect();
        if live.is_empty() {
            break;
        }
        let (mut left, mut right) = (Vec::new(), Vec::new());
        let mut segs = Vec::new();
        for &s in &live {
            let seq = &states[s][0].seq;
            let start = left.len();
            for i in 0..seq.len() - 1 {
                left.push(seq[i].vec);
                right.push(seq[i + 1].vec);
            }
            segs.push(start..left.len());
        }
        let (parents, raw) = match mode {
            ScoreMode::Entangled => {
                let (p, r) = entangled_scores_rows(tape, &left, &right, m.cell, m.scorer()?)?;
                (Some(p), r)
            }
            ScoreMode::Disentangled => (None, disentangled_scores_rows(tape, &left, &right, m.scorer()?)?),
        };
        let (y, picks) = ste_select_segments(raw, &segs, temperature, super::reborrow(&mut noise))?;
        let c = y.segment_cumsum(&segs)?;
        let keep_left = c.one_minus();
        let keep_right = c.sub(y)?;
        let hl = tape.gather_rows(&left, 0, d)?;
        let hr = tape.gather_rows(&right, 0, d)?;
        let p = match parents {
            Some(p) => p,
            None => {
                let cl = y.segment_weighted_sum(hl, &segs)?;
                let cr = y.segment_weighted_sum(hr, &segs)?;
                let lrows: Vec<_> = (0..segs.len()).map(|i| cl.row(i)).collect();
                let rrows: Vec<_> = (0..segs.len()).map(|i| cr.row(i)).collect();
                let one = grc_compose_rows(tape, &lrows, &rrows, m.cell)?;
                let spread: Vec<_> = segs
                    .iter()
                    .enumerate()
                    .flat_map(|(i, sg)| std::iter::repeat(one.row(i)).take(sg.len()))
                    .collect();
                tape.gather_rows(&spread, 0, d)?
            }
        };
        let next = hl
            .mul_col(keep_left)?
            .add(p.mul_col(y)?)?
            .add(hr.mul_col(keep_right)?)?;
        for ((&s, sg), &j) in live.iter().zip(&segs).zip(&picks) {
            let old = &states[s][0];
            let mut beam = old.merged(j, next.row(sg.start + j));
            for (i, node) in beam.seq.iter_mut().enumerate() {
                node.vec = next.row(sg.start + i);
            }
            states[s][0] = beam;
        }
    }
    states
        .into_iter()
        .map(|mut beams| {
            let b = beams.pop().expect("one beam");
            Ok(Encoded {
                roots: tape.gather_rows(&[b.seq[0].vec], 0, d)?,
                scores: tape.gather(vec![1], &[b.score])?,
                traces: vec![b.trace],
                trees: vec![b.tree],
            })
        })
        .collect()
}
