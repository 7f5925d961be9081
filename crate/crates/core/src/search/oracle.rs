//! Brute-force enumeration of every merge order of a short sequence.

use super::{Modules, ScoreMode};
use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::cells::{disentangled_score, grc_compose, legacy_score};
use crate::error::{Error, Result};

pub const ORACLE_MAX_N: usize = 6;

#[derive(Clone, Debug)]
pub struct OracleSequence {
    /// Sum over steps of the chosen pair's log-probability.
    pub score: f64,
    pub root: Vec<f64>,
    pub trace: Vec<usize>,
}

/// Every one of the `(n−1)!` merge orders of the rows of `x`, enumerated
/// depth-first with lower pair indices first.
pub fn exhaustive_merge_oracle(
    store: &ParamStore,
    x: &Tensor,
    m: Modules<'_>,
    mode: ScoreMode,
) -> Result<Vec<OracleSequence>> {
    let n = x.rows();
    if n > ORACLE_MAX_N {
        return Err(Error::OracleGuard(n));
    }
    if n == 0 {
        return Err(crate::error::contract("oracle needs at least one row"));
    }
    let start: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
    let mut out = Vec::new();
    walk(store, m, mode, start, 0.0, Vec::new(), &mut out)?;
    Ok(out)
}

fn compose(store: &ParamStore, m: Modules<'_>, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let tape = Tape::with_params(store);
    let p = grc_compose(
        &tape,
        tape.constant(Tensor::vector(a.to_vec())),
        tape.constant(Tensor::vector(b.to_vec())),
        m.cell,
    )?;
    Ok(p.value().into_vec())
}

fn pair_score(store: &ParamStore, m: Modules<'_>, mode: ScoreMode, a: &[f64], b: &[f64]) -> Result<f64> {
    let tape = Tape::with_params(store);
    let (va, vb) = (
        tape.constant(Tensor::vector(a.to_vec())),
        tape.constant(Tensor::vector(b.to_vec())),
    );
    Ok(match mode {
        ScoreMode::Entangled => legacy_score(&tape, grc_compose(&tape, va, vb, m.cell)?, m.scorer()?)?.item(),
        ScoreMode::Disentangled => disentangled_score(&tape, va, vb, m.scorer()?)?.item(),
    })
}

fn walk(
    store: &ParamStore,
    m: Modules<'_>,
    mode: ScoreMode,
    seq: Vec<Vec<f64>>,
    score: f64,
    trace: Vec<usize>,
    out: &mut Vec<OracleSequence>,
) -> Result<()> {
    match seq.len() {
        1 => {
            out.push(OracleSequence {
                score,
                root: seq.into_iter().next().unwrap(),
                trace,
            });
            Ok(())
        }
        2 => {
            let root = compose(store, m, &seq[0], &seq[1])?;
            let mut trace = trace;
            trace.push(0);
            out.push(OracleSequence { score, root, trace });
            Ok(())
        }
        len => {
            let raw = (0..len - 1)
                .map(|i| pair_score(store, m, mode, &seq[i], &seq[i + 1]))
                .collect::<Result<Vec<_>>>()?;
            let peak = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let norm = peak + raw.iter().map(|s| (s - peak).exp()).sum::<f64>().ln();
            for j in 0..len - 1 {
                let parent = compose(store, m, &seq[j], &seq[j + 1])?;
                let mut next = seq[..j].to_vec();
                next.push(parent);
                next.extend_from_slice(&seq[j + 2..]);
                let mut t = trace.clone();
                t.push(j);
                walk(store, m, mode, next, score + raw[j] - norm, t, out)?;
            }
            Ok(())
        }
    }
}
