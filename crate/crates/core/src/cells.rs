//! Gated recursive cell, initial transformation, and the two pair scorers.
//!
//! All cell entry points are batched over rows: a composition call takes
//! `M` left/right child references and produces an `M × d` parent matrix.

use std::cell::Cell;

use rand::Rng;

use crate::autodiff::{kaiming_uniform, ParamId, ParamStore, RowRef, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};

pub const LN_EPS: f64 = 1e-5;

thread_local! {
    static COMPOSE_CALLS: Cell<u64> = const { Cell::new(0) };
    static SCORE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Per-thread counters of cell compositions and scored candidate pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub compose: u64,
    pub score: u64,
}

pub fn call_counts() -> CallCounts {
    CallCounts {
        compose: COMPOSE_CALLS.with(Cell::get),
        score: SCORE_CALLS.with(Cell::get),
    }
}

pub fn reset_call_counts() {
    COMPOSE_CALLS.with(|c| c.set(0));
    SCORE_CALLS.with(|c| c.set(0));
}

fn bump(counter: &'static std::thread::LocalKey<Cell<u64>>, n: usize) {
    counter.with(|c| c.set(c.get() + n as u64));
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrcParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub d: usize,
    pub d_cell: usize,
}

impl GrcParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, d_cell: usize, rng: &mut impl Rng) -> Self {
        GrcParams {
            w1: store.add(format!("{prefix}.w1"), kaiming_uniform(2 * d, d_cell, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![d_cell])),
            w2: store.add(format!("{prefix}.w2"), kaiming_uniform(d_cell, 4 * d, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![4 * d])),
            ln_gain: store.add(format!("{prefix}.ln_gain"), Tensor::full(vec![d], 1.0)),
            ln_bias: store.add(format!("{prefix}.ln_bias"), Tensor::zeros(vec![d])),
            d,
            d_cell,
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, c) = (self.d, self.d_cell);
        2 * d * c + c + c * 4 * d + 4 * d + 2 * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParams {
    /// Legacy linear scorer, stored as a `1 × d` row.
    pub legacy_wv: ParamId,
    pub ws1: ParamId,
    pub bs1: ParamId,
    pub ws2: ParamId,
    pub bs2: ParamId,
    pub d: usize,
    pub d_s: usize,
    /// Prefix width read from each child (`min(d_s, d)` when slicing, else `d`).
    pub width: usize,
}

impl ScorerParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_s: usize,
        slice: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let width = if slice { d_s.min(d) } else { d };
        ScorerParams {
            legacy_wv: store.add(format!("{prefix}.legacy_wv"), kaiming_uniform(d, 1, rng).reshape(vec![1, d]).unwrap()),
            ws1: store.add(format!("{prefix}.ws1"), kaiming_uniform(2 * width, d_s, rng)),
            bs1: store.add(format!("{prefix}.bs1"), Tensor::zeros(vec![d_s])),
            ws2: store.add(format!("{prefix}.ws2"), kaiming_uniform(d_s, 1, rng)),
            bs2: store.add(format!("{prefix}.bs2"), Tensor::zeros(vec![1])),
            d,
            d_s,
            width,
        }
    }

    /// Parameter count of the disentangled scorer.
    pub fn new_scorer_param_count(&self) -> usize {
        2 * self.width * self.d_s + self.d_s + self.d_s + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitTransform {
    pub w: ParamId,
    pub b: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl InitTransform {
    pub fn new(store: &mut ParamStore, prefix: &str, d_emb: usize, d: usize, rng: &mut impl Rng) -> Self {
        InitTransform {
            w: store.add(format!("{prefix}.w"), kaiming_uniform(d_emb, d, rng)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(vec![d])),
            ln_gain: store.add(format!("{prefix}.ln_gain"), Tensor::full(vec![d], 1.0)),
            ln_bias: store.add(format!("{prefix}.ln_bias"), Tensor::zeros(vec![d])),
        }
    }
}

/// Row-wise linear map followed by layer normalization; produces the
/// height-0 terminal nodes.
pub fn init_transform<'t>(tape: &'t Tape, tokens: Var<'t>, p: &InitTransform) -> Result<Var<'t>> {
    tokens
        .linear(tape.param(p.w), Some(tape.param(p.b)))?
        .layer_norm(tape.param(p.ln_gain), tape.param(p.ln_bias), LN_EPS)
}

/// `σ(l)⊙cl + σ(r)⊙cr + σ(g)⊙h` where `proj = [l; r; g; h]` and
/// `children = [cl; cr]`, fused so that no per-gate activations are kept.
fn gated_sum<'t>(tape: &'t Tape, proj: Var<'t>, children: Var<'t>) -> Result<Var<'t>> {
    let (m, p4) = (proj.rows(), proj.cols());
    let d = p4 / 4;
    if p4 != 4 * d || children.cols() != 2 * d || children.rows() != m {
        return Err(Error::Shape {
            op: "gated_sum",
            left: proj.shape(),
            right: children.shape(),
        });
    }
    use crate::autodiff::sigmoid;
    let (pv, cv) = (proj.data(), children.data());
    let mut out = vec![0.0; m * d];
    for r in 0..m {
        let pr = &pv[r * 4 * d..(r + 1) * 4 * d];
        let cr = &cv[r * 2 * d..(r + 1) * 2 * d];
        for j in 0..d {
            out[r * d + j] = sigmoid(pr[j]) * cr[j]
                + sigmoid(pr[d + j]) * cr[d + j]
                + sigmoid(pr[2 * d + j]) * pr[3 * d + j];
        }
    }
    Ok(tape.push_op(
        "gated_sum",
        vec![m, d],
        out,
        &[proj, children],
        0,
        Box::new(move |a| {
            let (pv, cv, g) = (a.inputs[0], a.inputs[1], a.grad);
            let mut dp = vec![0.0; m * 4 * d];
            let mut dc = vec![0.0; m * 2 * d];
            for r in 0..m {
                let pr = &pv[r * 4 * d..(r + 1) * 4 * d];
                let cr = &cv[r * 2 * d..(r + 1) * 2 * d];
                let dpr = &mut dp[r * 4 * d..(r + 1) * 4 * d];
                let dcr = &mut dc[r * 2 * d..(r + 1) * 2 * d];
                for j in 0..d {
                    let go = g[r * d + j];
                    let (sl, sr, sg) = (sigmoid(pr[j]), sigmoid(pr[d + j]), sigmoid(pr[2 * d + j]));
                    dpr[j] = go * cr[j] * sl * (1.0 - sl);
                    dpr[d + j] = go * cr[d + j] * sr * (1.0 - sr);
                    dpr[2 * d + j] = go * pr[3 * d + j] * sg * (1.0 - sg);
                    dpr[3 * d + j] = go * sg;
                    dcr[j] = go * sl;
                    dcr[d + j] = go * sr;
                }
            }
            vec![a.needs[0].then_some(dp), a.needs[1].then_some(dc)]
        }),
    ))
}

/// Composes `M` child pairs at once; row `i` of the result is the parent of
/// `left[i]` and `right[i]`.
pub fn grc_compose_rows<'t>(
    tape: &'t Tape,
    left: &[RowRef<'t>],
    right: &[RowRef<'t>],
    p: &GrcParams,
) -> Result<Var<'t>> {
    let children = tape.gather_pairs(left, right, p.d)?;
    if children.cols() != 2 * p.d {
        return Err(Error::Shape {
            op: "grc_compose",
            left: children.shape(),
            right: vec![2 * p.d],
        });
    }
    bump(&COMPOSE_CALLS, left.len());
    let hidden = children
        .linear(tape.param(p.w1), Some(tape.param(p.b1)))?
        .gelu();
    let proj = hidden.linear(tape.param(p.w2), Some(tape.param(p.b2)))?;
    gated_sum(tape, proj, children)?.layer_norm(tape.param(p.ln_gain), tape.param(p.ln_bias), LN_EPS)
}

/// Single-pair composition of two `d`-vectors.
pub fn grc_compose<'t>(tape: &'t Tape, child_l: Var<'t>, child_r: Var<'t>, p: &GrcParams) -> Result<Var<'t>> {
    let l = child_l.reshape(vec![1, child_l.numel()])?;
    let r = child_r.reshape(vec![1, child_r.numel()])?;
    grc_compose_rows(tape, &[l.row(0)], &[r.row(0)], p)?.reshape(vec![p.d])
}

/// `W_v · v` for each row of `parents`; returns one score per row.
pub fn legacy_score<'t>(tape: &'t Tape, parents: Var<'t>, s: &ScorerParams) -> Result<Var<'t>> {
    let rows = parents.rows();
    let v = parents.reshape(vec![rows, parents.cols()])?;
    v.matmul_t(tape.param(s.legacy_wv))?.reshape(vec![rows])
}

/// Composes every adjacent pair of `h` (`n × d`) and scores each candidate
/// parent with the legacy scorer.
pub fn entangled_candidate_scores<'t>(
    tape: &'t Tape,
    h: Var<'t>,
    cell: &GrcParams,
    s: &ScorerParams,
) -> Result<(Var<'t>, Var<'t>)> {
    let n = h.rows();
    if n < 2 {
        return Err(contract(format!("entangled scoring needs n >= 2, got {n}")));
    }
    let left: Vec<_> = (0..n - 1).map(|i| h.row(i)).collect();
    let right: Vec<_> = (1..n).map(|i| h.row(i)).collect();
    entangled_scores_rows(tape, &left, &right, cell, s)
}

/// Batched entangled scoring over arbitrary candidate pairs.
pub fn entangled_scores_rows<'t>(
    tape: &'t Tape,
    left: &[RowRef<'t>],
    right: &[RowRef<'t>],
    cell: &GrcParams,
    s: &ScorerParams,
) -> Result<(Var<'t>, Var<'t>)> {
    let parents = grc_compose_rows(tape, left, right, cell)?;
    bump(&SCORE_CALLS, left.len());
    let scores = legacy_score(tape, parents, s)?;
    Ok((parents, scores))
}

/// Batched disentangled scoring: a two-layer GeLU MLP over the concatenated
/// width-prefixes of each child pair. The recursive cell is not involved.
pub fn disentangled_scores_rows<'t>(
    tape: &'t Tape,
    left: &[RowRef<'t>],
    right: &[RowRef<'t>],
    s: &ScorerParams,
) -> Result<Var<'t>> {
    let pairs = tape.gather_pairs(left, right, s.width)?;
    if pairs.cols() != 2 * s.width {
        return Err(Error::Shape {
            op: "disentangled_score",
            left: pairs.shape(),
            right: vec![2 * s.width],
        });
    }
    bump(&SCORE_CALLS, left.len());
    let m = left.len();
    pairs
        .linear(tape.param(s.ws1), Some(tape.param(s.bs1)))?
        .gelu()
        .linear(tape.param(s.ws2), Some(tape.param(s.bs2)))?
        .reshape(vec![m])
}

/// Disentangled score of one child pair.
pub fn disentangled_score<'t>(tape: &'t Tape, h_i: Var<'t>, h_j: Var<'t>, s: &ScorerParams) -> Result<Var<'t>> {
    let l = h_i.reshape(vec![1, h_i.numel()])?;
    let r = h_j.reshape(vec![1, h_j.numel()])?;
    disentangled_scores_rows(tape, &[l.row(0)], &[r.row(0)], s)?.reshape(vec![1])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{check_store, DEFAULT_STEP};
    use crate::memory::track;

    fn setup(d: usize, d_cell: usize, d_s: usize, seed: u64) -> (ParamStore, GrcParams, ScorerParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g = GrcParams::new(&mut store, "grc", d, d_cell, &mut rng);
        let s = ScorerParams::new(&mut store, "scorer", d, d_s, true, &mut rng);
        (store, g, s)
    }

    fn zero_all(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let fill = if name.ends_with("ln_gain") { 1.0 } else { 0.0 };
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::full(shape, fill));
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
        Tensor::from_fn(vec![d], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_params_reduce_to_half_sum() {
        let (mut store, g, _) = setup(6, 24, 4, 1);
        zero_all(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (rand_vec(&mut rng, 6), rand_vec(&mut rng, 6));
        let tape = Tape::with_params(&store);
        let p = grc_compose(&tape, tape.constant(a.clone()), tape.constant(b.clone()), &g).unwrap();
        let half = Tensor::from_fn(vec![6], |i| 0.5 * a.data()[i] + 0.5 * b.data()[i]);
        let ones = tape.constant(Tensor::full(vec![6], 1.0));
        let zeros = tape.constant(Tensor::zeros(vec![6]));
        let expect = tape.constant(half).layer_norm(ones, zeros, LN_EPS).unwrap();
        assert!(p.value().max_abs_diff(&expect.value()) < 1e-12);

        let same = grc_compose(&tape, tape.constant(a.clone()), tape.constant(a.clone()), &g).unwrap();
        let ln_a = tape.constant(a).layer_norm(ones, zeros, LN_EPS).unwrap();
        assert!(same.value().max_abs_diff(&ln_a.value()) < 1e-12);
    }

    #[test]
    fn compose_output_is_normalized() {
        let (store, g, _) = setup(16, 64, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::with_params(&store);
        let p = grc_compose(
            &tape,
            tape.constant(rand_vec(&mut rng, 16)),
            tape.constant(rand_vec(&mut rng, 16)),
            &g,
        )
        .unwrap()
        .value();
        let mean = p.data().iter().sum::<f64>() / 16.0;
        let var = p.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn compose_gradients_match_finite_differences() {
        let (mut store, g, _) = setup(3, 5, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = store.add("a", rand_vec(&mut rng, 3));
        let b = store.add("b", rand_vec(&mut rng, 3));
        let w = rand_vec(&mut rng, 3);
        let err = check_store(
            &mut store,
            |t| {
                let p = grc_compose(t, t.param(a), t.param(b), &g)?;
                Ok(p.mul(t.constant(w.clone()))?.sum())
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn init_transform_shapes_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let it = InitTransform::new(&mut store, "init", 5, 4, &mut rng);
        store.set(it.w, Tensor::zeros(vec![5, 4]));
        store.set(it.b, Tensor::vector(vec![0.1, 0.7, -0.3, 0.2]));
        let tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::from_fn(vec![3, 5], |i| i as f64));
        let y = init_transform(&tape, x, &it).unwrap().value();
        assert_eq!(y.shape(), &[3, 4]);
        assert_eq!(y.row(0), y.row(1));
        assert_eq!(y.row(1), y.row(2));
        let one = init_transform(&tape, tape.constant(Tensor::zeros(vec![1, 5])), &it).unwrap();
        assert_eq!(one.shape(), vec![1, 4]);
    }

    #[test]
    fn init_transform_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let it = InitTransform::new(&mut store, "init", 4, 3, &mut rng);
        let x = store.add("x", Tensor::from_fn(vec![3, 4], |_| rng.gen_range(-1.0..1.0)));
        let w = Tensor::from_fn(vec![3, 3], |_| rng.gen_range(-1.0..1.0));
        let err = check_store(
            &mut store,
            |t| Ok(init_transform(t, t.param(x), &it)?.mul(t.constant(w.clone()))?.sum()),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn legacy_score_is_linear() {
        let (mut store, _, s) = setup(5, 20, 4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let v = rand_vec(&mut rng, 5);
        let tape = Tape::with_params(&store);
        let one = legacy_score(&tape, tape.constant(v.clone()), &s).unwrap().item();
        let v2 = Tensor::from_fn(vec![5], |i| 2.0 * v.data()[i]);
        let two = legacy_score(&tape, tape.constant(v2), &s).unwrap().item();
        assert!((two - 2.0 * one).abs() < 1e-12);
        let wv = store.get(s.legacy_wv).clone();
        let dot: f64 = wv.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        assert!((one - dot).abs() < 1e-12);
        drop(tape);
        store.set(s.legacy_wv, Tensor::zeros(vec![1, 5]));
        let tape = Tape::with_params(&store);
        assert_eq!(legacy_score(&tape, tape.constant(v), &s).unwrap().item(), 0.0);
    }

    #[test]
    fn entangled_candidates_match_standalone_composition() {
        let (store, g, s) = setup(4, 16, 4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = Tensor::from_fn(vec![5, 4], |_| rng.gen_range(-1.0..1.0));
        let tape = Tape::with_params(&store);
        let hv = tape.constant(h.clone());
        let (parents, scores) = entangled_candidate_scores(&tape, hv, &g, &s).unwrap();
        assert_eq!(parents.shape(), vec![4, 4]);
        assert_eq!(scores.shape(), vec![4]);
        for i in 0..4 {
            let a = tape.constant(Tensor::vector(h.row(i).to_vec()));
            let b = tape.constant(Tensor::vector(h.row(i + 1).to_vec()));
            let p = grc_compose(&tape, a, b, &g).unwrap();
            let sc = legacy_score(&tape, p, &s).unwrap().item();
            assert_eq!(p.value().data(), parents.value().row(i));
            assert_eq!(sc.to_bits(), scores.value().data()[i].to_bits());
        }
        let two = tape.constant(Tensor::from_fn(vec![2, 4], |i| i as f64));
        let (p, sc) = entangled_candidate_scores(&tape, two, &g, &s).unwrap();
        assert_eq!((p.rows(), sc.numel()), (1, 1));
        let one = tape.constant(Tensor::zeros(vec![1, 4]));
        assert!(entangled_candidate_scores(&tape, one, &g, &s).is_err());
    }

    #[test]
    fn entangled_memory_scales_with_candidates() {
        let (store, g, s) = setup(16, 64, 8, 13);
        let h = Tensor::from_fn(vec![10, 16], |i| (i as f64).sin());
        let (_, single) = track("single", || {
            let tape = Tape::with_params(&store);
            let hv = tape.constant(h.clone());
            grc_compose_rows(&tape, &[hv.row(0)], &[hv.row(1)], &g).unwrap();
        });
        let (_, all) = track("all", || {
            let tape = Tape::with_params(&store);
            let hv = tape.constant(h.clone());
            entangled_candidate_scores(&tape, hv, &g, &s).unwrap();
        });
        let leaf = 10 * 16;
        assert!(all.peak_scalars - leaf >= 9 * (single.peak_scalars - leaf));
    }

    #[test]
    fn disentangled_score_examples() {
        let (mut store, _, s) = setup(80, 16, 64, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (a, b) = (rand_vec(&mut rng, 80), rand_vec(&mut rng, 80));
        {
            let tape = Tape::with_params(&store);
            let base = disentangled_score(&tape, tape.constant(a.clone()), tape.constant(b.clone()), &s)
                .unwrap()
                .item();
            let mut a2 = a.clone();
            a2.data_mut()[70] += 3.0;
            let mut b2 = b.clone();
            b2.data_mut()[64] -= 1.5;
            let pert = disentangled_score(&tape, tape.constant(a2), tape.constant(b2), &s)
                .unwrap()
                .item();
            assert_eq!(base.to_bits(), pert.to_bits());
        }
        zero_all(&mut store);
        store.set(s.bs2, Tensor::vector(vec![0.25]));
        let tape = Tape::with_params(&store);
        let v = disentangled_score(&tape, tape.constant(a), tape.constant(b), &s).unwrap();
        assert_eq!(v.item(), 0.25);
    }

    #[test]
    fn narrow_states_use_full_width() {
        let (_, _, s) = setup(32, 16, 64, 16);
        assert_eq!(s.width, 32);
        let (_, _, s) = setup(128, 16, 64, 16);
        assert_eq!(s.width, 64);
    }

    #[test]
    fn disentangled_gradient_beyond_slice_is_zero() {
        let (mut store, _, s) = setup(8, 16, 3, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let a = store.add("a", rand_vec(&mut rng, 8));
        let b = store.add("b", rand_vec(&mut rng, 8));
        let tape = Tape::with_params(&store);
        let (av, bv) = (tape.param(a), tape.param(b));
        let sc = disentangled_score(&tape, av, bv, &s).unwrap();
        let g = tape.backward(sc).unwrap();
        for t in [g.param(a).unwrap(), g.param(b).unwrap()] {
            assert!(t.data()[3..].iter().all(|&v| v == 0.0));
        }
        drop(tape);
        let err = check_store(
            &mut store,
            |t| disentangled_score(t, t.param(a), t.param(b), &s),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn parameter_counts() {
        let (store, g, s) = setup(128, 512, 64, 19);
        assert_eq!(g.param_count(), 2 * 128 * 512 + 512 + 512 * 4 * 128 + 4 * 128 + 2 * 128);
        let grc_actual: usize = [g.w1, g.b1, g.w2, g.b2, g.ln_gain, g.ln_bias]
            .iter()
            .map(|&id| store.get(id).numel())
            .sum();
        assert_eq!(grc_actual, g.param_count());
        let sc_actual: usize = [s.ws1, s.bs1, s.ws2, s.bs2]
            .iter()
            .map(|&id| store.get(id).numel())
            .sum();
        assert_eq!(sc_actual, s.new_scorer_param_count());
        assert_eq!(s.new_scorer_param_count(), 2 * 64 * 64 + 64 + 64 + 1);
    }

    #[test]
    fn call_counters_track_rows() {
        let (store, g, s) = setup(4, 8, 4, 20);
        reset_call_counts();
        let tape = Tape::with_params(&store);
        let h = tape.constant(Tensor::from_fn(vec![6, 4], |i| i as f64 * 0.1));
        entangled_candidate_scores(&tape, h, &g, &s).unwrap();
        assert_eq!(call_counts(), CallCounts { compose: 5, score: 5 });
    }
}
