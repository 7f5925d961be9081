//! Self-checks shared by the command line and the acceptance tests: a
//! finite-difference sweep over every differentiable op and module, and a
//! beam-versus-enumeration comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{check_store, check_store_params, finite_diff_check, ParamStore, Tape, Tensor, Var, DEFAULT_STEP};
use crate::cells::{
    disentangled_score, entangled_candidate_scores, grc_compose, init_transform, legacy_score, GrcParams,
    InitTransform, ScorerParams,
};
use crate::error::Result;
use crate::model::{classify, cross_entropy, ClassifierHead};
use crate::parent_attention::{
    attention_pool, gau_block, record_tree, relative_height_bias, GauParams, PoolParams, PARENT_MAX_DIST,
};
use crate::search::{beam_encode, exhaustive_merge_oracle, marginalize_roots, Modules, ScoreMode};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Seed of the reference gradient suite run by `gradcheck`.
pub const SUITE_SEED: u64 = 0;

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Fixed random weighting that turns any tensor into a scalar loss.
fn probe<'t>(x: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = x.tape().constant(rand_t(&mut rng, &x.shape()));
    Ok(x.mul(w)?.sum())
}

/// Random shapes drawn per op.
pub const OP_TRIALS: usize = 10;

fn segments(n: usize) -> Vec<std::ops::Range<usize>> {
    let cut = n.div_ceil(3);
    vec![0..cut, cut..n]
}

/// Max relative gradient error of every elementary op over [`OP_TRIALS`]
/// random shapes each. Shapes are `r × c` with `r ∈ 1..=4`, `c ∈ 3..=5`.
fn op_cases(seed: u64) -> Result<Vec<GradReport>> {
    type F = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;
    type S = fn(usize, usize) -> Vec<Vec<usize>>;
    let m: S = |r, c| vec![vec![r, c]];
    let mm: S = |r, c| vec![vec![r, c], vec![r, c]];
    let v: S = |r, c| vec![vec![r * c]];
    let cases: Vec<(&str, S, F)> = vec![
        ("sigmoid", m, |_, p| probe(p[0].sigmoid(), 1)),
        ("gelu", m, |_, p| probe(p[0].gelu(), 2)),
        ("silu", m, |_, p| probe(p[0].silu(), 3)),
        ("linear", |r, c| vec![vec![r, c], vec![c, r + 1], vec![r + 1]], |_, p| {
            probe(p[0].linear(p[1], Some(p[2]))?, 4)
        }),
        ("matmul", |r, c| vec![vec![r, c], vec![c, 6 - r]], |_, p| probe(p[0].matmul(p[1])?, 5)),
        ("matmul_t", |r, c| vec![vec![r, c], vec![6 - r, c]], |_, p| probe(p[0].matmul_t(p[1])?, 6)),
        ("add", mm, |_, p| probe(p[0].add(p[1])?, 7)),
        ("sub", mm, |_, p| probe(p[0].sub(p[1])?, 8)),
        ("mul", mm, |_, p| probe(p[0].mul(p[1])?, 9)),
        ("add_row", |r, c| vec![vec![r, c], vec![c]], |_, p| probe(p[0].add_row(p[1])?, 10)),
        ("mul_row", |r, c| vec![vec![r, c], vec![c]], |_, p| probe(p[0].mul_row(p[1])?, 11)),
        ("mul_col", |r, c| vec![vec![r, c], vec![r]], |_, p| probe(p[0].mul_col(p[1])?, 12)),
        ("scale", m, |_, p| probe(p[0].scale(-1.7), 13)),
        ("add_scalar", m, |_, p| probe(p[0].sigmoid().add_scalar(0.4), 14)),
        ("one_minus", m, |_, p| probe(p[0].one_minus(), 15)),
        ("mul_const", m, |_, p| {
            let k = (0..p[0].numel()).map(|i| (i % 4) as f64 * 0.75 - 1.0).collect();
            probe(p[0].mul_const(k)?, 16)
        }),
        ("dropout", m, |_, p| probe(p[0].dropout(0.3, &mut ChaCha8Rng::seed_from_u64(99))?, 17)),
        ("reshape", m, |_, p| {
            let n = p[0].numel();
            probe(p[0].reshape(vec![n, 1])?.sigmoid(), 18)
        }),
        ("concat", |r, c| vec![vec![r, c], vec![r, 7 - c]], |_, p| probe(p[0].concat(p[1])?, 19)),
        ("slice_cols", m, |_, p| {
            let c = p[0].cols();
            probe(p[0].slice_cols(c / 3, c - c / 3)?, 20)
        }),
        ("slice_prefix", m, |_, p| {
            let c = p[0].cols();
            probe(p[0].slice_prefix(c - 1)?, 21)
        }),
        ("layer_norm", |r, c| vec![vec![r, c], vec![c], vec![c]], |_, p| {
            probe(p[0].layer_norm(p[1], p[2], 1e-5)?, 22)
        }),
        ("masked_softmax", m, |_, p| {
            let c = p[0].cols();
            let mask: Vec<bool> = (0..p[0].numel()).map(|i| i % c == 0 || i % 3 != 1).collect();
            probe(p[0].masked_softmax(&mask)?, 23)
        }),
        ("softmax", m, |_, p| probe(p[0].softmax(), 24)),
        ("log_softmax", m, |_, p| probe(p[0].log_softmax(), 25)),
        ("segment_log_softmax", v, |_, p| probe(p[0].segment_log_softmax(&segments(p[0].numel()))?, 26)),
        ("segment_softmax", v, |_, p| probe(p[0].segment_softmax(&segments(p[0].numel()))?, 27)),
        ("segment_cumsum", v, |_, p| probe(p[0].segment_cumsum(&segments(p[0].numel()))?, 28)),
        ("segment_weighted_sum", |r, c| vec![vec![r + 1], vec![r + 1, c]], |_, p| {
            probe(p[0].segment_weighted_sum(p[1], &segments(p[0].numel()))?, 29)
        }),
        ("sum", m, |_, p| Ok(p[0].sigmoid().sum())),
        ("mean", m, |_, p| Ok(p[0].sigmoid().mean())),
        ("pick", m, |_, p| {
            let n = p[0].numel();
            probe(p[0].pick(&[n - 1, 0, n / 2, n - 1])?, 30)
        }),
        ("gather_rows", m, |t, p| {
            let (r, c) = (p[0].rows(), p[0].cols());
            probe(t.gather_rows(&[p[0].row(r - 1), p[0].row(0), p[0].row(r - 1)], 1, c - 1)?, 31)
        }),
        ("gather_pairs", m, |t, p| {
            let r = p[0].rows();
            probe(t.gather_pairs(&[p[0].row(0), p[0].row(r / 2)], &[p[0].row(r - 1), p[0].row(0)], 3)?, 32)
        }),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, f) in cases {
        let mut worst = 0.0f64;
        for _ in 0..OP_TRIALS {
            let (r, c) = (rng.gen_range(1..=4), rng.gen_range(3..=5));
            let params: Vec<Tensor> = shapes(r, c).iter().map(|s| rand_t(&mut rng, s)).collect();
            worst = worst.max(finite_diff_check(f, &params, DEFAULT_STEP)?);
        }
        out.push(GradReport {
            name: name.to_string(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}

fn module_case(
    name: &str,
    store: &mut ParamStore,
    f: impl for<'t> Fn(&'t Tape) -> Result<Var<'t>>,
) -> Result<GradReport> {
    Ok(GradReport {
        name: name.to_string(),
        max_rel_error: check_store(store, f, DEFAULT_STEP)?,
    })
}

/// Finite-difference check of every differentiable op and module.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut out = op_cases(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let d = 4;

    let mut store = ParamStore::new();
    let init = InitTransform::new(&mut store, "init", 3, d, &mut rng);
    let tok = store.add("tokens", rand_t(&mut rng, &[3, 3]));
    out.push(module_case("init_transform", &mut store, |t| {
        probe(init_transform(t, t.param(tok), &init)?, 40)
    })?);

    let mut store = ParamStore::new();
    let cell = GrcParams::new(&mut store, "cell", d, 3 * d, &mut rng);
    let scorer = ScorerParams::new(&mut store, "scorer", d, 3, true, &mut rng);
    let l = store.add("l", rand_t(&mut rng, &[d]));
    let r = store.add("r", rand_t(&mut rng, &[d]));
    let h = store.add("h", rand_t(&mut rng, &[5, d]));
    out.push(module_case("grc_compose", &mut store, |t| {
        probe(grc_compose(t, t.param(l), t.param(r), &cell)?, 41)
    })?);
    out.push(module_case("legacy_score", &mut store, |t| {
        probe(legacy_score(t, grc_compose(t, t.param(l), t.param(r), &cell)?, &scorer)?, 42)
    })?);
    out.push(module_case("entangled_candidate_scores", &mut store, |t| {
        probe(entangled_candidate_scores(t, t.param(h), &cell, &scorer)?.1, 43)
    })?);
    out.push(module_case("disentangled_score", &mut store, |t| {
        probe(disentangled_score(t, t.param(l), t.param(r), &scorer)?, 44)
    })?);
    // The output bias shifts every candidate score equally, so it cancels
    // in the beam weights and has no gradient to compare.
    let ids: Vec<_> = store.ids().filter(|&id| id != scorer.bs2).collect();
    out.push(GradReport {
        name: "beam_encode+marginalize_roots".into(),
        max_rel_error: check_store_params(
            &mut store,
            &ids,
            |t| {
                let m = Modules::new(&cell, &scorer);
                let enc = beam_encode(t, t.param(h), 3, m, ScoreMode::Disentangled, None)?;
                let root = probe(marginalize_roots(enc.roots, enc.scores)?, 45)?;
                root.add(probe(enc.scores, 50)?)
            },
            DEFAULT_STEP,
        )?,
    });

    let mut store = ParamStore::new();
    let gau = GauParams::new(&mut store, "gau", d, 3, PARENT_MAX_DIST, &mut rng);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, rand_t(&mut rng, &shape));
    }
    let x = store.add("x", rand_t(&mut rng, &[3, d]));
    let p = store.add(
        "p",
        Tensor::from_fn(vec![3, d], |i| ((i * 7) % 5) as f64 - 2.0 + 0.3 * (i as f64).sin()),
    );
    let mask = vec![true, true, true, false, true, true, true, false, true];
    // The key offset adds the same amount to every key score of a query.
    let ids: Vec<_> = store.ids().filter(|&id| id != gau.zb_k).collect();
    out.push(GradReport {
        name: "gau_block".into(),
        max_rel_error: check_store_params(
            &mut store,
            &ids,
            |t| {
                let pos =
                    relative_height_bias(t, &[0, 0, 0], &[1, 2, 3], &mask, t.param(gau.rel_table), PARENT_MAX_DIST)?;
                probe(gau_block(t, t.param(x), t.param(p), &mask, &gau, pos, None)?, 46)
            },
            DEFAULT_STEP,
        )?,
    });

    let mut store = ParamStore::new();
    let cell = GrcParams::new(&mut store, "cell", d, 3 * d, &mut rng);
    let terms = store.add("terms", rand_t(&mut rng, &[4, d]));
    out.push(module_case("tree_record", &mut store, |t| {
        let rec = record_tree(t, &[1, 0, 0], t.param(terms), &cell)?;
        probe(rec.nonterminals.expect("three merges"), 47)
    })?);

    let mut store = ParamStore::new();
    let pool = PoolParams::new(&mut store, "pool", d, &mut rng);
    let rows = store.add("rows", rand_t(&mut rng, &[5, d]));
    out.push(module_case("attention_pool", &mut store, |t| {
        probe(attention_pool(t, t.param(rows), &pool)?, 48)
    })?);

    let mut store = ParamStore::new();
    let head = ClassifierHead::new(&mut store, "head", d, 10, &mut rng);
    let feat = store.add("feat", rand_t(&mut rng, &[d]));
    out.push(module_case("classify", &mut store, |t| probe(classify(t, t.param(feat), &head)?, 49))?);
    out.push(module_case("cross_entropy", &mut store, |t| {
        let logits = classify(t, t.param(feat), &head)?;
        cross_entropy(logits, &[6])
    })?);
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub n: usize,
    pub k: usize,
    pub beams: usize,
    pub enumerated: usize,
    /// Beams whose trace is among the oracle's top `k`.
    pub matched: usize,
    pub max_root_dev: f64,
    pub max_score_dev: f64,
    /// `Σ exp(score)` over every enumerated merge order.
    pub total_probability: f64,
}

impl OracleReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.matched == self.beams
            && self.beams == self.k.min(self.enumerated)
            && self.max_root_dev < tol
            && self.max_score_dev < tol
            && (self.total_probability - 1.0).abs() < tol
    }
}

/// Runs noise-free beam search with `k` beams on a random `n × d` input and
/// compares every beam against the exhaustive enumeration of merge orders.
pub fn oracle_check(n: usize, k: usize, d: usize, mode: ScoreMode, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cell = GrcParams::new(&mut store, "cell", d, 4 * d, &mut rng);
    let scorer = ScorerParams::new(&mut store, "scorer", d, d.div_ceil(2), true, &mut rng);
    let wv = Tensor::from_fn(vec![1, d], |_| rng.gen_range(-2.0..2.0));
    store.set(scorer.legacy_wv, wv);
    let x = rand_t(&mut rng, &[n, d]);
    let m = Modules::new(&cell, &scorer);
    let mut all = exhaustive_merge_oracle(&store, &x, m, mode)?;
    let total_probability = all.iter().map(|s| s.score.exp()).sum();
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.trace.cmp(&b.trace)));
    let enumerated = all.len();
    let top = &all[..k.min(enumerated)];
    let tape = Tape::with_params(&store);
    let enc = beam_encode(&tape, tape.constant(x), k, m, mode, None)?;
    let (roots, scores) = (enc.roots.value(), enc.scores.value());
    let mut report = OracleReport {
        n,
        k,
        beams: roots.rows(),
        enumerated,
        matched: 0,
        max_root_dev: 0.0,
        max_score_dev: 0.0,
        total_probability,
    };
    for (b, trace) in enc.traces.iter().enumerate() {
        let Some(o) = top.iter().find(|o| &o.trace == trace) else {
            continue;
        };
        report.matched += 1;
        report.max_score_dev = report.max_score_dev.max((scores.data()[b] - o.score).abs());
        let dev = roots
            .row(b)
            .iter()
            .zip(&o.root)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        report.max_root_dev = report.max_root_dev.max(dev);
    }
    Ok(report)
}
