//! Top-down token contextualization: each terminal attends to its ancestors
//! in an induced tree through a gated attention block with a relative
//! height bias, and the per-beam results are marginalized by beam score.

use rand::{Rng, RngCore};

use crate::autodiff::{kaiming_uniform, ParamId, ParamStore, Piece, Tape, Tensor, Var};
use crate::cells::{GrcParams, LN_EPS};
use crate::error::{contract, Error, Result};
use crate::search::{encode_batch, BeamTree, Modules, Strategy};

pub const DEFAULT_HEAD: usize = 128;
pub const PARENT_MAX_DIST: usize = 10;

/// Induced tree of one beam over `n` terminals with `l` non-terminals.
#[derive(Clone, Debug)]
pub struct TreeRecord<'t> {
    /// `l × d`, or `None` when `n = 1`.
    pub nonterminals: Option<Var<'t>>,
    /// Row-major `n × l`; true iff terminal `i` lies under non-terminal `j`.
    pub adjacency: Vec<bool>,
    pub heights: Vec<usize>,
    pub n: usize,
}

impl<'t> TreeRecord<'t> {
    pub fn l(&self) -> usize {
        self.heights.len()
    }

    pub fn adj(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.l() + j]
    }

    /// Builds the record of a beam produced by the search engine, reusing
    /// its non-terminal vectors.
    pub fn from_tree(tape: &'t Tape, n: usize, tree: &BeamTree<'t>) -> Result<Self> {
        let l = tree.nonterminals.len();
        let mut adjacency = vec![false; n * l];
        for (j, node) in tree.nonterminals.iter().enumerate() {
            if node.hi > n {
                return Err(contract(format!("node span {}..{} exceeds {n} terminals", node.lo, node.hi)));
            }
            for i in node.lo..node.hi {
                adjacency[i * l + j] = true;
            }
        }
        let nonterminals = if l == 0 {
            None
        } else {
            let refs: Vec<_> = tree.nonterminals.iter().map(|t| t.vec).collect();
            Some(tape.gather_rows(&refs, 0, refs[0].var.cols())?)
        };
        Ok(TreeRecord {
            nonterminals,
            adjacency,
            heights: tree.nonterminals.iter().map(|t| t.height).collect(),
            n,
        })
    }
}

/// Replays `trace` over `terminals` with the cell and records every
/// composed node, its height, and its terminal descendants.
pub fn record_tree<'t>(tape: &'t Tape, trace: &[usize], terminals: Var<'t>, cell: &GrcParams) -> Result<TreeRecord<'t>> {
    let n = terminals.rows();
    if trace.len() + 1 != n {
        return Err(Error::Trace(format!("trace of length {} for {n} terminals", trace.len())));
    }
    let modules = Modules::cell_only(cell);
    let traces = [trace.to_vec()];
    let enc = encode_batch(tape, &[terminals], Strategy::Forced(&traces), modules, None)?;
    TreeRecord::from_tree(tape, n, &enc[0].trees[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct GauParams {
    pub w_init: ParamId,
    pub b_init: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub w_u: ParamId,
    pub b_u: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_z: ParamId,
    pub b_z: ParamId,
    pub z_q: ParamId,
    pub zb_q: ParamId,
    pub z_k: ParamId,
    pub zb_k: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
    /// One scalar per clipped distance `0..=max_dist`.
    pub rel_table: ParamId,
    pub d: usize,
    pub d_h: usize,
    pub max_dist: usize,
}

impl GauParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, d_h: usize, max_dist: usize, rng: &mut impl Rng) -> Self {
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t);
        GauParams {
            w_init: add("w_init", kaiming_uniform(d, d, rng)),
            b_init: add("b_init", Tensor::zeros(vec![d])),
            ln_gain: add("ln_gain", Tensor::full(vec![d], 1.0)),
            ln_bias: add("ln_bias", Tensor::zeros(vec![d])),
            w_u: add("w_u", kaiming_uniform(d, 2 * d, rng)),
            b_u: add("b_u", Tensor::zeros(vec![2 * d])),
            w_v: add("w_v", kaiming_uniform(d, 2 * d, rng)),
            b_v: add("b_v", Tensor::zeros(vec![2 * d])),
            w_z: add("w_z", kaiming_uniform(d, d_h, rng)),
            b_z: add("b_z", Tensor::zeros(vec![d_h])),
            z_q: add("z_q", Tensor::full(vec![d_h], 1.0)),
            zb_q: add("zb_q", Tensor::zeros(vec![d_h])),
            z_k: add("z_k", Tensor::full(vec![d_h], 1.0)),
            zb_k: add("zb_k", Tensor::zeros(vec![d_h])),
            w_o: add("w_o", kaiming_uniform(2 * d, d, rng)),
            b_o: add("b_o", Tensor::zeros(vec![d])),
            w_gate: add("w_gate", kaiming_uniform(2 * d, d, rng)),
            b_gate: add("b_gate", Tensor::zeros(vec![d])),
            rel_table: add("rel_table", Tensor::zeros(vec![max_dist + 1])),
            d,
            d_h,
            max_dist,
        }
    }
}

/// `bias[i][j] = table[min(k_j − q_i, max_dist)]` at unmasked positions and
/// 0 elsewhere.
pub fn relative_height_bias<'t>(
    tape: &'t Tape,
    q_heights: &[usize],
    k_heights: &[usize],
    mask: &[bool],
    table: Var<'t>,
    max_dist: usize,
) -> Result<Var<'t>> {
    let (n, l) = (q_heights.len(), k_heights.len());
    if mask.len() != n * l || n * l == 0 {
        return Err(Error::Shape {
            op: "relative_height_bias",
            left: vec![n, l],
            right: vec![mask.len()],
        });
    }
    if table.numel() <= max_dist {
        return Err(contract(format!("bias table has {} entries for max distance {max_dist}", table.numel())));
    }
    let zero = tape.constant(Tensor::zeros(vec![1]));
    let mut pieces = Vec::with_capacity(n * l);
    for (i, &q) in q_heights.iter().enumerate() {
        for (j, &k) in k_heights.iter().enumerate() {
            if !mask[i * l + j] {
                pieces.push(Piece { src: zero, offset: 0, len: 1 });
                continue;
            }
            if k < q {
                return Err(contract(format!("negative height distance {} at ({i}, {j})", k as i64 - q as i64)));
            }
            pieces.push(Piece {
                src: table,
                offset: (k - q).min(max_dist),
                len: 1,
            });
        }
    }
    tape.gather(vec![n, l], &pieces)
}

/// One gated attention block: queries from `x` (`n × d`), keys and values
/// from `p` (`l × d`), attention restricted to `mask` (`n × l`) with the
/// additive bias `pos`. Returns the output and the attention matrix.
pub fn gau_block_with_attention<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    p: Var<'t>,
    mask: &[bool],
    params: &GauParams,
    pos: Var<'t>,
    dropout: Option<(f64, &mut dyn RngCore)>,
) -> Result<(Var<'t>, Var<'t>)> {
    let g = |id| tape.param(id);
    let d = params.d;
    let init = |v: Var<'t>| -> Result<Var<'t>> {
        v.linear(g(params.w_init), Some(g(params.b_init)))?
            .layer_norm(g(params.ln_gain), g(params.ln_bias), LN_EPS)
    };
    let (xp, pp) = (init(x)?, init(p)?);
    let u = xp.linear(g(params.w_u), Some(g(params.b_u)))?.silu();
    let v = pp.linear(g(params.w_v), Some(g(params.b_v)))?.silu();
    let q = xp
        .linear(g(params.w_z), Some(g(params.b_z)))?
        .silu()
        .mul_row(g(params.z_q))?
        .add_row(g(params.zb_q))?;
    let k = pp
        .linear(g(params.w_z), Some(g(params.b_z)))?
        .silu()
        .mul_row(g(params.z_k))?
        .add_row(g(params.zb_k))?;
    let logits = q.matmul_t(k)?.add(pos)?.scale(1.0 / ((2 * d) as f64).sqrt());
    let a = logits.masked_softmax(mask)?;
    let attended = a.matmul(v)?;
    let mut o = u.mul(attended)?.linear(g(params.w_o), Some(g(params.b_o)))?;
    if let Some((rate, mut rng)) = dropout {
        o = o.dropout(rate, &mut rng)?;
    }
    let gate = o
        .concat(x)?
        .linear(g(params.w_gate), Some(g(params.b_gate)))?
        .sigmoid();
    let out = gate.mul(o)?.add(gate.one_minus().mul(x)?)?;
    Ok((out, a))
}

pub fn gau_block<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    p: Var<'t>,
    mask: &[bool],
    params: &GauParams,
    pos: Var<'t>,
    dropout: Option<(f64, &mut dyn RngCore)>,
) -> Result<Var<'t>> {
    Ok(gau_block_with_attention(tape, x, p, mask, params, pos, dropout)?.0)
}

/// Runs `iterations` weight-shared blocks per beam and marginalizes the
/// contextualized terminals with `softmax(beam_scores)`.
#[allow(clippy::too_many_arguments)]
pub fn contextualize_tokens<'t>(
    tape: &'t Tape,
    terminals: Var<'t>,
    records: &[TreeRecord<'t>],
    beam_scores: Var<'t>,
    params: &GauParams,
    iterations: usize,
    dropout: Option<(f64, &mut dyn RngCore)>,
) -> Result<Var<'t>> {
    let (n, d) = (terminals.rows(), terminals.cols());
    if records.is_empty() || beam_scores.numel() != records.len() {
        return Err(contract(format!(
            "{} beam records with {} scores",
            records.len(),
            beam_scores.numel()
        )));
    }
    if iterations == 0 {
        return Err(contract("contextualization needs at least one iteration"));
    }
    let mut dropout = dropout;
    let weights = beam_scores.reshape(vec![records.len()])?.softmax();
    let mut acc: Option<Var<'t>> = None;
    for (b, rec) in records.iter().enumerate() {
        if rec.n != n {
            return Err(contract(format!("record over {} terminals for {n} inputs", rec.n)));
        }
        let (p, mask, heights) = match rec.nonterminals {
            Some(p) => (p, rec.adjacency.clone(), rec.heights.clone()),
            None => (tape.constant(Tensor::zeros(vec![1, d])), vec![false; n], vec![1]),
        };
        let pos = relative_height_bias(tape, &vec![0; n], &heights, &mask, tape.param(params.rel_table), params.max_dist)?;
        let mut x = terminals;
        for _ in 0..iterations {
            let drop = dropout.as_mut().map(|(r, g)| (*r, &mut **g as &mut dyn RngCore));
            x = gau_block(tape, x, p, &mask, params, pos, drop)?;
        }
        let term = if records.len() == 1 {
            x
        } else {
            x.mul_col(weights.pick(&vec![b; n])?)?
        };
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    Ok(acc.expect("at least one record"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl PoolParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        PoolParams {
            w1: store.add(format!("{prefix}.w1"), kaiming_uniform(d, d, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![d])),
            w2: store.add(format!("{prefix}.w2"), kaiming_uniform(d, 1, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![1])),
        }
    }
}

/// `Σ_i α_i r_i` with `α = softmax(GELU(r W1 + b1) W2 + b2)` over rows.
pub fn attention_pool<'t>(tape: &'t Tape, r: Var<'t>, head: &PoolParams) -> Result<Var<'t>> {
    let n = r.rows();
    if n == 0 {
        return Err(contract("attention pooling over zero rows"));
    }
    let alpha = r
        .linear(tape.param(head.w1), Some(tape.param(head.b1)))?
        .gelu()
        .linear(tape.param(head.w2), Some(tape.param(head.b2)))?
        .reshape(vec![n])?
        .softmax();
    alpha.segment_weighted_sum(r, &[0..n])?.reshape(vec![r.cols()])
}
