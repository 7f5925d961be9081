//! ListOps classifiers built from the encoder pieces: embeddings, the
//! initial transform, a reduction strategy, root marginalization or parent
//! attention with pooling, and an MLP head.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kaiming_uniform, stack_rows, ParamId, ParamStore, RowRef, Tape, Tensor, Var};
use crate::cells::{init_transform, GrcParams, InitTransform, ScorerParams};
use crate::error::{contract, Error, Result};
use crate::listops::{gold_trace, tokenize, ListOpsSample, NUM_CLASSES, VOCAB};
use crate::parent_attention::{attention_pool, contextualize_tokens, GauParams, PoolParams, TreeRecord};
use crate::search::{encode_batch, marginalize_roots, Modules, ScoreMode, Strategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Reduces along the gold parse; never scores.
    GoldTree,
    /// Greedy straight-through selection with the entangled scorer.
    Gt,
    /// Greedy straight-through selection with the disentangled scorer.
    Egt,
    /// Beam search with the entangled scorer.
    Bt,
    /// Beam search with the disentangled scorer.
    Ebt,
    /// Disentangled beam search followed by parent attention and pooling.
    EbtGau,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::GoldTree,
        Variant::Gt,
        Variant::Egt,
        Variant::Bt,
        Variant::Ebt,
        Variant::EbtGau,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::GoldTree => "GoldTree-GRC",
            Variant::Gt => "GT-GRC",
            Variant::Egt => "EGT-GRC",
            Variant::Bt => "BT-GRC",
            Variant::Ebt => "EBT-GRC",
            Variant::EbtGau => "EBT-GAU",
        }
    }

    pub fn uses_scorer(self) -> bool {
        self != Variant::GoldTree
    }

    /// Score mode of the variant's search, if it searches.
    pub fn mode(self) -> Option<ScoreMode> {
        match self {
            Variant::GoldTree => None,
            Variant::Gt | Variant::Bt => Some(ScoreMode::Entangled),
            Variant::Egt | Variant::Ebt | Variant::EbtGau => Some(ScoreMode::Disentangled),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase();
        let key = key.strip_suffix("-grc").unwrap_or(&key);
        Ok(match key {
            "goldtree" | "gold" => Variant::GoldTree,
            "gt" => Variant::Gt,
            "egt" => Variant::Egt,
            "bt" => Variant::Bt,
            "ebt" => Variant::Ebt,
            "ebt-gau" | "ebtgau" => Variant::EbtGau,
            _ => return Err(Error::Config(format!("unknown variant {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d: usize,
    pub d_cell: usize,
    pub d_s: usize,
    pub k: usize,
    /// Score only the first `d_s` coordinates of each child.
    pub slice: bool,
    pub temperature: f64,
    pub gau_iterations: usize,
    pub d_h: usize,
    pub max_dist: usize,
    /// Dropout rate inside the contextualizer blocks, training only.
    pub dropout: f64,
    /// Gumbel perturbation during training.
    pub train_noise: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Ebt,
            d: 128,
            d_cell: 512,
            d_s: 64,
            k: 5,
            slice: true,
            temperature: 1.0,
            gau_iterations: 2,
            d_h: crate::parent_attention::DEFAULT_HEAD,
            max_dist: crate::parent_attention::PARENT_MAX_DIST,
            dropout: 0.1,
            train_noise: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_cell == 0 || self.d_s == 0 || self.d_h == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.gau_iterations == 0 {
            return Err(Error::Config("gau_iterations must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether the scorer reads a sliced prefix. Entangled variants score
    /// parents with the legacy scorer, so slicing never applies there.
    fn sliced(&self) -> bool {
        self.slice && self.variant.mode() == Some(ScoreMode::Disentangled)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, classes: usize, rng: &mut impl rand::Rng) -> Self {
        ClassifierHead {
            w1: store.add(format!("{prefix}.w1"), kaiming_uniform(d, d, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![d])),
            w2: store.add(format!("{prefix}.w2"), kaiming_uniform(d, classes, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![classes])),
            classes,
        }
    }
}

/// `GELU(x W1 + b1) W2 + b2`, row-wise; a `[d]` input yields `[C]` logits.
pub fn classify<'t>(tape: &'t Tape, x: Var<'t>, head: &ClassifierHead) -> Result<Var<'t>> {
    let out = x
        .linear(tape.param(head.w1), Some(tape.param(head.b1)))?
        .gelu()
        .linear(tape.param(head.w2), Some(tape.param(head.b2)))?;
    if x.shape().len() == 1 {
        out.reshape(vec![head.classes])
    } else {
        Ok(out)
    }
}

/// Mean over rows of `−log_softmax(logits)[label]`; a `[C]` input is one row.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let c = logits.cols();
    if logits.rows() != labels.len() {
        return Err(contract(format!("{} label(s) for {} logit rows", labels.len(), logits.rows())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(contract(format!("label {bad} out of range for {c} classes")));
    }
    let idx: Vec<usize> = labels.iter().enumerate().map(|(r, &l)| r * c + l).collect();
    Ok(logits.log_softmax().pick(&idx)?.mean().scale(-1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embedding: ParamId,
    pub init: InitTransform,
    pub cell: GrcParams,
    pub scorer: Option<ScorerParams>,
    pub gau: Option<GauParams>,
    pub pool: Option<PoolParams>,
    pub head: ClassifierHead,
}

/// Output of a forward pass over a batch.
pub struct Forward<'t> {
    pub loss: Var<'t>,
    pub logits: Var<'t>,
    pub predictions: Vec<usize>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d;
        let embedding = store.add(
            "embedding",
            Tensor::from_fn(vec![VOCAB.len(), d], |_| rand::Rng::gen_range(&mut rng, -0.1..0.1)),
        );
        let init = InitTransform::new(&mut store, "init", d, d, &mut rng);
        let cell = GrcParams::new(&mut store, "cell", d, cfg.d_cell, &mut rng);
        let scorer = cfg
            .variant
            .uses_scorer()
            .then(|| ScorerParams::new(&mut store, "scorer", d, cfg.d_s, cfg.sliced(), &mut rng));
        let (gau, pool) = if cfg.variant == Variant::EbtGau {
            (
                Some(GauParams::new(&mut store, "gau", d, cfg.d_h, cfg.max_dist, &mut rng)),
                Some(PoolParams::new(&mut store, "pool", d, &mut rng)),
            )
        } else {
            (None, None)
        };
        let head = ClassifierHead::new(&mut store, "head", d, NUM_CLASSES, &mut rng);
        Ok(Model {
            cfg,
            store,
            embedding,
            init,
            cell,
            scorer,
            gau,
            pool,
            head,
        })
    }

    fn modules(&self) -> Modules<'_> {
        match &self.scorer {
            Some(s) => Modules::new(&self.cell, s),
            None => Modules::cell_only(&self.cell),
        }
    }

    /// Embeds and initially transforms one token-id sequence.
    pub fn terminals<'t>(&self, tape: &'t Tape, ids: &[usize]) -> Result<Var<'t>> {
        let table = tape.param(self.embedding);
        let refs: Vec<RowRef<'t>> = ids.iter().map(|&i| RowRef::new(table, i)).collect();
        let emb = tape.gather_rows(&refs, 0, self.cfg.d)?;
        init_transform(tape, emb, &self.init)
    }

    /// Sentence features (`1 × d` each) for terminal matrices `xs`. The gold
    /// tree variant replays `traces`, which it requires.
    pub fn features<'t>(
        &self,
        tape: &'t Tape,
        xs: &[Var<'t>],
        traces: Option<&[Vec<usize>]>,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Var<'t>>> {
        let cfg = &self.cfg;
        let strategy = match cfg.variant {
            Variant::GoldTree => {
                Strategy::Forced(traces.ok_or_else(|| contract("the gold tree variant needs merge traces"))?)
            }
            Variant::Gt | Variant::Egt => Strategy::SoftGreedy {
                mode: cfg.variant.mode().expect("searching variant"),
                temperature: cfg.temperature,
            },
            Variant::Bt | Variant::Ebt | Variant::EbtGau => Strategy::Beam {
                k: cfg.k,
                mode: cfg.variant.mode().expect("searching variant"),
            },
        };
        let noisy = training && cfg.train_noise && cfg.variant.uses_scorer();
        let encoded = encode_batch(tape, xs, strategy, self.modules(), noisy.then_some(&mut *rng))?;
        let mut feats = Vec::with_capacity(xs.len());
        for (enc, x) in encoded.iter().zip(xs) {
            let feat = match (&self.gau, &self.pool) {
                (Some(gau), Some(pool)) => {
                    let records = enc
                        .trees
                        .iter()
                        .map(|t| TreeRecord::from_tree(tape, x.rows(), t))
                        .collect::<Result<Vec<_>>>()?;
                    let drop = if training && cfg.dropout > 0.0 {
                        let r: &mut dyn RngCore = &mut *rng;
                        Some((cfg.dropout, r))
                    } else {
                        None
                    };
                    let ctx = contextualize_tokens(tape, *x, &records, enc.scores, gau, cfg.gau_iterations, drop)?;
                    attention_pool(tape, ctx, pool)?
                }
                _ => marginalize_roots(enc.roots, enc.scores)?,
            };
            feats.push(feat.reshape(vec![1, cfg.d])?);
        }
        Ok(feats)
    }

    /// Runs the batch through the model. `training` enables Gumbel noise
    /// (when configured) and dropout, both driven by `rng`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        batch: &[&ListOpsSample],
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Forward<'t>> {
        if batch.is_empty() {
            return Err(contract("empty batch"));
        }
        let mut xs = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for s in batch {
            xs.push(self.terminals(tape, &tokenize(&s.tokens)?)?);
            labels.push(s.label as usize);
        }
        let traces = match self.cfg.variant {
            Variant::GoldTree => Some(
                batch
                    .iter()
                    .map(|s| match &s.gold_trace {
                        Some(t) => Ok(t.clone()),
                        None => gold_trace(&s.tokens),
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        let feats = self.features(tape, &xs, traces.as_deref(), training, rng)?;
        let logits = classify(tape, stack_rows(tape, &feats)?, &self.head)?;
        let loss = cross_entropy(logits, &labels)?;
        let lv = logits.value();
        let predictions = (0..lv.rows()).map(|r| crate::search::argmax(lv.row(r))).collect();
        Ok(Forward {
            loss,
            logits,
            predictions,
        })
    }
}

#[cfg(test)]
mod tests;
