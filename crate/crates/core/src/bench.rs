//! Time and retained-activation benchmarks of the encoders over sequence
//! length buckets.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{stack_rows, ParamStore, RowRef, Tape, Tensor};
use crate::cells::{disentangled_scores_rows, entangled_scores_rows, GrcParams, ScorerParams};
use crate::error::{Error, Result};
use crate::memory::{track, track_with_budget};
use crate::model::{Model, ModelConfig, Variant};

/// A benchmarked encoder: a variant, optionally at its own hidden size and
/// with slicing switched off. Written `name[:d][:noslice]`, e.g. `ebt:512:noslice`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchVariant {
    pub variant: Variant,
    pub d: Option<usize>,
    pub slice: bool,
}

impl BenchVariant {
    pub fn new(variant: Variant) -> Self {
        BenchVariant {
            variant,
            d: None,
            slice: true,
        }
    }

    pub fn label(&self) -> String {
        let mut extra = Vec::new();
        if let Some(d) = self.d {
            extra.push(d.to_string());
        }
        if !self.slice {
            extra.push("-slice".to_string());
        }
        if extra.is_empty() {
            self.variant.tag().to_string()
        } else {
            format!("{}({})", self.variant.tag(), extra.join(","))
        }
    }
}

impl FromStr for BenchVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let variant: Variant = parts.next().unwrap_or("").parse()?;
        let mut out = BenchVariant::new(variant);
        for p in parts {
            if p == "noslice" {
                out.slice = false;
            } else {
                let d = p
                    .parse()
                    .map_err(|_| Error::Config(format!("bad bench variant modifier {p:?} in {s:?}")))?;
                out.d = Some(d);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub variants: Vec<BenchVariant>,
    pub k: usize,
    pub d: usize,
    pub d_cell: usize,
    pub d_s: usize,
    pub repetitions: usize,
    /// Largest retained-scalar count a run may reach before it is stopped
    /// and reported as over budget.
    pub budget: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![50, 100, 200],
            variants: vec![BenchVariant::new(Variant::Bt), BenchVariant::new(Variant::Ebt)],
            k: 5,
            d: 128,
            d_cell: 512,
            d_s: 64,
            repetitions: 1,
            budget: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub length: usize,
    /// Median wall time of forward and backward, in seconds.
    pub wall_secs: Option<f64>,
    /// Median peak of retained scalars.
    pub peak_scalars: Option<usize>,
    pub over_budget: bool,
}

fn median<T: Copy + PartialOrd>(mut v: Vec<T>) -> T {
    v.sort_by(|a, b| a.partial_cmp(b).expect("comparable"));
    v[(v.len() - 1) / 2]
}

fn model_for(cfg: &BenchConfig, v: &BenchVariant) -> Result<Model> {
    let d = v.d.unwrap_or(cfg.d);
    let mcfg = ModelConfig {
        variant: v.variant,
        d,
        d_cell: cfg.d_cell * d / cfg.d.max(1),
        d_s: cfg.d_s,
        k: cfg.k,
        slice: v.slice,
        train_noise: false,
        ..ModelConfig::default()
    };
    Model::new(mcfg, cfg.seed)
}

/// Forward and backward of one sequence of `n` random terminals; returns
/// the region's peak retained scalars, or `None` when over budget.
pub fn measure_once(model: &Model, n: usize, seed: u64, budget: Option<usize>) -> Result<Option<usize>> {
    let d = model.cfg.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(vec![n, d], |_| rng.gen_range(-1.0..1.0));
    let trace = vec![0; n.saturating_sub(1)];
    let (res, stats, exceeded) = track_with_budget("bench", budget, || -> Result<()> {
        let tape = Tape::with_params(&model.store);
        let xv = tape.leaf(x);
        let traces = [trace];
        let feats = model.features(&tape, &[xv], Some(&traces), false, &mut rng)?;
        let loss = stack_rows(&tape, &feats)?.sum();
        tape.backward(loss)?;
        Ok(())
    });
    match res {
        Err(Error::OverBudget(_)) => Ok(None),
        Err(e) => Err(e),
        Ok(()) if exceeded => Ok(None),
        Ok(()) => Ok(Some(stats.peak_scalars)),
    }
}

/// Runs every variant on every length bucket, `repetitions` times each.
pub fn bench_run(cfg: &BenchConfig, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    if cfg.repetitions == 0 || cfg.lengths.is_empty() || cfg.variants.is_empty() {
        return Err(Error::Config("bench needs lengths, variants and at least one repetition".into()));
    }
    if cfg.lengths.contains(&0) {
        return Err(Error::Config("sequence lengths must be positive".into()));
    }
    let mut rows = Vec::new();
    for v in &cfg.variants {
        let model = model_for(cfg, v)?;
        for &n in &cfg.lengths {
            let mut times = Vec::new();
            let mut peaks = Vec::new();
            let mut over = false;
            for rep in 0..cfg.repetitions {
                let seed = cfg.seed ^ ((n as u64) << 20) ^ rep as u64;
                let start = Instant::now();
                match measure_once(&model, n, seed, cfg.budget)? {
                    Some(p) => {
                        times.push(start.elapsed().as_secs_f64());
                        peaks.push(p);
                    }
                    None => {
                        over = true;
                        break;
                    }
                }
            }
            let row = BenchRow {
                variant: v.label(),
                length: n,
                wall_secs: (!over).then(|| median(times)),
                peak_scalars: (!over).then(|| median(peaks)),
                over_budget: over,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Aligned plain-text table with one line per variant and one
/// `time / peak` column per length bucket.
pub fn format_table(rows: &[BenchRow], with_time: bool) -> String {
    let mut lengths: Vec<usize> = rows.iter().map(|r| r.length).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let mut variants: Vec<&str> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let cell = |r: Option<&BenchRow>| match r {
        None => "-".to_string(),
        Some(r) if r.over_budget => "over budget".to_string(),
        Some(r) => {
            let peak = r.peak_scalars.unwrap_or(0);
            match (with_time, r.wall_secs) {
                (true, Some(t)) => format!("{t:.3}s / {peak}"),
                _ => peak.to_string(),
            }
        }
    };
    let header: Vec<String> = std::iter::once("variant".to_string())
        .chain(lengths.iter().map(|n| format!("n={n}")))
        .collect();
    let mut table = vec![header];
    for v in &variants {
        let mut line = vec![v.to_string()];
        for n in &lengths {
            line.push(cell(rows.iter().find(|r| r.variant == *v && r.length == *n)));
        }
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in &table {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).expect("write to string");
    }
    out
}

/// `variant,length,wall_secs,peak_scalars,status` lines.
pub fn format_csv(rows: &[BenchRow], with_time: bool) -> String {
    let mut out = String::from("variant,length,wall_secs,peak_scalars,status\n");
    for r in rows {
        let t = match (with_time, r.wall_secs) {
            (true, Some(t)) => format!("{t:.6}"),
            _ => String::new(),
        };
        let p = r.peak_scalars.map(|p| p.to_string()).unwrap_or_default();
        let status = if r.over_budget { "over budget" } else { "ok" };
        writeln!(out, "{},{},{},{},{}", r.variant, r.length, t, p, status).expect("write to string");
    }
    out
}

/// Scalars computed per candidate pair in one scoring step over `n` nodes,
/// for the entangled and the disentangled scorer. Copies of existing node
/// rows made to assemble the pairs are not counted.
pub fn candidate_activations(n: usize, d: usize, d_cell: usize, d_s: usize, seed: u64) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::Config("need at least two nodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cell = GrcParams::new(&mut store, "cell", d, d_cell, &mut rng);
    let scorer = ScorerParams::new(&mut store, "scorer", d, d_s, true, &mut rng);
    let x = Tensor::from_fn(vec![n, d], |_| rng.gen_range(-1.0..1.0));
    let per_candidate = |entangled: bool| -> Result<f64> {
        let tape = Tape::with_params(&store);
        let h = tape.constant(x.clone());
        let left: Vec<RowRef<'_>> = (0..n - 1).map(|i| h.row(i)).collect();
        let right: Vec<RowRef<'_>> = (1..n).map(|i| h.row(i)).collect();
        let (res, stats) = track("step", || {
            if entangled {
                entangled_scores_rows(&tape, &left, &right, &cell, &scorer).map(|_| ())
            } else {
                disentangled_scores_rows(&tape, &left, &right, &scorer).map(|_| ())
            }
        });
        res?;
        let computed: usize = stats
            .per_op
            .iter()
            .filter(|(op, _)| **op != "gather")
            .map(|(_, c)| c)
            .sum();
        Ok(computed as f64 / (n - 1) as f64)
    };
    Ok((per_candidate(true)?, per_candidate(false)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variants: &[&str], lengths: Vec<usize>) -> BenchConfig {
        BenchConfig {
            lengths,
            variants: variants.iter().map(|v| v.parse().unwrap()).collect(),
            k: 2,
            d: 8,
            d_cell: 32,
            d_s: 4,
            repetitions: 1,
            budget: None,
            seed: 1,
        }
    }

    #[test]
    fn variant_specs_parse() {
        let v: BenchVariant = "ebt:512:noslice".parse().unwrap();
        assert_eq!(v, BenchVariant { variant: Variant::Ebt, d: Some(512), slice: false });
        assert_eq!(v.label(), "EBT-GRC(512,-slice)");
        assert_eq!("bt".parse::<BenchVariant>().unwrap().label(), "BT-GRC");
        assert!("ebt:wide".parse::<BenchVariant>().is_err());
        assert!("xyz".parse::<BenchVariant>().is_err());
    }

    #[test]
    fn one_row_per_variant_and_bucket() {
        let cfg = tiny(&["bt", "ebt", "gt", "egt", "goldtree", "ebt-gau"], vec![7]);
        let rows = bench_run(&cfg, |_| {}).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.peak_scalars.unwrap() > 0 && !r.over_budget));
        let cfg = tiny(&["bt", "ebt"], vec![5, 9]);
        assert_eq!(bench_run(&cfg, |_| {}).unwrap().len(), 4);
    }

    #[test]
    fn peaks_are_deterministic() {
        let cfg = tiny(&["bt", "ebt"], vec![6, 12]);
        let a = bench_run(&cfg, |_| {}).unwrap();
        let b = bench_run(&cfg, |_| {}).unwrap();
        assert_eq!(format_csv(&a, false), format_csv(&b, false));
        assert_eq!(format_table(&a, false), format_table(&b, false));
    }

    #[test]
    fn over_budget_is_reported_not_fatal() {
        let mut cfg = tiny(&["bt", "ebt"], vec![30]);
        let full = bench_run(&cfg, |_| {}).unwrap();
        let (bt, ebt) = (full[0].peak_scalars.unwrap(), full[1].peak_scalars.unwrap());
        assert!(bt > ebt);
        cfg.budget = Some((bt + ebt) / 2);
        let rows = bench_run(&cfg, |_| {}).unwrap();
        assert!(rows[0].over_budget && rows[0].peak_scalars.is_none());
        assert!(!rows[1].over_budget);
        assert_eq!(rows[1].peak_scalars, Some(ebt));
        assert!(format_table(&rows, true).contains("over budget"));
        assert!(format_csv(&rows, true).contains("over budget"));
    }

    #[test]
    fn table_layout() {
        let rows = vec![
            BenchRow { variant: "A".into(), length: 5, wall_secs: Some(0.5), peak_scalars: Some(100), over_budget: false },
            BenchRow { variant: "A".into(), length: 10, wall_secs: Some(1.0), peak_scalars: Some(250), over_budget: false },
            BenchRow { variant: "BB".into(), length: 5, wall_secs: None, peak_scalars: None, over_budget: true },
        ];
        let t = format_table(&rows, false);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("variant") && lines[0].contains("n=5") && lines[0].contains("n=10"));
        assert!(lines[1].contains("100") && lines[1].contains("250"));
        assert!(lines[2].contains("over budget") && lines[2].trim_end().ends_with('-'));
        let csv = format_csv(&rows, true);
        assert_eq!(csv.lines().nth(1).unwrap(), "A,5,0.500000,100,ok");
    }

    #[test]
    fn grc_region_retains_at_least_its_intermediates() {
        let (d, d_cell) = (128, 512);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cell = GrcParams::new(&mut store, "c", d, d_cell, &mut rng);
        let tape = Tape::with_params(&store);
        let l = tape.constant(Tensor::from_fn(vec![d], |_| rng.gen_range(-1.0..1.0)));
        let r = tape.constant(Tensor::from_fn(vec![d], |_| rng.gen_range(-1.0..1.0)));
        let (_, stats) = track("grc", || crate::cells::grc_compose(&tape, l, r, &cell).unwrap());
        assert!(stats.peak_scalars >= d_cell + 4 * d + d, "{}", stats.peak_scalars);
    }
}
