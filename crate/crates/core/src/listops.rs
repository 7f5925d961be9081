//! Synthetic ListOps: generation, evaluation, gold merge traces, vocabulary
//! and the tab-separated dataset format.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB: [&str; 15] = [
    "[MAX", "[MIN", "[MED", "[SM", "]", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
];
pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Max,
    Min,
    Med,
    Sm,
}

impl Op {
    const ALL: [Op; 4] = [Op::Max, Op::Min, Op::Med, Op::Sm];

    fn symbol(self) -> &'static str {
        VOCAB[self as usize]
    }

    fn apply(self, args: &[u8]) -> u8 {
        match self {
            Op::Max => *args.iter().max().expect("operator has arguments"),
            Op::Min => *args.iter().min().expect("operator has arguments"),
            Op::Med => {
                let mut v = args.to_vec();
                v.sort_unstable();
                v[(v.len() - 1) / 2]
            }
            Op::Sm => (args.iter().map(|&a| a as u32).sum::<u32>() % 10) as u8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Digit(u8),
    Apply(Op, Vec<Expr>),
}

impl Expr {
    pub fn eval(&self) -> u8 {
        match self {
            Expr::Digit(d) => *d,
            Expr::Apply(op, args) => {
                let vals: Vec<u8> = args.iter().map(Expr::eval).collect();
                op.apply(&vals)
            }
        }
    }

    /// Operator nesting depth (0 for a bare digit).
    pub fn depth(&self) -> usize {
        match self {
            Expr::Digit(_) => 0,
            Expr::Apply(_, args) => 1 + args.iter().map(Expr::depth).max().unwrap_or(0),
        }
    }

    /// Largest argument count of any operator.
    pub fn max_args(&self) -> usize {
        match self {
            Expr::Digit(_) => 0,
            Expr::Apply(_, args) => args.iter().map(Expr::max_args).max().unwrap_or(0).max(args.len()),
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.push_tokens(&mut out);
        out
    }

    fn push_tokens(&self, out: &mut Vec<String>) {
        match self {
            Expr::Digit(d) => out.push(d.to_string()),
            Expr::Apply(op, args) => {
                out.push(op.symbol().to_string());
                for a in args {
                    a.push_tokens(out);
                }
                out.push("]".to_string());
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens().join(" "))
    }
}

/// Parses a token sequence into an expression tree.
pub fn parse<S: AsRef<str>>(tokens: &[S]) -> Result<Expr> {
    let mut pos = 0;
    let e = parse_at(tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(Error::Parse(format!("trailing tokens after position {pos}")));
    }
    Ok(e)
}

fn parse_at<S: AsRef<str>>(tokens: &[S], pos: &mut usize) -> Result<Expr> {
    let Some(tok) = tokens.get(*pos) else {
        return Err(Error::Parse("unexpected end of input".into()));
    };
    let tok = tok.as_ref();
    *pos += 1;
    if let Some(op) = Op::ALL.iter().find(|o| o.symbol() == tok) {
        let mut args = Vec::new();
        loop {
            match tokens.get(*pos).map(|t| t.as_ref()) {
                None => return Err(Error::Parse(format!("unclosed {tok}"))),
                Some("]") => {
                    *pos += 1;
                    break;
                }
                Some(_) => args.push(parse_at(tokens, pos)?),
            }
        }
        if args.is_empty() {
            return Err(Error::Parse(format!("{tok} without arguments")));
        }
        return Ok(Expr::Apply(*op, args));
    }
    match tok.parse::<u8>() {
        Ok(d) if d <= 9 && tok.len() == 1 => Ok(Expr::Digit(d)),
        _ if tok == "]" => Err(Error::Parse(format!("unmatched ] at position {}", *pos - 1))),
        _ => Err(Error::Vocab(tok.to_string())),
    }
}

/// Stack-machine evaluation straight from the token stream.
pub fn stack_eval<S: AsRef<str>>(tokens: &[S]) -> Result<u8> {
    enum Slot {
        Op(Op),
        Val(u8),
    }
    let mut stack: Vec<Slot> = Vec::new();
    for t in tokens {
        let t = t.as_ref();
        match t {
            "[MAX" => stack.push(Slot::Op(Op::Max)),
            "[MIN" => stack.push(Slot::Op(Op::Min)),
            "[MED" => stack.push(Slot::Op(Op::Med)),
            "[SM" => stack.push(Slot::Op(Op::Sm)),
            "]" => {
                let mut vals = Vec::new();
                let op = loop {
                    match stack.pop() {
                        Some(Slot::Val(v)) => vals.push(v),
                        Some(Slot::Op(op)) => break op,
                        None => return Err(Error::Parse("unmatched ]".into())),
                    }
                };
                if vals.is_empty() {
                    return Err(Error::Parse("operator without arguments".into()));
                }
                let r = match op {
                    Op::Max => *vals.iter().max().unwrap(),
                    Op::Min => *vals.iter().min().unwrap(),
                    Op::Sm => vals.iter().fold(0u8, |a, &v| (a + v) % 10),
                    Op::Med => {
                        vals.sort_unstable();
                        vals[(vals.len() - 1) / 2]
                    }
                };
                stack.push(Slot::Val(r));
            }
            d => {
                let v = VOCAB[5..]
                    .iter()
                    .position(|s| *s == d)
                    .ok_or_else(|| Error::Vocab(d.to_string()))?;
                stack.push(Slot::Val(v as u8));
            }
        }
    }
    match stack.as_slice() {
        [Slot::Val(v)] => Ok(*v),
        _ => Err(Error::Parse("expression does not reduce to one value".into())),
    }
}

/// Merge order that reduces each operator scope innermost-first, folding
/// its arguments and closing bracket into the operator token from the left.
pub fn gold_trace<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<usize>> {
    let expr = parse(tokens)?;
    let mut trace = Vec::with_capacity(tokens.len().saturating_sub(1));
    if let Expr::Apply(..) = expr {
        fold_scope(&expr, 0, &mut trace);
    }
    Ok(trace)
}

fn fold_scope(e: &Expr, start: usize, trace: &mut Vec<usize>) {
    let Expr::Apply(_, args) = e else { return };
    for a in args {
        fold_scope(a, start + 1, trace);
        trace.push(start);
    }
    trace.push(start);
}

pub fn tokenize<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|t| {
            VOCAB
                .iter()
                .position(|v| *v == t.as_ref())
                .ok_or_else(|| Error::Vocab(t.as_ref().to_string()))
        })
        .collect()
}

pub fn detokenize(ids: &[usize]) -> Result<Vec<String>> {
    ids.iter()
        .map(|&i| {
            VOCAB
                .get(i)
                .map(|s| s.to_string())
                .ok_or_else(|| Error::Vocab(format!("#{i}")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ListOpsSample {
    pub tokens: Vec<String>,
    pub label: u8,
    pub gold_trace: Option<Vec<usize>>,
}

impl ListOpsSample {
    pub fn from_expr(e: &Expr) -> Result<Self> {
        let tokens = e.tokens();
        let gold_trace = Some(gold_trace(&tokens)?);
        Ok(ListOpsSample {
            tokens,
            label: e.eval(),
            gold_trace,
        })
    }

    pub fn ids(&self) -> Result<Vec<usize>> {
        tokenize(&self.tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub max_depth: usize,
    pub max_args: usize,
    pub min_length: usize,
    pub max_length: usize,
    /// Digits are drawn from `0..=max_value`.
    pub max_value: u8,
    /// Probability that an argument below the depth limit is a nested
    /// operator rather than a digit.
    pub branch_prob: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig::desk()
    }
}

impl GenConfig {
    /// Training split: length ≤ 50, depth ≤ 4, at most 3 arguments.
    pub fn desk() -> Self {
        GenConfig {
            max_depth: 4,
            max_args: 3,
            min_length: 1,
            max_length: 50,
            max_value: 9,
            branch_prob: 0.25,
            seed: 0,
        }
    }

    /// Length-generalization split: 50 to 100 tokens.
    pub fn long() -> Self {
        GenConfig {
            max_depth: 8,
            min_length: 50,
            max_length: 100,
            branch_prob: 0.4,
            ..GenConfig::desk()
        }
    }

    /// Argument-generalization split: exactly the desk bounds but with up
    /// to 5 arguments per operator.
    pub fn wide() -> Self {
        GenConfig {
            max_args: 5,
            max_length: 100,
            ..GenConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 || self.max_args < 2 || self.max_length == 0 {
            return Err(Error::Config(format!(
                "max_depth, max_length must be positive and max_args >= 2 ({self:?})"
            )));
        }
        if self.max_length < 4 {
            return Err(Error::Config(format!(
                "max_length {} cannot hold a single operator",
                self.max_length
            )));
        }
        if self.min_length > self.max_length {
            return Err(Error::Config("min_length exceeds max_length".into()));
        }
        if self.max_value > 9 {
            return Err(Error::Config(format!("max_value {} is not a digit", self.max_value)));
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return Err(Error::Config(format!("branch_prob {} outside [0, 1]", self.branch_prob)));
        }
        Ok(())
    }
}

const MAX_ATTEMPTS: usize = 100_000;

fn random_expr(cfg: &GenConfig, depth: usize, rng: &mut impl Rng) -> Expr {
    let op = Op::ALL[rng.gen_range(0..4)];
    let k = rng.gen_range(2..=cfg.max_args);
    let args = (0..k)
        .map(|_| {
            if depth < cfg.max_depth && rng.gen::<f64>() < cfg.branch_prob {
                random_expr(cfg, depth + 1, rng)
            } else {
                Expr::Digit(rng.gen_range(0..=cfg.max_value))
            }
        })
        .collect();
    Expr::Apply(op, args)
}

fn token_count(e: &Expr) -> usize {
    match e {
        Expr::Digit(_) => 1,
        Expr::Apply(_, args) => 2 + args.iter().map(token_count).sum::<usize>(),
    }
}

/// Draws one expression within the configured bounds (rejection sampling).
pub fn generate_sample(cfg: &GenConfig, rng: &mut impl Rng) -> Result<ListOpsSample> {
    cfg.validate()?;
    for _ in 0..MAX_ATTEMPTS {
        let e = random_expr(cfg, 1, rng);
        let len = token_count(&e);
        if (cfg.min_length..=cfg.max_length).contains(&len) {
            return ListOpsSample::from_expr(&e);
        }
    }
    Err(Error::Config(format!(
        "no sample within lengths {}..={} after {MAX_ATTEMPTS} draws",
        cfg.min_length, cfg.max_length
    )))
}

pub fn generate_dataset(cfg: &GenConfig, count: usize, rng: &mut impl Rng) -> Result<Vec<ListOpsSample>> {
    (0..count).map(|_| generate_sample(cfg, rng)).collect()
}

/// Draws samples until every label has exactly `per_class` examples.
pub fn generate_balanced(cfg: &GenConfig, per_class: usize, rng: &mut impl Rng) -> Result<Vec<ListOpsSample>> {
    let mut buckets: Vec<Vec<ListOpsSample>> = vec![Vec::new(); NUM_CLASSES];
    let mut draws = 0;
    while buckets.iter().any(|b| b.len() < per_class) {
        draws += 1;
        if draws > MAX_ATTEMPTS * NUM_CLASSES {
            return Err(Error::Config("could not balance labels".into()));
        }
        let s = generate_sample(cfg, rng)?;
        let b = &mut buckets[s.label as usize];
        if b.len() < per_class {
            b.push(s);
        }
    }
    Ok(buckets.into_iter().flatten().collect())
}

pub fn format_line(s: &ListOpsSample) -> String {
    let mut line = format!("{}\t{}", s.tokens.join(" "), s.label);
    if let Some(t) = &s.gold_trace {
        let t: Vec<String> = t.iter().map(|i| i.to_string()).collect();
        line.push('\t');
        line.push_str(&t.join(","));
    }
    line
}

pub fn parse_line(line: &str, number: usize) -> Result<ListOpsSample> {
    let err = |msg: String| Error::Line { line: number, msg };
    let fields: Vec<&str> = line.split('\t').collect();
    if !(2..=3).contains(&fields.len()) {
        return Err(err(format!("expected 2 or 3 tab-separated fields, found {}", fields.len())));
    }
    let tokens: Vec<String> = fields[0].split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err(err("no tokens".into()));
    }
    tokenize(&tokens).map_err(|e| err(e.to_string()))?;
    let label: u8 = fields[1]
        .trim()
        .parse()
        .map_err(|_| err(format!("bad label {:?}", fields[1])))?;
    if label as usize >= NUM_CLASSES {
        return Err(err(format!("label {label} out of range")));
    }
    let gold_trace = match fields.get(2) {
        None => None,
        Some(f) if f.trim().is_empty() => Some(Vec::new()),
        Some(f) => Some(
            f.split(',')
                .map(|v| v.trim().parse::<usize>().map_err(|_| err(format!("bad trace entry {v:?}"))))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    Ok(ListOpsSample {
        tokens,
        label,
        gold_trace,
    })
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[ListOpsSample]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        writeln!(w, "{}", format_line(s))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<ListOpsSample>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn evaluator_examples() {
        assert_eq!(parse(&toks("[MAX 3 7 ]")).unwrap().eval(), 7);
        assert_eq!(parse(&toks("[SM 4 9 ]")).unwrap().eval(), 3);
        assert_eq!(parse(&toks("[MED 4 1 9 2 ]")).unwrap().eval(), 2);
        assert_eq!(parse(&toks("[MED 4 1 9 ]")).unwrap().eval(), 4);
        assert_eq!(parse(&toks("[MIN [MAX 1 2 ] 0 ]")).unwrap().eval(), 0);
        assert_eq!(stack_eval(&toks("[SM 4 9 ]")).unwrap(), 3);
    }

    #[test]
    fn generated_labels_agree_with_stack_machine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = GenConfig::desk();
        for _ in 0..10_000 {
            let s = generate_sample(&cfg, &mut rng).unwrap();
            assert_eq!(stack_eval(&s.tokens).unwrap(), s.label);
            assert!(s.label <= 9);
        }
    }

    #[test]
    fn bounds_are_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for cfg in [GenConfig::desk(), GenConfig::wide(), GenConfig::long()] {
            let mut widest = 0;
            for _ in 0..300 {
                let s = generate_sample(&cfg, &mut rng).unwrap();
                let e = parse(&s.tokens).unwrap();
                assert!(e.depth() <= cfg.max_depth && e.depth() >= 1);
                assert!((2..=cfg.max_args).contains(&e.max_args()));
                assert!((cfg.min_length..=cfg.max_length).contains(&s.tokens.len()));
                widest = widest.max(e.max_args());
            }
            assert_eq!(widest, cfg.max_args);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = GenConfig::desk();
        let a = generate_dataset(&cfg, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_dataset(&cfg, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unsatisfiable_configs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bad = [
            GenConfig { max_length: 3, ..GenConfig::desk() },
            GenConfig { max_args: 1, ..GenConfig::desk() },
            GenConfig { max_depth: 0, ..GenConfig::desk() },
            GenConfig { max_value: 10, ..GenConfig::desk() },
            GenConfig { min_length: 60, max_length: 50, ..GenConfig::desk() },
        ];
        for cfg in bad {
            assert!(matches!(generate_sample(&cfg, &mut rng), Err(Error::Config(_))), "{cfg:?}");
        }
        let impossible = GenConfig {
            max_depth: 1,
            max_args: 2,
            min_length: 10,
            max_length: 20,
            ..GenConfig::desk()
        };
        assert!(matches!(generate_sample(&impossible, &mut rng), Err(Error::Config(_))));
    }

    /// Replays a trace over symbolic spans and returns the bracketing.
    fn replay(tokens: &[&str], trace: &[usize]) -> String {
        let mut seq: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
        for &j in trace {
            assert!(j + 1 < seq.len());
            let merged = format!("({} {})", seq[j], seq[j + 1]);
            seq.splice(j..j + 2, [merged]);
        }
        assert_eq!(seq.len(), 1);
        seq.pop().unwrap()
    }

    #[test]
    fn gold_trace_examples() {
        let t = toks("[MAX 3 7 ]");
        let trace = gold_trace(&t).unwrap();
        assert_eq!(trace.len(), t.len() - 1);
        assert_eq!(replay(&t, &trace), "((([MAX 3) 7) ])");

        let t = toks("[MIN [MAX 1 2 ] 0 ]");
        let trace = gold_trace(&t).unwrap();
        assert_eq!(trace, vec![1, 1, 1, 0, 0, 0]);
        assert_eq!(replay(&t, &trace), "((([MIN ((([MAX 1) 2) ])) 0) ])");

        assert!(matches!(gold_trace(&toks("[MAX 3 7")), Err(Error::Parse(_))));
        assert!(matches!(gold_trace(&toks("[MAX 3 ] ]")), Err(Error::Parse(_))));
    }

    #[test]
    fn gold_traces_replay_on_random_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let s = generate_sample(&GenConfig::desk(), &mut rng).unwrap();
            let t: Vec<&str> = s.tokens.iter().map(String::as_str).collect();
            let trace = s.gold_trace.clone().unwrap();
            assert_eq!(trace.len(), t.len() - 1);
            for (step, &j) in trace.iter().enumerate() {
                assert!(j + 1 < t.len() - step);
            }
            replay(&t, &trace);
        }
    }

    #[test]
    fn vocabulary_roundtrip() {
        assert_eq!(VOCAB.len(), 15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let s = generate_sample(&GenConfig::desk(), &mut rng).unwrap();
            assert_eq!(detokenize(&s.ids().unwrap()).unwrap(), s.tokens);
        }
        assert!(matches!(tokenize(&["FOO"]), Err(Error::Vocab(_))));
        assert!(detokenize(&[15]).is_err());
    }

    #[test]
    fn dataset_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.tsv");
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut samples = generate_dataset(&GenConfig::desk(), 100, &mut rng).unwrap();
        samples[3].gold_trace = None;
        write_dataset(&path, &samples).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), samples);
    }

    #[test]
    fn line_parsing() {
        let s = parse_line("[MAX 3 7 ]\t7", 1).unwrap();
        assert_eq!(s.gold_trace, None);
        assert_eq!((s.tokens.len(), s.label), (4, 7));
        let s = parse_line("[MAX 3 7 ]\t7\t0,0,0", 1).unwrap();
        assert_eq!(s.gold_trace, Some(vec![0, 0, 0]));
        match parse_line("[MAX 3 7 ]", 12) {
            Err(Error::Line { line, .. }) => assert_eq!(line, 12),
            other => panic!("{other:?}"),
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "[MAX 3 7 ]\t7\n[SM 1 2 ]\t3\n[MIN 4\n").unwrap();
        match read_dataset(&path) {
            Err(Error::Line { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_line("[MAX 3 FOO ]\t7", 1).is_err());
        assert!(parse_line("[MAX 3 7 ]\t12", 1).is_err());
    }

    #[test]
    fn balanced_generation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = generate_balanced(&GenConfig::desk(), 20, &mut rng).unwrap();
        for c in 0..10u8 {
            assert_eq!(s.iter().filter(|x| x.label == c).count(), 20);
        }
    }
}
