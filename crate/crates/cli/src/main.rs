use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ebt_core::bench::{bench_run, format_csv, format_table, BenchConfig, BenchVariant};
use ebt_core::checks::{gradient_suite, oracle_check, GRADIENT_TOLERANCE};
use ebt_core::config::KeyValues;
use ebt_core::listops::{generate_balanced, generate_dataset, read_dataset, write_dataset, GenConfig, ListOpsSample};
use ebt_core::model::{Model, ModelConfig, Variant};
use ebt_core::search::ScoreMode;
use ebt_core::train::{evaluate, fit, load_checkpoint, save_checkpoint, TrainConfig};

const CONFIG_KEYS: &str = "\
Config file keys (key = value, # comments; flags override the file):
  seed
  gen.preset gen.count gen.balanced gen.max_depth gen.max_args
  gen.min_length gen.max_length gen.max_value gen.branch_prob
  model.variant model.d model.d_cell model.d_s model.k model.slice
  model.temperature model.gau_iterations model.d_h model.dropout model.train_noise
  train.data train.val_data train.train_size train.val_size train.epochs
  train.batch_size train.lr train.patience train.target_accuracy train.time_budget_secs
  bench.lengths bench.variants bench.k bench.d bench.d_cell bench.d_s
  bench.repetitions bench.budget
  oracle.n oracle.k oracle.d oracle.mode";

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "gen.preset",
    "gen.count",
    "gen.balanced",
    "gen.max_depth",
    "gen.max_args",
    "gen.min_length",
    "gen.max_length",
    "gen.max_value",
    "gen.branch_prob",
    "model.variant",
    "model.d",
    "model.d_cell",
    "model.d_s",
    "model.k",
    "model.slice",
    "model.temperature",
    "model.gau_iterations",
    "model.d_h",
    "model.dropout",
    "model.train_noise",
    "train.data",
    "train.val_data",
    "train.train_size",
    "train.val_size",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.patience",
    "train.target_accuracy",
    "train.time_budget_secs",
    "bench.lengths",
    "bench.variants",
    "bench.k",
    "bench.d",
    "bench.d_cell",
    "bench.d_s",
    "bench.repetitions",
    "bench.budget",
    "oracle.n",
    "oracle.k",
    "oracle.d",
    "oracle.mode",
];

#[derive(Parser)]
#[command(name = "ebt", version, about = "Beam-tree recursive networks on ListOps", after_help = CONFIG_KEYS)]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Plain-text key = value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output file (dataset, checkpoint or report, depending on the command).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a ListOps dataset (tokens TAB label TAB gold trace per line).
    Gen(GenArgs),
    /// Train a model and optionally save a checkpoint to --out.
    Train(TrainArgs),
    /// Report accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Time and retained-activation profile of forward and backward passes.
    Bench(BenchArgs),
    /// Finite-difference check of every differentiable op and module.
    Gradcheck,
    /// Compare beam search against exhaustive enumeration of merge orders.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct GenArgs {
    /// desk, long or wide.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    /// Draw the same number of samples for every label.
    #[arg(long)]
    balanced: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset; generated from the seed when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation dataset; generated from the seed when absent.
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    /// Comma-separated variants, each `name[:d][:noslice]`.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Retained-scalar budget per run.
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    n: Option<usize>,
    /// Beam width; defaults to (n-1)!, every merge order.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// entangled, disentangled or both.
    #[arg(long)]
    mode: Option<String>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ebt_core::Error> for Failure {
    fn from(e: ebt_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            if code == 0 {
                print!("{e}");
            } else {
                eprint!("{e}");
            }
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("Usage: ebt [OPTIONS] <COMMAND>; see `ebt --help`");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

struct Ctx {
    kv: KeyValues,
    seed: u64,
    out: Option<PathBuf>,
}

impl Ctx {
    fn get<T: std::str::FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        self.kv.get(key).map_err(|e| usage(e.to_string()))
    }

    fn pick<T: std::str::FromStr>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T> {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    fn emit(&self, text: &str) -> CliResult<()> {
        print!("{text}");
        if let Some(path) = &self.out {
            write_file(path, text)?;
        }
        Ok(())
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let kv = match &cli.config {
        Some(path) => KeyValues::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?,
        None => KeyValues::default(),
    };
    kv.check_known(KNOWN_KEYS).map_err(|e| usage(e.to_string()))?;
    let seed = match cli.seed {
        Some(s) => s,
        None => kv.get("seed").map_err(|e| usage(e.to_string()))?.unwrap_or(0),
    };
    let ctx = Ctx { kv, seed, out: cli.out };
    match cli.command {
        Command::Gen(a) => cmd_gen(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Bench(a) => cmd_bench(&ctx, a),
        Command::Gradcheck => cmd_gradcheck(&ctx),
        Command::Oracle(a) => cmd_oracle(&ctx, a),
    }
}

fn gen_config(ctx: &Ctx, preset: Option<String>) -> CliResult<GenConfig> {
    let preset = ctx.pick(preset, "gen.preset", "desk".to_string())?;
    let base = match preset.as_str() {
        "desk" => GenConfig::desk(),
        "long" => GenConfig::long(),
        "wide" => GenConfig::wide(),
        other => return Err(usage(format!("unknown preset {other:?}"))),
    };
    let cfg = GenConfig {
        max_depth: ctx.pick(None, "gen.max_depth", base.max_depth)?,
        max_args: ctx.pick(None, "gen.max_args", base.max_args)?,
        min_length: ctx.pick(None, "gen.min_length", base.min_length)?,
        max_length: ctx.pick(None, "gen.max_length", base.max_length)?,
        max_value: ctx.pick(None, "gen.max_value", base.max_value)?,
        branch_prob: ctx.pick(None, "gen.branch_prob", base.branch_prob)?,
        seed: ctx.seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen(ctx: &Ctx, a: GenArgs) -> CliResult<()> {
    let cfg = gen_config(ctx, a.preset)?;
    let count = ctx.pick(a.count, "gen.count", 1000)?;
    let balanced = a.balanced || ctx.get("gen.balanced")?.unwrap_or(false);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let samples = if balanced {
        generate_balanced(&cfg, count.div_ceil(10), &mut rng)?
    } else {
        generate_dataset(&cfg, count, &mut rng)?
    };
    match &ctx.out {
        Some(path) => {
            with_path(path, write_dataset(path, &samples))?;
            eprintln!("wrote {} samples to {}", samples.len(), path.display());
        }
        None => {
            for s in &samples {
                println!("{}", ebt_core::listops::format_line(s));
            }
        }
    }
    Ok(())
}

fn model_config(ctx: &Ctx, variant: Option<String>) -> CliResult<ModelConfig> {
    let base = ModelConfig::default();
    let variant: Variant = match variant.or(ctx.get("model.variant")?) {
        Some(v) => v.parse().map_err(|e: ebt_core::Error| usage(e.to_string()))?,
        None => base.variant,
    };
    let cfg = ModelConfig {
        variant,
        d: ctx.pick(None, "model.d", base.d)?,
        d_cell: ctx.pick(None, "model.d_cell", base.d_cell)?,
        d_s: ctx.pick(None, "model.d_s", base.d_s)?,
        k: ctx.pick(None, "model.k", base.k)?,
        slice: ctx.pick(None, "model.slice", base.slice)?,
        temperature: ctx.pick(None, "model.temperature", base.temperature)?,
        gau_iterations: ctx.pick(None, "model.gau_iterations", base.gau_iterations)?,
        d_h: ctx.pick(None, "model.d_h", base.d_h)?,
        dropout: ctx.pick(None, "model.dropout", base.dropout)?,
        train_noise: ctx.pick(None, "model.train_noise", base.train_noise)?,
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn with_path<T>(path: &Path, r: ebt_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_or_generate(path: Option<PathBuf>, count: usize, seed: u64) -> CliResult<Vec<ListOpsSample>> {
    match path {
        Some(p) => with_path(&p, read_dataset(&p)),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(generate_dataset(&GenConfig::desk(), count, &mut rng)?)
        }
    }
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> CliResult<()> {
    let mcfg = model_config(ctx, a.variant)?;
    let data = a.data.or(ctx.get::<PathBuf>("train.data")?);
    let val_data = a.val_data.or(ctx.get::<PathBuf>("train.val_data")?);
    let train_size = ctx.pick(a.train_size, "train.train_size", 10_000)?;
    let val_size = ctx.pick(a.val_size, "train.val_size", 2_000)?;
    let train = load_or_generate(data, train_size, ctx.seed)?;
    let val = load_or_generate(val_data, val_size, ctx.seed.wrapping_add(1))?;
    let base = TrainConfig::default();
    let tcfg = TrainConfig {
        epochs: ctx.pick(a.epochs, "train.epochs", base.epochs)?,
        batch_size: ctx.pick(None, "train.batch_size", base.batch_size)?,
        lr: ctx.pick(None, "train.lr", base.lr)?,
        patience: ctx.get("train.patience")?,
        target_accuracy: ctx.get("train.target_accuracy")?,
        time_budget_secs: ctx.get("train.time_budget_secs")?,
        seed: ctx.seed,
    };
    let mut model = Model::new(mcfg, ctx.seed)?;
    eprintln!(
        "training {} on {} samples, validating on {}",
        model.cfg.variant,
        train.len(),
        val.len()
    );
    let report = fit(&mut model, &train, &val, &tcfg, |r| {
        let val = r.val_accuracy.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "epoch {:>3}  loss {:.4}  train_acc {:.4}  val_acc {}  elapsed {:.1}s",
            r.epoch, r.train.mean_loss, r.train.accuracy, val, r.elapsed_secs
        );
    })?;
    if let Some(best) = report.best_val_accuracy {
        println!("best val_acc {best:.4}");
    }
    if let Some(path) = &ctx.out {
        with_path(path, save_checkpoint(&model, path))?;
        eprintln!("saved checkpoint to {}", path.display());
    }
    Ok(())
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs) -> CliResult<()> {
    let model = with_path(&a.checkpoint, load_checkpoint(&a.checkpoint))?;
    let data = with_path(&a.data, read_dataset(&a.data))?;
    let batch = ctx.pick(None, "train.batch_size", TrainConfig::default().batch_size)?;
    let acc = evaluate(&model, &data, batch)?;
    ctx.emit(&format!("{} accuracy {acc:.4} on {} samples\n", model.cfg.variant, data.len()))
}

fn cmd_bench(ctx: &Ctx, a: BenchArgs) -> CliResult<()> {
    let base = BenchConfig::default();
    let variants = match a.variants.or(ctx.get::<String>("bench.variants")?.map(|s| {
        s.split(',').map(|x| x.trim().to_string()).collect()
    })) {
        Some(names) => names
            .iter()
            .map(|n| n.parse::<BenchVariant>().map_err(|e| usage(e.to_string())))
            .collect::<CliResult<Vec<_>>>()?,
        None => base.variants.clone(),
    };
    let lengths = match a.lengths {
        Some(l) => l,
        None => ctx.kv.list("bench.lengths").map_err(|e| usage(e.to_string()))?.unwrap_or(base.lengths.clone()),
    };
    let cfg = BenchConfig {
        lengths,
        variants,
        k: ctx.pick(a.k, "bench.k", base.k)?,
        d: ctx.pick(None, "bench.d", base.d)?,
        d_cell: ctx.pick(None, "bench.d_cell", base.d_cell)?,
        d_s: ctx.pick(None, "bench.d_s", base.d_s)?,
        repetitions: ctx.pick(a.repetitions, "bench.repetitions", base.repetitions)?,
        budget: a.budget.or(ctx.get("bench.budget")?),
        seed: ctx.seed,
    };
    let rows = bench_run(&cfg, |r| {
        eprintln!("{} n={} done", r.variant, r.length);
    })?;
    print!("{}", format_table(&rows, true));
    if let Some(path) = &ctx.out {
        write_file(path, &format_csv(&rows, true))?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_gradcheck(ctx: &Ctx) -> CliResult<()> {
    let reports = gradient_suite(ctx.seed)?;
    let mut text = String::new();
    let mut worst = 0.0f64;
    for r in &reports {
        let mark = if r.max_rel_error < GRADIENT_TOLERANCE { "ok" } else { "FAIL" };
        let _ = writeln!(text, "{:<32} {:.3e}  {mark}", r.name, r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    let _ = writeln!(text, "max relative error {worst:.3e} (tolerance {GRADIENT_TOLERANCE:e})");
    ctx.emit(&text)?;
    if worst < GRADIENT_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

fn cmd_oracle(ctx: &Ctx, a: OracleArgs) -> CliResult<()> {
    let n = ctx.pick(a.n, "oracle.n", 4)?;
    let k = ctx.pick(a.k, "oracle.k", factorial(n.saturating_sub(1)).max(1))?;
    let d = ctx.pick(a.d, "oracle.d", 5)?;
    let mode = ctx.pick(a.mode, "oracle.mode", "both".to_string())?;
    let modes = match mode.as_str() {
        "entangled" => vec![ScoreMode::Entangled],
        "disentangled" => vec![ScoreMode::Disentangled],
        "both" => vec![ScoreMode::Entangled, ScoreMode::Disentangled],
        other => return Err(usage(format!("unknown mode {other:?}"))),
    };
    if n == 0 || k == 0 || d == 0 {
        return Err(usage("n, k and d must be positive"));
    }
    const TOL: f64 = 1e-9;
    let mut text = String::new();
    let mut ok = true;
    let mut worst = 0.0f64;
    for m in modes {
        let r = oracle_check(n, k, d, m, ctx.seed)?;
        let _ = writeln!(
            text,
            "{m:?}: n={} k={} beams={} matched={}/{} max_root_dev={:.3e} max_score_dev={:.3e} prob_sum={:.12}",
            r.n, r.k, r.beams, r.matched, r.enumerated, r.max_root_dev, r.max_score_dev, r.total_probability
        );
        ok &= r.passes(TOL);
        worst = worst.max(r.max_root_dev);
    }
    let _ = writeln!(text, "max root deviation {worst:.3e}");
    ctx.emit(&text)?;
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("beam search disagrees with enumeration beyond {TOL:e}")))
    }
}
