//! `schemadapt` command-line interface.
//!
//! Exit status: 0 on success, 1 for invalid input or configuration, 2 for
//! runtime and numeric failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use schemadapt::bench::protocols::{run_ablations, run_few_shot, run_zero_shot_all};
use schemadapt::bench::{generate_pair, BenchmarkPair, Paraphrase};
use schemadapt::config::{ProviderKind, RunConfig};
use schemadapt::encoder::EncoderVariant;
use schemadapt::mgda::min_norm_solve;
use schemadapt::pipeline::{encode_dump, eval_run, train_run};
use schemadapt::schema::{parse_dataset, parse_schema, DatasetMatrix};
use schemadapt::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "schemadapt", version, about = "Schema-adaptive tabular representation learning")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed; data, init and shuffle seeds are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Embedding provider.
    #[arg(long, global = true, value_parser = ["offline", "remote"])]
    provider: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic source/target benchmark pair.
    SynthGen(SynthGenArgs),
    /// Print the statements and embedding norms of a data file.
    Encode(EncodeArgs),
    /// Train a model on a data file.
    Train(TrainArgs),
    /// Evaluate a trained run on a data file.
    Eval(EvalArgs),
    /// Zero-shot transfer from source to target.
    ZeroShot(ProtocolArgs),
    /// Fine-tuning versus training from scratch on small target samples.
    FewShot(ProtocolArgs),
    /// Depth, projection and modality ablations.
    Ablate(ProtocolArgs),
    /// Solve the min-norm problem for a CSV gradient matrix (one task per row).
    MgdaSolve(MgdaArgs),
}

#[derive(Args, Debug)]
struct SynthGenArgs {
    #[arg(long)]
    n_source: Option<usize>,
    #[arg(long)]
    n_target: Option<usize>,
    #[arg(long)]
    n_features: Option<usize>,
    #[arg(long)]
    num_labels: Option<usize>,
    /// identical, light or heavy.
    #[arg(long)]
    paraphrase: Option<Paraphrase>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Schema metadata (JSON).
    #[arg(long, value_name = "PATH")]
    schema: PathBuf,
    /// Data file (CSV).
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[command(flatten)]
    input: DataArgs,
    /// Rows to print.
    #[arg(long, default_value_t = 1)]
    rows: usize,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<EncoderVariant>,
    #[arg(long)]
    embed_dim: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Embedding dimension, shared by the provider and the model.
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<EncoderVariant>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    input: DataArgs,
    /// Output directory of a `train` run.
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
}

#[derive(Args, Debug)]
struct ProtocolArgs {
    /// Pair directory written by `synth-gen`; generated from the config when absent.
    #[arg(long, value_name = "DIR")]
    pair: Option<PathBuf>,
    #[arg(long)]
    paraphrase: Option<Paraphrase>,
    /// Source training epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct MgdaArgs {
    /// CSV without header; row t is the gradient of task t.
    #[arg(long, value_name = "PATH")]
    gradients: PathBuf,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

fn parse_variant(s: &str) -> std::result::Result<EncoderVariant, String> {
    match s {
        "semantic" => Ok(EncoderVariant::Semantic),
        "random_embed" => Ok(EncoderVariant::RandomEmbed),
        "name_only" => Ok(EncoderVariant::NameOnly),
        other => Err(format!("unknown variant `{other}` (semantic, random_embed, name_only)")),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_data(args: &DataArgs) -> Result<DatasetMatrix> {
    let schema = parse_schema(&read(&args.schema)?)?;
    parse_dataset(&read(&args.data)?, &schema)
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.propagate_seed();
    if let Some(p) = &cli.provider {
        let kind: ProviderKind = p.parse()?;
        cfg.provider.kind = kind;
        cfg.bench.provider.kind = kind;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn set_embed_dim(cfg: &mut RunConfig, dim: Option<usize>) {
    if let Some(d) = dim {
        cfg.provider.dimension = d;
        cfg.model.embed_dim = d;
    }
}

fn load_or_generate(args: &ProtocolArgs, cfg: &mut RunConfig, n_target: Option<usize>) -> Result<BenchmarkPair> {
    if let Some(p) = args.paraphrase {
        cfg.bench.generator.paraphrase = p;
    }
    if let Some(e) = args.epochs {
        cfg.bench.train.epochs = e;
    }
    cfg.bench.validate()?;
    match &args.pair {
        Some(dir) => BenchmarkPair::load(dir),
        None => {
            let mut g = cfg.bench.generator.clone();
            if let Some(n) = n_target {
                g.n_target = n;
            }
            generate_pair(&g, cfg.seed)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = run_config(cli)?;
    match &cli.command {
        Command::SynthGen(a) => {
            let g = &mut cfg.bench.generator;
            if let Some(v) = a.n_source {
                g.n_source = v;
            }
            if let Some(v) = a.n_target {
                g.n_target = v;
            }
            if let Some(v) = a.n_features {
                g.n_features = v;
            }
            if let Some(v) = a.num_labels {
                g.num_labels = v;
            }
            if let Some(v) = a.paraphrase {
                g.paraphrase = v;
            }
            let pair = generate_pair(g, cfg.seed)?;
            let out = out_dir(cli, "pair");
            pair.save(&out)?;
            cfg.write_to(&out)?;
            println!(
                "wrote {} source and {} target rows to {}",
                pair.source.len(),
                pair.target.len(),
                out.display()
            );
        }
        Command::Encode(a) => {
            if let Some(v) = a.variant {
                cfg.variant = v;
            }
            set_embed_dim(&mut cfg, a.embed_dim);
            let data = load_data(&a.input)?;
            print!("{}", encode_dump(&data, &cfg, a.rows)?);
        }
        Command::Train(a) => {
            if let Some(v) = a.epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = a.lr {
                cfg.train.learning_rate = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = a.d_model {
                cfg.model.d_model = v;
            }
            if let Some(v) = a.layers {
                cfg.model.num_layers = v;
            }
            if let Some(v) = a.heads {
                cfg.model.num_heads = v;
            }
            if let Some(v) = a.variant {
                cfg.variant = v;
            }
            set_embed_dim(&mut cfg, a.embed_dim);
            let data = load_data(&a.input)?;
            let out = out_dir(cli, "run");
            let art = train_run(&data, &cfg, &out)?;
            println!("best epoch {}; checkpoint {}", art.best_epoch, art.checkpoint.display());
            print!("{}", art.test.to_table());
        }
        Command::Eval(a) => {
            let data = load_data(&a.input)?;
            if let Some(out) = &cli.out {
                cfg.write_to(out)?;
            }
            let report = eval_run(&a.run, &data)?;
            if let Some(out) = &cli.out {
                let path = out.join("metrics.json");
                fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
            }
            print!("{}", report.to_table());
        }
        Command::ZeroShot(a) => {
            let pair = load_or_generate(a, &mut cfg, None)?;
            let out = out_dir(cli, "results");
            cfg.write_to(&out)?;
            let result = run_zero_shot_all(&pair, &cfg.bench)?;
            result.write(&out)?;
            print!("{}", result.to_markdown());
        }
        Command::FewShot(a) => {
            let n = cfg.bench.few_shot.n_target;
            let pair = load_or_generate(a, &mut cfg, Some(n))?;
            let out = out_dir(cli, "results");
            cfg.write_to(&out)?;
            let result = run_few_shot(&pair, &cfg.bench)?;
            result.write(&out)?;
            print!("{}", result.to_markdown());
        }
        Command::Ablate(a) => {
            let pair = load_or_generate(a, &mut cfg, None)?;
            let out = out_dir(cli, "results");
            cfg.write_to(&out)?;
            let result = run_ablations(&pair, &cfg.bench)?;
            result.write(&out)?;
            print!("{}", result.to_markdown());
        }
        Command::MgdaSolve(a) => {
            let grads = read_gradients(&a.gradients)?;
            let sol = min_norm_solve(&grads, a.max_iters, a.tol)?;
            let alpha: Vec<String> = sol.alpha.iter().map(|v| format!("{v:.6}")).collect();
            println!("alpha=({})", alpha.join(", "));
            println!("norm_sq={:e}", sol.norm_sq);
            println!("gap={:e} iterations={}", sol.gap, sol.iterations);
            let margin = sol.kkt_margin(&grads);
            let ok = margin >= -a.tol;
            println!("kkt_margin={margin:e} ({})", if ok { "holds" } else { "violated" });
        }
    }
    Ok(())
}

fn read_gradients(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = read(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse("gradient csv", e))?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Validation(format!("gradient row {i}: `{f}` is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if let Some(w) = rows.first().map(Vec::len) {
        if let Some(bad) = rows.iter().position(|r| r.len() != w) {
            return Err(Error::Validation(format!("gradient row {bad} has {} entries, row 0 has {w}", rows[bad].len())));
        }
    }
    Ok(rows)
}

/// Invalid input, including a required input file that does not exist.
fn is_input_error(e: &Error) -> bool {
    match e {
        Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
        other => other.is_input_error(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            log::debug!("{e:?}");
            ExitCode::from(if is_input_error(&e) { 1 } else { 2 })
        }
    }
}
