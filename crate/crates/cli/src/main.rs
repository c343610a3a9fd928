use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use neurocache::bench::{self, BenchParams, BenchReport};
use neurocache::data::TokenStreamFile;
use neurocache::model::{adapt, checkpoint, Adam, DocumentSampler, TrainOptions};
use neurocache::recall::RecallTask;
use neurocache::{CacheBuffer, Method, Model, ModelConfig};

#[derive(Parser, Debug)]
#[command(name = "neurocache", version, about = "Train, evaluate and benchmark a cache-augmented decoder")]
struct Cli {
    /// Seed for initialization, data order and generated data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model config file (key=value lines); the toy config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a token stream file and write a checkpoint.
    Train(TrainArgs),
    /// Per-document and aggregate perplexity of a checkpoint.
    EvalPpl(EvalArgs),
    /// Time retrieval over a sweep of cache sizes.
    BenchRetrieval(BenchArgs),
    /// Summarize a cache dump.
    InspectCache(InspectArgs),
    /// Write synthetic key-value recall documents.
    GenRecall(GenArgs),
}

#[derive(Parser, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Metrics log; defaults to the checkpoint path with a `.tsv` suffix.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Documents trained side by side, each with its own cache.
    #[arg(long, default_value_t = 4)]
    lanes: usize,
    #[arg(long, default_value_t = 4)]
    segments_per_step: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Adapt this plain checkpoint instead of training from scratch.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Train a plain decoder with retrieval disabled.
    #[arg(long)]
    no_cache: bool,
}

#[derive(Parser, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate with this cache capacity instead of the trained one.
    #[arg(long)]
    cache_size: Option<usize>,
    #[arg(long)]
    no_cache: bool,
    /// Write the cache as it stands after the last document.
    #[arg(long)]
    dump_cache: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BenchMethod {
    Neurocache,
    PerHead,
    UnlimiformerCount,
}

#[derive(Parser, Debug)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = BenchMethod::Neurocache)]
    method: BenchMethod,
    /// Cache sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [8192usize, 65536])]
    m: Vec<usize>,
    /// Total entry width; per-head splits it into `a` heads.
    #[arg(long, default_value_t = 96)]
    d: usize,
    #[arg(long, default_value_t = 12)]
    a: usize,
    #[arg(long, default_value_t = 12)]
    l: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 32)]
    tokens: usize,
}

#[derive(Parser, Debug)]
struct InspectArgs {
    dump: PathBuf,
}

#[derive(Parser, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    docs: usize,
    #[arg(long, default_value_t = 4)]
    pairs: usize,
    #[arg(long, default_value_t = 4)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    min_gap: usize,
    #[arg(long, default_value_t = 2)]
    max_gap: usize,
}

/// An error with a specific process exit code.
#[derive(Debug)]
struct Exit {
    code: u8,
    message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Exit {
            code: 2,
            message: format!("{what} not found: {}", path.display()),
        }
        .into());
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<ModelConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            require_file(path, "config file")?;
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ModelConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => ModelConfig::toy(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn load_data(path: &Path, vocab_size: usize) -> Result<TokenStreamFile> {
    require_file(path, "data file")?;
    let data = TokenStreamFile::load(path)?;
    data.validate(vocab_size)
        .with_context(|| format!("in {}", path.display()))?;
    Ok(data)
}

fn load_checkpoint(path: &Path) -> Result<Model> {
    require_file(path, "checkpoint")?;
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let config = load_config(cli)?;
    let data = load_data(&args.data, config.vocab_size)?;
    let mut model = match &args.base {
        Some(path) => {
            let base = load_checkpoint(path)?;
            adapt(&base, &config)?.model
        }
        None if args.no_cache => Model::new_base(config.clone())?,
        None => Model::new(config.clone())?,
    };
    let opts = TrainOptions {
        learning_rate: args.lr,
        use_cache: !args.no_cache,
        ..TrainOptions::default()
    };
    let mut sampler = DocumentSampler::new(&model, &data.documents, args.lanes, args.segments_per_step, config.seed)?;
    let mut adam = Adam::new(&model.params);

    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("tsv"));
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "step\tloss\ttokens\ttokens_per_s")?;
    let mut first = None;
    let mut last = 0.0;
    for step in 0..args.steps {
        let start = Instant::now();
        let stats = sampler.step(&mut model, &mut adam, &opts, step)?;
        let rate = stats.tokens as f64 / start.elapsed().as_secs_f64().max(1e-9);
        writeln!(log, "{}\t{:.6}\t{}\t{:.1}", step + 1, stats.loss, stats.tokens, rate)?;
        first.get_or_insert(stats.loss);
        last = stats.loss;
    }
    log.flush()?;
    checkpoint::save(&model, &args.out)?;
    println!(
        "trained {} steps: loss {:.4} -> {:.4}; checkpoint {}, log {}",
        args.steps,
        first.unwrap_or(f64::NAN),
        last,
        args.out.display(),
        log_path.display()
    );
    Ok(())
}

/// Fields that must agree between a config file and a checkpoint.
fn check_shapes(config: &ModelConfig, model: &ModelConfig) -> Result<()> {
    let pairs = [
        ("layers", config.layers, model.layers),
        ("lower_layers", config.lower_layers, model.lower_layers),
        ("segment_len", config.segment_len, model.segment_len),
        ("hidden", config.hidden, model.hidden),
        ("compressed", config.compressed, model.compressed),
        ("heads", config.heads, model.heads),
        ("head_dim", config.head_dim, model.head_dim),
        ("ffn_dim", config.ffn_dim, model.ffn_dim),
        ("vocab_size", config.vocab_size, model.vocab_size),
    ];
    for (name, want, have) in pairs {
        if want != have {
            bail!("shape mismatch: config {name}={want}, checkpoint {name}={have}");
        }
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let mut model = load_checkpoint(&args.checkpoint)?;
    if cli.config.is_some() {
        check_shapes(&load_config(cli)?, &model.config)?;
    }
    if let Some(m) = args.cache_size {
        model = model.with_cache_size(m)?;
    }
    let data = load_data(&args.data, model.config.vocab_size)?;
    let use_cache = !args.no_cache && model.has_cache_attention();
    if !args.no_cache && !model.has_cache_attention() {
        eprintln!("note: checkpoint has no cache-attention weights; evaluating without a cache");
    }
    let mut cache = if use_cache { Some(model.new_cache()?) } else { None };

    println!("doc\ttokens\tperplexity");
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    for (i, doc) in data.documents.iter().enumerate() {
        let score = model.process_document_with(doc, cache.as_mut())?;
        total_nll += score.nll.iter().sum::<f64>();
        total_tokens += score.nll.len();
        println!("{i}\t{}\t{:.4}", score.nll.len(), score.perplexity);
    }
    println!(
        "aggregate\t{total_tokens}\t{:.4}",
        (total_nll / total_tokens as f64).exp()
    );
    if let Some(path) = &args.dump_cache {
        let blank;
        let cache = match &cache {
            Some(c) => c,
            None => {
                blank = CacheBuffer::new(model.config.cache_size, model.config.compressed)?;
                &blank
            }
        };
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        cache.write_dump(BufWriter::new(file))?;
    }
    Ok(())
}

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> Result<()> {
    let method = match args.method {
        BenchMethod::Neurocache => Method::Neurocache,
        BenchMethod::PerHead => Method::PerHead { heads: args.a },
        BenchMethod::UnlimiformerCount => Method::UnlimiformerCount {
            layers: args.l,
            heads: args.a,
        },
    };
    if args.m.is_empty() {
        bail!("--m needs at least one cache size");
    }
    let params = BenchParams {
        tokens: args.tokens,
        repetitions: args.reps,
        seed: cli.seed.unwrap_or(0),
        ..BenchParams::new(method, args.m[0], args.d, args.k)
    };
    println!("{}", BenchReport::HEADER);
    for report in bench::sweep(&params, &args.m)? {
        println!("{}", report.tsv_row());
    }
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    require_file(&args.dump, "cache dump")?;
    let file = File::open(&args.dump).with_context(|| format!("opening {}", args.dump.display()))?;
    let cache = CacheBuffer::read_dump(std::io::BufReader::new(file)).map_err(|e| match e {
        neurocache::Error::Corrupt { .. } => anyhow::Error::new(Exit {
            code: 3,
            message: format!("{e} ({})", args.dump.display()),
        }),
        other => other.into(),
    })?;
    println!("m\t{}", cache.capacity());
    println!("d\t{}", cache.dim());
    println!("valid_count\t{}", cache.valid_count());
    println!("epoch\t{}", cache.epoch());
    let states = cache.snapshot().to_array();
    println!("dim\tmean\tstd");
    for (j, col) in states.columns().into_iter().enumerate() {
        let n = col.len().max(1) as f64;
        let mean = col.sum() / n;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        println!("{j}\t{mean:.6}\t{:.6}", var.sqrt());
    }
    Ok(())
}

fn cmd_gen(cli: &Cli, args: &GenArgs) -> Result<()> {
    let config = load_config(cli)?;
    let task = RecallTask {
        vocab_size: config.vocab_size,
        segment_len: config.segment_len,
        pairs: args.pairs,
        repeats: args.repeats,
        min_gap: args.min_gap,
        max_gap: args.max_gap,
    };
    task.validate()?;
    let docs = task.dataset(args.docs, config.seed);
    let file = TokenStreamFile::new(docs.into_iter().map(|d| d.tokens).collect());
    file.save(&args.out)?;
    println!(
        "wrote {} documents, {} tokens to {}",
        file.documents.len(),
        file.num_tokens(),
        args.out.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(cli, args),
        Command::EvalPpl(args) => cmd_eval(cli, args),
        Command::BenchRetrieval(args) => cmd_bench(cli, args),
        Command::InspectCache(args) => cmd_inspect(args),
        Command::GenRecall(args) => cmd_gen(cli, args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err.downcast_ref::<Exit>().map_or(1, |e| e.code);
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
