//! Command-line front end: tokenize, train, translate, and inspect models.
//!
//! Exit codes: 0 success, 1 usage errors (bad flags, bad config keys),
//! 2 runtime failures (I/O, divergence, malformed inputs).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moce::analysis::{
    avg_delta, avg_delta_weighted, conciseness_report, record_expert_ratios, MultiParallelCorpus,
};
use moce::checkpoint::{load_model, save_model};
use moce::model::{build_model, Model, ModelConfig};
use moce::tokenizer::{build_vocab, decode, encode};
use moce::training::{
    apply_checkpoint_average, encode_corpus, make_synthetic_corpus, token_accuracy, train,
    ParallelCorpus, SymbolWidth, SyntheticConfig, Task, TrainConfig,
};
use moce::Error;

#[derive(Parser)]
#[command(name = "moce", version, about = "byte-level translation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode text to token ids or decode ids back to text.
    Tokenize(TokenizeArgs),
    /// Average byte lengths per language over an aligned corpus.
    Conciseness(ConcisenessArgs),
    /// Train a model on a parallel corpus.
    Train(TrainArgs),
    /// Translate text with a trained model.
    Translate(TranslateArgs),
    /// Expert selection statistics over a corpus.
    RouteStats(RouteStatsArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Report parameter counts for a configuration.
    Params(ParamsArgs),
}

#[derive(Args)]
struct TokenizeArgs {
    /// Comma-separated language codes making up the vocabulary.
    #[arg(long)]
    langs: String,
    /// Language of the text being encoded.
    #[arg(long)]
    lang: Option<String>,
    /// Text to encode.
    #[arg(long)]
    text: Option<String>,
    /// Space-separated token ids to decode instead.
    #[arg(long)]
    decode: Option<String>,
}

#[derive(Args)]
struct ConcisenessArgs {
    /// TSV with a language-code header row and aligned sentence rows.
    #[arg(long)]
    corpus: PathBuf,
    /// Language whose average length anchors the ratios.
    #[arg(long)]
    pivot: String,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus TSV (src_lang, tgt_lang, src_text, tgt_text).
    #[arg(long)]
    train: PathBuf,
    /// Validation corpus TSV.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to save the trained model.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Directory for intermediate checkpoints.
    #[arg(long)]
    ckpt_dir: Option<PathBuf>,
    /// Write the loss log (step, train loss, valid loss) here.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Report teacher-forced token accuracy on the validation set when done.
    #[arg(long)]
    accuracy: bool,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    src_lang: String,
    #[arg(long)]
    tgt_lang: String,
    /// Translate this text; otherwise read lines from --input.
    #[arg(long)]
    text: Option<String>,
    /// File with one source sentence per line.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long, default_value_t = 1.5)]
    length_penalty: f64,
    #[arg(long, default_value_t = 256)]
    max_new: usize,
    /// Feed the router a different language code, or `none` for a zero
    /// context.
    #[arg(long)]
    override_lid: Option<String>,
}

#[derive(Args)]
struct RouteStatsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Restrict to one direction, e.g. `en:de`.
    #[arg(long)]
    direction: Option<String>,
    #[arg(long)]
    override_lid: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// `key = value` configuration file for the probed model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Finite-difference step size.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Probe only this many evenly spaced coordinates (0 = all).
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Fail (exit 2) when the relative error exceeds this.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated language codes for the vocabulary.
    #[arg(long, default_value = "src,tgt")]
    langs: String,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parse a `key = value` file into model and training configuration,
/// rejecting unknown keys. `#` starts a comment.
fn load_config_file(path: &Path) -> Result<(ModelConfig, TrainConfig), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{}:{}: expected key = value", path.display(), lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        apply_config_kv(&mut model, &mut train, key, value)
            .map_err(|e| usage(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
    }
    Ok((model, train))
}

fn apply_config_kv(
    model: &mut ModelConfig,
    train: &mut TrainConfig,
    key: &str,
    value: &str,
) -> Result<(), String> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
        value
            .parse()
            .map_err(|_| format!("bad value {value:?} for {key}"))
    }
    match key {
        "enc_layers" => model.enc_layers = parse(key, value)?,
        "dec_layers" => model.dec_layers = parse(key, value)?,
        "d_model" => model.d_model = parse(key, value)?,
        "heads" => model.heads = parse(key, value)?,
        "ffn" => model.ffn = parse(key, value)?,
        "delta_max" => model.delta_max = parse(key, value)?,
        "top_k" => model.top_k = parse(key, value)?,
        "ada_layer" => model.ada_layer = parse(key, value)?,
        "lid" => model.lid = parse(key, value)?,
        "per_stream_router" => model.per_stream_router = parse(key, value)?,
        "mask_logits" => model.mask_logits = parse(key, value)?,
        "expert_bias" => model.expert_bias = parse(key, value)?,
        "expert_activation" => model.expert_activation = parse(key, value)?,
        "share_embeddings" => model.share_embeddings = parse(key, value)?,
        "dropout" => model.dropout = parse(key, value)?,
        "balance_coeff" => model.balance_coeff = parse(key, value)?,
        "seed" => {
            model.seed = parse(key, value)?;
            train.seed = model.seed;
        }
        "fixed_scales" => {
            let scales: Result<Vec<usize>, _> =
                value.split(',').map(|s| s.trim().parse()).collect();
            model.fixed_scales =
                Some(scales.map_err(|_| format!("bad value {value:?} for {key}"))?);
        }
        "lr" => train.lr = parse(key, value)?,
        "warmup" => train.warmup = parse(key, value)?,
        "steps" => train.steps = parse(key, value)?,
        "batch_size" => train.batch_size = parse(key, value)?,
        "smoothing" => train.smoothing = parse(key, value)?,
        "valid_every" => train.valid_every = parse(key, value)?,
        "patience" => train.patience = parse(key, value)?,
        "average_last" => train.average_last = parse(key, value)?,
        _ => return Err(format!("unknown configuration key {key:?}")),
    }
    Ok(())
}

fn split_langs(spec: &str) -> Vec<String> {
    spec.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn write_or_print(out: Option<&Path>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn run_tokenize(args: &TokenizeArgs) -> Result<(), CliError> {
    let vocab = build_vocab(&split_langs(&args.langs))?;
    match (&args.text, &args.decode) {
        (Some(text), None) => {
            let lang = args
                .lang
                .as_deref()
                .ok_or_else(|| usage("--lang is required when encoding"))?;
            let seq = encode(text, lang, &vocab)?;
            let ids: Vec<String> = seq.ids.iter().map(|i| i.to_string()).collect();
            println!("{}", ids.join(" "));
            Ok(())
        }
        (None, Some(spec)) => {
            let ids: Result<Vec<usize>, _> =
                spec.split_whitespace().map(|s| s.parse()).collect();
            let ids = ids.map_err(|_| usage(format!("bad id list {spec:?}")))?;
            println!("{}", decode(&ids, &vocab));
            Ok(())
        }
        _ => Err(usage("pass exactly one of --text or --decode")),
    }
}

fn run_conciseness(args: &ConcisenessArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.corpus)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.corpus.display())))?;
    let corpus = MultiParallelCorpus::from_tsv(&text)?;
    let report = conciseness_report(&corpus, &args.pivot)?;
    write_or_print(args.out.as_deref(), &report.to_csv())
}

fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let (mut model_cfg, mut train_cfg) = match &args.config {
        Some(p) => load_config_file(p)?,
        None => (ModelConfig::default(), TrainConfig::default()),
    };
    if let Some(seed) = args.seed {
        model_cfg.seed = seed;
        train_cfg.seed = seed;
    }
    if let Some(v) = args.steps {
        train_cfg.steps = v;
    }
    if let Some(v) = args.lr {
        train_cfg.lr = v;
    }
    if let Some(v) = args.batch_size {
        train_cfg.batch_size = v;
    }

    let train_corpus = ParallelCorpus::load(&args.train)?;
    let valid_corpus = match &args.valid {
        Some(p) => ParallelCorpus::load(p)?,
        None => ParallelCorpus::default(),
    };
    let mut langs = train_corpus.languages();
    langs.extend(valid_corpus.languages());
    langs.sort();
    langs.dedup();
    let vocab = build_vocab(&langs)?;
    let train_pairs = encode_corpus(&train_corpus, &vocab)?;
    let valid_pairs = encode_corpus(&valid_corpus, &vocab)?;

    let mut model = build_model(&model_cfg, &vocab)?;
    eprintln!(
        "model: {} parameters ({} adaptive overhead)",
        model.param_count(),
        model.moce_param_overhead()
    );
    let report = train(
        &mut model,
        &train_cfg,
        &train_pairs,
        &valid_pairs,
        args.ckpt_dir.as_deref(),
    )?;
    apply_checkpoint_average(&mut model, &report, train_cfg.average_last)?;
    save_model(&model, &args.out)?;
    if let Some(log) = &args.log {
        std::fs::write(log, report.log_text())
            .map_err(|e| CliError::Runtime(format!("{}: {e}", log.display())))?;
    }
    eprintln!(
        "finished after {} steps (best valid loss {:.4}{})",
        report.steps_run,
        report.best_valid,
        if report.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );
    if args.accuracy && !valid_pairs.is_empty() {
        let acc = token_accuracy(&model, &valid_pairs)?;
        eprintln!("validation token accuracy: {:.2}%", 100.0 * acc);
    }
    Ok(())
}

fn translate_line(model: &Model, args: &TranslateArgs, line: &str) -> Result<String, CliError> {
    let seq = encode(line, &args.src_lang, &model.vocab)?;
    let lid = model.lid_mode(args.override_lid.as_deref())?;
    let out = model.translate_ids(
        &seq.ids,
        &args.tgt_lang,
        args.beam,
        args.length_penalty,
        args.max_new,
        lid,
        None,
    )?;
    Ok(decode(&out, &model.vocab))
}

fn run_translate(args: &TranslateArgs) -> Result<(), CliError> {
    if args.beam == 0 {
        return Err(usage("--beam must be positive"));
    }
    let model = load_model(&args.model)?;
    match (&args.text, &args.input) {
        (Some(text), None) => {
            println!("{}", translate_line(&model, args, text)?);
            Ok(())
        }
        (None, Some(path)) => {
            let content = std::fs::read_to_string(path)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            for line in content.lines() {
                println!("{}", translate_line(&model, args, line)?);
            }
            Ok(())
        }
        _ => Err(usage("pass exactly one of --text or --input")),
    }
}

fn run_route_stats(args: &RouteStatsArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let corpus = ParallelCorpus::load(&args.corpus)?;
    let direction = match &args.direction {
        Some(spec) => Some(
            spec.split_once(':')
                .ok_or_else(|| usage(format!("bad direction {spec:?}; expected src:tgt")))?,
        ),
        None => None,
    };
    let stats = record_expert_ratios(&model, &corpus, direction, args.override_lid.as_deref())?;
    eprintln!(
        "avg delta: {:.4} by selection, {:.4} by gate weight ({} events)",
        avg_delta(&stats)?,
        avg_delta_weighted(&stats)?,
        stats.total_events()
    );
    write_or_print(args.out.as_deref(), &stats.to_csv())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let (mut model_cfg, _) = match &args.config {
        Some(p) => load_config_file(p)?,
        None => (
            ModelConfig {
                d_model: 16,
                heads: 2,
                ffn: 32,
                delta_max: 3,
                dropout: 0.0,
                ..Default::default()
            },
            TrainConfig::default(),
        ),
    };
    model_cfg.seed = args.seed;
    model_cfg.dropout = 0.0;
    let corpus = make_synthetic_corpus(&SyntheticConfig {
        src_width: SymbolWidth::One,
        tgt_width: SymbolWidth::Three,
        alphabet: 6,
        min_len: 2,
        max_len: 4,
        n_sentences: 2,
        task: Task::Copy,
        seed: args.seed,
        ..Default::default()
    })?;
    let vocab = build_vocab(&corpus.languages())?;
    let pairs = encode_corpus(&corpus, &vocab)?;
    let model = build_model(&model_cfg, &vocab)?;
    let sample = (args.sample > 0).then_some(args.sample);
    let err = model.grad_check(&pairs, 0.1, args.step, sample)?;
    println!("max relative gradient error: {err:.3e}");
    if !err.is_finite() || err > args.tolerance {
        return Err(CliError::Runtime(format!(
            "gradient check failed: {err:.3e} > {:.1e}",
            args.tolerance
        )));
    }
    Ok(())
}

fn run_params(args: &ParamsArgs) -> Result<(), CliError> {
    let (model_cfg, _) = match &args.config {
        Some(p) => load_config_file(p)?,
        None => (ModelConfig::default(), TrainConfig::default()),
    };
    let vocab = build_vocab(&split_langs(&args.langs))?;
    let model = build_model(&model_cfg, &vocab)?;
    println!("vocab_size\t{}", vocab.size());
    println!("parameters\t{}", model.param_count());
    println!("adaptive_overhead\t{}", model.moce_param_overhead());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Tokenize(a) => run_tokenize(a),
        Command::Conciseness(a) => run_conciseness(a),
        Command::Train(a) => run_train(a),
        Command::Translate(a) => run_translate(a),
        Command::RouteStats(a) => run_route_stats(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Params(a) => run_params(a),
    }
}

fn main() -> ExitCode {
    if let Ok(spec) = std::env::var("MOCE_THREADS") {
        if let Ok(n) = spec.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
