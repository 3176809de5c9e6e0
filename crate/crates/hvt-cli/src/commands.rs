use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hvt_core::baselines::{flat_speculative_decode, greedy_decode, multinomial_decode};
use hvt_core::bench::{
    divergence_test, monte_carlo_divergence, run_benchmark, write_csv, write_json, BenchConfig,
    BenchError, DecoderSpec, ModelSource,
};
use hvt_core::engine::{
    decode_traced, AcceptMode, EngineError, FrontierRank, HvtConfig, TraceEvent,
};
use hvt_core::model::{
    random_table_spec, sample_corpus, sequence_logprob, write_corpus, LanguageModel, ModelError,
    ModelSpec, UniformMixModel,
};
use hvt_core::report::DecodeReport;
use hvt_core::tree::{DraftPolicy, PriorityMode};
use hvt_core::TokenSeq;

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or validation failure (exit 2).
    Config(String),
    /// Runtime failure such as I/O (exit 3).
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) | EngineError::ModelMismatch(_) => {
                CliError::Config(e.to_string())
            }
            EngineError::Model(m) => CliError::from(m),
            EngineError::Tree(t) => CliError::Config(t.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Io(_) => CliError::Runtime(e.to_string()),
            BenchError::Engine(inner) => CliError::from(inner),
            BenchError::Model(inner) => CliError::from(inner),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn load_spec(path: &Path) -> Result<ModelSpec, CliError> {
    ModelSpec::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(Parser)]
#[command(
    name = "hvt",
    version,
    about = "Speculative tree-verification decoding over synthetic language models"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a model file.
    GenModel(GenModelArgs),
    /// Sample a corpus file from a model.
    GenCorpus(GenCorpusArgs),
    /// Decode a prompt with one decoder and print beams plus a report as JSON.
    Decode(Box<DecodeArgs>),
    /// Run a benchmark sweep from a config file.
    Bench(BenchArgs),
    /// Compare a decoder's output distribution against the target model.
    DistTest(Box<DistTestArgs>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKindArg {
    Table,
    Softmax,
}

#[derive(Args)]
struct GenModelArgs {
    /// Model family to generate.
    #[arg(long, value_enum)]
    kind: ModelKindArg,
    #[arg(long)]
    vocab_size: usize,
    /// Token id reserved as EOS.
    #[arg(long)]
    eos: u32,
    /// Seed for the generated parameters.
    #[arg(long)]
    seed: Option<u64>,
    /// Context order (table models).
    #[arg(long, default_value_t = 1)]
    order: usize,
    /// Row skew: higher concentrates probability mass (table models).
    #[arg(long, default_value_t = 2.0)]
    skew: f64,
    /// Probability assigned to EOS in every row (table models).
    #[arg(long, default_value_t = 0.0)]
    eos_prob: f64,
    /// Embedding dimension (softmax models).
    #[arg(long, default_value_t = 4)]
    embed_dim: usize,
    /// Softmax temperature (softmax models).
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Output path for the model JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Model file to sample from.
    #[arg(long)]
    model: PathBuf,
    /// Number of sequences.
    #[arg(long)]
    sequences: usize,
    /// Maximum tokens per sequence.
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path for the corpus.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DecoderArg {
    Hvt,
    Greedy,
    Multinomial,
    FlatSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PriorityModeArg {
    LogLikelihood,
    NegPerplexity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FrontierRankArg {
    CumLogprob,
    LengthNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DraftPolicyArg {
    TopK,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AcceptModeArg {
    Stochastic,
    Threshold,
}

/// Optional config file carrying the same settings as the decode flags.
/// Precedence: flags > file > defaults.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DecodeFileConfig {
    p_model: Option<PathBuf>,
    q_model: Option<PathBuf>,
    q_divergence: Option<f64>,
    decoder: Option<String>,
    prompt: Option<Vec<u32>>,
    gamma: Option<usize>,
    k: Option<usize>,
    w: Option<usize>,
    priority_mode: Option<PriorityMode>,
    stop_at_w: Option<bool>,
    node_cap: Option<usize>,
    max_new_tokens: Option<usize>,
    frontier_rank: Option<FrontierRank>,
    draft_policy: Option<DraftPolicy>,
    accept_mode: Option<AcceptMode>,
    seed: Option<u64>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Target model file.
    #[arg(long)]
    p_model: Option<PathBuf>,
    /// Draft model file (mutually exclusive with --q-divergence).
    #[arg(long)]
    q_model: Option<PathBuf>,
    /// Derive the draft model from the target by mixing with uniform.
    #[arg(long)]
    q_divergence: Option<f64>,
    #[arg(long, value_enum)]
    decoder: Option<DecoderArg>,
    /// Prompt as whitespace-separated token ids, e.g. "0 1 2".
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long, value_enum)]
    priority_mode: Option<PriorityModeArg>,
    /// Disable early stop once the accepted frontier reaches width W.
    #[arg(long)]
    no_stop_at_w: bool,
    #[arg(long)]
    node_cap: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long, value_enum)]
    frontier_rank: Option<FrontierRankArg>,
    #[arg(long, value_enum)]
    draft_policy: Option<DraftPolicyArg>,
    #[arg(long, value_enum)]
    accept_mode: Option<AcceptModeArg>,
    /// Master seed; required for every decoder except greedy.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the step trace to stderr, one JSON event per line (tree
    /// decoder only).
    #[arg(long)]
    trace: bool,
    /// Write each step's draft trees to stderr, one JSON dump per line
    /// (tree decoder only).
    #[arg(long)]
    dump_tree: bool,
    /// Config file with the same settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark config file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Report output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    /// Override the config file's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config file's trial count.
    #[arg(long)]
    trials: Option<u64>,
    /// Override the config file's worker-thread count.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct DistTestArgs {
    #[arg(long, value_enum)]
    decoder: DecoderArg,
    #[arg(long)]
    p_model: PathBuf,
    #[arg(long)]
    q_model: Option<PathBuf>,
    #[arg(long)]
    q_divergence: Option<f64>,
    /// Prompt as whitespace-separated token ids.
    #[arg(long, default_value = "")]
    prompt: String,
    /// Emitted-sequence length to compare over.
    #[arg(long, default_value_t = 1)]
    horizon: usize,
    /// Require exact enumeration.
    #[arg(long, conflicts_with = "samples")]
    exact: bool,
    /// Force Monte-Carlo with this many samples.
    #[arg(long)]
    samples: Option<u64>,
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenModel(args) => gen_model(args),
        Command::GenCorpus(args) => gen_corpus(args),
        Command::Decode(args) => decode_cmd(*args),
        Command::Bench(args) => bench_cmd(args),
        Command::DistTest(args) => dist_test_cmd(*args),
    }
}

fn gen_model(args: GenModelArgs) -> Result<(), CliError> {
    let seed = args.seed.ok_or_else(|| {
        CliError::Config("--seed is required: model generation is seeded".into())
    })?;
    let spec = match args.kind {
        ModelKindArg::Table => random_table_spec(
            args.vocab_size,
            args.eos,
            args.order,
            seed,
            args.skew,
            args.eos_prob,
        )?,
        ModelKindArg::Softmax => {
            let spec = ModelSpec::Softmax {
                vocab_size: args.vocab_size,
                eos: args.eos,
                seed,
                embed_dim: args.embed_dim,
                temperature: args.temperature,
            };
            spec.validate()?;
            spec
        }
    };
    spec.to_path(&args.out).map_err(|e| match e {
        ModelError::Io(io) => io_err(&args.out, io),
        other => CliError::Config(other.to_string()),
    })?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn gen_corpus(args: GenCorpusArgs) -> Result<(), CliError> {
    if args.sequences == 0 {
        return Err(CliError::Config("--sequences must be at least 1".into()));
    }
    let seed = args
        .seed
        .ok_or_else(|| CliError::Config("--seed is required: corpus sampling is seeded".into()))?;
    let model = load_spec(&args.model)?.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = sample_corpus(&*model, args.sequences, args.max_len, &mut rng)?;
    write_corpus(&args.out, &corpus).map_err(|e| match e {
        ModelError::Io(io) => io_err(&args.out, io),
        other => CliError::Config(other.to_string()),
    })?;
    println!("wrote {} sequences to {}", args.sequences, args.out.display());
    Ok(())
}

fn parse_prompt(text: &str) -> Result<TokenSeq, CliError> {
    let mut ids = Vec::new();
    for tok in text.split_whitespace() {
        let id: u32 = tok
            .parse()
            .map_err(|_| CliError::Config(format!("prompt token '{tok}' is not an id")))?;
        ids.push(id);
    }
    Ok(TokenSeq::from_ids(&ids))
}

struct ModelPair {
    p: Box<dyn LanguageModel>,
    q: Box<dyn LanguageModel>,
}

fn load_pair(
    p_path: &Path,
    q_path: Option<&Path>,
    q_divergence: Option<f64>,
) -> Result<ModelPair, CliError> {
    if q_path.is_some() && q_divergence.is_some() {
        return Err(CliError::Config(
            "--q-model and --q-divergence are mutually exclusive".into(),
        ));
    }
    let p_spec = load_spec(p_path)?;
    let p = p_spec.build()?;
    let q: Box<dyn LanguageModel> = match (q_path, q_divergence) {
        (Some(_), Some(_)) => unreachable!("checked above"),
        (Some(path), None) => load_spec(path)?.build()?,
        (None, alpha) => {
            let alpha = alpha.unwrap_or(0.0);
            if !(0.0..=1.0).contains(&alpha) {
                return Err(CliError::Config(format!(
                    "--q-divergence {alpha} is outside [0, 1]"
                )));
            }
            Box::new(UniformMixModel::new(p_spec.build()?, alpha))
        }
    };
    Ok(ModelPair { p, q })
}

#[derive(Serialize)]
struct BeamOut {
    tokens: Vec<u32>,
    score: f64,
}

#[derive(Serialize)]
struct DecodeOut {
    decoder: String,
    prompt: Vec<u32>,
    beams: Vec<BeamOut>,
    report: DecodeReport,
}

fn decode_cmd(args: DecodeArgs) -> Result<(), CliError> {
    let file: DecodeFileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => DecodeFileConfig::default(),
    };

    let p_model = args
        .p_model
        .or(file.p_model)
        .ok_or_else(|| CliError::Config("--p-model is required".into()))?;
    let q_model = args.q_model.or(file.q_model);
    let q_divergence = args.q_divergence.or(file.q_divergence);
    let decoder = match args.decoder {
        Some(d) => d,
        None => match file.decoder.as_deref() {
            None => DecoderArg::Hvt,
            Some("hvt") => DecoderArg::Hvt,
            Some("greedy") => DecoderArg::Greedy,
            Some("multinomial") => DecoderArg::Multinomial,
            Some("flat-spec") | Some("flat_speculative") => DecoderArg::FlatSpec,
            Some(other) => {
                return Err(CliError::Config(format!("unknown decoder '{other}'")))
            }
        },
    };
    let prompt = match &args.prompt {
        Some(text) => parse_prompt(text)?,
        None => TokenSeq::from_ids(&file.prompt.clone().unwrap_or_default()),
    };
    let seed = args.seed.or(file.seed);
    if seed.is_none() && decoder != DecoderArg::Greedy {
        return Err(CliError::Config(
            "--seed is required for stochastic decoders".into(),
        ));
    }
    let defaults = HvtConfig::default();
    let cfg = HvtConfig {
        gamma: args.gamma.or(file.gamma).unwrap_or(defaults.gamma),
        k: args.k.or(file.k).unwrap_or(defaults.k),
        w: args.w.or(file.w).unwrap_or(defaults.w),
        priority_mode: args
            .priority_mode
            .map(|m| match m {
                PriorityModeArg::LogLikelihood => PriorityMode::LogLikelihood,
                PriorityModeArg::NegPerplexity => PriorityMode::NegPerplexity,
            })
            .or(file.priority_mode)
            .unwrap_or(defaults.priority_mode),
        stop_at_w: if args.no_stop_at_w {
            false
        } else {
            file.stop_at_w.unwrap_or(defaults.stop_at_w)
        },
        node_cap: args.node_cap.or(file.node_cap).unwrap_or(defaults.node_cap),
        max_new_tokens: args
            .max_new_tokens
            .or(file.max_new_tokens)
            .unwrap_or(defaults.max_new_tokens),
        seed: seed.unwrap_or(0),
        frontier_rank: args
            .frontier_rank
            .map(|m| match m {
                FrontierRankArg::CumLogprob => FrontierRank::CumLogprob,
                FrontierRankArg::LengthNormalized => FrontierRank::LengthNormalized,
            })
            .or(file.frontier_rank)
            .unwrap_or(defaults.frontier_rank),
        draft_policy: args
            .draft_policy
            .map(|m| match m {
                DraftPolicyArg::TopK => DraftPolicy::TopK,
                DraftPolicyArg::Sampled => DraftPolicy::Sampled,
            })
            .or(file.draft_policy)
            .unwrap_or(defaults.draft_policy),
        accept_mode: args
            .accept_mode
            .map(|m| match m {
                AcceptModeArg::Stochastic => AcceptMode::Stochastic,
                AcceptModeArg::Threshold => AcceptMode::Threshold,
            })
            .or(file.accept_mode)
            .unwrap_or(defaults.accept_mode),
    };

    let pair = load_pair(&p_model, q_model.as_deref(), q_divergence)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (beams, report): (Vec<(TokenSeq, Option<f64>)>, DecodeReport) = match decoder {
        DecoderArg::Hvt => {
            let (beams, report, trace) = decode_traced(&*pair.p, &*pair.q, &prompt, &cfg, &mut rng)?;
            emit_trace(&trace, args.trace, args.dump_tree);
            (
                beams
                    .into_iter()
                    .map(|b| (b.tokens, Some(b.score)))
                    .collect(),
                report,
            )
        }
        DecoderArg::Greedy => {
            let (seq, report) = greedy_decode(&*pair.p, &prompt, cfg.max_new_tokens)?;
            (vec![(seq, None)], report)
        }
        DecoderArg::Multinomial => {
            let (seq, report) =
                multinomial_decode(&*pair.p, &prompt, cfg.max_new_tokens, &mut rng)?;
            (vec![(seq, None)], report)
        }
        DecoderArg::FlatSpec => {
            let (seq, report) = flat_speculative_decode(
                &*pair.p,
                &*pair.q,
                &prompt,
                cfg.gamma,
                cfg.max_new_tokens,
                &mut rng,
            )?;
            (vec![(seq, None)], report)
        }
    };

    // Baseline scores are filled in with a fresh scorer so every decoder's
    // output carries a comparable emitted-token log-probability.
    let scorer = load_spec(&p_model)?.build()?;
    let mut out_beams = Vec::with_capacity(beams.len());
    for (tokens, score) in beams {
        let score = match score {
            Some(s) => s,
            None => {
                let emitted: TokenSeq =
                    tokens.as_slice().iter().skip(prompt.len()).copied().collect();
                if emitted.is_empty() {
                    0.0
                } else {
                    sequence_logprob(&*scorer, &prompt, &emitted)?
                }
            }
        };
        out_beams.push(BeamOut {
            tokens: tokens.ids(),
            score,
        });
    }

    let out = DecodeOut {
        decoder: report.decoder.clone(),
        prompt: prompt.ids(),
        beams: out_beams,
        report,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&out).expect("decode output serializes")
    );
    Ok(())
}

fn emit_trace(trace: &[TraceEvent], events: bool, trees: bool) {
    if !events && !trees {
        return;
    }
    for ev in trace {
        let is_tree = matches!(ev, TraceEvent::TreeDump { .. });
        if (is_tree && trees) || (!is_tree && events) {
            eprintln!(
                "{}",
                serde_json::to_string(ev).expect("trace event serializes")
            );
        }
    }
}

fn bench_cmd(args: BenchArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| io_err(&args.config, e))?;
    let mut cfg: BenchConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    if let Some(jobs) = args.jobs {
        cfg.jobs = jobs;
    }
    // Paths inside the config file resolve relative to the file itself.
    if let Some(dir) = args.config.parent() {
        resolve_source(&mut cfg.p_model, dir);
        if let Some(q) = &mut cfg.q_model {
            resolve_source(q, dir);
        }
        if let Some(corpus) = &mut cfg.prompt_corpus {
            let p = Path::new(corpus);
            if p.is_relative() {
                *corpus = dir.join(p).to_string_lossy().into_owned();
            }
        }
    }
    let report = run_benchmark(&cfg)?;
    let rendered = match args.format {
        FormatArg::Csv => write_csv(&report),
        FormatArg::Json => write_json(&report),
    };
    match &args.out {
        Some(path) => {
            std::fs::write(path, rendered).map_err(|e| io_err(path, e))?;
            println!("wrote {}", path.display());
        }
        None => print!("{rendered}"),
    }
    Ok(())
}

fn resolve_source(source: &mut ModelSource, dir: &Path) {
    if let ModelSource::Path { path } = source {
        let p = Path::new(path);
        if p.is_relative() {
            *path = dir.join(p).to_string_lossy().into_owned();
        }
    }
}

fn dist_test_cmd(args: DistTestArgs) -> Result<(), CliError> {
    let pair = load_pair(&args.p_model, args.q_model.as_deref(), args.q_divergence)?;
    let defaults = HvtConfig::default();
    let decoder = match args.decoder {
        DecoderArg::Greedy => DecoderSpec::Greedy,
        DecoderArg::Multinomial => DecoderSpec::Multinomial,
        DecoderArg::FlatSpec => DecoderSpec::FlatSpeculative {
            gamma: args.gamma.unwrap_or(defaults.gamma),
        },
        DecoderArg::Hvt => DecoderSpec::Hvt {
            config: HvtConfig {
                gamma: args.gamma.unwrap_or(defaults.gamma),
                k: args.k.unwrap_or(defaults.k),
                w: args.w.unwrap_or(defaults.w),
                ..defaults
            },
        },
    };
    let prompt = parse_prompt(&args.prompt)?;
    let needs_rng = args.samples.is_some() || matches!(decoder, DecoderSpec::Hvt { .. });
    if needs_rng && args.seed.is_none() {
        return Err(CliError::Config(
            "--seed is required for Monte-Carlo distribution tests".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.unwrap_or(0));
    let result = match args.samples {
        Some(samples) => monte_carlo_divergence(
            &decoder,
            &*pair.p,
            &*pair.q,
            &prompt,
            args.horizon,
            samples,
            &mut rng,
        )?,
        None => divergence_test(
            &decoder,
            &*pair.p,
            &*pair.q,
            &prompt,
            args.horizon,
            0,
            &mut rng,
        )?,
    };
    let rendered =
        serde_json::to_string_pretty(&result).expect("divergence result serializes") + "\n";
    match &args.out {
        Some(path) => {
            std::fs::write(path, rendered).map_err(|e| io_err(path, e))?;
            println!("wrote {}", path.display());
        }
        None => print!("{rendered}"),
    }
    Ok(())
}
