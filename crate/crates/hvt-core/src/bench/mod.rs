//! Benchmark runner: sweeps decoders over a model pair and prompt set,
//! aggregating forward-pass costs and quality metrics over seeded trials.

mod divergence;
mod report;

pub use divergence::{
    divergence_test, exact_output_distribution, model_sequence_distribution,
    monte_carlo_divergence, total_variation, DivergenceMethod, DivergenceResult, SeqDistribution,
    ENUM_BUDGET, MIN_MC_SAMPLES,
};
pub use report::{sig6, write_csv, write_json, BenchMeta, BenchReport, BenchRow, MetricAgg};

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{flat_speculative_decode, greedy_decode, multinomial_decode};
use crate::engine::{decode, EngineError, HvtConfig};
use crate::tree::PriorityMode;
use crate::model::{
    read_corpus, sequence_logprob, LanguageModel, ModelError, ModelSpec, TokenSeq,
    UniformMixModel,
};
use crate::report::DecodeReport;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark config: {0}")]
    Config(String),
    #[error("enumeration budget exceeded: {0}")]
    Budget(String),
    #[error("not exactly enumerable: {0}")]
    NotEnumerable(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A decoder under benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecoderSpec {
    Greedy,
    Multinomial,
    FlatSpeculative {
        gamma: usize,
    },
    Hvt {
        #[serde(default)]
        config: HvtConfig,
    },
}

impl DecoderSpec {
    /// Stable identifier used in report rows. Comma-free so it stays a
    /// single CSV field.
    pub fn id(&self) -> String {
        match self {
            DecoderSpec::Greedy => "greedy".into(),
            DecoderSpec::Multinomial => "multinomial".into(),
            DecoderSpec::FlatSpeculative { gamma } => format!("flat_speculative(gamma={gamma})"),
            DecoderSpec::Hvt { config } => {
                let mode = match config.priority_mode {
                    PriorityMode::LogLikelihood => "log_likelihood",
                    PriorityMode::NegPerplexity => "neg_perplexity",
                };
                format!(
                    "hvt(gamma={} k={} w={} {mode} stop_at_w={})",
                    config.gamma, config.k, config.w, config.stop_at_w
                )
            }
        }
    }
}

/// Where a model comes from: a file path, a seeded random-table generator,
/// or an inline description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Path { path: String },
    Generate { generate: GeneratedModel },
    Inline(ModelSpec),
}

/// Parameters for a randomly generated table model (see
/// [`random_table_spec`](crate::model::random_table_spec)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedModel {
    pub vocab_size: usize,
    pub eos: u32,
    pub order: usize,
    pub seed: u64,
    #[serde(default = "default_skew")]
    pub skew: f64,
    #[serde(default)]
    pub eos_prob: f64,
}

fn default_skew() -> f64 {
    2.0
}

impl ModelSource {
    fn load(&self, what: &str) -> Result<ModelSpec, BenchError> {
        match self {
            ModelSource::Path { path } => ModelSpec::from_path(Path::new(path))
                .map_err(|e| BenchError::Config(format!("{what}: {path}: {e}"))),
            ModelSource::Generate { generate: g } => crate::model::random_table_spec(
                g.vocab_size,
                g.eos,
                g.order,
                g.seed,
                g.skew,
                g.eos_prob,
            )
            .map_err(|e| BenchError::Config(format!("{what}: {e}"))),
            ModelSource::Inline(spec) => {
                spec.validate()
                    .map_err(|e| BenchError::Config(format!("{what}: {e}")))?;
                Ok(spec.clone())
            }
        }
    }
}

/// A sweep over tree-decoder parameters: the cross product of the listed
/// depths, branching factors, widths, and priority modes, with every other
/// setting taken from `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HvtGrid {
    pub gammas: Vec<usize>,
    pub ks: Vec<usize>,
    pub ws: Vec<usize>,
    #[serde(default = "default_priority_modes")]
    pub priority_modes: Vec<PriorityMode>,
    #[serde(default)]
    pub base: HvtConfig,
}

fn default_priority_modes() -> Vec<PriorityMode> {
    vec![PriorityMode::LogLikelihood]
}

impl HvtGrid {
    pub fn expand(&self) -> Vec<DecoderSpec> {
        let mut out = Vec::new();
        for &gamma in &self.gammas {
            for &k in &self.ks {
                for &w in &self.ws {
                    for &priority_mode in &self.priority_modes {
                        out.push(DecoderSpec::Hvt {
                            config: HvtConfig {
                                gamma,
                                k,
                                w,
                                priority_mode,
                                ..self.base.clone()
                            },
                        });
                    }
                }
            }
        }
        out
    }
}

/// Benchmark configuration (also the `bench` subcommand's config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub p_model: ModelSource,
    /// Draft model; mutually exclusive with `q_divergence`.
    #[serde(default)]
    pub q_model: Option<ModelSource>,
    /// Divergence knob: the draft model becomes
    /// `(1 - a)·target + a·uniform`. Mutually exclusive with `q_model`.
    #[serde(default)]
    pub q_divergence: Option<f64>,
    #[serde(default)]
    pub decoders: Vec<DecoderSpec>,
    /// Optional tree-decoder sweep appended to `decoders`.
    #[serde(default)]
    pub hvt_grid: Option<HvtGrid>,
    #[serde(default)]
    pub prompts: Vec<Vec<u32>>,
    /// Optional corpus file contributing additional prompts.
    #[serde(default)]
    pub prompt_corpus: Option<String>,
    pub max_new_tokens: usize,
    pub trials: u64,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Aggregate acceptance as the mean of per-step rates instead of the
    /// default total-count ratio.
    #[serde(default)]
    pub mean_of_steps: bool,
    /// Trial-level worker threads; 0 or 1 means serial.
    #[serde(default)]
    pub jobs: usize,
}

impl BenchConfig {
    /// Explicit decoders followed by the expanded grid points.
    pub fn effective_decoders(&self) -> Vec<DecoderSpec> {
        let mut out = self.decoders.clone();
        if let Some(grid) = &self.hvt_grid {
            out.extend(grid.expand());
        }
        out
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.effective_decoders().is_empty() {
            return Err(BenchError::Config(
                "decoders: list must not be empty (add decoders or an hvt_grid)".into(),
            ));
        }
        if let Some(grid) = &self.hvt_grid {
            if grid.gammas.is_empty() || grid.ks.is_empty() || grid.ws.is_empty() {
                return Err(BenchError::Config(
                    "hvt_grid: gammas, ks, and ws must each be non-empty".into(),
                ));
            }
        }
        if self.trials < 1 {
            return Err(BenchError::Config("trials: must be at least 1".into()));
        }
        if self.prompts.is_empty() && self.prompt_corpus.is_none() {
            return Err(BenchError::Config(
                "prompts: provide at least one prompt or a prompt_corpus".into(),
            ));
        }
        if self.max_new_tokens < 1 {
            return Err(BenchError::Config("max_new_tokens: must be at least 1".into()));
        }
        if self.q_model.is_some() && self.q_divergence.is_some() {
            return Err(BenchError::Config(
                "q_model: mutually exclusive with q_divergence".into(),
            ));
        }
        if self.q_model.is_none() && self.q_divergence.is_none() {
            return Err(BenchError::Config(
                "q_model: provide q_model or q_divergence".into(),
            ));
        }
        if let Some(a) = self.q_divergence {
            if !(0.0..=1.0).contains(&a) {
                return Err(BenchError::Config(format!(
                    "q_divergence: {a} is outside [0, 1]"
                )));
            }
        }
        if self.seed.is_none() {
            return Err(BenchError::Config("seed: required".into()));
        }
        Ok(())
    }
}

/// Run one decoder once. Returns the top output sequence (prompt included)
/// and the decode report. For the tree decoder the configured
/// `max_new_tokens` is overridden by the `max_new_tokens` argument.
pub fn run_decoder<R: Rng + ?Sized>(
    spec: &DecoderSpec,
    p_model: &dyn LanguageModel,
    q_model: &dyn LanguageModel,
    prompt: &TokenSeq,
    max_new_tokens: usize,
    rng: &mut R,
) -> Result<(TokenSeq, DecodeReport), BenchError> {
    match spec {
        DecoderSpec::Greedy => Ok(greedy_decode(p_model, prompt, max_new_tokens)?),
        DecoderSpec::Multinomial => {
            Ok(multinomial_decode(p_model, prompt, max_new_tokens, rng)?)
        }
        DecoderSpec::FlatSpeculative { gamma } => Ok(flat_speculative_decode(
            p_model,
            q_model,
            prompt,
            *gamma,
            max_new_tokens,
            rng,
        )?),
        DecoderSpec::Hvt { config } => {
            let mut cfg = config.clone();
            cfg.max_new_tokens = max_new_tokens;
            let (beams, report) = decode(p_model, q_model, prompt, &cfg, rng)?;
            let top = beams
                .first()
                .expect("decode returns at least one beam")
                .tokens
                .clone();
            Ok((top, report))
        }
    }
}

/// A freshly instantiated (target, draft) model pair.
pub type ModelPair = (Box<dyn LanguageModel>, Box<dyn LanguageModel>);

/// Instantiate the model pair described by a config: fresh instances with
/// zeroed counters every call.
pub fn build_model_pair(cfg: &BenchConfig) -> Result<ModelPair, BenchError> {
    let p_spec = cfg.p_model.load("p_model")?;
    let p = p_spec.build().map_err(|e| BenchError::Config(format!("p_model: {e}")))?;
    let q: Box<dyn LanguageModel> = match (&cfg.q_model, cfg.q_divergence) {
        (Some(source), None) => {
            let q_spec = source.load("q_model")?;
            q_spec
                .build()
                .map_err(|e| BenchError::Config(format!("q_model: {e}")))?
        }
        (None, Some(alpha)) => {
            let base = p_spec
                .build()
                .map_err(|e| BenchError::Config(format!("p_model: {e}")))?;
            Box::new(UniformMixModel::new(base, alpha))
        }
        _ => unreachable!("validated"),
    };
    Ok((p, q))
}

fn load_prompts(cfg: &BenchConfig) -> Result<Vec<TokenSeq>, BenchError> {
    let mut prompts: Vec<TokenSeq> = cfg.prompts.iter().map(|p| TokenSeq::from_ids(p)).collect();
    if let Some(path) = &cfg.prompt_corpus {
        let corpus = read_corpus(Path::new(path))
            .map_err(|e| BenchError::Config(format!("prompt_corpus: {path}: {e}")))?;
        prompts.extend(corpus);
    }
    Ok(prompts)
}

#[derive(Debug, Clone, Copy, Default)]
struct TrialMetrics {
    p_per_token: f64,
    q_per_token: f64,
    speedup_proxy: f64,
    acceptance: Option<f64>,
    vrr: Option<f64>,
    perplexity: f64,
}

/// One decoder, one trial: run every prompt with the trial's derived seed
/// and fresh model instances, then reduce to per-trial metrics.
fn run_trial(
    cfg: &BenchConfig,
    decoder: &DecoderSpec,
    prompts: &[TokenSeq],
    trial: u64,
) -> Result<TrialMetrics, BenchError> {
    let (p, q) = build_model_pair(cfg)?;
    let seed = cfg.seed.expect("validated") + trial;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);

    let mut p_forward = 0u64;
    let mut q_forward = 0u64;
    let mut tokens = 0u64;
    let mut accepted = 0u64;
    let mut verified = 0u64;
    let mut total_nodes = 0u64;
    let mut step_rates: Vec<f64> = Vec::new();
    let mut outputs: Vec<(TokenSeq, TokenSeq)> = Vec::new();

    for prompt in prompts {
        let (output, report) =
            run_decoder(decoder, &p, &q, prompt, cfg.max_new_tokens, &mut rng)?;
        p_forward += report.p_forward;
        q_forward += report.q_forward;
        tokens += report.tokens_emitted;
        accepted += report.accepted_nodes;
        verified += report.verified_nodes;
        total_nodes += report.total_nodes;
        step_rates.extend(
            report
                .steps
                .iter()
                .filter(|s| s.verified_nodes > 0)
                .map(|s| s.accepted_nodes as f64 / s.verified_nodes as f64),
        );
        let emitted: TokenSeq = output.as_slice().iter().skip(prompt.len()).copied().collect();
        outputs.push((prompt.clone(), emitted));
    }

    // Perplexity of the emitted text under a fresh target instance, so the
    // scoring passes do not pollute the cost counters above.
    let scorer = cfg
        .p_model
        .load("p_model")?
        .build()
        .map_err(|e| BenchError::Config(format!("p_model: {e}")))?;
    let mut total_logprob = 0.0;
    let mut total_scored = 0u64;
    for (prompt, emitted) in &outputs {
        if emitted.is_empty() {
            continue;
        }
        total_logprob += sequence_logprob(&*scorer, prompt, emitted)?;
        total_scored += emitted.len() as u64;
    }
    let perplexity = if total_scored == 0 {
        f64::NAN
    } else {
        (-total_logprob / total_scored as f64).exp()
    };

    let p_per_token = if tokens == 0 {
        0.0
    } else {
        p_forward as f64 / tokens as f64
    };
    let q_per_token = if tokens == 0 {
        0.0
    } else {
        q_forward as f64 / tokens as f64
    };
    let acceptance = if cfg.mean_of_steps {
        if step_rates.is_empty() {
            None
        } else {
            Some(step_rates.iter().sum::<f64>() / step_rates.len() as f64)
        }
    } else if verified == 0 {
        None
    } else {
        Some(accepted as f64 / verified as f64)
    };
    let vrr = if total_nodes == 0 {
        None
    } else {
        Some(1.0 - verified as f64 / total_nodes as f64)
    };
    Ok(TrialMetrics {
        p_per_token,
        q_per_token,
        // Greedy pays exactly one target pass per emitted token, so its
        // cost-per-token is 1 and its proxy is 1 by construction.
        speedup_proxy: if p_per_token == 0.0 { 0.0 } else { 1.0 / p_per_token },
        acceptance,
        vrr,
        perplexity,
    })
}

fn aggregate(values: &[f64]) -> MetricAgg {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MetricAgg {
        mean: sig6(mean),
        std: sig6(var.sqrt()),
    }
}

fn aggregate_optional(values: &[Option<f64>]) -> Option<MetricAgg> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.len() == values.len() {
        Some(aggregate(&present))
    } else {
        None
    }
}

/// Run the full benchmark: every decoder over `trials` seeded trials, seeds
/// derived as `seed + trial_index`, fresh model instances (counters at zero)
/// per trial.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    // Fail fast on an unloadable model or prompt corpus before spending any
    // trial work.
    build_model_pair(cfg)?;
    let prompts = load_prompts(cfg)?;
    if prompts.is_empty() {
        return Err(BenchError::Config("prompts: resolved to an empty set".into()));
    }

    let decoders = cfg.effective_decoders();
    let mut rows = Vec::with_capacity(decoders.len());
    for decoder in &decoders {
        let trials = run_decoder_trials(cfg, decoder, &prompts)?;
        let p_per: Vec<f64> = trials.iter().map(|t| t.p_per_token).collect();
        let q_per: Vec<f64> = trials.iter().map(|t| t.q_per_token).collect();
        let speedup: Vec<f64> = trials.iter().map(|t| t.speedup_proxy).collect();
        let ppl: Vec<f64> = trials.iter().map(|t| t.perplexity).collect();
        let acceptance: Vec<Option<f64>> = trials.iter().map(|t| t.acceptance).collect();
        let vrr: Vec<Option<f64>> = trials.iter().map(|t| t.vrr).collect();
        rows.push(BenchRow {
            decoder: decoder.id(),
            p_forward_per_token: aggregate(&p_per),
            q_forward_per_token: aggregate(&q_per),
            speedup_proxy: aggregate(&speedup),
            acceptance_rate: aggregate_optional(&acceptance),
            verification_reduction_rate: aggregate_optional(&vrr),
            perplexity: aggregate(&ppl),
        });
    }

    Ok(BenchReport {
        meta: BenchMeta {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed.expect("validated"),
            trials: cfg.trials,
            prompts: prompts.len(),
            max_new_tokens: cfg.max_new_tokens,
            aggregation: if cfg.mean_of_steps {
                "mean_of_steps".into()
            } else {
                "total_counts".into()
            },
        },
        rows,
    })
}

fn run_decoder_trials(
    cfg: &BenchConfig,
    decoder: &DecoderSpec,
    prompts: &[TokenSeq],
) -> Result<Vec<TrialMetrics>, BenchError> {
    let indices: Vec<u64> = (0..cfg.trials).collect();
    if cfg.jobs <= 1 {
        return indices
            .iter()
            .map(|&t| run_trial(cfg, decoder, prompts, t))
            .collect();
    }
    let jobs = cfg.jobs.min(indices.len());
    let mut results: Vec<Option<Result<TrialMetrics, BenchError>>> =
        (0..indices.len()).map(|_| None).collect();
    let chunk = indices.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (w, window) in indices.chunks(chunk).enumerate() {
            let window = window.to_vec();
            handles.push((
                w * chunk,
                scope.spawn(move || {
                    window
                        .iter()
                        .map(|&t| run_trial(cfg, decoder, prompts, t))
                        .collect::<Vec<_>>()
                }),
            ));
        }
        for (offset, handle) in handles {
            for (i, r) in handle.join().expect("trial worker panicked").into_iter().enumerate() {
                results[offset + i] = Some(r);
            }
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("all trials ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::decode;
    use crate::model::random_table_spec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table_source(probs: &[f64]) -> ModelSource {
        ModelSource::Inline(ModelSpec::Table {
            vocab_size: probs.len(),
            eos: (probs.len() - 1) as u32,
            order: 0,
            fallback: probs.to_vec(),
            rows: vec![],
        })
    }

    fn base_config() -> BenchConfig {
        BenchConfig {
            p_model: table_source(&[0.5, 0.3, 0.2, 0.0]),
            q_model: None,
            q_divergence: Some(0.0),
            decoders: vec![DecoderSpec::Greedy],
            hvt_grid: None,
            prompts: vec![vec![0]],
            prompt_corpus: None,
            max_new_tokens: 8,
            trials: 1,
            seed: Some(7),
            mean_of_steps: false,
            jobs: 0,
        }
    }

    #[test]
    fn greedy_speedup_proxy_is_one_with_zero_std() {
        let report = run_benchmark(&base_config()).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert_eq!(row.decoder, "greedy");
        assert_eq!(row.p_forward_per_token.mean, 1.0);
        assert_eq!(row.p_forward_per_token.std, 0.0);
        assert_eq!(row.speedup_proxy.mean, 1.0);
        assert!(row.acceptance_rate.is_none());
        assert!(row.verification_reduction_rate.is_none());
    }

    #[test]
    fn deterministic_decoder_has_zero_std_across_trials() {
        let cfg = BenchConfig {
            trials: 3,
            ..base_config()
        };
        let report = run_benchmark(&cfg).unwrap();
        let row = &report.rows[0];
        assert_eq!(row.p_forward_per_token.std, 0.0);
        assert_eq!(row.perplexity.std, 0.0);
    }

    #[test]
    fn benchmark_is_reproducible() {
        let cfg = BenchConfig {
            decoders: vec![
                DecoderSpec::Greedy,
                DecoderSpec::Multinomial,
                DecoderSpec::FlatSpeculative { gamma: 2 },
                DecoderSpec::Hvt {
                    config: HvtConfig {
                        gamma: 2,
                        k: 2,
                        w: 2,
                        ..HvtConfig::default()
                    },
                },
            ],
            q_divergence: Some(0.3),
            trials: 2,
            ..base_config()
        };
        let a = run_benchmark(&cfg).unwrap();
        let b = run_benchmark(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_jobs_match_serial() {
        let serial = BenchConfig {
            decoders: vec![DecoderSpec::Hvt {
                config: HvtConfig {
                    gamma: 2,
                    k: 2,
                    w: 2,
                    ..HvtConfig::default()
                },
            }],
            q_divergence: Some(0.4),
            trials: 4,
            ..base_config()
        };
        let parallel = BenchConfig {
            jobs: 4,
            ..serial.clone()
        };
        assert_eq!(
            run_benchmark(&serial).unwrap(),
            run_benchmark(&parallel).unwrap()
        );
    }

    #[test]
    fn hvt_vrr_matches_recomputation_from_step_stats() {
        let cfg = BenchConfig {
            decoders: vec![DecoderSpec::Hvt {
                config: HvtConfig {
                    gamma: 3,
                    k: 2,
                    w: 2,
                    stop_at_w: true,
                    ..HvtConfig::default()
                },
            }],
            q_divergence: Some(0.0),
            trials: 1,
            ..base_config()
        };
        let report = run_benchmark(&cfg).unwrap();
        let row_vrr = report.rows[0].verification_reduction_rate.unwrap().mean;

        // Recompute from the raw step stats of an identical run.
        let (p, q) = build_model_pair(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7); // seed + trial 0
        let hvt_cfg = HvtConfig {
            gamma: 3,
            k: 2,
            w: 2,
            stop_at_w: true,
            max_new_tokens: 8,
            ..HvtConfig::default()
        };
        let (_, decode_report) =
            decode(&*p, &*q, &TokenSeq::from_ids(&[0]), &hvt_cfg, &mut rng).unwrap();
        let verified: u64 = decode_report.steps.iter().map(|s| s.verified_nodes).sum();
        let total: u64 = decode_report.steps.iter().map(|s| s.total_nodes).sum();
        let expect = 1.0 - verified as f64 / total as f64;
        assert!((row_vrr - expect).abs() < 1e-5, "{row_vrr} vs {expect}");
    }

    #[test]
    fn validation_names_offending_field() {
        let mut cfg = base_config();
        cfg.decoders.clear();
        let err = run_benchmark(&cfg).unwrap_err().to_string();
        assert!(err.contains("decoders"), "{err}");

        let mut cfg = base_config();
        cfg.seed = None;
        let err = run_benchmark(&cfg).unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");

        let mut cfg = base_config();
        cfg.q_divergence = None;
        let err = run_benchmark(&cfg).unwrap_err().to_string();
        assert!(err.contains("q_model"), "{err}");

        let mut cfg = base_config();
        cfg.p_model = ModelSource::Path {
            path: "/nonexistent/model.json".into(),
        };
        let err = run_benchmark(&cfg).unwrap_err().to_string();
        assert!(err.contains("p_model") && err.contains("/nonexistent/model.json"), "{err}");
    }

    #[test]
    fn exact_distribution_greedy_is_point_mass() {
        let p = table_source(&[0.7, 0.3, 0.0]).load("p").unwrap().build().unwrap();
        let dist = exact_output_distribution(
            &DecoderSpec::Greedy,
            &*p,
            &*p,
            &TokenSeq::new(),
            3,
        )
        .unwrap();
        assert_eq!(dist.len(), 1);
        assert_eq!(dist.get(&TokenSeq::from_ids(&[0, 0, 0])), Some(&1.0));
    }

    #[test]
    fn exact_distribution_multinomial_horizon_one_is_conditional() {
        let p = table_source(&[0.7, 0.2, 0.1]).load("p").unwrap().build().unwrap();
        let dist = exact_output_distribution(
            &DecoderSpec::Multinomial,
            &*p,
            &*p,
            &TokenSeq::new(),
            1,
        )
        .unwrap();
        assert!((dist.get(&TokenSeq::from_ids(&[0])).unwrap() - 0.7).abs() < 1e-12);
        assert!((dist.get(&TokenSeq::from_ids(&[1])).unwrap() - 0.2).abs() < 1e-12);
        assert!((dist.get(&TokenSeq::from_ids(&[2])).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn exact_distribution_flat_spec_v2_worked_example() {
        // p = (0.7, 0.3), q = (0.5, 0.5) on a vocabulary with an unreachable
        // EOS: the flat decoder's first-token distribution is exactly p.
        let p = table_source(&[0.7, 0.3, 0.0]).load("p").unwrap().build().unwrap();
        let q = table_source(&[0.5, 0.5, 0.0]).load("q").unwrap().build().unwrap();
        let dist = exact_output_distribution(
            &DecoderSpec::FlatSpeculative { gamma: 1 },
            &*p,
            &*q,
            &TokenSeq::new(),
            1,
        )
        .unwrap();
        assert!((dist.get(&TokenSeq::from_ids(&[0])).unwrap() - 0.7).abs() < 1e-9);
        assert!((dist.get(&TokenSeq::from_ids(&[1])).unwrap() - 0.3).abs() < 1e-9);
    }

    #[test]
    fn exact_distributions_are_normalized() {
        for seed in 0..10 {
            let p_spec = random_table_spec(4, 3, 1, 3_000 + seed, 2.0, 0.1).unwrap();
            let q_spec = random_table_spec(4, 3, 1, 4_000 + seed, 1.5, 0.1).unwrap();
            let p = p_spec.build().unwrap();
            let q = q_spec.build().unwrap();
            for decoder in [
                DecoderSpec::Greedy,
                DecoderSpec::Multinomial,
                DecoderSpec::FlatSpeculative { gamma: 2 },
            ] {
                let dist =
                    exact_output_distribution(&decoder, &*p, &*q, &TokenSeq::new(), 2).unwrap();
                let total: f64 = dist.values().sum();
                assert!(
                    (total - 1.0).abs() < 1e-9,
                    "{}: sums to {total}",
                    decoder.id()
                );
            }
        }
    }

    #[test]
    fn total_variation_worked_values() {
        let mk = |pairs: &[(&[u32], f64)]| -> SeqDistribution {
            pairs
                .iter()
                .map(|(ids, p)| (TokenSeq::from_ids(ids), *p))
                .collect()
        };
        let a = mk(&[(&[0], 0.7), (&[1], 0.3)]);
        assert_eq!(total_variation(&a, &a), 0.0);
        let b = mk(&[(&[0], 1.0)]);
        let c = mk(&[(&[1], 1.0)]);
        assert_eq!(total_variation(&b, &c), 1.0);
        let d = mk(&[(&[0], 0.5), (&[1], 0.5)]);
        assert!((total_variation(&a, &d) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn divergence_flat_spec_exact_is_zero() {
        let p = table_source(&[0.6, 0.3, 0.1, 0.0]).load("p").unwrap().build().unwrap();
        let q = table_source(&[0.3, 0.3, 0.4, 0.0]).load("q").unwrap().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let result = divergence_test(
            &DecoderSpec::FlatSpeculative { gamma: 2 },
            &*p,
            &*q,
            &TokenSeq::new(),
            2,
            0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(result.method, DivergenceMethod::ExactEnum);
        assert!(result.total_variation < 1e-9, "{}", result.total_variation);
    }

    #[test]
    fn divergence_greedy_is_one_minus_top_prob() {
        let p = table_source(&[0.7, 0.3, 0.0]).load("p").unwrap().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let result = divergence_test(
            &DecoderSpec::Greedy,
            &*p,
            &*p,
            &TokenSeq::new(),
            1,
            0,
            &mut rng,
        )
        .unwrap();
        assert!((result.total_variation - 0.3).abs() < 1e-9);
    }

    #[test]
    fn divergence_multinomial_monte_carlo_noise_bound() {
        // The multinomial sampler is exact, so a million samples must land
        // within Monte-Carlo noise of zero TV.
        let p = table_source(&[0.5, 0.3, 0.2, 0.0]).load("p").unwrap().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut empirical = SeqDistribution::new();
        let n = 1_000_000u64;
        for _ in 0..n {
            let (seq, _) = run_decoder(
                &DecoderSpec::Multinomial,
                &*p,
                &*p,
                &TokenSeq::new(),
                1,
                &mut rng,
            )
            .unwrap();
            *empirical.entry(seq).or_insert(0.0) += 1.0 / n as f64;
        }
        let target = model_sequence_distribution(&*p, &TokenSeq::new(), 1).unwrap();
        assert!(total_variation(&empirical, &target) < 0.005);
    }

    #[test]
    fn divergence_hvt_uses_monte_carlo() {
        let p = table_source(&[0.6, 0.4, 0.0]).load("p").unwrap().build().unwrap();
        let q = table_source(&[0.5, 0.5, 0.0]).load("q").unwrap().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let decoder = DecoderSpec::Hvt {
            config: HvtConfig {
                gamma: 1,
                k: 1,
                w: 1,
                ..HvtConfig::default()
            },
        };
        let err =
            divergence_test(&decoder, &*p, &*q, &TokenSeq::new(), 1, 100, &mut rng).unwrap_err();
        assert!(matches!(err, BenchError::Config(_)), "low samples must fail");
        let result =
            divergence_test(&decoder, &*p, &*q, &TokenSeq::new(), 1, 20_000, &mut rng).unwrap();
        assert_eq!(result.method, DivergenceMethod::MonteCarlo);
        assert!(result.total_variation <= 1.0);
    }

    #[test]
    fn enumeration_budget_is_enforced() {
        let spec = random_table_spec(10, 9, 0, 5, 1.0, 0.0).unwrap();
        let p = spec.build().unwrap();
        let err = model_sequence_distribution(&*p, &TokenSeq::new(), 6).unwrap_err();
        assert!(matches!(err, BenchError::Budget(_)));
        assert!(err.to_string().contains("Monte-Carlo"));
    }

    #[test]
    fn csv_report_schema() {
        let empty = BenchReport {
            meta: BenchMeta {
                tool_version: "0.1.0".into(),
                seed: 1,
                trials: 1,
                prompts: 1,
                max_new_tokens: 4,
                aggregation: "total_counts".into(),
            },
            rows: vec![],
        };
        let csv = write_csv(&empty);
        assert_eq!(csv.lines().count(), 1, "header only for an empty grid");
        assert!(csv.starts_with("decoder,p_forward_per_token_mean"));

        let one = BenchReport {
            rows: vec![BenchRow {
                decoder: "greedy".into(),
                p_forward_per_token: MetricAgg { mean: 1.0, std: 0.0 },
                q_forward_per_token: MetricAgg { mean: 0.0, std: 0.0 },
                speedup_proxy: MetricAgg { mean: 1.0, std: 0.0 },
                acceptance_rate: None,
                verification_reduction_rate: None,
                perplexity: MetricAgg {
                    mean: 3.1748021,
                    std: 0.0,
                },
            }],
            ..empty
        };
        let csv = write_csv(&one);
        let line = csv.lines().nth(1).unwrap();
        assert_eq!(line, "greedy,1,0,0,0,1,0,NA,NA,NA,NA,3.1748,0");
    }

    #[test]
    fn json_report_round_trips() {
        let report = run_benchmark(&base_config()).unwrap();
        let json = write_json(&report);
        let parsed: BenchReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, parsed);
    }

    #[test]
    fn sig6_rounds_to_six_significant_digits() {
        assert_eq!(sig6(0.0), 0.0);
        assert_eq!(sig6(1.0), 1.0);
        assert_eq!(sig6(3.174802103936), 3.1748);
        assert_eq!(sig6(-123456.789), -123457.0);
        assert_eq!(sig6(0.000123456789), 0.000123457);
    }
}


#[cfg(test)]
mod aggregation_tests {
    use super::*;
    use crate::engine::StepStats;
    use crate::report::DecodeReport;

    #[test]
    fn mean_of_steps_flag_switches_aggregation() {
        let cfg = BenchConfig {
            p_model: ModelSource::Generate {
                generate: GeneratedModel {
                    vocab_size: 5,
                    eos: 4,
                    order: 1,
                    seed: 40,
                    skew: 2.0,
                    eos_prob: 0.05,
                },
            },
            q_model: Some(ModelSource::Generate {
                generate: GeneratedModel {
                    vocab_size: 5,
                    eos: 4,
                    order: 1,
                    seed: 41,
                    skew: 1.5,
                    eos_prob: 0.05,
                },
            }),
            q_divergence: None,
            decoders: vec![DecoderSpec::Hvt {
                config: HvtConfig {
                    gamma: 3,
                    k: 2,
                    w: 2,
                    stop_at_w: false,
                    ..HvtConfig::default()
                },
            }],
            hvt_grid: None,
            prompts: vec![vec![0], vec![1]],
            prompt_corpus: None,
            max_new_tokens: 9,
            trials: 2,
            seed: Some(6),
            mean_of_steps: false,
            jobs: 0,
        };
        let totals = run_benchmark(&cfg).unwrap();
        let by_steps = run_benchmark(&BenchConfig {
            mean_of_steps: true,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(totals.meta.aggregation, "total_counts");
        assert_eq!(by_steps.meta.aggregation, "mean_of_steps");
        let a = totals.rows[0].acceptance_rate.unwrap().mean;
        let b = by_steps.rows[0].acceptance_rate.unwrap().mean;
        assert!((0.0..=1.0).contains(&a));
        assert!((0.0..=1.0).contains(&b));
        // With uneven per-step totals the two weightings disagree.
        assert_ne!(a, b, "aggregations should differ on this configuration");
    }

    #[test]
    fn report_mean_step_acceptance_weights_steps_equally() {
        let mut report = DecodeReport::new("hvt", 0);
        report.record_step(StepStats {
            total_nodes: 10,
            verified_nodes: 8,
            accepted_nodes: 8,
            unvisited_nodes: 2,
            ..StepStats::default()
        });
        report.record_step(StepStats {
            total_nodes: 10,
            verified_nodes: 2,
            accepted_nodes: 1,
            rejected_nodes: 1,
            pruned_nodes: 4,
            unvisited_nodes: 4,
            ..StepStats::default()
        });
        // Totals: 9 of 10 accepted; per-step mean: (1.0 + 0.5) / 2.
        assert_eq!(report.acceptance_rate(), Some(0.9));
        assert_eq!(report.mean_step_acceptance_rate(), Some(0.75));
        assert_eq!(report.verification_reduction_rate(), Some(0.5));
    }
}
