//! Benchmark report emission: CSV and JSON with a stable schema.
//!
//! Schema (version 1). Columns, in order:
//! `decoder, p_forward_per_token_{mean,std}, q_forward_per_token_{mean,std},
//! speedup_proxy_{mean,std}, acceptance_rate_{mean,std},
//! verification_reduction_rate_{mean,std}, perplexity_{mean,std}`.
//! Metrics a decoder does not define (acceptance for greedy, for example)
//! appear as `NA`. All floats carry six significant digits.

use serde::{Deserialize, Serialize};

/// Mean and population standard deviation over trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricAgg {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub decoder: String,
    pub p_forward_per_token: MetricAgg,
    pub q_forward_per_token: MetricAgg,
    pub speedup_proxy: MetricAgg,
    pub acceptance_rate: Option<MetricAgg>,
    pub verification_reduction_rate: Option<MetricAgg>,
    pub perplexity: MetricAgg,
}

/// Environment metadata kept free of anything nondeterministic so reports
/// are byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchMeta {
    pub tool_version: String,
    pub seed: u64,
    pub trials: u64,
    pub prompts: usize,
    pub max_new_tokens: usize,
    pub aggregation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub meta: BenchMeta,
    pub rows: Vec<BenchRow>,
}

/// Round to six significant digits (deterministically, via scientific
/// formatting).
pub fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("sig6 round-trips")
}

fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        return "NA".to_string();
    }
    let r = sig6(x);
    let mag = r.abs();
    if r != 0.0 && !(1e-4..1e15).contains(&mag) {
        format!("{r:.5e}")
    } else {
        format!("{r}")
    }
}

fn fmt_metric(m: &MetricAgg) -> (String, String) {
    (fmt_float(m.mean), fmt_float(m.std))
}

fn fmt_optional(m: &Option<MetricAgg>) -> (String, String) {
    match m {
        Some(m) => fmt_metric(m),
        None => ("NA".to_string(), "NA".to_string()),
    }
}

pub const CSV_HEADER: &str = "decoder,p_forward_per_token_mean,p_forward_per_token_std,\
q_forward_per_token_mean,q_forward_per_token_std,speedup_proxy_mean,speedup_proxy_std,\
acceptance_rate_mean,acceptance_rate_std,verification_reduction_rate_mean,\
verification_reduction_rate_std,perplexity_mean,perplexity_std";

pub fn write_csv(report: &BenchReport) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in &report.rows {
        let (p_m, p_s) = fmt_metric(&row.p_forward_per_token);
        let (q_m, q_s) = fmt_metric(&row.q_forward_per_token);
        let (s_m, s_s) = fmt_metric(&row.speedup_proxy);
        let (a_m, a_s) = fmt_optional(&row.acceptance_rate);
        let (v_m, v_s) = fmt_optional(&row.verification_reduction_rate);
        let (x_m, x_s) = fmt_metric(&row.perplexity);
        out.push_str(&format!(
            "{},{p_m},{p_s},{q_m},{q_s},{s_m},{s_s},{a_m},{a_s},{v_m},{v_s},{x_m},{x_s}\n",
            row.decoder
        ));
    }
    out
}

pub fn write_json(report: &BenchReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}
