//! Three operations exposed to the browser page in `www/`. Each takes plain
//! text, returns JSON, and has a native twin so it can be tested off-browser.

use reasonrec::decode::{corp_check, generate_path, CorpDecision, DecodeMode, FnStepModel, PathStep, ReasoningPath};
use reasonrec::ladq::{bf16_round, fp8_e4m3};
use reasonrec::seqmodel::StepOutput;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Parses one row of numbers per non-empty line, separated by commas or spaces.
pub fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| format!("line {}: bad number {t:?}", i + 1)))
                .collect()
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct TraceStep {
    pub codebook: usize,
    pub token: usize,
    pub confidence: f64,
}

/// Greedy decoding order for a fixed logit table (one row per codebook):
/// each step commits the most confident remaining codebook.
pub fn crss_trace(table: &str) -> Result<Vec<TraceStep>, String> {
    let logits = parse_rows(table)?;
    let d = logits.first().map_or(0, Vec::len);
    if logits.is_empty() || d == 0 || logits.iter().any(|r| r.len() != d) {
        return Err("need a rectangular table with at least one value".into());
    }
    let model = FnStepModel {
        m: logits.len(),
        d,
        f: |_: &[(usize, usize)]| {
            Ok(StepOutput {
                logits: logits.clone(),
                category: vec![1.0],
            })
        },
    };
    let path = generate_path(&model, DecodeMode::Greedy, None).map_err(|e| e.to_string())?;
    Ok(path
        .steps
        .iter()
        .map(|s| TraceStep {
            codebook: s.codebook,
            token: s.token,
            confidence: s.confidence,
        })
        .collect())
}

#[derive(Debug, Serialize)]
pub struct CheckRow {
    /// 1-based step.
    pub step: usize,
    pub js: f64,
    /// Steps kept when the check fails.
    pub rollback_to: Option<usize>,
}

/// Runs the reflection check after every step of a sequence of category
/// distributions (one per line), comparing with the step `period` earlier.
pub fn corp_trace(dists: &str, theta: f64, period: usize) -> Result<Vec<CheckRow>, String> {
    let rows = parse_rows(dists)?;
    let mut path = ReasoningPath::new(rows.len());
    let mut out = Vec::with_capacity(rows.len());
    for (i, category) in rows.into_iter().enumerate() {
        path.steps.push(PathStep {
            codebook: i,
            token: 0,
            confidence: 1.0,
            logprob: 0.0,
            category,
            token_logprobs: Vec::new(),
        });
        let (decision, js) = corp_check(&path, theta, period).map_err(|e| format!("step {}: {e}", i + 1))?;
        out.push(CheckRow {
            step: i + 1,
            js,
            rollback_to: match decision {
                CorpDecision::Continue => None,
                CorpDecision::Rollback { to_step } => Some(to_step),
            },
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct QuantRow {
    pub value: f64,
    pub bf16: f64,
    pub bf16_rel: f64,
    pub fp8: f64,
    pub fp8_rel: f64,
}

/// Simulated bf16 and fp8 (e4m3) round trips with relative errors.
pub fn quantize(values: &str) -> Result<Vec<QuantRow>, String> {
    let rel = |q: f64, x: f64| if x == 0.0 { (q - x).abs() } else { ((q - x) / x).abs() };
    parse_rows(values)?
        .into_iter()
        .flatten()
        .map(|x| {
            if !x.is_finite() {
                return Err(format!("{x} is not finite"));
            }
            let (b, f) = (bf16_round(x), fp8_e4m3(x));
            Ok(QuantRow {
                value: x,
                bf16: b,
                bf16_rel: rel(b, x),
                fp8: f,
                fp8_rel: rel(f, x),
            })
        })
        .collect()
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = crssTrace)]
pub fn crss_trace_js(table: &str) -> Result<String, JsValue> {
    to_js(crss_trace(table))
}

#[wasm_bindgen(js_name = corpTrace)]
pub fn corp_trace_js(dists: &str, theta: f64, period: usize) -> Result<String, JsValue> {
    to_js(corp_trace(dists, theta, period))
}

#[wasm_bindgen(js_name = quantize)]
pub fn quantize_js(values: &str) -> Result<String, JsValue> {
    to_js(quantize(values))
}
