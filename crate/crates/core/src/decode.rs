//! Reasoning-path generation and item retrieval.
//!
//! At every step the decoder scores all still-active codebooks and commits
//! the single most confident `(codebook, token)` pair. Optional reflection
//! compares category distributions `s` steps apart and rolls the path back
//! when they drift apart by more than `theta` in JS divergence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpq::{Codebook, TokenMap, TokenSet};
use crate::numerics::{js_divergence, softmax, validate_distribution};
use crate::rng::RngStream;
use crate::seqmodel::{StepModel, StepOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathStatus {
    Alive,
    Pruned,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub codebook: usize,
    pub token: usize,
    /// Softmax probability of `token` under its codebook head.
    pub confidence: f64,
    /// Natural log of `confidence`, as computed from the logits.
    pub logprob: f64,
    /// Category distribution at this step.
    pub category: Vec<f64>,
    /// Log-probabilities of every token of `codebook` at this step.
    pub token_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub steps: Vec<PathStep>,
    /// Codebooks not used yet, ascending.
    pub active: Vec<usize>,
    pub status: PathStatus,
}

impl ReasoningPath {
    pub fn new(num_codebooks: usize) -> Self {
        Self {
            steps: Vec::new(),
            active: (0..num_codebooks).collect(),
            status: PathStatus::Alive,
        }
    }

    pub fn num_codebooks(&self) -> usize {
        self.steps.len() + self.active.len()
    }

    pub fn prefix(&self) -> Vec<(usize, usize)> {
        self.steps.iter().map(|s| (s.codebook, s.token)).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.status == PathStatus::Complete
    }

    /// Token set of a complete path.
    pub fn tokens(&self) -> Result<TokenSet> {
        if !self.active.is_empty() || self.steps.is_empty() {
            return Err(Error::IncompletePath);
        }
        let pairs = self.prefix();
        let m = self.num_codebooks();
        TokenSet::from_pairs(&pairs, m, usize::MAX)
    }

    pub fn logprob(&self) -> f64 {
        self.steps.iter().map(|s| s.logprob).sum()
    }

    /// Keeps the first `n` steps and reactivates the rest.
    pub fn truncate(&mut self, n: usize) {
        for s in self.steps.drain(n.min(self.steps.len())..) {
            self.active.push(s.codebook);
        }
        self.active.sort_unstable();
        self.status = PathStatus::Alive;
    }

    fn push(&mut self, step: PathStep) {
        self.active.retain(|&r| r != step.codebook);
        self.steps.push(step);
        if self.active.is_empty() {
            self.status = PathStatus::Complete;
        }
    }
}

fn log_softmax_finite(logits: &[f64]) -> Option<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln();
    Some(logits.iter().map(|&z| z - lse).collect())
}

/// Chosen `(codebook, token)` with its log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub codebook: usize,
    pub token: usize,
    pub confidence: f64,
    pub logprob: f64,
    pub token_logprobs: Vec<f64>,
}

/// Highest softmax probability over all active `(codebook, token)` pairs;
/// ties go to the lower codebook, then the lower token.
pub fn crss_select(out: &StepOutput, active: &[usize]) -> Result<Choice> {
    let mut best: Option<Choice> = None;
    for &r in active {
        let Some(lp) = out.logits.get(r).and_then(|l| log_softmax_finite(l)) else {
            continue;
        };
        let (mut c, mut v) = (0, f64::NEG_INFINITY);
        for (j, &x) in lp.iter().enumerate() {
            if x > v {
                (c, v) = (j, x);
            }
        }
        if best.as_ref().is_none_or(|b| v > b.logprob) {
            best = Some(Choice {
                codebook: r,
                token: c,
                confidence: v.exp(),
                logprob: v,
                token_logprobs: lp,
            });
        }
    }
    best.ok_or(Error::DecodeFailure)
}

/// Draws one token per active codebook and keeps the codebook whose draw
/// is most probable (ties to the lower codebook).
pub fn sample_select(out: &StepOutput, active: &[usize], rng: &mut RngStream) -> Result<Choice> {
    let mut best: Option<Choice> = None;
    for &r in active {
        let Some(lp) = out.logits.get(r).and_then(|l| log_softmax_finite(l)) else {
            continue;
        };
        let probs: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        let c = rng.categorical(&probs);
        let v = lp[c];
        if best.as_ref().is_none_or(|b| v > b.logprob) {
            best = Some(Choice {
                codebook: r,
                token: c,
                confidence: v.exp(),
                logprob: v,
                token_logprobs: lp,
            });
        }
    }
    best.ok_or(Error::DecodeFailure)
}

fn to_step(choice: Choice, category: Vec<f64>) -> PathStep {
    PathStep {
        codebook: choice.codebook,
        token: choice.token,
        confidence: choice.confidence,
        logprob: choice.logprob,
        category,
        token_logprobs: choice.token_logprobs,
    }
}

/// One greedy decoding step.
pub fn crss_next(model: &impl StepModel, path: &mut ReasoningPath) -> Result<()> {
    if path.status != PathStatus::Alive || path.active.is_empty() {
        return Err(Error::CodebookConsumed);
    }
    let out = model.step(&path.prefix())?;
    let choice = crss_select(&out, &path.active)?;
    path.push(to_step(choice, out.category));
    Ok(())
}

fn sample_next(model: &impl StepModel, path: &mut ReasoningPath, rng: &mut RngStream) -> Result<()> {
    if path.status != PathStatus::Alive || path.active.is_empty() {
        return Err(Error::CodebookConsumed);
    }
    let out = model.step(&path.prefix())?;
    let choice = sample_select(&out, &path.active, rng)?;
    path.push(to_step(choice, out.category));
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "sample" => Ok(Self::Sample),
            other => Err(Error::config(format!("unknown mode {other}"))),
        }
    }
}

fn advance(model: &impl StepModel, path: &mut ReasoningPath, mode: DecodeMode, rng: Option<&mut RngStream>) -> Result<()> {
    match (mode, rng) {
        (DecodeMode::Greedy, _) => crss_next(model, path),
        (DecodeMode::Sample, Some(rng)) => sample_next(model, path, rng),
        (DecodeMode::Sample, None) => Err(Error::config("sample mode needs an rng stream")),
    }
}

/// Decodes a complete path of `M` steps.
pub fn generate_path(model: &impl StepModel, mode: DecodeMode, mut rng: Option<&mut RngStream>) -> Result<ReasoningPath> {
    let mut path = ReasoningPath::new(model.num_codebooks());
    while path.status == PathStatus::Alive {
        advance(model, &mut path, mode, rng.as_deref_mut())?;
    }
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpDecision {
    Continue,
    /// Keep only the first `to_step` steps.
    Rollback { to_step: usize },
}

/// Compares the newest step's category distribution with the one `s`
/// steps earlier.
pub fn corp_check(path: &ReasoningPath, theta: f64, s: usize) -> Result<(CorpDecision, f64)> {
    if theta <= 0.0 || theta.is_nan() {
        return Err(Error::config("theta must be > 0"));
    }
    if s == 0 {
        return Err(Error::config("reflection period must be >= 1"));
    }
    let n = path.steps.len();
    if n < s + 1 {
        return Ok((CorpDecision::Continue, 0.0));
    }
    let (a, b) = (&path.steps[n - 1 - s].category, &path.steps[n - 1].category);
    if a.is_empty() || b.is_empty() {
        return Err(Error::NoCategory);
    }
    validate_distribution(a)?;
    validate_distribution(b)?;
    let js = js_divergence(a, b)?;
    if js > theta {
        Ok((CorpDecision::Rollback { to_step: n - 1 - s }, js))
    } else {
        Ok((CorpDecision::Continue, js))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReflectConfig {
    pub theta: f64,
    pub period: usize,
    pub retry_budget: usize,
}

impl Default for ReflectConfig {
    fn default() -> Self {
        Self {
            theta: 0.06,
            period: 1,
            retry_budget: 2,
        }
    }
}

impl ReflectConfig {
    pub fn disabled() -> Self {
        Self {
            theta: f64::INFINITY,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionEvent {
    /// 1-based step whose check failed.
    pub step: usize,
    pub js: f64,
    /// Steps kept after the rollback (absent when the path was pruned).
    pub rolled_back_to: Option<usize>,
    pub retry: usize,
}

/// Path generation with periodic consistency checks. Rollbacks regenerate
/// the suffix by sampling from substream `rng.derive(retry)`; once
/// `retry_budget` rollbacks are spent the next violation prunes the path.
pub fn generate_with_reflection(
    model: &impl StepModel,
    mode: DecodeMode,
    cfg: &ReflectConfig,
    rng: &mut RngStream,
) -> Result<(ReasoningPath, Vec<ReflectionEvent>)> {
    let mut path = ReasoningPath::new(model.num_codebooks());
    let mut events = Vec::new();
    let mut retries = 0usize;
    let mut retry_rng: Option<RngStream> = None;
    while path.status == PathStatus::Alive {
        match retry_rng.as_mut() {
            Some(r) => sample_next(model, &mut path, r)?,
            None => advance(model, &mut path, mode, Some(rng))?,
        }
        let n = path.steps.len();
        if cfg.theta.is_infinite() || n % cfg.period != 0 {
            continue;
        }
        if let (CorpDecision::Rollback { to_step }, js) = corp_check(&path, cfg.theta, cfg.period)? {
            if retries >= cfg.retry_budget {
                events.push(ReflectionEvent {
                    step: n,
                    js,
                    rolled_back_to: None,
                    retry: retries,
                });
                path.status = PathStatus::Pruned;
                break;
            }
            retries += 1;
            events.push(ReflectionEvent {
                step: n,
                js,
                rolled_back_to: Some(to_step),
                retry: retries,
            });
            path.truncate(to_step);
            retry_rng = Some(rng.derive(retries as u64));
        }
    }
    Ok((path, events))
}

/// Exact L2 index over catalog items.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    codebooks: Vec<Codebook>,
    ids: Vec<String>,
    tokens: Vec<TokenSet>,
    vectors: Vec<Vec<f64>>,
}

impl RetrievalIndex {
    /// Index vectors are the gate-weighted codeword sums of each item.
    pub fn new(codebooks: Vec<Codebook>, items: &TokenMap) -> Result<Self> {
        let mut ids = Vec::with_capacity(items.len());
        let mut tokens = Vec::with_capacity(items.len());
        let mut vectors = Vec::with_capacity(items.len());
        let dim = codebooks.first().map_or(0, Codebook::dim);
        for (id, (ts, gates)) in items {
            if ts.num_codebooks() != codebooks.len() || gates.len() != codebooks.len() {
                return Err(Error::shape(format!("item {id} does not match the codebooks")));
            }
            let mut q = vec![0.0; dim];
            for (r, c) in ts.pairs() {
                if c >= codebooks[r].len() {
                    return Err(Error::UnknownToken);
                }
                for (qv, &z) in q.iter_mut().zip(codebooks[r].word(c)) {
                    *qv += gates[r] * z;
                }
            }
            ids.push(id.clone());
            tokens.push(ts.clone());
            vectors.push(q);
        }
        Ok(Self {
            codebooks,
            ids,
            tokens,
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_codebooks(&self) -> usize {
        self.codebooks.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn tokens_of(&self, item: &str) -> Option<&TokenSet> {
        self.position(item).map(|i| &self.tokens[i])
    }

    pub fn position(&self, item: &str) -> Option<usize> {
        self.ids.binary_search_by(|p| p.as_str().cmp(item)).ok().or_else(|| self.ids.iter().position(|p| p == item))
    }

    /// `sum_r z^r_c / M` over the retained pairs.
    pub fn query(&self, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let m = self.codebooks.len();
        let dim = self.codebooks.first().map_or(0, Codebook::dim);
        let mut z = vec![0.0; dim];
        for &(r, c) in pairs {
            let cb = self.codebooks.get(r).ok_or(Error::UnknownToken)?;
            if c >= cb.len() {
                return Err(Error::UnknownToken);
            }
            for (zv, &w) in z.iter_mut().zip(cb.word(c)) {
                *zv += w / m as f64;
            }
        }
        Ok(z)
    }

    /// `n` nearest items to `z`, ascending distance, ties by item id.
    pub fn nearest(&self, z: &[f64], n: usize) -> Result<Vec<(String, f64)>> {
        if self.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        let mut scored: Vec<(f64, usize)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (v.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1])));
        Ok(scored
            .into_iter()
            .take(n)
            .map(|(d, i)| (self.ids[i].clone(), d.sqrt()))
            .collect())
    }
}

/// Steps kept after dropping the `d` least confident ones (ties drop the
/// later step first).
pub fn retain_confident(path: &ReasoningPath, d: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..path.steps.len()).collect();
    order.sort_by(|&a, &b| {
        path.steps[a]
            .confidence
            .total_cmp(&path.steps[b].confidence)
            .then_with(|| b.cmp(&a))
    });
    let dropped: Vec<usize> = order.into_iter().take(d).collect();
    (0..path.steps.len())
        .filter(|i| !dropped.contains(i))
        .map(|i| (path.steps[i].codebook, path.steps[i].token))
        .collect()
}

/// Top-`n` catalog items for a complete path after dropping `d` steps.
pub fn retrieve_topn(path: &ReasoningPath, index: &RetrievalIndex, n: usize, d: usize) -> Result<Vec<(String, f64)>> {
    if index.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    if n == 0 {
        return Err(Error::config("N must be >= 1"));
    }
    if !path.active.is_empty() {
        return Err(Error::IncompletePath);
    }
    if d >= path.steps.len() {
        return Err(Error::config("d must be < M"));
    }
    let z = index.query(&retain_confident(path, d))?;
    index.nearest(&z, n)
}

/// Convenience for tests and demos: a fixed step model given as a closure.
pub struct FnStepModel<F> {
    pub m: usize,
    pub d: usize,
    pub f: F,
}

impl<F: Fn(&[(usize, usize)]) -> Result<StepOutput>> StepModel for FnStepModel<F> {
    fn num_codebooks(&self) -> usize {
        self.m
    }

    fn codebook_size(&self) -> usize {
        self.d
    }

    fn step(&self, prefix: &[(usize, usize)]) -> Result<StepOutput> {
        (self.f)(prefix)
    }
}

/// Softmax of `logits` for each codebook, for callers holding raw tables.
pub fn probabilities(out: &StepOutput) -> Result<Vec<Vec<f64>>> {
    out.logits.iter().map(|l| softmax(l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn table_model(tables: Vec<Vec<f64>>, cat: Vec<f64>) -> FnStepModel<impl Fn(&[(usize, usize)]) -> Result<StepOutput>> {
        let m = tables.len();
        let d = tables[0].len();
        FnStepModel {
            m,
            d,
            f: move |_: &[(usize, usize)]| {
                Ok(StepOutput {
                    logits: tables.clone(),
                    category: cat.clone(),
                })
            },
        }
    }

    /// Brute-force arg-max over the full (codebook, token) cross-product.
    fn oracle(out: &StepOutput, active: &[usize]) -> (usize, usize) {
        let mut best = (usize::MAX, usize::MAX, f64::NEG_INFINITY);
        for &r in active {
            let p = softmax(&out.logits[r]).unwrap();
            for (c, &v) in p.iter().enumerate() {
                if v > best.2 {
                    best = (r, c, v);
                }
            }
        }
        (best.0, best.1)
    }

    #[test]
    fn crss_matches_cross_product_oracle() {
        let mut rng = RngStream::new(2);
        for _ in 0..1000 {
            let m = 1 + rng.below(8);
            let d = 2 + rng.below(63);
            let out = StepOutput {
                logits: (0..m).map(|_| (0..d).map(|_| rng.normal() * 2.0).collect()).collect(),
                category: vec![0.5, 0.5],
            };
            let mut active: Vec<usize> = (0..m).filter(|_| rng.bernoulli(0.7)).collect();
            if active.is_empty() {
                active.push(rng.below(m));
            }
            let c = crss_select(&out, &active).unwrap();
            assert_eq!((c.codebook, c.token), oracle(&out, &active));
        }
    }

    #[test]
    fn crss_examples() {
        let model = table_model(vec![vec![0.0, 2.0, 1.0]], vec![1.0, 0.0]);
        let mut path = ReasoningPath::new(1);
        crss_next(&model, &mut path).unwrap();
        assert_eq!(path.prefix(), vec![(0, 1)]);
        assert!(path.is_complete());

        // Codebook 2 peaks at 0.9, others at 0.4.
        let t = |p: &[f64]| p.iter().map(|x: &f64| x.ln()).collect::<Vec<_>>();
        let out = StepOutput {
            logits: vec![t(&[0.4, 0.3, 0.3]), t(&[0.3, 0.4, 0.3]), t(&[0.05, 0.9, 0.05])],
            category: vec![1.0, 0.0],
        };
        let c = crss_select(&out, &[0, 1, 2]).unwrap();
        assert_eq!((c.codebook, c.token), (2, 1));
        assert!((c.confidence - 0.9).abs() < 1e-12);

        // Ties go to the lower codebook, then the lower token.
        let out = StepOutput {
            logits: vec![vec![0.0, 1.0, 1.0], vec![1.0, 1.0, 0.0]],
            category: vec![1.0],
        };
        let c = crss_select(&out, &[0, 1]).unwrap();
        assert_eq!((c.codebook, c.token), (0, 1));

        let bad = StepOutput {
            logits: vec![vec![f64::NAN, 1.0]],
            category: vec![1.0],
        };
        assert!(matches!(crss_select(&bad, &[0]), Err(Error::DecodeFailure)));
    }

    #[test]
    fn hand_traced_two_codebook_path() {
        // Step 1: codebook 1 token 0 (p 0.8) beats codebook 0 (p 0.6).
        // Step 2: only codebook 0 remains; the prefix moves its peak to token 2.
        let model = FnStepModel {
            m: 2,
            d: 3,
            f: |prefix: &[(usize, usize)]| {
                let ln = |p: [f64; 3]| p.iter().map(|x| x.ln()).collect::<Vec<_>>();
                let logits = if prefix.is_empty() {
                    vec![ln([0.6, 0.2, 0.2]), ln([0.8, 0.1, 0.1])]
                } else {
                    vec![ln([0.1, 0.2, 0.7]), ln([0.8, 0.1, 0.1])]
                };
                Ok(StepOutput {
                    logits,
                    category: vec![0.5, 0.5],
                })
            },
        };
        let a = generate_path(&model, DecodeMode::Greedy, None).unwrap();
        assert_eq!(a.prefix(), vec![(1, 0), (0, 2)]);
        assert_eq!(a, generate_path(&model, DecodeMode::Greedy, None).unwrap());
        assert_eq!(a.tokens().unwrap(), TokenSet::new(vec![2, 0]));
        assert!(a.active.is_empty());
    }

    #[test]
    fn sampling_covers_multiple_token_sets() {
        let model = table_model(vec![vec![0.0, 0.01, 0.0], vec![0.0, 0.0, 0.02]], vec![1.0]);
        let mut rng = RngStream::new(4);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..1000 {
            let p = generate_path(&model, DecodeMode::Sample, Some(&mut rng)).unwrap();
            seen.insert(p.tokens().unwrap());
        }
        assert!(seen.len() >= 2);
        assert!(generate_path(&model, DecodeMode::Sample, None).is_err());
    }

    #[test]
    fn corp_check_examples() {
        let mut path = ReasoningPath::new(3);
        for (r, cat) in [(0, vec![1.0, 0.0]), (1, vec![1.0, 0.0])] {
            path.push(PathStep {
                codebook: r,
                token: 0,
                confidence: 1.0,
                logprob: 0.0,
                category: cat,
                token_logprobs: vec![0.0],
            });
        }
        assert_eq!(corp_check(&path, 0.06, 1).unwrap().0, CorpDecision::Continue);
        path.steps[1].category = vec![0.0, 1.0];
        let (dec, js) = corp_check(&path, 0.06, 1).unwrap();
        assert_eq!(dec, CorpDecision::Rollback { to_step: 0 });
        assert!((js - std::f64::consts::LN_2).abs() < 1e-12);
        path.steps[1].category = vec![0.5, 0.2];
        assert!(matches!(corp_check(&path, 0.06, 1), Err(Error::InvalidDistribution)));
    }

    fn drift_model(k: usize, m: usize) -> FnStepModel<impl Fn(&[(usize, usize)]) -> Result<StepOutput>> {
        FnStepModel {
            m,
            d: 4,
            f: move |prefix: &[(usize, usize)]| {
                let step = prefix.len() + 1;
                let category = if step < k { vec![0.9, 0.05, 0.05] } else { vec![0.05, 0.05, 0.9] };
                Ok(StepOutput {
                    logits: (0..m).map(|r| (0..4).map(|c| ((r + c) % 3) as f64).collect()).collect(),
                    category,
                })
            },
        }
    }

    #[test]
    fn reflection_rolls_back_at_planted_drift() {
        for k in 2..=4 {
            let model = drift_model(k, 5);
            let mut rng = RngStream::new(1);
            let (path, events) =
                generate_with_reflection(&model, DecodeMode::Greedy, &ReflectConfig::default(), &mut rng).unwrap();
            assert_eq!(events[0].step, k);
            assert_eq!(events[0].rolled_back_to, Some(k - 2));
            assert!(events.iter().all(|e| e.step >= k));
            assert_eq!(path.status, PathStatus::Pruned);
        }
    }

    #[test]
    fn reflection_edge_cases() {
        let model = drift_model(3, 4);
        let mut a = RngStream::new(9);
        let (p, ev) = generate_with_reflection(&model, DecodeMode::Sample, &ReflectConfig::disabled(), &mut a).unwrap();
        let mut b = RngStream::new(9);
        assert_eq!(p, generate_path(&model, DecodeMode::Sample, Some(&mut b)).unwrap());
        assert!(ev.is_empty());

        let cfg = ReflectConfig {
            retry_budget: 0,
            ..Default::default()
        };
        let (p, ev) = generate_with_reflection(&model, DecodeMode::Greedy, &cfg, &mut RngStream::new(0)).unwrap();
        assert_eq!(p.status, PathStatus::Pruned);
        assert_eq!(ev.len(), 1);
    }

    fn random_index(n: usize, m: usize, d: usize, rng: &mut RngStream) -> RetrievalIndex {
        let cbs: Vec<Codebook> = (0..m)
            .map(|r| Codebook::new(r, &(0..d).map(|_| (0..3).map(|_| rng.normal()).collect()).collect::<Vec<_>>()).unwrap())
            .collect();
        let mut map = BTreeMap::new();
        for i in 0..n {
            let ts = TokenSet::new((0..m).map(|_| rng.below(d)).collect());
            let g: Vec<f64> = (0..m).map(|_| rng.uniform() + 0.1).collect();
            let s: f64 = g.iter().sum();
            map.insert(format!("i{i:03}"), (ts, g.into_iter().map(|x| x / s).collect()));
        }
        RetrievalIndex::new(cbs, &map).unwrap()
    }

    fn path_of(pairs: &[(usize, usize)], conf: &[f64]) -> ReasoningPath {
        let mut p = ReasoningPath::new(pairs.len());
        for (&(r, c), &cf) in pairs.iter().zip(conf) {
            p.push(PathStep {
                codebook: r,
                token: c,
                confidence: cf,
                logprob: cf.ln(),
                category: vec![1.0],
                token_logprobs: vec![],
            });
        }
        p
    }

    #[test]
    fn retrieval_matches_brute_force() {
        let mut rng = RngStream::new(8);
        let index = random_index(50, 3, 5, &mut rng);
        let path = path_of(&[(2, 1), (0, 4), (1, 0)], &[0.9, 0.2, 0.5]);
        let got = retrieve_topn(&path, &index, 50, 1).unwrap();
        let z = index.query(&[(2, 1), (1, 0)]).unwrap();
        let mut want: Vec<(f64, String)> = (0..index.len())
            .map(|i| (index.vector(i).iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), index.ids()[i].clone()))
            .collect();
        want.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let got_ids: Vec<&String> = got.iter().map(|x| &x.0).collect();
        let want_ids: Vec<&String> = want.iter().map(|x| &x.1).collect();
        assert_eq!(got_ids, want_ids);
        assert_eq!(retrieve_topn(&path, &index, 500, 0).unwrap().len(), 50);
    }

    #[test]
    fn exact_match_ranks_first() {
        let cbs = vec![
            Codebook::new(0, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            Codebook::new(1, &[vec![2.0, 2.0], vec![-1.0, 0.5]]).unwrap(),
        ];
        let mut map = BTreeMap::new();
        map.insert("a".to_string(), (TokenSet::new(vec![0, 1]), vec![0.5, 0.5]));
        map.insert("b".to_string(), (TokenSet::new(vec![1, 0]), vec![0.5, 0.5]));
        let index = RetrievalIndex::new(cbs, &map).unwrap();
        let path = path_of(&[(1, 0), (0, 1)], &[0.9, 0.8]);
        let top = retrieve_topn(&path, &index, 1, 0).unwrap();
        assert_eq!(top[0].0, "b");
        assert_eq!(top[0].1, 0.0);
        let empty = RetrievalIndex::new(vec![], &BTreeMap::new()).unwrap();
        assert!(matches!(retrieve_topn(&path, &empty, 1, 0), Err(Error::EmptyCatalog)));
    }
}
