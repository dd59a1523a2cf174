//! Path rewards: per-codebook token hits, category hits, step-to-step
//! category consistency and a retrieval indicator, plus decay-weighted
//! multi-item variants over a future window.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::decode::{ReasoningPath, RetrievalIndex};
use crate::error::{Error, Result};
use crate::mpq::TokenSet;
use crate::numerics::{argmax, js_divergence, validate_distribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowItem {
    pub item: String,
    pub tokens: TokenSet,
    pub category: usize,
}

/// Future items `i_{t+1}..i_{t+h}` with decay `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct FutureWindow {
    pub items: Vec<WindowItem>,
    pub decay: f64,
}

impl FutureWindow {
    pub fn new(items: Vec<WindowItem>, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::config("decay must be in (0, 1]"));
        }
        Ok(Self { items, decay })
    }

    /// First `h` entries of `future` (fewer at the end of the data).
    pub fn truncated(future: &[WindowItem], h: usize, decay: f64) -> Result<Self> {
        Self::new(future.iter().take(h).cloned().collect(), decay)
    }

    pub fn target(&self) -> Result<&WindowItem> {
        self.items.first().ok_or(Error::EmptyWindow)
    }
}

fn check_complete(path: &ReasoningPath) -> Result<()> {
    if path.steps.is_empty() || !path.active.is_empty() {
        return Err(Error::IncompletePath);
    }
    Ok(())
}

/// Fraction of steps whose token equals the target's token for the same codebook.
pub fn step_hit(path: &ReasoningPath, target: &TokenSet) -> Result<f64> {
    check_complete(path)?;
    let m = path.steps.len();
    if target.num_codebooks() != m {
        return Err(Error::shape("target token set size differs from path"));
    }
    let hits = path.steps.iter().filter(|s| target.contains(s.codebook, s.token)).count();
    Ok(hits as f64 / m as f64)
}

/// Fraction of steps whose arg-max category equals `target_category`.
pub fn category_hit(path: &ReasoningPath, target_category: usize) -> Result<f64> {
    check_complete(path)?;
    let mut hits = 0usize;
    for s in &path.steps {
        if s.category.is_empty() {
            return Err(Error::NoCategory);
        }
        hits += usize::from(argmax(&s.category) == target_category);
    }
    Ok(hits as f64 / path.steps.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum JsMode {
    /// Divergences divided by ln 2 before averaging.
    #[default]
    Normalized,
    Raw,
}

/// `1 - mean_i JS(p_i, p_{i+1})` over adjacent steps.
pub fn step_consistency(path: &ReasoningPath, mode: JsMode) -> Result<f64> {
    check_complete(path)?;
    for s in &path.steps {
        if s.category.is_empty() {
            return Err(Error::NoCategory);
        }
        validate_distribution(&s.category)?;
    }
    let m = path.steps.len();
    if m < 2 {
        return Ok(1.0);
    }
    let scale = match mode {
        JsMode::Normalized => std::f64::consts::LN_2,
        JsMode::Raw => 1.0,
    };
    let mut sum = 0.0;
    for w in path.steps.windows(2) {
        sum += js_divergence(&w[0].category, &w[1].category)? / scale;
    }
    Ok(1.0 - sum / (m - 1) as f64)
}

/// Reward-time retention: up to `d` steps that disagree with `target` are
/// dropped, least confident first.
pub fn retain_against(path: &ReasoningPath, target: &TokenSet, d: usize) -> Vec<(usize, usize)> {
    let mut wrong: Vec<usize> = (0..path.steps.len())
        .filter(|&i| !target.contains(path.steps[i].codebook, path.steps[i].token))
        .collect();
    wrong.sort_by(|&a, &b| {
        path.steps[a]
            .confidence
            .total_cmp(&path.steps[b].confidence)
            .then_with(|| b.cmp(&a))
    });
    wrong.truncate(d);
    (0..path.steps.len())
        .filter(|i| !wrong.contains(i))
        .map(|i| (path.steps[i].codebook, path.steps[i].token))
        .collect()
}

/// 1 when `target_item` is among the `n` items nearest to the retained
/// steps' codeword sum, else 0.
pub fn global_path(
    path: &ReasoningPath,
    target_item: &str,
    target_tokens: &TokenSet,
    index: &RetrievalIndex,
    n: usize,
    d: usize,
) -> Result<f64> {
    check_complete(path)?;
    if d >= path.steps.len() {
        return Err(Error::config("d must be < M"));
    }
    let z = index.query(&retain_against(path, target_tokens, d))?;
    let top = index.nearest(&z, n)?;
    Ok(f64::from(u8::from(top.iter().any(|(id, _)| id == target_item))))
}

/// Decay-weighted mean `sum_j w^(j-1) r_j / sum_j w^(j-1)`.
pub fn decay_mean(rewards: &[f64], w: f64) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let (mut num, mut den, mut wj) = (0.0, 0.0, 1.0);
    for &r in rewards {
        num += wj * r;
        den += wj;
        wj *= w;
    }
    Ok(num / den)
}

pub fn msra_step(path: &ReasoningPath, window: &FutureWindow) -> Result<f64> {
    let r = window
        .items
        .iter()
        .map(|it| step_hit(path, &it.tokens))
        .collect::<Result<Vec<_>>>()?;
    decay_mean(&r, window.decay)
}

pub fn msra_cate(path: &ReasoningPath, window: &FutureWindow) -> Result<f64> {
    let r = window
        .items
        .iter()
        .map(|it| category_hit(path, it.category))
        .collect::<Result<Vec<_>>>()?;
    decay_mean(&r, window.decay)
}

pub fn msra_path(path: &ReasoningPath, window: &FutureWindow, index: &RetrievalIndex, n: usize, d: usize) -> Result<f64> {
    let r = window
        .items
        .iter()
        .map(|it| global_path(path, &it.item, &it.tokens, index, n, d))
        .collect::<Result<Vec<_>>>()?;
    decay_mean(&r, window.decay)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Components {
    pub step: bool,
    pub cate: bool,
    pub js: bool,
    pub path: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            step: true,
            cate: true,
            js: true,
            path: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub msra: bool,
    pub horizon: usize,
    pub decay: f64,
    pub topn: usize,
    pub drop: usize,
    pub js_mode: JsMode,
    pub components: Components,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            msra: true,
            horizon: 3,
            decay: 0.8,
            topn: 10,
            drop: 1,
            js_mode: JsMode::Normalized,
            components: Components::default(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("horizon must be >= 1"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("decay must be in (0, 1]"));
        }
        if self.topn == 0 {
            return Err(Error::config("topn must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub step: f64,
    pub cate: f64,
    pub js: f64,
    pub path: f64,
    pub msra_step: f64,
    pub msra_cate: f64,
    pub msra_path: f64,
    pub total: f64,
}

/// All components for one path; `window.items[0]` is the next item.
pub fn total_reward(
    path: &ReasoningPath,
    window: &FutureWindow,
    index: &RetrievalIndex,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    cfg.validate()?;
    let target = window.target()?;
    let w = FutureWindow::truncated(&window.items, cfg.horizon, window.decay)?;
    let c = &cfg.components;
    let mut b = RewardBreakdown {
        step: step_hit(path, &target.tokens)?,
        cate: category_hit(path, target.category)?,
        js: if c.js { step_consistency(path, cfg.js_mode)? } else { 0.0 },
        ..Default::default()
    };
    if c.path {
        b.path = global_path(path, &target.item, &target.tokens, index, cfg.topn, cfg.drop)?;
    }
    b.msra_step = msra_step(path, &w)?;
    b.msra_cate = msra_cate(path, &w)?;
    if c.path {
        b.msra_path = msra_path(path, &w, index, cfg.topn, cfg.drop)?;
    }
    let pick = |single: f64, multi: f64| if cfg.msra { multi } else { single };
    let mut total = 0.0;
    if c.step {
        total += pick(b.step, b.msra_step);
    }
    if c.cate {
        total += pick(b.cate, b.msra_cate);
    }
    if c.js {
        total += b.js;
    }
    if c.path {
        total += pick(b.path, b.msra_path);
    }
    b.total = total;
    Ok(b)
}

pub fn write_reward_trace(rows: &[(String, RewardBreakdown)], mut out: impl Write) -> Result<()> {
    writeln!(out, "user,step,cate,js,path,msra_step,msra_cate,msra_path,total")?;
    for (u, b) in rows {
        writeln!(
            out,
            "{u},{},{},{},{},{},{},{},{}",
            b.step, b.cate, b.js, b.path, b.msra_step, b.msra_cate, b.msra_path, b.total
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::PathStep;
    use crate::mpq::Codebook;
    use crate::rng::RngStream;
    use std::collections::BTreeMap;

    fn path(pairs: &[(usize, usize)], cats: &[Vec<f64>]) -> ReasoningPath {
        let mut p = ReasoningPath::new(pairs.len());
        p.active.clear();
        p.status = crate::decode::PathStatus::Complete;
        for (i, &(r, c)) in pairs.iter().enumerate() {
            p.steps.push(PathStep {
                codebook: r,
                token: c,
                confidence: 0.5 + 0.1 * i as f64,
                logprob: 0.0,
                category: cats[i].clone(),
                token_logprobs: vec![],
            });
        }
        p
    }

    fn flat(m: usize) -> Vec<Vec<f64>> {
        vec![vec![0.5, 0.5]; m]
    }

    #[test]
    fn step_hit_examples() {
        let t = TokenSet::new(vec![1, 2, 3, 4]);
        assert_eq!(step_hit(&path(&[(0, 1), (1, 2), (2, 3), (3, 4)], &flat(4)), &t).unwrap(), 1.0);
        assert_eq!(step_hit(&path(&[(0, 1), (1, 2), (2, 3), (3, 0)], &flat(4)), &t).unwrap(), 0.75);
        let reordered = path(&[(3, 0), (1, 2), (0, 1), (2, 3)], &flat(4));
        assert_eq!(step_hit(&reordered, &t).unwrap(), 0.75);
        let mut partial = path(&[(0, 1)], &flat(1));
        partial.active = vec![1];
        assert!(matches!(step_hit(&partial, &t), Err(Error::IncompletePath)));
    }

    #[test]
    fn category_hit_examples() {
        let p = path(&[(0, 0), (1, 0)], &[vec![0.9, 0.1], vec![0.2, 0.8]]);
        assert_eq!(category_hit(&p, 0).unwrap(), 0.5);
        let cats = vec![vec![0.1, 0.7, 0.2], vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3], vec![0.1, 0.8, 0.1]];
        let p = path(&[(0, 0), (1, 0), (2, 0), (3, 0)], &cats);
        // Hand count: arg-maxes are 1, 0, 1, 1.
        assert_eq!(category_hit(&p, 1).unwrap(), 0.75);
        assert_eq!(category_hit(&p, 0).unwrap(), 0.25);
        let mut empty = p.clone();
        empty.steps[2].category.clear();
        assert!(matches!(category_hit(&empty, 1), Err(Error::NoCategory)));
    }

    #[test]
    fn consistency_examples() {
        let same = path(&[(0, 0), (1, 0), (2, 0)], &vec![vec![0.3, 0.7]; 3]);
        assert_eq!(step_consistency(&same, JsMode::Normalized).unwrap(), 1.0);
        let disjoint = path(&[(0, 0), (1, 0)], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(step_consistency(&disjoint, JsMode::Normalized).unwrap().abs() < 1e-15);
        assert!((step_consistency(&disjoint, JsMode::Raw).unwrap() - (1.0 - std::f64::consts::LN_2)).abs() < 1e-15);

        let a = vec![1.0, 0.0];
        let b = vec![0.5, 0.5];
        let p1 = path(&[(0, 0), (1, 0), (2, 0)], &[a.clone(), a.clone(), b.clone()]);
        let p2 = path(&[(0, 0), (1, 0), (2, 0)], &[a.clone(), b.clone(), a.clone()]);
        assert_ne!(
            step_consistency(&p1, JsMode::Normalized).unwrap(),
            step_consistency(&p2, JsMode::Normalized).unwrap()
        );
    }

    #[test]
    fn decay_mean_examples() {
        let w = 0.8;
        let v = decay_mean(&[1.0, 0.0, 1.0], w).unwrap();
        assert_eq!(v, (1.0 + 0.0 + 0.8 * 0.8) / (1.0 + 0.8 + 0.8 * 0.8));
        assert!((v - 0.672_131_147_540_983_6).abs() < 1e-15);
        assert!((decay_mean(&[0.5, 1.0], 0.8).unwrap() - 1.3 / 1.8).abs() < 1e-15);
        assert!((decay_mean(&[1.0, 1.0, 0.0], 0.8).unwrap() - 1.8 / 2.44).abs() < 1e-15);
        assert_eq!(decay_mean(&[0.2, 0.4, 0.9], 1.0).unwrap(), (0.2 + 0.4 + 0.9) / 3.0);
        assert!(matches!(decay_mean(&[], 0.8), Err(Error::EmptyWindow)));
    }

    fn index(m: usize, d: usize, items: &[(&str, Vec<usize>)], rng: &mut RngStream) -> RetrievalIndex {
        let cbs: Vec<Codebook> = (0..m)
            .map(|r| Codebook::new(r, &(0..d).map(|_| (0..4).map(|_| rng.normal()).collect()).collect::<Vec<_>>()).unwrap())
            .collect();
        let map: BTreeMap<String, (TokenSet, Vec<f64>)> = items
            .iter()
            .map(|(id, t)| (id.to_string(), (TokenSet::new(t.clone()), vec![1.0 / m as f64; m])))
            .collect();
        RetrievalIndex::new(cbs, &map).unwrap()
    }

    #[test]
    fn global_path_examples() {
        let mut rng = RngStream::new(3);
        let idx = index(3, 4, &[("a", vec![0, 1, 2]), ("b", vec![3, 3, 3]), ("c", vec![1, 0, 2])], &mut rng);
        let p = path(&[(0, 0), (1, 1), (2, 2)], &flat(3));
        let ta = TokenSet::new(vec![0, 1, 2]);
        assert_eq!(global_path(&p, "a", &ta, &idx, 1, 0).unwrap(), 1.0);
        assert_eq!(global_path(&p, "zzz", &ta, &idx, 3, 0).unwrap(), 0.0);
    }

    #[test]
    fn global_path_matches_brute_force_with_one_corruption() {
        let mut rng = RngStream::new(10);
        let items: Vec<(String, Vec<usize>)> = (0..20).map(|i| (format!("i{i:02}"), (0..4).map(|_| rng.below(5)).collect())).collect();
        let refs: Vec<(&str, Vec<usize>)> = items.iter().map(|(a, b)| (a.as_str(), b.clone())).collect();
        let idx = index(4, 5, &refs, &mut rng);
        for (id, toks) in &items {
            let mut pairs: Vec<(usize, usize)> = toks.iter().copied().enumerate().collect();
            let bad = rng.below(4);
            pairs[bad].1 = (pairs[bad].1 + 1) % 5;
            let p = path(&pairs, &flat(4));
            let target = TokenSet::new(toks.clone());
            // Brute force: drop the corrupted step, rank all items by distance.
            let kept: Vec<(usize, usize)> = pairs.iter().copied().filter(|&(r, _)| r != bad).collect();
            let z = idx.query(&kept).unwrap();
            let mut all: Vec<(f64, &str)> = (0..idx.len())
                .map(|i| (idx.vector(i).iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), idx.ids()[i].as_str()))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
            let want = f64::from(u8::from(all.iter().take(3).any(|x| x.1 == id)));
            assert_eq!(global_path(&p, id, &target, &idx, 3, 1).unwrap(), want);
        }
    }

    fn win(items: &[(Vec<usize>, usize)], w: f64) -> FutureWindow {
        FutureWindow::new(
            items
                .iter()
                .enumerate()
                .map(|(i, (t, c))| WindowItem {
                    item: format!("w{i}"),
                    tokens: TokenSet::new(t.clone()),
                    category: *c,
                })
                .collect(),
            w,
        )
        .unwrap()
    }

    #[test]
    fn msra_variants() {
        let p = path(&[(0, 1), (1, 1)], &[vec![0.9, 0.1], vec![0.9, 0.1]]);
        let w1 = win(&[(vec![1, 0], 0)], 0.8);
        assert_eq!(msra_step(&p, &w1).unwrap().to_bits(), step_hit(&p, &w1.items[0].tokens).unwrap().to_bits());
        assert_eq!(msra_cate(&p, &w1).unwrap().to_bits(), category_hit(&p, 0).unwrap().to_bits());
        let w3 = win(&[(vec![1, 1], 0), (vec![0, 0], 1), (vec![1, 1], 0)], 0.8);
        assert_eq!(msra_step(&p, &w3).unwrap(), (1.0 + 0.8 * 0.8) / (1.0 + 0.8 + 0.8 * 0.8));
        assert_eq!(msra_cate(&p, &win(&[(vec![0, 0], 0), (vec![0, 0], 0)], 0.8)).unwrap(), 1.0);
        let empty = FutureWindow::new(vec![], 0.8).unwrap();
        assert!(matches!(msra_step(&p, &empty), Err(Error::EmptyWindow)));
    }

    #[test]
    fn total_reward_combinations() {
        let mut rng = RngStream::new(5);
        let idx = index(2, 3, &[("w0", vec![1, 2])], &mut rng);
        let p = path(&[(0, 1), (1, 2)], &[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let w = win(&[(vec![1, 2], 0)], 0.8);
        let cfg = RewardConfig::default();
        let b = total_reward(&p, &w, &idx, &cfg).unwrap();
        assert_eq!(b.total, 4.0);
        let only_js = RewardConfig {
            components: Components {
                step: false,
                cate: false,
                js: true,
                path: false,
            },
            ..cfg
        };
        let b = total_reward(&p, &w, &idx, &only_js).unwrap();
        assert_eq!(b.total, b.js);
        assert_eq!((cfg.horizon, cfg.decay), (3, 0.8));
    }

    #[test]
    fn counting_oracles_on_random_paths() {
        let mut rng = RngStream::new(6);
        for _ in 0..1000 {
            let m = 1 + rng.below(6);
            let target: Vec<usize> = (0..m).map(|_| rng.below(4)).collect();
            let mut order: Vec<usize> = (0..m).collect();
            rng.shuffle(&mut order);
            let pairs: Vec<(usize, usize)> = order.iter().map(|&r| (r, rng.below(4))).collect();
            let cats: Vec<Vec<f64>> = (0..m)
                .map(|_| {
                    let v: Vec<f64> = (0..3).map(|_| rng.uniform() + 1e-3).collect();
                    let s: f64 = v.iter().sum();
                    v.into_iter().map(|x| x / s).collect()
                })
                .collect();
            let p = path(&pairs, &cats);
            let hits = pairs.iter().filter(|&&(r, c)| target[r] == c).count();
            assert_eq!(step_hit(&p, &TokenSet::new(target.clone())).unwrap(), hits as f64 / m as f64);
            let g = rng.below(3);
            let ch = cats.iter().filter(|c| argmax(c) == g).count();
            assert_eq!(category_hit(&p, g).unwrap(), ch as f64 / m as f64);

            // Consistent relabeling of categories leaves the JS reward unchanged.
            let perm = [2usize, 0, 1];
            let relabeled: Vec<Vec<f64>> = cats.iter().map(|c| (0..3).map(|k| c[perm[k]]).collect()).collect();
            let q = path(&pairs, &relabeled);
            let a = step_consistency(&p, JsMode::Normalized).unwrap();
            let b = step_consistency(&q, JsMode::Normalized).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn msra_scales_linearly() {
        let mut rng = RngStream::new(7);
        for _ in 0..100 {
            let r: Vec<f64> = (0..1 + rng.below(5)).map(|_| rng.uniform()).collect();
            let k = rng.uniform();
            let a = decay_mean(&r.iter().map(|x| x * k).collect::<Vec<_>>(), 0.8).unwrap();
            let b = k * decay_mean(&r, 0.8).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }
}
