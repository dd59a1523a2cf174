//! Group-relative policy optimization of the path decoder.
//!
//! For each sampled user context, `G` paths are drawn from a frozen
//! snapshot, scored by the path rewards, and standardized within the group.
//! The live policy then ascends the clipped ratio surrogate minus a KL
//! penalty toward the snapshot.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::decode::{generate_path, generate_with_reflection, DecodeMode, PathStatus, ReasoningPath, ReflectConfig, RetrievalIndex};
use crate::error::{Error, Result};
use crate::mpq::TokenSet;
use crate::numerics::{Adam, AdamConfig, ParamVars, Tape, Var};
use crate::rewards::{total_reward, FutureWindow, RewardBreakdown, RewardConfig, WindowItem};
use crate::rng::RngStream;
use crate::seqmodel::{SeqModel, StepModel};

/// Population-std standardization; the std is floored at `1e-8` so constant groups give zeros.
pub fn advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    // The floor only matters for (near-)constant groups, which map to zeros.
    let sd = var.sqrt().max(1e-8);
    rewards.iter().map(|r| (r - mean) / sd).collect()
}

/// `min(rho * a, clip(rho, 1-eps, 1+eps) * a)` and whether the clipped
/// branch was strictly smaller.
pub fn clipped_term(rho: f64, a: f64, eps: f64) -> (f64, bool) {
    let unclipped = rho * a;
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * a;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

/// Draws `g` complete paths; pruned paths are discarded and redrawn.
/// Draw `k` uses substream `rng.derive(k)`.
pub fn sample_group(
    ctx: &impl StepModel,
    g: usize,
    rng: &RngStream,
    reflect: Option<&ReflectConfig>,
) -> Result<Vec<ReasoningPath>> {
    if g < 2 {
        return Err(Error::config("group size must be >= 2"));
    }
    let mut out = Vec::with_capacity(g);
    let max_draws = 20 * g as u64;
    for k in 0..max_draws {
        let mut r = rng.derive(k);
        let path = match reflect {
            Some(cfg) => generate_with_reflection(ctx, DecodeMode::Sample, cfg, &mut r)?.0,
            None => generate_path(ctx, DecodeMode::Sample, Some(&mut r))?,
        };
        if path.status == PathStatus::Complete {
            out.push(path);
            if out.len() == g {
                return Ok(out);
            }
        }
    }
    Err(Error::DecodeFailure)
}

/// Log-probability graph of a path under the bound parameters, plus the
/// per-step log-softmax rows of the chosen codebooks.
pub fn path_logprob_graph(
    tape: &mut Tape,
    model: &SeqModel,
    pv: &ParamVars,
    memory: Var,
    path: &ReasoningPath,
) -> Result<(Var, Vec<Var>)> {
    if path.steps.is_empty() {
        return Err(Error::IncompletePath);
    }
    let pairs = path.prefix();
    let hidden = model.decode_graph(tape, pv, memory, &pairs[..pairs.len() - 1]);
    let mut picks = Vec::with_capacity(pairs.len());
    let mut rows = Vec::with_capacity(pairs.len());
    for (j, &(r, c)) in pairs.iter().enumerate() {
        let h = tape.row(hidden, j);
        let logits = model.head_graph(tape, pv, h, r);
        let lp = tape.log_softmax_rows(logits);
        picks.push(tape.pick(lp, &[(0, c)]));
        rows.push(lp);
    }
    let all = tape.concat_rows(&picks);
    Ok((tape.sum(all), rows))
}

/// Recomputes the log-probability of a path's decisions under `model`.
pub fn path_logprob(model: &SeqModel, history: &[TokenSet], path: &ReasoningPath) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.bind(&model.params);
    let mem = model.encode_graph(&mut tape, &pv, history)?;
    let (lp, _) = path_logprob_graph(&mut tape, model, &pv, mem, path)?;
    Ok(tape.scalar(lp))
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    /// `J = mean(surrogate) - beta * mean(KL)`.
    pub objective: Var,
    pub surrogate: f64,
    pub kl: f64,
    pub clipped: usize,
    /// Paths dropped for a non-finite ratio ("ratio-overflow").
    pub skipped: usize,
}

/// Builds the clipped objective for one group sampled under the snapshot
/// whose decisions are recorded in `paths`.
pub fn clipped_objective_graph(
    tape: &mut Tape,
    model: &SeqModel,
    pv: &ParamVars,
    history: &[TokenSet],
    paths: &[ReasoningPath],
    adv: &[f64],
    eps: f64,
    kl_beta: f64,
) -> Result<ObjectiveVars> {
    if eps <= 0.0 || kl_beta < 0.0 {
        return Err(Error::config("need eps > 0 and kl_beta >= 0"));
    }
    if paths.len() != adv.len() || paths.is_empty() {
        return Err(Error::shape("one advantage per path"));
    }
    let mem = model.encode_graph(tape, pv, history)?;
    let mut terms = Vec::with_capacity(paths.len());
    let mut kls = Vec::with_capacity(paths.len());
    let (mut clipped, mut skipped) = (0, 0);
    for (path, &a) in paths.iter().zip(adv) {
        let (lp, rows) = path_logprob_graph(tape, model, pv, mem, path)?;
        let old = tape.scalar_const(path.logprob());
        let log_ratio = tape.sub(lp, old);
        let ratio = tape.exp(log_ratio);
        let rho = tape.scalar(ratio);
        if !rho.is_finite() {
            skipped += 1;
            continue;
        }
        let (value, was_clipped) = clipped_term(rho, a, eps);
        terms.push(if was_clipped {
            clipped += 1;
            tape.scalar_const(value)
        } else {
            tape.scale(ratio, a)
        });
        let mut step_kls = Vec::with_capacity(rows.len());
        for (lp_row, step) in rows.into_iter().zip(&path.steps) {
            let old_lp = tape.constant(1, step.token_logprobs.len(), step.token_logprobs.clone());
            let p = tape.exp(lp_row);
            let diff = tape.sub(lp_row, old_lp);
            let prod = tape.mul(p, diff);
            step_kls.push(tape.sum(prod));
        }
        let k = tape.concat_rows(&step_kls);
        kls.push(tape.sum(k));
    }
    if terms.is_empty() {
        let zero = tape.scalar_const(0.0);
        return Ok(ObjectiveVars {
            objective: zero,
            surrogate: 0.0,
            kl: 0.0,
            clipped,
            skipped,
        });
    }
    let n = terms.len() as f64;
    let s = tape.concat_rows(&terms);
    let s = tape.sum(s);
    let surrogate = tape.scale(s, 1.0 / n);
    let k = tape.concat_rows(&kls);
    let k = tape.sum(k);
    let kl = tape.scale(k, 1.0 / n);
    let penalty = tape.scale(kl, -kl_beta);
    let objective = tape.add(surrogate, penalty);
    Ok(ObjectiveVars {
        objective,
        surrogate: tape.scalar(surrogate),
        kl: tape.scalar(kl),
        clipped,
        skipped,
    })
}

/// Objective value and its gradient (ascent direction) per parameter.
pub fn clipped_objective(
    model: &SeqModel,
    history: &[TokenSet],
    paths: &[ReasoningPath],
    adv: &[f64],
    eps: f64,
    kl_beta: f64,
) -> Result<(ObjectiveVars, f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let pv = tape.bind(&model.params);
    let o = clipped_objective_graph(&mut tape, model, &pv, history, paths, adv, eps, kl_beta)?;
    let value = tape.scalar(o.objective);
    let grads = tape.backward(o.objective).params(&model.params, &pv);
    Ok((o, value, grads))
}

/// A post-training context: history plus the items that follow it
/// (`future[0]` is the next item).
#[derive(Debug, Clone, PartialEq)]
pub struct PostTrainSample {
    pub user: String,
    pub history: Vec<TokenSet>,
    pub future: Vec<WindowItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub iterations: usize,
    pub users_per_iter: usize,
    pub group_size: usize,
    pub epsilon: f64,
    pub kl_beta: f64,
    /// Iterations between snapshot refreshes.
    pub snapshot_period: usize,
    pub lr: f64,
    pub reward: RewardConfig,
    /// Reflection while sampling groups (pruned paths are redrawn).
    pub reflect: Option<ReflectConfig>,
    /// Validation period in iterations for model selection (0 disables).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            users_per_iter: 16,
            group_size: 8,
            epsilon: 0.15,
            kl_beta: 0.01,
            snapshot_period: 1,
            lr: 1e-3,
            reward: RewardConfig::default(),
            reflect: None,
            eval_every: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: usize,
    pub mean_reward: f64,
    pub mean_step: f64,
    pub mean_cate: f64,
    pub mean_js: f64,
    pub mean_path: f64,
    pub kl: f64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct PostTrainReport {
    pub log: Vec<IterLog>,
    /// `(iteration, validation score)` pairs; iteration 0 is the input model.
    pub validation: Vec<(usize, f64)>,
    pub selected_iter: usize,
}

/// Scores one group: rewards, advantages and the mean breakdown.
pub fn score_group(
    paths: &[ReasoningPath],
    sample: &PostTrainSample,
    index: &RetrievalIndex,
    reward: &RewardConfig,
) -> Result<Vec<RewardBreakdown>> {
    let window = FutureWindow::truncated(&sample.future, reward.horizon, reward.decay)?;
    paths.iter().map(|p| total_reward(p, &window, index, reward)).collect()
}

/// Runs the post-training loop from `model`. With `validate` and a nonzero
/// `eval_every`, the best-scoring iterate (the input model included) is
/// returned.
pub fn policy_update(
    model: &SeqModel,
    samples: &[PostTrainSample],
    index: &RetrievalIndex,
    cfg: &GrpoConfig,
    validate: Option<&dyn Fn(&SeqModel) -> Result<f64>>,
) -> Result<(SeqModel, PostTrainReport)> {
    cfg.reward.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.group_size < 2 || cfg.users_per_iter == 0 || cfg.snapshot_period == 0 {
        return Err(Error::config("need group_size >= 2, users_per_iter >= 1, snapshot_period >= 1"));
    }
    let root = RngStream::new(cfg.seed);
    let mut pick_rng = root.derive_named("grpo-users");
    let mut policy = model.clone();
    let mut snapshot = policy.clone();
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &policy.params,
    );
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, SeqModel)> = None;
    let evaluating = validate.is_some() && cfg.eval_every > 0;
    if let (Some(v), true) = (validate, evaluating) {
        let s = v(&policy)?;
        validation.push((0, s));
        best = Some((s, 0, policy.clone()));
    }

    for it in 1..=cfg.iterations {
        if (it - 1) % cfg.snapshot_period == 0 {
            snapshot = policy.clone();
        }
        let chosen: Vec<usize> = (0..cfg.users_per_iter).map(|_| pick_rng.below(samples.len())).collect();
        let mut tape = Tape::new();
        let pv = tape.bind(&policy.params);
        let mut objectives = Vec::with_capacity(chosen.len());
        let (mut sum_b, mut kl, mut count) = (RewardBreakdown::default(), 0.0, 0usize);
        for (k, &si) in chosen.iter().enumerate() {
            let sample = &samples[si];
            let ctx = snapshot.context(&sample.history)?;
            let group_rng = root.derive_named(&format!("group-{it}-{k}"));
            let paths = sample_group(&ctx, cfg.group_size, &group_rng, cfg.reflect.as_ref())?;
            let rewards = score_group(&paths, sample, index, &cfg.reward)?;
            for b in &rewards {
                sum_b.step += b.step;
                sum_b.cate += b.cate;
                sum_b.js += b.js;
                sum_b.path += b.path;
                sum_b.total += b.total;
            }
            count += rewards.len();
            let adv = advantages(&rewards.iter().map(|b| b.total).collect::<Vec<_>>());
            let o = clipped_objective_graph(
                &mut tape,
                &policy,
                &pv,
                &sample.history,
                &paths,
                &adv,
                cfg.epsilon,
                cfg.kl_beta,
            )?;
            kl += o.kl;
            objectives.push(o.objective);
        }
        let all = tape.concat_rows(&objectives);
        let s = tape.sum(all);
        let j = tape.scale(s, 1.0 / objectives.len() as f64);
        let objective = tape.scalar(j);
        if !objective.is_finite() {
            return Err(Error::ParsDiverged);
        }
        let loss = tape.scale(j, -1.0);
        let grads = tape.backward(loss).params(&policy.params, &pv);
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::ParsDiverged);
        }
        opt.step(&mut policy.params, &grads);
        let n = count as f64;
        log.push(IterLog {
            iter: it,
            mean_reward: sum_b.total / n,
            mean_step: sum_b.step / n,
            mean_cate: sum_b.cate / n,
            mean_js: sum_b.js / n,
            mean_path: sum_b.path / n,
            kl: kl / chosen.len() as f64,
            objective,
        });
        if let (Some(v), true) = (validate, evaluating && it % cfg.eval_every == 0) {
            let s = v(&policy)?;
            validation.push((it, s));
            if best.as_ref().is_none_or(|b| s > b.0) {
                best = Some((s, it, policy.clone()));
            }
        }
    }
    let (model, selected_iter) = match best {
        Some((_, it, m)) => (m, it),
        None => (policy, cfg.iterations),
    };
    Ok((
        model,
        PostTrainReport {
            log,
            validation,
            selected_iter,
        },
    ))
}

pub fn write_log_csv(log: &[IterLog], mut out: impl Write) -> Result<()> {
    writeln!(out, "iter,mean_reward,mean_step,mean_cate,mean_js,mean_path,kl,objective")?;
    for l in log {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            l.iter, l.mean_reward, l.mean_step, l.mean_cate, l.mean_js, l.mean_path, l.kl, l.objective
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_params, GradCheckOptions, ParamId};
    use crate::seqmodel::SeqConfig;

    #[test]
    fn advantage_examples() {
        let a = advantages(&[1.0, 2.0, 3.0]);
        let want = 1.0 / (2f64 / 3.0).sqrt();
        assert!((a[0] + want).abs() < 1e-7 && a[1].abs() < 1e-12 && (a[2] - want).abs() < 1e-7);
        assert!(advantages(&[0.7; 5]).iter().all(|&x| x == 0.0));
        let mut rng = RngStream::new(1);
        for _ in 0..200 {
            let r: Vec<f64> = (0..2 + rng.below(30)).map(|_| rng.normal()).collect();
            let a = advantages(&r);
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let var = a.iter().map(|x| x * x).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn clipping_examples() {
        assert_eq!(clipped_term(1.5, 1.0, 0.15), (1.15, true));
        assert_eq!(clipped_term(1.5, -1.0, 0.15), (-1.5, false));
        assert_eq!(clipped_term(0.5, -1.0, 0.15), (-0.85, true));
        assert_eq!(clipped_term(0.5, 1.0, 0.15), (0.5, false));
        assert_eq!(clipped_term(1.1, 2.0, 0.15), (1.1 * 2.0, false));
    }

    fn tiny() -> SeqModel {
        SeqModel::new(
            SeqConfig {
                num_codebooks: 2,
                codebook_size: 3,
                num_categories: 2,
                embed_dim: 4,
                hidden_dim: 4,
                max_context: 4,
                ..Default::default()
            },
            &mut RngStream::new(0),
        )
        .unwrap()
    }

    fn perturb(model: &mut SeqModel, seed: u64, scale: f64) {
        let mut rng = RngStream::new(seed);
        for i in 0..model.params.len() {
            for v in model.params.get_mut(ParamId(i)).data_mut() {
                *v += scale * rng.normal();
            }
        }
    }

    #[test]
    fn recorded_logprob_matches_recompute() {
        let mut model = tiny();
        perturb(&mut model, 3, 0.5);
        let history = vec![TokenSet::new(vec![0, 1]), TokenSet::new(vec![2, 2])];
        let ctx = model.context(&history).unwrap();
        let group = sample_group(&ctx, 8, &RngStream::new(5), None).unwrap();
        assert_eq!(group, sample_group(&ctx, 8, &RngStream::new(5), None).unwrap());
        for p in &group {
            let lp = path_logprob(&model, &history, p).unwrap();
            assert!((lp - p.logprob()).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_policy_objective_is_zero() {
        let mut model = tiny();
        perturb(&mut model, 4, 0.5);
        let history = vec![TokenSet::new(vec![1, 1])];
        let ctx = model.context(&history).unwrap();
        let group = sample_group(&ctx, 6, &RngStream::new(1), None).unwrap();
        let adv = advantages(&[0.0, 1.0, 0.5, 0.2, 0.9, 0.4]);
        let (o, value, _) = clipped_objective(&model, &history, &group, &adv, 0.15, 0.01).unwrap();
        assert!(value.abs() < 1e-10, "{value}");
        assert!(o.kl.abs() < 1e-12);
        assert_eq!(o.clipped, 0);
    }

    #[test]
    fn objective_gradient_check() {
        for seed in 0..3 {
            let mut snapshot = tiny();
            perturb(&mut snapshot, 10 + seed, 0.5);
            let history = vec![TokenSet::new(vec![0, 2]), TokenSet::new(vec![1, 0])];
            let ctx = snapshot.context(&history).unwrap();
            let group = sample_group(&ctx, 4, &RngStream::new(seed), None).unwrap();
            let adv = advantages(&[1.0, 0.0, 0.3, 0.8]);
            let mut live = snapshot.clone();
            perturb(&mut live, 100 + seed, 0.05);
            let r = grad_check_params(
                &live.params,
                |t, _, pv| Ok(clipped_objective_graph(t, &live, pv, &history, &group, &adv, 0.15, 0.01)?.objective),
                GradCheckOptions::new(1e-3),
            )
            .unwrap();
            assert!(r.passed, "seed {seed}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn bandit_update_raises_best_path() {
        let cfg = SeqConfig {
            num_codebooks: 1,
            codebook_size: 4,
            num_categories: 2,
            embed_dim: 4,
            hidden_dim: 4,
            max_context: 2,
            ..Default::default()
        };
        let history = vec![TokenSet::new(vec![0])];
        let mut informative = 0;
        for seed in 0..100 {
            let model = SeqModel::new(cfg.clone(), &mut RngStream::new(seed)).unwrap();
            let ctx = model.context(&history).unwrap();
            let group = sample_group(&ctx, 16, &RngStream::new(1000 + seed), None).unwrap();
            let rewards: Vec<f64> = group.iter().map(|p| f64::from(u8::from(p.steps[0].token == 2))).collect();
            let adv = advantages(&rewards);
            if adv.iter().all(|&a| a == 0.0) {
                continue;
            }
            informative += 1;
            let best = group
                .iter()
                .zip(&adv)
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(p, _)| p.clone())
                .unwrap();
            let before = path_logprob(&model, &history, &best).unwrap();
            let (_, _, grads) = clipped_objective(&model, &history, &group, &adv, 1e9, 0.0).unwrap();
            let mut stepped = model.clone();
            for (i, g) in grads.iter().enumerate() {
                for (w, gk) in stepped.params.get_mut(ParamId(i)).data_mut().iter_mut().zip(g) {
                    *w += 0.1 * gk;
                }
            }
            let after = path_logprob(&stepped, &history, &best).unwrap();
            assert!(after > before, "seed {seed}");
        }
        assert!(informative >= 90);
    }

    #[test]
    fn log_csv_header() {
        let mut buf = Vec::new();
        write_log_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iter,mean_reward,mean_step,mean_cate,mean_js,mean_path,kl,objective\n");
    }
}
