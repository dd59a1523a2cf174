//! Dense numeric kernels, reverse-mode gradients and a finite-difference
//! gradient checker.

mod params;
mod tape;
mod tensor;

pub use params::{init_fan_in, init_normal, ones, Adam, AdamConfig, Param, ParamId, ParamStore, ParamVars};
pub use tape::{Grads, Tape, Var};
pub use tensor::DenseTensor;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Probability floor applied when a target has zero probability.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `sum(p) == 1` when validating distributions.
pub const DIST_TOL: f64 = 1e-6;

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValues);
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - mx).exp()).collect();
    let s: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / s).collect())
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|&x| x - lse).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// True when the target probability was below [`PROB_FLOOR`].
    pub clamped: bool,
}

pub fn cross_entropy(probs: &[f64], target: usize) -> Result<CrossEntropy> {
    validate_distribution(probs)?;
    if target >= probs.len() {
        return Err(Error::shape(format!("target {target} out of {}", probs.len())));
    }
    let p = probs[target];
    let clamped = p < PROB_FLOOR;
    Ok(CrossEntropy {
        loss: -p.max(PROB_FLOOR).ln(),
        clamped,
    })
}

pub fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::InvalidDistribution);
    }
    if (p.iter().sum::<f64>() - 1.0).abs() > DIST_TOL {
        return Err(Error::InvalidDistribution);
    }
    Ok(())
}

/// `KL(p || q)` in nats, with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats; lies in `[0, ln 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    validate_distribution(p)?;
    validate_distribution(q)?;
    if p.len() != q.len() {
        return Err(Error::InvalidDistribution);
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_divergence(p, &m) + 0.5 * kl_divergence(q, &m);
    // Rounding can push identical inputs a hair below zero.
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    /// Check a random subset of coordinates instead of all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn new(rel_tol: f64) -> Self {
        Self {
            step: 1e-5,
            rel_tol,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub coords_checked: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub passed: bool,
}

/// Relative error with an absolute floor so coordinates whose true gradient
/// is ~0 are judged on an absolute scale.
fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

fn finish(analytic: Vec<f64>, numeric: Vec<f64>, rel_tol: f64) -> GradCheckReport {
    let (mut worst, mut worst_i) = (0.0, 0);
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = rel_error(a, n);
        if e > worst {
            worst = e;
            worst_i = i;
        }
    }
    GradCheckReport {
        max_rel_error: worst,
        worst_coord: worst_i,
        coords_checked: analytic.len(),
        analytic,
        numeric,
        passed: worst < rel_tol,
    }
}

/// Compares the reverse-mode gradient of `f` at `point` with central
/// finite differences.
pub fn grad_check<F>(f: F, point: &DenseTensor, rel_tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |x: &DenseTensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.variable(x);
        let y = f(&mut t, v)?;
        let val = t.scalar(y);
        if !val.is_finite() {
            return Err(Error::NonFiniteObjective);
        }
        Ok(val)
    };
    let mut t = Tape::new();
    let v = t.variable(point);
    let y = f(&mut t, v)?;
    if !t.scalar(y).is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let grads = t.backward(y);
    let analytic = grads
        .get(v)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let h = 1e-5;
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(&plus)? - eval(&minus)?) / (2.0 * h));
    }
    Ok(finish(analytic, numeric, rel_tol))
}

/// Gradient check over the trainable parameters of a store.
pub fn grad_check_params<F>(store: &ParamStore, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore, &ParamVars) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let pv = t.bind(s);
        let y = f(&mut t, s, &pv)?;
        let val = t.scalar(y);
        if !val.is_finite() {
            return Err(Error::NonFiniteObjective);
        }
        Ok(val)
    };
    let mut t = Tape::new();
    let pv = t.bind(store);
    let y = f(&mut t, store, &pv)?;
    if !t.scalar(y).is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let grads = t.backward(y).params(store, &pv);

    let mut coords: Vec<(usize, usize)> = store
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(i, p)| (0..p.value.len()).map(move |k| (i, k)))
        .collect();
    if let Some(n) = opts.max_coords {
        if n < coords.len() {
            let mut rng = RngStream::new(opts.seed).derive_named("grad-check-coords");
            rng.shuffle(&mut coords);
            coords.truncate(n);
            coords.sort_unstable();
        }
    }

    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for &(i, k) in &coords {
        let id = ParamId(i);
        let mut s = store.clone();
        s.get_mut(id).data_mut()[k] += opts.step;
        let fp = eval(&s)?;
        s.get_mut(id).data_mut()[k] -= 2.0 * opts.step;
        let fm = eval(&s)?;
        analytic.push(grads[i][k]);
        numeric.push((fp - fm) / (2.0 * opts.step));
    }
    Ok(finish(analytic, numeric, opts.rel_tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax(&[123.4]).unwrap(), vec![1.0]);
        assert!(matches!(softmax(&[]), Err(Error::EmptyLogits)));
        // Straight-line reference for [1, 2, 3].
        let (e1, e2, e3) = (1f64.exp(), 2f64.exp(), 3f64.exp());
        let z = e1 + e2 + e3;
        let got = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (g, w) in got.iter().zip([e1 / z, e2 / z, e3 / z]) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0], 0).unwrap().loss, 0.0);
        assert!((cross_entropy(&[0.5, 0.5], 1).unwrap().loss - LN_2).abs() < 1e-15);
        assert!((cross_entropy(&[0.25; 4], 2).unwrap().loss - 4f64.ln()).abs() < 1e-15);
        let ce = cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert!(ce.clamped);
        assert!((ce.loss + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn js_examples() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - LN_2).abs() < 1e-15);
        assert!(matches!(
            js_divergence(&[0.5, 0.6], &[0.5, 0.5]),
            Err(Error::InvalidDistribution)
        ));
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let p = DenseTensor::vector(vec![1.0, 2.0]).unwrap();
        let r = grad_check(|t, x| Ok(t.sum_squares(x)), &p, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
        assert!((r.analytic[0] - 2.0).abs() < 1e-12 && (r.analytic[1] - 4.0).abs() < 1e-12);
        let r = grad_check(|t, _| Ok(t.scalar_const(3.0)), &p, 1e-6).unwrap();
        assert!(r.passed);
        assert_eq!(r.analytic, vec![0.0, 0.0]);
    }

    #[test]
    fn grad_check_rejects_non_finite_objective() {
        let p = DenseTensor::vector(vec![1000.0]).unwrap();
        let r = grad_check(
            |t, x| {
                let e = t.exp(x);
                Ok(t.sum(e))
            },
            &p,
            1e-4,
        );
        assert!(matches!(r, Err(Error::NonFiniteObjective)));
    }

    /// Every tape op against finite differences at random points.
    #[test]
    fn tape_ops_match_finite_differences() {
        let mut rng = RngStream::new(11);
        for trial in 0..100 {
            let x = DenseTensor::from_fn(&[3, 4], |_| rng.normal());
            let w = DenseTensor::from_fn(&[4, 2], |_| rng.normal());
            let bias = DenseTensor::from_fn(&[1, 4], |_| rng.normal());
            let mask: Vec<bool> = (0..8).map(|k| k % 2 == 0 || k == 7).collect();
            let r = grad_check(
                |t, v| {
                    let b = t.constant_tensor(&bias);
                    let h = t.add_row(v, b);
                    let h = t.mul_row(h, b);
                    let h = t.tanh(h);
                    let ln = t.layer_norm_rows(h);
                    let h = t.add(h, ln);
                    let wv = t.constant_tensor(&w);
                    let y = t.matmul(h, wv); // 3x2
                    let yt = t.transpose(y);
                    let z = t.matmul(yt, v); // 2x4
                    let sm = t.softmax_rows(z, Some(&mask));
                    let ls = t.log_softmax_rows(z);
                    let prod = t.mul(sm, ls);
                    let col = t.col(v, 1);
                    let scaled = t.mul_col(v, col);
                    let g = t.gather(scaled, &[2, 0, 2]);
                    let gs = t.gather_sum(v, vec![vec![0, 1], vec![2]]);
                    let cc = t.concat_cols(&[g, v]);
                    let cr = t.concat_rows(&[gs, v]);
                    let nc = t.normalize_cols(cr)?;
                    let pk = t.pick(nc, &[(0, 0), (3, 2)]);
                    let ex = t.exp(pk);
                    let sub = t.sub(cc, cc);
                    let parts = [t.sum(prod), t.sum_squares(cc), t.sum(ex), t.mean(sub)];
                    let mut acc = parts[0];
                    for &p in &parts[1..] {
                        acc = t.add(acc, p);
                    }
                    Ok(t.scale(acc, 0.5))
                },
                &x,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "trial {trial}: {} at {}", r.max_rel_error, r.worst_coord);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_distribution(xs in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let p = softmax(&xs).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn softmax_preserves_argmax(xs in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let mut sorted = xs.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
            prop_assert_eq!(argmax(&softmax(&xs).unwrap()), argmax(&xs));
        }

        #[test]
        fn softmax_shift_invariant(xs in prop::collection::vec(-20.0f64..20.0, 1..10), c in -30.0f64..30.0) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let (a, b) = (softmax(&xs).unwrap(), softmax(&shifted).unwrap());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn js_properties(a in prop::collection::vec(0.0f64..1.0, 2..8), b in prop::collection::vec(0.0f64..1.0, 2..8)) {
            let n = a.len().min(b.len());
            let norm = |v: &[f64]| {
                let s: f64 = v.iter().sum::<f64>() + 1e-9;
                v.iter().map(|x| (x + 1e-9 / n as f64) / s).collect::<Vec<_>>()
            };
            let (p, q) = (norm(&a[..n]), norm(&b[..n]));
            let pq = js_divergence(&p, &q).unwrap();
            let qp = js_divergence(&q, &p).unwrap();
            prop_assert!((pq - qp).abs() < 1e-12);
            prop_assert!((0.0..=LN_2).contains(&pq));
            prop_assert!(js_divergence(&p, &p).unwrap() < 1e-12);
        }
    }
}
