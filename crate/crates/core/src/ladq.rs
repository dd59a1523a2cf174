//! Layer-adaptive simulated precision.
//!
//! A controller periodically scores each parameter layer by a squared
//! gradient curvature proxy, then greedily lowers the precision of the
//! layers that are cheapest to degrade per unit of latency until the
//! estimated cost fits the budget. Low precision is simulated by rounding
//! the forward weights; gradients and optimizer state stay in f64.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use half::bf16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseTensor, ParamStore, ParamVars, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32-full")]
    F32Full,
    #[serde(rename = "bf16-sim")]
    Bf16Sim,
    #[serde(rename = "fp8-sim")]
    Fp8Sim,
}

impl Precision {
    pub const ALL: [Precision; 3] = [Precision::F32Full, Precision::Bf16Sim, Precision::Fp8Sim];

    pub fn tag(self) -> &'static str {
        match self {
            Precision::F32Full => "f32-full",
            Precision::Bf16Sim => "bf16-sim",
            Precision::Fp8Sim => "fp8-sim",
        }
    }

    fn lower(self) -> Option<Precision> {
        match self {
            Precision::F32Full => Some(Precision::Bf16Sim),
            Precision::Bf16Sim => Some(Precision::Fp8Sim),
            Precision::Fp8Sim => None,
        }
    }
}

/// Largest finite e4m3 magnitude.
pub const FP8_MAX: f64 = 448.0;
/// Smallest normal e4m3 magnitude.
pub const FP8_MIN_NORMAL: f64 = 0.015625;
/// Relative rounding bound for normal e4m3 values (3 mantissa bits).
pub const FP8_UNIT_ROUNDOFF: f64 = 0.0625;

/// Round-to-nearest-even onto the e4m3 grid, saturating at +-448.
pub fn fp8_e4m3(x: f64) -> f64 {
    if x == 0.0 || x.is_nan() {
        return 0.0;
    }
    let a = x.abs();
    if a >= FP8_MAX {
        return FP8_MAX.copysign(x);
    }
    let exp = if a.is_normal() {
        ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023
    } else {
        -1023
    };
    let quantum = 2f64.powi(exp.max(-6) - 3);
    let r = ((a / quantum).round_ties_even() * quantum).min(FP8_MAX);
    r.copysign(x)
}

/// Round-to-nearest-even bfloat16, saturating at the largest finite value.
pub fn bf16_round(x: f64) -> f64 {
    let y = bf16::from_f64(x);
    if y.is_infinite() {
        bf16::MAX.to_f64().copysign(x)
    } else if y.is_nan() {
        0.0
    } else {
        y.to_f64()
    }
}

pub fn quantize_value(x: f64, p: Precision) -> f64 {
    match p {
        Precision::F32Full => x,
        Precision::Bf16Sim => bf16_round(x),
        Precision::Fp8Sim => fp8_e4m3(x),
    }
}

pub fn quantize_sim(t: &DenseTensor, p: Precision) -> DenseTensor {
    if p == Precision::F32Full {
        return t.clone();
    }
    let mut out = t.clone();
    for v in out.data_mut() {
        *v = quantize_value(*v, p);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub layer: String,
    pub score: f64,
    /// Share of the total parameter count.
    pub latency: f64,
    pub last_probed: usize,
    /// No gradient reached this layer.
    pub zero_grad: bool,
}

/// Per-layer `mean(g^2) * mean(w^2)` from one gradient evaluation.
pub fn sensitivity_from_grads(store: &ParamStore, grads: &[Vec<f64>], step: usize) -> Vec<LayerSensitivity> {
    let total = store.num_values().max(1) as f64;
    store
        .layers()
        .into_iter()
        .map(|layer| {
            let (mut g2, mut w2, mut n, mut count) = (0.0, 0.0, 0usize, 0usize);
            for (p, g) in store.params().iter().zip(grads) {
                if p.layer != layer {
                    continue;
                }
                count += p.value.len();
                if !p.trainable {
                    continue;
                }
                g2 += g.iter().map(|x| x * x).sum::<f64>();
                w2 += p.value.data().iter().map(|x| x * x).sum::<f64>();
                n += p.value.len();
            }
            let score = if n == 0 { 0.0 } else { (g2 / n as f64) * (w2 / n as f64) };
            LayerSensitivity {
                layer,
                score,
                latency: count as f64 / total,
                last_probed: step,
                zero_grad: g2 == 0.0,
            }
        })
        .collect()
}

/// Runs `loss` once and scores every layer of `store`.
pub fn probe_sensitivity(
    store: &ParamStore,
    loss: impl Fn(&mut Tape, &ParamVars) -> Result<Var>,
    step: usize,
) -> Result<Vec<LayerSensitivity>> {
    if !store.params().iter().any(|p| p.trainable) {
        return Err(Error::config("model has no trainable layer"));
    }
    let mut tape = Tape::new();
    let pv = tape.bind(store);
    let l = loss(&mut tape, &pv)?;
    if !tape.scalar(l).is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let grads = tape.backward(l).params(store, &pv);
    Ok(sensitivity_from_grads(store, &grads, step))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub f32: f64,
    pub bf16: f64,
    pub fp8: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            f32: 1.0,
            bf16: 0.6,
            fp8: 0.4,
        }
    }
}

impl CostModel {
    pub fn factor(&self, p: Precision) -> f64 {
        match p {
            Precision::F32Full => self.f32,
            Precision::Bf16Sim => self.bf16,
            Precision::Fp8Sim => self.fp8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPlan {
    pub tags: BTreeMap<String, Precision>,
    /// Estimated cost relative to all-f32.
    pub est_cost: f64,
    pub speedup: f64,
    pub budget_met: bool,
}

impl PrecisionPlan {
    pub fn all_full(layers: &[String]) -> Self {
        Self {
            tags: layers.iter().map(|l| (l.clone(), Precision::F32Full)).collect(),
            est_cost: 1.0,
            speedup: 1.0,
            budget_met: true,
        }
    }

    pub fn get(&self, layer: &str) -> Precision {
        self.tags.get(layer).copied().unwrap_or(Precision::F32Full)
    }

    pub fn is_all_full(&self) -> bool {
        self.tags.values().all(|&p| p == Precision::F32Full)
    }

    /// `"budget-unmet"` when the budget could not be reached.
    pub fn flag(&self) -> Option<&'static str> {
        (!self.budget_met).then_some("budget-unmet")
    }
}

pub fn plan_cost(sens: &[LayerSensitivity], tags: &BTreeMap<String, Precision>, costs: &CostModel) -> f64 {
    sens.iter()
        .map(|s| s.latency * costs.factor(tags.get(&s.layer).copied().unwrap_or(Precision::F32Full)))
        .sum()
}

/// Greedy assignment: layers in ascending sensitivity/latency order are
/// lowered one precision level at a time, each layer as far as fp8 before
/// the next one is touched, until the cost fits `budget`.
pub fn assign_precision(sens: &[LayerSensitivity], budget: f64, costs: &CostModel) -> Result<PrecisionPlan> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::config("budget must be in (0, 1]"));
    }
    let mut order: Vec<&LayerSensitivity> = sens.iter().collect();
    let ratio = |s: &LayerSensitivity| if s.latency > 0.0 { s.score / s.latency } else { f64::INFINITY };
    order.sort_by(|a, b| ratio(a).total_cmp(&ratio(b)).then_with(|| a.layer.cmp(&b.layer)));
    let mut tags: BTreeMap<String, Precision> = sens.iter().map(|s| (s.layer.clone(), Precision::F32Full)).collect();
    let tol = 1e-12;
    let mut cost = plan_cost(sens, &tags, costs);
    'outer: for s in order {
        while cost > budget + tol {
            let cur = tags[&s.layer];
            match cur.lower() {
                Some(next) => {
                    tags.insert(s.layer.clone(), next);
                    cost = plan_cost(sens, &tags, costs);
                }
                None => continue 'outer,
            }
        }
        break;
    }
    Ok(PrecisionPlan {
        tags,
        est_cost: cost,
        speedup: if cost > 0.0 { 1.0 / cost } else { f64::INFINITY },
        budget_met: cost <= budget + tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LadqConfig {
    pub budget: f64,
    pub period: usize,
    pub costs: CostModel,
}

impl Default for LadqConfig {
    fn default() -> Self {
        Self {
            budget: 1.0,
            period: 200,
            costs: CostModel::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub step: usize,
    pub plan: BTreeMap<String, Precision>,
    pub est_cost: f64,
}

/// Holds the active plan and swaps in rounded weights at bind time.
#[derive(Debug, Clone)]
pub struct LadqController {
    config: LadqConfig,
    plan: Option<PrecisionPlan>,
    log: Vec<PlanRecord>,
}

impl LadqController {
    pub fn new(config: LadqConfig) -> Self {
        Self {
            config,
            plan: None,
            log: Vec::new(),
        }
    }

    pub fn plan(&self) -> Option<&PrecisionPlan> {
        self.plan.as_ref()
    }

    pub fn set_plan(&mut self, plan: PrecisionPlan) {
        self.plan = Some(plan);
    }

    /// Binds `store`, rounding the forward values of downgraded layers.
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> ParamVars {
        match &self.plan {
            Some(plan) if !plan.is_all_full() => tape.bind_with(store, |i| {
                let p = store.param(i);
                match plan.get(&p.layer) {
                    Precision::F32Full => None,
                    prec => Some(Arc::new(quantize_sim(&p.value, prec).into_vec())),
                }
            }),
            _ => tape.bind(store),
        }
    }

    /// Re-plans from this step's gradients every `period` steps.
    pub fn observe(&mut self, step: usize, store: &ParamStore, grads: &[Vec<f64>]) {
        if self.config.period == 0 || step % self.config.period != 0 {
            return;
        }
        let sens = sensitivity_from_grads(store, grads, step);
        let plan = assign_precision(&sens, self.config.budget, &self.config.costs)
            .unwrap_or_else(|_| PrecisionPlan::all_full(&store.layers()));
        self.log.push(PlanRecord {
            step,
            plan: plan.tags.clone(),
            est_cost: plan.est_cost,
        });
        self.plan = Some(plan);
    }

    pub fn log(&self) -> &[PlanRecord] {
        &self.log
    }

    pub fn into_log(self) -> Vec<PlanRecord> {
        self.log
    }
}

pub fn write_plan_log(records: &[PlanRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
