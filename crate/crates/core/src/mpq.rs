//! Parallel multi-codebook quantization with a softmax routing gate.
//!
//! Each of `M` expert encoders projects an item feature vector into its own
//! latent space and snaps to the nearest codeword of its codebook. The
//! item's token set holds one codeword index per codebook (no ordering
//! between codebooks). A dense softmax gate mixes the selected codewords
//! into `q`, which a shared decoder maps back to feature space.
//!
//! Training minimizes `recon + alpha * orth + beta * commit`. Gradients cross
//! the nearest-codeword selection with a straight-through estimator, and
//! codewords follow exponential moving averages of their assigned latents.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{
    init_fan_in, softmax, Adam, AdamConfig, DenseTensor, ParamId, ParamStore, ParamVars, Tape, Var,
};
use crate::rng::RngStream;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MPQ1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MpqConfig {
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub decoder_hidden: usize,
    /// Weight of the orthogonality regularizer.
    pub alpha: f64,
    /// Commitment weight.
    pub beta: f64,
    pub ema_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MpqConfig {
    fn default() -> Self {
        Self {
            num_codebooks: 4,
            codebook_size: 16,
            feature_dim: 32,
            latent_dim: 8,
            decoder_hidden: 32,
            alpha: 0.001,
            beta: 0.25,
            ema_decay: 0.99,
            epochs: 60,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

impl MpqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_codebooks == 0 {
            return Err(Error::config("num_codebooks must be >= 1"));
        }
        if self.codebook_size < 2 {
            return Err(Error::config("codebook_size must be >= 2"));
        }
        if self.feature_dim == 0 || self.latent_dim == 0 || self.decoder_hidden == 0 {
            return Err(Error::config("dimensions must be positive"));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::config("loss weights must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Codewords of one codebook, stored row-major (`size x dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub index: usize,
    dim: usize,
    words: Vec<f64>,
}

impl Codebook {
    pub fn new(index: usize, codewords: &[Vec<f64>]) -> Result<Self> {
        let dim = codewords.first().map_or(0, Vec::len);
        if codewords.iter().any(|w| w.len() != dim) {
            return Err(Error::shape("codewords differ in length"));
        }
        let words: Vec<f64> = codewords.concat();
        if words.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValues);
        }
        Ok(Self { index, dim, words })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.words.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn word(&self, j: usize) -> &[f64] {
        &self.words[j * self.dim..(j + 1) * self.dim]
    }

    fn word_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.words[j * self.dim..(j + 1) * self.dim]
    }

    fn to_tensor(&self) -> DenseTensor {
        DenseTensor::matrix(self.len(), self.dim, self.words.clone()).expect("codebook is finite")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest codeword by L2 distance, ties to the lowest index. Returns the
/// index and the (non-squared) distance.
pub fn quantize_nearest(latent: &[f64], codebook: &Codebook) -> Result<(usize, f64)> {
    if codebook.is_empty() {
        return Err(Error::EmptyCodebook);
    }
    if latent.len() != codebook.dim() {
        return Err(Error::shape(format!(
            "latent dim {} vs codeword dim {}",
            latent.len(),
            codebook.dim()
        )));
    }
    let mut best = (0, f64::INFINITY);
    for j in 0..codebook.len() {
        let d = sq_dist(latent, codebook.word(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    Ok((best.0, best.1.sqrt()))
}

/// One codeword index per codebook. Storage is indexed by codebook, so two
/// token sets built from the same pairs in any order are equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSet(Vec<usize>);

impl TokenSet {
    pub fn new(codes: Vec<usize>) -> Self {
        Self(codes)
    }

    /// Builds a set from unordered `(codebook, codeword)` pairs.
    pub fn from_pairs(pairs: &[(usize, usize)], num_codebooks: usize, codebook_size: usize) -> Result<Self> {
        let mut codes = vec![None; num_codebooks];
        for &(r, c) in pairs {
            if r >= num_codebooks || c >= codebook_size {
                return Err(Error::UnknownToken);
            }
            if codes[r].replace(c).is_some() {
                return Err(Error::shape(format!("codebook {r} appears twice")));
            }
        }
        codes
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .map(Self)
            .ok_or_else(|| Error::shape("token set must cover every codebook"))
    }

    pub fn num_codebooks(&self) -> usize {
        self.0.len()
    }

    pub fn code(&self, codebook: usize) -> usize {
        self.0[codebook]
    }

    pub fn codes(&self) -> &[usize] {
        &self.0
    }

    /// `(codebook, codeword)` pairs in codebook order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.0.iter().copied().enumerate().collect()
    }

    pub fn contains(&self, codebook: usize, code: usize) -> bool {
        self.0.get(codebook) == Some(&code)
    }

    /// Number of codebooks on which both sets agree.
    pub fn shared(&self, other: &TokenSet) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a == b).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedItem {
    pub tokens: TokenSet,
    pub gates: Vec<f64>,
    /// Gate-weighted sum of the selected codewords.
    pub q: Vec<f64>,
    pub latents: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct MpqIds {
    enc_w: Vec<ParamId>,
    enc_b: Vec<ParamId>,
    gate_w: ParamId,
    gate_b: ParamId,
    dec_w1: ParamId,
    dec_b1: ParamId,
    dec_w2: ParamId,
    dec_b2: ParamId,
}

impl MpqIds {
    fn resolve(store: &ParamStore, m: usize) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing parameter {n}")))
        };
        Ok(Self {
            enc_w: (0..m).map(|r| get(&format!("enc{r}.w"))).collect::<Result<_>>()?,
            enc_b: (0..m).map(|r| get(&format!("enc{r}.b"))).collect::<Result<_>>()?,
            gate_w: get("gate.w")?,
            gate_b: get("gate.b")?,
            dec_w1: get("dec.w1")?,
            dec_b1: get("dec.b1")?,
            dec_w2: get("dec.w2")?,
            dec_b2: get("dec.b2")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MpqModel {
    pub config: MpqConfig,
    pub params: ParamStore,
    pub codebooks: Vec<Codebook>,
    ids: MpqIds,
}

fn linear(x: &[f64], w: &DenseTensor, b: &DenseTensor) -> Vec<f64> {
    let cols = w.cols();
    let mut out = b.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wv;
        }
    }
    debug_assert_eq!(out.len(), cols);
    out
}

fn random_unit(dim: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl MpqModel {
    /// Random initialization; codebooks start as random unit vectors.
    pub fn new(config: MpqConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let (m, f, l, h) = (
            config.num_codebooks,
            config.feature_dim,
            config.latent_dim,
            config.decoder_hidden,
        );
        let mut store = ParamStore::new();
        for r in 0..m {
            store.add(&format!("enc{r}.w"), &format!("enc{r}"), init_fan_in(f, l, rng), true);
            store.add(&format!("enc{r}.b"), &format!("enc{r}"), DenseTensor::zeros(&[1, l]), true);
        }
        store.add("gate.w", "gate", DenseTensor::zeros(&[f, m]), true);
        store.add("gate.b", "gate", DenseTensor::zeros(&[1, m]), true);
        store.add("dec.w1", "decoder", init_fan_in(l, h, rng), true);
        store.add("dec.b1", "decoder", DenseTensor::zeros(&[1, h]), true);
        store.add("dec.w2", "decoder", init_fan_in(h, f, rng), true);
        store.add("dec.b2", "decoder", DenseTensor::zeros(&[1, f]), true);
        let codebooks = (0..m)
            .map(|r| {
                let words: Vec<Vec<f64>> = (0..config.codebook_size).map(|_| random_unit(l, rng)).collect();
                Codebook::new(r, &words)
            })
            .collect::<Result<_>>()?;
        let ids = MpqIds::resolve(&store, m)?;
        Ok(Self {
            config,
            params: store,
            codebooks,
            ids,
        })
    }

    pub fn num_codebooks(&self) -> usize {
        self.config.num_codebooks
    }

    pub fn projections(&self) -> Vec<DenseTensor> {
        self.ids.enc_w.iter().map(|&id| self.params.get(id).clone()).collect()
    }

    pub fn latent(&self, features: &[f64], r: usize) -> Vec<f64> {
        linear(features, self.params.get(self.ids.enc_w[r]), self.params.get(self.ids.enc_b[r]))
    }

    pub fn gates(&self, features: &[f64]) -> Vec<f64> {
        let logits = linear(features, self.params.get(self.ids.gate_w), self.params.get(self.ids.gate_b));
        softmax(&logits).expect("finite gate logits")
    }

    /// Shared decoder: `tanh(q W1 + b1) W2 + b2`.
    pub fn decode(&self, q: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = linear(q, self.params.get(self.ids.dec_w1), self.params.get(self.ids.dec_b1))
            .into_iter()
            .map(f64::tanh)
            .collect();
        linear(&h, self.params.get(self.ids.dec_w2), self.params.get(self.ids.dec_b2))
    }

    /// `q = sum_r gates[r] * codebook_r[tokens[r]]`.
    pub fn aggregate(&self, tokens: &TokenSet, gates: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; self.config.latent_dim];
        for (r, (&c, &g)) in tokens.codes().iter().zip(gates).enumerate() {
            for (qv, &z) in q.iter_mut().zip(self.codebooks[r].word(c)) {
                *qv += g * z;
            }
        }
        q
    }

    pub fn encode_item(&self, features: &[f64]) -> Result<EncodedItem> {
        if features.len() != self.config.feature_dim {
            return Err(Error::shape(format!(
                "feature dim {} vs model {}",
                features.len(),
                self.config.feature_dim
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFeatures);
        }
        let latents: Vec<Vec<f64>> = (0..self.num_codebooks()).map(|r| self.latent(features, r)).collect();
        let codes = latents
            .iter()
            .zip(&self.codebooks)
            .map(|(e, cb)| quantize_nearest(e, cb).map(|(j, _)| j))
            .collect::<Result<Vec<_>>>()?;
        let tokens = TokenSet::new(codes);
        let gates = self.gates(features);
        let q = self.aggregate(&tokens, &gates);
        Ok(EncodedItem {
            tokens,
            gates,
            q,
            latents,
        })
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut store = self.params.clone();
        for cb in &self.codebooks {
            store.add(&format!("codebook{}", cb.index), "codebook", cb.to_tensor(), false);
        }
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        checkpoint::encode(CHECKPOINT_MAGIC, &meta, &store)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = checkpoint::decode(bytes, CHECKPOINT_MAGIC)?;
        let config: MpqConfig = serde_json::from_str(&ck.meta)?;
        config.validate()?;
        let mut params = Vec::new();
        let mut codebooks = Vec::new();
        for p in ck.params.params() {
            if p.layer == "codebook" {
                let words: Vec<Vec<f64>> = (0..p.value.rows()).map(|i| p.value.row(i).to_vec()).collect();
                codebooks.push(Codebook::new(codebooks.len(), &words)?);
            } else {
                params.push(p.clone());
            }
        }
        if codebooks.len() != config.num_codebooks {
            return Err(Error::IncompatibleCheckpoint("codebook count mismatch".into()));
        }
        let params = ParamStore::from_params(params);
        let ids = MpqIds::resolve(&params, config.num_codebooks)?;
        Ok(Self {
            config,
            params,
            codebooks,
            ids,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

/// `||features - decoder(q)||^2`.
pub fn recon_loss(features: &[f64], q: &[f64], decoder: impl Fn(&[f64]) -> Vec<f64>) -> Result<f64> {
    let out = decoder(q);
    if out.len() != features.len() {
        return Err(Error::DecoderShape);
    }
    Ok(sq_dist(features, &out))
}

/// `||Wn^T Wn - I||_F^2` where `Wn` is the column-normalized concatenation
/// of the projection matrices.
pub fn orth_loss(projections: &[DenseTensor]) -> Result<f64> {
    let first = projections.first().ok_or_else(|| Error::shape("no projections"))?;
    let rows = first.rows();
    if projections.iter().any(|w| w.shape() != first.shape()) {
        return Err(Error::shape("projection shapes differ"));
    }
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for w in projections {
        for j in 0..w.cols() {
            let col: Vec<f64> = (0..rows).map(|i| w.get2(i, j)).collect();
            let n = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n <= f64::MIN_POSITIVE {
                return Err(Error::DegenerateProjection);
            }
            cols.push(col.into_iter().map(|x| x / n).collect());
        }
    }
    let mut loss = 0.0;
    for (a, ca) in cols.iter().enumerate() {
        for (b, cb) in cols.iter().enumerate() {
            let dot: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            loss += (dot - target) * (dot - target);
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub recon: f64,
    pub orth: f64,
    pub total: f64,
}

/// Mean reconstruction loss over `items` plus `alpha` times the
/// orthogonality loss.
pub fn total_loss(items: &[Vec<f64>], model: &MpqModel, alpha: f64) -> Result<LossParts> {
    if alpha < 0.0 {
        return Err(Error::config("alpha must be >= 0"));
    }
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut recon = 0.0;
    for v in items {
        let enc = model.encode_item(v)?;
        recon += recon_loss(v, &enc.q, |q| model.decode(q))?;
    }
    recon /= items.len() as f64;
    let orth = orth_loss(&model.projections())?;
    Ok(LossParts {
        recon,
        orth,
        total: recon + alpha * orth,
    })
}

/// Codeword choice and straight-through offsets for a batch, fixed while a
/// loss graph is built.
#[derive(Debug, Clone)]
pub struct Selection {
    /// `codes[r][b]`: selected codeword of codebook r for item b.
    pub codes: Vec<Vec<usize>>,
    /// `offsets[r]`: batch x latent values of `z_selected - e`.
    pub offsets: Vec<Vec<f64>>,
}

impl Selection {
    pub fn compute(model: &MpqModel, batch: &[Vec<f64>]) -> Result<Self> {
        let m = model.num_codebooks();
        let mut codes = vec![Vec::with_capacity(batch.len()); m];
        let mut offsets = vec![Vec::new(); m];
        for v in batch {
            for r in 0..m {
                let e = model.latent(v, r);
                let (j, _) = quantize_nearest(&e, &model.codebooks[r])?;
                codes[r].push(j);
                offsets[r].extend(model.codebooks[r].word(j).iter().zip(&e).map(|(z, x)| z - x));
            }
        }
        Ok(Self { codes, offsets })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub recon: Var,
    pub orth: Var,
    pub commit: Var,
    /// `recon + alpha * orth`.
    pub total: Var,
    /// `total + beta * commit`, the training objective.
    pub objective: Var,
    /// Batch latents per codebook are not exposed; `q` is.
    pub q: Var,
}

/// Builds the batch loss on `tape` using parameters bound in `pv`.
pub fn loss_graph(
    tape: &mut Tape,
    model: &MpqModel,
    pv: &ParamVars,
    batch: &[Vec<f64>],
    sel: &Selection,
) -> Result<LossGraph> {
    let cfg = &model.config;
    let (m, l, n) = (cfg.num_codebooks, cfg.latent_dim, batch.len());
    let ids = &model.ids;
    let v = tape.constant(n, cfg.feature_dim, batch.concat());

    let gate_logits = {
        let z = tape.matmul(v, pv.var(ids.gate_w));
        tape.add_row(z, pv.var(ids.gate_b))
    };
    let gates = tape.softmax_rows(gate_logits, None);

    let mut q = None;
    let mut commit_terms = Vec::with_capacity(m);
    for r in 0..m {
        let e = {
            let z = tape.matmul(v, pv.var(ids.enc_w[r]));
            tape.add_row(z, pv.var(ids.enc_b[r]))
        };
        let off = tape.constant(n, l, sel.offsets[r].clone());
        let st = tape.add(e, off);
        let g = tape.col(gates, r);
        let weighted = tape.mul_col(st, g);
        q = Some(match q {
            None => weighted,
            Some(acc) => tape.add(acc, weighted),
        });
        let zsel: Vec<f64> = sel.codes[r]
            .iter()
            .flat_map(|&j| model.codebooks[r].word(j).iter().copied())
            .collect();
        let zc = tape.constant(n, l, zsel);
        let diff = tape.sub(e, zc);
        commit_terms.push(tape.sum_squares(diff));
    }
    let q = q.expect("at least one codebook");

    let h = {
        let z = tape.matmul(q, pv.var(ids.dec_w1));
        let z = tape.add_row(z, pv.var(ids.dec_b1));
        tape.tanh(z)
    };
    let out = {
        let z = tape.matmul(h, pv.var(ids.dec_w2));
        tape.add_row(z, pv.var(ids.dec_b2))
    };
    let resid = tape.sub(v, out);
    let recon_sum = tape.sum_squares(resid);
    let recon = tape.scale(recon_sum, 1.0 / n as f64);

    let ws: Vec<Var> = ids.enc_w.iter().map(|&id| pv.var(id)).collect();
    let cat = tape.concat_cols(&ws);
    let wn = tape.normalize_cols(cat)?;
    let wt = tape.transpose(wn);
    let gram = tape.matmul(wt, wn);
    let k = m * l;
    let eye = tape.constant(k, k, (0..k * k).map(|i| if i / k == i % k { 1.0 } else { 0.0 }).collect());
    let gdiff = tape.sub(gram, eye);
    let orth = tape.sum_squares(gdiff);

    let mut commit = commit_terms[0];
    for &c in &commit_terms[1..] {
        commit = tape.add(commit, c);
    }
    let commit = tape.scale(commit, 1.0 / n as f64);

    let a_orth = tape.scale(orth, cfg.alpha);
    let total = tape.add(recon, a_orth);
    let b_commit = tape.scale(commit, cfg.beta);
    let objective = tape.add(total, b_commit);
    Ok(LossGraph {
        recon,
        orth,
        commit,
        total,
        objective,
        q,
    })
}

fn kmeans(points: &[Vec<f64>], k: usize, dim: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut distinct: Vec<Vec<f64>> = Vec::new();
    for p in points {
        if !distinct.iter().any(|d| d == p) {
            distinct.push(p.clone());
        }
    }
    if distinct.len() <= k {
        let mut centers = distinct;
        while centers.len() < k {
            centers.push(random_unit(dim, rng));
        }
        return centers;
    }
    // k-means++ seeding.
    let mut centers = vec![distinct[rng.below(distinct.len())].clone()];
    while centers.len() < k {
        let weights: Vec<f64> = distinct
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        centers.push(distinct[rng.categorical(&weights)].clone());
    }
    for _ in 0..20 {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let j = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .unwrap();
            counts[j] += 1;
            for (s, x) in sums[j].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    centers
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub recon: f64,
    pub orth: f64,
    pub total: f64,
    pub dead_reseeded: usize,
}

#[derive(Debug, Clone)]
pub struct MpqTrainReport {
    pub initial: LossParts,
    pub curve: Vec<EpochLoss>,
    /// Epoch whose parameters were kept (0 = initialization).
    pub best_epoch: usize,
    pub best: LossParts,
}

struct EmaState {
    counts: Vec<Vec<f64>>,
    sums: Vec<Vec<Vec<f64>>>,
}

/// Trains a tokenizer on `items` (feature vectors).
pub fn train_mpq(items: &[Vec<f64>], config: &MpqConfig) -> Result<(MpqModel, MpqTrainReport)> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if items.iter().any(|v| v.len() != config.feature_dim) {
        return Err(Error::shape("feature vectors do not match feature_dim"));
    }
    if items.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidFeatures);
    }
    let root = RngStream::new(config.seed);
    let mut model = MpqModel::new(config.clone(), &mut root.derive_named("mpq-init"))?;
    let mut rng = root.derive_named("mpq-train");
    let (m, d, l) = (config.num_codebooks, config.codebook_size, config.latent_dim);

    let mut order: Vec<usize> = (0..items.len()).collect();
    rng.shuffle(&mut order);
    let first: Vec<&Vec<f64>> = order.iter().take(config.batch_size.max(d)).map(|&i| &items[i]).collect();
    for r in 0..m {
        let latents: Vec<Vec<f64>> = first.iter().map(|v| model.latent(v, r)).collect();
        let centers = kmeans(&latents, d, l, &mut rng);
        model.codebooks[r] = Codebook::new(r, &centers)?;
    }
    let mut ema = EmaState {
        counts: vec![vec![1.0; d]; m],
        sums: model
            .codebooks
            .iter()
            .map(|cb| (0..d).map(|j| cb.word(j).to_vec()).collect())
            .collect(),
    };

    let initial = total_loss(items, &model, config.alpha)?;
    let mut best = (0, initial, model.clone());
    let mut curve = Vec::with_capacity(config.epochs);
    let mut opt = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &model.params,
    );

    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut usage = vec![vec![0usize; d]; m];
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| items[i].clone()).collect();
            let sel = Selection::compute(&model, &batch)?;
            let mut tape = Tape::new();
            let pv = tape.bind(&model.params);
            let g = loss_graph(&mut tape, &model, &pv, &batch, &sel)?;
            if !tape.scalar(g.objective).is_finite() {
                return Err(Error::MpqDiverged);
            }
            let grads = tape.backward(g.objective).params(&model.params, &pv);

            // EMA codeword update from the pre-step latents.
            let decay = config.ema_decay;
            for r in 0..m {
                let mut cnt = vec![0.0; d];
                let mut sum = vec![vec![0.0; l]; d];
                for (b, v) in batch.iter().enumerate() {
                    let j = sel.codes[r][b];
                    usage[r][j] += 1;
                    cnt[j] += 1.0;
                    for (s, x) in sum[j].iter_mut().zip(model.latent(v, r)) {
                        *s += x;
                    }
                }
                for j in 0..d {
                    ema.counts[r][j] = decay * ema.counts[r][j] + (1.0 - decay) * cnt[j];
                    for k in 0..l {
                        ema.sums[r][j][k] = decay * ema.sums[r][j][k] + (1.0 - decay) * sum[j][k];
                    }
                    let c = ema.counts[r][j].max(1e-5);
                    let w = model.codebooks[r].word_mut(j);
                    for k in 0..l {
                        w[k] = ema.sums[r][j][k] / c;
                    }
                }
            }
            opt.step(&mut model.params, &grads);
        }

        let mut dead = 0;
        for r in 0..m {
            for j in 0..d {
                if usage[r][j] == 0 {
                    let e = model.latent(&items[rng.below(items.len())], r);
                    model.codebooks[r].word_mut(j).copy_from_slice(&e);
                    ema.counts[r][j] = 1.0;
                    ema.sums[r][j] = e;
                    dead += 1;
                }
            }
        }

        let parts = total_loss(items, &model, config.alpha)?;
        if !parts.total.is_finite() {
            return Err(Error::MpqDiverged);
        }
        curve.push(EpochLoss {
            epoch,
            recon: parts.recon,
            orth: parts.orth,
            total: parts.total,
            dead_reseeded: dead,
        });
        if parts.total < best.1.total {
            best = (epoch, parts, model.clone());
        }
    }

    let (best_epoch, best_parts, model) = best;
    Ok((
        model,
        MpqTrainReport {
            initial,
            curve,
            best_epoch,
            best: best_parts,
        },
    ))
}

/// Token-map record as written to JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub item: String,
    /// `[codebook, codeword]` pairs.
    pub tokens: Vec<[usize; 2]>,
    pub gates: Vec<f64>,
}

pub type TokenMap = BTreeMap<String, (TokenSet, Vec<f64>)>;

/// Encodes every item and returns the map `item id -> (tokens, gates)`.
pub fn tokenize_items<'a>(
    model: &MpqModel,
    items: impl IntoIterator<Item = (&'a str, &'a [f64])>,
) -> Result<TokenMap> {
    let mut map = TokenMap::new();
    for (id, v) in items {
        let enc = model.encode_item(v)?;
        map.insert(id.to_string(), (enc.tokens, enc.gates));
    }
    Ok(map)
}

pub fn write_token_map(map: &TokenMap, mut out: impl Write) -> Result<()> {
    for (item, (tokens, gates)) in map {
        let rec = TokenRecord {
            item: item.clone(),
            tokens: tokens.pairs().into_iter().map(|(r, c)| [r, c]).collect(),
            gates: gates.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_token_map(input: impl std::io::Read, codebook_size: Option<usize>) -> Result<TokenMap> {
    let mut map = TokenMap::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TokenRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: i + 1,
            message: e.to_string(),
        })?;
        let pairs: Vec<(usize, usize)> = rec.tokens.iter().map(|p| (p[0], p[1])).collect();
        let m = rec.gates.len();
        let tokens = TokenSet::from_pairs(&pairs, m, codebook_size.unwrap_or(usize::MAX)).map_err(|e| {
            Error::Schema {
                line: i + 1,
                message: e.to_string(),
            }
        })?;
        if map.insert(rec.item.clone(), (tokens, rec.gates)).is_some() {
            return Err(Error::Schema {
                line: i + 1,
                message: format!("duplicate item {}", rec.item),
            });
        }
    }
    Ok(map)
}

/// Encodes `items` and writes the token map to `path`.
pub fn export_tokens(model: &MpqModel, items: &[(String, Vec<f64>)], path: &Path) -> Result<TokenMap> {
    let map = tokenize_items(model, items.iter().map(|(id, v)| (id.as_str(), v.as_slice())))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_token_map(&map, &mut f)?;
    f.flush()?;
    Ok(map)
}

pub fn import_tokens(path: &Path) -> Result<TokenMap> {
    read_token_map(std::fs::File::open(path)?, None)
}
