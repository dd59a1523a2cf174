//! Encoder-decoder model over token-set sequences.
//!
//! The encoder reads one pooled vector per history item (sum of its token
//! and codebook embeddings plus a recency position embedding). The decoder
//! starts from a BOS vector and consumes the generated `(codebook, token)`
//! prefix under a causal mask; its last hidden row feeds `M` per-codebook
//! token heads and one category head. Pre-norm residual blocks throughout.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::ladq::{LadqConfig, LadqController, PlanRecord};
use crate::mpq::TokenSet;
use crate::numerics::{
    init_fan_in, init_normal, ones, softmax, Adam, AdamConfig, DenseTensor, ParamId, ParamStore, ParamVars,
    Tape, Var,
};
use crate::rng::RngStream;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SEQ1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SeqConfig {
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub num_categories: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_context: usize,
    /// Weight of the auxiliary category loss.
    pub lambda_c: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Training targets taken from the end of each user sequence (0 = all).
    pub targets_per_user: usize,
    pub seed: u64,
}

impl Default for SeqConfig {
    fn default() -> Self {
        Self {
            num_codebooks: 4,
            codebook_size: 16,
            num_categories: 8,
            embed_dim: 32,
            hidden_dim: 64,
            enc_layers: 1,
            dec_layers: 2,
            max_context: 50,
            lambda_c: 0.5,
            epochs: 10,
            batch_size: 32,
            lr: 3e-3,
            targets_per_user: 0,
            seed: 0,
        }
    }
}

impl SeqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_codebooks == 0 || self.codebook_size < 2 {
            return Err(Error::config("need num_codebooks >= 1 and codebook_size >= 2"));
        }
        if self.num_categories < 2 {
            return Err(Error::config("num_categories must be >= 2"));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.max_context == 0 {
            return Err(Error::config("dimensions must be positive"));
        }
        if self.lambda_c < 0.0 {
            return Err(Error::config("lambda_c must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Ordered category labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryVocab {
    labels: Vec<String>,
}

impl CategoryVocab {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::config("category vocabulary needs at least 2 labels"));
        }
        let mut sorted = labels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != labels.len() {
            return Err(Error::config("duplicate category label"));
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqItem {
    pub item: String,
    pub tokens: TokenSet,
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: String,
    pub items: Vec<SeqItem>,
}

/// One teacher-forcing example: history token sets and the next item.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub history: Vec<TokenSet>,
    pub target: TokenSet,
    pub category: usize,
}

/// Builds next-item examples from each sequence, keeping the last
/// `per_user` targets (0 keeps all).
pub fn make_examples(corpus: &[UserSequence], per_user: usize) -> Vec<Example> {
    let mut out = Vec::new();
    for seq in corpus {
        let n = seq.items.len();
        if n < 2 {
            continue;
        }
        let first = if per_user == 0 { 1 } else { n.saturating_sub(per_user).max(1) };
        for t in first..n {
            out.push(Example {
                history: seq.items[..t].iter().map(|i| i.tokens.clone()).collect(),
                target: seq.items[t].tokens.clone(),
                category: seq.items[t].category,
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
struct NormIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct AttnIds {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Debug, Clone)]
struct FfIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: NormIds,
    attn: AttnIds,
    ln2: NormIds,
    ff: FfIds,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: NormIds,
    self_attn: AttnIds,
    ln2: NormIds,
    cross: AttnIds,
    ln3: NormIds,
    ff: FfIds,
}

#[derive(Debug, Clone)]
struct SeqIds {
    tok: ParamId,
    cb: ParamId,
    pos: ParamId,
    bos: ParamId,
    enc: Vec<EncLayer>,
    enc_norm: NormIds,
    dec: Vec<DecLayer>,
    dec_norm: NormIds,
    head_w: Vec<ParamId>,
    head_b: Vec<ParamId>,
    cat_w: ParamId,
    cat_b: ParamId,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut RngStream,
    e: usize,
    h: usize,
}

impl Builder<'_> {
    fn norm(&mut self, name: &str, layer: &str) -> NormIds {
        NormIds {
            g: self.store.add(&format!("{name}.g"), layer, ones(1, self.e), true),
            b: self.store.add(&format!("{name}.b"), layer, DenseTensor::zeros(&[1, self.e]), true),
        }
    }

    fn attn(&mut self, name: &str, layer: &str) -> AttnIds {
        let mut w = |s: &str| {
            let t = init_fan_in(self.e, self.e, self.rng);
            self.store.add(&format!("{name}.{s}"), layer, t, true)
        };
        AttnIds {
            q: w("q"),
            k: w("k"),
            v: w("v"),
            o: w("o"),
        }
    }

    fn ff(&mut self, name: &str, layer: &str) -> FfIds {
        let (e, h) = (self.e, self.h);
        FfIds {
            w1: self.store.add(&format!("{name}.w1"), layer, init_fan_in(e, h, self.rng), true),
            b1: self.store.add(&format!("{name}.b1"), layer, DenseTensor::zeros(&[1, h]), true),
            w2: self.store.add(&format!("{name}.w2"), layer, init_fan_in(h, e, self.rng), true),
            b2: self.store.add(&format!("{name}.b2"), layer, DenseTensor::zeros(&[1, e]), true),
        }
    }
}

impl SeqIds {
    fn build(cfg: &SeqConfig, store: &mut ParamStore, rng: &mut RngStream) -> Self {
        let (m, d, e) = (cfg.num_codebooks, cfg.codebook_size, cfg.embed_dim);
        let scale = 1.0 / (e as f64).sqrt();
        let tok = store.add("tok.emb", "embed", init_normal(m * d, e, scale, rng), true);
        let cb = store.add("cb.emb", "embed", init_normal(m, e, scale, rng), true);
        let pos = store.add("pos.emb", "embed", init_normal(cfg.max_context, e, scale, rng), true);
        let bos = store.add("bos", "embed", init_normal(1, e, scale, rng), true);
        let mut b = Builder {
            store,
            rng,
            e,
            h: cfg.hidden_dim,
        };
        let enc = (0..cfg.enc_layers)
            .map(|l| {
                let layer = format!("enc{l}");
                EncLayer {
                    ln1: b.norm(&format!("{layer}.ln1"), &layer),
                    attn: b.attn(&format!("{layer}.attn"), &layer),
                    ln2: b.norm(&format!("{layer}.ln2"), &layer),
                    ff: b.ff(&format!("{layer}.ff"), &layer),
                }
            })
            .collect();
        let enc_norm = b.norm("enc.norm", "enc.norm");
        let dec = (0..cfg.dec_layers)
            .map(|l| {
                let layer = format!("dec{l}");
                DecLayer {
                    ln1: b.norm(&format!("{layer}.ln1"), &layer),
                    self_attn: b.attn(&format!("{layer}.self"), &layer),
                    ln2: b.norm(&format!("{layer}.ln2"), &layer),
                    cross: b.attn(&format!("{layer}.cross"), &layer),
                    ln3: b.norm(&format!("{layer}.ln3"), &layer),
                    ff: b.ff(&format!("{layer}.ff"), &layer),
                }
            })
            .collect();
        let dec_norm = b.norm("dec.norm", "dec.norm");
        let head_w = (0..m)
            .map(|r| store.add(&format!("head{r}.w"), "heads", DenseTensor::zeros(&[e, d]), true))
            .collect();
        let head_b = (0..m)
            .map(|r| store.add(&format!("head{r}.b"), "heads", DenseTensor::zeros(&[1, d]), true))
            .collect();
        let cat_w = store.add("cat.w", "heads", DenseTensor::zeros(&[e, cfg.num_categories]), true);
        let cat_b = store.add("cat.b", "heads", DenseTensor::zeros(&[1, cfg.num_categories]), true);
        Self {
            tok,
            cb,
            pos,
            bos,
            enc,
            enc_norm,
            dec,
            dec_norm,
            head_w,
            head_b,
            cat_w,
            cat_b,
        }
    }

    /// Rebuilds ids by name; construction order equals store order, so
    /// replaying the builder on a scratch store yields matching ids.
    fn resolve(cfg: &SeqConfig, store: &ParamStore) -> Result<Self> {
        let mut scratch = ParamStore::new();
        let ids = Self::build(cfg, &mut scratch, &mut RngStream::new(0));
        if scratch.len() != store.len() {
            return Err(Error::IncompatibleCheckpoint("parameter count mismatch".into()));
        }
        for (a, b) in scratch.params().iter().zip(store.params()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::IncompatibleCheckpoint(format!("parameter {} mismatch", b.name)));
            }
        }
        Ok(ids)
    }
}

/// Encoder output for one history.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderMemory {
    pub rows: usize,
    pub data: Arc<Vec<f64>>,
    /// History was longer than `max_context` and got cut to the most recent items.
    pub truncated: bool,
}

/// Per-step decoder output: token logits for every codebook plus the
/// category distribution, all conditioned on the same prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<Vec<f64>>,
    pub category: Vec<f64>,
}

/// Anything that can score the next decoding step for a fixed user context.
pub trait StepModel {
    fn num_codebooks(&self) -> usize;
    fn codebook_size(&self) -> usize;
    fn step(&self, prefix: &[(usize, usize)]) -> Result<StepOutput>;
}

#[derive(Debug, Clone)]
pub struct SeqModel {
    pub config: SeqConfig,
    pub params: ParamStore,
    ids: SeqIds,
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let z = tape.matmul(x, w);
    tape.add_row(z, b)
}

fn norm(tape: &mut Tape, pv: &ParamVars, ids: &NormIds, x: Var) -> Var {
    let n = tape.layer_norm_rows(x);
    let g = tape.mul_row(n, pv.var(ids.g));
    tape.add_row(g, pv.var(ids.b))
}

fn attention(tape: &mut Tape, pv: &ParamVars, ids: &AttnIds, x: Var, mem: Var, causal: bool) -> Var {
    let q = tape.matmul(x, pv.var(ids.q));
    let k = tape.matmul(mem, pv.var(ids.k));
    let v = tape.matmul(mem, pv.var(ids.v));
    let kt = tape.transpose(k);
    let s = tape.matmul(q, kt);
    let (rows, cols) = tape.shape(s);
    let s = tape.scale(s, 1.0 / (tape.shape(q).1 as f64).sqrt());
    let mask: Option<Vec<bool>> =
        causal.then(|| (0..rows * cols).map(|i| i % cols <= i / cols).collect());
    let a = tape.softmax_rows(s, mask.as_deref());
    let o = tape.matmul(a, v);
    tape.matmul(o, pv.var(ids.o))
}

fn feed_forward(tape: &mut Tape, pv: &ParamVars, ids: &FfIds, x: Var) -> Var {
    let h = linear(tape, x, pv.var(ids.w1), pv.var(ids.b1));
    let h = tape.tanh(h);
    linear(tape, h, pv.var(ids.w2), pv.var(ids.b2))
}

impl SeqModel {
    pub fn new(config: SeqConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let ids = SeqIds::build(&config, &mut params, rng);
        Ok(Self { config, params, ids })
    }

    pub fn from_params(config: SeqConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let ids = SeqIds::resolve(&config, &params)?;
        Ok(Self { config, params, ids })
    }

    pub fn num_codebooks(&self) -> usize {
        self.config.num_codebooks
    }

    fn check_tokens(&self, tokens: &TokenSet) -> Result<()> {
        if tokens.num_codebooks() != self.config.num_codebooks {
            return Err(Error::shape(format!(
                "token set has {} codebooks, model {}",
                tokens.num_codebooks(),
                self.config.num_codebooks
            )));
        }
        if tokens.codes().iter().any(|&c| c >= self.config.codebook_size) {
            return Err(Error::UnknownToken);
        }
        Ok(())
    }

    fn token_row(&self, r: usize, c: usize) -> usize {
        r * self.config.codebook_size + c
    }

    /// Sum of token embeddings plus codebook-id embeddings.
    pub fn embed_token_set(&self, tokens: &TokenSet) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let tok = self.params.get(self.ids.tok);
        let cb = self.params.get(self.ids.cb);
        let mut out = vec![0.0; self.config.embed_dim];
        for (r, c) in tokens.pairs() {
            for ((o, a), b) in out.iter_mut().zip(tok.row(self.token_row(r, c))).zip(cb.row(r)) {
                *o += a + b;
            }
        }
        Ok(out)
    }

    fn recent<'a>(&self, history: &'a [TokenSet]) -> Result<(&'a [TokenSet], bool)> {
        if history.is_empty() {
            return Err(Error::EmptySplit);
        }
        for t in history {
            self.check_tokens(t)?;
        }
        let keep = history.len().min(self.config.max_context);
        Ok((&history[history.len() - keep..], keep < history.len()))
    }

    /// Encoder graph. The most recent item gets position 0.
    pub fn encode_graph(&self, tape: &mut Tape, pv: &ParamVars, history: &[TokenSet]) -> Result<Var> {
        let (hist, _) = self.recent(history)?;
        let t = hist.len();
        let m = self.config.num_codebooks;
        let groups: Vec<Vec<usize>> = hist
            .iter()
            .map(|ts| ts.pairs().into_iter().map(|(r, c)| self.token_row(r, c)).collect())
            .collect();
        let tok = tape.gather_sum(pv.var(self.ids.tok), groups);
        let cbs = tape.gather_sum(pv.var(self.ids.cb), vec![(0..m).collect(); t]);
        let pos_idx: Vec<usize> = (0..t).map(|i| t - 1 - i).collect();
        let pos = tape.gather(pv.var(self.ids.pos), &pos_idx);
        let x = tape.add(tok, cbs);
        let mut x = tape.add(x, pos);
        for layer in &self.ids.enc {
            let n = norm(tape, pv, &layer.ln1, x);
            let a = attention(tape, pv, &layer.attn, n, n, false);
            x = tape.add(x, a);
            let n = norm(tape, pv, &layer.ln2, x);
            let f = feed_forward(tape, pv, &layer.ff, n);
            x = tape.add(x, f);
        }
        Ok(norm(tape, pv, &self.ids.enc_norm, x))
    }

    /// Decoder graph over `[BOS, prefix...]`; returns `(len+1) x E` hidden rows.
    pub fn decode_graph(&self, tape: &mut Tape, pv: &ParamVars, memory: Var, prefix: &[(usize, usize)]) -> Var {
        let bos = pv.var(self.ids.bos);
        let mut y = if prefix.is_empty() {
            bos
        } else {
            let tok = tape.gather(pv.var(self.ids.tok), &prefix.iter().map(|&(r, c)| self.token_row(r, c)).collect::<Vec<_>>());
            let cb = tape.gather(pv.var(self.ids.cb), &prefix.iter().map(|&(r, _)| r).collect::<Vec<_>>());
            let p = tape.add(tok, cb);
            tape.concat_rows(&[bos, p])
        };
        for layer in &self.ids.dec {
            let n = norm(tape, pv, &layer.ln1, y);
            let a = attention(tape, pv, &layer.self_attn, n, n, true);
            y = tape.add(y, a);
            let n = norm(tape, pv, &layer.ln2, y);
            let a = attention(tape, pv, &layer.cross, n, memory, false);
            y = tape.add(y, a);
            let n = norm(tape, pv, &layer.ln3, y);
            let f = feed_forward(tape, pv, &layer.ff, n);
            y = tape.add(y, f);
        }
        norm(tape, pv, &self.ids.dec_norm, y)
    }

    /// Token logits of codebook `r` for the given hidden rows.
    pub fn head_graph(&self, tape: &mut Tape, pv: &ParamVars, hidden: Var, r: usize) -> Var {
        linear(tape, hidden, pv.var(self.ids.head_w[r]), pv.var(self.ids.head_b[r]))
    }

    pub fn category_graph(&self, tape: &mut Tape, pv: &ParamVars, hidden: Var) -> Var {
        linear(tape, hidden, pv.var(self.ids.cat_w), pv.var(self.ids.cat_b))
    }

    /// Plain encoder evaluation.
    pub fn encode_history(&self, history: &[TokenSet]) -> Result<EncoderMemory> {
        let (_, truncated) = self.recent(history)?;
        let mut tape = Tape::new();
        let pv = tape.bind(&self.params);
        let mem = self.encode_graph(&mut tape, &pv, history)?;
        let (rows, _) = tape.shape(mem);
        Ok(EncoderMemory {
            rows,
            data: Arc::new(tape.value(mem).to_vec()),
            truncated,
        })
    }

    fn validate_prefix(&self, prefix: &[(usize, usize)]) -> Result<()> {
        let m = self.config.num_codebooks;
        if prefix.len() >= m {
            return Err(Error::CodebookConsumed);
        }
        let mut seen = vec![false; m];
        for &(r, c) in prefix {
            if r >= m || c >= self.config.codebook_size {
                return Err(Error::UnknownToken);
            }
            if std::mem::replace(&mut seen[r], true) {
                return Err(Error::CodebookConsumed);
            }
        }
        Ok(())
    }

    /// Logits for every codebook and the category distribution after `prefix`.
    pub fn step_all(&self, memory: &EncoderMemory, prefix: &[(usize, usize)]) -> Result<StepOutput> {
        self.validate_prefix(prefix)?;
        let mut tape = Tape::new();
        let pv = tape.bind(&self.params);
        let mem = tape.constant(memory.rows, self.config.embed_dim, memory.data.to_vec());
        let hidden = self.decode_graph(&mut tape, &pv, mem, prefix);
        let last = tape.row(hidden, prefix.len());
        let logits = (0..self.config.num_codebooks)
            .map(|r| {
                let l = self.head_graph(&mut tape, &pv, last, r);
                tape.value(l).to_vec()
            })
            .collect();
        let cat = self.category_graph(&mut tape, &pv, last);
        let category = softmax(tape.value(cat))?;
        Ok(StepOutput { logits, category })
    }

    /// Token logits for codebook `r` and the category distribution.
    pub fn decode_step(
        &self,
        memory: &EncoderMemory,
        prefix: &[(usize, usize)],
        r: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if r >= self.config.num_codebooks {
            return Err(Error::UnknownToken);
        }
        if prefix.iter().any(|&(pr, _)| pr == r) {
            return Err(Error::CodebookConsumed);
        }
        let mut out = self.step_all(memory, prefix)?;
        Ok((out.logits.swap_remove(r), out.category))
    }

    /// Binds a user history for step-wise decoding.
    pub fn context(&self, history: &[TokenSet]) -> Result<SeqContext<'_>> {
        Ok(SeqContext {
            model: self,
            memory: self.encode_history(history)?,
        })
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        checkpoint::encode(CHECKPOINT_MAGIC, &meta, &self.params)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = checkpoint::decode(bytes, CHECKPOINT_MAGIC)?;
        let config: SeqConfig = serde_json::from_str(&ck.meta)?;
        Self::from_params(config, ck.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

/// A model bound to one encoded history.
#[derive(Debug, Clone)]
pub struct SeqContext<'a> {
    pub model: &'a SeqModel,
    pub memory: EncoderMemory,
}

impl StepModel for SeqContext<'_> {
    fn num_codebooks(&self) -> usize {
        self.model.config.num_codebooks
    }

    fn codebook_size(&self) -> usize {
        self.model.config.codebook_size
    }

    fn step(&self, prefix: &[(usize, usize)]) -> Result<StepOutput> {
        self.model.step_all(&self.memory, prefix)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub token: Var,
    pub cate: Var,
    pub total: Var,
}

/// Teacher-forced batch loss in canonical codebook order, averaged over the
/// batch: token NLL summed over codebooks plus `lambda_c` times the category
/// NLL summed over steps.
pub fn pretrain_loss_graph(
    tape: &mut Tape,
    model: &SeqModel,
    pv: &ParamVars,
    batch: &[Example],
    lambda_c: f64,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let m = model.config.num_codebooks;
    let mut token_terms = Vec::with_capacity(batch.len());
    let mut cate_terms = Vec::with_capacity(batch.len());
    for ex in batch {
        model.check_tokens(&ex.target)?;
        if ex.category >= model.config.num_categories {
            return Err(Error::NoCategory);
        }
        let mem = model.encode_graph(tape, pv, &ex.history)?;
        let prefix: Vec<(usize, usize)> = ex.target.pairs()[..m - 1].to_vec();
        let hidden = model.decode_graph(tape, pv, mem, &prefix);
        let mut picks = Vec::with_capacity(m);
        for r in 0..m {
            let row = tape.row(hidden, r);
            let logits = model.head_graph(tape, pv, row, r);
            let lp = tape.log_softmax_rows(logits);
            picks.push(tape.pick(lp, &[(0, ex.target.code(r))]));
        }
        let tok = tape.concat_rows(&picks);
        token_terms.push(tape.sum(tok));
        let cat = model.category_graph(tape, pv, hidden);
        let lp = tape.log_softmax_rows(cat);
        let at: Vec<(usize, usize)> = (0..m).map(|i| (i, ex.category)).collect();
        let c = tape.pick(lp, &at);
        cate_terms.push(tape.sum(c));
    }
    let n = batch.len() as f64;
    let tok = tape.concat_rows(&token_terms);
    let tok = tape.sum(tok);
    let token = tape.scale(tok, -1.0 / n);
    let cat = tape.concat_rows(&cate_terms);
    let cat = tape.sum(cat);
    let cate = tape.scale(cat, -1.0 / n);
    let weighted = tape.scale(cate, lambda_c);
    let total = tape.add(token, weighted);
    Ok(LossVars { token, cate, total })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub token_loss: f64,
    pub cate_loss: f64,
    pub total: f64,
}

/// Loss components averaged over `examples`.
pub fn pretrain_loss(model: &SeqModel, examples: &[Example], lambda_c: f64) -> Result<EpochMetrics> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (mut tok, mut cat) = (0.0, 0.0);
    for chunk in examples.chunks(64) {
        let mut tape = Tape::new();
        let pv = tape.bind(&model.params);
        let l = pretrain_loss_graph(&mut tape, model, &pv, chunk, lambda_c)?;
        tok += tape.scalar(l.token) * chunk.len() as f64;
        cat += tape.scalar(l.cate) * chunk.len() as f64;
    }
    let n = examples.len() as f64;
    let (token_loss, cate_loss) = (tok / n, cat / n);
    Ok(EpochMetrics {
        epoch: 0,
        token_loss,
        cate_loss,
        total: token_loss + lambda_c * cate_loss,
    })
}

/// Teacher-forced per-token argmax accuracy in canonical order.
pub fn token_accuracy(model: &SeqModel, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let m = model.config.num_codebooks;
    let mut hits = 0usize;
    for ex in examples {
        let mem = model.encode_history(&ex.history)?;
        for r in 0..m {
            let prefix = &ex.target.pairs()[..r];
            let (logits, _) = model.decode_step(&mem, prefix, r)?;
            hits += usize::from(crate::numerics::argmax(&logits) == ex.target.code(r));
        }
    }
    Ok(hits as f64 / (examples.len() * m) as f64)
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub initial: EpochMetrics,
    pub epochs: Vec<EpochMetrics>,
    pub final_metrics: EpochMetrics,
    pub plans: Vec<PlanRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    pub ladq: Option<LadqConfig>,
}

pub fn pretrain(corpus: &[UserSequence], config: &SeqConfig) -> Result<(SeqModel, PretrainReport)> {
    pretrain_with(corpus, config, &PretrainOptions::default())
}

pub fn pretrain_with(
    corpus: &[UserSequence],
    config: &SeqConfig,
    options: &PretrainOptions,
) -> Result<(SeqModel, PretrainReport)> {
    config.validate()?;
    let examples = make_examples(corpus, config.targets_per_user);
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let root = RngStream::new(config.seed);
    let mut model = SeqModel::new(config.clone(), &mut root.derive_named("seq-init"))?;
    let mut rng = root.derive_named("seq-train");
    let initial = pretrain_loss(&model, &examples, config.lambda_c)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        &model.params,
    );
    let mut ladq = options.ladq.clone().map(LadqController::new);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let (mut tok, mut cat) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let mut tape = Tape::new();
            let pv = match &ladq {
                Some(c) => c.bind(&mut tape, &model.params),
                None => tape.bind(&model.params),
            };
            let l = pretrain_loss_graph(&mut tape, &model, &pv, &batch, config.lambda_c)?;
            let total = tape.scalar(l.total);
            if !total.is_finite() {
                return Err(Error::PretrainDiverged);
            }
            tok += tape.scalar(l.token) * batch.len() as f64;
            cat += tape.scalar(l.cate) * batch.len() as f64;
            let grads = tape.backward(l.total).params(&model.params, &pv);
            if let Some(c) = ladq.as_mut() {
                c.observe(step, &model.params, &grads);
            }
            opt.step(&mut model.params, &grads);
            step += 1;
        }
        let n = examples.len() as f64;
        epochs.push(EpochMetrics {
            epoch,
            token_loss: tok / n,
            cate_loss: cat / n,
            total: (tok + config.lambda_c * cat) / n,
        });
    }
    let mut final_metrics = pretrain_loss(&model, &examples, config.lambda_c)?;
    final_metrics.epoch = config.epochs;
    if !final_metrics.total.is_finite() {
        return Err(Error::PretrainDiverged);
    }
    let plans = ladq.map(LadqController::into_log).unwrap_or_default();
    Ok((
        model,
        PretrainReport {
            initial,
            epochs,
            final_metrics,
            plans,
        },
    ))
}

pub fn write_metrics_csv(metrics: &[EpochMetrics], mut out: impl Write) -> Result<()> {
    writeln!(out, "epoch,token_loss,cate_loss,total")?;
    for m in metrics {
        writeln!(out, "{},{},{},{}", m.epoch, m.token_loss, m.cate_loss, m.total)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_params, GradCheckOptions};

    fn cfg(m: usize, d: usize) -> SeqConfig {
        SeqConfig {
            num_codebooks: m,
            codebook_size: d,
            num_categories: 3,
            embed_dim: 8,
            hidden_dim: 8,
            max_context: 6,
            ..Default::default()
        }
    }

    fn randomize_heads(model: &mut SeqModel, rng: &mut RngStream) {
        let ids: Vec<ParamId> = model.ids.head_w.iter().chain(&model.ids.head_b).copied().chain([model.ids.cat_w, model.ids.cat_b]).collect();
        for id in ids {
            for v in model.params.get_mut(id).data_mut() {
                *v = rng.normal();
            }
        }
    }

    fn random_tokens(m: usize, d: usize, rng: &mut RngStream) -> TokenSet {
        TokenSet::new((0..m).map(|_| rng.below(d)).collect())
    }

    #[test]
    fn embedding_is_permutation_invariant() {
        for m in 1..=4 {
            let model = SeqModel::new(cfg(m, 5), &mut RngStream::new(m as u64)).unwrap();
            let mut rng = RngStream::new(7);
            let t = random_tokens(m, 5, &mut rng);
            let base = model.embed_token_set(&t).unwrap();
            let mut pairs = t.pairs();
            // Heap's algorithm over all orderings.
            let mut c = vec![0; m];
            let mut i = 0;
            let check = |pairs: &[(usize, usize)]| {
                let ts = TokenSet::from_pairs(pairs, m, 5).unwrap();
                assert_eq!(model.embed_token_set(&ts).unwrap(), base);
            };
            check(&pairs);
            while i < m {
                if c[i] < i {
                    if i % 2 == 0 {
                        pairs.swap(0, i);
                    } else {
                        pairs.swap(c[i], i);
                    }
                    check(&pairs);
                    c[i] += 1;
                    i = 0;
                } else {
                    c[i] = 0;
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn embedding_examples() {
        let model = SeqModel::new(cfg(1, 4), &mut RngStream::new(1)).unwrap();
        let v = model.embed_token_set(&TokenSet::new(vec![2])).unwrap();
        let tok = model.params.by_name("tok.emb").unwrap().row(2).to_vec();
        let cb = model.params.by_name("cb.emb").unwrap().row(0).to_vec();
        for k in 0..8 {
            assert_eq!(v[k], tok[k] + cb[k]);
        }
        let model = SeqModel::new(cfg(3, 4), &mut RngStream::new(2)).unwrap();
        let a = model.embed_token_set(&TokenSet::new(vec![0, 1, 2])).unwrap();
        let b = model.embed_token_set(&TokenSet::new(vec![0, 3, 2])).unwrap();
        assert_ne!(a, b);
        assert!(matches!(model.embed_token_set(&TokenSet::new(vec![0, 9, 2])), Err(Error::UnknownToken)));
    }

    #[test]
    fn encoder_behaviour() {
        let model = SeqModel::new(cfg(2, 4), &mut RngStream::new(3)).unwrap();
        let h = vec![TokenSet::new(vec![0, 1]), TokenSet::new(vec![2, 3]), TokenSet::new(vec![1, 1])];
        let a = model.encode_history(&h).unwrap();
        assert_eq!(a, model.encode_history(&h).unwrap());
        assert_eq!(model.encode_history(&h[..1]).unwrap().rows, 1);
        let mut p = h.clone();
        p.swap(0, 2);
        assert_ne!(model.encode_history(&p).unwrap().data, a.data);
        let long: Vec<TokenSet> = (0..10).map(|i| TokenSet::new(vec![i % 4, 0])).collect();
        let mem = model.encode_history(&long).unwrap();
        assert!(mem.truncated);
        assert_eq!(mem.rows, 6);
        assert!(!a.truncated);
    }

    #[test]
    fn decode_step_behaviour() {
        let mut model = SeqModel::new(cfg(3, 5), &mut RngStream::new(4)).unwrap();
        let mem = model.encode_history(&[TokenSet::new(vec![1, 2, 3])]).unwrap();
        let (logits, cat) = model.decode_step(&mem, &[], 0).unwrap();
        let p = softmax(&logits).unwrap();
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        assert!((cat.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(model.decode_step(&mem, &[(0, 1)], 0), Err(Error::CodebookConsumed)));

        randomize_heads(&mut model, &mut RngStream::new(5));
        let (a, _) = model.decode_step(&mem, &[(0, 1)], 2).unwrap();
        let (b, _) = model.decode_step(&mem, &[(0, 4)], 2).unwrap();
        assert_ne!(a, b);
        let p = softmax(&a).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_loss_is_hand_value() {
        let c = SeqConfig {
            num_codebooks: 4,
            codebook_size: 64,
            lambda_c: 0.0,
            ..cfg(4, 64)
        };
        let model = SeqModel::new(c, &mut RngStream::new(0)).unwrap();
        let ex = Example {
            history: vec![TokenSet::new(vec![1, 2, 3, 4])],
            target: TokenSet::new(vec![5, 6, 7, 8]),
            category: 1,
        };
        let l = pretrain_loss(&model, &[ex.clone()], 0.0).unwrap();
        assert!((l.total - 4.0 * 64f64.ln()).abs() < 1e-12);
        // The category weight never touches the token term.
        let l2 = pretrain_loss(&model, &[ex], 0.5).unwrap();
        assert_eq!(l.token_loss, l2.token_loss);
        assert!((l2.cate_loss - 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_model_has_zero_loss() {
        let mut model = SeqModel::new(cfg(2, 3), &mut RngStream::new(0)).unwrap();
        let target = TokenSet::new(vec![2, 0]);
        for r in 0..2 {
            let b = model.ids.head_b[r];
            model.params.get_mut(b).data_mut()[target.code(r)] = 1e3;
        }
        model.params.get_mut(model.ids.cat_b).data_mut()[1] = 1e3;
        let ex = Example {
            history: vec![TokenSet::new(vec![1, 1])],
            target,
            category: 1,
        };
        assert!(pretrain_loss(&model, &[ex], 0.5).unwrap().total.abs() < 1e-12);
    }

    #[test]
    fn pretrain_loss_gradient_check() {
        for seed in 0..3 {
            let mut model = SeqModel::new(cfg(3, 4), &mut RngStream::new(seed)).unwrap();
            let mut rng = RngStream::new(seed + 50);
            randomize_heads(&mut model, &mut rng);
            let batch: Vec<Example> = (0..2)
                .map(|_| Example {
                    history: (0..3).map(|_| random_tokens(3, 4, &mut rng)).collect(),
                    target: random_tokens(3, 4, &mut rng),
                    category: rng.below(3),
                })
                .collect();
            let r = grad_check_params(
                &model.params,
                |t, _, pv| Ok(pretrain_loss_graph(t, &model, pv, &batch, 0.5)?.total),
                GradCheckOptions {
                    max_coords: Some(300),
                    ..GradCheckOptions::new(1e-4)
                },
            )
            .unwrap();
            assert!(r.passed, "seed {seed}: {} at {:?}", r.max_rel_error, r.worst_coord);
        }
    }

    fn copy_corpus(n_users: usize, m: usize, d: usize, seed: u64) -> Vec<UserSequence> {
        let mut rng = RngStream::new(seed);
        (0..n_users)
            .map(|u| {
                let len = 3 + rng.below(4);
                let mut items = Vec::new();
                let mut cur = random_tokens(m, d, &mut rng);
                for t in 0..len {
                    if t > 0 && rng.bernoulli(0.5) {
                        cur = random_tokens(m, d, &mut rng);
                    }
                    items.push(SeqItem {
                        item: format!("x{t}"),
                        category: cur.code(0) % 3,
                        tokens: cur.clone(),
                    });
                }
                // The final transition always copies the previous item.
                let last = items.last().unwrap().clone();
                items.push(last);
                UserSequence {
                    user: format!("u{u}"),
                    items,
                }
            })
            .collect()
    }

    #[test]
    fn pretrain_learns_copy_pattern() {
        let corpus = copy_corpus(100, 2, 6, 1);
        let c = SeqConfig {
            embed_dim: 16,
            hidden_dim: 16,
            epochs: 40,
            batch_size: 16,
            lr: 1e-2,
            targets_per_user: 1,
            seed: 3,
            ..cfg(2, 6)
        };
        let (model, report) = pretrain(&corpus, &c).unwrap();
        assert!(report.final_metrics.total < report.initial.total);
        let examples = make_examples(&corpus, 1);
        let acc = token_accuracy(&model, &examples).unwrap();
        assert!(acc > 0.9, "copy accuracy {acc}");

        let (again, _) = pretrain(&corpus, &c).unwrap();
        assert_eq!(again.to_checkpoint_bytes(), model.to_checkpoint_bytes());
        let back = SeqModel::from_checkpoint_bytes(&model.to_checkpoint_bytes()).unwrap();
        assert!(back.params.bitwise_eq(&model.params));
    }

    #[test]
    fn pretrain_rejects_empty_corpus() {
        assert!(matches!(pretrain(&[], &cfg(2, 4)), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn metrics_csv_header() {
        let mut buf = Vec::new();
        write_metrics_csv(
            &[EpochMetrics {
                epoch: 1,
                token_loss: 1.0,
                cate_loss: 0.5,
                total: 1.25,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,token_loss,cate_loss,total\n1,1,0.5,1.25\n");
    }
}
