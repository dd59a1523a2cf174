//! Interaction logs, the synthetic corpus, leave-one-out evaluation and the
//! end-to-end experiment runner.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::decode::{
    generate_with_reflection, retrieve_topn, DecodeMode, PathStatus, ReasoningPath, ReflectConfig, RetrievalIndex,
};
use crate::error::{Error, Result};
use crate::grpo::{policy_update, GrpoConfig, PostTrainReport, PostTrainSample};
use crate::ladq::LadqConfig;
use crate::mpq::{tokenize_items, train_mpq, MpqConfig, MpqModel, MpqTrainReport, TokenMap, TokenSet};
use crate::rewards::WindowItem;
use crate::rng::RngStream;
use crate::seqmodel::{pretrain_with, CategoryVocab, PretrainOptions, PretrainReport, SeqConfig, SeqItem, SeqModel, UserSequence};

/// Users with fewer interactions are excluded from the split.
pub const MIN_INTERACTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub ts: i64,
    pub category: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Jsonl,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(Error::config(format!("unknown format {other}"))),
        }
    }
}

/// Interaction records in file order plus the item feature table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    pub features: BTreeMap<String, Vec<f64>>,
}

impl InteractionLog {
    /// Checks that every referenced item has features and one category, and
    /// that feature vectors share a dimension.
    pub fn validate(&self) -> Result<()> {
        let dim = self.feature_dim()?;
        if let Some((id, _)) = self.features.iter().find(|(_, v)| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
            return Err(Error::config(format!("bad feature vector for item {id}")));
        }
        let mut cats: BTreeMap<&str, &str> = BTreeMap::new();
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            let line = i + 1;
            if !self.features.contains_key(&r.item) {
                return Err(Error::Schema {
                    line,
                    message: format!("item {} has no features", r.item),
                });
            }
            if let Some(prev) = cats.insert(&r.item, &r.category) {
                if prev != r.category {
                    return Err(Error::Schema {
                        line,
                        message: format!("item {} has two categories", r.item),
                    });
                }
            }
            if !seen.insert((&r.user, &r.item, r.ts)) {
                return Err(Error::Schema {
                    line,
                    message: "duplicate (user, item, ts)".into(),
                });
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> Result<usize> {
        self.features.values().next().map(Vec::len).ok_or(Error::EmptyCorpus)
    }

    /// Sorted category labels.
    pub fn categories(&self) -> Result<CategoryVocab> {
        let mut labels: Vec<String> = self.records.iter().map(|r| r.category.clone()).collect();
        labels.sort();
        labels.dedup();
        CategoryVocab::new(labels)
    }

    pub fn item_categories(&self) -> BTreeMap<&str, &str> {
        self.records.iter().map(|r| (r.item.as_str(), r.category.as_str())).collect()
    }

    /// Per-user records sorted by timestamp; equal timestamps keep file order.
    pub fn sequences(&self) -> BTreeMap<&str, Vec<&Interaction>> {
        let mut out: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.user.as_str()).or_default().push(r);
        }
        for v in out.values_mut() {
            v.sort_by_key(|r| r.ts);
        }
        out
    }
}

fn schema(line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        line,
        message: message.into(),
    }
}

/// Parses interaction records; duplicate `(user, item, ts)` rows are
/// rejected with their line number.
pub fn read_interactions(input: impl Read, format: Format) -> Result<Vec<Interaction>> {
    let mut rows: Vec<(usize, Interaction)> = Vec::new();
    match format {
        Format::Jsonl => {
            for (i, line) in BufReader::new(input).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: Interaction = serde_json::from_str(&line).map_err(|e| schema(i + 1, e.to_string()))?;
                rows.push((i + 1, rec));
            }
        }
        Format::Csv => {
            let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
            let headers = rdr.headers().map_err(|e| schema(1, e.to_string()))?.clone();
            let col = |name: &str| {
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| schema(1, format!("missing column {name}")))
            };
            let (u, it, ts, cat) = (col("user")?, col("item")?, col("ts")?, col("category")?);
            for rec in rdr.records() {
                let rec = rec.map_err(|e| {
                    let line = e.position().map_or(0, |p| p.line() as usize);
                    schema(line, e.to_string())
                })?;
                let line = rec.position().map_or(0, |p| p.line() as usize);
                let field = |j: usize| rec.get(j).ok_or_else(|| schema(line, "short row"));
                let ts: i64 = field(ts)?.parse().map_err(|_| schema(line, "ts is not an integer"))?;
                rows.push((
                    line,
                    Interaction {
                        user: field(u)?.to_string(),
                        item: field(it)?.to_string(),
                        ts,
                        category: field(cat)?.to_string(),
                    },
                ));
            }
        }
    }
    let mut seen = HashSet::new();
    for (line, r) in &rows {
        if r.user.is_empty() || r.item.is_empty() || r.category.is_empty() {
            return Err(schema(*line, "empty field"));
        }
        if !seen.insert((r.user.as_str(), r.item.as_str(), r.ts)) {
            return Err(schema(*line, "duplicate (user, item, ts)"));
        }
    }
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

pub fn write_interactions(records: &[Interaction], out: impl Write, format: Format) -> Result<()> {
    match format {
        Format::Jsonl => {
            let mut out = out;
            for r in records {
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n")?;
            }
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in records {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeatureRecord {
    item: String,
    features: Vec<f64>,
}

/// Feature file: JSON lines `{"item": id, "features": [..]}`.
pub fn read_features(input: impl Read) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord = serde_json::from_str(&line).map_err(|e| schema(i + 1, e.to_string()))?;
        if out.insert(rec.item.clone(), rec.features).is_some() {
            return Err(schema(i + 1, format!("duplicate item {}", rec.item)));
        }
    }
    Ok(out)
}

pub fn write_features(features: &BTreeMap<String, Vec<f64>>, mut out: impl Write) -> Result<()> {
    for (item, v) in features {
        serde_json::to_writer(
            &mut out,
            &FeatureRecord {
                item: item.clone(),
                features: v.clone(),
            },
        )?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_interactions(path: &Path, format: Format, features: &Path) -> Result<InteractionLog> {
    let log = InteractionLog {
        records: read_interactions(std::fs::File::open(path)?, format)?,
        features: read_features(std::fs::File::open(features)?)?,
    };
    log.validate()?;
    Ok(log)
}

pub fn save_interactions(log: &InteractionLog, path: &Path, format: Format, features: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_interactions(&log.records, &mut f, format)?;
    f.flush()?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(features)?);
    write_features(&log.features, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Planted-structure corpus settings.
///
/// Items of a category are grouped into clusters whose members share the
/// codes of the first `ceil(M/2)` planted codebooks. With probability `p`
/// the next item is another member of the current cluster; otherwise the
/// category follows a sticky Markov chain and the item is uniform within it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub p: f64,
    /// Probability of keeping the category on a non-planted transition.
    pub stickiness: f64,
    pub cluster_size: usize,
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 500,
            n_items: 200,
            n_categories: 8,
            min_len: 8,
            max_len: 16,
            p: 0.8,
            stickiness: 0.7,
            cluster_size: 4,
            num_codebooks: 4,
            codebook_size: 16,
            feature_dim: 32,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_categories < 2 || self.n_items < self.n_categories {
            return Err(Error::config("need users, >= 2 categories and at least one item per category"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("need 1 <= min_len <= max_len"));
        }
        if !(0.0..=1.0).contains(&self.p) || !(0.0..=1.0).contains(&self.stickiness) {
            return Err(Error::config("p and stickiness must be in [0, 1]"));
        }
        if self.cluster_size == 0 || self.num_codebooks == 0 || self.codebook_size < 2 || self.feature_dim == 0 {
            return Err(Error::config("bad code/feature sizes"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub log: InteractionLog,
    /// Planted code of every item.
    pub planted: BTreeMap<String, TokenSet>,
    /// Items grouped by cluster; the next item under the planted pattern is
    /// drawn from the current item's cluster.
    pub clusters: Vec<Vec<usize>>,
}

fn id(prefix: char, i: usize, n: usize) -> String {
    let width = n.to_string().len().max(4);
    format!("{prefix}{:0width$}", i + 1)
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let (m, d, nc) = (cfg.num_codebooks, cfg.codebook_size, cfg.n_categories);
    let root = RngStream::new(cfg.seed);
    let core = m.div_ceil(2);

    let mut code_rng = root.derive_named("synth-codes");
    let perms: Vec<Vec<Vec<usize>>> = (0..nc)
        .map(|_| {
            (0..m)
                .map(|_| {
                    let mut p: Vec<usize> = (0..d).collect();
                    code_rng.shuffle(&mut p);
                    p
                })
                .collect()
        })
        .collect();

    // Item g belongs to category g % nc at position k = g / nc.
    let per_cat: Vec<usize> = (0..nc).map(|c| (cfg.n_items - c).div_ceil(nc)).collect();
    let groups: Vec<usize> = per_cat.iter().map(|&n| (n / cfg.cluster_size).max(1)).collect();
    let mut codes = Vec::with_capacity(cfg.n_items);
    let mut cluster_of = Vec::with_capacity(cfg.n_items);
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut cluster_base = Vec::with_capacity(nc);
    for &g in &groups {
        cluster_base.push(clusters.len());
        clusters.extend((0..g).map(|_| Vec::new()));
    }
    for item in 0..cfg.n_items {
        let (c, k) = (item % nc, item / nc);
        let (cl, s) = (k % groups[c], k / groups[c]);
        let code: Vec<usize> = (0..m)
            .map(|r| if r < core { perms[c][r][cl % d] } else { perms[c][r][(cl + s) % d] })
            .collect();
        codes.push(TokenSet::new(code));
        cluster_of.push(cluster_base[c] + cl);
        clusters[cluster_base[c] + cl].push(item);
    }

    let mut feat_rng = root.derive_named("synth-features");
    let scale = 1.0 / (m as f64).sqrt();
    let protos: Vec<Vec<Vec<f64>>> = (0..m)
        .map(|_| (0..d).map(|_| (0..cfg.feature_dim).map(|_| scale * feat_rng.normal()).collect()).collect())
        .collect();
    let cat_protos: Vec<Vec<f64>> = (0..nc)
        .map(|_| (0..cfg.feature_dim).map(|_| 0.5 * feat_rng.normal()).collect())
        .collect();
    let item_ids: Vec<String> = (0..cfg.n_items).map(|i| id('i', i, cfg.n_items)).collect();
    let cat_ids: Vec<String> = (0..nc).map(|c| format!("c{:02}", c + 1)).collect();
    let mut features = BTreeMap::new();
    let mut planted = BTreeMap::new();
    for item in 0..cfg.n_items {
        let mut v = cat_protos[item % nc].clone();
        for (r, &c) in codes[item].codes().iter().enumerate() {
            for (x, p) in v.iter_mut().zip(&protos[r][c]) {
                *x += p;
            }
        }
        for x in &mut v {
            *x += cfg.noise * feat_rng.normal();
        }
        features.insert(item_ids[item].clone(), v);
        planted.insert(item_ids[item].clone(), codes[item].clone());
    }

    let users = root.derive_named("synth-users");
    let mut records = Vec::new();
    for u in 0..cfg.n_users {
        let mut rng = users.derive(u as u64);
        let len = rng.range_inclusive(cfg.min_len, cfg.max_len);
        let user = id('u', u, cfg.n_users);
        let mut cat = rng.below(nc);
        let mut item = cat + nc * rng.below(per_cat[cat]);
        for step in 0..len {
            if step > 0 {
                let members = &clusters[cluster_of[item]];
                if members.len() > 1 && rng.bernoulli(cfg.p) {
                    let j = rng.below(members.len() - 1);
                    let others: Vec<usize> = members.iter().copied().filter(|&x| x != item).collect();
                    item = others[j];
                } else {
                    if !rng.bernoulli(cfg.stickiness) {
                        let j = rng.below(nc - 1);
                        cat = if j >= cat { j + 1 } else { j };
                    }
                    item = cat + nc * rng.below(per_cat[cat]);
                }
            }
            records.push(Interaction {
                user: user.clone(),
                item: item_ids[item].clone(),
                ts: 1_000 + step as i64,
                category: cat_ids[item % nc].clone(),
            });
        }
    }
    let log = InteractionLog { records, features };
    log.validate()?;
    Ok(SynthCorpus { log, planted, clusters })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user: String,
    pub train: Vec<String>,
    pub valid: String,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalSplit {
    /// Eligible users in id order.
    pub users: Vec<UserSplit>,
    pub dropped: usize,
}

/// Last item is the test target, the one before it validation, the rest
/// training.
pub fn leave_one_out(log: &InteractionLog) -> Result<EvalSplit> {
    if log.records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut split = EvalSplit::default();
    for (user, recs) in log.sequences() {
        let n = recs.len();
        if n < MIN_INTERACTIONS {
            split.dropped += 1;
            continue;
        }
        split.users.push(UserSplit {
            user: user.to_string(),
            train: recs[..n - 2].iter().map(|r| r.item.clone()).collect(),
            valid: recs[n - 2].item.clone(),
            test: recs[n - 1].item.clone(),
        });
    }
    if split.users.is_empty() {
        return Err(Error::EmptySplit);
    }
    Ok(split)
}

/// 1 if `target` is within the first `k` entries.
pub fn recall_at_k(ranked: &[String], target: &str, k: usize) -> f64 {
    match ranked.iter().take(k).position(|x| x == target) {
        Some(_) => 1.0,
        None => 0.0,
    }
}

/// `1 / log2(rank + 1)` for a target at 1-based `rank <= k`, else 0.
pub fn ndcg_at_k(ranked: &[String], target: &str, k: usize) -> f64 {
    match ranked.iter().take(k).position(|x| x == target) {
        Some(i) => 1.0 / ((i + 2) as f64).log2(),
        None => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synth,
    Files,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synth: SynthConfig,
    pub interactions: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub format: Format,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mode: DecodeMode,
    pub reflect: ReflectConfig,
    pub topn: usize,
    pub ks: Vec<usize>,
    /// Low-confidence steps dropped before retrieval.
    pub drop: usize,
    /// Validation users scored during post-training model selection
    /// (0 = all).
    pub valid_users: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            reflect: ReflectConfig::default(),
            topn: 10,
            ks: vec![5, 10],
            drop: 0,
            valid_users: 200,
        }
    }
}

impl EvalConfig {
    fn list_len(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(0).max(self.topn)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointPaths {
    pub mpq: Option<PathBuf>,
    pub seq: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub mpq: MpqConfig,
    pub seq: SeqConfig,
    pub posttrain: bool,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
    pub ladq: Option<LadqConfig>,
    pub checkpoints: CheckpointPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            mpq: MpqConfig::default(),
            seq: SeqConfig {
                max_context: 20,
                epochs: 8,
                targets_per_user: 4,
                ..Default::default()
            },
            posttrain: true,
            grpo: GrpoConfig {
                eval_every: 10,
                ..Default::default()
            },
            eval: EvalConfig::default(),
            ladq: None,
            checkpoints: CheckpointPaths::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Copy with the top-level seed pushed into every stage.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.data.synth.seed = c.seed;
        c.mpq.seed = c.seed;
        c.seq.seed = c.seed;
        c.grpo.seed = c.seed;
        if c.data.source == DataSource::Synth {
            c.mpq.feature_dim = c.data.synth.feature_dim;
        }
        c
    }

    /// SHA-256 of the resolved config's JSON form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(&self.resolved())?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Tokenizer fitted on every item's features in id order.
pub fn fit_tokenizer(log: &InteractionLog, cfg: &MpqConfig) -> Result<(MpqModel, MpqTrainReport)> {
    let items: Vec<Vec<f64>> = log.features.values().cloned().collect();
    let mut cfg = cfg.clone();
    cfg.feature_dim = log.feature_dim()?;
    train_mpq(&items, &cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub user: String,
    pub history: Vec<TokenSet>,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathStepOut {
    pub r: usize,
    pub c: usize,
    pub conf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserResult {
    pub user: String,
    pub target: String,
    /// 1-based rank within the retrieved list.
    pub rank: Option<usize>,
    pub pruned: bool,
    pub items: Vec<String>,
    pub path: Vec<PathStepOut>,
    /// Values aligned with `Evaluation::metrics`.
    pub scores: Vec<f64>,
}

/// Named metrics serialized as a JSON object in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics(pub Vec<(String, f64)>);

impl Metrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

impl Serialize for Metrics {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub users: Vec<UserResult>,
    pub pruned: usize,
}

/// Scores one decoded path per case. Pruned paths count as misses.
pub fn evaluate_with<F>(cases: &[EvalCase], index: &RetrievalIndex, cfg: &EvalConfig, mut decode: F) -> Result<Evaluation>
where
    F: FnMut(usize, &EvalCase) -> Result<ReasoningPath>,
{
    if cases.is_empty() {
        return Err(Error::EmptySplit);
    }
    if cfg.ks.is_empty() || cfg.ks.contains(&0) {
        return Err(Error::config("ks must be nonempty and >= 1"));
    }
    let n = cfg.list_len();
    let names: Vec<String> = cfg.ks.iter().flat_map(|k| [format!("R@{k}"), format!("N@{k}")]).collect();
    let mut sums = vec![0.0; names.len()];
    let mut users = Vec::with_capacity(cases.len());
    let mut pruned = 0;
    for (i, case) in cases.iter().enumerate() {
        let path = decode(i, case)?;
        let is_pruned = path.status == PathStatus::Pruned;
        let items: Vec<String> = if is_pruned {
            pruned += 1;
            Vec::new()
        } else {
            retrieve_topn(&path, index, n, cfg.drop)?.into_iter().map(|(id, _)| id).collect()
        };
        let scores: Vec<f64> = cfg
            .ks
            .iter()
            .flat_map(|&k| [recall_at_k(&items, &case.target, k), ndcg_at_k(&items, &case.target, k)])
            .collect();
        for (s, v) in sums.iter_mut().zip(&scores) {
            *s += v;
        }
        users.push(UserResult {
            user: case.user.clone(),
            target: case.target.clone(),
            rank: items.iter().position(|x| *x == case.target).map(|p| p + 1),
            pruned: is_pruned,
            items,
            path: path
                .steps
                .iter()
                .map(|s| PathStepOut {
                    r: s.codebook,
                    c: s.token,
                    conf: s.confidence,
                })
                .collect(),
            scores,
        });
    }
    let count = cases.len() as f64;
    Ok(Evaluation {
        metrics: Metrics(names.into_iter().zip(sums.into_iter().map(|s| s / count)).collect()),
        users,
        pruned,
    })
}

/// Decodes each case with reflection; case `i` uses its own rng substream.
pub fn evaluate_model(
    model: &SeqModel,
    cases: &[EvalCase],
    index: &RetrievalIndex,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Evaluation> {
    let root = RngStream::new(seed).derive_named("eval");
    evaluate_with(cases, index, cfg, |i, case| {
        let ctx = model.context(&case.history)?;
        let mut rng = root.derive(i as u64);
        Ok(generate_with_reflection(&ctx, cfg.mode, &cfg.reflect, &mut rng)?.0)
    })
}

/// Data, split and tokenizer shared by the training and evaluation stages.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub log: InteractionLog,
    pub vocab: CategoryVocab,
    pub split: EvalSplit,
    pub mpq: MpqModel,
    pub mpq_report: Option<MpqTrainReport>,
    pub tokens: TokenMap,
    pub index: RetrievalIndex,
    item_category: BTreeMap<String, usize>,
}

pub fn load_data(cfg: &DataConfig) -> Result<InteractionLog> {
    match cfg.source {
        DataSource::Synth => Ok(synth_corpus(&cfg.synth)?.log),
        DataSource::Files => {
            let (Some(i), Some(f)) = (&cfg.interactions, &cfg.features) else {
                return Err(Error::config("file source needs interactions and features paths"));
            };
            load_interactions(i, cfg.format, f)
        }
    }
}

impl Prepared {
    /// Loads the data and the tokenizer (from its checkpoint when one is
    /// configured, otherwise by training it).
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let config = config.resolved();
        let log = load_data(&config.data)?;
        let (mpq, mpq_report) = match &config.checkpoints.mpq {
            Some(p) => (MpqModel::load(p)?, None),
            None => {
                let (m, r) = fit_tokenizer(&log, &config.mpq)?;
                (m, Some(r))
            }
        };
        Self::with_tokenizer(config, log, mpq, mpq_report)
    }

    pub fn with_tokenizer(
        config: ExperimentConfig,
        log: InteractionLog,
        mpq: MpqModel,
        mpq_report: Option<MpqTrainReport>,
    ) -> Result<Self> {
        if mpq.config.feature_dim != log.feature_dim()? {
            return Err(Error::InvalidFeatures);
        }
        let split = leave_one_out(&log)?;
        let vocab = log.categories()?;
        let tokens = tokenize_items(&mpq, log.features.iter().map(|(k, v)| (k.as_str(), v.as_slice())))?;
        let index = RetrievalIndex::new(mpq.codebooks.clone(), &tokens)?;
        let item_category = log
            .item_categories()
            .into_iter()
            .map(|(item, c)| (item.to_string(), vocab.index(c).expect("label from the same log")))
            .collect();
        Ok(Self {
            config,
            log,
            vocab,
            split,
            mpq,
            mpq_report,
            tokens,
            index,
            item_category,
        })
    }

    fn tokens_of(&self, item: &str) -> Result<TokenSet> {
        self.tokens
            .get(item)
            .map(|(t, _)| t.clone())
            .ok_or_else(|| Error::config(format!("item {item} was not tokenized")))
    }

    fn category_of(&self, item: &str) -> Result<usize> {
        self.item_category.get(item).copied().ok_or(Error::NoCategory)
    }

    fn history(&self, items: &[String]) -> Result<Vec<TokenSet>> {
        items.iter().map(|i| self.tokens_of(i)).collect()
    }

    /// Sequence-model config with vocabulary sizes taken from the data.
    pub fn seq_config(&self) -> SeqConfig {
        SeqConfig {
            num_codebooks: self.mpq.config.num_codebooks,
            codebook_size: self.mpq.config.codebook_size,
            num_categories: self.vocab.len(),
            ..self.config.seq.clone()
        }
    }

    /// Training prefixes only; validation and test items are held out.
    pub fn train_sequences(&self) -> Result<Vec<UserSequence>> {
        self.split
            .users
            .iter()
            .map(|u| {
                Ok(UserSequence {
                    user: u.user.clone(),
                    items: u
                        .train
                        .iter()
                        .map(|i| {
                            Ok(SeqItem {
                                item: i.clone(),
                                tokens: self.tokens_of(i)?,
                                category: self.category_of(i)?,
                            })
                        })
                        .collect::<Result<_>>()?,
                })
            })
            .collect()
    }

    /// Every position `t >= 1` of each training prefix, with the following
    /// `horizon` items as the reward window.
    pub fn posttrain_samples(&self, horizon: usize) -> Result<Vec<PostTrainSample>> {
        let mut out = Vec::new();
        for u in &self.split.users {
            let hist = self.history(&u.train)?;
            for t in 1..u.train.len() {
                let end = (t + horizon.max(1)).min(u.train.len());
                let future = u.train[t..end]
                    .iter()
                    .map(|i| {
                        Ok(WindowItem {
                            item: i.clone(),
                            tokens: self.tokens_of(i)?,
                            category: self.category_of(i)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push(PostTrainSample {
                    user: u.user.clone(),
                    history: hist[..t].to_vec(),
                    future,
                });
            }
        }
        Ok(out)
    }

    pub fn valid_cases(&self) -> Result<Vec<EvalCase>> {
        self.split
            .users
            .iter()
            .map(|u| {
                Ok(EvalCase {
                    user: u.user.clone(),
                    history: self.history(&u.train)?,
                    target: u.valid.clone(),
                })
            })
            .collect()
    }

    pub fn test_cases(&self) -> Result<Vec<EvalCase>> {
        self.split
            .users
            .iter()
            .map(|u| {
                let mut items = u.train.clone();
                items.push(u.valid.clone());
                Ok(EvalCase {
                    user: u.user.clone(),
                    history: self.history(&items)?,
                    target: u.test.clone(),
                })
            })
            .collect()
    }

    pub fn pretrain(&self) -> Result<(SeqModel, PretrainReport)> {
        let options = PretrainOptions { ladq: self.config.ladq };
        pretrain_with(&self.train_sequences()?, &self.seq_config(), &options)
    }

    /// Post-trains `model`, selecting the iterate with the best validation
    /// recall at the largest configured K.
    pub fn posttrain(&self, model: &SeqModel, grpo: &GrpoConfig) -> Result<(SeqModel, PostTrainReport)> {
        let samples = self.posttrain_samples(grpo.reward.horizon)?;
        let mut valid = self.valid_cases()?;
        if self.config.eval.valid_users > 0 {
            valid.truncate(self.config.eval.valid_users);
        }
        let k = self.config.eval.ks.iter().copied().max().unwrap_or(10);
        let key = format!("R@{k}");
        let validate = |m: &SeqModel| -> Result<f64> {
            let e = evaluate_model(m, &valid, &self.index, &self.config.eval, self.config.seed)?;
            Ok(e.metrics.get(&key).unwrap_or(0.0))
        };
        policy_update(model, &samples, &self.index, grpo, Some(&validate))
    }

    pub fn evaluate(&self, model: &SeqModel, cases: &[EvalCase]) -> Result<Evaluation> {
        evaluate_model(model, cases, &self.index, &self.config.eval, self.config.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub metrics: Metrics,
    pub users: usize,
    pub dropped_users: usize,
    pub pruned: usize,
    pub prune_rate: f64,
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: Report,
    pub evaluation: Evaluation,
    pub model: SeqModel,
    pub pretrain: Option<PretrainReport>,
    pub posttrain: Option<PostTrainReport>,
}

/// Tokenize, pretrain (unless a sequence checkpoint is configured),
/// optionally post-train, then score the test items once.
pub fn run_experiment(config: &ExperimentConfig, git_describe: &str) -> Result<ExperimentOutcome> {
    let prepared = Prepared::new(config)?;
    let (mut model, pretrain) = match &prepared.config.checkpoints.seq {
        Some(p) => (SeqModel::load(p)?, None),
        None => {
            let (m, r) = prepared.pretrain()?;
            (m, Some(r))
        }
    };
    if model.config.num_codebooks != prepared.mpq.config.num_codebooks
        || model.config.codebook_size != prepared.mpq.config.codebook_size
    {
        return Err(Error::IncompatibleCheckpoint("sequence model does not match the tokenizer".into()));
    }
    let mut posttrain = None;
    if prepared.config.posttrain {
        let (m, r) = prepared.posttrain(&model, &prepared.config.grpo)?;
        model = m;
        posttrain = Some(r);
    }
    let evaluation = prepared.evaluate(&model, &prepared.test_cases()?)?;
    let report = Report {
        metrics: evaluation.metrics.clone(),
        users: evaluation.users.len(),
        dropped_users: prepared.split.dropped,
        pruned: evaluation.pruned,
        prune_rate: evaluation.pruned as f64 / evaluation.users.len() as f64,
        config_hash: config.hash()?,
        seed: prepared.config.seed,
        git_describe: git_describe.to_string(),
    };
    Ok(ExperimentOutcome {
        report,
        evaluation,
        model,
        pretrain,
        posttrain,
    })
}

pub fn report_json(report: &Report) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

/// One row per user: id, target, rank, pruned flag and the metric values.
pub fn write_user_csv(eval: &Evaluation, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["user".to_string(), "target".into(), "rank".into(), "pruned".into()];
    header.extend(eval.metrics.0.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    for u in &eval.users {
        let mut row = vec![
            u.user.clone(),
            u.target.clone(),
            u.rank.map_or(String::new(), |r| r.to_string()),
            u.pruned.to_string(),
        ];
        row.extend(u.scores.iter().map(|s| s.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.json` and `per_user.csv` into `dir`.
pub fn write_outputs(dir: &Path, outcome: &ExperimentOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), report_json(&outcome.report)?)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("per_user.csv"))?);
    write_user_csv(&outcome.evaluation, &mut f)?;
    f.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct InferRecord<'a> {
    user: &'a str,
    items: &'a [String],
    path: &'a [PathStepOut],
    pruned: bool,
}

/// Inference output: one JSON line per user.
pub fn write_infer_jsonl(users: &[UserResult], mut out: impl Write) -> Result<()> {
    for u in users {
        serde_json::to_writer(
            &mut out,
            &InferRecord {
                user: &u.user,
                items: &u.items,
                path: &u.path,
                pruned: u.pruned,
            },
        )?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// `git describe --always --dirty` of the working directory, or "unknown".
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}
