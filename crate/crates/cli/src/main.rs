use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use reasonrec::dataeval::{
    fit_tokenizer, git_describe, load_data, run_experiment, save_interactions, synth_corpus, write_infer_jsonl,
    write_outputs, ExperimentConfig, Format, Prepared,
};
use reasonrec::decode::{DecodeMode, RetrievalIndex};
use reasonrec::grpo::write_log_csv;
use reasonrec::mpq::{export_tokens, import_tokens};
use reasonrec::seqmodel::{write_metrics_csv, SeqModel};

#[derive(Parser)]
#[command(name = "reasonrec", version, about = "Generative recommendation with reasoning paths")]
struct Cli {
    /// Experiment config, TOML or JSON (by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic interaction log and item features.
    Synth {
        #[arg(long, default_value = "jsonl")]
        format: Format,
    },
    /// Train the item tokenizer and export the token map.
    Tokenize,
    /// Pretrain the sequence model on the training prefixes.
    Pretrain {
        #[arg(long)]
        mpq: Option<PathBuf>,
    },
    /// Reward-driven post-training of a pretrained checkpoint.
    Posttrain(PosttrainArgs),
    /// Decode one path per test user and retrieve items.
    Infer(InferArgs),
    /// Full run: tokenize, pretrain, post-train and report test metrics.
    Eval {
        #[arg(long)]
        mpq: Option<PathBuf>,
        /// Skips pretraining and starts from this sequence checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PosttrainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output checkpoint; defaults to `<out-dir>/posttrained.ckpt`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mpq: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    kl_beta: Option<f64>,
    #[arg(long)]
    msra_h: Option<usize>,
    #[arg(long)]
    msra_w: Option<f64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Token map (JSON lines) defining the retrievable items.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    mpq: Option<PathBuf>,
    #[arg(long)]
    topn: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    reflect_period: Option<usize>,
    #[arg(long)]
    retry_budget: Option<usize>,
    #[arg(long)]
    mode: Option<DecodeMode>,
    /// Output file; `-` writes to stdout.
    #[arg(long, default_value = "-")]
    output: String,
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Tokenizer checkpoint from the flag, then the config; fails fast otherwise.
fn require_mpq(cfg: &mut ExperimentConfig, flag: Option<PathBuf>) -> anyhow::Result<()> {
    if flag.is_some() {
        cfg.checkpoints.mpq = flag;
    }
    match &cfg.checkpoints.mpq {
        Some(p) if p.exists() => Ok(()),
        Some(p) => bail!("tokenizer checkpoint {} not found", p.display()),
        None => bail!("a tokenizer checkpoint is required (--mpq or checkpoints.mpq)"),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    let out = cli.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    match cli.command {
        Command::Synth { format } => {
            let corpus = synth_corpus(&cfg.resolved().data.synth)?;
            let ext = match format {
                Format::Jsonl => "jsonl",
                Format::Csv => "csv",
            };
            let interactions = out.join(format!("interactions.{ext}"));
            let features = out.join("features.jsonl");
            save_interactions(&corpus.log, &interactions, format, &features)?;
            eprintln!(
                "wrote {} interactions to {} and {} feature vectors to {}",
                corpus.log.records.len(),
                interactions.display(),
                corpus.log.features.len(),
                features.display()
            );
        }
        Command::Tokenize => {
            let cfg = cfg.resolved();
            let log = load_data(&cfg.data)?;
            let (model, report) = fit_tokenizer(&log, &cfg.mpq)?;
            model.save(&out.join("mpq.ckpt"))?;
            let items: Vec<(String, Vec<f64>)> = log.features.into_iter().collect();
            let map = export_tokens(&model, &items, &out.join("tokens.jsonl"))?;
            let best = report.best.total;
            eprintln!("tokenized {} items, kept epoch {}, loss {best:.5}", map.len(), report.best_epoch);
        }
        Command::Pretrain { mpq } => {
            if mpq.is_some() {
                require_mpq(&mut cfg, mpq)?;
            }
            let prepared = Prepared::new(&cfg)?;
            if prepared.mpq_report.is_some() {
                prepared.mpq.save(&out.join("mpq.ckpt"))?;
            }
            let (model, report) = prepared.pretrain()?;
            model.save(&out.join("seq.ckpt"))?;
            let mut f = create(&out.join("pretrain_metrics.csv"))?;
            write_metrics_csv(&report.epochs, &mut f)?;
            f.flush()?;
            eprintln!("pretrained {} epochs, checkpoint {}", report.epochs.len(), out.join("seq.ckpt").display());
        }
        Command::Posttrain(a) => {
            require_mpq(&mut cfg, a.mpq)?;
            let prepared = Prepared::new(&cfg)?;
            let model = SeqModel::load(&a.checkpoint)?;
            let mut grpo = prepared.config.grpo;
            grpo.iterations = a.iters.unwrap_or(grpo.iterations);
            grpo.group_size = a.group_size.unwrap_or(grpo.group_size);
            grpo.epsilon = a.epsilon.unwrap_or(grpo.epsilon);
            grpo.kl_beta = a.kl_beta.unwrap_or(grpo.kl_beta);
            grpo.reward.horizon = a.msra_h.unwrap_or(grpo.reward.horizon);
            grpo.reward.decay = a.msra_w.unwrap_or(grpo.reward.decay);
            let (trained, report) = prepared.posttrain(&model, &grpo)?;
            let dest = a.out.unwrap_or_else(|| out.join("posttrained.ckpt"));
            trained.save(&dest)?;
            let mut f = create(&out.join("posttrain_log.csv"))?;
            write_log_csv(&report.log, &mut f)?;
            f.flush()?;
            eprintln!(
                "post-trained {} iterations (kept iterate {}), checkpoint {}",
                report.log.len(),
                report.selected_iter,
                dest.display()
            );
        }
        Command::Infer(a) => {
            require_mpq(&mut cfg, a.mpq)?;
            let eval = &mut cfg.eval;
            eval.topn = a.topn.unwrap_or(eval.topn);
            eval.ks = vec![eval.topn];
            eval.reflect.theta = a.theta.unwrap_or(eval.reflect.theta);
            eval.reflect.period = a.reflect_period.unwrap_or(eval.reflect.period);
            eval.reflect.retry_budget = a.retry_budget.unwrap_or(eval.reflect.retry_budget);
            eval.mode = a.mode.unwrap_or(eval.mode);
            let mut prepared = Prepared::new(&cfg)?;
            if let Some(catalog) = &a.catalog {
                let items = import_tokens(catalog)?;
                prepared.index = RetrievalIndex::new(prepared.mpq.codebooks.clone(), &items)?;
            }
            let model = SeqModel::load(&a.checkpoint)?;
            let evaluation = prepared.evaluate(&model, &prepared.test_cases()?)?;
            if a.output == "-" {
                let stdout = std::io::stdout();
                let mut lock = stdout.lock();
                write_infer_jsonl(&evaluation.users, &mut lock)?;
                lock.flush()?;
            } else {
                let mut f = create(Path::new(&a.output))?;
                write_infer_jsonl(&evaluation.users, &mut f)?;
                f.flush()?;
            }
        }
        Command::Eval { mpq, checkpoint } => {
            if mpq.is_some() {
                require_mpq(&mut cfg, mpq)?;
            }
            if let Some(c) = checkpoint {
                cfg.checkpoints.seq = Some(c);
            }
            let outcome = run_experiment(&cfg, &git_describe())?;
            write_outputs(&out, &outcome)?;
            if let Some(r) = &outcome.posttrain {
                let mut f = create(&out.join("posttrain_log.csv"))?;
                write_log_csv(&r.log, &mut f)?;
                f.flush()?;
            }
            let summary: Vec<String> = outcome.report.metrics.0.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
            eprintln!("{} ({} users)", summary.join(", "), outcome.report.users);
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
