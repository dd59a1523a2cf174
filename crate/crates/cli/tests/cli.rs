use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "
seed = 3
[data.synth]
n_users = 40
n_items = 30
n_categories = 3
min_len = 6
max_len = 8
[mpq]
epochs = 3
[seq]
embed_dim = 8
hidden_dim = 8
epochs = 1
max_context = 6
[grpo]
iterations = 2
users_per_iter = 3
group_size = 3
eval_every = 0
[eval]
valid_users = 10
";

fn reasonrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reasonrec")).current_dir(dir).args(args).output().expect("spawn")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = reasonrec(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let files = SMALL.replace(
        "[data.synth]",
        "[data]\nsource = \"files\"\ninteractions = \"data/interactions.csv\"\nfeatures = \"data/features.jsonl\"\nformat = \"csv\"\n[data.synth]",
    );
    std::fs::write(dir.path().join("files.toml"), files).unwrap();
    dir
}

#[test]
fn staged_pipeline_produces_every_artifact() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &["--config", "small.toml", "--out-dir", "data", "synth", "--format", "csv"]);
    let csv = std::fs::read_to_string(d.join("data/interactions.csv")).unwrap();
    assert!(csv.starts_with("user,item,ts,category\n"));

    let cfg = ["--config", "files.toml", "--out-dir", "run"];
    ok(d, &[&cfg[..], &["tokenize"]].concat());
    let tokens = std::fs::read_to_string(d.join("run/tokens.jsonl")).unwrap();
    assert_eq!(tokens.lines().count(), 30);
    let first: serde_json::Value = serde_json::from_str(tokens.lines().next().unwrap()).unwrap();
    assert_eq!(first["tokens"].as_array().unwrap().len(), 4);

    ok(d, &[&cfg[..], &["pretrain", "--mpq", "run/mpq.ckpt"]].concat());
    let metrics = std::fs::read_to_string(d.join("run/pretrain_metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,token_loss,cate_loss,total"));

    ok(
        d,
        &[
            &cfg[..],
            &[
                "posttrain", "--checkpoint", "run/seq.ckpt", "--mpq", "run/mpq.ckpt", "--out", "run/pt.ckpt", "--iters",
                "2", "--group-size", "3", "--epsilon", "0.2", "--kl-beta", "0.05", "--msra-h", "2", "--msra-w", "0.9",
                "--seed", "4",
            ],
        ]
        .concat(),
    );
    let log = std::fs::read_to_string(d.join("run/posttrain_log.csv")).unwrap();
    assert!(log.starts_with("iter,mean_reward,mean_step,mean_cate,mean_js,mean_path,kl,objective\n"));
    assert_eq!(log.lines().count(), 3);

    let out = ok(
        d,
        &[
            &cfg[..],
            &[
                "infer", "--checkpoint", "run/pt.ckpt", "--mpq", "run/mpq.ckpt", "--catalog", "run/tokens.jsonl",
                "--topn", "4", "--theta", "0.06", "--reflect-period", "1", "--retry-budget", "2", "--mode", "greedy",
            ],
        ]
        .concat(),
    );
    let lines: Vec<serde_json::Value> =
        String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 40);
    for rec in &lines {
        assert!(rec["user"].is_string());
        assert!(rec["pruned"].is_boolean());
        if !rec["pruned"].as_bool().unwrap() {
            assert_eq!(rec["items"].as_array().unwrap().len(), 4);
            assert_eq!(rec["path"].as_array().unwrap().len(), 4);
            assert!(rec["path"][0]["conf"].is_f64());
        }
    }
}

#[test]
fn eval_report_is_reproducible() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &["--config", "small.toml", "--out-dir", "a", "eval"]);
    ok(d, &["--config", "small.toml", "--out-dir", "b", "eval"]);
    let a = std::fs::read(d.join("a/report.json")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b/report.json")).unwrap());
    assert_eq!(std::fs::read(d.join("a/per_user.csv")).unwrap(), std::fs::read(d.join("b/per_user.csv")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    for key in ["metrics", "config_hash", "seed", "git_describe"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert!(report["metrics"]["R@10"].is_f64());
    assert_eq!(report["seed"], 3);

    ok(d, &["--config", "small.toml", "--seed", "9", "--out-dir", "c", "eval"]);
    let c: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("c/report.json")).unwrap()).unwrap();
    assert_eq!(c["seed"], 9);
    assert_ne!(c["config_hash"], report["config_hash"]);
}

#[test]
fn missing_tokenizer_checkpoint_fails_fast() {
    let tmp = setup();
    let out = reasonrec(tmp.path(), &["--config", "small.toml", "posttrain", "--checkpoint", "nope.ckpt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tokenizer checkpoint"));

    let out = reasonrec(tmp.path(), &["--config", "small.toml", "infer", "--checkpoint", "x", "--mpq", "missing.ckpt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn bad_inputs_are_reported() {
    let tmp = setup();
    std::fs::write(tmp.path().join("bad.toml"), "seed = \"x\"").unwrap();
    let out = reasonrec(tmp.path(), &["--config", "bad.toml", "synth"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid-config"));

    let out = reasonrec(tmp.path(), &["--config", "small.toml", "synth", "--format", "xml"]);
    assert!(!out.status.success());
}
