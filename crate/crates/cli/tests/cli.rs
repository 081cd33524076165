use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use e2e_absa::corpus::render_conll;
use e2e_absa::synth;
use e2e_absa::tagging::{is_valid, Tag};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_e2e-absa")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const GREAT_FOOD: &str = "Great\tO\nfood\tS-POS\nbut\tO\nthe\tO\nservice\tS-NEG\nis\tO\ndreadful\tO\n.\tO\n";

/// Tiny data directory: the train split is also the dev and test split.
fn data_dir(root: &Path) -> std::path::PathBuf {
    let dir = root.join("data");
    fs::create_dir_all(&dir).unwrap();
    let mut text = render_conll(&synth::generate(12, 5));
    text.push('\n');
    text.push_str(GREAT_FOOD);
    for split in ["train", "dev", "test"] {
        fs::write(dir.join(format!("{split}.txt")), &text).unwrap();
    }
    dir
}

fn train(root: &Path, head: &str, extra: &[&str]) -> (Output, std::path::PathBuf) {
    let data = data_dir(root);
    let out = root.join(format!("run-{head}"));
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--head",
        head,
        "--seeds",
        "1",
        "--dim_h",
        "16",
        "--num_attn_heads",
        "2",
        "--ffn_dim",
        "32",
        "--max_steps",
        "60",
        "--selection_start",
        "20",
        "--selection_every",
        "20",
        "--batch_size",
        "4",
    ];
    args.extend_from_slice(extra);
    (run(&args), out)
}

fn key_value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .to_string()
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_dev_f1() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = train(tmp.path(), "crf", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.resolved", "report.txt", "seed-1/checkpoint.json", "seed-1/trajectory.csv", "seed-1/report.txt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(out.join("seed-1/trajectory.csv")).unwrap();
    assert!(csv.starts_with("step,loss,dev_f1\n"));
    assert_eq!(csv.lines().count(), 1 + 4);

    let ck = out.join("seed-1/checkpoint.json");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&ck).unwrap()).unwrap();
    let logged = json["best_dev_f1"].as_f64().unwrap();

    let dev = tmp.path().join("data/dev.txt");
    let e1 = run(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", dev.to_str().unwrap()]);
    assert!(e1.status.success(), "{}", stderr(&e1));
    let f1: f64 = key_value(&stdout(&e1), "f1").parse().unwrap();
    assert_eq!(f1, logged);
    assert!(stdout(&e1).lines().next().unwrap().starts_with("P="));

    let e2 = run(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", dev.to_str().unwrap()]);
    assert_eq!(stdout(&e1), stdout(&e2));
}

#[test]
fn resolved_config_lists_every_key() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = train(tmp.path(), "linear", &["--max_steps", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("head = linear"));
    assert!(resolved.contains("max_steps = 20"));
    assert!(resolved.contains("seeds = 1"));
}

#[test]
fn unknown_key_fails_with_its_name() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data_dir(tmp.path());
    let o = run(&["train", "--data", data.to_str().unwrap(), "--heaad", "crf"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("heaad"));

    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# typo below\nheaad = crf\n").unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("heaad"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["eval", "--checkpoint", "/nonexistent.json", "--data", "/nonexistent.txt"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--data", "/nonexistent-dir"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn divergence_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, _) = train(tmp.path(), "linear", &["--learning_rate", "1e308", "--grad_clip", "0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"));
}

#[test]
fn predict_outputs_valid_tags_and_handles_empty_input() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = train(tmp.path(), "gru", &["--max_steps", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = out.join("seed-1/checkpoint.json");

    let raw = tmp.path().join("raw.txt");
    fs::write(&raw, "Great food but the service is dreadful .\nzzz unseen words\n").unwrap();
    let p = run(&["predict", "--checkpoint", ck.to_str().unwrap(), "--input", raw.to_str().unwrap()]);
    assert!(p.status.success(), "{}", stderr(&p));
    assert!(stderr(&p).contains("zzz"));
    let text = stdout(&p);
    let blocks: Vec<&str> = text.split("\n\n").collect();
    assert_eq!(blocks.len(), 2);
    for block in blocks {
        let tags: Vec<Tag> = block
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
            .collect();
        assert!(is_valid(&tags));
        assert!(block.lines().last().unwrap().starts_with("# aspects: "));
    }

    let empty = tmp.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let p = run(&["predict", "--checkpoint", ck.to_str().unwrap(), "--input", empty.to_str().unwrap()]);
    assert!(p.status.success());
    assert!(stdout(&p).is_empty());
}

#[test]
fn stats_counts_sentences_and_aspects() {
    let tmp = tempfile::tempdir().unwrap();
    let f = tmp.path().join("one.txt");
    fs::write(&f, GREAT_FOOD).unwrap();
    let o = run(&["stats", f.to_str().unwrap(), f.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("\t1\t2\n"));
    assert!(text.contains("total\t2\t4"));

    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "a\tB-XXX\n").unwrap();
    let o = run(&["stats", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(":1"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let o = run(&["gradcheck"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).matches("PASS").count(), 6);

    let o = run(&["gradcheck", "--corrupt", "layer_norm"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL"));
    assert!(stderr(&o).contains("layer_norm"));

    assert_eq!(run(&["gradcheck", "--corrupt", "nope"]).status.code(), Some(1));
}

#[test]
fn compare_frozen_writes_paired_table() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, out) = train(tmp.path(), "linear", &["--max_steps", "20", "--compare_frozen", "true"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("compare_frozen.tsv")).unwrap();
    assert!(table.starts_with("seed\tfine_tuned_dev_f1\tfrozen_dev_f1"));
    assert!(out.join("frozen/seed-1/checkpoint.json").exists());
    assert!(out.join("fine-tuned/seed-1/checkpoint.json").exists());
}
