use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use judgekit_core::rewards::RewardBreakdown;
use judgekit_core::schema::{DimScores, GroundTruth, MosVector, PreferenceLabel, TaskKind};
use serde_json::{json, Value};

fn fixture(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden").join(name);
    fs::read_to_string(p).unwrap()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_judgekit")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn jsonl(p: &str) -> Vec<Value> {
    fs::read_to_string(p).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn t1_truth(label: PreferenceLabel) -> GroundTruth {
    GroundTruth::pairwise(
        TaskKind::T1PairwisePreference,
        DimScores::new(vec![9.0, 7.0, 7.0, 8.0]),
        DimScores::new(vec![6.0, 8.0, 6.0, 7.0]),
        label,
    )
    .unwrap()
}

fn write_reward_input(dir: &Path) -> String {
    let raw = fixture("t1_a.txt");
    let lines = [
        json!({"raw": raw, "truth": t1_truth(PreferenceLabel::SpeechA), "task": "t1"}),
        json!({"raw": raw, "truth": t1_truth(PreferenceLabel::SpeechB)}),
        json!({"raw": "Speech A is better", "truth": t1_truth(PreferenceLabel::SpeechA)}),
    ];
    let p = path(dir, "rollouts.jsonl");
    fs::write(&p, lines.iter().map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    p
}

#[test]
fn reward_writes_one_breakdown_per_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_reward_input(dir.path());
    let out = path(dir.path(), "r.jsonl");
    let o = run(&["reward", "--task", "t1", "--in", &input, "--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<RewardBreakdown<f64>> =
        jsonl(&out).into_iter().map(|v| serde_json::from_value(v).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    // Golden signs per dimension: +, 0, +, +; truth signs: +, -, +, +.
    assert_eq!((rows[0].r_fmt, rows[0].r_acc, rows[0].r_rc, rows[0].total), (0.0, 1.0, 0.75, 1.75));
    assert_eq!((rows[1].r_acc, rows[1].total), (0.0, 0.75));
    assert_eq!((rows[2].r_fmt, rows[2].total, rows[2].parse_ok), (-1.0, -1.0, false));
    assert!(o.stdout.is_empty());

    let weighted = path(dir.path(), "w.jsonl");
    let o = run(&["reward", "--task", "t1", "--in", &input, "--out", &weighted, "--lambda-fmt", "2", "--lambda-rc", "0"]);
    assert_eq!(code(&o), 0);
    let totals: Vec<f64> = jsonl(&weighted).iter().map(|v| v["total"].as_f64().unwrap()).collect();
    assert_eq!(totals, vec![1.0, 0.0, -2.0]);
}

#[test]
fn reward_rejects_truth_for_another_task() {
    let dir = tempfile::tempdir().unwrap();
    let input = path(dir.path(), "in.jsonl");
    let truth = GroundTruth::mos(MosVector::from_array([3; 7]).unwrap());
    fs::write(&input, format!("{}\n", json!({"raw": "x", "truth": truth}))).unwrap();
    let o = run(&["reward", "--task", "t1", "--in", &input, "--out", &path(dir.path(), "o.jsonl")]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn jobs_do_not_change_output_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_reward_input(dir.path());
    let (a, b) = (path(dir.path(), "a.jsonl"), path(dir.path(), "b.jsonl"));
    assert_eq!(code(&run(&["reward", "--task", "t1", "--in", &input, "--out", &a])), 0);
    assert_eq!(code(&run(&["--jobs", "4", "reward", "--task", "t1", "--in", &input, "--out", &b])), 0);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn exit_codes_follow_usage_and_validation() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["split", "--ratios", "0.5,0.5,0.5", "--seed", "1"])), 2);
    assert_eq!(code(&run(&["split", "--ratios", "0.5,0.5"])), 2);
    assert_eq!(code(&run(&["pairs", "--task", "t1"])), 2, "seed is required");
    assert_eq!(code(&run(&["parse", "--task", "t9"])), 2);
    assert_eq!(code(&run(&["--jobs", "0", "gradcheck"])), 2);
    assert_eq!(code(&run(&["filter-cycles", "--in", "/no/such/file.jsonl"])), 1);
    let help = run(&["--help"]);
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("train-toy"));
}

#[test]
fn output_may_not_overwrite_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_reward_input(dir.path());
    let before = fs::read(&input).unwrap();
    let o = run(&["reward", "--task", "t1", "--in", &input, "--out", &input]);
    assert_eq!(code(&o), 1);
    assert_eq!(fs::read(&input).unwrap(), before);
    let same_via_dot = format!("{}/./rollouts.jsonl", dir.path().display());
    assert_eq!(code(&run(&["reward", "--task", "t1", "--in", &input, "--out", &same_via_dot])), 1);
}

#[test]
fn parse_reports_each_record() {
    let dir = tempfile::tempdir().unwrap();
    let input = path(dir.path(), "raw.jsonl");
    let good = fixture("t2_a.txt");
    let bad = good.replace("overall=4;", "overall=4");
    let lines = [json!({"id": 7, "raw": good}), json!({"id": "x", "raw": bad})];
    fs::write(&input, lines.iter().map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    let o = run(&["parse", "--task", "t2", "--in", &input]);
    assert_eq!(code(&o), 0);
    let rows: Vec<Value> = String::from_utf8(o.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows[0]["ok"], true);
    assert_eq!(rows[0]["id"], 7);
    assert_eq!(rows[0]["judgment"]["answer_mos"]["overall"], 4);
    assert_eq!(rows[1]["ok"], false);
    assert_eq!(rows[1]["error"]["kind"], "BadDimensionLine");

    let single = path(dir.path(), "one.txt");
    fs::write(&single, &bad).unwrap();
    assert_eq!(code(&run(&["parse", "--task", "t2", "--text", "--in", &single])), 1);
    fs::write(&single, &good).unwrap();
    assert_eq!(code(&run(&["parse", "--task", "t2", "--text", "--in", &single])), 0);
}

#[test]
fn lenient_mode_skips_malformed_lines() {
    let dir = tempfile::tempdir().unwrap();
    let input = path(dir.path(), "raw.jsonl");
    fs::write(&input, format!("{}\nnot json\n", json!({"raw": fixture("t3_a.txt")}))).unwrap();
    let strict = run(&["parse", "--task", "t3", "--in", &input]);
    assert_eq!(code(&strict), 1);
    assert!(String::from_utf8_lossy(&strict.stderr).contains("line 2"));
    let lenient = run(&["--lenient", "parse", "--task", "t3", "--in", &input]);
    assert_eq!(code(&lenient), 0);
    assert_eq!(String::from_utf8(lenient.stdout).unwrap().lines().count(), 1);
    assert!(String::from_utf8_lossy(&lenient.stderr).contains("skipped line 2"));
}

#[test]
fn eval_writes_table_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let input = path(dir.path(), "eval.jsonl");
    let raw = fixture("t1_a.txt");
    let lines: Vec<Value> = [PreferenceLabel::SpeechA, PreferenceLabel::SpeechA, PreferenceLabel::SpeechB, PreferenceLabel::SpeechA]
        .into_iter()
        .enumerate()
        .map(|(i, l)| json!({"task": "t1", "truth": t1_truth(l), "raw": raw, "eg_score": i % 3}))
        .collect();
    fs::write(&input, lines.iter().map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    let report = path(dir.path(), "report.json");
    let o = run(&["eval", "--task", "t1", "--in", &input, "--out", &report]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("75.00"), "{table}");
    let r: Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(r["accuracy"], 0.75);
    assert_eq!(r["eg_mean"], 0.75);
}

#[test]
fn train_toy_emits_reproducible_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(dir.path(), "a.csv"), path(dir.path(), "b.csv"));
    let args = |out: &str| -> Vec<String> {
        ["train-toy", "--seed", "9", "--iterations", "40", "--group-size", "8", "--kl-beta", "0.04", "--out", out]
            .iter()
            .map(|s| s.to_string())
            .collect()
    };
    let run_s = |v: Vec<String>| run(&v.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&run_s(args(&a))), 0);
    assert_eq!(code(&run_s(args(&b))), 0);
    let csv = fs::read_to_string(&a).unwrap();
    assert_eq!(csv, fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iteration,mean_total_reward,mean_kl");
    assert_eq!(lines.len(), 41);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 3));

    let f32_run = run(&["train-toy", "--seed", "9", "--iterations", "40", "--precision", "f32"]);
    assert_eq!(code(&f32_run), 0);
    assert_eq!(String::from_utf8(f32_run.stdout).unwrap().lines().count(), 41);
    assert_eq!(code(&run(&["train-toy", "--seed", "1", "--group-size", "1"])), 1);
    assert_eq!(code(&run(&["train-toy", "--seed", "1", "--clip-epsilon", "1.5"])), 1);
}

#[test]
fn gradcheck_reports_max_relative_error() {
    let o = run(&["gradcheck", "--tol", "1e-4", "--draws", "20"]);
    assert_eq!(code(&o), 0);
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["passed"], true);
    for obj in r["objectives"].as_array().unwrap() {
        assert!(obj["max_rel_error"].as_f64().unwrap() <= 1e-4);
    }
    // An impossible tolerance fails validation.
    assert_eq!(code(&run(&["gradcheck", "--tol", "0", "--draws", "2"])), 1);
}

#[test]
fn datapipe_stages_chain() {
    let dir = tempfile::tempdir().unwrap();
    let sets = path(dir.path(), "sets.jsonl");
    let set = |t: &str, dims: [[f64; 4]; 3]| {
        let c: Vec<Value> = dims.iter().enumerate().map(|(i, d)| json!({"id": format!("c{i}"), "dims": d})).collect();
        format!("{}\n", json!({"text_id": t, "candidates": c}))
    };
    fs::write(&sets, set("u1", [[9.0, 9.0, 9.0, 9.0], [5.0; 4], [1.0; 4]]) + &set("u2", [[2.0; 4], [3.0; 4], [4.0; 4]])).unwrap();
    let p = |n: &str| path(dir.path(), n);
    assert_eq!(code(&run(&["pairs", "--task", "t1", "--in", &sets, "--out", &p("pairs.jsonl"), "--seed", "3"])), 0);
    let pairs = jsonl(&p("pairs.jsonl"));
    assert_eq!(pairs.len(), 6);
    assert!(pairs.iter().all(|r| r["auto_label"].is_string() && r["dims_a"].is_array()));

    let o = run(&["filter-cycles", "--in", &p("pairs.jsonl"), "--out", &p("kept.jsonl"), "--report", &p("report.json")]);
    assert_eq!(code(&o), 0);
    assert_eq!(jsonl(&p("kept.jsonl")).len(), 6);

    // Every pair gets unanimous votes for its own label except one, which is rejected.
    let votes: String = pairs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let l = if i == 0 { "invalid" } else { r["auto_label"].as_str().unwrap() };
            format!("{}\n", json!({"text_id": r["text_id"], "cand_a": r["cand_a"], "cand_b": r["cand_b"], "votes": [l, l, "A"]}))
        })
        .collect();
    fs::write(p("votes.jsonl"), votes).unwrap();
    let o = run(&["vote-filter", "--in", &p("kept.jsonl"), "--votes", &p("votes.jsonl"), "--out", &p("ok.jsonl"), "--removed", &p("rm.jsonl")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let removed = jsonl(&p("rm.jsonl"));
    assert!(removed.iter().any(|r| r["discard_reason"] == "invalidity"));
    let kept = jsonl(&p("ok.jsonl")).len();
    assert_eq!(kept + removed.len(), 6);

    let o = run(&["split", "--in", &p("ok.jsonl"), "--out", &p("split.jsonl"), "--ratios", "0.5,0.5,0", "--seed", "1"]);
    assert_eq!(code(&o), 0);
    let split = jsonl(&p("split.jsonl"));
    assert_eq!(split.len(), kept);
    assert!(split.iter().all(|r| r["split"] == "sft" || r["split"] == "rl"));

    // Records without labels or votes fail validation.
    let o = run(&["vote-filter", "--in", &p("pairs.jsonl"), "--out", &p("x.jsonl")]);
    assert_eq!(code(&o), 1);
}

#[test]
fn stdin_and_stdout_are_defaults() {
    use std::io::Write;
    let mut child = Command::new(env!("CARGO_BIN_EXE_judgekit"))
        .args(["parse", "--task", "t4", "--text"])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(fixture("t4_b.txt").as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["ok"], true);
}

