use std::path::Path;
use std::process::{Command, Output};

fn webseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_webseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = webseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

// Three easy classes without tag noise, so a short schedule already clears
// the cascade's confidence rule.
const TINY: &[&str] = &[
    "--set",
    "synth.classes=3",
    "--set",
    "synth.noise_rate=0",
    "--set",
    "synth.height=32",
    "--set",
    "synth.width=32",
    "--set",
    "synth.attention_train=48",
    "--set",
    "synth.finetune_pool=16",
    "--set",
    "synth.eval=16",
    "--set",
    "classifier.iterations=300",
    "--set",
    "classifier.learning_rate=0.05",
    "--set",
    "segmenter.iterations=20",
    "--set",
    "finetune.iterations=10",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_exits_2() {
    let out = webseg(&["run-all", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_2() {
    let out = webseg(&["eval", "--pred", "/nonexistent/pred", "--gt", "/nonexistent/gt"]);
    assert_eq!(out.status.code(), Some(2));
    let out = webseg(&[
        "train-classifier",
        "--manifest",
        "/nonexistent/manifest.tsv",
        "--out",
        "/tmp/x.wsn",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = webseg(&["run-all", "--set", "no.such.key=1"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_of_identical_directories_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&with_tiny(&["synth-data", "--out", p(&data)]));
    let truth = data.join("truth");
    let stdout = ok(&["eval", "--pred", p(&truth), "--gt", p(&truth)]);
    assert!(stdout.lines().any(|l| l == "miou\t1.000000"), "{stdout}");
}

#[test]
fn stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let manifest = data.join("manifest.tsv");
    let classifier = root.join("classifier.wsn");
    ok(&with_tiny(&["synth-data", "--out", p(&data)]));
    ok(&with_tiny(&[
        "train-classifier",
        "--manifest",
        p(&manifest),
        "--out",
        p(&classifier),
    ]));

    // A single rule with a frozen classifier.
    let filtered = root.join("filtered");
    ok(&with_tiny(&[
        "filter",
        "--manifest",
        p(&manifest),
        "--rule",
        "1",
        "--classifier",
        p(&classifier),
        "--out",
        p(&filtered),
    ]));
    let report = std::fs::read_to_string(filtered.join("curation-report.txt")).unwrap();
    assert!(report.starts_with("webseg-report\t1\n"));
    assert!(report.contains("filter-rule-1"));
    assert!(filtered.join("kept.tsv").exists());

    let att = root.join("att");
    ok(&with_tiny(&[
        "attention",
        "--classifier",
        p(&classifier),
        "--image",
        p(&data.join("images/00000.png")),
        "--class",
        "2",
        "--out",
        p(&att),
    ]));
    for name in ["forward", "backward-shallow", "backward-deep", "fused"] {
        assert!(att.join(format!("{name}.png")).exists(), "{name}.png");
        assert!(att.join(format!("{name}.map")).exists(), "{name}.map");
    }

    let pseudo = root.join("pseudo");
    ok(&with_tiny(&[
        "pseudo-gt",
        "--manifest",
        p(&manifest),
        "--classifier",
        p(&classifier),
        "--out",
        p(&pseudo),
    ]));
    let seg = root.join("seg.wsn");
    ok(&with_tiny(&[
        "train-seg",
        "--pairs",
        p(&pseudo.join("pairs.tsv")),
        "--init",
        p(&classifier),
        "--out",
        p(&seg),
    ]));
    let tuned = root.join("tuned");
    ok(&with_tiny(&[
        "finetune",
        "--manifest",
        p(&manifest),
        "--segmenter",
        p(&seg),
        "--classifier",
        p(&classifier),
        "--mu",
        "0.05",
        "--out",
        p(&tuned),
    ]));
    assert!(tuned.join("segmenter-finetuned.wsn").exists());
    let stdout = ok(&[
        "eval",
        "--segmenter",
        p(&tuned.join("segmenter-finetuned.wsn")),
        "--manifest",
        p(&manifest),
    ]);
    assert!(stdout.starts_with("miou\t"), "{stdout}");
}

#[test]
fn run_all_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    ok(&with_tiny(&["run-all", "--dump-config", p(&cfg)]));
    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let result = webseg(&["run-all", "--config", p(&cfg), "--seed", "7", "--out", p(&out)]);
        let stderr = String::from_utf8_lossy(&result.stderr);
        assert!(result.status.success(), "{stderr}");
        metrics.push(std::fs::read(out.join("metrics.txt")).unwrap());
        assert!(out.join("curation-report.txt").exists());
    }
    assert_eq!(metrics[0], metrics[1]);
}
