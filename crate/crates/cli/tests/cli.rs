use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn facedyn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facedyn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = facedyn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = facedyn(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(
        err.trim_end().lines().count(),
        1,
        "diagnostic is not one line: {err}"
    );
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn records(dir: &Path) -> usize {
    fs::read_to_string(dir.join("manifest.jsonl"))
        .unwrap()
        .lines()
        .count()
}

const SMALL: [&str; 4] = ["--min-frames", "24", "--max-frames", "48"];

#[test]
fn synth_writes_the_requested_number_of_records() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let mut args = vec![
        "synth",
        "--speakers",
        "20",
        "--utterances",
        "50",
        "--seed",
        "7",
        "--out",
        s(&d),
    ];
    args.extend(SMALL);
    ok(&args);
    assert_eq!(records(&d), 1000);
    let echo = fs::read_to_string(d.join("run_config.toml")).unwrap();
    assert!(echo.contains("seed = 7"), "{echo}");

    // same inputs, same bytes
    let e = tmp.path().join("e");
    args[8] = s(&e);
    ok(&args);
    assert_eq!(
        fs::read(d.join("manifest.jsonl")).unwrap(),
        fs::read(e.join("manifest.jsonl")).unwrap()
    );
}

#[test]
fn flags_override_the_file_which_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        "[synth]\nnum_speakers = 6\nutterances_per_speaker = 10\nnoise_std = 0.2\n",
    )
    .unwrap();
    let d = tmp.path().join("d");
    let mut args = vec![
        "synth",
        "--config",
        s(&cfg),
        "--utterances",
        "12",
        "--out",
        s(&d),
    ];
    args.extend(SMALL);
    ok(&args);
    assert_eq!(records(&d), 72);
    let echo = fs::read_to_string(d.join("run_config.toml")).unwrap();
    assert!(echo.contains("num_speakers = 6"));
    assert!(echo.contains("utterances_per_speaker = 12"));
    assert!(echo.contains("noise_std = 0.2"));
    // untouched keys keep the built-in defaults
    assert!(echo.contains("sessions_per_speaker = 2"));
    assert!(echo.contains("lr = 0.001"));
}

#[test]
fn config_files_reject_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[synth]\nspeakers = 6\n").unwrap();
    let err = fails_with(
        &[
            "synth",
            "--config",
            s(&cfg),
            "--out",
            s(&tmp.path().join("d")),
        ],
        1,
    );
    assert!(err.contains("speakers"), "{err}");
    assert!(!tmp.path().join("d").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let err = fails_with(
        &[
            "train",
            "--stage",
            "classifier",
            "--manifest",
            "m.jsonl",
            "--out",
            s(tmp.path()),
        ],
        2,
    );
    assert!(err.contains("--from-checkpoint"), "{err}");
    fails_with(&["synth"], 2);
    fails_with(
        &[
            "eval",
            "--manifest",
            "nope.jsonl",
            "--checkpoint",
            "nope.fckp",
        ],
        2,
    );
    fails_with(
        &[
            "train",
            "--stage",
            "stage3",
            "--manifest",
            "m",
            "--out",
            "o",
        ],
        2,
    );
    fails_with(
        &["dnr", "--shape-stats", s(&tmp.path().join("missing.jsonl"))],
        2,
    );
}

#[test]
fn dnr_prints_the_hand_example() {
    let tmp = tempfile::tempdir().unwrap();
    let stats = tmp.path().join("stats.jsonl");
    fs::write(
        &stats,
        concat!(
            r#"{"speaker_id":"p","session_id":"s1","mean":[2.0],"std":[1.0]}"#,
            "\n",
            r#"{"speaker_id":"p","session_id":"s2","mean":[5.0],"std":[1.0]}"#,
            "\n",
            r#"{"speaker_id":"q","session_id":"s1","mean":[0.0],"std":[1.0]}"#,
            "\n",
        ),
    )
    .unwrap();
    let out = ok(&["dnr", "--shape-stats", s(&stats)]);
    let row = out.lines().find(|l| l.starts_with("p\t")).unwrap();
    assert!(row.ends_with("\t2.999997"), "{row}");
    assert!(out.contains("excluded (single session): q"));

    let bad = tmp.path().join("bad.jsonl");
    fs::write(
        &bad,
        concat!(
            r#"{"speaker_id":"p","session_id":"s1","mean":[2.0],"std":[1.0]}"#,
            "\n",
            r#"{"speaker_id":"p","session_id":"s2","mean":[5.0, 1.0],"std":[1.0, 1.0]}"#,
            "\n",
        ),
    )
    .unwrap();
    fails_with(&["dnr", "--shape-stats", s(&bad)], 1);
}

/// Option blocks of a `--help` page, keyed by the long flag.
fn help_blocks(page: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for line in page.lines() {
        let t = line.trim_start();
        let indent = line.len() - t.len();
        if (indent == 2 || indent == 6) && (t.starts_with("--") || t.starts_with('-')) {
            let flag = t
                .split_whitespace()
                .find(|w| w.starts_with("--"))
                .unwrap()
                .trim_end_matches(',')
                .trim_end_matches("...")
                .to_string();
            out.push((flag, format!("{t}\n")));
        } else if let Some(last) = out.last_mut() {
            last.1.push_str(t);
            last.1.push('\n');
        }
    }
    out
}

#[test]
fn help_lists_a_default_for_every_flag() {
    let switches = ["--help", "--version", "--verbose", "--json", "--no-files"];
    let required = [
        "--out",
        "--manifest",
        "--checkpoint",
        "--shape-stats",
        "--stage",
        "--kind",
    ];
    for cmd in [
        "synth", "validate", "train", "eval", "dnr", "analyze", "report",
    ] {
        let page = ok(&[cmd, "--help"]);
        let blocks = help_blocks(&page);
        assert!(!blocks.is_empty(), "{cmd}");
        for (flag, text) in &blocks {
            if switches.contains(&flag.as_str()) || required.contains(&flag.as_str()) {
                continue;
            }
            assert!(
                text.contains("[default: "),
                "{cmd} {flag} lacks a default:\n{text}"
            );
        }
    }

    let train = ok(&["train", "--help"]);
    let blocks = help_blocks(&train);
    let default_of = |flag: &str| {
        let text = &blocks.iter().find(|b| b.0 == flag).unwrap().1;
        let start = text.find("[default: ").unwrap() + 10;
        text[start..start + text[start..].find(']').unwrap()].to_string()
    };
    for (flag, want) in [
        ("--batch-size", "128"),
        ("--lr", "0.001"),
        ("--weight-decay", "0.0001"),
        ("--patience", "10"),
        ("--label-smoothing", "0.1"),
        ("--temperature", "0.07"),
        ("--gamma", "2"),
        ("--max-length", "300"),
        ("--arch", "conformer"),
    ] {
        assert_eq!(default_of(flag), want, "{flag}");
    }
    let analyze = ok(&["analyze", "--help"]);
    let blocks = help_blocks(&analyze);
    let bins = &blocks
        .iter()
        .find(|b| b.0 == "--bootstrap-iters")
        .unwrap()
        .1;
    assert!(bins.contains("[default: 1000]"));
}

const TINY: [&str; 20] = [
    "--embed-dim",
    "16",
    "--blocks",
    "1",
    "--heads",
    "2",
    "--hidden-dim",
    "8",
    "--ff-mult",
    "2",
    "--conv-kernel",
    "3",
    "--epochs",
    "2",
    "--batch-size",
    "16",
    "--max-length",
    "32",
    "--seed",
    "1",
];

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let mut args = vec![
        "synth",
        "--speakers",
        "4",
        "--utterances",
        "20",
        "--out",
        s(&data),
    ];
    args.extend(SMALL);
    args.extend(["--leakage-strata", "0,1"]);
    ok(&args);
    let manifest = data.join("manifest.jsonl");
    let stats = data.join("shape_stats.jsonl");
    assert!(data.join("strata.jsonl").exists());

    let v = ok(&["validate", "--manifest", s(&manifest)]);
    let report: serde_json::Value = serde_json::from_str(&v).unwrap();
    assert_eq!(report["num_records"], 80);

    let s1 = tmp.path().join("s1");
    let mut args = vec![
        "train",
        "--stage",
        "supcon",
        "--manifest",
        s(&manifest),
        "--out",
        s(&s1),
    ];
    args.extend(TINY);
    ok(&args);
    assert!(s1.join("run_config.toml").exists());
    let ck1 = s1.join("checkpoint.fckp");

    let s2 = tmp.path().join("s2");
    ok(&[
        "train",
        "--stage",
        "classifier",
        "--from-checkpoint",
        s(&ck1),
        "--manifest",
        s(&manifest),
        "--out",
        s(&s2),
        "--epochs",
        "2",
        "--max-length",
        "32",
    ]);
    let ck2 = s2.join("checkpoint.fckp");
    let echo = fs::read_to_string(s2.join("run_config.toml")).unwrap();
    assert!(
        echo.contains("embed_dim = 16"),
        "stage 2 echoes the frozen encoder"
    );

    let joint = tmp.path().join("joint");
    let mut args = vec![
        "train",
        "--stage",
        "joint",
        "--manifest",
        s(&manifest),
        "--out",
        s(&joint),
    ];
    args.extend(TINY);
    ok(&args);

    let eval = [
        "eval",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ck2),
        "--max-length",
        "32",
    ];
    let first = ok(&eval);
    assert_eq!(first, ok(&eval));
    let metrics: serde_json::Value = serde_json::from_str(&first).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    // a stage-1 checkpoint has no classifier
    fails_with(
        &["eval", "--manifest", s(&manifest), "--checkpoint", s(&ck1)],
        1,
    );

    let base = [
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ck2),
        "--max-length",
        "32",
    ];
    let length = ok(&[
        &["analyze", "--kind", "length", "--lengths", "16,32"][..],
        &base,
    ]
    .concat());
    assert_eq!(length.lines().count(), 3);
    assert!(length.starts_with("length\taccuracy\tmacro_f1\tGA_accuracy"));
    let enroll = ok(&[&["analyze", "--kind", "enrollment"][..], &base].concat());
    assert!(enroll.starts_with("train_utterances\tpersons"));
    fails_with(
        &[&["analyze", "--kind", "dnr-recall"][..], &base].concat(),
        2,
    );
    let dnr = ok(&[
        &[
            "analyze",
            "--kind",
            "dnr-recall",
            "--bins",
            "1",
            "--shape-stats",
            s(&stats),
        ][..],
        &base,
    ]
    .concat());
    assert!(dnr.contains("# spearman"), "{dnr}");

    let rep = tmp.path().join("report");
    let rep_args = [
        &[
            "report",
            "--out",
            s(&rep),
            "--shape-stats",
            s(&stats),
            "--bins",
            "1",
        ][..],
        &base,
    ]
    .concat();
    ok(&rep_args);
    let mut names: Vec<String> = fs::read_dir(&rep)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 13, "{names:?}");
    let hash = names[0]
        .rsplit('_')
        .next()
        .unwrap()
        .split('.')
        .next()
        .unwrap()
        .to_string();
    assert_eq!(hash.len(), 12);
    assert!(names.iter().all(|n| n.contains(&hash)));
    for stem in ["dnr_recall", "length", "enrollment"] {
        let svg = fs::read_to_string(rep.join(format!("{stem}_{hash}.svg"))).unwrap();
        assert!(svg.starts_with("<svg"));
    }
    let before: Vec<Vec<u8>> = names
        .iter()
        .map(|n| fs::read(rep.join(n)).unwrap())
        .collect();
    ok(&rep_args);
    let after: Vec<Vec<u8>> = names
        .iter()
        .map(|n| fs::read(rep.join(n)).unwrap())
        .collect();
    assert_eq!(before, after);
}
