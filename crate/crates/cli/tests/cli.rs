//! Black-box tests of the `gapcoref` binary.

use std::path::Path;
use std::process::{Command, Output};

use gapcoref::data::write_gap_tsv;
use gapcoref::metrics::read_predictions_csv;
use gapcoref::synthetic::{generate, vocab_for_records};

const FIXTURE: &str = "ID\tText\tPronoun\tPronoun-offset\tA\tA-offset\tA-coref\tB\tB-offset\tB-coref\tURL
t-1\tJohn met Paul. He smiled.\tHe\t15\tJohn\t0\tTRUE\tPaul\t9\tFALSE\thttp://x
t-2\tMary met Anne. She smiled.\tShe\t15\tMary\t0\tFALSE\tAnne\t9\tTRUE\thttp://x
t-3\tJohn met Paul. She smiled.\tShe\t15\tJohn\t0\tFALSE\tPaul\t9\tFALSE\thttp://x
";

const TINY: &[&str] =
    &["-s", "num_layers=1", "-s", "hidden_dim=16", "-s", "num_heads=2", "-s", "ffn_dim=32", "-s", "epochs=1"];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gapcoref"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, contents: &str) {
    std::fs::write(dir.join(name), contents).unwrap();
}

#[test]
fn stats_on_fixture_and_empty_file() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "f.tsv", FIXTURE);
    write(d.path(), "empty.tsv", "");
    let out = stdout(&run(d.path(), &["stats", "f.tsv"]));
    assert_eq!(out, "total=3\nA=1\nB=1\nN=1\nmale=1\nfemale=2\n");
    let out = stdout(&run(d.path(), &["stats", "empty.tsv"]));
    assert_eq!(out, "total=0\nA=0\nB=0\nN=0\nmale=0\nfemale=0\n");
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "f.tsv", FIXTURE);
    assert_eq!(run(d.path(), &["train", "--kind", "svm", "--data", "f.tsv"]).status.code(), Some(2));
    assert_eq!(run(d.path(), &["train", "--data", "f.tsv", "-s", "epochs=0"]).status.code(), Some(2));
    assert_eq!(run(d.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(d.path(), &["stats", "missing.tsv"]).status.code(), Some(3));
    write(d.path(), "bad.tsv", "ID\tText\nx\ty\n");
    assert_eq!(run(d.path(), &["stats", "bad.tsv"]).status.code(), Some(3));
}

#[test]
fn folds_are_listed_per_record() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "s.tsv", &write_gap_tsv(&generate(20, 4)));
    let out = stdout(&run(d.path(), &["folds", "--data", "s.tsv", "--k", "5", "--seed", "3"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "ID\tfold");
    assert_eq!(lines.len(), 21);
    assert!(lines[1..].iter().all(|l| matches!(l.split('\t').nth(1), Some("0" | "1" | "2" | "3" | "4"))));
    assert_eq!(out, stdout(&run(d.path(), &["folds", "--data", "s.tsv", "--k", "5", "--seed", "3"])));
}

#[test]
fn train_echoes_effective_config() {
    let d = tempfile::tempdir().unwrap();
    let recs = generate(12, 8);
    write(d.path(), "s.tsv", &write_gap_tsv(&recs));
    let mut args = vec!["train", "--kind", "qa", "--data", "s.tsv", "--folds", "1", "--out-dir", "o"];
    args.extend(&TINY[..8]);
    args.extend(["-s", "epochs=2"]);
    let out = stdout(&run(d.path(), &args));
    assert!(out.contains("learning_rate = 1e-5\n"));
    assert!(out.contains("batch_size = 12\n"));
    assert!(out.contains("epochs = 2\n"));
    assert!(out.contains("kind = qa\n"));
    let saved = std::fs::read_to_string(d.path().join("o/config.txt")).unwrap();
    assert!(out.starts_with(&saved));
}

#[test]
fn train_predict_evaluate_round() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let recs = generate(32, 6);
    write(p, "train.tsv", &write_gap_tsv(&recs));
    write(p, "test.tsv", &write_gap_tsv(&generate(10, 7)));
    let mut args = vec!["train", "--kind", "seq", "--data", "train.tsv", "--test", "test.tsv", "--folds", "2"];
    args.extend(["--out-dir", "o", "--seed", "4"]);
    args.extend(TINY);
    stdout(&run(p, &args));
    for f in ["config.txt", "vocab.txt", "fold0.ckpt", "fold1.ckpt", "fold0.log.csv", "oof.csv", "test.csv"] {
        assert!(p.join("o").join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(p.join("o/fold0.log.csv")).unwrap();
    assert!(log.starts_with("step,lr,loss\n"));

    let test = read_predictions_csv(&std::fs::read_to_string(p.join("o/test.csv")).unwrap()).unwrap();
    assert_eq!(test.len(), 10);
    assert!(test.values().all(|t| t.is_simplex(1e-9)));
    let oof = read_predictions_csv(&std::fs::read_to_string(p.join("o/oof.csv")).unwrap()).unwrap();
    assert_eq!(oof.len(), 32);

    let pred = stdout(&run(
        p,
        &[
            "predict",
            "--checkpoint",
            "o/fold0.ckpt",
            "--checkpoint",
            "o/fold1.ckpt",
            "--data",
            "test.tsv",
            "--vocab",
            "o/vocab.txt",
            "--out",
            "pred.csv",
        ],
    ));
    assert!(pred.is_empty());
    let again = read_predictions_csv(&std::fs::read_to_string(p.join("pred.csv")).unwrap()).unwrap();
    for (id, t) in &test {
        let (a, b) = (t.as_array(), again[id].as_array());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-11), "{id}");
    }
    let report = stdout(&run(p, &["evaluate", "--pred", "o/oof.csv", "--gold", "train.tsv"]));
    assert!(report.contains("overall_f1="));
    assert!(report.contains("male_count=16\nfemale_count=16"));
}

#[test]
fn ensemble_behaviour() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let one = "ID,A,B,NEITHER\nx,0.5,0.25,0.25\ny,0.1,0.2,0.7\n";
    write(p, "one.csv", one);
    write(p, "two.csv", "ID,A,B,NEITHER\nx,0.25,0.5,0.25\ny,0.3,0.2,0.5\n");
    write(p, "other.csv", "ID,A,B,NEITHER\nz,0.25,0.5,0.25\ny,0.3,0.2,0.5\n");

    let single = read_predictions_csv(&stdout(&run(p, &["ensemble", "one.csv"]))).unwrap();
    assert_eq!(single, read_predictions_csv(one).unwrap());

    let avg = read_predictions_csv(&stdout(&run(p, &["ensemble", "one.csv", "two.csv"]))).unwrap();
    let want = [("x", [0.375, 0.375, 0.25]), ("y", [0.2, 0.2, 0.6])];
    for (id, w) in want {
        let got = avg[id].as_array();
        assert!(got.iter().zip(&w).all(|(a, b)| (a - b).abs() < 1e-12), "{id}: {got:?}");
    }
    assert_eq!(run(p, &["ensemble", "one.csv", "other.csv"]).status.code(), Some(3));
}

#[test]
fn evaluate_perfect_and_uniform() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    write(p, "gold.tsv", FIXTURE);
    write(p, "perfect.csv", "ID,A,B,NEITHER\nt-1,1,0,0\nt-2,0,1,0\nt-3,0,0,1\n");
    let u = 1.0 / 3.0;
    write(p, "uniform.csv", &format!("ID,A,B,NEITHER\nt-1,{u},{u},{u}\nt-2,{u},{u},{u}\nt-3,{u},{u},{u}\n"));
    let out = stdout(&run(p, &["evaluate", "--pred", "perfect.csv", "--gold", "gold.tsv"]));
    assert!(out.contains("overall_f1=1\n"), "{out}");
    assert!(out.contains("bias=1\n"), "{out}");
    let out = stdout(&run(p, &["evaluate", "--pred", "uniform.csv", "--gold", "gold.tsv"]));
    let ll: f64 = out.lines().find_map(|l| l.strip_prefix("log_loss=")).unwrap().parse().unwrap();
    assert!((ll - 3f64.ln()).abs() < 1e-9);
}

#[test]
fn extract_answers_stay_in_passage() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let recs = generate(16, 12);
    write(p, "s.tsv", &write_gap_tsv(&recs));
    write(p, "empty.tsv", "");
    write(p, "vocab.txt", &vocab_for_records(&recs).to_text());
    let mut args = vec!["train", "--data", "s.tsv", "--vocab", "vocab.txt", "--folds", "1", "--out-dir", "o"];
    args.extend(TINY);
    stdout(&run(p, &args));
    let base = ["--checkpoint", "o/fold0.ckpt", "--vocab", "vocab.txt", "--data"];
    let mut empty_args = vec!["extract-answers"];
    empty_args.extend(base);
    empty_args.push("empty.tsv");
    assert_eq!(stdout(&run(p, &empty_args)), "");

    let mut full_args = vec!["extract-answers"];
    full_args.extend(base);
    full_args.push("s.tsv");
    let out = stdout(&run(p, &full_args));
    assert_eq!(out.lines().count(), recs.len());
    for (line, r) in out.lines().zip(&recs) {
        let f: Vec<&str> = line.splitn(4, '\t').collect();
        assert_eq!(f[0], r.id);
        let (s, e): (usize, usize) = (f[1].parse().unwrap(), f[2].parse().unwrap());
        assert!(s < e && e <= r.text.chars().count(), "{line}");
        assert_eq!(r.text.chars().skip(s).take(e - s).collect::<String>(), f[3]);
    }
}
