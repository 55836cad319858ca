use std::fs;
use std::process::Command;

use fire_cli::data::{fragment_csv, load_csv_dataset, load_csv_pair, read_raw_csv, write_fragment_csv};
use fire_cli::{execute, parse_config, CliError};
use fire_core::model::{Example, Fragment, Provenance};
use fire_core::numkernel::Rng;

fn write_tmp(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn labels_follow_first_appearance() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_tmp(&dir, "t.csv", "a,b,label\n1,2,B\n3,4,A\n5,7,B\n");
    let f = load_csv_dataset(&p, "label").unwrap();
    let ids: Vec<usize> = f.examples.iter().map(|e| e.y).collect();
    assert_eq!(ids, vec![0, 1, 0]);
    // row order is kept
    assert!(f.examples[0].x[0] < f.examples[1].x[0] && f.examples[1].x[0] < f.examples[2].x[0]);
}

#[test]
fn standardized_columns_have_zero_mean_unit_variance() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(3);
    let mut text = String::from("label,u,v,w\n");
    for i in 0..257 {
        text.push_str(&format!("c{},{},{},{}\n", i % 3, 10.0 + 3.0 * rng.normal(), -4.0 + 0.01 * rng.normal(), 1e6 * rng.uniform()));
    }
    let f = load_csv_dataset(&write_tmp(&dir, "s.csv", &text), "label").unwrap();
    let n = f.n() as f64;
    for j in 0..3 {
        let mean = f.examples.iter().map(|e| e.x[j]).sum::<f64>() / n;
        let var = f.examples.iter().map(|e| (e.x[j] - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 1e-12, "column {j} mean {mean}");
        assert!((var - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn validation_uses_training_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let tr = write_tmp(&dir, "tr.csv", "x,label\n0,a\n2,b\n");
    let va = write_tmp(&dir, "va.csv", "x,label\n4,c\n1,b\n");
    let (a, b, classes) = load_csv_pair(&tr, &va, "label").unwrap();
    assert_eq!(classes, 3);
    assert_eq!(a.examples[0].x, vec![-1.0]);
    assert_eq!(b.examples[0].x, vec![3.0]);
    assert_eq!(b.examples.iter().map(|e| e.y).collect::<Vec<_>>(), vec![2, 1]);
}

#[test]
fn fragment_round_trips_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(5);
    let ex: Vec<Example> = (0..50).map(|i| Example::new((0..4).map(|_| rng.normal()).collect(), i % 2)).collect();
    let frag = Fragment::new("f", ex, Provenance::Batch(0)).unwrap();
    let p = dir.path().join("f.csv");
    write_fragment_csv(&frag, &p).unwrap();
    let raw = read_raw_csv(&p, "label").unwrap();
    for (r, e) in raw.features.iter().zip(&frag.examples) {
        for (a, b) in r.iter().zip(&e.x) {
            assert!((a - b).abs() <= 1e-15);
        }
    }
    // standardized data is a fixed point of standardization up to rounding
    let std = fire_cli::data::Standardizer::fit(&frag.examples.iter().map(|e| e.x.clone()).collect::<Vec<_>>());
    let z: Vec<Example> = frag.examples.iter().map(|e| Example::new(std.apply(&e.x), e.y)).collect();
    let z = Fragment::new("z", z, Provenance::Batch(0)).unwrap();
    write_fragment_csv(&z, &p).unwrap();
    let back = load_csv_dataset(&p, "label").unwrap();
    for (a, b) in back.examples.iter().zip(&z.examples) {
        for (u, v) in a.x.iter().zip(&b.x) {
            assert!((u - v).abs() <= 1e-15, "{u} vs {v}");
        }
    }
    assert_eq!(fragment_csv(&frag).lines().next().unwrap(), "x0,x1,x2,x3,label");
}

#[test]
fn malformed_csv_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("ragged.csv", "a,b,label\n1,2,x\n3,y\n"),
        ("nonnum.csv", "a,label\n1,x\nfoo,y\n"),
        ("nolabel.csv", "a,label\n1,x\n2,\n"),
        ("nocol.csv", "a,b\n1,2\n"),
        ("empty.csv", "a,label\n"),
    ] {
        let err = load_csv_dataset(&write_tmp(&dir, name, text), "label").unwrap_err();
        assert!(matches!(err, CliError::Data(_)), "{name}: {err}");
        assert_eq!(err.exit_code(), 2);
    }
}

#[test]
fn batch_runs_agree_only_when_lambda_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let run = |lambda: f64, name: &str| {
        let out = dir.path().join(name);
        let cfg = parse_config(&format!(
            "mode = batch\ntrain.lambda = {lambda}\ntrain.epochs = 3\ntrain.eta = 0.05\noutput_dir = {}\n",
            out.display()
        ))
        .unwrap();
        execute(&cfg).unwrap();
        (fs::read_to_string(out.join("trace.csv")).unwrap(), fs::read_to_string(out.join("trace_baseline.csv")).unwrap())
    };
    let (zero, zero_base) = run(0.0, "zero");
    let (pos, pos_base) = run(0.1, "pos");
    assert_eq!(zero, zero_base);
    assert_eq!(zero_base, pos_base);
    assert_ne!(pos, pos_base);
    // the first step starts from the same parameters; the second no longer does
    let row = |s: &str, i: usize| s.lines().nth(i).unwrap().split(',').nth(3).unwrap().to_string();
    assert_eq!(row(&pos, 1), row(&pos_base, 1));
    assert_ne!(row(&pos, 2), row(&pos_base, 2));
}

#[test]
fn csv_mode_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(8);
    let mut text = String::from("f1,f2,f3,cls\n");
    for i in 0..120 {
        let c = i % 2;
        text.push_str(&format!("{},{},{},{}\n", c as f64 + rng.normal(), rng.normal(), 5.0 * rng.normal(), ["yes", "no"][c]));
    }
    let data = write_tmp(&dir, "d.csv", &text);
    let out = dir.path().join("out");
    let cfg = parse_config(&format!(
        "mode = folds\ndataset.kind = csv\ndataset.path = {}\ndataset.label_column = cls\nmodel.hidden = 4\n\
         shift.kind = tabular_bias\nshift.strength = 2\ndataset.fragments = 3\ntrain.epochs = 2\noutput_dir = {}\n",
        data.display(),
        out.display()
    ))
    .unwrap();
    execute(&cfg).unwrap();
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("derived.num_classes = 2"));
    assert!(manifest.contains("derived.input_dim = 3"));
    assert_eq!(fs::read_to_string(out.join("trace.csv")).unwrap().lines().count(), 1 + 2 * 3);
}

#[test]
fn binary_exit_codes_follow_error_category() {
    let bin = env!("CARGO_BIN_EXE_fire");
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| Command::new(bin).args(args).current_dir(dir.path()).output().unwrap().status.code().unwrap();
    write_tmp(&dir, "bad.cfg", "mode = batch\nnot.a.key = 1\n");
    assert_eq!(code(&["run", "bad.cfg"]), 1);
    assert_eq!(code(&["run", "missing.cfg"]), 4);
    write_tmp(&dir, "data.cfg", "mode = batch\ndataset.kind = csv\ndataset.path = nothere.csv\n");
    assert_eq!(code(&["run", "data.cfg"]), 4);
    write_tmp(&dir, "tr.csv", "x,y,label\n1,2,a\n3,oops,b\n");
    assert_eq!(code(&["diagnose", "tr.csv", "tr.csv", "--label", "label"]), 2);
    write_tmp(&dir, "frag.cfg", "mode = batch\ndataset.n = 5\ndataset.fragments = 10\n");
    assert_eq!(code(&["run", "frag.cfg"]), 2);
    assert_eq!(code(&["verify-theory", "--trials", "50", "--out", "th"]), 0);
    let theory = fs::read_to_string(dir.path().join("th/theory.csv")).unwrap();
    assert_eq!(theory.lines().count(), 51);
}

#[test]
fn diagnose_subcommand_writes_one_row_per_fragment() {
    let bin = env!("CARGO_BIN_EXE_fire");
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(9);
    let mut tr = String::from("a,b,label\n");
    let mut va = String::from("a,b,label\n");
    for i in 0..200 {
        tr.push_str(&format!("{},{},{}\n", 1.0 + rng.normal(), rng.normal(), i % 2));
        va.push_str(&format!("{},{},{}\n", rng.normal(), rng.normal(), i % 2));
    }
    write_tmp(&dir, "tr.csv", &tr);
    write_tmp(&dir, "va.csv", &va);
    let st = Command::new(bin)
        .args(["diagnose", "tr.csv", "va.csv", "--label", "label", "--fragments", "2", "--out", "dg"])
        .env("FIRE_THREADS", "1")
        .current_dir(dir.path())
        .status()
        .unwrap();
    assert!(st.success());
    let csv = fs::read_to_string(dir.path().join("dg/diagnostics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
