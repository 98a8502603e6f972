use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use icafusion::io::{read_rawtensor, write_rawtensor};
use icafusion::Tensor;

fn icafusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icafusion"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{"height":4,"width":4,"channels":4,"heads":2,"ffn_hidden":8}"#;

#[test]
fn audit_reports_both_variants_and_the_table_discrepancy() {
    let o = icafusion(&["audit", "--t", "10", "--c", "3", "--h", "12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("600"), "{text}");
    assert!(text.contains("h=2C") && text.contains("h=4C"));

    let o = icafusion(&["audit", "--t", "5", "--c", "4", "--h", "8", "--csv"]);
    let csv = stdout(&o);
    assert!(csv.starts_with("variant,term,expression,value,counted\n"));
    assert!(csv.contains("ours,ffn,32TC,640,640"));

    assert!(!icafusion(&["audit", "--t", "0", "--c", "4", "--h", "8"]).status.success());
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"height":4,"width":6,"channels":3,"blob_count":3,"seed":42,"complementarity":0.5}"#).unwrap();
    for run in ["a_", "b_"] {
        let prefix = dir.path().join(run);
        let o = icafusion(&["gen", "--spec", arg(&spec), "--out-prefix", arg(&prefix)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["rgb", "thermal", "target"] {
        let a = fs::read(dir.path().join(format!("a_{name}.raw"))).unwrap();
        let b = fs::read(dir.path().join(format!("b_{name}.raw"))).unwrap();
        assert_eq!(a, b);
        let t: Tensor<f32> = read_rawtensor(&dir.path().join(format!("a_{name}.raw"))).unwrap();
        assert_eq!(t.shape(), &[4, 6, 3]);
    }
}

#[test]
fn init_then_fuse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, SMALL).unwrap();
    let weights = dir.path().join("w.icaf");
    let o = icafusion(&["init", "--config", arg(&cfg), "--seed", "3", "--out", arg(&weights)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let rgb = dir.path().join("rgb.raw");
    let thermal = dir.path().join("thermal.raw");
    write_rawtensor(&rgb, &Tensor::<f32>::full(&[4, 4, 4], 0.5)).unwrap();
    write_rawtensor(&thermal, &Tensor::<f32>::full(&[4, 4, 4], -0.25)).unwrap();

    for (mode, expect_rgb) in [("d", None), ("e", None), ("f-rgb", Some(0.5f32)), ("f-thermal", Some(-0.25))] {
        let out = dir.path().join(format!("out_{mode}.raw"));
        let o = icafusion(&[
            "fuse", "--rgb", arg(&rgb), "--thermal", arg(&thermal), "--weights", arg(&weights),
            "--mode", mode, "--out", arg(&out),
        ]);
        assert!(o.status.success(), "{mode}: {}", stderr(&o));
        let fused: Tensor<f32> = read_rawtensor(&out).unwrap();
        assert_eq!(fused.shape(), &[4, 4, 4]);
        if let Some(v) = expect_rgb {
            assert!(fused.data().iter().all(|&x| x == v));
        }
    }

    // Weights from mode D carry no shared CFE.
    let out = dir.path().join("out_c.raw");
    let o = icafusion(&[
        "fuse", "--rgb", arg(&rgb), "--thermal", arg(&thermal), "--weights", arg(&weights),
        "--mode", "c", "--out", arg(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing"), "{}", stderr(&o));

    let wrong = dir.path().join("wrong.raw");
    write_rawtensor(&wrong, &Tensor::<f32>::zeros(&[4, 2, 4])).unwrap();
    let o = icafusion(&[
        "fuse", "--rgb", arg(&wrong), "--thermal", arg(&thermal), "--weights", arg(&weights),
        "--out", arg(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let bytes = fs::read(&weights).unwrap();
    let cut = dir.path().join("cut.icaf");
    fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    let o = icafusion(&[
        "fuse", "--rgb", arg(&rgb), "--thermal", arg(&thermal), "--weights", arg(&cut),
        "--out", arg(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("truncated"), "{}", stderr(&o));

    assert!(!icafusion(&["fuse", "--rgb", arg(&rgb), "--thermal", arg(&thermal), "--weights", arg(&weights), "--mode", "z", "--out", arg(&out)]).status.success());
}

#[test]
fn gradcheck_exit_status_follows_the_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, SMALL).unwrap();
    let o = icafusion(&["gradcheck", "--config", arg(&cfg)]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("nin.w"));

    let o = icafusion(&["gradcheck", "--config", arg(&cfg), "--tol", "1e-300"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));

    fs::write(&cfg, r#"{"channels":4,"heads":3}"#).unwrap();
    assert_eq!(icafusion(&["gradcheck", "--config", arg(&cfg)]).status.code(), Some(2));
    fs::write(&cfg, r#"{"chanels":4}"#).unwrap();
    assert_eq!(icafusion(&["gradcheck", "--config", arg(&cfg)]).status.code(), Some(2));
}

#[test]
fn train_toy_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    fs::write(&cfg, format!(r#"{{"steps":10,"batch":2,"dmff":{SMALL}}}"#)).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let w = dir.path().join(format!("{run}.icaf"));
        let t = dir.path().join(format!("{run}.csv"));
        let o = icafusion(&[
            "train-toy", "--config", arg(&cfg), "--out-weights", arg(&w), "--trace", arg(&t),
            "--seed", "7",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push((fs::read(&w).unwrap(), fs::read_to_string(&t).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0].1.lines().count(), 11);

    fs::write(&cfg, format!(r#"{{"steps":30,"batch":2,"lr0":1e6,"dmff":{SMALL}}}"#)).unwrap();
    let w = dir.path().join("c.icaf");
    let t = dir.path().join("c.csv");
    let o = icafusion(&["train-toy", "--config", arg(&cfg), "--out-weights", arg(&w), "--trace", arg(&t)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}
