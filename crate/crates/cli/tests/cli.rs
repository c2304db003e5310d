use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vagcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vagcn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vagcn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    vagcn(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(path: &Path, points: &str, seed: &str) {
    ok(&["gen-data", "--classes", "sphere,cube,torus", "--per-class", "3", "--points", points, "--seed", seed, "--out", p(path)]);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    gen(&a, "32", "4");
    gen(&b, "32", "4");
    gen(&c, "32", "5");
    let read = |f: &Path| std::fs::read(f).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&["gen-data", "--classes", "blob", "--out", p(&out)]), 2);
    assert_eq!(code(&["train", "--print-config", "--bogus", "1"]), 2);
    assert_eq!(code(&["train", "--print-config", "--k", "many"]), 2);
    assert_eq!(code(&["train", "--print-config", "--radii", "0.1,0.2"]), 2);
    assert_eq!(code(&["bench", "--reps", "4"]), 2);

    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "k = 5\nnot_a_key = 1\n").unwrap();
    let res = vagcn(&["train", "--print-config", "--config", p(&cfg)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("not_a_key"));
}

#[test]
fn print_config_resolves_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\nk = 12\nepochs = 9\nchannel_variant = edgeconv_only\n").unwrap();
    let text = ok(&[
        "train", "--print-config", "--config", p(&cfg), "--k", "7", "--variant", "v1", "--agg", "weighted_max",
        "--radii", "0.1,0.2/0.3,0.35/0.4,0.5",
    ]);
    for line in [
        "k = 7",
        "epochs = 9",
        "channel_variant = edgeconv_only",
        "parallel_variant = v1",
        "aggregation_mode = weighted_max",
        "radii_layer1 = 0.1,0.2",
        "radii_layer2 = 0.3,0.35",
        "radii_fusion = 0.4,0.5",
    ] {
        assert!(text.lines().any(|l| l == line), "missing {line:?} in\n{text}");
    }
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (data, large, model, metrics) = (
        dir.path().join("d.vapc"),
        dir.path().join("l.vapc"),
        dir.path().join("m.vagw"),
        dir.path().join("m.jsonl"),
    );
    gen(&data, "48", "1");
    gen(&large, "96", "2");
    let summary: Value = serde_json::from_str(&ok(&[
        "train", "--data", p(&data), "--preset", "micro", "--k", "6", "--epochs", "2", "--seed", "3",
        "--out", p(&model), "--metrics", p(&metrics), "--threads", "1",
    ]))
    .unwrap();
    assert!(summary["final"]["oa"].is_number());
    assert!(model.exists() && dir.path().join("m.vagw.json").exists());

    let lines: Vec<Value> = std::fs::read_to_string(&metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3, "header plus one line per epoch");
    assert_eq!(lines[0]["threads"], 1);
    assert_eq!(lines[0]["model"]["k"], 6);
    assert_eq!(lines[2]["epoch"], 1);

    let plain: Value = serde_json::from_str(&ok(&["eval", "--data", p(&data), "--model", p(&model)])).unwrap();
    let msi: Value = serde_json::from_str(&ok(&["eval", "--data", p(&data), "--model", p(&model), "--msi", "1"])).unwrap();
    assert_eq!(plain["oa"], msi["oa"]);
    assert_eq!(plain["mca"], msi["mca"]);

    // Larger clouds evaluate both ways.
    ok(&["eval", "--data", p(&large), "--model", p(&model)]);
    let many: Value = serde_json::from_str(&ok(&["eval", "--data", p(&large), "--model", p(&model), "--msi", "3"])).unwrap();
    assert_eq!(many["msi"], 3);

    // Fewer points, or segmentation payloads, do not fit this checkpoint.
    let small = dir.path().join("s.vapc");
    gen(&small, "24", "1");
    assert_eq!(code(&["eval", "--data", p(&small), "--model", p(&model)]), 4);
    let parts = dir.path().join("p.vapc");
    ok(&["gen-data", "--task", "part_segmentation", "--per-class", "1", "--points", "48", "--out", p(&parts)]);
    assert_eq!(code(&["eval", "--data", p(&parts), "--model", p(&model)]), 4);

    // A checkpoint whose widths differ from the configuration.
    assert_eq!(code(&["eval", "--data", p(&data), "--model", p(&model), "--stem_width", "12"]), 4);

    // Corrupt checkpoint.
    let junk = dir.path().join("junk.vagw");
    std::fs::write(&junk, b"NOPE0000").unwrap();
    assert_eq!(code(&["eval", "--data", p(&data), "--model", p(&junk), "--preset", "micro", "--k", "6"]), 4);
}

#[test]
fn gradcheck_subset() {
    let text = ok(&["gradcheck", "--only", "leaky"]);
    assert!(text.contains("leaky_relu") && text.contains("ok"));
    assert_eq!(code(&["gradcheck", "--only", "no_such_item"]), 2);
}

#[test]
fn bench_prints_csv() {
    let text = ok(&["bench", "--sizes", "64", "--ks", "4", "--reps", "5"]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "op,n,k,median_us,min_us");
    let ops: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ops, ["knn_bruteforce", "knn_grid", "vaconv_forward"]);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 5);
        let (med, min): (f64, f64) = (f[3].parse().unwrap(), f[4].parse().unwrap());
        assert!(min <= med);
    }
}
