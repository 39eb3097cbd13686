use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bknet_cli::dataset::{load_cifar, load_idx, CIFAR_RECORD};
use bknet_cli::report::{git_blob_sha1, RunReport, TABLE_HEADER};
use bknet_core::arch;
use bknet_core::graph::format::{load_model, to_bytes};
use serde_json::Value;

fn bknet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bknet"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env_remove("BK_THREADS")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Small, fast synthetic run.
const SMALL: &str = r#"
seed = 11
[dataset.synthetic]
train = 240
test = 90
[pretrain]
epochs = 3
batch_size = 32
base_lr = 0.05
[retrain]
epochs = 2
batch_size = 32
base_lr = 0.05
schedule = "constant"
alternation_interval = 1
[finetune]
epochs = 1
batch_size = 32
"#;

fn setup(dir: &Path, extra: &str) -> PathBuf {
    let cfg = dir.join("run.toml");
    let run = dir.join("run");
    fs::write(&cfg, format!("out_dir = {:?}\n{SMALL}{extra}", run.to_str().unwrap())).unwrap();
    cfg
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn zero_epoch_pretrain_saves_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let out = dir.path().join("zero");
    ok(&bknet(&["pretrain", "--config", s(&cfg), "--out", s(&out), "--seed", "5"]));
    let text = fs::read_to_string(&cfg).unwrap().replace("epochs = 3", "epochs = 0");
    let cfg0 = dir.path().join("zero.toml");
    fs::write(&cfg0, text).unwrap();
    ok(&bknet(&["pretrain", "--config", s(&cfg0), "--out", s(&out), "--seed", "5"]));
    let saved = fs::read(out.join("00-pretrain.bknet")).unwrap();
    let fresh = arch::preset("toy-cnn", arch::TOY_INPUT, 3, 5).unwrap();
    assert_eq!(saved, to_bytes(&fresh).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(
        &bad,
        "[dataset]\nkind = \"cifar10-binary\"\ntrain = [\"missing.bin\"]\ntest = [\"missing.bin\"]\n",
    )
    .unwrap();
    let out = bknet(&["pretrain", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.bin"));

    fs::write(&bad, "[model]\narch = \"alexnet\"\n").unwrap();
    assert_eq!(bknet(&["pretrain", "--config", s(&bad)]).status.code(), Some(2));
    assert_eq!(bknet(&["eval", "--model", "/nonexistent.bknet"]).status.code(), Some(2));
    assert_eq!(bknet(&["frobnicate"]).status.code(), Some(2));

    // pruning a dense model is a phase failure
    let cfg = setup(dir.path(), "");
    let model = dir.path().join("dense.bknet");
    fs::write(&model, to_bytes(&arch::toy_cnn(3, 0)).unwrap()).unwrap();
    let out = bknet(&["prune", "--config", s(&cfg), "--model", s(&model)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prune"));
}

#[test]
fn cifar_reader_matches_byte_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for r in 0..3u32 {
        bytes.push((r * 3 % 10) as u8);
        bytes.extend((0..3072u32).map(|i| ((i * 7 + r * 13) % 256) as u8));
    }
    assert_eq!(bytes.len(), 3 * CIFAR_RECORD);
    let path = dir.path().join("data_batch_1.bin");
    fs::write(&path, &bytes).unwrap();
    let ds = load_cifar(&[path.clone(), path]).unwrap();
    assert_eq!(ds.len(), 6);
    assert_eq!(ds.labels[..3], [0, 3, 6]);
    assert_eq!(ds.images.shape(), &[6, 3, 32, 32]);
    // first record: label byte, then red, green, blue planes row-major
    for i in 0..3072 {
        assert_eq!(ds.images.data()[i], bytes[1 + i] as f32 / 255.0);
    }
    assert_eq!(ds.images.at(&[0, 1, 2, 5]), bytes[1 + 1024 + 2 * 32 + 5] as f32 / 255.0);
}

#[test]
fn idx_reader_loads_images_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = vec![0, 0, 8, 3];
    for d in [4u32, 2, 3] {
        img.extend(d.to_be_bytes());
    }
    img.extend((0..24u8).map(|v| v * 10));
    let mut lab = vec![0, 0, 8, 1];
    lab.extend(4u32.to_be_bytes());
    lab.extend([1u8, 0, 2, 1]);
    let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    fs::write(&ip, &img).unwrap();
    fs::write(&lp, &lab).unwrap();
    let ds = load_idx(&ip, &lp, None).unwrap();
    assert_eq!(ds.images.shape(), &[4, 1, 2, 3]);
    assert_eq!(ds.num_classes, 3);
    assert_eq!(ds.labels, [1, 0, 2, 1]);
    assert_eq!(ds.images.data()[7], 70.0 / 255.0);
    lab.pop();
    fs::write(&lp, &lab).unwrap();
    assert!(load_idx(&ip, &lp, None).is_err());
}

fn rehash(dir: &Path, report: &RunReport) {
    for a in &report.artifacts {
        let bytes = fs::read(dir.join(&a.path)).unwrap();
        assert_eq!(git_blob_sha1(&bytes), a.sha1, "{}", a.path);
        assert_eq!(bytes.len() as u64, a.bytes);
    }
}

fn files(dir: &Path) -> Vec<(String, String)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                git_blob_sha1(&fs::read(&p).unwrap()),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn compress_resume_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let run = dir.path().join("run");
    ok(&bknet(&["pretrain", "--config", s(&cfg)]));
    let table = ok(&bknet(&["compress", "--config", s(&cfg)]));
    assert!(table.starts_with(TABLE_HEADER));

    let report = RunReport::load(&run.join("run_report.json")).unwrap();
    let names: Vec<&str> = report.phases.iter().map(|p| p.phase.as_str()).collect();
    assert_eq!(names, ["decompose", "retrain", "prune", "shrink", "finetune"]);
    assert!(report.phase("prune").unwrap().sparsity.as_ref().unwrap().sparsity > 0.0);
    assert_eq!(report.started, 1_700_000_000);
    rehash(&run, &report);
    let input = fs::read(run.join("00-pretrain.bknet")).unwrap();
    assert_eq!(report.input_model.sha1, git_blob_sha1(&input));
    for stem in ["01-decompose", "02-retrain", "03-prune", "04-shrink", "05-finetune"] {
        load_model(run.join(format!("{stem}.bknet"))).unwrap();
    }
    let first = files(&run);

    // resuming from a middle phase reproduces every artifact
    for from in ["prune", "retrain"] {
        ok(&bknet(&["compress", "--config", s(&cfg), "--from", from]));
        let now = files(&run);
        let diff: Vec<_> = now.iter().filter(|f| !first.contains(f)).map(|f| &f.0).collect();
        assert!(diff.is_empty(), "--from {from}: {diff:?}");
        assert_eq!(now.len(), first.len());
    }

    // a second run directory with the same config and seed is bit-identical
    let again = dir.path().join("again");
    ok(&bknet(&["pretrain", "--config", s(&cfg), "--out", s(&again)]));
    ok(&bknet(&["compress", "--config", s(&cfg), "--out", s(&again)]));
    let strip = |v: Vec<(String, String)>| -> Vec<(String, String)> {
        v.into_iter().filter(|(n, _)| n != "run_report.json").collect()
    };
    assert_eq!(strip(files(&again)), strip(first.clone()));
    let a: Value = serde_json::from_slice(&fs::read(again.join("run_report.json")).unwrap()).unwrap();
    let b: Value = serde_json::from_slice(&fs::read(run.join("run_report.json")).unwrap()).unwrap();
    // only the echoed out_dir differs
    assert_eq!(a["phases"], b["phases"]);
    assert_eq!(a["artifacts"], b["artifacts"]);

    // eval is repeatable; report emits both tables
    let e1 = ok(&bknet(&["eval", "--config", s(&cfg), "--model", s(&run.join("05-finetune.bknet"))]));
    let e2 = ok(&bknet(&["eval", "--config", s(&cfg), "--model", s(&run.join("05-finetune.bknet"))]));
    assert_eq!(e1, e2);
    let v: Value = serde_json::from_str(&e1).unwrap();
    let acc = v["accuracy"].as_f64().unwrap();
    assert_eq!(acc, report.phases[4].accuracy_after);
    let rep = ok(&bknet(&["report", s(&run)]));
    assert!(rep.contains("layer,width_before,width_after,d_before,d_after,nnz"));
    assert_eq!(fs::read_to_string(run.join("table.csv")).unwrap(), table);
}

#[test]
fn single_phase_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let out = dir.path().join("steps");
    let o = |a: &[&str]| {
        let mut v = vec!["--config", s(&cfg), "--out", s(&out)];
        v.extend_from_slice(a);
        ok(&bknet(&v))
    };
    o(&["pretrain"]);
    let mut model = out.join("00-pretrain.bknet");
    for (cmd, stem) in [
        ("decompose", "01-decompose"),
        ("retrain", "02-retrain"),
        ("prune", "03-prune"),
        ("shrink", "04-shrink"),
        ("finetune", "05-finetune"),
    ] {
        let json = o(&[cmd, "--model", s(&model)]);
        let v: Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["phase"], cmd);
        model = out.join(format!("{stem}.bknet"));
        assert!(model.is_file());
    }
}

#[test]
fn bench_emits_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let model = dir.path().join("m.bknet");
    let (net, _) = bknet_core::decompose::decompose_network(
        &arch::toy_cnn(3, 1),
        &Default::default(),
    )
    .unwrap();
    fs::write(&model, to_bytes(&net).unwrap()).unwrap();
    let out = dir.path().join("bench");
    let json = ok(&bknet(&[
        "bench", "--config", s(&cfg), "--out", s(&out), "--model", s(&model), "--reps", "5", "--batch", "2",
    ]));
    let v: Value = serde_json::from_str(&json).unwrap();
    assert!(v["machine"].is_string());
    assert_eq!(v["repetitions"], 5);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        for key in ["variant", "batch", "median_ms", "p95_ms", "stage1_ms", "stage2_ms", "peak_mb"] {
            assert!(!r[key].is_null(), "{key}");
        }
    }
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    assert!(csv.starts_with("variant,batch,median_ms,p95_ms,stage1_ms,stage2_ms,peak_mb"));
    assert_eq!(
        bknet(&["bench", "--config", s(&cfg), "--out", s(&out), "--model", s(&model), "--reps", "4"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn lossless_settings_cost_only_the_basis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(
        dir.path(),
        "[decompose]\ndefault_d = 9\n[prune]\nsensitivity = 0.0\n",
    );
    // a converged baseline, so retraining has nothing left to gain
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("[retrain]\n", "[retrain]\ngamma = 0.0\n")
        .replace("epochs = 3", "epochs = 25");
    fs::write(&cfg, text).unwrap();
    let run = dir.path().join("run");
    ok(&bknet(&["pretrain", "--config", s(&cfg)]));
    ok(&bknet(&["compress", "--config", s(&cfg)]));
    let report = RunReport::load(&run.join("run_report.json")).unwrap();
    let last = report.phases.last().unwrap();
    assert!(
        (last.accuracy_after - report.baseline_accuracy).abs() <= 0.005,
        "{} vs {}",
        last.accuracy_after,
        report.baseline_accuracy
    );
    assert_eq!(last.sparsity, None);
    assert_eq!(report.phase("prune").unwrap().sparsity.as_ref().unwrap().nnz,
        report.phase("prune").unwrap().sparsity.as_ref().unwrap().total);
    let f = &last.flops;
    assert!(f.stage1_macs > 0 && f.stage2_macs > 0);
    // four 3x3 convs each gain a 9x9 basis
    let base = report.baseline_flops.params_total as f64;
    let r_param = 100.0 * (1.0 - (base + 4.0 * 81.0) / base);
    let table = bknet_cli::report::table_rows(&report);
    let last_row = table.last().unwrap();
    assert_eq!(last_row.params as f64, base + 324.0);
    let printed = fs::read_to_string(run.join("table.csv"));
    assert!(printed.is_err(), "report not yet run");
    let out = ok(&bknet(&["report", s(&run)]));
    let line = out.lines().find(|l| l.starts_with("pruned,")).unwrap();
    let r: f64 = line.split(',').nth(5).unwrap().parse().unwrap();
    assert!((r - r_param).abs() <= 0.005 + 1e-9, "{r} vs {r_param}");
}
