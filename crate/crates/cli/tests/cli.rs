use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SPEC: &str = "samples = 64\nn_tokens = 4\nn_patches = 3\nd_text = 8\nd_image = 6\nseed = 2\n";
const CONFIG: &str = "d_model = 8\nd_text = 8\nd_image = 6\nn_tokens = 4\nn_patches = 3\nheads = 2\nlatent_dim = 8\nepochs = 2\nbatch_size = 16\nseed = 4\n";

fn urmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urmf"))
        .args(args)
        .output()
        .expect("spawn urmf")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the tiny spec and config and synthesizes a dataset.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = dir.join("spec.txt");
    let config = dir.join("config.txt");
    let data = dir.join("data.bin");
    std::fs::write(&spec, SPEC).unwrap();
    std::fs::write(&config, CONFIG).unwrap();
    let out = urmf(&["synth", "--spec", s(&spec), "--out", s(&data)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    (config, data)
}

#[test]
fn train_twice_gives_identical_loss_csv_and_eval_works() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = fixture(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = urmf(&[
            "train",
            "--config",
            s(&config),
            "--data",
            s(&data),
            "--out",
            s(out),
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let la = std::fs::read(a.join("loss.csv")).unwrap();
    assert_eq!(la, std::fs::read(b.join("loss.csv")).unwrap());
    let text = String::from_utf8(la).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,total,task,kl_ib,reg,align,ucl");
    assert_eq!(lines.len(), 3);

    let csv = dir.path().join("metrics.csv");
    let r = urmf(&[
        "eval",
        "--model",
        s(&a),
        "--data",
        s(&data),
        "--csv",
        s(&csv),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8(r.stdout).unwrap();
    assert!(stdout.contains("accuracy"), "{stdout}");
    let metrics = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(
        metrics.starts_with("samples,accuracy,precision,recall,f1"),
        "{metrics}"
    );
}

#[test]
fn gradcheck_exit_codes() {
    let ok = urmf(&["gradcheck"]);
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stdout)
    );
    assert_eq!(String::from_utf8_lossy(&ok.stdout).lines().count(), 6);
    // No finite-difference estimate agrees to 1e-13.
    let fail = urmf(&["gradcheck", "--tol", "1e-13"]);
    assert_eq!(fail.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&fail.stdout).contains("FAIL"));
}

#[test]
fn ablate_and_robustness_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = fixture(dir.path());
    std::fs::write(
        &config,
        format!("{CONFIG}epochs = 1\n").replace("epochs = 2\n", ""),
    )
    .unwrap();

    let abl = dir.path().join("abl.csv");
    let r = urmf(&[
        "ablate",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--seeds",
        "1",
        "--out",
        s(&abl),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let table = std::fs::read_to_string(&abl).unwrap();
    assert_eq!(table.lines().count(), 8);
    assert!(table.lines().last().unwrap().starts_with("full,"));

    let rob = dir.path().join("rob.csv");
    let r = urmf(&[
        "robustness",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--levels",
        "0,0.5",
        "--seeds",
        "1,2",
        "--out",
        s(&rob),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(
        std::fs::read_to_string(&rob).unwrap().lines().count(),
        1 + 2 * 2 * 2
    );
    let summary = String::from_utf8(r.stdout).unwrap();
    assert!(summary.lines().count() >= 3, "{summary}");
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = fixture(dir.path());
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "learning_rate = 0.1\n").unwrap();
    let r = urmf(&[
        "train",
        "--config",
        s(&bad),
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("m")),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("learning_rate"));

    let r = urmf(&[
        "eval",
        "--model",
        s(&dir.path().join("missing")),
        "--data",
        s(&data),
    ]);
    assert_eq!(r.status.code(), Some(2));

    // Default dimensions do not match the tiny dataset.
    let r = urmf(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("m")),
    ]);
    assert_eq!(r.status.code(), Some(2));
}
