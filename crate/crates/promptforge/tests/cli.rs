use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptforge")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_run_eval_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = ok(&cli(&["gen-data", "--classes", "4", "--per-class", "10", "--seed", "2", "--out", s(&data)]));
    assert!(out.contains("40 images"));
    assert!(data.join("00_red_square/00009.ppm").exists());

    let config = dir.path().join("exp.cfg");
    let results = dir.path().join("results");
    std::fs::write(
        &config,
        format!(
            "# tiny sweep\nepochs=1\nshots=3\nmethods=coop,full\nseeds=1\ndata_dir={}\nout_dir={}\n",
            data.display(),
            results.display()
        ),
    )
    .unwrap();
    let table = ok(&cli(&["run", "--config", s(&config)]));
    assert!(table.contains("| full |"));
    for f in ["results.csv", "summary.csv", "summary.md", "per_class.csv"] {
        assert!(results.join(f).exists(), "{f}");
    }
    let ck = results.join("checkpoints/full_seed1.ckpt");

    let eval = ok(&cli(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--split", "new"]));
    assert!(eval.starts_with("method,split,accuracy\nfull,new,"));
    let both = ok(&cli(&["eval", "--checkpoint", s(&ck)]));
    assert!(both.contains("full,hos,"));

    let heat = dir.path().join("map.pgm");
    ok(&cli(&["heatmap", "--checkpoint", s(&ck), "--image", "0", "--class", "1", "--out", s(&heat)]));
    let pgm = std::fs::read_to_string(&heat).unwrap();
    assert!(pgm.starts_with("P2\n"));
    assert!(pgm.contains("\n4 4\n255\n"));
    assert_eq!(std::fs::read_to_string(heat.with_extension("csv")).unwrap().lines().count(), 4);
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "learning_rate=0.1\n").unwrap();
    let out = cli(&["run", "--config", s(&bad)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = cli(&["gen-data", "--classes", "17", "--out", s(&dir.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("16"));

    let out = cli(&["eval", "--checkpoint", s(&dir.path().join("missing.ckpt"))]);
    assert!(!out.status.success());
}
