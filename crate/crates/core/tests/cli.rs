use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, sub: &str, config: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsamgn"))
        .current_dir(dir)
        .args([sub, "--config", config])
        .output()
        .unwrap()
}

const CONFIG: &str = r#"
data = "out/data.dsc"
checkpoint = "out/model.dsc"
out_dir = "out"

[synthetic]
n_identities = 4
samples_per_identity = 3
channels = 8
noise_patch_count = 2

[train]
epochs = 3
pk_p = 2
pk_k = 2

[ablate]
betas = [0, 95]

[inspect]
split = "gallery"
index = 1
"#;

#[test]
fn subcommands_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.toml"), CONFIG).unwrap();
    for sub in ["gen-data", "train", "eval", "inspect", "ablate"] {
        let out = run(d, sub, "run.toml");
        assert!(
            out.status.success(),
            "{sub}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for f in [
        "data.dsc",
        "model.dsc",
        "train.log",
        "train_metrics.json",
        "metrics.json",
        "ablation.json",
        "ablation.txt",
        "inspect/summary.csv",
        "inspect/block0_a_S.csv",
        "inspect/block1_b_mass.csv",
    ] {
        assert!(d.join("out").join(f).exists(), "missing {f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("out/metrics.json")).unwrap()).unwrap();
    for key in ["mAP", "rank1", "rank5", "per_query_ap", "excluded_queries"] {
        assert!(metrics.get(key).is_some(), "metrics lacks {key}");
    }
    let log = fs::read_to_string(d.join("out/train.log")).unwrap();
    // 4 identities at P = 2 give two batches per epoch
    assert_eq!(log.lines().count(), 6);
    assert!(log.starts_with("step=0\tepoch=0\tlr="));

    let before = fs::read(d.join("out/model.dsc")).unwrap();
    let metrics_before = fs::read(d.join("out/train_metrics.json")).unwrap();
    assert!(run(d, "train", "run.toml").status.success());
    assert_eq!(fs::read(d.join("out/model.dsc")).unwrap(), before);
    assert_eq!(fs::read(d.join("out/train_metrics.json")).unwrap(), metrics_before);
}

#[test]
fn exit_codes_distinguish_config_and_io_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[model]\nbeta = 101\n").unwrap();
    assert_eq!(run(d, "gen-data", "bad.toml").status.code(), Some(1));
    assert_eq!(run(d, "gen-data", "absent.toml").status.code(), Some(1));
    fs::write(d.join("nodata.toml"), "data = \"missing.dsc\"\n").unwrap();
    assert_eq!(run(d, "train", "nodata.toml").status.code(), Some(3));
    fs::write(d.join("junk.dsc"), b"not a container").unwrap();
    fs::write(d.join("junk.toml"), "data = \"junk.dsc\"\n").unwrap();
    let out = run(d, "train", "junk.toml");
    assert_eq!(out.status.code(), Some(3));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}
