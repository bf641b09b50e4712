use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn wilson(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wilson"))
        .args(args)
        .current_dir(dir)
        .env_remove("WILSON_OUT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const RUN: &str = r#"
output = "runs"
[data]
train_manifest = "data/train.tsv"
val_manifest = "data/val.tsv"
[base]
epochs = 2
base_lr = 0.05
head_lr = 0.05
[train]
epochs = 2
warmup_epochs = 1
batch_size = 8
"#;

/// Synthesizes and splits a small dataset, then writes the run config.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&wilson(dir.path(), &["synth", "--n-images", "30", "--out", "data"])), 0);
    assert_eq!(code(&wilson(dir.path(), &["split", "--manifest", "data/manifest.tsv", "--val", "8"])), 0);
    std::fs::write(dir.path().join("run.toml"), RUN).unwrap();
    dir
}

fn read(path: PathBuf) -> Vec<u8> {
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        assert_eq!(code(&wilson(dir.path(), &["synth", "--n-images", "5", "--seed", "3", "--out", out])), 0);
    }
    for f in ["manifest.tsv", "images/0004.png", "masks/0004.png"] {
        assert_eq!(read(dir.path().join("a").join(f)), read(dir.path().join("b").join(f)));
    }
}

#[test]
fn synth_of_nothing_writes_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&wilson(dir.path(), &["synth", "--n-images", "0", "--out", "d"])), 0);
    let text = std::fs::read_to_string(dir.path().join("d/manifest.tsv")).unwrap();
    assert!(text.lines().all(|l| l.starts_with('#')));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&wilson(dir.path(), &["--help"])), 0);
    assert_eq!(code(&wilson(dir.path(), &["train", "--bogus"])), 1);
    assert_eq!(code(&wilson(dir.path(), &["synth", "--classes", "2", "--out", "d"])), 1);
    assert_eq!(code(&wilson(dir.path(), &["train", "--set", "train.alpha=3"])), 1);
    let missing = wilson(dir.path(), &["split", "--manifest", "nope.tsv", "--val", "1"]);
    assert_eq!(code(&missing), 2);
    assert!(stderr(&missing).contains("nope.tsv"));
    std::fs::write(dir.path().join("bad.tsv"), "# c\na.png\t-\n").unwrap();
    let bad = wilson(dir.path(), &["split", "--manifest", "bad.tsv", "--val", "0"]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("line 2"), "{}", stderr(&bad));
}

#[test]
fn synth_into_an_unwritable_location_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("file"), "x").unwrap();
    let out = wilson(dir.path(), &["synth", "--n-images", "1", "--out", "file/sub"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_eval_and_dump_round() {
    let ws = workspace();
    let dir = ws.path();
    assert_eq!(code(&wilson(dir, &["train", "--config", "run.toml", "--step", "0"])), 0);
    let base = dir.join("runs/step_0/checkpoint.bin");
    let before = read(base.clone());
    let step = wilson(dir, &["train", "--config", "run.toml", "--step", "1"]);
    assert_eq!(code(&step), 0, "{}", stderr(&step));
    assert_eq!(read(base.clone()), before, "previous checkpoint was modified");
    for f in ["checkpoint.bin", "train_log.csv", "config.toml", "metrics.toml"] {
        assert!(dir.join("runs/step_1").join(f).is_file(), "{f} missing");
    }
    // The echoed config resolves to the same run.
    let echoed = std::fs::read_to_string(dir.join("runs/step_1/config.toml")).unwrap();
    let resolved = wilson::config::RunConfig::resolve(Some(&dir.join("run.toml")), &[]).unwrap();
    assert_eq!(wilson::config::RunConfig::from_toml(&echoed).unwrap(), resolved);

    let eval = |report: &str| {
        let out = wilson(
            dir,
            &["eval", "--config", "run.toml", "--checkpoint", "runs/step_1/checkpoint.bin", "--manifest", "data/val.tsv", "--report", report],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        std::fs::read_to_string(dir.join(report)).unwrap()
    };
    let (a, b) = (eval("a.toml"), eval("b.toml"));
    assert_eq!(a, b);
    assert_eq!(a, std::fs::read_to_string(dir.join("runs/step_1/metrics.toml")).unwrap());
    let report = wilson::metrics::MetricReport::from_toml(&a).unwrap();
    let mean = |ids: &[u8]| {
        let v: Vec<f64> = ids.iter().filter_map(|c| report.per_class[c]).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    assert_eq!(report.old, mean(&report.old_classes));
    assert_eq!(report.new, mean(&report.new_classes));

    let dump = wilson(
        dir,
        &[
            "pseudo-dump", "--config", "run.toml", "--checkpoint", "runs/step_1/checkpoint.bin", "--prev",
            "runs/step_0/checkpoint.bin", "--manifest", "data/val.tsv", "--out", "dump", "--limit", "2",
        ],
    );
    assert_eq!(code(&dump), 0, "{}", stderr(&dump));
    let grid = wilson::grid::Grid::load(&dir.join("dump/0001_qhat.grid")).unwrap();
    assert_eq!((grid.channels, grid.height, grid.width), (6, 32, 32));
    let plane = grid.height * grid.width;
    for p in 0..plane {
        let sum: f32 = (0..grid.channels).map(|c| grid.data[c * plane + p]).sum();
        assert!(sum > 0.0);
    }
    assert!(!dir.join("dump/0002_qhat.png").exists());

    // A base checkpoint against a schedule with different base classes.
    let mismatch = wilson(
        dir,
        &[
            "eval", "--config", "run.toml", "--set", "schedule.steps=[[1,2],[3,4,5]]", "--checkpoint",
            "runs/step_0/checkpoint.bin", "--manifest", "data/val.tsv",
        ],
    );
    assert_eq!(code(&mismatch), 2);
    assert!(stderr(&mismatch).contains("schema"), "{}", stderr(&mismatch));
}

#[test]
fn eval_requires_ground_truth() {
    let ws = workspace();
    let dir = ws.path();
    assert_eq!(code(&wilson(dir, &["train", "--config", "run.toml", "--set", "base.epochs=0"])), 0);
    std::fs::write(dir.join("weak.tsv"), "data/images/0000.png\t-\t1\n").unwrap();
    let out = wilson(dir, &["eval", "--config", "run.toml", "--checkpoint", "runs/step_0/checkpoint.bin", "--manifest", "weak.tsv"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("ground truth"));
}

#[test]
fn output_root_from_environment_and_alpha_sweep() {
    let ws = workspace();
    let dir = ws.path();
    let with_env = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_wilson"))
            .args(args)
            .current_dir(dir)
            .env("WILSON_OUT", "elsewhere")
            .output()
            .unwrap()
    };
    assert_eq!(code(&with_env(&["train", "--config", "run.toml"])), 0);
    assert!(dir.join("elsewhere/step_0/checkpoint.bin").is_file());
    assert!(!dir.join("runs").exists());
    let sweep = with_env(&["train", "--config", "run.toml", "--step", "1", "--alpha-sweep"]);
    assert_eq!(code(&sweep), 0, "{}", stderr(&sweep));
    let text = std::fs::read_to_string(dir.join("elsewhere/step_1/alpha_sweep.toml")).unwrap();
    assert_eq!(text.matches("[[run]]").count(), 5);
    assert!(dir.join("elsewhere/step_1/alpha_0.25/metrics.toml").is_file());

    let plot = wilson(dir, &["plot", "--input", "elsewhere", "--out", "plots"]);
    assert_eq!(code(&plot), 0, "{}", stderr(&plot));
    assert!(dir.join("plots/alpha_sweep.svg").is_file());
    assert!(dir.join("plots/summary.txt").is_file());
}

#[test]
fn plot_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let header = wilson::train_log::HEADER;
    std::fs::write(d.join("one.csv"), format!("{header}\n0,1,0,0.5,0.1,0.2,0.0,0.0,0.8,0.01\n")).unwrap();
    let out = wilson(d, &["plot", "--input", "one.csv", "--out", "p"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(std::fs::read_to_string(d.join("p/loss_0.svg")).unwrap().contains("<svg"));

    std::fs::write(d.join("bad.csv"), format!("{header}\n0,1,0,0.5,0.1,0.2,0.0,0.0,0.8,0.01\n0,1,x\n")).unwrap();
    let out = wilson(d, &["plot", "--input", "bad.csv", "--out", "p"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    let out = wilson(d, &["plot", "--input", "missing_dir", "--out", "p"]);
    assert_eq!(code(&out), 2);

    let mut sweep = String::new();
    for protocol in ["disjoint", "overlap"] {
        for (alpha, all) in [(0.0, 0.4), (0.5, 0.6), (1.0, 0.5)] {
            sweep += &format!("[[run]]\nprotocol = \"{protocol}\"\nalpha = {alpha:?}\nall = {all}\n\n");
        }
    }
    std::fs::create_dir(d.join("s")).unwrap();
    std::fs::write(d.join("s/alpha_sweep.toml"), sweep).unwrap();
    let out = wilson(d, &["plot", "--input", "s", "--out", "p"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let svg = std::fs::read_to_string(d.join("p/alpha_sweep.svg")).unwrap();
    let curves = svg
        .lines()
        .filter(|l| l.starts_with("<polyline") && l.contains("stroke-width=\"2\""))
        .filter(|l| l.split("points=\"").nth(1).is_some_and(|p| p.split_whitespace().count() == 3))
        .count();
    assert_eq!(curves, 2, "one three-point curve per protocol");
    assert!(svg.contains("disjoint") && svg.contains("overlap"));
}
