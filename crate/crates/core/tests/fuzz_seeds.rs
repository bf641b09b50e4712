//! Replays the checked-in fuzz seeds through the decoders with the same
//! round-trip checks the fuzz targets make.

use std::path::PathBuf;

use wilson::checkpoint::Checkpoint;
use wilson::config::RunConfig;
use wilson::grid::Grid;
use wilson::image::Mask;
use wilson::manifest::Manifest;
use wilson::metrics::MetricReport;
use wilson::taxonomy::IncrementalSchedule;
use wilson::train_log::TrainLog;

/// Seeds whose names mark them as malformed must be rejected; the rest must
/// decode.
const MALFORMED: [&str; 6] = ["bad", "short", "truncated", "unknown", "rejected", "empty_is_invalid"];

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read(&path).unwrap())
        })
        .filter(|(name, _)| name.starts_with("seed_"))
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn replay<T>(target: &str, decode: impl Fn(&[u8]) -> Option<wilson::Result<T>>, check: impl Fn(&T)) {
    for (name, bytes) in seeds(target) {
        let expect_ok = !MALFORMED.iter().any(|m| name.contains(m));
        let result = decode(&bytes).unwrap_or_else(|| panic!("{target}/{name} is not UTF-8"));
        match (&result, expect_ok) {
            (Ok(v), true) => check(v),
            (Err(_), false) => {}
            (Ok(_), false) => panic!("{target}/{name} should be rejected"),
            (Err(e), true) => panic!("{target}/{name}: {e}"),
        }
    }
}

fn text(bytes: &[u8]) -> Option<&str> {
    std::str::from_utf8(bytes).ok()
}

#[test]
fn manifest_seeds() {
    replay("manifest", |b| text(b).map(Manifest::parse), |m| {
        assert_eq!(&Manifest::parse(&m.to_text()).unwrap(), m);
    });
}

#[test]
fn schedule_seeds() {
    replay("schedule_text", |b| text(b).map(IncrementalSchedule::from_text), |s| {
        assert_eq!(IncrementalSchedule::from_text(&s.to_text()).unwrap().steps(), s.steps());
    });
}

#[test]
fn checkpoint_seeds() {
    replay("checkpoint", |b| Some(Checkpoint::decode(b)), |ck| {
        ck.model().unwrap();
        let again = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(again.header, ck.header);
    });
}

#[test]
fn grid_seeds() {
    for (name, bytes) in seeds("grid") {
        let expect_ok = !MALFORMED.iter().any(|m| name.contains(m));
        match Grid::decode(&bytes) {
            Ok(g) => {
                assert!(expect_ok, "grid/{name} should be rejected");
                assert_eq!(g.encode(), bytes);
            }
            Err(e) => assert!(!expect_ok, "grid/{name}: {e}"),
        }
    }
}

#[test]
fn train_log_seeds() {
    replay("train_log", |b| text(b).map(TrainLog::from_csv), |log| {
        assert_eq!(&TrainLog::from_csv(&log.to_csv()).unwrap(), log);
    });
}

#[test]
fn run_config_seeds() {
    replay("run_config", |b| text(b).map(RunConfig::from_toml), |cfg| {
        assert_eq!(&RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    });
}

#[test]
fn metric_report_seeds() {
    replay("metric_report", |b| text(b).map(MetricReport::from_toml), |r| {
        assert_eq!(&MetricReport::from_toml(&r.to_toml()).unwrap(), r);
    });
}

#[test]
fn mask_png_seeds() {
    replay("mask_png", |b| Some(Mask::decode_png(b)), |m| {
        assert!(m.data().iter().all(|&v| v <= 5));
    });
}
