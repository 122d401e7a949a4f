use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "[scenario]\nnum_peers = 12\nnum_seeders = 2\nsim_duration_s = 200.0\n\n[file]\nfile_size = 524288\n";

fn mobiswarm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mobiswarm"))
        .current_dir(dir)
        .env_remove("MOBISWARM_LOG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_one_directory_per_mode_and_seed() {
    let dir = setup();
    let o = mobiswarm(
        dir.path(),
        &["run", "--config", "small.toml", "--mode", "both", "--seeds", "1", "--out", "out"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for mode in ["baseline", "hybrid"] {
        let run = dir.path().join("out").join(mode).join("seed-1");
        assert!(run.join("summary.csv").is_file());
        assert!(run.join("timeseries.csv").is_file());
        assert!(!run.join("events.log").exists());
    }
    assert!(dir.path().join("out/compare.csv").is_file());
}

#[test]
fn rerun_into_the_same_directory_gives_identical_bytes() {
    let dir = setup();
    let args = ["run", "--config", "small.toml", "--seeds", "1,3", "--out", "out", "--event-log"];
    let files = ["hybrid/seed-3/summary.csv", "hybrid/seed-3/timeseries.csv", "hybrid/seed-1/events.log"];
    assert!(mobiswarm(dir.path(), &args).status.success());
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.path().join("out").join(f)).unwrap()).collect();
    assert!(mobiswarm(dir.path(), &args).status.success());
    let second: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.path().join("out").join(f)).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn sweep_then_compare_yields_delta_rows_and_a_tally() {
    let dir = setup();
    let o = mobiswarm(
        dir.path(),
        &["sweep", "--config", "small.toml", "--seeds", "1-3", "--out", "out", "--jobs", "2"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let swept = fs::read(dir.path().join("out/compare.csv")).unwrap();
    fs::remove_file(dir.path().join("out/compare.csv")).unwrap();

    let o = mobiswarm(dir.path(), &["compare", "--out", "out"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/compare.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[0].starts_with("seed,"));
    assert!(lines[4].starts_with("wins,"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("3 seeds"));
    // CSV round trip loses nothing the comparison depends on
    assert_eq!(text.as_bytes(), swept.as_slice());
}

#[test]
fn comparing_a_directory_with_itself_gives_zero_deltas() {
    let dir = setup();
    let o = mobiswarm(
        dir.path(),
        &["run", "--config", "small.toml", "--mode", "hybrid", "--seeds", "2", "--out", "out"],
    );
    assert!(o.status.success());
    let o = mobiswarm(dir.path(), &["compare", "--out", "out", "--baseline", "out/hybrid"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/compare.csv")).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    for cell in [row[1], row[2], row[3], row[4], row[7]] {
        assert!(cell.is_empty() || cell.parse::<f64>().unwrap() == 0.0, "{text}");
    }
}

#[test]
fn missing_config_exits_1_and_names_the_path() {
    let dir = setup();
    let o = mobiswarm(dir.path(), &["run", "--config", "absent.toml", "--out", "out"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.toml"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn invalid_config_lists_every_violation_and_writes_nothing() {
    let dir = setup();
    fs::write(
        dir.path().join("bad.toml"),
        "[scenario]\nnum_seeders = 0\nmobile_fraction = 1.5\nsim_duration_s = -5.0\n",
    )
    .unwrap();
    let o = mobiswarm(dir.path(), &["sweep", "--config", "bad.toml", "--out", "out"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for field in ["num_seeders", "mobile_fraction", "sim_duration_s"] {
        assert!(err.contains(field), "{err}");
    }
    assert!(!dir.path().join("out").exists());
}

#[test]
fn bad_seed_list_and_log_level_exit_1() {
    let dir = setup();
    let o = mobiswarm(dir.path(), &["run", "--config", "small.toml", "--seeds", "5-2", "--out", "out"]);
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_mobiswarm"))
        .current_dir(dir.path())
        .env("MOBISWARM_LOG", "chatty")
        .args(["run", "--config", "small.toml", "--out", "out"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn compare_with_mismatched_seeds_exits_1() {
    let dir = setup();
    assert!(mobiswarm(dir.path(), &["run", "--config", "small.toml", "--mode", "baseline", "--seeds", "1", "--out", "out"]).status.success());
    assert!(mobiswarm(dir.path(), &["run", "--config", "small.toml", "--mode", "hybrid", "--seeds", "2", "--out", "out"]).status.success());
    let o = mobiswarm(dir.path(), &["compare", "--out", "out"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seed sets differ"));
}

#[test]
fn info_logging_goes_to_stderr_only() {
    let dir = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_mobiswarm"))
        .current_dir(dir.path())
        .env("MOBISWARM_LOG", "info")
        .args(["run", "--config", "small.toml", "--out", "out"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(stderr(&o).contains("finished hybrid seed"));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("INFO"));
}
