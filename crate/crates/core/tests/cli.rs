use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qtt::io::records::read_records;
use qtt::io::scenario::bundled;

fn qtt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qtt"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Bundled scenario with textual edits, written into `dir`.
fn edited_scenario(dir: &Path, name: &str, edits: &[(&str, &str)]) -> String {
    let mut text = bundled(name).unwrap().to_string();
    for (from, to) in edits {
        assert!(text.contains(from), "{from}");
        text = text.replace(from, to);
    }
    let path = dir.join(format!("{name}.scenario"));
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn drifting_sync_recovers_the_rate_difference() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = edited_scenario(
        tmp.path(),
        "stationary_night",
        &[("duration = 600.0", "duration = 30.0")],
    );
    let run = tmp.path().join("run");
    let run = run.to_str().unwrap();
    let plots = tmp.path().join("plots");
    let plots = plots.to_str().unwrap();

    let o = qtt(&["simulate", &sc, "-o", run]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["alice.tags", "bob.tags", "run.toml", "truth.json"] {
        assert!(Path::new(run).join(f).is_file(), "{f}");
    }
    let o = qtt(&["sync", run, "--mode", "drift", "--plot-data", plots]);
    assert!(o.status.success(), "{}", stderr(&o));

    let recs = read_records(&Path::new(run).join("records_drift.csv")).unwrap();
    assert!(recs.len() >= 28);
    let first = recs.first().unwrap();
    let last = recs.last().unwrap();
    let rate = (last.delta - first.delta).as_f64() / (last.t_mid - first.t_mid).as_seconds();
    assert!((rate - 450.0).abs() < 15.0, "rate {rate}");
    assert!(fs::read_to_string(Path::new(plots).join("fig2c.csv"))
        .unwrap()
        .starts_with("t_s,delta_ps,found\n"));

    let records = Path::new(run).join("records_drift.csv");
    let records = records.to_str().unwrap();
    let o = qtt(&["stability", records, "--plot-data", plots]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("tau_s,adev,mdev,tdev_s\n"));
    assert!(Path::new(plots).join("fig2e.csv").is_file());

    let o = qtt(&["range", records, "--plot-data", plots]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(text.starts_with("t_s,range_m,residual_m\n"));
    assert_eq!(
        text.lines().count(),
        recs.iter().filter(|r| r.found()).count() + 1
    );
    assert!(Path::new(plots).join("fig3.csv").is_file());

    let o = qtt(&["car", run, "--sweep", "0,2e5", "--acquisitions", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout).into_owned();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0],
        "background_rate_cps,trials,found_fraction,car,peak_height"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.00000e0,6,1.0000,"));

    let o = qtt(&["track", run]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("scenario has no orbit"));
}

#[test]
fn tracked_pass_writes_grid_and_history() {
    let tmp = tempfile::tempdir().unwrap();
    // the opening 40 s of the pass, culminating where the full pass does
    let sc = edited_scenario(
        tmp.path(),
        "leo_pass",
        &[
            ("duration = 286.0", "duration = 40.0"),
            (
                "inclination_deg = 98.2",
                "inclination_deg = 98.2\nepoch = 143.0",
            ),
        ],
    );
    let run = tmp.path().join("run");
    let run = run.to_str().unwrap();
    assert!(qtt(&["simulate", &sc, "-o", run]).status.success());
    let o = qtt(&["track", run]);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = fs::read_to_string(Path::new(run).join("coarse_grid.csv")).unwrap();
    assert!(grid.starts_with("altitude_m,inclination_deg,peak_height,found\n"));
    assert_eq!(grid.lines().count(), 1 + 752 * 41);
    let history = fs::read_to_string(Path::new(run).join("fit_history.csv")).unwrap();
    assert!(history.lines().count() > 40);
    let recs = read_records(&Path::new(run).join("track_records_sync.csv")).unwrap();
    assert!(recs.iter().filter(|r| r.found()).count() >= 35);
}

#[test]
fn usage_and_domain_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    assert_eq!(qtt(&["sync", dir]).status.code(), Some(2));
    assert_eq!(qtt(&["bogus"]).status.code(), Some(2));
    assert_eq!(
        qtt(&["simulate", "no_such.scenario", "-o", dir])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(qtt(&["stability", "no_such.csv"]).status.code(), Some(2));

    let o = qtt(&["--version"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("qtt "));

    // a run directory whose tag file is damaged
    for f in ["alice.tags", "bob.tags"] {
        fs::write(tmp.path().join(f), b"not a tag file").unwrap();
    }
    fs::write(
        tmp.path().join("run.toml"),
        "label = \"x\"\nduration = 1.0\n",
    )
    .unwrap();
    let o = qtt(&["sync", dir]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let bad = tmp.path().join("bad.scenario");
    fs::write(&bad, "label = \"x\"\nduration = -4.0\n").unwrap();
    let o = qtt(&["simulate", bad.to_str().unwrap(), "-o", dir]);
    assert_eq!(o.status.code(), Some(1));

    let recs = tmp.path().join("r.csv");
    fs::write(&recs, "nonsense\n").unwrap();
    assert_eq!(
        qtt(&["range", recs.to_str().unwrap()]).status.code(),
        Some(1)
    );
}
