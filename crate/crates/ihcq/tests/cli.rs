use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ihcq(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ihcq"))
        .current_dir(cwd)
        .env("SOURCE_DATE_EPOCH", "1000")
        .args(args)
        .output()
        .unwrap()
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = ihcq(cwd, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_record(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr is a JSON error record")
}

fn report(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn synth_detect_tps_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--out", "s", "--seed", "3", "synth", "--grid-w", "2", "--grid-h", "1", "--pos-fraction", "0.25"]);
    ok(d, &["--out", "o", "detect", "--slide", "s/manifest.json"]);
    let printed = ok(d, &["--out", "o", "tps", "--detections", "o/detections.csv", "--slide-id", "x"]);
    assert_eq!(printed.trim(), "o/tps.json");
    let r = report(&d.join("o/tps.json"));
    assert_eq!(r["result"]["tps"], 25.0);
    assert_eq!(r["result"]["category"], "FROM1TO49");
    assert_eq!(r["manifest"]["created_unix"], 1000);
    assert!(r["manifest"]["inputs"]["o/detections.csv"].as_str().unwrap().len() == 64);

    let m = ok(d, &["--out", "o", "match", "--pred", "o/detections.csv", "--gt", "s/truth.csv"]);
    assert!(m.contains("match.json"));
    assert_eq!(report(&d.join("o/match.json"))["result"]["f1"]["mf1"], 1.0);
}

#[test]
fn groupstats_prints_mean_and_sd() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("g.csv"), "group,tps\nb,94.6\nb,92.5\nb,96.5\na,50\n").unwrap();
    let out = ok(dir.path(), &["groupstats", "--groups", "g.csv"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[..2], ["a\t50.0", "b\t94.5±2.0"]);
}

#[test]
fn bad_config_lists_every_key_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.toml"),
        "max_dist = \"far\"\nnope = 1\n[cutoffs]\nlow = 70.0\n",
    )
    .unwrap();
    std::fs::write(dir.path().join("g.csv"), "group,tps\na,1\n").unwrap();
    let out = ihcq(dir.path(), &["--config", "c.toml", "groupstats", "--groups", "g.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["error"]["kind"], "config");
    let keys: Vec<&str> = rec["error"]["details"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["key"].as_str().unwrap())
        .collect();
    assert!(keys.contains(&"max_dist") && keys.contains(&"nope"), "{keys:?}");
}

#[test]
fn failures_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = ihcq(dir.path(), &["tps", "--detections", "missing.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"]["kind"], "io");

    let out = ihcq(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"]["kind"], "usage");

    std::fs::write(dir.path().join("d.csv"), "x,y,class,confidence\n1,2,TC_POS,0.5\n3,4,BLUE,0.5\n").unwrap();
    let out = ihcq(dir.path(), &["tps", "--detections", "d.csv"]);
    let rec = error_record(&out);
    assert_eq!(rec["error"]["details"]["line"], 3);

    let help = ihcq(dir.path(), &["--help"]);
    assert!(help.status.success());
    assert!(String::from_utf8_lossy(&help.stdout).contains("Usage"));
}

#[test]
fn missing_pmap_names_the_tile() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--out", "s", "synth", "--grid-w", "2", "--grid-h", "1", "--pmaps"]);
    std::fs::remove_file(d.join("s/pmaps/tile_1_0.json")).unwrap();
    let out = ihcq(d, &["--out", "o", "detect", "--slide", "s/manifest.json", "--pmaps", "s/pmaps"]);
    assert_eq!(out.status.code(), Some(1));
    let rec = error_record(&out);
    assert_eq!(rec["error"]["details"], serde_json::json!({"gx": 1, "gy": 0}));
}

#[test]
fn rerun_refuses_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("g.csv"), "group,tps\na,1\na,3\n").unwrap();
    ok(d, &["--out", "first", "groupstats", "--groups", "g.csv"]);
    ok(d, &["--out", "again", "rerun", "--report", "first/groupstats.json"]);
    assert_eq!(
        std::fs::read(d.join("first/groupstats.json")).unwrap(),
        std::fs::read(d.join("again/groupstats.json")).unwrap()
    );
    std::fs::write(d.join("g.csv"), "group,tps\na,1\na,4\n").unwrap();
    let out = ihcq(d, &["--out", "third", "rerun", "--report", "first/groupstats.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"]["kind"], "digest_mismatch");
}

#[test]
fn config_file_drives_synth_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.toml"),
        "seed = 42\ntile_size = 256\n[synth]\ngrid_w = 1\ngrid_h = 1\n[synth.tile]\nn_cells = 10\n",
    )
    .unwrap();
    ok(d, &["--config", "run.toml", "--out", "s", "synth"]);
    let r = report(&d.join("s/synth.json"));
    assert_eq!(r["result"]["n_cells"], 10);
    assert_eq!(r["result"]["tile_size"], 256);
    assert_eq!(r["manifest"]["config"]["seed"], 42);
    assert_eq!(r["manifest"]["command"], serde_json::json!(["synth"]));
    // the snapshot alone reproduces the run
    ok(d, &["--out", "s2", "rerun", "--report", "s/synth.json"]);
    assert_eq!(
        std::fs::read(d.join("s/tiles/tile_0_0.png")).unwrap(),
        std::fs::read(d.join("s2/tiles/tile_0_0.png")).unwrap()
    );
}

#[test]
fn embed_from_feature_table_with_external_projection() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut feats = String::from("patch_id,cohort_id,f0,f1,f2\n");
    let mut proj = String::from("patch_id,u,v\n");
    for i in 0..12 {
        let c = if i % 2 == 0 { "A" } else { "B" };
        feats.push_str(&format!("p{i},{c},{},{},{}\n", i, i * i % 7, (i % 3) as f64 / 2.0));
        proj.push_str(&format!("p{i},{},{}\n", i as f64 / 11.0, (i % 4) as f64));
    }
    std::fs::write(d.join("f.csv"), feats).unwrap();
    std::fs::write(d.join("p.csv"), proj).unwrap();
    ok(d, &["--out", "pca", "embed", "--features", "f.csv", "--grid-n", "3"]);
    ok(d, &["--out", "ext", "embed", "--features", "f.csv", "--method", "external", "--projection", "p.csv"]);
    let r = report(&d.join("ext/embed.json"));
    assert_eq!(r["result"]["method"], "external");
    assert_eq!(r["result"]["n_patches"], 12);
    assert!(r["result"]["similarity"]["summary"].is_number());
    assert!(r["result"]["files"]["mosaic_image"].is_null());
    let back = std::fs::read_to_string(d.join("ext/projection.csv")).unwrap();
    assert_eq!(back.lines().nth(1).unwrap(), "p0,0,0");
}
