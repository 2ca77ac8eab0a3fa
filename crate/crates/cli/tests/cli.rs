use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn orsense(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orsense"))
        .args(args)
        .arg("--quiet")
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) {
    let out = orsense(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn fails(args: &[&str], cwd: &Path, code: i32, kind: &str) {
    let out = orsense(args, cwd);
    assert_eq!(out.status.code(), Some(code), "{args:?}");
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().unwrap_or_default();
    assert!(line.starts_with(&format!("error kind={kind}:")), "{args:?}: {err}");
}

const SMALL_DATASET: &str = r#"{"discovery_mines": 12, "discovery_background": 12, "impact_per_class": 8}"#;

#[test]
fn pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("ds.json"), SMALL_DATASET).unwrap();
    std::fs::write(d.join("scene.json"), r#"{"size": 500, "mines": 2, "min_gap": 150}"#).unwrap();
    ok(&["synth", "dataset", "--config", "ds.json", "--seed", "1", "--out", "ds"], d);
    ok(&["synth", "scene", "--config", "scene.json", "--seed", "2", "--out", "scene"], d);

    for run in ["a", "b"] {
        ok(
            &["train", "discovery", "--patches", "ds/discovery", "--epochs", "1", "--folds", "2", "--seed", "4", "--out", &format!("{run}/disc.orsw")],
            d,
        );
    }
    // Identical inputs and seed give identical artifacts.
    for f in ["disc.orsw", "disc.orsw.stats.json", "history.csv"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("a/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["k"], 2);
    assert!(metrics["accuracy"].as_f64().is_some());
    let history = std::fs::read_to_string(d.join("a/history.csv")).unwrap();
    assert!(history.starts_with("fold,epoch,train_acc,val_acc,train_loss,val_loss"));

    ok(&["train", "impact", "--patches", "ds/impact", "--epochs", "1", "--folds", "1", "--out", "imp/imp.orsw"], d);

    ok(&["detect", "--mosaic", "scene/mosaic.tif", "--weights", "a/disc.orsw", "--threshold", "0", "--out", "det.geojson"], d);
    ok(&["classify-impact", "--detections", "det.geojson", "--mosaic", "scene/mosaic.tif", "--weights", "imp/imp.orsw", "--out", "det2.csv"], d);
    ok(&["export", "--detections", "det2.csv", "--format", "kml", "--out", "det2.kml"], d);
    assert!(d.join("det.geojson.provenance.json").exists());
    let kml = std::fs::read_to_string(d.join("det2.kml")).unwrap();
    let csv = std::fs::read_to_string(d.join("det2.csv")).unwrap();
    assert_eq!(kml.matches("<Placemark>").count(), csv.lines().count() - 1);

    // Extraction from the synthetic mosaic using its own ground truth.
    ok(&["extract", "--mosaic", "scene/mosaic.tif", "--points", "scene/truth.csv", "--size", "21", "--out", "px"], d);
    assert!(d.join("px/manifest.json").exists());
}

#[test]
fn failures_are_one_line_with_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("ds.json"), SMALL_DATASET).unwrap();
    ok(&["synth", "dataset", "--config", "ds.json", "--out", "ds"], d);
    ok(&["train", "discovery", "--patches", "ds/discovery", "--epochs", "1", "--folds", "1", "--out", "w.orsw"], d);
    ok(&["synth", "stack", "--out", "stack"], d);

    let out = orsense(&["train", "discovery", "--patches", "ds/discovery", "--bogus"], d);
    assert_eq!(out.status.code(), Some(2));
    fails(&["train", "discovery", "--patches", "ds/discovery", "--folds", "0", "--out", "x.orsw"], d, 2, "usage");
    fails(&["train", "discovery", "--patches", "missing", "--out", "x.orsw"], d, 3, "io");
    fails(&["detect", "--mosaic", "stack/base.tif", "--weights", "w.orsw", "--threshold", "2", "--out", "d.csv"], d, 2, "usage");
    fails(&["detect", "--mosaic", "stack/base.tif", "--weights", "w.orsw", "--out", "d.txt"], d, 2, "usage");
    // Default cloud limit drops every 30%-cloud synthetic scene.
    fails(&["composite", "--scenes", "stack/scenes", "--out", "c.tif"], d, 3, "empty-stack");
    ok(&["composite", "--scenes", "stack/scenes", "--out", "c.tif", "--max-cloud", "50"], d);

    // Three-band input is rejected.
    let m = orsense_core::raster::read_geotiff(d.join("c.tif")).unwrap();
    let rgb = m.select_bands(&["B04", "B03", "B02"]).unwrap();
    orsense_core::raster::write_geotiff(&rgb, d.join("rgb.tif")).unwrap();
    fails(&["detect", "--mosaic", "rgb.tif", "--weights", "w.orsw", "--out", "d.csv"], d, 3, "input");
    ok(&["detect", "--mosaic", "c.tif", "--weights", "w.orsw", "--out", "d.csv"], d);
}

fn http(port: u16, req: &str) -> String {
    let mut s = TcpStream::connect(("127.0.0.1", port)).unwrap();
    s.write_all(req.as_bytes()).unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    out
}

#[test]
fn review_serves_on_port() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("ds.json"), SMALL_DATASET).unwrap();
    std::fs::write(d.join("scene.json"), r#"{"size": 400, "mines": 1}"#).unwrap();
    ok(&["synth", "dataset", "--config", "ds.json", "--out", "ds"], d);
    ok(&["synth", "scene", "--config", "scene.json", "--out", "scene"], d);
    ok(&["train", "discovery", "--patches", "ds/discovery", "--epochs", "1", "--folds", "1", "--out", "w.orsw"], d);
    ok(&["detect", "--mosaic", "scene/mosaic.tif", "--weights", "w.orsw", "--threshold", "0", "--out", "det.csv"], d);

    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_orsense"))
        .args(["review", "--detections", "det.csv", "--mosaic", "scene/mosaic.tif", "--port", &port.to_string(), "--quiet"])
        .current_dir(d)
        .spawn()
        .unwrap();
    let t0 = Instant::now();
    while TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(t0.elapsed() < Duration::from_secs(30), "service did not start");
        std::thread::sleep(Duration::from_millis(50));
    }
    let list = http(port, "GET /api/detections?min_p=0 HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n");
    let _ = child.kill();
    let _ = child.wait();
    assert!(list.starts_with("HTTP/1.1 200"), "{list}");
    assert!(list.contains("\"p_mine\""));
}
