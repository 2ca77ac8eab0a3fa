use orsense_core::compositing::{composite_stack, median_composite, scene_mask, CloudMask};
use orsense_core::dataset::{load_points, ImpactClass, Manifest, PointClass};
use orsense_core::raster::{read_geotiff, QA60};
use orsense_core::synthetic::*;

fn five_targets() -> SceneSpec {
    let t = |row: f64, col: f64, kind| Target { row, col, radius: 14.0, kind };
    SceneSpec {
        size: 400,
        seed: 3,
        targets: vec![
            t(60.0, 60.0, TargetKind::High),
            t(60.0, 300.0, TargetKind::Low),
            t(200.0, 200.0, TargetKind::High),
            t(330.0, 60.0, TargetKind::Low),
            t(330.0, 300.0, TargetKind::High),
        ],
        ..Default::default()
    }
}

#[test]
fn target_swir_stands_out() {
    let spec = five_targets();
    let (r, recs) = generate_scene(&spec).unwrap();
    assert_eq!(recs.len(), 5);
    let b11 = r.band_index("B11").unwrap();
    // Target pixels are the disks proper; ponds and the background are the rest.
    let disks = SceneSpec {
        targets: spec.targets.iter().map(|t| Target { kind: TargetKind::Low, ..*t }).collect(),
        ..spec.clone()
    };
    let inside = target_mask(&disks);
    let any = target_mask(&spec);
    let (mut ts, mut tn, mut bs, mut bn) = (0.0, 0.0, 0.0, 0.0);
    for p in 0..inside.len() {
        let v = r.data()[p * 12 + b11] as f64;
        if inside[p] {
            ts += v;
            tn += 1.0;
        } else if !any[p] {
            bs += v;
            bn += 1.0;
        }
    }
    let sigma = spec.background.noise_sigma;
    assert!(ts / tn - bs / bn >= 3.0 * sigma, "target {} vs background {}", ts / tn, bs / bn);
}

#[test]
fn cloudy_stack_composites_back_to_base() {
    let spec = StackSpec {
        scene: SceneSpec { size: 256, seed: 5, ..Default::default() },
        scenes: 5,
        cloud_fraction: 0.35,
        ..Default::default()
    };
    let (stack, base) = generate_cloudy_stack(&spec).unwrap();
    let masks: Vec<CloudMask> = stack.scenes().iter().map(|s| scene_mask(&s.raster)).collect();
    for m in &masks {
        assert!((m.cloudy_fraction() - 0.35).abs() < 0.01);
    }
    for p in 0..256 * 256 {
        assert!(masks.iter().any(|m| !m.cloudy[p]), "pixel {p} never clear");
    }
    let from = spec.start;
    let to = from + chrono::Duration::days(365);
    let comp = composite_stack(&stack, from, to, 100.0).unwrap();
    assert_eq!(comp.band_count(), 12);
    let sigma = spec.scene.background.noise_sigma as f32;
    let good = comp
        .data()
        .chunks_exact(12)
        .zip(base.data().chunks_exact(12))
        .filter(|(c, b)| c.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= sigma))
        .count();
    assert!(good as f64 >= 0.99 * (256.0 * 256.0), "{good} pixels within sigma");
}

#[test]
fn clear_stack_is_exact() {
    let spec = StackSpec {
        scene: SceneSpec { size: 64, seed: 9, ..Default::default() },
        scenes: 3,
        cloud_fraction: 0.0,
        acquisition_sigma: Some(0.0),
        ..Default::default()
    };
    let (stack, base) = generate_cloudy_stack(&spec).unwrap();
    for s in stack.scenes() {
        let qa = s.raster.band_index(QA60).unwrap();
        assert!(s.raster.band(qa).iter().all(|&v| v == 0.0));
        assert_eq!(s.meta.cloud_pct, 0.0);
    }
    let masks: Vec<CloudMask> = stack.scenes().iter().map(|s| scene_mask(&s.raster)).collect();
    assert_eq!(median_composite(&stack, &masks).unwrap().data(), base.data());
}

#[test]
fn stack_preconditions() {
    let mut spec = StackSpec { scene: SceneSpec { size: 32, ..Default::default() }, ..Default::default() };
    spec.scenes = 2;
    assert!(generate_cloudy_stack(&spec).is_err());
    spec.scenes = 4;
    spec.cloud_fraction = 0.75;
    assert!(generate_cloudy_stack(&spec).is_err());
}

#[test]
fn mosaic_targets_are_spaced() {
    let m = MosaicSpec { size: 1024, mines: 6, decoys: 2, seed: 4, ..Default::default() };
    let s = mosaic_scene_spec(&m).unwrap();
    assert_eq!(s.targets.len(), 8);
    s.validate().unwrap();
    assert_eq!(s.targets.iter().filter(|t| t.kind == TargetKind::Decoy).count(), 2);
    assert!(mosaic_scene_spec(&MosaicSpec { size: 300, mines: 30, ..m }).is_err());
}

#[test]
fn small_dataset_layout() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        discovery_mines: 4,
        discovery_background: 4,
        impact_per_class: 2,
        seed: 1,
        ..Default::default()
    };
    let sum = generate_dataset(&spec, dir.path()).unwrap();
    let d = Manifest::load(dir.path().join("discovery")).unwrap();
    assert_eq!(d, sum.discovery);
    assert_eq!((d.size, d.bands, d.records.len()), (201, 12, 8));
    assert_eq!(d.records.iter().filter(|r| r.label == PointClass::Mine).count(), 4);
    let i = Manifest::load(dir.path().join("impact")).unwrap();
    assert_eq!((i.size, i.records.len()), (21, 6));
    let counts = |c| i.records.iter().filter(|r| r.impact == Some(c)).count();
    assert_eq!((counts(ImpactClass::High), counts(ImpactClass::Low), counts(ImpactClass::NoOre)), (2, 2, 2));
    let patch = read_geotiff(dir.path().join("discovery").join(&d.records[0].file)).unwrap();
    assert_eq!((patch.height(), patch.width(), patch.band_count()), (201, 201, 12));
    let (lon, lat) = patch.pixel_to_geo(100.0, 100.0);
    assert!((lon - d.records[0].lon).abs() < 1e-12 && (lat - d.records[0].lat).abs() < 1e-12);
    let pts = load_points(dir.path().join("points.csv")).unwrap();
    assert!(pts.errors.is_empty(), "{:?}", pts.errors);
    assert_eq!(pts.records.len(), 14);
    let again = tempfile::tempdir().unwrap();
    generate_dataset(&spec, again.path()).unwrap();
    let a = std::fs::read(dir.path().join("discovery").join(&d.records[3].file)).unwrap();
    let b = std::fs::read(again.path().join("discovery").join(&d.records[3].file)).unwrap();
    assert_eq!(a, b);
}
