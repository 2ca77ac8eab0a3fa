use std::collections::{HashMap, HashSet};

use orsense_core::dataset::{ImpactClass, NormStats};
use orsense_core::models::{build_discovery_fcn, build_impact_cnn, evaluate_cell_from_window, output_geometry, zero_padded_window};
use orsense_core::nn::WeightSet;
use orsense_core::raster::Raster;
use orsense_core::synthetic::{generate_scene, SceneSpec};
use orsense_core::widearea::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn stats() -> NormStats {
    NormStats {
        mean: vec![1500.0; 12],
        std: vec![1200.0; 12],
    }
}

fn mosaic(size: usize) -> Raster {
    generate_scene(&SceneSpec { size, seed: 9, ..Default::default() }).unwrap().0
}

fn everything() -> DetectOptions {
    DetectOptions { threshold: 0.0, ..Default::default() }
}

#[test]
fn tiling_does_not_change_detections() {
    let m = mosaic(700);
    let spec = build_discovery_fcn();
    let w: WeightSet = WeightSet::glorot(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let whole = detect(&m, &spec, &w, &stats(), &everything()).unwrap();
    let tiled = detect(&m, &spec, &w, &stats(), &DetectOptions { max_tile: 431, overlap: 216, ..everything() }).unwrap();
    assert_eq!(whole.provenance.tiles, 1);
    assert_eq!(tiled.provenance.tiles, 9);
    let g = output_geometry(&spec, 700, 700).unwrap();
    assert_eq!(whole.provenance.grid_cells, g.cells());
    assert_eq!(tiled.provenance.grid_cells, g.cells());
    assert_eq!(whole.detections.len(), g.cells());
    let by_id: HashMap<&str, f64> = whole.detections.iter().map(|d| (d.id.as_str(), d.p_mine)).collect();
    assert_eq!(tiled.detections.len(), by_id.len());
    for d in &tiled.detections {
        let p = by_id[d.id.as_str()];
        assert!((p - d.p_mine).abs() < 1e-5, "{}: {p} vs {}", d.id, d.p_mine);
    }
}

#[test]
fn anchors_are_window_centers() {
    let m = mosaic(300);
    let spec = build_discovery_fcn();
    let w: WeightSet = WeightSet::glorot(&spec, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let set = detect(&m, &spec, &w, &stats(), &everything()).unwrap();
    let mut data = m.data().to_vec();
    stats().apply(&mut data);
    for d in set.detections.iter().step_by(2) {
        let (r, c) = d.pixel;
        let origin = (r as i64 - 107, c as i64 - 107);
        let win = zero_padded_window(&data, 300, 300, 12, origin, 215);
        let p = evaluate_cell_from_window(&spec, &w, &win, 215, origin, (300, 300), d.grid).unwrap();
        assert!((p[0] - d.p_mine).abs() < 1e-4, "{}: {} vs {}", d.id, p[0], d.p_mine);
        let (lon, lat) = m.pixel_to_geo(r as f64, c as f64);
        assert_eq!((lon, lat), (d.lon, d.lat));
    }
}

#[test]
fn non_model_band_count_is_rejected() {
    let m = mosaic(250).select_bands(&["B04", "B03", "B02"]).unwrap();
    let spec = build_discovery_fcn();
    let w: WeightSet = WeightSet::glorot(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let err = detect(&m, &spec, &w, &stats(), &everything()).unwrap_err();
    assert_eq!(err.kind(), "input");
}

fn det(i: usize, j: usize) -> Detection {
    let (r, c) = (94 + 27 * i, 94 + 27 * j);
    Detection {
        id: format!("d{r}_{c}"),
        tile: 0,
        grid: (i, j),
        pixel: (r, c),
        lon: -44.0 + (c as f64 + 0.5) * 9e-5,
        lat: -20.0 - (r as f64 + 0.5) * 9e-5,
        p_mine: 0.5 + (i * 7 + j) as f64 / 1000.0,
        impact: None,
        p_impact: None,
        status: Status::Unreviewed,
        cluster: None,
    }
}

fn set_of(detections: Vec<Detection>) -> DetectionSet {
    DetectionSet {
        detections,
        provenance: Provenance {
            mosaic: "mosaic.tif".into(),
            crs: "EPSG:4326".into(),
            discovery_weights: "ab".repeat(32),
            impact_weights: None,
            threshold: 0.5,
            max_tile: 4608,
            overlap: 216,
            tiles: 1,
            grid_cells: 400,
            bounds: [-44.0, -20.2, -43.8, -20.0],
            created: "2024-05-01T00:00:00+00:00".into(),
        },
    }
}

/// Components of 8-connected grid cells by flood fill.
fn components(cells: &[(usize, usize)]) -> Vec<HashSet<(usize, usize)>> {
    let all: HashSet<_> = cells.iter().copied().collect();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for &c in cells {
        if !seen.insert(c) {
            continue;
        }
        let mut comp = HashSet::from([c]);
        let mut stack = vec![c];
        while let Some((i, j)) = stack.pop() {
            for o in &all {
                if o.0.abs_diff(i) <= 1 && o.1.abs_diff(j) <= 1 && seen.insert(*o) {
                    comp.insert(*o);
                    stack.push(*o);
                }
            }
        }
        out.push(comp);
    }
    out
}

#[test]
fn clusters_match_flood_fill() {
    let cases: Vec<Vec<(usize, usize)>> = vec![
        vec![(2, 2), (2, 3)],
        vec![(2, 2), (2, 12)],
        // L-shape of five, a diagonal pair, and a loner.
        vec![(1, 1), (2, 1), (3, 1), (3, 2), (3, 3), (8, 8), (9, 9), (1, 6)],
    ];
    let expect = [1, 2, 3];
    for (cells, n) in cases.into_iter().zip(expect) {
        let mut s = set_of(cells.iter().map(|&(i, j)| det(i, j)).collect());
        cluster(&mut s, 243.0);
        let comps = components(&cells);
        assert_eq!(comps.len(), n);
        let id_of: HashMap<(usize, usize), usize> = s.detections.iter().map(|d| (d.grid, d.cluster.unwrap())).collect();
        for comp in &comps {
            let ids: HashSet<usize> = comp.iter().map(|c| id_of[c]).collect();
            assert_eq!(ids.len(), 1);
        }
        let distinct: HashSet<usize> = id_of.values().copied().collect();
        assert_eq!(distinct.len(), n);
        assert_eq!(*distinct.iter().max().unwrap(), n);
    }
}

#[test]
fn clusters_join_across_tiles() {
    let mut a = det(4, 4);
    let mut b = det(0, 0);
    b.tile = 1;
    b.lon = a.lon + 2e-3;
    b.lat = a.lat;
    a.tile = 0;
    let mut s = set_of(vec![a, b]);
    cluster(&mut s, 270.0);
    assert_eq!(s.detections[0].cluster, s.detections[1].cluster);
}

fn sample() -> DetectionSet {
    let mut d = vec![det(1, 1), det(1, 2), det(5, 9), det(7, 3)];
    d[0].impact = Some(ImpactClass::High);
    d[0].p_impact = Some([0.7, 0.2, 0.1]);
    d[1].impact = Some(ImpactClass::Low);
    d[1].p_impact = Some([0.1, 0.6000000000000001, 0.3]);
    d[2].status = Status::Rejected;
    d[0].lon = -43.123456789012345;
    let mut s = set_of(d);
    cluster(&mut s, 270.0);
    s
}

#[test]
fn csv_and_geojson_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = sample();
    for (name, f) in [("d.csv", Format::Csv), ("d.geojson", Format::GeoJson)] {
        let p = dir.path().join(name);
        s.export(f, &p).unwrap();
        assert!(provenance_path(&p).exists());
        let back = DetectionSet::load(&p).unwrap();
        assert_eq!(back, s, "{name}");
    }
    let text = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    assert!(text.starts_with("id,lon,lat,p_mine,impact,p_high,p_low,p_noore,cluster,status,"));
}

#[test]
fn empty_exports_are_valid() {
    let dir = tempfile::tempdir().unwrap();
    let s = set_of(vec![]);
    for (name, f) in [("e.csv", Format::Csv), ("e.kml", Format::Kml), ("e.geojson", Format::GeoJson)] {
        s.export(f, dir.path().join(name)).unwrap();
    }
    assert_eq!(DetectionSet::load(dir.path().join("e.csv")).unwrap().detections.len(), 0);
    let kml = std::fs::read_to_string(dir.path().join("e.kml")).unwrap();
    let doc = roxmltree::Document::parse(&kml).unwrap();
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("Placemark")).count(), 0);
    let gj: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("e.geojson")).unwrap()).unwrap();
    assert_eq!(gj["type"], "FeatureCollection");
    assert_eq!(gj["features"].as_array().unwrap().len(), 0);
}

#[test]
fn kml_styles_follow_impact() {
    let s = sample();
    let doc_text = s.to_kml();
    let doc = roxmltree::Document::parse(&doc_text).unwrap();
    let colors: HashMap<String, String> = doc
        .descendants()
        .filter(|n| n.has_tag_name("Style"))
        .map(|n| {
            let c = n.descendants().find(|c| c.has_tag_name("color")).unwrap().text().unwrap();
            (n.attribute("id").unwrap().to_string(), c.to_string())
        })
        .collect();
    let marks: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("Placemark")).collect();
    assert_eq!(marks.len(), 4);
    for (m, d) in marks.iter().zip(&s.detections) {
        let style = m.descendants().find(|n| n.has_tag_name("styleUrl")).unwrap().text().unwrap();
        let color = &colors[style.trim_start_matches('#')];
        let want = match d.impact {
            Some(ImpactClass::High) => "ff0000ff",
            Some(ImpactClass::Low) => "ff00ffff",
            _ => "ffaaaaaa",
        };
        assert_eq!(color, want);
        let coords = m.descendants().find(|n| n.has_tag_name("coordinates")).unwrap().text().unwrap();
        let v: Vec<f64> = coords.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!((v[0], v[1]), (d.lon, d.lat));
    }
}

#[test]
fn impact_filter_keeps_edge_detections_unknown() {
    let m = mosaic(300);
    let spec = build_impact_cnn();
    let w: WeightSet = WeightSet::glorot(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut edge = det(0, 0);
    (edge.lon, edge.lat) = m.pixel_to_geo(3.0, 150.0);
    let mut inner = det(3, 3);
    (inner.lon, inner.lat) = m.pixel_to_geo(150.0, 150.0);
    let s = set_of(vec![edge, inner]);
    let out = impact_filter(&s, &m, &spec, &w, &stats()).unwrap();
    assert!(out.provenance.impact_weights.is_some());
    let e = out.detections.iter().find(|d| d.id == s.detections[0].id).unwrap();
    assert_eq!(e.impact, None);
    if let Some(d) = out.detections.iter().find(|d| d.id == s.detections[1].id) {
        let p = d.p_impact.unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert_ne!(d.impact, Some(ImpactClass::NoOre));
    }
}
