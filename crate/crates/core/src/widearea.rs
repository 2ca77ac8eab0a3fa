//! Tiled inference over a whole mosaic: grid hits to coordinates, impact
//! filtering, clustering, and CSV/KML/GeoJSON export.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImpactClass, NormStats};
use crate::error::{Error, Result};
use crate::models::{output_geometry, BANDS, DISCOVERY_PATCH, IMPACT_PATCH};
use crate::nn::{self, Mode, NetworkSpec, Tensor, WeightSet};
use crate::raster::{extract_window_at, Raster};

pub const DEFAULT_MAX_TILE: usize = 4608;
/// Eight strides: every receptive field is interior to some tile.
pub const DEFAULT_OVERLAP: usize = 216;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Smallest tile holding one receptive field plus one stride.
pub const MIN_TILE: usize = 431;
/// Duplicate radius for detections from overlapping tiles.
pub const DEDUP_RADIUS_M: f64 = 135.0;
const STRIDE: usize = 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub id: usize,
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub height: usize,
    pub width: usize,
    pub max_side: usize,
    pub overlap: usize,
    pub rows: usize,
    pub cols: usize,
    pub tiles: Vec<Tile>,
}

/// Start offsets covering `n` px with windows of at most `max`.
///
/// With a nonzero overlap the step is rounded down to a multiple of the
/// network stride, so every tile's output grid lies on one global lattice and
/// the realized overlap is never below the requested one. Zero overlap gives
/// plain abutting tiles.
fn axis_starts(n: usize, max: usize, overlap: usize) -> Vec<(usize, usize)> {
    if n <= max {
        return vec![(0, n)];
    }
    let mut step = max - overlap;
    if overlap > 0 {
        step -= step % STRIDE;
    }
    let mut out = Vec::new();
    let mut s = 0;
    loop {
        if s + max >= n {
            let len = n - s;
            if len < DISCOVERY_PATCH {
                // Only reachable without overlap: pull the last tile back.
                let s2 = n - DISCOVERY_PATCH.min(n);
                out.push((s2, n - s2));
            } else {
                out.push((s, len));
            }
            break;
        }
        out.push((s, max));
        s += step;
    }
    out
}

pub fn plan_tiles(height: usize, width: usize, max_side: usize, overlap: usize) -> Result<TilePlan> {
    if max_side < MIN_TILE {
        return Err(Error::Usage(format!("max tile side {max_side} below {MIN_TILE}")));
    }
    if overlap + STRIDE > max_side {
        return Err(Error::Usage(format!("overlap {overlap} leaves no room in a {max_side}-px tile")));
    }
    if height.min(width) < DISCOVERY_PATCH {
        return Err(Error::Dimension(format!(
            "mosaic {height}x{width} is smaller than one {DISCOVERY_PATCH}-px patch"
        )));
    }
    let rs = axis_starts(height, max_side, overlap);
    let cs = axis_starts(width, max_side, overlap);
    let mut tiles = Vec::with_capacity(rs.len() * cs.len());
    for &(row0, h) in &rs {
        for &(col0, w) in &cs {
            tiles.push(Tile {
                id: tiles.len(),
                row0,
                col0,
                height: h,
                width: w,
            });
        }
    }
    Ok(TilePlan {
        height,
        width,
        max_side,
        overlap,
        rows: rs.len(),
        cols: cs.len(),
        tiles,
    })
}

impl TilePlan {
    /// Whether the receptive window centered at mosaic pixel `(r, c)` stays
    /// inside `tile` wherever the tile border is not the mosaic border.
    fn interior(&self, tile: &Tile, r: usize, c: usize, half: usize) -> bool {
        let (r, c) = (r as i64, c as i64);
        let h = half as i64;
        let (t0, l0) = (tile.row0 as i64, tile.col0 as i64);
        let (b1, r1) = (t0 + tile.height as i64, l0 + tile.width as i64);
        (tile.row0 == 0 || r - h >= t0)
            && (tile.col0 == 0 || c - h >= l0)
            && (b1 as usize == self.height || r + h < b1)
            && (r1 as usize == self.width || c + h < r1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    #[default]
    Unreviewed,
    Confirmed,
    Rejected,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Unreviewed => "unreviewed",
            Status::Confirmed => "confirmed",
            Status::Rejected => "rejected",
        }
    }
}

impl FromStr for Status {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "unreviewed" => Ok(Status::Unreviewed),
            "confirmed" => Ok(Status::Confirmed),
            "rejected" => Ok(Status::Rejected),
            other => Err(format!("unknown status {other:?}")),
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `d<row>_<col>` of the anchor pixel, stable across tile plans.
    pub id: String,
    pub tile: usize,
    /// Cell index inside the tile's output grid.
    pub grid: (usize, usize),
    /// Anchor pixel in the mosaic.
    pub pixel: (usize, usize),
    pub lon: f64,
    pub lat: f64,
    pub p_mine: f64,
    /// `None` until classified, or when the impact window crossed the edge.
    pub impact: Option<ImpactClass>,
    /// High, low, no-ore.
    pub p_impact: Option<[f64; 3]>,
    pub status: Status,
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mosaic: String,
    pub crs: String,
    pub discovery_weights: String,
    pub impact_weights: Option<String>,
    pub threshold: f64,
    pub max_tile: usize,
    pub overlap: usize,
    pub tiles: usize,
    /// Distinct grid cells evaluated over the mosaic.
    pub grid_cells: usize,
    /// Min lon, min lat, max lon, max lat of the mosaic.
    pub bounds: [f64; 4],
    pub created: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectOptions {
    pub threshold: f64,
    pub max_tile: usize,
    pub overlap: usize,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            threshold: DEFAULT_THRESHOLD,
            max_tile: DEFAULT_MAX_TILE,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

fn check_bands(mosaic: &Raster, stats: &NormStats) -> Result<()> {
    if mosaic.band_count() != BANDS {
        return Err(Error::Input(format!("mosaic has {} bands, the models need {BANDS}", mosaic.band_count())));
    }
    if stats.bands() != BANDS {
        return Err(Error::Input(format!("normalization stats cover {} bands, need {BANDS}", stats.bands())));
    }
    Ok(())
}

fn mosaic_bounds(m: &Raster) -> [f64; 4] {
    let corners = [(0.0, 0.0), (0.0, m.width() as f64), (m.height() as f64, 0.0), (m.height() as f64, m.width() as f64)];
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for (r, c) in corners {
        let (x, y) = m.geo().apply(c, r);
        b[0] = b[0].min(x);
        b[1] = b[1].min(y);
        b[2] = b[2].max(x);
        b[3] = b[3].max(y);
    }
    b
}

/// Run the discovery FCN over `mosaic` tile by tile and keep cells with
/// `p_mine >= threshold`. Each cell is taken from a tile that holds its whole
/// receptive field when one exists, so results do not depend on the plan.
/// Remaining duplicates within [`DEDUP_RADIUS_M`] keep the higher `p_mine`.
pub fn detect(
    mosaic: &Raster,
    spec: &NetworkSpec,
    weights: &WeightSet<f32>,
    stats: &NormStats,
    opts: &DetectOptions,
) -> Result<DetectionSet> {
    check_bands(mosaic, stats)?;
    if !(0.0..=1.0).contains(&opts.threshold) {
        return Err(Error::Usage(format!("threshold {} outside [0, 1]", opts.threshold)));
    }
    let plan = plan_tiles(mosaic.height(), mosaic.width(), opts.max_tile, opts.overlap)?;
    let per_tile: Vec<(Vec<Detection>, usize)> = plan
        .tiles
        .par_iter()
        .map(|tile| detect_tile(mosaic, spec, weights, stats, &plan, tile, opts.threshold))
        .collect::<Result<_>>()?;
    let grid_cells = per_tile.iter().map(|(_, n)| n).sum();
    let all: Vec<Detection> = per_tile.into_iter().flat_map(|(d, _)| d).collect();
    let detections = dedup(all, mosaic.crs());
    Ok(DetectionSet {
        detections,
        provenance: Provenance {
            mosaic: String::new(),
            crs: mosaic.crs().to_string(),
            discovery_weights: nn::weights_digest(spec, weights)?,
            impact_weights: None,
            threshold: opts.threshold,
            max_tile: opts.max_tile,
            overlap: opts.overlap,
            tiles: plan.tiles.len(),
            grid_cells,
            bounds: mosaic_bounds(mosaic),
            created: chrono::Utc::now().to_rfc3339(),
        },
    })
}

fn detect_tile(
    mosaic: &Raster,
    spec: &NetworkSpec,
    weights: &WeightSet<f32>,
    stats: &NormStats,
    plan: &TilePlan,
    tile: &Tile,
    threshold: f64,
) -> Result<(Vec<Detection>, usize)> {
    let geom = output_geometry(spec, tile.height, tile.width)?;
    let half = geom.receptive_field / 2;
    let mut data = mosaic.crop(tile.row0, tile.col0, tile.height, tile.width)?.into_data();
    stats.apply(&mut data);
    let (out, _) = nn::predict(spec, weights, &data, tile.height, tile.width)?;
    drop(data);
    let classes = out.len() / geom.cells();
    let mut dets = Vec::new();
    let mut owned = 0;
    for i in 0..geom.grid_rows {
        for j in 0..geom.grid_cols {
            let (ar, ac) = geom.cell_center(i, j);
            let (r, c) = (tile.row0 + ar, tile.col0 + ac);
            // The first tile holding the whole window owns the cell; cells no
            // tile holds are emitted by every tile and merged by dedup.
            let owner = plan.tiles.iter().find(|t| plan.interior(t, r, c, half));
            if owner.is_some_and(|t| t.id != tile.id) {
                continue;
            }
            owned += 1;
            let p = out[(i * geom.grid_cols + j) * classes] as f64;
            if p >= threshold {
                let (lon, lat) = mosaic.pixel_to_geo(r as f64, c as f64);
                dets.push(Detection {
                    id: format!("d{r}_{c}"),
                    tile: tile.id,
                    grid: (i, j),
                    pixel: (r, c),
                    lon,
                    lat,
                    p_mine: p,
                    impact: None,
                    p_impact: None,
                    status: Status::Unreviewed,
                    cluster: None,
                });
            }
        }
    }
    Ok((dets, owned))
}

fn is_geographic(crs: &str) -> bool {
    crs.strip_prefix("EPSG:")
        .and_then(|c| c.parse::<u32>().ok())
        .is_some_and(|c| (4000..5000).contains(&c))
}

/// Local planar coordinates in meters (equirectangular about the set's mean
/// latitude for geographic CRSs).
fn planar(points: &[(f64, f64)], crs: &str) -> Vec<(f64, f64)> {
    if !is_geographic(crs) {
        return points.to_vec();
    }
    let lat0 = points.iter().map(|p| p.1).sum::<f64>() / points.len().max(1) as f64;
    let kx = 111_320.0 * lat0.to_radians().cos();
    points.iter().map(|&(lon, lat)| (lon * kx, lat * 110_540.0)).collect()
}

/// Index pairs closer than `radius` meters.
fn close_pairs(points: &[(f64, f64)], crs: &str, radius: f64) -> Vec<(usize, usize)> {
    let xy = planar(points, crs);
    let key = |p: (f64, f64)| ((p.0 / radius).floor() as i64, (p.1 / radius).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, &p) in xy.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let mut pairs = Vec::new();
    for (i, &p) in xy.iter().enumerate() {
        let (kx, ky) = key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(v) = grid.get(&(kx + dx, ky + dy)) {
                    for &j in v {
                        if j > i && (xy[j].0 - p.0).hypot(xy[j].1 - p.1) <= radius {
                            pairs.push((i, j));
                        }
                    }
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Greedy: strongest first, drop anything within the dedup radius of a kept one.
fn dedup(mut dets: Vec<Detection>, crs: &str) -> Vec<Detection> {
    dets.sort_by(|a, b| b.p_mine.total_cmp(&a.p_mine).then(a.tile.cmp(&b.tile)).then(a.pixel.cmp(&b.pixel)));
    let pts: Vec<(f64, f64)> = dets.iter().map(|d| (d.lon, d.lat)).collect();
    let mut near: Vec<Vec<usize>> = vec![Vec::new(); dets.len()];
    for (i, j) in close_pairs(&pts, crs, DEDUP_RADIUS_M) {
        near[i].push(j);
        near[j].push(i);
    }
    let mut dropped = vec![false; dets.len()];
    for i in 0..dets.len() {
        if dropped[i] {
            continue;
        }
        for &j in &near[i] {
            if j > i {
                dropped[j] = true;
            }
        }
    }
    let mut kept: Vec<Detection> = dets.into_iter().zip(dropped).filter(|(_, d)| !d).map(|(d, _)| d).collect();
    kept.sort_by(|a, b| a.pixel.cmp(&b.pixel));
    kept
}

/// Classify the 21×21 window at each detection. No-ore winners are dropped;
/// windows crossing the mosaic edge keep the detection with impact unknown.
pub fn impact_filter(
    set: &DetectionSet,
    mosaic: &Raster,
    spec: &NetworkSpec,
    weights: &WeightSet<f32>,
    stats: &NormStats,
) -> Result<DetectionSet> {
    check_bands(mosaic, stats)?;
    let shape = spec.output_shape(IMPACT_PATCH, IMPACT_PATCH)?;
    if shape.len() != 3 {
        return Err(Error::Spec(format!("impact network must output 3 classes, got {:?}", shape.dims())));
    }
    let mut windows = Vec::new();
    let mut which = Vec::new();
    let mut kept: Vec<Option<Detection>> = Vec::with_capacity(set.detections.len());
    for (k, d) in set.detections.iter().enumerate() {
        let (r, c) = mosaic.geo_to_pixel(d.lon, d.lat).containing();
        match extract_window_at(mosaic, r, c, IMPACT_PATCH) {
            Ok(w) => {
                let mut data = w.into_data();
                stats.apply(&mut data);
                windows.push(data);
                which.push(k);
                kept.push(None);
            }
            Err(Error::Edge { .. }) => {
                let mut d = d.clone();
                d.impact = None;
                d.p_impact = None;
                kept.push(Some(d));
            }
            Err(e) => return Err(e),
        }
    }
    // Eval mode never draws from it.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let per = IMPACT_PATCH * IMPACT_PATCH * BANDS;
    for (chunk_w, chunk_k) in windows.chunks(256).zip(which.chunks(256)) {
        let mut flat = Vec::with_capacity(chunk_w.len() * per);
        for w in chunk_w {
            flat.extend_from_slice(w);
        }
        let x = Tensor::from_vec(&[chunk_w.len(), IMPACT_PATCH, IMPACT_PATCH, BANDS], flat)?;
        let trace = nn::forward(spec, weights, &x, Mode::Eval, &mut rng)?;
        for (p, &k) in trace.output_data().chunks_exact(3).zip(chunk_k) {
            let probs = [p[0] as f64, p[1] as f64, p[2] as f64];
            let mut best = 0;
            for c in 1..3 {
                if probs[c] > probs[best] {
                    best = c;
                }
            }
            let class = ImpactClass::from_index(best).unwrap();
            if class != ImpactClass::NoOre {
                let mut d = set.detections[k].clone();
                d.impact = Some(class);
                d.p_impact = Some(probs);
                kept[k] = Some(d);
            }
        }
    }
    let mut prov = set.provenance.clone();
    prov.impact_weights = Some(nn::weights_digest(spec, weights)?);
    Ok(DetectionSet {
        detections: kept.into_iter().flatten().collect(),
        provenance: prov,
    })
}

/// Assign cluster ids (1-based, in anchor order): 8-connected grid cells of
/// one tile, and detections of different tiles within 1.5 strides on the
/// ground, end up together.
pub fn cluster(set: &mut DetectionSet, stride_m: f64) {
    let dets = &mut set.detections;
    dets.sort_by(|a, b| a.pixel.cmp(&b.pixel).then(a.id.cmp(&b.id)));
    let n = dets.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let union = |p: &mut Vec<usize>, a: usize, b: usize| {
        let (ra, rb) = (find(p, a), find(p, b));
        if ra != rb {
            p[ra.max(rb)] = ra.min(rb);
        }
    };
    let mut by_cell: HashMap<(usize, usize, usize), usize> = HashMap::new();
    for (k, d) in dets.iter().enumerate() {
        by_cell.insert((d.tile, d.grid.0, d.grid.1), k);
    }
    for (k, d) in dets.iter().enumerate() {
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let (i, j) = (d.grid.0 as i64 + di, d.grid.1 as i64 + dj);
                if (di, dj) == (0, 0) || i < 0 || j < 0 {
                    continue;
                }
                if let Some(&o) = by_cell.get(&(d.tile, i as usize, j as usize)) {
                    union(&mut parent, k, o);
                }
            }
        }
    }
    let pts: Vec<(f64, f64)> = dets.iter().map(|d| (d.lon, d.lat)).collect();
    for (a, b) in close_pairs(&pts, &set.provenance.crs, 1.5 * stride_m) {
        if dets[a].tile != dets[b].tile {
            union(&mut parent, a, b);
        }
    }
    let mut ids: HashMap<usize, usize> = HashMap::new();
    for k in 0..n {
        let root = find(&mut parent, k);
        let next = ids.len() + 1;
        dets[k].cluster = Some(*ids.entry(root).or_insert(next));
    }
}

/// One discovery stride on the ground at the mosaic center, in meters (the
/// larger of the two axes).
pub fn stride_meters(mosaic: &Raster) -> f64 {
    let (h, w) = (mosaic.height() as f64, mosaic.width() as f64);
    let p0 = mosaic.pixel_to_geo(h / 2.0, w / 2.0);
    let pr = mosaic.pixel_to_geo(h / 2.0 + STRIDE as f64, w / 2.0);
    let pc = mosaic.pixel_to_geo(h / 2.0, w / 2.0 + STRIDE as f64);
    let xy = planar(&[p0, pr, pc], mosaic.crs());
    let d = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).hypot(a.1 - b.1);
    d(xy[0], xy[1]).max(d(xy[0], xy[2]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Kml,
    GeoJson,
}

impl FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "kml" => Ok(Format::Kml),
            "geojson" | "json" => Ok(Format::GeoJson),
            other => Err(format!("unknown format {other:?} (csv|kml|geojson)")),
        }
    }
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Format> {
        path.extension()?.to_str()?.parse().ok()
    }
}

pub const CSV_COLUMNS: [&str; 10] = ["id", "lon", "lat", "p_mine", "impact", "p_high", "p_low", "p_noore", "cluster", "status"];
/// Trailing columns that let a CSV export be read back without loss.
pub const CSV_EXTRA: [&str; 5] = ["tile", "grid_i", "grid_j", "row", "col"];

pub fn provenance_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

impl DetectionSet {
    /// Write in `format`, plus a provenance sidecar next to the file.
    pub fn export(&self, format: Format, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        match format {
            Format::Csv => self.write_csv(path)?,
            Format::Kml => std::fs::write(path, self.to_kml()).map_err(|e| Error::io(path, e))?,
            Format::GeoJson => {
                let text = serde_json::to_string_pretty(&self.to_geojson())?;
                std::fs::write(path, text).map_err(|e| Error::io(path, e))?
            }
        }
        let side = provenance_path(path);
        std::fs::write(&side, serde_json::to_string_pretty(&self.provenance)?).map_err(|e| Error::io(&side, e))
    }

    /// Read a CSV or GeoJSON export (by extension).
    pub fn load(path: impl AsRef<Path>) -> Result<DetectionSet> {
        let path = path.as_ref();
        match Format::from_path(path) {
            Some(Format::Csv) => {
                let detections = read_csv(path)?;
                let side = provenance_path(path);
                let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
                let provenance = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
                Ok(DetectionSet { detections, provenance })
            }
            Some(Format::GeoJson) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
                from_geojson(&v).map_err(|m| Error::format(path, m))
            }
            _ => Err(Error::Unsupported(format!("cannot read detections from {}", path.display()))),
        }
    }

    fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(csv_header())?;
        for d in &self.detections {
            w.write_record(csv_row(d))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_geojson(&self) -> serde_json::Value {
        let features: Vec<serde_json::Value> = self
            .detections
            .iter()
            .map(|d| {
                serde_json::json!({
                    "type": "Feature",
                    "id": d.id,
                    "geometry": {"type": "Point", "coordinates": [d.lon, d.lat]},
                    "properties": {
                        "id": d.id,
                        "p_mine": d.p_mine,
                        "impact": d.impact,
                        "p_impact": d.p_impact,
                        "status": d.status,
                        "cluster": d.cluster,
                        "tile": d.tile,
                        "grid": [d.grid.0, d.grid.1],
                        "pixel": [d.pixel.0, d.pixel.1],
                    }
                })
            })
            .collect();
        serde_json::json!({
            "type": "FeatureCollection",
            "provenance": self.provenance,
            "features": features,
        })
    }

    pub fn to_kml(&self) -> String {
        let mut s = String::from(concat!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n",
            "<kml xmlns=\"http://www.opengis.net/kml/2.2\">\n<Document>\n<name>detections</name>\n"
        ));
        for (id, color) in KML_STYLES {
            s.push_str(&format!(
                "<Style id=\"{id}\"><IconStyle><color>{color}</color></IconStyle></Style>\n"
            ));
        }
        for d in &self.detections {
            s.push_str(&format!(
                "<Placemark><name>{}</name><styleUrl>#{}</styleUrl><ExtendedData>",
                xml_escape(&d.id),
                kml_style(d.impact)
            ));
            for (k, v) in csv_header().iter().zip(csv_row(d)).skip(1) {
                s.push_str(&format!("<Data name=\"{k}\"><value>{}</value></Data>", xml_escape(&v)));
            }
            s.push_str(&format!(
                "</ExtendedData><Point><coordinates>{},{},0</coordinates></Point></Placemark>\n",
                d.lon, d.lat
            ));
        }
        s.push_str("</Document>\n</kml>\n");
        s
    }
}

/// Style id and KML `aabbggrr` icon color: red for high impact, yellow for low.
pub const KML_STYLES: [(&str, &str); 3] = [("impact-high", "ff0000ff"), ("impact-low", "ff00ffff"), ("impact-unknown", "ffaaaaaa")];

pub fn kml_style(impact: Option<ImpactClass>) -> &'static str {
    match impact {
        Some(ImpactClass::High) => "impact-high",
        Some(ImpactClass::Low) => "impact-low",
        _ => "impact-unknown",
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// All CSV columns, core then extra.
pub fn csv_header() -> Vec<&'static str> {
    CSV_COLUMNS.iter().chain(CSV_EXTRA.iter()).copied().collect()
}

/// One CSV record in [`csv_header`] order.
pub fn csv_row(d: &Detection) -> Vec<String> {
    let p = |i: usize| d.p_impact.map(|p| p[i].to_string()).unwrap_or_default();
    vec![
        d.id.clone(),
        d.lon.to_string(),
        d.lat.to_string(),
        d.p_mine.to_string(),
        d.impact.map(|c| c.as_str()).unwrap_or("unknown").to_string(),
        p(0),
        p(1),
        p(2),
        d.cluster.map(|c| c.to_string()).unwrap_or_default(),
        d.status.to_string(),
        d.tile.to_string(),
        d.grid.0.to_string(),
        d.grid.1.to_string(),
        d.pixel.0.to_string(),
        d.pixel.1.to_string(),
    ]
}

fn read_csv(path: &Path) -> Result<Vec<Detection>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let want = csv_header();
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::format(path, format!("expected columns {}", want.join(","))));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::format(path, format!("line {}: bad {what}", line + 2));
        let f = |i: usize| rec[i].parse::<f64>();
        let u = |i: usize| rec[i].parse::<usize>();
        let opt_f = |i: usize| if rec[i].is_empty() { Ok(None) } else { f(i).map(Some) };
        let impact = match &rec[4] {
            "unknown" => None,
            t => Some(t.parse::<ImpactClass>().map_err(|_| bad("impact"))?),
        };
        let probs = [opt_f(5), opt_f(6), opt_f(7)];
        let p_impact = match probs {
            [Ok(Some(a)), Ok(Some(b)), Ok(Some(c))] => Some([a, b, c]),
            [Ok(None), Ok(None), Ok(None)] => None,
            _ => return Err(bad("impact probabilities")),
        };
        out.push(Detection {
            id: rec[0].to_string(),
            lon: f(1).map_err(|_| bad("lon"))?,
            lat: f(2).map_err(|_| bad("lat"))?,
            p_mine: f(3).map_err(|_| bad("p_mine"))?,
            impact,
            p_impact,
            cluster: if rec[8].is_empty() { None } else { Some(u(8).map_err(|_| bad("cluster"))?) },
            status: rec[9].parse().map_err(|_| bad("status"))?,
            tile: u(10).map_err(|_| bad("tile"))?,
            grid: (u(11).map_err(|_| bad("grid_i"))?, u(12).map_err(|_| bad("grid_j"))?),
            pixel: (u(13).map_err(|_| bad("row"))?, u(14).map_err(|_| bad("col"))?),
        });
    }
    Ok(out)
}

fn from_geojson(v: &serde_json::Value) -> std::result::Result<DetectionSet, String> {
    let provenance: Provenance = serde_json::from_value(v.get("provenance").cloned().ok_or("missing provenance member")?)
        .map_err(|e| e.to_string())?;
    let feats = v.get("features").and_then(|f| f.as_array()).ok_or("missing features")?;
    let mut detections = Vec::with_capacity(feats.len());
    for (k, f) in feats.iter().enumerate() {
        let err = |what: &str| format!("feature {k}: bad {what}");
        let c = f.pointer("/geometry/coordinates").and_then(|c| c.as_array()).ok_or_else(|| err("geometry"))?;
        let p = f.get("properties").ok_or_else(|| err("properties"))?;
        let get = |name: &str| p.get(name).cloned().unwrap_or(serde_json::Value::Null);
        let de = |name: &str| -> std::result::Result<serde_json::Value, String> { Ok(get(name)) };
        let pair = |name: &str| -> std::result::Result<(usize, usize), String> {
            serde_json::from_value(de(name)?).map_err(|_| err(name))
        };
        detections.push(Detection {
            id: get("id").as_str().ok_or_else(|| err("id"))?.to_string(),
            lon: c.first().and_then(|x| x.as_f64()).ok_or_else(|| err("lon"))?,
            lat: c.get(1).and_then(|x| x.as_f64()).ok_or_else(|| err("lat"))?,
            p_mine: get("p_mine").as_f64().ok_or_else(|| err("p_mine"))?,
            impact: serde_json::from_value(get("impact")).map_err(|_| err("impact"))?,
            p_impact: serde_json::from_value(get("p_impact")).map_err(|_| err("p_impact"))?,
            status: serde_json::from_value(get("status")).map_err(|_| err("status"))?,
            cluster: serde_json::from_value(get("cluster")).map_err(|_| err("cluster"))?,
            tile: serde_json::from_value(get("tile")).map_err(|_| err("tile"))?,
            grid: pair("grid")?,
            pixel: pair("pixel")?,
        });
    }
    Ok(DetectionSet { detections, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(p: &TilePlan) -> (usize, usize) {
        (p.rows, p.cols)
    }

    #[test]
    fn tile_counts() {
        assert_eq!(shape(&plan_tiles(9216, 9216, 4608, 216).unwrap()), (3, 3));
        assert_eq!(shape(&plan_tiles(9216, 9216, 4608, 0).unwrap()), (2, 2));
        assert_eq!(shape(&plan_tiles(4608, 4608, 4608, 216).unwrap()), (1, 1));
        assert_eq!(shape(&plan_tiles(4000, 9216, 4608, 216).unwrap()), (1, 3));
        assert!(plan_tiles(1000, 1000, 430, 0).is_err());
        assert!(plan_tiles(150, 1000, 4608, 216).is_err());
    }

    #[test]
    fn tiles_cover_and_overlap() {
        for (n, max, ov) in [(9216, 4608, 216), (5000, 431, 216), (2048, 700, 300), (3000, 1000, 0)] {
            let p = plan_tiles(n, n, max, ov).unwrap();
            let cols: Vec<&Tile> = p.tiles.iter().filter(|t| t.row0 == 0).collect();
            assert_eq!(cols[0].col0, 0);
            assert_eq!(cols.last().unwrap().col0 + cols.last().unwrap().width, n);
            for w in cols.windows(2) {
                let overlap = (w[0].col0 + w[0].width) as i64 - w[1].col0 as i64;
                assert!(overlap >= ov as i64, "{n} {max} {ov}: overlap {overlap}");
                if ov > 0 {
                    assert_eq!(w[1].col0 % 27, 0);
                }
            }
            assert!(p.tiles.iter().all(|t| t.width <= max && t.width >= DISCOVERY_PATCH));
        }
    }

    fn det(tile: usize, i: usize, j: usize) -> Detection {
        let (r, c) = (94 + 27 * i, 94 + 27 * j);
        Detection {
            id: format!("d{r}_{c}"),
            tile,
            grid: (i, j),
            pixel: (r, c),
            lon: -44.0 + c as f64 * 1e-4,
            lat: -20.0 - r as f64 * 1e-4,
            p_mine: 0.9,
            impact: None,
            p_impact: None,
            status: Status::Unreviewed,
            cluster: None,
        }
    }

    fn set(dets: Vec<Detection>) -> DetectionSet {
        DetectionSet {
            detections: dets,
            provenance: Provenance {
                mosaic: "m.tif".into(),
                crs: "EPSG:4326".into(),
                discovery_weights: "00".into(),
                impact_weights: None,
                threshold: 0.5,
                max_tile: 4608,
                overlap: 216,
                tiles: 1,
                grid_cells: 100,
                bounds: [-45.0, -21.0, -43.0, -19.0],
                created: "2020-01-01T00:00:00Z".into(),
            },
        }
    }

    #[test]
    fn clusters() {
        let mut s = set(vec![det(0, 3, 3), det(0, 3, 4)]);
        cluster(&mut s, 300.0);
        assert_eq!(s.detections[0].cluster, s.detections[1].cluster);
        let mut s = set(vec![det(0, 3, 3), det(0, 3, 13)]);
        cluster(&mut s, 300.0);
        assert_ne!(s.detections[0].cluster, s.detections[1].cluster);
    }

    #[test]
    fn dedup_keeps_stronger() {
        let mut a = det(0, 2, 2);
        let mut b = det(1, 2, 2);
        a.p_mine = 0.6;
        b.p_mine = 0.8;
        let kept = dedup(vec![a, b, det(0, 2, 3)], "EPSG:4326");
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].tile, 1);
    }
}
