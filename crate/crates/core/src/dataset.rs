//! Labeled points, patch sets extracted around them, per-band normalization
//! and reproducible stratified splits.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{extract_window, read_geotiff, write_geotiff, Raster, S2_BANDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointClass {
    Mine,
    Background,
}

impl PointClass {
    /// Output channel of the discovery network.
    pub fn index(self) -> usize {
        match self {
            PointClass::Mine => 0,
            PointClass::Background => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PointClass::Mine => "mine",
            PointClass::Background => "background",
        }
    }
}

impl FromStr for PointClass {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mine" => Ok(PointClass::Mine),
            "background" => Ok(PointClass::Background),
            other => Err(format!("unknown class {other:?}")),
        }
    }
}

impl fmt::Display for PointClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImpactClass {
    #[serde(rename = "high")]
    High,
    #[serde(rename = "low")]
    Low,
    #[serde(rename = "no-ore")]
    NoOre,
}

impl ImpactClass {
    pub const ALL: [ImpactClass; 3] = [ImpactClass::High, ImpactClass::Low, ImpactClass::NoOre];

    /// Output channel of the impact network.
    pub fn index(self) -> usize {
        match self {
            ImpactClass::High => 0,
            ImpactClass::Low => 1,
            ImpactClass::NoOre => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ImpactClass::High => "high",
            ImpactClass::Low => "low",
            ImpactClass::NoOre => "no-ore",
        }
    }
}

impl FromStr for ImpactClass {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "high" => Ok(ImpactClass::High),
            "low" => Ok(ImpactClass::Low),
            "no-ore" | "noore" | "no_ore" => Ok(ImpactClass::NoOre),
            other => Err(format!("unknown impact class {other:?}")),
        }
    }
}

impl fmt::Display for ImpactClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Extracted material at a site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ore {
    Lead,
    Iron,
    Niobium,
    Zinc,
    Copper,
    Phosphate,
    Limestone,
    Nickel,
    Schist,
    Manganese,
    Bauxite,
    Sand,
    Gravel,
    Clay,
    Stones,
    None,
    Unknown,
}

const ORE_TOKENS: [(&str, Ore); 17] = [
    ("lead", Ore::Lead),
    ("iron", Ore::Iron),
    ("niobium", Ore::Niobium),
    ("zinc", Ore::Zinc),
    ("copper", Ore::Copper),
    ("phosphate", Ore::Phosphate),
    ("limestone", Ore::Limestone),
    ("nickel", Ore::Nickel),
    ("schist", Ore::Schist),
    ("manganese", Ore::Manganese),
    ("bauxite", Ore::Bauxite),
    ("sand", Ore::Sand),
    ("gravel", Ore::Gravel),
    ("clay", Ore::Clay),
    ("stones", Ore::Stones),
    ("none", Ore::None),
    ("unknown", Ore::Unknown),
];

impl Ore {
    pub fn as_str(self) -> &'static str {
        ORE_TOKENS.iter().find(|(_, o)| *o == self).map(|(s, _)| *s).unwrap()
    }

    /// Impact class implied by the material; `None` when the ore is unknown.
    pub fn impact(self) -> Option<ImpactClass> {
        use Ore::*;
        match self {
            Lead | Iron | Niobium | Zinc | Copper | Phosphate | Limestone | Nickel | Schist | Manganese
            | Bauxite => Some(ImpactClass::High),
            Sand | Gravel | Clay | Stones => Some(ImpactClass::Low),
            None => Some(ImpactClass::NoOre),
            Unknown => Option::None,
        }
    }
}

impl FromStr for Ore {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let t = s.trim().to_ascii_lowercase();
        ORE_TOKENS
            .iter()
            .find(|(k, _)| *k == t)
            .map(|(_, o)| *o)
            .ok_or_else(|| format!("unknown ore token {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointRecord {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    pub class: PointClass,
    pub ore: Ore,
    pub source: String,
}

impl PointRecord {
    pub fn impact(&self) -> Option<ImpactClass> {
        match self.class {
            PointClass::Background => Some(ImpactClass::NoOre),
            PointClass::Mine => self.ore.impact(),
        }
    }
}

/// One rejected input row, with its 1-based line (CSV) or feature index (GeoJSON).
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub row: usize,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {}: {}", self.row, self.message)
    }
}

#[derive(Debug, Clone, Default)]
pub struct PointLoad {
    pub records: Vec<PointRecord>,
    pub errors: Vec<RowError>,
}

fn parse_record(id: &str, lon: &str, lat: &str, class: &str, ore: &str, source: &str) -> std::result::Result<PointRecord, String> {
    let id = id.trim();
    if id.is_empty() {
        return Err("empty id".into());
    }
    let lon: f64 = lon.trim().parse().map_err(|_| format!("bad longitude {lon:?}"))?;
    let lat: f64 = lat.trim().parse().map_err(|_| format!("bad latitude {lat:?}"))?;
    if !(lon.is_finite() && (-180.0..=180.0).contains(&lon)) {
        return Err(format!("longitude {lon} out of range"));
    }
    if !(lat.is_finite() && (-90.0..=90.0).contains(&lat)) {
        return Err(format!("latitude {lat} out of range"));
    }
    let class: PointClass = class.parse()?;
    let ore = match (ore.trim(), class) {
        ("", PointClass::Background) => Ore::None,
        ("", PointClass::Mine) => Ore::Unknown,
        (t, _) => t.parse()?,
    };
    if class == PointClass::Mine && ore == Ore::None {
        return Err("mine record with ore none".into());
    }
    if class == PointClass::Background && ore != Ore::None {
        return Err(format!("background record with ore {}", ore.as_str()));
    }
    Ok(PointRecord {
        id: id.to_string(),
        lon,
        lat,
        class,
        ore,
        source: source.trim().to_string(),
    })
}

/// Read points from CSV (`id,lon,lat,class,ore[,source]`) or GeoJSON
/// (by extension). Bad rows are collected, not fatal; duplicate ids are row errors.
pub fn load_points(path: impl AsRef<Path>) -> Result<PointLoad> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_json = matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("geojson" | "json")
    );
    let mut load = if is_json {
        points_from_geojson(&text, path)?
    } else {
        points_from_csv(&text, path)?
    };
    let mut seen = HashSet::new();
    let mut kept = Vec::with_capacity(load.records.len());
    for (i, r) in load.records.drain(..).enumerate() {
        if seen.insert(r.id.clone()) {
            kept.push(r);
        } else {
            load.errors.push(RowError {
                row: i + 1,
                message: format!("duplicate id {:?}", r.id),
            });
        }
    }
    load.records = kept;
    Ok(load)
}

pub fn points_from_csv(text: &str, path: &Path) -> Result<PointLoad> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let req = |name: &str| col(name).ok_or_else(|| Error::format(path, format!("missing column {name:?}")));
    let (ci, cx, cy, cc, co) = (req("id")?, req("lon")?, req("lat")?, req("class")?, req("ore")?);
    let cs = col("source");
    let mut load = PointLoad::default();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                load.errors.push(RowError { row: line, message: e.to_string() });
                continue;
            }
        };
        let get = |c: usize| row.get(c).unwrap_or("");
        match parse_record(get(ci), get(cx), get(cy), get(cc), get(co), cs.map(get).unwrap_or("")) {
            Ok(r) => load.records.push(r),
            Err(message) => load.errors.push(RowError { row: line, message }),
        }
    }
    Ok(load)
}

pub fn points_from_geojson(text: &str, path: &Path) -> Result<PointLoad> {
    let doc: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
    let features = doc
        .get("features")
        .and_then(|f| f.as_array())
        .ok_or_else(|| Error::format(path, "not a GeoJSON FeatureCollection"))?;
    let mut load = PointLoad::default();
    for (i, f) in features.iter().enumerate() {
        let row = i + 1;
        let coords = f
            .pointer("/geometry/coordinates")
            .and_then(|c| c.as_array())
            .filter(|_| f.pointer("/geometry/type").and_then(|t| t.as_str()) == Some("Point"));
        let Some(coords) = coords.filter(|c| c.len() >= 2) else {
            load.errors.push(RowError { row, message: "feature is not a Point".into() });
            continue;
        };
        let s = |v: Option<&serde_json::Value>| match v {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Null) | None => String::new(),
            Some(other) => other.to_string(),
        };
        let props = f.get("properties");
        let prop = |k: &str| s(props.and_then(|p| p.get(k)));
        let id = match prop("id") {
            x if x.is_empty() => s(f.get("id")),
            x => x,
        };
        match parse_record(
            &id,
            &s(coords.first()),
            &s(coords.get(1)),
            &prop("class"),
            &prop("ore"),
            &prop("source"),
        ) {
            Ok(r) => load.records.push(r),
            Err(message) => load.errors.push(RowError { row, message }),
        }
    }
    Ok(load)
}

/// Write points in the CSV layout read by [`load_points`].
pub fn write_points_csv(records: &[PointRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, points_csv_string(records)?).map_err(|e| Error::io(path, e))
}

/// The [`write_points_csv`] layout as a string.
pub fn points_csv_string(records: &[PointRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "lon", "lat", "class", "ore", "source"])?;
    for r in records {
        w.write_record([
            r.id.as_str(),
            &format!("{}", r.lon),
            &format!("{}", r.lat),
            r.class.as_str(),
            if r.ore == Ore::None { "" } else { r.ore.as_str() },
            &r.source,
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub id: String,
    /// `mine` or `background`.
    pub label: PointClass,
    pub impact: Option<ImpactClass>,
    pub lon: f64,
    pub lat: f64,
    /// Relative to the manifest's directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub size: usize,
    pub bands: usize,
    pub records: Vec<PatchRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Manifest> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone)]
pub struct PatchSetReport {
    pub manifest: Manifest,
    pub skipped: Vec<(String, String)>,
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Extract one `size`-px patch per point from the first mosaic that holds
/// the full window, write them to `out_dir`, and save the manifest. Points
/// that no mosaic can serve are skipped with a warning; fewer than half
/// succeeding aborts.
pub fn build_patchset(
    points: &[PointRecord],
    mosaics: &[Raster],
    size: usize,
    out_dir: impl AsRef<Path>,
) -> Result<PatchSetReport> {
    let out_dir = out_dir.as_ref();
    if points.is_empty() {
        return Err(Error::Input("no points to extract".into()));
    }
    for m in mosaics {
        if m.band_count() < S2_BANDS.len() {
            return Err(Error::Input(format!("mosaic has {} bands, need 12", m.band_count())));
        }
    }
    let patch_dir = out_dir.join("patches");
    std::fs::create_dir_all(&patch_dir).map_err(|e| Error::io(&patch_dir, e))?;
    let mut names = HashSet::new();
    let files: Vec<String> = points
        .iter()
        .map(|p| {
            let base = file_safe(&p.id);
            let mut name = format!("{base}.tif");
            let mut k = 1;
            while !names.insert(name.clone()) {
                name = format!("{base}_{k}.tif");
                k += 1;
            }
            format!("patches/{name}")
        })
        .collect();

    let results: Vec<std::result::Result<PatchRecord, (String, String)>> = points
        .par_iter()
        .zip(files.par_iter())
        .map(|(p, file)| {
            let mut last = String::from("no mosaic");
            for m in mosaics {
                match extract_window(m, p.lon, p.lat, size).and_then(|w| w.model_bands()) {
                    Ok(patch) => {
                        write_geotiff(&patch, out_dir.join(file)).map_err(|e| (p.id.clone(), e.to_string()))?;
                        return Ok(PatchRecord {
                            id: p.id.clone(),
                            label: p.class,
                            impact: p.impact(),
                            lon: p.lon,
                            lat: p.lat,
                            file: file.clone(),
                        });
                    }
                    Err(e) => last = e.to_string(),
                }
            }
            Err((p.id.clone(), last))
        })
        .collect();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err((id, why)) => {
                log::warn!("skipping point {id}: {why}");
                skipped.push((id, why));
            }
        }
    }
    if records.len() * 2 < points.len() {
        return Err(Error::Input(format!(
            "only {} of {} patches could be extracted (< 50%)",
            records.len(),
            points.len()
        )));
    }
    let manifest = Manifest {
        size,
        bands: S2_BANDS.len(),
        records,
    };
    manifest.save(out_dir)?;
    Ok(PatchSetReport { manifest, skipped })
}

/// Patches held in memory, `[size][size][bands]` each.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub patches: Vec<Vec<f32>>,
}

impl PatchSet {
    pub fn load(dir: impl AsRef<Path>) -> Result<PatchSet> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = Manifest::load(&dir)?;
        let patches = manifest
            .records
            .par_iter()
            .map(|r| {
                let path = dir.join(&r.file);
                let ras = read_geotiff(&path)?;
                if ras.height() != manifest.size || ras.width() != manifest.size || ras.band_count() != manifest.bands {
                    return Err(Error::format(
                        &path,
                        format!(
                            "patch is {}x{}x{}, manifest says {}x{}x{}",
                            ras.height(),
                            ras.width(),
                            ras.band_count(),
                            manifest.size,
                            manifest.size,
                            manifest.bands
                        ),
                    ));
                }
                Ok(ras.into_data())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PatchSet { dir, manifest, patches })
    }

    pub fn from_parts(manifest: Manifest, patches: Vec<Vec<f32>>) -> Result<PatchSet> {
        let want = manifest.size * manifest.size * manifest.bands;
        if patches.len() != manifest.records.len() || patches.iter().any(|p| p.len() != want) {
            return Err(Error::Dimension("patches do not match the manifest".into()));
        }
        Ok(PatchSet {
            dir: PathBuf::new(),
            manifest,
            patches,
        })
    }

    /// Concatenate sets of one patch geometry, e.g. a training set and the
    /// hard negatives extracted after review. Ids must stay unique.
    pub fn concat(sets: Vec<PatchSet>) -> Result<PatchSet> {
        let mut it = sets.into_iter();
        let mut out = it.next().ok_or_else(|| Error::Input("no patch sets given".into()))?;
        let mut ids: HashSet<String> = out.manifest.records.iter().map(|r| r.id.clone()).collect();
        for s in it {
            if s.manifest.size != out.manifest.size || s.manifest.bands != out.manifest.bands {
                return Err(Error::Input(format!(
                    "patch set {} holds {}-px {}-band patches, expected {}-px {}-band",
                    s.dir.display(),
                    s.manifest.size,
                    s.manifest.bands,
                    out.manifest.size,
                    out.manifest.bands
                )));
            }
            for r in &s.manifest.records {
                if !ids.insert(r.id.clone()) {
                    return Err(Error::Input(format!("patch id {} appears in more than one set", r.id)));
                }
            }
            out.manifest.records.extend(s.manifest.records);
            out.patches.extend(s.patches);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn size(&self) -> usize {
        self.manifest.size
    }

    pub fn bands(&self) -> usize {
        self.manifest.bands
    }
}

pub const NORM_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<NormStats> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: NormStats = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if s.mean.len() != s.std.len() || s.std.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::format(path, "inconsistent normalization stats"));
        }
        Ok(s)
    }

    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    /// Normalize interleaved samples in place.
    pub fn apply(&self, data: &mut [f32]) {
        let n = self.mean.len();
        let scale: Vec<f64> = self.std.iter().map(|s| 1.0 / s).collect();
        for px in data.chunks_exact_mut(n) {
            for b in 0..n {
                px[b] = ((px[b] as f64 - self.mean[b]) * scale[b]) as f32;
            }
        }
    }
}

/// Per-band mean and population std over the patches at `train` only.
pub fn compute_norm_stats(set: &PatchSet, train: &[usize]) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::Input("no training patches for normalization".into()));
    }
    let nb = set.bands();
    let mut sum = vec![0.0f64; nb];
    let mut count = 0usize;
    for &i in train {
        for px in set.patches[i].chunks_exact(nb) {
            for b in 0..nb {
                sum[b] += px[b] as f64;
            }
            count += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0f64; nb];
    for &i in train {
        for px in set.patches[i].chunks_exact(nb) {
            for b in 0..nb {
                let d = px[b] as f64 - mean[b];
                sq[b] += d * d;
            }
        }
    }
    let std = sq
        .iter()
        .enumerate()
        .map(|(b, s)| {
            let sd = (s / count as f64).sqrt();
            if sd < NORM_EPSILON {
                log::warn!("band {b} is constant over the training patches; std set to {NORM_EPSILON}");
                NORM_EPSILON
            } else {
                sd
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

pub fn normalize(patch: &[f32], stats: &NormStats) -> Vec<f32> {
    let mut out = patch.to_vec();
    stats.apply(&mut out);
    out
}

/// Validation index lists per fold; training is the complement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    pub n: usize,
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn validation(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    pub fn train(&self, fold: usize) -> Vec<usize> {
        let val: HashSet<usize> = self.folds[fold].iter().copied().collect();
        (0..self.n).filter(|i| !val.contains(i)).collect()
    }
}

/// Stratified k-fold split over items with the given class labels.
///
/// Each class is shuffled with its own seeded stream, then all classes are
/// dealt round-robin onto the folds with one running counter, so fold sizes
/// differ by at most one and every fold sees each class in proportion.
pub fn kfold_split(classes: &[usize], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Usage(format!("k-fold needs k >= 2, got {k}")));
    }
    let groups = class_groups(classes, seed);
    for (c, g) in &groups {
        if g.len() < k {
            return Err(Error::Input(format!("class {c} has {} members, fewer than k = {k}", g.len())));
        }
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (_, g) in groups {
        for i in g {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    Ok(FoldSplit {
        k,
        seed,
        n: classes.len(),
        folds,
    })
}

fn class_groups(classes: &[usize], seed: u64) -> Vec<(usize, Vec<usize>)> {
    let mut ids: Vec<usize> = classes.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|c| {
            let mut g: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == c).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            g.shuffle(&mut rng);
            (c, g)
        })
        .collect()
}

/// `repeats` stratified holdout splits, each validating on `val_fraction` of every class.
pub fn holdout_splits(classes: &[usize], val_fraction: f64, repeats: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if !(0.0 < val_fraction && val_fraction < 1.0) {
        return Err(Error::Usage(format!("validation fraction {val_fraction} not in (0, 1)")));
    }
    (0..repeats)
        .map(|r| {
            let mut train = Vec::new();
            let mut val = Vec::new();
            for (c, g) in class_groups(classes, seed.wrapping_add(r as u64)) {
                let nv = ((g.len() as f64) * val_fraction).round() as usize;
                if nv == 0 || nv == g.len() {
                    return Err(Error::Input(format!("class {c} too small for a {val_fraction} holdout")));
                }
                val.extend_from_slice(&g[..nv]);
                train.extend_from_slice(&g[nv..]);
            }
            train.sort_unstable();
            val.sort_unstable();
            Ok((train, val))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ore_to_impact() {
        assert_eq!(Ore::Iron.impact(), Some(ImpactClass::High));
        assert_eq!(Ore::Sand.impact(), Some(ImpactClass::Low));
        assert_eq!(Ore::Unknown.impact(), None);
        let bg = parse_record("b", "1", "2", "background", "", "").unwrap();
        assert_eq!(bg.impact(), Some(ImpactClass::NoOre));
        for (tok, _) in ORE_TOKENS {
            assert_eq!(tok.parse::<Ore>().unwrap().as_str(), tok);
        }
    }

    #[test]
    fn row_errors() {
        assert!(parse_record("a", "200", "0", "mine", "iron", "").is_err());
        assert!(parse_record("a", "x", "0", "mine", "iron", "").is_err());
        assert!(parse_record("a", "0", "0", "mine", "gold", "").is_err());
        assert!(parse_record("a", "0", "0", "dam", "iron", "").is_err());
        assert!(parse_record("a", "0", "0", "mine", "none", "").is_err());
        assert!(parse_record("a", "0", "0", "background", "iron", "").is_err());
    }

    fn tiny_set(size: usize, ids: &[&str]) -> PatchSet {
        let records = ids
            .iter()
            .map(|id| PatchRecord {
                id: id.to_string(),
                label: PointClass::Background,
                impact: None,
                lon: 0.0,
                lat: 0.0,
                file: format!("{id}.tif"),
            })
            .collect();
        PatchSet {
            dir: PathBuf::from(ids.join("_")),
            manifest: Manifest { size, bands: 12, records },
            patches: ids.iter().enumerate().map(|(k, _)| vec![k as f32; size * size * 12]).collect(),
        }
    }

    #[test]
    fn concat_keeps_order_and_rejects_clashes() {
        let all = PatchSet::concat(vec![tiny_set(3, &["a", "b"]), tiny_set(3, &["c"])]).unwrap();
        let ids: Vec<&str> = all.manifest.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(all.patches[2][0], 0.0);
        assert_eq!(all.len(), 3);
        assert!(matches!(PatchSet::concat(vec![tiny_set(3, &["a"]), tiny_set(3, &["a"])]), Err(Error::Input(_))));
        assert!(matches!(PatchSet::concat(vec![tiny_set(3, &["a"]), tiny_set(4, &["b"])]), Err(Error::Input(_))));
        assert!(PatchSet::concat(Vec::new()).is_err());
    }

    #[test]
    fn fold_sizes() {
        let classes: Vec<usize> = (0..2860).map(|i| (i < 1397) as usize).collect();
        let s = kfold_split(&classes, 10, 7).unwrap();
        assert!(s.folds.iter().all(|f| f.len() == 286));
        let classes: Vec<usize> = (0..1275).map(|i| i % 3).collect();
        let s = kfold_split(&classes, 10, 7).unwrap();
        let mut sizes: Vec<usize> = s.folds.iter().map(|f| f.len()).collect();
        sizes.sort();
        assert_eq!(sizes.first(), Some(&127));
        assert_eq!(sizes.last(), Some(&128));
        assert_eq!(s, kfold_split(&classes, 10, 7).unwrap());
        assert!(kfold_split(&[0, 0, 1], 2, 0).is_err());
        assert!(kfold_split(&[0, 1], 1, 0).is_err());
    }
}
