//! Procedural 12-band scenes with exact ground truth.
//!
//! The spectral prototypes below are chosen to be separable, not realistic:
//! the generator exists to test the pipeline (compositing, training,
//! wide-area detection, review loop) against known answers. Values are
//! surface reflectance scaled by 10 000, in `S2_BANDS` order.

use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compositing::{Scene, SceneMeta, SceneStack, QA60_OPAQUE};
use crate::dataset::{Manifest, Ore, PatchRecord, PointClass, PointRecord};
use crate::error::{Error, Result};
use crate::models::{DISCOVERY_PATCH, IMPACT_PATCH};
use crate::raster::{
    extract_window_at, write_geotiff, GeoTransform, Raster, SampleType, DEFAULT_PIXEL_DEG, QA60, S2_BANDS,
};

pub const VEGETATION: [f32; 12] = [300., 400., 700., 400., 1100., 2500., 3000., 3300., 3400., 3500., 1700., 800.];
pub const SOIL: [f32; 12] = [900., 1100., 1400., 1800., 2000., 2200., 2400., 2500., 2600., 2600., 3000., 2600.];
pub const WATER: [f32; 12] = [800., 900., 700., 400., 300., 200., 150., 100., 90., 80., 50., 40.];
/// Tailings: bright SWIR, suppressed NIR. Drawn with an adjacent pond.
pub const TAILINGS: [f32; 12] = [1200., 1400., 1700., 1900., 2000., 1500., 1300., 1200., 1200., 1300., 4500., 4200.];
/// Open quarry: bright across the visible bands.
pub const QUARRY: [f32; 12] = [2200., 2600., 3000., 3300., 3300., 3200., 3200., 3200., 3200., 3100., 3400., 3000.];
/// Bare rock outcrop: SWIR-bright like tailings but with soil-like NIR and no pond.
pub const OUTCROP: [f32; 12] = [1100., 1300., 1600., 1900., 2100., 2400., 2600., 2700., 2800., 2800., 4300., 3900.];
/// Cloud pixels in generated stacks.
pub const CLOUD_VALUE: f32 = 8000.0;

const HIGH_ORES: [Ore; 11] = [
    Ore::Lead,
    Ore::Iron,
    Ore::Niobium,
    Ore::Zinc,
    Ore::Copper,
    Ore::Phosphate,
    Ore::Limestone,
    Ore::Nickel,
    Ore::Schist,
    Ore::Manganese,
    Ore::Bauxite,
];
const LOW_ORES: [Ore; 4] = [Ore::Sand, Ore::Gravel, Ore::Clay, Ore::Stones];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    /// Tailings dam with a pond; a mine of high impact.
    High,
    /// Quarry; a mine of low impact.
    Low,
    /// Outcrop that resembles tailings. Not a mine.
    Decoy,
}

impl TargetKind {
    fn prototype(self) -> &'static [f32; 12] {
        match self {
            TargetKind::High => &TAILINGS,
            TargetKind::Low => &QUARRY,
            TargetKind::Decoy => &OUTCROP,
        }
    }

    pub fn is_mine(self) -> bool {
        self != TargetKind::Decoy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub row: f64,
    pub col: f64,
    pub radius: f64,
    pub kind: TargetKind,
}

impl Target {
    fn pond(&self) -> Option<(f64, f64, f64)> {
        (self.kind == TargetKind::High).then_some((self.row, self.col + 1.5 * self.radius, 0.5 * self.radius))
    }

    /// Radius around the center that covers every pixel the target draws.
    pub fn extent(&self) -> f64 {
        if self.kind == TargetKind::High {
            2.0 * self.radius
        } else {
            self.radius
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Background {
    pub vegetation: f64,
    pub soil: f64,
    pub water: f64,
    /// Per-pixel, per-band Gaussian noise.
    pub noise_sigma: f64,
    /// Length scale of land-cover patches, px.
    pub feature_px: f64,
}

impl Default for Background {
    fn default() -> Self {
        Background {
            vegetation: 0.6,
            soil: 0.37,
            water: 0.03,
            noise_sigma: 60.0,
            feature_px: 48.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub size: usize,
    pub seed: u64,
    pub background: Background,
    pub targets: Vec<Target>,
    /// Longitude/latitude of the top-left corner.
    pub origin: (f64, f64),
    pub pixel_deg: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 512,
            seed: 0,
            background: Background::default(),
            targets: Vec::new(),
            origin: (-44.0, -20.0),
            pixel_deg: DEFAULT_PIXEL_DEG,
        }
    }
}

impl SceneSpec {
    pub fn geo(&self) -> GeoTransform {
        GeoTransform::north_up(self.origin.0, self.origin.1, self.pixel_deg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Spec("scene size must be positive".into()));
        }
        let b = &self.background;
        let mix = [b.vegetation, b.soil, b.water];
        if mix.iter().any(|&m| !(m >= 0.0)) || mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Spec("background mixture needs non-negative weights with a positive sum".into()));
        }
        if !(b.noise_sigma >= 0.0) || !(b.feature_px > 0.0) {
            return Err(Error::Spec("noise sigma must be >= 0 and feature size > 0".into()));
        }
        if !(self.pixel_deg > 0.0) {
            return Err(Error::Spec("pixel size must be positive".into()));
        }
        let n = self.size as f64;
        for (i, t) in self.targets.iter().enumerate() {
            if !(t.radius >= 1.0) {
                return Err(Error::Spec(format!("target {i} radius {} below 1 px", t.radius)));
            }
            let e = t.extent();
            if t.row - e < 0.0 || t.col - e < 0.0 || t.row + e > n - 1.0 || t.col + e > n - 1.0 {
                return Err(Error::Spec(format!("target {i} at ({}, {}) does not fit in the scene", t.row, t.col)));
            }
            for (j, u) in self.targets[..i].iter().enumerate() {
                let d = (t.row - u.row).hypot(t.col - u.col);
                if d < t.extent() + u.extent() + 1.0 {
                    return Err(Error::Spec(format!("targets {j} and {i} overlap")));
                }
            }
        }
        Ok(())
    }
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Bilinear value noise in [0, 1] on a lattice with `cell` px spacing.
struct ValueNoise {
    cell: f64,
    n: usize,
    lattice: Vec<f32>,
}

impl ValueNoise {
    fn new(size: usize, cell: f64, rng: &mut impl Rng) -> Self {
        let n = (size as f64 / cell).ceil() as usize + 2;
        ValueNoise {
            cell,
            n,
            lattice: (0..n * n).map(|_| rng.random::<f32>()).collect(),
        }
    }

    fn at(&self, row: usize, col: usize) -> f32 {
        let y = row as f64 / self.cell;
        let x = col as f64 / self.cell;
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (ty, tx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
        // Smoothstep keeps the field free of visible lattice creases.
        let (ty, tx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
        let v = |r: usize, c: usize| self.lattice[r.min(self.n - 1) * self.n + c.min(self.n - 1)];
        let a = v(y0, x0) + (v(y0, x0 + 1) - v(y0, x0)) * tx;
        let b = v(y0 + 1, x0) + (v(y0 + 1, x0 + 1) - v(y0 + 1, x0)) * tx;
        a + (b - a) * ty
    }
}

/// Render the scene and return it with one record per target. Mines carry a
/// randomly chosen ore of their impact class; decoys are background records.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Raster, Vec<PointRecord>)> {
    spec.validate()?;
    let n = spec.size;
    let nb = S2_BANDS.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fields: Vec<ValueNoise> = (0..3).map(|_| ValueNoise::new(n, spec.background.feature_px, &mut rng)).collect();
    let gains: Vec<f32> = spec.targets.iter().map(|_| rng.random_range(0.92..1.08)).collect();
    let b = &spec.background;
    let mix = [b.vegetation, b.soil, b.water];
    let protos = [&VEGETATION, &SOIL, &WATER];
    let sigma = b.noise_sigma as f32;
    let seed = spec.seed;

    let mut data = vec![0.0f32; n * n * nb];
    data.par_chunks_mut(n * nb).enumerate().for_each(|(row, out)| {
        let mut prng = ChaCha8Rng::seed_from_u64(mix_seed(seed, row as u64 + 1));
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        for col in 0..n {
            let px = &mut out[col * nb..(col + 1) * nb];
            let mut base = [0.0f32; 12];
            let mut hit = None;
            for (ti, t) in spec.targets.iter().enumerate() {
                let (r, c) = (row as f64, col as f64);
                if (r - t.row).hypot(c - t.col) <= t.radius {
                    hit = Some(t.kind.prototype().map(|v| v * gains[ti]));
                } else if let Some((pr, pc, rad)) = t.pond() {
                    if (r - pr).hypot(c - pc) <= rad {
                        hit = Some(WATER);
                    }
                }
            }
            match hit {
                Some(p) => base = p,
                None => {
                    let w: Vec<f64> = (0..3)
                        .map(|k| mix[k] * (6.0 * fields[k].at(row, col) as f64).exp())
                        .collect();
                    let total: f64 = w.iter().sum();
                    for (k, p) in protos.iter().enumerate() {
                        let wk = (w[k] / total) as f32;
                        for (bv, pv) in base.iter_mut().zip(p.iter()) {
                            *bv += wk * pv;
                        }
                    }
                }
            }
            for (o, v) in px.iter_mut().zip(base) {
                let noisy = v + sigma * normal.sample(&mut prng);
                *o = noisy.round().clamp(0.0, 10_000.0);
            }
        }
    });

    let geo = spec.geo();
    let raster = Raster::new(n, n, band_names(), SampleType::U16, geo, data)?;
    let records = spec
        .targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (lon, lat) = geo.pixel_to_geo(t.row, t.col);
            let (class, ore) = match t.kind {
                TargetKind::High => (PointClass::Mine, *HIGH_ORES.choose(&mut rng).unwrap()),
                TargetKind::Low => (PointClass::Mine, *LOW_ORES.choose(&mut rng).unwrap()),
                TargetKind::Decoy => (PointClass::Background, Ore::None),
            };
            PointRecord {
                id: format!("s{}-t{}", spec.seed, i),
                lon,
                lat,
                class,
                ore,
                source: "synthetic".into(),
            }
        })
        .collect();
    Ok((raster, records))
}

fn band_names() -> Vec<String> {
    S2_BANDS.iter().map(|s| s.to_string()).collect()
}

/// Pixels (row-major) covered by any target or pond of `spec`.
pub fn target_mask(spec: &SceneSpec) -> Vec<bool> {
    let n = spec.size;
    let mut mask = vec![false; n * n];
    for t in &spec.targets {
        let mut paint = |cr: f64, cc: f64, rad: f64| {
            let r0 = (cr - rad).floor().max(0.0) as usize;
            let r1 = ((cr + rad).ceil() as usize).min(n - 1);
            let c0 = (cc - rad).floor().max(0.0) as usize;
            let c1 = ((cc + rad).ceil() as usize).min(n - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    if (r as f64 - cr).hypot(c as f64 - cc) <= rad {
                        mask[r * n + c] = true;
                    }
                }
            }
        };
        paint(t.row, t.col, t.radius);
        if let Some((pr, pc, rad)) = t.pond() {
            paint(pr, pc, rad);
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackSpec {
    pub scene: SceneSpec,
    pub scenes: usize,
    /// Target fraction of cloudy pixels per scene.
    pub cloud_fraction: f64,
    /// First acquisition date; later scenes follow every `revisit_days`.
    pub start: NaiveDate,
    pub revisit_days: i64,
    /// Per-scene noise on clear pixels; `None` means a quarter of the background sigma.
    pub acquisition_sigma: Option<f64>,
}

impl Default for StackSpec {
    fn default() -> Self {
        StackSpec {
            scene: SceneSpec::default(),
            scenes: 5,
            cloud_fraction: 0.3,
            start: NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(),
            revisit_days: 12,
            acquisition_sigma: None,
        }
    }
}

/// Base scene plus per-scene acquisition noise and bright cloud blobs flagged in QA60. Every pixel is clear in at
/// least one scene.
pub fn generate_cloudy_stack(spec: &StackSpec) -> Result<(SceneStack, Raster)> {
    let n = spec.scenes;
    if n < 3 {
        return Err(Error::Spec(format!("a cloudy stack needs at least 3 scenes, got {n}")));
    }
    let f = spec.cloud_fraction;
    if !(0.0..1.0 - 1.0 / n as f64).contains(&f) {
        return Err(Error::Spec(format!(
            "cloud fraction {f} cannot leave every pixel clear in one of {n} scenes (need < {:.4})",
            1.0 - 1.0 / n as f64
        )));
    }
    let (base, _) = generate_scene(&spec.scene)?;
    let size = spec.scene.size;
    let nb = S2_BANDS.len();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.scene.seed, 0x5eed));
    let mut clouds: Vec<Vec<bool>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut m = vec![false; size * size];
        let mut covered = 0usize;
        let want = (f * (size * size) as f64).round() as usize;
        while covered < want {
            let rad = rng.random_range(size as f64 / 16.0..size as f64 / 6.0).max(1.0);
            let cr = rng.random_range(0.0..size as f64);
            let cc = rng.random_range(0.0..size as f64);
            let r0 = (cr - rad).max(0.0) as usize;
            let r1 = ((cr + rad) as usize).min(size - 1);
            let c0 = (cc - rad).max(0.0) as usize;
            let c1 = ((cc + rad) as usize).min(size - 1);
            'blob: for r in r0..=r1 {
                for c in c0..=c1 {
                    if (r as f64 - cr).hypot(c as f64 - cc) <= rad && !m[r * size + c] {
                        m[r * size + c] = true;
                        covered += 1;
                        if covered >= want {
                            break 'blob;
                        }
                    }
                }
            }
        }
        clouds.push(m);
    }
    for p in 0..size * size {
        if clouds.iter().all(|m| m[p]) {
            clouds[(p % size + p / size) % n][p] = false;
        }
    }

    let sigma = spec
        .acquisition_sigma
        .unwrap_or(spec.scene.background.noise_sigma / 4.0) as f32;
    let mut bands = band_names();
    bands.push(QA60.to_string());
    let mut scenes = Vec::with_capacity(n);
    for (s, mask) in clouds.iter().enumerate() {
        let mut data = vec![0.0f32; size * size * (nb + 1)];
        let src = base.data();
        data.par_chunks_mut(size * (nb + 1)).enumerate().for_each(|(row, out)| {
            let mut prng = ChaCha8Rng::seed_from_u64(mix_seed(spec.scene.seed ^ 0xc10d, (s * size + row) as u64));
            let normal = Normal::new(0.0f32, 1.0).unwrap();
            for col in 0..size {
                let p = row * size + col;
                let px = &mut out[col * (nb + 1)..(col + 1) * (nb + 1)];
                if mask[p] {
                    px[..nb].fill(CLOUD_VALUE);
                    px[nb] = QA60_OPAQUE as f32;
                } else {
                    for b in 0..nb {
                        let v = src[p * nb + b] + sigma * normal.sample(&mut prng);
                        px[b] = v.round().clamp(0.0, 10_000.0);
                    }
                }
            }
        });
        let raster = Raster::new(size, size, bands.clone(), SampleType::U16, *base.geo(), data)?;
        let cloudy = mask.iter().filter(|&&c| c).count() as f64 / (size * size) as f64;
        scenes.push(Scene {
            name: format!("scene_{s:02}"),
            raster,
            meta: SceneMeta {
                sensing_date: (spec.start + Duration::days(spec.revisit_days * s as i64)).to_string(),
                cloud_pct: cloudy * 100.0,
            },
        });
    }
    Ok((SceneStack::new(scenes)?, base))
}

/// Write each scene as `<name>.tif` with its `<name>.json` sidecar.
pub fn write_stack(stack: &SceneStack, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in stack.scenes() {
        write_geotiff(&s.raster, dir.join(format!("{}.tif", s.name)))?;
        let side = dir.join(format!("{}.json", s.name));
        std::fs::write(&side, serde_json::to_string_pretty(&s.meta)?).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MosaicSpec {
    pub size: usize,
    pub seed: u64,
    pub mines: usize,
    pub decoys: usize,
    pub radius: (f64, f64),
    /// Minimum gap between target edges, px.
    pub min_gap: f64,
    /// Targets keep this far from the mosaic edge, px.
    pub margin: f64,
    pub background: Background,
    pub origin: (f64, f64),
}

impl Default for MosaicSpec {
    fn default() -> Self {
        MosaicSpec {
            size: 2048,
            seed: 0,
            mines: 20,
            decoys: 0,
            radius: (12.0, 20.0),
            min_gap: 120.0,
            margin: 110.0,
            background: Background::default(),
            origin: (-44.0, -20.0),
        }
    }
}

/// Scene spec with mines (alternating high/low) and decoys placed at random,
/// non-overlapping positions.
pub fn mosaic_scene_spec(m: &MosaicSpec) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(m.seed, 0x3a1c));
    let kinds: Vec<TargetKind> = (0..m.mines)
        .map(|i| if i % 2 == 0 { TargetKind::High } else { TargetKind::Low })
        .chain(std::iter::repeat_n(TargetKind::Decoy, m.decoys))
        .collect();
    let mut targets: Vec<Target> = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let mut placed = false;
        for _ in 0..10_000 {
            let radius = rng.random_range(m.radius.0..=m.radius.1);
            let e = if kind == TargetKind::High { 2.0 * radius } else { radius };
            let lo = m.margin.max(e + 1.0);
            let hi = m.size as f64 - 1.0 - lo;
            if hi <= lo {
                break;
            }
            let t = Target {
                row: rng.random_range(lo..hi).round(),
                col: rng.random_range(lo..hi).round(),
                radius,
                kind,
            };
            if targets
                .iter()
                .all(|u| (t.row - u.row).hypot(t.col - u.col) >= t.extent() + u.extent() + m.min_gap)
            {
                targets.push(t);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Spec(format!(
                "cannot place {} targets in a {} px mosaic",
                m.mines + m.decoys,
                m.size
            )));
        }
    }
    Ok(SceneSpec {
        size: m.size,
        seed: m.seed,
        background: m.background.clone(),
        targets,
        origin: m.origin,
        pixel_deg: DEFAULT_PIXEL_DEG,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub discovery_mines: usize,
    pub discovery_background: usize,
    /// Impact patches per class (high, low, no-ore).
    pub impact_per_class: usize,
    pub radius: (f64, f64),
    /// Largest offset of a mine from a discovery patch center, per axis, px.
    pub mine_jitter: f64,
    /// Fraction of background patches holding an off-center target.
    pub offcenter_fraction: f64,
    /// Distance range of those off-center targets from the patch center, px.
    pub offcenter_distance: (f64, f64),
    /// Largest offset of a mine from an impact patch center, per axis, px.
    pub impact_jitter: f64,
    pub background: Background,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            discovery_mines: 200,
            discovery_background: 200,
            impact_per_class: 100,
            radius: (12.0, 20.0),
            mine_jitter: 13.0,
            offcenter_fraction: 0.5,
            offcenter_distance: (60.0, 100.0),
            impact_jitter: 6.0,
            background: Background::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub discovery: Manifest,
    pub impact: Manifest,
    pub points: Vec<PointRecord>,
}

struct Example {
    id: String,
    class: PointClass,
    target: Option<(TargetKind, f64, f64)>,
}

/// Write `discovery/` (201-px patches) and `impact/` (21-px patches), each
/// with a manifest, plus `points.csv` with every example's center record.
/// Each example is cut from its own small scene placed on a distinct tile of
/// a geographic grid, so patch coordinates never collide.
pub fn generate_dataset(spec: &DatasetSpec, out: impl AsRef<Path>) -> Result<DatasetSummary> {
    let out = out.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0xda7a));
    let radius = |rng: &mut ChaCha8Rng| rng.random_range(spec.radius.0..=spec.radius.1);
    let mut disc = Vec::new();
    for i in 0..spec.discovery_mines {
        let kind = if i % 2 == 0 { TargetKind::High } else { TargetKind::Low };
        let j = spec.mine_jitter;
        disc.push(Example {
            id: format!("d{i:04}"),
            class: PointClass::Mine,
            target: Some((kind, rng.random_range(-j..=j), rng.random_range(-j..=j))),
        });
    }
    for i in 0..spec.discovery_background {
        let target = (rng.random::<f64>() < spec.offcenter_fraction).then(|| {
            let kind = if rng.random::<bool>() { TargetKind::High } else { TargetKind::Low };
            let d = rng.random_range(spec.offcenter_distance.0..=spec.offcenter_distance.1);
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            (kind, d * a.sin(), d * a.cos())
        });
        disc.push(Example {
            id: format!("d{:04}", spec.discovery_mines + i),
            class: PointClass::Background,
            target,
        });
    }
    let mut imp = Vec::new();
    for (c, kind) in [Some(TargetKind::High), Some(TargetKind::Low), None].into_iter().enumerate() {
        for i in 0..spec.impact_per_class {
            let j = spec.impact_jitter;
            imp.push(Example {
                id: format!("i{:04}", c * spec.impact_per_class + i),
                class: if kind.is_some() { PointClass::Mine } else { PointClass::Background },
                target: kind.map(|k| (k, rng.random_range(-j..=j), rng.random_range(-j..=j))),
            });
        }
    }
    let radii_d: Vec<f64> = disc.iter().map(|_| radius(&mut rng)).collect();
    let radii_i: Vec<f64> = imp.iter().map(|_| radius(&mut rng)).collect();

    let discovery = write_examples(spec, &disc, &radii_d, DISCOVERY_PATCH, 0, &out.join("discovery"))?;
    let impact = write_examples(spec, &imp, &radii_i, IMPACT_PATCH, disc.len(), &out.join("impact"))?;
    let mut points = discovery.1;
    points.extend(impact.1);
    crate::dataset::write_points_csv(&points, out.join("points.csv"))?;
    Ok(DatasetSummary {
        discovery: discovery.0,
        impact: impact.0,
        points,
    })
}

fn write_examples(
    spec: &DatasetSpec,
    examples: &[Example],
    radii: &[f64],
    patch: usize,
    tile_offset: usize,
    dir: &Path,
) -> Result<(Manifest, Vec<PointRecord>)> {
    let patches = dir.join("patches");
    std::fs::create_dir_all(&patches).map_err(|e| Error::io(&patches, e))?;
    // Scenes are large enough to hold a whole off-center target next to the patch.
    let half = patch / 2;
    let reach = (spec.offcenter_distance.1 + 2.0 * spec.radius.1).ceil() as usize + 2;
    let size = 2 * (half.max(reach) + 4) + 1;
    let c = (size / 2) as f64;
    let tile = size as f64 * DEFAULT_PIXEL_DEG * 1.5;
    let results: Vec<(PatchRecord, PointRecord)> = examples
        .par_iter()
        .enumerate()
        .map(|(k, ex)| {
            let t = tile_offset + k;
            let origin = (-50.0 + (t % 100) as f64 * tile, -10.0 - (t / 100) as f64 * tile);
            let targets = ex
                .target
                .map(|(kind, dr, dc)| Target {
                    row: (c + dr).round(),
                    col: (c + dc).round(),
                    radius: radii[k],
                    kind,
                })
                .into_iter()
                .collect();
            let scene = SceneSpec {
                size,
                seed: mix_seed(spec.seed, t as u64 + 1),
                background: spec.background.clone(),
                targets,
                origin,
                pixel_deg: DEFAULT_PIXEL_DEG,
            };
            let (raster, truth) = generate_scene(&scene)?;
            let center = size as i64 / 2;
            let window = extract_window_at(&raster, center, center, patch)?;
            let file = format!("patches/{}.tif", ex.id);
            write_geotiff(&window, dir.join(&file))?;
            let (lon, lat) = raster.pixel_to_geo(center as f64, center as f64);
            let ore = match ex.class {
                PointClass::Mine => truth[0].ore,
                PointClass::Background => Ore::None,
            };
            let rec = PointRecord {
                id: ex.id.clone(),
                lon,
                lat,
                class: ex.class,
                ore,
                source: "synthetic".into(),
            };
            Ok((
                PatchRecord {
                    id: ex.id.clone(),
                    label: ex.class,
                    impact: rec.impact(),
                    lon,
                    lat,
                    file,
                },
                rec,
            ))
        })
        .collect::<Result<_>>()?;
    let (records, points): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let manifest = Manifest {
        size: patch,
        bands: S2_BANDS.len(),
        records,
    };
    manifest.save(dir)?;
    Ok((manifest, points))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with(targets: Vec<Target>) -> SceneSpec {
        SceneSpec {
            size: 160,
            seed: 11,
            targets,
            ..Default::default()
        }
    }

    fn t(row: f64, col: f64, kind: TargetKind) -> Target {
        Target { row, col, radius: 10.0, kind }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let s = spec_with(vec![t(40.0, 40.0, TargetKind::High)]);
        let (a, _) = generate_scene(&s).unwrap();
        let (b, _) = generate_scene(&s).unwrap();
        assert_eq!(a.data(), b.data());
        let (c, _) = generate_scene(&SceneSpec { seed: 12, ..s }).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn spec_errors() {
        assert!(generate_scene(&spec_with(vec![t(5.0, 80.0, TargetKind::Low)])).is_err());
        assert!(generate_scene(&spec_with(vec![t(60.0, 60.0, TargetKind::Low), t(70.0, 70.0, TargetKind::Low)])).is_err());
        // The pond of a high target sits to its right.
        assert!(generate_scene(&spec_with(vec![t(80.0, 145.0, TargetKind::High)])).is_err());
    }

    #[test]
    fn records_follow_targets() {
        let s = spec_with(vec![
            t(30.0, 30.0, TargetKind::High),
            t(30.0, 110.0, TargetKind::Low),
            t(80.0, 60.0, TargetKind::Decoy),
            t(130.0, 30.0, TargetKind::Low),
            t(130.0, 110.0, TargetKind::High),
        ]);
        let (r, recs) = generate_scene(&s).unwrap();
        assert_eq!(recs.len(), 5);
        assert_eq!(recs[2].class, PointClass::Background);
        assert_eq!(recs[0].impact(), Some(crate::dataset::ImpactClass::High));
        assert_eq!(recs[1].impact(), Some(crate::dataset::ImpactClass::Low));
        let p = r.geo_to_pixel(recs[4].lon, recs[4].lat);
        assert!((p.row - 130.0).abs() < 1e-6 && (p.col - 110.0).abs() < 1e-6);
    }
}
