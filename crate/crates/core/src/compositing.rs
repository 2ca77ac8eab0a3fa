//! Offline stand-in for the cloud-platform compositing step: filter a stack
//! of co-registered scenes by date and cloud cover, mask clouds from QA60,
//! and reduce the stack to a per-pixel median.

use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{read_geotiff, Raster, SampleType, QA60};

/// QA60 bit 10: opaque cloud.
pub const QA60_OPAQUE: u16 = 1 << 10;
/// QA60 bit 11: cirrus.
pub const QA60_CIRRUS: u16 = 1 << 11;

/// Contents of a scene's `<scene>.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    /// ISO-8601 date or date-time.
    pub sensing_date: String,
    pub cloud_pct: f64,
}

impl SceneMeta {
    pub fn date(&self) -> Result<NaiveDate> {
        parse_date(&self.sensing_date)
    }
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    let s = s.trim();
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.date_naive());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(dt.date());
        }
    }
    Err(Error::Input(format!("not an ISO-8601 date: {s:?}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub raster: Raster,
    pub meta: SceneMeta,
}

/// Co-registered scenes sharing one pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneStack {
    scenes: Vec<Scene>,
}

impl SceneStack {
    pub fn new(scenes: Vec<Scene>) -> Result<Self> {
        if let Some(first) = scenes.first() {
            let r0 = &first.raster;
            for s in &scenes[1..] {
                let r = &s.raster;
                if r.height() != r0.height() || r.width() != r0.width() || r.geo() != r0.geo() {
                    return Err(Error::Input(format!(
                        "scene {} is not on the grid of scene {}",
                        s.name, first.name
                    )));
                }
                if r.band_names() != r0.band_names() {
                    return Err(Error::Input(format!("scene {} has different bands", s.name)));
                }
            }
            for s in &scenes {
                s.meta.date()?;
            }
        }
        Ok(SceneStack { scenes })
    }

    /// Every `*.tif`/`*.tiff` in `dir` with its `<stem>.json` sidecar, sorted by file name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("tif" | "tiff")))
            .collect();
        files.sort();
        let mut scenes = Vec::with_capacity(files.len());
        for f in files {
            let sidecar = f.with_extension("json");
            let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            let meta: SceneMeta =
                serde_json::from_str(&text).map_err(|e| Error::format(&sidecar, e.to_string()))?;
            let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            scenes.push(Scene {
                name,
                raster: read_geotiff(&f)?,
                meta,
            });
        }
        SceneStack::new(scenes)
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Keep scenes sensed in `[from, to)` with cloud cover strictly below `max_cloud_pct`.
pub fn filter_scenes(
    stack: &SceneStack,
    from: NaiveDate,
    to: NaiveDate,
    max_cloud_pct: f64,
) -> Result<SceneStack> {
    let mut kept = Vec::new();
    for s in stack.scenes() {
        let d = s.meta.date()?;
        if d >= from && d < to && s.meta.cloud_pct < max_cloud_pct {
            kept.push(s.clone());
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyStack(format!(
            "no scene of {} sensed in [{from}, {to}) with cloud cover < {max_cloud_pct}%",
            stack.len()
        )));
    }
    Ok(SceneStack { scenes: kept })
}

/// Per-pixel contamination flags, `true` = cloudy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloudMask {
    pub height: usize,
    pub width: usize,
    pub cloudy: Vec<bool>,
}

impl CloudMask {
    pub fn clear(height: usize, width: usize) -> Self {
        CloudMask {
            height,
            width,
            cloudy: vec![false; height * width],
        }
    }

    pub fn cloudy_fraction(&self) -> f64 {
        self.cloudy.iter().filter(|&&c| c).count() as f64 / self.cloudy.len().max(1) as f64
    }
}

pub fn qa60_is_cloudy(v: u16) -> bool {
    v & (QA60_OPAQUE | QA60_CIRRUS) != 0
}

/// Mask from a QA60 plane stored as f32.
pub fn qa60_mask(qa60: &[f32], height: usize, width: usize) -> CloudMask {
    CloudMask {
        height,
        width,
        cloudy: qa60.iter().map(|&v| qa60_is_cloudy(v as u16)).collect(),
    }
}

/// Mask from the scene's QA60 band, or all-clear if it has none.
pub fn scene_mask(raster: &Raster) -> CloudMask {
    match raster.band_index(QA60) {
        Some(b) => qa60_mask(&raster.band(b), raster.height(), raster.width()),
        None => CloudMask::clear(raster.height(), raster.width()),
    }
}

/// Median of `v` (sorted in place); even counts average the middle pair.
pub fn median_in_place(v: &mut [f32]) -> Option<f32> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable_by(f32::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        ((v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0) as f32
    })
}

/// Per-pixel, per-band median over observations that are neither cloud
/// masked nor equal to the scene's nodata value. Pixels with no valid
/// observation get the nodata value (the input's, else 0). QA60 is dropped.
pub fn median_composite(stack: &SceneStack, masks: &[CloudMask]) -> Result<Raster> {
    let scenes = stack.scenes();
    let Some(first) = scenes.first() else {
        return Err(Error::EmptyStack("nothing to composite".into()));
    };
    if masks.len() != scenes.len() {
        return Err(Error::Input(format!("{} masks for {} scenes", masks.len(), scenes.len())));
    }
    let r0 = &first.raster;
    let (h, w) = (r0.height(), r0.width());
    if masks.iter().any(|m| m.height != h || m.width != w || m.cloudy.len() != h * w) {
        return Err(Error::Dimension("cloud mask extent differs from the scenes".into()));
    }
    let nb = r0.band_count();
    let keep: Vec<usize> = (0..nb).filter(|&b| r0.band_names()[b] != QA60).collect();
    let out_n = keep.len();
    if out_n == 0 {
        return Err(Error::Input("scenes hold no bands besides QA60".into()));
    }
    let nodata = r0.nodata();
    let fill = nodata.unwrap_or(0.0) as f32;

    let mut data = vec![0.0f32; h * w * out_n];
    data.par_chunks_mut(w * out_n).enumerate().for_each(|(row, out_row)| {
        let mut obs = Vec::with_capacity(scenes.len());
        for col in 0..w {
            let px = row * w + col;
            for (k, &b) in keep.iter().enumerate() {
                obs.clear();
                for (s, m) in scenes.iter().zip(masks) {
                    if m.cloudy[px] {
                        continue;
                    }
                    let v = s.raster.data()[px * nb + b];
                    if nodata.is_some_and(|nd| v as f64 == nd) || v.is_nan() {
                        continue;
                    }
                    obs.push(v);
                }
                out_row[col * out_n + k] = median_in_place(&mut obs).unwrap_or(fill);
            }
        }
    });
    let names = keep.iter().map(|&b| r0.band_names()[b].clone()).collect();
    Ok(Raster::new(h, w, names, SampleType::F32, *r0.geo(), data)?
        .with_nodata(Some(fill as f64))
        .with_crs(r0.crs()))
}

/// Filter, mask and composite in one call.
pub fn composite_stack(
    stack: &SceneStack,
    from: NaiveDate,
    to: NaiveDate,
    max_cloud_pct: f64,
) -> Result<Raster> {
    let kept = filter_scenes(stack, from, to, max_cloud_pct)?;
    let masks: Vec<CloudMask> = kept.scenes().iter().map(|s| scene_mask(&s.raster)).collect();
    median_composite(&kept, &masks)
}
