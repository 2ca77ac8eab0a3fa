//! Multiband georeferenced rasters: affine pixel↔geo transforms, GeoTIFF
//! files, band resampling and window extraction.
//!
//! All coordinate math uses pixel centers: pixel `(row, col)` sits at the
//! affine image of `(col + 0.5, row + 0.5)`.

mod geotiff;

pub use geotiff::{read_geotiff, write_geotiff, write_geotiff_with, TiffLayout, WriteOptions};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel-2 band order used throughout.
pub const S2_BANDS: [&str; 12] = [
    "B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B11", "B12",
];
pub const QA60: &str = "QA60";
pub const DEFAULT_CRS: &str = "EPSG:4326";
/// 0.018° spans one 201-px patch.
pub const DEFAULT_PIXEL_DEG: f64 = 0.018 / 201.0;

/// Six-coefficient affine map in GDAL order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub pixel_width: f64,
    pub row_rotation: f64,
    pub origin_y: f64,
    pub col_rotation: f64,
    pub pixel_height: f64,
}

impl GeoTransform {
    /// North-up transform; `pixel_size` is positive, the stored height negative.
    pub fn north_up(origin_x: f64, origin_y: f64, pixel_size: f64) -> Self {
        GeoTransform {
            origin_x,
            pixel_width: pixel_size,
            row_rotation: 0.0,
            origin_y,
            col_rotation: 0.0,
            pixel_height: -pixel_size,
        }
    }

    pub fn from_gdal(c: [f64; 6]) -> Self {
        GeoTransform {
            origin_x: c[0],
            pixel_width: c[1],
            row_rotation: c[2],
            origin_y: c[3],
            col_rotation: c[4],
            pixel_height: c[5],
        }
    }

    pub fn to_gdal(&self) -> [f64; 6] {
        [
            self.origin_x,
            self.pixel_width,
            self.row_rotation,
            self.origin_y,
            self.col_rotation,
            self.pixel_height,
        ]
    }

    pub fn determinant(&self) -> f64 {
        self.pixel_width * self.pixel_height - self.row_rotation * self.col_rotation
    }

    pub fn is_rotated(&self) -> bool {
        self.row_rotation != 0.0 || self.col_rotation != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let det = self.determinant();
        if !det.is_finite() || det == 0.0 || !self.to_gdal().iter().all(|v| v.is_finite()) {
            return Err(Error::GeoReference(format!("non-invertible geotransform {:?}", self.to_gdal())));
        }
        Ok(())
    }

    /// Affine image of raw image-space coordinates (edges, not centers).
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.origin_x + x * self.pixel_width + y * self.row_rotation,
            self.origin_y + x * self.col_rotation + y * self.pixel_height,
        )
    }

    /// Inverse of [`apply`](Self::apply).
    pub fn invert(&self, gx: f64, gy: f64) -> (f64, f64) {
        let det = self.determinant();
        let dx = gx - self.origin_x;
        let dy = gy - self.origin_y;
        (
            (self.pixel_height * dx - self.row_rotation * dy) / det,
            (-self.col_rotation * dx + self.pixel_width * dy) / det,
        )
    }

    /// Geographic (lon, lat) of the center of pixel `(row, col)`. Fractional
    /// positions are allowed and measured in the same center-based frame.
    pub fn pixel_to_geo(&self, row: f64, col: f64) -> (f64, f64) {
        self.apply(col + 0.5, row + 0.5)
    }

    /// Continuous pixel position of `(lon, lat)`; integer values are centers.
    pub fn geo_to_pixel(&self, lon: f64, lat: f64) -> PixelPos {
        let (x, y) = self.invert(lon, lat);
        PixelPos {
            row: y - 0.5,
            col: x - 0.5,
        }
    }

    /// Transform of a sub-image starting at `(row, col)`.
    pub fn offset(&self, row: i64, col: i64) -> Self {
        let (ox, oy) = self.apply(col as f64, row as f64);
        GeoTransform {
            origin_x: ox,
            origin_y: oy,
            ..*self
        }
    }

    /// Transform after resampling by `factor` target pixels per source pixel.
    pub fn scaled(&self, row_factor: f64, col_factor: f64) -> Self {
        GeoTransform {
            pixel_width: self.pixel_width / col_factor,
            col_rotation: self.col_rotation / col_factor,
            row_rotation: self.row_rotation / row_factor,
            pixel_height: self.pixel_height / row_factor,
            ..*self
        }
    }

    /// Approximate ground size of one pixel in degrees (mean of both axes).
    pub fn pixel_size(&self) -> f64 {
        let col = self.pixel_width.hypot(self.col_rotation);
        let row = self.row_rotation.hypot(self.pixel_height);
        0.5 * (col + row)
    }
}

/// Continuous pixel coordinates; integer values are pixel centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPos {
    pub row: f64,
    pub col: f64,
}

impl PixelPos {
    /// Index of the pixel whose footprint contains this position.
    pub fn containing(&self) -> (i64, i64) {
        ((self.row + 0.5).floor() as i64, (self.col + 0.5).floor() as i64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleType {
    /// Reflectance ×10000 as unsigned 16-bit.
    U16,
    F32,
}

/// A georeferenced image with all bands on one grid, stored row-major with
/// bands interleaved (`[row][col][band]`). u16 samples are held exactly as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    bands: Vec<String>,
    sample_type: SampleType,
    nodata: Option<f64>,
    geo: GeoTransform,
    crs: String,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(
        height: usize,
        width: usize,
        bands: Vec<String>,
        sample_type: SampleType,
        geo: GeoTransform,
        data: Vec<f32>,
    ) -> Result<Self> {
        if bands.is_empty() || height == 0 || width == 0 {
            return Err(Error::Dimension("raster needs at least one band and pixel".into()));
        }
        if data.len() != height * width * bands.len() {
            return Err(Error::Dimension(format!(
                "raster data holds {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                bands.len()
            )));
        }
        geo.validate()?;
        if sample_type == SampleType::U16
            && data.iter().any(|&v| v < 0.0 || v > u16::MAX as f32 || v.fract() != 0.0)
        {
            return Err(Error::Input("u16 raster holds a value outside 0..=65535".into()));
        }
        Ok(Raster {
            width,
            height,
            bands,
            sample_type,
            nodata: None,
            geo,
            crs: DEFAULT_CRS.to_string(),
            data,
        })
    }

    pub fn with_nodata(mut self, nodata: Option<f64>) -> Self {
        self.nodata = nodata;
        self
    }

    pub fn with_crs(mut self, crs: impl Into<String>) -> Self {
        self.crs = crs.into();
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn band_names(&self) -> &[String] {
        &self.bands
    }

    pub fn sample_type(&self) -> SampleType {
        self.sample_type
    }

    pub fn nodata(&self) -> Option<f64> {
        self.nodata
    }

    pub fn geo(&self) -> &GeoTransform {
        &self.geo
    }

    pub fn crs(&self) -> &str {
        &self.crs
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn band_index(&self, name: &str) -> Option<usize> {
        self.bands.iter().position(|b| b == name)
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[(row * self.width + col) * self.bands.len() + band]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let n = self.bands.len();
        &self.data[(row * self.width + col) * n..][..n]
    }

    /// One band as a contiguous `height×width` plane.
    pub fn band(&self, band: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(band)
            .step_by(self.bands.len())
            .copied()
            .collect()
    }

    /// Keep only the named bands, in the given order.
    pub fn select_bands(&self, names: &[&str]) -> Result<Raster> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.band_index(n)
                    .ok_or_else(|| Error::Input(format!("raster has no band {n}")))
            })
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(self.height * self.width * idx.len());
        for px in self.data.chunks_exact(self.bands.len()) {
            data.extend(idx.iter().map(|&i| px[i]));
        }
        Ok(Raster {
            bands: names.iter().map(|s| s.to_string()).collect(),
            data,
            ..self.clone_meta()
        })
    }

    /// The twelve model bands, converted to f32 reflectance units as stored.
    pub fn model_bands(&self) -> Result<Raster> {
        if self.bands.len() == S2_BANDS.len() && self.bands.iter().zip(S2_BANDS).all(|(a, b)| a == b) {
            return Ok(self.clone());
        }
        self.select_bands(&S2_BANDS)
    }

    fn clone_meta(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            bands: Vec::new(),
            sample_type: self.sample_type,
            nodata: self.nodata,
            geo: self.geo,
            crs: self.crs.clone(),
            data: Vec::new(),
        }
    }

    /// Build a raster from separately stored planes that share one grid.
    pub fn from_planes(
        height: usize,
        width: usize,
        bands: Vec<(String, Vec<f32>)>,
        sample_type: SampleType,
        geo: GeoTransform,
    ) -> Result<Raster> {
        let n = bands.len();
        let mut data = vec![0.0f32; height * width * n];
        for (b, (name, plane)) in bands.iter().enumerate() {
            if plane.len() != height * width {
                return Err(Error::Dimension(format!("band {name} is not {height}x{width}")));
            }
            for (i, &v) in plane.iter().enumerate() {
                data[i * n + b] = v;
            }
        }
        Raster::new(height, width, bands.into_iter().map(|(n, _)| n).collect(), sample_type, geo, data)
    }

    /// Copy of rows `r0..r0+h`, cols `c0..c0+w` with the transform shifted to match.
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<Raster> {
        if r0 + h > self.height || c0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::Edge {
                row: r0 as i64,
                col: c0 as i64,
                size: h.max(w),
            });
        }
        let n = self.bands.len();
        let mut data = Vec::with_capacity(h * w * n);
        for r in r0..r0 + h {
            let start = (r * self.width + c0) * n;
            data.extend_from_slice(&self.data[start..start + w * n]);
        }
        Ok(Raster {
            width: w,
            height: h,
            bands: self.bands.clone(),
            geo: self.geo.offset(r0 as i64, c0 as i64),
            data,
            ..self.clone_meta()
        })
    }

    pub fn pixel_to_geo(&self, row: f64, col: f64) -> (f64, f64) {
        self.geo.pixel_to_geo(row, col)
    }

    pub fn geo_to_pixel(&self, lon: f64, lat: f64) -> PixelPos {
        self.geo.geo_to_pixel(lon, lat)
    }

    /// Resample every band to `height×width`, adjusting the transform.
    pub fn resample(&self, height: usize, width: usize, method: Resampling) -> Result<Raster> {
        let n = self.bands.len();
        let mut planes = Vec::with_capacity(n);
        for b in 0..n {
            planes.push((
                self.bands[b].clone(),
                resample_band(&self.band(b), self.height, self.width, height, width, method)?,
            ));
        }
        let geo = self
            .geo
            .scaled(height as f64 / self.height as f64, width as f64 / self.width as f64);
        let mut out = Raster::from_planes(height, width, planes, SampleType::F32, geo)?;
        if self.sample_type == SampleType::U16 && method == Resampling::Nearest {
            out.sample_type = SampleType::U16;
        }
        out.nodata = self.nodata;
        out.crs = self.crs.clone();
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Resampling {
    #[default]
    Nearest,
    Bilinear,
}

impl std::str::FromStr for Resampling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Resampling::Nearest),
            "bilinear" => Ok(Resampling::Bilinear),
            other => Err(Error::Usage(format!("unknown resampling method {other:?}"))),
        }
    }
}

/// Resample one `h×w` plane to `th×tw` with pixel-center alignment.
pub fn resample_band(
    band: &[f32],
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
    method: Resampling,
) -> Result<Vec<f32>> {
    if band.len() != h * w || h == 0 || w == 0 || th == 0 || tw == 0 {
        return Err(Error::Dimension("resample_band: bad extents".into()));
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let mut out = Vec::with_capacity(th * tw);
    match method {
        Resampling::Nearest => {
            let cols: Vec<usize> = (0..tw)
                .map(|c| (((c as f64 + 0.5) * sx).floor() as usize).min(w - 1))
                .collect();
            for r in 0..th {
                let sr = (((r as f64 + 0.5) * sy).floor() as usize).min(h - 1);
                let row = &band[sr * w..(sr + 1) * w];
                out.extend(cols.iter().map(|&c| row[c]));
            }
        }
        Resampling::Bilinear => {
            let axis = |i: usize, s: f64, n: usize| {
                let p = ((i as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = p.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, (p - i0 as f64) as f32)
            };
            let cols: Vec<_> = (0..tw).map(|c| axis(c, sx, w)).collect();
            for r in 0..th {
                let (r0, r1, fy) = axis(r, sy, h);
                for &(c0, c1, fx) in &cols {
                    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
                    let top = lerp(band[r0 * w + c0], band[r0 * w + c1], fx);
                    let bot = lerp(band[r1 * w + c0], band[r1 * w + c1], fx);
                    out.push(lerp(top, bot, fy));
                }
            }
        }
    }
    Ok(out)
}

/// Leading and trailing pixel counts around the center pixel of a `size` window.
pub fn window_split(size: usize) -> (usize, usize) {
    let lead = (size - 1) / 2;
    (lead, size - 1 - lead)
}

/// Square `size`-px patch centered on the pixel containing `(lon, lat)`.
pub fn extract_window(raster: &Raster, lon: f64, lat: f64, size: usize) -> Result<Raster> {
    if size == 0 {
        return Err(Error::Dimension("window size must be positive".into()));
    }
    let (row, col) = raster.geo_to_pixel(lon, lat).containing();
    extract_window_at(raster, row, col, size)
}

/// Like [`extract_window`] with the center given as a pixel index.
pub fn extract_window_at(raster: &Raster, row: i64, col: i64, size: usize) -> Result<Raster> {
    let (lead, trail) = window_split(size);
    let (r0, c0) = (row - lead as i64, col - lead as i64);
    let fits = r0 >= 0
        && c0 >= 0
        && row + (trail as i64) < raster.height() as i64
        && col + (trail as i64) < raster.width() as i64;
    if !fits {
        return Err(Error::Edge { row, col, size });
    }
    raster.crop(r0 as usize, c0 as usize, size, size)
}
