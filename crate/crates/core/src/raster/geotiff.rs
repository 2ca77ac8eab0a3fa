//! GeoTIFF subset: striped or tiled, classic or BigTIFF, uncompressed or
//! deflate, u16 or f32 samples, chunky or planar. Georeferencing from
//! ModelPixelScale + ModelTiepoint or ModelTransformation; band names and
//! nodata in the GDAL private tags.

use std::fs::File;
use std::io::{BufReader, BufWriter, Seek, Write};
use std::path::Path;

use flate2::write::ZlibEncoder;
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{TiffEncoder, TiffKind, TiffKindBig, TiffKindStandard};
use tiff::tags::Tag;
use tiff::TiffError;

use super::{GeoTransform, Raster, SampleType, QA60, S2_BANDS};
use crate::error::{Error, Result};

const GDAL_METADATA: Tag = Tag::Unknown(42112);
const COMPRESSION_NONE: u16 = 1;
const COMPRESSION_DEFLATE: u16 = 8;
const COMPRESSION_DEFLATE_OLD: u16 = 32946;
// GeoKey ids
const GT_MODEL_TYPE: u16 = 1024;
const GT_RASTER_TYPE: u16 = 1025;
const GEOGRAPHIC_TYPE: u16 = 2048;
const PROJECTED_CS_TYPE: u16 = 3072;
const RASTER_PIXEL_IS_POINT: u16 = 2;

fn tiff_err(path: &Path, e: TiffError) -> Error {
    match e {
        TiffError::UnsupportedError(u) => Error::Unsupported(format!("{}: {u}", path.display())),
        TiffError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

pub fn read_geotiff(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file))
        .map_err(|e| tiff_err(path, e))?
        .with_limits(Limits::unlimited());
    let te = |e| tiff_err(path, e);

    let compression: u16 = dec.find_tag_unsigned(Tag::Compression).map_err(te)?.unwrap_or(1);
    if ![COMPRESSION_NONE, COMPRESSION_DEFLATE, COMPRESSION_DEFLATE_OLD].contains(&compression) {
        return Err(Error::Unsupported(format!(
            "{}: compression {compression} (only none and deflate are read)",
            path.display()
        )));
    }
    let (w, h) = dec.dimensions().map_err(te)?;
    let (w, h) = (w as usize, h as usize);
    let samples: usize = dec
        .find_tag_unsigned::<u16>(Tag::SamplesPerPixel)
        .map_err(te)?
        .unwrap_or(1) as usize;
    let bits: Vec<u16> = dec
        .find_tag_unsigned_vec(Tag::BitsPerSample)
        .map_err(te)?
        .unwrap_or_else(|| vec![1]);
    let formats: Vec<u16> = dec
        .find_tag_unsigned_vec(Tag::SampleFormat)
        .map_err(te)?
        .unwrap_or_else(|| vec![1]);
    let sample_type = match (bits[0], formats[0]) {
        (16, 1) => SampleType::U16,
        (32, 3) => SampleType::F32,
        (b, f) => {
            return Err(Error::Unsupported(format!(
                "{}: {b}-bit samples of format {f} (only u16 and f32 are read)",
                path.display()
            )))
        }
    };
    if bits.iter().any(|&b| b != bits[0]) || formats.iter().any(|&f| f != formats[0]) {
        return Err(Error::Unsupported(format!("{}: mixed sample types", path.display())));
    }
    let planar = dec.find_tag_unsigned::<u16>(Tag::PlanarConfiguration).map_err(te)?.unwrap_or(1) == 2;

    let geo = read_geo(&mut dec, path)?;
    let crs = read_crs(&mut dec, path)?;
    let nodata = match dec.find_tag(Tag::GdalNodata).map_err(te)? {
        Some(v) => {
            let s = v.into_string().map_err(te)?;
            let s = s.trim_matches(char::from(0)).trim();
            Some(s.parse::<f64>().map_err(|_| Error::format(path, format!("bad GDAL_NODATA {s:?}")))?)
        }
        None => None,
    };
    let names = match dec.find_tag(GDAL_METADATA).map_err(te)? {
        Some(v) => band_names_from_metadata(&v.into_string().map_err(te)?, samples),
        None => None,
    }
    .unwrap_or_else(|| default_band_names(samples));

    let mut buf = match sample_type {
        SampleType::U16 => DecodingResult::U16(Vec::new()),
        SampleType::F32 => DecodingResult::F32(Vec::new()),
    };
    dec.read_image_to_buffer(&mut buf).map_err(te)?;
    let raw: Vec<f32> = match buf {
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::F32(v) => v,
        _ => return Err(Error::Unsupported(format!("{}: unexpected sample buffer", path.display()))),
    };
    if raw.len() < h * w * samples {
        return Err(Error::format(path, "image data shorter than declared extent"));
    }
    let data = if planar && samples > 1 {
        let plane = h * w;
        let mut out = vec![0.0f32; plane * samples];
        for b in 0..samples {
            for (i, &v) in raw[b * plane..(b + 1) * plane].iter().enumerate() {
                out[i * samples + b] = v;
            }
        }
        out
    } else {
        raw[..h * w * samples].to_vec()
    };
    Ok(Raster::new(h, w, names, sample_type, geo, data)?
        .with_nodata(nodata)
        .with_crs(crs))
}

fn read_geo<R: std::io::Read + Seek>(dec: &mut Decoder<R>, path: &Path) -> Result<GeoTransform> {
    let te = |e| tiff_err(path, e);
    let f64s = |dec: &mut Decoder<R>, tag| -> Result<Option<Vec<f64>>> {
        match dec.find_tag(tag).map_err(te)? {
            Some(v) => Ok(Some(v.into_f64_vec().map_err(te)?)),
            None => Ok(None),
        }
    };
    let transform = f64s(dec, Tag::ModelTransformationTag)?;
    let scale = f64s(dec, Tag::ModelPixelScaleTag)?;
    let tie = f64s(dec, Tag::ModelTiepointTag)?;
    let mut geo = if let Some(m) = transform {
        if m.len() < 16 {
            return Err(Error::GeoReference(format!("{}: short ModelTransformation", path.display())));
        }
        GeoTransform::from_gdal([m[3], m[0], m[1], m[7], m[4], m[5]])
    } else if let (Some(s), Some(t)) = (scale, tie) {
        if s.len() < 2 || t.len() < 6 {
            return Err(Error::GeoReference(format!("{}: short pixel scale or tiepoint", path.display())));
        }
        let (i, j, x, y) = (t[0], t[1], t[3], t[4]);
        GeoTransform::from_gdal([x - i * s[0], s[0], 0.0, y + j * s[1], 0.0, -s[1]])
    } else {
        return Err(Error::GeoReference(format!(
            "{}: no ModelPixelScale+ModelTiepoint or ModelTransformation tags",
            path.display()
        )));
    };
    if geo_key(dec, path, GT_RASTER_TYPE)? == Some(RASTER_PIXEL_IS_POINT) {
        // Tie point names a pixel center; move it to the corner.
        let (ox, oy) = geo.apply(-0.5, -0.5);
        geo.origin_x = ox;
        geo.origin_y = oy;
    }
    geo.validate()
        .map_err(|e| Error::GeoReference(format!("{}: {e}", path.display())))?;
    Ok(geo)
}

fn geo_keys<R: std::io::Read + Seek>(dec: &mut Decoder<R>, path: &Path) -> Result<Vec<u16>> {
    Ok(dec
        .find_tag_unsigned_vec::<u16>(Tag::GeoKeyDirectoryTag)
        .map_err(|e| tiff_err(path, e))?
        .unwrap_or_default())
}

fn geo_key<R: std::io::Read + Seek>(dec: &mut Decoder<R>, path: &Path, key: u16) -> Result<Option<u16>> {
    let keys = geo_keys(dec, path)?;
    // Entries after the 4-short header: id, location, count, value. Location 0 = inline.
    Ok(keys
        .get(4..)
        .unwrap_or(&[])
        .chunks_exact(4)
        .find(|e| e[0] == key && e[1] == 0)
        .map(|e| e[3]))
}

fn read_crs<R: std::io::Read + Seek>(dec: &mut Decoder<R>, path: &Path) -> Result<String> {
    if let Some(code) = geo_key(dec, path, GEOGRAPHIC_TYPE)?.filter(|&c| c != 0 && c != 32767) {
        return Ok(format!("EPSG:{code}"));
    }
    if let Some(code) = geo_key(dec, path, PROJECTED_CS_TYPE)?.filter(|&c| c != 0 && c != 32767) {
        return Ok(format!("EPSG:{code}"));
    }
    Ok(super::DEFAULT_CRS.to_string())
}

fn default_band_names(n: usize) -> Vec<String> {
    match n {
        12 => S2_BANDS.iter().map(|s| s.to_string()).collect(),
        13 => S2_BANDS.iter().copied().chain([QA60]).map(String::from).collect(),
        _ => (1..=n).map(|i| format!("band_{i}")).collect(),
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn xml_unescape(s: &str) -> String {
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&apos;", "'")
        .replace("&amp;", "&")
}

fn band_metadata_xml(names: &[String]) -> String {
    let mut s = String::from("<GDALMetadata>\n");
    for (i, n) in names.iter().enumerate() {
        s.push_str(&format!(
            "  <Item name=\"DESCRIPTION\" sample=\"{i}\" role=\"description\">{}</Item>\n",
            xml_escape(n)
        ));
    }
    s.push_str("</GDALMetadata>\n");
    s
}

/// Band descriptions from GDAL's metadata XML; `None` unless every band is named.
fn band_names_from_metadata(xml: &str, n: usize) -> Option<Vec<String>> {
    let mut names: Vec<Option<String>> = vec![None; n];
    for item in xml.split("<Item").skip(1) {
        let (attrs, rest) = item.split_once('>')?;
        if !attrs.contains("role=\"description\"") {
            continue;
        }
        let sample: usize = attrs
            .split("sample=\"")
            .nth(1)?
            .split('"')
            .next()?
            .parse()
            .ok()?;
        let text = rest.split("</Item>").next()?;
        if sample < n {
            names[sample] = Some(xml_unescape(text));
        }
    }
    names.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TiffLayout {
    Striped { rows_per_strip: usize },
    /// Square tiles; the side must be a multiple of 16.
    Tiled { tile: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOptions {
    pub layout: TiffLayout,
    pub deflate: bool,
    /// `None` picks BigTIFF only when the classic 4 GiB offsets would overflow.
    pub bigtiff: Option<bool>,
}

impl Default for WriteOptions {
    fn default() -> Self {
        WriteOptions {
            layout: TiffLayout::Striped { rows_per_strip: 16 },
            deflate: false,
            bigtiff: None,
        }
    }
}

/// Write with default options (striped, uncompressed).
pub fn write_geotiff(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    write_geotiff_with(raster, path, &WriteOptions::default())
}

pub fn write_geotiff_with(raster: &Raster, path: impl AsRef<Path>, opts: &WriteOptions) -> Result<()> {
    let path = path.as_ref();
    if let TiffLayout::Tiled { tile } = opts.layout {
        if tile == 0 || tile % 16 != 0 {
            return Err(Error::Usage(format!("tile size {tile} is not a positive multiple of 16")));
        }
    }
    if let TiffLayout::Striped { rows_per_strip: 0 } = opts.layout {
        return Err(Error::Usage("rows_per_strip must be positive".into()));
    }
    let bytes_per = match raster.sample_type() {
        SampleType::U16 => 2u64,
        SampleType::F32 => 4,
    };
    let payload = raster.data().len() as u64 * bytes_per;
    let big = opts.bigtiff.unwrap_or(payload > 0xF000_0000);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let res = if big {
        TiffEncoder::new_big(&mut out).and_then(|enc| write_dir::<_, TiffKindBig>(enc, raster, opts, path))
    } else {
        TiffEncoder::new(&mut out).and_then(|enc| write_dir::<_, TiffKindStandard>(enc, raster, opts, path))
    };
    res.map_err(|e| tiff_err(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn encode_samples(raster: &Raster, values: impl Iterator<Item = f32>, out: &mut Vec<u8>) {
    match raster.sample_type() {
        SampleType::U16 => values.for_each(|v| out.extend_from_slice(&(v as u16).to_ne_bytes())),
        SampleType::F32 => values.for_each(|v| out.extend_from_slice(&v.to_ne_bytes())),
    }
}

fn chunks(raster: &Raster, layout: TiffLayout) -> Vec<Vec<u8>> {
    let (h, w, n) = (raster.height(), raster.width(), raster.band_count());
    let data = raster.data();
    let mut chunks = Vec::new();
    match layout {
        TiffLayout::Striped { rows_per_strip } => {
            for r0 in (0..h).step_by(rows_per_strip) {
                let r1 = (r0 + rows_per_strip).min(h);
                let mut buf = Vec::new();
                encode_samples(raster, data[r0 * w * n..r1 * w * n].iter().copied(), &mut buf);
                chunks.push(buf);
            }
        }
        TiffLayout::Tiled { tile } => {
            for r0 in (0..h).step_by(tile) {
                for c0 in (0..w).step_by(tile) {
                    let mut buf = Vec::new();
                    for r in r0..r0 + tile {
                        let row = (0..tile * n).map(|k| {
                            let c = c0 + k / n;
                            if r < h && c < w {
                                data[(r * w + c) * n + k % n]
                            } else {
                                0.0
                            }
                        });
                        encode_samples(raster, row, &mut buf);
                    }
                    chunks.push(buf);
                }
            }
        }
    }
    chunks
}

fn geo_key_directory(crs: &str) -> std::result::Result<Vec<u16>, String> {
    let code: u16 = crs
        .strip_prefix("EPSG:")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| format!("CRS {crs:?} is not an EPSG code"))?;
    let geographic = matches!(code, 4000..=4999);
    let mut keys = vec![1, 1, 0, 3];
    keys.extend_from_slice(&[GT_MODEL_TYPE, 0, 1, if geographic { 2 } else { 1 }]);
    keys.extend_from_slice(&[GT_RASTER_TYPE, 0, 1, 1]);
    if geographic {
        keys.extend_from_slice(&[GEOGRAPHIC_TYPE, 0, 1, code]);
    } else {
        keys.extend_from_slice(&[PROJECTED_CS_TYPE, 0, 1, code]);
    }
    Ok(keys)
}

fn write_dir<W: Write + Seek, K: TiffKind>(
    mut enc: TiffEncoder<W, K>,
    raster: &Raster,
    opts: &WriteOptions,
    path: &Path,
) -> tiff::TiffResult<()> {
    let keys = geo_key_directory(raster.crs()).map_err(|m| {
        TiffError::IoError(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("{}: {m}", path.display()),
        ))
    })?;
    let n = raster.band_count();
    let mut dir = enc.image_directory()?;
    let mut offsets = Vec::new();
    let mut counts = Vec::new();
    for chunk in chunks(raster, opts.layout) {
        let bytes = if opts.deflate {
            let mut z = ZlibEncoder::new(Vec::new(), flate2::Compression::default());
            z.write_all(&chunk)?;
            z.finish()?
        } else {
            chunk
        };
        offsets.push(K::convert_offset(dir.write_data(&bytes[..])?)?);
        counts.push(K::convert_offset(bytes.len() as u64)?);
    }
    let (bits, format) = match raster.sample_type() {
        SampleType::U16 => (16u16, 1u16),
        SampleType::F32 => (32, 3),
    };
    dir.write_tag(Tag::ImageWidth, raster.width() as u32)?;
    dir.write_tag(Tag::ImageLength, raster.height() as u32)?;
    dir.write_tag(Tag::BitsPerSample, &vec![bits; n][..])?;
    dir.write_tag(
        Tag::Compression,
        if opts.deflate { COMPRESSION_DEFLATE } else { COMPRESSION_NONE },
    )?;
    dir.write_tag(Tag::PhotometricInterpretation, 1u16)?;
    dir.write_tag(Tag::SamplesPerPixel, n as u16)?;
    dir.write_tag(Tag::PlanarConfiguration, 1u16)?;
    dir.write_tag(Tag::SampleFormat, &vec![format; n][..])?;
    if n > 1 {
        dir.write_tag(Tag::ExtraSamples, &vec![0u16; n - 1][..])?;
    }
    match opts.layout {
        TiffLayout::Striped { rows_per_strip } => {
            dir.write_tag(Tag::RowsPerStrip, rows_per_strip.min(raster.height()) as u32)?;
            dir.write_tag(Tag::StripOffsets, K::convert_slice(&offsets))?;
            dir.write_tag(Tag::StripByteCounts, K::convert_slice(&counts))?;
        }
        TiffLayout::Tiled { tile } => {
            dir.write_tag(Tag::TileWidth, tile as u32)?;
            dir.write_tag(Tag::TileLength, tile as u32)?;
            dir.write_tag(Tag::TileOffsets, K::convert_slice(&offsets))?;
            dir.write_tag(Tag::TileByteCounts, K::convert_slice(&counts))?;
        }
    }
    let g = raster.geo();
    if g.is_rotated() {
        let m = [
            g.pixel_width, g.row_rotation, 0.0, g.origin_x,
            g.col_rotation, g.pixel_height, 0.0, g.origin_y,
            0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        ];
        dir.write_tag(Tag::ModelTransformationTag, &m[..])?;
    } else {
        dir.write_tag(Tag::ModelPixelScaleTag, &[g.pixel_width, -g.pixel_height, 0.0][..])?;
        dir.write_tag(Tag::ModelTiepointTag, &[0.0, 0.0, 0.0, g.origin_x, g.origin_y, 0.0][..])?;
    }
    dir.write_tag(Tag::GeoKeyDirectoryTag, &keys[..])?;
    if let Some(nd) = raster.nodata() {
        dir.write_tag(Tag::GdalNodata, format!("{nd}").as_str())?;
    }
    dir.write_tag(GDAL_METADATA, band_metadata_xml(raster.band_names()).as_str())?;
    dir.finish()
}
