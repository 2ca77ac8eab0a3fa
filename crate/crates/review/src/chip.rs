//! RGB chips of the mosaic around a detection.

use orsense_core::raster::Raster;

/// Side of the footprint a chip covers, one discovery receptive field.
pub const FOOTPRINT: usize = 215;
pub const DEFAULT_SIZE: usize = 512;
pub const DEFAULT_BANDS: [&str; 3] = ["B04", "B03", "B02"];
pub const STRETCH: (f64, f64) = (0.02, 0.98);

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f32], q: f64) -> f32 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

/// Render the `FOOTPRINT`-px window centered on `(row, col)` as a `size×size`
/// RGB8 buffer, each band stretched between its 2nd and 98th percentile over
/// the in-mosaic part of the window. Outside the mosaic is black; a band with
/// no spread renders mid-gray.
pub fn render(mosaic: &Raster, row: i64, col: i64, size: usize, bands: [usize; 3]) -> Vec<u8> {
    let half = (FOOTPRINT / 2) as i64;
    let (h, w) = (mosaic.height() as i64, mosaic.width() as i64);
    // Source pixel for each output row/column.
    let src: Vec<i64> = (0..size).map(|k| ((k as f64 + 0.5) * FOOTPRINT as f64 / size as f64) as i64 - half).collect();
    let inside = |r: i64, c: i64| r >= 0 && c >= 0 && r < h && c < w;
    let mut ranges = [(0f32, 0f32); 3];
    for (k, &b) in bands.iter().enumerate() {
        let mut v = Vec::with_capacity(FOOTPRINT * FOOTPRINT);
        for r in row - half..=row + half {
            for c in col - half..=col + half {
                if inside(r, c) {
                    v.push(mosaic.get(r as usize, c as usize, b));
                }
            }
        }
        v.sort_by(f32::total_cmp);
        if !v.is_empty() {
            ranges[k] = (percentile(&v, STRETCH.0), percentile(&v, STRETCH.1));
        }
    }
    let mut out = vec![0u8; size * size * 3];
    for (y, &dy) in src.iter().enumerate() {
        for (x, &dx) in src.iter().enumerate() {
            let (r, c) = (row + dy, col + dx);
            if !inside(r, c) {
                continue;
            }
            for (k, &b) in bands.iter().enumerate() {
                let (lo, hi) = ranges[k];
                let v = mosaic.get(r as usize, c as usize, b);
                out[(y * size + x) * 3 + k] = if hi > lo {
                    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
                } else {
                    128
                };
            }
        }
    }
    out
}

pub fn encode_png(rgb: &[u8], size: usize) -> Vec<u8> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, size as u32, size as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory png header");
        w.write_image_data(rgb).expect("in-memory png data");
    }
    buf
}
