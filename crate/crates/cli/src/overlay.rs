//! Per-slice P6 overlays of a label map on a windowed grayscale image.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use vncseg_core::{LabelVolume, Volume};

pub const ALPHA: f64 = 0.4;

/// RGB per class ID; background is never blended.
pub const COLORS: [[u8; 3]; 8] = [
    [0, 0, 0],
    [255, 0, 0],   // LV-C
    [0, 0, 255],   // RV
    [255, 255, 0], // LA
    [0, 255, 255], // RA
    [0, 255, 0],   // LV-M
    [255, 0, 255], // AA
    [255, 128, 0], // PA
];

pub fn gray(hu: f64, lo: f64, hi: f64) -> u8 {
    (((hu - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn blend(gray: u8, color: [u8; 3]) -> [u8; 3] {
    color.map(|c| ((1.0 - ALPHA) * gray as f64 + ALPHA * c as f64).round() as u8)
}

/// Row-major RGB for axial slice `z`, `y = 0` first.
pub fn render_slice(image: &Volume, labels: &LabelVolume, z: usize, lo: f64, hi: f64) -> Vec<u8> {
    let [nx, ny, _] = image.dims();
    let mut rgb = Vec::with_capacity(nx * ny * 3);
    for y in 0..ny {
        for x in 0..nx {
            let g = gray(image.get(x, y, z), lo, hi);
            let l = labels.get(x, y, z);
            let px = if l == 0 { [g; 3] } else { blend(g, COLORS[l as usize]) };
            rgb.extend_from_slice(&px);
        }
    }
    rgb
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Writes `slice_NNNN.ppm` for every axial slice and returns the paths.
pub fn write_overlays(image: &Volume, labels: &LabelVolume, out_dir: &Path, lo: f64, hi: f64) -> Result<Vec<PathBuf>> {
    image.geometry.ensure_same(labels.geometry(), "image vs labels")?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let [nx, ny, nz] = image.dims();
    (0..nz)
        .map(|z| {
            let path = out_dir.join(format!("slice_{z:04}.ppm"));
            let bytes = encode_ppm(nx, ny, &render_slice(image, labels, z, lo, hi));
            fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            Ok(path)
        })
        .collect()
}
