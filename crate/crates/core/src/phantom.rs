//! Synthetic paired-domain phantoms: one label map rendered twice, once
//! with high blood-pool contrast and once with nearly flat intensities.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_labels, read_volume, write_labels, write_volume};
use crate::postprocess::{connected_components, Connectivity};
use crate::volume::{Geometry, LabelVolume, Volume, VoxelData};
use crate::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// Cube edge in voxels.
    pub size: usize,
    pub spacing_mm: f64,
    pub seed: u64,
    pub noise_sd_hu: f64,
    /// Mean HU per class ID in the high-contrast domain.
    pub ccta_hu: [f64; NUM_CLASSES],
    /// Mean HU per class ID in the low-contrast domain.
    pub vnc_hu: [f64; NUM_CLASSES],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            spacing_mm: 0.8,
            seed: 0,
            noise_sd_hu: 20.0,
            ccta_hu: [40.0, 350.0, 350.0, 350.0, 350.0, 80.0, 350.0, 350.0],
            vnc_hu: [30.0, 40.0, 40.0, 40.0, 40.0, 50.0, 40.0, 40.0],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::InvalidArgument(format!("phantom size must be at least 32, got {}", self.size)));
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {}", self.spacing_mm)));
        }
        if !(self.noise_sd_hu >= 0.0 && self.noise_sd_hu.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise sd must be >= 0, got {}", self.noise_sd_hu)));
        }
        if self.ccta_hu.iter().chain(&self.vnc_hu).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("intensity tables must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub ccta: Volume,
    pub vnc: Volume,
    pub labels: LabelVolume,
}

/// Minimum distance in voxels between any structure and the volume border.
pub const BORDER_MARGIN: usize = 2;

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, q: [f64; 3]) -> bool {
        (0..3).map(|a| ((q[a] - self.center[a]) / self.axes[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Tube parallel to the local z axis.
struct Tube {
    center_xy: [f64; 2],
    radius: f64,
    z_range: [f64; 2],
}

impl Tube {
    fn contains(&self, q: [f64; 3]) -> bool {
        let (dx, dy) = (q[0] - self.center_xy[0], q[1] - self.center_xy[1]);
        dx * dx + dy * dy <= self.radius * self.radius && q[2] >= self.z_range[0] && q[2] <= self.z_range[1]
    }
}

/// Local coordinates are voxels of a 64³ grid relative to the volume center.
struct Anatomy {
    lv_outer: Ellipsoid,
    lv_cavity: Ellipsoid,
    rv: Ellipsoid,
    la: Ellipsoid,
    ra: Ellipsoid,
    aa: Tube,
    pa: Tube,
}

impl Anatomy {
    fn new() -> Self {
        Self {
            lv_outer: Ellipsoid { center: [4.0, -2.0, 0.0], axes: [11.0, 9.0, 12.0] },
            lv_cavity: Ellipsoid { center: [4.0, -2.0, 0.0], axes: [7.5, 5.5, 8.5] },
            rv: Ellipsoid { center: [-6.0, -4.0, 0.0], axes: [12.0, 7.0, 10.0] },
            la: Ellipsoid { center: [5.0, 8.0, 13.0], axes: [7.0, 6.0, 5.0] },
            ra: Ellipsoid { center: [-9.0, 6.0, 11.0], axes: [7.0, 6.0, 6.0] },
            aa: Tube { center_xy: [4.0, -1.0], radius: 3.5, z_range: [10.0, 30.0] },
            pa: Tube { center_xy: [-8.0, -4.0], radius: 3.5, z_range: [9.0, 30.0] },
        }
    }

    /// Candidates in paint order; a voxel takes the first class that claims it.
    fn classify(&self, q: [f64; 3]) -> u8 {
        let in_lv = self.lv_outer.contains(q);
        let in_cavity = self.lv_cavity.contains(q);
        if in_lv && !in_cavity {
            return 5;
        }
        if in_cavity {
            return 1;
        }
        if self.rv.contains(q) && !in_lv {
            return 2;
        }
        if self.la.contains(q) {
            return 3;
        }
        if self.ra.contains(q) {
            return 4;
        }
        if self.aa.contains(q) {
            return 6;
        }
        if self.pa.contains(q) {
            return 7;
        }
        0
    }
}

fn rasterize(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<LabelVolume> {
    let n = spec.size;
    let unit = n as f64 / 64.0;
    let angle = rng.random_range(-0.25..0.25f64);
    let scale = rng.random_range(0.9..1.1f64) * unit;
    let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-3.0..3.0f64) * unit);
    let (sin, cos) = angle.sin_cos();
    let anatomy = Anatomy::new();
    let c = (n as f64 - 1.0) / 2.0;
    let geometry = Geometry::cube(n, spec.spacing_mm);
    let lo = BORDER_MARGIN;
    let hi = n - 1 - BORDER_MARGIN;
    let mut data = vec![0u8; geometry.len()];
    for (idx, [i, j, k]) in geometry.iter_coords().enumerate() {
        if i < lo || j < lo || k < lo || i > hi || j > hi || k > hi {
            continue;
        }
        let d = [i as f64 - c - shift[0], j as f64 - c - shift[1], k as f64 - c - shift[2]];
        let q = [(cos * d[0] + sin * d[1]) / scale, (-sin * d[0] + cos * d[1]) / scale, d[2] / scale];
        data[idx] = anatomy.classify(q);
    }
    // each structure is reduced to its largest 26-connected piece
    for class in 1..NUM_CLASSES as u8 {
        let mask: Vec<bool> = data.iter().map(|&v| v == class).collect();
        let cc = connected_components(&mask, geometry.dims, Connectivity::TwentySix);
        if cc.n_components() == 0 {
            return Err(Error::InvalidArgument(format!("phantom seed {} lost class {class}", spec.seed)));
        }
        let keep = 1 + cc.sizes.iter().enumerate().fold((0, 0), |b, (i, &s)| if s > b.1 { (i, s) } else { b }).0 as u32;
        for (v, &id) in data.iter_mut().zip(&cc.ids) {
            if id != 0 && id != keep {
                *v = 0;
            }
        }
    }
    LabelVolume::new(geometry, data)
}

fn render(labels: &LabelVolume, table: &[f64; NUM_CLASSES], noise_sd: f64, rng: &mut ChaCha8Rng) -> Volume {
    let noise = Normal::new(0.0, noise_sd).expect("noise sd validated");
    let data = labels
        .data()
        .iter()
        .map(|&l| {
            let v = table[l as usize] + noise.sample(rng);
            v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
        })
        .collect();
    Volume::new(*labels.geometry(), VoxelData::Int16(data)).expect("length matches geometry")
}

/// One phantom. Pose, CCTA noise and VNC noise come from independent
/// ChaCha streams 0, 1 and 2 of `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(s);
        r
    };
    let labels = rasterize(spec, &mut stream(0))?;
    let ccta = render(&labels, &spec.ccta_hu, spec.noise_sd_hu, &mut stream(1));
    let vnc = render(&labels, &spec.vnc_hu, spec.noise_sd_hu, &mut stream(2));
    Ok(Phantom { ccta, vnc, labels })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    /// Paths are relative to the manifest's directory.
    pub ccta_path: String,
    pub vnc_path: String,
    pub labels_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Whether the image volumes are already smoothed, resampled and windowed.
    #[serde(default)]
    pub preprocessed: bool,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serialization is infallible");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

/// Loads `(vnc, labels)` of an entry, resolving paths against `dir`.
pub fn load_vnc_pair(dir: &Path, entry: &ManifestEntry) -> Result<(Volume, LabelVolume)> {
    Ok((read_volume(dir.join(&entry.vnc_path))?, read_labels(dir.join(&entry.labels_path))?))
}

pub fn phantom_id(index: usize) -> String {
    format!("phantom_{index:03}")
}

/// Writes `n` phantoms (seed `base_seed + index`) and `manifest.json`.
pub fn generate_dataset(n: usize, out_dir: impl AsRef<Path>, base_seed: u64, template: &PhantomSpec) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one phantom".into()));
    }
    let out_dir: PathBuf = out_dir.as_ref().to_path_buf();
    let entries = (0..n)
        .into_par_iter()
        .map(|index| {
            let seed = base_seed + index as u64;
            let p = generate_phantom(&PhantomSpec { seed, ..template.clone() })?;
            let id = phantom_id(index);
            let entry = ManifestEntry {
                ccta_path: format!("{id}_ccta.mvol.json"),
                vnc_path: format!("{id}_vnc.mvol.json"),
                labels_path: format!("{id}_labels.mvol.json"),
                id,
                seed,
            };
            write_volume(&p.ccta, out_dir.join(&entry.ccta_path))?;
            write_volume(&p.vnc, out_dir.join(&entry.vnc_path))?;
            write_labels(&p.labels, out_dir.join(&entry.labels_path))?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest { entries, preprocessed: false };
    manifest.write(&out_dir)?;
    Ok(manifest)
}
