//! Image conditioning applied before training and inference.
//!
//! The pipeline order is fixed: smooth, resample, normalize. Labels only go
//! through nearest-neighbour resampling onto the same output grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::volume::{Geometry, LabelVolume, Volume, VoxelData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub sigma_mm: f64,
    pub target_spacing_mm: f64,
    pub window_lo_hu: f64,
    pub window_hi_hu: f64,
    pub slab_depth: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            sigma_mm: 1.0,
            target_spacing_mm: 0.8,
            window_lo_hu: -400.0,
            window_hi_hu: 600.0,
            slab_depth: 5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_mm >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma_mm must be >= 0, got {}", self.sigma_mm)));
        }
        if !(self.target_spacing_mm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "target_spacing_mm must be > 0, got {}",
                self.target_spacing_mm
            )));
        }
        if !(self.window_lo_hu < self.window_hi_hu) {
            return Err(Error::InvalidArgument(format!(
                "window [{}, {}] is empty",
                self.window_lo_hu, self.window_hi_hu
            )));
        }
        if self.slab_depth % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "slab_depth must be odd, got {}",
                self.slab_depth
            )));
        }
        Ok(())
    }

    /// Smooth, resample (trilinear) and window an intensity volume.
    pub fn apply_image(&self, v: &Volume) -> Result<Volume> {
        self.validate()?;
        let smoothed = gaussian_smooth(v, self.sigma_mm)?;
        let resampled = resample(&smoothed, self.target_spacing_mm, Interpolation::Trilinear)?;
        normalize_intensity(&resampled, self.window_lo_hu, self.window_hi_hu)
    }

    /// Resample labels (nearest) onto the grid produced by [`Self::apply_image`].
    pub fn apply_labels(&self, labels: &LabelVolume) -> Result<LabelVolume> {
        self.validate()?;
        let target = isotropic_geometry(labels.geometry(), self.target_spacing_mm)?;
        resample_labels_to(labels, &target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Normalized Gaussian taps for a sigma in voxels, truncated at `ceil(3σ)`.
pub fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    if sigma_vox <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma_vox).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|w| *w /= sum);
    taps
}

/// Separable Gaussian smoothing with edge replication. The per-axis sigma
/// in voxels is `sigma_mm / spacing`. Output is float32 on the same grid.
pub fn gaussian_smooth(v: &Volume, sigma_mm: f64) -> Result<Volume> {
    if !(sigma_mm >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma_mm}")));
    }
    let g = v.geometry;
    let mut data = v.to_f32_vec();
    if sigma_mm > 0.0 {
        for axis in 0..3 {
            let kernel = gaussian_kernel(sigma_mm / g.spacing_mm[axis]);
            if kernel.len() > 1 {
                data = convolve_axis(&data, g.dims, axis, &kernel);
            }
        }
    }
    Volume::from_f32(g, data)
}

fn convolve_axis(src: &[f32], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f32> {
    let [nx, ny, _] = dims;
    let n = dims[axis] as i64;
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    let radius = (kernel.len() / 2) as i64;
    let mut out = vec![0f32; src.len()];
    let mut line = vec![0f64; dims[axis]];
    let lines: Vec<usize> = (0..src.len()).filter(|&i| (i / stride) % dims[axis] == 0).collect();
    for start in lines {
        for (t, slot) in line.iter_mut().enumerate() {
            *slot = src[start + t * stride] as f64;
        }
        for t in 0..n {
            let mut acc = 0.0;
            for (w, &tap) in kernel.iter().enumerate() {
                let s = (t + w as i64 - radius).clamp(0, n - 1) as usize;
                acc += tap * line[s];
            }
            out[start + t as usize * stride] = acc as f32;
        }
    }
    out
}

/// Grid covering the same field of view as `g` at isotropic `target` spacing.
/// Dims are `round(n * s / target)`, at least 1.
pub fn isotropic_geometry(g: &Geometry, target_spacing_mm: f64) -> Result<Geometry> {
    if !(target_spacing_mm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be > 0, got {target_spacing_mm}"
        )));
    }
    let dims = std::array::from_fn(|a| {
        ((g.dims[a] as f64 * g.spacing_mm[a] / target_spacing_mm).round() as usize).max(1)
    });
    let origin_mm =
        std::array::from_fn(|a| g.origin_mm[a] + (target_spacing_mm - g.spacing_mm[a]) / 2.0);
    Geometry::new(dims, [target_spacing_mm; 3], origin_mm)
}

pub fn resample(v: &Volume, target_spacing_mm: f64, mode: Interpolation) -> Result<Volume> {
    let target = isotropic_geometry(&v.geometry, target_spacing_mm)?;
    Ok(resample_to(v, &target, mode))
}

/// Per-axis sampling positions of `target` voxel centers in the continuous
/// index space of `source`, clamped to the source extent.
fn axis_positions(source: &Geometry, target: &Geometry, axis: usize) -> Vec<f64> {
    let offset = (target.origin_mm[axis] - source.origin_mm[axis]) / source.spacing_mm[axis];
    let step = target.spacing_mm[axis] / source.spacing_mm[axis];
    let max = (source.dims[axis] - 1) as f64;
    (0..target.dims[axis])
        .map(|k| (offset + k as f64 * step).clamp(0.0, max))
        .collect()
}

/// Resample onto an arbitrary target grid. Trilinear output is float32;
/// nearest keeps the input dtype.
pub fn resample_to(v: &Volume, target: &Geometry, mode: Interpolation) -> Volume {
    let src = &v.geometry;
    let pos: [Vec<f64>; 3] = std::array::from_fn(|a| axis_positions(src, target, a));
    match mode {
        Interpolation::Nearest => {
            let idx: [Vec<usize>; 3] =
                std::array::from_fn(|a| pos[a].iter().map(|&c| (c + 0.5).floor() as usize).collect());
            let pick = |k: usize, j: usize, i: usize| src.index(idx[0][i], idx[1][j], idx[2][k]);
            let data = match &v.data {
                VoxelData::Int16(d) => VoxelData::Int16(gather(target, |i, j, k| d[pick(k, j, i)])),
                VoxelData::Uint8(d) => VoxelData::Uint8(gather(target, |i, j, k| d[pick(k, j, i)])),
                VoxelData::Float32(d) => VoxelData::Float32(gather(target, |i, j, k| d[pick(k, j, i)])),
            };
            Volume { geometry: *target, data }
        }
        Interpolation::Trilinear => {
            let src_data = v.as_f32();
            let taps: [Vec<(usize, usize, f64)>; 3] = std::array::from_fn(|a| {
                let n = src.dims[a];
                pos[a]
                    .iter()
                    .map(|&c| {
                        let i0 = c.floor() as usize;
                        let i1 = (i0 + 1).min(n - 1);
                        (i0, i1, c - i0 as f64)
                    })
                    .collect()
            });
            let data = gather(target, |i, j, k| {
                let (x0, x1, fx) = taps[0][i];
                let (y0, y1, fy) = taps[1][j];
                let (z0, z1, fz) = taps[2][k];
                let at = |x: usize, y: usize, z: usize| src_data[src.index(x, y, z)] as f64;
                let lerp = |a: f64, b: f64, f: f64| if f == 0.0 { a } else { a + (b - a) * f };
                let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
                let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
                let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
                let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
                lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz) as f32
            });
            Volume { geometry: *target, data: VoxelData::Float32(data) }
        }
    }
}

fn gather<T>(g: &Geometry, mut f: impl FnMut(usize, usize, usize) -> T) -> Vec<T> {
    let [nx, ny, nz] = g.dims;
    let mut out = Vec::with_capacity(g.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                out.push(f(i, j, k));
            }
        }
    }
    out
}

pub fn resample_labels(labels: &LabelVolume, target_spacing_mm: f64) -> Result<LabelVolume> {
    let target = isotropic_geometry(labels.geometry(), target_spacing_mm)?;
    resample_labels_to(labels, &target)
}

pub fn resample_labels_to(labels: &LabelVolume, target: &Geometry) -> Result<LabelVolume> {
    LabelVolume::try_from(resample_to(&labels.to_volume(), target, Interpolation::Nearest))
}

/// Trilinear sample at a physical point, clamped to the volume extent.
pub fn sample_trilinear(v: &Volume, p: [f64; 3]) -> f64 {
    let g = &v.geometry;
    let c = g.to_continuous_index(p);
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut f = [0f64; 3];
    for a in 0..3 {
        let x = c[a].clamp(0.0, (g.dims[a] - 1) as f64);
        lo[a] = x.floor() as usize;
        hi[a] = (lo[a] + 1).min(g.dims[a] - 1);
        f[a] = x - lo[a] as f64;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let pick = |a: usize| corner >> a & 1 == 1;
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if pick(a) {
                w *= f[a];
                idx[a] = hi[a];
            } else {
                w *= 1.0 - f[a];
                idx[a] = lo[a];
            }
        }
        if w != 0.0 {
            acc += w * v.get(idx[0], idx[1], idx[2]);
        }
    }
    acc
}

/// Window to `[0, 1]`: `clamp((x - lo) / (hi - lo), 0, 1)`, float32 output.
pub fn normalize_intensity(v: &Volume, lo_hu: f64, hi_hu: f64) -> Result<Volume> {
    if !(lo_hu < hi_hu) {
        return Err(Error::InvalidArgument(format!("window lo {lo_hu} must be < hi {hi_hu}")));
    }
    let width = hi_hu - lo_hu;
    let n = v.geometry.len();
    let data = (0..n)
        .map(|i| ((v.data.get_f64(i) - lo_hu) / width).clamp(0.0, 1.0) as f32)
        .collect();
    Volume::from_f32(v.geometry, data)
}

/// Axial slice indices of a slab centered at `center_z`, clamped to the volume.
pub fn slab_indices(nz: usize, center_z: usize, slab_depth: usize) -> Vec<usize> {
    let half = (slab_depth / 2) as i64;
    (0..slab_depth as i64)
        .map(|c| (center_z as i64 - half + c).clamp(0, nz as i64 - 1) as usize)
        .collect()
}

/// `slab_depth` consecutive axial slices as channels, shape `(1, depth, ny, nx)`.
pub fn extract_slab(v: &Volume, center_z: usize, slab_depth: usize) -> Result<Tensor<f32>> {
    let [nx, ny, nz] = v.dims();
    if center_z >= nz {
        return Err(Error::InvalidArgument(format!("center_z {center_z} outside 0..{nz}")));
    }
    if slab_depth == 0 || slab_depth % 2 == 0 {
        return Err(Error::InvalidArgument(format!("slab_depth must be odd, got {slab_depth}")));
    }
    let src = v.as_f32();
    let plane = nx * ny;
    let mut data = Vec::with_capacity(slab_depth * plane);
    for z in slab_indices(nz, center_z, slab_depth) {
        data.extend_from_slice(&src[z * plane..(z + 1) * plane]);
    }
    Tensor::from_vec([1, slab_depth, ny, nx], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(dims: [usize; 3], spacing: f64, data: Vec<f32>) -> Volume {
        let g = Geometry::new(dims, [spacing; 3], [0.0; 3]).unwrap();
        Volume::from_f32(g, data).unwrap()
    }

    #[test]
    fn smoothing_constant_is_identity() {
        let v = vol([6, 5, 4], 0.8, vec![100.0; 120]);
        let s = gaussian_smooth(&v, 1.7).unwrap();
        assert!(s.to_f32_vec().iter().all(|&x| (x - 100.0).abs() < 1e-4));
        assert_eq!(s.geometry, v.geometry);
    }

    #[test]
    fn zero_sigma_is_exact_identity() {
        let data: Vec<f32> = (0..27).map(|i| i as f32 * 0.37 - 3.0).collect();
        let v = vol([3, 3, 3], 1.0, data);
        assert!(gaussian_smooth(&v, 0.0).unwrap().bit_eq(&v));
        assert!(gaussian_smooth(&v, -1.0).is_err());
    }

    #[test]
    fn impulse_matches_dense_convolution() {
        let n = 9;
        let mut data = vec![0f32; n * n * n];
        data[4 + 9 * (4 + 9 * 4)] = 1.0;
        let v = vol([n; 3], 0.8, data.clone());
        let out = gaussian_smooth(&v, 0.8).unwrap().to_f32_vec();
        let total: f64 = out.iter().map(|&x| x as f64).sum();
        assert!((total - 1.0).abs() < 1e-6);

        // dense 3D convolution with the outer-product kernel and clamped reads
        let sigma = 1.0f64;
        let r = 3i64;
        let w1: Vec<f64> = (-r..=r).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let s1: f64 = w1.iter().sum();
        let at = |i: i64, j: i64, k: i64| {
            let c = |x: i64| x.clamp(0, n as i64 - 1) as usize;
            data[c(i) + n * (c(j) + n * c(k))] as f64
        };
        for k in 0..n as i64 {
            for j in 0..n as i64 {
                for i in 0..n as i64 {
                    let mut acc = 0.0;
                    for dz in -r..=r {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let w = w1[(dx + r) as usize] * w1[(dy + r) as usize] * w1[(dz + r) as usize];
                                acc += w * at(i + dx, j + dy, k + dz);
                            }
                        }
                    }
                    acc /= s1 * s1 * s1;
                    let got = out[i as usize + n * (j as usize + n * k as usize)] as f64;
                    assert!((got - acc).abs() < 1e-6, "({i},{j},{k}) {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn smoothing_preserves_mean_of_random_volumes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for sigma in [0.4, 0.7, 1.0] {
            let data: Vec<f32> = (0..32 * 32 * 32).map(|_| rng.random_range(0.0..1000.0)).collect();
            let v = vol([32; 3], 1.0, data);
            let mean_in: f64 = v.to_f32_vec().iter().map(|&x| x as f64).sum::<f64>() / v.geometry.len() as f64;
            let s = gaussian_smooth(&v, sigma).unwrap();
            let mean_out: f64 = s.to_f32_vec().iter().map(|&x| x as f64).sum::<f64>() / v.geometry.len() as f64;
            assert!(((mean_out - mean_in) / mean_in).abs() < 1e-3);
        }
    }

    #[test]
    fn resample_at_current_spacing_is_identity() {
        let data: Vec<f32> = (0..60).map(|i| (i * 7 % 13) as f32).collect();
        let g = Geometry::new([5, 4, 3], [0.8; 3], [1.3, -2.1, 0.7]).unwrap();
        let v = Volume::from_f32(g, data).unwrap();
        let r = resample(&v, 0.8, Interpolation::Trilinear).unwrap();
        assert!(r.bit_eq(&v));
        let r = resample(&v, 0.8, Interpolation::Nearest).unwrap();
        assert!(r.bit_eq(&v));
    }

    #[test]
    fn resample_constant_and_dims() {
        let g = Geometry::new([10, 8, 5], [0.4, 0.4, 0.9], [0.0; 3]).unwrap();
        let v = Volume::from_f32(g, vec![50.0; 400]).unwrap();
        let r = resample(&v, 0.8, Interpolation::Trilinear).unwrap();
        assert_eq!(r.dims(), [5, 4, 6]);
        assert!(r.to_f32_vec().iter().all(|&x| x == 50.0));
        assert!(resample(&v, 0.0, Interpolation::Trilinear).is_err());
        let tiny = resample(&v, 100.0, Interpolation::Nearest).unwrap();
        assert_eq!(tiny.dims(), [1, 1, 1]);
    }

    #[test]
    fn trilinear_midpoint() {
        let v = vol([2, 1, 1], 1.0, vec![0.0, 10.0]);
        assert_eq!(sample_trilinear(&v, [0.5, 0.0, 0.0]), 5.0);
        // clamped outside the extent
        assert_eq!(sample_trilinear(&v, [-3.0, 0.0, 0.0]), 0.0);
        assert_eq!(sample_trilinear(&v, [7.0, 0.0, 0.0]), 10.0);
        // the grid resampler agrees with the point sampler
        let target = Geometry::new([1, 1, 1], [1.0; 3], [0.5, 0.0, 0.0]).unwrap();
        let r = resample_to(&v, &target, Interpolation::Trilinear);
        assert_eq!(r.to_f32_vec(), vec![5.0]);
    }

    proptest! {
        #[test]
        fn nearest_only_emits_input_values(seed in 0u64..1000, target in 0.3f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Geometry::new([5, 6, 4], [0.7, 0.9, 1.3], [0.0; 3]).unwrap();
            let labels: Vec<u8> = (0..g.len()).map(|_| rng.random_range(0..8)).collect();
            let lv = LabelVolume::new(g, labels.clone()).unwrap();
            let r = resample_labels(&lv, target).unwrap();
            let present: std::collections::BTreeSet<u8> = labels.into_iter().collect();
            prop_assert!(r.data().iter().all(|v| present.contains(v)));
        }

        #[test]
        fn slab_channels_follow_clamped_indices(nz in 1usize..12, depth in (0usize..4).prop_map(|d| 2 * d + 1), z in 0usize..12) {
            prop_assume!(z < nz);
            let data: Vec<f32> = (0..2 * 3 * nz).map(|i| i as f32).collect();
            let v = vol([2, 3, nz], 1.0, data.clone());
            let slab = extract_slab(&v, z, depth).unwrap();
            prop_assert_eq!(slab.shape(), [1, depth, 3, 2]);
            for c in 0..depth {
                let src = (z as i64 - (depth as i64 - 1) / 2 + c as i64).clamp(0, nz as i64 - 1) as usize;
                prop_assert_eq!(&slab.data()[c * 6..(c + 1) * 6], &data[src * 6..(src + 1) * 6]);
            }
        }
    }

    #[test]
    fn normalization_window() {
        let v = vol([3, 1, 1], 1.0, vec![-400.0, 100.0, -1000.0]);
        let n = normalize_intensity(&v, -400.0, 600.0).unwrap().to_f32_vec();
        assert_eq!(n, vec![0.0, 0.5, 0.0]);
        assert!(normalize_intensity(&v, 10.0, 10.0).is_err());
    }

    #[test]
    fn slab_examples() {
        assert_eq!(slab_indices(10, 5, 5), vec![3, 4, 5, 6, 7]);
        assert_eq!(slab_indices(10, 0, 5), vec![0, 0, 0, 1, 2]);
        assert_eq!(slab_indices(10, 9, 5), vec![7, 8, 9, 9, 9]);
        let v = vol([1, 1, 10], 1.0, (0..10).map(|z| z as f32).collect());
        assert_eq!(extract_slab(&v, 9, 5).unwrap().data(), &[7.0, 8.0, 9.0, 9.0, 9.0]);
        assert!(extract_slab(&v, 10, 5).is_err());
    }

    #[test]
    fn pipeline_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Geometry::new([12, 10, 8], [0.5, 0.5, 0.9], [0.0; 3]).unwrap();
        let data: Vec<i16> = (0..g.len()).map(|_| rng.random_range(-500..700)).collect();
        let v = Volume::new(g, VoxelData::Int16(data)).unwrap();
        let cfg = PreprocessConfig::default();
        let a = cfg.apply_image(&v).unwrap();
        let b = cfg.apply_image(&v).unwrap();
        assert!(a.bit_eq(&b));
        let lv = LabelVolume::background(g);
        assert_eq!(cfg.apply_labels(&lv).unwrap().geometry(), &a.geometry);
    }
}
