//! Voxel grids with physical geometry.
//!
//! Data is stored x fastest-varying, then y, then z: the linear index of
//! voxel `(i, j, k)` is `i + nx * (j + ny * k)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::NUM_CLASSES;

/// Voxel counts, spacing and origin of a grid. The origin is the physical
/// position of the center of voxel `(0, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], origin_mm: [f64; 3]) -> Result<Self> {
        let g = Self { dims, spacing_mm, origin_mm };
        g.validate()?;
        Ok(g)
    }

    /// Isotropic geometry at the origin.
    pub fn cube(n: usize, spacing_mm: f64) -> Self {
        Self { dims: [n; 3], spacing_mm: [spacing_mm; 3], origin_mm: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Geometry(format!("dims must be positive, got {:?}", self.dims)));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Geometry(format!(
                "spacing must be positive, got {:?}",
                self.spacing_mm
            )));
        }
        if self.origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry(format!("origin must be finite, got {:?}", self.origin_mm)));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Physical position of a voxel center.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let idx = [i, j, k];
        std::array::from_fn(|a| self.origin_mm[a] + idx[a] as f64 * self.spacing_mm[a])
    }

    /// Continuous voxel coordinate of a physical point.
    pub fn to_continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.origin_mm[a]) / self.spacing_mm[a])
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().product()
    }

    pub fn ensure_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::GeometryMismatch(format!(
                "{what}: {:?}/{:?}/{:?} vs {:?}/{:?}/{:?}",
                self.dims,
                self.spacing_mm,
                self.origin_mm,
                other.dims,
                other.spacing_mm,
                other.origin_mm
            )));
        }
        Ok(())
    }

    /// Iterates voxel coordinates in storage order.
    pub fn iter_coords(&self) -> impl Iterator<Item = [usize; 3]> {
        let [nx, ny, nz] = self.dims;
        (0..nz).flat_map(move |k| (0..ny).flat_map(move |j| (0..nx).map(move |i| [i, j, k])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Int16,
    Uint8,
    Float32,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::Int16 => 2,
            DType::Uint8 => 1,
            DType::Float32 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::Int16 => "int16",
            DType::Uint8 => "uint8",
            DType::Float32 => "float32",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    Int16(Vec<i16>),
    Uint8(Vec<u8>),
    Float32(Vec<f32>),
}

impl VoxelData {
    pub fn dtype(&self) -> DType {
        match self {
            VoxelData::Int16(_) => DType::Int16,
            VoxelData::Uint8(_) => DType::Uint8,
            VoxelData::Float32(_) => DType::Float32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VoxelData::Int16(v) => v.len(),
            VoxelData::Uint8(v) => v.len(),
            VoxelData::Float32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get_f64(&self, index: usize) -> f64 {
        match self {
            VoxelData::Int16(v) => v[index] as f64,
            VoxelData::Uint8(v) => v[index] as f64,
            VoxelData::Float32(v) => v[index] as f64,
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            VoxelData::Int16(v) => v.iter().map(|&x| x as f32).collect(),
            VoxelData::Uint8(v) => v.iter().map(|&x| x as f32).collect(),
            VoxelData::Float32(v) => v.clone(),
        }
    }

    /// Bitwise equality (distinguishes NaN payloads and signed zeros).
    pub fn bit_eq(&self, other: &VoxelData) -> bool {
        match (self, other) {
            (VoxelData::Float32(a), VoxelData::Float32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => self == other,
        }
    }
}

/// A scalar image on a physical grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub geometry: Geometry,
    pub data: VoxelData,
}

impl Volume {
    pub fn new(geometry: Geometry, data: VoxelData) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn from_f32(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        Self::new(geometry, VoxelData::Float32(data))
    }

    pub fn filled_f32(geometry: Geometry, value: f32) -> Self {
        let n = geometry.len();
        Self { geometry, data: VoxelData::Float32(vec![value; n]) }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data.get_f64(self.geometry.index(i, j, k))
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.to_f32()
    }

    /// Float32 view, converting if necessary.
    pub fn as_f32(&self) -> std::borrow::Cow<'_, [f32]> {
        match &self.data {
            VoxelData::Float32(v) => std::borrow::Cow::Borrowed(v.as_slice()),
            other => std::borrow::Cow::Owned(other.to_f32()),
        }
    }

    pub fn bit_eq(&self, other: &Volume) -> bool {
        self.geometry == other.geometry && self.data.bit_eq(&other.data)
    }
}

/// Class IDs in `0..=7` on a physical grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geometry: Geometry,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, data: Vec<u8>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "label length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v as usize >= NUM_CLASSES) {
            return Err(Error::LabelRange { value, index });
        }
        Ok(Self { geometry, data })
    }

    pub fn background(geometry: Geometry) -> Self {
        let n = geometry.len();
        Self { geometry, data: vec![0; n] }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.geometry.index(i, j, k)]
    }

    /// Sets a voxel. Values above 7 are rejected.
    pub fn set(&mut self, i: usize, j: usize, k: usize, class: u8) -> Result<()> {
        let index = self.geometry.index(i, j, k);
        if class as usize >= NUM_CLASSES {
            return Err(Error::LabelRange { value: class, index });
        }
        self.data[index] = class;
        Ok(())
    }

    /// Binary mask of one class.
    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    /// Voxel counts per class.
    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0usize; NUM_CLASSES];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }

    pub fn to_volume(&self) -> Volume {
        Volume { geometry: self.geometry, data: VoxelData::Uint8(self.data.clone()) }
    }
}

impl TryFrom<Volume> for LabelVolume {
    type Error = Error;

    fn try_from(v: Volume) -> Result<Self> {
        match v.data {
            VoxelData::Uint8(data) => LabelVolume::new(v.geometry, data),
            other => Err(Error::DType { expected: "uint8", found: other.dtype().name() }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn linear_index_matches_coordinate_iterator(nx in 1usize..7, ny in 1usize..7, nz in 1usize..7) {
            let g = Geometry::cube(1, 1.0);
            let g = Geometry { dims: [nx, ny, nz], ..g };
            for (n, [i, j, k]) in g.iter_coords().enumerate() {
                prop_assert_eq!(g.index(i, j, k), n);
                prop_assert_eq!(i + nx * (j + ny * k), n);
                prop_assert_eq!(g.coords(n), [i, j, k]);
            }
        }
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let g = Geometry::cube(2, 1.0);
        let mut data = vec![0u8; 8];
        data[5] = 8;
        assert!(matches!(LabelVolume::new(g, data), Err(Error::LabelRange { value: 8, index: 5 })));
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Geometry::new([2, 0, 2], [1.0; 3], [0.0; 3]).is_err());
        assert!(Geometry::new([2, 2, 2], [1.0, -0.5, 1.0], [0.0; 3]).is_err());
        assert!(Volume::new(Geometry::cube(2, 1.0), VoxelData::Uint8(vec![0; 7])).is_err());
    }
}
