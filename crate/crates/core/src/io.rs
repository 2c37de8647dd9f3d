//! `MVOL1` volume files: a JSON header `<name>.mvol.json` next to a packed
//! little-endian voxel blob `<name>.mvol.raw`, x fastest-varying, no
//! compression.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{DType, Geometry, LabelVolume, Volume, VoxelData};

pub const MAGIC: &str = "MVOL1";
pub const HEADER_SUFFIX: &str = ".mvol.json";
pub const RAW_SUFFIX: &str = ".mvol.raw";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    dims: Vec<i64>,
    spacing_mm: Vec<f64>,
    origin_mm: Vec<f64>,
    dtype: DType,
}

/// Header and raw paths for a volume. Accepts either the bare prefix
/// (`dir/name`) or either of the two file names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumePaths {
    pub header: PathBuf,
    pub raw: PathBuf,
}

impl VolumePaths {
    pub fn new(path: impl AsRef<Path>) -> Self {
        let s = path.as_ref().to_string_lossy();
        let prefix = s
            .strip_suffix(HEADER_SUFFIX)
            .or_else(|| s.strip_suffix(RAW_SUFFIX))
            .unwrap_or(&s)
            .to_string();
        Self {
            header: PathBuf::from(format!("{prefix}{HEADER_SUFFIX}")),
            raw: PathBuf::from(format!("{prefix}{RAW_SUFFIX}")),
        }
    }
}

fn triple<T: Copy>(values: &[T], field: &str, path: &Path) -> Result<[T; 3]> {
    values.try_into().map_err(|_| Error::Header {
        path: path.to_path_buf(),
        message: format!("{field} must have 3 components, found {}", values.len()),
    })
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let paths = VolumePaths::new(path);
    let text = fs::read_to_string(&paths.header).map_err(|e| Error::io(&paths.header, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: paths.header.clone(),
        message: e.to_string(),
    })?;
    if header.magic != MAGIC {
        return Err(Error::Magic { expected: MAGIC.to_string(), found: header.magic });
    }
    let dims = triple(&header.dims, "dims", &paths.header)?;
    if dims.iter().any(|&d| d <= 0) {
        return Err(Error::Geometry(format!("dims must be positive, got {dims:?}")));
    }
    let geometry = Geometry::new(
        dims.map(|d| d as usize),
        triple(&header.spacing_mm, "spacing_mm", &paths.header)?,
        triple(&header.origin_mm, "origin_mm", &paths.header)?,
    )?;

    let bytes = fs::read(&paths.raw).map_err(|e| Error::io(&paths.raw, e))?;
    let expected = geometry.len() * header.dtype.size_of();
    if bytes.len() != expected {
        return Err(Error::SizeMismatch { expected, found: bytes.len() });
    }
    let data = decode(&bytes, header.dtype);
    Volume::new(geometry, data)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let paths = VolumePaths::new(path);
    let g = &v.geometry;
    let header = Header {
        magic: MAGIC.to_string(),
        dims: g.dims.iter().map(|&d| d as i64).collect(),
        spacing_mm: g.spacing_mm.to_vec(),
        origin_mm: g.origin_mm.to_vec(),
        dtype: v.dtype(),
    };
    let text = serde_json::to_string(&header).expect("header serialization is infallible");
    if let Some(dir) = paths.header.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&paths.header, text).map_err(|e| Error::io(&paths.header, e))?;
    fs::write(&paths.raw, encode(&v.data)).map_err(|e| Error::io(&paths.raw, e))?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    LabelVolume::try_from(read_volume(path)?)
}

pub fn write_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_volume(&labels.to_volume(), path)
}

fn encode(data: &VoxelData) -> Vec<u8> {
    match data {
        VoxelData::Int16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        VoxelData::Uint8(v) => v.clone(),
        VoxelData::Float32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    }
}

fn decode(bytes: &[u8], dtype: DType) -> VoxelData {
    match dtype {
        DType::Int16 => VoxelData::Int16(
            bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect(),
        ),
        DType::Uint8 => VoxelData::Uint8(bytes.to_vec()),
        DType::Float32 => VoxelData::Float32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_header(dir: &Path, name: &str, json: &str, raw: &[u8]) -> PathBuf {
        let prefix = dir.join(name);
        let paths = VolumePaths::new(&prefix);
        fs::write(paths.header, json).unwrap();
        fs::write(paths.raw, raw).unwrap();
        prefix
    }

    #[test]
    fn decodes_hand_encoded_int16() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_header(
            dir.path(),
            "one",
            r#"{"magic":"MVOL1","dims":[1,1,1],"spacing_mm":[0.8,0.8,0.8],"origin_mm":[0,0,0],"dtype":"int16"}"#,
            &[0x2A, 0x00],
        );
        let v = read_volume(&p).unwrap();
        assert_eq!(v.data, VoxelData::Int16(vec![42]));
        assert_eq!(v.geometry.spacing_mm, [0.8; 3]);
    }

    #[test]
    fn float32_one_encodes_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::from_f32(Geometry::cube(1, 1.0), vec![1.0]).unwrap();
        let p = dir.path().join("f");
        write_volume(&v, &p).unwrap();
        assert_eq!(fs::read(VolumePaths::new(&p).raw).unwrap(), vec![0x00, 0x00, 0x80, 0x3F]);
    }

    #[test]
    fn short_raw_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_header(
            dir.path(),
            "short",
            r#"{"magic":"MVOL1","dims":[2,2,2],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"dtype":"int16"}"#,
            &[0u8; 15],
        );
        assert!(matches!(read_volume(&p), Err(Error::SizeMismatch { expected: 16, found: 15 })));
    }

    #[test]
    fn distinct_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_volume(dir.path().join("nothing")), Err(Error::MissingFile(_))));

        let p = write_header(
            dir.path(),
            "magic",
            r#"{"magic":"MVOL2","dims":[1,1,1],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"dtype":"uint8"}"#,
            &[0],
        );
        assert!(matches!(read_volume(&p), Err(Error::Magic { .. })));

        let p = write_header(
            dir.path(),
            "dims",
            r#"{"magic":"MVOL1","dims":[1,-1,1],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"dtype":"uint8"}"#,
            &[0],
        );
        assert!(matches!(read_volume(&p), Err(Error::Geometry(_))));

        let p = write_header(
            dir.path(),
            "spacing",
            r#"{"magic":"MVOL1","dims":[1,1,1],"spacing_mm":[1,0,1],"origin_mm":[0,0,0],"dtype":"uint8"}"#,
            &[0],
        );
        assert!(matches!(read_volume(&p), Err(Error::Geometry(_))));

        let p = dir.path().join("noraw");
        fs::write(VolumePaths::new(&p).header, r#"{"magic":"MVOL1","dims":[1,1,1],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"dtype":"uint8"}"#).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::MissingFile(f)) if f.ends_with("noraw.mvol.raw")));
    }

    #[test]
    fn writes_are_deterministic_and_labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([3, 2, 2], [0.4, 0.4, 0.9], [-1.5, 2.25, 10.0]).unwrap();
        let labels = LabelVolume::new(g, (0..12).map(|i| (i % 8) as u8).collect()).unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        write_labels(&labels, &a).unwrap();
        write_labels(&labels, &b).unwrap();
        let (pa, pb) = (VolumePaths::new(&a), VolumePaths::new(&b));
        assert_eq!(fs::read(&pa.header).unwrap(), fs::read(&pb.header).unwrap());
        assert_eq!(fs::read(&pa.raw).unwrap(), fs::read(&pb.raw).unwrap());
        assert_eq!(read_labels(&a).unwrap(), labels);
    }

    #[test]
    fn path_forms_are_equivalent() {
        let a = VolumePaths::new("x/scan");
        assert_eq!(a, VolumePaths::new("x/scan.mvol.json"));
        assert_eq!(a, VolumePaths::new("x/scan.mvol.raw"));
    }
}
