//! Decoding of probability maps and per-structure largest-component retention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};
use crate::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbour offsets `(dx, dy, dz)` that precede a voxel in scan order.
    fn causal_offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=0 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let before = dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0)));
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let allowed = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan >= 1,
                    };
                    if before && allowed {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Per-voxel component IDs (0 outside the mask, otherwise `1..=n`) and the
/// size of each component (`sizes[id - 1]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMap {
    pub ids: Vec<u32>,
    pub sizes: Vec<usize>,
}

impl ComponentMap {
    pub fn n_components(&self) -> usize {
        self.sizes.len()
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    let mut root = x;
    while parent[root as usize] != root {
        root = parent[root as usize];
    }
    while parent[x as usize] != root {
        let next = parent[x as usize];
        parent[x as usize] = root;
        x = next;
    }
    root
}

/// Two-pass union-find labeling. IDs follow the first-encounter scan order
/// (x fastest).
pub fn connected_components(mask: &[bool], dims: [usize; 3], connectivity: Connectivity) -> ComponentMap {
    let [nx, ny, nz] = dims;
    assert_eq!(mask.len(), nx * ny * nz, "mask length does not match dims");
    let offsets = connectivity.causal_offsets();
    let mut provisional = vec![0u32; mask.len()];
    // parent[0] is unused so provisional labels can start at 1
    let mut parent: Vec<u32> = vec![0];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                if !mask[idx] {
                    continue;
                }
                let mut label = 0u32;
                for &[dx, dy, dz] in &offsets {
                    let (x, y, z) = (i as i64 + dx, j as i64 + dy, k as i64 + dz);
                    if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 {
                        continue;
                    }
                    let n = provisional[x as usize + nx * (y as usize + ny * z as usize)];
                    if n == 0 {
                        continue;
                    }
                    if label == 0 {
                        label = find(&mut parent, n);
                    } else {
                        let (a, b) = (find(&mut parent, label), find(&mut parent, n));
                        if a != b {
                            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                            parent[hi as usize] = lo;
                            label = lo;
                        }
                    }
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                provisional[idx] = label;
            }
        }
    }
    let mut dense = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    let mut ids = vec![0u32; mask.len()];
    for (idx, &p) in provisional.iter().enumerate() {
        if p == 0 {
            continue;
        }
        let root = find(&mut parent, p) as usize;
        if dense[root] == 0 {
            sizes.push(0);
            dense[root] = sizes.len() as u32;
        }
        let id = dense[root];
        ids[idx] = id;
        sizes[id as usize - 1] += 1;
    }
    ComponentMap { ids, sizes }
}

/// Voxelwise argmax over per-class probability volumes; ties go to the
/// lowest class index.
pub fn argmax_labels(probs: &[Volume]) -> Result<LabelVolume> {
    if probs.len() != NUM_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "expected {NUM_CLASSES} probability volumes, got {}",
            probs.len()
        )));
    }
    let g = probs[0].geometry;
    for p in &probs[1..] {
        g.ensure_same(&p.geometry, "probability volumes")?;
    }
    let views: Vec<_> = probs.iter().map(|p| p.as_f32()).collect();
    let data = (0..g.len())
        .map(|i| {
            let mut best = 0usize;
            for c in 1..NUM_CLASSES {
                if views[c][i] > views[best][i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new(g, data)
}

/// For each foreground class independently, keeps only its largest
/// connected component; everything else of that class becomes background.
/// Equal sizes resolve to the component found first in scan order.
pub fn largest_component_filter(labels: &LabelVolume, connectivity: Connectivity) -> LabelVolume {
    let dims = labels.dims();
    let mut out = labels.data().to_vec();
    for class in 1..NUM_CLASSES as u8 {
        let mask = labels.mask(class);
        let cc = connected_components(&mask, dims, connectivity);
        if cc.n_components() <= 1 {
            continue;
        }
        // first maximum wins, i.e. the earliest-encountered component
        let keep = cc
            .sizes
            .iter()
            .enumerate()
            .fold((0usize, 0usize), |best, (i, &s)| if s > best.1 { (i, s) } else { best })
            .0 as u32
            + 1;
        for (v, &id) in out.iter_mut().zip(&cc.ids) {
            if id != 0 && id != keep {
                *v = 0;
            }
        }
    }
    LabelVolume::new(*labels.geometry(), out).expect("filtering keeps labels in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    #[test]
    fn single_voxel_and_full_cube() {
        let mut mask = vec![false; 27];
        mask[13] = true;
        let cc = connected_components(&mask, [3, 3, 3], Connectivity::TwentySix);
        assert_eq!(cc.sizes, vec![1]);
        assert_eq!(cc.ids[13], 1);

        let full = vec![true; 64];
        for conn in [Connectivity::Six, Connectivity::TwentySix] {
            assert_eq!(connected_components(&full, [4, 4, 4], conn).sizes, vec![64]);
        }
    }

    #[test]
    fn corner_contact_depends_on_connectivity() {
        let mut mask = vec![false; 8];
        mask[0] = true; // (0,0,0)
        mask[7] = true; // (1,1,1)
        assert_eq!(connected_components(&mask, [2, 2, 2], Connectivity::Six).n_components(), 2);
        assert_eq!(connected_components(&mask, [2, 2, 2], Connectivity::TwentySix).n_components(), 1);
    }

    #[test]
    fn ids_follow_scan_order() {
        // a U shape whose arms merge on a later row
        let dims = [5, 3, 1];
        #[rustfmt::skip]
        let mask: Vec<bool> = [
            1, 0, 1, 0, 1,
            1, 0, 1, 0, 0,
            1, 1, 1, 0, 0,
        ].iter().map(|&v| v == 1).collect();
        let cc = connected_components(&mask, dims, Connectivity::Six);
        assert_eq!(cc.sizes, vec![7, 1]);
        assert_eq!(cc.ids[0], 1);
        assert_eq!(cc.ids[2], 1);
        assert_eq!(cc.ids[4], 2);
    }

    #[test]
    fn argmax_with_ties() {
        let g = Geometry::cube(1, 1.0);
        let make = |vals: [f32; 8]| -> Vec<Volume> {
            vals.iter().map(|&v| Volume::from_f32(g, vec![v]).unwrap()).collect()
        };
        let l = argmax_labels(&make([0.1, 0.7, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(l.data(), &[1]);
        let l = argmax_labels(&make([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(l.data(), &[3]);
        let l = argmax_labels(&make([0.0, 0.0, 0.5, 0.0, 0.0, 0.5, 0.0, 0.0])).unwrap();
        assert_eq!(l.data(), &[2]);
        assert!(argmax_labels(&make([0.0; 8])[..7]).is_err());
    }

    #[test]
    fn connectivity_serde() {
        assert_eq!(serde_json::to_string(&Connectivity::Six).unwrap(), "6");
        assert_eq!(serde_json::from_str::<Connectivity>("26").unwrap(), Connectivity::TwentySix);
        assert!(serde_json::from_str::<Connectivity>("8").is_err());
    }
}
