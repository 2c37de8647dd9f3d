//! Overlap, surface-distance and volume measurements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelVolume};
use crate::{CLASS_NAMES, NUM_CLASSES, REPORT_ORDER};

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::GeometryMismatch(format!("mask sizes {} vs {}", a.len(), b.len())));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

fn surface_mask(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let at = |i: i64, j: i64, k: i64| {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < nx
            && (j as usize) < ny
            && (k as usize) < nz
            && mask[i as usize + nx * (j as usize + ny * k as usize)]
    };
    let mut out = vec![false; mask.len()];
    for k in 0..nz as i64 {
        for j in 0..ny as i64 {
            for i in 0..nx as i64 {
                if !at(i, j, k) {
                    continue;
                }
                let exposed = !at(i - 1, j, k)
                    || !at(i + 1, j, k)
                    || !at(i, j - 1, k)
                    || !at(i, j + 1, k)
                    || !at(i, j, k - 1)
                    || !at(i, j, k + 1);
                out[i as usize + nx * (j as usize + ny * k as usize)] = exposed;
            }
        }
    }
    out
}

/// Foreground voxels with at least one face neighbour in the background;
/// voxels outside the grid count as background. Scan order.
pub fn extract_surface(mask: &[bool], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let g = Geometry { dims, spacing_mm: [1.0; 3], origin_mm: [0.0; 3] };
    surface_mask(mask, dims)
        .iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .map(|(i, _)| g.coords(i))
        .collect()
}

/// 1D lower envelope of parabolas `w (q - p)² + f(p)`; infinite entries are
/// not feature points.
fn edt_line(f: &[f64], w: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let fq = f[q] + w * (q * q) as f64;
        let mut s;
        loop {
            if k < 0 {
                s = f64::NEG_INFINITY;
                break;
            }
            let p = v[k as usize];
            s = (fq - (f[p] + w * (p * p) as f64)) / (2.0 * w * (q - p) as f64);
            if s <= z[k as usize] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k as usize] = q;
        z[k as usize] = s;
        z[k as usize + 1] = f64::INFINITY;
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = w * d * d + f[v[j]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel center to the
/// nearest feature voxel, by separable lower envelopes.
pub fn squared_distance_transform(features: &[bool], dims: [usize; 3], spacing_mm: [f64; 3]) -> Vec<f64> {
    let [nx, ny, _] = dims;
    let mut field: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let strides = [1, nx, nx * ny];
    let longest = *dims.iter().max().unwrap();
    let (mut line, mut out) = (vec![0f64; longest], vec![0f64; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0f64; longest + 1]);
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let w = spacing_mm[axis] * spacing_mm[axis];
        for start in 0..field.len() {
            if (start / stride) % n != 0 {
                continue;
            }
            for t in 0..n {
                line[t] = field[start + t * stride];
            }
            edt_line(&line[..n], w, &mut out[..n], &mut v[..n], &mut z[..n + 1]);
            for t in 0..n {
                field[start + t * stride] = out[t];
            }
        }
    }
    field
}

/// Average symmetric surface distance in mm between voxel-center surfaces.
/// `None` when either mask is empty.
pub fn assd(a: &[bool], b: &[bool], dims: [usize; 3], spacing_mm: [f64; 3]) -> Result<Option<f64>> {
    let n: usize = dims.iter().product();
    if a.len() != n || b.len() != n {
        return Err(Error::GeometryMismatch(format!(
            "mask sizes {} / {} vs dims {dims:?}",
            a.len(),
            b.len()
        )));
    }
    let (sa, sb) = (surface_mask(a, dims), surface_mask(b, dims));
    let (na, nb) = (sa.iter().filter(|&&s| s).count(), sb.iter().filter(|&&s| s).count());
    if na == 0 || nb == 0 {
        return Ok(None);
    }
    let (da, db) =
        (squared_distance_transform(&sa, dims, spacing_mm), squared_distance_transform(&sb, dims, spacing_mm));
    let sum_ab: f64 = sa.iter().zip(&db).filter(|(&s, _)| s).map(|(_, &d)| d.sqrt()).sum();
    let sum_ba: f64 = sb.iter().zip(&da).filter(|(&s, _)| s).map(|(_, &d)| d.sqrt()).sum();
    Ok(Some((sum_ab + sum_ba) / (na + nb) as f64))
}

/// Per-class volume in mL: `count * sx * sy * sz / 1000`.
pub fn structure_volumes(labels: &LabelVolume) -> [f64; NUM_CLASSES] {
    let voxel = labels.geometry().voxel_volume_mm3();
    labels.histogram().map(|count| count as f64 * voxel / 1000.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u8,
    pub name: String,
    pub dsc: f64,
    /// `None` encodes the undefined marker (an empty mask).
    pub assd_mm: Option<f64>,
    pub volume_pred_ml: f64,
    pub volume_ref_ml: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub id: String,
    pub classes: Vec<ClassMetrics>,
}

impl CaseReport {
    pub fn mean_dsc(&self) -> f64 {
        self.classes.iter().map(|c| c.dsc).sum::<f64>() / self.classes.len() as f64
    }

    /// Mean over defined ASSD values.
    pub fn mean_assd(&self) -> Option<f64> {
        let vals: Vec<f64> = self.classes.iter().filter_map(|c| c.assd_mm).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Dice, ASSD and volumes for the seven foreground classes.
pub fn evaluate_case(id: &str, pred: &LabelVolume, reference: &LabelVolume) -> Result<CaseReport> {
    pred.geometry().ensure_same(reference.geometry(), "prediction vs reference")?;
    let g = reference.geometry();
    let (vp, vr) = (structure_volumes(pred), structure_volumes(reference));
    let mut classes = Vec::with_capacity(NUM_CLASSES - 1);
    for class in 1..NUM_CLASSES as u8 {
        let (a, b) = (pred.mask(class), reference.mask(class));
        classes.push(ClassMetrics {
            class_id: class,
            name: CLASS_NAMES[class as usize].to_string(),
            dsc: dice(&a, &b)?,
            assd_mm: assd(&a, &b, g.dims, g.spacing_mm)?,
            volume_pred_ml: vp[class as usize],
            volume_ref_ml: vr[class as usize],
        });
    }
    Ok(CaseReport { id: id.to_string(), classes })
}

/// Mean and sample standard deviation of the defined values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: Option<f64>,
    /// 0 when `n == 1` (flagged by `sd_defined == false`).
    pub sd: Option<f64>,
    pub sd_defined: bool,
}

impl Summary {
    /// Order-independent: values are sorted before accumulation.
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        if n == 0 {
            return Self { n, mean: None, sd: None, sd_defined: false };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Self { n, mean: Some(mean), sd: Some(0.0), sd_defined: false };
        }
        let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
        Self { n, mean: Some(mean), sd: Some((ss / (n - 1) as f64).sqrt()), sd_defined: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class_id: u8,
    pub name: String,
    pub dsc: Summary,
    pub assd_mm: Summary,
    /// Cases whose ASSD was undefined and excluded from `assd_mm`.
    pub assd_undefined: usize,
    pub volume_pred_ml: Summary,
    pub volume_ref_ml: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_cases: usize,
    pub classes: Vec<ClassSummary>,
    /// Mean DSC over foreground classes and cases.
    pub mean_dsc: f64,
    /// Mean of the defined ASSD values over foreground classes and cases.
    pub mean_assd_mm: Option<f64>,
}

pub fn aggregate_report(cases: &[CaseReport]) -> Result<EvaluationReport> {
    let first = cases.first().ok_or_else(|| Error::InvalidArgument("aggregate of zero cases".into()))?;
    let mut classes = Vec::new();
    let (mut all_dsc, mut all_assd) = (Vec::new(), Vec::new());
    for (slot, c) in first.classes.iter().enumerate() {
        let pick = |f: &dyn Fn(&ClassMetrics) -> Option<f64>| -> Result<Vec<f64>> {
            let mut out = Vec::new();
            for case in cases {
                let m = case.classes.get(slot).filter(|m| m.class_id == c.class_id).ok_or_else(|| {
                    Error::InvalidArgument(format!("case {} lacks class {}", case.id, c.class_id))
                })?;
                out.extend(f(m));
            }
            Ok(out)
        };
        let dsc = pick(&|m| Some(m.dsc))?;
        let assd = pick(&|m| m.assd_mm)?;
        all_dsc.extend(&dsc);
        all_assd.extend(&assd);
        classes.push(ClassSummary {
            class_id: c.class_id,
            name: c.name.clone(),
            dsc: Summary::of(&dsc),
            assd_undefined: cases.len() - assd.len(),
            assd_mm: Summary::of(&assd),
            volume_pred_ml: Summary::of(&pick(&|m| Some(m.volume_pred_ml))?),
            volume_ref_ml: Summary::of(&pick(&|m| Some(m.volume_ref_ml))?),
        });
    }
    Ok(EvaluationReport {
        n_cases: cases.len(),
        classes,
        mean_dsc: Summary::of(&all_dsc).mean.unwrap_or(0.0),
        mean_assd_mm: Summary::of(&all_assd).mean,
    })
}

impl EvaluationReport {
    /// Plain-text table with classes as columns (LV-C, LV-M, RV, LA, RA,
    /// AA, PA) and rows DSC and ASSD (mm), each `mean ± SD`.
    pub fn to_table(&self) -> String {
        let cell = |s: &Summary| match (s.mean, s.sd) {
            (Some(m), Some(sd)) => format!("{m:.2} ± {sd:.2}"),
            _ => "n/a".to_string(),
        };
        let ordered: Vec<&ClassSummary> = REPORT_ORDER
            .iter()
            .filter_map(|&id| self.classes.iter().find(|c| c.class_id == id))
            .collect();
        let mut rows = vec![std::iter::once(String::new()).chain(ordered.iter().map(|c| c.name.clone())).collect::<Vec<_>>()];
        rows.push(std::iter::once("DSC".to_string()).chain(ordered.iter().map(|c| cell(&c.dsc))).collect());
        rows.push(std::iter::once("ASSD".to_string()).chain(ordered.iter().map(|c| cell(&c.assd_mm))).collect());
        let ncol = rows[0].len();
        let widths: Vec<usize> =
            (0..ncol).map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}
