use crate::error::{Error, Result};
use crate::nn::{softmax_channels, Network, Tensor};
use crate::postprocess::argmax_labels;
use crate::preprocess::extract_slab;
use crate::volume::{LabelVolume, Volume};

/// Slices per inference batch.
const CHUNK: usize = 8;

/// Copies a `(1, C, h, w)` slab into the top-left of a `(C, hp, wp)` buffer,
/// replicating the last row and column into the padding.
fn pad_edge(slab: &Tensor<f32>, hp: usize, wp: usize, out: &mut [f32]) {
    let [_, c, h, w] = slab.shape();
    for ch in 0..c {
        for y in 0..hp {
            let sy = y.min(h - 1);
            for x in 0..wp {
                out[(ch * hp + y) * wp + x] = slab.at(0, ch, sy, x.min(w - 1));
            }
        }
    }
}

/// Per-class probability volumes (float32, same geometry as `volume`): each
/// axial slice runs through every model in eval mode, softmax outputs are
/// averaged arithmetically over models.
pub fn ensemble_predict(models: &[&Network<f32>], volume: &Volume) -> Result<Vec<Volume>> {
    let first = models.first().ok_or_else(|| Error::InvalidArgument("ensemble needs at least one model".into()))?;
    let cfg = first.config();
    for m in &models[1..] {
        let c = m.config();
        if c.n_classes != cfg.n_classes || c.in_channels != cfg.in_channels {
            return Err(Error::InvalidArgument(format!(
                "ensemble members disagree: {} classes / {} channels vs {} / {}",
                c.n_classes, c.in_channels, cfg.n_classes, cfg.in_channels
            )));
        }
    }
    let [nx, ny, nz] = volume.dims();
    let factor = models.iter().map(|m| m.config().spatial_factor()).max().unwrap_or(1);
    if nx < factor || ny < factor {
        return Err(Error::Shape(format!("slice {nx}x{ny} is smaller than the network stride {factor}")));
    }
    let (wp, hp) = (nx.div_ceil(factor) * factor, ny.div_ceil(factor) * factor);
    let (n_classes, depth) = (cfg.n_classes, cfg.in_channels);
    let plane = nx * ny;
    let mut acc = vec![vec![0f64; volume.geometry.len()]; n_classes];
    for z0 in (0..nz).step_by(CHUNK) {
        let zs: Vec<usize> = (z0..(z0 + CHUNK).min(nz)).collect();
        let item = depth * hp * wp;
        let mut data = vec![0f32; zs.len() * item];
        for (b, &z) in zs.iter().enumerate() {
            pad_edge(&extract_slab(volume, z, depth)?, hp, wp, &mut data[b * item..(b + 1) * item]);
        }
        let x = Tensor::from_vec([zs.len(), depth, hp, wp], data)?;
        for m in models {
            let probs = softmax_channels(&m.infer(&x)?);
            for (b, &z) in zs.iter().enumerate() {
                for (c, acc_c) in acc.iter_mut().enumerate() {
                    for y in 0..ny {
                        for xx in 0..nx {
                            acc_c[z * plane + y * nx + xx] += probs.at(b, c, y, xx) as f64;
                        }
                    }
                }
            }
        }
    }
    let n = models.len() as f64;
    acc.into_iter()
        .map(|a| Volume::from_f32(volume.geometry, a.into_iter().map(|v| (v / n) as f32).collect()))
        .collect()
}

/// Ensemble probabilities decoded by argmax.
pub fn predict_labels(models: &[&Network<f32>], volume: &Volume) -> Result<LabelVolume> {
    argmax_labels(&ensemble_predict(models, volume)?)
}
