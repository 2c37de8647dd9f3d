use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use vncseg_core::io::{read_labels, read_volume, write_labels, write_volume};
use vncseg_core::phantom::{load_vnc_pair, DatasetManifest};
use vncseg_core::preprocess::PreprocessConfig;
use vncseg_core::training::Case;
use vncseg_core::LabelVolume;

/// A training/evaluation case plus its labels on the original grid.
#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub case: Case,
    pub native_labels: LabelVolume,
}

/// Reads every VNC image and label map listed in `dir/manifest.json`,
/// preprocessing them unless the manifest says that already happened.
pub fn load_dataset(dir: &Path, pre: &PreprocessConfig) -> Result<(DatasetManifest, Vec<LoadedCase>)> {
    let manifest = DatasetManifest::read(dir)?;
    let cases = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let (vnc, labels) = load_vnc_pair(dir, entry)?;
            let (image, train_labels) = if manifest.preprocessed {
                (vnc.clone(), labels.clone())
            } else {
                (pre.apply_image(&vnc)?, pre.apply_labels(&labels)?)
            };
            let case = Case::new(entry.id.clone(), image, train_labels)?;
            Ok(LoadedCase { case, native_labels: labels })
        })
        .collect::<vncseg_core::Result<Vec<_>>>()
        .with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok((manifest, cases))
}

/// Preprocesses both image domains and the labels of every entry into
/// `out`, which receives a manifest flagged as preprocessed.
pub fn preprocess_dataset(data: &Path, out: &Path, pre: &PreprocessConfig) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::read(data)?;
    if manifest.preprocessed {
        anyhow::bail!("{} is already preprocessed", data.display());
    }
    manifest
        .entries
        .par_iter()
        .try_for_each(|e| -> vncseg_core::Result<()> {
            for p in [&e.ccta_path, &e.vnc_path] {
                write_volume(&pre.apply_image(&read_volume(data.join(p))?)?, out.join(p))?;
            }
            write_labels(&pre.apply_labels(&read_labels(data.join(&e.labels_path))?)?, out.join(&e.labels_path))
        })?;
    manifest.preprocessed = true;
    manifest.write(out)?;
    Ok(manifest)
}
