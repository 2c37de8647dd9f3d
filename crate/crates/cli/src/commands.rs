use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use vncseg_core::io::{read_labels, read_volume, write_labels};
use vncseg_core::metrics::{aggregate_report, evaluate_case, structure_volumes, CaseReport, EvaluationReport};
use vncseg_core::nn::checkpoint::MANIFEST_SUFFIX;
use vncseg_core::nn::{Checkpoint, Network};
use vncseg_core::phantom::{generate_dataset, PhantomSpec};
use vncseg_core::postprocess::{largest_component_filter, Connectivity};
use vncseg_core::preprocess::{resample_labels_to, PreprocessConfig};
use vncseg_core::training::{predict_labels, split_train_val, train_model, LogEntry, TrainOptions};
use vncseg_core::{Geometry, LabelVolume, Volume, CLASS_NAMES, NUM_CLASSES};

use crate::config::Overrides;
use crate::data::{load_dataset, preprocess_dataset};
use crate::overlay::write_overlays;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn print_progress(e: &LogEntry) {
    match e.val_dice {
        Some(v) => eprintln!("iter {:>6}  lr {:.3e}  loss {:.5}  val_dice {:.4}", e.iteration, e.lr, e.loss, v),
        None => eprintln!("iter {:>6}  lr {:.3e}  loss {:.5}", e.iteration, e.lr, e.loss),
    }
}

#[derive(Debug, Clone, Args)]
pub struct PhantomGenArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Seed of the first phantom; phantom i uses seed + i
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 18)]
    pub count: usize,
    /// Cube edge in voxels
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0.8)]
    pub spacing: f64,
    #[arg(long, default_value_t = 20.0)]
    pub noise_sd: f64,
}

pub fn phantom_gen(a: &PhantomGenArgs) -> Result<()> {
    let spec = PhantomSpec { size: a.size, spacing_mm: a.spacing, noise_sd_hu: a.noise_sd, ..Default::default() };
    let manifest = generate_dataset(a.count, &a.out, a.seed, &spec)?;
    println!("wrote {} phantoms to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

pub fn preprocess(o: &Overrides) -> Result<()> {
    let cfg = o.resolve()?;
    let (data, out) = (cfg.data_dir()?, cfg.out_dir()?);
    let manifest = preprocess_dataset(data, out, &cfg.preprocess)?;
    cfg.save(out)?;
    println!("preprocessed {} cases into {}", manifest.entries.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed iterations
    #[arg(long, value_name = "N")]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Split<'a> {
    train: &'a [String],
    val: &'a [String],
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    let (data, out) = (cfg.data_dir()?, cfg.out_dir()?);
    let (manifest, cases) = load_dataset(data, &cfg.preprocess)?;
    let (train_ids, val_ids) = split_train_val(&manifest.ids(), cfg.train.seed, cfg.train.val_fraction)?;
    cfg.save(out)?;
    write_json(&out.join("split.json"), &Split { train: &train_ids, val: &val_ids })?;
    let pick = |ids: &[String]| -> Vec<_> {
        ids.iter().filter_map(|id| cases.iter().find(|c| &c.case.id == id).map(|c| &c.case)).collect()
    };
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        resume: a.resume.clone(),
        stop_after: a.stop_after,
        progress: Some(print_progress),
        ..Default::default()
    };
    let outcome = train_model(&pick(&train_ids), &pick(&val_ids), &cfg.train, &cfg.network, &opts)?;
    println!(
        "trained {} iterations; best val dice {}",
        outcome.state.iteration,
        outcome.state.best_val_dice.map_or("n/a".to_string(), |d| format!("{d:.4}"))
    );
    Ok(())
}

/// Every `*.ckpt.json` directly inside `dir`, sorted by file name.
pub fn find_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading model directory {}", dir.display()))? {
        let path = entry?.path();
        if path.to_string_lossy().ends_with(MANIFEST_SUFFIX) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        bail!("no checkpoints in {}", dir.display());
    }
    Ok(out)
}

pub fn load_models(dir: &Path) -> Result<Vec<Network<f32>>> {
    find_checkpoints(dir)?
        .iter()
        .map(|p| Ok(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?.network))
        .collect()
}

/// Ensemble argmax and largest-component filtering of a preprocessed image.
pub fn segment_preprocessed(models: &[Network<f32>], image: &Volume, connectivity: Connectivity) -> Result<LabelVolume> {
    let refs: Vec<&Network<f32>> = models.iter().collect();
    Ok(largest_component_filter(&predict_labels(&refs, image)?, connectivity))
}

/// Preprocesses `image`, segments it and optionally resamples the labels
/// back onto `image`'s grid.
pub fn segment(
    models: &[Network<f32>],
    image: &Volume,
    pre: &PreprocessConfig,
    connectivity: Connectivity,
    resample_back: bool,
) -> Result<LabelVolume> {
    let labels = segment_preprocessed(models, &pre.apply_image(image)?, connectivity)?;
    Ok(if resample_back { resample_labels_to(&labels, &image.geometry)? } else { labels })
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// Directory of checkpoints; all of them form the ensemble
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Output prefix for the label volume and the volumes report
    #[arg(long, value_name = "PREFIX")]
    pub out: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "X")]
    pub sigma_mm: Option<f64>,
    #[arg(long, value_name = "X")]
    pub spacing: Option<f64>,
    #[arg(long, value_parser = ["6", "26"])]
    pub connectivity: Option<String>,
    /// Keep the prediction on the resampled grid
    #[arg(long)]
    pub no_resample_back: bool,
}

#[derive(Debug, Serialize)]
pub struct StructureVolume {
    pub class_id: u8,
    pub name: &'static str,
    pub volume_ml: f64,
}

#[derive(Debug, Serialize)]
pub struct VolumesReport {
    pub input: String,
    pub geometry: Geometry,
    pub structures: Vec<StructureVolume>,
}

pub fn volumes_report(input: &Path, labels: &LabelVolume) -> VolumesReport {
    let v = structure_volumes(labels);
    VolumesReport {
        input: input.display().to_string(),
        geometry: *labels.geometry(),
        structures: (1..NUM_CLASSES)
            .map(|c| StructureVolume { class_id: c as u8, name: CLASS_NAMES[c], volume_ml: v[c] })
            .collect(),
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", prefix.display()))
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let cfg = Overrides {
        config: a.config.clone(),
        sigma_mm: a.sigma_mm,
        spacing: a.spacing,
        connectivity: a.connectivity.clone(),
        ..Default::default()
    }
    .resolve()?;
    let models = load_models(&a.model)?;
    let image = read_volume(&a.input)?;
    let labels = segment(&models, &image, &cfg.preprocess, cfg.connectivity, !a.no_resample_back)?;
    write_labels(&labels, &a.out)?;
    write_json(&with_suffix(&a.out, ".volumes.json"), &volumes_report(&a.input, &labels))?;
    println!("segmented {} with {} model(s) into {}", a.input.display(), models.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "PATH")]
    pub pred: PathBuf,
    #[arg(long = "ref", value_name = "PATH")]
    pub reference: PathBuf,
    /// Report JSON; the text table goes next to it with a .txt extension
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct EvaluationOutput<'a> {
    pub cases: &'a [CaseReport],
    pub summary: &'a EvaluationReport,
}

pub fn write_report(json: &Path, cases: &[CaseReport]) -> Result<EvaluationReport> {
    let summary = aggregate_report(cases)?;
    write_json(json, &EvaluationOutput { cases, summary: &summary })?;
    let table = json.with_extension("txt");
    fs::write(&table, summary.to_table()).with_context(|| format!("writing {}", table.display()))?;
    Ok(summary)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let (pred, reference) = (read_labels(&a.pred)?, read_labels(&a.reference)?);
    let id = a.pred.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let case = evaluate_case(&id, &pred, &reference)?;
    let summary = write_report(&a.out, &[case])?;
    print!("{}", summary.to_table());
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub labels: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Lower bound of the grayscale window in HU
    #[arg(long, default_value_t = -400.0, allow_negative_numbers = true)]
    pub window_lo: f64,
    /// Upper bound of the grayscale window in HU
    #[arg(long, default_value_t = 600.0, allow_negative_numbers = true)]
    pub window_hi: f64,
}

pub fn report(a: &ReportArgs) -> Result<()> {
    if !(a.window_lo < a.window_hi) {
        bail!("window lo {} must be below hi {}", a.window_lo, a.window_hi);
    }
    let (image, labels) = (read_volume(&a.image)?, read_labels(&a.labels)?);
    let files = write_overlays(&image, &labels, &a.out, a.window_lo, a.window_hi)?;
    println!("wrote {} overlays to {}", files.len(), a.out.display());
    Ok(())
}
