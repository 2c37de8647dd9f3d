use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use vncseg_core::io::write_labels;
use vncseg_core::metrics::{aggregate_report, evaluate_case, CaseReport};
use vncseg_core::nn::checkpoint::CheckpointPaths;
use vncseg_core::nn::Checkpoint;
use vncseg_core::preprocess::resample_labels_to;
use vncseg_core::training::trainer::{BEST_CHECKPOINT, FINAL_CHECKPOINT};
use vncseg_core::training::{make_folds, train_model, TrainConfig, TrainOptions};

use crate::commands::{print_progress, segment_preprocessed, write_json, write_report, EvaluationOutput};
use crate::config::{ExperimentConfig, Overrides};
use crate::data::{load_dataset, LoadedCase};

#[derive(Debug, Serialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub test: Vec<String>,
    pub best_iteration: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub mean_dsc: f64,
    pub mean_assd_mm: Option<f64>,
}

/// A finished fold left by an earlier invocation with the same settings.
fn finished(dir: &Path, cfg: &TrainConfig) -> Result<Option<Checkpoint>> {
    let (last, best) = (dir.join(FINAL_CHECKPOINT), dir.join(BEST_CHECKPOINT));
    if !CheckpointPaths::new(&last).manifest.exists() || !CheckpointPaths::new(&best).manifest.exists() {
        return Ok(None);
    }
    let done = Checkpoint::load(&last)?.state.is_some_and(|s| s.iteration == cfg.iterations);
    Ok(if done { Some(Checkpoint::load(&best)?) } else { None })
}

fn run_fold(k: usize, cfg: &ExperimentConfig, cases: &[LoadedCase], test: &[String], train: &[String], val: &[String], out: &Path) -> Result<(Vec<CaseReport>, FoldSummary)> {
    let dir = out.join(format!("fold_{k}"));
    let find = |id: &String| cases.iter().find(|c| &c.case.id == id).expect("fold ids come from the dataset");
    let train_cfg = TrainConfig { seed: cfg.train.seed + k as u64, ..cfg.train.clone() };
    let best = match finished(&dir, &train_cfg)? {
        Some(ck) => {
            eprintln!("fold {k}: reusing finished run in {}", dir.display());
            ck
        }
        None => {
            eprintln!("fold {k}: training on {} cases, validating on {}", train.len(), val.len());
            let opts = TrainOptions { out_dir: Some(dir.clone()), progress: Some(print_progress), ..Default::default() };
            let tr: Vec<_> = train.iter().map(|id| &find(id).case).collect();
            let va: Vec<_> = val.iter().map(|id| &find(id).case).collect();
            train_model(&tr, &va, &train_cfg, &cfg.network, &opts)?;
            Checkpoint::load(dir.join(BEST_CHECKPOINT))?
        }
    };
    best.save(out.join("models").join(format!("fold_{k}")))?;

    let models = [best.network];
    let mut reports = Vec::new();
    for id in test {
        let c = find(id);
        let labels = segment_preprocessed(&models, &c.case.image, cfg.connectivity)?;
        let (pred, reference) = if cfg.native_space_eval {
            (resample_labels_to(&labels, c.native_labels.geometry())?, &c.native_labels)
        } else {
            (labels, &c.case.labels)
        };
        write_labels(&pred, dir.join("predictions").join(format!("{id}_labels")))?;
        reports.push(evaluate_case(id, &pred, reference)?);
    }
    let summary = write_report(&dir.join("report.json"), &reports)?;
    let state = best.state.unwrap_or_else(|| unreachable!("trainer checkpoints carry state"));
    let fold = FoldSummary {
        fold: k,
        test: test.to_vec(),
        best_iteration: state.best_iteration,
        best_val_dice: state.best_val_dice,
        mean_dsc: summary.mean_dsc,
        mean_assd_mm: summary.mean_assd_mm,
    };
    eprintln!("fold {k}: test dice {:.4}, assd {:?}", fold.mean_dsc, fold.mean_assd_mm);
    Ok((reports, fold))
}

#[derive(Debug, Serialize)]
struct CrossvalReport<'a> {
    #[serde(flatten)]
    evaluation: EvaluationOutput<'a>,
    folds: &'a [FoldSummary],
}

pub fn crossval(o: &Overrides) -> Result<()> {
    let cfg = o.resolve()?;
    let (data, out) = (cfg.data_dir()?, cfg.out_dir()?);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (manifest, cases) = load_dataset(data, &cfg.preprocess)?;
    let plan = make_folds(&manifest.ids(), cfg.train.n_folds, cfg.train.seed, cfg.train.val_fraction)?;
    cfg.save(out)?;
    write_json(&out.join("folds.json"), &plan)?;

    let mut all = Vec::new();
    let mut folds = Vec::new();
    for (k, f) in plan.folds.iter().enumerate() {
        let (reports, summary) = run_fold(k, &cfg, &cases, &f.test, &f.train, &f.val, out)?;
        all.extend(reports);
        folds.push(summary);
    }
    let summary = aggregate_report(&all)?;
    write_json(&out.join("report.json"), &CrossvalReport { evaluation: EvaluationOutput { cases: &all, summary: &summary }, folds: &folds })?;
    fs::write(out.join("report.txt"), summary.to_table()).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", summary.to_table());
    println!(
        "mean dice {:.4}; mean assd {} mm over {} held-out cases",
        summary.mean_dsc,
        summary.mean_assd_mm.map_or("n/a".into(), |v| format!("{v:.3}")),
        summary.n_cases
    );
    Ok(())
}
