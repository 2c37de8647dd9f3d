use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::nn::checkpoint::CheckpointPaths;
use crate::nn::{softmax_channels, softmax_channels_backward, Checkpoint, Mode, Network, NetworkConfig, TrainState};
use crate::NUM_CLASSES;

use super::adam::{adam_step, AdamConfig};
use super::config::{learning_rate, TrainConfig};
use super::ensemble::predict_labels;
use super::loss::soft_dice_loss;
use super::sampler::{sample_batch, Case};

pub const FINAL_CHECKPOINT: &str = "final";
pub const BEST_CHECKPOINT: &str = "best";
pub const LOSS_LOG: &str = "loss.csv";

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    pub log_every: usize,
    pub validate_every: usize,
    /// Checkpoints and the loss log go here when set.
    pub out_dir: Option<PathBuf>,
    /// Continue from a checkpoint holding training state.
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) once this many iterations are complete.
    pub stop_after: Option<usize>,
    /// Called with every logged entry.
    pub progress: Option<fn(&LogEntry)>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { adam: AdamConfig::default(), log_every: 50, validate_every: 500, out_dir: None, resume: None, stop_after: None, progress: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    /// Completed iterations (1-based).
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Network<f32>,
    /// Highest validation Dice; equals `last` without validation cases.
    pub best: Network<f32>,
    pub state: TrainState,
    pub log: Vec<LogEntry>,
}

/// Mean over cases of the mean foreground Dice of argmax predictions.
pub fn validation_dice(net: &Network<f32>, cases: &[&Case]) -> Result<f64> {
    let mut total = 0.0;
    for case in cases {
        let pred = predict_labels(&[net], &case.image)?;
        let mut s = 0.0;
        for class in 1..NUM_CLASSES as u8 {
            s += dice(&pred.mask(class), &case.labels.mask(class))?;
        }
        total += s / (NUM_CLASSES - 1) as f64;
    }
    Ok(total / cases.len() as f64)
}

fn write_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut text = String::from("iteration,lr,loss,val_dice\n");
    for e in log {
        let val = e.val_dice.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(text, "{},{},{},{}", e.iteration, e.lr, e.loss, val);
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads back a log written by this module.
pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: &str| Error::InvalidArgument(format!("{}: malformed log line {line:?}", path.display()));
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(line));
        }
        out.push(LogEntry {
            iteration: f[0].parse().map_err(|_| bad(line))?,
            lr: f[1].parse().map_err(|_| bad(line))?,
            loss: f[2].parse().map_err(|_| bad(line))?,
            val_dice: if f[3].is_empty() { None } else { Some(f[3].parse().map_err(|_| bad(line))?) },
        });
    }
    Ok(out)
}

/// Soft-Dice training with Adam and the step schedule. Batches for iteration
/// `i` come from ChaCha stream `i + 1` of `cfg.seed` (stream 0 initializes
/// the network), so a resumed run replays the same batches.
pub fn train_model(
    train: &[&Case],
    val: &[&Case],
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training cases".into()));
    }
    if net_cfg.n_classes != NUM_CLASSES {
        return Err(Error::InvalidArgument(format!("network must predict {NUM_CLASSES} classes")));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (mut net, mut state, mut best, mut log) = match &opts.resume {
        None => {
            let net = Network::<f32>::init(net_cfg, cfg.seed)?;
            let state = TrainState { iteration: 0, adam_step: 0, best_val_dice: None, best_iteration: None };
            (net.clone(), state, net, Vec::new())
        }
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let state = ck
                .state
                .ok_or_else(|| Error::Checkpoint(format!("{} holds no training state", path.display())))?;
            if ck.network.config() != net_cfg {
                return Err(Error::Checkpoint("resumed network config differs from the requested one".into()));
            }
            let dir = opts.out_dir.clone().unwrap_or_default();
            let best_path = dir.join(BEST_CHECKPOINT);
            let best = if state.best_iteration.is_some() && CheckpointPaths::new(&best_path).manifest.exists() {
                Checkpoint::load(&best_path)?.network
            } else {
                ck.network.clone()
            };
            let log_path = dir.join(LOSS_LOG);
            let log = if log_path.exists() {
                let mut l = read_log(&log_path)?;
                l.retain(|e| e.iteration <= state.iteration);
                l
            } else {
                Vec::new()
            };
            (ck.network, state, best, log)
        }
    };

    let end = opts.stop_after.map_or(cfg.iterations, |s| s.min(cfg.iterations));
    let slab_depth = net_cfg.in_channels;
    while state.iteration < end {
        let it = state.iteration;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(it as u64 + 1);
        let (x, target) = sample_batch(train, cfg.batch_size, slab_depth, &mut rng)?;

        net.zero_grad();
        let logits = net.forward(&x, Mode::Train)?;
        let probs = softmax_channels(&logits);
        let (loss, grad_probs) = soft_dice_loss(&probs, &target, cfg.dice_eps)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it + 1, loss });
        }
        net.backward(&softmax_channels_backward(&probs, &grad_probs)?)?;

        let lr = learning_rate(it, cfg);
        state.adam_step += 1;
        for (_, p) in net.params_mut() {
            adam_step(&mut p.value, &p.grad, &mut p.moments, lr, &opts.adam, state.adam_step)?;
        }
        state.iteration += 1;
        let done = state.iteration;

        let last = done == cfg.iterations;
        let val_dice = if !val.is_empty() && (done % opts.validate_every == 0 || last) {
            let d = validation_dice(&net, val)?;
            if state.best_val_dice.is_none_or(|b| d > b) {
                state.best_val_dice = Some(d);
                state.best_iteration = Some(done);
                best = net.clone();
                if let Some(dir) = &opts.out_dir {
                    Checkpoint::new(best.clone(), Some(state.clone())).save(dir.join(BEST_CHECKPOINT))?;
                }
            }
            Some(d)
        } else {
            None
        };
        if done == 1 || done % opts.log_every == 0 || last || val_dice.is_some() {
            let entry = LogEntry { iteration: done, lr, loss, val_dice };
            if let Some(f) = opts.progress {
                f(&entry);
            }
            log.push(entry);
        }
    }

    if val.is_empty() {
        best = net.clone();
    }
    if let Some(dir) = &opts.out_dir {
        Checkpoint::new(net.clone(), Some(state.clone())).save(dir.join(FINAL_CHECKPOINT))?;
        if val.is_empty() {
            Checkpoint::new(best.clone(), Some(state.clone())).save(dir.join(BEST_CHECKPOINT))?;
        }
        write_log(&dir.join(LOSS_LOG), &log)?;
    }
    Ok(TrainOutcome { last: net, best, state, log })
}
