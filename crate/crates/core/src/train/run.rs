use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use densup_tensor::{read_checkpoint, write_checkpoint, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::optim::{clip_grad_norm, learning_rate, AdamW};
use super::step::{batch_loss, non_finite};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::eval::{evaluate_ap, EvalResult, GroundTruth, MAX_DETECTIONS};
use crate::losses::LossReport;
use crate::model::{Detector, InferenceDetector, AUX_PREFIX};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "run.json";
pub const LOSSES_FILE: &str = "losses.csv";
pub const AP_FILE: &str = "ap.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub eval: EvalResult,
    pub mean_total_loss: f64,
    pub wall_clock_secs: f64,
}

/// Recorded history of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub config: RunConfig,
    pub steps_per_epoch: usize,
    pub history: Vec<LossReport>,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainingRun {
    pub fn final_ap(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.eval.mean_ap)
    }

    /// `(epoch, AP)` of the best evaluation (earliest on ties).
    pub fn best(&self) -> Option<(usize, f64)> {
        self.epochs
            .iter()
            .fold(None, |acc: Option<(usize, f64)>, e| match acc {
                Some((_, ap)) if ap >= e.eval.mean_ap => acc,
                _ => Some((e.epoch, e.eval.mean_ap)),
            })
    }

    /// First epoch (1-based) whose AP reaches `threshold`.
    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        self.epochs.iter().find(|e| e.eval.mean_ap >= threshold).map(|e| e.epoch)
    }

    pub fn ap_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.eval.mean_ap).collect()
    }
}

/// Evaluates a stripped model on scenes.
pub fn evaluate_model(model: &InferenceDetector, scenes: &[Scene]) -> Result<EvalResult> {
    let mut preds = Vec::with_capacity(scenes.len());
    for s in scenes {
        preds.push(model.predict(&s.image, MAX_DETECTIONS)?);
    }
    let truth: Vec<GroundTruth> = scenes
        .iter()
        .map(|s| GroundTruth {
            boxes: s.boxes.clone(),
            labels: s.labels.clone(),
        })
        .collect();
    Ok(evaluate_ap(&preds, &truth, model.config().n_classes))
}

/// Trains a model from scratch. Progress is logged at info level.
pub fn train(cfg: &RunConfig) -> Result<(TrainingRun, Detector)> {
    cfg.validate()?;
    let train_set = cfg.train_data.load()?;
    let eval_set = cfg.eval_data.load()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut model = Detector::new(cfg.model, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer, model.params().tensors());
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup = (cfg.optimizer.warmup_fraction * total_steps as f64).round() as usize;
    let mut run = TrainingRun {
        config: cfg.clone(),
        steps_per_epoch,
        history: Vec::with_capacity(total_steps),
        epochs: Vec::with_capacity(cfg.epochs),
        checkpoint: None,
    };
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_da7a);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut tape = Tape::new();
            let params = model.params().bind(&mut tape)?;
            let total = batch_loss(&mut tape, &model, &params, cfg, &batch, step as u64, epoch)
                .map_err(|e| non_finite(step, e))?;
            if !total.report.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    report: serde_json::to_string(&total.report).unwrap_or_default(),
                });
            }
            tape.backward(total.total).map_err(|e| non_finite(step, e.into()))?;
            let mut grads = params
                .iter()
                .map(|&v| tape.grad(v))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    report: format!("non-finite gradient; {}", serde_json::to_string(&total.report).unwrap_or_default()),
                });
            }
            clip_grad_norm(&mut grads, cfg.optimizer.grad_clip);
            let lr = learning_rate(cfg.optimizer.lr, step, warmup);
            opt.step(model.params_mut().tensors_mut(), &grads, lr);
            loss_sum += total.report.total;
            run.history.push(total.report);
            step += 1;
        }
        let eval = evaluate_model(&model.strip_training_branches(), &eval_set)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_total_loss: loss_sum / steps_per_epoch as f64,
            eval,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {}/{}: loss {:.4}, AP {:.4}, AP50 {:.4} ({:.1}s)",
            record.epoch,
            cfg.epochs,
            record.mean_total_loss,
            record.eval.mean_ap,
            record.eval.ap50(),
            record.wall_clock_secs
        );
        run.epochs.push(record);
    }
    Ok((run, model))
}

pub fn save_checkpoint(model: &Detector, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, &model.params().to_named())?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a training checkpoint into a freshly built model of `cfg`'s
/// architecture and returns its stripped inference model. Auxiliary-head
/// entries are optional, so stripped checkpoints load as well.
pub fn load_inference_model(cfg: &RunConfig, path: &Path) -> Result<InferenceDetector> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let named = read_checkpoint(&mut BufReader::new(file))?;
    let mut model = Detector::new(cfg.model, cfg.seed)?.strip_training_branches();
    let mut store = model.params().clone();
    let core: Vec<_> = named.into_iter().filter(|(n, _)| !n.starts_with(AUX_PREFIX)).collect();
    store.load_named(core)?;
    model.set_params(store);
    Ok(model)
}

/// Writes the loss CSV, the per-epoch AP CSV and a JSON summary.
pub fn export_curves(run: &TrainingRun, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let groups = run.history.first().map_or(run.config.active_groups(), |r| r.l_o2o_per_group.len());
    let mut losses = LossReport::csv_header(groups);
    losses.push('\n');
    for (step, r) in run.history.iter().enumerate() {
        losses.push_str(&r.csv_row(step));
        losses.push('\n');
    }
    let path = dir.join(LOSSES_FILE);
    std::fs::write(&path, losses).map_err(|e| Error::io(&path, e))?;

    let mut ap = String::from("epoch,mean_ap,ap50,ap75,mean_total_loss\n");
    for e in &run.epochs {
        ap.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch,
            e.eval.mean_ap,
            e.eval.ap_per_threshold[0],
            e.eval.ap_per_threshold[5],
            e.mean_total_loss
        ));
    }
    let path = dir.join(AP_FILE);
    std::fs::write(&path, ap).map_err(|e| Error::io(&path, e))?;

    let (best_epoch, best_ap) = run.best().unwrap_or((0, 0.0));
    let summary = serde_json::json!({
        "epochs": run.epochs.len(),
        "steps": run.history.len(),
        "final_ap": run.final_ap(),
        "best_ap": best_ap,
        "best_epoch": best_epoch,
        "ap_curve": run.ap_curve(),
        "branches": run.config.branches,
        "n_groups": run.config.active_groups(),
        "replication": run.config.replication,
        "seed": run.config.seed,
    });
    let path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Malformed(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Writes config, checkpoint, history and curves of a finished run.
pub fn save_run(run: &mut TrainingRun, model: &Detector, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    run.config.write(&dir.join(CONFIG_FILE))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    save_checkpoint(model, &ckpt)?;
    run.checkpoint = Some(PathBuf::from(CHECKPOINT_FILE));
    let path = dir.join(HISTORY_FILE);
    let text = serde_json::to_string(run).map_err(|e| Error::Malformed(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    export_curves(run, dir)
}

pub fn load_run(dir: &Path) -> Result<TrainingRun> {
    let path = dir.join(HISTORY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
}
