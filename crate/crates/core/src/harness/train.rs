//! Training loop with deterministic data order, JSON-lines logging,
//! per-epoch checkpoints and resume.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::Device;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::collate;
use crate::error::{Error, Result};
use crate::eval::write_json;
use crate::model::Detector;
use crate::sqr::{sqr_training_step, LossBreakdown};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::dataset::{Split, SplitName};
use super::evaluate::{evaluate, EvalReport};
use super::optim::{learning_rate, Adam};

/// Version of the JSON-lines log schema.
pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in total, even if the config asks for more.
    pub stop_after_epochs: Option<usize>,
    /// Stop at the first step boundary after this much wall-clock time.
    pub time_budget: Option<Duration>,
    /// Test hook: replace the loss at this optimizer step (1-based) with NaN.
    pub inject_nonfinite_at_step: Option<u64>,
    /// Skip the final validation pass.
    pub skip_final_eval: bool,
    /// Stop after the first validation whose AP50 reaches this value.
    pub target_ap50: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub epochs_completed: usize,
    pub steps: u64,
    /// Total loss of every step run in this invocation.
    pub losses: Vec<f64>,
    pub best_ap50: Option<f64>,
    pub final_eval: Option<EvalReport>,
    pub budget_exhausted: bool,
    pub target_reached: bool,
}

#[derive(Serialize)]
struct StepLog<'a> {
    schema_version: u32,
    kind: &'static str,
    epoch: usize,
    step: u64,
    batch: usize,
    lr: f64,
    loss: f64,
    class: f64,
    box_l1: f64,
    giou: f64,
    grad_norm: f64,
    sets: &'a [crate::sqr::SetRecord],
}

#[derive(Serialize)]
struct EpochLog {
    schema_version: u32,
    kind: &'static str,
    epoch: usize,
    step: u64,
    mean_loss: f64,
    ap: Option<f64>,
    ap50: Option<f64>,
    seconds: f64,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    schema_version: u32,
    epoch: usize,
    step: u64,
    batch_index: usize,
    sample_ids: Vec<u64>,
    breakdown: &'a LossBreakdown,
    checkpoint: PathBuf,
}

/// Sample order for one epoch: a Fisher–Yates shuffle seeded by the run seed
/// and the epoch, plus one flip decision per position.
pub fn epoch_order(seed: u64, epoch: usize, n: usize, flip: bool) -> Vec<(usize, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.into_iter().map(|i| (i, flip && rng.random_bool(0.5))).collect()
}

struct Log(BufWriter<File>);

impl Log {
    fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self(BufWriter::new(f)))
    }

    fn line(&mut self, v: &impl Serialize) -> Result<()> {
        let s = serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.0, "{s}").and_then(|_| self.0.flush()).map_err(|e| Error::io("train_log.jsonl", e))
    }
}

struct State {
    epoch: usize,
    step: u64,
    best_ap50: Option<f64>,
}

fn snapshot(model: &Detector, opt: &Adam, cfg: &RunConfig, st: &State) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_store(&model.store, cfg)?;
    ck.epoch = st.epoch as u64;
    ck.step = st.step;
    ck.rng_state = cfg.seed;
    ck.best_ap50 = st.best_ap50;
    let (t, m, v) = opt.export()?;
    ck.adam_step = t;
    ck.adam_m = m;
    ck.adam_v = v;
    Ok(ck)
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let out = cfg.resolved_output_dir();
    let ckdir = checkpoint_dir(&out);
    let model = Detector::new(&cfg.model, cfg.seed, cfg.precision.dtype())?;
    let mut opt = Adam::new(&cfg.optim);
    let mut st = State { epoch: 0, step: 0, best_ap50: None };

    if let Some(path) = &opts.resume {
        let ck = Checkpoint::load(path)?;
        let saved = ck.run_config()?;
        if saved.model != cfg.model {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different model config",
                path.display()
            )));
        }
        if saved.seed != cfg.seed {
            return Err(Error::Config("resume requires the seed of the original run".into()));
        }
        ck.restore_store(&model.store)?;
        opt.import(ck.adam_step, &ck.adam_m, &ck.adam_v, &Device::Cpu)?;
        st = State {
            epoch: ck.epoch as usize,
            step: ck.step,
            best_ap50: ck.best_ap50,
        };
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    cfg.save(&out.join("config.toml"))?;
    let mut log = Log::open(&out.join("train_log.jsonl"), opts.resume.is_some())?;

    let train_split = Split::open(cfg, SplitName::Train)?;
    let val_split = Split::open(cfg, SplitName::Val)?;
    let last_epoch = opts.stop_after_epochs.map_or(cfg.optim.epochs, |s| s.min(cfg.optim.epochs));
    let mut losses = Vec::new();
    let mut budget_exhausted = false;
    let mut target_reached = false;
    // validation of the current weights, if one has run since the last step
    let mut fresh_report: Option<EvalReport> = None;

    while st.epoch < last_epoch && !budget_exhausted && !target_reached {
        fresh_report = None;
        let epoch_start = Instant::now();
        let lr = learning_rate(&cfg.optim, st.epoch);
        let order = epoch_order(cfg.seed, st.epoch, train_split.len(), cfg.optim.flip_augment);
        let mut epoch_losses = Vec::new();
        for (batch_index, chunk) in order.chunks(cfg.optim.batch_size).enumerate() {
            let samples = chunk
                .iter()
                .map(|&(i, flip)| {
                    let s = train_split.get(i)?.sample;
                    Ok(if flip { s.hflip() } else { s })
                })
                .collect::<Result<Vec<_>>>()?;
            let (images, targets) = collate(&samples, model.dtype(), &Device::Cpu)?;
            let loss = sqr_training_step(&model, &images, &targets, cfg.sqr_variant, cfg.recollect_weight, &cfg.loss)?;
            let mut value = loss.breakdown.total;
            if opts.inject_nonfinite_at_step == Some(st.step + 1) {
                value = f64::NAN;
            }
            if !value.is_finite() {
                let ck_path = ckdir.join("nonfinite.ckpt");
                snapshot(&model, &opt, cfg, &st)?.save(&ck_path)?;
                write_json(
                    &out.join("nonfinite.json"),
                    &NonFiniteDump {
                        schema_version: LOG_SCHEMA_VERSION,
                        epoch: st.epoch,
                        step: st.step + 1,
                        batch_index,
                        sample_ids: samples.iter().map(|s| s.id).collect(),
                        breakdown: &loss.breakdown,
                        checkpoint: ck_path.clone(),
                    },
                )?;
                return Err(Error::NonFinite(format!(
                    "loss {value} at epoch {} batch {batch_index}; state saved to {}",
                    st.epoch,
                    ck_path.display()
                )));
            }
            let grads = loss.total.backward()?;
            let stats = opt.step(&model.store, &grads, lr)?;
            st.step += 1;
            let b = &loss.breakdown;
            log.line(&StepLog {
                schema_version: LOG_SCHEMA_VERSION,
                kind: "step",
                epoch: st.epoch,
                step: st.step,
                batch: batch_index,
                lr,
                loss: b.total,
                class: b.class,
                box_l1: b.box_l1,
                giou: b.giou,
                grad_norm: stats.grad_norm,
                sets: &b.sets,
            })?;
            losses.push(b.total);
            epoch_losses.push(b.total);
            if opts.time_budget.is_some_and(|t| started.elapsed() >= t) {
                budget_exhausted = true;
                break;
            }
        }
        if budget_exhausted {
            break;
        }
        st.epoch += 1;
        let validate = st.epoch % cfg.eval.every_epochs == 0 || st.epoch == cfg.optim.epochs;
        let report = if validate {
            Some(evaluate(&model, &val_split, cfg.eval.batch_size, cfg.eval.score_floor)?)
        } else {
            None
        };
        let ap50 = report.as_ref().map(|r| r.ap.ap50);
        let improved = matches!((ap50, st.best_ap50), (Some(a), None) if a.is_finite())
            || matches!((ap50, st.best_ap50), (Some(a), Some(b)) if a > b);
        if improved {
            st.best_ap50 = ap50;
        }
        log.line(&EpochLog {
            schema_version: LOG_SCHEMA_VERSION,
            kind: "epoch",
            epoch: st.epoch,
            step: st.step,
            mean_loss: epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64,
            ap: report.as_ref().map(|r| r.ap.ap),
            ap50,
            seconds: epoch_start.elapsed().as_secs_f64(),
        })?;
        let ck = snapshot(&model, &opt, cfg, &st)?;
        ck.save(&ckdir.join(format!("epoch_{:03}.ckpt", st.epoch)))?;
        ck.save(&ckdir.join("last.ckpt"))?;
        if improved {
            ck.save(&ckdir.join("best.ckpt"))?;
        }
        target_reached = matches!((ap50, opts.target_ap50), (Some(a), Some(t)) if a >= t);
        fresh_report = report;
    }

    let final_eval = if opts.skip_final_eval {
        None
    } else {
        let r = match fresh_report {
            Some(r) => r,
            None => evaluate(&model, &val_split, cfg.eval.batch_size, cfg.eval.score_floor)?,
        };
        write_json(&out.join("eval_val.json"), &r)?;
        Some(r)
    };
    Ok(TrainSummary {
        output_dir: out,
        epochs_completed: st.epoch,
        steps: st.step,
        losses,
        best_ap50: st.best_ap50,
        final_eval,
        budget_exhausted,
        target_reached,
    })
}

/// Total losses of every step record in a JSON-lines training log.
pub fn read_step_losses(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if v["schema_version"].as_u64() != Some(LOG_SCHEMA_VERSION as u64) {
            return Err(Error::Format(format!("{}:{}: unexpected schema version", path.display(), i + 1)));
        }
        if v["kind"] == "step" {
            out.push(v["loss"].as_f64().ok_or_else(|| Error::Format("step without loss".into()))?);
        }
    }
    Ok(out)
}
