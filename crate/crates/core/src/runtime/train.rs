use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_model, plot::plot_losses, save_model, write_json, RunConfig};
use crate::error::{Error, Result};
use crate::grasp::{GraspBatch, GraspModel, LossTerms};
use crate::scene::{batch_from_record, BatchLimits, Dataset, SceneRecord};
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Scalar, StepSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub schedule: StepSchedule,
    pub adam: AdamConfig,
    /// Scenes per optimiser step.
    pub batch_size: usize,
    pub limits: BatchLimits,
    pub validation_fraction: f64,
    /// Optimiser steps per epoch; 0 makes one pass over the training scenes.
    pub steps_per_epoch: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            schedule: StepSchedule::default(),
            adam: AdamConfig::default(),
            batch_size: 1,
            limits: BatchLimits::default(),
            validation_fraction: 0.1,
            steps_per_epoch: 0,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!("validation_fraction {} not in [0, 1)", self.validation_fraction)));
        }
        if !(self.schedule.base_lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
}

/// Splits a dataset: the last `fraction` of scenes (at least one when the
/// dataset has two or more) are held out.
pub fn load_split(ds: &Dataset, fraction: f64) -> Result<TrainData> {
    let n = ds.len();
    if n == 0 {
        return Err(Error::Data("dataset is empty".into()));
    }
    let n_val = if n >= 2 && fraction > 0.0 { ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1) } else { 0 };
    let records = (0..n).map(|i| ds.record(i)).collect::<Result<Vec<_>>>()?;
    let (train, val) = records.split_at(n - n_val);
    Ok(TrainData { train: train.to_vec(), val: val.to_vec() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossTerms,
    pub val: Option<LossTerms>,
    pub seconds: f64,
}

pub struct TrainOutcome<T: Scalar> {
    pub model: GraspModel,
    pub store: ParamStore<T>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn mean_terms(terms: &[LossTerms]) -> LossTerms {
    let n = terms.len().max(1) as f64;
    let mut m = LossTerms::default();
    for t in terms {
        m.rot += t.rot / n;
        m.flow += t.flow / n;
        m.graspness += t.graspness / n;
        m.grasp += t.grasp / n;
        m.occ += t.occ / n;
        m.total += t.total / n;
    }
    m
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: usize,
    epoch: usize,
    scene_seed: u64,
    terms: LossTerms,
    tsdf_finite: bool,
    positions: &'a [[f64; 3]],
    graspness: &'a [f64],
    grasp_points: &'a [[f64; 3]],
    grasp_rotations: Vec<[f64; 9]>,
    grasp_success: &'a [f64],
    occupancy_points: &'a [[f64; 3]],
    occupancy: &'a [f64],
}

fn dump_batch(path: &Path, step: usize, epoch: usize, rec: &SceneRecord, terms: LossTerms, b: &GraspBatch) -> Result<()> {
    let dump = NanDump {
        step,
        epoch,
        scene_seed: rec.spec.seed,
        terms,
        tsdf_finite: rec.tsdf.values.iter().all(|v| v.is_finite()),
        positions: &b.positions,
        graspness: &b.graspness,
        grasp_points: &b.grasp_points,
        grasp_rotations: b.grasp_rotations.iter().map(|r| std::array::from_fn(|k| r[(k / 3, k % 3)])).collect(),
        grasp_success: &b.grasp_success,
        occupancy_points: &b.occupancy_points,
        occupancy: &b.occupancy,
    };
    write_json(path, &dump)
}

/// Mean loss terms over held-out scenes with per-scene fixed sampling.
pub fn validate<T: Scalar>(cfg: &RunConfig, model: &GraspModel, store: &ParamStore<T>, val: &[SceneRecord]) -> Result<LossTerms> {
    let mut terms = Vec::with_capacity(val.len());
    for (i, rec) in val.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_da7e ^ (i as u64) << 20);
        let batch = batch_from_record(rec, &cfg.train.limits, &mut rng);
        let g = Graph::inference();
        let (_, t) = model.loss(&g, store, &rec.tsdf.tensor(), &rec.tsdf.geometry(), &batch, &mut rng)?;
        terms.push(t);
    }
    Ok(mean_terms(&terms))
}

/// Adam training with the step schedule; writes a JSON-lines log, per-epoch
/// and best checkpoints and a loss plot when `out` is given.
pub fn train<T: Scalar>(cfg: &RunConfig, data: &TrainData, out: Option<&Path>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("no training scenes".into()));
    }
    if let Some(rec) = data.train.iter().chain(&data.val).find(|r| r.tsdf.size != cfg.encoder.grid) {
        return Err(Error::Config(format!(
            "scene grid {} does not match encoder grid {}",
            rec.tsdf.size, cfg.encoder.grid
        )));
    }
    let (model, mut store) = build_model::<T>(cfg)?;
    let mut adam = Adam::<T>::new(cfg.train.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7ea1_0000_0000_0004);
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
        }
        None => None,
    };
    let n = data.train.len();
    let b = cfg.train.batch_size;
    let steps_per_epoch = if cfg.train.steps_per_epoch > 0 { cfg.train.steps_per_epoch } else { n.div_ceil(b) };
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0);
    let mut step = 0;
    for epoch in 1..=cfg.train.epochs {
        let started = Instant::now();
        let lr = cfg.train.schedule.lr(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut cursor = 0;
        let mut epoch_terms = Vec::new();
        for _ in 0..steps_per_epoch {
            step += 1;
            let mut step_terms = Vec::with_capacity(b);
            for _ in 0..b {
                let rec = &data.train[order[cursor % n]];
                cursor += 1;
                let batch = batch_from_record(rec, &cfg.train.limits, &mut rng);
                let g = Graph::new();
                let failure = match model.loss(&g, &store, &rec.tsdf.tensor(), &rec.tsdf.geometry(), &batch, &mut rng) {
                    Ok((loss, terms)) if terms.total.is_finite() => {
                        let grads = g.backward(loss)?;
                        store.accumulate(&grads, T::of(1.0 / b as f64));
                        if store.grad_norm().is_finite() {
                            step_terms.push(terms);
                            continue;
                        }
                        ("non-finite gradient".to_string(), terms)
                    }
                    Ok((_, terms)) => ("non-finite loss".to_string(), terms),
                    Err(Error::Numeric(m)) => (m, LossTerms::default()),
                    Err(e) => return Err(e),
                };
                let (why, terms) = failure;
                let mut msg = format!("{why} at step {step} (epoch {epoch}, scene seed {}): {terms:?}", rec.spec.seed);
                if let Some(dir) = out {
                    let path = dir.join("nan_dump.json");
                    dump_batch(&path, step, epoch, rec, terms, &batch)?;
                    msg.push_str(&format!("; batch dumped to {}", path.display()));
                }
                return Err(Error::Numeric(msg));
            }
            if cfg.train.grad_clip > 0.0 {
                let norm = store.grad_norm();
                if norm > cfg.train.grad_clip {
                    let s = T::of(cfg.train.grad_clip / norm);
                    store.iter_mut().filter_map(|p| p.grad.as_mut()).for_each(|g| g.scale(s));
                }
            }
            adam.step(&mut store, lr)?;
            store.zero_grad();
            let rec = StepRecord { step, epoch, lr, loss: mean_terms(&step_terms) };
            if let Some(w) = log.as_mut() {
                let mut line = serde_json::to_value(&rec)?;
                line["kind"] = "step".into();
                writeln!(w, "{line}").map_err(|e| Error::io("train_log.jsonl", e))?;
            }
            epoch_terms.extend(step_terms);
            steps.push(rec);
        }
        let val = if data.val.is_empty() { None } else { Some(validate(cfg, &model, &store, &data.val)?) };
        let record = EpochRecord { epoch, lr, train: mean_terms(&epoch_terms), val, seconds: started.elapsed().as_secs_f64() };
        let score = record.val.map_or(record.train.total, |v| v.total);
        let improved = score < best.0;
        if improved {
            best = (score, epoch);
        }
        if let Some(dir) = out {
            save_model(&dir.join(format!("epoch_{epoch:02}.ckpt")), cfg, &store)?;
            if improved {
                save_model(&dir.join("best.ckpt"), cfg, &store)?;
            }
        }
        if let Some(w) = log.as_mut() {
            let mut line = serde_json::to_value(&record)?;
            line["kind"] = "epoch".into();
            writeln!(w, "{line}").map_err(|e| Error::io("train_log.jsonl", e))?;
            w.flush().map_err(|e| Error::io("train_log.jsonl", e))?;
        }
        epochs.push(record);
    }
    if let Some(dir) = out {
        plot_losses(&dir.join("loss_curves.svg"), &epochs)?;
    }
    Ok(TrainOutcome { model, store, steps, epochs, best_epoch: best.1 })
}
