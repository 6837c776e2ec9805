use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainingConfig;
use crate::dataset::{GraphSample, InputScaling};
use crate::error::{Error, Result};
use crate::nn::{adam_step, init_parameters, Batch, ForwardPass, Gradients, Mode, ModelParameters};
use crate::seeding::{mix_seed, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub seed: u64,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were restored; 0 is the initialization.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Epoch after which patience ran out, if it did.
    pub early_stop_epoch: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainingLog {
    /// Equal in every field except wall time.
    pub fn same_trajectory(&self, other: &TrainingLog) -> bool {
        let strip = |l: &TrainingLog| -> Vec<(usize, u64, u64)> {
            l.epochs
                .iter()
                .map(|e| (e.epoch, e.train_loss.to_bits(), e.val_loss.to_bits()))
                .collect()
        };
        self.seed == other.seed
            && self.initial_val_loss.to_bits() == other.initial_val_loss.to_bits()
            && self.best_epoch == other.best_epoch
            && self.best_val_loss.to_bits() == other.best_val_loss.to_bits()
            && self.early_stop_epoch == other.early_stop_epoch
            && strip(self) == strip(other)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Mean squared error over every output of `samples` plus `λ · Σ W²`,
/// evaluated in eval mode.
pub fn validation_loss(model: &ModelParameters, samples: &[GraphSample], l2: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let refs: Vec<&GraphSample> = samples.iter().collect();
    let partial: Vec<f64> = refs
        .par_chunks(256)
        .map(|chunk| -> Result<f64> {
            let batch = Batch::new(&model.arch, chunk)?;
            let pass = ForwardPass::record(model, &batch.x, &batch.graph, Mode::Eval, &mut stream(0))?;
            Ok(pass
                .output()
                .data()
                .iter()
                .zip(batch.targets.data())
                .map(|(p, t)| (p - t) * (p - t))
                .sum())
        })
        .collect::<Result<_>>()?;
    let total = (samples.len() * model.arch.output_dim()) as f64;
    Ok(partial.iter().sum::<f64>() / total + l2 * model.l2_penalty())
}

struct BatchResult {
    loss: f64,
    grads: Gradients,
}

fn chunk_gradients(
    model: &ModelParameters,
    batch: &[&GraphSample],
    chunk: usize,
    l2_scale: f64,
    denominator: usize,
    seed: u64,
) -> Result<BatchResult> {
    let data = Batch::new(&model.arch, batch)?;
    let mut rng = stream(seed);
    let mut pass = ForwardPass::record(model, &data.x, &data.graph, Mode::Train, &mut rng)?;
    let loss = pass.record_loss(&data.targets, denominator, if chunk == 0 { l2_scale } else { 0.0 })?;
    let grads = pass.backward()?;
    Ok(BatchResult { loss, grads })
}

fn batch_gradients(
    model: &ModelParameters,
    batch: &[&GraphSample],
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<BatchResult> {
    let denominator = batch.len() * model.arch.output_dim();
    let per_chunk = batch.len().div_ceil(cfg.grad_chunks).max(1);
    let chunks: Vec<&[&GraphSample]> = batch.chunks(per_chunk).collect();
    let run = |(i, c): (usize, &&[&GraphSample])| {
        chunk_gradients(model, c, i, cfg.l2, denominator, mix_seed(seed, &[i as u64]))
    };
    let merge = |mut a: BatchResult, b: BatchResult| {
        a.loss += b.loss;
        a.grads.add_assign(&b.grads);
        a
    };
    if cfg.deterministic {
        let parts: Vec<BatchResult> = chunks.par_iter().enumerate().map(run).collect::<Result<_>>()?;
        let mut it = parts.into_iter();
        let first = it.next().expect("nonempty batch");
        Ok(it.fold(first, merge))
    } else {
        chunks
            .par_iter()
            .enumerate()
            .map(run)
            .try_reduce_with(|a, b| Ok(merge(a, b)))
            .expect("nonempty batch")
    }
}

fn dump_batch(dir: &Path, epoch: usize, index: usize, loss: f64, batch: &[&GraphSample]) -> Option<PathBuf> {
    #[derive(Serialize)]
    struct Row<'a> {
        seed: u64,
        snr_db: f64,
        x: &'a [f32],
    }
    #[derive(Serialize)]
    struct Dump<'a> {
        epoch: usize,
        batch: usize,
        loss: f64,
        samples: Vec<Row<'a>>,
    }
    let dump = Dump {
        epoch,
        batch: index,
        loss,
        samples: batch
            .iter()
            .map(|s| Row {
                seed: s.meta.seed,
                snr_db: s.snr_db,
                x: s.x(),
            })
            .collect(),
    };
    let path = dir.join(format!("non_finite_epoch{epoch}_batch{index}.json"));
    let text = serde_json::to_string_pretty(&dump).ok()?;
    fs::create_dir_all(dir).ok()?;
    fs::write(&path, text).ok()?;
    Some(path)
}

/// Mini-batch Adam with early stopping on the validation loss. Returns the
/// weights of the best validation epoch.
///
/// A non-finite batch loss aborts training; when `diagnostics` is given the
/// offending batch is written there first.
pub fn train(
    train_set: &[GraphSample],
    val_set: &[GraphSample],
    cfg: &TrainingConfig,
    seed: u64,
    diagnostics: Option<&Path>,
) -> Result<(ModelParameters, TrainingLog)> {
    cfg.validate()?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::invalid("empty training set"))?;
    let mut arch = cfg.architecture(first.meta.m_pilots, first.meta.n_elements);
    if cfg.standardize_inputs {
        arch.input_scaling = Some(InputScaling::fit(train_set)?);
    }
    let mut model = init_parameters(arch, &mut stream(mix_seed(seed, &[0])))?;
    let adam = cfg.adam();

    let initial_val_loss = validation_loss(&model, val_set, cfg.l2)?;
    let mut best = (model.clone(), 0usize, initial_val_loss);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut stale = 0;
    let mut early_stop_epoch = None;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut stream(mix_seed(seed, &[1, epoch as u64])));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&GraphSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let result = batch_gradients(&model, &batch, cfg, mix_seed(seed, &[2, epoch as u64, b as u64]))?;
            if !result.loss.is_finite() || result.grads.first_non_finite().is_some() {
                let dumped = diagnostics.and_then(|d| dump_batch(d, epoch, b, result.loss, &batch));
                let seeds: Vec<u64> = batch.iter().map(|s| s.meta.seed).collect();
                return Err(Error::NonFinite {
                    what: "training loss".into(),
                    detail: format!(
                        "epoch {epoch}, batch {b}: loss {} over sample seeds {seeds:?}{}",
                        result.loss,
                        dumped.map_or(String::new(), |p| format!("; batch written to {}", p.display()))
                    ),
                });
            }
            adam_step(&mut model, &result.grads, &adam)?;
            loss_sum += result.loss;
            batches += 1;
        }
        let val_loss = validation_loss(&model, val_set, cfg.l2)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if val_loss < best.2 {
            best = (model.clone(), epoch, val_loss);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                early_stop_epoch = Some(epoch);
                break;
            }
        }
    }

    let (model, best_epoch, best_val_loss) = best;
    Ok((
        model,
        TrainingLog {
            seed,
            initial_val_loss,
            epochs,
            best_epoch,
            best_val_loss,
            early_stop_epoch,
            checkpoint: None,
        },
    ))
}
