//! Training loops: the translator (teacher-forced cross-entropy) and the
//! dual sentence encoder (see `dual`).
//!
//! A fraction of training targets is deliberately detached (swapped with the
//! reference of an unrelated source). The model then learns a usable
//! target-side language model alongside the transduction, which is what lets
//! it continue fluently when attention loses the source: the failure mode the
//! detectors are built to catch.

pub mod dual;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::corpus::TranslationRecord;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::transformer::{checkpoint, DropoutPlan, TransformerModel, BOS, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub label_smoothing: f64,
    /// Probability that a training pair's target is swapped for the
    /// reference of an unrelated source sentence.
    pub detached_target_fraction: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 saves only the final one).
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Dev sentences scored per log row (prefix of the dev split).
    pub dev_sample: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            steps: 6000,
            batch_size: 8,
            base_lr: 3e-3,
            warmup_steps: 80,
            label_smoothing: 0.1,
            detached_target_fraction: 0.12,
            seed: 7,
            checkpoint_every: 0,
            log_every: 25,
            dev_sample: 32,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::invalid("base_lr must be finite and positive"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::invalid("warmup_steps must be at least 1"));
        }
        if !(0.0..=0.3).contains(&self.label_smoothing) {
            return Err(Error::invalid("label_smoothing must lie in [0, 0.3]"));
        }
        if !(0.0..1.0).contains(&self.detached_target_fraction) {
            return Err(Error::invalid("detached_target_fraction must lie in [0, 1)"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every must be at least 1"));
        }
        Ok(())
    }
}

/// Linear warmup to `base` at `warmup`, then inverse square-root decay.
/// Steps are 1-based.
pub fn lr_at(step: u64, base: f64, warmup: u64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    if step <= warmup {
        base * step / warmup
    } else {
        base * (warmup / step).sqrt()
    }
}

/// Encoder input framing: source tokens plus a terminal EOS.
pub fn frame_source(src: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(src.len() + 1);
    v.extend_from_slice(src);
    v.push(EOS);
    v
}

/// Decoder framing: BOS, target tokens, EOS.
pub fn frame_target(target: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(target.len() + 2);
    v.push(BOS);
    v.extend_from_slice(target);
    v.push(EOS);
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub rows: Vec<LossRow>,
    pub steps_run: u64,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.train_loss)
    }
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "step,train_loss,dev_loss").map_err(|e| Error::io(path, e))?;
    for row in rows {
        let dev = row.dev_loss.map(|d| format!("{d:.6}")).unwrap_or_default();
        writeln!(w, "{},{:.6},{}", row.step, row.train_loss, dev).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean teacher-forced loss over a slice of records, no dropout; used for
/// the dev column.
fn mean_loss(
    model: &TransformerModel,
    records: &[TranslationRecord],
    label_smoothing: f64,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::data("cannot evaluate loss on an empty split"));
    }
    let mut total = 0.0;
    for record in records {
        let mut g = Graph::new();
        let p = model.graph_params(&mut g)?;
        let loss = model.loss_graph(
            &mut g,
            &p,
            &frame_source(&record.src),
            &frame_target(&record.reference),
            label_smoothing,
            None,
        )?;
        total += g.scalar_value(loss);
    }
    Ok(total / records.len() as f64)
}

/// One pass of teacher-forced training. Batches are drawn from a per-epoch
/// shuffled order; gradients accumulate over the batch and are averaged
/// before the Adam update. Any non-finite intermediate aborts with a
/// Diverged error instead of a panic.
pub fn train_translator(
    model: &mut TransformerModel,
    train: &[TranslationRecord],
    dev: &[TranslationRecord],
    spec: &TrainSpec,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    spec.validate()?;
    if train.is_empty() && spec.steps > 0 {
        return Err(Error::data("training split is empty"));
    }
    let root = Rng::new(spec.seed);
    let order_root = root.derive("order");
    let noise_root = root.derive("detach");
    let dropout_root = root.derive("dropout-step");
    let mut adam = Adam::new(spec.base_lr);
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut cursor = 0usize;
    let mut report = TrainReport::default();
    let mut window_loss = 0.0;
    let mut window_count = 0usize;

    for step in 1..=spec.steps {
        // Refill the epoch order when exhausted.
        let mut batch = Vec::with_capacity(spec.batch_size);
        while batch.len() < spec.batch_size {
            if cursor >= order.len() {
                order = (0..train.len()).collect();
                order_root.derive_u64(epoch).shuffle(&mut order);
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let mut grads: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        let mut batch_loss = 0.0;
        for (slot, &idx) in batch.iter().enumerate() {
            let record = &train[idx];
            // Detached-target augmentation: swap in an unrelated reference.
            let mut noise = noise_root.derive_u64(step).derive_u64(slot as u64);
            let target = if noise.next_f64() < spec.detached_target_fraction && train.len() > 1 {
                let mut donor = noise.below(train.len());
                if donor == idx {
                    donor = (donor + 1) % train.len();
                }
                &train[donor].reference
            } else {
                &record.reference
            };
            let plan_seed = dropout_root.derive_u64(step).derive_u64(slot as u64).at(0);
            let plan = DropoutPlan::from_seed(plan_seed, model.config.dropout_rate);
            let mut g = Graph::new();
            let p = model.graph_params(&mut g)?;
            let result = (|| -> Result<f64> {
                let loss = model.loss_graph(
                    &mut g,
                    &p,
                    &frame_source(&record.src),
                    &frame_target(target),
                    spec.label_smoothing,
                    Some(&plan),
                )?;
                g.backward(loss)?;
                Ok(g.scalar_value(loss))
            })();
            let loss = match result {
                Ok(l) => l,
                Err(Error::NonFinite(what)) => {
                    return Err(Error::Diverged { step, reason: format!("non-finite {what}") })
                }
                Err(e) => return Err(e),
            };
            batch_loss += loss;
            for (name, var) in p.iter() {
                let acc = grads
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.grad(*var).len()]);
                for (a, &gv) in acc.iter_mut().zip(g.grad(*var)) {
                    *a += gv;
                }
            }
        }
        batch_loss /= spec.batch_size as f64;
        // Layer norm and max-subtracted softmax keep activations finite even
        // under absurd updates, so divergence shows up as loss explosion
        // rather than NaN. Cross-entropy here starts near ln(vocab) < 10.
        if !batch_loss.is_finite() || batch_loss > 1e4 {
            return Err(Error::Diverged {
                step,
                reason: format!("batch loss {batch_loss:.3e}"),
            });
        }
        let scale = 1.0 / spec.batch_size as f64;
        let lr = lr_at(step, spec.base_lr, spec.warmup_steps);
        for (name, grad) in grads.iter_mut() {
            for gv in grad.iter_mut() {
                *gv *= scale;
            }
            let params = model
                .params_mut()
                .get_mut(name)
                .expect("graph params mirror model params");
            match adam.update(name, params.data_mut(), grad, lr) {
                Ok(_) => {}
                Err(Error::NonFinite(what)) => {
                    return Err(Error::Diverged { step, reason: format!("non-finite {what}") })
                }
                Err(e) => return Err(e),
            }
        }

        window_loss += batch_loss;
        window_count += 1;
        if step % spec.log_every == 0 || step == spec.steps {
            let dev_loss = if dev.is_empty() || spec.dev_sample == 0 {
                None
            } else {
                let sample = &dev[..spec.dev_sample.min(dev.len())];
                Some(mean_loss(model, sample, spec.label_smoothing)?)
            };
            report.rows.push(LossRow {
                step,
                train_loss: window_loss / window_count as f64,
                dev_loss,
            });
            log::info!(
                "step {step}: train {:.4} dev {}",
                window_loss / window_count as f64,
                dev_loss.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into())
            );
            window_loss = 0.0;
            window_count = 0;
        }
        if let Some(dir) = checkpoint_dir {
            let due = spec.checkpoint_every > 0 && step % spec.checkpoint_every == 0;
            if due || step == spec.steps {
                let name = if step == spec.steps {
                    "checkpoint-final.hlgd".to_string()
                } else {
                    format!("checkpoint-{step:06}.hlgd")
                };
                checkpoint::save_checkpoint(model, &dir.join(name))?;
            }
        }
        report.steps_run = step;
    }
    Ok(report)
}
