use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::loss::{student_loss, teacher_loss, KdConfig};
use super::metrics::{evaluate, EvalMetrics};
use crate::data::{batch_iter, BatchOrder, EncodedDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{Inference, ModalityInference, Network, Role};
use crate::tensor::{Graph, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Wall-clock measurements, kept apart from the reproducible fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Optimization time per epoch, excluding evaluation.
    pub epoch_seconds: Vec<f64>,
    pub total_seconds: f64,
}

impl Timing {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epoch_seconds.is_empty() {
            0.0
        } else {
            self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub role: Role,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub epoch_test_accuracy: Vec<f64>,
    /// Test-side metrics after the final epoch.
    pub metrics: EvalMetrics,
    pub param_count: usize,
    pub teacher_param_count: Option<usize>,
    pub timing: Timing,
}

/// Frozen-teacher outputs for every training sample. Rows do not depend on
/// batch composition, so one pass up front replaces a teacher forward per
/// student batch.
struct TeacherCache<T> {
    rows: std::collections::HashMap<u64, usize>,
    outputs: Inference<T>,
}

impl<T: Real> TeacherCache<T> {
    fn build(teacher: &Network<T>, data: &EncodedDataset<T>, ids: &[u64], batch_size: usize) -> Result<Self> {
        let mut parts = Vec::new();
        for batch in batch_iter(data, ids, batch_size, BatchOrder::Sequential)? {
            parts.push(teacher.infer(&batch?)?);
        }
        let join = |pick: &dyn Fn(&Inference<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
            let cols = pick(&parts[0]).shape()[1];
            let values = parts.iter().flat_map(|p| pick(p).data().iter().copied()).collect();
            Tensor::new(vec![ids.len(), cols], values)
        };
        let modalities = (0..parts[0].modalities.len())
            .map(|m| {
                Ok(ModalityInference {
                    spatial_logits: join(&|p| &p.modalities[m].spatial_logits)?,
                    temporal_logits: join(&|p| &p.modalities[m].temporal_logits)?,
                    spatial_probs: join(&|p| &p.modalities[m].spatial_probs)?,
                    temporal_probs: join(&|p| &p.modalities[m].temporal_probs)?,
                    combined: join(&|p| &p.modalities[m].combined)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let outputs = Inference {
            modalities,
            ensemble: join(&|p| &p.ensemble)?,
        };
        let rows = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(TeacherCache { rows, outputs })
    }

    fn gather(&self, ids: &[u64]) -> Result<Inference<T>> {
        let rows = ids
            .iter()
            .map(|id| {
                self.rows.get(id).copied().ok_or_else(|| Error::Ingestion {
                    sample_id: *id,
                    reason: "no cached teacher output".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pick = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let cols = t.shape()[1];
            let mut values = Vec::with_capacity(rows.len() * cols);
            for &r in &rows {
                values.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
            }
            Tensor::new(vec![rows.len(), cols], values)
        };
        Ok(Inference {
            modalities: self
                .outputs
                .modalities
                .iter()
                .map(|m| {
                    Ok(ModalityInference {
                        spatial_logits: pick(&m.spatial_logits)?,
                        temporal_logits: pick(&m.temporal_logits)?,
                        spatial_probs: pick(&m.spatial_probs)?,
                        temporal_probs: pick(&m.temporal_probs)?,
                        combined: pick(&m.combined)?,
                    })
                })
                .collect::<Result<_>>()?,
            ensemble: pick(&self.outputs.ensemble)?,
        })
    }
}

/// Trains `net` on the split's train side, evaluating on its test side
/// after every epoch.
///
/// With a teacher, the student objective mixes hard-label cross entropy and
/// the softened per-stream KL terms; the teacher is only ever read. Without
/// one, the loss is the cross entropy of the ensemble prediction.
pub fn train<T: Real>(
    net: &mut Network<T>,
    data: &EncodedDataset<T>,
    split: &SplitSpec,
    cfg: &TrainConfig,
    teacher: Option<(&Network<T>, &KdConfig)>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if net.config().modalities != data.modalities {
        return Err(Error::Config("model and dataset modalities differ".into()));
    }
    if let Some((t, kd)) = teacher {
        if net.role() != Role::Student {
            return Err(Error::Config("only a student can be distilled".into()));
        }
        let (ours, theirs) = (&net.config().modalities, &t.config().modalities);
        for (i, mine) in ours.iter().enumerate() {
            match theirs.get(i) {
                Some(other) if other == mine => {}
                _ => {
                    return Err(Error::Config(format!(
                        "teacher does not match student modality `{}`",
                        mine.name
                    )))
                }
            }
        }
        if theirs.len() != ours.len() {
            return Err(Error::Config(format!(
                "teacher has extra modality `{}`",
                theirs[ours.len()].name
            )));
        }
        if t.config().classes != net.config().classes {
            return Err(Error::Config("teacher and student class counts differ".into()));
        }
        kd.validate(ours.len())?;
    }

    let started = Instant::now();
    let cache = match teacher {
        Some((t, _)) => Some(TeacherCache::build(t, data, &split.train, cfg.batch_size)?),
        None => None,
    };
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), net.store().tensors());
    let mut timing = Timing::default();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut epoch_test_accuracy = Vec::with_capacity(cfg.epochs);
    let mut metrics = None;

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let order = BatchOrder::Shuffled { seed: cfg.seed, epoch };
        let (mut total, mut batches) = (0.0, 0usize);
        for (bi, batch) in batch_iter(data, &split.train, cfg.batch_size, order)?.enumerate() {
            let batch = batch?;
            let targets = match &cache {
                Some(c) => Some(c.gather(&batch.sample_ids)?),
                None => None,
            };
            let diverged = |e: Error| match e {
                Error::Numeric { .. } => Error::Diverged {
                    epoch: epoch + 1,
                    batch: bi + 1,
                },
                other => other,
            };
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let value = (|| -> Result<f64> {
                let out = net.forward(&mut g, &bound, &batch)?;
                let loss = match (teacher, &targets) {
                    (Some((_, kd)), Some(t)) => student_loss(&mut g, &out, t, &batch.labels, kd)?,
                    _ => teacher_loss(&mut g, &out, &batch.labels)?,
                };
                let value = g.value(loss).item().as_f64();
                if !value.is_finite() {
                    return Err(Error::Numeric { op: "loss" });
                }
                g.backward(loss)?;
                Ok(value)
            })()
            .map_err(diverged)?;
            let grads = net.store().grads(&g, &bound)?;
            adam.step(net.store_mut().tensors_mut(), &grads).map_err(diverged)?;
            total += value;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
        timing.epoch_seconds.push(epoch_start.elapsed().as_secs_f64());

        let m = evaluate(net, data, &split.test, cfg.batch_size)?;
        epoch_test_accuracy.push(m.accuracy);
        metrics = Some(m);
    }
    timing.total_seconds = started.elapsed().as_secs_f64();

    Ok(TrainReport {
        role: net.role(),
        epoch_losses,
        epoch_test_accuracy,
        metrics: metrics.expect("at least one epoch"),
        param_count: net.param_count(),
        teacher_param_count: teacher.map(|(t, _)| t.param_count()),
        timing,
    })
}
