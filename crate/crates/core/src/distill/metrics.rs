use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, BatchOrder, EncodedDataset};
use crate::error::{Error, Result};
use crate::model::{predicted_label, Network};
use crate::tensor::{Real, Tensor};

/// Square count matrix, rows are true classes and columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_pairs(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Dimension(format!(
                "{} labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let c = self.classes();
        if truth >= c || predicted >= c {
            return Err(Error::Bounds(format!("class pair ({truth}, {predicted}) with {c} classes")));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    /// Per-class F1. A class with `2TP + FP + FN = 0` scores 0.
    pub fn f1_scores(&self) -> Vec<f64> {
        let c = self.classes();
        (0..c)
            .map(|k| {
                let tp = self.counts[k][k];
                let fn_: u64 = self.counts[k].iter().sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|r| self.counts[r][k]).sum::<u64>() - tp;
                let denom = 2 * tp + fp + fn_;
                if denom == 0 {
                    0.0
                } else {
                    2.0 * tp as f64 / denom as f64
                }
            })
            .collect()
    }

    /// Unweighted mean of the per-class F1 scores.
    pub fn macro_f1(&self) -> f64 {
        let f1 = self.f1_scores();
        if f1.is_empty() {
            0.0
        } else {
            f1.iter().sum::<f64>() / f1.len() as f64
        }
    }
}

/// Top-1 accuracy of one modality's spatial head, temporal head and their
/// combined output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamAccuracy {
    pub modality: String,
    pub spatial: f64,
    pub temporal: f64,
    pub combined: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    pub per_modality: Vec<StreamAccuracy>,
    pub samples: usize,
}

fn argmax_rows<T: Real>(t: &Tensor<T>) -> impl Iterator<Item = usize> + '_ {
    t.rows().map(predicted_label)
}

/// Evaluates `net` on `ids` in the given order.
pub fn evaluate<T: Real>(
    net: &Network<T>,
    data: &EncodedDataset<T>,
    ids: &[u64],
    batch_size: usize,
) -> Result<EvalMetrics> {
    if net.config().modalities != data.modalities {
        return Err(Error::Config("model and dataset modalities differ".into()));
    }
    let classes = data.classes.len();
    let m = data.modalities.len();
    let mut confusion = ConfusionMatrix::new(classes);
    let mut hits = vec![[0u64; 3]; m];
    for batch in batch_iter(data, ids, batch_size, BatchOrder::Sequential)? {
        let batch = batch?;
        let out = net.infer(&batch)?;
        for (&truth, pred) in batch.labels.iter().zip(argmax_rows(&out.ensemble)) {
            confusion.record(truth, pred)?;
        }
        for (mi, mo) in out.modalities.iter().enumerate() {
            for (slot, probs) in [&mo.spatial_probs, &mo.temporal_probs, &mo.combined]
                .into_iter()
                .enumerate()
            {
                hits[mi][slot] += argmax_rows(probs)
                    .zip(&batch.labels)
                    .filter(|(p, t)| p == *t)
                    .count() as u64;
            }
        }
    }
    let n = ids.len() as f64;
    let per_modality = data
        .modalities
        .iter()
        .zip(&hits)
        .map(|(spec, h)| StreamAccuracy {
            modality: spec.name.clone(),
            spatial: h[0] as f64 / n,
            temporal: h[1] as f64 / n,
            combined: h[2] as f64 / n,
        })
        .collect();
    Ok(EvalMetrics {
        accuracy: confusion.accuracy(),
        macro_f1: confusion.macro_f1(),
        confusion,
        per_modality,
        samples: ids.len(),
    })
}

/// Writes the matrix with a header row and a leading column of class labels.
pub fn write_confusion_csv(path: &Path, cm: &ConfusionMatrix, labels: &[String]) -> Result<()> {
    if labels.len() != cm.classes() {
        return Err(Error::Dimension(format!(
            "{} labels for a {}-class matrix",
            labels.len(),
            cm.classes()
        )));
    }
    let mut out = String::from("true\\predicted");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (l, row) in labels.iter().zip(&cm.counts) {
        out.push_str(l);
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
