use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{read_record, DatasetManifest, ModalityRecord};
use super::split::SampleKey;
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::tensor::{Real, Tensor};

/// Non-overlapping windows of `window` steps, each reduced to its
/// channelwise mean. The trailing remainder is dropped, so
/// `P = floor(T_raw / window)`.
pub fn segment_and_pool(rec: &ModalityRecord, window: usize, sample_id: u64) -> Result<Tensor<f64>> {
    if window == 0 {
        return Err(Error::Config(format!("window for `{}` must be at least 1", rec.modality)));
    }
    let (steps, channels) = (rec.steps(), rec.channels());
    if steps < window {
        return Err(Error::Ingestion {
            sample_id,
            reason: format!(
                "`{}` has {steps} steps, shorter than the window of {window}",
                rec.modality
            ),
        });
    }
    let patches = steps / window;
    let src = rec.series.data();
    let inv = 1.0 / window as f64;
    let mut out = vec![0.0; patches * channels];
    for p in 0..patches {
        for t in p * window..(p + 1) * window {
            for c in 0..channels {
                out[p * channels + c] += src[t * channels + c];
            }
        }
        for v in &mut out[p * channels..(p + 1) * channels] {
            *v *= inv;
        }
    }
    Tensor::new(vec![patches, channels], out)
}

/// Brings a `P × C` patch matrix to exactly `target` patches.
///
/// Longer inputs are subsampled at `round(j (P-1) / (target-1))`; shorter
/// inputs repeat their final patch.
pub fn temporal_align<T: Real>(patches: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    if target == 0 {
        return Err(Error::Config("alignment target must be at least 1".into()));
    }
    let (p, c) = (patches.shape()[0], patches.shape()[1]);
    let source_row = |j: usize| -> usize {
        if p > target {
            if target == 1 {
                0
            } else {
                ((j * (p - 1)) as f64 / (target - 1) as f64).round() as usize
            }
        } else {
            j.min(p - 1)
        }
    };
    let mut out = Vec::with_capacity(target * c);
    for j in 0..target {
        let r = source_row(j);
        out.extend_from_slice(&patches.data()[r * c..(r + 1) * c]);
    }
    Tensor::new(vec![target, c], out)
}

/// Per-modality window lengths and alignment targets. Missing entries are
/// resolved from the data: windows cover about half a second, targets are
/// the median patch count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodingConfig {
    pub windows: BTreeMap<String, usize>,
    pub target_patches: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedModality {
    pub name: String,
    /// `P_m`, aligned patch count.
    pub patches: usize,
    /// `D_m`, channels per patch.
    pub features: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample<T> {
    pub sample_id: u64,
    pub subject_id: u32,
    pub session_id: u32,
    pub label: usize,
    /// One `P_m × D_m` tensor per modality, in modality order.
    pub features: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDataset<T> {
    pub modalities: Vec<EncodedModality>,
    pub classes: Vec<String>,
    pub samples: Vec<EncodedSample<T>>,
    index: HashMap<u64, usize>,
}

impl<T: Real> EncodedDataset<T> {
    pub fn new(
        modalities: Vec<EncodedModality>,
        classes: Vec<String>,
        samples: Vec<EncodedSample<T>>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if index.insert(s.sample_id, i).is_some() {
                return Err(Error::Ingestion {
                    sample_id: s.sample_id,
                    reason: "duplicate sample_id".into(),
                });
            }
            if s.label >= classes.len() || s.features.len() != modalities.len() {
                return Err(Error::Ingestion {
                    sample_id: s.sample_id,
                    reason: "label or modality count out of range".into(),
                });
            }
            for (f, m) in s.features.iter().zip(&modalities) {
                if f.shape() != [m.patches, m.features] {
                    return Err(Error::Ingestion {
                        sample_id: s.sample_id,
                        reason: format!(
                            "`{}` features {:?}, expected [{}, {}]",
                            m.name,
                            f.shape(),
                            m.patches,
                            m.features
                        ),
                    });
                }
            }
        }
        Ok(EncodedDataset {
            modalities,
            classes,
            samples,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, sample_id: u64) -> Option<&EncodedSample<T>> {
        self.index.get(&sample_id).map(|&i| &self.samples[i])
    }

    pub fn keys(&self) -> Vec<SampleKey> {
        self.samples
            .iter()
            .map(|s| SampleKey {
                sample_id: s.sample_id,
                subject_id: s.subject_id,
                session_id: s.session_id,
            })
            .collect()
    }

    /// Keeps only the named modalities, in the given order.
    pub fn select_modalities(&self, names: &[&str]) -> Result<Self> {
        let picks: Vec<usize> = names
            .iter()
            .map(|n| {
                self.modalities
                    .iter()
                    .position(|m| m.name == *n)
                    .ok_or_else(|| Error::Config(format!("dataset has no modality `{n}`")))
            })
            .collect::<Result<_>>()?;
        let samples = self
            .samples
            .iter()
            .map(|s| EncodedSample {
                features: picks.iter().map(|&i| s.features[i].clone()).collect(),
                ..s.clone()
            })
            .collect();
        EncodedDataset::new(
            picks.iter().map(|&i| self.modalities[i].clone()).collect(),
            self.classes.clone(),
            samples,
        )
    }

    pub fn cast<U: Real>(&self) -> EncodedDataset<U> {
        EncodedDataset {
            modalities: self.modalities.clone(),
            classes: self.classes.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| EncodedSample {
                    sample_id: s.sample_id,
                    subject_id: s.subject_id,
                    session_id: s.session_id,
                    label: s.label,
                    features: s.features.iter().map(Tensor::cast).collect(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

fn default_window(rate: f64) -> usize {
    ((0.5 * rate).round() as usize).max(1)
}

/// Reads, pools and aligns every sample of a manifest.
///
/// Returns the dataset and the encoding with every default filled in.
pub fn load_encoded(
    root: &Path,
    manifest: &DatasetManifest,
    config: &EncodingConfig,
    mode: ExecMode,
) -> Result<(EncodedDataset<f64>, EncodingConfig)> {
    manifest.validate()?;
    for name in config.windows.keys().chain(config.target_patches.keys()) {
        if !manifest.modalities.iter().any(|m| &m.name == name) {
            return Err(Error::Config(format!("encoding names unknown modality `{name}`")));
        }
    }
    let mut resolved = EncodingConfig::default();
    for m in &manifest.modalities {
        let w = config
            .windows
            .get(&m.name)
            .copied()
            .unwrap_or_else(|| default_window(m.sample_rate));
        resolved.windows.insert(m.name.clone(), w);
    }

    let pooled: Vec<Vec<Tensor<f64>>> =
        exec::try_map(mode, manifest.samples.iter().collect(), |s| {
            manifest
                .modalities
                .iter()
                .map(|m| {
                    let rec = read_record(root, s, m)?;
                    segment_and_pool(&rec, resolved.windows[&m.name], s.sample_id)
                })
                .collect::<Result<Vec<_>>>()
        })?;

    let mut modalities = Vec::with_capacity(manifest.modalities.len());
    for (mi, m) in manifest.modalities.iter().enumerate() {
        let target = match config.target_patches.get(&m.name) {
            Some(&t) => t,
            None => {
                let mut counts: Vec<usize> = pooled.iter().map(|p| p[mi].shape()[0]).collect();
                counts.sort_unstable();
                counts.get((counts.len().max(1) - 1) / 2).copied().unwrap_or(1)
            }
        };
        resolved.target_patches.insert(m.name.clone(), target);
        modalities.push(EncodedModality {
            name: m.name.clone(),
            patches: target,
            features: m.channels,
        });
    }

    let mut samples = Vec::with_capacity(pooled.len());
    for (s, patches) in manifest.samples.iter().zip(pooled) {
        let features = patches
            .iter()
            .zip(&modalities)
            .map(|(p, m)| temporal_align(p, m.patches))
            .collect::<Result<Vec<_>>>()?;
        samples.push(EncodedSample {
            sample_id: s.sample_id,
            subject_id: s.subject_id,
            session_id: s.session_id,
            label: manifest.class_index(&s.label).expect("validated label"),
            features,
        });
    }
    let dataset = EncodedDataset::new(modalities, manifest.classes.clone(), samples)?;
    Ok((dataset, resolved))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(steps: usize, channels: usize, f: impl Fn(usize) -> f64) -> ModalityRecord {
        ModalityRecord {
            modality: "imu".into(),
            series: Tensor::from_fn(vec![steps, channels], f),
            sample_rate: 50.0,
        }
    }

    #[test]
    fn pooling_counts_and_means() {
        let rec = record(100, 2, |i| i as f64);
        assert_eq!(segment_and_pool(&rec, 10, 1).unwrap().shape(), &[10, 2]);

        let rec = record(37, 3, |_| 7.0);
        let p = segment_and_pool(&rec, 4, 1).unwrap();
        assert!(p.data().iter().all(|&v| v == 7.0));

        let rec = record(5, 1, |i| (i + 1) as f64);
        assert_eq!(segment_and_pool(&rec, 2, 1).unwrap().data(), &[1.5, 3.5]);
    }

    #[test]
    fn short_series_rejected_with_id() {
        let rec = record(3, 1, |_| 0.0);
        match segment_and_pool(&rec, 4, 42) {
            Err(Error::Ingestion { sample_id: 42, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn alignment_rules() {
        let t = Tensor::<f64>::from_fn(vec![9, 1], |i| i as f64);
        assert_eq!(temporal_align(&t, 9).unwrap(), t);
        assert_eq!(temporal_align(&t, 5).unwrap().data(), &[0., 2., 4., 6., 8.]);

        let one = Tensor::<f64>::from_f64(vec![1, 2], &[3.0, 4.0]).unwrap();
        assert_eq!(temporal_align(&one, 4).unwrap().data(), &[3., 4., 3., 4., 3., 4., 3., 4.]);

        let short = Tensor::<f64>::from_fn(vec![2, 1], |i| i as f64 + 1.0);
        assert_eq!(temporal_align(&short, 4).unwrap().data(), &[1., 2., 2., 2.]);
    }
}
