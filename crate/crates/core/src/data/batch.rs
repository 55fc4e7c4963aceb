use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encode::EncodedDataset;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Stacked model input for `B` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch<T> {
    /// Per modality `B × P_m × D_m`.
    pub features: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<u64>,
}

impl<T: Real> EncodedBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(data: &EncodedDataset<T>, ids: &[u64]) -> Result<Self> {
        let samples = ids
            .iter()
            .map(|&id| {
                data.get(id).ok_or_else(|| Error::Ingestion {
                    sample_id: id,
                    reason: "not in the encoded dataset".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let features = data
            .modalities
            .iter()
            .enumerate()
            .map(|(mi, m)| {
                let mut values = Vec::with_capacity(ids.len() * m.patches * m.features);
                for s in &samples {
                    values.extend_from_slice(s.features[mi].data());
                }
                Tensor::new(vec![ids.len(), m.patches, m.features], values)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedBatch {
            features,
            labels: samples.iter().map(|s| s.label).collect(),
            sample_ids: ids.to_vec(),
        })
    }
}

/// Iteration order for [`batch_iter`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchOrder {
    /// Ids in the order given (evaluation).
    Sequential,
    /// A fresh permutation per `(seed, epoch)`.
    Shuffled { seed: u64, epoch: usize },
}

/// Full batches of `batch_size` plus one ragged tail.
pub fn batch_iter<'a, T: Real>(
    data: &'a EncodedDataset<T>,
    ids: &[u64],
    batch_size: usize,
    order: BatchOrder,
) -> Result<impl Iterator<Item = Result<EncodedBatch<T>>> + 'a> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if ids.is_empty() {
        return Err(Error::Config("cannot iterate an empty split side".into()));
    }
    let mut ids = ids.to_vec();
    if let BatchOrder::Shuffled { seed, epoch } = order {
        let mixed = seed
            .wrapping_mul(0x2545_F491_4F6C_DD1D)
            .wrapping_add(epoch as u64 + 1);
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
    }
    let chunks: Vec<Vec<u64>> = ids.chunks(batch_size).map(<[u64]>::to_vec).collect();
    Ok(chunks
        .into_iter()
        .map(move |chunk| EncodedBatch::gather(data, &chunk)))
}
