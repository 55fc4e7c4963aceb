//! Teacher and student networks.
//!
//! Both share the per-modality stream layout: a spatial stream over the
//! transposed features (class token + sinusoidal positions) and a temporal
//! stream over the patches (class token only), each with its own encoder
//! stack and linear head. The teacher additionally runs every pair of
//! temporal streams through fusion-token encoder layers and averages the
//! per-pair results for each modality.

mod checkpoint;
mod network;

pub use checkpoint::{CheckpointManifest, SlotEntry};
pub use network::{
    ensemble_predict, predicted_label, tmt_aggregate, FusedPair, ForwardOutputs, Inference,
    ModalityInference, ModalityOutputs, Network, PairFusion, PreparedStreams, StreamParams,
};

use serde::{Deserialize, Serialize};

use crate::data::EncodedModality;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        })
    }
}

/// Architecture hyperparameters shared by experiment configs. Input
/// geometry and class count come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub teacher_mstt_layers: usize,
    pub student_mstt_layers: usize,
    pub tmt_layers: usize,
    pub fusion_tokens: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            d_model: 64,
            heads: 4,
            ff_dim: 256,
            teacher_mstt_layers: 4,
            student_mstt_layers: 1,
            tmt_layers: 2,
            fusion_tokens: 4,
        }
    }
}

/// Full description of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub modalities: Vec<EncodedModality>,
    pub classes: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub mstt_layers: usize,
    /// Zero for students.
    pub tmt_layers: usize,
    /// Zero for students.
    pub fusion_tokens: usize,
}

impl ModelConfig {
    pub fn new(arch: &ArchConfig, role: Role, modalities: Vec<EncodedModality>, classes: usize) -> Self {
        let (mstt_layers, tmt_layers, fusion_tokens) = match role {
            Role::Teacher => (arch.teacher_mstt_layers, arch.tmt_layers, arch.fusion_tokens),
            Role::Student => (arch.student_mstt_layers, 0, 0),
        };
        ModelConfig {
            modalities,
            classes,
            d_model: arch.d_model,
            heads: arch.heads,
            ff_dim: arch.ff_dim,
            mstt_layers,
            tmt_layers,
            fusion_tokens,
        }
    }

    /// Structural checks shared by both roles.
    pub fn validate_shape(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("model needs at least one modality".into()));
        }
        if self.classes == 0 {
            return Err(Error::Config("model needs at least one class".into()));
        }
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.ff_dim == 0 || self.mstt_layers == 0 {
            return Err(Error::Config("ff_dim and mstt_layers must be at least 1".into()));
        }
        if let Some(m) = self.modalities.iter().find(|m| m.patches == 0 || m.features == 0) {
            return Err(Error::Config(format!("modality `{}` has an empty input", m.name)));
        }
        Ok(())
    }

    pub fn validate(&self, role: Role) -> Result<()> {
        self.validate_shape()?;
        match role {
            Role::Teacher => {
                if self.modalities.len() < 2 {
                    return Err(Error::Config(format!(
                        "teacher mid-fusion needs at least 2 modalities, got {}",
                        self.modalities.len()
                    )));
                }
                if self.fusion_tokens == 0 || self.tmt_layers == 0 {
                    return Err(Error::Config(
                        "teacher needs fusion_tokens >= 1 and tmt_layers >= 1".into(),
                    ));
                }
            }
            Role::Student => {
                if self.fusion_tokens != 0 || self.tmt_layers != 0 {
                    return Err(Error::Config("student has no fusion stages".into()));
                }
            }
        }
        Ok(())
    }

    /// Unordered modality pairs `(i, j)`, `i < j`, in lexicographic order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let m = self.modalities.len();
        (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect()
    }
}
