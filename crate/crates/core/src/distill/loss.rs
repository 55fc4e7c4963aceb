use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOutputs, Inference};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Which distribution leads the KL divergence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlOrientation {
    /// `Σ p_s log(p_s / p_t)`
    #[default]
    StudentLed,
    /// `Σ p_t log(p_t / p_s)`
    TeacherLed,
}

/// Distillation weights and temperature.
///
/// Empty weight vectors are filled in by [`KdConfig::resolve`], splitting
/// `1 - w_cs` evenly over the `2M` stream terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    pub temperature: f64,
    pub w_cs: f64,
    pub w_spatial: Vec<f64>,
    pub w_temporal: Vec<f64>,
    /// Multiply every soft term by `temperature²`.
    pub scale_by_temperature_sq: bool,
    pub orientation: KlOrientation,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            temperature: 4.0,
            w_cs: 0.5,
            w_spatial: Vec::new(),
            w_temporal: Vec::new(),
            scale_by_temperature_sq: true,
            orientation: KlOrientation::StudentLed,
        }
    }
}

impl KdConfig {
    /// Hard-label-only weights.
    pub fn hard_only(modalities: usize) -> Self {
        KdConfig {
            w_cs: 1.0,
            w_spatial: vec![0.0; modalities],
            w_temporal: vec![0.0; modalities],
            ..KdConfig::default()
        }
    }

    /// Fills default weights and checks the weight constraint.
    pub fn resolve(&mut self, modalities: usize) -> Result<()> {
        if self.w_spatial.is_empty() && self.w_temporal.is_empty() {
            let each = (1.0 - self.w_cs) / (2 * modalities) as f64;
            self.w_spatial = vec![each; modalities];
            self.w_temporal = vec![each; modalities];
        }
        self.validate(modalities)
    }

    pub fn validate(&self, modalities: usize) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.w_spatial.len() != modalities || self.w_temporal.len() != modalities {
            return Err(Error::Config(format!(
                "need {modalities} spatial and temporal weights, got {} and {}",
                self.w_spatial.len(),
                self.w_temporal.len()
            )));
        }
        let all = std::iter::once(self.w_cs)
            .chain(self.w_spatial.iter().copied())
            .chain(self.w_temporal.iter().copied());
        let mut total = 0.0;
        for w in all {
            if !(w >= 0.0) {
                return Err(Error::Config(format!("loss weight {w} is negative")));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("loss weights sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// `softmax(logits / temp)` along the last axis.
pub fn soft_probs<T: Real>(g: &mut Graph<T>, logits: Var, temp: f64) -> Result<Var> {
    if !(temp > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temp}")));
    }
    let scaled = g.scale(logits, T::one() / T::of(temp))?;
    g.softmax_lastdim(scaled)
}

/// Batch mean of the row-wise KL divergence between two `B × C`
/// probability tensors. `teacher` should be a constant.
pub fn kl_div<T: Real>(g: &mut Graph<T>, student: Var, teacher: Var, orientation: KlOrientation) -> Result<Var> {
    if g.shape(student) != g.shape(teacher) {
        return Err(Error::Dimension(format!(
            "kl_div: student {:?} vs teacher {:?}",
            g.shape(student),
            g.shape(teacher)
        )));
    }
    let batch = g.shape(student)[0];
    let floor = T::of(PROB_FLOOR);
    let (lead, other) = match orientation {
        KlOrientation::StudentLed => (student, teacher),
        KlOrientation::TeacherLed => (teacher, student),
    };
    let log_lead = g.log(lead, floor)?;
    let log_other = g.log(other, floor)?;
    let diff = g.sub(log_lead, log_other)?;
    let weighted = g.mul(lead, diff)?;
    let total = g.sum(weighted)?;
    g.scale(total, T::one() / T::of(batch as f64))
}

/// `-mean log p[label]` over a `B × C` probability tensor.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "cross_entropy: probabilities {shape:?} for {} labels",
            labels.len()
        )));
    }
    let classes = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Bounds(format!("label {bad} with {classes} classes")));
    }
    let onehot = Tensor::from_fn(shape.clone(), |i| {
        if labels[i / classes] == i % classes {
            T::one()
        } else {
            T::zero()
        }
    });
    let mask = g.constant(onehot);
    let logp = g.log(probs, T::of(PROB_FLOOR))?;
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked)?;
    g.scale(total, -T::one() / T::of(labels.len() as f64))
}

/// Cross entropy of the normalized ensemble prediction.
pub fn teacher_loss<T: Real>(g: &mut Graph<T>, out: &ForwardOutputs, labels: &[usize]) -> Result<Var> {
    cross_entropy(g, out.ensemble, labels)
}

/// Weighted hard + soft objective. Terms with zero weight are skipped.
pub fn student_loss<T: Real>(
    g: &mut Graph<T>,
    student: &ForwardOutputs,
    teacher: &Inference<T>,
    labels: &[usize],
    kd: &KdConfig,
) -> Result<Var> {
    let m = student.modalities.len();
    kd.validate(m)?;
    if teacher.modalities.len() != m {
        return Err(Error::Config(format!(
            "teacher has {} modalities, student {m}",
            teacher.modalities.len()
        )));
    }
    let mut loss = None;
    let mut add_term = |g: &mut Graph<T>, term: Var, weight: f64| -> Result<()> {
        let scaled = g.scale(term, T::of(weight))?;
        loss = Some(match loss {
            None => scaled,
            Some(acc) => g.add(acc, scaled)?,
        });
        Ok(())
    };
    if kd.w_cs > 0.0 {
        let ce = cross_entropy(g, student.ensemble, labels)?;
        add_term(g, ce, kd.w_cs)?;
    }
    let soft_scale = if kd.scale_by_temperature_sq {
        kd.temperature * kd.temperature
    } else {
        1.0
    };
    for (mi, (s, t)) in student.modalities.iter().zip(&teacher.modalities).enumerate() {
        let streams = [
            (s.spatial_logits, &t.spatial_logits, kd.w_spatial[mi]),
            (s.temporal_logits, &t.temporal_logits, kd.w_temporal[mi]),
        ];
        for (student_logits, teacher_logits, w) in streams {
            if w == 0.0 {
                continue;
            }
            let ps = soft_probs(g, student_logits, kd.temperature)?;
            let tl = g.constant(teacher_logits.clone());
            let pt = soft_probs(g, tl, kd.temperature)?;
            let kl = kl_div(g, ps, pt, kd.orientation)?;
            add_term(g, kl, w * soft_scale)?;
        }
    }
    loss.ok_or_else(|| Error::Config("every loss weight is zero".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(g: &mut Graph<f64>, rows: &[&[f64]]) -> Var {
        let c = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        g.constant(Tensor::from_f64(vec![rows.len(), c], &flat).unwrap())
    }

    #[test]
    fn temperature_one_is_softmax() {
        let mut g = Graph::<f64>::new();
        let x = probs(&mut g, &[&[0.3, -1.2, 2.0]]);
        let a = soft_probs(&mut g, x, 1.0).unwrap();
        let b = g.softmax_lastdim(x).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn large_temperature_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = probs(&mut g, &[&[3.0, 1.0, -2.0]]);
        let p = soft_probs(&mut g, x, 1e6).unwrap();
        assert!(g.value(p).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-5));
    }

    #[test]
    fn temperature_two_hand_case() {
        let mut g = Graph::<f64>::new();
        let x = probs(&mut g, &[&[2.0, 0.0]]);
        let p = soft_probs(&mut g, x, 2.0).unwrap();
        let z = 1f64.exp() + 1.0;
        let v = g.value(p).data();
        assert!((v[0] - 1f64.exp() / z).abs() < 1e-12);
        assert!((v[0] - 0.7311).abs() < 1e-4 && (v[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let mut g = Graph::<f64>::new();
        let x = probs(&mut g, &[&[1.0, 0.0]]);
        assert!(matches!(soft_probs(&mut g, x, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn kl_hand_case_and_identity() {
        let mut g = Graph::<f64>::new();
        let s = probs(&mut g, &[&[0.5, 0.5]]);
        let t = probs(&mut g, &[&[0.9, 0.1]]);
        let kl = kl_div(&mut g, s, t, KlOrientation::StudentLed).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((g.value(kl).item() - expected).abs() < 1e-12);
        assert!((expected - 0.5108).abs() < 1e-4);

        let same = kl_div(&mut g, s, s, KlOrientation::StudentLed).unwrap();
        assert!(g.value(same).item().abs() <= 1e-9);
    }

    #[test]
    fn ce_closed_forms() {
        let mut g = Graph::<f64>::new();
        let onehot = probs(&mut g, &[&[0.0, 1.0, 0.0]]);
        let l = cross_entropy(&mut g, onehot, &[1]).unwrap();
        assert!(g.value(l).item().abs() < 1e-6);
        let uniform = probs(&mut g, &[&[0.25; 4], &[0.25; 4]]);
        let l = cross_entropy(&mut g, uniform, &[0, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let mut kd = KdConfig::default();
        kd.resolve(3).unwrap();
        assert_eq!(kd.w_spatial.len(), 3);
        let bad = KdConfig {
            w_cs: 0.6,
            w_spatial: vec![0.1, 0.1],
            w_temporal: vec![0.1, 0.2],
            ..KdConfig::default()
        };
        assert!(matches!(bad.validate(2), Err(Error::Config(_))));
    }
}
