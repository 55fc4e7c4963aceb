//! Synthetic multi-modal activity data.
//!
//! Each class owns a smooth latent trajectory `z_k(t)` in a small latent
//! space. Modality `m` observes `A_m z(t)` plus noise, where `A_m` is a
//! random projection with one latent direction `u_m` removed. Classes
//! `2m` and `2m + 1` differ only along `u_m`, so modality `m` alone cannot
//! separate them while every other modality can. Subjects add a persistent
//! per-channel offset and a time-scale in `[0.9, 1.1]`.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_record, DatasetManifest, ModalityInfo, SampleEntry};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticModality {
    pub name: String,
    pub channels: usize,
    pub sample_rate: f64,
    /// Standard deviation of the additive observation noise.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub subjects: usize,
    pub sessions: usize,
    /// Repetitions of every class per subject and session.
    pub trials: usize,
    pub modalities: Vec<SyntheticModality>,
    /// Standard deviation of the per-subject channel offsets.
    pub subject_bias: f64,
    /// Nominal recording length in seconds.
    pub duration: f64,
    /// Relative spread of recording lengths, `duration * U(1 - j, 1 + j)`.
    pub duration_jitter: f64,
    pub latent_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let modality = |name: &str, channels, sample_rate| SyntheticModality {
            name: name.into(),
            channels,
            sample_rate,
            noise: 0.8,
        };
        SyntheticSpec {
            classes: 6,
            subjects: 8,
            sessions: 2,
            trials: 2,
            modalities: vec![
                modality("inertial", 6, 50.0),
                modality("skeleton", 9, 30.0),
                modality("visual", 12, 15.0),
            ],
            subject_bias: 0.5,
            duration: 3.0,
            duration_jitter: 0.15,
            latent_dim: 6,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("classes", self.classes),
            ("subjects", self.subjects),
            ("sessions", self.sessions),
            ("trials", self.trials),
            ("latent_dim", self.latent_dim),
            ("modalities", self.modalities.len()),
        ];
        if let Some((field, _)) = counts.iter().find(|(_, n)| *n == 0) {
            return Err(Error::Config(format!("`{field}` must be at least 1")));
        }
        for m in &self.modalities {
            if m.channels == 0 {
                return Err(Error::Config(format!("modality `{}`: `channels` must be at least 1", m.name)));
            }
            if !(m.sample_rate > 0.0) || !m.sample_rate.is_finite() {
                return Err(Error::Config(format!("modality `{}`: `sample_rate` must be positive", m.name)));
            }
            if !(m.noise >= 0.0) {
                return Err(Error::Config(format!("modality `{}`: `noise` must be non-negative", m.name)));
            }
        }
        let mut names: Vec<_> = self.modalities.iter().map(|m| &m.name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.modalities.len() {
            return Err(Error::Config("modality names must be unique".into()));
        }
        if !(self.duration > 0.0) || !(0.0..1.0).contains(&self.duration_jitter) {
            return Err(Error::Config("`duration` must be positive and `duration_jitter` in [0, 1)".into()));
        }
        if !(self.subject_bias >= 0.0) {
            return Err(Error::Config("`subject_bias` must be non-negative".into()));
        }
        Ok(())
    }
}

/// Latent trajectory: per latent channel, a sum of three sinusoids.
#[derive(Clone, Debug)]
struct Trajectory {
    // [channel][harmonic] = (amplitude, frequency Hz, phase)
    waves: Vec<Vec<(f64, f64, f64)>>,
}

impl Trajectory {
    fn random(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let waves = (0..dim)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        (
                            rng.random_range(0.5..1.0),
                            rng.random_range(0.3..2.0),
                            rng.random_range(0.0..TAU),
                        )
                    })
                    .collect()
            })
            .collect();
        Trajectory { waves }
    }

    fn eval(&self, t: f64) -> Vec<f64> {
        self.waves
            .iter()
            .map(|ws| ws.iter().map(|&(a, f, p)| a * (TAU * f * t + p).sin()).sum())
            .collect()
    }
}

struct ClassPrototype {
    base: Trajectory,
    /// Extra motion along one latent direction (blind pair partner).
    detour: Option<(Vec<f64>, Trajectory)>,
}

impl ClassPrototype {
    fn latent(&self, t: f64) -> Vec<f64> {
        let mut z = self.base.eval(t);
        if let Some((dir, wave)) = &self.detour {
            let s = wave.eval(t)[0];
            for (zi, di) in z.iter_mut().zip(dir) {
                *zi += 1.5 * s * di;
            }
        }
        z
    }
}

struct Generator {
    prototypes: Vec<ClassPrototype>,
    /// Per modality `C_m × Z`, row-major.
    projections: Vec<Vec<f64>>,
    /// Per subject, per modality channel offsets.
    offsets: Vec<Vec<Vec<f64>>>,
    time_scales: Vec<f64>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl Generator {
    fn new(spec: &SyntheticSpec) -> Self {
        let z = spec.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let blind: Vec<Vec<f64>> = spec.modalities.iter().map(|_| unit_vector(&mut rng, z)).collect();

        let mut prototypes: Vec<ClassPrototype> = Vec::with_capacity(spec.classes);
        for k in 0..spec.classes {
            let partner = k % 2 == 1 && k / 2 < blind.len();
            if partner {
                let base = prototypes[k - 1].base.clone();
                let detour = (blind[k / 2].clone(), Trajectory::random(&mut rng, 1));
                prototypes.push(ClassPrototype {
                    base,
                    detour: Some(detour),
                });
            } else {
                prototypes.push(ClassPrototype {
                    base: Trajectory::random(&mut rng, z),
                    detour: None,
                });
            }
        }

        let projections = spec
            .modalities
            .iter()
            .zip(&blind)
            .map(|(m, u)| {
                let scale = 1.0 / (z as f64).sqrt();
                let raw: Vec<f64> = (0..m.channels * z)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        scale * v
                    })
                    .collect();
                // A (I - u uᵀ): the modality cannot see direction u
                let mut a = raw.clone();
                for c in 0..m.channels {
                    let row = &raw[c * z..(c + 1) * z];
                    let dot: f64 = row.iter().zip(u).map(|(x, y)| x * y).sum();
                    for j in 0..z {
                        a[c * z + j] -= dot * u[j];
                    }
                }
                a
            })
            .collect();

        let bias = Normal::new(0.0, spec.subject_bias.max(0.0)).expect("valid std");
        let mut offsets = Vec::with_capacity(spec.subjects);
        let mut time_scales = Vec::with_capacity(spec.subjects);
        for _ in 0..spec.subjects {
            offsets.push(
                spec.modalities
                    .iter()
                    .map(|m| (0..m.channels).map(|_| bias.sample(&mut rng)).collect())
                    .collect(),
            );
            time_scales.push(if spec.subject_bias > 0.0 {
                rng.random_range(0.9..=1.1)
            } else {
                1.0
            });
        }
        Generator {
            prototypes,
            projections,
            offsets,
            time_scales,
        }
    }
}

struct Plan {
    entry: SampleEntry,
    subject: usize,
    class: usize,
}

fn sample_seed(seed: u64, sample_id: u64) -> u64 {
    seed ^ sample_id.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn render(spec: &SyntheticSpec, gen: &Generator, plan: &Plan) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, plan.entry.sample_id));
    let jitter = spec.duration_jitter;
    let length = spec.duration * rng.random_range(1.0 - jitter..=1.0 + jitter);
    let shift = rng.random_range(0.0..0.25);
    let warp = gen.time_scales[plan.subject];
    let proto = &gen.prototypes[plan.class];
    let z = spec.latent_dim;
    spec.modalities
        .iter()
        .enumerate()
        .map(|(mi, m)| {
            let noise = Normal::new(0.0, m.noise).expect("valid std");
            let steps = ((length * m.sample_rate).floor() as usize).max(1);
            let a = &gen.projections[mi];
            let offset = &gen.offsets[plan.subject][mi];
            let mut data = Vec::with_capacity(steps * m.channels);
            for i in 0..steps {
                let t = (i as f64 / m.sample_rate + shift) * warp;
                let lat = proto.latent(t);
                for c in 0..m.channels {
                    let clean: f64 = (0..z).map(|j| a[c * z + j] * lat[j]).sum();
                    data.push(clean + offset[c] + noise.sample(&mut rng));
                }
            }
            Tensor::new(vec![steps, m.channels], data).expect("consistent shape")
        })
        .collect()
}

/// Writes a synthetic dataset under `out` and returns its manifest.
///
/// Output is byte-identical for identical specs regardless of `mode`.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path, mode: ExecMode) -> Result<DatasetManifest> {
    spec.validate()?;
    let gen = Generator::new(spec);
    let classes: Vec<String> = (0..spec.classes).map(|k| format!("activity_{k:02}")).collect();

    let mut plans = Vec::new();
    let mut next_id = 1u64;
    for subject in 0..spec.subjects {
        for session in 0..spec.sessions {
            for _trial in 0..spec.trials {
                for (class, label) in classes.iter().enumerate() {
                    let files: BTreeMap<String, String> = spec
                        .modalities
                        .iter()
                        .map(|m| (m.name.clone(), format!("samples/{next_id}/{}.csv", m.name)))
                        .collect();
                    plans.push(Plan {
                        entry: SampleEntry {
                            sample_id: next_id,
                            subject_id: subject as u32 + 1,
                            session_id: session as u32 + 1,
                            label: label.clone(),
                            files,
                        },
                        subject,
                        class,
                    });
                    next_id += 1;
                }
            }
        }
    }

    fs::create_dir_all(out.join("samples")).map_err(|e| Error::io(out, e))?;
    exec::try_map(mode, plans.iter().collect(), |plan: &Plan| -> Result<()> {
        let dir = out.join("samples").join(plan.entry.sample_id.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (m, series) in spec.modalities.iter().zip(render(spec, &gen, plan)) {
            write_record(&out.join(&plan.entry.files[&m.name]), &series)?;
        }
        Ok(())
    })?;

    let manifest = DatasetManifest {
        modalities: spec
            .modalities
            .iter()
            .map(|m| ModalityInfo {
                name: m.name.clone(),
                channels: m.channels,
                sample_rate: m.sample_rate,
            })
            .collect(),
        classes,
        samples: plans.into_iter().map(|p| p.entry).collect(),
    };
    manifest.write(out)?;
    Ok(manifest)
}
