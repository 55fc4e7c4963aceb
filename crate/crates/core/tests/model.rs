mod common;

use common::*;
use mmfuse::data::EncodedModality;
use mmfuse::distill::teacher_loss;
use mmfuse::model::{ensemble_predict, predicted_label, ArchConfig, ModelConfig, Network, Role};
use mmfuse::nn::positional_encoding;
use mmfuse::{Error, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn input_vars(g: &mut Graph<f64>, batch: &mmfuse::data::EncodedBatch<f64>) -> Vec<Var> {
    batch.features.iter().map(|x| g.param(x.clone())).collect()
}

fn grad_norm(g: &Graph<f64>, v: Var) -> f64 {
    g.grad(v).unwrap().data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradient of modality 1's temporal stream with respect to modality 0's
/// input, before and after fusion.
fn cross_gradients(seed: u64) -> (Tensor<f64>, f64) {
    let net = micro_network(Role::Teacher, seed);
    let batch = random_batch(&micro_modalities(), 3, 2, seed + 100);

    let mut g = Graph::new();
    let p = net.bind(&mut g, true);
    let x = input_vars(&mut g, &batch);
    let streams = net.mstt_forward(&mut g, &p, &x).unwrap();
    let loss = weighted_sum(&mut g, streams[1].1, seed).unwrap();
    g.backward(loss).unwrap();
    let before = g.grad(x[0]).unwrap().clone();

    let mut g = Graph::new();
    let p = net.bind(&mut g, true);
    let x = input_vars(&mut g, &batch);
    let out = net.forward_vars(&mut g, &p, &x).unwrap();
    let loss = weighted_sum(&mut g, out.modalities[1].temporal_logits, seed).unwrap();
    g.backward(loss).unwrap();
    (before, grad_norm(&g, x[0]))
}

#[test]
fn streams_are_isolated_until_fusion() {
    for seed in 1..=5 {
        let (before, after) = cross_gradients(seed);
        assert!(before.data().iter().all(|&v| v == 0.0), "seed {seed}");
        assert!(after > 0.0, "seed {seed}");
    }
}

#[test]
fn spatial_head_ignores_other_modalities() {
    let net = micro_network(Role::Teacher, 9);
    let batch = random_batch(&micro_modalities(), 3, 2, 9);
    let mut g = Graph::new();
    let p = net.bind(&mut g, true);
    let x = input_vars(&mut g, &batch);
    let out = net.forward_vars(&mut g, &p, &x).unwrap();
    let loss = weighted_sum(&mut g, out.modalities[1].spatial_logits, 1).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(grad_norm(&g, x[0]), 0.0);
    assert!(grad_norm(&g, x[1]) > 0.0);
}

#[test]
fn sum_and_mean_ensembles_agree_on_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let m = 2 + trial % 3;
        let c = 3 + trial % 4;
        let mut g = Graph::<f64>::new();
        let combined: Vec<Tensor<f64>> = (0..m)
            .map(|_| Tensor::from_fn(vec![1, c], |_| 2.0 * rng.random::<f64>()))
            .collect();
        let vars: Vec<Var> = combined.iter().map(|t| g.constant(t.clone())).collect();
        let mean = ensemble_predict(&mut g, &vars).unwrap();
        let sum: Vec<f64> = (0..c).map(|k| combined.iter().map(|t| t.data()[k]).sum()).collect();
        assert_eq!(predicted_label(g.value(mean).data()), predicted_label(&sum));
    }
}

#[test]
fn ensemble_rows_are_normalized() {
    let net = micro_network(Role::Teacher, 2);
    let out = net.infer(&random_batch(&micro_modalities(), 3, 4, 2)).unwrap();
    for row in out.ensemble.rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for m in &out.modalities {
        for row in m.combined.rows() {
            assert!((row.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        }
    }
}

#[test]
fn ties_go_to_lowest_class() {
    assert_eq!(predicted_label(&[0.2, 0.4, 0.4]), 1);
    assert_eq!(predicted_label(&[0.5, 0.5]), 0);
}

#[test]
fn single_modality_teacher_reduces_to_student() {
    let arch = ArchConfig {
        teacher_mstt_layers: 1,
        ..micro_arch()
    };
    let mods = vec![modality("a", 3, 4)];
    let teacher = Network::<f64>::assemble(ModelConfig::new(&arch, Role::Teacher, mods.clone(), 3), Role::Teacher, 8).unwrap();
    let student = Network::<f64>::new(ModelConfig::new(&arch, Role::Student, mods.clone(), 3), Role::Student, 8).unwrap();
    assert!(teacher.fusion().is_empty());
    let batch = random_batch(&mods, 3, 4, 8);
    assert_eq!(teacher.infer(&batch).unwrap(), student.infer(&batch).unwrap());
}

#[test]
fn single_modality_teacher_rejected() {
    let cfg = ModelConfig::new(&micro_arch(), Role::Teacher, vec![modality("a", 3, 4)], 3);
    assert!(matches!(Network::<f64>::new(cfg, Role::Teacher, 1), Err(Error::Config(_))));
}

#[test]
fn every_parameter_receives_gradient() {
    for role in [Role::Teacher, Role::Student] {
        let net = micro_network(role, 6);
        let batch = random_batch(&micro_modalities(), 3, 4, 6);
        let mut g = Graph::new();
        let p = net.bind(&mut g, true);
        let out = net.forward(&mut g, &p, &batch).unwrap();
        let loss = teacher_loss(&mut g, &out, &batch.labels).unwrap();
        g.backward(loss).unwrap();
        let grads = net.store().grads(&g, &p).unwrap();
        for (id, grad) in net.store().ids().zip(&grads) {
            assert!(
                grad.data().iter().any(|&v| v != 0.0),
                "{role}: `{}` has an all-zero gradient",
                net.store().name(id)
            );
        }
    }
}

#[test]
fn wrong_input_shape_is_a_dimension_error() {
    let net = micro_network(Role::Student, 1);
    let mut batch = random_batch(&micro_modalities(), 3, 2, 1);
    batch.features[1] = Tensor::zeros(vec![2, 4, 4]);
    assert!(matches!(net.infer(&batch), Err(Error::Dimension(_))));
}

#[test]
fn spatial_positions_follow_closed_form() {
    for (patches, features) in [(3, 4), (4, 2), (5, 3)] {
        let mods = vec![modality("a", patches, features), modality("b", 2, 2)];
        let net = Network::<f64>::new(ModelConfig::new(&micro_arch(), Role::Student, mods, 3), Role::Student, 1).unwrap();
        let table = &net.streams()[0].spatial_pos.0;
        assert_eq!(table.shape(), &[features + 1, patches]);
        let even = patches + patches % 2;
        for pos in 0..=features {
            for col in 0..patches {
                let i = (col / 2) as f64;
                let angle = pos as f64 / 10000f64.powf(2.0 * i / even as f64);
                let expected = if col % 2 == 0 { angle.sin() } else { angle.cos() };
                assert!((table.at(&[pos, col]) - expected).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn positional_encoding_at_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pe = positional_encoding::<f64>(200, 64).unwrap();
    for _ in 0..100 {
        let pos = rng.random_range(0..200);
        let i = rng.random_range(0..32);
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / 64.0);
        assert!((pe.at(&[pos, 2 * i]) - angle.sin()).abs() < 1e-12);
        assert!((pe.at(&[pos, 2 * i + 1]) - angle.cos()).abs() < 1e-12);
    }
}

fn default_modalities() -> Vec<EncodedModality> {
    vec![modality("inertial", 5, 6), modality("skeleton", 5, 9), modality("visual", 5, 12)]
}

#[test]
fn default_teacher_is_much_larger_than_student() {
    let arch = ArchConfig::default();
    let t = Network::<f32>::new(ModelConfig::new(&arch, Role::Teacher, default_modalities(), 6), Role::Teacher, 1).unwrap();
    let s = Network::<f32>::new(ModelConfig::new(&arch, Role::Student, default_modalities(), 6), Role::Student, 1).unwrap();
    assert!(t.param_count() as f64 >= 2.5 * s.param_count() as f64);
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (role, sub) in [(Role::Teacher, "t"), (Role::Student, "s")] {
        let net = micro_network(role, 12).cast_to_f32();
        let path = dir.path().join(sub);
        net.save(&path).unwrap();
        let back = Network::<f32>::load(&path).unwrap();
        assert_eq!(back.role(), role);
        assert_eq!(back.config(), net.config());
        let batch = random_batch(&micro_modalities(), 3, 3, 12);
        let batch = mmfuse::data::EncodedBatch {
            features: batch.features.iter().map(Tensor::cast).collect(),
            labels: batch.labels,
            sample_ids: batch.sample_ids,
        };
        assert_eq!(net.infer(&batch).unwrap(), back.infer(&batch).unwrap());
    }
}

#[test]
fn checkpoint_with_missing_slot_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let net = micro_network(Role::Student, 1).cast_to_f32();
    net.save(dir.path()).unwrap();
    let params = dir.path().join("params.bin");
    let bytes = std::fs::read(&params).unwrap();
    std::fs::write(&params, &bytes[..bytes.len() - 4]).unwrap();
    assert!(Network::<f32>::load(dir.path()).is_err());
}

trait CastToF32 {
    fn cast_to_f32(&self) -> Network<f32>;
}

impl CastToF32 for Network<f64> {
    fn cast_to_f32(&self) -> Network<f32> {
        let mut out = Network::<f32>::assemble(self.config().clone(), self.role(), 0).unwrap();
        out.cast_from(self).unwrap();
        out
    }
}
