#![allow(dead_code)]

use mmfuse::data::{EncodedBatch, EncodedModality};
use mmfuse::model::{ArchConfig, ModelConfig, Network, Role};
use mmfuse::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-14 {
        diff
    } else {
        diff / scale
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| scale * (2.0 * rng.random::<f64>() - 1.0))
}

/// Compares reverse-mode gradients of a scalar function of `inputs`
/// against central differences. Returns the worst norm-wise relative
/// error over the inputs.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_f64_vec()).collect();

    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars).unwrap();
        g.value(loss).item()
    };

    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_error(a, &numeric));
    }
    worst
}

/// Same check over every parameter of a network.
pub fn check_network<F>(net: &mut Network<f64>, loss_of: F) -> f64
where
    F: Fn(&Network<f64>, &mut Graph<f64>, &mmfuse::nn::Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = net.bind(&mut g, true);
    let loss = loss_of(net, &mut g, &bound).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<f64> = net
        .store()
        .grads(&g, &bound)
        .unwrap()
        .iter()
        .flat_map(|t| t.to_f64_vec())
        .collect();

    let value = |net: &Network<f64>| -> f64 {
        let mut g = Graph::new();
        let bound = net.bind(&mut g, false);
        let loss = loss_of(net, &mut g, &bound).unwrap();
        g.value(loss).item()
    };

    let mut numeric = Vec::with_capacity(analytic.len());
    let slots = net.store().len();
    for s in 0..slots {
        let n = net.store().tensors()[s].len();
        for j in 0..n {
            let orig = net.store().tensors()[s].data()[j];
            net.store_mut().tensors_mut()[s].data_mut()[j] = orig + FD_STEP;
            let up = value(net);
            net.store_mut().tensors_mut()[s].data_mut()[j] = orig - FD_STEP;
            let down = value(net);
            net.store_mut().tensors_mut()[s].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    rel_error(&analytic, &numeric)
}

pub fn modality(name: &str, patches: usize, features: usize) -> EncodedModality {
    EncodedModality {
        name: name.into(),
        patches,
        features,
    }
}

/// `D = 4`, `P = 3`, two modalities, three classes.
pub fn micro_modalities() -> Vec<EncodedModality> {
    vec![modality("a", 3, 4), modality("b", 3, 4)]
}

pub fn micro_arch() -> ArchConfig {
    ArchConfig {
        d_model: 8,
        heads: 2,
        ff_dim: 12,
        teacher_mstt_layers: 1,
        student_mstt_layers: 1,
        tmt_layers: 1,
        fusion_tokens: 2,
    }
}

pub fn micro_network(role: Role, seed: u64) -> Network<f64> {
    let cfg = ModelConfig::new(&micro_arch(), role, micro_modalities(), 3);
    Network::new(cfg, role, seed).unwrap()
}

pub fn random_batch(modalities: &[EncodedModality], classes: usize, batch: usize, seed: u64) -> EncodedBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EncodedBatch {
        features: modalities
            .iter()
            .map(|m| random_tensor(&mut rng, &[batch, m.patches, m.features], 1.0))
            .collect(),
        labels: (0..batch).map(|_| rng.random_range(0..classes)).collect(),
        sample_ids: (1..=batch as u64).collect(),
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// A differentiable building block reduced to a scalar.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

/// `Σ x ⊙ W` for a fixed random `W`, so every output element gets a
/// distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, g.shape(x), 1.0);
    let w = g.constant(w);
    let prod = g.mul(x, w)?;
    g.sum(prod)
}

/// Random inputs bounded away from zero, for kinked functions.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = 0.2 + 0.8 * rng.random::<f64>();
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| 0.1 + rng.random::<f64>())
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

pub fn primitive_cases() -> Vec<GradCase> {
    use mmfuse::distill::{cross_entropy, kl_div, soft_probs, KlOrientation};
    use mmfuse::nn::{attention, encoder_layer, multi_head_attention, EncoderLayerParams, Init, ParamStore};

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| random_tensor(rng, s, 1.0);
    let mut cases = vec![
        case("matmul_batched", vec![r(&mut rng, &[2, 3, 4]), r(&mut rng, &[2, 4, 5])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 1)
        }),
        case("matmul_shared_rhs", vec![r(&mut rng, &[2, 3, 4]), r(&mut rng, &[4, 5])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 2)
        }),
        case("add", vec![r(&mut rng, &[3, 4]), r(&mut rng, &[3, 4])], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 3)
        }),
        case("sub", vec![r(&mut rng, &[3, 4]), r(&mut rng, &[3, 4])], |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y, 4)
        }),
        case("mul", vec![r(&mut rng, &[3, 4]), r(&mut rng, &[3, 4])], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 5)
        }),
        case("add_broadcast", vec![r(&mut rng, &[2, 3, 4]), r(&mut rng, &[3, 4])], |g, v| {
            let y = g.add_broadcast(v[0], v[1])?;
            weighted_sum(g, y, 6)
        }),
        case("scale", vec![r(&mut rng, &[3, 4])], |g, v| {
            let y = g.scale(v[0], -1.7)?;
            weighted_sum(g, y, 7)
        }),
        case("gelu", vec![random_tensor(&mut rng, &[4, 5], 3.0)], |g, v| {
            let y = g.gelu(v[0])?;
            weighted_sum(g, y, 8)
        }),
        case("relu", vec![off_zero(&mut rng, &[4, 5])], |g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y, 9)
        }),
        case("log", vec![positive(&mut rng, &[3, 4])], |g, v| {
            let y = g.log(v[0], 1e-12)?;
            weighted_sum(g, y, 10)
        }),
        case("softmax", vec![random_tensor(&mut rng, &[2, 3, 5], 2.0)], |g, v| {
            let y = g.softmax_lastdim(v[0])?;
            weighted_sum(g, y, 11)
        }),
        case("mean_axis", vec![r(&mut rng, &[2, 3, 4])], |g, v| {
            let y = g.mean_axis(v[0], 1)?;
            weighted_sum(g, y, 12)
        }),
        case("sum", vec![r(&mut rng, &[2, 3])], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        }),
        case(
            "layer_norm",
            vec![random_tensor(&mut rng, &[2, 3, 6], 2.0), r(&mut rng, &[6]), r(&mut rng, &[6])],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                weighted_sum(g, y, 13)
            },
        ),
        case("transpose", vec![r(&mut rng, &[2, 3, 4])], |g, v| {
            let y = g.transpose_last2(v[0])?;
            weighted_sum(g, y, 14)
        }),
        case("concat", vec![r(&mut rng, &[2, 1, 4]), r(&mut rng, &[2, 3, 4])], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            weighted_sum(g, y, 15)
        }),
        case("slice", vec![r(&mut rng, &[2, 5, 3])], |g, v| {
            let y = g.slice_axis(v[0], 1, 1, 4)?;
            weighted_sum(g, y, 16)
        }),
        case("reshape", vec![r(&mut rng, &[2, 6])], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            weighted_sum(g, y, 17)
        }),
        case("expand", vec![r(&mut rng, &[3, 4])], |g, v| {
            let y = g.expand(v[0], 3)?;
            weighted_sum(g, y, 18)
        }),
        case(
            "attention",
            vec![r(&mut rng, &[2, 4, 3]), r(&mut rng, &[2, 5, 3]), r(&mut rng, &[2, 5, 2])],
            |g, v| {
                let (out, _) = attention(g, v[0], v[1], v[2])?;
                weighted_sum(g, out, 19)
            },
        ),
        case("soft_probs_kl", vec![r(&mut rng, &[3, 4]), r(&mut rng, &[3, 4])], |g, v| {
            let s = soft_probs(g, v[0], 2.5)?;
            let t = soft_probs(g, v[1], 2.5)?;
            kl_div(g, s, t, KlOrientation::StudentLed)
        }),
        case("kl_teacher_led", vec![r(&mut rng, &[3, 4]), r(&mut rng, &[3, 4])], |g, v| {
            let s = soft_probs(g, v[0], 1.5)?;
            let t = soft_probs(g, v[1], 1.5)?;
            kl_div(g, s, t, KlOrientation::TeacherLed)
        }),
        case("cross_entropy", vec![r(&mut rng, &[4, 3])], |g, v| {
            let p = g.softmax_lastdim(v[0])?;
            cross_entropy(g, p, &[0, 2, 1, 2])
        }),
    ];

    let mut init_rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f64>::new();
    let layer = {
        let mut init = Init::new(&mut init_rng);
        EncoderLayerParams::new(&mut store, &mut init, "enc", 8, 2, 12).unwrap()
    };
    let mha_store = store.clone();
    let mha_layer = layer.clone();
    cases.push(case("multi_head_attention", vec![r(&mut rng, &[2, 4, 8])], move |g, v| {
        let p = mha_store.bind(g, false);
        let y = multi_head_attention(g, &p, &mha_layer, v[0])?;
        weighted_sum(g, y, 20)
    }));
    cases.push(case("encoder_layer", vec![r(&mut rng, &[2, 4, 8])], move |g, v| {
        let p = store.bind(g, false);
        let y = encoder_layer(g, &p, &layer, v[0])?;
        weighted_sum(g, y, 21)
    }));
    cases
}

/// Three classes, four subjects, two small modalities.
pub fn small_spec() -> mmfuse::data::SyntheticSpec {
    use mmfuse::data::{SyntheticModality, SyntheticSpec};
    SyntheticSpec {
        classes: 3,
        subjects: 4,
        sessions: 1,
        trials: 3,
        modalities: vec![
            SyntheticModality {
                name: "imu".into(),
                channels: 3,
                sample_rate: 20.0,
                noise: 0.5,
            },
            SyntheticModality {
                name: "pose".into(),
                channels: 4,
                sample_rate: 10.0,
                noise: 0.5,
            },
        ],
        latent_dim: 4,
        duration: 2.0,
        ..SyntheticSpec::default()
    }
}

pub fn load_dataset(spec: &mmfuse::data::SyntheticSpec, dir: &std::path::Path) -> mmfuse::data::EncodedDataset<f64> {
    use mmfuse::data::{generate_synthetic, load_encoded, EncodingConfig};
    use mmfuse::exec::ExecMode;
    let manifest = generate_synthetic(spec, dir, ExecMode::Sequential).unwrap();
    load_encoded(dir, &manifest, &EncodingConfig::default(), ExecMode::Sequential)
        .unwrap()
        .0
}

pub fn small_arch() -> ArchConfig {
    ArchConfig {
        d_model: 16,
        heads: 2,
        ff_dim: 32,
        teacher_mstt_layers: 2,
        student_mstt_layers: 1,
        tmt_layers: 1,
        fusion_tokens: 2,
    }
}

pub fn network_for<T: mmfuse::Real>(
    arch: &ArchConfig,
    role: Role,
    data: &mmfuse::data::EncodedDataset<T>,
    seed: u64,
) -> Network<T> {
    let cfg = ModelConfig::new(arch, role, data.modalities.clone(), data.classes.len());
    Network::new(cfg, role, seed).unwrap()
}
