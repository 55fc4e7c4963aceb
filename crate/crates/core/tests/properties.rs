mod common;

use common::*;
use mmfuse::distill::{kl_div, soft_probs, KlOrientation};
use mmfuse::nn::attention;
use mmfuse::{Graph, Tensor};
use proptest::prelude::*;

fn probs_from(g: &mut Graph<f64>, logits: &[f64], rows: usize) -> mmfuse::Var {
    let c = logits.len() / rows;
    let x = g.constant(Tensor::from_f64(vec![rows, c], logits).unwrap());
    g.softmax_lastdim(x).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        logits in prop::collection::vec(-80.0f64..80.0, 12),
        temp in 0.05f64..50.0,
    ) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![3, 4], &logits).unwrap());
        let p = soft_probs(&mut g, x, temp).unwrap();
        for row in g.value(p).rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_in_f32(logits in prop::collection::vec(-30.0f32..30.0, 10)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![2, 5], logits).unwrap());
        let p = g.softmax_lastdim(x).unwrap();
        for row in g.value(p).rows() {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_is_non_negative(
        a in prop::collection::vec(-6.0f64..6.0, 10),
        b in prop::collection::vec(-6.0f64..6.0, 10),
    ) {
        let mut g = Graph::<f64>::new();
        let p = probs_from(&mut g, &a, 2);
        let q = probs_from(&mut g, &b, 2);
        for o in [KlOrientation::StudentLed, KlOrientation::TeacherLed] {
            let kl = kl_div(&mut g, p, q, o).unwrap();
            prop_assert!(g.value(kl).item() >= 0.0);
            let same = kl_div(&mut g, p, p, o).unwrap();
            prop_assert!(g.value(same).item().abs() <= 1e-9);
        }
    }

    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..10_000, lq in 1usize..6, lk in 1usize..6) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let q = g.constant(random_tensor(&mut rng, &[2, lq, 4], 3.0));
        let k = g.constant(random_tensor(&mut rng, &[2, lk, 4], 3.0));
        let v = g.constant(random_tensor(&mut rng, &[2, lk, 3], 1.0));
        let (_, w) = attention(&mut g, q, k, v).unwrap();
        for row in g.value(w).rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn kl_shape_mismatch_is_a_dimension_error() {
    let mut g = Graph::<f64>::new();
    let p = probs_from(&mut g, &[0.0; 6], 2);
    let q = probs_from(&mut g, &[0.0; 6], 3);
    assert!(matches!(
        kl_div(&mut g, p, q, KlOrientation::StudentLed),
        Err(mmfuse::Error::Dimension(_))
    ));
}
