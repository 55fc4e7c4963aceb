mod common;

use common::*;
use mmfuse::distill::{student_loss, teacher_loss, KdConfig, KlOrientation};
use mmfuse::model::Role;

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in primitive_cases() {
        let err = check_inputs(&case.inputs, &case.build);
        if !(err < 1e-4) {
            failures.push(format!("{}: {err:.3e}", case.name));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn teacher_objective_matches_finite_differences() {
    let mut net = micro_network(Role::Teacher, 3);
    let batch = random_batch(&micro_modalities(), 3, 3, 21);
    let err = check_network(&mut net, |net, g, p| {
        let out = net.forward(g, p, &batch)?;
        teacher_loss(g, &out, &batch.labels)
    });
    assert!(err < 1e-3, "relative error {err:.3e}");
}

#[test]
fn student_objective_matches_finite_differences() {
    let teacher = micro_network(Role::Teacher, 4);
    let batch = random_batch(&micro_modalities(), 3, 3, 22);
    let targets = teacher.infer(&batch).unwrap();
    for orientation in [KlOrientation::StudentLed, KlOrientation::TeacherLed] {
        let mut kd = KdConfig {
            temperature: 2.0,
            orientation,
            ..KdConfig::default()
        };
        kd.resolve(2).unwrap();
        let mut net = micro_network(Role::Student, 5);
        let err = check_network(&mut net, |net, g, p| {
            let out = net.forward(g, p, &batch)?;
            student_loss(g, &out, &targets, &batch.labels, &kd)
        });
        assert!(err < 1e-3, "{orientation:?}: relative error {err:.3e}");
    }
}
