use stip_core::distill::{capture_target_stats, distill_student, synthesize_pseudo, DistillConfig};
use stip_core::fusion::FusionConfig;
use stip_core::model::{build_student, build_teacher, Classifier, StudentSpec, TeacherModel, TeacherSpec};
use stip_core::train::{evaluate, train_classifier, LabeledSet, TrainConfig};
use stip_core::{rng, Error};

const L: usize = 32;
const C: usize = 8;

fn teacher_spec() -> TeacherSpec {
    let mut spec = TeacherSpec::new(L, C);
    spec.conv_filters = vec![8, 16, 16];
    spec.fusion = Some(FusionConfig {
        numhead: 2,
        groups: 2,
        memory_slots: 8,
        ..FusionConfig::default()
    });
    spec.seed = 1;
    spec
}

/// Class 1 carries a bump on channel 0 somewhere in the sequence.
fn toy_data(n: usize, seed: u64) -> LabeledSet<f64> {
    let mut g = rng::seeded(seed);
    let mut x = rng::normal_tensor::<f64>(&[n, L, C], 0.0, 1.0, &mut g);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for (i, &y) in labels.iter().enumerate() {
        if y == 1 {
            let pos = (i * 7) % (L - 4);
            for p in pos..pos + 4 {
                x.data_mut()[(i * L + p) * C] += 3.0;
            }
        }
    }
    LabeledSet::new(x, labels).unwrap()
}

fn trained_teacher() -> TeacherModel<f64> {
    let mut teacher = build_teacher::<f64>(&teacher_spec()).unwrap();
    let data = toy_data(64, 3);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    train_classifier(&mut teacher, &data, None, &cfg).unwrap();
    teacher
}

#[test]
fn untrained_teacher_is_rejected() {
    let teacher = build_teacher::<f64>(&teacher_spec()).unwrap();
    assert!(matches!(capture_target_stats(&teacher), Err(Error::Untrained(_))));
}

#[test]
fn synthesis_halves_the_statistic_loss_without_touching_the_teacher() {
    let mut teacher = trained_teacher();
    let before = teacher.store.checksum();
    let target = capture_target_stats(&teacher).unwrap();
    let cfg = DistillConfig {
        batch: 16,
        ..DistillConfig::default()
    };
    let z0 = rng::normal_tensor(&[16, L, C], 0.0, 1.0, &mut rng::seeded(9));
    let synth = synthesize_pseudo(&mut teacher, z0, &target, &cfg).unwrap();
    println!("L_MSE {:.4} -> {:.4} in {} steps, eta {}", synth.initial_loss(), synth.final_loss(), synth.losses.len() - 1, synth.step_size);
    assert!(synth.final_loss() <= 0.5 * synth.initial_loss());
    assert!(synth.losses.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(teacher.store.checksum(), before);
}

#[test]
fn zero_sigma_start_is_exactly_mu() {
    let z = rng::normal_tensor::<f64>(&[2, 3], 0.7, 0.0, &mut rng::seeded(0));
    assert!(z.data().iter().all(|&v| v == 0.7));
}

#[test]
fn distillation_runs_without_data_and_keeps_teacher_fixed() {
    let mut teacher = trained_teacher();
    let before = teacher.store.checksum();
    let mut spec = StudentSpec::new(L, C);
    spec.conv_filters = [8, 16];
    spec.hidden = 8;
    let mut student = build_student::<f64>(&spec).unwrap();
    let cfg = DistillConfig {
        batch: 8,
        steps: 4,
        refresh_every: 2,
        synth_steps: 5,
        ..DistillConfig::default()
    };
    let history = distill_student(&mut teacher, &mut student, &cfg, 4).unwrap();
    assert_eq!(history.len(), 4);
    assert!(history.iter().all(|r| r.l_kl >= 0.0 && r.l_concat.is_finite()));
    assert_eq!(teacher.store.checksum(), before);
    let again = distill_student(&mut trained_teacher(), &mut build_student::<f64>(&spec).unwrap(), &cfg, 4).unwrap();
    assert_eq!(history, again);
    let m = evaluate(&mut student, &toy_data(16, 5), 8).unwrap();
    assert!((0.0..=1.0).contains(&m.accuracy));
    assert_eq!(student.count_params(), spec.param_count());
}

#[test]
fn mismatched_student_shape_is_rejected() {
    let mut teacher = trained_teacher();
    let mut student = build_student::<f64>(&StudentSpec::new(16, C)).unwrap();
    let err = distill_student(&mut teacher, &mut student, &DistillConfig::default(), 0).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
}
