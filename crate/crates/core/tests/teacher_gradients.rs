use stip_core::fusion::FusionConfig;
use stip_core::gradcheck::{check_gradients, GradCheckConfig, Objective};
use stip_core::model::{build_teacher, build_student, Classifier, ForwardOptions, StudentSpec, TeacherSpec};
use stip_core::{rng, ParameterStore, Real, Result, Tape, Tensor, Var};

fn teacher_spec() -> TeacherSpec {
    let mut spec = TeacherSpec::new(32, 8);
    spec.conv_filters = vec![8, 8, 8];
    spec.fusion = Some(FusionConfig {
        numhead: 2,
        groups: 2,
        memory_slots: 4,
        memory_dim: None,
        stages: 2,
        mb_expansion: 2,
        mlp_ratio: 2,
    });
    spec.seed = 5;
    spec
}

fn student_spec() -> StudentSpec {
    let mut spec = StudentSpec::new(16, 8);
    spec.conv_filters = [8, 8];
    spec.hidden = 8;
    spec.seed = 6;
    spec
}

/// Whole-network objective: projected logits, with the network rebuilt
/// around the store being probed.
struct Network<F> {
    build: F,
    projection: Tensor<f64>,
}

trait Build {
    fn logits<T: Real>(&self, tape: &mut Tape<T>, store: &mut ParameterStore<T>, x: Var) -> Result<Var>;
}

struct TeacherNet(TeacherSpec);
struct StudentNet(StudentSpec);

impl Build for TeacherNet {
    fn logits<T: Real>(&self, tape: &mut Tape<T>, store: &mut ParameterStore<T>, x: Var) -> Result<Var> {
        let mut m = build_teacher::<T>(&self.0)?;
        std::mem::swap(&mut m.store, store);
        let out = m.forward(tape, x, ForwardOptions::train());
        std::mem::swap(&mut m.store, store);
        Ok(out?.logits)
    }
}

impl Build for StudentNet {
    fn logits<T: Real>(&self, tape: &mut Tape<T>, store: &mut ParameterStore<T>, x: Var) -> Result<Var> {
        let mut m = build_student::<T>(&self.0)?;
        std::mem::swap(&mut m.store, store);
        let out = m.forward(tape, x, ForwardOptions::train());
        std::mem::swap(&mut m.store, store);
        Ok(out?.logits)
    }
}

impl<F: Build> Objective for Network<F> {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, store: &mut ParameterStore<T>, inputs: &[Var]) -> Result<Var> {
        let logits = self.build.logits(tape, store, inputs[0])?;
        let r = tape.constant(self.projection.cast())?;
        let w = tape.mul(logits, r)?;
        tape.sum(w)
    }
}

fn perturbed(mut store: ParameterStore<f64>, seed: u64) -> ParameterStore<f64> {
    let mut g = rng::seeded(seed);
    for e in store.entries_mut().filter(|e| e.trainable) {
        let noise = rng::normal_tensor::<f64>(e.value.shape(), 0.0, 0.1, &mut g);
        e.value.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
    store
}

#[test]
fn full_teacher_gradient_matches_finite_differences() {
    let spec = teacher_spec();
    let store = perturbed(build_teacher::<f64>(&spec).unwrap().store, 1);
    let mut g = rng::seeded(2);
    let x = rng::normal_tensor::<f64>(&[2, 32, 8], 0.0, 0.25, &mut g);
    let obj = Network {
        build: TeacherNet(spec),
        projection: rng::normal_tensor(&[2, 2], 0.0, 1.0, &mut g),
    };
    let report = check_gradients(&obj, &store, &[x], &GradCheckConfig::default()).unwrap();
    println!("{report:?}");
    assert!(report.checked > 1000);
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn full_student_gradient_matches_finite_differences() {
    let spec = student_spec();
    let store = perturbed(build_student::<f64>(&spec).unwrap().store, 3);
    let mut g = rng::seeded(4);
    let x = rng::normal_tensor::<f64>(&[2, 16, 8], 0.0, 1.0, &mut g);
    let obj = Network {
        build: StudentNet(spec),
        projection: rng::normal_tensor(&[2, 2], 0.0, 1.0, &mut g),
    };
    let report = check_gradients(&obj, &store, &[x], &GradCheckConfig::default()).unwrap();
    println!("{report:?}");
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}
