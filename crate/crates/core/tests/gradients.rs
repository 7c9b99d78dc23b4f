use stip_core::gradcheck::{layer_suite, GradCheckConfig};

fn run<T: stip_core::Real>(tolerance: f64) {
    let cases = layer_suite::<T>(11, &GradCheckConfig::default()).unwrap();
    for case in &cases {
        let r = &case.report;
        println!("{:<18} max rel err {:.3e} over {} coords ({} skipped) {}", case.name, r.max_rel_error, r.checked, r.skipped, r.worst);
    }
    for case in &cases {
        assert!(case.report.checked > 0, "{} checked nothing", case.name);
        assert!(
            case.report.max_rel_error <= tolerance,
            "{}: {:.3e} > {tolerance:e} at {}",
            case.name,
            case.report.max_rel_error,
            case.report.worst
        );
    }
}

#[test]
fn gradients_match_finite_differences_f64() {
    run::<f64>(1e-5);
}

#[test]
fn gradients_match_finite_differences_f32() {
    run::<f32>(1e-3);
}
