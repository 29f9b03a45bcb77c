use mergelab::merge::{linear_interpolate, task_arithmetic_merge, task_vector, MergeSpec};
use mergelab::nets::{ArchDescriptor, ParamVector};
use proptest::prelude::*;

fn arch() -> ArchDescriptor {
    ArchDescriptor::mlp_norm(&[5, 7, 3]).unwrap()
}

/// A model with arbitrary finite weights and valid statistics.
fn model() -> impl Strategy<Value = ParamVector> {
    let n = ParamVector::build(&arch(), 0).unwrap().len();
    (any::<u64>(), prop::collection::vec(-50.0f32..50.0, n)).prop_map(|(seed, values)| {
        ParamVector::build(&arch(), seed).unwrap().with_values(values).unwrap()
    })
}

fn rel_norm(x: &[f32], y: &[f32]) -> f64 {
    let diff: f64 = x.iter().zip(y).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = x.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt().max(1e-30);
    diff / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn interpolation_endpoints_are_exact(a in model(), b in model()) {
        prop_assert_eq!(linear_interpolate(&a, &b, 0.0).unwrap(), a.clone());
        prop_assert_eq!(linear_interpolate(&a, &b, 1.0).unwrap(), b);
    }

    #[test]
    fn single_task_vector_reconstructs(base in model(), t in model()) {
        let tau = task_vector(&t, &base).unwrap();
        prop_assert_eq!(task_arithmetic_merge(&base, &[tau], &[1.0]).unwrap(), t);
    }

    #[test]
    fn self_difference_is_zero(a in model()) {
        prop_assert!(task_vector(&a, &a).unwrap().is_zero());
    }

    #[test]
    fn zero_coefficients_give_base(base in model(), t1 in model(), t2 in model()) {
        let taus = [task_vector(&t1, &base).unwrap(), task_vector(&t2, &base).unwrap()];
        let merged = task_arithmetic_merge(&base, &taus, &[0.0, 0.0]).unwrap();
        prop_assert_eq!(merged.values(), base.values());
    }

    #[test]
    fn linear_and_task_arithmetic_agree(a in model(), b in model(), k in -64i32..=96) {
        let alpha = k as f64 / 64.0;
        let lin = linear_interpolate(&a, &b, alpha).unwrap();
        let ta = task_arithmetic_merge(&a, &[task_vector(&b, &a).unwrap()], &[alpha]).unwrap();
        prop_assert!(rel_norm(lin.values(), ta.values()) < 1e-7);
    }

    #[test]
    fn spec_linear_matches_function(a in model(), b in model(), alpha in 0.0f64..1.0) {
        let via_spec = MergeSpec::linear(alpha).apply(None, &[&a, &b], None).unwrap();
        prop_assert_eq!(via_spec, linear_interpolate(&a, &b, alpha).unwrap());
    }

    #[test]
    fn interpolation_is_symmetric(a in model(), b in model(), k in 0i32..=64) {
        let alpha = k as f64 / 64.0;
        let ab = linear_interpolate(&a, &b, alpha).unwrap();
        let ba = linear_interpolate(&b, &a, 1.0 - alpha).unwrap();
        prop_assert_eq!(ab.values(), ba.values());
    }
}

#[test]
fn incompatible_architectures_are_rejected() {
    let a = ParamVector::build(&arch(), 1).unwrap();
    let b = ParamVector::build(&ArchDescriptor::mlp_norm(&[5, 8, 3]).unwrap(), 1).unwrap();
    assert!(linear_interpolate(&a, &b, 0.5).is_err());
    assert!(task_vector(&a, &b).is_err());
    assert!(MergeSpec::linear(0.5).apply(None, &[&a], None).is_err());
}
