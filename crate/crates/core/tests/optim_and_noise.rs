use mergelab::data::{make_synthetic, AugmentSpec};
use mergelab::nets::{loss_and_grad, ArchDescriptor, ForwardOptions, ParamVector, Precision};
use mergelab::optim::{effective_noise, gradient_noise_trace, lr_at, sgd_step, DecayMask, OptimizerState, ScheduleSpec, SgdHyper};
use mergelab::rng::RngStream;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

proptest! {
    #[test]
    fn sgd_on_a_quadratic_follows_the_closed_form(
        k in 0.0f64..5.0,
        lr in 1e-3f64..0.15,
        wd in 0.0f64..0.5,
        theta0 in -10.0f64..10.0,
    ) {
        let mut theta = vec![theta0];
        let mut state = OptimizerState::<f64>::new(1);
        let hyper = SgdHyper { lr, momentum: 0.0, weight_decay: wd };
        let factor = 1.0 - lr * k - lr * wd;
        let mut expected = theta0;
        for _ in 0..100 {
            let g = [k * theta[0]];
            sgd_step(&mut theta, &g, &mut state, &hyper, &DecayMask::all(1), true).unwrap();
            expected *= factor;
            prop_assert!((theta[0] - expected).abs() <= 1e-7 * expected.abs().max(1e-300));
        }
    }

    #[test]
    fn schedule_stays_in_range_and_is_continuous(
        peak in 1e-4f64..2.0,
        warmup in 1u64..200,
        stable in 0u64..500,
        decay in 1u64..300,
    ) {
        let s = ScheduleSpec { warmup_steps: warmup, stable_steps: stable, decay_steps: decay };
        let joint_bound = peak / warmup.min(decay) as f64 + 1e-12;
        // The square-root decay is steepest on its first step.
        let step_bound = peak * (1.0 / warmup as f64).max((1.0 / decay as f64).sqrt()) + 1e-12;
        for joint in [s.warmup_steps, s.decay_start()] {
            prop_assert!((lr_at(&s, peak, joint - 1) - lr_at(&s, peak, joint)).abs() <= joint_bound);
        }
        let mut prev = lr_at(&s, peak, 0);
        for step in 1..=s.end() + 5 {
            let lr = lr_at(&s, peak, step);
            prop_assert!((0.0..=peak).contains(&lr));
            prop_assert!((lr - prev).abs() <= step_bound, "jump at {step}");
            if step > s.decay_start() {
                prop_assert!(lr <= prev);
            }
            prev = lr;
        }
        prop_assert_eq!(lr_at(&s, peak, s.end()), 0.0);
    }

    #[test]
    fn noise_scale_is_homogeneous(lr in 1e-4f64..1.0, b in 1usize..512, mu in 0.0f64..0.99, c in 0.1f64..10.0) {
        let s = effective_noise(lr, b, mu).unwrap();
        prop_assert!(s > 0.0);
        prop_assert!((effective_noise(c * lr, b, mu).unwrap() - c * s).abs() <= 1e-12 * c * s);
    }
}

#[test]
fn worked_noise_scale_examples() {
    assert_eq!(effective_noise(0.1, 128, 0.0).unwrap(), 7.8125e-4);
    // 1 − 0.9 is not exactly 0.1 in binary, so these land within a few ulps.
    let ulps = |x: f64, want: f64| ((x - want) / (want * f64::EPSILON)).abs();
    assert!(ulps(effective_noise(0.1, 100, 0.9).unwrap(), 0.1) <= 4.0);
    assert!(ulps(effective_noise(0.2, 16, 0.9).unwrap(), 1.25) <= 4.0);
}

/// `tr C` with `C` the explicit per-example gradient covariance.
fn covariance_trace(params: &ParamVector, data: &mergelab::data::Dataset) -> f64 {
    let n = data.len();
    let dim = params.len();
    let mut g = DMatrix::<f64>::zeros(n, dim);
    for i in 0..n {
        let one = data.subset(&[i]);
        let out = loss_and_grad(
            params.arch(),
            &params.values_as::<f64>(),
            &params.aux_as::<f64>(),
            &one.inputs().cast::<f64>(),
            one.labels(),
            ForwardOptions::eval(),
        )
        .unwrap();
        g.set_row(i, &DVector::from_vec(out.grad).transpose());
    }
    let mean = g.row_mean();
    let centered = DMatrix::from_fn(n, dim, |i, j| g[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    cov.trace()
}

#[test]
fn noise_trace_matches_explicit_covariance() {
    let arch = ArchDescriptor::mlp_norm(&[3, 5, 2]).unwrap();
    for seed in 0..3 {
        let params = ParamVector::build(&arch, seed).unwrap();
        let task = make_synthetic(0, 12, 0, 2, 3, seed).unwrap();
        let mut rng = RngStream::derive(seed, "noise", 0);
        let est = gradient_noise_trace(&params, &task.train, 12, &mut rng, &AugmentSpec::disabled(), Precision::F64).unwrap();
        let oracle = covariance_trace(&params, &task.train);
        assert!((est - oracle).abs() <= 1e-6 * oracle, "{est} vs {oracle}");
    }
}

#[test]
fn augmentation_inflates_the_noise_trace() {
    let arch = ArchDescriptor::mlp_norm(&[32, 64, 8]).unwrap();
    for seed in 0..3 {
        let params = ParamVector::build(&arch, seed).unwrap();
        let task = make_synthetic(0, 512, 0, 8, 32, seed).unwrap();
        let trace = |spec: &AugmentSpec| {
            let mut rng = RngStream::derive(seed, "noise", 0);
            gradient_noise_trace(&params, &task.train, 256, &mut rng, spec, Precision::F64).unwrap()
        };
        let (plain, augmented) = (trace(&AugmentSpec::disabled()), trace(&AugmentSpec::vectors()));
        assert!(augmented > plain, "seed {seed}: {augmented} <= {plain}");
    }
}
