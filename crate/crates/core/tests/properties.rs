use flatspace::data::{gen_rotated_gaussians, RotatedGaussianSpec, Split};
use flatspace::flat_optim::{
    accumulate_fisher, clamp_to_region, compute_perturbation, train_continual, FlatRegion, ImportanceMap,
    OptimizerConfig, Variant,
};
use flatspace::metrics::{avg_accuracy_after_last, forgetting, AccuracyMatrix};
use flatspace::model::{Activation, Batch, ModelObjective, ModelSpec, MultiHeadClassifier};
use flatspace::objective::QuadraticObjective;
use flatspace::probe::{ball_sharpness, hvp, lanczos_lambda_max, sharpness_report};
use flatspace::replay::ReplayBuffer;
use flatspace::tensor::{ParameterSet, Tensor};
use proptest::prelude::*;

fn vecset(values: Vec<f64>) -> ParameterSet {
    let mut p = ParameterSet::new();
    p.push("w", Tensor::vector(values)).unwrap();
    p
}

fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clamp_lands_inside_the_box(
        (w, anchor) in (1usize..12).prop_flat_map(|n| (finite_vec(n), finite_vec(n))),
        rho in 0.0f64..2.0,
    ) {
        let region = FlatRegion::around(vecset(anchor), rho).unwrap();
        let mut p = vecset(w);
        clamp_to_region(&mut p, &region);
        prop_assert!(region.max_violation(&p).unwrap() <= 1e-12);
    }

    #[test]
    fn accumulated_importance_stays_non_negative(
        steps in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 4), 1..6),
        gamma in 0.0f64..=1.0,
    ) {
        let mut imp = ImportanceMap::new(vecset(vec![0.0; 4]), gamma).unwrap();
        for fresh in steps {
            imp = accumulate_fisher(&imp, &vecset(fresh)).unwrap();
            prop_assert!(imp.values().values().all(|v| v >= 0.0));
        }
    }

    #[test]
    fn relative_perturbation_has_radius_rho(
        (w, g) in (1usize..10).prop_flat_map(|n| (finite_vec(n), finite_vec(n))),
        rho in 0.01f64..1.0,
    ) {
        prop_assume!(w.iter().all(|v| v.abs() > 1e-3) && g.iter().any(|v| v.abs() > 1e-3));
        let p = compute_perturbation(&vecset(w.clone()), &vecset(g), rho).unwrap();
        let rel: f64 = p.epsilon_hat.values().zip(&w).map(|(e, x)| (e / x).powi(2)).sum::<f64>().sqrt();
        prop_assert!((rel - rho).abs() <= 1e-12 * rho.max(1.0));
    }

    #[test]
    fn lanczos_estimate_grows_with_iterations(diag in prop::collection::vec(0.1f64..10.0, 2..8), seed in 0u64..100) {
        let n = diag.len();
        let mut q = QuadraticObjective::diagonal(&diag, vec![0.3; n]).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for iters in 1..=n {
            let l = lanczos_lambda_max(&mut q, iters, seed).unwrap().lambda_max;
            prop_assert!(l >= prev - 1e-8);
            prev = l;
        }
        let top = diag.iter().cloned().fold(0.0, f64::max);
        prop_assert!((prev - top).abs() <= 1e-6 * top);
    }

    #[test]
    fn ball_sharpness_grows_with_radius(diag in prop::collection::vec(0.1f64..5.0, 2..6), seed in 0u64..100) {
        let n = diag.len();
        let mut q = QuadraticObjective::diagonal(&diag, vec![0.5; n]).unwrap();
        let mut prev = 0.0;
        for rho in [0.01, 0.05, 0.1, 0.5] {
            let s = ball_sharpness(&mut q, rho, 8, seed).unwrap();
            prop_assert!(s >= prev);
            prev = s;
        }
    }

    #[test]
    fn last_row_average_ignores_task_labels(row in prop::collection::vec(0.0f64..=1.0, 3), shift in 0usize..3) {
        let rows = |last: Vec<f64>| vec![vec![0.5], vec![0.5, 0.5], last];
        let mut rotated = row.clone();
        rotated.rotate_left(shift);
        let a = avg_accuracy_after_last(&AccuracyMatrix::from_rows(rows(row)).unwrap()).unwrap();
        let b = avg_accuracy_after_last(&AccuracyMatrix::from_rows(rows(rotated)).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn non_regressing_columns_never_forget(base in prop::collection::vec(0.0f64..0.5, 4), bumps in prop::collection::vec(0.0f64..0.1, 4)) {
        // Every column gains the same running total, so no entry ever drops.
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|k| (0..=k).map(|j| base[j] + bumps[..=k].iter().sum::<f64>()).collect())
            .collect();
        let f = forgetting(&AccuracyMatrix::from_rows(rows).unwrap()).unwrap();
        prop_assert!(f.mean <= 0.0 && f.per_step.iter().all(|&v| v <= 0.0));
    }
}

fn small_model() -> (MultiHeadClassifier, Vec<Batch>) {
    let m = MultiHeadClassifier::new(4, 3, &[5], &[3], Activation::Tanh).unwrap();
    let x = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let b = Batch::new(x, vec![0, 1, 2, 1], 0).unwrap();
    (m, vec![b])
}

#[test]
fn probes_leave_weights_untouched() {
    let (mut m, batches) = small_model();
    let before = m.params().clone();
    let v = before.map(|x| x.cos());
    let mut obj = ModelObjective::new(&mut m, &batches);
    hvp(&mut obj, &v, None).unwrap();
    lanczos_lambda_max(&mut obj, 10, 1).unwrap();
    sharpness_report(&mut obj, 0.05, 4, 10, 1).unwrap();
    assert!(m.params().bitwise_eq(&before));
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    let (m, batches) = small_model();
    let (_, full) = m.loss_and_grad(&batches).unwrap();
    let b = &batches[0];
    let mut sum = full.zeros_like();
    for i in 0..b.len() {
        sum.axpy(1.0 / b.len() as f64, &m.loss_and_grad(&[b.sample(i)]).unwrap().1).unwrap();
    }
    for (a, s) in full.values().zip(sum.values()) {
        assert!((a - s).abs() <= 1e-12 * a.abs() + 1e-16, "{a} vs {s}");
    }
}

fn tiny_stream() -> flatspace::data::TaskStream {
    gen_rotated_gaussians(
        2,
        &RotatedGaussianSpec {
            n_tasks: 3,
            classes_per_task: 2,
            dim: 3,
            samples_per_class: 30,
            separation: 3.0,
            rotation_deg: 60.0,
        },
    )
    .unwrap()
}

fn cfg(variant: Variant, lambda: f64) -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: 0.05,
        batch_size: 8,
        lambda,
        rho: 0.3,
        epochs: 2,
        validate_every_steps: 10,
        flags: variant.flags(),
        ..OptimizerConfig::default()
    }
}

#[test]
fn zero_lambda_matches_runs_without_the_penalty() {
    let s = tiny_stream();
    let spec = ModelSpec { hidden_dims: vec![4], activation: Activation::Relu };
    let reference = train_continual(&s, &spec, &cfg(Variant::Cf, 0.0), 2, None, &mut ()).unwrap();
    for other in [Variant::CfMinusL2, Variant::CfMinusFind] {
        let run = train_continual(&s, &spec, &cfg(other, 0.0), 2, None, &mut ()).unwrap();
        assert_eq!(run.matrix, reference.matrix, "{other}");
        assert!(run.model.params().bitwise_eq(reference.model.params()), "{other}");
    }
}

#[test]
fn exemplars_come_from_training_rows_and_are_reproducible() {
    let s = tiny_stream();
    let mut a = ReplayBuffer::new(0.1, 5).unwrap();
    let mut b = ReplayBuffer::new(0.1, 5).unwrap();
    for t in &s.tasks {
        a.add_task(t, 9).unwrap();
        b.add_task(t, 9).unwrap();
    }
    assert_eq!(a, b);
    for e in a.exemplars() {
        let task = &s.tasks[e.task_id];
        let from_train = task.split(Split::Train).iter().any(|&i| task.row(i) == &e.features[..]);
        assert!(from_train);
    }
}
