use flatspace::data::{gen_rotated_gaussians, RotatedGaussianSpec, Split, TaskStream};
use flatspace::flat_optim::{
    constrained_names, evaluate_union, train_continual, ContinualState, OptimizerConfig, Variant, VariantFlags,
};
use flatspace::model::{encoder_weight, head_weight, Activation, ModelSpec};

fn stream(n_tasks: usize, seed: u64) -> TaskStream {
    gen_rotated_gaussians(
        seed,
        &RotatedGaussianSpec {
            n_tasks,
            classes_per_task: 3,
            dim: 3,
            samples_per_class: 40,
            separation: 3.0,
            rotation_deg: 50.0,
        },
    )
    .unwrap()
}

fn config(variant: Variant) -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: 0.05,
        batch_size: 8,
        weight_decay: 0.0,
        lambda: 1.0,
        rho: 0.3,
        epochs: 2,
        validate_every_steps: 10,
        store_ratio: 0.05,
        replay_every: 3,
        flags: variant.flags(),
        ..OptimizerConfig::default()
    }
}

fn spec() -> ModelSpec {
    ModelSpec { hidden_dims: vec![6], activation: Activation::Tanh }
}

#[test]
fn single_task_gives_one_by_one_matrix() {
    let s = stream(1, 3);
    let run = train_continual(&s, &spec(), &config(Variant::Cf), 3, None, &mut ()).unwrap();
    assert_eq!(run.matrix.rows(), &[vec![run.matrix.get(0, 0).unwrap()]]);
    assert!(run.region_history[0].is_none());
    assert!(run.reports[0].records.iter().all(|r| r.clamp_count == 0));
}

#[test]
fn matrix_is_lower_triangular_and_complete() {
    let s = stream(3, 4);
    let run = train_continual(&s, &spec(), &config(Variant::Cf), 4, None, &mut ()).unwrap();
    for (t, row) in run.matrix.rows().iter().enumerate() {
        assert_eq!(row.len(), t + 1);
    }
    assert_eq!(run.importance_history.len(), 3);
    assert_eq!(run.model.head_count(), 3);
}

#[test]
fn seq_is_cf_with_every_component_off() {
    let s = stream(3, 5);
    let mut off = config(Variant::Cf);
    off.flags = VariantFlags::NONE;
    let a = train_continual(&s, &spec(), &config(Variant::Seq), 5, None, &mut ()).unwrap();
    let b = train_continual(&s, &spec(), &off, 5, None, &mut ()).unwrap();
    assert_eq!(a.matrix, b.matrix);
    assert!(a.model.params().bitwise_eq(b.model.params()));
}

#[test]
fn returned_model_is_the_best_validation_snapshot() {
    let s = stream(3, 6);
    let cfg = config(Variant::Cf);
    let mut state = ContinualState::new(&s, &spec(), &cfg, 6).unwrap();
    while !state.is_done(&s) {
        let out = state.advance(&s, &cfg, 6, None, &mut ()).unwrap();
        let r = &out.report;
        let best = r.validation.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.best_val_acc, best);
        let val = evaluate_union(&state.model, &s, r.task, Split::Val).unwrap();
        assert_eq!(val, r.best_val_acc);
    }
}

#[test]
fn constraints_cover_encoder_and_old_heads_only() {
    let s = stream(2, 7);
    let cfg = config(Variant::Cf);
    let run = train_continual(&s, &spec(), &cfg, 7, None, &mut ()).unwrap();
    let region = run.region_history[1].as_ref().unwrap();
    assert!(region.is_constrained(&head_weight(0)));
    assert!(!region.is_constrained(&head_weight(1)));
    assert_eq!(constrained_names(&run.model, 1), region.constrained_names());
}

#[test]
fn replay_steps_are_recorded_only_for_replay_variants() {
    let s = stream(3, 8);
    let with = train_continual(&s, &spec(), &config(Variant::Replay), 8, None, &mut ()).unwrap();
    let without = train_continual(&s, &spec(), &config(Variant::Seq), 8, None, &mut ()).unwrap();
    assert!(with.reports[0].records.iter().all(|r| !r.replay));
    assert!(with.reports[1].records.iter().any(|r| r.replay));
    assert!(without.reports.iter().flat_map(|r| &r.records).all(|r| !r.replay));
}

#[test]
fn sparse_mask_freezes_most_encoder_coordinates() {
    let s = stream(2, 9);
    let mut cfg = config(Variant::Cf);
    cfg.sparse_update_ratio = 0.25;
    let mut state = ContinualState::new(&s, &spec(), &cfg, 9).unwrap();
    state.advance(&s, &cfg, 9, None, &mut ()).unwrap();
    let before = state.model.params().get(&encoder_weight(0)).unwrap().clone();
    state.advance(&s, &cfg, 9, None, &mut ()).unwrap();
    let after = state.model.params().get(&encoder_weight(0)).unwrap();
    let changed = before.data().iter().zip(after.data()).filter(|(a, b)| a != b).count();
    let keep = (before.len() as f64 * 0.25).floor() as usize;
    assert!(changed <= keep, "{changed} coordinates moved, mask allows {keep}");
}
