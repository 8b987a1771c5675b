use flatspace::model::{
    encoder_bias, encoder_weight, head_bias, head_weight, Activation, Batch, MultiHeadClassifier,
};
use flatspace::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(seed: u64, n: usize, dim: usize, classes: usize, task: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(Tensor::new(vec![n, dim], x).unwrap(), y, task).unwrap()
}

/// Straight-line forward pass and mean cross-entropy, written without the graph.
fn reference_loss(model: &MultiHeadClassifier, batch: &Batch) -> f64 {
    let p = model.params();
    let top = model.topology();
    let mut total = 0.0;
    for i in 0..batch.len() {
        let mut h = batch.features.row(i).to_vec();
        let layers = top.hidden_dims.len();
        for l in 0..=layers {
            let (w, b) = if l < layers {
                (p.get(&encoder_weight(l)).unwrap(), p.get(&encoder_bias(l)).unwrap())
            } else {
                (
                    p.get(&head_weight(batch.task_id)).unwrap(),
                    p.get(&head_bias(batch.task_id)).unwrap(),
                )
            };
            let out = w.cols();
            let mut z = b.data().to_vec();
            for (k, hk) in h.iter().enumerate() {
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj += hk * w.data()[k * out + j];
                }
            }
            h = if l < layers {
                z.iter()
                    .map(|&v| match top.activation {
                        Activation::Relu => v.max(0.0),
                        Activation::Tanh => v.tanh(),
                    })
                    .collect()
            } else {
                z
            };
        }
        let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - h[batch.labels[i]];
    }
    total / batch.len() as f64
}

#[test]
fn parameter_count_matches_layer_sizes() {
    let m = MultiHeadClassifier::new(1, 2, &[4], &[3], Activation::Relu).unwrap();
    assert_eq!(m.params().numel(), 27);
}

#[test]
fn initialisation_is_seeded() {
    let a = MultiHeadClassifier::new(5, 3, &[4, 2], &[2], Activation::Tanh).unwrap();
    let b = MultiHeadClassifier::new(5, 3, &[4, 2], &[2], Activation::Tanh).unwrap();
    let c = MultiHeadClassifier::new(6, 3, &[4, 2], &[2], Activation::Tanh).unwrap();
    assert!(a.params().bitwise_eq(b.params()));
    assert!(!a.params().bitwise_eq(c.params()));
}

#[test]
fn uniform_logits_give_log_class_count() {
    let mut m = MultiHeadClassifier::new(0, 2, &[3], &[5], Activation::Relu).unwrap();
    for name in [head_weight(0), head_bias(0)] {
        m.params_mut().get_mut(&name).unwrap().data_mut().fill(0.0);
    }
    let batch = random_batch(1, 4, 2, 5, 0);
    assert!((m.task_loss(&batch).unwrap() - 5f64.ln()).abs() < 1e-12);
    // Uniform logits: the tie goes to class 0.
    assert_eq!(m.predict(&batch.features, 0).unwrap(), vec![0; 4]);
}

#[test]
fn loss_matches_straight_line_reimplementation() {
    for seed in 0..10 {
        let act = if seed % 2 == 0 { Activation::Relu } else { Activation::Tanh };
        let mut m = MultiHeadClassifier::new(seed, 3, &[5, 4], &[3], act).unwrap();
        m.add_task_head(4).unwrap();
        for task in 0..2 {
            let batch = random_batch(seed + 100, 6, 3, 3 + task, task);
            let diff = (m.task_loss(&batch).unwrap() - reference_loss(&m, &batch)).abs();
            assert!(diff < 1e-12, "seed {seed} task {task}: {diff}");
        }
    }
}

#[test]
fn log_prob_gradient_is_negated_sample_gradient() {
    let m = MultiHeadClassifier::new(2, 3, &[4], &[3], Activation::Tanh).unwrap();
    let batch = random_batch(9, 5, 3, 3, 0);
    let mut sum = m.params().zeros_like();
    for i in 0..batch.len() {
        let s = batch.sample(i);
        let g = m.log_prob_gradient(&s).unwrap();
        let (_, plain) = m.loss_and_grad(std::slice::from_ref(&s)).unwrap();
        for (a, b) in g.values().zip(plain.values()) {
            assert_eq!(a, -b);
        }
        sum.axpy(1.0 / batch.len() as f64, &g).unwrap();
    }
    let (_, mean) = m.loss_and_grad(std::slice::from_ref(&batch)).unwrap();
    for (a, b) in sum.values().zip(mean.values()) {
        assert!((a + b).abs() < 1e-12);
    }
}

#[test]
fn unused_head_gets_zero_gradient() {
    let mut m = MultiHeadClassifier::new(3, 2, &[3], &[2], Activation::Relu).unwrap();
    m.add_task_head(2).unwrap();
    let (_, g) = m.loss_and_grad(&[random_batch(4, 3, 2, 2, 0)]).unwrap();
    assert!(g.get(&head_weight(1)).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(g.get(&head_bias(1)).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn random_predictor_is_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let m = MultiHeadClassifier::new(8, 2, &[4], &[2], Activation::Relu).unwrap();
    let n = 10_000;
    let x = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = (0..n).map(|i| i % 2).collect();
    let batch = Batch::new(Tensor::new(vec![n, 2], x).unwrap(), y, 0).unwrap();
    assert!((m.accuracy(&batch).unwrap() - 0.5).abs() < 0.02);
}

#[test]
fn missing_head_and_bad_labels_rejected() {
    let m = MultiHeadClassifier::new(0, 2, &[3], &[2], Activation::Relu).unwrap();
    assert!(m.task_loss(&random_batch(0, 2, 2, 2, 1)).is_err());
    let bad = Batch::new(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), vec![7], 0).unwrap();
    assert!(m.task_loss(&bad).is_err());
    assert!(m.task_loss(&random_batch(0, 2, 3, 2, 0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn new_heads_leave_old_logits_unchanged(seed in 0u64..1000, classes in 1usize..5) {
        let mut m = MultiHeadClassifier::new(seed, 3, &[4], &[3], Activation::Tanh).unwrap();
        let batch = random_batch(seed, 4, 3, 3, 0);
        let before = m.logits(&batch.features, 0).unwrap();
        m.add_task_head(classes).unwrap();
        let after = m.logits(&batch.features, 0).unwrap();
        prop_assert_eq!(before.data(), after.data());
    }

    #[test]
    fn loss_is_invariant_to_batch_order(seed in 0u64..1000, n in 2usize..8) {
        let m = MultiHeadClassifier::new(seed, 2, &[3], &[3], Activation::Relu).unwrap();
        let batch = random_batch(seed, n, 2, 3, 0);
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(seed as usize % n);
        let x = order.iter().flat_map(|&i| batch.features.row(i).to_vec()).collect();
        let y = order.iter().map(|&i| batch.labels[i]).collect();
        let shuffled = Batch::new(Tensor::new(vec![n, 2], x).unwrap(), y, 0).unwrap();
        prop_assert!((m.task_loss(&batch).unwrap() - m.task_loss(&shuffled).unwrap()).abs() < 1e-12);
    }
}
