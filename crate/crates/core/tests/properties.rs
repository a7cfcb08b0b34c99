//! Property-level invariants spanning the numeric kernel, losses,
//! aggregation, and partitioning.

use fednovel::dataset::{
    dirichlet_partition, generate_gaussian_mixture, GaussianMixtureSpec, PartitionSpec,
};
use fednovel::federation::{
    ema_update, fedavg_aggregate, local_train_novel, FederationConfig, NovelTrainOptions,
    ParticipantState,
};
use fednovel::losses::LossConfig;
use fednovel::model::{FeatureExtractor, GradientSet, Model};
use fednovel::numcore::{
    cosine_similarity, euclidean_distance, softmax, RngStream, Vector,
};
use proptest::prelude::*;

fn vec3() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn triangle_inequality(a in vec3(), b in vec3(), c in vec3()) {
        let (a, b, c) = (Vector(a), Vector(b), Vector(c));
        let ab = euclidean_distance(&a, &b).unwrap();
        let bc = euclidean_distance(&b, &c).unwrap();
        let ac = euclidean_distance(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
    }
}

proptest! {
    #[test]
    fn cosine_scale_invariance(a in vec3(), b in vec3(), k in 0.001f64..1000.0) {
        let (a, b) = (Vector(a), Vector(b));
        prop_assume!(a.norm() > 1e-6 && b.norm() > 1e-6);
        let base = cosine_similarity(&a, &b).unwrap();
        let scaled = cosine_similarity(&a.scale(k), &b).unwrap();
        prop_assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn softmax_shift_invariance(logits in prop::collection::vec(-30.0f64..30.0, 1..6), shift in -50.0f64..50.0) {
        let v = Vector(logits.clone());
        let shifted = Vector(logits.iter().map(|x| x + shift).collect());
        let a = softmax(&v, 0.7).unwrap();
        let b = softmax(&shifted, 0.7).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

fn random_gradient_set(model: &Model, rng: &mut RngStream) -> GradientSet {
    let mut g = GradientSet::zeros_for(model);
    for m in g.layer_weights.iter_mut() {
        for v in m.iter_mut() {
            *v = rng.normal();
        }
    }
    for b in g.layer_biases.iter_mut() {
        for v in b.0.iter_mut() {
            *v = rng.normal();
        }
    }
    for v in g.classifier.iter_mut() {
        *v = rng.normal();
    }
    g
}

#[test]
fn fedavg_is_permutation_invariant_in_value() {
    let mut rng = RngStream::from_seed(7);
    let model = Model::new(3, &[4], 2, 3, &rng);
    let deltas: Vec<GradientSet> = (0..6).map(|_| random_gradient_set(&model, &mut rng)).collect();
    let base = fedavg_aggregate(&deltas).unwrap();
    for trial in 0..20 {
        let mut order: Vec<usize> = (0..deltas.len()).collect();
        let mut shuffle_rng = RngStream::from_seed(100 + trial);
        shuffle_rng.shuffle(&mut order);
        let permuted: Vec<GradientSet> = order.iter().map(|&i| deltas[i].clone()).collect();
        let other = fedavg_aggregate(&permuted).unwrap();
        let mut diff = base.clone();
        diff.add_scaled(&other, -1.0).unwrap();
        assert!(diff.l2_norm() < 1e-12, "permutation changed the mean by {}", diff.l2_norm());
    }
}

fn extractor_param_distance_sq(a: &FeatureExtractor, b: &FeatureExtractor) -> f64 {
    let mut total = 0.0;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        total += la
            .weights
            .iter()
            .zip(lb.weights.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
        total += la
            .bias
            .iter()
            .zip(lb.bias.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    total
}

#[test]
fn ema_contraction_identity() {
    // Dyadic parameters and a dyadic beta make every float operation exact,
    // so the squared-norm form of the contraction identity holds bitwise.
    let dyadic = |seed: u64| {
        let mut rng = RngStream::from_seed(seed);
        let mut e = FeatureExtractor::new(3, &[4], 2, &mut rng);
        for layer in e.layers.iter_mut() {
            for v in layer.weights.iter_mut() {
                *v = (rng.index(33) as f64 - 16.0) * 0.25;
            }
            for v in layer.bias.0.iter_mut() {
                *v = (rng.index(33) as f64 - 16.0) * 0.25;
            }
        }
        e
    };
    let anchor = dyadic(1);
    let local = dyadic(2);
    let beta = 0.75;
    let blended = ema_update(&anchor, &local, beta).unwrap();
    let lhs = extractor_param_distance_sq(&blended, &anchor);
    let rhs = (1.0 - beta) * (1.0 - beta) * extractor_param_distance_sq(&local, &anchor);
    assert_eq!(lhs, rhs);

    // At the configured beta the identity holds to floating-point roundoff.
    let mut rng = RngStream::from_seed(3);
    let anchor = FeatureExtractor::new(3, &[4], 2, &mut rng.child("a"));
    let local = FeatureExtractor::new(3, &[4], 2, &mut rng.child("b"));
    let beta = 0.99;
    let blended = ema_update(&anchor, &local, beta).unwrap();
    let lhs = extractor_param_distance_sq(&blended, &anchor).sqrt();
    let rhs = (1.0 - beta) * extractor_param_distance_sq(&local, &anchor).sqrt();
    assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
}

#[test]
fn frozen_rows_survive_any_novel_training_sequence() {
    let cfg = FederationConfig {
        participants: 3,
        clients_per_round: 2,
        rounds_per_stage: 3,
        local_epochs: 3,
        learning_rate: 0.05,
        batch_size: 4,
        filter_threshold: 0.5,
        ema_beta: 0.99,
        dirichlet_alpha: 0.1,
        memory_capacity: 32,
        novel_participants: None,
        loss: LossConfig::default(),
    };
    for seed in 0..10u64 {
        let mut rng = RngStream::from_seed(seed);
        let mut model = Model::new(3, &[5], 4, 3, &rng);
        let frozen_before: Vec<Vector> = (0..3).map(|c| model.classifier.row_vector(c)).collect();
        let protos: Vec<Vector> = (0..2)
            .map(|_| Vector::from_fn(4, |_| rng.normal()))
            .collect();
        model.classifier.extend(&protos).unwrap();
        let anchor = model.snapshot();

        let mut participant = ParticipantState::new(0, Vec::new(), cfg.memory_capacity);
        for _ in 0..8 {
            participant
                .data_memory
                .push(Vector::from_fn(3, |_| rng.normal() * 2.0));
        }
        // A few rounds of local training with the deltas applied back.
        for round in 0..cfg.rounds_per_stage {
            let delta = local_train_novel(
                &participant,
                &model,
                &anchor,
                &cfg,
                &NovelTrainOptions::default(),
                &mut rng.child(&format!("r{round}")),
            )
            .unwrap();
            model.apply_delta(&delta).unwrap();
        }
        for (c, before) in frozen_before.iter().enumerate() {
            assert_eq!(
                &model.classifier.row_vector(c),
                before,
                "seed {seed}: frozen row {c} moved"
            );
        }
    }
}

#[test]
fn heterogeneity_decreases_with_alpha() {
    // Average total-variation distance between participant label
    // distributions and the global distribution is nonincreasing in alpha.
    let classes = 4;
    let mut rng = RngStream::from_seed(11);
    let means: Vec<Vector> = (0..classes)
        .map(|c| Vector::from_fn(2, |d| if d == 0 { c as f64 * 10.0 } else { 0.0 }))
        .collect();
    let spec = GaussianMixtureSpec {
        class_count: classes,
        dim: 2,
        stddev: 1.0,
        means,
        samples_per_class: 200,
    };
    let data = generate_gaussian_mixture(&spec, &mut rng).unwrap();
    let global = vec![1.0 / classes as f64; classes];

    let mut tv_by_alpha = Vec::new();
    for &alpha in &[0.001f64, 0.1, 1.0, 100.0] {
        let mut total = 0.0;
        let mut runs = 0usize;
        for seed in 0..10u64 {
            let parts = dirichlet_partition(
                &data.samples,
                classes,
                &PartitionSpec::uniform(8, alpha, classes),
                &mut RngStream::from_seed(1000 + seed).child("partitioning"),
            )
            .unwrap();
            for part in parts.iter().filter(|p| !p.is_empty()) {
                let mut counts = vec![0.0; classes];
                for s in part {
                    counts[s.label] += 1.0;
                }
                let n: f64 = counts.iter().sum();
                let tv: f64 = counts
                    .iter()
                    .zip(&global)
                    .map(|(c, g)| (c / n - g).abs())
                    .sum::<f64>()
                    / 2.0;
                total += tv;
                runs += 1;
            }
        }
        tv_by_alpha.push(total / runs as f64);
    }
    for window in tv_by_alpha.windows(2) {
        assert!(
            window[0] >= window[1] - 1e-9,
            "heterogeneity not monotone: {tv_by_alpha:?}"
        );
    }
}
