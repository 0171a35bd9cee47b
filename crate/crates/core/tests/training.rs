mod common;

use common::*;
use rand::Rng;
use recmia::classifier::{
    predict_membership, train_attack, training_loss, AttackError, AttackTrainConfig,
};
use recmia::dataset::UserId;
use recmia::features::{build_embeddings, Membership, Origin, UserFeature};
use recmia::mf::{train_mf, FactorModel, TrainConfig};
use recmia::seeding::{derive_seed, rng_from_seed};

fn sample(id: u32, vector: Vec<f64>, label: Membership) -> UserFeature {
    UserFeature {
        user_id: UserId(id),
        vector,
        label,
        origin: Origin::Shadow,
        degenerate: false,
    }
}

/// Two classes of 20 points split by the line x₀ = 0 with margin 1.
fn toy_separable() -> Vec<UserFeature> {
    (0..20u32)
        .flat_map(|i| {
            let spread = f64::from(i % 5) - 2.0;
            let depth = 0.5 + 0.1 * f64::from(i);
            [
                sample(i, vec![depth, spread], Membership::Member),
                sample(100 + i, vec![-depth, -spread], Membership::Nonmember),
            ]
        })
        .collect()
}

fn accuracy(model: &recmia::MlpModel, samples: &[UserFeature]) -> f64 {
    let hits = samples
        .iter()
        .filter(|s| (predict_membership(model, &s.vector).unwrap() > 0.5) == s.label.is_member())
        .count();
    hits as f64 / samples.len() as f64
}

#[test]
fn objective_decreases_under_default_config() {
    let mut rng = rng_from_seed(11);
    let random: Vec<(u32, u32, f64)> = (0..300)
        .map(|_| {
            (
                rng.gen_range(1..30),
                rng.gen_range(1..80),
                f64::from(rng.gen_range(1..=10u32)) / 2.0,
            )
        })
        .collect();
    for fixture in [table(&[(1, 1, 1.0)]), separable_table(), table(&random)] {
        let cfg = TrainConfig {
            seed: 3,
            ..TrainConfig::default()
        };
        let initial = FactorModel::initialize(&fixture, &cfg)
            .unwrap()
            .objective(&fixture, cfg.regularization)
            .unwrap();
        let trained = train_mf(&fixture, &cfg).unwrap();
        let fin = trained.objective(&fixture, cfg.regularization).unwrap();
        assert!(fin < initial, "{fin} !< {initial}");
        assert!(trained.is_finite());
    }
}

#[test]
fn train_mf_is_bitwise_deterministic() {
    let t = separable_table();
    let cfg = TrainConfig {
        k: 6,
        seed: 99,
        ..TrainConfig::default()
    };
    let dump = |m: &FactorModel| {
        let mut buf = Vec::new();
        m.write_json(&mut buf).unwrap();
        buf
    };
    assert_eq!(
        dump(&train_mf(&t, &cfg).unwrap()),
        dump(&train_mf(&t, &cfg).unwrap())
    );
    let other = TrainConfig { seed: 100, ..cfg };
    assert_ne!(
        dump(&train_mf(&t, &cfg).unwrap()),
        dump(&train_mf(&t, &other).unwrap())
    );
}

#[test]
fn embeddings_are_the_item_factors() {
    let t = table(&[(1, 1, 4.0), (1, 2, 3.0), (2, 2, 5.0), (2, 3, 1.0)]);
    let cfg = TrainConfig {
        k: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let model = train_mf(&t, &cfg).unwrap();
    let emb = build_embeddings(&t, &cfg).unwrap();
    assert_eq!(emb.len(), 3);
    for (item, q) in model.item_vectors() {
        assert_eq!(emb.get(item).unwrap(), q);
    }
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let samples = toy_separable();
    let cfg = AttackTrainConfig {
        epochs: 0,
        seed: 4,
        ..AttackTrainConfig::default()
    };
    let model = train_attack(&samples, &cfg).unwrap();

    // Glorot-uniform draws in layer order, weights only; biases start at zero.
    let mut rng = rng_from_seed(derive_seed(4, "attack-init"));
    for (layer, (fan_in, fan_out)) in
        model
            .network
            .layers()
            .iter()
            .zip([(2, 32), (32, 16), (16, 1)])
    {
        let limit = (6.0 / f64::from(fan_in + fan_out)).sqrt();
        let expected: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        assert_eq!(layer.weights, expected);
        assert!(layer.biases.iter().all(|&b| b == 0.0));
    }
}

#[test]
fn separable_toy_set_is_learned() {
    let samples = toy_separable();
    let cfg = AttackTrainConfig {
        epochs: 500,
        seed: 2,
        ..AttackTrainConfig::default()
    };
    let model = train_attack(&samples, &cfg).unwrap();
    assert_eq!(accuracy(&model, &samples), 1.0);

    let untrained = train_attack(
        &samples,
        &AttackTrainConfig {
            epochs: 0,
            ..cfg.clone()
        },
    )
    .unwrap();
    assert!(training_loss(&model, &samples) < training_loss(&untrained, &samples));
}

#[test]
fn swapped_labels_flip_the_decision() {
    let samples = toy_separable();
    let swapped: Vec<UserFeature> = samples
        .iter()
        .map(|s| UserFeature {
            label: s.label.flipped(),
            ..s.clone()
        })
        .collect();
    let cfg = AttackTrainConfig {
        epochs: 500,
        seed: 2,
        ..AttackTrainConfig::default()
    };
    let model = train_attack(&swapped, &cfg).unwrap();
    assert_eq!(accuracy(&model, &swapped), 1.0);
    assert_eq!(accuracy(&model, &samples), 0.0);
}

#[test]
fn lone_positive_is_overfit() {
    // training needs both classes, so the positive gets one distant negative;
    // two samples give one step per epoch, hence the larger rate
    let lone = [sample(1, vec![1.0, 2.0], Membership::Member)];
    assert!(matches!(
        train_attack(&lone, &AttackTrainConfig::default()),
        Err(AttackError::SingleClass)
    ));
    let pair = [
        lone[0].clone(),
        sample(2, vec![-3.0, 0.5], Membership::Nonmember),
    ];
    let model = train_attack(
        &pair,
        &AttackTrainConfig {
            epochs: 200,
            learning_rate: 0.1,
            ..AttackTrainConfig::default()
        },
    )
    .unwrap();
    let p = predict_membership(&model, &pair[0].vector).unwrap();
    assert!(p > 0.9, "p = {p}");
}

#[test]
fn train_attack_is_bitwise_deterministic() {
    let samples = toy_separable();
    let cfg = AttackTrainConfig {
        epochs: 20,
        seed: 8,
        ..AttackTrainConfig::default()
    };
    let dump = |cfg: &AttackTrainConfig| {
        let mut buf = Vec::new();
        train_attack(&samples, cfg)
            .unwrap()
            .write_json(&mut buf)
            .unwrap();
        buf
    };
    assert_eq!(dump(&cfg), dump(&cfg));
    assert_ne!(
        dump(&cfg),
        dump(&AttackTrainConfig {
            seed: 9,
            ..cfg.clone()
        })
    );
}
