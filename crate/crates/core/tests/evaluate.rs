//! `evaluate` against a hand count, and its chance level on labels that are
//! independent of the inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotens::data::Dataset;
use rotens::model::{argmax_rows, build_small_cnn, ModeKind};
use rotens::train::{evaluate, evaluate_chunked};
use rotens::{InferenceMode, Tensor4};

fn random_set(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor4::from_vec(
        [n, 1, 8, 8],
        (0..n * 64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let labels = (0..n).map(|_| rng.gen_range(0..10)).collect();
    Dataset::new(images, labels, Some(10), "random").unwrap()
}

#[test]
fn accuracy_matches_a_hand_count_in_every_mode() {
    let model = build_small_cnn(10, [1, 8, 8], [3, 4, 4, 5], 2).unwrap();
    let set = random_set(150, 3);
    for kind in ModeKind::ALL {
        let mode = InferenceMode::c4(kind);
        let scores = model.predict_scores(set.images(), &mode).unwrap();
        let hits = argmax_rows(&scores)
            .iter()
            .zip(set.labels())
            .filter(|(p, l)| p == l)
            .count();
        let want = hits as f64 / 150.0;
        assert_eq!(evaluate(&model, &set, &mode).unwrap(), want, "{kind}");
        // chunking never changes a prediction
        assert_eq!(
            evaluate_chunked(&model, &set, &mode, 7).unwrap(),
            want,
            "{kind}"
        );
    }
}

#[test]
fn independent_labels_give_chance_accuracy() {
    let model = build_small_cnn(10, [1, 8, 8], [3, 4, 4, 5], 4).unwrap();
    let n = 2000;
    let set = random_set(n, 5);
    let acc = evaluate(&model, &set, &InferenceMode::c4(ModeKind::OursMax)).unwrap();
    // Binomial(n, 0.1) / n; five standard deviations
    let sd = (0.1 * 0.9 / n as f64).sqrt();
    assert!((acc - 0.1).abs() < 5.0 * sd, "accuracy {acc}");
}
