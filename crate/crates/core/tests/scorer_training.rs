use lidarseg::projection::{project, ProjectionConfig, RangeImage};
use lidarseg::scan_io::{decode_velodyne, encode_velodyne, training_scene, SceneConfig};
use lidarseg::scorer::{
    load_scores, predict, save_scores, train, ScorerModel, TrainConfig, TrainingSample, FEATURE_DIM,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Range image of one rendered frame and its per-pixel movable labels.
fn labeled_image(scene: &SceneConfig) -> (RangeImage, Vec<Option<bool>>) {
    let (cloud, gt, _) = scene.render(0).unwrap();
    let (img, map, _) = project(&cloud, &ProjectionConfig::default()).unwrap();
    let labels = map
        .pixel_to_point
        .iter()
        .map(|k| k.map(|k| gt.labels[k].is_object()))
        .collect();
    (img, labels)
}

fn sample_of(seed: u64) -> TrainingSample {
    let (img, labels) = labeled_image(&training_scene(seed));
    TrainingSample::from_image(&img, &labels).unwrap()
}

fn pixel_scores(model: &ScorerModel, s: &TrainingSample) -> (Vec<f64>, Vec<bool>) {
    s.features
        .iter()
        .zip(&s.labels)
        .zip(&s.valid)
        .filter(|(_, v)| **v)
        .map(|((x, y), _)| {
            let a = model.logits(x);
            (1.0 / (1.0 + (a[0] - a[1]).exp()), *y == 1)
        })
        .unzip()
}

#[test]
fn gradient_matches_central_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(5..60);
        let sample = TrainingSample {
            features: (0..n)
                .map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0)))
                .collect(),
            labels: (0..n).map(|_| rng.random_bool(0.3) as u8).collect(),
            valid: (0..n).map(|_| rng.random_bool(0.9)).collect(),
        };
        let mut model = ScorerModel::zeros();
        model.class_weights = [rng.random_range(0.2..3.0), rng.random_range(0.2..10.0)];
        for d in 0..FEATURE_DIM {
            model.feature_mean[d] = rng.random_range(-1.0..1.0);
            model.feature_std[d] = rng.random_range(0.5..2.0);
        }
        let theta: Vec<f64> = (0..ScorerModel::num_params())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let model = model.with_flat_params(&theta);
        let (_, grad) = model.loss_and_gradient(&sample);
        let h = 1e-5;
        for k in 0..theta.len() {
            let mut p = theta.clone();
            p[k] += h;
            let up = model.loss_at(&p, &sample);
            p[k] -= 2.0 * h;
            let down = model.loss_at(&p, &sample);
            let fd = (up - down) / (2.0 * h);
            let rel = (grad[k] - fd).abs() / grad[k].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst:e}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

fn desk_config(balancing: bool) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-6,
        momentum: 0.99,
        epochs: 15,
        class_balancing: balancing,
        seed: 3,
    }
}

#[test]
fn held_out_scene_is_classified() {
    let train_set: Vec<TrainingSample> = (0..6).map(sample_of).collect();
    let (model, report) = train(&train_set, &desk_config(true)).unwrap();
    assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
    let test = sample_of(1000);
    let (scores, truth) = pixel_scores(&model, &test);
    let correct = scores
        .iter()
        .zip(&truth)
        .filter(|(s, t)| (**s >= 0.5) == **t)
        .count();
    let acc = correct as f64 / truth.len() as f64;
    assert!(acc > 0.9, "held-out pixel accuracy {acc}");
}

#[test]
fn scores_survive_a_file_round_trip() {
    let (img, labels) = labeled_image(&training_scene(7));
    let sample = TrainingSample::from_image(&img, &labels).unwrap();
    let (model, _) = train(&[sample], &desk_config(true)).unwrap();
    let scores = predict(&model, &img).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("000000.bin");
    save_scores(&path, &scores).unwrap();
    let back = load_scores(&path, img.height, img.width).unwrap();
    for i in (0..img.len()).filter(|&i| img.valid[i]) {
        assert!((back.objectness[i] - scores.objectness[i].clamp(1e-6, 1.0 - 1e-6)).abs() < 1e-6);
    }
}

#[test]
fn velodyne_round_trip_keeps_features() {
    let (cloud, _, _) = training_scene(3).render(0).unwrap();
    let back = decode_velodyne(&encode_velodyne(&cloud), 0).unwrap().cloud;
    let cfg = ProjectionConfig::default();
    let (a, _, _) = project(&cloud, &cfg).unwrap();
    let (b, _, _) = project(&back, &cfg).unwrap();
    assert_eq!(a.valid, b.valid);
    for i in (0..a.len()).filter(|&i| a.valid[i]) {
        assert!((a.range[i] - b.range[i]).abs() < 1e-3);
    }
}
