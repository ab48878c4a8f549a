use approx::assert_abs_diff_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use molrg_core::dae::{DaeParams, Parameterization};
use molrg_core::linalg::subspace_distance;
use molrg_core::molrg::{Dataset, MoLRGModel};
use molrg_core::optim::{
    ksubspaces_oracle, match_and_score, pca_oracle, pca_oracle_adversarial, sgd_train, NoiseSharing, TrainConfig,
};
use molrg_core::schedule::Schedule;

#[test]
fn pca_recovers_noiseless_subspaces_once_n_reaches_d() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for d in 1..=6 {
        let model = MoLRGModel::random(&mut rng, 30, &[d], true).unwrap();
        for count in d..d + 4 {
            let data = model.sample_dataset(&mut rng, count, 0.0).unwrap();
            let u = pca_oracle(&data.samples, d).unwrap();
            assert!(subspace_distance(&u, &model.bases()[0]).unwrap() < 1e-6, "d={d} N={count}");
        }
    }
}

#[test]
fn adversarial_completion_attains_the_failure_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (n, d, count) in [(48, 8, 3), (20, 6, 1), (10, 7, 2)] {
        let model = MoLRGModel::random(&mut rng, n, &[d], true).unwrap();
        let data = model.sample_dataset(&mut rng, count, 0.0).unwrap();
        let u = pca_oracle_adversarial(&data.samples, d, &model.bases()[0]).unwrap();
        let dist = subspace_distance(&u, &model.bases()[0]).unwrap();
        let bound = (2.0 * (d - count).min(n - d) as f64).sqrt();
        assert!(dist >= bound - 1e-6, "n={n} d={d} N={count}: {dist} < {bound}");
    }
}

#[test]
fn ksubspaces_recovers_a_two_component_mixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = MoLRGModel::random(&mut rng, 48, &[5, 5], true).unwrap();
    let data = model.sample_dataset_balanced(&mut rng, 10, 0.0).unwrap();
    let fit = ksubspaces_oracle(&data.samples, 2, 5, 10, &mut rng, None).unwrap();
    let rep = match_and_score(fit.params.bases(), model.bases(), 0.5).unwrap();
    assert!(rep.success);
    assert!(rep.mean_distance < 1e-6);
    // every sample is assigned to the component that generated it, up to relabeling
    let relabel: Vec<usize> = (0..2).map(|k| rep.permutation.iter().position(|&p| p == k).unwrap()).collect();
    for (i, &label) in data.labels.iter().enumerate() {
        assert_eq!(relabel[fit.assignments[i]], label);
    }
}

#[test]
fn softmax_sgd_from_the_perturbed_truth_recovers_the_mixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = MoLRGModel::random(&mut rng, 16, &[2, 2], true).unwrap();
    let data = model.sample_dataset_balanced(&mut rng, 40, 0.0).unwrap();
    let mut cfg = TrainConfig::mixture_defaults().with_seed(9);
    cfg.learning_rate = 5e-3;
    cfg.batch = 256;
    cfg.iters = 1500;
    cfg.noise = NoiseSharing::PerSample;
    let fit = sgd_train(&data, &Schedule::default(), &cfg, Some(&model), &[2, 2], Parameterization::Softmax).unwrap();
    let rep = match_and_score(fit.params.bases(), model.bases(), 0.5).unwrap();
    assert!(rep.success, "{rep:?}");
}

#[test]
fn model_dataset_and_params_survive_files() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = MoLRGModel::random(&mut rng, 9, &[2, 3], false).unwrap();
    let data = model.sample_dataset(&mut rng, 17, 0.05).unwrap();
    let params = DaeParams::from_model(&model);
    let dir = tempdir();
    let paths = [dir.join("m.json"), dir.join("d.json"), dir.join("p.json")];
    std::fs::write(&paths[0], model.to_json()).unwrap();
    std::fs::write(&paths[1], data.to_json()).unwrap();
    std::fs::write(&paths[2], params.to_json()).unwrap();
    let m2 = MoLRGModel::from_json(&std::fs::read_to_string(&paths[0]).unwrap()).unwrap();
    let d2 = Dataset::from_json(&std::fs::read_to_string(&paths[1]).unwrap()).unwrap();
    let p2 = DaeParams::from_json(&std::fs::read_to_string(&paths[2]).unwrap()).unwrap();
    assert_eq!(m2.bases(), model.bases());
    assert_eq!(d2.samples, data.samples);
    assert_eq!(d2.labels, data.labels);
    assert_eq!(p2.bases(), params.bases());
    for (a, b) in m2.weights().iter().zip(model.weights()) {
        assert_abs_diff_eq!(a, b);
    }
    std::fs::remove_dir_all(dir).unwrap();
}

fn tempdir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("molrg-core-it-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
