//! End-to-end use of the public API: sample, split, persist, smooth, run GM,
//! train a small hybrid and restore it from a checkpoint.

use hybrid_inference::datagen::{
    generate_lorenz, read_csv, sample_linear, split_trajectory, write_csv, LorenzSampling, SplitSpec, Trajectory,
};
use hybrid_inference::gm::kalman_smooth;
use hybrid_inference::hmm::{build_lorenz_model, build_uniform_motion_model, GaussianHmm};
use hybrid_inference::hybrid::{run_inference, HybridConfig, HybridNet, InferenceMode};
use hybrid_inference::nn::Checkpoint;
use hybrid_inference::seed::derive_seed;
use hybrid_inference::training::{
    evaluate, observation_mse, selected_ground_truth, selected_mse, smoother_mse, train, TrainConfig,
};
use proptest::prelude::*;

fn uniform() -> GaussianHmm {
    build_uniform_motion_model(1.0, 0.3, 0.5).unwrap()
}

fn csv_round_trip(t: &Trajectory) -> Trajectory {
    let mut buf = Vec::new();
    write_csv(t, &mut buf).unwrap();
    read_csv(buf.as_slice()).unwrap()
}

#[test]
fn linear_pipeline_end_to_end() {
    let model = uniform();
    let full = sample_linear(&model, 900, derive_seed(7, "data")).unwrap();
    let (tr, va, te) = split_trajectory(&full, SplitSpec { train: 500, val: 200, test: 200 }).unwrap();

    // Persisted splits come back bit for bit.
    let te_disk = csv_round_trip(&te);
    assert_eq!(te_disk.observations, te.observations);
    assert_eq!(te_disk.states, te.states);

    let obs = observation_mse(&model, &te).unwrap();
    let ks = smoother_mse(&model, &te).unwrap();
    assert!(ks < obs, "smoother {ks} vs observations {obs}");

    // Long GM runs reach the smoother's estimate.
    let gm = HybridConfig { iterations: 2000, nf: 8, mode: InferenceMode::GmOnly, ..HybridConfig::default() };
    let net = HybridNet::for_training(&model, 8, 1).unwrap();
    let gm_mse = evaluate(&net, &model, &te, &gm, 3).unwrap();
    assert!((gm_mse - ks).abs() <= 1e-3 * ks, "GM {gm_mse} vs smoother {ks}");

    let hybrid = HybridConfig { iterations: 10, nf: 8, ..HybridConfig::default() };
    let cfg = TrainConfig { max_steps: 20, eval_interval: 10, window: 50, ..TrainConfig::default() };
    let net = HybridNet::for_training(&model, hybrid.nf, derive_seed(7, "init")).unwrap();
    let out = train(net, &model, &tr, &va, &hybrid, &cfg, derive_seed(7, "train")).unwrap();
    assert!(out.diverged.is_none());
    assert_eq!(out.curve.iter().map(|p| p.step).collect::<Vec<_>>(), [10, 20]);
    assert!(out.curve.iter().all(|p| out.best_val_mse <= p.val_mse));

    // A restored checkpoint reproduces the trained estimator exactly.
    let text = out.net.checkpoint().to_json();
    let mut restored = HybridNet::for_model(&model, hybrid.nf, 99).unwrap();
    restored.load_checkpoint(&Checkpoint::from_json(&text).unwrap()).unwrap();
    let a = evaluate(&out.net, &model, &te, &hybrid, 5).unwrap();
    let b = evaluate(&restored, &model, &te, &hybrid, 5).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(a.is_finite());
}

#[test]
fn lorenz_extended_smoother_beats_observations() {
    let sampling = LorenzSampling { inner_dt: 1e-3, ..LorenzSampling::default() };
    let t = generate_lorenz(&sampling, 400, 100, 11).unwrap();
    let model = build_lorenz_model(0.05, 2, 10f64.sqrt(), 0.5).unwrap();
    let obs = observation_mse(&model, &t).unwrap();
    let eks = smoother_mse(&model, &t).unwrap();
    assert!(eks < obs, "extended smoother {eks} vs observations {obs}");
}

#[test]
fn inference_history_has_one_iterate_per_step() {
    let model = uniform();
    let t = sample_linear(&model, 60, 2).unwrap();
    let cfg = HybridConfig { iterations: 7, nf: 6, ..HybridConfig::default() };
    let net = HybridNet::for_model(&model, cfg.nf, 4).unwrap();
    let hist = run_inference(&net, &model, &t.observations, &cfg, 8).unwrap();
    assert_eq!(hist.len(), 7);
    assert!(hist.iter().all(|x| x.dim() == (60, model.state_dim())));
    let gt = selected_ground_truth(&t, &model).unwrap();
    let last = selected_mse(hist.last().unwrap(), &gt, model.selection()).unwrap();
    let direct = evaluate(&net, &model, &t, &cfg, 8).unwrap();
    assert_eq!(last.to_bits(), direct.to_bits());
}

#[test]
fn smoother_ignores_csv_persistence() {
    let model = uniform();
    let t = sample_linear(&model, 120, 21).unwrap();
    let a = kalman_smooth(&model, &t.observations).unwrap().means_tensor();
    let b = kalman_smooth(&model, &csv_round_trip(&t).observations).unwrap().means_tensor();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn splits_partition_the_prefix(train in 0usize..40, val in 0usize..40, test in 0usize..40, extra in 0usize..10) {
        let t = sample_linear(&uniform(), train + val + test + extra + 1, 5).unwrap();
        let (a, b, c) = split_trajectory(&t, SplitSpec { train, val, test }).unwrap();
        prop_assert_eq!((a.len(), b.len(), c.len()), (train, val, test));
        let rows: Vec<_> = [&a, &b, &c].iter().flat_map(|s| s.observations.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>()).collect();
        let prefix: Vec<_> = t.observations.rows().into_iter().take(train + val + test).map(|r| r.to_vec()).collect();
        prop_assert_eq!(rows, prefix);
    }

    #[test]
    fn oversized_split_is_rejected(len in 1usize..50, over in 1usize..20) {
        let t = sample_linear(&uniform(), len, 1).unwrap();
        let spec = SplitSpec { train: len, val: over, test: 0 };
        prop_assert!(split_trajectory(&t, spec).is_err());
    }

    #[test]
    fn sampling_is_a_function_of_the_seed(seed in any::<u64>(), k in 1usize..40) {
        let model = uniform();
        let a = sample_linear(&model, k, seed).unwrap();
        let b = sample_linear(&model, k, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(csv_round_trip(&a).observations, a.observations);
    }

    #[test]
    fn derived_seeds_separate_labels(root in any::<u64>()) {
        let labels = ["data", "init", "train", "eval-latents"];
        let seeds: Vec<u64> = labels.iter().map(|l| derive_seed(root, l)).collect();
        for i in 0..seeds.len() {
            prop_assert_eq!(seeds[i], derive_seed(root, labels[i]));
            for j in i + 1..seeds.len() {
                prop_assert_ne!(seeds[i], seeds[j]);
            }
        }
    }
}
