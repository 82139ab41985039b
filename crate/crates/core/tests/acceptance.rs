//! End-to-end acceptance runs. Each criterion prints one PASS/FAIL line and
//! a summary line closes the run. A criterion that cannot be evaluated at all
//! (an error rather than a verdict) fails the process; a FAIL verdict does
//! so only with `HINF_ACCEPT_STRICT=1`.
//!
//! The linear and Lorenz training criteria dominate the runtime (tens of
//! minutes on one core). `HINF_ACCEPT=1,2,3` restricts the run to a subset.

use std::io::Write;
use std::time::Instant;

use hybrid_inference::datagen::{
    generate_lorenz, integrate_lorenz, sample_linear, split_trajectory, LorenzSampling, SplitSpec, Trajectory,
};
use hybrid_inference::gm::{extended_smooth, gm_messages, gm_run, kalman_filter, kalman_smooth, log_joint};
use hybrid_inference::hmm::{
    build_drag_model, build_lorenz_model, build_uniform_motion_model, is_spd, DragParams, GaussianHmm, ModelSpec,
    Prior,
};
use hybrid_inference::hybrid::{init_latents, run_inference, HybridConfig, HybridNet, InferenceMode};
use hybrid_inference::nn::Tensor;
use hybrid_inference::seed::derive_seed;
use hybrid_inference::training::{
    evaluate, log_grid, loss_and_gradients, observation_mse, selected_ground_truth, selected_mse, smoother_mse,
    train, tune_gm, weighted_loss, TrainConfig,
};
use hybrid_inference::Result;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn uniform_family(sigma: f64) -> ModelSpec {
    ModelSpec::UniformMotion {
        dt: 1.0,
        sigma,
        lambda: 0.5,
    }
}

/// Drag-model data projected to the two positions.
fn drag_data(k: usize, seed: u64) -> Result<Trajectory> {
    let truth = build_drag_model(DragParams::default())?;
    sample_linear(&truth, k, seed)?.select_states(truth.selection())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn rmse(a: &Tensor, b: &Tensor) -> f64 {
    ((a - b).mapv(|v| v * v).mean().unwrap_or(f64::NAN)).sqrt()
}

fn gm_final(model: &GaussianHmm, y: &Tensor, n: usize) -> Result<Tensor> {
    let (x0, _) = init_latents(y, model, 1, 0)?;
    gm_run(model, y, &x0, 0.005, n, |_, _| {})
}

fn criterion_1() -> Result<Verdict> {
    let t = drag_data(20_000, 101)?;
    let (_, val, test) = split_trajectory(&t, SplitSpec { train: 0, val: 10_000, test: 10_000 })?;
    let tuned = tune_gm(&uniform_family(1.0), &log_grid(1e-3, 1e3, 13), None, &val)?;
    let model = uniform_family(tuned.sigma_star).build()?;
    let ks = smoother_mse(&model, &test)?;
    let gt = selected_ground_truth(&test, &model)?;
    let gm = selected_mse(&gm_final(&model, &test.observations, 50)?, &gt, model.selection())?;
    let rel = (gm - ks).abs() / ks;

    let head = test.slice(0, 1000);
    let long = gm_final(&model, &head.observations, 5000)?;
    let flat = model.clone().with_prior(Prior::LiftedObservation { variance: 1e10 })?;
    let oracle = kalman_smooth(&flat, &head.observations)?.means_tensor();
    let long_rmse = rmse(&long, &oracle);
    verdict(
        rel <= 0.01 && long_rmse <= 1e-3,
        format!(
            "sigma*={:.4} KS={ks:.5} GM(N=50)={gm:.5} rel diff={:.2}% (<=1%); N=5000 RMSE vs smoother={long_rmse:.2e} (<=1e-3)",
            tuned.sigma_star,
            100.0 * rel
        ),
    )
}

fn criterion_2() -> Result<Verdict> {
    let t = drag_data(10, 202)?;
    let model = build_uniform_motion_model(1.0, 0.3, 0.5)?;
    let gt = selected_ground_truth(&t, &model)?;
    let cfg = HybridConfig {
        iterations: 5,
        ..HybridConfig::default()
    };
    let mut net = HybridNet::for_model(&model, cfg.nf, 203)?;
    let latent = 204;
    let (grads, _) = loss_and_gradients(&net, &model, &t.observations, &gt, &cfg, latent)?;
    let loss = |net: &HybridNet| -> Result<f64> {
        let it = run_inference(net, &model, &t.observations, &cfg, latent)?;
        Ok(weighted_loss(&it, &gt, model.selection())?.total)
    };
    let h = 1e-6;
    let (mut checked, mut bad, mut worst) = (0usize, 0usize, 0.0f64);
    let ids: Vec<_> = net.store.ids().collect();
    for id in ids {
        let g = grads.get(id).expect("every parameter has a gradient").clone();
        for ((r, c), &analytic) in g.indexed_iter() {
            let orig = net.store.value(id)[[r, c]];
            net.store.value_mut(id)[[r, c]] = orig + h;
            let fp = loss(&net)?;
            net.store.value_mut(id)[[r, c]] = orig - h;
            let fm = loss(&net)?;
            net.store.value_mut(id)[[r, c]] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let err = (analytic - fd).abs();
            let allowed = (1e-4 * analytic.abs().max(fd.abs())).max(1e-8);
            worst = worst.max(err / allowed);
            bad += usize::from(err > allowed);
            checked += 1;
        }
    }
    verdict(
        bad == 0,
        format!("{checked} parameters, {bad} outside tolerance, worst error/allowed={worst:.3}"),
    )
}

fn criterion_3() -> Result<Verdict> {
    let mut equal = 0;
    for seed in 0..3u64 {
        let t = drag_data(40, 300 + seed)?;
        let model = build_uniform_motion_model(1.0, 0.5, 0.5)?;
        let net = HybridNet::for_training(&model, 48, seed)?;
        let cfg = HybridConfig::default();
        let hybrid = run_inference(&net, &model, &t.observations, &cfg, seed)?;
        let gm_cfg = HybridConfig {
            mode: InferenceMode::GmOnly,
            ..cfg
        };
        let gm = run_inference(&net, &model, &t.observations, &gm_cfg, seed)?;
        equal += usize::from(hybrid == gm);
    }
    verdict(equal == 3, format!("{equal}/3 instances bitwise equal over 50 iterations"))
}

struct LinearRun {
    ks: f64,
    gm: f64,
    hybrid: f64,
    gnn: f64,
    hybrid_best_val: f64,
    gm_val: f64,
    finite: bool,
}

// 100-step windows give gradients too noisy for the hybrid's 50-step
// recurrence on this data: its training loss drifts upwards after ~1000
// steps. 400-step windows train smoothly at a similar cost per node.
fn linear_train_config() -> TrainConfig {
    TrainConfig {
        max_steps: 800,
        window: 400,
        eval_interval: 100,
        ..TrainConfig::default()
    }
}

fn linear_run(seed: u64) -> Result<LinearRun> {
    let t = drag_data(30_000, 400 + seed)?;
    let (train_t, val, test) = split_trajectory(&t, SplitSpec { train: 10_000, val: 10_000, test: 10_000 })?;
    let tuned = tune_gm(&uniform_family(1.0), &log_grid(1e-3, 1e3, 13), None, &val)?;
    let model = uniform_family(tuned.sigma_star).build()?;
    let tcfg = linear_train_config();
    let eval_seed = derive_seed(seed, "eval-latents");
    let gm_cfg = HybridConfig {
        mode: InferenceMode::GmOnly,
        ..HybridConfig::default()
    };
    let base = HybridNet::for_training(&model, 48, derive_seed(seed, "init"))?;
    let gm = evaluate(&base, &model, &test, &gm_cfg, eval_seed)?;
    let gm_val = evaluate(&base, &model, &val, &gm_cfg, derive_seed(derive_seed(seed, "train"), "eval-latents"))?;
    let mut out = [0.0; 2];
    let mut best_val = f64::NAN;
    let mut finite = true;
    for (slot, mode) in [InferenceMode::Hybrid, InferenceMode::GnnOnly].into_iter().enumerate() {
        let cfg = HybridConfig {
            mode,
            ..HybridConfig::default()
        };
        let net = HybridNet::for_training(&model, 48, derive_seed(seed, "init"))?;
        let o = train(net, &model, &train_t, &val, &cfg, &tcfg, derive_seed(seed, "train"))?;
        finite &= o.diverged.is_none() && o.net.store.all_finite();
        out[slot] = evaluate(&o.net, &model, &test, &cfg, eval_seed)?;
        if mode == InferenceMode::Hybrid {
            best_val = o.best_val_mse;
        }
    }
    Ok(LinearRun {
        ks: smoother_mse(&model, &test)?,
        gm,
        hybrid: out[0],
        gnn: out[1],
        hybrid_best_val: best_val,
        gm_val,
        finite,
    })
}

fn criterion_4() -> Result<Verdict> {
    let runs = (0..3).map(linear_run).collect::<Result<Vec<_>>>()?;
    let med = |f: fn(&LinearRun) -> f64| median(runs.iter().map(f).collect());
    let (ks, hy, gnn, gm) = (med(|r| r.ks), med(|r| r.hybrid), med(|r| r.gnn), med(|r| r.gm));
    let dominates_gm = runs.iter().all(|r| r.hybrid <= 1.05 * r.gm);
    let val_no_worse = runs.iter().all(|r| r.hybrid_best_val <= r.gm_val);
    let finite = runs.iter().all(|r| r.finite);
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("[KS {:.5} GM {:.5} GNN {:.5} hybrid {:.5}]", r.ks, r.gm, r.gnn, r.hybrid))
        .collect();
    verdict(
        hy <= ks && hy <= gnn && dominates_gm && val_no_worse && finite,
        format!(
            "medians: hybrid={hy:.5} KS={ks:.5} GNN={gnn:.5} GM={gm:.5}; hybrid<=1.05*GM each seed: {dominates_gm}; \
             best val<=GM val: {val_no_worse}; finite: {finite}; per seed {}",
            per_seed.join(" ")
        ),
    )
}

struct LorenzRun {
    obs: f64,
    eks: f64,
    hybrid: f64,
    gnn: f64,
}

fn lorenz_split(seed: u64) -> Result<(Trajectory, Trajectory, Trajectory)> {
    let t = generate_lorenz(&LorenzSampling::default(), 14_000, 1000, 500 + seed)?;
    split_trajectory(&t, SplitSpec { train: 5000, val: 5000, test: 4000 })
}

fn lorenz_run(seed: u64) -> Result<LorenzRun> {
    let (train_t, val, test) = lorenz_split(seed)?;
    let family = ModelSpec::Lorenz {
        dt: 0.05,
        terms: 2,
        sigma: 1.0,
        lambda: 0.5,
    };
    let tuned = tune_gm(&family, &log_grid(1e-3, 1e3, 13), None, &val)?;
    let model = family.with_noise(tuned.sigma_star, 0.5).build()?;
    let tcfg = TrainConfig {
        max_steps: 1500,
        eval_interval: 100,
        val_limit: Some(2000),
        ..TrainConfig::default()
    };
    let mut out = [0.0; 2];
    for (slot, mode) in [InferenceMode::Hybrid, InferenceMode::GnnOnly].into_iter().enumerate() {
        let cfg = HybridConfig {
            mode,
            ..HybridConfig::default()
        };
        let net = HybridNet::for_training(&model, 48, derive_seed(seed, "init"))?;
        let o = train(net, &model, &train_t, &val, &cfg, &tcfg, derive_seed(seed, "train"))?;
        out[slot] = evaluate(&o.net, &model, &test, &cfg, derive_seed(seed, "eval-latents"))?;
    }
    Ok(LorenzRun {
        obs: observation_mse(&model, &test)?,
        eks: smoother_mse(&model, &test)?,
        hybrid: out[0],
        gnn: out[1],
    })
}

fn criterion_5(runs: &[LorenzRun]) -> Result<Verdict> {
    let ordered = runs
        .iter()
        .all(|r| r.hybrid < r.eks && r.eks < r.obs && (r.obs - 0.25).abs() <= 0.03);
    let lines: Vec<String> = runs
        .iter()
        .map(|r| format!("[obs {:.4} E-KS {:.4} hybrid {:.4}]", r.obs, r.eks, r.hybrid))
        .collect();
    verdict(ordered, format!("hybrid < E-KS < obs (obs 0.25+-0.03) per seed: {}", lines.join(" ")))
}

fn criterion_6() -> Result<Verdict> {
    let (_, _, test) = lorenz_split(0)?;
    let model = build_lorenz_model(0.05, 2, 1.0, 0.5)?;
    let obs = observation_mse(&model, &test)?;
    verdict(
        (obs - 0.25).abs() <= 0.025,
        format!("observation MSE on {} test steps = {obs:.4} (0.25 +-10%)", test.len()),
    )
}

fn criterion_7() -> Result<Verdict> {
    let sel_model = build_uniform_motion_model(1.0, 1.0, 0.5)?;
    let gt = Array2::<f64>::zeros((4, 2));
    let mut exact = true;
    let mut worst_rel = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..20 {
        // Constant per-coordinate error e gives per-iteration MSE m = e².
        let e: f64 = if trial < 10 { 0.5 * (trial + 1) as f64 } else { rng.random_range(0.01..3.0) };
        let x = Array2::from_shape_fn((4, 4), |(_, j)| if j % 2 == 0 { e } else { 0.0 });
        let iterates = vec![x; 50];
        let report = weighted_loss(&iterates, &gt, sel_model.selection())?;
        let m = e * e;
        if trial < 10 {
            exact &= report.total == 25.5 * m;
        }
        worst_rel = worst_rel.max((report.total - 25.5 * m).abs() / (25.5 * m));
    }
    verdict(
        exact && worst_rel <= 1e-13,
        format!("N=50 total = 25.5*m bitwise for dyadic m: {exact}; worst relative error for arbitrary m {worst_rel:.1e}"),
    )
}

fn criterion_8() -> Result<Verdict> {
    let mut notes = Vec::new();
    let mut pass = true;

    // Messages are the gradient of the log-joint.
    let model = build_uniform_motion_model(1.0, 0.7, 0.5)?;
    let t = drag_data(12, 800)?;
    let mut rng = ChaCha8Rng::seed_from_u64(801);
    let x = Array2::from_shape_fn((12, 4), |_| rng.random_range(-2.0..2.0));
    let total = gm_messages(&model, &x, &t.observations)?.total();
    let mut worst = 0.0f64;
    for ((k, j), &m) in total.indexed_iter() {
        let h = 1e-5;
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[[k, j]] += h;
        xm[[k, j]] -= h;
        let fd = (log_joint(&model, &xp, &t.observations) - log_joint(&model, &xm, &t.observations)) / (2.0 * h);
        worst = worst.max((fd - m).abs() / m.abs().max(1.0));
    }
    pass &= worst <= 1e-6;
    notes.push(format!("message/FD {worst:.1e}"));

    // Smoother means are a fixed point of the messages.
    let drag = build_drag_model(DragParams::default())?;
    let mut fp = 0.0f64;
    for seed in 0..3 {
        let t = sample_linear(&drag, 200, 810 + seed)?;
        let s = kalman_smooth(&drag, &t.observations)?.means_tensor();
        let total = gm_messages(&drag, &s, &t.observations)?.total();
        for k in 1..199 {
            fp = fp.max(total.row(k).iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    pass &= fp <= 1e-6;
    notes.push(format!("fixed point {fp:.1e}"));

    // Equilibria of the Lorenz system.
    let still = LorenzSampling {
        obs_noise: 0.0,
        ..LorenzSampling::default()
    };
    let origin = integrate_lorenz([0.0; 3], &still, 10_000, 0)?;
    let origin_drift = origin.states.as_ref().map_or(f64::NAN, |x| x.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    let c = 72f64.sqrt();
    let wing = integrate_lorenz([c, c, 27.0], &still, 10_000, 0)?;
    let wing_states = wing.states.as_ref().expect("generated data has states");
    let drift_until = |n: usize| {
        wing_states
            .outer_iter()
            .take(n)
            .map(|r| (r[0] - c).abs().max((r[1] - c).abs()).max((r[2] - 27.0).abs()))
            .fold(0.0f64, f64::max)
    };
    let wing_drift = drift_until(10_000);
    pass &= origin_drift <= 1e-6 && wing_drift <= 1e-6;
    notes.push(format!(
        "equilibrium drift over 1e4 samples: origin {origin_drift:.1e}, C+ {wing_drift:.1e}"
    ));

    // Translation invariance of the hybrid.
    let model = build_uniform_motion_model(1.0, 0.5, 0.5)?;
    let t = drag_data(25, 820)?;
    let net = HybridNet::for_model(&model, 16, 821)?;
    let cfg = HybridConfig {
        nf: 16,
        iterations: 10,
        ..HybridConfig::default()
    };
    let shift = ndarray::arr1(&[12.5, -4.25]);
    let lift = ndarray::arr1(&[12.5, 0.0, -4.25, 0.0]);
    let a = run_inference(&net, &model, &t.observations, &cfg, 1)?;
    let b = run_inference(&net, &model, &(&t.observations + &shift), &cfg, 1)?;
    let ti = a
        .iter()
        .zip(&b)
        .flat_map(|(a, b)| (b - a - &lift).into_iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    pass &= ti <= 1e-9;
    notes.push(format!("translation {ti:.1e}"));

    // Determinism: data, training and evaluation repeat bitwise.
    let det = || -> Result<(Trajectory, Vec<u64>, f64)> {
        let t = drag_data(400, 830)?;
        let (tr, va, te) = split_trajectory(&t, SplitSpec { train: 200, val: 100, test: 100 })?;
        let cfg = HybridConfig {
            nf: 8,
            iterations: 5,
            ..HybridConfig::default()
        };
        let tcfg = TrainConfig {
            max_steps: 20,
            window: 30,
            eval_interval: 5,
            ..TrainConfig::default()
        };
        let net = HybridNet::for_training(&model, 8, 831)?;
        let o = train(net, &model, &tr, &va, &cfg, &tcfg, 832)?;
        let curve = o.curve.iter().map(|p| p.val_mse.to_bits()).collect();
        Ok((t, curve, evaluate(&o.net, &model, &te, &cfg, 833)?))
    };
    let (r1, r2) = (det()?, det()?);
    let deterministic = r1.0 == r2.0 && r1.1 == r2.1 && r1.2.to_bits() == r2.2.to_bits();
    pass &= deterministic;
    notes.push(format!("determinism {deterministic}"));

    // SPD noise and posterior covariances.
    let models = [
        build_drag_model(DragParams::default())?,
        build_uniform_motion_model(1.0, 0.3, 0.5)?,
        build_lorenz_model(0.05, 2, 3.0, 0.5)?,
    ];
    let mut spd = models.iter().all(|m| is_spd(m.process_noise()) && is_spd(m.measurement_noise()));
    let t = drag_data(100, 840)?;
    let um = &models[1];
    let f = kalman_filter(um, &t.observations)?;
    let s = kalman_smooth(um, &t.observations)?;
    spd &= f.covs.iter().chain(&f.predicted_covs).chain(&s.covs).all(is_spd);
    let (_, _, lt) = lorenz_split(9)?;
    let e = extended_smooth(&models[2], &lt.slice(0, 200).observations)?;
    spd &= e.covs.iter().all(is_spd);
    pass &= spd;
    notes.push(format!("SPD {spd}"));

    verdict(pass, notes.join("; "))
}

fn criterion_9(runs: &[LorenzRun]) -> Result<Verdict> {
    let ratios: Vec<f64> = runs.iter().map(|r| r.gnn / r.hybrid).collect();
    let lines: Vec<String> = runs
        .iter()
        .zip(&ratios)
        .map(|(r, q)| format!("[GNN {:.4} hybrid {:.4} ratio {q:.2}]", r.gnn, r.hybrid))
        .collect();
    verdict(
        ratios.iter().all(|&q| q >= 1.5),
        format!("GNN/hybrid >= 1.5 on every seed: {}", lines.join(" ")),
    )
}

#[derive(Clone, Copy, PartialEq)]
enum Outcome {
    Pass,
    Fail,
    Error,
}

fn report(n: usize, name: &str, started: Instant, v: Result<Verdict>) -> Outcome {
    let secs = started.elapsed().as_secs_f64();
    let (outcome, detail) = match v {
        Ok(v) if v.pass => (Outcome::Pass, v.detail),
        Ok(v) => (Outcome::Fail, v.detail),
        Err(e) => (Outcome::Error, format!("error: {e}")),
    };
    let line = format!(
        "criterion {n} {name}: {} ({secs:.1}s) {detail}",
        if outcome == Outcome::Pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
    outcome
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("HINF_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|v| v.contains(&n));
    let outcomes = std::cell::RefCell::new(Vec::new());
    let run = |n: usize, name: &str, f: &dyn Fn() -> Result<Verdict>| {
        if wanted(n) {
            let t = Instant::now();
            outcomes.borrow_mut().push((n, report(n, name, t, f())));
        }
    };
    run(1, "GM matches Kalman smoother", &criterion_1);
    run(2, "gradient correctness", &criterion_2);
    run(3, "zero-network reduction", &criterion_3);
    run(6, "observation-noise floor", &criterion_6);
    run(7, "loss-weight arithmetic", &criterion_7);
    run(8, "property suites", &criterion_8);
    run(4, "linear-dynamics ordering", &criterion_4);

    if wanted(5) || wanted(9) {
        // Both criteria read the same three trained Lorenz seeds.
        let t = Instant::now();
        let runs = (0..3).map(lorenz_run).collect::<Result<Vec<_>>>();
        let _ = writeln!(std::io::stdout(), "Lorenz training for criteria 5 and 9 took {:.1}s", t.elapsed().as_secs_f64());
        let shared = |f: fn(&[LorenzRun]) -> Result<Verdict>| -> Result<Verdict> {
            match &runs {
                Ok(r) => f(r),
                Err(e) => Err(hybrid_inference::Error::Data(e.to_string())),
            }
        };
        run(5, "Lorenz ordering", &|| shared(criterion_5));
        run(9, "sample-efficiency trend", &|| shared(criterion_9));
    }

    let outcomes = outcomes.into_inner();
    let list = |o: Outcome| -> Vec<String> {
        outcomes.iter().filter(|(_, x)| *x == o).map(|(n, _)| n.to_string()).collect()
    };
    let (failed, errored) = (list(Outcome::Fail), list(Outcome::Error));
    let _ = writeln!(
        std::io::stdout(),
        "acceptance: {}/{} PASS; FAIL: [{}]; ERROR: [{}]",
        list(Outcome::Pass).len(),
        outcomes.len(),
        failed.join(","),
        errored.join(",")
    );
    let strict = std::env::var("HINF_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    if !errored.is_empty() || (strict && !failed.is_empty()) {
        std::process::exit(1);
    }
}
