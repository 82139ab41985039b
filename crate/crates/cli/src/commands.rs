//! The five CLI verbs. Each returns the manifest it wrote.

use std::path::{Path, PathBuf};
use std::time::Instant;

use hybrid_inference::datagen::{
    generate_lorenz, read_csv, sample_linear, split_trajectory, write_csv, LorenzSampling, SplitSpec, Trajectory,
};
use hybrid_inference::gm::{extended_smooth, kalman_smooth};
use hybrid_inference::hmm::{GaussianHmm, ModelSpec};
use hybrid_inference::hybrid::{run_inference_with, HybridNet};
use hybrid_inference::nn::{Checkpoint, Tensor};
use hybrid_inference::seed::derive_seed;
use hybrid_inference::training::{curve_csv, selected_ground_truth, selected_mse, train as train_net, tune_gm};
use hybrid_inference::{Error, Result};

use crate::config::{Experiment, ExperimentConfig, Mode};
use crate::plot;
use crate::report::{write_atomic, Metrics, RunManifest, TuneFile};

/// Train, validation and test segments; empty segments are `None`.
#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Option<Trajectory>,
    pub val: Option<Trajectory>,
    pub test: Option<Trajectory>,
}

impl Splits {
    fn dt(&self) -> Option<f64> {
        [&self.train, &self.val, &self.test].into_iter().flatten().map(|t| t.dt).next()
    }

    fn train_size(&self) -> usize {
        self.train.as_ref().map_or(0, Trajectory::len)
    }
}

fn non_empty(t: Trajectory) -> Option<Trajectory> {
    (!t.is_empty()).then_some(t)
}

/// Synthetic trajectory of `k` steps drawn with `seed`.
pub fn generate_trajectory(cfg: &ExperimentConfig, k: usize, seed: u64) -> Result<Trajectory> {
    let m = &cfg.model;
    match cfg.experiment {
        Experiment::LinearDrag => {
            let model = ModelSpec::Drag {
                dt: cfg.dt(),
                c: m.c,
                tau: m.tau,
                sigma_q: m.sigma_q,
                sigma_r: m.sigma_r,
            }
            .build()?;
            sample_linear(&model, k, seed)?.select_states(model.selection())
        }
        Experiment::Lorenz => {
            let sampling = LorenzSampling {
                inner_dt: m.inner_dt,
                sample_dt: cfg.dt(),
                obs_noise: m.obs_noise,
            };
            generate_lorenz(&sampling, k, m.burn_in, seed)
        }
        Experiment::CsvDataset => Err(Error::Config("csv_dataset data is read, not generated".into())),
    }
}

/// Train, validation and test trajectories: segments of one trajectory, or
/// independent draws with `fresh_trajectories`. Empty splits stay empty.
pub fn generate_splits(cfg: &ExperimentConfig, sizes: SplitSpec) -> Result<(Trajectory, Trajectory, Trajectory)> {
    let root = derive_seed(cfg.seed, "data");
    if !cfg.fresh_trajectories {
        let total = sizes
            .train
            .checked_add(sizes.val)
            .and_then(|v| v.checked_add(sizes.test))
            .ok_or_else(|| Error::Config("split sizes overflow".into()))?;
        return split_trajectory(&generate_trajectory(cfg, total, root)?, sizes);
    }
    let draw = |k: usize, label: &str| -> Result<Trajectory> {
        let t = generate_trajectory(cfg, k.max(1), derive_seed(root, label))?;
        Ok(t.slice(0, k))
    };
    Ok((draw(sizes.train, "train")?, draw(sizes.val, "val")?, draw(sizes.test, "test")?))
}

fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_csv(std::io::BufReader::new(file))
}

/// Data for a run: configured files, else regenerated from the seed.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    if let Some(files) = &cfg.data {
        let read = |p: &Option<PathBuf>, limit: Option<usize>| -> Result<Option<Trajectory>> {
            match p {
                None => Ok(None),
                Some(p) => {
                    let t = read_trajectory(p)?;
                    let t = match limit {
                        Some(n) if n < t.len() => t.slice(0, n),
                        _ => t,
                    };
                    Ok(non_empty(t))
                }
            }
        };
        let sizes = cfg.sizes;
        return Ok(Splits {
            train: read(&files.train, sizes.map(|s| s.train))?,
            val: read(&files.val, sizes.map(|s| s.val))?,
            test: read(&files.test, sizes.map(|s| s.test))?,
        });
    }
    let sizes = cfg
        .sizes
        .ok_or_else(|| Error::Config("no data files and no split sizes".into()))?;
    let (train, val, test) = generate_splits(cfg, sizes)?;
    Ok(Splits {
        train: non_empty(train),
        val: non_empty(val),
        test: non_empty(test),
    })
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("cannot create {}: {e}", out.display()))))
}

fn finish(mut manifest: RunManifest, out: &Path, started: Instant, name: &str) -> Result<RunManifest> {
    manifest.duration_secs = started.elapsed().as_secs_f64();
    write_atomic(&out.join(name), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

fn trajectory_bytes(t: &Trajectory) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(t, &mut buf)?;
    Ok(buf)
}

pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let sizes = cfg
        .sizes
        .ok_or_else(|| Error::Config("generate needs `sizes`".into()))?;
    let (train, val, test) = generate_splits(cfg, sizes)?;
    ensure_dir(out)?;
    let mut manifest = RunManifest::new("generate", Some(cfg.clone()));
    for (name, t) in [("train.csv", train), ("val.csv", val), ("test.csv", test)] {
        write_atomic(&out.join(name), &trajectory_bytes(&t)?)?;
        manifest.metrics.insert(format!("{}_steps", name.trim_end_matches(".csv")), t.len() as f64);
        manifest.outputs.push(name.to_owned());
    }
    finish(manifest, out, started, "manifest_generate.json")
}

/// Inference model with σ (and λ) taken from the config or tuned on the
/// validation split.
fn resolve_model(
    cfg: &ExperimentConfig,
    splits: &Splits,
    manifest: &mut RunManifest,
) -> Result<(GaussianHmm, Option<TuneFile>)> {
    let dt = splits.dt().unwrap_or_else(|| cfg.dt());
    let family = cfg.inference_family(dt);
    if cfg.model.sigma.is_some() && cfg.train.lambda_grid.is_none() {
        return Ok((family.build()?, None));
    }
    let val = splits
        .val
        .as_ref()
        .ok_or_else(|| Error::Data("tuning needs validation data".into()))?;
    let fixed;
    let sigma_grid = match cfg.model.sigma {
        Some(s) => {
            fixed = [s];
            &fixed[..]
        }
        None => &cfg.train.sigma_grid[..],
    };
    let report = tune_gm(&family, sigma_grid, cfg.train.lambda_grid.as_deref(), val)?;
    manifest.metrics.insert("sigma".into(), report.sigma_star);
    manifest.metrics.insert("lambda".into(), report.lambda_star);
    manifest.metrics.insert("tune_val_mse".into(), report.best_mse());
    let model = family.with_noise(report.sigma_star, report.lambda_star).build()?;
    Ok((model, Some(TuneFile::from(&report))))
}

pub fn tune(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let splits = load_splits(cfg)?;
    if splits.val.is_none() {
        return Err(Error::Data("tune-gm needs validation data".into()));
    }
    let mut manifest = RunManifest::new("tune-gm", Some(cfg.clone()));
    let (_, report) = tune_report(cfg, &splits, &mut manifest)?;
    ensure_dir(out)?;
    write_atomic(&out.join("tune.json"), report.to_json().as_bytes())?;
    manifest.outputs.push("tune.json".into());
    finish(manifest, out, started, "manifest_tune-gm.json")
}

/// Like `resolve_model`, but a fixed σ still yields a one-point report.
fn tune_report(
    cfg: &ExperimentConfig,
    splits: &Splits,
    manifest: &mut RunManifest,
) -> Result<(GaussianHmm, TuneFile)> {
    let mut c = cfg.clone();
    if c.train.lambda_grid.is_none() && c.model.sigma.is_some() {
        c.train.sigma_grid = vec![c.model.sigma.unwrap_or(1.0)];
        c.model.sigma = None;
    }
    match resolve_model(&c, splits, manifest)? {
        (m, Some(t)) => Ok((m, t)),
        (_, None) => Err(Error::Config("nothing to tune".into())),
    }
}

fn lift_net(cfg: &ExperimentConfig, model: &GaussianHmm, checkpoint: &Path) -> Result<HybridNet> {
    let text = std::fs::read_to_string(checkpoint)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", checkpoint.display())))?;
    let ckpt = Checkpoint::from_json(&text)?;
    let mut net = HybridNet::for_model(model, cfg.inference.nf, 0)?;
    net.load_checkpoint(&ckpt)?;
    Ok(net)
}

/// Final estimate of `mode` on `y`.
pub fn estimate(
    mode: Mode,
    cfg: &ExperimentConfig,
    model: &GaussianHmm,
    y: &Tensor,
    net: Option<&HybridNet>,
) -> Result<Tensor> {
    match mode {
        Mode::Kalman => {
            if model.is_state_dependent() {
                return Err(Error::Config(
                    "kalman mode needs a constant transition; use e_kalman".into(),
                ));
            }
            Ok(kalman_smooth(model, y)?.means_tensor())
        }
        Mode::EKalman => Ok(extended_smooth(model, y)?.means_tensor()),
        Mode::Gm | Mode::Gnn | Mode::Hybrid => {
            let fresh;
            let net = match (mode, net) {
                (Mode::Gm, _) => {
                    fresh = HybridNet::for_model(model, cfg.inference.nf, 0)?;
                    &fresh
                }
                (_, Some(n)) => n,
                (_, None) => return Err(Error::Config(format!("{mode} needs a trained checkpoint"))),
            };
            let seed = derive_seed(cfg.seed, "eval-latents");
            run_inference_with(net, model, y, &cfg.hybrid_config(mode), seed, |_, _| {})
        }
    }
}

fn estimates_csv(x: &Tensor, model: &GaussianHmm) -> String {
    let idx = model.selection().indices();
    let mut s = (1..=idx.len()).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for row in x.rows() {
        let vals: Vec<String> = idx.iter().map(|&i| format!("{:.16e}", row[i])).collect();
        s.push_str(&vals.join(","));
        s.push('\n');
    }
    s
}

/// Evaluate `mode` on the test split and write its metrics and estimates.
fn evaluate_mode(
    mode: Mode,
    cfg: &ExperimentConfig,
    model: &GaussianHmm,
    splits: &Splits,
    net: Option<&HybridNet>,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<Metrics> {
    let test = splits
        .test
        .as_ref()
        .ok_or_else(|| Error::Data("evaluation needs test data".into()))?;
    if test.states.is_none() {
        return Err(Error::Data("test data has no ground-truth columns".into()));
    }
    let gt = selected_ground_truth(test, model)?;
    let x = estimate(mode, cfg, model, &test.observations, net)?;
    let mse = selected_mse(&x, &gt, model.selection())?;
    let est_name = format!("estimates_{mode}.csv");
    write_atomic(&out.join(&est_name), estimates_csv(&x, model).as_bytes())?;
    let metrics = Metrics {
        mode,
        seed: cfg.seed,
        train_size: splits.train_size(),
        test_mse: mse,
        estimates: Some(est_name.clone()),
    };
    let name = format!("metrics_{mode}.json");
    write_atomic(&out.join(&name), metrics.to_json().as_bytes())?;
    manifest.metrics.insert(format!("{mode}_test_mse"), mse);
    manifest.outputs.extend([name, est_name]);
    Ok(metrics)
}

pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let mode = cfg.mode;
    let splits = load_splits(cfg)?;
    let mut manifest = RunManifest::new("train", Some(cfg.clone()));
    let (model, tuned) = resolve_model(cfg, &splits, &mut manifest)?;
    ensure_dir(out)?;
    if let Some(t) = &tuned {
        write_atomic(&out.join("tune.json"), t.to_json().as_bytes())?;
        manifest.outputs.push("tune.json".into());
    }
    let manifest_name = format!("manifest_train_{mode}.json");
    if !mode.is_learned() {
        let notice = format!("mode {mode} has no trainable parameters; evaluating only");
        eprintln!("notice: {notice}");
        manifest.notes.push(notice);
        if splits.test.is_some() {
            evaluate_mode(mode, cfg, &model, &splits, None, out, &mut manifest)?;
        }
        return finish(manifest, out, started, &manifest_name);
    }
    let (train_data, val_data) = match (&splits.train, &splits.val) {
        (Some(t), Some(v)) => (t, v),
        _ => return Err(Error::Data("training needs train and validation data".into())),
    };
    let net = HybridNet::for_training(&model, cfg.inference.nf, derive_seed(cfg.seed, "init"))?;
    let outcome = train_net(
        net,
        &model,
        train_data,
        val_data,
        &cfg.hybrid_config(mode),
        &cfg.train,
        derive_seed(cfg.seed, "train"),
    )?;
    let ckpt_name = format!("checkpoint_{mode}.json");
    let curve_name = format!("curve_{mode}.csv");
    write_atomic(&out.join(&ckpt_name), outcome.net.checkpoint().to_json().as_bytes())?;
    write_atomic(&out.join(&curve_name), curve_csv(&outcome.curve).as_bytes())?;
    manifest.outputs.extend([ckpt_name, curve_name]);
    manifest.metrics.insert("best_val_mse".into(), outcome.best_val_mse);
    manifest.metrics.insert("steps_run".into(), outcome.steps_run as f64);
    if let Some(msg) = &outcome.diverged {
        manifest.notes.push(format!("training stopped early: {msg}"));
        finish(manifest, out, started, &manifest_name)?;
        return Err(Error::Divergence {
            step: outcome.steps_run,
            detail: format!("{msg}; best checkpoint kept"),
        });
    }
    if splits.test.is_some() {
        evaluate_mode(mode, cfg, &model, &splits, Some(&outcome.net), out, &mut manifest)?;
    }
    finish(manifest, out, started, &manifest_name)
}

/// Which modes `eval` runs and the checkpoint for each learned one.
pub enum EvalTarget {
    One(Mode, Option<PathBuf>),
    /// Every mode applicable to the data; learned modes only when their
    /// checkpoint exists in the output directory.
    All,
}

pub fn eval(cfg: &ExperimentConfig, out: &Path, target: EvalTarget) -> Result<RunManifest> {
    let started = Instant::now();
    let splits = load_splits(cfg)?;
    let mut manifest = RunManifest::new("eval", Some(cfg.clone()));
    let (model, _) = resolve_model(cfg, &splits, &mut manifest)?;
    ensure_dir(out)?;
    let jobs: Vec<(Mode, Option<PathBuf>)> = match target {
        EvalTarget::One(mode, ckpt) => {
            let ckpt = ckpt.or_else(|| mode.is_learned().then(|| out.join(format!("checkpoint_{mode}.json"))));
            vec![(mode, ckpt)]
        }
        EvalTarget::All => Mode::ALL
            .into_iter()
            .filter_map(|mode| {
                if mode == Mode::Kalman && model.is_state_dependent() {
                    manifest.notes.push("kalman skipped: state-dependent transition".into());
                    return None;
                }
                if mode.is_learned() {
                    let p = out.join(format!("checkpoint_{mode}.json"));
                    if !p.is_file() {
                        manifest.notes.push(format!("{mode} skipped: no {}", p.display()));
                        return None;
                    }
                    return Some((mode, Some(p)));
                }
                Some((mode, None))
            })
            .collect(),
    };
    for (mode, ckpt) in jobs {
        let net = match &ckpt {
            Some(p) => Some(lift_net(cfg, &model, p)?),
            None => None,
        };
        evaluate_mode(mode, cfg, &model, &splits, net.as_ref(), out, &mut manifest)?;
    }
    let name = match target_name(&manifest) {
        Some(m) => format!("manifest_eval_{m}.json"),
        None => "manifest_eval.json".into(),
    };
    finish(manifest, out, started, &name)
}

fn target_name(manifest: &RunManifest) -> Option<String> {
    let modes: Vec<&str> = manifest
        .metrics
        .keys()
        .filter_map(|k| k.strip_suffix("_test_mse"))
        .collect();
    match modes.as_slice() {
        [one] => Some((*one).to_owned()),
        _ => None,
    }
}

pub fn plot_data(files: &[PathBuf], out: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    if files.is_empty() {
        return Err(Error::Config("plot-data needs at least one metrics file".into()));
    }
    let mut all = Vec::with_capacity(files.len());
    for f in files {
        let text = std::fs::read_to_string(f)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", f.display())))?;
        let m = Metrics::from_json(&text).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
        all.push((f.clone(), m));
    }
    let metrics: Vec<Metrics> = all.iter().map(|(_, m)| m.clone()).collect();
    let table = plot::MseTable::from_metrics(&metrics)?;
    ensure_dir(out)?;
    let mut manifest = RunManifest::new("plot-data", None);
    write_atomic(&out.join("mse_vs_train_size.csv"), table.to_csv().as_bytes())?;
    write_atomic(&out.join("mse_vs_train_size.svg"), table.to_svg().as_bytes())?;
    manifest.outputs.extend(["mse_vs_train_size.csv".into(), "mse_vs_train_size.svg".into()]);
    for (path, m) in &all {
        let Some(est) = &m.estimates else { continue };
        let src = path.parent().unwrap_or(Path::new("")).join(est);
        let text = std::fs::read_to_string(&src)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", src.display())))?;
        let rows = plot::read_estimates(&text)?;
        let name = format!("path_{}.csv", m.mode);
        write_atomic(&out.join(&name), plot::path_csv(&rows)?.as_bytes())?;
        manifest.outputs.push(name);
    }
    finish(manifest, out, started, "manifest_plot-data.json")
}
