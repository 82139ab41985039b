//! Synthetic trajectories and the trajectory CSV format.

use std::io::{Read, Write};

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::hmm::{lorenz_rhs, GaussianHmm, Matrix, Prior, SelectionMap, Vector};

/// Latent states (when known) and observations, one row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Option<Array2<f64>>,
    pub observations: Array2<f64>,
    pub dt: f64,
    pub seed: u64,
}

impl Trajectory {
    pub fn new(states: Option<Array2<f64>>, observations: Array2<f64>, dt: f64, seed: u64) -> Result<Self> {
        if let Some(x) = &states {
            if x.nrows() != observations.nrows() {
                return Err(Error::Data(format!(
                    "{} states for {} observations",
                    x.nrows(),
                    observations.nrows()
                )));
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Data("non-finite state".into()));
            }
        }
        if !observations.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("non-finite observation".into()));
        }
        Ok(Trajectory {
            states,
            observations,
            dt,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keep only the ground-truth components picked by `sel`.
    pub fn select_states(self, sel: &SelectionMap) -> Result<Trajectory> {
        let states = match self.states {
            Some(x) => {
                if let Some(&bad) = sel.indices().iter().find(|&&i| i >= x.ncols()) {
                    return Err(Error::Data(format!("state component {bad} out of range")));
                }
                Some(x.select(ndarray::Axis(1), sel.indices()))
            }
            None => None,
        };
        Ok(Trajectory { states, ..self })
    }

    /// Contiguous steps `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Trajectory {
        Trajectory {
            states: self
                .states
                .as_ref()
                .map(|x| x.slice(s![start..end, ..]).to_owned()),
            observations: self.observations.slice(s![start..end, ..]).to_owned(),
            dt: self.dt,
            seed: self.seed,
        }
    }
}

/// One draw of `L z` with `z ~ N(0, I)`.
pub(crate) fn correlated_normal(rng: &mut ChaCha8Rng, chol: &Matrix) -> Vector {
    let z = Vector::from_fn(chol.nrows(), |_, _| rng.sample(StandardNormal));
    chol * z
}

fn cholesky_factor(m: &Matrix, what: &str) -> Result<Matrix> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Factorization(format!("{what} is not positive definite")))
}

#[derive(Debug, Clone, Default)]
pub struct SampleOptions {
    /// Start here instead of drawing from the prior.
    pub initial: Option<Vec<f64>>,
    pub without_process_noise: bool,
    pub without_measurement_noise: bool,
}

/// Sample `k` steps of a constant-transition model. The first row is the
/// initial state; a lifted-observation prior starts at the origin.
pub fn sample_linear(model: &GaussianHmm, k: usize, seed: u64) -> Result<Trajectory> {
    sample_linear_with(model, k, seed, &SampleOptions::default())
}

pub fn sample_linear_with(
    model: &GaussianHmm,
    k: usize,
    seed: u64,
    options: &SampleOptions,
) -> Result<Trajectory> {
    if k == 0 {
        return Err(Error::Data("cannot sample an empty trajectory".into()));
    }
    let f = model
        .constant_transition()
        .ok_or_else(|| Error::Config("linear sampling needs a constant transition".into()))?;
    let (dx, dy) = (model.state_dim(), model.obs_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q_chol = cholesky_factor(model.process_noise(), "Q")?;
    let r_chol = cholesky_factor(model.measurement_noise(), "R")?;

    let mut x = match (&options.initial, model.prior()) {
        (Some(x0), _) => {
            if x0.len() != dx {
                return Err(Error::shape("sample_linear", "initial state has wrong length"));
            }
            Vector::from_column_slice(x0)
        }
        (None, Prior::Gaussian { mean, cov }) => {
            let l = cholesky_factor(cov, "prior covariance")?;
            mean + correlated_normal(&mut rng, &l)
        }
        (None, Prior::LiftedObservation { .. }) => Vector::zeros(dx),
    };

    let mut states = Array2::zeros((k, dx));
    let mut obs = Array2::zeros((k, dy));
    for step in 0..k {
        if step > 0 {
            x = f * &x;
            if !options.without_process_noise {
                x += correlated_normal(&mut rng, &q_chol);
            }
        }
        let mut y = model.measurement() * &x;
        if !options.without_measurement_noise {
            y += correlated_normal(&mut rng, &r_chol);
        }
        states.row_mut(step).assign(&ndarray::ArrayView1::from(x.as_slice()));
        obs.row_mut(step).assign(&ndarray::ArrayView1::from(y.as_slice()));
    }
    Trajectory::new(Some(states), obs, model.dt(), seed)
}

/// One forward-Euler step of the Lorenz system.
pub fn lorenz_euler_step(z: [f64; 3], dt: f64) -> [f64; 3] {
    let d = lorenz_rhs(&z);
    [z[0] + dt * d[0], z[1] + dt * d[1], z[2] + dt * d[2]]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorenzSampling {
    pub inner_dt: f64,
    pub sample_dt: f64,
    pub obs_noise: f64,
}

impl Default for LorenzSampling {
    fn default() -> Self {
        LorenzSampling {
            inner_dt: 1e-5,
            sample_dt: 0.05,
            obs_noise: 0.5,
        }
    }
}

impl LorenzSampling {
    fn inner_steps(&self) -> Result<usize> {
        if !(self.inner_dt > 0.0 && self.sample_dt > 0.0) {
            return Err(Error::Config("Lorenz time steps must be positive".into()));
        }
        let ratio = self.sample_dt / self.inner_dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio {
            return Err(Error::Config(format!(
                "sample step {} is not an integer multiple of inner step {}",
                self.sample_dt, self.inner_dt
            )));
        }
        Ok(n as usize)
    }
}

/// Integrate from `x0`, recording `x0` and then every sampling interval;
/// observations add N(0, λ²I).
pub fn integrate_lorenz(x0: [f64; 3], sampling: &LorenzSampling, k: usize, seed: u64) -> Result<Trajectory> {
    if k == 0 {
        return Err(Error::Data("cannot sample an empty trajectory".into()));
    }
    let inner = sampling.inner_steps()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = x0;
    let mut states = Array2::zeros((k, 3));
    let mut obs = Array2::zeros((k, 3));
    for step in 0..k {
        if step > 0 {
            for _ in 0..inner {
                z = lorenz_euler_step(z, sampling.inner_dt);
            }
            if !z.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    detail: "Lorenz integration overflowed".into(),
                });
            }
        }
        for i in 0..3 {
            states[[step, i]] = z[i];
            let noise: f64 = rng.sample(StandardNormal);
            obs[[step, i]] = z[i] + sampling.obs_noise * noise;
        }
    }
    Trajectory::new(Some(states), obs, sampling.sample_dt, seed)
}

/// Draw a start in `[-10, 10]³`, discard `burn_in` samples, then record `k`.
pub fn generate_lorenz(sampling: &LorenzSampling, k: usize, burn_in: usize, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    let start = [
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
    ];
    let start = if burn_in > 0 {
        let quiet = LorenzSampling {
            obs_noise: 0.0,
            ..*sampling
        };
        let warm = integrate_lorenz(start, &quiet, burn_in + 1, seed)?;
        let x = warm.states.expect("generated states");
        [x[[burn_in, 0]], x[[burn_in, 1]], x[[burn_in, 2]]]
    } else {
        start
    };
    integrate_lorenz(start, sampling, k, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Contiguous train, validation and test segments taken in that order.
pub fn split_trajectory(t: &Trajectory, spec: SplitSpec) -> Result<(Trajectory, Trajectory, Trajectory)> {
    let total = spec
        .train
        .checked_add(spec.val)
        .and_then(|v| v.checked_add(spec.test))
        .ok_or_else(|| Error::Config("split sizes overflow".into()))?;
    if total > t.len() {
        return Err(Error::Config(format!(
            "split needs {total} steps, trajectory has {}",
            t.len()
        )));
    }
    let a = spec.train;
    let b = a + spec.val;
    Ok((t.slice(0, a), t.slice(a, b), t.slice(b, total)))
}

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write `t, x1..xd, y1..yd`; x columns are omitted when states are absent.
pub fn write_csv<W: Write>(t: &Trajectory, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dx = t.states.as_ref().map_or(0, |x| x.ncols());
    let dy = t.observations.ncols();
    let mut header = vec!["t".to_owned()];
    header.extend((1..=dx).map(|i| format!("x{i}")));
    header.extend((1..=dy).map(|i| format!("y{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for k in 0..t.len() {
        let mut rec = vec![fmt_real(k as f64 * t.dt)];
        if let Some(x) = &t.states {
            rec.extend(x.row(k).iter().map(|&v| fmt_real(v)));
        }
        rec.extend(t.observations.row(k).iter().map(|&v| fmt_real(v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

fn parse_column_index(name: &str, prefix: char) -> Option<usize> {
    let rest = name.trim().strip_prefix(prefix)?;
    rest.parse::<usize>().ok().filter(|&i| i >= 1)
}

/// Read a trajectory CSV. Files without x columns, or with every x field
/// empty, load as observation-only trajectories.
pub fn read_csv<R: Read>(input: R) -> Result<Trajectory> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.first().map(|c| c.trim()) != Some("t") {
        return Err(Error::Data("first column must be `t`".into()));
    }
    let dx = cols[1..]
        .iter()
        .take_while(|c| parse_column_index(c, 'x').is_some())
        .count();
    let dy = cols.len() - 1 - dx;
    for (i, c) in cols[1..=dx].iter().enumerate() {
        if parse_column_index(c, 'x') != Some(i + 1) {
            return Err(Error::Data(format!("expected column x{}, found `{c}`", i + 1)));
        }
    }
    for (i, c) in cols[1 + dx..].iter().enumerate() {
        if parse_column_index(c, 'y') != Some(i + 1) {
            return Err(Error::Data(format!("expected column y{}, found `{c}`", i + 1)));
        }
    }
    if dy == 0 {
        return Err(Error::Data("no observation columns".into()));
    }

    let parse = |field: &str, row: usize| -> Result<f64> {
        let v: f64 = field
            .parse()
            .map_err(|_| Error::Data(format!("row {row}: `{field}` is not a number")))?;
        if !v.is_finite() {
            return Err(Error::Data(format!("row {row}: non-finite value")));
        }
        Ok(v)
    };

    let mut times = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut has_x: Option<bool> = None;
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != cols.len() {
            return Err(Error::Data(format!("row {row}: expected {} fields", cols.len())));
        }
        times.push(parse(&rec[0], row)?);
        let x_fields: Vec<&str> = (1..=dx).map(|i| &rec[i]).collect();
        let empty = x_fields.iter().all(|f| f.is_empty());
        let present = dx > 0 && !empty;
        match has_x {
            None => has_x = Some(present),
            Some(prev) if prev != present => {
                return Err(Error::Data(format!("row {row}: ground truth present in some rows only")))
            }
            _ => {}
        }
        if present {
            for f in x_fields {
                xs.push(parse(f, row)?);
            }
        }
        for i in 1 + dx..cols.len() {
            ys.push(parse(&rec[i], row)?);
        }
    }
    let k = times.len();
    if k == 0 {
        return Err(Error::Data("trajectory has no rows".into()));
    }
    let dt = if k >= 2 { times[1] - times[0] } else { 1.0 };
    if !(dt > 0.0) {
        return Err(Error::Data("time column must increase".into()));
    }
    let observations = Array2::from_shape_vec((k, dy), ys).map_err(|e| Error::Data(e.to_string()))?;
    let states = if has_x == Some(true) {
        Some(Array2::from_shape_vec((k, dx), xs).map_err(|e| Error::Data(e.to_string()))?)
    } else {
        None
    };
    Trajectory::new(states, observations, dt, 0)
}
