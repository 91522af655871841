//! DDPM machinery: the β/α/ᾱ schedule, forward noising in both the
//! step-by-step and closed-form (reparameterized) versions, the single
//! reverse step, the full sampling loop, and ε-objective denoiser training.
//!
//! Schedule quantities are always f64; images may be f32 or f64. The
//! reverse-step noise scale is fixed at σ_t = √β_t, and the final step
//! (t = 1) adds no noise.

use crate::error::{Error, Result};
use crate::nets::{unflatten_params, Denoiser, DenoiserArch, Optimizer, TrainConfig};
use crate::rng::{self};
use crate::scalar::Scalar;
use crate::tensor::{Record, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(ScheduleKind::Linear),
            _ => None,
        }
    }
}

/// Per-timestep noise constants, 1-indexed by convention: accessors take
/// t ∈ [1, T]. Invariants are enforced at construction and hold exactly:
/// α_t = 1 − β_t, ᾱ_t = ∏ α_i, σ_t = √β_t, ᾱ strictly decreasing.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

pub const DEFAULT_T: usize = 200;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
/// Chosen so the desk schedule retains under 5% signal at t = T
/// (ᾱ_T ≈ 0.0287); a 0.02 endpoint would leave ᾱ_T ≈ 0.132 at T = 200.
pub const DEFAULT_BETA_MAX: f64 = 0.035;

pub fn make_schedule(
    t_max: usize,
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::contract("schedule needs T ≥ 1".to_string()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::contract(format!(
            "schedule bounds must satisfy 0 < β_min ≤ β_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let ScheduleKind::Linear = kind;
    let mut beta = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let frac = if t_max == 1 {
            0.0
        } else {
            (t - 1) as f64 / (t_max - 1) as f64
        };
        beta.push(beta_min + (beta_max - beta_min) * frac);
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let sigma: Vec<f64> = beta.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule {
        t_max,
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

impl NoiseSchedule {
    pub fn default_desk() -> Self {
        make_schedule(DEFAULT_T, ScheduleKind::Linear, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
            .expect("default constants are in range")
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max {
            return Err(Error::contract(format!(
                "timestep {t} outside [1, {}]",
                self.t_max
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }
}

fn check_same_shape<E: Scalar>(what: &str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// One forward step: x_t = √(1−β_t)·x_prev + √β_t·z.
pub fn forward_noise_step<E: Scalar>(
    x_prev: &Tensor<E>,
    t: usize,
    z: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    sched.check_t(t)?;
    check_same_shape("forward_noise_step", x_prev, z)?;
    let cx = E::from_f64((1.0 - sched.beta(t)).sqrt());
    let cz = E::from_f64(sched.beta(t).sqrt());
    let data = x_prev
        .data()
        .iter()
        .zip(z.data())
        .map(|(&x, &n)| cx * x + cz * n)
        .collect();
    Tensor::from_vec(x_prev.shape().to_vec(), data)
}

/// Closed-form jump to step t: x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε.
pub fn forward_noise<E: Scalar>(
    x_0: &Tensor<E>,
    t: usize,
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    sched.check_t(t)?;
    check_same_shape("forward_noise", x_0, eps)?;
    let ab = sched.alpha_bar(t);
    let cx = E::from_f64(ab.sqrt());
    let ce = E::from_f64((1.0 - ab).sqrt());
    let data = x_0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &n)| cx * x + ce * n)
        .collect();
    Tensor::from_vec(x_0.shape().to_vec(), data)
}

/// One reverse step:
/// x_{t−1} = (1/√α_t)·(x_t − ((1−α_t)/√(1−ᾱ_t))·ε̂) + σ_t·z.
/// The t = 1 step must not add noise: a nonzero z there is an error.
pub fn reverse_step<E: Scalar>(
    x_t: &Tensor<E>,
    t: usize,
    eps_hat: &Tensor<E>,
    z: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    sched.check_t(t)?;
    check_same_shape("reverse_step", x_t, eps_hat)?;
    check_same_shape("reverse_step", x_t, z)?;
    if t == 1 && z.data().iter().any(|v| *v != E::zero()) {
        return Err(Error::contract(
            "reverse_step at t = 1 must receive the zero noise image".to_string(),
        ));
    }
    let a = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let inv_sqrt_a = E::from_f64(1.0 / a.sqrt());
    let ceps = E::from_f64((1.0 - a) / (1.0 - ab).sqrt());
    let cs = E::from_f64(sched.sigma(t));
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&x, &e), &n)| inv_sqrt_a * (x - ceps * e) + cs * n)
        .collect();
    Tensor::from_vec(x_t.shape().to_vec(), data)
}

// ── Sampling ───────────────────────────────────────────────────────────

pub trait EpsilonPredictor<E: Scalar> {
    fn predict_eps(&self, x_t: &Tensor<E>, t: usize, c: usize) -> Result<Tensor<E>>;
}

impl<E: Scalar> EpsilonPredictor<E> for Denoiser<E> {
    fn predict_eps(&self, x_t: &Tensor<E>, t: usize, c: usize) -> Result<Tensor<E>> {
        self.predict(x_t, t, c)
    }
}

/// Always predicts zero noise; turns the sampler into pure schedule algebra.
pub struct ZeroPredictor;

impl<E: Scalar> EpsilonPredictor<E> for ZeroPredictor {
    fn predict_eps(&self, x_t: &Tensor<E>, _t: usize, _c: usize) -> Result<Tensor<E>> {
        Ok(Tensor::zeros(x_t.shape()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnapshotPolicy {
    /// Keep (T, x_T) and (0, x_0) only.
    Endpoints,
    /// Keep every step.
    Full,
    /// Keep endpoints plus every t divisible by the stride.
    Every(usize),
}

impl SnapshotPolicy {
    fn keep(self, t: usize, t_max: usize) -> bool {
        match self {
            SnapshotPolicy::Endpoints => t == t_max || t == 0,
            SnapshotPolicy::Full => true,
            SnapshotPolicy::Every(k) => t == t_max || t == 0 || (k > 0 && t % k == 0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub snapshots: SnapshotPolicy,
    /// Suppress the σ_t·z term at every step, not just t = 1.
    pub zero_reverse_noise: bool,
    /// Provenance tag carried into the trajectory ("gaussian", method names).
    pub source: String,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            snapshots: SnapshotPolicy::Endpoints,
            zero_reverse_noise: false,
            source: "gaussian".to_string(),
        }
    }
}

/// Reverse-process record: snapshots run from t = T down to t = 0.
#[derive(Clone, Debug)]
pub struct Trajectory<E: Scalar> {
    pub class: usize,
    pub seed: u64,
    pub source: String,
    pub snapshots: Vec<(usize, Tensor<E>)>,
}

impl<E: Scalar> Trajectory<E> {
    pub fn x0(&self) -> &Tensor<E> {
        let last = self.snapshots.last().expect("sampler stores t = 0");
        assert_eq!(last.0, 0, "trajectory must end at t = 0");
        &last.1
    }
}

const STREAM_START_NOISE: u64 = 1;
const STREAM_REVERSE_NOISE: u64 = 2;

/// Run the reverse process from t = T to 0. When `x_start` is absent the
/// starting image is drawn unit-Gaussian from the seed; reverse-step noise
/// comes from an independent substream, so the starting draw is the same
/// whether or not later noise is used.
pub fn sample_loop<E: Scalar, P: EpsilonPredictor<E>>(
    pred: &P,
    sched: &NoiseSchedule,
    class: usize,
    x_start: Option<&Tensor<E>>,
    shape: &[usize],
    seed: u64,
    opts: &SampleOptions,
) -> Result<Trajectory<E>> {
    let t_max = sched.t_max();
    let mut x = match x_start {
        Some(given) => {
            if given.shape() != shape {
                return Err(Error::shape(format!(
                    "supplied x_T has shape {:?}, expected {:?}",
                    given.shape(),
                    shape
                )));
            }
            given.clone()
        }
        None => {
            let mut r = rng::rng_from(rng::sub_seed(seed, STREAM_START_NOISE));
            rng::normal_tensor(shape, &mut r)
        }
    };
    let mut zrng = rng::rng_from(rng::sub_seed(seed, STREAM_REVERSE_NOISE));
    let mut snapshots = Vec::new();
    if opts.snapshots.keep(t_max, t_max) {
        snapshots.push((t_max, x.clone()));
    }
    for t in (1..=t_max).rev() {
        let eps = pred.predict_eps(&x, t, class)?;
        check_same_shape("sample_loop predictor output", &x, &eps)?;
        let z = if t == 1 || opts.zero_reverse_noise {
            Tensor::zeros(x.shape())
        } else {
            rng::normal_tensor(x.shape(), &mut zrng)
        };
        x = reverse_step(&x, t, &eps, &z, sched)?;
        if opts.snapshots.keep(t - 1, t_max) {
            snapshots.push((t - 1, x.clone()));
        }
    }
    Ok(Trajectory {
        class,
        seed,
        source: opts.source.clone(),
        snapshots,
    })
}

// ── Denoiser training ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DenoiserFit {
    /// Mean per-sample ε-MSE of each epoch, in epoch order.
    pub epoch_mse: Vec<f64>,
}

const STREAM_SHUFFLE: u64 = 3;
const STREAM_DRAWS: u64 = 4;

/// ε-objective training: per sample draw t uniform on [1, T] and ε unit
/// Gaussian (in that order), form x_t by the closed-form jump, regress the
/// prediction onto ε with mean squared error.
pub fn train_denoiser<E: Scalar>(
    dataset: &[(Tensor<E>, usize)],
    arch: &DenoiserArch,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(Denoiser<E>, DenoiserFit)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("training dataset is empty".to_string()));
    }
    if arch.t_max != sched.t_max() {
        return Err(Error::contract(format!(
            "denoiser t_max {} does not match schedule T {}",
            arch.t_max,
            sched.t_max()
        )));
    }
    for (i, (_, y)) in dataset.iter().enumerate() {
        if *y >= arch.classes {
            return Err(Error::contract(format!(
                "sample {i} has label {y}, valid range is [0, {})",
                arch.classes
            )));
        }
    }
    let mut den = crate::nets::build_denoiser::<E>(arch, cfg.seed)?;
    let shapes = arch.param_shapes();
    let total = den.param_count();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, total)?;
    let mut shuffle_rng = rng::rng_from(rng::sub_seed(cfg.seed, STREAM_SHUFFLE));
    let mut draw_rng = rng::rng_from(rng::sub_seed(cfg.seed, STREAM_DRAWS));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_mse = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        crate::nets::deterministic_shuffle(&mut order, &mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = vec![0.0f64; total];
            for &i in batch {
                let (x0, y) = &dataset[i];
                let t = rng::uniform_usize(&mut draw_rng, 1, sched.t_max());
                let eps: Tensor<E> = rng::normal_tensor(x0.shape(), &mut draw_rng);
                let x_t = forward_noise(x0, t, &eps, sched)?;

                let mut rec = Record::new();
                let pids = den.push_params(&mut rec);
                let x_id = rec.leaf(&x_t);
                let pred = den.record_eps(&mut rec, &pids, x_id, t, *y)?;
                let target = rec.leaf(&eps);
                let diff = rec.sub(pred, target)?;
                let sq = rec.mul(diff, diff)?;
                let loss = rec.mean(sq)?;
                loss_sum += rec.scalar_value_of(loss)?.as_f64();
                seen += 1;
                let grads = rec.gradient(loss, &pids)?;
                let mut off = 0;
                for g in &grads {
                    for v in g.data() {
                        acc[off] += v.as_f64();
                        off += 1;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let flat = Tensor::from_vec(
                vec![total],
                acc.iter().map(|&v| E::from_f64(v * inv)).collect(),
            )?;
            let grads = unflatten_params(&flat, &shapes)?;
            let mut params = den.params().to_vec();
            opt.step(&mut params, &grads)?;
            den.set_params(params)?;
        }
        epoch_mse.push(loss_sum / seen as f64);
    }
    Ok((den, DenoiserFit { epoch_mse }))
}
