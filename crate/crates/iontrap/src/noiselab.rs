//! Noise models, the Monte-Carlo trajectory driver and the calibration experiments
//! (Rabi, Ramsey, Stark scans, thermometry, heating bound, error budget).
//!
//! Laser frequency noise is a per-trajectory quasi-static offset plus an optional
//! random walk; intensity noise is a slow per-run factor times a fast per-pulse one.
//! Trajectory `k` draws from its own ChaCha stream, so results do not depend on
//! the number of worker threads.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::frames::{TrapLaserParams, Transition};
use crate::optim::{levenberg_marquardt, FitResult, OptimError};
use crate::qlinalg::{c, kron, spin, DensityMatrix, Op2, Op3};
use crate::sequencer::{
    ground_state, prep_operations, CompileContext, ExecMode, Executor, GateKind, NoiseSource, ProgramBuilder,
    PulseNoise, PulseProgram, Readout, SequencerError, StarkCalibration,
};
use crate::stark::{resonant_detuning, stark_delta};
use crate::tomography::{
    analyze, measurement_basis, ChiMethod, DesignMatrix, ProcessReport, TomographyDataset, TomographyError,
    N_INPUTS, N_MEAS,
};

#[derive(Debug, thiserror::Error)]
pub enum NoiseError {
    #[error("invalid noise model: {0}")]
    InvalidModel(&'static str),
    #[error("fit failed: {0}")]
    Fit(#[from] OptimError),
    #[error("insufficient oscillation to fit ({0})")]
    InsufficientOscillation(String),
    #[error("unphysical sideband ratio {0} (needs red < blue)")]
    UnphysicalRatio(f64),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sequencer(#[from] SequencerError),
    #[error(transparent)]
    Tomography(#[from] TomographyError),
}

/// Ramsey coherence time of the carrier that pins the frequency-noise scale.
pub const T2_STAR_CARRIER: f64 = 660e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// rms of the quasi-static laser frequency offset, rad/s.
    pub laser_linewidth_equiv: f64,
    /// Diffusion constant of the laser phase (white frequency noise), rad^2/s.
    pub phase_diffusion: f64,
    /// Diffusion constant of the random-walk part of the frequency, rad^2/s^3.
    pub freq_diffusion: f64,
    /// Peak-to-peak fractional field fluctuation from pulse to pulse.
    pub intensity_fast_pp: f64,
    /// Peak-to-peak fractional field drift from run to run.
    pub intensity_slow_pp: f64,
    /// Motional heating rate, quanta/s. Used only by the heating channel.
    pub heating_rate: f64,
    pub rng_seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            laser_linewidth_equiv: 0.0,
            phase_diffusion: 0.0,
            freq_diffusion: 0.0,
            intensity_fast_pp: 0.0,
            intensity_slow_pp: 0.0,
            heating_rate: 0.0,
            rng_seed: 0,
        }
    }

    /// Magnitudes of the error budget: T2* = 660 us, 0.1% fast and 1% slow intensity noise.
    pub fn reference() -> Self {
        Self {
            laser_linewidth_equiv: Self::sigma_for_t2(T2_STAR_CARRIER),
            intensity_fast_pp: 1e-3,
            intensity_slow_pp: 1e-2,
            ..Self::none()
        }
    }

    /// Quasi-static rms offset giving a Ramsey envelope exp(-(t/T2)^2).
    pub fn sigma_for_t2(t2: f64) -> f64 {
        2f64.sqrt() / t2
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        let all = [
            self.laser_linewidth_equiv,
            self.phase_diffusion,
            self.freq_diffusion,
            self.intensity_fast_pp,
            self.intensity_slow_pp,
            self.heating_rate,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(NoiseError::InvalidModel("magnitudes must be finite and >= 0"));
        }
        if self.intensity_fast_pp >= 2.0 || self.intensity_slow_pp >= 2.0 {
            return Err(NoiseError::InvalidModel("intensity fluctuation must stay below 200% pp"));
        }
        Ok(())
    }

    pub fn has_frequency_noise(&self) -> bool {
        self.laser_linewidth_equiv > 0.0 || self.phase_diffusion > 0.0 || self.freq_diffusion > 0.0
    }

    pub fn has_intensity_noise(&self) -> bool {
        self.intensity_fast_pp > 0.0 || self.intensity_slow_pp > 0.0
    }

    pub fn is_silent(&self) -> bool {
        !self.has_frequency_noise() && !self.has_intensity_noise()
    }

    /// Phase variance at time t: sigma^2 t^2 + s t + D t^3 / 3.
    pub fn phase_variance(&self, t: f64) -> f64 {
        self.laser_linewidth_equiv.powi(2) * t * t + self.phase_diffusion * t + self.freq_diffusion * t.powi(3) / 3.0
    }

    pub fn frequency_only(&self) -> Self {
        Self { intensity_fast_pp: 0.0, intensity_slow_pp: 0.0, ..*self }
    }

    pub fn intensity_only(&self) -> Self {
        Self { laser_linewidth_equiv: 0.0, phase_diffusion: 0.0, freq_diffusion: 0.0, ..*self }
    }
}

/// Grid spacing of the random-walk part of the frequency.
const WALK_STEP: f64 = 1e-6;

/// One realization of the laser noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTrajectory {
    pub freq_offset: f64,
    pub slow_factor: f64,
    fast_pp: f64,
    fast_key: u64,
    /// Time-dependent frequency on [k, k+1) * WALK_STEP, and the phase at each node.
    walk: Vec<f64>,
    walk_phase: Vec<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for stream `index` of `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws trajectory `index` of `model`, resolved up to `duration` seconds.
/// Beyond `duration` the random-walk frequency stays at its last value.
pub fn sample_noise_trajectory(model: &NoiseModel, duration: f64, index: u64) -> NoiseTrajectory {
    let mut rng = stream_rng(model.rng_seed, index + 1);
    let z: f64 = rng.sample(StandardNormal);
    let u: f64 = rng.random();
    let fast_key = rng.next_u64();
    let mut walk = Vec::new();
    let mut walk_phase = vec![0.0];
    if model.freq_diffusion > 0.0 || model.phase_diffusion > 0.0 {
        let n = (duration / WALK_STEP).ceil().max(1.0) as usize;
        let walk_sd = (model.freq_diffusion * WALK_STEP).sqrt();
        let white_sd = (model.phase_diffusion / WALK_STEP).sqrt();
        let mut w = 0.0;
        for _ in 0..n {
            let g: f64 = rng.sample(StandardNormal);
            let h: f64 = rng.sample(StandardNormal);
            w += walk_sd * g;
            let f = w + white_sd * h;
            walk.push(f);
            let last = *walk_phase.last().unwrap_or(&0.0);
            walk_phase.push(last + f * WALK_STEP);
        }
    }
    NoiseTrajectory {
        freq_offset: model.laser_linewidth_equiv * z,
        slow_factor: 1.0 + model.intensity_slow_pp * (u - 0.5),
        fast_pp: model.intensity_fast_pp,
        fast_key,
        walk,
        walk_phase,
    }
}

impl NoiseTrajectory {
    /// Accumulated random-walk phase at time t.
    fn walk_phase_at(&self, t: f64) -> f64 {
        if self.walk.is_empty() || t <= 0.0 {
            return 0.0;
        }
        let k = (t / WALK_STEP).floor() as usize;
        if k >= self.walk.len() {
            let last = self.walk.len();
            return self.walk_phase[last] + self.walk[last - 1] * (t - last as f64 * WALK_STEP);
        }
        self.walk_phase[k] + self.walk[k] * (t - k as f64 * WALK_STEP)
    }

    /// Laser phase excursion at time t (rad).
    pub fn phase_at(&self, t: f64) -> f64 {
        self.freq_offset * t + self.walk_phase_at(t)
    }

    /// Instantaneous frequency offset (rad/s).
    pub fn freq_at(&self, t: f64) -> f64 {
        let w = if self.walk.is_empty() || t < 0.0 {
            0.0
        } else {
            let k = ((t / WALK_STEP).floor() as usize).min(self.walk.len() - 1);
            self.walk[k]
        };
        self.freq_offset + w
    }

    /// Field amplitude factor for a pulse starting at t0.
    pub fn intensity_at(&self, t0: f64) -> f64 {
        if self.fast_pp == 0.0 {
            return self.slow_factor;
        }
        let h = splitmix64(self.fast_key ^ t0.to_bits());
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        self.slow_factor * (1.0 + self.fast_pp * (u - 0.5))
    }

    /// (t, frequency offset, fractional intensity change) on a grid of spacing dt.
    pub fn samples(&self, duration: f64, dt: f64) -> Vec<(f64, f64, f64)> {
        let n = (duration / dt).floor() as usize;
        (0..=n)
            .map(|k| {
                let t = k as f64 * dt;
                (t, self.freq_at(t), self.intensity_at(t) - 1.0)
            })
            .collect()
    }
}

impl NoiseSource for NoiseTrajectory {
    fn pulse_noise(&self, t0: f64, duration: f64) -> PulseNoise {
        let phase0 = self.phase_at(t0);
        let freq = if duration > 0.0 { (self.phase_at(t0 + duration) - phase0) / duration } else { self.freq_at(t0) };
        PulseNoise { freq_offset: freq, phase_offset: phase0, intensity: self.intensity_at(t0) }
    }
}

/// Execution settings shared by all experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSetup {
    pub mode: ExecMode,
    pub params: TrapLaserParams,
    pub calibration: StarkCalibration,
    pub noise: NoiseModel,
    pub n_trajectories: usize,
}

impl SimSetup {
    /// Mode-default calibration, no noise.
    pub fn new(mode: ExecMode, params: TrapLaserParams) -> Self {
        let calibration = CompileContext::for_mode(params, mode).calibration;
        Self { mode, params, calibration, noise: NoiseModel::none(), n_trajectories: 1 }
    }

    pub fn with_noise(mut self, noise: NoiseModel, n_trajectories: usize) -> Self {
        self.noise = noise;
        self.n_trajectories = n_trajectories;
        self
    }

    pub fn with_calibration(mut self, calibration: StarkCalibration) -> Self {
        self.calibration = calibration;
        self
    }

    pub fn context(&self) -> CompileContext {
        CompileContext::new(self.params, self.calibration)
    }

    fn trajectories(&self) -> usize {
        if self.noise.is_silent() {
            1
        } else {
            self.n_trajectories.max(1)
        }
    }

    /// Runs `f` once per trajectory (in parallel) and averages the returned vectors
    /// in trajectory order.
    pub fn average<F>(&self, horizon: f64, f: F) -> Result<Vec<f64>, NoiseError>
    where
        F: Fn(&Executor<'_>) -> Result<Vec<f64>, NoiseError> + Sync,
    {
        self.noise.validate()?;
        let n = self.trajectories();
        let silent = self.noise.is_silent();
        let per: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|k| {
                let exec = Executor::new(self.mode, self.params);
                if silent {
                    f(&exec)
                } else {
                    let traj = sample_noise_trajectory(&self.noise, horizon, k as u64);
                    f(&exec.with_noise(&traj))
                }
            })
            .collect::<Result<_, _>>()?;
        let mut acc = vec![0.0; per.first().map_or(0, Vec::len)];
        for v in &per {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        Ok(acc)
    }
}

/// Probability of the last measurement record (exact readout).
fn last_probability(exec: &Executor<'_>, prog: &PulseProgram, rho: &DensityMatrix) -> Result<f64, NoiseError> {
    let out = exec.run(prog, rho, 0.0, &mut Readout::Exact)?;
    Ok(out.records.last().map_or(0.0, |r| r.probability))
}

/// Upper bound on the duration of one tomography shot, for noise horizons.
fn tomography_horizon(ctx: &CompileContext, gate: GateKind) -> f64 {
    let per_gate = crate::sequencer::cnot_sequence(ctx).map_or(0.0, |p| p.total_duration());
    gate.count() as f64 * per_gate + 1.2e-3
}

/// Exact (trajectory-averaged) probabilities of all 16 x 15 cells, optionally
/// followed by binomial sampling at `shots` per cell.
pub fn simulate_tomography(
    setup: &SimSetup,
    gate: GateKind,
    shots: Option<u64>,
    seed: u64,
) -> Result<TomographyDataset, NoiseError> {
    let ctx = setup.context();
    let specs = measurement_basis();
    let gate_ops = gate.operations();
    let horizon = tomography_horizon(&ctx, gate);
    let flat = setup.average(horizon, |exec| {
        let mut out = Vec::with_capacity(N_INPUTS * N_MEAS);
        for i in 1..=N_INPUTS {
            let mut prefix = ProgramBuilder::new(ctx);
            prefix.ops(&prep_operations(i)?)?;
            prefix.ops(&gate_ops)?;
            let ledger = *prefix.ledger();
            let prog = prefix.finish()?;
            let mid = exec.run(&prog, &ground_state(), 0.0, &mut Readout::Exact)?;
            for spec in &specs {
                let mut b = ProgramBuilder::with_ledger(ctx, ledger);
                spec.append_to(&mut b)?;
                let suffix = b.finish()?;
                let res = exec.run(&suffix, &mid.state, mid.end_time, &mut Readout::Exact)?;
                out.push(spec.exact_probability(&res.records));
            }
        }
        Ok(out)
    })?;
    let probabilities: Vec<[f64; N_MEAS]> = flat
        .chunks(N_MEAS)
        .map(|row| {
            let mut r = [0.0; N_MEAS];
            for (o, v) in r.iter_mut().zip(row) {
                *o = v.clamp(0.0, 1.0);
            }
            r
        })
        .collect();
    let exact = TomographyDataset::exact(probabilities);
    Ok(match shots {
        None => exact,
        Some(n) => {
            let mut rng = stream_rng(seed, 0);
            exact.sample(n, &mut rng)
        }
    })
}

/// Tomography plus reconstruction against the gate's ideal unitary.
pub fn run_process_tomography(
    setup: &SimSetup,
    gate: GateKind,
    shots: Option<u64>,
    seed: u64,
    method: ChiMethod,
) -> Result<(TomographyDataset, ProcessReport), NoiseError> {
    let data = simulate_tomography(setup, gate, shots, seed)?;
    let design = DesignMatrix::standard();
    let report = analyze(&design, &data, &gate.target(), method)?;
    Ok((data, report))
}

/// Scan data with fitted parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub stderr: Vec<f64>,
    /// (name, value, uncertainty)
    pub fit: Vec<(String, f64, f64)>,
    pub residual_rms: f64,
}

impl ExperimentResult {
    pub fn param(&self, name: &str) -> Option<(f64, f64)> {
        self.fit.iter().find(|p| p.0 == name).map(|p| (p.1, p.2))
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},stderr\n", self.x_label, self.y_label);
        for ((x, y), e) in self.xs.iter().zip(&self.ys).zip(&self.stderr) {
            s.push_str(&format!("{x:.9e},{y:.9e},{e:.3e}\n"));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// fits

/// y = a + b x with standard errors.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<FitResult, NoiseError> {
    let n = xs.len();
    if n < 3 {
        return Err(OptimError::Underdetermined { points: n, params: 2 }.into());
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(OptimError::Singular.into());
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let ssr: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    let s2 = ssr / (nf - 2.0);
    let var_b = s2 / sxx;
    let var_a = s2 * (1.0 / nf + mx * mx / sxx);
    let cov_ab = -mx * s2 / sxx;
    let covariance = nalgebra::DMatrix::from_row_slice(2, 2, &[var_a, cov_ab, cov_ab, var_b]);
    Ok(FitResult {
        params: vec![a, b],
        errors: vec![var_a.sqrt(), var_b.sqrt()],
        covariance,
        residual_rms: (ssr / nf).sqrt(),
        iterations: 0,
    })
}

/// Least-squares amplitude fit of y = B + a cos(w t) + b sin(w t) at fixed w; returns SSR.
fn sinusoid_ssr(ts: &[f64], ys: &[f64], w: f64) -> (f64, [f64; 3]) {
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut aty = nalgebra::Vector3::<f64>::zeros();
    for (t, y) in ts.iter().zip(ys) {
        let row = nalgebra::Vector3::new(1.0, (w * t).cos(), (w * t).sin());
        ata += row * row.transpose();
        aty += row * *y;
    }
    let Some(sol) = ata.lu().solve(&aty) else {
        return (f64::INFINITY, [0.0; 3]);
    };
    let ssr = ts
        .iter()
        .zip(ys)
        .map(|(t, y)| (y - sol[0] - sol[1] * (w * t).cos() - sol[2] * (w * t).sin()).powi(2))
        .sum();
    (ssr, [sol[0], sol[1], sol[2]])
}

/// Grid-search frequency (Hz) minimizing the sinusoid residual.
pub fn grid_frequency(ts: &[f64], ys: &[f64]) -> Result<f64, NoiseError> {
    let span = ts.iter().cloned().fold(f64::MIN, f64::max) - ts.iter().cloned().fold(f64::MAX, f64::min);
    if !(span > 0.0) || ts.len() < 5 {
        return Err(NoiseError::InsufficientOscillation("too few points".into()));
    }
    let mut dts: Vec<f64> = ts.windows(2).map(|w| (w[1] - w[0]).abs()).filter(|d| *d > 0.0).collect();
    dts.sort_by(f64::total_cmp);
    let fmax = 0.5 / dts[dts.len() / 2];
    let fmin = 0.25 / span;
    let n = 4000;
    let mut best = (f64::INFINITY, fmin);
    for k in 0..=n {
        let f = fmin + (fmax - fmin) * k as f64 / n as f64;
        let (ssr, _) = sinusoid_ssr(ts, ys, 2.0 * PI * f);
        if ssr < best.0 {
            best = (ssr, f);
        }
    }
    Ok(best.1)
}

/// y = B - (C/2) e^{-g t} cos(2 pi f t); params [C, f, g, B].
pub fn damped_flop(p: &[f64], t: f64) -> f64 {
    p[3] - 0.5 * p[0] * (-p[2] * t).exp() * (2.0 * PI * p[1] * t).cos()
}

pub fn fit_damped_sinusoid(ts: &[f64], ys: &[f64]) -> Result<FitResult, NoiseError> {
    let f0 = grid_frequency(ts, ys)?;
    let (_, amp) = sinusoid_ssr(ts, ys, 2.0 * PI * f0);
    let c0 = 2.0 * (amp[1] * amp[1] + amp[2] * amp[2]).sqrt();
    Ok(levenberg_marquardt(damped_flop, ts, ys, &[c0, f0, 1.0, amp[0]])?)
}

/// C(t) = C0 exp(-k t^2); params [C0, k].
pub fn gaussian_envelope(p: &[f64], t: f64) -> f64 {
    p[0] * (-p[1] * t * t).exp()
}

/// Gaussian-envelope T2* with uncertainty; infinite when no decay is resolved.
pub fn fit_gaussian_decay(ts: &[f64], cs: &[f64]) -> Result<(FitResult, f64, f64), NoiseError> {
    let tmax = ts.iter().cloned().fold(0.0, f64::max);
    let fit = levenberg_marquardt(gaussian_envelope, ts, cs, &[cs[0].max(1e-3), 1.0 / (tmax * tmax)])?;
    let (k, dk) = (fit.params[1], fit.errors[1]);
    if !(k > 0.0) || k <= 2.0 * dk || k * tmax * tmax < 1e-6 {
        return Ok((fit, f64::INFINITY, f64::INFINITY));
    }
    let t2 = 1.0 / k.sqrt();
    let dt2 = 0.5 * dk / k.powf(1.5);
    Ok((fit, t2, dt2))
}

/// One-parameter fit of y = a / x + b with `a` fixed; returns (b, sigma_b, rms).
pub fn fit_inverse_offset(xs: &[f64], ys: &[f64], a: f64) -> Result<(f64, f64, f64), NoiseError> {
    let n = xs.len();
    if n < 2 {
        return Err(OptimError::Underdetermined { points: n, params: 1 }.into());
    }
    let r: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| y - a / x).collect();
    let b = r.iter().sum::<f64>() / n as f64;
    let s2 = r.iter().map(|v| (v - b).powi(2)).sum::<f64>() / (n - 1) as f64;
    let rms = (r.iter().map(|v| (v - b).powi(2)).sum::<f64>() / n as f64).sqrt();
    Ok((b, (s2 / n as f64).sqrt(), rms))
}

/// Unwrapped phases of (x, y) quadratures.
fn unwrapped_phases(qx: &[f64], qy: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(qx.len());
    for (x, y) in qx.iter().zip(qy) {
        let mut ph = y.atan2(*x);
        if let Some(prev) = out.last() {
            while ph - prev > PI {
                ph -= 2.0 * PI;
            }
            while ph - prev < -PI {
                ph += 2.0 * PI;
            }
        }
        out.push(ph);
    }
    out
}

// ---------------------------------------------------------------------------
// experiments

fn pd(p_s: f64) -> f64 {
    1.0 - p_s
}

/// Thermal motional distribution truncated to the simulated levels, renormalized.
pub fn thermal_populations(nbar: f64) -> [f64; 3] {
    if nbar <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let q = nbar / (1.0 + nbar);
    let raw = [1.0, q, q * q];
    let s: f64 = raw.iter().sum();
    [raw[0] / s, raw[1] / s, raw[2] / s]
}

/// |S><S| (x) thermal motion.
pub fn thermal_state(nbar: f64) -> DensityMatrix {
    let p = thermal_populations(nbar);
    let mut m = Op3::zeros();
    for n in 0..3 {
        m[(n, n)] = c(p[n], 0.0);
    }
    kron(&spin::proj_s(), &m)
}

/// Resonant pulse of fixed duration at phase 0, followed by detection.
fn flop_program(ctx: &CompileContext, transition: Transition, duration: f64) -> Result<PulseProgram, NoiseError> {
    let mut b = ProgramBuilder::new(*ctx);
    let theta = ctx.rate(transition) * duration;
    if theta > 0.0 {
        b.pulse(transition, theta, 0.0)?;
    }
    b.measure("detect");
    Ok(b.finish()?)
}

/// P(D) after a resonant pulse of each duration; fit to a decaying sinusoid.
pub fn rabi_experiment(
    setup: &SimSetup,
    transition: Transition,
    durations: &[f64],
    initial: &DensityMatrix,
) -> Result<ExperimentResult, NoiseError> {
    let ctx = setup.context();
    let horizon = durations.iter().cloned().fold(0.0, f64::max) + 1e-6;
    let ys = setup.average(horizon, |exec| {
        durations
            .iter()
            .map(|&t| Ok(pd(last_probability(exec, &flop_program(&ctx, transition, t)?, initial)?)))
            .collect()
    })?;
    let fit = fit_damped_sinusoid(durations, &ys)?;
    Ok(ExperimentResult {
        name: format!("rabi_{}", transition.name()),
        x_label: "duration_s".into(),
        y_label: "p_dark".into(),
        xs: durations.to_vec(),
        stderr: vec![0.0; ys.len()],
        ys,
        fit: vec![
            ("contrast".into(), fit.params[0], fit.errors[0]),
            ("frequency_hz".into(), fit.params[1], fit.errors[1]),
            ("decay_rate".into(), fit.params[2], fit.errors[2]),
            ("offset".into(), fit.params[3], fit.errors[3]),
        ],
        residual_rms: fit.residual_rms,
    })
}

/// P(D) for pi/2 - wait - pi/2(phase) on `transition`, from |S0>.
fn ramsey_program(
    ctx: &CompileContext,
    transition: Transition,
    delay: f64,
    phase: f64,
) -> Result<PulseProgram, NoiseError> {
    let mut b = ProgramBuilder::new(*ctx);
    b.pulse(transition, PI / 2.0, 0.0)?;
    b.wait(delay);
    b.pulse(transition, PI / 2.0, phase)?;
    b.measure("detect");
    Ok(b.finish()?)
}

/// Ramsey fringe contrast vs delay from four second-pulse phases, and a
/// Gaussian-envelope fit; T2* is reported as infinite when no decay is resolved.
pub fn ramsey_experiment(
    setup: &SimSetup,
    transition: Transition,
    delays: &[f64],
    second_pulse_phase: f64,
) -> Result<ExperimentResult, NoiseError> {
    let ctx = setup.context();
    let horizon = delays.iter().cloned().fold(0.0, f64::max) + 1e-4;
    let raw = setup.average(horizon, |exec| {
        let mut out = Vec::with_capacity(4 * delays.len());
        for &d in delays {
            for q in 0..4 {
                let prog = ramsey_program(&ctx, transition, d, second_pulse_phase + q as f64 * PI / 2.0)?;
                out.push(pd(last_probability(exec, &prog, &ground_state())?));
            }
        }
        Ok(out)
    })?;
    let contrast: Vec<f64> = raw.chunks(4).map(|p| ((p[0] - p[2]).powi(2) + (p[1] - p[3]).powi(2)).sqrt()).collect();
    let (fit, t2, dt2) = fit_gaussian_decay(delays, &contrast)?;
    Ok(ExperimentResult {
        name: format!("ramsey_{}", transition.name()),
        x_label: "delay_s".into(),
        y_label: "contrast".into(),
        xs: delays.to_vec(),
        stderr: vec![0.0; contrast.len()],
        ys: contrast,
        fit: vec![
            ("initial_contrast".into(), fit.params[0], fit.errors[0]),
            ("t2_star_s".into(), t2, dt2),
        ],
        residual_rms: fit.residual_rms,
    })
}

/// Phase of a two-pulse Ramsey sequence as a function of a scan variable, from
/// the quadratures at second-pulse phases 0 and pi/2.
fn phase_track<F>(setup: &SimSetup, horizon: f64, n: usize, build: F) -> Result<(Vec<f64>, Vec<f64>), NoiseError>
where
    F: Fn(usize, f64) -> Result<PulseProgram, NoiseError> + Sync,
{
    let raw = setup.average(horizon, |exec| {
        let mut out = Vec::with_capacity(4 * n);
        for k in 0..n {
            for q in 0..4 {
                out.push(pd(last_probability(exec, &build(k, q as f64 * PI / 2.0)?, &ground_state())?));
            }
        }
        Ok(out)
    })?;
    let qx: Vec<f64> = raw.chunks(4).map(|p| p[0] - p[2]).collect();
    let qy: Vec<f64> = raw.chunks(4).map(|p| p[1] - p[3]).collect();
    let p0: Vec<f64> = raw.chunks(4).map(|p| p[0]).collect();
    Ok((unwrapped_phases(&qx, &qy), p0))
}

/// Slope (rad/s) of the Ramsey phase against `xs`.
fn phase_slope(xs: &[f64], phases: &[f64], what: &str) -> Result<(f64, f64), NoiseError> {
    let excursion = phases.iter().cloned().fold(f64::MIN, f64::max) - phases.iter().cloned().fold(f64::MAX, f64::min);
    if !(excursion > 0.05) {
        return Err(NoiseError::InsufficientOscillation(format!("{what}: phase excursion {excursion:.3} rad")));
    }
    let fit = fit_line(xs, phases)?;
    Ok((fit.params[1], fit.errors[1]))
}

/// Raw light shift of one detuned carrier-referenced pulse, per scan point.
#[derive(Debug, Clone, PartialEq)]
pub struct StarkTrace {
    pub x: f64,
    pub taus: Vec<f64>,
    pub p_dark: Vec<f64>,
    /// Signed shift (rad/s) from the Ramsey phase slope.
    pub shift: f64,
    pub shift_err: f64,
}

/// Carrier Ramsey with fixed separation `t_fixed` and a Stark pulse of length tau
/// at laser detuning x * omega_sec inside it.
pub fn stark_trace(setup: &SimSetup, x: f64, taus: &[f64], t_fixed: f64) -> Result<StarkTrace, NoiseError> {
    if taus.iter().any(|t| *t > t_fixed || *t < 0.0) {
        return Err(NoiseError::Invalid("Stark pulse longer than the Ramsey gap".into()));
    }
    let ctx = CompileContext::new(setup.params, StarkCalibration::disabled());
    let detuning = x * setup.params.omega_sec;
    let (phases, p0) = phase_track(setup, t_fixed + 1e-4, taus.len(), |k, phase| {
        let mut b = ProgramBuilder::new(ctx);
        b.pulse(Transition::Carrier, PI / 2.0, 0.0)?;
        if taus[k] > 0.0 {
            b.detuned_pulse(Transition::Carrier, detuning, taus[k], 0.0);
        }
        b.wait(t_fixed - taus[k]);
        b.pulse(Transition::Carrier, PI / 2.0, phase)?;
        b.measure("detect");
        Ok(b.finish()?)
    })?;
    let (shift, shift_err) = phase_slope(taus, &phases, &format!("x = {x}"))?;
    Ok(StarkTrace { x, taus: taus.to_vec(), p_dark: p0, shift, shift_err })
}

/// Whether x sits on a motional sideband resonance.
pub fn near_sideband(x: f64) -> bool {
    (x - 1.0).abs() < 0.03 || (x - 2.0).abs() < 0.03
}

/// |shift| vs x for each detuning (NaN where a sideband resonance leaves no phase), then the fit |shift| = A/x + b with A = Omega^2 / (2 omega_sec).
pub fn stark_scan(
    setup: &SimSetup,
    xs: &[f64],
    taus: &[f64],
    t_fixed: f64,
) -> Result<(ExperimentResult, Vec<StarkTrace>), NoiseError> {
    let traces: Vec<StarkTrace> = xs
        .iter()
        .map(|&x| match stark_trace(setup, x, taus, t_fixed) {
            // on a sideband the population leaves the qubit and the phase is undefined
            Err(NoiseError::InsufficientOscillation(_)) if near_sideband(x) => Ok(StarkTrace {
                x,
                taus: taus.to_vec(),
                p_dark: vec![f64::NAN; taus.len()],
                shift: f64::NAN,
                shift_err: f64::NAN,
            }),
            other => other,
        })
        .collect::<Result<_, _>>()?;
    let a = setup.params.rabi.powi(2) / (2.0 * setup.params.omega_sec);
    let (fx, fy): (Vec<f64>, Vec<f64>) =
        traces.iter().filter(|t| !near_sideband(t.x)).map(|t| (t.x, t.shift.abs())).unzip();
    let (b, db, rms) = fit_inverse_offset(&fx, &fy, a)?;
    Ok((
        ExperimentResult {
            name: "stark_scan".into(),
            x_label: "detuning_over_omega_sec".into(),
            y_label: "abs_shift_rad_s".into(),
            xs: xs.to_vec(),
            ys: traces.iter().map(|t| t.shift.abs()).collect(),
            stderr: traces.iter().map(|t| t.shift_err).collect(),
            fit: vec![("a_fixed".into(), a, 0.0), ("b".into(), b, db)],
            residual_rms: rms,
        },
        traces,
    ))
}

/// Sideband Ramsey phase slope vs delay (rad/s): the light shift left uncorrected.
pub fn sideband_ramsey_frequency(setup: &SimSetup, delays: &[f64]) -> Result<(f64, f64), NoiseError> {
    let ctx = setup.context();
    let horizon = delays.iter().cloned().fold(0.0, f64::max) + 2e-4;
    let (phases, _) = phase_track(setup, horizon, delays.len(), |k, phase| {
        Ok(ramsey_program(&ctx, Transition::BlueSideband, delays[k], phase)?)
    })?;
    phase_slope(delays, &phases, "sideband Ramsey")
}

/// Sideband Ramsey with the second pulse at pi/2: linear fit of P(D) vs delay,
/// converted to a frequency offset (rad/s) with the fringe slope at zero delay.
pub fn residual_stark_check(setup: &SimSetup, delays: &[f64]) -> Result<ExperimentResult, NoiseError> {
    let ctx = setup.context();
    let horizon = delays.iter().cloned().fold(0.0, f64::max) + 2e-4;
    let eps = 1e-4;
    let raw = setup.average(horizon, |exec| {
        let mut out = Vec::with_capacity(delays.len() + 2);
        for &d in delays {
            out.push(pd(last_probability(exec, &ramsey_program(&ctx, Transition::BlueSideband, d, PI / 2.0)?, &ground_state())?));
        }
        for ph in [PI / 2.0 - eps, PI / 2.0 + eps] {
            out.push(pd(last_probability(exec, &ramsey_program(&ctx, Transition::BlueSideband, 0.0, ph)?, &ground_state())?));
        }
        Ok(out)
    })?;
    let n = delays.len();
    let ys = raw[..n].to_vec();
    let dp_dphi = (raw[n + 1] - raw[n]) / (2.0 * eps);
    let line = fit_line(delays, &ys)?;
    // an uncompensated shift w advances the atom against the laser, i.e. the
    // second pulse sees phase -w t
    let offset = -line.params[1] / dp_dphi;
    let offset_err = line.errors[1] / dp_dphi.abs();
    Ok(ExperimentResult {
        name: "residual_stark".into(),
        x_label: "delay_s".into(),
        y_label: "p_dark".into(),
        xs: delays.to_vec(),
        stderr: vec![0.0; n],
        ys,
        fit: vec![
            ("slope_per_s".into(), line.params[1], line.errors[1]),
            ("offset_rad_s".into(), offset, offset_err),
            ("offset_hz".into(), offset / (2.0 * PI), offset_err / (2.0 * PI)),
        ],
        residual_rms: line.residual_rms,
    })
}

/// Light shift of the blue-sideband drive booked by an uncorrected sequence.
pub fn sideband_light_shift(p: &TrapLaserParams) -> f64 {
    stark_delta(resonant_detuning(p, Transition::BlueSideband), p.rabi, p.delta0)
}

// ---------------------------------------------------------------------------
// thermometry and heating

/// n = r / (1 - r) from the red/blue shelving ratio r.
pub fn thermometry(red_prob: f64, blue_prob: f64) -> Result<f64, NoiseError> {
    if !(0.0..=1.0).contains(&red_prob) || !(0.0..=1.0).contains(&blue_prob) || blue_prob == 0.0 {
        return Err(NoiseError::Invalid(format!("probabilities {red_prob}, {blue_prob}")));
    }
    let r = red_prob / blue_prob;
    if r >= 1.0 {
        return Err(NoiseError::UnphysicalRatio(r));
    }
    Ok(r / (1.0 - r))
}

/// Inverse of `thermometry` for a thermal state: r = n / (1 + n).
pub fn nbar_to_ratio(nbar: f64) -> f64 {
    nbar / (1.0 + nbar)
}

/// Shelving probabilities after a sideband pi pulse (red, blue).
pub fn sideband_probabilities(setup: &SimSetup, rho: &DensityMatrix) -> Result<(f64, f64), NoiseError> {
    let ctx = setup.context();
    let t_pi = PI / ctx.rate(Transition::BlueSideband);
    let probe = |tr| -> Result<f64, NoiseError> {
        let v = setup.average(t_pi + 1e-6, |exec| Ok(vec![pd(last_probability(exec, &flop_program(&ctx, tr, t_pi)?, rho)?)]))?;
        Ok(v[0])
    };
    Ok((probe(Transition::RedSideband)?, probe(Transition::BlueSideband)?))
}

/// Motional heating for time t at `rate` quanta/s (Lindblad with a and a^dag at
/// equal rates, truncated to the simulated levels), integrated in small steps.
pub fn heating_channel(rho: &DensityMatrix, rate: f64, t: f64) -> DensityMatrix {
    if rate <= 0.0 || t <= 0.0 {
        return *rho;
    }
    let a = kron(&Op2::identity(), &spin::annihilation());
    let ad = a.adjoint();
    let n_up = a * ad;
    let n_dn = ad * a;
    let half = c(0.5, 0.0);
    let steps = ((rate * t) / 1e-4).ceil().max(1.0) as usize;
    let dt = t / steps as f64;
    let deriv = |r: &DensityMatrix| -> DensityMatrix {
        let up = ad * r * a - (n_up * r + r * n_up) * half;
        let dn = a * r * ad - (n_dn * r + r * n_dn) * half;
        (up + dn) * c(rate, 0.0)
    };
    let mut r = *rho;
    for _ in 0..steps {
        let k1 = deriv(&r);
        let k2 = deriv(&(r + k1 * c(dt / 2.0, 0.0)));
        let k3 = deriv(&(r + k2 * c(dt / 2.0, 0.0)));
        let k4 = deriv(&(r + k3 * c(dt, 0.0)));
        r += (k1 + k2 * c(2.0, 0.0) + k3 * c(2.0, 0.0) + k4) * c(dt / 6.0, 0.0);
    }
    r
}

/// Largest tolerable heating rate, p_gate / T_gate (quanta/s).
pub fn heating_budget(t_gate: f64, p_gate: f64) -> Result<f64, NoiseError> {
    if !(t_gate > 0.0 && p_gate > 0.0) {
        return Err(NoiseError::Invalid("gate time and error must be positive".into()));
    }
    Ok(p_gate / t_gate)
}

// ---------------------------------------------------------------------------
// error budget

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorSource {
    OffResonant,
    LaserFrequency,
    LaserIntensity,
}

impl ErrorSource {
    pub const ALL: [ErrorSource; 3] = [ErrorSource::OffResonant, ErrorSource::LaserFrequency, ErrorSource::LaserIntensity];

    pub fn name(self) -> &'static str {
        match self {
            ErrorSource::OffResonant => "off_resonant",
            ErrorSource::LaserFrequency => "laser_frequency",
            ErrorSource::LaserIntensity => "laser_intensity",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s)
    }
}

/// Setup with only `sources` switched on. Off-resonant coupling is the physical
/// pulse model; without it pulses are idealized rotations.
pub fn setup_for_sources(params: TrapLaserParams, noise: &NoiseModel, sources: &[ErrorSource], n_traj: usize) -> SimSetup {
    let mode = if sources.contains(&ErrorSource::OffResonant) { ExecMode::Physical } else { ExecMode::Idealized };
    let mut m = NoiseModel { heating_rate: 0.0, ..NoiseModel::none() };
    m.rng_seed = noise.rng_seed;
    if sources.contains(&ErrorSource::LaserFrequency) {
        m.laser_linewidth_equiv = noise.laser_linewidth_equiv;
        m.phase_diffusion = noise.phase_diffusion;
        m.freq_diffusion = noise.freq_diffusion;
    }
    if sources.contains(&ErrorSource::LaserIntensity) {
        m.intensity_fast_pp = noise.intensity_fast_pp;
        m.intensity_slow_pp = noise.intensity_slow_pp;
    }
    SimSetup::new(mode, params).with_noise(m, n_traj)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetRow {
    pub label: String,
    pub process_fidelity: f64,
    pub deficit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBudget {
    pub rows: Vec<BudgetRow>,
    pub total: BudgetRow,
    /// 1 - prod(1 - e_i) over the single-source deficits.
    pub product_rule: f64,
}

impl ErrorBudget {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("source,process_fidelity,deficit\n");
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            s.push_str(&format!("{},{:.6},{:.6}\n", r.label, r.process_fidelity, r.deficit));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<18} {:>10} {:>10}\n", "source", "F_p", "deficit");
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            s.push_str(&format!("{:<18} {:>10.4} {:>9.2}%\n", r.label, r.process_fidelity, 100.0 * r.deficit));
        }
        s.push_str(&format!("{:<18} {:>10} {:>9.2}%\n", "product_rule", "", 100.0 * self.product_rule));
        s
    }
}

/// CNOT process-fidelity deficit for each source alone and for all of them together.
pub fn error_budget(
    params: TrapLaserParams,
    noise: &NoiseModel,
    sources: &[ErrorSource],
    n_trajectories: usize,
    method: ChiMethod,
) -> Result<ErrorBudget, NoiseError> {
    let noisy = sources.iter().any(|s| *s != ErrorSource::OffResonant);
    if noisy && n_trajectories < 50 {
        return Err(NoiseError::Invalid(format!("error budget needs >= 50 trajectories, got {n_trajectories}")));
    }
    let fp = |srcs: &[ErrorSource]| -> Result<f64, NoiseError> {
        let setup = setup_for_sources(params, noise, srcs, n_trajectories);
        let (_, report) = run_process_tomography(&setup, GateKind::Cnot, None, noise.rng_seed, method)?;
        Ok(report.process_fidelity)
    };
    let mut rows = Vec::new();
    for &s in sources {
        let f = fp(&[s])?;
        rows.push(BudgetRow { label: s.name().into(), process_fidelity: f, deficit: 1.0 - f });
    }
    let f_all = fp(sources)?;
    let product_rule = 1.0 - rows.iter().map(|r| 1.0 - r.deficit).product::<f64>();
    Ok(ErrorBudget {
        rows,
        total: BudgetRow { label: "total".into(), process_fidelity: f_all, deficit: 1.0 - f_all },
        product_rule,
    })
}

/// Per-gate fidelity from F_p after n = 0, 1, 2, ... gates: F_p(n) = A F_g^n.
pub fn fit_gate_fidelity(series: &[(usize, f64)]) -> Result<(f64, f64), NoiseError> {
    if series.len() < 2 || series.iter().any(|(_, f)| !(*f > 0.0)) {
        return Err(NoiseError::Invalid("need at least two positive fidelities".into()));
    }
    let xs: Vec<f64> = series.iter().map(|(n, _)| *n as f64).collect();
    let ys: Vec<f64> = series.iter().map(|(_, f)| f.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx;
    Ok((slope.exp(), (my - slope * mx).exp()))
}

/// Shot-mode sampling of a single-measurement program: fraction of dark outcomes.
pub fn sampled_dark_fraction(
    setup: &SimSetup,
    prog: &PulseProgram,
    rho: &DensityMatrix,
    shots: u64,
    seed: u64,
) -> Result<f64, NoiseError> {
    let exec = Executor::new(setup.mode, setup.params);
    let mut rng = stream_rng(seed, 0);
    let mut dark = 0u64;
    for _ in 0..shots {
        let out = exec.run(prog, rho, 0.0, &mut Readout::Sampled(&mut rng))?;
        if out.records.last().and_then(|r| r.outcome) == Some(false) {
            dark += 1;
        }
    }
    Ok(dark as f64 / shots as f64)
}

/// Binomial draw helper for callers that sample averaged probabilities.
pub fn binomial_fraction(p: f64, shots: u64, rng: &mut dyn RngCore) -> f64 {
    Binomial::new(shots, p.clamp(0.0, 1.0)).expect("valid binomial").sample(rng) as f64 / shots as f64
}
