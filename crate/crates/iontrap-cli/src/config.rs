//! Run configuration: flat dotted keys, frequencies in Hz.
//!
//! ```toml
//! trap.omega_sec_hz = 1.32e6
//! laser.rabi_hz = 125e3
//! execution.mode = "physical"
//! ```
//!
//! Every key is optional. The resolved configuration (defaults filled in) is what
//! gets hashed into the provenance header, so an empty file and a file spelling
//! out the defaults hash the same.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::PathBuf;

use iontrap::frames::TrapLaserParams;
use iontrap::noiselab::{NoiseModel, SimSetup, T2_STAR_CARRIER};
use iontrap::sequencer::{CompileContext, ExecMode, StarkCalibration};
use iontrap::tomography::ChiMethod;
use sha2::{Digest, Sha256};
use toml::Value;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub omega_sec_hz: f64,
    pub eta: f64,
    pub rabi_hz: f64,
    /// Signed detuning-independent light shift.
    pub delta0_hz: f64,

    /// `None`: on in physical mode, off in idealized mode.
    pub calibration_enabled: Option<bool>,
    /// `None`: the true `laser.delta0_hz`.
    pub calibration_delta0_hz: Option<f64>,
    pub calibration_include_carrier: bool,

    pub noise_enabled: bool,
    pub linewidth_equiv_hz: f64,
    pub phase_diffusion: f64,
    pub freq_diffusion: f64,
    pub intensity_fast_pp: f64,
    pub intensity_slow_pp: f64,
    pub heating_rate: f64,

    pub mode: ExecMode,
    /// `None` means exact probabilities.
    pub shots: Option<u64>,
    pub seed: u64,
    pub n_trajectories: usize,
    pub method: ChiMethod,
    pub bootstrap: usize,

    pub out_dir: PathBuf,
    pub csv: bool,
    pub json: bool,

    pub detunings: String,
    pub stark_taus_us: String,
    pub t_fixed_us: f64,
    pub rabi_durations_us: String,
    pub ramsey_delays_us: String,
    pub residual_delays_us: String,
    pub nbar: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            omega_sec_hz: 1.32e6,
            eta: 0.0616,
            rabi_hz: 125e3,
            delta0_hz: 500.0,
            calibration_enabled: None,
            calibration_delta0_hz: None,
            calibration_include_carrier: false,
            noise_enabled: true,
            linewidth_equiv_hz: NoiseModel::sigma_for_t2(T2_STAR_CARRIER) / (2.0 * PI),
            phase_diffusion: 0.0,
            freq_diffusion: 0.0,
            intensity_fast_pp: 1e-3,
            intensity_slow_pp: 1e-2,
            heating_rate: 0.0,
            mode: ExecMode::Physical,
            shots: None,
            seed: 1,
            n_trajectories: 100,
            method: ChiMethod::Mle,
            bootstrap: 20,
            out_dir: PathBuf::from("out"),
            csv: true,
            json: true,
            detunings: "0.8:2.0:0.1".into(),
            stark_taus_us: "0:220:20".into(),
            t_fixed_us: 230.0,
            rabi_durations_us: "0:300:5".into(),
            ramsey_delays_us: "0:1400:100".into(),
            residual_delays_us: "0:500:50".into(),
            nbar: 0.0,
        }
    }
}

fn want_f64(key: &str, v: &Value) -> Result<f64, String> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(format!("`{key}` must be a number")),
    }
}

fn want_u64(key: &str, v: &Value) -> Result<u64, String> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(format!("`{key}` must be a non-negative integer")),
    }
}

fn want_bool(key: &str, v: &Value) -> Result<bool, String> {
    v.as_bool().ok_or_else(|| format!("`{key}` must be true or false"))
}

fn want_str<'v>(key: &str, v: &'v Value) -> Result<&'v str, String> {
    v.as_str().ok_or_else(|| format!("`{key}` must be a string"))
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

pub fn parse_mode(s: &str) -> Option<ExecMode> {
    match s {
        "idealized" => Some(ExecMode::Idealized),
        "physical" => Some(ExecMode::Physical),
        _ => None,
    }
}

pub fn parse_method(s: &str) -> Option<ChiMethod> {
    match s {
        "mle" => Some(ChiMethod::Mle),
        "linear" => Some(ChiMethod::Linear),
        _ => None,
    }
}

fn method_name(m: ChiMethod) -> &'static str {
    match m {
        ChiMethod::Mle => "mle",
        ChiMethod::Linear => "linear",
    }
}

/// Inclusive `start:stop:step` range.
pub fn parse_range(spec: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = spec.split(':').collect();
    let nums: Result<Vec<f64>, _> = parts.iter().map(|p| p.trim().parse::<f64>()).collect();
    let Ok(nums) = nums else {
        return Err(format!("bad range `{spec}` (want start:stop:step)"));
    };
    let (a, b, s) = match nums.as_slice() {
        [a, b, s] => (*a, *b, *s),
        _ => return Err(format!("bad range `{spec}` (want start:stop:step)")),
    };
    if !(s > 0.0) || !(b >= a) || !a.is_finite() || !b.is_finite() {
        return Err(format!("bad range `{spec}`"));
    }
    let n = ((b - a) / s + 1e-9).floor() as usize + 1;
    if n > 100_000 {
        return Err(format!("range `{spec}` has too many points"));
    }
    // round away binary noise so 0.8 + 3 * 0.1 prints as 1.1
    Ok((0..n).map(|k| ((a + k as f64 * s) * 1e12).round() / 1e12).collect())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            format!("config is not valid TOML: {}", e.message().replace('\n', " "))
        })?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        let mut cfg = Self::default();
        for (key, v) in &flat {
            cfg.set(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<(), String> {
        match key {
            "trap.omega_sec_hz" => self.omega_sec_hz = want_f64(key, v)?,
            "trap.eta" => self.eta = want_f64(key, v)?,
            "laser.rabi_hz" => self.rabi_hz = want_f64(key, v)?,
            "laser.delta0_hz" => self.delta0_hz = want_f64(key, v)?,
            "calibration.enabled" => self.calibration_enabled = Some(want_bool(key, v)?),
            "calibration.delta0_hz" => self.calibration_delta0_hz = Some(want_f64(key, v)?),
            "calibration.include_carrier" => self.calibration_include_carrier = want_bool(key, v)?,
            "noise.enabled" => self.noise_enabled = want_bool(key, v)?,
            "noise.linewidth_equiv_hz" => self.linewidth_equiv_hz = want_f64(key, v)?,
            "noise.phase_diffusion_rad2_per_s" => self.phase_diffusion = want_f64(key, v)?,
            "noise.freq_diffusion_rad2_per_s3" => self.freq_diffusion = want_f64(key, v)?,
            "noise.intensity_fast_pp" => self.intensity_fast_pp = want_f64(key, v)?,
            "noise.intensity_slow_pp" => self.intensity_slow_pp = want_f64(key, v)?,
            "noise.heating_rate" => self.heating_rate = want_f64(key, v)?,
            "execution.mode" => {
                let s = want_str(key, v)?;
                self.mode = parse_mode(s).ok_or_else(|| format!("`{key}`: unknown mode `{s}`"))?;
            }
            "execution.shots" => {
                let n = want_u64(key, v)?;
                self.shots = (n > 0).then_some(n);
            }
            "execution.seed" => self.seed = want_u64(key, v)?,
            "execution.n_trajectories" => self.n_trajectories = want_u64(key, v)? as usize,
            "execution.method" => {
                let s = want_str(key, v)?;
                self.method = parse_method(s).ok_or_else(|| format!("`{key}`: unknown method `{s}`"))?;
            }
            "execution.bootstrap" => self.bootstrap = want_u64(key, v)? as usize,
            "output.directory" => self.out_dir = PathBuf::from(want_str(key, v)?),
            "output.formats" => {
                let list = v.as_array().ok_or_else(|| format!("`{key}` must be a list"))?;
                self.csv = false;
                self.json = false;
                for item in list {
                    match item.as_str() {
                        Some("csv") => self.csv = true,
                        Some("json") => self.json = true,
                        _ => return Err(format!("`{key}`: formats are \"csv\" and \"json\"")),
                    }
                }
            }
            "scan.detunings" => self.detunings = want_str(key, v)?.to_string(),
            "scan.stark_taus_us" => self.stark_taus_us = want_str(key, v)?.to_string(),
            "scan.t_fixed_us" => self.t_fixed_us = want_f64(key, v)?,
            "scan.rabi_durations_us" => self.rabi_durations_us = want_str(key, v)?.to_string(),
            "scan.ramsey_delays_us" => self.ramsey_delays_us = want_str(key, v)?.to_string(),
            "scan.residual_delays_us" => self.residual_delays_us = want_str(key, v)?.to_string(),
            "scan.nbar" => self.nbar = want_f64(key, v)?,
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.params().validate().map_err(|e| e.to_string())?;
        self.noise().validate().map_err(|e| e.to_string())?;
        if self.n_trajectories == 0 {
            return Err("execution.n_trajectories must be positive".into());
        }
        if !(self.nbar >= 0.0) {
            return Err("scan.nbar must be >= 0".into());
        }
        for spec in [
            &self.detunings,
            &self.stark_taus_us,
            &self.rabi_durations_us,
            &self.ramsey_delays_us,
            &self.residual_delays_us,
        ] {
            parse_range(spec)?;
        }
        Ok(())
    }

    pub fn params(&self) -> TrapLaserParams {
        TrapLaserParams {
            omega_sec: 2.0 * PI * self.omega_sec_hz,
            eta: self.eta,
            rabi: 2.0 * PI * self.rabi_hz,
            delta0: 2.0 * PI * self.delta0_hz,
        }
    }

    pub fn noise(&self) -> NoiseModel {
        if !self.noise_enabled {
            return NoiseModel { rng_seed: self.seed, ..NoiseModel::none() };
        }
        NoiseModel {
            laser_linewidth_equiv: 2.0 * PI * self.linewidth_equiv_hz,
            phase_diffusion: self.phase_diffusion,
            freq_diffusion: self.freq_diffusion,
            intensity_fast_pp: self.intensity_fast_pp,
            intensity_slow_pp: self.intensity_slow_pp,
            heating_rate: self.heating_rate,
            rng_seed: self.seed,
        }
    }

    pub fn calibration(&self) -> StarkCalibration {
        let p = self.params();
        let enabled = self.calibration_enabled.unwrap_or(self.mode == ExecMode::Physical);
        if !enabled {
            return StarkCalibration::disabled();
        }
        StarkCalibration {
            enabled: true,
            delta0: self.calibration_delta0_hz.map_or(p.delta0, |d| 2.0 * PI * d),
            include_carrier: self.calibration_include_carrier,
        }
    }

    pub fn context(&self) -> CompileContext {
        CompileContext::new(self.params(), self.calibration())
    }

    pub fn setup(&self) -> SimSetup {
        SimSetup::new(self.mode, self.params())
            .with_calibration(self.calibration())
            .with_noise(self.noise(), self.n_trajectories)
    }

    /// Resolved configuration, one `key = value` per line, sorted by key.
    pub fn canonical(&self) -> String {
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        let f = |x: f64| format!("{x:e}");
        m.insert("trap.omega_sec_hz", f(self.omega_sec_hz));
        m.insert("trap.eta", f(self.eta));
        m.insert("laser.rabi_hz", f(self.rabi_hz));
        m.insert("laser.delta0_hz", f(self.delta0_hz));
        let cal = self.calibration();
        m.insert("calibration.enabled", cal.enabled.to_string());
        m.insert("calibration.delta0_hz", f(cal.delta0 / (2.0 * PI)));
        m.insert("calibration.include_carrier", cal.include_carrier.to_string());
        m.insert("noise.enabled", self.noise_enabled.to_string());
        m.insert("noise.linewidth_equiv_hz", f(self.linewidth_equiv_hz));
        m.insert("noise.phase_diffusion_rad2_per_s", f(self.phase_diffusion));
        m.insert("noise.freq_diffusion_rad2_per_s3", f(self.freq_diffusion));
        m.insert("noise.intensity_fast_pp", f(self.intensity_fast_pp));
        m.insert("noise.intensity_slow_pp", f(self.intensity_slow_pp));
        m.insert("noise.heating_rate", f(self.heating_rate));
        m.insert("execution.mode", format!("\"{}\"", self.mode.name()));
        m.insert("execution.shots", self.shots.unwrap_or(0).to_string());
        m.insert("execution.seed", self.seed.to_string());
        m.insert("execution.n_trajectories", self.n_trajectories.to_string());
        m.insert("execution.method", format!("\"{}\"", method_name(self.method)));
        m.insert("execution.bootstrap", self.bootstrap.to_string());
        m.insert("scan.detunings", format!("\"{}\"", self.detunings));
        m.insert("scan.stark_taus_us", format!("\"{}\"", self.stark_taus_us));
        m.insert("scan.t_fixed_us", f(self.t_fixed_us));
        m.insert("scan.rabi_durations_us", format!("\"{}\"", self.rabi_durations_us));
        m.insert("scan.ramsey_delays_us", format!("\"{}\"", self.ramsey_delays_us));
        m.insert("scan.residual_delays_us", format!("\"{}\"", self.residual_delays_us));
        m.insert("scan.nbar", f(self.nbar));
        let mut s = String::new();
        for (k, v) in m {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn method_name(&self) -> &'static str {
        method_name(self.method)
    }
}
