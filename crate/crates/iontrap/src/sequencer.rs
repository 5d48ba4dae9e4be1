//! Pulse-program IR, DDS phase model, compilation and execution.
//!
//! Programs are flat instruction lists with at most one level of conditional
//! branching (taken when the preceding fluorescence measurement sees no light).
//! Phases are absolute: every pulse phase is referenced to t = 0 of the program,
//! the way a phase-coherent DDS computes it from a fixed epoch.

use std::f64::consts::PI;
use std::fmt::{self, Write as _};

use rand::RngCore;

use crate::frames::{gate_propagator, ideal_gate_propagator, PulseParams, TrapLaserParams, Transition};
use crate::gates::{normalize_phase, parse_ops, Axis, Rotation};
use crate::qlinalg::{
    c, embed_state, proj_d, proj_s, DensityMatrix, LinalgError, Op4, Operator, State4, C64,
};
use crate::stark::{resonant_detuning, signed_dependent_shift, stark_delta, StarkLedger};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SequencerError {
    #[error("zero Rabi rate for {0:?}")]
    ZeroRabiRate(Transition),
    #[error("index {0} out of range 1..=16")]
    IndexOutOfRange(usize),
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Phase of a DDS at frequency `f` (rad/s) at time `t` with offset `phi`, in [0, 2pi).
pub fn dds_phase(f: f64, t: f64, phi: f64) -> f64 {
    normalize_phase((f * t).rem_euclid(2.0 * PI) + phi)
}

/// Fixed-point DDS: 64-bit phase accumulator clocked at `clock_hz`.
///
/// The phase of frequency `f` at tick `n` is `ftw(f) * n mod 2^64`, which is
/// exact integer arithmetic and independent of any switching history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdsPhaseModel {
    pub clock_hz: f64,
}

const TWO_POW_64: f64 = 18446744073709551616.0;

impl DdsPhaseModel {
    pub fn new(clock_hz: f64) -> Self {
        Self { clock_hz }
    }

    /// Frequency tuning word for an angular frequency.
    pub fn tuning_word(&self, f: f64) -> u64 {
        let cycles_per_tick = f / (2.0 * PI) / self.clock_hz;
        let frac = cycles_per_tick - cycles_per_tick.floor();
        (frac * TWO_POW_64) as u128 as u64
    }

    pub fn phase_word(&self, ftw: u64, tick: u64) -> u64 {
        ftw.wrapping_mul(tick)
    }

    pub fn offset_word(phi: f64) -> u64 {
        (normalize_phase(phi) / (2.0 * PI) * TWO_POW_64) as u128 as u64
    }

    pub fn radians(word: u64) -> f64 {
        word as f64 / TWO_POW_64 * 2.0 * PI
    }
}

/// Output stage that can switch between frequencies while keeping each phase-coherent.
#[derive(Debug, Clone)]
pub struct DdsChannel {
    model: DdsPhaseModel,
    ftw: u64,
    offset: u64,
}

impl DdsChannel {
    pub fn new(model: DdsPhaseModel) -> Self {
        Self { model, ftw: 0, offset: 0 }
    }

    /// Switch frequency and phase offset. The new waveform continues the phase
    /// function of `f` referenced to the epoch, not the previous waveform.
    pub fn select(&mut self, f: f64, phi: f64) {
        self.ftw = self.model.tuning_word(f);
        self.offset = DdsPhaseModel::offset_word(phi);
    }

    pub fn output_word(&self, tick: u64) -> u64 {
        self.model.phase_word(self.ftw, tick).wrapping_add(self.offset)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pulse {
    pub transition: Transition,
    /// Nominal rotation angle on the addressed manifold.
    pub theta: f64,
    pub phi: f64,
    pub duration: f64,
    /// Explicit laser detuning; `None` means resonant with `transition`.
    pub detuning: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Instruction {
    Pulse(Pulse),
    Wait(f64),
    Measure(String),
    /// Runs on the no-fluorescence arm of the preceding measurement.
    Cond(Vec<Instruction>),
}

impl Instruction {
    fn duration(&self) -> f64 {
        match self {
            Instruction::Pulse(p) => p.duration,
            Instruction::Wait(t) => *t,
            Instruction::Measure(_) => 0.0,
            Instruction::Cond(body) => body.iter().map(Instruction::duration).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PulseProgram {
    pub instructions: Vec<Instruction>,
}

impl PulseProgram {
    /// Duration along the longest path (conditional bodies included).
    pub fn total_duration(&self) -> f64 {
        self.instructions.iter().map(Instruction::duration).sum()
    }

    pub fn validate(&self) -> Result<(), SequencerError> {
        fn check(list: &[Instruction], depth: usize) -> Result<(), SequencerError> {
            let mut measured = false;
            for ins in list {
                match ins {
                    Instruction::Pulse(p) => {
                        if !(p.duration >= 0.0) || !p.phi.is_finite() || !p.theta.is_finite() {
                            return Err(SequencerError::Malformed(format!("bad pulse {p:?}")));
                        }
                    }
                    Instruction::Wait(t) => {
                        if !(*t >= 0.0) {
                            return Err(SequencerError::Malformed(format!("negative wait {t}")));
                        }
                    }
                    Instruction::Measure(_) => {
                        measured = true;
                        continue;
                    }
                    Instruction::Cond(body) => {
                        if depth > 0 {
                            return Err(SequencerError::Malformed("nested conditional".into()));
                        }
                        if !measured {
                            return Err(SequencerError::Malformed("conditional without measurement".into()));
                        }
                        check(body, depth + 1)?;
                    }
                }
                measured = false;
            }
            Ok(())
        }
        check(&self.instructions, 0)
    }

    /// Line-oriented text form used by golden files.
    pub fn dump(&self) -> String {
        fn emit(out: &mut String, list: &[Instruction], indent: &str) {
            for ins in list {
                match ins {
                    Instruction::Pulse(p) => {
                        let _ = write!(
                            out,
                            "{indent}PULSE {} theta={} phi={} dur={}",
                            p.transition.name(),
                            p.theta,
                            p.phi,
                            p.duration
                        );
                        if let Some(d) = p.detuning {
                            let _ = write!(out, " delta={d}");
                        }
                        out.push('\n');
                    }
                    Instruction::Wait(t) => {
                        let _ = writeln!(out, "{indent}WAIT {t}");
                    }
                    Instruction::Measure(l) => {
                        let _ = writeln!(out, "{indent}MEASURE {l}");
                    }
                    Instruction::Cond(body) => {
                        let _ = writeln!(out, "{indent}COND {{");
                        emit(out, body, "  ");
                        let _ = writeln!(out, "{indent}}}");
                    }
                }
            }
        }
        let mut out = String::new();
        emit(&mut out, &self.instructions, "");
        out
    }

    pub fn parse(text: &str) -> Result<Self, SequencerError> {
        let bad = |l: &str| SequencerError::Malformed(format!("cannot parse line `{l}`"));
        let mut top: Vec<Instruction> = Vec::new();
        let mut body: Option<Vec<Instruction>> = None;
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let target = |body: &mut Option<Vec<Instruction>>, top: &mut Vec<Instruction>, ins| match body {
                Some(b) => b.push(ins),
                None => top.push(ins),
            };
            if line == "COND {" {
                if body.is_some() {
                    return Err(SequencerError::Malformed("nested conditional".into()));
                }
                body = Some(Vec::new());
            } else if line == "}" {
                let b = body.take().ok_or_else(|| bad(line))?;
                top.push(Instruction::Cond(b));
            } else if let Some(rest) = line.strip_prefix("WAIT ") {
                let t = rest.trim().parse().map_err(|_| bad(line))?;
                target(&mut body, &mut top, Instruction::Wait(t));
            } else if let Some(rest) = line.strip_prefix("MEASURE ") {
                target(&mut body, &mut top, Instruction::Measure(rest.trim().to_string()));
            } else if let Some(rest) = line.strip_prefix("PULSE ") {
                let mut parts = rest.split_whitespace();
                let transition = parts.next().and_then(Transition::from_name).ok_or_else(|| bad(line))?;
                let mut fields = [None; 4];
                for kv in parts {
                    let (k, v) = kv.split_once('=').ok_or_else(|| bad(line))?;
                    let v: f64 = v.parse().map_err(|_| bad(line))?;
                    let slot = match k {
                        "theta" => 0,
                        "phi" => 1,
                        "dur" => 2,
                        "delta" => 3,
                        _ => return Err(bad(line)),
                    };
                    fields[slot] = Some(v);
                }
                let (Some(theta), Some(phi), Some(duration)) = (fields[0], fields[1], fields[2]) else {
                    return Err(bad(line));
                };
                target(
                    &mut body,
                    &mut top,
                    Instruction::Pulse(Pulse { transition, theta, phi, duration, detuning: fields[3] }),
                );
            } else {
                return Err(bad(line));
            }
        }
        if body.is_some() {
            return Err(SequencerError::Malformed("unterminated conditional".into()));
        }
        let prog = PulseProgram { instructions: top };
        prog.validate()?;
        Ok(prog)
    }
}

impl fmt::Display for PulseProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump())
    }
}

/// What the compiler assumes about light shifts when it corrects phases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StarkCalibration {
    pub enabled: bool,
    /// Assumed detuning-independent shift, rad/s.
    pub delta0: f64,
    /// Also book Delta0 during carrier pulses.
    pub include_carrier: bool,
}

impl StarkCalibration {
    pub fn disabled() -> Self {
        Self { enabled: false, delta0: 0.0, include_carrier: false }
    }

    /// Calibration that assumes the true light shift of `p`.
    pub fn matched(p: &TrapLaserParams) -> Self {
        Self { enabled: true, delta0: p.delta0, include_carrier: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExecMode {
    Idealized,
    Physical,
}

impl ExecMode {
    pub fn name(self) -> &'static str {
        match self {
            ExecMode::Idealized => "idealized",
            ExecMode::Physical => "physical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompileContext {
    pub params: TrapLaserParams,
    pub calibration: StarkCalibration,
}

impl CompileContext {
    pub fn new(params: TrapLaserParams, calibration: StarkCalibration) -> Self {
        Self { params, calibration }
    }

    /// Idealized programs carry nominal phases; physical ones are Stark corrected.
    pub fn for_mode(params: TrapLaserParams, mode: ExecMode) -> Self {
        let calibration = match mode {
            ExecMode::Idealized => StarkCalibration::disabled(),
            ExecMode::Physical => StarkCalibration::matched(&params),
        };
        Self { params, calibration }
    }

    pub fn rate(&self, transition: Transition) -> f64 {
        match transition {
            Transition::Carrier => self.params.rabi,
            Transition::BlueSideband | Transition::RedSideband => self.params.sideband_rabi(),
        }
    }

    /// Light shift the ledger books for a resonant pulse on `transition`.
    pub fn gate_shift(&self, transition: Transition) -> f64 {
        let cal = &self.calibration;
        if !cal.enabled {
            return 0.0;
        }
        let p = &self.params;
        match transition {
            Transition::Carrier => {
                if cal.include_carrier {
                    cal.delta0
                } else {
                    0.0
                }
            }
            Transition::BlueSideband => {
                stark_delta(resonant_detuning(p, Transition::BlueSideband), p.rabi, cal.delta0)
            }
            Transition::RedSideband => {
                signed_dependent_shift(resonant_detuning(p, Transition::RedSideband), p.rabi) + cal.delta0
            }
        }
    }
}

/// Compiles one pulse of positive angle `theta` at nominal phase `phi`.
fn compile_pulse(
    transition: Transition,
    theta: f64,
    phi: f64,
    ctx: &CompileContext,
    ledger: &mut StarkLedger,
) -> Result<Pulse, SequencerError> {
    let rate = ctx.rate(transition);
    if !(rate > 0.0) {
        return Err(SequencerError::ZeroRabiRate(transition));
    }
    let duration = theta / rate;
    let shift = ctx.gate_shift(transition);
    let corrected = match transition {
        Transition::Carrier => ledger.fixed_frame_gate_phase(phi, shift, duration),
        _ => ledger.nth_gate_phase(phi, shift, duration),
    };
    Ok(Pulse { transition, theta, phi: normalize_phase(corrected), duration, detuning: None })
}

/// Instructions realizing a named rotation; advances `ledger`.
pub fn compile_rotation(
    rot: &Rotation,
    ctx: &CompileContext,
    ledger: &mut StarkLedger,
) -> Result<Vec<Instruction>, SequencerError> {
    if rot.theta == 0.0 {
        return Ok(Vec::new());
    }
    let (theta, phi) = rot.pulse_angle_phase();
    Ok(vec![Instruction::Pulse(compile_pulse(rot.axis.transition(), theta, phi, ctx, ledger)?)])
}

/// Incremental compiler holding the Stark ledger across a whole program.
#[derive(Debug, Clone)]
pub struct ProgramBuilder {
    ctx: CompileContext,
    ledger: StarkLedger,
    top: Vec<Instruction>,
    body: Option<Vec<Instruction>>,
}

impl ProgramBuilder {
    pub fn new(ctx: CompileContext) -> Self {
        Self::with_ledger(ctx, StarkLedger::default())
    }

    pub fn with_ledger(ctx: CompileContext, ledger: StarkLedger) -> Self {
        Self { ctx, ledger, top: Vec::new(), body: None }
    }

    pub fn ledger(&self) -> &StarkLedger {
        &self.ledger
    }

    pub fn context(&self) -> &CompileContext {
        &self.ctx
    }

    fn push(&mut self, ins: Instruction) {
        match &mut self.body {
            Some(b) => b.push(ins),
            None => self.top.push(ins),
        }
    }

    pub fn rotation(&mut self, rot: &Rotation) -> Result<&mut Self, SequencerError> {
        for ins in compile_rotation(rot, &self.ctx, &mut self.ledger)? {
            self.push(ins);
        }
        Ok(self)
    }

    /// Operation string in written order: the rightmost rotation is emitted first.
    pub fn ops(&mut self, ops: &[Rotation]) -> Result<&mut Self, SequencerError> {
        for r in ops.iter().rev() {
            self.rotation(r)?;
        }
        Ok(self)
    }

    /// Resonant pulse of angle `theta` >= 0 at nominal phase `phi`.
    pub fn pulse(&mut self, transition: Transition, theta: f64, phi: f64) -> Result<&mut Self, SequencerError> {
        let p = compile_pulse(transition, theta, phi, &self.ctx, &mut self.ledger)?;
        self.push(Instruction::Pulse(p));
        Ok(self)
    }

    /// Pulse at an explicit laser detuning; it advances time but books no shift.
    pub fn detuned_pulse(&mut self, transition: Transition, detuning: f64, duration: f64, phi: f64) -> &mut Self {
        let t0 = self.ledger.global_time;
        let corrected = self.ledger.nth_gate_phase(phi, 0.0, duration);
        debug_assert!(self.ledger.global_time >= t0);
        let theta = self.ctx.rate(transition) * duration;
        self.push(Instruction::Pulse(Pulse {
            transition,
            theta,
            phi: normalize_phase(corrected),
            duration,
            detuning: Some(detuning),
        }));
        self
    }

    pub fn wait(&mut self, t: f64) -> &mut Self {
        self.ledger.wait(t);
        self.push(Instruction::Wait(t));
        self
    }

    pub fn measure(&mut self, label: &str) -> &mut Self {
        self.push(Instruction::Measure(label.to_string()));
        self
    }

    pub fn begin_cond(&mut self) -> &mut Self {
        self.body = Some(Vec::new());
        self
    }

    pub fn end_cond(&mut self) -> &mut Self {
        if let Some(b) = self.body.take() {
            self.top.push(Instruction::Cond(b));
        }
        self
    }

    pub fn finish(self) -> Result<PulseProgram, SequencerError> {
        self.finish_with_ledger().map(|(p, _)| p)
    }

    pub fn finish_with_ledger(mut self) -> Result<(PulseProgram, StarkLedger), SequencerError> {
        self.end_cond();
        let prog = PulseProgram { instructions: self.top };
        prog.validate()?;
        Ok((prog, self.ledger))
    }
}

/// Operation strings for the 16 input states, written order.
pub const PREP_TABLE: [&str; 16] = [
    "Ry(-pi)",
    "Rx+(-pi)",
    "I",
    "Ry(pi) Rx+(pi)",
    "Rx+(pi) Ry(-pi/2)",
    "Ry+(-pi) Ry(-pi/2)",
    "Ry(-pi/2)",
    "Rx(pi/2)",
    "Ry(-pi) Rx+(-pi/2)",
    "Ry(-pi) Ry+(pi/2)",
    "Rx+(pi/2)",
    "Ry+(pi/2)",
    "Ry(pi/2) Rx+(pi)",
    "Rx(-pi/2) Rx+(-pi)",
    "Ry(-pi) Rx+(-pi) Ry(pi/2)",
    "Ry(-pi) Ry+(pi) Ry(pi/2)",
];

pub fn prep_operations(i: usize) -> Result<Vec<Rotation>, SequencerError> {
    if !(1..=16).contains(&i) {
        return Err(SequencerError::IndexOutOfRange(i));
    }
    Ok(parse_ops(PREP_TABLE[i - 1]).expect("table entries parse"))
}

/// Target state of input `i` in the order (D0, D1, S0, S1).
pub fn table_state(i: usize) -> Result<State4, SequencerError> {
    let (a, b, phase) = match i {
        1 => (0, 0, None),
        2 => (1, 1, None),
        3 => (2, 2, None),
        4 => (3, 3, None),
        5 => (0, 1, Some(c(1.0, 0.0))),
        6 => (0, 1, Some(c(0.0, 1.0))),
        7 => (0, 2, Some(c(1.0, 0.0))),
        8 => (0, 2, Some(c(0.0, 1.0))),
        9 => (0, 3, Some(c(1.0, 0.0))),
        10 => (0, 3, Some(c(0.0, 1.0))),
        11 => (1, 2, Some(c(1.0, 0.0))),
        12 => (1, 2, Some(c(0.0, 1.0))),
        13 => (1, 3, Some(c(1.0, 0.0))),
        14 => (1, 3, Some(c(0.0, 1.0))),
        15 => (2, 3, Some(c(1.0, 0.0))),
        16 => (2, 3, Some(c(0.0, 1.0))),
        _ => return Err(SequencerError::IndexOutOfRange(i)),
    };
    let mut v = State4::zeros();
    match phase {
        None => v[a] = c(1.0, 0.0),
        Some(p) => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            v[a] = c(s, 0.0);
            v[b] = p * s;
        }
    }
    Ok(v)
}

pub fn prep_sequence(i: usize, ctx: &CompileContext) -> Result<PulseProgram, SequencerError> {
    let ops = prep_operations(i)?;
    let mut b = ProgramBuilder::new(*ctx);
    b.ops(&ops)?;
    b.finish()
}

/// Composite CNOT: carrier pi/2, sideband phase gate with sqrt2-scaled angles, carrier pi/2.
pub fn cnot_operations() -> Vec<Rotation> {
    let r = PI / 2f64.sqrt();
    vec![
        Rotation::new(Axis::Y, PI / 2.0),
        Rotation::new(Axis::XPlus, PI),
        Rotation::new(Axis::YPlus, -r),
        Rotation::new(Axis::XPlus, PI),
        Rotation::new(Axis::YPlus, -r),
        Rotation::new(Axis::Y, PI / 2.0),
    ]
}

pub fn cnot_sequence(ctx: &CompileContext) -> Result<PulseProgram, SequencerError> {
    let mut b = ProgramBuilder::new(*ctx);
    b.ops(&cnot_operations())?;
    b.finish()
}

/// Gate matrix in interleaved order, indexed (D0, S0, D1, S1).
pub fn cnot_target_interleaved() -> Op4 {
    let z = c(0.0, 0.0);
    let one = c(1.0, 0.0);
    Op4::new(one, z, z, z, z, -one, z, z, z, z, z, one, z, z, -one, z)
}

/// Interleaved index of each internal basis state (D0, D1, S0, S1).
pub const INTERLEAVED_INDEX: [usize; 4] = [0, 2, 1, 3];

/// Target unitary in internal order (D0, D1, S0, S1).
pub fn cnot_target() -> Op4 {
    let p = cnot_target_interleaved();
    Op4::from_fn(|a, b| p[(INTERLEAVED_INDEX[a], INTERLEAVED_INDEX[b])])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateKind {
    Identity,
    Cnot,
    CnotTwice,
}

impl GateKind {
    pub fn name(self) -> &'static str {
        match self {
            GateKind::Identity => "identity",
            GateKind::Cnot => "cnot",
            GateKind::CnotTwice => "cnotx2",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(GateKind::Identity),
            "cnot" => Some(GateKind::Cnot),
            "cnotx2" => Some(GateKind::CnotTwice),
            _ => None,
        }
    }

    pub fn count(self) -> usize {
        match self {
            GateKind::Identity => 0,
            GateKind::Cnot => 1,
            GateKind::CnotTwice => 2,
        }
    }

    pub fn operations(self) -> Vec<Rotation> {
        let mut ops = Vec::new();
        for _ in 0..self.count() {
            ops.extend(cnot_operations());
        }
        ops
    }

    pub fn target(self) -> Op4 {
        let u = cnot_target();
        (0..self.count()).fold(Op4::identity(), |acc, _| u * acc)
    }
}

/// Noise seen by one pulse: laser frequency offset and accumulated laser phase at
/// the pulse start, and the field amplitude factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseNoise {
    pub freq_offset: f64,
    pub phase_offset: f64,
    pub intensity: f64,
}

impl PulseNoise {
    pub const NONE: PulseNoise = PulseNoise { freq_offset: 0.0, phase_offset: 0.0, intensity: 1.0 };
}

pub trait NoiseSource: Sync {
    /// Noise for a pulse starting at `t0` (s) lasting `duration`.
    fn pulse_noise(&self, t0: f64, duration: f64) -> PulseNoise;
}

/// Single-pulse propagator in the QC frame.
pub fn pulse_propagator(
    pulse: &Pulse,
    t0: f64,
    mode: ExecMode,
    params: &TrapLaserParams,
    noise: PulseNoise,
) -> Result<Operator, SequencerError> {
    if pulse.duration == 0.0 {
        return Ok(Operator::identity());
    }
    let d = noise.freq_offset;
    let phi = pulse.phi - noise.phase_offset + d * t0;
    match mode {
        ExecMode::Idealized => {
            if pulse.detuning.is_some() {
                return Err(SequencerError::Malformed("detuned pulse needs physical mode".into()));
            }
            let rate = pulse.theta / pulse.duration * noise.intensity;
            Ok(ideal_gate_propagator(pulse.transition, rate, phi, d, pulse.duration, t0)?)
        }
        ExecMode::Physical => {
            let delta = pulse.detuning.unwrap_or_else(|| resonant_detuning(params, pulse.transition)) + d;
            let p = params.with_intensity_factor(noise.intensity);
            let q = PulseParams { delta, phi, t: pulse.duration, t0 };
            Ok(gate_propagator(&p, &q)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    pub label: String,
    /// Exact mode: joint probability of reaching this measurement and seeing light.
    /// Shot mode: conditional probability at the time of sampling.
    pub probability: f64,
    /// Sampled outcome (true = fluorescence); `None` in exact mode.
    pub outcome: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: DensityMatrix,
    pub records: Vec<MeasurementRecord>,
    pub end_time: f64,
}

pub enum Readout<'r> {
    Exact,
    Sampled(&'r mut dyn RngCore),
}

/// Runs programs against the simulator.
#[derive(Clone, Copy)]
pub struct Executor<'a> {
    pub mode: ExecMode,
    pub params: TrapLaserParams,
    pub noise: Option<&'a dyn NoiseSource>,
}

impl<'a> Executor<'a> {
    pub fn new(mode: ExecMode, params: TrapLaserParams) -> Self {
        Self { mode, params, noise: None }
    }

    pub fn with_noise(mut self, noise: &'a dyn NoiseSource) -> Self {
        self.noise = Some(noise);
        self
    }

    fn apply_pulse(&self, rho: &DensityMatrix, p: &Pulse, t0: f64) -> Result<DensityMatrix, SequencerError> {
        let noise = self.noise.map_or(PulseNoise::NONE, |n| n.pulse_noise(t0, p.duration));
        let u = pulse_propagator(p, t0, self.mode, &self.params, noise)?;
        Ok(u * rho * u.adjoint())
    }

    /// Runs `prog` from `initial`, with the program clock starting at `start`.
    pub fn run(
        &self,
        prog: &PulseProgram,
        initial: &DensityMatrix,
        start: f64,
        readout: &mut Readout<'_>,
    ) -> Result<RunOutcome, SequencerError> {
        prog.validate()?;
        let mut records = Vec::new();
        let (state, end_time) = self.run_list(&prog.instructions, *initial, start, readout, &mut records)?;
        Ok(RunOutcome { state, records, end_time })
    }

    fn run_list(
        &self,
        list: &[Instruction],
        mut rho: DensityMatrix,
        mut t: f64,
        readout: &mut Readout<'_>,
        records: &mut Vec<MeasurementRecord>,
    ) -> Result<(DensityMatrix, f64), SequencerError> {
        let ps = proj_s();
        let pd = proj_d();
        // dark arm of the last measurement (exact) or whether it was dark (shots)
        let mut dark_arm: Option<DensityMatrix> = None;
        let mut last_dark = false;
        for ins in list {
            match ins {
                Instruction::Pulse(p) => {
                    rho = self.apply_pulse(&rho, p, t)?;
                    t += p.duration;
                }
                Instruction::Wait(w) => t += w,
                Instruction::Measure(label) => {
                    let bright = ps * rho * ps;
                    let dark = pd * rho * pd;
                    match readout {
                        Readout::Exact => {
                            records.push(MeasurementRecord {
                                label: label.clone(),
                                probability: bright.trace().re,
                                outcome: None,
                            });
                            rho = bright + dark;
                            dark_arm = Some(dark);
                        }
                        Readout::Sampled(rng) => {
                            let total = rho.trace().re;
                            let p = (bright.trace().re / total).clamp(0.0, 1.0);
                            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                            let lit = u < p;
                            records.push(MeasurementRecord {
                                label: label.clone(),
                                probability: p,
                                outcome: Some(lit),
                            });
                            let kept = if lit { bright } else { dark };
                            let norm = kept.trace().re;
                            rho = kept * c(1.0 / norm, 0.0);
                            last_dark = !lit;
                        }
                    }
                }
                Instruction::Cond(body) => match readout {
                    Readout::Exact => {
                        let dark = dark_arm.take().ok_or_else(|| {
                            SequencerError::Malformed("conditional without measurement".into())
                        })?;
                        let bright = rho - dark;
                        let (after, t_end) = self.run_list(body, dark, t, readout, records)?;
                        rho = bright + after;
                        t = t_end;
                    }
                    Readout::Sampled(_) => {
                        if last_dark {
                            let (after, t_end) = self.run_list(body, rho, t, readout, records)?;
                            rho = after;
                            t = t_end;
                        }
                    }
                },
            }
        }
        Ok((rho, t))
    }
}

/// Runs a program from t = 0. `rng = None` selects exact-probability readout.
pub fn run_program(
    prog: &PulseProgram,
    initial: &DensityMatrix,
    mode: ExecMode,
    params: &TrapLaserParams,
    noise: Option<&dyn NoiseSource>,
    rng: Option<&mut dyn RngCore>,
) -> Result<RunOutcome, SequencerError> {
    let mut exec = Executor::new(mode, *params);
    exec.noise = noise;
    let mut readout = match rng {
        Some(r) => Readout::Sampled(r),
        None => Readout::Exact,
    };
    exec.run(prog, initial, 0.0, &mut readout)
}

/// U_phi(alpha) = diag(e^{i alpha}, 1) (x) I_3: phase on the D manifold.
pub fn d_phase(alpha: f64) -> Operator {
    let mut u = Operator::identity();
    let ph = C64::from_polar(1.0, alpha);
    for i in 0..3 {
        u[(i, i)] = ph;
    }
    u
}

/// Propagator of a measurement-free program.
pub fn program_unitary(
    prog: &PulseProgram,
    mode: ExecMode,
    params: &TrapLaserParams,
) -> Result<Operator, SequencerError> {
    let mut u = Operator::identity();
    let mut t = 0.0;
    for ins in &prog.instructions {
        match ins {
            Instruction::Pulse(p) => {
                u = pulse_propagator(p, t, mode, params, PulseNoise::NONE)? * u;
                t += p.duration;
            }
            Instruction::Wait(w) => t += w,
            _ => return Err(SequencerError::Malformed("measurement in unitary program".into())),
        }
    }
    Ok(u)
}

/// Initial state |S0><S0|.
pub fn ground_state() -> DensityMatrix {
    let psi = embed_state(&State4::new(c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)));
    psi * psi.adjoint()
}
