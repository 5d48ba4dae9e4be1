//! Laser-frame Hamiltonians and the frame-switching gate propagator.
//!
//! A pulse is time independent in the frame rotating with the laser. The
//! propagator in the qubit-computer (QC) frame, where computational states are
//! stationary, is obtained by sandwiching exp(-i V_L t) between the frame
//! transforms at the pulse start and end.

use std::f64::consts::PI;

use crate::qlinalg::{
    c, expm_hermitian, expm_hermitian_general, kron, spin, LinalgError, Op2, Op3, Operator, C64,
};

/// Trap and laser constants, all angular frequencies in rad/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrapLaserParams {
    pub omega_sec: f64,
    pub eta: f64,
    /// Carrier Rabi frequency.
    pub rabi: f64,
    /// Detuning-independent light shift from far-off-resonant levels.
    pub delta0: f64,
}

impl TrapLaserParams {
    pub fn reference() -> Self {
        Self {
            omega_sec: 2.0 * PI * 1.32e6,
            eta: 0.0616,
            rabi: 2.0 * PI * 125e3,
            delta0: 2.0 * PI * 500.0,
        }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if !(self.omega_sec > 0.0) {
            return Err(ParamError::Invalid("omega_sec must be positive"));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(ParamError::Invalid("eta must lie in (0, 1)"));
        }
        if !(self.rabi >= 0.0) {
            return Err(ParamError::Invalid("Rabi frequency must be non-negative"));
        }
        if !self.delta0.is_finite() {
            return Err(ParamError::Invalid("delta0 must be finite"));
        }
        Ok(())
    }

    /// Rabi frequency on the {S0, D1} sideband manifold.
    pub fn sideband_rabi(&self) -> f64 {
        self.eta * self.rabi
    }

    /// Field amplitude scaled by `factor`: Rabi frequency linear, light shift quadratic.
    pub fn with_intensity_factor(&self, factor: f64) -> Self {
        Self { rabi: self.rabi * factor, delta0: self.delta0 * factor * factor, ..*self }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("invalid parameter: {0}")]
    Invalid(&'static str),
}

/// One square laser pulse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseParams {
    /// Laser detuning from the carrier, rad/s.
    pub delta: f64,
    pub phi: f64,
    /// Duration, s.
    pub t: f64,
    /// Start time, s.
    pub t0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transition {
    Carrier,
    BlueSideband,
    RedSideband,
}

impl Transition {
    pub fn name(self) -> &'static str {
        match self {
            Transition::Carrier => "carrier",
            Transition::BlueSideband => "bsb",
            Transition::RedSideband => "rsb",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "carrier" => Some(Transition::Carrier),
            "bsb" | "blue_sideband" => Some(Transition::BlueSideband),
            "rsb" | "red_sideband" => Some(Transition::RedSideband),
            _ => None,
        }
    }
}

/// E(eta) = exp(i eta (a + a^dag)) on the truncated motional space.
pub fn displacement(eta: f64) -> Op3 {
    let x = spin::annihilation() + spin::creation();
    // exp(-i H t) with H = -eta x and t = 1
    expm_hermitian_general(&(x * c(-eta, 0.0)), 1.0).expect("real symmetric generator")
}

/// V_L = -delta sz + w N + (Omega/2)[e^{i phi} s+ E + h.c.] + Delta0 sz.
pub fn laser_frame_hamiltonian(p: &TrapLaserParams, q: &PulseParams) -> Operator {
    let id3 = Op3::identity();
    let sz = kron(&spin::sigma_z(), &id3);
    let n = kron(&Op2::identity(), &spin::number());
    let e = displacement(p.eta);
    let up = kron(&spin::sigma_plus(), &e) * C64::from_polar(0.5 * p.rabi, q.phi);
    sz * c(p.delta0 - q.delta, 0.0) + n * c(p.omega_sec, 0.0) + up + up.adjoint()
}

/// U_LQC(t) = exp(-i delta sz t) exp(+i w N t), diagonal.
pub fn frame_transform_ulqc(p: &TrapLaserParams, q: &PulseParams, t: f64) -> Operator {
    let mut u = Operator::zeros();
    for a in 0..2 {
        let sz = if a == 0 { 0.5 } else { -0.5 };
        for n in 0..3 {
            let i = 3 * a + n;
            u[(i, i)] = C64::from_polar(1.0, -q.delta * sz * t + p.omega_sec * n as f64 * t);
        }
    }
    u
}

/// QC-frame propagator U_LQC(t + t0) exp(-i V_L t) U_LQC(t0)^dag.
pub fn gate_propagator(p: &TrapLaserParams, q: &PulseParams) -> Result<Operator, LinalgError> {
    let v = laser_frame_hamiltonian(p, q);
    let inner = expm_hermitian(&v, q.t)?;
    let after = frame_transform_ulqc(p, q, q.t + q.t0);
    let before = frame_transform_ulqc(p, q, q.t0);
    Ok(diag_mul_left(&after, &mul_diag_right(&inner, &before.adjoint())))
}

fn diag_mul_left(d: &Operator, m: &Operator) -> Operator {
    let mut out = *m;
    for i in 0..6 {
        let s = d[(i, i)];
        for j in 0..6 {
            out[(i, j)] *= s;
        }
    }
    out
}

fn mul_diag_right(m: &Operator, d: &Operator) -> Operator {
    let mut out = *m;
    for j in 0..6 {
        let s = d[(j, j)];
        for i in 0..6 {
            out[(i, j)] *= s;
        }
    }
    out
}

/// Idealized generator for unit Rabi rate:
/// carrier (e^{i phi} s+ + h.c.)/2, sidebands (i e^{i phi} s+ a^dag + h.c.)/2 (blue)
/// and the same with a (red).
pub fn coupling_operator(transition: Transition, phi: f64) -> Operator {
    let ph = C64::from_polar(0.5, phi);
    let up = match transition {
        Transition::Carrier => kron(&spin::sigma_plus(), &Op3::identity()) * ph,
        Transition::BlueSideband => kron(&spin::sigma_plus(), &spin::creation()) * (ph * c(0.0, 1.0)),
        Transition::RedSideband => kron(&spin::sigma_plus(), &spin::annihilation()) * (ph * c(0.0, 1.0)),
    };
    up + up.adjoint()
}

/// Exact rotation on `transition` with laser frequency offset `offset`, in the QC frame.
///
/// With zero offset this is exp(-i theta G(phi)) with theta = rate * t.
pub fn ideal_gate_propagator(
    transition: Transition,
    rate: f64,
    phi: f64,
    offset: f64,
    t: f64,
    t0: f64,
) -> Result<Operator, LinalgError> {
    let sz = kron(&spin::sigma_z(), &Op3::identity());
    let h = coupling_operator(transition, phi) * c(rate, 0.0) - sz * c(offset, 0.0);
    let inner = expm_hermitian(&h, t)?;
    if offset == 0.0 {
        return Ok(inner);
    }
    let frame = |tt: f64| {
        let mut u = Operator::zeros();
        for i in 0..6 {
            let s = if i < 3 { 0.5 } else { -0.5 };
            u[(i, i)] = C64::from_polar(1.0, -offset * s * tt);
        }
        u
    };
    Ok(diag_mul_left(&frame(t + t0), &mul_diag_right(&inner, &frame(t0).adjoint())))
}
