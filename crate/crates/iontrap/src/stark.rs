//! AC Stark shifts and the phase bookkeeping that compensates them.
//!
//! A detuned drive shifts the qubit by `delta - sqrt(delta^2 + Omega^2)` plus a
//! constant `Delta0` from far-off-resonant levels. In the frame of the driven
//! transition this is a Z rotation, so it can be undone for free by advancing the
//! phase of every later pulse. The ledger below keeps the registers needed for that.

use nalgebra::Vector3;

use crate::frames::{TrapLaserParams, Transition};
use crate::qlinalg::{c, expm_hermitian_general, spin, Op2, C64};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum StarkError {
    #[error("rotation axis undefined for zero detuning")]
    ZeroDetuning,
}

/// Global time and accumulated Stark phase, mirroring the sequencer registers.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StarkLedger {
    pub global_time: f64,
    pub global_phase: f64,
}

impl StarkLedger {
    /// Corrected laser phase for the next gate, which starts at `global_time`,
    /// has nominal phase `phi`, shift `shift` and duration `t`. Advances the registers.
    pub fn nth_gate_phase(&mut self, phi: f64, shift: f64, t: f64) -> f64 {
        let t0 = self.global_time;
        let corrected = phi + shift * t0 - self.global_phase;
        self.global_phase += shift * t;
        self.global_time += t;
        corrected
    }

    /// Gate whose laser sits on the unshifted line (carrier at zero detuning):
    /// it sees previous Stark phases and accrues its own, but its laser frame
    /// does not drift, so there is no start-time term.
    pub fn fixed_frame_gate_phase(&mut self, phi: f64, shift: f64, t: f64) -> f64 {
        let corrected = phi - self.global_phase;
        self.global_phase += shift * t;
        self.global_time += t;
        corrected
    }

    /// Drive-free interval: time advances, no phase accrues.
    pub fn wait(&mut self, t: f64) {
        self.global_time += t;
    }
}

/// Total Stark shift of a pulse at detuning `delta`.
pub fn stark_delta(delta: f64, rabi: f64, delta0: f64) -> f64 {
    delta - (delta * delta + rabi * rabi).sqrt() + delta0
}

/// Detuning-dependent part with its sign following `delta`: the shift of a
/// two-level system driven at `delta`, toward the far side of the resonance.
pub fn signed_dependent_shift(delta: f64, rabi: f64) -> f64 {
    delta.signum() * (delta.abs() - (delta * delta + rabi * rabi).sqrt())
}

/// Laser detuning that drives `transition` on its light-shifted resonance.
pub fn resonant_detuning(p: &TrapLaserParams, transition: Transition) -> f64 {
    let r2 = p.rabi * p.rabi;
    match transition {
        Transition::Carrier => 0.0,
        Transition::BlueSideband => ((p.omega_sec + p.delta0).powi(2) - r2).max(0.0).sqrt(),
        Transition::RedSideband => -((p.omega_sec - p.delta0).powi(2) - r2).max(0.0).sqrt(),
    }
}

/// R = e^{i delta sz t} e^{-i(delta sz + Omega sx) t} and its decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedShift {
    pub r: Op2,
    /// Rotation axis of the driven factor.
    pub axis: Vector3<f64>,
    /// Scalar Z-rotation angle [delta - sqrt(delta^2 + Omega^2)] t.
    pub angle: f64,
}

pub fn generalized_shift_operator(delta: f64, rabi: f64, t: f64) -> Result<GeneralizedShift, StarkError> {
    if delta == 0.0 {
        return Err(StarkError::ZeroDetuning);
    }
    let sz = spin::sigma_z();
    let h = sz * c(delta, 0.0) + spin::sigma_x() * c(rabi, 0.0);
    let driven = expm_hermitian_general(&h, t).expect("real symmetric generator");
    let undo = Op2::from_diagonal(&nalgebra::Vector2::new(
        C64::from_polar(1.0, 0.5 * delta * t),
        C64::from_polar(1.0, -0.5 * delta * t),
    ));
    let ratio = rabi / delta;
    let axis = Vector3::new(ratio, 0.0, 1.0) / (1.0 + ratio * ratio).sqrt();
    Ok(GeneralizedShift { r: undo * driven, axis, angle: (delta - (delta * delta + rabi * rabi).sqrt()) * t })
}

/// (phi_s, phi_f) for one sideband gate: the Z correction after the gate and the
/// laser phase offset for a gate starting at `t0`.
pub fn corrections_for_sideband_gate(delta: f64, rabi: f64, delta0: f64, t: f64, t0: f64) -> (f64, f64) {
    let _ = delta0;
    let dependent = delta - (delta * delta + rabi * rabi).sqrt();
    (-dependent * t, dependent * t0)
}
