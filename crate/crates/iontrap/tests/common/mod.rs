//! Independent oracles shared by integration tests.
#![allow(dead_code)]

use iontrap::frames::{displacement, PulseParams, TrapLaserParams};
use iontrap::qlinalg::{Operator, C64};

type M6 = [[C64; 6]; 6];

fn zero() -> M6 {
    [[C64::new(0.0, 0.0); 6]; 6]
}

/// Interaction-picture Hamiltonian of the rotating-wave lab-frame model
/// H0 = w0 sz + w N + (Omega/2)(e^{i(phi - wL t)} s+ E + h.c.) + Delta0 sz,
/// taken with respect to w0 sz + w N.
struct QcHamiltonian {
    e: [[C64; 3]; 3],
    rabi: f64,
    omega_sec: f64,
    delta0: f64,
    delta: f64,
    phi: f64,
}

impl QcHamiltonian {
    fn new(p: &TrapLaserParams, q: &PulseParams) -> Self {
        let d = displacement(p.eta);
        let mut e = [[C64::new(0.0, 0.0); 3]; 3];
        for (m, row) in e.iter_mut().enumerate() {
            for (n, v) in row.iter_mut().enumerate() {
                *v = d[(m, n)];
            }
        }
        Self { e, rabi: p.rabi, omega_sec: p.omega_sec, delta0: p.delta0, delta: q.delta, phi: q.phi }
    }

    fn at(&self, t: f64) -> M6 {
        let mut h = zero();
        let drive = C64::from_polar(0.5 * self.rabi, self.phi - self.delta * t);
        for m in 0..3 {
            for n in 0..3 {
                let rot = C64::from_polar(1.0, self.omega_sec * (m as f64 - n as f64) * t);
                // s+ = |D><S|: row D (0..3), column S (3..6)
                let v = drive * self.e[m][n] * rot;
                h[m][3 + n] = v;
                h[3 + n][m] = v.conj();
            }
        }
        for i in 0..3 {
            h[i][i] += C64::new(0.5 * self.delta0, 0.0);
            h[3 + i][3 + i] -= C64::new(0.5 * self.delta0, 0.0);
        }
        h
    }
}

/// -i H U
fn deriv(h: &M6, u: &M6) -> M6 {
    let mut out = zero();
    for i in 0..6 {
        for j in 0..6 {
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..6 {
                acc += h[i][k] * u[k][j];
            }
            out[i][j] = C64::new(acc.im, -acc.re);
        }
    }
    out
}

fn axpy(u: &M6, k: &M6, s: f64) -> M6 {
    let mut out = *u;
    for i in 0..6 {
        for j in 0..6 {
            out[i][j] += k[i][j] * s;
        }
    }
    out
}

/// QC-frame propagator from t0 to t0 + t by classical RK4 with at most `max_step` seconds per step.
pub fn integrate_qc_propagator(p: &TrapLaserParams, q: &PulseParams, max_step: f64) -> Operator {
    let h = QcHamiltonian::new(p, q);
    let steps = (q.t / max_step).ceil().max(1.0) as usize;
    let dt = q.t / steps as f64;
    let mut u = zero();
    for (i, row) in u.iter_mut().enumerate() {
        row[i] = C64::new(1.0, 0.0);
    }
    for s in 0..steps {
        let t = q.t0 + s as f64 * dt;
        let h0 = h.at(t);
        let hm = h.at(t + 0.5 * dt);
        let h1 = h.at(t + dt);
        let k1 = deriv(&h0, &u);
        let k2 = deriv(&hm, &axpy(&u, &k1, 0.5 * dt));
        let k3 = deriv(&hm, &axpy(&u, &k2, 0.5 * dt));
        let k4 = deriv(&h1, &axpy(&u, &k3, dt));
        for i in 0..6 {
            for j in 0..6 {
                u[i][j] += (k1[i][j] + (k2[i][j] + k3[i][j]) * 2.0 + k4[i][j]) * (dt / 6.0);
            }
        }
    }
    Operator::from_fn(|i, j| u[i][j])
}
