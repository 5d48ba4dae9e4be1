//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `cargo test -p iontrap-validation --test acceptance [-- 3 7]` runs all criteria or
//! only the listed ones. The process exits non-zero if any selected criterion fails.

#[path = "../../iontrap/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::Instant;

use iontrap::frames::{gate_propagator, PulseParams, TrapLaserParams};
use iontrap::noiselab::{
    fit_gate_fidelity, heating_budget, residual_stark_check, run_process_tomography, sideband_probabilities,
    sideband_ramsey_frequency, stark_scan, stark_trace, thermal_state, thermometry, NoiseModel, SimSetup,
};
use iontrap::qlinalg::{c, embed_state, kron2, leakage, min_eigenvalue, operator_norm, restrict, trace_distance, Op2, Op4, C64};
use iontrap::sequencer::{
    cnot_sequence, ground_state, prep_sequence, program_unitary, run_program, table_state, CompileContext, ExecMode,
    GateKind, StarkCalibration, INTERLEAVED_INDEX,
};
use iontrap::tomography::{
    chi_from_dataset, chi_ideal, chi_mle, mle_density, process_fidelity, ChiMethod, DesignMatrix, TomographyDataset,
    N_MEAS,
};
use iontrap_validation::{run_all, summary, Checks, Criterion, Verdict};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

const TWO_PI: f64 = 2.0 * PI;

fn params() -> TrapLaserParams {
    TrapLaserParams::reference()
}

fn physical() -> SimSetup {
    SimSetup::new(ExecMode::Physical, params())
}

fn grid(n: usize, step: f64) -> Vec<f64> {
    (0..n).map(|k| k as f64 * step).collect()
}

// ---------- random states and channels ----------

fn ginibre(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<C64> {
    DMatrix::from_fn(rows, cols, |_, _| c(rng.sample(StandardNormal), rng.sample(StandardNormal)))
}

fn random_density(rng: &mut ChaCha8Rng) -> Op4 {
    let g = ginibre(rng, 4, 4);
    let r = &g * g.adjoint();
    let tr = r.trace();
    Op4::from_fn(|i, j| r[(i, j)] / tr)
}

fn random_pure(rng: &mut ChaCha8Rng) -> Op4 {
    let g = ginibre(rng, 4, 1);
    let n = g.norm();
    Op4::from_fn(|i, j| g[(i, 0)] * g[(j, 0)].conj() / (n * n))
}

/// Kraus operators of a random channel: a Stinespring isometry of the given rank,
/// mixed with the identity channel at weight `1 - w`.
fn random_kraus(rng: &mut ChaCha8Rng, rank: usize, w: f64) -> Vec<Op4> {
    let v = ginibre(rng, 4 * rank, 4).qr().q();
    let mut ks: Vec<Op4> =
        (0..rank).map(|k| Op4::from_fn(|i, j| v[(4 * k + i, j)] * c(w.sqrt(), 0.0))).collect();
    ks.push(Op4::identity() * c((1.0 - w).sqrt(), 0.0));
    ks
}

fn apply_kraus(ks: &[Op4], rho: &Op4) -> Op4 {
    ks.iter().fold(Op4::zeros(), |acc, k| acc + k * rho * k.adjoint())
}

/// Entanglement fidelity with the identity from Kraus operators.
fn kraus_process_fidelity(ks: &[Op4]) -> f64 {
    ks.iter().map(|k| k.trace().norm_sqr()).sum::<f64>() / 16.0
}

/// The 20 states of a complete set of five mutually unbiased bases of two qubits, built
/// from maximal commuting sets of Pauli products. They form a state 2-design, so their
/// average of <psi|E(psi)> is exactly the Haar average.
fn mub_projectors() -> Vec<Op4> {
    let z = c(0.0, 0.0);
    let one = c(1.0, 0.0);
    let i = c(0.0, 1.0);
    let x = Op2::new(z, one, one, z);
    let y = Op2::new(z, -i, i, z);
    let zz = Op2::new(one, z, z, -one);
    let id = Op2::identity();
    let sets: [[(Op2, Op2); 2]; 5] = [
        [(zz, id), (id, zz)],
        [(x, id), (id, x)],
        [(y, id), (id, y)],
        [(x, y), (y, zz)],
        [(y, x), (zz, y)],
    ];
    let mut out = Vec::new();
    for [(a1, b1), (a2, b2)] in sets {
        let p1 = kron2(&a1, &b1);
        let p2 = kron2(&a2, &b2);
        assert!((p1 * p2 - p2 * p1).norm() < 1e-12, "Pauli products must commute");
        for s1 in [1.0, -1.0] {
            for s2 in [1.0, -1.0] {
                let proj = (Op4::identity() + p1 * c(s1, 0.0)) * (Op4::identity() + p2 * c(s2, 0.0)) * c(0.25, 0.0);
                assert!((proj * proj - proj).norm() < 1e-12 && (proj.trace().re - 1.0).abs() < 1e-12);
                out.push(proj);
            }
        }
    }
    out
}

// ---------- criteria ----------

fn convention_gate() -> Verdict {
    let start = Instant::now();
    let p = params();
    let ctx = CompileContext::for_mode(p, ExecMode::Idealized);
    let mut worst = (f64::INFINITY, 0usize);
    for row in 1..=16 {
        let prog = prep_sequence(row, &ctx).unwrap();
        let out = run_program(&prog, &ground_state(), ExecMode::Idealized, &p, None, None).unwrap();
        let psi = embed_state(&table_state(row).unwrap());
        let overlap = (psi.adjoint() * out.state * psi)[(0, 0)].re;
        if overlap < worst.0 {
            worst = (overlap, row);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut ch = Checks::new();
    ch.check(worst.0 > 1.0 - 1e-9, format!("16 rows, worst overlap 1 - {:.1e} (row {})", 1.0 - worst.0, worst.1))
        .check(secs < 1.0, format!("{secs:.3} s < 1 s"));
    ch.verdict()
}

fn cnot_correctness() -> Verdict {
    let p = params();
    let ctx = CompileContext::for_mode(p, ExecMode::Idealized);
    let u = program_unitary(&cnot_sequence(&ctx).unwrap(), ExecMode::Idealized, &p).unwrap();
    let block = restrict(&u);
    let mut interleaved = Op4::zeros();
    for a in 0..4 {
        for b in 0..4 {
            interleaved[(INTERLEAVED_INDEX[a], INTERLEAVED_INDEX[b])] = block[(a, b)];
        }
    }
    // rows and columns (D0, S0, D1, S1)
    let (z, one) = (c(0.0, 0.0), c(1.0, 0.0));
    let target = Op4::new(one, z, z, z, z, -one, z, z, z, z, z, one, z, z, -one, z);
    let ov = (target.adjoint() * interleaved).trace();
    let phase = ov / c(ov.norm(), 0.0);
    let err = operator_norm(&(interleaved - target * phase));
    let leak = leakage(&u);
    let mut ch = Checks::new();
    ch.check(err < 1e-6, format!("||U - e^(i a) U_target|| = {err:.1e} < 1e-6"))
        .check(leak < 1e-6, format!("leakage {leak:.1e} < 1e-6"));
    ch.verdict()
}

fn frame_oracle() -> Verdict {
    let start = Instant::now();
    let p = params();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let q = PulseParams {
            delta: rng.random_range(-1.5..1.5) * p.omega_sec,
            phi: rng.random_range(0.0..TWO_PI),
            t: rng.random_range(0.05e-6..1.5e-6),
            t0: rng.random_range(0.0..5e-4),
        };
        let u = gate_propagator(&p, &q).unwrap();
        let oracle = common::integrate_qc_propagator(&p, &q, 1e-12);
        worst = worst.max(operator_norm(&(u - oracle)));
    }
    let secs = start.elapsed().as_secs_f64();
    let mut ch = Checks::new();
    ch.check(worst < 1e-6, format!("20 tuples at 1 ps RK4 steps, max error {worst:.1e} < 1e-6"))
        .check(secs < 60.0, format!("{secs:.1} s < 60 s"));
    ch.verdict()
}

fn stark_end_to_end() -> Verdict {
    let p = params();
    let r = residual_stark_check(&physical(), &grid(11, 50e-6)).unwrap();
    let (offset, err) = r.param("offset_rad_s").unwrap();
    let raw = physical().with_calibration(StarkCalibration::disabled());
    let (w, _) = sideband_ramsey_frequency(&raw, &grid(11, 10e-6)).unwrap();
    // first-order light shift of the sideband: off-resonant carrier plus the constant part
    let delta = p.omega_sec;
    let expected = delta - (delta * delta + p.rabi * p.rabi).sqrt() + p.delta0;
    let ratio = w.abs() / expected.abs();
    let mut ch = Checks::new();
    ch.check(
        offset.abs() < TWO_PI * 30.0,
        format!("corrected residual {:.2} +- {:.2} Hz < 30 Hz", offset / TWO_PI, err / TWO_PI),
    )
    .check(
        (ratio - 1.0).abs() < 0.02,
        format!("uncorrected {:.1} Hz vs |Delta| {:.1} Hz (ratio {ratio:.4})", w.abs() / TWO_PI, expected.abs() / TWO_PI),
    );
    ch.verdict()
}

fn stark_scan_fit() -> Verdict {
    let p = params();
    let xs: Vec<f64> = (0..13).map(|k| 0.8 + 0.1 * k as f64).collect();
    let taus = grid(12, 20e-6);
    let (r, _) = stark_scan(&physical(), &xs, &taus, 230e-6).unwrap();
    let (b, db) = r.param("b").unwrap();
    let injected = -TWO_PI * 500.0;
    let near = stark_trace(&physical(), 1.05, &taus, 230e-6).unwrap();
    let rel = near.shift.abs() / (TWO_PI * 5.50e3) - 1.0;
    let mut ch = Checks::new();
    ch.note(format!("true b = -Delta0 = {:.1} Hz", -p.delta0 / TWO_PI))
        .check(
            (b - injected).abs() < 2.0 * db,
            format!("b = {:.1} +- {:.1} Hz within 2 sigma of -500 Hz", b / TWO_PI, db / TWO_PI),
        )
        .check(rel.abs() < 0.1, format!("shift at x=1.05 {:.0} Hz vs 5500 Hz ({:+.1}%)", near.shift.abs() / TWO_PI, 100.0 * rel));
    ch.verdict()
}

fn tomography_round_trip() -> Verdict {
    let d = DesignMatrix::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut state_err = 0.0f64;
    for _ in 0..50 {
        let rho = random_density(&mut rng);
        let m: Vec<f64> = d.expectations(&rho).iter().cloned().collect();
        state_err = state_err.max(trace_distance(&d.reconstruct_rho(&m[..N_MEAS]).rho, &rho));
    }
    let mut proc_err = 0.0f64;
    let mut chans = Vec::new();
    for k in 0..10 {
        let w = rng.random_range(0.05..1.0);
        let ks = random_kraus(&mut rng, 1 + k % 4, w);
        let data = TomographyDataset::from_channel(&d, |r| apply_kraus(&ks, r));
        let truth = kraus_process_fidelity(&ks);
        for method in [ChiMethod::Linear, ChiMethod::Mle] {
            let chi = chi_from_dataset(&d, &data, method).unwrap();
            proc_err = proc_err.max((process_fidelity(&chi, &chi_ideal(&Op4::identity())) - truth).abs());
        }
        chans.push(data);
    }
    let mut worst_eig = f64::INFINITY;
    let mut worst_trace = 0.0f64;
    for data in &chans {
        let chi = chi_mle(&d, &data.sample(1000, &mut rng)).unwrap();
        worst_eig = worst_eig.min(chi.min_eigenvalue());
        worst_trace = worst_trace.max((chi.chi.trace().re - 1.0).abs());
    }
    let shots = [1000u64; N_MEAS];
    for _ in 0..20 {
        let rho = random_pure(&mut rng);
        let m: Vec<f64> = d
            .expectations(&rho)
            .iter()
            .take(N_MEAS)
            .map(|p| Binomial::new(1000, p.clamp(0.0, 1.0)).unwrap().sample(&mut rng) as f64 / 1000.0)
            .collect();
        let est = mle_density(&d, &m, Some(&shots)).unwrap();
        worst_eig = worst_eig.min(min_eigenvalue(&est));
        worst_trace = worst_trace.max((est.trace().re - 1.0).abs());
    }
    let mut ch = Checks::new();
    ch.check(state_err < 1e-9, format!("state trace distance {state_err:.1e} < 1e-9"))
        .check(proc_err < 1e-6, format!("F_p error {proc_err:.1e} < 1e-6"))
        .check(worst_eig > -1e-9 && worst_trace < 1e-9, format!("1000-shot MLE min eigenvalue {worst_eig:.1e}, |tr - 1| {worst_trace:.0e}"));
    ch.verdict()
}

fn desk_scale_reproduction() -> Verdict {
    let start = Instant::now();
    let setup = physical().with_noise(NoiseModel { rng_seed: 1, ..NoiseModel::reference() }, 100);
    let mut fp = BTreeMap::new();
    for gate in [GateKind::Identity, GateKind::Cnot, GateKind::CnotTwice] {
        let (_, report) = run_process_tomography(&setup, gate, None, 1, ChiMethod::Mle).unwrap();
        fp.insert(gate.count(), report.process_fidelity);
    }
    let series: Vec<(usize, f64)> = fp.iter().map(|(k, v)| (*k, *v)).collect();
    let (fg, _) = fit_gate_fidelity(&series).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (id, cnot, twice) = (fp[&0], fp[&1], fp[&2]);
    let mut ch = Checks::new();
    ch.check((0.80..=0.90).contains(&cnot), format!("CNOT F_p {cnot:.4} in [0.80, 0.90]"))
        .check((0.85..=0.95).contains(&id), format!("identity F_p {id:.4} in [0.85, 0.95]"))
        .check(twice < cnot, format!("CNOT x2 F_p {twice:.4} < CNOT"))
        .check((0.92..=0.98).contains(&fg), format!("F_g {fg:.4} in [0.92, 0.98]"))
        .check(secs < 1800.0, format!("100 trajectories, exact probabilities, {secs:.0} s"));
    ch.verdict()
}

fn fidelity_relation() -> Verdict {
    let d = DesignMatrix::standard();
    let mubs = mub_projectors();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut range = (1.0f64, 0.0f64);
    for k in 0..20 {
        let w = rng.random_range(0.0..1.0);
        let ks = random_kraus(&mut rng, 1 + k % 4, w);
        let data = TomographyDataset::from_channel(&d, |r| apply_kraus(&ks, r));
        let chi = chi_from_dataset(&d, &data, ChiMethod::Mle).unwrap();
        let f_p = process_fidelity(&chi, &chi_ideal(&Op4::identity()));
        let haar = mubs.iter().map(|pi| (pi * apply_kraus(&ks, pi)).trace().re).sum::<f64>() / mubs.len() as f64;
        worst = worst.max((haar - (4.0 * f_p + 1.0) / 5.0).abs());
        range = (range.0.min(f_p), range.1.max(f_p));
    }
    let mut ch = Checks::new();
    ch.check(
        worst < 0.005,
        format!("20 channels (F_p {:.2}..{:.2}), max |F_haar - (4F_p+1)/5| = {worst:.1e} < 0.005", range.0, range.1),
    );
    ch.verdict()
}

fn heating_and_thermometry() -> Verdict {
    let rate = heating_budget(230e-6, 0.01).unwrap();
    let ideal = SimSetup::new(ExecMode::Idealized, params());
    let mut worst = 0.0f64;
    for nbar in [0.01, 0.02, 0.05, 0.1] {
        let (red, blue) = sideband_probabilities(&ideal, &thermal_state(nbar)).unwrap();
        worst = worst.max((thermometry(red, blue).unwrap() / nbar - 1.0).abs());
    }
    let mut ch = Checks::new();
    ch.check((40.0..=45.0).contains(&rate), format!("heating budget {rate:.2} quanta/s in [40, 45]"))
        .check(worst < 0.05, format!("thermometry at nbar <= 0.1 within {:.2}%", 100.0 * worst));
    ch.verdict()
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let commands: [&[&str]; 6] = [
        &["tomography", "cnot", "--shots", "500", "--trajectories", "10"],
        &["scan", "stark", "--trajectories", "4"],
        &["scan", "ramsey", "--trajectories", "20"],
        &["scan", "rabi", "--nbar", "0.05", "--trajectories", "20"],
        &["scan", "residual_stark", "--trajectories", "20"],
        &["errorbudget", "--trajectories", "50"],
    ];
    let mut ch = Checks::new();
    let mut files = 0;
    for (k, cmd) in commands.iter().enumerate() {
        let mut runs = Vec::new();
        for (r, threads) in [1usize, 3, 3].into_iter().enumerate() {
            let dir = tmp.path().join(format!("{k}_{r}"));
            let dir_s = dir.to_string_lossy().into_owned();
            let mut args = vec!["iontrap", "--quiet", "--seed", "5", "--out", dir_s.as_str()];
            args.extend_from_slice(cmd);
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| iontrap_cli::execute(&args)).unwrap();
            runs.push(read_tree(&dir));
        }
        files += runs[0].len();
        let same = !runs[0].is_empty() && runs[0] == runs[1] && runs[1] == runs[2];
        if !same {
            ch.check(false, format!("`{}` byte-identical", cmd.join(" ")));
        }
    }
    ch.check(files > 0, format!("{} commands, {files} files byte-identical across reruns and 1 vs 3 threads", commands.len()));
    ch.verdict()
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria = [
        Criterion { id: 1, title: "preparation convention", run: convention_gate },
        Criterion { id: 2, title: "CNOT propagator", run: cnot_correctness },
        Criterion { id: 3, title: "frame oracle", run: frame_oracle },
        Criterion { id: 4, title: "Stark correction end to end", run: stark_end_to_end },
        Criterion { id: 5, title: "Stark scan fit", run: stark_scan_fit },
        Criterion { id: 6, title: "tomography round trip", run: tomography_round_trip },
        Criterion { id: 7, title: "noisy gate fidelities at desk scale", run: desk_scale_reproduction },
        Criterion { id: 8, title: "Haar average vs process fidelity", run: fidelity_relation },
        Criterion { id: 9, title: "heating bound and thermometry", run: heating_and_thermometry },
        Criterion { id: 10, title: "determinism", run: determinism },
    ];
    let outcomes = run_all(&criteria, &only);
    println!("{}", summary(&outcomes));
    if outcomes.iter().any(|o| !o.verdict.pass) {
        std::process::exit(1);
    }
}
