use std::f64::consts::PI;

use iontrap::frames::{gate_propagator, PulseParams, TrapLaserParams};
use iontrap::noiselab::{nbar_to_ratio, thermometry};
use iontrap::qlinalg::{
    c, expm_hermitian, kron, min_eigenvalue, operator_norm, unitarity_defect, Op2, Op3, Op4, Operator,
};
use iontrap::sequencer::{dds_phase, DdsChannel, DdsPhaseModel};
use iontrap::tomography::{chi_mle, mle_density, DesignMatrix, TomographyDataset, N_MEAS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn entries(n: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), n)
}

fn hermitian6() -> impl Strategy<Value = Operator> {
    entries(36).prop_map(|v| {
        let m = Operator::from_fn(|i, j| c(v[6 * i + j].0, v[6 * i + j].1));
        (m + m.adjoint()) * c(0.5, 0.0)
    })
}

fn op2() -> impl Strategy<Value = Op2> {
    entries(4).prop_map(|v| Op2::from_fn(|i, j| c(v[2 * i + j].0, v[2 * i + j].1)))
}

fn op3() -> impl Strategy<Value = Op3> {
    entries(9).prop_map(|v| Op3::from_fn(|i, j| c(v[3 * i + j].0, v[3 * i + j].1)))
}

fn density4() -> impl Strategy<Value = Op4> {
    (entries(16), 0.0..1.0f64).prop_map(|(v, purity)| {
        let g = Op4::from_fn(|i, j| c(v[4 * i + j].0, v[4 * i + j].1));
        let r = g * g.adjoint();
        let r = r / r.trace();
        // push towards the boundary of the state space, where MLE has to work hardest
        let (vals, vecs) = iontrap::qlinalg::hermitian_eigen(&r).unwrap();
        let k = (0..4).max_by(|a, b| vals[*a].total_cmp(&vals[*b])).unwrap();
        let top = vecs.column(k) * vecs.column(k).adjoint();
        r * c(1.0 - purity, 0.0) + top * c(purity, 0.0)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn expm_is_a_one_parameter_group(h in hermitian6(), s in -3.0..3.0f64, t in -3.0..3.0f64) {
        let us = expm_hermitian(&h, s).unwrap();
        let ut = expm_hermitian(&h, t).unwrap();
        let ust = expm_hermitian(&h, s + t).unwrap();
        prop_assert!(operator_norm(&(us * ut - ust)) < 1e-10);
        prop_assert!(unitarity_defect(&ust) < 1e-10);
        prop_assert!(operator_norm(&(expm_hermitian(&h, 0.0).unwrap() - Operator::identity())) < 1e-12);
    }

    #[test]
    fn kron_is_bilinear_and_multiplicative(a in op2(), b in op2(), m in op3(), n in op3(), l in -2.0..2.0f64) {
        let lhs = kron(&(a + b * c(l, 0.0)), &m);
        let rhs = kron(&a, &m) + kron(&b, &m) * c(l, 0.0);
        prop_assert!(operator_norm(&(lhs - rhs)) < 1e-12);
        let lhs = kron(&a, &(m + n * c(l, 0.0)));
        let rhs = kron(&a, &m) + kron(&a, &n) * c(l, 0.0);
        prop_assert!(operator_norm(&(lhs - rhs)) < 1e-12);
        let prod = kron(&a, &m) * kron(&b, &n);
        prop_assert!(operator_norm(&(prod - kron(&(a * b), &(m * n)))) < 1e-12);
    }

    #[test]
    fn gate_propagator_is_unitary(
        x in -2.0..2.0f64,
        phi in 0.0..2.0 * PI,
        t in 0.0..1e-4f64,
        t0 in 0.0..1e-3f64,
        intensity in 0.5..1.5f64,
    ) {
        let p = TrapLaserParams::reference().with_intensity_factor(intensity);
        let q = PulseParams { delta: x * p.omega_sec, phi, t, t0 };
        let u = gate_propagator(&p, &q).unwrap();
        prop_assert!(unitarity_defect(&u) < 1e-10);
    }

    #[test]
    fn dds_switching_keeps_each_frequency_coherent(
        f1 in 1e3..1e8f64,
        f2 in 1e3..1e8f64,
        phi in 0.0..2.0 * PI,
        ticks in prop::collection::vec(0u64..1_000_000, 1..6),
    ) {
        let model = DdsPhaseModel::new(1e9);
        let mut switched = DdsChannel::new(model);
        let mut reference = DdsChannel::new(model);
        reference.select(f1, phi);
        for tick in ticks {
            switched.select(f2, 0.0);
            let _ = switched.output_word(tick);
            switched.select(f1, phi);
            prop_assert_eq!(switched.output_word(tick), reference.output_word(tick));
            // the accumulator advances by exactly one tuning word per tick
            let step = reference.output_word(tick + 1).wrapping_sub(reference.output_word(tick));
            prop_assert_eq!(step, model.tuning_word(f1));
        }
    }

    #[test]
    fn dds_word_tracks_continuous_phase(f in 0.0..1e8f64, tick in 0u64..100_000, phi in 0.0..2.0 * PI) {
        let model = DdsPhaseModel::new(1e9);
        let mut ch = DdsChannel::new(model);
        ch.select(f, phi);
        let word = DdsPhaseModel::radians(ch.output_word(tick));
        let cont = dds_phase(f, tick as f64 / 1e9, phi);
        let diff = (word - cont).rem_euclid(2.0 * PI);
        prop_assert!(diff.min(2.0 * PI - diff) < 1e-6, "{} vs {}", word, cont);
    }

    #[test]
    fn thermometry_inverts_the_ratio(nbar in 0.0..5.0f64, blue in 0.05..1.0f64) {
        let red = nbar_to_ratio(nbar) * blue;
        let est = thermometry(red, blue).unwrap();
        prop_assert!((est - nbar).abs() < 1e-9 * (1.0 + nbar));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampled_frequencies_converge_to_exact(rho in density4(), seed in any::<u64>(), shots in 200u64..5000) {
        let d = DesignMatrix::standard();
        let exact = TomographyDataset::from_channel(&d, |_| rho);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sampled = exact.sample(shots, &mut rng);
        prop_assert_eq!(sampled.shots, Some(shots));
        for (er, sr) in exact.probabilities.iter().zip(&sampled.probabilities) {
            for (p, f) in er.iter().zip(sr) {
                let k = f * shots as f64;
                prop_assert!((k - k.round()).abs() < 1e-6);
                let sd = (p * (1.0 - p) / shots as f64).sqrt();
                prop_assert!((f - p).abs() <= 6.0 * sd + 1e-12, "{} vs {} at {} shots", f, p, shots);
            }
        }
    }

    #[test]
    fn mle_state_is_physical(rho in density4(), seed in any::<u64>(), shots in 50u64..2000) {
        let d = DesignMatrix::standard();
        let data = TomographyDataset::from_channel(&d, |_| rho).sample(shots, &mut ChaCha8Rng::seed_from_u64(seed));
        let m: Vec<f64> = data.probabilities[0].to_vec();
        let est = mle_density(&d, &m, Some(&[shots; N_MEAS])).unwrap();
        prop_assert!(min_eigenvalue(&est) > -1e-9);
        prop_assert!((est.trace().re - 1.0).abs() < 1e-9);
        prop_assert!(operator_norm(&(est - est.adjoint())) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn mle_process_is_completely_positive(seed in any::<u64>(), shots in 100u64..2000, p in 0.0..0.5f64) {
        let d = DesignMatrix::standard();
        let data = TomographyDataset::from_channel(&d, |r| r * c(1.0 - p, 0.0) + Op4::identity() * c(p / 4.0, 0.0))
            .sample(shots, &mut ChaCha8Rng::seed_from_u64(seed));
        let chi = chi_mle(&d, &data).unwrap();
        prop_assert!(chi.cp_enforced && chi.trace_normalized);
        prop_assert!(chi.min_eigenvalue() > -1e-9);
        prop_assert!((chi.chi.trace().re - 1.0).abs() < 1e-9);
    }
}
