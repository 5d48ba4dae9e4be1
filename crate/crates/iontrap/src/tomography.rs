//! State and process tomography of the atom + motion two-qubit system.
//!
//! Measurements are fluorescence projections preceded by rotations, optionally
//! followed by a second, conditional projection when the first one stays dark.
//! States are reconstructed by linear inversion in the basis of the 16 prepared
//! projectors or by maximum likelihood over a Cholesky parameterization; the
//! process matrix uses the Pauli basis with the atom as the first factor.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SMatrix};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::gates::{format_ops, ops_unitary, parse_ops, Rotation};
use crate::optim::{lbfgs, LbfgsOptions, OptimError};
use crate::qlinalg::{c, hermitian_eigen, kron2, min_eigenvalue, proj_d, proj_s, restrict, Op2, Op4, Operator, C64};
use crate::sequencer::{table_state, MeasurementRecord, ProgramBuilder, SequencerError};

/// Process matrices live on the 16-dim operator space.
pub type Op16 = SMatrix<C64, 16, 16>;

pub const N_INPUTS: usize = 16;
pub const N_MEAS: usize = 15;

#[derive(Debug, thiserror::Error)]
pub enum TomographyError {
    #[error("design matrix is singular (smallest singular value {0:.3e})")]
    SingularDesign(f64),
    #[error("input states do not span the operator space")]
    RankDeficientInputs,
    #[error("MLE failed: {0}")]
    Optimizer(#[from] OptimError),
    #[error("probability {value} of cell ({input}, {meas}) outside [0, 1]")]
    BadProbability { input: usize, meas: usize, value: f64 },
    #[error("MLE needs shot counts or exact probabilities")]
    NoShots,
    #[error(transparent)]
    Sequencer(#[from] SequencerError),
    #[error("malformed dataset: {0}")]
    Parse(String),
}

/// First-stage rotation `U` and, for conditional measurements, second-stage `V`.
/// Both are operation strings in written order (rightmost acts first).
pub const MEAS_TABLE: [(&str, Option<&str>); N_MEAS] = [
    ("I", None),
    ("I", Some("Ry+(pi)")),
    ("Ry(pi)", Some("Ry+(pi)")),
    ("Ry(pi/2)", None),
    ("Rx(pi/2)", None),
    ("I", Some("Ry(pi/2) Ry+(pi/2)")),
    ("Ry(pi)", Some("Ry(pi/2) Ry+(pi/2)")),
    ("Ry(pi/2)", Some("Ry(pi/2) Ry+(pi/2)")),
    ("Ry(pi/2)", Some("Rx(pi/2) Ry+(pi/2)")),
    ("I", Some("Rx(pi/2) Ry+(pi/2)")),
    ("Rx(pi)", Some("Rx(pi/2) Ry+(pi/2)")),
    ("Rx(pi/2)", Some("Rx(pi/2) Ry+(pi/2)")),
    ("Rx(pi/2)", Some("Ry(pi/2) Ry+(pi/2)")),
    ("Ry(pi/2)", Some("Ry+(pi/2)")),
    ("Rx(pi/2)", Some("Ry+(pi/2)")),
];

#[derive(Debug, Clone, PartialEq)]
pub enum MeasurementSpec {
    /// Rotate, then detect fluorescence.
    MU { u: Vec<Rotation> },
    /// Rotate and detect; if dark, rotate again and detect. Success is dark-then-bright.
    MUV { u: Vec<Rotation>, v: Vec<Rotation> },
}

impl MeasurementSpec {
    pub fn u(&self) -> &[Rotation] {
        match self {
            MeasurementSpec::MU { u } | MeasurementSpec::MUV { u, .. } => u,
        }
    }

    pub fn label(&self) -> String {
        match self {
            MeasurementSpec::MU { u } => format!("M_U({})", format_ops(u)),
            MeasurementSpec::MUV { u, v } => format!("M_UV({}, {})", format_ops(u), format_ops(v)),
        }
    }

    /// U^dag P_S U, or U^dag P_D V^dag P_S V P_D U, with idealized rotations.
    pub fn operator(&self) -> Operator {
        measurement_operator(self)
    }

    /// Appends the readout sequence to a program under construction.
    pub fn append_to(&self, b: &mut ProgramBuilder) -> Result<(), SequencerError> {
        b.ops(self.u())?.measure("first");
        if let MeasurementSpec::MUV { v, .. } = self {
            b.begin_cond();
            b.ops(v)?.measure("second");
            b.end_cond();
        }
        Ok(())
    }

    /// Success probability from the records of an exact run of `append_to`.
    /// For M_UV the last record already holds the dark-then-bright joint probability.
    pub fn exact_probability(&self, records: &[MeasurementRecord]) -> f64 {
        records.last().map_or(0.0, |r| r.probability)
    }

    /// Whether a sampled run counts as a success.
    pub fn sampled_success(&self, records: &[MeasurementRecord]) -> bool {
        match self {
            MeasurementSpec::MU { .. } => records.last().and_then(|r| r.outcome).unwrap_or(false),
            MeasurementSpec::MUV { .. } => {
                let n = records.len();
                n >= 2 && records[n - 2].outcome == Some(false) && records[n - 1].outcome == Some(true)
            }
        }
    }
}

pub fn measurement_operator(spec: &MeasurementSpec) -> Operator {
    let ps = proj_s();
    let u = ops_unitary(spec.u());
    match spec {
        MeasurementSpec::MU { .. } => u.adjoint() * ps * u,
        MeasurementSpec::MUV { v, .. } => {
            let v = ops_unitary(v);
            let pd = proj_d();
            u.adjoint() * pd * v.adjoint() * ps * v * pd * u
        }
    }
}

pub fn measurement_basis() -> Vec<MeasurementSpec> {
    MEAS_TABLE
        .iter()
        .map(|(u, v)| {
            let u = parse_ops(u).expect("table entries parse");
            match v {
                None => MeasurementSpec::MU { u },
                Some(v) => MeasurementSpec::MUV { u, v: parse_ops(v).expect("table entries parse") },
            }
        })
        .collect()
}

/// Measurement operators restricted to the computational block.
pub fn measurement_kernels() -> Vec<Op4> {
    measurement_basis().iter().map(|s| restrict(&s.operator())).collect()
}

/// Ideal prepared states rho_i, i = 1..16 in table order.
pub fn prep_states() -> Vec<Op4> {
    (1..=N_INPUTS)
        .map(|i| {
            let psi = table_state(i).expect("index in range");
            psi * psi.adjoint()
        })
        .collect()
}

fn real_trace(a: &Op4, b: &Op4) -> f64 {
    (a * b).trace().re
}

/// A_ij = Tr(M_j rho_i) with j = 16 the trace (all ones).
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub a: DMatrix<f64>,
    pub preps: Vec<Op4>,
    pub kernels: Vec<Op4>,
    pub min_singular_value: f64,
    pub condition_number: f64,
    inv_t: DMatrix<f64>,
}

pub fn build_a(preps: &[Op4], kernels: &[Op4]) -> Result<DesignMatrix, TomographyError> {
    assert_eq!(preps.len(), N_INPUTS);
    assert_eq!(kernels.len(), N_MEAS);
    let mut a = DMatrix::zeros(N_INPUTS, N_INPUTS);
    for (i, rho) in preps.iter().enumerate() {
        for (j, k) in kernels.iter().enumerate() {
            a[(i, j)] = real_trace(k, rho);
        }
        a[(i, N_MEAS)] = rho.trace().re;
    }
    let sv = a.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if smin < 1e-3 {
        return Err(TomographyError::SingularDesign(smin));
    }
    let inv_t = a.transpose().try_inverse().ok_or(TomographyError::SingularDesign(smin))?;
    Ok(DesignMatrix {
        a,
        preps: preps.to_vec(),
        kernels: kernels.to_vec(),
        min_singular_value: smin,
        condition_number: smax / smin,
        inv_t,
    })
}

impl DesignMatrix {
    /// Design matrix for the table preparations and measurements.
    pub fn standard() -> Self {
        build_a(&prep_states(), &measurement_kernels()).expect("standard design is invertible")
    }

    /// Exact measurement values (with the trailing 1) for a state.
    pub fn expectations(&self, rho: &Op4) -> DVector<f64> {
        let mut m = DVector::zeros(N_INPUTS);
        for (j, k) in self.kernels.iter().enumerate() {
            m[j] = real_trace(k, rho);
        }
        m[N_MEAS] = rho.trace().re;
        m
    }

    /// Linear inversion: solves sum_i A_ij c_i = m_j and expands in the prepared projectors.
    pub fn reconstruct_rho(&self, m: &[f64]) -> LinearEstimate {
        let mut full = DVector::from_element(N_INPUTS, 1.0);
        for (f, v) in full.iter_mut().zip(m) {
            *f = *v;
        }
        let coeffs = &self.inv_t * full;
        let mut rho = Op4::zeros();
        for (ci, p) in coeffs.iter().zip(&self.preps) {
            rho += p * c(*ci, 0.0);
        }
        rho = (rho + rho.adjoint()) * c(0.5, 0.0);
        let lam = min_eigenvalue(&rho);
        LinearEstimate { rho, min_eigenvalue: lam, negative: lam < -1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearEstimate {
    pub rho: Op4,
    pub min_eigenvalue: f64,
    /// Set when linear inversion produced an unphysical (non-PSD) matrix.
    pub negative: bool,
}

pub fn reconstruct_rho(m: &[f64]) -> LinearEstimate {
    DesignMatrix::standard().reconstruct_rho(m)
}

/// Clips negative eigenvalues, renormalizes and mixes in `eps` of the maximally mixed state.
pub fn clip_to_density(rho: &DMatrix<C64>, eps: f64) -> DMatrix<C64> {
    let n = rho.nrows();
    let (vals, vecs) = hermitian_eigen(rho).expect("Hermitian input");
    let mut scaled = vecs.clone();
    let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    for (j, lam) in vals.iter().enumerate() {
        let w = if total > 0.0 { lam.max(0.0) / total } else { 1.0 / n as f64 };
        let w = (1.0 - eps) * w + eps / n as f64;
        for v in scaled.column_mut(j).iter_mut() {
            *v *= w;
        }
    }
    let out = scaled * vecs.adjoint();
    (&out + out.adjoint()) * c(0.5, 0.0)
}

fn to_dyn<const N: usize>(m: &SMatrix<C64, N, N>) -> DMatrix<C64> {
    DMatrix::from_fn(N, N, |i, j| m[(i, j)])
}

fn from_dyn<const N: usize>(m: &DMatrix<C64>) -> SMatrix<C64, N, N> {
    SMatrix::from_fn(|i, j| m[(i, j)])
}

/// PSD, unit-trace version of a 4x4 estimate.
pub fn physical_state(rho: &Op4) -> Op4 {
    from_dyn(&clip_to_density(&to_dyn(rho), 0.0))
}

/// One binomial cell of a likelihood: success probability Tr(K rho).
struct Cell<'k> {
    kernel: &'k [C64],
    /// Index of the kernel giving the total output weight; None means 1.
    total: Option<usize>,
    freq: f64,
    weight: f64,
}

/// Maximizes the likelihood over rho = T^dag T / Tr(T^dag T).
///
/// Kernel entry k is K[(k % dim, k / dim)] so that p = sum_k kernel[k] * rho[(k / dim, k % dim)].
/// Cells with a `total` kernel use the extended form: failure weight q = Tr(K_tot rho) - p and
/// an extra (p + q - 1) term, so the normalization of a process output is fitted too.
fn mle_psd(
    dim: usize,
    cells: &[Cell<'_>],
    totals: &[Vec<C64>],
    init: &DMatrix<C64>,
) -> Result<DMatrix<C64>, TomographyError> {
    let x0 = pack_cholesky(init);
    let weight_sum: f64 = cells.iter().map(|c| c.weight).sum();
    let dot = |kernel: &[C64], flat: &[C64]| -> f64 { kernel.iter().zip(flat).map(|(a, b)| (a * b).re).sum() };
    let objective = |x: &[f64], grad: &mut [f64]| -> f64 {
        let t = unpack(dim, x);
        let tt = t.adjoint() * &t;
        let s = tt.trace().re;
        let rho = &tt / c(s, 0.0);
        let flat: Vec<C64> = (0..dim * dim).map(|k| rho[(k / dim, k % dim)]).collect();
        let tot: Vec<f64> = totals.iter().map(|k| dot(k, &flat)).collect();
        let mut tot_coef = vec![0.0; totals.len()];
        let mut value = 0.0;
        let mut g = DMatrix::<C64>::zeros(dim, dim);
        for cell in cells {
            let p = dot(cell.kernel, &flat);
            let total = cell.total.map_or(1.0, |k| tot[k]);
            let q = total - p;
            let (m, w) = (cell.freq, cell.weight);
            let (mut ap, mut aq) = (w, w);
            if m > 0.0 {
                if p <= 0.0 {
                    return f64::INFINITY;
                }
                value += w * m * (m / p).ln();
                ap -= w * m / p;
            }
            if m < 1.0 {
                if q <= 0.0 {
                    return f64::INFINITY;
                }
                value += w * (1.0 - m) * ((1.0 - m) / q).ln();
                aq -= w * (1.0 - m) / q;
            }
            value += w * (total - 1.0);
            if let Some(k) = cell.total {
                tot_coef[k] += aq;
            }
            let a = ap - aq;
            if a != 0.0 {
                for (k, kv) in cell.kernel.iter().enumerate() {
                    g[(k % dim, k / dim)] += kv * a;
                }
            }
        }
        for (kernel, a) in totals.iter().zip(&tot_coef) {
            for (k, kv) in kernel.iter().enumerate() {
                g[(k % dim, k / dim)] += kv * *a;
            }
        }
        value /= weight_sum;
        g /= c(weight_sum, 0.0);
        let cc = (&g * &rho).trace().re;
        for d in 0..dim {
            g[(d, d)] -= c(cc, 0.0);
        }
        let y = &t * g;
        let mut idx = 0;
        for r in 0..dim {
            grad[idx] = 2.0 * y[(r, r)].re / s;
            idx += 1;
            for col in 0..r {
                grad[idx] = 2.0 * y[(r, col)].re / s;
                grad[idx + 1] = 2.0 * y[(r, col)].im / s;
                idx += 2;
            }
        }
        value
    };
    let min = lbfgs(objective, &x0, LbfgsOptions::default())?;
    let t = unpack(dim, &min.x);
    let tt = t.adjoint() * &t;
    let s = tt.trace().re;
    let rho = tt / c(s, 0.0);
    Ok((&rho + rho.adjoint()) * c(0.5, 0.0))
}

/// T lower triangular with real diagonal from a positive definite rho = T^dag T.
fn pack_cholesky(rho: &DMatrix<C64>) -> Vec<f64> {
    let n = rho.nrows();
    // J rho J = L L^dag  =>  rho = (J L J)(J L^dag J), T = J L^dag J
    let flipped = DMatrix::from_fn(n, n, |i, j| rho[(n - 1 - i, n - 1 - j)]);
    let l = flipped.cholesky().expect("positive definite initial point").l();
    let t = DMatrix::from_fn(n, n, |i, j| l[(n - 1 - j, n - 1 - i)].conj());
    let mut x = Vec::with_capacity(n * n);
    for r in 0..n {
        x.push(t[(r, r)].re);
        for col in 0..r {
            x.push(t[(r, col)].re);
            x.push(t[(r, col)].im);
        }
    }
    x
}

fn unpack(n: usize, x: &[f64]) -> DMatrix<C64> {
    let mut t = DMatrix::zeros(n, n);
    let mut idx = 0;
    for r in 0..n {
        t[(r, r)] = c(x[idx], 0.0);
        idx += 1;
        for col in 0..r {
            t[(r, col)] = c(x[idx], x[idx + 1]);
            idx += 2;
        }
    }
    t
}

fn flatten_kernel<const N: usize>(k: &SMatrix<C64, N, N>) -> Vec<C64> {
    // p = Tr(K rho) = sum_ab K_ba rho_ab
    (0..N * N).map(|idx| k[(idx % N, idx / N)]).collect()
}

/// Initial-point mixing for MLE; small enough to sit inside the 1e-6 agreement with exact data.
const MLE_INIT_MIX: f64 = 1e-9;

/// Rounding slack accepted on probabilities before they are clamped.
const PROB_SLACK: f64 = 1e-9;

fn check_prob(input: usize, meas: usize, value: f64) -> Result<(), TomographyError> {
    if !(-PROB_SLACK..=1.0 + PROB_SLACK).contains(&value) || !value.is_finite() {
        return Err(TomographyError::BadProbability { input, meas, value });
    }
    Ok(())
}

/// Maximum-likelihood state from 15 measured frequencies; `shots` None means exact data.
pub fn mle_density(design: &DesignMatrix, m: &[f64], shots: Option<&[u64]>) -> Result<Op4, TomographyError> {
    for (j, v) in m.iter().take(N_MEAS).enumerate() {
        check_prob(0, j + 1, *v)?;
    }
    let weights: Vec<f64> = match shots {
        None => vec![1.0; N_MEAS],
        Some(s) => {
            if s.iter().any(|&n| n == 0) {
                return Err(TomographyError::NoShots);
            }
            let mean = s.iter().sum::<u64>() as f64 / s.len() as f64;
            s.iter().map(|&n| n as f64 / mean).collect()
        }
    };
    let init = clip_to_density(&to_dyn(&design.reconstruct_rho(&m[..N_MEAS]).rho), MLE_INIT_MIX.max(init_mix(shots)));
    let flats: Vec<Vec<C64>> = design.kernels.iter().map(flatten_kernel).collect();
    let cells: Vec<Cell> = (0..N_MEAS)
        .map(|j| Cell { kernel: &flats[j], total: None, freq: m[j].clamp(0.0, 1.0), weight: weights[j] })
        .collect();
    Ok(from_dyn(&mle_psd(4, &cells, &[], &init)?))
}

/// Sampled data starts further inside the PSD cone so the likelihood is finite.
fn init_mix(shots: Option<&[u64]>) -> f64 {
    if shots.is_some() {
        1e-3
    } else {
        0.0
    }
}

/// Single-qubit Paulis I, X, Y, Z (unit eigenvalues). For the atom the basis is (D, S).
pub fn pauli(k: usize) -> Op2 {
    let z = c(0.0, 0.0);
    let one = c(1.0, 0.0);
    let i = c(0.0, 1.0);
    match k {
        0 => Op2::new(one, z, z, one),
        1 => Op2::new(z, one, one, z),
        2 => Op2::new(z, -i, i, z),
        3 => Op2::new(one, z, z, -one),
        _ => panic!("Pauli index {k} out of range"),
    }
}

/// E_m = P_a (x) P_b with m = 4a + b, atom first: II, IX, IY, IZ, XI, ...
pub fn pauli_basis() -> Vec<Op4> {
    (0..16).map(|m| kron2(&pauli(m / 4), &pauli(m % 4))).collect()
}

pub fn pauli_label(m: usize) -> String {
    const L: [char; 4] = ['I', 'X', 'Y', 'Z'];
    format!("{}{}", L[m / 4], L[m % 4])
}

/// Process matrix in the Pauli basis, normalized so Tr chi = 1 for a trace-preserving map.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiMatrix {
    pub chi: Op16,
    pub cp_enforced: bool,
    pub trace_normalized: bool,
    /// |sum_mn chi_mn E_n^dag E_m - I|_F; zero for trace-preserving maps.
    pub tp_violation: f64,
}

impl ChiMatrix {
    pub fn new(chi: Op16, cp_enforced: bool, trace_normalized: bool) -> Self {
        let tp_violation = tp_violation(&chi);
        Self { chi, cp_enforced, trace_normalized, tp_violation }
    }

    /// E(rho) = sum_mn chi_mn E_m rho E_n^dag.
    pub fn apply(&self, rho: &Op4) -> Op4 {
        let basis = pauli_basis();
        let mut out = Op4::zeros();
        for m in 0..16 {
            let left = basis[m] * rho;
            for n in 0..16 {
                let x = self.chi[(m, n)];
                if x != c(0.0, 0.0) {
                    out += left * basis[n].adjoint() * x;
                }
            }
        }
        out
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.chi)
    }

    /// Plain-text dump: real and imaginary blocks and a summary.
    pub fn to_text(&self, summary: &[(&str, f64)]) -> String {
        let mut s = String::new();
        let labels: Vec<String> = (0..16).map(pauli_label).collect();
        for (name, part) in [("real", 0), ("imag", 1)] {
            let _ = writeln!(s, "# chi {name}");
            let _ = writeln!(s, "{}", labels.join(","));
            for m in 0..16 {
                let row: Vec<String> = (0..16)
                    .map(|n| {
                        let v = self.chi[(m, n)];
                        format!("{:.9e}", if part == 0 { v.re } else { v.im })
                    })
                    .collect();
                let _ = writeln!(s, "{}", row.join(","));
            }
        }
        let _ = writeln!(s, "# summary");
        let _ = writeln!(s, "cp_enforced = {}", self.cp_enforced);
        let _ = writeln!(s, "trace_normalized = {}", self.trace_normalized);
        let _ = writeln!(s, "tp_violation = {:.6e}", self.tp_violation);
        for (k, v) in summary {
            let _ = writeln!(s, "{k} = {v:.9}");
        }
        s
    }
}

fn tp_violation(chi: &Op16) -> f64 {
    let basis = pauli_basis();
    let mut sum = Op4::zeros();
    for m in 0..16 {
        for n in 0..16 {
            sum += basis[n].adjoint() * basis[m] * chi[(m, n)];
        }
    }
    (sum - Op4::identity()).norm()
}

/// Column-stacked vec.
fn vec4(m: &Op4) -> SMatrix<C64, 16, 1> {
    SMatrix::<C64, 16, 1>::from_iterator(m.iter().cloned())
}

/// conj(b) (x) a, the superoperator of rho -> a rho b^dag on column-stacked vectors.
fn superop(a: &Op4, b: &Op4) -> Op16 {
    b.conjugate().kronecker(a)
}

/// Linear process reconstruction from 16 input/output pairs.
pub fn chi_linear(inputs: &[Op4], outputs: &[Op4]) -> Result<ChiMatrix, TomographyError> {
    let mut x = Op16::zeros();
    let mut y = Op16::zeros();
    for (k, (i, o)) in inputs.iter().zip(outputs).enumerate() {
        x.set_column(k, &vec4(i));
        y.set_column(k, &vec4(o));
    }
    let xinv = x.try_inverse().ok_or(TomographyError::RankDeficientInputs)?;
    let s = y * xinv;
    let basis = pauli_basis();
    let mut chi = Op16::zeros();
    for m in 0..16 {
        for n in 0..16 {
            let b = superop(&basis[m], &basis[n]);
            chi[(m, n)] = (b.adjoint() * s).trace() / c(16.0, 0.0);
        }
    }
    let chi = (chi + chi.adjoint()) * c(0.5, 0.0);
    Ok(ChiMatrix::new(chi, false, false))
}

/// Per-cell data for process tomography: frequencies m_ij and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TomographyDataset {
    /// probabilities[i][j]: input i (0-based), measurement j (0-based).
    pub probabilities: Vec<[f64; N_MEAS]>,
    /// Shots per cell; None for exact probabilities.
    pub shots: Option<u64>,
}

impl TomographyDataset {
    pub fn exact(probabilities: Vec<[f64; N_MEAS]>) -> Self {
        Self { probabilities, shots: None }
    }

    /// Exact probabilities for a channel acting on the computational block.
    pub fn from_channel<F: Fn(&Op4) -> Op4>(design: &DesignMatrix, channel: F) -> Self {
        let probabilities = design
            .preps
            .iter()
            .map(|rho| {
                let out = channel(rho);
                let mut row = [0.0; N_MEAS];
                for (j, k) in design.kernels.iter().enumerate() {
                    row[j] = real_trace(k, &out).clamp(0.0, 1.0);
                }
                row
            })
            .collect();
        Self::exact(probabilities)
    }

    pub fn validate(&self) -> Result<(), TomographyError> {
        if self.probabilities.len() != N_INPUTS {
            return Err(TomographyError::Parse(format!("{} inputs", self.probabilities.len())));
        }
        for (i, row) in self.probabilities.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                check_prob(i + 1, j + 1, *v)?;
            }
        }
        Ok(())
    }

    /// Binomial sample of this dataset at `shots` per cell.
    pub fn sample(&self, shots: u64, rng: &mut dyn RngCore) -> Self {
        let probabilities = self
            .probabilities
            .iter()
            .map(|row| {
                let mut out = [0.0; N_MEAS];
                for (o, p) in out.iter_mut().zip(row) {
                    let k = Binomial::new(shots, p.clamp(0.0, 1.0)).expect("valid binomial").sample(rng);
                    *o = k as f64 / shots as f64;
                }
                out
            })
            .collect();
        Self { probabilities, shots: Some(shots) }
    }

    /// Records (input, measurement, shots, successes, probability); 1-based indices.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("input,measurement,shots,successes,probability\n");
        for (i, row) in self.probabilities.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                let (n, k) = match self.shots {
                    Some(n) => (n, (p * n as f64).round() as u64),
                    None => (0, 0),
                };
                let _ = writeln!(s, "{},{},{},{},{:.12e}", i + 1, j + 1, n, k, p);
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, TomographyError> {
        let mut probabilities = vec![[f64::NAN; N_MEAS]; N_INPUTS];
        let mut shots = None;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("input") {
                continue;
            }
            let bad = || TomographyError::Parse(format!("line {}: `{line}`", ln + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let i: usize = f[0].parse().map_err(|_| bad())?;
            let j: usize = f[1].parse().map_err(|_| bad())?;
            let n: u64 = f[2].parse().map_err(|_| bad())?;
            let k: u64 = f[3].parse().map_err(|_| bad())?;
            let p: f64 = f[4].parse().map_err(|_| bad())?;
            if !(1..=N_INPUTS).contains(&i) || !(1..=N_MEAS).contains(&j) {
                return Err(bad());
            }
            probabilities[i - 1][j - 1] = if n > 0 { k as f64 / n as f64 } else { p };
            if n > 0 {
                shots = Some(n);
            }
        }
        let ds = Self { probabilities, shots };
        ds.validate()?;
        Ok(ds)
    }
}

/// Maximum-likelihood process matrix, chi = T^dag T / Tr, over all 16 x 15 cells.
pub fn chi_mle(design: &DesignMatrix, data: &TomographyDataset) -> Result<ChiMatrix, TomographyError> {
    data.validate()?;
    let basis = pauli_basis();
    // (K_ij)_nm = Tr(E_n^dag M_j E_m rho_i); totals use M = I
    let mut flats = Vec::with_capacity(N_INPUTS * N_MEAS);
    let mut totals = Vec::with_capacity(N_INPUTS);
    for rho in &design.preps {
        let right: Vec<Op4> = basis.iter().map(|e| e * rho).collect();
        let kernel = |mj: &Op4| {
            let left: Vec<Op4> = basis.iter().map(|e| e.adjoint() * mj).collect();
            flatten_kernel(&Op16::from_fn(|n, m| (left[n] * right[m]).trace()))
        };
        for mj in &design.kernels {
            flats.push(kernel(mj));
        }
        totals.push(kernel(&Op4::identity()));
    }
    let mut cells = Vec::with_capacity(flats.len());
    for i in 0..N_INPUTS {
        for j in 0..N_MEAS {
            cells.push(Cell {
                kernel: &flats[i * N_MEAS + j],
                total: Some(i),
                freq: data.probabilities[i][j].clamp(0.0, 1.0),
                weight: 1.0,
            });
        }
    }
    let outputs: Vec<Op4> = data
        .probabilities
        .iter()
        .map(|row| design.reconstruct_rho(row).rho)
        .collect();
    let lin = chi_linear(&design.preps, &outputs)?;
    let mix = if data.shots.is_some() { 1e-3 } else { MLE_INIT_MIX };
    let init = clip_to_density(&to_dyn(&lin.chi), mix);
    let chi = mle_psd(16, &cells, &totals, &init)?;
    Ok(ChiMatrix::new(from_dyn(&chi), true, true))
}

/// How the process matrix is estimated from a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChiMethod {
    Linear,
    Mle,
}

pub fn chi_from_dataset(
    design: &DesignMatrix,
    data: &TomographyDataset,
    method: ChiMethod,
) -> Result<ChiMatrix, TomographyError> {
    match method {
        ChiMethod::Mle => chi_mle(design, data),
        ChiMethod::Linear => {
            data.validate()?;
            let outputs: Vec<Op4> = data.probabilities.iter().map(|row| design.reconstruct_rho(row).rho).collect();
            chi_linear(&design.preps, &outputs)
        }
    }
}

/// Coefficients u_m of U = sum_m u_m E_m.
pub fn pauli_coefficients(u: &Op4) -> [C64; 16] {
    let basis = pauli_basis();
    let mut out = [c(0.0, 0.0); 16];
    for (m, e) in basis.iter().enumerate() {
        out[m] = (e.adjoint() * u).trace() / c(4.0, 0.0);
    }
    out
}

/// chi_id = u u^dag for a unitary target.
pub fn chi_ideal(u: &Op4) -> ChiMatrix {
    let coeffs = pauli_coefficients(u);
    let v = SMatrix::<C64, 16, 1>::from_iterator(coeffs);
    ChiMatrix::new(v * v.adjoint(), true, true)
}

/// F_p = Tr(chi_id chi_expt).
pub fn process_fidelity(chi_expt: &ChiMatrix, chi_id: &ChiMatrix) -> f64 {
    (chi_id.chi * chi_expt.chi).trace().re
}

/// (d F_p + 1) / (d + 1) with d = 4.
pub fn haar_mean_fidelity(f_p: f64) -> f64 {
    (4.0 * f_p + 1.0) / 5.0
}

/// Per-input overlaps Tr(U rho_i U^dag rho'_i).
pub fn state_fidelities(preps: &[Op4], outputs: &[Op4], target: &Op4) -> Vec<f64> {
    preps
        .iter()
        .zip(outputs)
        .map(|(rho, out)| real_trace(&(target * rho * target.adjoint()), out))
        .collect()
}

/// Average of the per-input overlaps.
pub fn mean_fidelity(preps: &[Op4], outputs: &[Op4], target: &Op4) -> f64 {
    let f = state_fidelities(preps, outputs, target);
    f.iter().sum::<f64>() / f.len() as f64
}

/// Everything reconstructed from one dataset.
#[derive(Debug, Clone)]
pub struct ProcessReport {
    pub chi: ChiMatrix,
    pub outputs: Vec<Op4>,
    pub process_fidelity: f64,
    pub mean_fidelity: f64,
    pub haar_mean_fidelity: f64,
    pub state_fidelities: Vec<f64>,
}

/// Output states (MLE for sampled data, linear inversion for exact data) and chi by `method`.
pub fn analyze(
    design: &DesignMatrix,
    data: &TomographyDataset,
    target: &Op4,
    method: ChiMethod,
) -> Result<ProcessReport, TomographyError> {
    data.validate()?;
    let shots = data.shots.map(|n| vec![n; N_MEAS]);
    let outputs = data
        .probabilities
        .iter()
        .map(|row| match (&shots, method) {
            (Some(s), ChiMethod::Mle) => mle_density(design, row, Some(s)),
            _ => Ok(physical_state(&design.reconstruct_rho(row).rho)),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let chi = chi_from_dataset(design, data, method)?;
    let f_p = process_fidelity(&chi, &chi_ideal(target));
    let sf = state_fidelities(&design.preps, &outputs, target);
    let mean = sf.iter().sum::<f64>() / sf.len() as f64;
    Ok(ProcessReport {
        chi,
        outputs,
        process_fidelity: f_p,
        mean_fidelity: mean,
        haar_mean_fidelity: haar_mean_fidelity(f_p),
        state_fidelities: sf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBars {
    pub process_fidelity_std: f64,
    pub mean_fidelity_std: f64,
    pub resamples: usize,
}

/// Parametric bootstrap: resample binomial counts at the dataset's probabilities
/// and repeat the full reconstruction. Resample k uses its own seed derived from `seed`.
pub fn projection_noise_errorbars(
    design: &DesignMatrix,
    data: &TomographyDataset,
    target: &Op4,
    method: ChiMethod,
    n_resamples: usize,
    seed: u64,
) -> Result<ErrorBars, TomographyError> {
    let Some(shots) = data.shots else {
        return Ok(ErrorBars { process_fidelity_std: 0.0, mean_fidelity_std: 0.0, resamples: 0 });
    };
    let results: Vec<(f64, f64)> = (0..n_resamples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let sample = data.sample(shots, &mut rng);
            analyze(design, &sample, target, method).map(|r| (r.process_fidelity, r.mean_fidelity))
        })
        .collect::<Result<_, _>>()?;
    let std = |xs: Vec<f64>| {
        let n = xs.len() as f64;
        if xs.len() < 2 {
            return 0.0;
        }
        let mean = xs.iter().sum::<f64>() / n;
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(ErrorBars {
        process_fidelity_std: std(results.iter().map(|r| r.0).collect()),
        mean_fidelity_std: std(results.iter().map(|r| r.1).collect()),
        resamples: n_resamples,
    })
}
