//! Dense complex linear algebra on the simulation space {|D>,|S>} x {|0>,|1>,|2>}
//! and its two-qubit computational block {D0, D1, S0, S1}.
//!
//! Basis order is atomic-major: index = 3*atomic + n with D = 0, S = 1, i.e.
//! |D0, D1, D2, S0, S1, S2>. |D> is the +1/2 eigenstate of sigma_z.

use nalgebra::allocator::Allocator;
use nalgebra::{
    DefaultAllocator, Dim, DimDiff, DimSub, Matrix2, Matrix3, Matrix4, Matrix6, OMatrix, OVector,
    SymmetricEigen, Vector4, Vector6, U1,
};
pub use num_complex::Complex64 as C64;
use thiserror::Error;

/// 6x6 operator on the full simulation space.
pub type Operator = Matrix6<C64>;
/// Density matrices share the operator layout.
pub type DensityMatrix = Matrix6<C64>;
pub type StateVector = Vector6<C64>;
/// Atomic 2x2 operator.
pub type Op2 = Matrix2<C64>;
/// Truncated motional 3x3 operator.
pub type Op3 = Matrix3<C64>;
/// Operator or density matrix on the computational block.
pub type Op4 = Matrix4<C64>;
pub type State4 = Vector4<C64>;

pub const MOTIONAL_LEVELS: usize = 3;
/// Positions of D0, D1, S0, S1 inside the 6-dim basis.
pub const COMPUTATIONAL: [usize; 4] = [0, 1, 3, 4];

/// Relative tolerance for the Hermiticity check of generators.
const HERMITIAN_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("generator is not Hermitian (|H - H^dag| = {deviation:.3e}, |H| = {norm:.3e})")]
    NotHermitian { deviation: f64, norm: f64 },
    #[error("matrix is singular or numerically rank deficient")]
    Singular,
    #[error("Cholesky factorization failed: matrix not positive definite")]
    NotPositiveDefinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Atomic {
    D,
    S,
}

/// Index of |atom, n> in the 6-dim basis.
pub const fn index(atom: Atomic, n: usize) -> usize {
    let a = match atom {
        Atomic::D => 0,
        Atomic::S => 1,
    };
    a * MOTIONAL_LEVELS + n
}

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn basis_state(atom: Atomic, n: usize) -> StateVector {
    let mut v = StateVector::zeros();
    v[index(atom, n)] = C64::new(1.0, 0.0);
    v
}

pub fn pure(psi: &StateVector) -> DensityMatrix {
    psi * psi.adjoint()
}

/// Spin-1/2 operators with eigenvalues +-1/2 and the truncated ladder operators.
pub mod spin {
    use super::*;

    pub fn sigma_x() -> Op2 {
        Op2::new(c(0.0, 0.0), c(0.5, 0.0), c(0.5, 0.0), c(0.0, 0.0))
    }

    pub fn sigma_y() -> Op2 {
        Op2::new(c(0.0, 0.0), c(0.0, -0.5), c(0.0, 0.5), c(0.0, 0.0))
    }

    /// diag(+1/2, -1/2): |D> is the upper level.
    pub fn sigma_z() -> Op2 {
        Op2::new(c(0.5, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-0.5, 0.0))
    }

    /// |D><S|
    pub fn sigma_plus() -> Op2 {
        Op2::new(c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0))
    }

    /// |S><D|
    pub fn sigma_minus() -> Op2 {
        sigma_plus().adjoint()
    }

    pub fn proj_d() -> Op2 {
        Op2::new(c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0))
    }

    pub fn proj_s() -> Op2 {
        Op2::new(c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0))
    }

    /// Truncated annihilation operator: a|n> = sqrt(n)|n-1>.
    pub fn annihilation() -> Op3 {
        let mut a = Op3::zeros();
        a[(0, 1)] = c(1.0, 0.0);
        a[(1, 2)] = c(2f64.sqrt(), 0.0);
        a
    }

    /// Truncated creation operator; a^dag|2> = 0.
    pub fn creation() -> Op3 {
        annihilation().adjoint()
    }

    pub fn number() -> Op3 {
        creation() * annihilation()
    }
}

/// Tensor product atomic (x) motional in atomic-major order.
pub fn kron(atomic: &Op2, motional: &Op3) -> Operator {
    let mut out = Operator::zeros();
    for i in 0..2 {
        for j in 0..2 {
            let a = atomic[(i, j)];
            for k in 0..3 {
                for l in 0..3 {
                    out[(3 * i + k, 3 * j + l)] = a * motional[(k, l)];
                }
            }
        }
    }
    out
}

/// Two-qubit tensor product (first factor major).
pub fn kron2(a: &Op2, b: &Op2) -> Op4 {
    let mut out = Op4::zeros();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    out[(2 * i + k, 2 * j + l)] = a[(i, j)] * b[(k, l)];
                }
            }
        }
    }
    out
}

/// P_S = |S><S| (x) I_3, the fluorescence projector.
pub fn proj_s() -> Operator {
    kron(&spin::proj_s(), &Op3::identity())
}

/// P_D = I_6 - P_S.
pub fn proj_d() -> Operator {
    kron(&spin::proj_d(), &Op3::identity())
}

pub fn frobenius<R: Dim, C: Dim>(m: &OMatrix<C64, R, C>) -> f64
where
    DefaultAllocator: Allocator<R, C>,
{
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Checks Hermiticity relative to the matrix scale and returns the symmetrized copy.
fn hermitian_part<D>(h: &OMatrix<C64, D, D>) -> Result<OMatrix<C64, D, D>, LinalgError>
where
    D: Dim,
    DefaultAllocator: Allocator<D, D>,
{
    let adj = h.adjoint();
    let deviation = frobenius(&(h - &adj));
    let norm = frobenius(h);
    if !(deviation <= HERMITIAN_TOL * norm.max(1.0)) {
        return Err(LinalgError::NotHermitian { deviation, norm });
    }
    Ok((h + adj) * C64::new(0.5, 0.0))
}

/// Eigen-decomposition of a Hermitian matrix: (real eigenvalues, unitary eigenvectors).
pub fn hermitian_eigen<D>(
    h: &OMatrix<C64, D, D>,
) -> Result<(OVector<f64, D>, OMatrix<C64, D, D>), LinalgError>
where
    D: Dim + DimSub<U1>,
    DefaultAllocator: Allocator<D, D>
        + Allocator<D>
        + Allocator<DimDiff<D, U1>>
        + Allocator<D, DimDiff<D, U1>>,
{
    let hs = hermitian_part(h)?;
    let eig = SymmetricEigen::new(hs);
    Ok((eig.eigenvalues, eig.eigenvectors))
}

/// U = exp(-i H t) for Hermitian H, via eigendecomposition.
pub fn expm_hermitian_general<D>(
    h: &OMatrix<C64, D, D>,
    t: f64,
) -> Result<OMatrix<C64, D, D>, LinalgError>
where
    D: Dim + DimSub<U1>,
    DefaultAllocator: Allocator<D, D>
        + Allocator<D>
        + Allocator<DimDiff<D, U1>>
        + Allocator<D, DimDiff<D, U1>>,
{
    let (vals, vecs) = hermitian_eigen(h)?;
    let mut scaled = vecs.clone();
    for (j, lam) in vals.iter().enumerate() {
        let ph = C64::from_polar(1.0, -lam * t);
        for v in scaled.column_mut(j).iter_mut() {
            *v *= ph;
        }
    }
    Ok(scaled * vecs.adjoint())
}

/// U = exp(-i H t) on the 6-dim space. `h` in rad/s, `t` in seconds.
pub fn expm_hermitian(h: &Operator, t: f64) -> Result<Operator, LinalgError> {
    expm_hermitian_general(h, t)
}

/// Frobenius distance of U^dag U from the identity.
pub fn unitarity_defect<D>(u: &OMatrix<C64, D, D>) -> f64
where
    D: Dim,
    DefaultAllocator: Allocator<D, D>,
{
    let (n, _) = u.shape_generic();
    let prod = u.adjoint() * u;
    let id = OMatrix::<C64, D, D>::identity_generic(n, n);
    frobenius(&(prod - id))
}

/// Largest singular value.
pub fn operator_norm<D>(m: &OMatrix<C64, D, D>) -> f64
where
    D: Dim + DimSub<U1>,
    DefaultAllocator: Allocator<D, D>
        + Allocator<D>
        + Allocator<DimDiff<D, U1>>
        + Allocator<D, DimDiff<D, U1>>,
{
    let g = m.adjoint() * m;
    match hermitian_eigen(&g) {
        Ok((vals, _)) => vals.iter().cloned().fold(0.0f64, f64::max).max(0.0).sqrt(),
        Err(_) => f64::NAN,
    }
}

/// Trace distance 1/2 |a - b|_1 of two Hermitian matrices.
pub fn trace_distance<D>(a: &OMatrix<C64, D, D>, b: &OMatrix<C64, D, D>) -> f64
where
    D: Dim + DimSub<U1>,
    DefaultAllocator: Allocator<D, D>
        + Allocator<D>
        + Allocator<DimDiff<D, U1>>
        + Allocator<D, DimDiff<D, U1>>,
{
    let diff = a - b;
    match hermitian_eigen(&diff) {
        Ok((vals, _)) => 0.5 * vals.iter().map(|v| v.abs()).sum::<f64>(),
        Err(_) => f64::NAN,
    }
}

pub fn min_eigenvalue<D>(m: &OMatrix<C64, D, D>) -> f64
where
    D: Dim + DimSub<U1>,
    DefaultAllocator: Allocator<D, D>
        + Allocator<D>
        + Allocator<DimDiff<D, U1>>
        + Allocator<D, DimDiff<D, U1>>,
{
    match hermitian_eigen(m) {
        Ok((vals, _)) => vals.iter().cloned().fold(f64::INFINITY, f64::min),
        Err(_) => f64::NAN,
    }
}

/// Aligns the global phase of `u` to `target` and returns the operator-norm distance.
pub fn distance_up_to_phase<D>(u: &OMatrix<C64, D, D>, target: &OMatrix<C64, D, D>) -> f64
where
    D: Dim + DimSub<U1>,
    DefaultAllocator: Allocator<D, D>
        + Allocator<D>
        + Allocator<DimDiff<D, U1>>
        + Allocator<D, DimDiff<D, U1>>,
{
    let overlap = (target.adjoint() * u).trace();
    let phase = if overlap.norm() > 0.0 {
        overlap / overlap.norm()
    } else {
        C64::new(1.0, 0.0)
    };
    operator_norm(&(u - target * phase))
}

/// Computational-block extraction of a 6x6 density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub rho: Op4,
    /// 1 - trace of the extracted block.
    pub p_leak: f64,
    pub renormalized: bool,
}

pub fn project_computational(rho: &DensityMatrix, renormalize: bool) -> Projection {
    let mut block = Op4::zeros();
    for (a, &i) in COMPUTATIONAL.iter().enumerate() {
        for (b, &j) in COMPUTATIONAL.iter().enumerate() {
            block[(a, b)] = rho[(i, j)];
        }
    }
    let tr = block.trace().re;
    let p_leak = rho.trace().re - tr;
    let renormalized = renormalize && tr > 0.0;
    if renormalized {
        block /= C64::new(tr, 0.0);
    }
    Projection { rho: block, p_leak, renormalized }
}

/// Restriction of a 6x6 operator to the computational rows and columns.
pub fn restrict(op: &Operator) -> Op4 {
    let mut out = Op4::zeros();
    for (a, &i) in COMPUTATIONAL.iter().enumerate() {
        for (b, &j) in COMPUTATIONAL.iter().enumerate() {
            out[(a, b)] = op[(i, j)];
        }
    }
    out
}

/// Embeds a computational-block matrix into the 6-dim space (zeros elsewhere).
pub fn embed(op: &Op4) -> Operator {
    let mut out = Operator::zeros();
    for (a, &i) in COMPUTATIONAL.iter().enumerate() {
        for (b, &j) in COMPUTATIONAL.iter().enumerate() {
            out[(i, j)] = op[(a, b)];
        }
    }
    out
}

pub fn embed_state(psi: &State4) -> StateVector {
    let mut out = StateVector::zeros();
    for (a, &i) in COMPUTATIONAL.iter().enumerate() {
        out[i] = psi[a];
    }
    out
}

/// Worst-case population leaving the computational block for computational inputs.
pub fn leakage(u: &Operator) -> f64 {
    COMPUTATIONAL
        .iter()
        .map(|&j| {
            let kept: f64 = COMPUTATIONAL.iter().map(|&i| u[(i, j)].norm_sqr()).sum();
            1.0 - kept
        })
        .fold(0.0, f64::max)
}

/// Hermitian PSD square root via eigendecomposition (negative eigenvalues clipped).
pub fn sqrtm_psd(m: &Op4) -> Result<Op4, LinalgError> {
    let (vals, vecs) = hermitian_eigen(m)?;
    let mut scaled = vecs;
    for (j, lam) in vals.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        for v in scaled.column_mut(j).iter_mut() {
            *v *= s;
        }
    }
    Ok(scaled * vecs.adjoint())
}

/// Uhlmann fidelity (tr sqrt(sqrt(a) b sqrt(a)))^2.
pub fn state_fidelity(a: &Op4, b: &Op4) -> Result<f64, LinalgError> {
    let sa = sqrtm_psd(a)?;
    let inner = sa * b * sa;
    let (vals, _) = hermitian_eigen(&inner)?;
    let s: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok(s * s)
}

pub fn is_density_matrix<D>(m: &OMatrix<C64, D, D>, tol: f64) -> bool
where
    D: Dim + DimSub<U1>,
    DefaultAllocator: Allocator<D, D>
        + Allocator<D>
        + Allocator<DimDiff<D, U1>>
        + Allocator<D, DimDiff<D, U1>>,
{
    let herm = frobenius(&(m - m.adjoint())) < tol;
    herm && (m.trace().re - 1.0).abs() < tol && min_eigenvalue(m) > -tol
}
