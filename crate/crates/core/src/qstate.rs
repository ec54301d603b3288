//! Finite-dimensional quantum states and the distance measures used to
//! compare them: Uhlmann fidelity, trace distance, sine distance and the
//! Bures angle.
//!
//! Density operators are validated on construction (Hermitian within
//! `1e-9`, eigenvalues `>= -1e-9`, trace `<= 1 + 1e-9`). Subnormalized
//! operators are accepted and reported through [`DensityOperator::is_normalized`];
//! the distance measures themselves require normalized inputs.

use nalgebra::SVD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, c, CMatrix, CVector, ONE};

/// Tolerance applied to all structural checks on states.
pub const STATE_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum StateError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("operator is not Hermitian (defect {0:.3e})")]
    NotHermitian(f64),
    #[error("negative eigenvalue {0:.3e}")]
    NegativeEigenvalue(f64),
    #[error("trace {0} exceeds one")]
    TraceExceedsOne(f64),
    #[error("state is not normalized (trace {0})")]
    NotNormalized(f64),
    #[error("cannot combine a pure state with a density operator")]
    KindMismatch,
    #[error("invalid subsystem selection {0:?}")]
    InvalidSubsystem(Vec<usize>),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("vector has zero norm")]
    ZeroNorm,
}

pub type Result<T> = std::result::Result<T, StateError>;

/// Dimension of a single subsystem (`d >= 2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HilbertDim(usize);

impl HilbertDim {
    pub const QUBIT: HilbertDim = HilbertDim(2);

    pub fn new(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(StateError::InvalidParameter(format!("dimension {d} < 2")));
        }
        Ok(HilbertDim(d))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl Default for HilbertDim {
    fn default() -> Self {
        Self::QUBIT
    }
}

fn check_dims(total: usize, dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.contains(&0) || dims.iter().product::<usize>() != total {
        return Err(StateError::DimensionMismatch(format!(
            "subsystem dims {dims:?} do not multiply to {total}"
        )));
    }
    Ok(())
}

/// Positive semidefinite operator with trace at most one.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    matrix: CMatrix,
    dims: Vec<usize>,
}

impl DensityOperator {
    pub fn new(matrix: CMatrix, dims: Vec<usize>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(StateError::DimensionMismatch("matrix is not square".into()));
        }
        check_dims(matrix.nrows(), &dims)?;
        let defect = linalg::hermiticity_defect(&matrix);
        if defect > STATE_TOL {
            return Err(StateError::NotHermitian(defect));
        }
        let matrix = linalg::hermitize(&matrix);
        let min_eig = linalg::eigvalsh(&matrix).first().copied().unwrap_or(0.0);
        if min_eig < -STATE_TOL {
            return Err(StateError::NegativeEigenvalue(min_eig));
        }
        let tr = matrix.trace().re;
        if tr > 1.0 + STATE_TOL {
            return Err(StateError::TraceExceedsOne(tr));
        }
        Ok(Self { matrix, dims })
    }

    /// Single-system operator of dimension `matrix.nrows()`.
    pub fn single(matrix: CMatrix) -> Result<Self> {
        let d = matrix.nrows();
        Self::new(matrix, vec![d])
    }

    pub fn from_pure(psi: &PureState) -> Self {
        Self {
            matrix: linalg::projector(&psi.vector),
            dims: psi.dims.clone(),
        }
    }

    pub fn maximally_mixed(d: HilbertDim) -> Self {
        let n = d.get();
        Self {
            matrix: linalg::identity(n) * c(1.0 / n as f64, 0.0),
            dims: vec![n],
        }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    pub fn is_normalized(&self) -> bool {
        (self.trace() - 1.0).abs() <= STATE_TOL
    }

    pub fn normalized(&self) -> Result<Self> {
        let tr = self.trace();
        if tr <= 0.0 {
            return Err(StateError::NotNormalized(tr));
        }
        Ok(Self {
            matrix: &self.matrix * c(1.0 / tr, 0.0),
            dims: self.dims.clone(),
        })
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        linalg::eigvalsh(&self.matrix)
    }

    pub fn purity(&self) -> f64 {
        (&self.matrix * &self.matrix).trace().re
    }

    pub fn expectation(&self, obs: &Observable) -> Result<f64> {
        if obs.dim() != self.dim() {
            return Err(StateError::DimensionMismatch(format!(
                "observable dim {} vs state dim {}",
                obs.dim(),
                self.dim()
            )));
        }
        Ok((&self.matrix * obs.matrix()).trace().re)
    }

    pub fn tensor(&self, other: &DensityOperator) -> DensityOperator {
        let mut dims = self.dims.clone();
        dims.extend_from_slice(&other.dims);
        DensityOperator {
            matrix: linalg::kron(&self.matrix, &other.matrix),
            dims,
        }
    }

    /// `U rho U^dagger` for a unitary on the full space.
    pub fn conjugate_by(&self, unitary: &CMatrix) -> Result<Self> {
        if unitary.nrows() != self.dim() || unitary.ncols() != self.dim() {
            return Err(StateError::DimensionMismatch("unitary size".into()));
        }
        Ok(Self {
            matrix: linalg::hermitize(&linalg::sandwich(unitary, &self.matrix)),
            dims: self.dims.clone(),
        })
    }

    /// Builds an operator without validation. Callers guarantee positivity.
    pub(crate) fn from_trusted(matrix: CMatrix, dims: Vec<usize>) -> Self {
        Self {
            matrix: linalg::hermitize(&matrix),
            dims,
        }
    }
}

/// Unit vector together with its subsystem structure.
#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    vector: CVector,
    dims: Vec<usize>,
}

impl PureState {
    pub fn new(vector: CVector, dims: Vec<usize>) -> Result<Self> {
        check_dims(vector.len(), &dims)?;
        let norm = vector.norm();
        if (norm - 1.0).abs() > STATE_TOL {
            return Err(StateError::NotNormalized(norm * norm));
        }
        Ok(Self { vector, dims })
    }

    /// Normalizes `vector` before wrapping it.
    pub fn normalize(vector: CVector, dims: Vec<usize>) -> Result<Self> {
        check_dims(vector.len(), &dims)?;
        let norm = vector.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(StateError::ZeroNorm);
        }
        Ok(Self {
            vector: vector / c(norm, 0.0),
            dims,
        })
    }

    pub fn basis(d: HilbertDim, i: usize) -> Result<Self> {
        if i >= d.get() {
            return Err(StateError::InvalidParameter(format!("basis index {i} out of range")));
        }
        Ok(Self {
            vector: linalg::ket(d.get(), i),
            dims: vec![d.get()],
        })
    }

    /// `|+> = (|0> + |1>)/sqrt 2`.
    pub fn plus() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            vector: CVector::from_vec(vec![c(s, 0.0), c(s, 0.0)]),
            dims: vec![2],
        }
    }

    pub fn vector(&self) -> &CVector {
        &self.vector
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn tensor(&self, other: &PureState) -> PureState {
        let mut dims = self.dims.clone();
        dims.extend_from_slice(&other.dims);
        PureState {
            vector: linalg::kron_vec(&self.vector, &other.vector),
            dims,
        }
    }

    pub fn to_density(&self) -> DensityOperator {
        DensityOperator::from_pure(self)
    }
}

/// Either kind of state, for operations that must reject mixed kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantumState {
    Pure(PureState),
    Mixed(DensityOperator),
}

impl QuantumState {
    pub fn to_density(&self) -> DensityOperator {
        match self {
            QuantumState::Pure(p) => p.to_density(),
            QuantumState::Mixed(m) => m.clone(),
        }
    }
}

/// Tensor product of two states of the same kind.
pub fn tensor(a: &QuantumState, b: &QuantumState) -> Result<QuantumState> {
    match (a, b) {
        (QuantumState::Pure(x), QuantumState::Pure(y)) => Ok(QuantumState::Pure(x.tensor(y))),
        (QuantumState::Mixed(x), QuantumState::Mixed(y)) => Ok(QuantumState::Mixed(x.tensor(y))),
        _ => Err(StateError::KindMismatch),
    }
}

/// Hermitian operator with its spectral projectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Observable {
    matrix: CMatrix,
}

impl Observable {
    pub fn new(matrix: CMatrix) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(StateError::DimensionMismatch("observable is not square".into()));
        }
        let defect = linalg::hermiticity_defect(&matrix);
        if defect > STATE_TOL {
            return Err(StateError::NotHermitian(defect));
        }
        Ok(Self {
            matrix: linalg::hermitize(&matrix),
        })
    }

    pub fn pauli_x() -> Self {
        Self {
            matrix: linalg::pauli_x(),
        }
    }

    pub fn pauli_y() -> Self {
        Self {
            matrix: linalg::pauli_y(),
        }
    }

    pub fn pauli_z() -> Self {
        Self {
            matrix: linalg::pauli_z(),
        }
    }

    /// `cos(theta) Z + sin(theta) X`.
    pub fn xz_plane(theta: f64) -> Self {
        Self {
            matrix: linalg::pauli_z() * c(theta.cos(), 0.0) + linalg::pauli_x() * c(theta.sin(), 0.0),
        }
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn negated(&self) -> Self {
        Self { matrix: -&self.matrix }
    }

    /// Spectral decomposition as `(eigenvalue, projector)` pairs, grouping
    /// eigenvalues that agree within [`STATE_TOL`]. Sorted by eigenvalue.
    pub fn spectral_projectors(&self) -> Vec<(f64, CMatrix)> {
        let (values, vectors) = linalg::eigh(&self.matrix);
        let mut out: Vec<(f64, CMatrix)> = Vec::new();
        for (k, &lam) in values.iter().enumerate() {
            let col = vectors.column(k);
            let p = col * col.adjoint();
            match out.last_mut() {
                Some((v, proj)) if (lam - *v).abs() <= STATE_TOL => *proj += p,
                _ => out.push((lam, p)),
            }
        }
        out
    }

    /// Projectors `[M_0, M_1]` onto the `+1` and `-1` eigenspaces of a
    /// dichotomic (`O^2 = I`) observable.
    pub fn dichotomic_projectors(&self) -> Result<[CMatrix; 2]> {
        let d = self.dim();
        let sq = &self.matrix * &self.matrix;
        if linalg::max_abs_diff(&sq, &linalg::identity(d)) > STATE_TOL {
            return Err(StateError::InvalidParameter("observable is not dichotomic".into()));
        }
        let id = linalg::identity(d);
        Ok([(&id + &self.matrix) * c(0.5, 0.0), (&id - &self.matrix) * c(0.5, 0.0)])
    }
}

/// Keeps the subsystems listed in `keep` (sorted ascending, no repeats).
pub fn partial_trace(rho: &DensityOperator, keep: &[usize]) -> Result<DensityOperator> {
    let n = rho.dims.len();
    let sorted = keep.windows(2).all(|w| w[0] < w[1]);
    if keep.is_empty() || !sorted || keep.iter().any(|&k| k >= n) {
        return Err(StateError::InvalidSubsystem(keep.to_vec()));
    }
    let reduced = linalg::partial_trace(&rho.matrix, &rho.dims, keep);
    Ok(DensityOperator::from_trusted(
        reduced,
        keep.iter().map(|&k| rho.dims[k]).collect(),
    ))
}

fn require_normalized(rho: &DensityOperator) -> Result<()> {
    if !rho.is_normalized() {
        return Err(StateError::NotNormalized(rho.trace()));
    }
    Ok(())
}

fn require_same_dim(rho: &DensityOperator, sigma: &DensityOperator) -> Result<()> {
    if rho.dim() != sigma.dim() {
        return Err(StateError::DimensionMismatch(format!(
            "{} vs {}",
            rho.dim(),
            sigma.dim()
        )));
    }
    Ok(())
}

/// Returns the dominant eigenvector if the spectrum is numerically rank one.
fn rank_one_vector(m: &CMatrix) -> Result<Option<CVector>> {
    let (values, vectors) = linalg::eigh(m);
    let min = values.first().copied().unwrap_or(0.0);
    if min < -STATE_TOL {
        return Err(StateError::NegativeEigenvalue(min));
    }
    let n = values.len();
    let top = values[n - 1];
    let rest: f64 = values[..n - 1].iter().map(|v| v.abs()).sum();
    if rest <= linalg::roundoff_floor(&values) * n as f64 {
        let v = vectors.column(n - 1).into_owned() * c(top.max(0.0).sqrt(), 0.0);
        return Ok(Some(v));
    }
    Ok(None)
}

/// Uhlmann fidelity `(Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2`, clamped to `[0, 1]`.
pub fn fidelity(rho: &DensityOperator, sigma: &DensityOperator) -> Result<f64> {
    require_same_dim(rho, sigma)?;
    require_normalized(rho)?;
    require_normalized(sigma)?;

    if let Some(v) = rank_one_vector(&rho.matrix)? {
        let f = (v.adjoint() * &sigma.matrix * &v)[(0, 0)].re;
        return Ok(f.clamp(0.0, 1.0));
    }
    if let Some(v) = rank_one_vector(&sigma.matrix)? {
        let f = (v.adjoint() * &rho.matrix * &v)[(0, 0)].re;
        return Ok(f.clamp(0.0, 1.0));
    }

    // Singular values of sqrt(rho) sqrt(sigma) avoid square roots of
    // round-off eigenvalues when either state is rank deficient.
    let product = linalg::psd_sqrt(&rho.matrix) * linalg::psd_sqrt(&sigma.matrix);
    let root_trace: f64 = product.singular_values().iter().sum();
    Ok((root_trace * root_trace).clamp(0.0, 1.0))
}

/// `D = (1/2) Tr |rho - sigma|`.
pub fn trace_distance(rho: &DensityOperator, sigma: &DensityOperator) -> Result<f64> {
    require_same_dim(rho, sigma)?;
    Ok(0.5 * linalg::trace_norm_hermitian(&(&rho.matrix - &sigma.matrix)))
}

/// `C = sqrt(1 - F)`.
pub fn sine_distance(rho: &DensityOperator, sigma: &DensityOperator) -> Result<f64> {
    Ok(sine_from_fidelity(fidelity(rho, sigma)?))
}

/// `A = arccos(sqrt F)`.
pub fn bures_angle(rho: &DensityOperator, sigma: &DensityOperator) -> Result<f64> {
    Ok(angle_from_fidelity(fidelity(rho, sigma)?))
}

pub fn sine_from_fidelity(f: f64) -> f64 {
    (1.0 - f.clamp(0.0, 1.0)).sqrt()
}

pub fn angle_from_fidelity(f: f64) -> f64 {
    f.clamp(0.0, 1.0).sqrt().acos()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateMetrics {
    pub fidelity: f64,
    pub trace_distance: f64,
    pub sine_distance: f64,
    pub bures_angle: f64,
}

pub fn metrics(rho: &DensityOperator, sigma: &DensityOperator) -> Result<StateMetrics> {
    let f = fidelity(rho, sigma)?;
    Ok(StateMetrics {
        fidelity: f,
        trace_distance: trace_distance(rho, sigma)?,
        sine_distance: sine_from_fidelity(f),
        bures_angle: angle_from_fidelity(f),
    })
}

/// `psi = sum_k s_k |u_k> |v_k>` with `s` sorted in descending order.
#[derive(Debug, Clone)]
pub struct SchmidtDecomposition {
    pub coefficients: Vec<f64>,
    /// Columns are the `|u_k>` on the first factor.
    pub left: CMatrix,
    /// Columns are the `|v_k>` on the second factor.
    pub right: CMatrix,
}

impl SchmidtDecomposition {
    pub fn rank(&self, tol: f64) -> usize {
        self.coefficients.iter().filter(|&&s| s > tol).count()
    }

    pub fn reconstruct(&self) -> CVector {
        let da = self.left.nrows();
        let db = self.right.nrows();
        let mut out = CVector::zeros(da * db);
        for (k, &s) in self.coefficients.iter().enumerate() {
            let u = self.left.column(k).into_owned();
            let v = self.right.column(k).into_owned();
            out += linalg::kron_vec(&u, &v) * c(s, 0.0);
        }
        out
    }
}

/// Schmidt decomposition of a bipartite pure state.
pub fn schmidt_decompose(psi: &PureState) -> Result<SchmidtDecomposition> {
    if psi.dims.len() != 2 {
        return Err(StateError::DimensionMismatch(format!(
            "Schmidt decomposition needs two subsystems, got {:?}",
            psi.dims
        )));
    }
    let (da, db) = (psi.dims[0], psi.dims[1]);
    let coeffs = CMatrix::from_fn(da, db, |i, j| psi.vector[i * db + j]);
    let svd = SVD::new(coeffs, true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let coefficients = order.iter().map(|&i| svd.singular_values[i]).collect();
    let left = CMatrix::from_fn(da, k, |r, col| u[(r, order[col])]);
    // psi_ij = sum_k s_k U_ik (V^dagger)_kj, so the second-factor vector is row k of V^dagger.
    let right = CMatrix::from_fn(db, k, |r, col| v_t[(order[col], r)]);
    Ok(SchmidtDecomposition {
        coefficients,
        left,
        right,
    })
}

/// Named two-qubit and reference states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NamedState {
    /// `0: Phi+, 1: Phi-, 2: Psi+, 3: Psi-`.
    Bell {
        index: u8,
    },
    /// `v |Phi+><Phi+| + (1 - v) I/4`.
    Werner {
        visibility: f64,
    },
    MaximallyMixed {
        dim: usize,
    },
}

pub fn bell_state(index: u8) -> Result<PureState> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let (a, b, sign) = match index {
        0 => (0, 3, 1.0),
        1 => (0, 3, -1.0),
        2 => (1, 2, 1.0),
        3 => (1, 2, -1.0),
        _ => return Err(StateError::InvalidParameter(format!("Bell index {index} > 3"))),
    };
    let mut v = CVector::zeros(4);
    v[a] = c(s, 0.0);
    v[b] = c(sign * s, 0.0);
    Ok(PureState {
        vector: v,
        dims: vec![2, 2],
    })
}

pub fn werner(visibility: f64) -> Result<DensityOperator> {
    if !(-1.0 / 3.0 - STATE_TOL..=1.0 + STATE_TOL).contains(&visibility) {
        return Err(StateError::InvalidParameter(format!(
            "Werner visibility {visibility} outside [-1/3, 1]"
        )));
    }
    let phi = linalg::projector(bell_state(0)?.vector());
    let m = phi * c(visibility, 0.0) + linalg::identity(4) * c((1.0 - visibility) / 4.0, 0.0);
    DensityOperator::new(m, vec![2, 2])
}

pub fn make_named_state(state: NamedState) -> Result<DensityOperator> {
    match state {
        NamedState::Bell { index } => Ok(bell_state(index)?.to_density()),
        NamedState::Werner { visibility } => werner(visibility),
        NamedState::MaximallyMixed { dim } => Ok(DensityOperator::maximally_mixed(HilbertDim::new(dim)?)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomStateKind {
    HaarPure,
    /// Hilbert-Schmidt distributed full-rank mixed state.
    Mixed,
}

fn gaussian_complex<R: Rng + ?Sized>(rng: &mut R) -> num_complex::Complex64 {
    c(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Haar-random unit vector in `C^d`.
pub fn haar_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> CVector {
    loop {
        let v = CVector::from_fn(d, |_, _| gaussian_complex(rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / c(n, 0.0);
        }
    }
}

pub fn haar_pure<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> PureState {
    let d = dims.iter().product();
    PureState {
        vector: haar_vector(d, rng),
        dims: dims.to_vec(),
    }
}

/// Hilbert-Schmidt random density operator (`G G^dagger / Tr`, Ginibre `G`).
pub fn random_mixed<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> DensityOperator {
    let d: usize = dims.iter().product();
    let g = CMatrix::from_fn(d, d, |_, _| gaussian_complex(rng));
    let m = &g * g.adjoint();
    let tr = m.trace().re;
    DensityOperator::from_trusted(m / c(tr, 0.0), dims.to_vec())
}

/// Haar-random unitary via QR of a Ginibre matrix with phase correction.
pub fn haar_unitary<R: Rng + ?Sized>(d: usize, rng: &mut R) -> CMatrix {
    let g = CMatrix::from_fn(d, d, |_, _| gaussian_complex(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        let diag = r[(j, j)];
        let phase = if diag.norm() > 0.0 {
            diag / c(diag.norm(), 0.0)
        } else {
            ONE
        };
        for i in 0..d {
            q[(i, j)] *= phase;
        }
    }
    q
}

/// Seeded random state of dimension `d`.
pub fn sample_random(kind: RandomStateKind, d: HilbertDim, seed: u64) -> QuantumState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        RandomStateKind::HaarPure => QuantumState::Pure(haar_pure(&[d.get()], &mut rng)),
        RandomStateKind::Mixed => QuantumState::Mixed(random_mixed(&[d.get()], &mut rng)),
    }
}
