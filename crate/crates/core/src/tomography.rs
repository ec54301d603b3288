//! Two-qubit state and qubit process tomography.
//!
//! Data come from the nine local Pauli-pair settings with four outcomes
//! each. Reconstruction is least-squares linear inversion followed by the
//! fast maximum-likelihood eigenvalue projection.

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, c, CMatrix};
use crate::qchannel::{self, ChannelError, KrausChannel};
use crate::qstate::{self, DensityOperator, StateError};

#[derive(Debug, thiserror::Error)]
pub enum TomoError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("design matrix has rank {rank} < 16")]
    RankDeficient { rank: usize },
    #[error("expected a two-qubit state, got dims {0:?}")]
    NotTwoQubit(Vec<usize>),
    #[error("optimizer failed: {0}")]
    Optimizer(String),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

pub type Result<T> = std::result::Result<T, TomoError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pauli {
    X,
    Y,
    Z,
}

impl Pauli {
    pub const ALL: [Pauli; 3] = [Pauli::X, Pauli::Y, Pauli::Z];

    pub fn matrix(self) -> CMatrix {
        match self {
            Pauli::X => linalg::pauli_x(),
            Pauli::Y => linalg::pauli_y(),
            Pauli::Z => linalg::pauli_z(),
        }
    }

    fn letter(self) -> char {
        match self {
            Pauli::X => 'X',
            Pauli::Y => 'Y',
            Pauli::Z => 'Z',
        }
    }

    fn from_letter(ch: char) -> Option<Self> {
        match ch {
            'X' => Some(Pauli::X),
            'Y' => Some(Pauli::Y),
            'Z' => Some(Pauli::Z),
            _ => None,
        }
    }
}

/// Local measurement bases for both qubits, serialized as e.g. `"XZ"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Setting(pub Pauli, pub Pauli);

impl From<Setting> for String {
    fn from(s: Setting) -> String {
        s.label()
    }
}

impl TryFrom<String> for Setting {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        let letters: Vec<char> = s.chars().collect();
        match letters.as_slice() {
            [a, b] => Pauli::from_letter(*a)
                .zip(Pauli::from_letter(*b))
                .map(|(a, b)| Setting(a, b))
                .ok_or_else(|| format!("bad setting label {s:?}")),
            _ => Err(format!("bad setting label {s:?}")),
        }
    }
}

impl Setting {
    pub fn label(self) -> String {
        [self.0.letter(), self.1.letter()].iter().collect()
    }

    /// Outcome projectors ordered `(+,+), (+,-), (-,+), (-,-)`, with both
    /// local bases rotated by `misalignment` radians.
    pub fn projectors(self, misalignment: f64) -> [CMatrix; 4] {
        let rot = misalignment_rotation(misalignment);
        let local = |p: Pauli| -> [CMatrix; 2] {
            let obs = &rot * p.matrix() * rot.adjoint();
            let id = linalg::identity(2);
            [(&id + &obs) * c(0.5, 0.0), (&id - &obs) * c(0.5, 0.0)]
        };
        let (a, b) = (local(self.0), local(self.1));
        [
            linalg::kron(&a[0], &b[0]),
            linalg::kron(&a[0], &b[1]),
            linalg::kron(&a[1], &b[0]),
            linalg::kron(&a[1], &b[1]),
        ]
    }
}

/// Rotation by `theta` about the `(1,1,1)/sqrt(3)` axis.
fn misalignment_rotation(theta: f64) -> CMatrix {
    let n = (linalg::pauli_x() + linalg::pauli_y() + linalg::pauli_z()) * c(1.0 / 3f64.sqrt(), 0.0);
    linalg::identity(2) * c((theta / 2.0).cos(), 0.0) - n * c(0.0, (theta / 2.0).sin())
}

/// The nine Pauli-pair settings `XX, XY, ..., ZZ`.
pub fn pauli_settings() -> Vec<Setting> {
    Pauli::ALL
        .iter()
        .flat_map(|&a| Pauli::ALL.iter().map(move |&b| Setting(a, b)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TomographyDataset {
    pub settings: Vec<Setting>,
    pub shots: u64,
    pub counts: Vec<[u64; 4]>,
    /// Exact outcome probabilities for noiseless datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<[f64; 4]>>,
}

impl TomographyDataset {
    /// Per-setting outcome frequencies.
    pub fn frequencies(&self) -> Vec<[f64; 4]> {
        if let Some(p) = &self.probabilities {
            return p.clone();
        }
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                let denom = if total > 0 { total as f64 } else { 1.0 };
                row.map(|n| n as f64 / denom)
            })
            .collect()
    }
}

fn born(rho: &DensityOperator, setting: Setting, misalignment: f64) -> [f64; 4] {
    let proj = setting.projectors(misalignment);
    let mut p = [0.0; 4];
    for (slot, m) in p.iter_mut().zip(&proj) {
        *slot = (rho.matrix() * m).trace().re.max(0.0);
    }
    let total: f64 = p.iter().sum();
    p.map(|x| x / total)
}

fn require_two_qubit(rho: &DensityOperator) -> Result<()> {
    if rho.dims() != [2, 2] {
        return Err(TomoError::NotTwoQubit(rho.dims().to_vec()));
    }
    Ok(())
}

/// Multinomial counts for each setting.
pub fn simulate_counts(
    rho: &DensityOperator,
    settings: &[Setting],
    shots: u64,
    seed: u64,
    misalignment: f64,
) -> Result<TomographyDataset> {
    require_two_qubit(rho)?;
    if shots == 0 {
        return Err(TomoError::InvalidParameter("shots must be >= 1".into()));
    }
    let counts = settings
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            multinomial(&mut rng, shots, &born(rho, s, misalignment))
        })
        .collect();
    Ok(TomographyDataset {
        settings: settings.to_vec(),
        shots,
        counts,
        probabilities: None,
    })
}

fn multinomial<R: Rng>(rng: &mut R, n: u64, p: &[f64; 4]) -> [u64; 4] {
    let mut out = [0u64; 4];
    let mut left = n;
    let mut mass = 1.0;
    for i in 0..3 {
        if left == 0 {
            break;
        }
        let pi = if mass > 0.0 { (p[i] / mass).clamp(0.0, 1.0) } else { 0.0 };
        let draw = Binomial::new(left, pi).expect("probability in [0,1]").sample(rng);
        out[i] = draw;
        left -= draw;
        mass -= p[i];
    }
    out[3] = left;
    out
}

/// Noiseless dataset carrying exact probabilities.
pub fn exact_dataset(rho: &DensityOperator, settings: &[Setting], shots: u64) -> Result<TomographyDataset> {
    require_two_qubit(rho)?;
    let probabilities: Vec<[f64; 4]> = settings.iter().map(|&s| born(rho, s, 0.0)).collect();
    let counts = probabilities
        .iter()
        .map(|p| p.map(|x| (x * shots as f64).round() as u64))
        .collect();
    Ok(TomographyDataset {
        settings: settings.to_vec(),
        shots,
        counts,
        probabilities: Some(probabilities),
    })
}

fn pauli_basis() -> [CMatrix; 4] {
    [
        linalg::identity(2),
        linalg::pauli_x(),
        linalg::pauli_y(),
        linalg::pauli_z(),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearEstimate {
    pub matrix: CMatrix,
    pub min_eigenvalue: f64,
}

impl LinearEstimate {
    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue >= -1e-12
    }
}

/// Least-squares fit of the 16 Pauli coefficients to the frequencies.
pub fn linear_inversion(dataset: &TomographyDataset) -> Result<LinearEstimate> {
    if dataset.counts.len() != dataset.settings.len() {
        return Err(TomoError::InvalidParameter("one count row per setting required".into()));
    }
    let basis = pauli_basis();
    let ops: Vec<CMatrix> = basis
        .iter()
        .flat_map(|a| basis.iter().map(move |b| linalg::kron(a, b)))
        .collect();
    let freqs = dataset.frequencies();
    let rows = 4 * dataset.settings.len();
    let mut design = nalgebra::DMatrix::<f64>::zeros(rows, 16);
    let mut rhs = nalgebra::DVector::<f64>::zeros(rows);
    for (i, &s) in dataset.settings.iter().enumerate() {
        for (j, proj) in s.projectors(0.0).iter().enumerate() {
            for (col, op) in ops.iter().enumerate() {
                design[(4 * i + j, col)] = (proj * op).trace().re / 4.0;
            }
            rhs[4 * i + j] = freqs[i][j];
        }
    }
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
    if rank < 16 {
        return Err(TomoError::RankDeficient { rank });
    }
    let coeffs = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| TomoError::InvalidParameter(e.to_string()))?;
    let matrix = ops
        .iter()
        .zip(coeffs.iter())
        .fold(CMatrix::zeros(4, 4), |acc, (op, &r)| acc + op * c(r / 4.0, 0.0));
    let matrix = linalg::hermitize(&matrix);
    let min_eigenvalue = linalg::eigvalsh(&matrix)[0];
    Ok(LinearEstimate { matrix, min_eigenvalue })
}

/// Fast maximum-likelihood projection: zero negative eigenvalues and
/// spread the deficit equally over the remaining ones.
pub fn mle_project(matrix: &CMatrix, dims: Vec<usize>) -> Result<DensityOperator> {
    let (values, vectors) = linalg::eigh(&linalg::hermitize(matrix));
    let d = values.len();
    // Descending order.
    let mut mu: Vec<f64> = values.iter().rev().copied().collect();
    let mut acc = 0.0;
    let mut i = d;
    while i > 0 && mu[i - 1] + (acc / i as f64) < 0.0 {
        acc += mu[i - 1];
        mu[i - 1] = 0.0;
        i -= 1;
    }
    for m in mu.iter_mut().take(i) {
        *m += acc / i as f64;
    }
    let ascending: Vec<f64> = mu.into_iter().rev().collect();
    let rho = linalg::spectral_map(&ascending, &vectors, |x| x);
    let rho = rho.clone() * c(1.0 / linalg::trace(&rho).re, 0.0);
    Ok(DensityOperator::new(linalg::hermitize(&rho), dims)?)
}

/// `Rz(a) Ry(b) Rz(g)`.
pub fn su2_from_angles(angles: &[f64]) -> CMatrix {
    let rz = |t: f64| {
        let mut m = CMatrix::zeros(2, 2);
        m[(0, 0)] = c(0.0, -t / 2.0).exp();
        m[(1, 1)] = c(0.0, t / 2.0).exp();
        m
    };
    let b = angles[1] / 2.0;
    let ry = CMatrix::from_row_slice(
        2,
        2,
        &[c(b.cos(), 0.0), c(-b.sin(), 0.0), c(b.sin(), 0.0), c(b.cos(), 0.0)],
    );
    rz(angles[0]) * ry * rz(angles[2])
}

fn local_fidelity(rho: &CMatrix, u: &CMatrix) -> f64 {
    let phi = linalg::max_entangled(2);
    let v = linalg::kron(&linalg::identity(2), &u.adjoint()) * phi;
    (v.adjoint() * rho * &v)[(0, 0)].re
}

struct LocalFidelityCost<'a> {
    rho: &'a CMatrix,
}

impl CostFunction for LocalFidelityCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(-local_fidelity(self.rho, &su2_from_angles(p)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BellFidelity {
    /// Best `<Phi+|(I x U) rho (I x U)^dag|Phi+>` found.
    pub f_max: f64,
    pub unitary: CMatrix,
    pub angles: [f64; 3],
    /// Closed-form maximum over maximally entangled states.
    pub fully_entangled_fraction: f64,
}

pub const OPTIMIZER_STARTS: usize = 24;
pub const OPTIMIZER_TOLERANCE: f64 = 1e-9;
pub const OPTIMIZER_MAX_ITERS: u64 = 500;

/// Maximizes the fidelity to `Phi+` over a local unitary on qubit 2.
pub fn bell_fidelity_opt(rho: &DensityOperator) -> Result<BellFidelity> {
    require_two_qubit(rho)?;
    let m = rho.matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let tau = std::f64::consts::TAU;
    let starts: Vec<Vec<f64>> = (0..OPTIMIZER_STARTS)
        .map(|i| {
            if i == 0 {
                vec![0.0; 3]
            } else {
                vec![
                    rng.random::<f64>() * tau,
                    rng.random::<f64>() * std::f64::consts::PI,
                    rng.random::<f64>() * tau,
                ]
            }
        })
        .collect();
    let results = starts
        .par_iter()
        .map(|x0| {
            let mut simplex = vec![x0.clone()];
            for d in 0..3 {
                let mut p = x0.clone();
                p[d] += 0.5;
                simplex.push(p);
            }
            let solver = NelderMead::new(simplex)
                .with_sd_tolerance(OPTIMIZER_TOLERANCE)
                .map_err(|e| TomoError::Optimizer(e.to_string()))?;
            let res = Executor::new(LocalFidelityCost { rho: m }, solver)
                .configure(|state| state.max_iters(OPTIMIZER_MAX_ITERS))
                .run()
                .map_err(|e| TomoError::Optimizer(e.to_string()))?;
            let best = res
                .state()
                .best_param
                .clone()
                .ok_or_else(|| TomoError::Optimizer("no parameter".into()))?;
            Ok((local_fidelity(m, &su2_from_angles(&best)), best))
        })
        .collect::<Result<Vec<_>>>()?;
    let (f_max, best) = results.into_iter().fold(
        (f64::NEG_INFINITY, vec![0.0; 3]),
        |acc, r| if r.0 > acc.0 { r } else { acc },
    );
    Ok(BellFidelity {
        f_max,
        unitary: su2_from_angles(&best),
        angles: [best[0], best[1], best[2]],
        fully_entangled_fraction: fully_entangled_fraction(rho)?,
    })
}

/// Largest eigenvalue of the real part of `rho` in the magic basis.
pub fn fully_entangled_fraction(rho: &DensityOperator) -> Result<f64> {
    require_two_qubit(rho)?;
    let s = 1.0 / 2f64.sqrt();
    let magic = CMatrix::from_row_slice(
        4,
        4,
        &[
            c(s, 0.0),
            c(0.0, s),
            c(0.0, 0.0),
            c(0.0, 0.0),
            c(0.0, 0.0),
            c(0.0, 0.0),
            c(0.0, s),
            c(s, 0.0),
            c(0.0, 0.0),
            c(0.0, 0.0),
            c(0.0, s),
            c(-s, 0.0),
            c(s, 0.0),
            c(0.0, -s),
            c(0.0, 0.0),
            c(0.0, 0.0),
        ],
    );
    let in_magic = magic.adjoint() * rho.matrix() * &magic;
    let real = in_magic.map(|z| c(z.re, 0.0));
    Ok(*linalg::eigvalsh(&real).last().expect("non-empty"))
}

/// Linear inversion followed by the MLE projection.
pub fn reconstruct_state(dataset: &TomographyDataset) -> Result<DensityOperator> {
    mle_project(&linear_inversion(dataset)?.matrix, vec![2, 2])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McErrorbars {
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
}

/// Poisson resampling of the counts, repeating the full reconstruction and
/// fidelity optimization per trial.
pub fn mc_errorbars(dataset: &TomographyDataset, trials: usize, seed: u64) -> Result<McErrorbars> {
    if trials < 2 {
        return Err(TomoError::InvalidParameter("trials must be >= 2".into()));
    }
    let values = (0..trials)
        .into_par_iter()
        .map(|i| {
            let resampled = if dataset.probabilities.is_some() {
                dataset.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let counts = dataset
                    .counts
                    .iter()
                    .map(|row| {
                        row.map(|n| {
                            if n == 0 {
                                0
                            } else {
                                Poisson::new(n as f64).expect("positive mean").sample(&mut rng) as u64
                            }
                        })
                    })
                    .collect();
                TomographyDataset {
                    counts,
                    ..dataset.clone()
                }
            };
            Ok(bell_fidelity_opt(&reconstruct_state(&resampled)?)?.f_max)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = values.iter().sum::<f64>() / trials as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    Ok(McErrorbars {
        mean,
        std: var.sqrt(),
        trials,
    })
}

/// JSON report for a reconstructed state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateReport {
    pub matrix: Vec<Vec<[f64; 2]>>,
    #[serde(rename = "F_i")]
    pub f_i: f64,
    #[serde(rename = "F_i_std")]
    pub f_i_std: f64,
}

pub fn state_report(dataset: &TomographyDataset, trials: usize, seed: u64) -> Result<StateReport> {
    let rho = reconstruct_state(dataset)?;
    let point = bell_fidelity_opt(&rho)?;
    let bars = mc_errorbars(dataset, trials, seed)?;
    Ok(StateReport {
        matrix: linalg::to_pairs(rho.matrix()),
        f_i: point.f_max,
        f_i_std: bars.std,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiTomography {
    pub choi_estimate: DensityOperator,
    /// Fidelity of the estimate to the identity channel's Choi state.
    pub f_j: f64,
    pub c_j: f64,
    /// `min(1, d C_J)`.
    pub diamond_sine_bound: f64,
    /// `1 - (d C_J)^2`, floored at 0.
    pub diamond_fidelity_bound: f64,
}

/// Tomography of `(E x I)[Phi+]` against the identity reference. `shots =
/// None` uses exact probabilities.
pub fn process_choi_tomography(ch: &KrausChannel, shots: Option<u64>, seed: u64) -> Result<ChoiTomography> {
    if ch.d_in() != 2 || ch.d_out() != 2 {
        return Err(TomoError::InvalidParameter("qubit channel required".into()));
    }
    let choi = qchannel::choi_state(ch)?;
    let settings = pauli_settings();
    let dataset = match shots {
        None => exact_dataset(&choi, &settings, 1)?,
        Some(n) => simulate_counts(&choi, &settings, n, seed, 0.0)?,
    };
    let estimate = reconstruct_state(&dataset)?;
    let reference = qstate::bell_state(0)?.to_density();
    let f_j = qstate::fidelity(&estimate, &reference)?.clamp(0.0, 1.0);
    let c_j = qstate::sine_from_fidelity(f_j);
    let sine = (2.0 * c_j).min(1.0);
    Ok(ChoiTomography {
        choi_estimate: estimate,
        f_j,
        c_j,
        diamond_sine_bound: sine,
        diamond_fidelity_bound: 1.0 - sine * sine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phi() -> DensityOperator {
        qstate::bell_state(0).unwrap().to_density()
    }

    #[test]
    fn counts_examples() {
        let zz = [Setting(Pauli::Z, Pauli::Z)];
        let d = simulate_counts(&phi(), &zz, 10_000, 1, 0.0).unwrap();
        let n = d.counts[0];
        assert_eq!(n[1] + n[2], 0);
        assert!((n[0] as f64 - 5000.0).abs() < 150.0);
        let v = 0.9;
        let xx = [Setting(Pauli::X, Pauli::X)];
        let d = simulate_counts(&qstate::werner(v).unwrap(), &xx, 100_000, 2, 0.0).unwrap();
        let p_same = (1.0 + v) / 4.0;
        let sigma = (100_000.0 * p_same * (1.0 - p_same)).sqrt();
        assert!((d.counts[0][0] as f64 - 100_000.0 * p_same).abs() < 4.0 * sigma);
        assert_eq!(d.counts[0].iter().sum::<u64>(), 100_000);
    }

    #[test]
    fn setting_labels_roundtrip() {
        let s: Vec<Setting> = serde_json::from_str(r#"["XY","ZZ"]"#).unwrap();
        assert_eq!(s, vec![Setting(Pauli::X, Pauli::Y), Setting(Pauli::Z, Pauli::Z)]);
        assert_eq!(serde_json::to_string(&s).unwrap(), r#"["XY","ZZ"]"#);
        assert!(serde_json::from_str::<Setting>(r#""XQ""#).is_err());
    }

    #[test]
    fn exact_inversion() {
        for rho in [phi(), qstate::werner(0.5).unwrap()] {
            let d = exact_dataset(&rho, &pauli_settings(), 1000).unwrap();
            let est = linear_inversion(&d).unwrap();
            assert!(linalg::max_abs_diff(&est.matrix, rho.matrix()) < 1e-12);
        }
    }

    #[test]
    fn incomplete_settings_rejected() {
        let d = exact_dataset(&phi(), &[Setting(Pauli::Z, Pauli::Z)], 10).unwrap();
        assert!(matches!(linear_inversion(&d), Err(TomoError::RankDeficient { .. })));
    }

    #[test]
    fn mle_examples() {
        let diag = |v: &[f64]| {
            CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(v.len(), v.iter().map(|&x| c(x, 0.0))))
        };
        let r = mle_project(&diag(&[1.1, -0.1]), vec![2]).unwrap();
        assert!(linalg::max_abs_diff(r.matrix(), &diag(&[1.0, 0.0])) < 1e-14);
        let r = mle_project(&diag(&[0.6, 0.5, -0.1]), vec![3]).unwrap();
        assert!(linalg::max_abs_diff(r.matrix(), &diag(&[0.55, 0.45, 0.0])) < 1e-14);
        let w = qstate::werner(0.3).unwrap();
        let r = mle_project(w.matrix(), vec![2, 2]).unwrap();
        assert!(linalg::max_abs_diff(r.matrix(), w.matrix()) < 1e-14);
    }

    #[test]
    fn bell_fidelity_examples() {
        let b = bell_fidelity_opt(&phi()).unwrap();
        assert!((b.f_max - 1.0).abs() < 1e-9);
        let minus = qstate::bell_state(1).unwrap().to_density();
        let b = bell_fidelity_opt(&minus).unwrap();
        assert!((b.f_max - 1.0).abs() < 1e-9);
        // U equals Z up to a global phase.
        let overlap = (b.unitary.adjoint() * linalg::pauli_z()).trace().norm() / 2.0;
        assert!((overlap - 1.0).abs() < 1e-6);
        let w = bell_fidelity_opt(&qstate::werner(0.9).unwrap()).unwrap();
        assert!((w.f_max - 0.925).abs() < 1e-9);
        assert!((w.fully_entangled_fraction - 0.925).abs() < 1e-12);
    }

    #[test]
    fn mc_errorbars_noiseless_and_deterministic() {
        let exact = exact_dataset(&qstate::werner(0.95).unwrap(), &pauli_settings(), 1000).unwrap();
        let r = mc_errorbars(&exact, 4, 1).unwrap();
        assert!(r.std < 1e-12);
        let d = simulate_counts(&phi(), &pauli_settings(), 100_000, 3, 0.0).unwrap();
        let a = mc_errorbars(&d, 20, 9).unwrap();
        let b = mc_errorbars(&d, 20, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.std < 1e-3, "{}", a.std);
    }

    #[test]
    fn choi_examples() {
        let id = process_choi_tomography(&qchannel::identity(2), None, 0).unwrap();
        assert!((id.f_j - 1.0).abs() < 1e-12);
        assert!(id.diamond_sine_bound < 1e-6);
        let flip = process_choi_tomography(&qchannel::pauli_flip(0.03, 0.0).unwrap(), None, 0).unwrap();
        assert!((flip.f_j - 0.97).abs() < 1e-12);
        assert!((flip.diamond_fidelity_bound - 0.88).abs() < 1e-12);
        let noisy = process_choi_tomography(&qchannel::pauli_flip(0.01, 0.0).unwrap(), Some(100_000), 5).unwrap();
        assert!(noisy.diamond_fidelity_bound >= 0.9);
    }
}
