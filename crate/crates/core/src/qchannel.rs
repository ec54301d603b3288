//! Completely positive trace-non-increasing maps in Kraus form.
//!
//! A [`KrausChannel`] maps `d_in x d_in` operators to `d_out x d_out`
//! operators. Losses are modelled by `sum_k K_k^dagger K_k < I`; the
//! transmissivity on an input is the trace of the unnormalized output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, c, CMatrix, CVector, ZERO};
use crate::qstate::{self, DensityOperator, PureState, StateError, StateMetrics};

pub const CHANNEL_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("channel has no Kraus operators")]
    Empty,
    #[error("Kraus operator shapes disagree: {0}")]
    ShapeMismatch(String),
    #[error("sum of K^dagger K exceeds identity (largest eigenvalue {0})")]
    NotTraceNonIncreasing(f64),
    #[error("invalid channel parameter: {0}")]
    InvalidParameter(String),
    #[error("mixture weights sum to {0}, expected 1")]
    WeightsNotNormalized(f64),
    #[error("channel has zero transmissivity on the maximally entangled state")]
    ZeroTransmissivity,
    #[error("reference channel is not proportional to a trace-preserving map")]
    NotProportionalToTracePreserving,
    #[error(transparent)]
    State(#[from] StateError),
}

pub type Result<T> = std::result::Result<T, ChannelError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelValidation {
    pub cptd: bool,
    pub cptp: bool,
    /// Largest eigenvalue of `sum K^dagger K`, the best-case transmissivity.
    pub max_transmissivity: f64,
}

/// Checks shapes and trace non-increase of a Kraus set.
pub fn validate(kraus: &[CMatrix]) -> Result<ChannelValidation> {
    let first = kraus.first().ok_or(ChannelError::Empty)?;
    let (d_out, d_in) = first.shape();
    if let Some(bad) = kraus.iter().find(|k| k.shape() != (d_out, d_in)) {
        return Err(ChannelError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            bad.shape(),
            (d_out, d_in)
        )));
    }
    let gram = gram(kraus);
    let values = linalg::eigvalsh(&gram);
    let t_max = values.last().copied().unwrap_or(0.0);
    let t_min = values.first().copied().unwrap_or(0.0);
    if t_max > 1.0 + CHANNEL_TOL {
        return Err(ChannelError::NotTraceNonIncreasing(t_max));
    }
    Ok(ChannelValidation {
        cptd: true,
        cptp: (t_max - 1.0).abs() <= CHANNEL_TOL && (t_min - 1.0).abs() <= CHANNEL_TOL,
        max_transmissivity: t_max,
    })
}

fn gram(kraus: &[CMatrix]) -> CMatrix {
    let d_in = kraus[0].ncols();
    kraus
        .iter()
        .fold(CMatrix::zeros(d_in, d_in), |acc, k| acc + k.adjoint() * k)
}

/// Immutable CPTD map in Kraus representation.
#[derive(Debug, Clone, PartialEq)]
pub struct KrausChannel {
    kraus: Vec<CMatrix>,
    d_in: usize,
    d_out: usize,
}

impl KrausChannel {
    pub fn new(kraus: Vec<CMatrix>) -> Result<Self> {
        validate(&kraus)?;
        let (d_out, d_in) = kraus[0].shape();
        Ok(Self { kraus, d_in, d_out })
    }

    pub fn kraus(&self) -> &[CMatrix] {
        &self.kraus
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    /// `sum_k K_k^dagger K_k`.
    pub fn gram(&self) -> CMatrix {
        gram(&self.kraus)
    }

    pub fn validation(&self) -> ChannelValidation {
        validate(&self.kraus).expect("validated at construction")
    }

    pub fn is_trace_preserving(&self) -> bool {
        self.validation().cptp
    }

    /// Returns `s` when `sum K^dagger K = s I`.
    pub fn trace_preserving_scale(&self) -> Option<f64> {
        let g = self.gram();
        let s = g.trace().re / self.d_in as f64;
        let dev = linalg::max_abs_diff(&g, &(linalg::identity(self.d_in) * c(s, 0.0)));
        (s > 0.0 && dev <= CHANNEL_TOL).then_some(s)
    }

    /// `next` applied after `self`.
    pub fn then(&self, next: &KrausChannel) -> Result<KrausChannel> {
        if next.d_in != self.d_out {
            return Err(ChannelError::ShapeMismatch(format!(
                "cannot feed d_out={} into d_in={}",
                self.d_out, next.d_in
            )));
        }
        let kraus = next
            .kraus
            .iter()
            .flat_map(|b| self.kraus.iter().map(move |a| b * a))
            .collect();
        KrausChannel::new(kraus)
    }

    /// The map `rho -> factor * E[rho]`, i.e. every Kraus operator scaled by `sqrt(factor)`.
    pub fn scaled(&self, factor: f64) -> Result<KrausChannel> {
        if factor.is_nan() || factor < 0.0 {
            return Err(ChannelError::InvalidParameter(format!("scale {factor} < 0")));
        }
        let s = c(factor.sqrt(), 0.0);
        KrausChannel::new(self.kraus.iter().map(|k| k * s).collect())
    }

    /// Unnormalized action on a `d_in x d_in` operator.
    pub fn apply_matrix(&self, rho: &CMatrix) -> CMatrix {
        self.kraus
            .iter()
            .fold(CMatrix::zeros(self.d_out, self.d_out), |acc, k| {
                acc + linalg::sandwich(k, rho)
            })
    }

    /// Serializable form `{d_i, d_o, kraus}`.
    pub fn to_spec(&self) -> ChannelSpec {
        ChannelSpec {
            d_i: self.d_in,
            d_o: self.d_out,
            kraus: self
                .kraus
                .iter()
                .map(|k| {
                    (0..k.nrows())
                        .map(|i| (0..k.ncols()).map(|j| [k[(i, j)].re, k[(i, j)].im]).collect())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn from_spec(spec: &ChannelSpec) -> Result<Self> {
        let mut kraus = Vec::with_capacity(spec.kraus.len());
        for rows in &spec.kraus {
            if rows.len() != spec.d_o || rows.iter().any(|r| r.len() != spec.d_i) {
                return Err(ChannelError::ShapeMismatch(format!(
                    "expected {}x{} Kraus operators",
                    spec.d_o, spec.d_i
                )));
            }
            kraus.push(CMatrix::from_fn(spec.d_o, spec.d_i, |i, j| {
                c(rows[i][j][0], rows[i][j][1])
            }));
        }
        KrausChannel::new(kraus)
    }
}

/// JSON form of a channel: each Kraus operator is a list of rows, each
/// entry a `[re, im]` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub d_i: usize,
    pub d_o: usize,
    pub kraus: Vec<Vec<Vec<[f64; 2]>>>,
}

fn check_subsystem(ch: &KrausChannel, rho: &DensityOperator, subsystem: usize) -> Result<()> {
    match rho.dims().get(subsystem) {
        Some(&d) if d == ch.d_in => Ok(()),
        Some(&d) => Err(ChannelError::ShapeMismatch(format!(
            "subsystem {subsystem} has dim {d}, channel expects {}",
            ch.d_in
        ))),
        None => Err(ChannelError::ShapeMismatch(format!(
            "state has no subsystem {subsystem}"
        ))),
    }
}

/// `(E on subsystem)[rho]` without renormalization.
pub fn apply_raw(ch: &KrausChannel, rho: &DensityOperator, subsystem: usize) -> Result<DensityOperator> {
    check_subsystem(ch, rho, subsystem)?;
    let dims = rho.dims();
    let mut out_dims = dims.to_vec();
    out_dims[subsystem] = ch.d_out;
    let out_total: usize = out_dims.iter().product();
    let mut out = CMatrix::zeros(out_total, out_total);
    for k in &ch.kraus {
        let full = linalg::embed(k, dims, subsystem);
        out += linalg::sandwich(&full, rho.matrix());
    }
    Ok(DensityOperator::from_trusted(out, out_dims))
}

/// `t(E|rho) = Tr (E on subsystem)[rho]`.
pub fn transmissivity(ch: &KrausChannel, rho: &DensityOperator, subsystem: usize) -> Result<f64> {
    check_subsystem(ch, rho, subsystem)?;
    let g = linalg::embed(&ch.gram(), rho.dims(), subsystem);
    Ok((g * rho.matrix()).trace().re.max(0.0))
}

/// Normalized output state. A fully absorbed input yields the maximally
/// mixed state on the output space.
pub fn output_state(ch: &KrausChannel, rho: &DensityOperator, subsystem: usize) -> Result<DensityOperator> {
    let raw = apply_raw(ch, rho, subsystem)?;
    let t = raw.trace();
    if t <= 0.0 {
        let d = raw.dim();
        return Ok(DensityOperator::from_trusted(
            linalg::identity(d) * c(1.0 / d as f64, 0.0),
            raw.dims().to_vec(),
        ));
    }
    Ok(raw.normalized()?)
}

/// Named channel families and their compositions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NamedChannel {
    Identity {
        dim: usize,
    },
    /// Loses the photon with probability `loss`, otherwise identity.
    UniformLoss {
        loss: f64,
    },
    /// Projects onto `cos(angle)|0> + sin(angle)|1>`.
    Polarizer {
        angle: f64,
    },
    /// `p` weights the `X`/`Y` flips, `q` the `Z`/`Y` flips.
    PauliFlip {
        p: f64,
        q: f64,
    },
    /// Applied left to right.
    Sequence {
        stages: Vec<NamedChannel>,
    },
    Mixture {
        parts: Vec<(f64, NamedChannel)>,
    },
    Explicit(ChannelSpec),
}

fn probability(name: &str, v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(ChannelError::InvalidParameter(format!("{name}={v} outside [0,1]")))
    }
}

pub fn identity(dim: usize) -> KrausChannel {
    KrausChannel {
        kraus: vec![linalg::identity(dim)],
        d_in: dim,
        d_out: dim,
    }
}

pub fn uniform_loss(loss: f64) -> Result<KrausChannel> {
    let p = probability("loss", loss)?;
    KrausChannel::new(vec![linalg::identity(2) * c((1.0 - p).sqrt(), 0.0)])
}

pub fn polarizer(angle: f64) -> Result<KrausChannel> {
    if !angle.is_finite() {
        return Err(ChannelError::InvalidParameter("polarizer angle".into()));
    }
    let v = CVector::from_vec(vec![c(angle.cos(), 0.0), c(angle.sin(), 0.0)]);
    KrausChannel::new(vec![linalg::projector(&v)])
}

/// `(1-p)(1-q) rho + p(1-q) X rho X + pq Y rho Y + (1-p)q Z rho Z`.
pub fn pauli_flip(p: f64, q: f64) -> Result<KrausChannel> {
    let p = probability("p", p)?;
    let q = probability("q", q)?;
    let weights = [
        ((1.0 - p) * (1.0 - q), linalg::identity(2)),
        (p * (1.0 - q), linalg::pauli_x()),
        (p * q, linalg::pauli_y()),
        ((1.0 - p) * q, linalg::pauli_z()),
    ];
    let kraus = weights
        .into_iter()
        .filter(|(w, _)| *w > 0.0)
        .map(|(w, m)| m * c(w.sqrt(), 0.0))
        .collect();
    KrausChannel::new(kraus)
}

pub fn make_channel(spec: &NamedChannel) -> Result<KrausChannel> {
    match spec {
        NamedChannel::Identity { dim } => {
            if *dim == 0 {
                return Err(ChannelError::InvalidParameter("dim 0".into()));
            }
            Ok(identity(*dim))
        }
        NamedChannel::UniformLoss { loss } => uniform_loss(*loss),
        NamedChannel::Polarizer { angle } => polarizer(*angle),
        NamedChannel::PauliFlip { p, q } => pauli_flip(*p, *q),
        NamedChannel::Sequence { stages } => {
            let mut iter = stages.iter();
            let first = iter.next().ok_or(ChannelError::Empty)?;
            iter.try_fold(make_channel(first)?, |acc, s| acc.then(&make_channel(s)?))
        }
        NamedChannel::Mixture { parts } => {
            let channels = parts.iter().map(|(_, s)| make_channel(s)).collect::<Result<Vec<_>>>()?;
            let weights: Vec<f64> = parts.iter().map(|(w, _)| *w).collect();
            average_channel(&channels, &weights)
        }
        NamedChannel::Explicit(spec) => KrausChannel::from_spec(spec),
    }
}

/// Convex combination `sum_k w_k E_k` as the union of `sqrt(w_k)`-scaled Kraus sets.
pub fn average_channel(channels: &[KrausChannel], weights: &[f64]) -> Result<KrausChannel> {
    let first = channels.first().ok_or(ChannelError::Empty)?;
    if channels.len() != weights.len() {
        return Err(ChannelError::InvalidParameter(format!(
            "{} channels but {} weights",
            channels.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(ChannelError::InvalidParameter("negative weight".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > CHANNEL_TOL {
        return Err(ChannelError::WeightsNotNormalized(total));
    }
    let mut kraus = Vec::new();
    for (ch, &w) in channels.iter().zip(weights) {
        if ch.d_in != first.d_in || ch.d_out != first.d_out {
            return Err(ChannelError::ShapeMismatch(
                "mixture members differ in dimension".into(),
            ));
        }
        if w > 0.0 {
            let s = c(w.sqrt(), 0.0);
            kraus.extend(ch.kraus.iter().map(|k| k * s));
        }
    }
    if kraus.is_empty() {
        kraus.push(CMatrix::zeros(first.d_out, first.d_in));
    }
    KrausChannel::new(kraus)
}

fn phi_plus(d: usize) -> DensityOperator {
    PureState::new(linalg::max_entangled(d), vec![d, d])
        .expect("unit vector")
        .to_density()
}

/// `(E x I)[Phi+] / t(E|Phi+)` on `H_out x H_in`.
pub fn choi_state(ch: &KrausChannel) -> Result<DensityOperator> {
    let raw = apply_raw(ch, &phi_plus(ch.d_in), 0)?;
    if raw.trace() <= 0.0 {
        return Err(ChannelError::ZeroTransmissivity);
    }
    Ok(raw.normalized()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub fidelity: f64,
    pub sine: f64,
    pub trace: f64,
}

impl From<StateMetrics> for ChannelMetrics {
    fn from(m: StateMetrics) -> Self {
        Self {
            fidelity: m.fidelity,
            sine: m.sine_distance,
            trace: m.trace_distance,
        }
    }
}

fn require_reference(reference: &KrausChannel, ch: &KrausChannel) -> Result<()> {
    if reference.d_in != ch.d_in || reference.d_out != ch.d_out {
        return Err(ChannelError::ShapeMismatch("channels differ in dimension".into()));
    }
    reference
        .trace_preserving_scale()
        .map(|_| ())
        .ok_or(ChannelError::NotProportionalToTracePreserving)
}

/// Choi-Jamiolkowski fidelity, sine and trace distances.
pub fn cj_metrics(ch: &KrausChannel, reference: &KrausChannel) -> Result<ChannelMetrics> {
    require_reference(reference, ch)?;
    let a = choi_state(ch)?;
    let b = choi_state(reference)?;
    Ok(qstate::metrics(&a, &b)?.into())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiamondOptions {
    pub samples: usize,
    pub seed: u64,
    pub max_iterations: usize,
    pub initial_step: f64,
    pub min_step: f64,
}

impl Default for DiamondOptions {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 0,
            max_iterations: 200,
            initial_step: 0.25,
            min_step: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiamondEstimate {
    /// Lower estimate of the diamond sine distance.
    pub sine: f64,
    pub witness: PureState,
    /// Sine distance at every sampled candidate (index 0 is `Phi+`;
    /// candidates absorbed by the channel are skipped). The refined
    /// optimum is the last entry.
    pub candidate_sines: Vec<f64>,
}

struct PairObjective<'a> {
    ch: &'a KrausChannel,
    reference: &'a KrausChannel,
    d: usize,
}

impl PairObjective<'_> {
    fn eval(&self, v: &CVector) -> Option<f64> {
        let rho = DensityOperator::from_trusted(linalg::projector(v), vec![self.d, self.d]);
        let a = apply_raw(self.ch, &rho, 0).ok()?;
        let b = apply_raw(self.reference, &rho, 0).ok()?;
        if a.trace() <= 1e-12 || b.trace() <= 1e-12 {
            return None;
        }
        qstate::sine_distance(&a.normalized().ok()?, &b.normalized().ok()?).ok()
    }
}

fn vec_from_params(params: &[f64]) -> Option<CVector> {
    let n = params.len() / 2;
    let v = CVector::from_fn(n, |i, _| c(params[2 * i], params[2 * i + 1]));
    let norm = v.norm();
    (norm > 1e-12).then(|| v / c(norm, 0.0))
}

/// Maximizes the output sine distance over pure inputs on `H_in x H_in`:
/// Haar sampling seeded with `Phi+`, then coordinate-wise pattern search
/// from the best candidate.
pub fn diamond_sine_estimate(
    ch: &KrausChannel,
    reference: &KrausChannel,
    opts: DiamondOptions,
) -> Result<DiamondEstimate> {
    require_reference(reference, ch)?;
    if opts.samples == 0 {
        return Err(ChannelError::InvalidParameter("samples must be >= 1".into()));
    }
    let d = ch.d_in;
    let dim = d * d;
    let objective = PairObjective { ch, reference, d };

    let candidates: Vec<(CVector, Option<f64>)> = (0..=opts.samples)
        .into_par_iter()
        .map(|i| {
            let v = if i == 0 {
                linalg::max_entangled(d)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(i as u64);
                qstate::haar_vector(dim, &mut rng)
            };
            let s = objective.eval(&v);
            (v, s)
        })
        .collect();

    let mut best: Option<(f64, &CVector)> = None;
    let mut candidate_sines = Vec::with_capacity(candidates.len() + 1);
    for (v, s) in &candidates {
        if let Some(s) = *s {
            candidate_sines.push(s);
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, v));
            }
        }
    }
    let Some((mut best_val, start)) = best else {
        return Err(ChannelError::ZeroTransmissivity);
    };

    let mut params: Vec<f64> = start.iter().flat_map(|z| [z.re, z.im]).collect();
    let mut step = opts.initial_step;
    for _ in 0..opts.max_iterations {
        if step < opts.min_step {
            break;
        }
        let mut improved = false;
        for i in 0..params.len() {
            for dir in [1.0, -1.0] {
                let mut trial = params.clone();
                trial[i] += dir * step;
                if let Some(val) = vec_from_params(&trial).and_then(|v| objective.eval(&v)) {
                    if val > best_val {
                        best_val = val;
                        params = trial;
                        improved = true;
                        break;
                    }
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    let witness_vec = vec_from_params(&params).expect("accepted points have nonzero norm");
    candidate_sines.push(best_val);
    Ok(DiamondEstimate {
        sine: best_val,
        witness: PureState::new(witness_vec, vec![d, d])?,
        candidate_sines,
    })
}

/// Operator `K = M U` with `(I x K)|Phi+> = |psi>/sqrt(d)`, where `M` is the
/// positive part holding the Schmidt coefficients and `U` is unitary.
#[derive(Debug, Clone)]
pub struct KPsi {
    pub operator: CMatrix,
    pub positive: CMatrix,
    pub unitary: CMatrix,
}

pub fn kpsi_operator(psi: &PureState) -> Result<KPsi> {
    let dims = psi.dims();
    if dims.len() != 2 || dims[0] != dims[1] {
        return Err(ChannelError::ShapeMismatch(format!(
            "need two subsystems of equal dimension, got {dims:?}"
        )));
    }
    let d = dims[0];
    let schmidt = qstate::schmidt_decompose(psi)?;
    let mut positive = CMatrix::zeros(d, d);
    let mut unitary = CMatrix::zeros(d, d);
    for (k, &s) in schmidt.coefficients.iter().enumerate() {
        let v = schmidt.right.column(k).into_owned();
        // Row vector with entries u_ik (no conjugation).
        let u_row = schmidt.left.column(k).transpose();
        positive += linalg::projector(&v) * c(s, 0.0);
        unitary += &v * u_row;
    }
    Ok(KPsi {
        operator: &positive * &unitary,
        positive,
        unitary,
    })
}

/// Upper bound `d*x_i + d*t*x_o` on `|t(E|rho) - t(E|Phi_i)|`, where `x_i`
/// is the probe's distance to `Phi+` and `x_o` the distance of the probe
/// output to the reference output. Accepts trace or sine distances.
pub fn transmissivity_deviation_bound(ci: f64, co: f64, t_probe: f64, d: usize) -> Result<f64> {
    probability("Ci", ci)?;
    probability("Co", co)?;
    probability("t_probe", t_probe)?;
    Ok(d as f64 * ci + d as f64 * t_probe * co)
}

/// Factorization `E = (1 - lambda_c) E'` of a channel into trusted losses and
/// an untrusted remainder `E'`.
#[derive(Debug, Clone)]
pub struct TrustedLossSplit {
    pub lambda_c: f64,
    pub untrusted: KrausChannel,
}

impl TrustedLossSplit {
    pub fn new(ch: &KrausChannel, lambda_c: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&lambda_c) {
            return Err(ChannelError::InvalidParameter(format!(
                "lambda_c={lambda_c} outside [0,1)"
            )));
        }
        let s = c(1.0 / (1.0 - lambda_c).sqrt(), 0.0);
        let untrusted = KrausChannel::new(ch.kraus.iter().map(|k| k * s).collect())?;
        Ok(Self { lambda_c, untrusted })
    }

    /// `t(E'|rho) = t(E|rho) / (1 - lambda_c)`.
    pub fn untrusted_transmissivity(&self, rho: &DensityOperator, subsystem: usize) -> Result<f64> {
        transmissivity(&self.untrusted, rho, subsystem)
    }

    pub fn recombine(&self) -> Result<KrausChannel> {
        self.untrusted.scaled(1.0 - self.lambda_c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomChannelKind {
    /// Trace preserving.
    Cptp,
    /// Trace non-increasing with a random overall transmissivity scale.
    Cptd,
}

/// Random channel from Ginibre Kraus operators.
pub fn random_channel<R: Rng + ?Sized>(
    d_in: usize,
    d_out: usize,
    n_kraus: usize,
    kind: RandomChannelKind,
    rng: &mut R,
) -> KrausChannel {
    let mut ops: Vec<CMatrix> = (0..n_kraus.max(1))
        .map(|_| {
            CMatrix::from_fn(d_out, d_in, |_, _| {
                c(rng.sample(StandardNormal), rng.sample(StandardNormal))
            })
        })
        .collect();
    let g = gram(&ops);
    let (values, vectors) = linalg::eigh(&g);
    let inv_sqrt = linalg::spectral_map(&values, &vectors, |x| 1.0 / x.sqrt());
    for k in ops.iter_mut() {
        *k = &*k * &inv_sqrt;
    }
    if kind == RandomChannelKind::Cptd {
        // Give the map a non-uniform loss profile, then an overall scale.
        let profile = CMatrix::from_fn(d_in, d_in, |i, j| {
            if i == j {
                c(rng.random_range(0.05..1.0f64).sqrt(), 0.0)
            } else {
                ZERO
            }
        });
        let basis = qstate::haar_unitary(d_in, rng);
        let damp = &basis * profile * basis.adjoint();
        for k in ops.iter_mut() {
            *k = &*k * &damp;
        }
    }
    KrausChannel::new(ops).expect("random channel is trace non-increasing by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use crate::qstate::{bell_state, fidelity};

    fn phi() -> DensityOperator {
        bell_state(0).unwrap().to_density()
    }

    #[test]
    fn validation_flags() {
        let v = identity(2).validation();
        assert!(v.cptp && v.cptd && (v.max_transmissivity - 1.0).abs() < 1e-12);
        let v = uniform_loss(0.3).unwrap().validation();
        assert!(!v.cptp && (v.max_transmissivity - 0.7).abs() < 1e-12);
        let big = vec![linalg::identity(2) * c(1.1, 0.0)];
        assert!(matches!(
            KrausChannel::new(big),
            Err(ChannelError::NotTraceNonIncreasing(_))
        ));
        assert!(matches!(KrausChannel::new(vec![]), Err(ChannelError::Empty)));
    }

    #[test]
    fn pauli_flip_limits() {
        let id = pauli_flip(0.0, 0.0).unwrap();
        let rho = PureState::plus().to_density();
        let out = output_state(&id, &rho, 0).unwrap();
        assert!(max_abs_diff(out.matrix(), rho.matrix()) < 1e-15);
        let y = pauli_flip(1.0, 1.0).unwrap();
        let out = output_state(&y, &rho, 0).unwrap();
        let expect = linalg::sandwich(&linalg::pauli_y(), rho.matrix());
        assert!(max_abs_diff(out.matrix(), &expect) < 1e-15);
        assert!(pauli_flip(1.2, 0.0).is_err());
    }

    #[test]
    fn equal_flips_depolarize_correlations() {
        let ch = pauli_flip(0.5, 0.5).unwrap();
        let out = output_state(&ch, &phi(), 1).unwrap();
        let zz = linalg::kron(&linalg::pauli_z(), &linalg::pauli_z());
        let xx = linalg::kron(&linalg::pauli_x(), &linalg::pauli_x());
        assert!((out.matrix() * zz).trace().re.abs() < 1e-15);
        assert!((out.matrix() * xx).trace().re.abs() < 1e-15);
        assert!(max_abs_diff(out.matrix(), &(linalg::identity(4) * c(0.25, 0.0))) < 1e-15);
    }

    #[test]
    fn loss_and_output_conventions() {
        let ch = uniform_loss(0.4).unwrap();
        assert!((transmissivity(&ch, &phi(), 1).unwrap() - 0.6).abs() < 1e-14);
        let raw = apply_raw(&ch, &phi(), 1).unwrap();
        assert!((raw.trace() - 0.6).abs() < 1e-14);
        let blocked = uniform_loss(1.0).unwrap();
        let out = output_state(&blocked, &phi(), 0).unwrap();
        assert!(max_abs_diff(out.matrix(), &(linalg::identity(4) * c(0.25, 0.0))) < 1e-15);
        let h = polarizer(0.0).unwrap();
        let v = PureState::basis(qstate::HilbertDim::QUBIT, 1).unwrap().to_density();
        assert_eq!(transmissivity(&h, &v, 0).unwrap(), 0.0);
    }

    #[test]
    fn averages() {
        let avg = average_channel(&[identity(2)], &[1.0]).unwrap();
        assert!((transmissivity(&avg, &phi(), 0).unwrap() - 1.0).abs() < 1e-15);
        let avg = average_channel(&[uniform_loss(0.2).unwrap(), uniform_loss(0.6).unwrap()], &[0.5, 0.5]).unwrap();
        assert!(max_abs_diff(&avg.gram(), &uniform_loss(0.4).unwrap().gram()) < 1e-15);
        let avg = average_channel(&[identity(2), pauli_flip(1.0, 0.0).unwrap()], &[0.5, 0.5]).unwrap();
        let a = output_state(&avg, &phi(), 0).unwrap();
        let b = output_state(&pauli_flip(0.5, 0.0).unwrap(), &phi(), 0).unwrap();
        assert!(max_abs_diff(a.matrix(), b.matrix()) < 1e-15);
        assert!(matches!(
            average_channel(&[identity(2), identity(2)], &[0.5, 0.6]),
            Err(ChannelError::WeightsNotNormalized(_))
        ));
    }

    #[test]
    fn choi_states() {
        let j = choi_state(&identity(2)).unwrap();
        assert!(max_abs_diff(j.matrix(), phi().matrix()) < 1e-15);
        let j = choi_state(&uniform_loss(0.7).unwrap()).unwrap();
        assert!(max_abs_diff(j.matrix(), phi().matrix()) < 1e-14);
        let j = choi_state(&pauli_flip(0.2, 0.1).unwrap()).unwrap();
        assert!((fidelity(&j, &phi()).unwrap() - 0.8 * 0.9).abs() < 1e-14);
        assert!(matches!(
            choi_state(&uniform_loss(1.0).unwrap()),
            Err(ChannelError::ZeroTransmissivity)
        ));
    }

    #[test]
    fn cj_metric_examples() {
        let m = cj_metrics(&identity(2), &identity(2)).unwrap();
        assert!((m.fidelity - 1.0).abs() < 1e-14 && m.sine < 1e-7);
        let m = cj_metrics(&pauli_flip(0.1, 0.0).unwrap(), &identity(2)).unwrap();
        assert!((m.fidelity - 0.9).abs() < 1e-12);
        assert!((m.sine - 0.1f64.sqrt()).abs() < 1e-12);
        let m = cj_metrics(&uniform_loss(0.5).unwrap(), &identity(2)).unwrap();
        assert!((m.fidelity - 1.0).abs() < 1e-12);
        let not_tp = polarizer(0.3).unwrap();
        assert!(matches!(
            cj_metrics(&identity(2), &not_tp),
            Err(ChannelError::NotProportionalToTracePreserving)
        ));
    }

    #[test]
    fn diamond_estimates() {
        let opts = DiamondOptions {
            samples: 200,
            seed: 5,
            ..Default::default()
        };
        let e = diamond_sine_estimate(&identity(2), &identity(2), opts).unwrap();
        assert!(e.sine < 1e-7);
        let e = diamond_sine_estimate(&pauli_flip(0.1, 0.0).unwrap(), &identity(2), opts).unwrap();
        assert!((e.sine - 0.1f64.sqrt()).abs() < 1e-6, "{}", e.sine);
        let e = diamond_sine_estimate(&polarizer(0.0).unwrap(), &identity(2), opts).unwrap();
        assert!(e.sine > 0.99, "{}", e.sine);
    }

    #[test]
    fn kpsi_examples() {
        let k = kpsi_operator(&bell_state(0).unwrap()).unwrap();
        assert!(max_abs_diff(&k.operator, &(linalg::identity(2) * c(0.5f64.sqrt(), 0.0))) < 1e-14);
        let zz = PureState::basis(qstate::HilbertDim::QUBIT, 0).unwrap();
        let k = kpsi_operator(&zz.tensor(&zz)).unwrap();
        assert!(max_abs_diff(&k.operator, &linalg::projector(&linalg::ket(2, 0))) < 1e-14);
        assert!(max_abs_diff(&(k.unitary.adjoint() * &k.unitary), &linalg::identity(2)) < 1e-14);
    }

    #[test]
    fn deviation_bound_arithmetic() {
        assert_eq!(transmissivity_deviation_bound(0.0, 0.0, 0.7, 2).unwrap(), 0.0);
        assert!((transmissivity_deviation_bound(0.09, 0.12, 0.5, 2).unwrap() - 0.30).abs() < 1e-15);
        assert!(transmissivity_deviation_bound(1.5, 0.0, 0.5, 2).is_err());
    }

    #[test]
    fn trusted_loss_split() {
        let ch = uniform_loss(0.6).unwrap();
        let split = TrustedLossSplit::new(&ch, 0.5).unwrap();
        assert!((split.untrusted_transmissivity(&phi(), 0).unwrap() - 0.8).abs() < 1e-14);
        assert!(max_abs_diff(&split.recombine().unwrap().gram(), &ch.gram()) < 1e-15);
        assert!(matches!(
            TrustedLossSplit::new(&ch, 0.7),
            Err(ChannelError::NotTraceNonIncreasing(_))
        ));
    }

    #[test]
    fn channel_json_roundtrip() {
        let ch = pauli_flip(0.2, 0.3).unwrap();
        let text = serde_json::to_string(&ch.to_spec()).unwrap();
        let back = KrausChannel::from_spec(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, ch);
    }

    #[test]
    fn sequence_composition() {
        let seq = make_channel(&NamedChannel::Sequence {
            stages: vec![
                NamedChannel::UniformLoss { loss: 0.5 },
                NamedChannel::PauliFlip { p: 1.0, q: 0.0 },
            ],
        })
        .unwrap();
        let rho = PureState::basis(qstate::HilbertDim::QUBIT, 0).unwrap().to_density();
        let out = apply_raw(&seq, &rho, 0).unwrap();
        assert!((out.matrix()[(1, 1)].re - 0.5).abs() < 1e-15);
    }
}
