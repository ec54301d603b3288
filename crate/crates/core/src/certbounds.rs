//! Closed-form certification bounds.
//!
//! The certified transmission fidelity is
//! `1 - 4 sin^2(asin(C_i/tau) + asin(sqrt(alpha f_x)) + Delta_x)`, where
//! `C_i` measures the probe's distance to a maximally entangled state,
//! `f_x` is the self-testing deviation bound of the observed steering or
//! CHSH statistic, and `tau`, `Delta_x` are finite-statistics corrections
//! for the heralded transmissivity. All functions are pure.

use serde::{Deserialize, Serialize};

/// Self-testing robustness constant for the one-sided (steering) test.
pub const ALPHA_ONE_SIDED: f64 = 1.26;
/// Self-testing robustness constant for the CHSH-based tests.
pub const ALPHA_DI: f64 = 1.19;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum CertError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("eta_s={eta_s} exceeds the untrusted share 1-lambda_c={untrusted}: trusted losses overstated")]
    OverTrustedLosses { eta_s: f64, untrusted: f64 },
    #[error("device-independent mode needs eta_in and M")]
    MissingDiInputs,
}

pub type Result<T> = std::result::Result<T, CertError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Mode {
    /// Trusted source and trusted measurements on Alice's side.
    #[default]
    #[serde(rename = "1sDI")]
    OneSidedDi,
    /// Untrusted devices on both sides.
    #[serde(rename = "DI")]
    Di,
}

impl std::str::FromStr for Mode {
    type Err = CertError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1sDI" | "1sdi" | "one-sided" => Ok(Mode::OneSidedDi),
            "DI" | "di" => Ok(Mode::Di),
            other => Err(CertError::InvalidInput(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::OneSidedDi => "1sDI",
            Mode::Di => "DI",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfTestKind {
    /// Steering test certifying Bob's output.
    OneSided,
    /// CHSH test certifying the output side.
    DiOutput,
    /// CHSH test on the source certifying the input side.
    DiInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfTestBound {
    pub f_value: f64,
    pub alpha: f64,
}

fn check_finite_nonneg(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(CertError::InvalidInput(format!("{name}={v} must be finite and >= 0")))
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CertError::InvalidInput(format!("{name}={v} must be > 0")))
    }
}

/// Self-testing deviation bound and its robustness constant.
pub fn selftest_bound(kind: SelfTestKind, deviation: f64, count: u64, x: f64) -> Result<SelfTestBound> {
    check_finite_nonneg("deviation", deviation)?;
    check_positive("x", x)?;
    if count == 0 {
        return Err(CertError::InvalidInput("count must be >= 1".into()));
    }
    let k = count as f64;
    let e = deviation;
    Ok(match kind {
        SelfTestKind::OneSided => SelfTestBound {
            f_value: 8.0 * (x / k).sqrt() + e / 2.0 + (e + 8.0 / k) / (2.0 + 1.0 / k),
            alpha: ALPHA_ONE_SIDED,
        },
        SelfTestKind::DiOutput => SelfTestBound {
            f_value: 16.0 * (2.0 * x / k).sqrt()
                + 0.75 * e
                + (e + (4.0 + 2.0 * std::f64::consts::SQRT_2) / k) / (4.0 + 4.0 / k),
            alpha: ALPHA_DI,
        },
        SelfTestKind::DiInput => SelfTestBound {
            f_value: 8.0 * (2.0 * x / k).sqrt() + e,
            alpha: ALPHA_DI,
        },
    })
}

/// Limit of [`selftest_bound`] as the round count goes to infinity.
pub fn selftest_asymptote(kind: SelfTestKind, deviation: f64) -> Result<SelfTestBound> {
    check_finite_nonneg("deviation", deviation)?;
    let e = deviation;
    Ok(match kind {
        SelfTestKind::OneSided => SelfTestBound {
            f_value: e / 2.0 + e / 2.0,
            alpha: ALPHA_ONE_SIDED,
        },
        SelfTestKind::DiOutput => SelfTestBound {
            f_value: 0.75 * e + e / 4.0,
            alpha: ALPHA_DI,
        },
        SelfTestKind::DiInput => SelfTestBound {
            f_value: e,
            alpha: ALPHA_DI,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteStats {
    pub delta: f64,
    pub tau: f64,
    #[serde(rename = "Delta")]
    pub big_delta: f64,
}

/// Concentration corrections for a detected fraction `r` over `k` rounds.
pub fn finite_stats(r: f64, k: u64, x: f64) -> Result<FiniteStats> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(CertError::InvalidInput(format!("R={r} outside (0,1]")));
    }
    if k == 0 {
        return Err(CertError::InvalidInput("K must be >= 1".into()));
    }
    check_positive("x", x)?;
    let kp1 = k as f64 + 1.0;
    let delta = 1.0 / kp1 + (2.0 * x / (r * kp1)).sqrt();
    let tau = r * (1.0 - delta);
    let big_delta = if delta >= 1.0 {
        std::f64::consts::PI
    } else {
        ((1.0 - 3.0 * delta) / (1.0 - delta)).clamp(-1.0, 1.0).acos()
    };
    Ok(FiniteStats { delta, tau, big_delta })
}

/// Probability that all concentration statements hold simultaneously.
pub fn confidence(mode: Mode, x: f64) -> Result<f64> {
    check_positive("x", x)?;
    let e = (-x).exp();
    let base = (1.0 - e) * (1.0 - 2.0 * e).powi(2);
    Ok(match mode {
        Mode::OneSidedDi => base,
        Mode::Di => base * (1.0 - e),
    })
}

/// Diamond-fidelity lower bound `1 - 4 sin^2(asin(C_i/t) + asin(C_o))`.
pub fn core_bound(ci: f64, co: f64, t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&ci) || !(0.0..=1.0).contains(&co) {
        return Err(CertError::InvalidInput(format!("C_i={ci}, C_o={co} outside [0,1]")));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(CertError::InvalidInput(format!("t={t} outside (0,1]")));
    }
    Ok(angle_bound(&[ci / t, co], 0.0).0)
}

/// `1 - 4 sin^2(sum asin(a_k) + extra)`, or `(0, true)` when some argument
/// leaves `[0,1]` or the angle reaches `pi/2`.
fn angle_bound(args: &[f64], extra: f64) -> (f64, bool) {
    if args.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return (0.0, true);
    }
    let theta: f64 = args.iter().map(|a| a.asin()).sum::<f64>() + extra;
    if theta >= std::f64::consts::FRAC_PI_2 {
        return (0.0, true);
    }
    let s = theta.sin();
    (((1.0 - 4.0 * s * s).clamp(0.0, 1.0)), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertInputs {
    #[serde(rename = "F_i")]
    pub f_i: f64,
    pub eps: f64,
    #[serde(rename = "K")]
    pub k: u64,
    pub eta_s: f64,
    #[serde(default)]
    pub lambda_c: f64,
    pub x: f64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_in: Option<f64>,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub m: Option<u64>,
}

impl CertInputs {
    /// One-sided inputs with `lambda_c = 0`.
    pub fn one_sided(f_i: f64, eps: f64, k: u64, eta_s: f64, x: f64) -> Self {
        Self {
            f_i,
            eps,
            k,
            eta_s,
            lambda_c: 0.0,
            x,
            mode: Mode::OneSidedDi,
            eta_in: None,
            m: None,
        }
    }

    pub fn with_trusted_loss(mut self, lambda_c: f64) -> Self {
        self.lambda_c = lambda_c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.f_i) {
            return Err(CertError::InvalidInput(format!("F_i={} outside [0,1]", self.f_i)));
        }
        check_finite_nonneg("eps", self.eps)?;
        if self.k == 0 {
            return Err(CertError::InvalidInput("K must be >= 1".into()));
        }
        if !(self.eta_s > 0.0 && self.eta_s <= 1.0) {
            return Err(CertError::InvalidInput(format!("eta_s={} outside (0,1]", self.eta_s)));
        }
        if !(0.0..1.0).contains(&self.lambda_c) {
            return Err(CertError::InvalidInput(format!(
                "lambda_c={} outside [0,1)",
                self.lambda_c
            )));
        }
        check_positive("x", self.x)?;
        let untrusted = 1.0 - self.lambda_c;
        if self.eta_s / untrusted > 1.0 + 1e-12 {
            return Err(CertError::OverTrustedLosses {
                eta_s: self.eta_s,
                untrusted,
            });
        }
        if self.mode == Mode::Di {
            match (self.eta_in, self.m) {
                (Some(eta), Some(m)) if m >= 1 => check_finite_nonneg("eta_in", eta)?,
                _ => return Err(CertError::MissingDiInputs),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intermediates {
    #[serde(rename = "C_i")]
    pub c_i: f64,
    pub f_x: f64,
    pub alpha: f64,
    pub delta_x: f64,
    pub tau_x: f64,
    /// `min(1, tau_x / (1 - lambda_c))`.
    pub tau_eff: f64,
    #[serde(rename = "Delta_x")]
    pub big_delta_x: f64,
    /// `asin(C_i / tau_eff)`, absent when the argument exceeds one.
    pub arcsin_input: Option<f64>,
    /// `asin(sqrt(alpha f_x))`, absent when the argument exceeds one.
    pub arcsin_output: Option<f64>,
    pub trivial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertResult {
    pub certified_fidelity: f64,
    pub confidence: f64,
    pub intermediates: Intermediates,
}

/// Certified lower bound on the fidelity of the delivered message.
pub fn certify(inputs: &CertInputs) -> Result<CertResult> {
    inputs.validate()?;
    let x = inputs.x;
    let (c_i, out_kind) = match inputs.mode {
        Mode::OneSidedDi => ((1.0 - inputs.f_i).max(0.0).sqrt(), SelfTestKind::OneSided),
        Mode::Di => {
            let g = selftest_bound(
                SelfTestKind::DiInput,
                inputs.eta_in.expect("validated"),
                inputs.m.expect("validated"),
                x,
            )?;
            ((g.alpha * g.f_value).sqrt(), SelfTestKind::DiOutput)
        }
    };
    let st = selftest_bound(out_kind, inputs.eps, inputs.k, x)?;
    let fs = finite_stats(inputs.eta_s, inputs.k, x)?;
    let tau_eff = (fs.tau / (1.0 - inputs.lambda_c)).min(1.0);

    let in_arg = if tau_eff > 0.0 { c_i / tau_eff } else { f64::INFINITY };
    let out_arg = (st.alpha * st.f_value).sqrt();
    let (fidelity, trivial) = angle_bound(&[in_arg, out_arg], fs.big_delta);
    let asin_if = |a: f64| (0.0..=1.0).contains(&a).then(|| a.asin());

    Ok(CertResult {
        certified_fidelity: fidelity,
        confidence: confidence(inputs.mode, x)?,
        intermediates: Intermediates {
            c_i,
            f_x: st.f_value,
            alpha: st.alpha,
            delta_x: fs.delta,
            tau_x: fs.tau,
            tau_eff,
            big_delta_x: fs.big_delta,
            arcsin_input: asin_if(in_arg),
            arcsin_output: asin_if(out_arg),
            trivial,
        },
    })
}

/// Number of probe rounds `ceil(K / t)` needed to expect `K` detections.
pub fn required_rounds(k: u64, t: f64) -> Result<u64> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(CertError::InvalidInput(format!("t={t} outside (0,1]")));
    }
    let q = k as f64 / t;
    let nearest = q.round();
    if (q - nearest).abs() <= q * 4.0 * f64::EPSILON {
        Ok(nearest as u64)
    } else {
        Ok(q.ceil() as u64)
    }
}

/// Steering deviation produced by flipping Bob's `B_1` outcome with
/// probability `p` and `B_0` with probability `q` on top of an honest
/// deviation `eps_honest`.
pub fn flip_attack_eps(eps_honest: f64, p: f64, q: f64) -> f64 {
    eps_honest + 2.0 * (p + q) * (1.0 - eps_honest / 2.0)
}
