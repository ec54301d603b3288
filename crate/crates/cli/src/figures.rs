//! Figure datasets: sweeps of the certification bounds written as CSV.

use std::io::Write;

use qcert::certbounds::{self, CertError, CertInputs, Mode, SelfTestKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum FigureId {
    BoundVsEta,
    AttackGrid,
    SelftestCurve,
    StaterrCurve,
    DiSurface,
}

/// Evenly spaced axis `start, start + step, ..., stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

const GRID_SCALE: f64 = 1e9;

impl Grid {
    pub fn new(start: f64, stop: f64, step: f64) -> Self {
        Self { start, stop, step }
    }

    /// Points snapped to multiples of 1e-9 so decimal steps print cleanly.
    pub fn values(&self) -> anyhow::Result<Vec<f64>> {
        let ok = [self.start, self.stop, self.step].iter().all(|v| v.is_finite());
        if !ok || self.step <= 0.0 || self.stop < self.start {
            anyhow::bail!("invalid grid {self:?}: need step > 0 and stop >= start");
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        let s0 = (self.start * GRID_SCALE).round();
        let ds = (self.step * GRID_SCALE).round();
        Ok((0..n).map(|i| (s0 + i as f64 * ds) / GRID_SCALE).collect())
    }
}

fn check_list(name: &str, values: &[f64]) -> anyhow::Result<()> {
    if values.is_empty() || values.windows(2).any(|w| w[1] <= w[0]) {
        anyhow::bail!("{name} must be non-empty and strictly increasing");
    }
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundVsEta {
    #[serde(rename = "F_i")]
    pub f_i: f64,
    pub eps: f64,
    #[serde(rename = "K")]
    pub k: u64,
    pub x: f64,
    pub lambda_c: Vec<f64>,
    pub eta_s: Grid,
}

impl Default for BoundVsEta {
    fn default() -> Self {
        Self {
            f_i: 0.992,
            eps: 0.0142,
            k: 1_000_000_000,
            x: 7.0,
            lambda_c: vec![0.0, 0.2, 0.4, 0.526],
            eta_s: Grid::new(0.2, 0.5, 0.001),
        }
    }
}

impl BoundVsEta {
    pub fn rows(&self) -> anyhow::Result<Table> {
        check_list("lambda_c", &self.lambda_c)?;
        let eta = self.eta_s.values()?;
        let mut table = Table::new(&["lambda_c", "eta_s", "certified_fidelity", "status"]);
        for &lc in &self.lambda_c {
            for &e in &eta {
                let inputs = CertInputs::one_sided(self.f_i, self.eps, self.k, e, self.x).with_trusted_loss(lc);
                let (value, status) = match certbounds::certify(&inputs) {
                    Ok(r) => (fmt(r.certified_fidelity), "ok"),
                    Err(CertError::OverTrustedLosses { .. }) => (String::new(), "over_trusted"),
                    Err(e) => return Err(e.into()),
                };
                table.push(vec![fmt(lc), fmt(e), value, status.into()]);
            }
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackGrid {
    #[serde(rename = "F_i")]
    pub f_i: f64,
    pub eps_honest: f64,
    pub eta_s: f64,
    pub lambda_c: f64,
    #[serde(rename = "K")]
    pub k: u64,
    pub x: f64,
    pub p: Grid,
    pub q: Grid,
}

impl Default for AttackGrid {
    fn default() -> Self {
        Self {
            f_i: 0.9916,
            eps_honest: 0.0142,
            eta_s: 0.473,
            lambda_c: 0.526,
            k: 1_000_000_000,
            x: 7.0,
            p: Grid::new(0.0, 0.025, 0.001),
            q: Grid::new(0.0, 0.025, 0.001),
        }
    }
}

impl AttackGrid {
    pub fn rows(&self) -> anyhow::Result<Table> {
        let (ps, qs) = (self.p.values()?, self.q.values()?);
        let mut table = Table::new(&["p", "q", "eps", "certified_fidelity"]);
        for &p in &ps {
            for &q in &qs {
                let eps = certbounds::flip_attack_eps(self.eps_honest, p, q);
                let inputs =
                    CertInputs::one_sided(self.f_i, eps, self.k, self.eta_s, self.x).with_trusted_loss(self.lambda_c);
                let r = certbounds::certify(&inputs)?;
                table.push(vec![fmt(p), fmt(q), fmt(eps), fmt(r.certified_fidelity)]);
            }
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelftestCurve {
    pub eps: Grid,
    #[serde(rename = "K")]
    pub k: Vec<u64>,
    /// Adds rows with `K = inf`.
    pub asymptote: bool,
    pub x: f64,
}

impl Default for SelftestCurve {
    fn default() -> Self {
        Self {
            eps: Grid::new(0.0, 0.1, 0.005),
            k: vec![1_000_000, 100_000_000, 10_000_000_000],
            asymptote: true,
            x: 7.0,
        }
    }
}

impl SelftestCurve {
    pub fn rows(&self) -> anyhow::Result<Table> {
        let ks: Vec<f64> = self.k.iter().map(|&k| k as f64).collect();
        check_list("K", &ks)?;
        let eps = self.eps.values()?;
        let mut table = Table::new(&["K", "eps", "f", "alpha", "fidelity_bound"]);
        let mut emit = |label: String, e: f64, b: certbounds::SelfTestBound| {
            let bound = (1.0 - b.alpha * b.f_value).max(0.0);
            table.push(vec![label, fmt(e), fmt(b.f_value), fmt(b.alpha), fmt(bound)]);
        };
        for &k in &self.k {
            for &e in &eps {
                emit(
                    k.to_string(),
                    e,
                    certbounds::selftest_bound(SelfTestKind::OneSided, e, k, self.x)?,
                );
            }
        }
        if self.asymptote {
            for &e in &eps {
                emit(
                    "inf".into(),
                    e,
                    certbounds::selftest_asymptote(SelfTestKind::OneSided, e)?,
                );
            }
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StaterrCurve {
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    pub log10_k: Grid,
    pub x: f64,
}

impl Default for StaterrCurve {
    fn default() -> Self {
        Self {
            r: vec![0.1, 0.263, 0.473, 1.0],
            log10_k: Grid::new(4.0, 12.0, 0.25),
            x: 7.0,
        }
    }
}

impl StaterrCurve {
    pub fn rows(&self) -> anyhow::Result<Table> {
        check_list("R", &self.r)?;
        let exps = self.log10_k.values()?;
        let mut table = Table::new(&["R", "K", "delta", "tau", "Delta"]);
        for &r in &self.r {
            for &le in &exps {
                let k = 10f64.powf(le).round() as u64;
                let fs = certbounds::finite_stats(r, k, self.x)?;
                table.push(vec![
                    fmt(r),
                    k.to_string(),
                    fmt(fs.delta),
                    fmt(fs.tau),
                    fmt(fs.big_delta),
                ]);
            }
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiSurface {
    pub eps: Grid,
    pub eta_in: Grid,
    pub eta_s: f64,
    pub lambda_c: f64,
    #[serde(rename = "K")]
    pub k: u64,
    #[serde(rename = "M")]
    pub m: u64,
    pub x: f64,
}

impl Default for DiSurface {
    fn default() -> Self {
        Self {
            eps: Grid::new(0.0, 0.01, 0.0005),
            eta_in: Grid::new(0.0, 0.01, 0.0005),
            eta_s: 0.9,
            lambda_c: 0.0,
            k: 10_000_000_000,
            m: 10_000_000_000,
            x: 7.0,
        }
    }
}

impl DiSurface {
    pub fn rows(&self) -> anyhow::Result<Table> {
        let (eps, eta_in) = (self.eps.values()?, self.eta_in.values()?);
        let mut table = Table::new(&["eps", "eta_in", "certified_fidelity", "confidence"]);
        for &e in &eps {
            for &h in &eta_in {
                let inputs = CertInputs {
                    f_i: 1.0,
                    eps: e,
                    k: self.k,
                    eta_s: self.eta_s,
                    lambda_c: self.lambda_c,
                    x: self.x,
                    mode: Mode::Di,
                    eta_in: Some(h),
                    m: Some(self.m),
                };
                let r = certbounds::certify(&inputs)?;
                table.push(vec![fmt(e), fmt(h), fmt(r.certified_fidelity), fmt(r.confidence)]);
            }
        }
        Ok(table)
    }
}

/// Header plus rows of already formatted cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, w: W) -> anyhow::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.header)?;
        for row in &self.rows {
            out.write_record(row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Column index by name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Builds a figure table; `config` holds parameter overrides as JSON.
pub fn figure_table(id: FigureId, config: Option<serde_json::Value>) -> anyhow::Result<Table> {
    fn parse<T: serde::de::DeserializeOwned + Default>(config: Option<serde_json::Value>) -> anyhow::Result<T> {
        Ok(match config {
            Some(v) => serde_json::from_value(v)?,
            None => T::default(),
        })
    }
    match id {
        FigureId::BoundVsEta => parse::<BoundVsEta>(config)?.rows(),
        FigureId::AttackGrid => parse::<AttackGrid>(config)?.rows(),
        FigureId::SelftestCurve => parse::<SelftestCurve>(config)?.rows(),
        FigureId::StaterrCurve => parse::<StaterrCurve>(config)?.rows(),
        FigureId::DiSurface => parse::<DiSurface>(config)?.rows(),
    }
}
