//! Long-baseline scheme comparison: direct detection, the heralded-source
//! (GJC) scheme and the memory-assisted (KBGL) scheme, multiplexing resource
//! counts, and rate/error budget arithmetic.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::metrics::{budget_product, BudgetFactor, MetricsError};

#[derive(Debug, thiserror::Error)]
pub enum SchemesError {
    #[error("parameter `{name}` = {value} out of range")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("timebin {index} does not fit in {qubits} qubits")]
    AddressOverflow { index: u64, qubits: u32 },
    #[error("invalid address `{0}`")]
    BadAddress(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SchemesError>;

/// Baseline and timing parameters. Lengths in km, times in s, rates in Hz.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineParams {
    pub attenuation_db_per_km: f64,
    pub tau_meas: f64,
    pub tau_ent0: f64,
    pub delta_f_signal: f64,
    pub delta_f_siv: f64,
    /// Probability that a heralded source photon covers a given timebin.
    pub source_duty: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            attenuation_db_per_km: 0.3,
            tau_meas: 1.0,
            tau_ent0: 1e-3,
            delta_f_signal: 1e6,
            delta_f_siv: 1e9,
            source_duty: 0.01,
        }
    }
}

fn positive(name: &'static str, value: f64) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(SchemesError::OutOfRange { name, value })
    }
}

impl BaselineParams {
    pub fn validate(&self) -> Result<()> {
        positive("attenuation_db_per_km", self.attenuation_db_per_km)?;
        positive("tau_meas", self.tau_meas)?;
        positive("tau_ent0", self.tau_ent0)?;
        positive("delta_f_signal", self.delta_f_signal)?;
        positive("delta_f_siv", self.delta_f_siv)?;
        if !(0.0..=1.0).contains(&self.source_duty) {
            return Err(SchemesError::OutOfRange { name: "source_duty", value: self.source_duty });
        }
        Ok(())
    }

    /// Attenuation length `L0 = 10/(attenuation · ln 10)` in km.
    pub fn l0(&self) -> f64 {
        10.0 / (self.attenuation_db_per_km * std::f64::consts::LN_10)
    }

    /// Entanglement time at baseline `l`: `τ_ent0 · e^{L/(2L0)}`.
    pub fn tau_ent(&self, l: f64) -> f64 {
        self.tau_ent0 * (l / (2.0 * self.l0())).exp()
    }

    /// Baseline where the entanglement time reaches the measurement window.
    pub fn kink_length(&self) -> f64 {
        2.0 * self.l0() * (self.tau_meas / self.tau_ent0).ln()
    }
}

fn length(l: f64) -> Result<f64> {
    if l >= 0.0 && l.is_finite() {
        Ok(l)
    } else {
        Err(SchemesError::OutOfRange { name: "length_km", value: l })
    }
}

/// Direct detection with a midpoint beamsplitter: each arm covers `L/2`.
pub fn p_direct(p: &BaselineParams, l: f64) -> Result<f64> {
    Ok((-length(l)? / (2.0 * p.l0())).exp())
}

pub fn p_kbgl(p: &BaselineParams, l: f64) -> Result<f64> {
    let l = length(l)?;
    Ok(p.tau_meas / (p.tau_meas + p.tau_ent(l)))
}

/// `P_KBGL / P_direct`, saturating at `τ_meas/τ_ent0`.
pub fn gain_kbgl(p: &BaselineParams, l: f64) -> Result<f64> {
    let l = length(l)?;
    let e = (l / (2.0 * p.l0())).exp();
    Ok(p.tau_meas * e / (p.tau_meas + p.tau_ent0 * e))
}

pub fn gain_max(p: &BaselineParams) -> f64 {
    p.tau_meas / p.tau_ent0
}

pub fn gjc_success(p: &BaselineParams, l: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p.source_duty) {
        return Err(SchemesError::OutOfRange { name: "source_duty", value: p.source_duty });
    }
    Ok(p.source_duty * p_direct(p, l)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiplexResources {
    pub timebins: u64,
    pub qubits_per_node: u32,
    pub freq_windows: u64,
    pub freq_qubits: u32,
}

/// Smallest `q` with `2^q ≥ n`.
pub fn address_qubits(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

pub fn multiplex_resources(p: &BaselineParams) -> Result<MultiplexResources> {
    p.validate()?;
    let slots = p.delta_f_signal * p.tau_meas;
    if slots < 1.0 {
        return Err(SchemesError::OutOfRange { name: "delta_f_signal*tau_meas", value: slots });
    }
    let timebins = slots.ceil() as u64;
    let freq_windows = if p.delta_f_signal > p.delta_f_siv { (p.delta_f_signal / p.delta_f_siv).ceil() as u64 } else { 1 };
    Ok(MultiplexResources {
        timebins,
        qubits_per_node: address_qubits(timebins),
        freq_windows,
        freq_qubits: address_qubits(freq_windows),
    })
}

/// Big-endian switch configuration loading `index` into `qubits` memories.
pub fn binary_timebin_address(index: u64, qubits: u32) -> Result<String> {
    if qubits < 64 && index >> qubits != 0 {
        return Err(SchemesError::AddressOverflow { index, qubits });
    }
    Ok((0..qubits).rev().map(|b| if b < 64 && (index >> b) & 1 == 1 { '1' } else { '0' }).collect())
}

pub fn parse_timebin_address(address: &str) -> Result<u64> {
    if address.is_empty() || address.len() > 64 {
        return Err(SchemesError::BadAddress(address.to_string()));
    }
    u64::from_str_radix(address, 2).map_err(|_| SchemesError::BadAddress(address.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeRow {
    pub l_km: f64,
    pub p_direct: f64,
    pub p_gjc: f64,
    pub p_kbgl: f64,
    pub gain: f64,
}

pub fn scheme_sweep(p: &BaselineParams, lengths: &[f64]) -> Result<Vec<SchemeRow>> {
    p.validate()?;
    lengths
        .iter()
        .map(|&l| {
            Ok(SchemeRow {
                l_km: l,
                p_direct: p_direct(p, l)?,
                p_gjc: gjc_success(p, l)?,
                p_kbgl: p_kbgl(p, l)?,
                gain: gain_kbgl(p, l)?,
            })
        })
        .collect()
}

/// Grid baseline with the largest curvature of `ln G`; the saturation kink.
pub fn detect_kink(rows: &[SchemeRow]) -> Option<f64> {
    if rows.len() < 3 {
        return None;
    }
    let lg: Vec<f64> = rows.iter().map(|r| r.gain.ln()).collect();
    (1..rows.len() - 1)
        .map(|k| (k, (lg[k + 1] - 2.0 * lg[k] + lg[k - 1]).abs()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| rows[k].l_km)
}

pub fn write_scheme_csv<W: Write>(rows: &[SchemeRow], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    out.write_record(["L_km", "p_direct", "p_gjc", "p_kbgl", "gain"])?;
    for r in rows {
        out.write_record([
            format!("{:.6}", r.l_km),
            format!("{:.9e}", r.p_direct),
            format!("{:.9e}", r.p_gjc),
            format!("{:.9e}", r.p_kbgl),
            format!("{:.9e}", r.gain),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Insertion-loss chain of the entanglement link.
pub fn link_efficiency_factors() -> Vec<BudgetFactor> {
    vec![
        BudgetFactor::new("fiber_coupling", 0.7),
        BudgetFactor::new("circulator", 0.7),
        BudgetFactor::new("cavity_reflectivity_up", 0.8),
        BudgetFactor::new("aom_switch", 0.5),
        BudgetFactor::new("frequency_shift_filter", 0.074),
        BudgetFactor::new("snspd", 0.95),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateBudget {
    pub link: Vec<BudgetFactor>,
    pub entangling_efficiency: f64,
    pub duty_cycle: f64,
    pub rep_rate_electron: f64,
    pub rep_rate_nucleus: f64,
}

impl Default for RateBudget {
    fn default() -> Self {
        Self {
            link: link_efficiency_factors(),
            entangling_efficiency: 0.125,
            duty_cycle: 0.8,
            rep_rate_electron: 1e4,
            rep_rate_nucleus: 2e3,
        }
    }
}

impl RateBudget {
    pub fn link_efficiency(&self) -> Result<f64> {
        Ok(budget_product(&self.link)?.product)
    }

    /// Per-attempt success with WCS mean `mu`, duty cycle included.
    pub fn success_probability(&self, mu: f64) -> Result<f64> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(SchemesError::OutOfRange { name: "mu", value: mu });
        }
        Ok(self.link_efficiency()? * self.entangling_efficiency * self.duty_cycle * mu)
    }

    /// `(electron, nucleus)` entanglement rates in Hz.
    pub fn rates(&self, mu: f64) -> Result<(f64, f64)> {
        let p = self.success_probability(mu)?;
        Ok((self.rep_rate_electron * p, self.rep_rate_nucleus * p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub name: String,
    pub error: f64,
}

/// Combined error `1 − Π(1 − e_k)` of independent error sources.
pub fn combined_error(rows: &[ErrorRow]) -> Result<f64> {
    let factors: Vec<BudgetFactor> = rows.iter().map(|r| BudgetFactor::new(r.name.clone(), 1.0 - r.error)).collect();
    Ok(1.0 - budget_product(&factors)?.product)
}

/// Electron-electron and nucleus-nucleus entanglement error rows.
pub fn entanglement_error_rows() -> (Vec<ErrorRow>, Vec<ErrorRow>) {
    let row = |name: &str, error: f64| ErrorRow { name: name.to_string(), error };
    let electron = vec![
        row("initialization", 0.0),
        row("mw_gate", 0.01),
        row("optical_contrast", 0.0),
        row("interferometer_lock", 0.15),
        row("readout", 0.0),
        row("multi_photon", 0.05),
    ];
    let nucleus = vec![
        row("initialization", 0.03),
        row("mw_gate", 0.0),
        row("optical_contrast", 0.0),
        row("interferometer_lock", 0.15),
        row("readout", 0.05),
        row("multi_photon", 0.05),
    ];
    (electron, nucleus)
}
