//! Estimation theory and budget arithmetic: Fisher information for parity
//! outcome models, closed-form scaling laws, mis-heralding, thermalization of
//! weak coherent signals, visibility fitting and efficiency budgets.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, Matrix3, Vector3};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hilbert::DensityMatrix;

type C64 = Complex64;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("parameter `{name}` = {value} out of range")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("Fisher information undefined at phi = {phi}: outcome {outcome} has zero probability but nonzero slope")]
    Undefined { phi: f64, outcome: usize },
    #[error("need at least 4 phase points, got {0}")]
    TooFewPoints(usize),
    #[error("phase grid is degenerate for a cosine fit")]
    DegenerateGrid,
    #[error("mis-herald probability undefined for all-zero inputs")]
    ZeroDenominator,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn unit(name: &'static str, value: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(MetricsError::OutOfRange { name, value })
    }
}

fn non_negative(name: &'static str, value: f64) -> Result<f64> {
    if value >= 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(MetricsError::OutOfRange { name, value })
    }
}

/// Parity outcome model: `P(±|φ) = p_succ(1 ± V cos φ)/2`, the rest failing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub p_succ: f64,
    pub visibility: f64,
}

impl OutcomeModel {
    pub fn new(p_succ: f64, visibility: f64) -> Result<Self> {
        Ok(Self { p_succ: unit("p_succ", p_succ)?, visibility: unit("visibility", visibility)? })
    }

    /// `[P(+), P(−), P(fail)]`.
    pub fn probabilities(&self, phi: f64) -> [f64; 3] {
        let c = self.visibility * phi.cos();
        let plus = self.p_succ * (1.0 + c) / 2.0;
        let minus = self.p_succ * (1.0 - c) / 2.0;
        [plus, minus, 1.0 - self.p_succ]
    }

    pub fn derivatives(&self, phi: f64) -> [f64; 3] {
        let s = self.p_succ * self.visibility * phi.sin() / 2.0;
        [-s, s, 0.0]
    }
}

/// Analytic Fisher information of the parity model,
/// `p V² sin²φ / (1 − V² cos²φ)`.
pub fn fisher_information(model: &OutcomeModel, phi: f64) -> Result<f64> {
    let p = model.probabilities(phi);
    let d = model.derivatives(phi);
    fisher_from_parts(phi, &p, &d)
}

fn fisher_from_parts(phi: f64, p: &[f64], d: &[f64]) -> Result<f64> {
    let mut f = 0.0;
    for (k, (&pk, &dk)) in p.iter().zip(d).enumerate() {
        if pk <= 1e-300 {
            if dk.abs() > 1e-9 {
                return Err(MetricsError::Undefined { phi, outcome: k });
            }
            continue;
        }
        f += dk * dk / pk;
    }
    Ok(f)
}

pub const FD_STEP: f64 = 1e-5;

fn central(probs: &dyn Fn(f64) -> Vec<f64>, phi: f64, h: f64) -> Vec<f64> {
    let a = probs(phi + h);
    let b = probs(phi - h);
    a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * h)).collect()
}

/// Fisher information of an arbitrary outcome distribution with central
/// differences; falls back to Richardson extrapolation when the step and
/// half-step estimates disagree.
pub fn fisher_information_numeric(probs: &dyn Fn(f64) -> Vec<f64>, phi: f64) -> Result<f64> {
    let p = probs(phi);
    let d1 = central(probs, phi, FD_STEP);
    let d2 = central(probs, phi, FD_STEP / 2.0);
    let scale = d1.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    let disagree = d1.iter().zip(&d2).any(|(a, b)| (a - b).abs() > 1e-7 * scale);
    let d: Vec<f64> = if disagree { d1.iter().zip(&d2).map(|(a, b)| (4.0 * b - a) / 3.0).collect() } else { d1 };
    fisher_from_parts(phi, &p, &d)
}

fn one_minus_exp_neg(mu: f64) -> f64 {
    -(-mu).exp_m1()
}

fn check_fi_args(mu: f64, eta_erasure: f64, eta_herald: f64, v_bar: f64) -> Result<()> {
    non_negative("mu", mu)?;
    unit("eta_erasure", eta_erasure)?;
    unit("eta_herald", eta_herald)?;
    unit("v_bar", v_bar)?;
    Ok(())
}

/// Heralded Fisher information, `η_e η_h V̄² μ² e^{−2μ}/(1 − e^{−μ})`.
pub fn fi_heralded(mu: f64, eta_erasure: f64, eta_herald: f64, v_bar: f64) -> Result<f64> {
    check_fi_args(mu, eta_erasure, eta_herald, v_bar)?;
    if mu == 0.0 {
        return Ok(0.0);
    }
    Ok(eta_erasure * eta_herald * v_bar * v_bar * mu * mu * (-2.0 * mu).exp() / one_minus_exp_neg(mu))
}

/// Unheralded Fisher information, `η_e (η_h V̄)² μ² e^{−2μ}`.
pub fn fi_unheralded(mu: f64, eta_erasure: f64, eta_herald: f64, v_bar: f64) -> Result<f64> {
    check_fi_args(mu, eta_erasure, eta_herald, v_bar)?;
    let hv = eta_herald * v_bar;
    Ok(eta_erasure * hv * hv * mu * mu * (-2.0 * mu).exp())
}

/// Heralded Fisher information with mis-herald probability `ε_mh`.
pub fn fi_misherald(mu: f64, eta_erasure: f64, eta_herald: f64, v_bar: f64, eps_mh: f64) -> Result<f64> {
    check_fi_args(mu, eta_erasure, eta_herald, v_bar)?;
    unit("eps_mh", eps_mh)?;
    if mu == 0.0 {
        return Ok(0.0);
    }
    if eta_herald == 0.0 {
        return Ok(0.0);
    }
    // 1 − e^{−μ}(1 − k) = (1 − e^{−μ}) + k e^{−μ}
    let k = eps_mh / eta_herald;
    let den = one_minus_exp_neg(mu) + k * (-mu).exp();
    Ok(eta_erasure * eta_herald * v_bar * v_bar * mu * mu * (-2.0 * mu).exp() / den)
}

/// Conditional mis-herald probability `ε/(η_h μ + ε)`.
pub fn p_mh(eps_mw: f64, eta_herald: f64, mu: f64) -> Result<f64> {
    unit("eps_mw", eps_mw)?;
    unit("eta_herald", eta_herald)?;
    non_negative("mu", mu)?;
    let den = eta_herald * mu + eps_mw;
    if den <= 0.0 {
        return Err(MetricsError::ZeroDenominator);
    }
    Ok(eps_mw / den)
}

/// Ideal SNR of a lossless local measurement, `μ/(2 + μ)`.
pub fn snr_local_ideal(mu: f64) -> f64 {
    mu / (2.0 + mu)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Local log-log slope `d ln f / d ln μ` by a symmetric step in `ln μ`.
pub fn local_loglog_slope(f: &dyn Fn(f64) -> f64, mu: f64) -> f64 {
    let h = 1e-4f64;
    let a = f(mu * h.exp()).ln();
    let b = f(mu * (-h).exp()).ln();
    (a - b) / (2.0 * h)
}

/// Log-spaced grid of `n` points over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

/// Maximum-likelihood phase in `[0, π]` for parity counts under `model`.
pub fn mle_phase(model: &OutcomeModel, n_plus: u64, n_minus: u64) -> f64 {
    let total = n_plus + n_minus;
    if total == 0 || model.visibility == 0.0 {
        return PI / 2.0;
    }
    let c = (n_plus as f64 - n_minus as f64) / (model.visibility * total as f64);
    c.clamp(-1.0, 1.0).acos()
}

/// Draws `shots` outcomes and returns `[n+, n−, n_fail]`.
pub fn sample_counts<R: Rng + ?Sized>(model: &OutcomeModel, phi: f64, shots: u64, rng: &mut R) -> [u64; 3] {
    let p = model.probabilities(phi);
    let mut counts = [0u64; 3];
    for _ in 0..shots {
        let u: f64 = rng.gen();
        let k = if u < p[0] {
            0
        } else if u < p[0] + p[1] {
            1
        } else {
            2
        };
        counts[k] += 1;
    }
    counts
}

/// Sample variance of the MLE over `trials` repetitions of `shots` shots.
pub fn mle_variance<R: Rng + ?Sized>(model: &OutcomeModel, phi: f64, shots: u64, trials: usize, rng: &mut R) -> f64 {
    let est: Vec<f64> = (0..trials)
        .map(|_| {
            let c = sample_counts(model, phi, shots, rng);
            mle_phase(model, c[0], c[1])
        })
        .collect();
    let mean = est.iter().sum::<f64>() / trials as f64;
    est.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (trials as f64 - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThermalMethod {
    Analytic,
    MonteCarlo { samples: usize },
}

/// Weak-signal photonic state over `{|00⟩, |01⟩, |10⟩}` (left, right).
#[derive(Clone, Debug)]
pub struct Thermalized {
    /// Unnormalized, trace `1 + μ` like the weak-signal expansion itself.
    pub rho: DensityMatrix,
    /// Per-entry Monte Carlo standard error (modulus); `None` on the analytic path.
    pub std_err: Option<DMatrix<f64>>,
    /// Set when `μ > 0.3`, where the single-photon truncation is poor.
    pub outside_weak_regime: bool,
}

pub const WEAK_SIGNAL_LIMIT: f64 = 0.3;

/// Weak coherent pair state at fixed local phases.
pub fn coherent_pair_density(mu: f64, phase_left: f64, phase_right: f64) -> DMatrix<C64> {
    let a = (mu / 2.0).sqrt();
    let v = [C64::new(1.0, 0.0), C64::from_polar(a, phase_right), C64::from_polar(a, phase_left)];
    DMatrix::from_fn(3, 3, |i, j| v[i] * v[j].conj())
}

/// Phase-averaged signal state at differential phase `φ = φ_L − φ_R`.
pub fn thermalize<R: Rng + ?Sized>(mu: f64, phi: f64, method: ThermalMethod, rng: &mut R) -> Result<Thermalized> {
    non_negative("mu", mu)?;
    let outside_weak_regime = mu > WEAK_SIGNAL_LIMIT;
    let (m, std_err) = match method {
        ThermalMethod::Analytic => {
            let h = mu / 2.0;
            let mut m = DMatrix::zeros(3, 3);
            m[(0, 0)] = C64::new(1.0, 0.0);
            m[(1, 1)] = C64::new(h, 0.0);
            m[(2, 2)] = C64::new(h, 0.0);
            m[(1, 2)] = C64::from_polar(h, -phi);
            m[(2, 1)] = C64::from_polar(h, phi);
            (m, None)
        }
        ThermalMethod::MonteCarlo { samples } => {
            if samples < 2 {
                return Err(MetricsError::OutOfRange { name: "samples", value: samples as f64 });
            }
            let mut sum = DMatrix::<C64>::zeros(3, 3);
            let mut sum_sq = DMatrix::<f64>::zeros(3, 3);
            for _ in 0..samples {
                let right = rng.gen_range(0.0..2.0 * PI);
                let s = coherent_pair_density(mu, phi + right, right);
                sum += &s;
                for (acc, x) in sum_sq.iter_mut().zip(s.iter()) {
                    *acc += x.norm_sqr();
                }
            }
            let n = samples as f64;
            let mean = sum / C64::new(n, 0.0);
            let se = DMatrix::from_fn(3, 3, |i, j| {
                let var = (sum_sq[(i, j)] / n - mean[(i, j)].norm_sqr()).max(0.0) * n / (n - 1.0);
                (var / n).sqrt()
            });
            (mean, Some(se))
        }
    };
    Ok(Thermalized {
        rho: DensityMatrix::from_matrix(vec![3], m).expect("3x3"),
        std_err,
        outside_weak_regime,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilityFit {
    /// Amplitude `V ≥ 0` of `V cos(φ + φ₀)`.
    pub visibility: f64,
    pub phase_offset: f64,
    /// Constant term of the fit.
    pub offset: f64,
    /// Weighted sum of squared residuals.
    pub residual: f64,
}

/// Weighted linear least squares of `y ≈ c + a cos φ + b sin φ`.
pub fn visibility_fit(phases: &[f64], values: &[f64], weights: Option<&[f64]>) -> Result<VisibilityFit> {
    let n = phases.len();
    if n < 4 || values.len() != n || weights.is_some_and(|w| w.len() != n) {
        return Err(MetricsError::TooFewPoints(n.min(values.len())));
    }
    let mut ata = Matrix3::<f64>::zeros();
    let mut aty = Vector3::<f64>::zeros();
    for k in 0..n {
        let w = weights.map_or(1.0, |w| w[k]);
        let row = Vector3::new(1.0, phases[k].cos(), phases[k].sin());
        ata += w * row * row.transpose();
        aty += w * values[k] * row;
    }
    let svd = ata.svd(true, true);
    if svd.singular_values.min() <= 1e-10 * svd.singular_values.max().max(1e-300) {
        return Err(MetricsError::DegenerateGrid);
    }
    let coef = svd.solve(&aty, 0.0).map_err(|_| MetricsError::DegenerateGrid)?;
    let (c, a, b) = (coef[0], coef[1], coef[2]);
    let residual = (0..n)
        .map(|k| {
            let w = weights.map_or(1.0, |w| w[k]);
            let r = values[k] - c - a * phases[k].cos() - b * phases[k].sin();
            w * r * r
        })
        .sum();
    let visibility = a.hypot(b);
    let phase_offset = if visibility == 0.0 { 0.0 } else { (-b).atan2(a) };
    Ok(VisibilityFit { visibility, phase_offset, offset: c, residual })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetFactor {
    pub name: String,
    pub factor: f64,
}

impl BudgetFactor {
    pub fn new(name: impl Into<String>, factor: f64) -> Self {
        Self { name: name.into(), factor }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub name: String,
    pub factor: f64,
    pub cumulative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub product: f64,
    pub rows: Vec<BudgetRow>,
}

pub fn budget_product(factors: &[BudgetFactor]) -> Result<BudgetReport> {
    let mut product = 1.0;
    let mut rows = Vec::with_capacity(factors.len());
    for f in factors {
        unit("factor", f.factor)?;
        product *= f.factor;
        rows.push(BudgetRow { name: f.name.clone(), factor: f.factor, cumulative: product });
    }
    Ok(BudgetReport { product, rows })
}

/// Visibility reduction factors of the time-bin experiment.
pub fn timebin_visibility_budget() -> Vec<BudgetFactor> {
    vec![
        BudgetFactor::new("initial_state_preparation", 0.9),
        BudgetFactor::new("mis_heralding", 0.45),
        BudgetFactor::new("erasure_loss", 0.5),
        BudgetFactor::new("multi_photon", 0.95),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherParams {
    pub eta_erasure: f64,
    pub eta_herald: f64,
    pub v_bar: f64,
    pub eps_mh: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherRow {
    pub mu: f64,
    pub heralded: f64,
    pub unheralded: f64,
    pub misherald: f64,
    pub snr_local: f64,
}

pub fn fisher_curves(mus: &[f64], p: &FisherParams) -> Result<Vec<FisherRow>> {
    mus.iter()
        .map(|&mu| {
            Ok(FisherRow {
                mu,
                heralded: fi_heralded(mu, p.eta_erasure, p.eta_herald, p.v_bar)?,
                unheralded: fi_unheralded(mu, p.eta_erasure, p.eta_herald, p.v_bar)?,
                misherald: fi_misherald(mu, p.eta_erasure, p.eta_herald, p.v_bar, p.eps_mh)?,
                snr_local: snr_local_ideal(mu),
            })
        })
        .collect()
}

pub fn write_fisher_csv<W: Write>(rows: &[FisherRow], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    out.write_record(["mu", "fi_heralded", "fi_unheralded", "fi_misherald", "snr_local_ideal"])?;
    for r in rows {
        out.write_record([
            format!("{:.6e}", r.mu),
            format!("{:.9e}", r.heralded),
            format!("{:.9e}", r.unheralded),
            format!("{:.9e}", r.misherald),
            format!("{:.9e}", r.snr_local),
        ])?;
    }
    out.flush()?;
    Ok(())
}
