//! Spin-photon gate primitives built on [`crate::hilbert`].

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::hilbert::{
    ln_factorial, HilbertError, HybridState, MixedState, ModeKind, QubitGate, UP,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GateError {
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
    #[error("{0}")]
    FlavorMismatch(String),
    #[error("{0}")]
    Precondition(String),
    #[error("parameter `{name}` = {value} out of range")]
    OutOfRange { name: &'static str, value: f64 },
}

pub type Result<T> = std::result::Result<T, GateError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateFlavor {
    /// |↑⟩ reflects the photon; |↓⟩ sends it to a lost mode.
    #[default]
    AmplitudeReflection,
    /// The photon is always reflected and picks up a π phase when the spin is |↑⟩.
    PhaseReflection,
}

/// Photonic ports of one SMSPG. `lost` is required for the amplitude flavor
/// and must be absent for the phase flavor.
#[derive(Clone, Copy, Debug)]
pub struct Ports<'a> {
    pub input: &'a str,
    pub reflected: &'a str,
    pub lost: Option<&'a str>,
}

/// Single-mode spin-photon gate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Smspg {
    pub flavor: GateFlavor,
    /// Reflection amplitude for the |↓⟩ spin (optical contrast); 0 is ideal.
    pub r_down: f64,
}

impl Default for Smspg {
    fn default() -> Self {
        Self { flavor: GateFlavor::AmplitudeReflection, r_down: 0.0 }
    }
}

impl Smspg {
    pub fn new(flavor: GateFlavor) -> Self {
        Self { flavor, r_down: 0.0 }
    }

    pub fn apply(&self, state: &HybridState, ports: Ports<'_>, electron: &str) -> Result<HybridState> {
        let ke = state.index_of(electron)?;
        if state.register()[ke].kind != ModeKind::Qubit {
            return Err(HilbertError::NotQubit(electron.to_string()).into());
        }
        let ki = bosonic(state, ports.input)?;
        let kr = bosonic(state, ports.reflected)?;
        match (self.flavor, ports.lost) {
            (GateFlavor::AmplitudeReflection, Some(lost)) => {
                if !(0.0..=1.0).contains(&self.r_down) {
                    return Err(GateError::OutOfRange { name: "r_down", value: self.r_down });
                }
                let kl = bosonic(state, lost)?;
                if ki == kr || ki == kl || kr == kl {
                    return Err(GateError::FlavorMismatch("amplitude SMSPG needs distinct input, reflected and lost modes".into()));
                }
                if !state.register()[kl].is_environment() {
                    return Err(GateError::FlavorMismatch(format!("lost mode `{lost}` must be in the environment partition")));
                }
                Ok(amplitude_gate(state, ki, kr, kl, ke, self.r_down))
            }
            (GateFlavor::AmplitudeReflection, None) => {
                Err(GateError::FlavorMismatch("amplitude SMSPG requires a lost mode".into()))
            }
            (GateFlavor::PhaseReflection, Some(_)) => {
                Err(GateError::FlavorMismatch("phase SMSPG never routes to a lost mode".into()))
            }
            (GateFlavor::PhaseReflection, None) => Ok(phase_gate(state, ki, kr, ke)),
        }
    }
}

/// [`Smspg::apply`] with unit contrast.
pub fn smspg(state: &HybridState, ports: Ports<'_>, electron: &str, flavor: GateFlavor) -> Result<HybridState> {
    Smspg::new(flavor).apply(state, ports, electron)
}

fn bosonic(state: &HybridState, label: &str) -> Result<usize> {
    let k = state.index_of(label)?;
    match state.register()[k].kind {
        ModeKind::Bosonic { .. } => Ok(k),
        ModeKind::Qubit => Err(HilbertError::NotBosonic(label.to_string()).into()),
    }
}

fn cutoff(state: &HybridState, k: usize) -> usize {
    state.register()[k].cutoff().unwrap_or(0)
}

// √((b0+k)!/(b0! k!)): (a†)^k/√k! acting on |b0⟩.
fn raise(b0: usize, k: usize) -> f64 {
    (0.5 * (ln_factorial(b0 + k) - ln_factorial(b0) - ln_factorial(k))).exp()
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

fn amplitude_gate(state: &HybridState, ki: usize, kr: usize, kl: usize, ke: usize, r_down: f64) -> HybridState {
    let (cr, cl) = (cutoff(state, kr), cutoff(state, kl));
    let l_down = (1.0 - r_down * r_down).max(0.0).sqrt();
    let mut out: Vec<(Vec<u8>, Complex64)> = Vec::new();
    for (basis, a) in state.amplitudes() {
        let n = basis[ki] as usize;
        if n == 0 {
            out.push((basis.clone(), *a));
            continue;
        }
        let (b0, c0) = (basis[kr] as usize, basis[kl] as usize);
        // Every photon splits independently into reflected (k) and lost (n−k).
        let (r, l) = if basis[ke] == UP { (1.0, 0.0) } else { (r_down, l_down) };
        for k in 0..=n {
            let w = r.powi(k as i32) * l.powi((n - k) as i32);
            if w == 0.0 || b0 + k > cr || c0 + n - k > cl {
                continue;
            }
            let ln_f = ln_binomial(n, k)
                + 0.5 * (ln_factorial(b0 + k) - ln_factorial(b0) + ln_factorial(c0 + n - k) - ln_factorial(c0) - ln_factorial(n));
            let mut b = basis.clone();
            b[ki] = 0;
            b[kr] = (b0 + k) as u8;
            b[kl] = (c0 + n - k) as u8;
            out.push((b, a * (w * ln_f.exp())));
        }
    }
    rebuild(state, out)
}

fn phase_gate(state: &HybridState, ki: usize, kr: usize, ke: usize) -> HybridState {
    let cr = cutoff(state, kr);
    let mut out = Vec::new();
    for (basis, a) in state.amplitudes() {
        let n = basis[ki] as usize;
        let sign = if basis[ke] == UP && n % 2 == 1 { -1.0 } else { 1.0 };
        if ki == kr || n == 0 {
            out.push((basis.clone(), a * sign));
            continue;
        }
        let b0 = basis[kr] as usize;
        if b0 + n > cr {
            continue;
        }
        let mut b = basis.clone();
        b[ki] = 0;
        b[kr] = (b0 + n) as u8;
        out.push((b, a * (sign * raise(b0, n))));
    }
    rebuild(state, out)
}

fn rebuild(state: &HybridState, amps: Vec<(Vec<u8>, Complex64)>) -> HybridState {
    let before = state.norm_sq();
    let mut s = HybridState::from_amplitudes(state.register().to_vec(), amps).expect("gate keeps basis in range");
    let lost = (before - s.norm_sq()).max(0.0) + state.leakage();
    s.set_leakage(lost);
    s
}

/// Microwave rotation error: the qubit is flipped with probability `eps`
/// (depolarizing strength `2·eps`).
pub fn mw_error(mixed: &MixedState, qubit: &str, eps: f64) -> Result<MixedState> {
    if !(0.0..=0.5).contains(&eps) {
        return Err(GateError::OutOfRange { name: "eps_mw", value: eps });
    }
    if eps == 0.0 {
        return Ok(mixed.clone());
    }
    Ok(mixed.depolarize_qubit(qubit, 2.0 * eps)?)
}

/// Single-mode photon-nucleus entangling gate: conditional electron flip on
/// nucleus |↑⟩, amplitude SMSPG, and the same flip again. The electron returns
/// to |↑⟩ unless a flip error hit it before the gate.
pub fn smphone(state: &HybridState, ports: Ports<'_>, electron: &str, nucleus: &str) -> Result<HybridState> {
    check_smphone_input(state, electron, nucleus)?;
    smphone_map(state, ports, electron, nucleus)
}

fn smphone_map(state: &HybridState, ports: Ports<'_>, electron: &str, nucleus: &str) -> Result<HybridState> {
    let flip = QubitGate::cnot(nucleus, UP, electron);
    let s = state.apply_qubit_gate(&flip)?;
    let s = Smspg::default().apply(&s, ports, electron)?;
    Ok(s.apply_qubit_gate(&flip)?)
}

/// SMPHONE under a microwave flip error of probability `eps_mw` on the
/// electron. The electron stays as the error flag; measure it and keep |↑⟩.
pub fn smphone_noisy(
    mixed: &MixedState,
    ports: Ports<'_>,
    electron: &str,
    nucleus: &str,
    eps_mw: f64,
) -> Result<MixedState> {
    for b in &mixed.branches {
        check_smphone_input(&b.state, electron, nucleus)?;
    }
    let noisy = mw_error(mixed, electron, eps_mw)?;
    noisy.map(|s| smphone_map(s, ports, electron, nucleus))
}

fn check_smphone_input(state: &HybridState, electron: &str, nucleus: &str) -> Result<()> {
    let tol = 1e-12 * state.norm_sq().max(1e-300);
    let [down, _] = state.measure_qubit(electron, crate::hilbert::MeasBasis::Z)?;
    if down.probability > tol {
        return Err(GateError::Precondition(format!("electron `{electron}` must start in |↑⟩")));
    }
    let [_, minus] = state.measure_qubit(nucleus, crate::hilbert::MeasBasis::X)?;
    if minus.probability > tol {
        return Err(GateError::Precondition(format!("nucleus `{nucleus}` must start in |+⟩")));
    }
    Ok(())
}

/// Heralded electron pair after dual-rail entanglement with interferometer
/// phase `δφ_e`.
#[derive(Clone, Debug)]
pub struct ElectronPair {
    /// Normalized amplitudes indexed by `2·e_L + e_R` (0 = ↓, 1 = ↑).
    pub amplitudes: [Complex64; 4],
    /// Probability of the herald click for a single photon in the dual rail.
    pub herald_weight: f64,
}

impl ElectronPair {
    /// Overlap with |Ψ−⟩ = (|↑↓⟩ − |↓↑⟩)/√2.
    pub fn fidelity_psi_minus(&self) -> f64 {
        let a = &self.amplitudes;
        ((a[2] - a[1]) * FRAC_1_SQRT_2).norm_sqr()
    }

    pub fn to_state(&self, left: &str, right: &str) -> HybridState {
        let reg = vec![crate::hilbert::ModeSpec::qubit(left), crate::hilbert::ModeSpec::qubit(right)];
        let entries = (0..4).map(|k| (vec![(k / 2) as u8, (k % 2) as u8], self.amplitudes[k]));
        HybridState::from_amplitudes(reg, entries).expect("two-qubit register")
    }
}

/// Closed-form herald projection. With `e = e^{iδφ_e}` the unnormalized
/// electron state is `(1+e)|↑↑⟩ + |↑↓⟩ + e|↓↑⟩`, scaled so its squared norm is
/// the herald probability for one photon.
pub fn entangling_projection(delta_phi: f64) -> ElectronPair {
    let phi = delta_phi.rem_euclid(2.0 * PI);
    let e = Complex64::from_polar(1.0, phi);
    let one = Complex64::new(1.0, 0.0);
    let raw = [Complex64::default(), e, one, one + e];
    let norm_sq: f64 = raw.iter().map(|x| x.norm_sqr()).sum();
    let scale = 1.0 / norm_sq.sqrt();
    ElectronPair { amplitudes: raw.map(|x| x * scale), herald_weight: norm_sq / 16.0 }
}

/// `F(Ψ−)` at `δφ_e = π + δ`: `(1 + cos δ)/(4 − 2cos δ) ≈ 1 − ¾δ²`.
pub fn psi_minus_fidelity_closed_form(delta: f64) -> f64 {
    (1.0 + delta.cos()) / (4.0 - 2.0 * delta.cos())
}
