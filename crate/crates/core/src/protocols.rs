//! End-to-end pipelines: parallel electron and nuclear entanglement, local
//! time-bin sensing and the two-station non-local phase-sensing protocol.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::erasure::{
    erasure_by_difference, DetectorModel, ErasureError, FeedbackTargets, ProtocolKind, Strategy,
};
use crate::hilbert::{
    cutoff_for, ln_factorial, poisson_tail, CoherentOptions, DensityMatrix, HilbertError, HybridState,
    MixedState, ModeSpec, QubitGate, DENSE_CAP, UP,
};
use crate::metrics::{visibility_fit, MetricsError, VisibilityFit};
use crate::spin_photon::{
    mw_error, psi_minus_fidelity_closed_form, smphone_noisy, GateError, GateFlavor, Ports, Smspg,
};

type C64 = Complex64;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Erasure(#[from] ErasureError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("parameter `{name}` = {value} out of range")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// Eigenvalues below this are dropped when a dense state is turned back into
/// an ensemble.
const EIG_FLOOR: f64 = 1e-13;

/// LO tail tolerance for protocol runs; tight enough that truncation stays
/// below the 1e-10 bookkeeping budget.
pub const LO_TAIL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignalSource {
    /// Weak coherent light with uniformly random local phases at fixed
    /// difference: a Poisson mixture of number states.
    #[default]
    PhaseAveraged,
    /// Coherent light with fixed local phases.
    CoherentFixedPhase,
    /// Exactly one photon in `(|10⟩ + e^{iφ}|01⟩)/√2`.
    SinglePhoton,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErasureMode {
    /// Projection of each reflected mode on `(|0⟩ ± |1⟩)/√2`; two or more
    /// photons in one mode are rejected.
    Ideal,
    /// LO interference and photon counting with the configured detector.
    #[default]
    Detected,
}

/// Noise knobs shared by all pipelines. `Default` is noiseless.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Electron MW flip probability per pulse block.
    pub eps_mw: f64,
    /// Weight of |Ψ−⟩ in the Werner-mixed pre-armed nuclear pair.
    pub bell_fidelity: f64,
    /// Depolarizing probability on each nucleus at initialization.
    pub nuclear_depolarization: f64,
    /// Amplitude damping of the electrons right before readout.
    pub electron_damping: f64,
    pub electron_readout_flip: f64,
    pub nuclear_readout_flip: f64,
    /// Transmission of each rail of the entanglement interferometer.
    pub link_transmission: f64,
    /// Reflection amplitude of the |↓⟩ spin.
    pub r_down: f64,
    pub detector: DetectorModel,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::ideal(0.55)
    }
}

impl NoiseModel {
    pub fn ideal(alpha_lo: f64) -> Self {
        Self {
            eps_mw: 0.0,
            bell_fidelity: 1.0,
            nuclear_depolarization: 0.0,
            electron_damping: 0.0,
            electron_readout_flip: 0.0,
            nuclear_readout_flip: 0.0,
            link_transmission: 1.0,
            r_down: 0.0,
            detector: DetectorModel { tail_tolerance: LO_TAIL, ..DetectorModel::ideal(C64::new(alpha_lo, 0.0)) },
        }
    }

    /// Lossy detection, 6% MW error and 4% total dark-count probability.
    pub fn experimental(alpha_lo: f64) -> Self {
        let detector = DetectorModel { tail_tolerance: LO_TAIL, ..DetectorModel::noisy(C64::new(alpha_lo, 0.0)) };
        Self { eps_mw: 0.06, detector, ..Self::ideal(alpha_lo) }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("bell_fidelity", self.bell_fidelity),
            ("nuclear_depolarization", self.nuclear_depolarization),
            ("electron_damping", self.electron_damping),
            ("electron_readout_flip", self.electron_readout_flip),
            ("nuclear_readout_flip", self.nuclear_readout_flip),
            ("link_transmission", self.link_transmission),
            ("r_down", self.r_down),
        ];
        for (name, value) in unit {
            if !(0.0..=1.0).contains(&value) {
                return Err(ProtocolError::OutOfRange { name, value });
            }
        }
        if !(0.0..=0.5).contains(&self.eps_mw) {
            return Err(ProtocolError::OutOfRange { name: "eps_mw", value: self.eps_mw });
        }
        self.detector.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub mu_sig: f64,
    /// Differential signal phase `φ_L − φ_R` (non-local) or time-bin phase θ.
    pub phi: f64,
    pub delta_phi_e: f64,
    pub mu_ent: f64,
    pub gate_flavor: GateFlavor,
    pub noise: NoiseModel,
    pub strategy: Strategy,
    pub herald: bool,
    pub phase_jitter_sigma: f64,
    /// Gauss–Hermite nodes for phase jitter averaging.
    pub jitter_nodes: usize,
    /// Keep only electron |↑↑⟩ after SMPHONE entanglement.
    pub error_detection: bool,
    pub source: SignalSource,
    pub erasure: ErasureMode,
    /// Poisson tail tolerance that picks photonic cutoffs.
    pub tail_tolerance: f64,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            mu_sig: 0.25,
            phi: 0.0,
            delta_phi_e: PI,
            mu_ent: 0.1,
            gate_flavor: GateFlavor::AmplitudeReflection,
            noise: NoiseModel::default(),
            strategy: Strategy::Strategy2,
            herald: true,
            phase_jitter_sigma: 0.0,
            jitter_nodes: 24,
            error_detection: true,
            source: SignalSource::PhaseAveraged,
            erasure: ErasureMode::Detected,
            tail_tolerance: 1e-9,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("mu_sig", self.mu_sig), ("mu_ent", self.mu_ent), ("phase_jitter_sigma", self.phase_jitter_sigma)] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ProtocolError::OutOfRange { name, value });
            }
        }
        for (name, value) in [("phi", self.phi), ("delta_phi_e", self.delta_phi_e)] {
            if !value.is_finite() {
                return Err(ProtocolError::OutOfRange { name, value });
            }
        }
        if !(self.tail_tolerance > 0.0 && self.tail_tolerance < 1e-3) {
            return Err(ProtocolError::OutOfRange { name: "tail_tolerance", value: self.tail_tolerance });
        }
        if self.jitter_nodes == 0 || self.jitter_nodes > 200 {
            return Err(ProtocolError::OutOfRange { name: "jitter_nodes", value: self.jitter_nodes as f64 });
        }
        self.noise.validate()
    }
}

/// One named slice of the total probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub label: String,
    pub weight: f64,
}

fn record(label: &str, weight: f64) -> BranchRecord {
    BranchRecord { label: label.to_string(), weight }
}

/// Non-local sensing result. Probabilities are absolute (per attempt).
#[derive(Clone, Debug, Serialize)]
pub struct ProtocolResult {
    pub herald_prob_upup: f64,
    pub herald_prob_downdown: f64,
    /// Heralded weight when `herald`, erasure-accepted weight otherwise.
    pub success_prob: f64,
    /// Observed nuclear ⟨XX⟩ of the kept events.
    pub nuclear_parity_expectation: f64,
    pub parity_heralded: f64,
    pub parity_unheralded: f64,
    /// Weight passing erasure before any electron post-selection.
    pub erasure_accepted: f64,
    /// Unnormalized nuclear state of the kept events.
    #[serde(skip)]
    pub post_selected_state: MixedState,
    /// Odd-parity outcomes (heralded runs), truncation leakage and dropped
    /// numerical floor.
    pub discarded_weight: f64,
    pub reject_weight: f64,
    pub branch_log: Vec<BranchRecord>,
}

impl ProtocolResult {
    /// `[P(+), P(−), P(fail)]` of the nuclear parity measurement.
    pub fn outcome_probabilities(&self) -> [f64; 3] {
        let p = self.success_prob;
        let v = self.nuclear_parity_expectation;
        let plus = p * (1.0 + v) / 2.0;
        let minus = p * (1.0 - v) / 2.0;
        [plus, minus, (1.0 - plus - minus).max(0.0)]
    }
}

// ---------------------------------------------------------------------------
// Shared building blocks

type SourceBranch = (f64, Vec<((u8, u8), C64)>);

/// Two-mode signal branches over `(left, right)` photon numbers and the
/// truncated tail probability. `phase` sits on the right mode.
fn source_branches(source: SignalSource, mu: f64, phase: f64, tol: f64) -> (Vec<SourceBranch>, usize, f64) {
    match source {
        SignalSource::SinglePhoton => {
            let amps = vec![((1, 0), C64::new(FRAC_1_SQRT_2, 0.0)), ((0, 1), C64::from_polar(FRAC_1_SQRT_2, phase))];
            (vec![(1.0, amps)], 1, 0.0)
        }
        _ if mu == 0.0 => (vec![(1.0, vec![((0, 0), C64::new(1.0, 0.0))])], 1, 0.0),
        SignalSource::PhaseAveraged => {
            let nmax = cutoff_for(mu, tol, 1);
            let mut out = Vec::with_capacity(nmax + 1);
            for n in 0..=nmax {
                let w = (-mu + n as f64 * mu.ln() - ln_factorial(n)).exp();
                let amps = (0..=n)
                    .map(|k| {
                        let mag = (0.5 * (ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)) - 0.5 * n as f64 * 2f64.ln()).exp();
                        (((k) as u8, (n - k) as u8), C64::from_polar(mag, (n - k) as f64 * phase))
                    })
                    .collect();
                out.push((w, amps));
            }
            (out, nmax, poisson_tail(mu, nmax))
        }
        SignalSource::CoherentFixedPhase => {
            let nmax = cutoff_for(mu, tol, 1);
            let beta = (mu / 2.0).sqrt();
            let mut amps = Vec::new();
            for a in 0..=nmax {
                for b in 0..=(nmax - a) {
                    let mag = (-mu / 2.0 + (a + b) as f64 * beta.ln() - 0.5 * (ln_factorial(a) + ln_factorial(b))).exp();
                    amps.push(((a as u8, b as u8), C64::from_polar(mag, b as f64 * phase)));
                }
            }
            (vec![(1.0, amps)], nmax, poisson_tail(mu, nmax))
        }
    }
}

/// Bell-diagonal nuclear pair: Werner mixing followed by depolarization of
/// each nucleus. Order: Ψ−, Ψ+, Φ−, Φ+.
pub fn bell_diagonal_weights(bell_fidelity: f64, depolarization: f64) -> [f64; 4] {
    let r = (1.0 - bell_fidelity) / 3.0;
    let mut w = [bell_fidelity, r, r, r];
    // Single-qubit Paulis permute the Bell basis the same way on either side.
    let x = [2, 3, 0, 1];
    let y = [3, 2, 1, 0];
    let z = [1, 0, 3, 2];
    for _ in 0..2 {
        let p = depolarization / 4.0;
        let mut next = [0.0; 4];
        for k in 0..4 {
            next[k] = (1.0 - 3.0 * p) * w[k] + p * (w[x[k]] + w[y[k]] + w[z[k]]);
        }
        w = next;
    }
    w
}

/// Amplitudes of the Bell states over `2·n_L + n_R`.
fn bell_vector(k: usize) -> [C64; 4] {
    let h = C64::new(FRAC_1_SQRT_2, 0.0);
    let z = C64::default();
    match k {
        0 => [z, -h, h, z],
        1 => [z, h, h, z],
        2 => [h, z, z, -h],
        _ => [h, z, z, h],
    }
}

fn gate_ports<'a>(flavor: GateFlavor, input: &'a str, reflected: &'a str, lost: &'a str) -> Ports<'a> {
    match flavor {
        GateFlavor::AmplitudeReflection => Ports { input, reflected, lost: Some(lost) },
        GateFlavor::PhaseReflection => Ports { input, reflected, lost: None },
    }
}

/// Labels and strides of the system partition of a register.
struct Layout {
    labels: Vec<String>,
    strides: Vec<usize>,
}

impl Layout {
    fn system(register: &[ModeSpec]) -> Self {
        let sys: Vec<&ModeSpec> = register.iter().filter(|m| !m.is_environment()).collect();
        let mut strides = vec![1usize; sys.len()];
        for k in (0..sys.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * sys[k + 1].dim();
        }
        Self { labels: sys.iter().map(|m| m.label.clone()).collect(), strides }
    }

    fn index(&self, label: &str) -> Result<usize> {
        self.labels.iter().position(|l| l == label).ok_or_else(|| HilbertError::UnknownMode(label.to_string()).into())
    }

    fn stride(&self, label: &str) -> Result<usize> {
        Ok(self.strides[self.index(label)?])
    }
}

/// Splits a dense state over two measured qubits `meas` and two kept qubits
/// `keep` (the whole system) into kept-qubit blocks per outcome `2·m0 + m1`.
fn qubit_blocks(rho: &DensityMatrix, layout: &Layout, meas: [&str; 2], keep: [&str; 2]) -> Result<[DMatrix<C64>; 4]> {
    if layout.labels.len() != 4 || rho.dim() != 16 {
        return Err(HilbertError::DimensionMismatch(rho.dim(), 16).into());
    }
    let sm = [layout.stride(meas[0])?, layout.stride(meas[1])?];
    let sk = [layout.stride(keep[0])?, layout.stride(keep[1])?];
    let idx = |m: usize, k: usize| (m >> 1) * sm[0] + (m & 1) * sm[1] + (k >> 1) * sk[0] + (k & 1) * sk[1];
    Ok(std::array::from_fn(|m| DMatrix::from_fn(4, 4, |i, j| rho.m[(idx(m, i), idx(m, j))])))
}

/// Same split for one measured and one kept qubit.
fn qubit_blocks_single(rho: &DensityMatrix, layout: &Layout, meas: &str, keep: &str) -> Result<[DMatrix<C64>; 2]> {
    if layout.labels.len() != 2 || rho.dim() != 4 {
        return Err(HilbertError::DimensionMismatch(rho.dim(), 4).into());
    }
    let (sm, sk) = (layout.stride(meas)?, layout.stride(keep)?);
    Ok(std::array::from_fn(|m| DMatrix::from_fn(2, 2, |i, j| rho.m[(m * sm + i * sk, m * sm + j * sk)])))
}

fn trace(m: &DMatrix<C64>) -> f64 {
    m.trace().re
}

/// `⟨XX⟩` of an unnormalized two-qubit block, divided by its trace.
fn xx_expectation(m: &DMatrix<C64>) -> f64 {
    let t = trace(m);
    if t <= 0.0 {
        return 0.0;
    }
    2.0 * (m[(0, 3)] + m[(1, 2)]).re / t
}

/// Applies independent classical bit flips of probability `q` to two-bit
/// outcome labels.
fn flip_outcomes(blocks: &[DMatrix<C64>; 4], q: f64) -> [DMatrix<C64>; 4] {
    std::array::from_fn(|o| {
        let mut acc = DMatrix::zeros(blocks[0].nrows(), blocks[0].ncols());
        for (t, b) in blocks.iter().enumerate() {
            let flips = (o ^ t).count_ones() as i32;
            let p = q.powi(flips) * (1.0 - q).powi(2 - flips);
            if p > 0.0 {
                acc += b * C64::new(p, 0.0);
            }
        }
        acc
    })
}

struct ErasureOut {
    state: MixedState,
    accepted: f64,
    rejected: f64,
    leakage: f64,
    floor: f64,
}

/// Erasure of `signal` modes with feedback on the qubits in `targets`.
fn erase(
    input: &MixedState,
    signal: [&str; 2],
    targets: [&str; 2],
    kind: ProtocolKind,
    cfg: &ProtocolConfig,
) -> Result<ErasureOut> {
    match cfg.erasure {
        ErasureMode::Ideal => erase_ideal(input, signal, targets, kind),
        ErasureMode::Detected => {
            let diff = erasure_by_difference(input, signal, &cfg.noise.detector)?;
            let register = diff.system_register();
            let layout = Layout::system(&register);
            let fb = FeedbackTargets { left: layout.index(targets[0])?, right: layout.index(targets[1])? };
            let (acc, rejected) = diff.accepted(cfg.strategy, kind, fb)?;
            let (state, accepted, floor) = match acc {
                None => (MixedState::empty(), 0.0, 0.0),
                Some(rho) => {
                    let s = MixedState::from_density(register, &rho, EIG_FLOOR)?;
                    let kept = s.total_probability();
                    (s, rho.trace(), (rho.trace() - kept).max(0.0))
                }
            };
            Ok(ErasureOut { state, accepted, rejected, leakage: diff.leakage, floor })
        }
    }
}

fn erase_ideal(input: &MixedState, signal: [&str; 2], targets: [&str; 2], kind: ProtocolKind) -> Result<ErasureOut> {
    let mut out = MixedState::empty();
    let mut rejected = 0.0;
    for b in &input.branches {
        let s = &b.state;
        let parts: [[HybridState; 2]; 2] = [
            [s.project_out(signal[0], 0)?.project_out(signal[1], 0)?, s.project_out(signal[0], 0)?.project_out(signal[1], 1)?],
            [s.project_out(signal[0], 1)?.project_out(signal[1], 0)?, s.project_out(signal[0], 1)?.project_out(signal[1], 1)?],
        ];
        let kept: f64 = parts.iter().flatten().map(|p| p.norm_sq()).sum();
        rejected += b.weight * (s.norm_sq() - kept).max(0.0);
        for (sl, sr) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let mut acc = parts[0][0].clone();
            for (a, bb, f) in [(0, 1, sr), (1, 0, sl), (1, 1, sl * sr)] {
                acc = acc.add(&parts[a][bb].scaled(C64::new(f, 0.0)))?;
            }
            let mut acc = acc.scaled(C64::new(0.5, 0.0));
            let gates: Vec<QubitGate> = match kind {
                ProtocolKind::NonLocal => {
                    let mut g = Vec::new();
                    if sl < 0.0 {
                        g.push(QubitGate::z(targets[0]));
                    }
                    if sr < 0.0 {
                        g.push(QubitGate::z(targets[1]));
                    }
                    g
                }
                ProtocolKind::TimeBin if sl != sr => vec![QubitGate::x(targets[0])],
                ProtocolKind::TimeBin => Vec::new(),
            };
            acc = acc.apply_gates(&gates)?;
            acc.set_leakage(0.0);
            out.push(b.weight, acc);
        }
    }
    let accepted = out.total_probability();
    Ok(ErasureOut { state: out, accepted, rejected, leakage: input.total_leakage(), floor: 0.0 })
}

// ---------------------------------------------------------------------------
// Non-local sensing

const NL_SIGNAL: [&str; 2] = ["s_L", "s_R"];
const NL_REFLECTED: [&str; 2] = ["r_L", "r_R"];
const NL_LOST: [&str; 2] = ["l_L", "l_R"];
const NL_ELECTRON: [&str; 2] = ["e_L", "e_R"];
const NL_NUCLEUS: [&str; 2] = ["n_L", "n_R"];

/// Initial non-local ensemble: signal ⊗ |++⟩_e ⊗ Bell-diagonal nuclei.
fn nonlocal_input(cfg: &ProtocolConfig) -> Result<MixedState> {
    // The differential phase φ_L − φ_R goes on the left mode here so that the
    // heralded pair carries e^{−iφ} on |↓↑⟩ for ↑↑ outcomes.
    let (branches, nmax, tail) = source_branches(cfg.source, cfg.mu_sig, -cfg.phi, cfg.tail_tolerance);
    let cut = nmax.max(1);
    let mut register: Vec<ModeSpec> = Vec::new();
    for l in NL_SIGNAL.iter().chain(NL_REFLECTED.iter()) {
        register.push(ModeSpec::bosonic(l, cut));
    }
    for l in NL_LOST {
        register.push(ModeSpec::bosonic(l, cut).in_environment());
    }
    for l in NL_ELECTRON.iter().chain(NL_NUCLEUS.iter()) {
        register.push(ModeSpec::qubit(l));
    }
    let bell = bell_diagonal_weights(cfg.noise.bell_fidelity, cfg.noise.nuclear_depolarization);
    let mut mixed = MixedState::empty();
    for (wb, b) in bell.iter().enumerate() {
        if *b <= 0.0 {
            continue;
        }
        let nuc = bell_vector(wb);
        for (ws, amps) in &branches {
            let mut entries = Vec::new();
            for &((kl, kr), a) in amps {
                for e in 0..4u8 {
                    for (n, cn) in nuc.iter().enumerate() {
                        if cn.norm_sqr() == 0.0 {
                            continue;
                        }
                        let basis = vec![kl, kr, 0, 0, 0, 0, e >> 1, e & 1, (n >> 1) as u8, (n & 1) as u8];
                        entries.push((basis, a * cn * 0.5));
                    }
                }
            }
            mixed.push(b * ws, HybridState::from_amplitudes(register.clone(), entries)?);
        }
    }
    mixed.leakage = tail;
    Ok(mixed)
}

/// Full non-local protocol at one `(μ_sig, φ)` point.
pub fn run_nonlocal_sensing(cfg: &ProtocolConfig) -> Result<ProtocolResult> {
    cfg.validate()?;
    let input = nonlocal_input(cfg)?;
    let gate = Smspg { flavor: cfg.gate_flavor, r_down: cfg.noise.r_down };
    let mut state = input;
    for k in 0..2 {
        let ports = gate_ports(cfg.gate_flavor, NL_SIGNAL[k], NL_REFLECTED[k], NL_LOST[k]);
        state = state.map(|s| gate.apply(s, ports, NL_ELECTRON[k]))?;
    }
    state = state.map(|s| s.project_out(NL_SIGNAL[0], 0)?.project_out(NL_SIGNAL[1], 0))?;
    let er = erase(&state, NL_REFLECTED, NL_NUCLEUS, ProtocolKind::NonLocal, cfg)?;

    let mut s = er.state;
    for e in NL_ELECTRON {
        s = mw_error(&s, e, cfg.noise.eps_mw)?;
    }
    let gates: Vec<QubitGate> = (0..2)
        .flat_map(|k| [QubitGate::rot_y(NL_ELECTRON[k], -FRAC_PI_2), QubitGate::cnot(NL_NUCLEUS[k], UP, NL_ELECTRON[k])])
        .collect();
    s = s.apply_gates(&gates)?;
    if cfg.noise.electron_damping > 0.0 {
        for e in NL_ELECTRON {
            s = s.amplitude_damp_qubit(e, cfg.noise.electron_damping)?;
        }
    }

    let (blocks, register) = if s.branches.is_empty() {
        let z = DMatrix::zeros(4, 4);
        let reg = vec![ModeSpec::qubit(NL_NUCLEUS[0]), ModeSpec::qubit(NL_NUCLEUS[1])];
        ([z.clone(), z.clone(), z.clone(), z], reg)
    } else {
        let rho = s.trace_out_dense(DENSE_CAP)?;
        let layout = Layout::system(s.branches[0].state.register());
        let reg = vec![ModeSpec::qubit(NL_NUCLEUS[0]), ModeSpec::qubit(NL_NUCLEUS[1])];
        (qubit_blocks(&rho, &layout, NL_ELECTRON, NL_NUCLEUS)?, reg)
    };
    let obs = flip_outcomes(&blocks, cfg.noise.electron_readout_flip);
    let even = &obs[0] + &obs[3];
    let all = &even + &obs[1] + &obs[2];
    let odd_weight = trace(&obs[1]) + trace(&obs[2]);
    let contrast = (1.0 - 2.0 * cfg.noise.nuclear_readout_flip).powi(2);
    let parity_heralded = contrast * xx_expectation(&even);
    let parity_unheralded = contrast * xx_expectation(&all);
    let (kept, success_prob, discarded_odd) =
        if cfg.herald { (even, trace(&obs[0]) + trace(&obs[3]), odd_weight) } else { (all, er.accepted, 0.0) };
    let nuclear_parity_expectation = if cfg.herald { parity_heralded } else { parity_unheralded };
    let post_selected_state = MixedState::from_density(register, &DensityMatrix::from_matrix(vec![2, 2], kept)?, EIG_FLOOR)?;

    let discarded_weight = discarded_odd + er.leakage + er.floor;
    let branch_log = vec![
        record("leakage", er.leakage),
        record("erasure_reject", er.rejected),
        record("numerical_floor", er.floor),
        record("electron_downdown", trace(&obs[0])),
        record("electron_downup", trace(&obs[1])),
        record("electron_updown", trace(&obs[2])),
        record("electron_upup", trace(&obs[3])),
    ];
    Ok(ProtocolResult {
        herald_prob_upup: trace(&obs[3]),
        herald_prob_downdown: trace(&obs[0]),
        success_prob,
        nuclear_parity_expectation,
        parity_heralded,
        parity_unheralded,
        erasure_accepted: er.accepted,
        post_selected_state,
        discarded_weight,
        reject_weight: er.rejected,
        branch_log,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityRow {
    pub phi: f64,
    pub parity_heralded: f64,
    pub parity_unheralded: f64,
    pub success_heralded: f64,
    pub success_unheralded: f64,
}

/// Nuclear parity versus φ, evaluated in parallel and returned in grid order.
pub fn parity_curve(cfg: &ProtocolConfig, phis: &[f64]) -> Result<Vec<ParityRow>> {
    phis.par_iter()
        .map(|&phi| {
            let r = run_nonlocal_sensing(&ProtocolConfig { phi, ..*cfg })?;
            Ok(ParityRow {
                phi,
                parity_heralded: r.parity_heralded,
                parity_unheralded: r.parity_unheralded,
                success_heralded: r.herald_prob_upup + r.herald_prob_downdown,
                success_unheralded: r.erasure_accepted,
            })
        })
        .collect()
}

/// Cosine fits of the heralded and unheralded parity curves.
pub fn parity_visibilities(rows: &[ParityRow]) -> Result<(VisibilityFit, VisibilityFit)> {
    let phis: Vec<f64> = rows.iter().map(|r| r.phi).collect();
    let h: Vec<f64> = rows.iter().map(|r| r.parity_heralded).collect();
    let u: Vec<f64> = rows.iter().map(|r| r.parity_unheralded).collect();
    Ok((visibility_fit(&phis, &h, None)?, visibility_fit(&phis, &u, None)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeraldRow {
    pub mu_sig: f64,
    pub p_upup: f64,
    pub p_downdown: f64,
}

pub fn herald_probability_curve(cfg: &ProtocolConfig, mus: &[f64]) -> Result<Vec<HeraldRow>> {
    mus.par_iter()
        .map(|&mu_sig| {
            let r = run_nonlocal_sensing(&ProtocolConfig { mu_sig, ..*cfg })?;
            Ok(HeraldRow { mu_sig, p_upup: r.herald_prob_upup, p_downdown: r.herald_prob_downdown })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Time-bin sensing

#[derive(Clone, Debug, Serialize)]
pub struct TimebinResult {
    pub theta: f64,
    /// Probability of the electron |↑⟩ herald (after readout flips).
    pub herald_prob: f64,
    pub p_down_heralded: f64,
    pub p_down_unheralded: f64,
    /// Observed nuclear ⟨Z⟩ with and without heralding.
    pub z_heralded: f64,
    pub z_unheralded: f64,
    pub erasure_accepted: f64,
    pub reject_weight: f64,
    /// Electron |↓⟩ outcomes, leakage and numerical floor.
    pub discarded_weight: f64,
    /// Unnormalized nuclear state conditioned on the herald.
    #[serde(skip)]
    pub post_selected_state: MixedState,
}

const TB_SIGNAL: [&str; 2] = ["s_e", "s_l"];
const TB_REFLECTED: [&str; 2] = ["r_e", "r_l"];
const TB_LOST: [&str; 2] = ["l_e", "l_l"];

/// Single-station time-bin sensing; `cfg.phi` is the early/late phase θ.
pub fn run_timebin_sensing(cfg: &ProtocolConfig) -> Result<TimebinResult> {
    cfg.validate()?;
    let theta = cfg.phi;
    let (branches, nmax, tail) = source_branches(cfg.source, cfg.mu_sig, theta, cfg.tail_tolerance);
    let cut = nmax.max(1);
    let mut register: Vec<ModeSpec> = Vec::new();
    for l in TB_SIGNAL.iter().chain(TB_REFLECTED.iter()) {
        register.push(ModeSpec::bosonic(l, cut));
    }
    for l in TB_LOST {
        register.push(ModeSpec::bosonic(l, cut).in_environment());
    }
    register.push(ModeSpec::qubit("e"));
    register.push(ModeSpec::qubit("n"));
    let h = 0.5;
    let mut state = MixedState::empty();
    for (w, amps) in &branches {
        let mut entries = Vec::new();
        for &((ke, kl), a) in amps {
            for e in 0..2u8 {
                for n in 0..2u8 {
                    entries.push((vec![ke, kl, 0, 0, 0, 0, e, n], a * h));
                }
            }
        }
        state.push(*w, HybridState::from_amplitudes(register.clone(), entries)?);
    }
    state.leakage = tail;

    let gate = Smspg { flavor: cfg.gate_flavor, r_down: cfg.noise.r_down };
    let flip = QubitGate::cnot("n", UP, "e");
    for k in 0..2 {
        let ports = gate_ports(cfg.gate_flavor, TB_SIGNAL[k], TB_REFLECTED[k], TB_LOST[k]);
        state = state.map(|s| -> Result<HybridState> { Ok(gate.apply(s, ports, "e")?.apply_qubit_gate(&flip)?) })?;
    }
    state = state.apply_qubit_gate(&QubitGate::rot_y("e", -FRAC_PI_2))?;
    state = state.map(|s| s.project_out(TB_SIGNAL[0], 0)?.project_out(TB_SIGNAL[1], 0))?;
    let er = erase(&state, TB_REFLECTED, ["n", "n"], ProtocolKind::TimeBin, cfg)?;
    let mut s = mw_error(&er.state, "e", cfg.noise.eps_mw)?;
    if cfg.noise.electron_damping > 0.0 {
        s = s.amplitude_damp_qubit("e", cfg.noise.electron_damping)?;
    }
    // Pauli errors on the prepared |+⟩ leave ⟨Z_n⟩ unchanged, so the nuclear
    // preparation visibility enters as depolarization ahead of readout.
    if cfg.noise.nuclear_depolarization > 0.0 {
        s = s.depolarize_qubit("n", cfg.noise.nuclear_depolarization)?;
    }
    let blocks = if s.branches.is_empty() {
        [DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)]
    } else {
        let rho = s.trace_out_dense(DENSE_CAP)?;
        let layout = Layout::system(s.branches[0].state.register());
        qubit_blocks_single(&rho, &layout, "e", "n")?
    };
    let q = cfg.noise.electron_readout_flip;
    let up = &blocks[1] * C64::new(1.0 - q, 0.0) + &blocks[0] * C64::new(q, 0.0);
    let down = &blocks[0] * C64::new(1.0 - q, 0.0) + &blocks[1] * C64::new(q, 0.0);
    let all = &up + &down;
    let contrast = 1.0 - 2.0 * cfg.noise.nuclear_readout_flip;
    let z = |m: &DMatrix<C64>| {
        let t = trace(m);
        if t > 0.0 {
            contrast * (m[(0, 0)].re - m[(1, 1)].re) / t
        } else {
            0.0
        }
    };
    let (z_heralded, z_unheralded) = (z(&up), z(&all));
    let herald_prob = trace(&up);
    let post_selected_state =
        MixedState::from_density(vec![ModeSpec::qubit("n")], &DensityMatrix::from_matrix(vec![2], up)?, EIG_FLOOR)?;
    Ok(TimebinResult {
        theta,
        herald_prob,
        p_down_heralded: (1.0 + z_heralded) / 2.0,
        p_down_unheralded: (1.0 + z_unheralded) / 2.0,
        z_heralded,
        z_unheralded,
        erasure_accepted: er.accepted,
        reject_weight: er.rejected,
        discarded_weight: trace(&down) + er.leakage + er.floor,
        post_selected_state,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimebinRow {
    pub theta: f64,
    pub p_down_heralded: f64,
    pub p_down_unheralded: f64,
    pub herald_prob: f64,
}

pub fn timebin_curve(cfg: &ProtocolConfig, thetas: &[f64]) -> Result<Vec<TimebinRow>> {
    thetas
        .par_iter()
        .map(|&theta| {
            let r = run_timebin_sensing(&ProtocolConfig { phi: theta, ..*cfg })?;
            Ok(TimebinRow {
                theta,
                p_down_heralded: r.p_down_heralded,
                p_down_unheralded: r.p_down_unheralded,
                herald_prob: r.herald_prob,
            })
        })
        .collect()
}

/// Visibility of `⟨Z_n⟩ = 2P(↓) − 1` versus θ, heralded and unheralded.
pub fn timebin_visibilities(rows: &[TimebinRow]) -> Result<(VisibilityFit, VisibilityFit)> {
    let t: Vec<f64> = rows.iter().map(|r| r.theta).collect();
    let h: Vec<f64> = rows.iter().map(|r| 2.0 * r.p_down_heralded - 1.0).collect();
    let u: Vec<f64> = rows.iter().map(|r| 2.0 * r.p_down_unheralded - 1.0).collect();
    Ok((visibility_fit(&t, &h, None)?, visibility_fit(&t, &u, None)?))
}

// ---------------------------------------------------------------------------
// Entanglement generation

/// Gauss–Hermite rule for a standard normal variable via Golub–Welsch:
/// `(x_k, w_k)` with `Σ w_k f(x_k) ≈ E[f(X)]`, `X ~ N(0, 1)`.
pub fn gauss_hermite_normal(n: usize) -> Vec<(f64, f64)> {
    if n == 1 {
        return vec![(0.0, 1.0)];
    }
    let jacobi = DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64 / 2.0).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(jacobi);
    let mut rule: Vec<(f64, f64)> = (0..n)
        .map(|k| (std::f64::consts::SQRT_2 * eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    rule
}

/// Gaussian phase noise that leaves interference visibility `v`:
/// `v = e^{−σ²/2}`.
pub fn sigma_from_lock_visibility(v: f64) -> Result<f64> {
    if !(v > 0.0 && v <= 1.0) {
        return Err(ProtocolError::OutOfRange { name: "lock_visibility", value: v });
    }
    Ok((-2.0 * v.ln()).sqrt())
}

#[derive(Clone, Debug)]
pub struct EntanglementResult {
    /// Heralded, normalized two-qubit state of the kept pair.
    pub state: MixedState,
    pub density: DensityMatrix,
    pub herald_probability: f64,
    /// Overlap with |Ψ−⟩.
    pub fidelity: f64,
}

const ENT_INPUT: [&str; 2] = ["a_L", "a_R"];

fn ent_register(cut: usize, nuclei: bool) -> Vec<ModeSpec> {
    let mut reg = Vec::new();
    for l in ENT_INPUT.iter().chain(NL_REFLECTED.iter()) {
        reg.push(ModeSpec::bosonic(l, cut));
    }
    for l in NL_LOST {
        reg.push(ModeSpec::bosonic(l, cut).in_environment());
    }
    for l in NL_ELECTRON {
        reg.push(ModeSpec::qubit(l));
    }
    if nuclei {
        for l in NL_NUCLEUS {
            reg.push(ModeSpec::qubit(l));
        }
    }
    reg
}

/// Dual-rail coherent pulse at interferometer phase `delta_phi`.
fn load_pulse(base: HybridState, mu: f64, delta_phi: f64, tol: f64) -> Result<HybridState> {
    let opts = CoherentOptions { tail_tolerance: tol, allow_tail: true, renormalize: false };
    let beta = (mu / 2.0).sqrt();
    let (s, _) = base.prepare_coherent(ENT_INPUT[0], C64::new(beta, 0.0), opts)?;
    let (s, _) = s.prepare_coherent(ENT_INPUT[1], C64::from_polar(beta, delta_phi), opts)?;
    Ok(s)
}

/// Rails to the recombination beamsplitter and the single-click herald
/// (port L clicks, port R dark). Returns the unnormalized system state.
fn herald_click(state: &MixedState, link: f64) -> Result<DensityMatrix> {
    let mut acc: Option<DensityMatrix> = None;
    for b in &state.branches {
        let mut s = b.state.project_out(ENT_INPUT[0], 0)?.project_out(ENT_INPUT[1], 0)?;
        if link < 1.0 {
            s = s.apply_loss(NL_REFLECTED[0], link)?.apply_loss(NL_REFLECTED[1], link)?;
        }
        s = s.apply_beamsplitter(NL_REFLECTED[0], NL_REFLECTED[1], 0.5, 0.0)?;
        for o in s.measure_fock(&NL_REFLECTED)? {
            if o.counts[0] >= 1 && o.counts[1] == 0 && o.probability > 0.0 {
                let d = o.state.trace_out_dense(DENSE_CAP)?.scaled(b.weight);
                acc = Some(match acc {
                    None => d,
                    Some(a) => a.add(&d)?,
                });
            }
        }
    }
    acc.ok_or_else(|| HilbertError::DimensionMismatch(0, 0).into())
}

fn cut_for_pulse(mu: f64, tol: f64) -> usize {
    cutoff_for(mu / 2.0, tol, 1)
}

/// Phase offsets and weights for jitter averaging.
fn jitter_rule(cfg: &ProtocolConfig) -> Vec<(f64, f64)> {
    if cfg.phase_jitter_sigma == 0.0 {
        vec![(0.0, 1.0)]
    } else {
        gauss_hermite_normal(cfg.jitter_nodes).into_iter().map(|(x, w)| (cfg.phase_jitter_sigma * x, w)).collect()
    }
}

fn psi_minus() -> [C64; 4] {
    bell_vector(0)
}

fn jitter_average<F>(cfg: &ProtocolConfig, f: F) -> Result<DensityMatrix>
where
    F: Fn(f64) -> Result<DensityMatrix> + Sync,
{
    let parts: Vec<DensityMatrix> = jitter_rule(cfg)
        .par_iter()
        .map(|&(d, w)| Ok(f(cfg.delta_phi_e + d)?.scaled(w)))
        .collect::<Result<_>>()?;
    let mut it = parts.into_iter();
    let mut acc = it.next().ok_or(HilbertError::DimensionMismatch(0, 0))?;
    for p in it {
        acc = acc.add(&p)?;
    }
    Ok(acc)
}

/// Heralded electron-electron entanglement with a weak coherent pulse.
pub fn run_parallel_entanglement(cfg: &ProtocolConfig) -> Result<EntanglementResult> {
    cfg.validate()?;
    if cfg.mu_ent <= 0.0 {
        return Err(ProtocolError::OutOfRange { name: "mu_ent", value: cfg.mu_ent });
    }
    let cut = cut_for_pulse(cfg.mu_ent, cfg.tail_tolerance);
    let gate = Smspg { flavor: GateFlavor::AmplitudeReflection, r_down: cfg.noise.r_down };
    let rho = jitter_average(cfg, |dphi| {
        let h = C64::new(0.5, 0.0);
        let entries = (0..4u8).map(|e| (vec![0, 0, 0, 0, 0, 0, e >> 1, e & 1], h));
        let base = HybridState::from_amplitudes(ent_register(cut, false), entries)?;
        let mut m = MixedState::pure(load_pulse(base, cfg.mu_ent, dphi, cfg.tail_tolerance)?);
        for e in NL_ELECTRON {
            m = mw_error(&m, e, cfg.noise.eps_mw)?;
        }
        for k in 0..2 {
            let ports = Ports { input: ENT_INPUT[k], reflected: NL_REFLECTED[k], lost: Some(NL_LOST[k]) };
            m = m.map(|s| gate.apply(s, ports, NL_ELECTRON[k]))?;
        }
        herald_click(&m, cfg.noise.link_transmission)
    })?;
    finish_pair(rho, NL_ELECTRON)
}

fn finish_pair(rho: DensityMatrix, labels: [&str; 2]) -> Result<EntanglementResult> {
    let p = rho.trace();
    let normalized = rho.normalized();
    let fidelity = crate::hilbert::overlap_with_pure(&normalized, &psi_minus())?;
    let register = vec![ModeSpec::qubit(labels[0]), ModeSpec::qubit(labels[1])];
    let state = MixedState::from_density(register, &normalized, EIG_FLOOR)?;
    Ok(EntanglementResult { state, density: normalized, herald_probability: p, fidelity })
}

#[derive(Clone, Debug)]
pub struct NuclearEntanglementResult {
    /// Kept nuclear pair (normalized); electron |↑↑⟩ only when error
    /// detection is on.
    pub pair: EntanglementResult,
    /// Nuclear pair without error detection.
    pub unselected: EntanglementResult,
    /// Fraction of heralded events dropped by error detection.
    pub error_detect_discard_fraction: f64,
}

/// Heralded nucleus-nucleus entanglement through SMPHONE gates.
pub fn run_nuclear_entanglement(cfg: &ProtocolConfig) -> Result<NuclearEntanglementResult> {
    cfg.validate()?;
    if cfg.mu_ent <= 0.0 {
        return Err(ProtocolError::OutOfRange { name: "mu_ent", value: cfg.mu_ent });
    }
    let cut = cut_for_pulse(cfg.mu_ent, cfg.tail_tolerance);
    let rho = jitter_average(cfg, |dphi| {
        let h = C64::new(0.5, 0.0);
        let entries = (0..4u8).map(|n| (vec![0, 0, 0, 0, 0, 0, UP, UP, n >> 1, n & 1], h));
        let base = HybridState::from_amplitudes(ent_register(cut, true), entries)?;
        let mut m = MixedState::pure(load_pulse(base, cfg.mu_ent, dphi, cfg.tail_tolerance)?);
        for k in 0..2 {
            let ports = Ports { input: ENT_INPUT[k], reflected: NL_REFLECTED[k], lost: Some(NL_LOST[k]) };
            m = smphone_noisy(&m, ports, NL_ELECTRON[k], NL_NUCLEUS[k], cfg.noise.eps_mw)?;
        }
        herald_click(&m, cfg.noise.link_transmission)
    })?;
    let layout = Layout { labels: [NL_ELECTRON, NL_NUCLEUS].concat().iter().map(|s| s.to_string()).collect(), strides: vec![8, 4, 2, 1] };
    let blocks = qubit_blocks(&rho, &layout, NL_ELECTRON, NL_NUCLEUS)?;
    let all = blocks.iter().fold(DMatrix::zeros(4, 4), |a, b| a + b);
    let total = trace(&all);
    let kept = if cfg.error_detection { blocks[3].clone() } else { all.clone() };
    let discard = if cfg.error_detection && total > 0.0 { 1.0 - trace(&blocks[3]) / total } else { 0.0 };
    let nuclear = |m: DMatrix<C64>| -> Result<EntanglementResult> {
        let mut d = DensityMatrix::from_matrix(vec![2, 2], m)?;
        if cfg.noise.nuclear_depolarization > 0.0 {
            let reg = vec![ModeSpec::qubit(NL_NUCLEUS[0]), ModeSpec::qubit(NL_NUCLEUS[1])];
            let mut s = MixedState::from_density(reg, &d, 0.0)?;
            for n in NL_NUCLEUS {
                s = s.depolarize_qubit(n, cfg.noise.nuclear_depolarization)?;
            }
            d = s.trace_out_dense(DENSE_CAP)?;
        }
        finish_pair(d, NL_NUCLEUS)
    };
    Ok(NuclearEntanglementResult { pair: nuclear(kept)?, unselected: nuclear(all)?, error_detect_discard_fraction: discard })
}

/// Bell fidelity seen through symmetric readout flips `q` on every
/// correlator: `1/4 + (F − 1/4)(1 − 2q)²`.
pub fn measured_fidelity(fidelity: f64, readout_flip: f64) -> f64 {
    0.25 + (fidelity - 0.25) * (1.0 - 2.0 * readout_flip).powi(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntanglementRow {
    pub mu_ent: f64,
    pub herald_probability: f64,
    pub fidelity: f64,
}

pub fn entanglement_curve(cfg: &ProtocolConfig, mus: &[f64]) -> Result<Vec<EntanglementRow>> {
    mus.par_iter()
        .map(|&mu_ent| {
            let r = run_parallel_entanglement(&ProtocolConfig { mu_ent, ..*cfg })?;
            Ok(EntanglementRow { mu_ent, herald_probability: r.herald_probability, fidelity: r.fidelity })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Interferometer phase jitter

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterTable {
    /// `(δ, F(π + δ))` rows.
    pub rows: Vec<(f64, f64)>,
    pub f0: f64,
    /// Fitted `c` of `F(δ) ≈ F₀ − cδ²`.
    pub coefficient: f64,
}

/// Heralded-pair fidelity on a grid of lock offsets and a least-squares fit
/// of `F₀ − cδ²`.
pub fn phase_jitter_penalty(deltas: &[f64]) -> Result<JitterTable> {
    if deltas.len() < 2 {
        return Err(MetricsError::TooFewPoints(deltas.len()).into());
    }
    let rows: Vec<(f64, f64)> = deltas
        .iter()
        .map(|&d| (d, crate::spin_photon::entangling_projection(PI + d).fidelity_psi_minus()))
        .collect();
    let n = rows.len() as f64;
    let sx: f64 = rows.iter().map(|r| r.0 * r.0).sum();
    let sxx: f64 = rows.iter().map(|r| r.0.powi(4)).sum();
    let sy: f64 = rows.iter().map(|r| r.1).sum();
    let sxy: f64 = rows.iter().map(|r| r.0 * r.0 * r.1).sum();
    let det = n * sxx - sx * sx;
    if det.abs() < 1e-300 {
        return Err(MetricsError::DegenerateGrid.into());
    }
    let slope = (n * sxy - sx * sy) / det;
    let f0 = (sy - slope * sx) / n;
    Ok(JitterTable { rows, f0, coefficient: -slope })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterMethod {
    GaussHermite { nodes: usize },
    MonteCarlo { samples: usize },
}

/// Mean heralded-pair fidelity under Gaussian lock noise of width `sigma`,
/// with a standard error for the Monte Carlo path.
pub fn jitter_average_fidelity<R: Rng + ?Sized>(sigma: f64, method: JitterMethod, rng: &mut R) -> Result<(f64, f64)> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(ProtocolError::OutOfRange { name: "sigma", value: sigma });
    }
    match method {
        JitterMethod::GaussHermite { nodes } => {
            if nodes == 0 {
                return Err(ProtocolError::OutOfRange { name: "nodes", value: 0.0 });
            }
            let f = gauss_hermite_normal(nodes).iter().map(|&(x, w)| w * psi_minus_fidelity_closed_form(sigma * x)).sum();
            Ok((f, 0.0))
        }
        JitterMethod::MonteCarlo { samples } => {
            if samples < 2 {
                return Err(ProtocolError::OutOfRange { name: "samples", value: samples as f64 });
            }
            let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).map_err(|_| ProtocolError::OutOfRange { name: "sigma", value: sigma })?;
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..samples {
                let d = if sigma == 0.0 { 0.0 } else { normal.sample(rng) };
                let f = psi_minus_fidelity_closed_form(d);
                s += f;
                s2 += f * f;
            }
            let n = samples as f64;
            let mean = s / n;
            let var = ((s2 / n - mean * mean) * n / (n - 1.0)).max(0.0);
            Ok((mean, (var / n).sqrt()))
        }
    }
}

/// Deterministic per-point generator split from a master seed.
pub fn point_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

// ---------------------------------------------------------------------------
// CSV output

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

fn num(x: f64) -> String {
    format!("{x:.12e}")
}

/// Columns `phi,parity_heralded,parity_unheralded,success_heralded,success_unheralded`.
pub fn write_parity_csv<W: Write>(rows: &[ParityRow], w: W) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["phi", "parity_heralded", "parity_unheralded", "success_heralded", "success_unheralded"])?;
    for r in rows {
        out.write_record([format!("{:.9}", r.phi), num(r.parity_heralded), num(r.parity_unheralded), num(r.success_heralded), num(r.success_unheralded)])?;
    }
    out.flush()?;
    Ok(())
}

/// Columns `mu_sig,p_upup,p_downdown`.
pub fn write_herald_csv<W: Write>(rows: &[HeraldRow], w: W) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["mu_sig", "p_upup", "p_downdown"])?;
    for r in rows {
        out.write_record([format!("{:.9}", r.mu_sig), num(r.p_upup), num(r.p_downdown)])?;
    }
    out.flush()?;
    Ok(())
}

/// Columns `theta,p_down_heralded,p_down_unheralded,herald_prob`.
pub fn write_timebin_csv<W: Write>(rows: &[TimebinRow], w: W) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["theta", "p_down_heralded", "p_down_unheralded", "herald_prob"])?;
    for r in rows {
        out.write_record([format!("{:.9}", r.theta), num(r.p_down_heralded), num(r.p_down_unheralded), num(r.herald_prob)])?;
    }
    out.flush()?;
    Ok(())
}

/// Columns `mu_ent,herald_probability,fidelity`.
pub fn write_entanglement_csv<W: Write>(rows: &[EntanglementRow], w: W) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["mu_ent", "herald_probability", "fidelity"])?;
    for r in rows {
        out.write_record([format!("{:.9}", r.mu_ent), num(r.herald_probability), num(r.fidelity)])?;
    }
    out.flush()?;
    Ok(())
}

/// Columns `delta,fidelity`.
pub fn write_jitter_csv<W: Write>(table: &JitterTable, w: W) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["delta", "fidelity"])?;
    for (d, f) in &table.rows {
        out.write_record([format!("{d:.9}"), num(*f)])?;
    }
    out.flush()?;
    Ok(())
}

