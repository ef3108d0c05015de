//! Photon erasure: local-oscillator interference, lossy photon-number
//! detection with dark counts, acceptance strategies and Pauli feedback.
//!
//! At each station the reflected signal mode meets a coherent LO on a 50:50
//! beamsplitter (signal on the first port, so detector 1 sees `+` and
//! detector 2 sees `−` signal amplitude). Both stations factorize: the input
//! is decomposed by reflected-mode photon numbers and each station is
//! simulated once per signal count, giving environment vectors `E_a(i,i′)`.
//! Post-states follow from overlaps `⟨E_{a′}|E_a⟩` contracted with the
//! remaining-register cross densities.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hilbert::{
    cross_density, cutoff_for, ln_factorial, CoherentOptions, DensityMatrix, HilbertError, HybridState, MixedState,
    ModeKind, ModeSpec, DENSE_CAP, PAULI_X, PAULI_Z,
};

type C64 = Complex64;

#[derive(Debug, thiserror::Error)]
pub enum ErasureError {
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
    #[error("parameter `{name}` = {value} outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("signal mode `{0}` missing or not bosonic")]
    MissingSignal(String),
    #[error("feedback requested for a rejected pattern")]
    Rejected,
    #[error("expected a two-qubit spin state, got dims {0:?}")]
    NotPair(Vec<usize>),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ErasureError>;

/// Detector counts: `i, i′` at the left pair and `j, j′` at the right pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClickPattern {
    pub i: u8,
    pub i_prime: u8,
    pub j: u8,
    pub j_prime: u8,
}

impl ClickPattern {
    pub fn new(i: u8, i_prime: u8, j: u8, j_prime: u8) -> Self {
        Self { i, i_prime, j, j_prime }
    }

    pub fn d_left(&self) -> i32 {
        self.i as i32 - self.i_prime as i32
    }

    pub fn d_right(&self) -> i32 {
        self.j as i32 - self.j_prime as i32
    }

    pub fn total(&self) -> u32 {
        self.i as u32 + self.i_prime as u32 + self.j as u32 + self.j_prime as u32
    }
}

/// Loss, dark counts and LO settings for both stations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    /// Signal-only transmission before the LO beamsplitter (reflection gate).
    pub gate_transmission: f64,
    /// Transmission of each detector path after the beamsplitter.
    pub path_transmission: f64,
    /// Probability `p_DC` of one extra click on one of the four detectors.
    pub dark_total: f64,
    /// LO amplitude at the left and right station.
    pub lo_alpha: [C64; 2],
    /// Coherent-tail tolerance used to pick the cutoff.
    pub tail_tolerance: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self::noisy(C64::new(0.45, 0.0))
    }
}

impl DetectorModel {
    /// Lossless, dark-count-free detection with the same LO at both stations.
    pub fn ideal(alpha: C64) -> Self {
        Self { gate_transmission: 1.0, path_transmission: 1.0, dark_total: 0.0, lo_alpha: [alpha; 2], tail_tolerance: 1e-8 }
    }

    /// 15% SiV-to-detector transmission split 0.5 gate / 0.3 path, `p_DC = 0.04`.
    pub fn noisy(alpha: C64) -> Self {
        Self { gate_transmission: 0.5, path_transmission: 0.3, dark_total: 0.04, lo_alpha: [alpha; 2], tail_tolerance: 1e-8 }
    }

    pub fn with_alpha(mut self, alpha: C64) -> Self {
        self.lo_alpha = [alpha; 2];
        self
    }

    /// Total signal transmission from SiV to detector.
    pub fn transmission(&self) -> f64 {
        self.gate_transmission * self.path_transmission
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gate_transmission", self.gate_transmission),
            ("path_transmission", self.path_transmission),
            ("dark_total", self.dark_total),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ErasureError::OutOfRange { name, value: v });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Accept `|i−i′| = |j−j′| ≠ 0`.
    Strategy1,
    /// Accept `i ≠ i′` and `j ≠ j′`.
    Strategy2,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Strategy1 => "strategy1",
            Strategy::Strategy2 => "strategy2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// Both modes are time bins at one station; correction is one X.
    TimeBin,
    /// Modes sit at two stations; correction is a Z per station.
    NonLocal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    /// Signs of `i−i′` and `j−j′`; a negative sign calls for a correction.
    Accept { left_negative: bool, right_negative: bool },
    Reject,
}

impl Decision {
    pub fn is_accept(&self) -> bool {
        matches!(self, Decision::Accept { .. })
    }
}

/// Acceptance from the signed count differences alone.
pub fn accept_differences(d_left: i32, d_right: i32, strategy: Strategy) -> Decision {
    let ok = match strategy {
        Strategy::Strategy1 => d_left.abs() == d_right.abs() && d_left != 0,
        Strategy::Strategy2 => d_left != 0 && d_right != 0,
    };
    if ok {
        Decision::Accept { left_negative: d_left < 0, right_negative: d_right < 0 }
    } else {
        Decision::Reject
    }
}

pub fn accept(pattern: &ClickPattern, strategy: Strategy) -> Decision {
    accept_differences(pattern.d_left(), pattern.d_right(), strategy)
}

/// Subsystem indices that receive feedback. For [`ProtocolKind::TimeBin`]
/// only `left` is used.
#[derive(Clone, Copy, Debug)]
pub struct FeedbackTargets {
    pub left: usize,
    pub right: usize,
}

/// Applies the Pauli correction for an accepted decision.
pub fn apply_feedback(
    rho: &DensityMatrix,
    decision: Decision,
    kind: ProtocolKind,
    targets: FeedbackTargets,
) -> Result<DensityMatrix> {
    let Decision::Accept { left_negative, right_negative } = decision else {
        return Err(ErasureError::Rejected);
    };
    let mut out = rho.clone();
    match kind {
        ProtocolKind::NonLocal => {
            if left_negative {
                out = out.apply_qubit_unitary(targets.left, &PAULI_Z)?;
            }
            if right_negative {
                out = out.apply_qubit_unitary(targets.right, &PAULI_Z)?;
            }
        }
        ProtocolKind::TimeBin => {
            if left_negative != right_negative {
                out = out.apply_qubit_unitary(targets.left, &PAULI_X)?;
            }
        }
    }
    Ok(out)
}

/// Closed-form unnormalized spin coefficients `(c_↑↓, c_↓↑)` for a click
/// pattern when one photon flipped the spin at either station:
/// `α^{N−1}/√(i!i′!j!j′!) · [(i−i′), e^{iφ}(j−j′)]`.
pub fn click_amplitude_closed_form(pattern: &ClickPattern, alpha: C64, phi: f64) -> [C64; 2] {
    let n = pattern.total();
    if n == 0 {
        return [C64::default(); 2];
    }
    let norm = (-0.5
        * (ln_factorial(pattern.i as usize)
            + ln_factorial(pattern.i_prime as usize)
            + ln_factorial(pattern.j as usize)
            + ln_factorial(pattern.j_prime as usize)))
    .exp();
    let common = alpha.powu(n - 1) * norm;
    [common * pattern.d_left() as f64, common * C64::from_polar(1.0, phi) * pattern.d_right() as f64]
}

/// Environment vectors of one station, indexed by signal count and then by
/// detector outcome `(i, i′)`.
struct StationTable {
    envs: Vec<BTreeMap<(u8, u8), HybridState>>,
    leakage: f64,
}

impl StationTable {
    fn build(alpha: C64, max_signal: usize, model: &DetectorModel) -> Result<Self> {
        let mean = alpha.norm_sqr();
        let cutoff = max_signal + cutoff_for(mean, model.tail_tolerance, 1);
        let opts = CoherentOptions { tail_tolerance: model.tail_tolerance, allow_tail: true, renormalize: false };
        let mut envs = Vec::with_capacity(max_signal + 1);
        let mut leakage: f64 = 0.0;
        for a in 0..=max_signal {
            let reg = vec![ModeSpec::bosonic("d1", cutoff), ModeSpec::bosonic("d2", cutoff)];
            let s = HybridState::from_amplitudes(reg, [(vec![a as u8, 0], C64::new(1.0, 0.0))])?;
            let (s, _) = s.prepare_coherent("d2", alpha, opts)?;
            let s = s.apply_loss("d1", model.gate_transmission)?;
            let s = s.apply_beamsplitter("d1", "d2", 0.5, 0.0)?;
            let s = s.apply_loss("d1", model.path_transmission)?.apply_loss("d2", model.path_transmission)?;
            leakage = leakage.max(s.leakage());
            let mut m = BTreeMap::new();
            for o in s.measure_fock(&["d1", "d2"])? {
                m.insert((o.counts[0], o.counts[1]), o.state);
            }
            envs.push(m);
        }
        Ok(Self { envs, leakage })
    }

    fn outcomes(&self) -> Vec<(u8, u8)> {
        let mut keys: Vec<(u8, u8)> = self.envs.iter().flat_map(|m| m.keys().copied()).collect();
        keys.sort_unstable();
        keys.dedup();
        keys
    }

    /// `O[a][a′] = ⟨E_{a′}(i,i′)|E_a(i,i′)⟩`.
    fn overlap(&self, outcome: (u8, u8)) -> DMatrix<C64> {
        let n = self.envs.len();
        let mut o = DMatrix::zeros(n, n);
        for a in 0..n {
            let Some(ea) = self.envs[a].get(&outcome) else { continue };
            for ap in 0..n {
                if let Some(eb) = self.envs[ap].get(&outcome) {
                    o[(a, ap)] = eb.inner(ea).expect("station registers agree");
                }
            }
        }
        o
    }

    /// Overlaps summed over outcomes with the same `i − i′`.
    fn by_difference(&self) -> BTreeMap<i32, DMatrix<C64>> {
        let mut out: BTreeMap<i32, DMatrix<C64>> = BTreeMap::new();
        for k in self.outcomes() {
            let d = k.0 as i32 - k.1 as i32;
            let o = self.overlap(k);
            out.entry(d).and_modify(|m| *m += &o).or_insert(o);
        }
        out
    }
}

/// Input split by reflected-mode photon numbers: cross densities
/// `X[(a,b),(a′,b′)] = Σ_w w·Tr_env |rest_ab⟩⟨rest_a′b′|`.
struct Decomposed {
    rest_register: Vec<ModeSpec>,
    dims: Vec<usize>,
    max_left: usize,
    max_right: usize,
    cross: BTreeMap<((u8, u8), (u8, u8)), DMatrix<C64>>,
    leakage: f64,
}

impl Decomposed {
    fn new(input: &MixedState, signal: [&str; 2]) -> Result<Self> {
        let first = input.branches.first().ok_or_else(|| ErasureError::MissingSignal(signal[0].into()))?;
        let reg = first.state.register();
        let mut idx = [0usize; 2];
        for (s, k) in signal.iter().zip(idx.iter_mut()) {
            *k = reg
                .iter()
                .position(|m| m.label == *s && matches!(m.kind, ModeKind::Bosonic { .. }))
                .ok_or_else(|| ErasureError::MissingSignal(s.to_string()))?;
        }
        let keep: Vec<usize> = (0..reg.len()).filter(|k| !idx.contains(k)).collect();
        let rest_register: Vec<ModeSpec> = keep.iter().map(|&k| reg[k].clone()).collect();
        let mut per_branch: Vec<(f64, BTreeMap<(u8, u8), HybridState>)> = Vec::new();
        let (mut max_left, mut max_right) = (0usize, 0usize);
        for br in &input.branches {
            let mut groups: BTreeMap<(u8, u8), Vec<(Vec<u8>, C64)>> = BTreeMap::new();
            for (basis, a) in br.state.amplitudes() {
                let key = (basis[idx[0]], basis[idx[1]]);
                max_left = max_left.max(key.0 as usize);
                max_right = max_right.max(key.1 as usize);
                groups.entry(key).or_default().push((keep.iter().map(|&k| basis[k]).collect(), *a));
            }
            let mut m = BTreeMap::new();
            for (key, entries) in groups {
                m.insert(key, HybridState::from_amplitudes(rest_register.clone(), entries)?);
            }
            per_branch.push((br.weight, m));
        }
        let mut cross: BTreeMap<((u8, u8), (u8, u8)), DMatrix<C64>> = BTreeMap::new();
        let mut dims = Vec::new();
        for (w, m) in &per_branch {
            for (ka, ra) in m {
                for (kb, rb) in m {
                    let d = cross_density(ra, rb, DENSE_CAP)?;
                    dims = d.dims.clone();
                    let scaled = d.m * C64::new(*w, 0.0);
                    cross.entry((*ka, *kb)).and_modify(|x| *x += &scaled).or_insert(scaled);
                }
            }
        }
        if dims.is_empty() {
            dims = rest_register.iter().filter(|m| !m.is_environment()).map(|m| m.dim()).collect();
        }
        Ok(Self { rest_register, dims, max_left, max_right, cross, leakage: input.total_leakage() })
    }

    fn dim(&self) -> usize {
        self.dims.iter().product()
    }

    /// `Y[a,a′] = Σ_{b,b′} O_R[b,b′] X[(a,b),(a′,b′)]` for every `(a, a′)`.
    fn contract_right(&self, right: &DMatrix<C64>) -> BTreeMap<(u8, u8), DMatrix<C64>> {
        let mut out: BTreeMap<(u8, u8), DMatrix<C64>> = BTreeMap::new();
        for (&((a, b), (ap, bp)), x) in &self.cross {
            let f = right[(b as usize, bp as usize)];
            if f.norm_sqr() == 0.0 {
                continue;
            }
            let term = x * f;
            out.entry((a, ap)).and_modify(|m| *m += &term).or_insert(term);
        }
        out
    }

    fn contract_left(&self, left: &DMatrix<C64>, y: &BTreeMap<(u8, u8), DMatrix<C64>>) -> DMatrix<C64> {
        let mut acc = DMatrix::zeros(self.dim(), self.dim());
        for (&(a, ap), m) in y {
            let f = left[(a as usize, ap as usize)];
            if f.norm_sqr() != 0.0 {
                acc += m * f;
            }
        }
        acc
    }
}

/// Per-pattern erasure outcome with an unnormalized post-state whose trace is
/// the pattern probability.
#[derive(Clone, Debug)]
pub struct PatternOutcome {
    pub pattern: ClickPattern,
    pub probability: f64,
    pub state: DensityMatrix,
}

#[derive(Clone, Debug)]
pub struct ErasureResult {
    /// Remaining register; environment modes are already traced out of `state`.
    pub rest_register: Vec<ModeSpec>,
    pub outcomes: Vec<PatternOutcome>,
    pub leakage: f64,
}

impl ErasureResult {
    pub fn total_probability(&self) -> f64 {
        self.outcomes.iter().map(|o| o.probability).sum()
    }

    pub fn get(&self, pattern: &ClickPattern) -> Option<&PatternOutcome> {
        self.outcomes.iter().find(|o| &o.pattern == pattern)
    }

    /// System-partition modes of [`ErasureResult::rest_register`].
    pub fn system_register(&self) -> Vec<ModeSpec> {
        self.rest_register.iter().filter(|m| !m.is_environment()).cloned().collect()
    }
}

fn tables(input: &Decomposed, model: &DetectorModel) -> Result<(StationTable, StationTable)> {
    model.validate()?;
    let left = StationTable::build(model.lo_alpha[0], input.max_left, model)?;
    let right = StationTable::build(model.lo_alpha[1], input.max_right, model)?;
    Ok((left, right))
}

/// Full click-pattern enumeration of the erasure measurement on the two
/// reflected modes `signal = [left, right]`.
pub fn simulate_erasure(input: &MixedState, signal: [&str; 2], model: &DetectorModel) -> Result<ErasureResult> {
    let dec = Decomposed::new(input, signal)?;
    let (left, right) = tables(&dec, model)?;
    let right_keys = right.outcomes();
    let ys: Vec<((u8, u8), BTreeMap<(u8, u8), DMatrix<C64>>)> =
        right_keys.iter().map(|&k| (k, dec.contract_right(&right.overlap(k)))).collect();
    let mut raw: BTreeMap<ClickPattern, DMatrix<C64>> = BTreeMap::new();
    for kl in left.outcomes() {
        let ol = left.overlap(kl);
        for (kr, y) in &ys {
            let m = dec.contract_left(&ol, y);
            let p = m.trace().re;
            if p > 1e-300 {
                raw.insert(ClickPattern::new(kl.0, kl.1, kr.0, kr.1), m);
            }
        }
    }
    let raw = if model.dark_total > 0.0 { dark_patterns(&raw, model.dark_total) } else { raw };
    let outcomes = raw
        .into_iter()
        .map(|(pattern, m)| {
            let state = DensityMatrix { dims: dec.dims.clone(), m };
            PatternOutcome { pattern, probability: state.trace(), state }
        })
        .collect();
    Ok(ErasureResult { rest_register: dec.rest_register.clone(), outcomes, leakage: dec.leakage + left.leakage + right.leakage })
}

fn dark_patterns(raw: &BTreeMap<ClickPattern, DMatrix<C64>>, p: f64) -> BTreeMap<ClickPattern, DMatrix<C64>> {
    let mut out: BTreeMap<ClickPattern, DMatrix<C64>> = BTreeMap::new();
    let mut add = |k: ClickPattern, m: DMatrix<C64>| {
        out.entry(k).and_modify(|x| *x += &m).or_insert(m);
    };
    for (k, m) in raw {
        add(*k, m * C64::new(1.0 - p, 0.0));
        let q = C64::new(p / 4.0, 0.0);
        add(ClickPattern { i: k.i + 1, ..*k }, m * q);
        add(ClickPattern { i_prime: k.i_prime + 1, ..*k }, m * q);
        add(ClickPattern { j: k.j + 1, ..*k }, m * q);
        add(ClickPattern { j_prime: k.j_prime + 1, ..*k }, m * q);
    }
    out
}

/// Erasure outcomes aggregated by `(i−i′, j−j′)`, which is all acceptance
/// and feedback depend on.
#[derive(Clone, Debug)]
pub struct DifferenceOutcomes {
    pub rest_register: Vec<ModeSpec>,
    pub states: BTreeMap<(i32, i32), DensityMatrix>,
    pub leakage: f64,
}

impl DifferenceOutcomes {
    pub fn total_probability(&self) -> f64 {
        self.states.values().map(|s| s.trace()).sum()
    }

    pub fn system_register(&self) -> Vec<ModeSpec> {
        self.rest_register.iter().filter(|m| !m.is_environment()).cloned().collect()
    }

    /// Sum of corrected accepted states and the rejected weight.
    pub fn accepted(
        &self,
        strategy: Strategy,
        kind: ProtocolKind,
        targets: FeedbackTargets,
    ) -> Result<(Option<DensityMatrix>, f64)> {
        let mut acc: Option<DensityMatrix> = None;
        let mut rejected = 0.0;
        for (&(dl, dr), rho) in &self.states {
            let d = accept_differences(dl, dr, strategy);
            if !d.is_accept() {
                rejected += rho.trace();
                continue;
            }
            let c = apply_feedback(rho, d, kind, targets)?;
            acc = Some(match acc {
                None => c,
                Some(a) => a.add(&c)?,
            });
        }
        Ok((acc, rejected))
    }
}

/// Erasure aggregated over patterns that share `(i−i′, j−j′)`. Dark counts
/// shift `i−i′` by +1 (detector 1) or −1 (detector 2).
pub fn erasure_by_difference(input: &MixedState, signal: [&str; 2], model: &DetectorModel) -> Result<DifferenceOutcomes> {
    let dec = Decomposed::new(input, signal)?;
    let (left, right) = tables(&dec, model)?;
    let gl = left.by_difference();
    let gr = right.by_difference();
    let ys: Vec<(i32, BTreeMap<(u8, u8), DMatrix<C64>>)> = gr.iter().map(|(&d, o)| (d, dec.contract_right(o))).collect();
    let mut raw: BTreeMap<(i32, i32), DMatrix<C64>> = BTreeMap::new();
    for (&dl, ol) in &gl {
        for (dr, y) in &ys {
            let m = dec.contract_left(ol, y);
            if m.trace().re > 1e-300 {
                raw.insert((dl, *dr), m);
            }
        }
    }
    if model.dark_total > 0.0 {
        let p = model.dark_total;
        let mut out: BTreeMap<(i32, i32), DMatrix<C64>> = BTreeMap::new();
        for (&(dl, dr), m) in &raw {
            let shifts = [((dl, dr), 1.0 - p), ((dl + 1, dr), p / 4.0), ((dl - 1, dr), p / 4.0), ((dl, dr + 1), p / 4.0), ((dl, dr - 1), p / 4.0)];
            for (k, w) in shifts {
                let t = m * C64::new(w, 0.0);
                out.entry(k).and_modify(|x| *x += &t).or_insert(t);
            }
        }
        raw = out;
    }
    let states = raw.into_iter().map(|(k, m)| (k, DensityMatrix { dims: dec.dims.clone(), m })).collect();
    Ok(DifferenceOutcomes { rest_register: dec.rest_register.clone(), states, leakage: dec.leakage + left.leakage + right.leakage })
}

/// `ρ → (1−λ)ρ + λ·Tr(ρ)·P/2` with `P` the projector on `{|↑↓⟩, |↓↑⟩}` of a
/// two-qubit spin state.
pub fn mix_single_excitation(rho: &DensityMatrix, lambda: f64) -> Result<DensityMatrix> {
    if rho.dims != [2, 2] {
        return Err(ErasureError::NotPair(rho.dims.clone()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ErasureError::OutOfRange { name: "lambda", value: lambda });
    }
    let t = rho.trace();
    let mut m = &rho.m * C64::new(1.0 - lambda, 0.0);
    m[(1, 1)] += C64::new(lambda * t / 2.0, 0.0);
    m[(2, 2)] += C64::new(lambda * t / 2.0, 0.0);
    Ok(DensityMatrix { dims: rho.dims.clone(), m })
}

/// Heralded signal `(|10⟩|↑↓⟩ + e^{iφ}|01⟩|↓↑⟩)/√2` on modes `r_L, r_R` and
/// spins `s_L, s_R`.
pub fn heralded_signal_state(phi: f64) -> MixedState {
    use crate::hilbert::{DOWN, UP};
    let reg = vec![ModeSpec::bosonic("r_L", 1), ModeSpec::bosonic("r_R", 1), ModeSpec::qubit("s_L"), ModeSpec::qubit("s_R")];
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let s = HybridState::from_amplitudes(
        reg,
        [(vec![1, 0, UP, DOWN], C64::new(h, 0.0)), (vec![0, 1, DOWN, UP], C64::from_polar(h, phi))],
    )
    .expect("fixed register");
    MixedState::pure(s)
}

/// Target `(|↑↓⟩ + e^{iφ}|↓↑⟩)/√2` as a dense vector over `(s_L, s_R)`.
pub fn pair_target(phi: f64) -> [C64; 4] {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    [C64::default(), C64::from_polar(h, phi), C64::new(h, 0.0), C64::default()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRow {
    pub alpha: f64,
    pub strategy: Strategy,
    pub fidelity: f64,
    pub success_prob: f64,
    pub leakage: f64,
}

/// Erasure fidelity and success probability versus LO amplitude for a
/// heralded single photon. `mw_lambda` is the single-excitation mixing
/// weight applied to every post-state. Fidelity is the posterior-weighted
/// average over accepted patterns.
pub fn erasure_performance_map(
    alphas: &[f64],
    detector: &DetectorModel,
    strategy: Strategy,
    mw_lambda: f64,
) -> Result<Vec<MapRow>> {
    let phi = 0.0;
    let input = heralded_signal_state(phi);
    let target = pair_target(phi);
    alphas
        .par_iter()
        .map(|&alpha| {
            let model = detector.with_alpha(C64::new(alpha, 0.0));
            let out = erasure_by_difference(&input, ["r_L", "r_R"], &model)?;
            let (acc, _) = out.accepted(strategy, ProtocolKind::NonLocal, FeedbackTargets { left: 0, right: 1 })?;
            let (fidelity, success_prob) = match acc {
                None => (0.0, 0.0),
                Some(rho) => {
                    let rho = mix_single_excitation(&rho, mw_lambda)?;
                    let p = rho.trace();
                    let f = crate::hilbert::overlap_with_pure(&rho.normalized(), &target)?;
                    (f, p)
                }
            };
            Ok(MapRow { alpha, strategy, fidelity, success_prob, leakage: out.leakage })
        })
        .collect()
}

/// Writes map rows as CSV with columns `alpha,strategy,fidelity,success_prob,leakage`.
pub fn write_map_csv<W: Write>(rows: &[MapRow], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    wr.write_record(["alpha", "strategy", "fidelity", "success_prob", "leakage"])?;
    for r in rows {
        wr.write_record([
            format!("{:.6}", r.alpha),
            r.strategy.name().to_string(),
            format!("{:.12e}", r.fidelity),
            format!("{:.12e}", r.success_prob),
            format!("{:.6e}", r.leakage),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
