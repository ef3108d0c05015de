//! Hybrid Fock⊗qubit states.
//!
//! A [`HybridState`] is a sparse amplitude map over a register of truncated
//! bosonic modes and qubits. Every mode carries a partition tag so that loss
//! channels can park photons in environment modes until they are traced out.
//! [`MixedState`] holds classical mixtures as weighted pure branches and
//! [`DensityMatrix`] is the dense reference representation.
//!
//! Conventions used everywhere in the crate:
//! - qubit basis value 0 is |↓⟩ and 1 is |↑⟩;
//! - `rot_y(θ) = exp(-iθY/2)`, so `rot_y(π/2)|↓⟩ = |+⟩ = (|↓⟩+|↑⟩)/√2`;
//! - Pauli Z is `diag(1, -1)` on (|↓⟩, |↑⟩);
//! - a beamsplitter with transmissivity `t` and phase `φ` maps
//!   `a† → √t a† − √(1−t) e^{iφ} b†` and `b† → √(1−t) e^{−iφ} a† + √t b†`.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub type C64 = Complex64;

pub const DOWN: u8 = 0;
pub const UP: u8 = 1;

/// Default bosonic cutoff before auto-raising for coherent tails.
pub const DEFAULT_CUTOFF: usize = 6;

/// Default dense-representation cap for [`HybridState::trace_out_dense`].
pub const DENSE_CAP: usize = 4096;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum HilbertError {
    #[error("unknown mode label `{0}`")]
    UnknownMode(String),
    #[error("duplicate mode label `{0}`")]
    DuplicateLabel(String),
    #[error("mode `{0}` is not bosonic")]
    NotBosonic(String),
    #[error("mode `{0}` is not a qubit")]
    NotQubit(String),
    #[error("bosonic mode `{0}` needs cutoff >= 1")]
    BadCutoff(String),
    #[error("mode `{0}` is not in vacuum")]
    NotVacuum(String),
    #[error("coherent tail weight {tail:.3e} on `{mode}` exceeds tolerance {tolerance:.1e}; raise the cutoff")]
    TailTooLarge { mode: String, tail: f64, tolerance: f64 },
    #[error("beamsplitter modes `{0}` and `{1}` have different cutoffs")]
    CutoffMismatch(String, String),
    #[error("beamsplitter needs two distinct modes, got `{0}` twice")]
    SameMode(String),
    #[error("parameter `{name}` = {value} outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("mode `{0}` belongs to the environment partition")]
    EnvironmentMode(String),
    #[error("dense dimension {dim} exceeds cap {cap}; use the ensemble form")]
    DenseTooLarge { dim: usize, cap: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("basis entry {value} out of range for mode `{mode}`")]
    BasisOutOfRange { mode: String, value: usize },
    #[error("registers differ")]
    RegisterMismatch,
}

pub type Result<T> = std::result::Result<T, HilbertError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeKind {
    Bosonic { cutoff: usize },
    Qubit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    System,
    Environment,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub kind: ModeKind,
    pub label: String,
    pub partition: Partition,
}

impl ModeSpec {
    pub fn bosonic(label: &str, cutoff: usize) -> Self {
        Self { kind: ModeKind::Bosonic { cutoff }, label: label.to_string(), partition: Partition::System }
    }

    pub fn qubit(label: &str) -> Self {
        Self { kind: ModeKind::Qubit, label: label.to_string(), partition: Partition::System }
    }

    pub fn in_environment(mut self) -> Self {
        self.partition = Partition::Environment;
        self
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            ModeKind::Bosonic { cutoff } => cutoff + 1,
            ModeKind::Qubit => 2,
        }
    }

    pub fn cutoff(&self) -> Option<usize> {
        match self.kind {
            ModeKind::Bosonic { cutoff } => Some(cutoff),
            ModeKind::Qubit => None,
        }
    }

    pub fn is_environment(&self) -> bool {
        self.partition == Partition::Environment
    }
}

fn validate_register(register: &[ModeSpec]) -> Result<()> {
    for (k, m) in register.iter().enumerate() {
        if let ModeKind::Bosonic { cutoff } = m.kind {
            if cutoff < 1 || cutoff > u8::MAX as usize {
                return Err(HilbertError::BadCutoff(m.label.clone()));
            }
        }
        if register[..k].iter().any(|o| o.label == m.label) {
            return Err(HilbertError::DuplicateLabel(m.label.clone()));
        }
    }
    Ok(())
}

/// `ln(n!)`.
pub fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

fn binomial(n: usize, k: usize) -> f64 {
    (ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)).exp()
}

/// Poisson tail `P(n > cutoff)` for mean `mean`, summed forward so it stays
/// accurate when the tail is tiny.
pub fn poisson_tail(mean: f64, cutoff: usize) -> f64 {
    if mean == 0.0 {
        return 0.0;
    }
    let mut term = (-(mean) + (cutoff as f64 + 1.0) * mean.ln() - ln_factorial(cutoff + 1)).exp();
    let mut sum = 0.0;
    let mut n = cutoff + 1;
    while term > 1e-300 && n < cutoff + 2000 {
        sum += term;
        n += 1;
        term *= mean / n as f64;
        if term < sum * 1e-18 {
            break;
        }
    }
    sum
}

/// Smallest cutoff (at least `min`) for which the Poisson tail of `mean` is below `tol`.
pub fn cutoff_for(mean: f64, tol: f64, min: usize) -> usize {
    let mut c = min.max(1);
    while poisson_tail(mean, c) >= tol {
        c += 1;
    }
    c
}

#[derive(Clone, Copy, Debug)]
pub struct CoherentOptions {
    pub tail_tolerance: f64,
    pub allow_tail: bool,
    pub renormalize: bool,
}

impl Default for CoherentOptions {
    fn default() -> Self {
        Self { tail_tolerance: 1e-8, allow_tail: false, renormalize: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QubitGate {
    RotX { target: String, theta: f64 },
    RotY { target: String, theta: f64 },
    RotZ { target: String, theta: f64 },
    X(String),
    Y(String),
    Z(String),
    /// Flip `target` when `control` holds `control_value`.
    Cnot { control: String, control_value: u8, target: String },
    /// −1 phase on |↑↑⟩.
    Cz { a: String, b: String },
}

impl QubitGate {
    pub fn rot_x(t: &str, theta: f64) -> Self {
        Self::RotX { target: t.into(), theta }
    }
    pub fn rot_y(t: &str, theta: f64) -> Self {
        Self::RotY { target: t.into(), theta }
    }
    pub fn rot_z(t: &str, theta: f64) -> Self {
        Self::RotZ { target: t.into(), theta }
    }
    pub fn x(t: &str) -> Self {
        Self::X(t.into())
    }
    pub fn y(t: &str) -> Self {
        Self::Y(t.into())
    }
    pub fn z(t: &str) -> Self {
        Self::Z(t.into())
    }
    pub fn cnot(control: &str, control_value: u8, target: &str) -> Self {
        Self::Cnot { control: control.into(), control_value, target: target.into() }
    }
    pub fn cz(a: &str, b: &str) -> Self {
        Self::Cz { a: a.into(), b: b.into() }
    }
}

pub type Mat2 = [[C64; 2]; 2];

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn mat_rot_x(theta: f64) -> Mat2 {
    let (s, co) = (theta / 2.0).sin_cos();
    [[c(co, 0.0), c(0.0, -s)], [c(0.0, -s), c(co, 0.0)]]
}

pub fn mat_rot_y(theta: f64) -> Mat2 {
    let (s, co) = (theta / 2.0).sin_cos();
    [[c(co, 0.0), c(-s, 0.0)], [c(s, 0.0), c(co, 0.0)]]
}

pub fn mat_rot_z(theta: f64) -> Mat2 {
    [[C64::from_polar(1.0, -theta / 2.0), C64::default()], [C64::default(), C64::from_polar(1.0, theta / 2.0)]]
}

pub const PAULI_X: Mat2 = [[C64::new(0.0, 0.0), C64::new(1.0, 0.0)], [C64::new(1.0, 0.0), C64::new(0.0, 0.0)]];
pub const PAULI_Y: Mat2 = [[C64::new(0.0, 0.0), C64::new(0.0, -1.0)], [C64::new(0.0, 1.0), C64::new(0.0, 0.0)]];
pub const PAULI_Z: Mat2 = [[C64::new(1.0, 0.0), C64::new(0.0, 0.0)], [C64::new(0.0, 0.0), C64::new(-1.0, 0.0)]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasBasis {
    Z,
    X,
}

/// One branch of a projective qubit measurement. For the Z basis `value` 0/1
/// means ↓/↑; for the X basis 0/1 means +/−. `state` is the projected,
/// unnormalized state, so `probability == state.norm_sq()`.
#[derive(Clone, Debug)]
pub struct QubitOutcome {
    pub value: u8,
    pub probability: f64,
    pub state: HybridState,
}

/// One photon-number outcome; the measured modes are removed from `state`.
#[derive(Clone, Debug)]
pub struct FockOutcome {
    pub counts: Vec<u8>,
    pub probability: f64,
    pub state: HybridState,
}

#[derive(Clone, Debug)]
pub struct HybridState {
    register: Vec<ModeSpec>,
    amps: BTreeMap<Vec<u8>, C64>,
    leakage: f64,
}

const PRUNE: f64 = 1e-30;

impl HybridState {
    /// All modes in |0⟩ (qubits in |↓⟩).
    pub fn vacuum(register: Vec<ModeSpec>) -> Result<Self> {
        validate_register(&register)?;
        let mut amps = BTreeMap::new();
        amps.insert(vec![0u8; register.len()], C64::new(1.0, 0.0));
        Ok(Self { register, amps, leakage: 0.0 })
    }

    pub fn from_amplitudes<I>(register: Vec<ModeSpec>, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<u8>, C64)>,
    {
        validate_register(&register)?;
        let mut amps: BTreeMap<Vec<u8>, C64> = BTreeMap::new();
        for (basis, a) in entries {
            if basis.len() != register.len() {
                return Err(HilbertError::DimensionMismatch(basis.len(), register.len()));
            }
            for (m, &v) in register.iter().zip(&basis) {
                if v as usize >= m.dim() {
                    return Err(HilbertError::BasisOutOfRange { mode: m.label.clone(), value: v as usize });
                }
            }
            *amps.entry(basis).or_default() += a;
        }
        amps.retain(|_, a| a.norm_sqr() > PRUNE);
        Ok(Self { register, amps, leakage: 0.0 })
    }

    pub fn register(&self) -> &[ModeSpec] {
        &self.register
    }

    pub fn amplitudes(&self) -> impl Iterator<Item = (&Vec<u8>, &C64)> {
        self.amps.iter()
    }

    pub fn amplitude(&self, basis: &[u8]) -> C64 {
        self.amps.get(basis).copied().unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.amps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amps.is_empty()
    }

    /// Squared norm, i.e. the branch probability carried by an unnormalized state.
    pub fn norm_sq(&self) -> f64 {
        self.amps.values().map(|a| a.norm_sqr()).sum()
    }

    /// Accumulated truncation leakage (probability pushed above a cutoff).
    pub fn leakage(&self) -> f64 {
        self.leakage
    }

    pub fn set_leakage(&mut self, leakage: f64) {
        self.leakage = leakage;
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.register
            .iter()
            .position(|m| m.label == label)
            .ok_or_else(|| HilbertError::UnknownMode(label.to_string()))
    }

    pub fn mode(&self, label: &str) -> Result<&ModeSpec> {
        Ok(&self.register[self.index_of(label)?])
    }

    fn qubit_index(&self, label: &str) -> Result<usize> {
        let k = self.index_of(label)?;
        match self.register[k].kind {
            ModeKind::Qubit => Ok(k),
            _ => Err(HilbertError::NotQubit(label.to_string())),
        }
    }

    fn bosonic_index(&self, label: &str) -> Result<(usize, usize)> {
        let k = self.index_of(label)?;
        match self.register[k].kind {
            ModeKind::Bosonic { cutoff } => Ok((k, cutoff)),
            _ => Err(HilbertError::NotBosonic(label.to_string())),
        }
    }

    fn with_amps(&self, amps: BTreeMap<Vec<u8>, C64>) -> Self {
        Self { register: self.register.clone(), amps, leakage: self.leakage }
    }

    pub fn scaled(&self, factor: C64) -> Self {
        let amps = self.amps.iter().map(|(k, a)| (k.clone(), a * factor)).collect();
        self.with_amps(amps)
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm_sq();
        if n == 0.0 {
            return self.clone();
        }
        self.scaled(C64::new(1.0 / n.sqrt(), 0.0))
    }

    /// Superposition `self + other` on an identical register.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.register != other.register {
            return Err(HilbertError::RegisterMismatch);
        }
        let mut amps = self.amps.clone();
        for (k, a) in &other.amps {
            *amps.entry(k.clone()).or_default() += a;
        }
        amps.retain(|_, a| a.norm_sqr() > PRUNE);
        let mut out = self.with_amps(amps);
        out.leakage += other.leakage;
        Ok(out)
    }

    /// ⟨self|other⟩.
    pub fn inner(&self, other: &Self) -> Result<C64> {
        if self.register != other.register {
            return Err(HilbertError::RegisterMismatch);
        }
        let (small, large, conj_small) =
            if self.amps.len() <= other.amps.len() { (self, other, true) } else { (other, self, false) };
        let mut acc = C64::default();
        for (k, a) in &small.amps {
            if let Some(b) = large.amps.get(k) {
                acc += if conj_small { a.conj() * b } else { b.conj() * a };
            }
        }
        Ok(acc)
    }

    /// Tensor on a fresh mode held in basis value `value`.
    pub fn with_mode(&self, spec: ModeSpec, value: u8) -> Result<Self> {
        let mut register = self.register.clone();
        if value as usize >= spec.dim() {
            return Err(HilbertError::BasisOutOfRange { mode: spec.label.clone(), value: value as usize });
        }
        register.push(spec);
        validate_register(&register)?;
        let amps = self
            .amps
            .iter()
            .map(|(k, a)| {
                let mut k = k.clone();
                k.push(value);
                (k, *a)
            })
            .collect();
        Ok(Self { register, amps, leakage: self.leakage })
    }

    /// Tensor product `self ⊗ other`.
    pub fn tensor(&self, other: &Self) -> Result<Self> {
        let mut register = self.register.clone();
        register.extend(other.register.iter().cloned());
        validate_register(&register)?;
        let mut amps = BTreeMap::new();
        for (ka, a) in &self.amps {
            for (kb, b) in &other.amps {
                let mut k = ka.clone();
                k.extend_from_slice(kb);
                amps.insert(k, a * b);
            }
        }
        Ok(Self { register, amps, leakage: self.leakage + other.leakage })
    }

    /// Projects `label` onto basis value `value` and drops the mode.
    pub fn project_out(&self, label: &str, value: u8) -> Result<Self> {
        let k = self.index_of(label)?;
        let mut register = self.register.clone();
        register.remove(k);
        let mut amps = BTreeMap::new();
        for (basis, a) in &self.amps {
            if basis[k] == value {
                let mut b = basis.clone();
                b.remove(k);
                amps.insert(b, *a);
            }
        }
        Ok(Self { register, amps, leakage: self.leakage })
    }

    /// Sets the partition of a mode.
    pub fn with_partition(&self, label: &str, partition: Partition) -> Result<Self> {
        let k = self.index_of(label)?;
        let mut out = self.clone();
        out.register[k].partition = partition;
        Ok(out)
    }

    /// Loads a truncated coherent state |α⟩ into a vacuum bosonic mode.
    /// Returns the new state and the truncated tail weight.
    pub fn prepare_coherent(&self, label: &str, alpha: C64, opts: CoherentOptions) -> Result<(Self, f64)> {
        let (k, cutoff) = self.bosonic_index(label)?;
        if self.amps.keys().any(|b| b[k] != 0) {
            return Err(HilbertError::NotVacuum(label.to_string()));
        }
        let mean = alpha.norm_sqr();
        if mean == 0.0 {
            return Ok((self.clone(), 0.0));
        }
        let tail = poisson_tail(mean, cutoff);
        if tail > opts.tail_tolerance && !opts.allow_tail {
            return Err(HilbertError::TailTooLarge { mode: label.to_string(), tail, tolerance: opts.tail_tolerance });
        }
        let mut coeffs = Vec::with_capacity(cutoff + 1);
        for n in 0..=cutoff {
            let mag = (-mean / 2.0 - 0.5 * ln_factorial(n)).exp();
            coeffs.push(alpha.powu(n as u32) * mag);
        }
        if opts.renormalize {
            let s = (1.0 - tail).sqrt();
            coeffs.iter_mut().for_each(|x| *x /= s);
        }
        let mut amps = BTreeMap::new();
        for (basis, a) in &self.amps {
            for (n, cn) in coeffs.iter().enumerate() {
                let mut b = basis.clone();
                b[k] = n as u8;
                amps.insert(b, a * cn);
            }
        }
        let mut out = self.with_amps(amps);
        if !opts.renormalize {
            out.leakage += tail * self.norm_sq();
        }
        Ok((out, tail))
    }

    /// Two-mode beamsplitter (see module conventions). Amplitude pushed above
    /// the shared cutoff is added to [`HybridState::leakage`].
    pub fn apply_beamsplitter(&self, mode_a: &str, mode_b: &str, transmissivity: f64, phase: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&transmissivity) {
            return Err(HilbertError::OutOfRange { name: "transmissivity", value: transmissivity });
        }
        if mode_a == mode_b {
            return Err(HilbertError::SameMode(mode_a.to_string()));
        }
        let (ka, ca) = self.bosonic_index(mode_a)?;
        let (kb, cb) = self.bosonic_index(mode_b)?;
        if ca != cb {
            return Err(HilbertError::CutoffMismatch(mode_a.to_string(), mode_b.to_string()));
        }
        let st = transmissivity.sqrt();
        let sr = (1.0 - transmissivity).sqrt();
        let u11 = C64::new(st, 0.0);
        let u21 = -C64::from_polar(sr, phase);
        let u12 = C64::from_polar(sr, -phase);
        let u22 = C64::new(st, 0.0);
        let mut cache: HashMap<(u8, u8), Vec<C64>> = HashMap::new();
        let mut amps: BTreeMap<Vec<u8>, C64> = BTreeMap::new();
        for (basis, a) in &self.amps {
            let (na, nb) = (basis[ka], basis[kb]);
            let row = cache.entry((na, nb)).or_insert_with(|| bs_row(na as usize, nb as usize, u11, u21, u12, u22));
            let total = na as usize + nb as usize;
            for (kout, amp) in row.iter().enumerate() {
                if amp.norm_sqr() == 0.0 || kout > ca || total - kout > ca {
                    continue;
                }
                let mut b = basis.clone();
                b[ka] = kout as u8;
                b[kb] = (total - kout) as u8;
                *amps.entry(b).or_default() += a * amp;
            }
        }
        amps.retain(|_, a| a.norm_sqr() > PRUNE);
        let before = self.norm_sq();
        let mut out = self.with_amps(amps);
        let after = out.norm_sq();
        out.leakage += (before - after).max(0.0);
        Ok(out)
    }

    /// Applies a 2×2 matrix to one qubit, optionally conditioned on another
    /// qubit holding `cond.1`.
    pub fn apply_single(&self, target: &str, m: &Mat2, cond: Option<(&str, u8)>) -> Result<Self> {
        let t = self.qubit_index(target)?;
        let cond = match cond {
            Some((l, v)) => Some((self.qubit_index(l)?, v)),
            None => None,
        };
        let mut amps: BTreeMap<Vec<u8>, C64> = BTreeMap::new();
        for (basis, a) in &self.amps {
            if let Some((ci, cv)) = cond {
                if basis[ci] != cv {
                    *amps.entry(basis.clone()).or_default() += a;
                    continue;
                }
            }
            let v = basis[t] as usize;
            for out in 0..2 {
                let f = m[out][v];
                if f.norm_sqr() == 0.0 {
                    continue;
                }
                let mut b = basis.clone();
                b[t] = out as u8;
                *amps.entry(b).or_default() += a * f;
            }
        }
        amps.retain(|_, a| a.norm_sqr() > PRUNE);
        Ok(self.with_amps(amps))
    }

    pub fn apply_qubit_gate(&self, gate: &QubitGate) -> Result<Self> {
        match gate {
            QubitGate::RotX { target, theta } => self.apply_single(target, &mat_rot_x(*theta), None),
            QubitGate::RotY { target, theta } => self.apply_single(target, &mat_rot_y(*theta), None),
            QubitGate::RotZ { target, theta } => self.apply_single(target, &mat_rot_z(*theta), None),
            QubitGate::X(t) => self.apply_single(t, &PAULI_X, None),
            QubitGate::Y(t) => self.apply_single(t, &PAULI_Y, None),
            QubitGate::Z(t) => self.apply_single(t, &PAULI_Z, None),
            QubitGate::Cnot { control, control_value, target } => {
                self.apply_single(target, &PAULI_X, Some((control.as_str(), *control_value)))
            }
            QubitGate::Cz { a, b } => self.apply_single(b, &PAULI_Z, Some((a.as_str(), UP))),
        }
    }

    pub fn apply_gates(&self, gates: &[QubitGate]) -> Result<Self> {
        let mut s = self.clone();
        for g in gates {
            s = s.apply_qubit_gate(g)?;
        }
        Ok(s)
    }

    /// Multiplies every amplitude by `f(basis)`.
    pub fn map_phase<F: Fn(&[u8]) -> C64>(&self, f: F) -> Self {
        let mut amps = BTreeMap::new();
        for (k, a) in &self.amps {
            let v = a * f(k);
            if v.norm_sqr() > PRUNE {
                amps.insert(k.clone(), v);
            }
        }
        self.with_amps(amps)
    }

    /// Number-conserving loss: appends a vacuum environment mode and mixes it
    /// in with transmissivity `transmission`.
    pub fn apply_loss(&self, label: &str, transmission: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&transmission) {
            return Err(HilbertError::OutOfRange { name: "transmission", value: transmission });
        }
        let (_, cutoff) = self.bosonic_index(label)?;
        let mut n = 0;
        let env_label = loop {
            let l = format!("{label}.loss{n}");
            if self.index_of(&l).is_err() {
                break l;
            }
            n += 1;
        };
        let s = self.with_mode(ModeSpec::bosonic(&env_label, cutoff).in_environment(), 0)?;
        s.apply_beamsplitter(label, &env_label, transmission, 0.0)
    }

    /// Photon-number projection of the listed system modes. Outcomes are in
    /// lexicographic count order and carry unnormalized post-states.
    pub fn measure_fock(&self, labels: &[&str]) -> Result<Vec<FockOutcome>> {
        let mut idx = Vec::with_capacity(labels.len());
        for l in labels {
            let (k, _) = self.bosonic_index(l)?;
            if self.register[k].is_environment() {
                return Err(HilbertError::EnvironmentMode(l.to_string()));
            }
            idx.push(k);
        }
        let keep: Vec<usize> = (0..self.register.len()).filter(|k| !idx.contains(k)).collect();
        let register: Vec<ModeSpec> = keep.iter().map(|&k| self.register[k].clone()).collect();
        let mut groups: BTreeMap<Vec<u8>, BTreeMap<Vec<u8>, C64>> = BTreeMap::new();
        for (basis, a) in &self.amps {
            let counts: Vec<u8> = idx.iter().map(|&k| basis[k]).collect();
            let rest: Vec<u8> = keep.iter().map(|&k| basis[k]).collect();
            groups.entry(counts).or_default().insert(rest, *a);
        }
        Ok(groups
            .into_iter()
            .map(|(counts, amps)| {
                let state = Self { register: register.clone(), amps, leakage: 0.0 };
                FockOutcome { counts, probability: state.norm_sq(), state }
            })
            .collect())
    }

    /// Projective qubit measurement; the qubit stays in the register in the
    /// measured eigenstate.
    pub fn measure_qubit(&self, label: &str, basis: MeasBasis) -> Result<[QubitOutcome; 2]> {
        let t = self.qubit_index(label)?;
        let mut parts = [BTreeMap::new(), BTreeMap::new()];
        match basis {
            MeasBasis::Z => {
                for (b, a) in &self.amps {
                    parts[b[t] as usize].insert(b.clone(), *a);
                }
            }
            MeasBasis::X => {
                let mut proj: [BTreeMap<Vec<u8>, C64>; 2] = [BTreeMap::new(), BTreeMap::new()];
                for (b, a) in &self.amps {
                    let sign = if b[t] == UP { -1.0 } else { 1.0 };
                    let mut key = b.clone();
                    key[t] = 0;
                    *proj[0].entry(key.clone()).or_default() += a * FRAC_1_SQRT_2;
                    *proj[1].entry(key).or_default() += a * (sign * FRAC_1_SQRT_2);
                }
                for (v, p) in proj.iter().enumerate() {
                    let sign = if v == 0 { 1.0 } else { -1.0 };
                    for (key, cp) in p {
                        if cp.norm_sqr() <= PRUNE {
                            continue;
                        }
                        let mut down = key.clone();
                        down[t] = DOWN;
                        let mut up = key.clone();
                        up[t] = UP;
                        parts[v].insert(down, cp * FRAC_1_SQRT_2);
                        parts[v].insert(up, cp * (sign * FRAC_1_SQRT_2));
                    }
                }
            }
        }
        let [p0, p1] = parts;
        let s0 = Self { register: self.register.clone(), amps: p0, leakage: 0.0 };
        let s1 = Self { register: self.register.clone(), amps: p1, leakage: 0.0 };
        Ok([
            QubitOutcome { value: 0, probability: s0.norm_sq(), state: s0 },
            QubitOutcome { value: 1, probability: s1.norm_sq(), state: s1 },
        ])
    }

    fn system_layout(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let sys: Vec<usize> = (0..self.register.len()).filter(|&k| !self.register[k].is_environment()).collect();
        let env: Vec<usize> = (0..self.register.len()).filter(|&k| self.register[k].is_environment()).collect();
        let dims = sys.iter().map(|&k| self.register[k].dim()).collect();
        (sys, env, dims)
    }

    /// Dimensions of the system-partition modes in register order.
    pub fn system_dims(&self) -> Vec<usize> {
        self.system_layout().2
    }

    /// Dense reduced density matrix over the system partition.
    pub fn trace_out_dense(&self, cap: usize) -> Result<DensityMatrix> {
        cross_density(self, self, cap)
    }

    /// Reduced state over the system partition as an ensemble: one branch
    /// per environment basis tuple.
    pub fn trace_out_ensemble(&self) -> MixedState {
        let (sys, env, _) = self.system_layout();
        let register: Vec<ModeSpec> = sys.iter().map(|&k| self.register[k].clone()).collect();
        let mut groups: BTreeMap<Vec<u8>, BTreeMap<Vec<u8>, C64>> = BTreeMap::new();
        for (basis, a) in &self.amps {
            let e: Vec<u8> = env.iter().map(|&k| basis[k]).collect();
            let s: Vec<u8> = sys.iter().map(|&k| basis[k]).collect();
            *groups.entry(e).or_default().entry(s).or_default() += a;
        }
        let branches = groups
            .into_values()
            .map(|amps| Branch { weight: 1.0, state: Self { register: register.clone(), amps, leakage: 0.0 } })
            .collect();
        MixedState { branches, discarded: 0.0, leakage: self.leakage }
    }

    /// Dense vector over the full register (environment included).
    pub fn dense_vector(&self, cap: usize) -> Result<Vec<C64>> {
        let dims: Vec<usize> = self.register.iter().map(|m| m.dim()).collect();
        let dim: usize = dims.iter().product();
        if dim > cap {
            return Err(HilbertError::DenseTooLarge { dim, cap });
        }
        let mut v = vec![C64::default(); dim];
        for (b, a) in &self.amps {
            v[flat_index(b.iter().map(|&x| x as usize), &dims)] = *a;
        }
        Ok(v)
    }
}

fn flat_index<I: Iterator<Item = usize>>(values: I, dims: &[usize]) -> usize {
    let mut idx = 0;
    for (v, d) in values.zip(dims) {
        idx = idx * d + v;
    }
    idx
}

/// Output amplitudes `⟨k, N−k| U |na, nb⟩` for `k = 0..=N`.
fn bs_row(na: usize, nb: usize, u11: C64, u21: C64, u12: C64, u22: C64) -> Vec<C64> {
    let total = na + nb;
    let mut row = vec![C64::default(); total + 1];
    for p in 0..=na {
        let fa = u11.powu(p as u32) * u21.powu((na - p) as u32) * binomial(na, p);
        for q in 0..=nb {
            let fb = u12.powu(q as u32) * u22.powu((nb - q) as u32) * binomial(nb, q);
            row[p + q] += fa * fb;
        }
    }
    let norm_in = 0.5 * (ln_factorial(na) + ln_factorial(nb));
    for (k, x) in row.iter_mut().enumerate() {
        *x *= (0.5 * (ln_factorial(k) + ln_factorial(total - k)) - norm_in).exp();
    }
    row
}

/// `Tr_env |a⟩⟨b|` as a dense matrix over the system partition.
pub fn cross_density(a: &HybridState, b: &HybridState, cap: usize) -> Result<DensityMatrix> {
    if a.register != b.register {
        return Err(HilbertError::RegisterMismatch);
    }
    let (sys, env, dims) = a.system_layout();
    let dim: usize = dims.iter().product();
    if dim > cap {
        return Err(HilbertError::DenseTooLarge { dim, cap });
    }
    let group = |s: &HybridState| {
        let mut g: BTreeMap<Vec<u8>, Vec<(usize, C64)>> = BTreeMap::new();
        for (basis, amp) in &s.amps {
            let e: Vec<u8> = env.iter().map(|&k| basis[k]).collect();
            let i = flat_index(sys.iter().map(|&k| basis[k] as usize), &dims);
            g.entry(e).or_default().push((i, *amp));
        }
        g
    };
    let ga = group(a);
    let gb = group(b);
    let mut m = DMatrix::<C64>::zeros(dim, dim);
    for (e, va) in &ga {
        if let Some(vb) = gb.get(e) {
            for &(i, x) in va {
                for &(j, y) in vb {
                    m[(i, j)] += x * y.conj();
                }
            }
        }
    }
    Ok(DensityMatrix { dims, m })
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub weight: f64,
    pub state: HybridState,
}

/// Weighted ensemble `ρ = Σ w |ψ⟩⟨ψ|`. Branch states may be unnormalized;
/// their squared norm is part of the branch probability.
#[derive(Clone, Debug)]
pub struct MixedState {
    pub branches: Vec<Branch>,
    /// Probability removed by post-selection so far.
    pub discarded: f64,
    /// Truncation leakage accumulated before the ensemble was formed.
    pub leakage: f64,
}

impl MixedState {
    pub fn pure(state: HybridState) -> Self {
        Self { branches: vec![Branch { weight: 1.0, state }], discarded: 0.0, leakage: 0.0 }
    }

    pub fn empty() -> Self {
        Self { branches: Vec::new(), discarded: 0.0, leakage: 0.0 }
    }

    pub fn push(&mut self, weight: f64, state: HybridState) {
        if weight > 0.0 && !state.is_empty() {
            self.branches.push(Branch { weight, state });
        }
    }

    /// `Σ w ‖ψ‖²`.
    pub fn total_probability(&self) -> f64 {
        self.branches.iter().map(|b| b.weight * b.state.norm_sq()).sum()
    }

    /// Leakage carried by the ensemble and its branch states.
    pub fn total_leakage(&self) -> f64 {
        self.leakage + self.branches.iter().map(|b| b.weight * b.state.leakage()).sum::<f64>()
    }

    pub fn normalized(&self) -> Self {
        let p = self.total_probability();
        let mut out = self.clone();
        if p > 0.0 {
            out.branches.iter_mut().for_each(|b| b.weight /= p);
        }
        out
    }

    pub fn map<E, F>(&self, f: F) -> std::result::Result<Self, E>
    where
        F: Fn(&HybridState) -> std::result::Result<HybridState, E>,
    {
        let mut out = Self { branches: Vec::with_capacity(self.branches.len()), ..self.clone() };
        for b in &self.branches {
            out.push(b.weight, f(&b.state)?);
        }
        Ok(out)
    }

    pub fn apply_qubit_gate(&self, gate: &QubitGate) -> Result<Self> {
        self.map(|s| s.apply_qubit_gate(gate))
    }

    pub fn apply_gates(&self, gates: &[QubitGate]) -> Result<Self> {
        self.map(|s| s.apply_gates(gates))
    }

    /// Pauli channel with probabilities `(px, py, pz)`.
    pub fn pauli_channel(&self, qubit: &str, px: f64, py: f64, pz: f64) -> Result<Self> {
        let pi = 1.0 - px - py - pz;
        for (name, v) in [("px", px), ("py", py), ("pz", pz), ("identity weight", pi)] {
            if !(-1e-15..=1.0 + 1e-15).contains(&v) {
                return Err(HilbertError::OutOfRange { name, value: v });
            }
        }
        let mut out = Self { branches: Vec::new(), ..self.clone() };
        for b in &self.branches {
            b.state.qubit_index(qubit)?;
            out.push(b.weight * pi.max(0.0), b.state.clone());
            for (p, m) in [(px, &PAULI_X), (py, &PAULI_Y), (pz, &PAULI_Z)] {
                if p > 0.0 {
                    out.push(b.weight * p, b.state.apply_single(qubit, m, None)?);
                }
            }
        }
        Ok(out)
    }

    /// `ρ → (1−p)ρ + p·Tr_q(ρ)⊗I/2`, realised as a four-branch Pauli mixture.
    pub fn depolarize_qubit(&self, qubit: &str, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(HilbertError::OutOfRange { name: "p", value: p });
        }
        self.pauli_channel(qubit, p / 4.0, p / 4.0, p / 4.0)
    }

    /// Amplitude damping toward |↓⟩ with decay probability `gamma`.
    pub fn amplitude_damp_qubit(&self, qubit: &str, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(HilbertError::OutOfRange { name: "gamma", value: gamma });
        }
        let k0: Mat2 = [[c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c((1.0 - gamma).sqrt(), 0.0)]];
        let k1: Mat2 = [[c(0.0, 0.0), c(gamma.sqrt(), 0.0)], [c(0.0, 0.0), c(0.0, 0.0)]];
        let mut out = Self { branches: Vec::new(), ..self.clone() };
        for b in &self.branches {
            out.push(b.weight, b.state.apply_single(qubit, &k0, None)?);
            if gamma > 0.0 {
                out.push(b.weight, b.state.apply_single(qubit, &k1, None)?);
            }
        }
        Ok(out)
    }

    /// Splits each branch on a qubit measurement; returns the ensembles for
    /// outcome 0 and 1.
    pub fn measure_qubit(&self, qubit: &str, basis: MeasBasis) -> Result<[Self; 2]> {
        let mut o0 = Self { branches: Vec::new(), ..self.clone() };
        let mut o1 = o0.clone();
        for b in &self.branches {
            let [a, c1] = b.state.measure_qubit(qubit, basis)?;
            o0.push(b.weight, a.state);
            o1.push(b.weight, c1.state);
        }
        Ok([o0, o1])
    }

    /// Dense reduced state over the system partition (unnormalized).
    pub fn trace_out_dense(&self, cap: usize) -> Result<DensityMatrix> {
        let mut acc: Option<DensityMatrix> = None;
        for b in &self.branches {
            let d = b.state.trace_out_dense(cap)?.scaled(b.weight);
            acc = Some(match acc {
                None => d,
                Some(a) => a.add(&d)?,
            });
        }
        acc.ok_or(HilbertError::DimensionMismatch(0, 0))
    }

    /// Ensemble from a dense state over `register` (system modes only):
    /// one branch per eigenvector with eigenvalue above `floor`.
    pub fn from_density(register: Vec<ModeSpec>, rho: &DensityMatrix, floor: f64) -> Result<Self> {
        let dims: Vec<usize> = register.iter().map(|m| m.dim()).collect();
        if dims != rho.dims {
            return Err(HilbertError::DimensionMismatch(dims.iter().product(), rho.dim()));
        }
        let h = (&rho.m + rho.m.adjoint()) * C64::new(0.5, 0.0);
        let eig = h.symmetric_eigen();
        let mut out = Self::empty();
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda <= floor {
                continue;
            }
            let col = eig.eigenvectors.column(k);
            let entries = (0..rho.dim()).filter(|&i| col[i].norm_sqr() > PRUNE).map(|i| {
                let mut basis = vec![0u8; dims.len()];
                let mut r = i;
                for m in (0..dims.len()).rev() {
                    basis[m] = (r % dims[m]) as u8;
                    r /= dims[m];
                }
                (basis, col[i])
            });
            out.push(lambda, HybridState::from_amplitudes(register.clone(), entries)?);
        }
        Ok(out)
    }

    /// Ensemble over the system partition; keeps branch structure.
    pub fn trace_out_ensemble(&self) -> Self {
        let mut out = Self { branches: Vec::new(), ..self.clone() };
        for b in &self.branches {
            for e in b.state.trace_out_ensemble().branches {
                out.push(b.weight * e.weight, e.state);
            }
        }
        out
    }
}

/// Dense density matrix over a list of subsystem dimensions (first subsystem
/// most significant).
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    pub dims: Vec<usize>,
    pub m: DMatrix<C64>,
}

impl DensityMatrix {
    pub fn from_matrix(dims: Vec<usize>, m: DMatrix<C64>) -> Result<Self> {
        let d: usize = dims.iter().product();
        if m.nrows() != d || m.ncols() != d {
            return Err(HilbertError::DimensionMismatch(m.nrows(), d));
        }
        Ok(Self { dims, m })
    }

    pub fn from_pure(dims: Vec<usize>, v: &[C64]) -> Result<Self> {
        let d: usize = dims.iter().product();
        if v.len() != d {
            return Err(HilbertError::DimensionMismatch(v.len(), d));
        }
        let m = DMatrix::from_fn(d, d, |i, j| v[i] * v[j].conj());
        Ok(Self { dims, m })
    }

    /// Full-register density matrix of a pure hybrid state (environment kept).
    pub fn from_hybrid(state: &HybridState, cap: usize) -> Result<Self> {
        let dims = state.register().iter().map(|m| m.dim()).collect();
        Self::from_pure(dims, &state.dense_vector(cap)?)
    }

    pub fn maximally_mixed(dims: Vec<usize>) -> Self {
        let d: usize = dims.iter().product();
        let m = DMatrix::from_fn(d, d, |i, j| if i == j { C64::new(1.0 / d as f64, 0.0) } else { C64::default() });
        Self { dims, m }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.m.trace().re
    }

    pub fn scaled(&self, f: f64) -> Self {
        Self { dims: self.dims.clone(), m: &self.m * C64::new(f, 0.0) }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(HilbertError::DimensionMismatch(self.dim(), other.dim()));
        }
        Ok(Self { dims: self.dims.clone(), m: &self.m + &other.m })
    }

    pub fn normalized(&self) -> Self {
        let t = self.trace();
        if t > 0.0 {
            self.scaled(1.0 / t)
        } else {
            self.clone()
        }
    }

    pub fn purity(&self) -> f64 {
        (&self.m * &self.m).trace().re
    }

    /// Reduced state on the subsystems listed in `keep` (in ascending order).
    pub fn partial_trace(&self, keep: &[usize]) -> Result<Self> {
        let n = self.dims.len();
        if keep.iter().any(|&k| k >= n) {
            return Err(HilbertError::DimensionMismatch(keep.len(), n));
        }
        let traced: Vec<usize> = (0..n).filter(|k| !keep.contains(k)).collect();
        let kdims: Vec<usize> = keep.iter().map(|&k| self.dims[k]).collect();
        let tdims: Vec<usize> = traced.iter().map(|&k| self.dims[k]).collect();
        let kd: usize = kdims.iter().product();
        let td: usize = tdims.iter().product();
        let mut strides = vec![1usize; n];
        for k in (0..n.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.dims[k + 1];
        }
        let compose = |kv: usize, tv: usize| {
            let mut idx = 0;
            let mut r = kv;
            for (pos, &k) in keep.iter().enumerate().rev() {
                idx += (r % kdims[pos]) * strides[k];
                r /= kdims[pos];
            }
            let mut r = tv;
            for (pos, &k) in traced.iter().enumerate().rev() {
                idx += (r % tdims[pos]) * strides[k];
                r /= tdims[pos];
            }
            idx
        };
        let mut out = DMatrix::<C64>::zeros(kd, kd);
        for i in 0..kd {
            for j in 0..kd {
                let mut acc = C64::default();
                for t in 0..td {
                    acc += self.m[(compose(i, t), compose(j, t))];
                }
                out[(i, j)] = acc;
            }
        }
        Ok(Self { dims: kdims, m: out })
    }

    /// Applies a single-subsystem 2×2 unitary to qubit subsystem `sub`.
    pub fn apply_qubit_unitary(&self, sub: usize, u: &Mat2) -> Result<Self> {
        if sub >= self.dims.len() || self.dims[sub] != 2 {
            return Err(HilbertError::DimensionMismatch(sub, self.dims.len()));
        }
        let d = self.dim();
        let stride: usize = self.dims[sub + 1..].iter().product();
        let full = DMatrix::from_fn(d, d, |i, j| {
            let (bi, bj) = ((i / stride) % 2, (j / stride) % 2);
            if i - bi * stride == j - bj * stride {
                u[bi][bj]
            } else {
                C64::default()
            }
        });
        Ok(Self { dims: self.dims.clone(), m: &full * &self.m * full.adjoint() })
    }

    /// `Tr(ρ O)`.
    pub fn expectation(&self, op: &DMatrix<C64>) -> C64 {
        (&self.m * op).trace()
    }

    /// Hermitian eigenvalues (ascending).
    pub fn eigenvalues(&self) -> Vec<f64> {
        let h = (&self.m + self.m.adjoint()) * C64::new(0.5, 0.0);
        let mut v: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        (&self.m - self.m.adjoint()).iter().all(|x| x.norm() <= tol)
    }

    /// Hermitian, trace at most one, no eigenvalue below `-tol`.
    pub fn is_physical(&self, tol: f64) -> bool {
        self.is_hermitian(tol) && self.trace() <= 1.0 + tol && self.eigenvalues().iter().all(|&e| e >= -tol)
    }
}

// Eigenvalues below this fraction of the largest are treated as roundoff;
// their square roots would otherwise inject ~1e-8 errors.
const EIG_FLOOR: f64 = 1e-13;

fn psd_sqrt(m: &DMatrix<C64>) -> DMatrix<C64> {
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    let eig = h.symmetric_eigen();
    let floor = EIG_FLOOR * eig.eigenvalues.amax();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| C64::new(if x > floor { x.sqrt() } else { 0.0 }, 0.0)));
    &eig.eigenvectors * d * eig.eigenvectors.adjoint()
}

/// Uhlmann fidelity `(Tr √(√ρ σ √ρ))²`, clamped to [0, 1].
pub fn fidelity(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(HilbertError::DimensionMismatch(a.dim(), b.dim()));
    }
    let sa = psd_sqrt(&a.m);
    let inner = &sa * &b.m * &sa;
    let h = (&inner + inner.adjoint()) * C64::new(0.5, 0.0);
    let ev = h.symmetric_eigenvalues();
    let floor = EIG_FLOOR * ev.amax();
    let s: f64 = ev.iter().filter(|&&x| x > floor).map(|&x| x.sqrt()).sum();
    Ok((s * s).clamp(0.0, 1.0))
}

/// `|⟨a|b⟩|²` for normalized pure states (norms are divided out).
pub fn pure_fidelity(a: &HybridState, b: &HybridState) -> Result<f64> {
    let ov = a.inner(b)?;
    let n = a.norm_sq() * b.norm_sq();
    if n == 0.0 {
        return Ok(0.0);
    }
    Ok((ov.norm_sqr() / n).clamp(0.0, 1.0))
}

/// `⟨ψ|ρ|ψ⟩` for a dense vector `ψ` (normalized by the caller).
pub fn overlap_with_pure(rho: &DensityMatrix, psi: &[C64]) -> Result<f64> {
    if psi.len() != rho.dim() {
        return Err(HilbertError::DimensionMismatch(psi.len(), rho.dim()));
    }
    let mut acc = C64::default();
    for i in 0..psi.len() {
        for j in 0..psi.len() {
            acc += psi[i].conj() * rho.m[(i, j)] * psi[j];
        }
    }
    Ok(acc.re.clamp(0.0, 1.0))
}
