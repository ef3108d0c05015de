//! Batch front-end: TOML configuration, deterministic sweeps, CSV tables and
//! a JSON run summary. Every emitted CSV starts with a `#` line carrying the
//! config hash and seed; `verify` re-derives both.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, ValueEnum};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::erasure::{erasure_performance_map, write_map_csv, DetectorModel, Strategy};
use crate::metrics::{fisher_curves, log_grid, p_mh, write_fisher_csv, FisherParams};
use crate::protocols::{
    entanglement_curve, herald_probability_curve, jitter_average_fidelity, parity_curve, parity_visibilities,
    phase_jitter_penalty, point_rng, run_nuclear_entanglement, sigma_from_lock_visibility, timebin_curve,
    timebin_visibilities, write_entanglement_csv, write_herald_csv, write_jitter_csv, write_parity_csv,
    write_timebin_csv, ErasureMode, JitterMethod, NoiseModel, ProtocolConfig, SignalSource, LO_TAIL,
};
use crate::schemes::{
    detect_kink, gain_max, multiplex_resources, scheme_sweep, write_scheme_csv, BaselineParams, RateBudget,
};
use crate::spin_photon::GateFlavor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    Entangle,
    Timebin,
    Nonlocal,
    ErasureMap,
    Fisher,
    Schemes,
    /// Re-derive and check the hashes of an output directory.
    Verify,
}

impl Subcommand {
    pub fn name(&self) -> &'static str {
        match self {
            Subcommand::Entangle => "entangle",
            Subcommand::Timebin => "timebin",
            Subcommand::Nonlocal => "nonlocal",
            Subcommand::ErasureMap => "erasure-map",
            Subcommand::Fisher => "fisher",
            Subcommand::Schemes => "schemes",
            Subcommand::Verify => "verify",
        }
    }

    /// LO amplitude used when the config leaves `noise.alpha_lo` unset.
    pub fn default_alpha_lo(&self) -> f64 {
        match self {
            Subcommand::Timebin | Subcommand::ErasureMap => 0.45,
            _ => 0.55,
        }
    }
}

#[derive(Parser, Debug, Clone)]
#[command(name = "qnet-interf", version, about = "Memory-assisted non-local interferometry simulator")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Option<Subcommand>,
    /// Same as the positional subcommand.
    #[arg(long = "subcommand", value_enum, env = "QNET_SUBCOMMAND")]
    pub subcommand: Option<Subcommand>,
    #[arg(long, env = "QNET_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "QNET_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Master seed; overrides `seed` in the config.
    #[arg(long, env = "QNET_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "QNET_WORKERS", default_value_t = 1)]
    pub workers: usize,
}

impl Args {
    pub fn resolve(&self) -> anyhow::Result<Subcommand> {
        match (self.command, self.subcommand) {
            (Some(a), Some(b)) if a != b => bail!("conflicting subcommands `{}` and `{}`", a.name(), b.name()),
            (Some(a), _) | (None, Some(a)) => Ok(a),
            (None, None) => bail!("missing subcommand"),
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// LO amplitude; 0.45 for time-bin and erasure maps, 0.55 otherwise.
    pub alpha_lo: Option<f64>,
    /// SiV-to-detector transmission of the signal.
    pub eta: f64,
    /// Part of `eta` spent before the LO beamsplitter.
    pub gate_transmission: f64,
    pub eps_mw: f64,
    /// Dark-count probability per detector; four detectors in total.
    pub p_dc_per_detector: f64,
    pub bell_fidelity: f64,
    pub nuclear_depolarization: f64,
    pub electron_damping: f64,
    pub electron_readout_flip: f64,
    pub nuclear_readout_flip: f64,
    pub link_transmission: f64,
    pub r_down: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            alpha_lo: None,
            eta: 0.15,
            gate_transmission: 0.5,
            eps_mw: 0.06,
            p_dc_per_detector: 1e-2,
            bell_fidelity: 1.0,
            nuclear_depolarization: 0.0,
            electron_damping: 0.0,
            electron_readout_flip: 0.0,
            nuclear_readout_flip: 0.0,
            link_transmission: 1.0,
            r_down: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalSection {
    pub gate_flavor: GateFlavor,
    pub strategy: Strategy,
    pub source: SignalSource,
    pub erasure: ErasureMode,
    pub tail_tolerance: f64,
}

impl Default for SignalSection {
    fn default() -> Self {
        let p = ProtocolConfig::default();
        Self { gate_flavor: p.gate_flavor, strategy: p.strategy, source: p.source, erasure: p.erasure, tail_tolerance: p.tail_tolerance }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonlocalSection {
    pub mu_sig: f64,
    pub phi_points: usize,
    pub herald_mu_grid: Vec<f64>,
}

impl Default for NonlocalSection {
    fn default() -> Self {
        Self { mu_sig: 0.25, phi_points: 8, herald_mu_grid: vec![0.25, 0.5, 1.0, 2.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimebinSection {
    pub mu_sig: f64,
    pub theta_points: usize,
}

impl Default for TimebinSection {
    fn default() -> Self {
        Self { mu_sig: 1.0, theta_points: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntangleSection {
    pub mu_ent_grid: Vec<f64>,
    pub delta_phi_e: f64,
    /// Interferometer lock visibility; sets the Gaussian phase jitter.
    pub lock_visibility: f64,
    pub jitter_nodes: usize,
    pub jitter_deltas: Vec<f64>,
    pub mc_samples: usize,
    pub nuclear_mu_ent: f64,
    pub error_detection: bool,
}

impl Default for EntangleSection {
    fn default() -> Self {
        Self {
            mu_ent_grid: vec![0.01, 0.02, 0.05, 0.1, 0.2],
            delta_phi_e: std::f64::consts::PI,
            lock_visibility: 0.93,
            jitter_nodes: 24,
            jitter_deltas: (-10..=10).map(|k| k as f64 * 0.03).collect(),
            mc_samples: 100_000,
            nuclear_mu_ent: 0.1,
            error_detection: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErasureMapSection {
    pub alpha_grid: Vec<f64>,
    /// Signal photon number and herald efficiency entering `p_mh`.
    pub mu_sig: f64,
    pub eta_herald: f64,
}

impl Default for ErasureMapSection {
    fn default() -> Self {
        Self { alpha_grid: (1..=10).map(|k| k as f64 * 0.1).collect(), mu_sig: 0.15, eta_herald: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FisherSection {
    pub mu_min: f64,
    pub mu_max: f64,
    pub points: usize,
    pub eta_erasure: f64,
    pub eta_herald: f64,
    pub v_bar: f64,
    pub eps_mh: f64,
}

impl Default for FisherSection {
    fn default() -> Self {
        Self { mu_min: 1e-4, mu_max: 10.0, points: 61, eta_erasure: 0.15, eta_herald: 0.5, v_bar: 1.0, eps_mh: 0.03 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemesSection {
    pub baseline: BaselineParams,
    pub l_max_km: f64,
    pub l_step_km: f64,
}

impl Default for SchemesSection {
    fn default() -> Self {
        Self { baseline: BaselineParams::default(), l_max_km: 400.0, l_step_km: 1.0 }
    }
}

/// Full run configuration. Every field has a default, so an empty file is valid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub noise: NoiseSection,
    pub signal: SignalSection,
    pub nonlocal: NonlocalSection,
    pub timebin: TimebinSection,
    pub entangle: EntangleSection,
    pub erasure_map: ErasureMapSection,
    pub fisher: FisherSection,
    pub schemes: SchemesSection,
}

fn field_err(path: &str, value: impl std::fmt::Display, expect: &str) -> anyhow::Error {
    anyhow::anyhow!("config field `{path}` = {value}: expected {expect}")
}

fn check_range(path: &str, v: f64, lo: f64, hi: f64) -> anyhow::Result<()> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(field_err(path, v, &format!("a value in [{lo}, {hi}]")))
    }
}

fn check_grid(path: &str, grid: &[f64], lo: f64, hi: f64) -> anyhow::Result<()> {
    if grid.is_empty() {
        return Err(field_err(path, "[]", "a non-empty list"));
    }
    for (k, &v) in grid.iter().enumerate() {
        check_range(&format!("{path}[{k}]"), v, lo, hi)?;
    }
    Ok(())
}

fn check_count(path: &str, n: usize, lo: usize, hi: usize) -> anyhow::Result<()> {
    if (lo..=hi).contains(&n) {
        Ok(())
    } else {
        Err(field_err(path, n, &format!("an integer in [{lo}, {hi}]")))
    }
}

/// Parses TOML text into a config without filling subcommand-specific defaults.
pub fn parse_config(text: &str) -> anyhow::Result<Config> {
    toml::from_str(text).map_err(|e| anyhow::anyhow!("config: {e}"))
}

/// Fills subcommand-specific defaults and range-checks every field, naming
/// the offending path on failure.
pub fn validate_config(mut cfg: Config, sub: Subcommand) -> anyhow::Result<Config> {
    let n = &mut cfg.noise;
    let alpha = *n.alpha_lo.get_or_insert(sub.default_alpha_lo());
    check_range("noise.alpha_lo", alpha, 0.0, 10.0)?;
    check_range("noise.eta", n.eta, 0.0, 1.0)?;
    check_range("noise.gate_transmission", n.gate_transmission, 1e-12, 1.0)?;
    if n.eta > n.gate_transmission {
        return Err(field_err("noise.eta", n.eta, "a value not above noise.gate_transmission"));
    }
    check_range("noise.eps_mw", n.eps_mw, 0.0, 0.5)?;
    check_range("noise.p_dc_per_detector", n.p_dc_per_detector, 0.0, 0.25)?;
    for (path, v) in [
        ("noise.bell_fidelity", n.bell_fidelity),
        ("noise.nuclear_depolarization", n.nuclear_depolarization),
        ("noise.electron_damping", n.electron_damping),
        ("noise.electron_readout_flip", n.electron_readout_flip),
        ("noise.nuclear_readout_flip", n.nuclear_readout_flip),
        ("noise.link_transmission", n.link_transmission),
        ("noise.r_down", n.r_down),
    ] {
        check_range(path, v, 0.0, 1.0)?;
    }
    let s = &cfg.signal;
    if !(s.tail_tolerance > 0.0 && s.tail_tolerance < 1e-3) {
        return Err(field_err("signal.tail_tolerance", s.tail_tolerance, "a value in (0, 1e-3)"));
    }
    let nl = &cfg.nonlocal;
    check_range("nonlocal.mu_sig", nl.mu_sig, 0.0, 5.0)?;
    check_count("nonlocal.phi_points", nl.phi_points, 3, 360)?;
    check_grid("nonlocal.herald_mu_grid", &nl.herald_mu_grid, 0.0, 5.0)?;
    check_range("timebin.mu_sig", cfg.timebin.mu_sig, 0.0, 5.0)?;
    check_count("timebin.theta_points", cfg.timebin.theta_points, 3, 360)?;
    let e = &cfg.entangle;
    check_grid("entangle.mu_ent_grid", &e.mu_ent_grid, 1e-12, 2.0)?;
    if !e.delta_phi_e.is_finite() {
        return Err(field_err("entangle.delta_phi_e", e.delta_phi_e, "a finite phase"));
    }
    check_range("entangle.lock_visibility", e.lock_visibility, 1e-6, 1.0)?;
    check_count("entangle.jitter_nodes", e.jitter_nodes, 1, 200)?;
    check_grid("entangle.jitter_deltas", &e.jitter_deltas, -std::f64::consts::PI, std::f64::consts::PI)?;
    if e.jitter_deltas.len() < 2 {
        return Err(field_err("entangle.jitter_deltas", e.jitter_deltas.len(), "at least two offsets"));
    }
    check_count("entangle.mc_samples", e.mc_samples, 2, 100_000_000)?;
    check_range("entangle.nuclear_mu_ent", e.nuclear_mu_ent, 1e-12, 2.0)?;
    let m = &cfg.erasure_map;
    check_grid("erasure_map.alpha_grid", &m.alpha_grid, 0.0, 10.0)?;
    check_range("erasure_map.mu_sig", m.mu_sig, 0.0, 100.0)?;
    check_range("erasure_map.eta_herald", m.eta_herald, 0.0, 1.0)?;
    let f = &cfg.fisher;
    check_range("fisher.mu_min", f.mu_min, 1e-12, 1e3)?;
    check_range("fisher.mu_max", f.mu_max, f.mu_min, 1e3)?;
    check_count("fisher.points", f.points, 1, 100_000)?;
    for (path, v) in [
        ("fisher.eta_erasure", f.eta_erasure),
        ("fisher.eta_herald", f.eta_herald),
        ("fisher.v_bar", f.v_bar),
        ("fisher.eps_mh", f.eps_mh),
    ] {
        check_range(path, v, 0.0, 1.0)?;
    }
    let sc = &cfg.schemes;
    sc.baseline.validate().map_err(|e| anyhow::anyhow!("config field `schemes.baseline`: {e}"))?;
    check_range("schemes.l_max_km", sc.l_max_km, 0.0, 1e5)?;
    check_range("schemes.l_step_km", sc.l_step_km, 1e-6, sc.l_max_km.max(1e-6))?;
    Ok(cfg)
}

impl Config {
    pub fn alpha_lo(&self) -> f64 {
        self.noise.alpha_lo.unwrap_or(0.55)
    }

    pub fn detector(&self) -> DetectorModel {
        let n = &self.noise;
        DetectorModel {
            gate_transmission: n.gate_transmission,
            path_transmission: n.eta / n.gate_transmission,
            dark_total: 4.0 * n.p_dc_per_detector,
            lo_alpha: [C64::new(self.alpha_lo(), 0.0); 2],
            tail_tolerance: LO_TAIL,
        }
    }

    pub fn noise_model(&self) -> NoiseModel {
        let n = &self.noise;
        NoiseModel {
            eps_mw: n.eps_mw,
            bell_fidelity: n.bell_fidelity,
            nuclear_depolarization: n.nuclear_depolarization,
            electron_damping: n.electron_damping,
            electron_readout_flip: n.electron_readout_flip,
            nuclear_readout_flip: n.nuclear_readout_flip,
            link_transmission: n.link_transmission,
            r_down: n.r_down,
            detector: self.detector(),
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        let s = &self.signal;
        ProtocolConfig {
            noise: self.noise_model(),
            gate_flavor: s.gate_flavor,
            strategy: s.strategy,
            source: s.source,
            erasure: s.erasure,
            tail_tolerance: s.tail_tolerance,
            seed: self.seed,
            ..ProtocolConfig::default()
        }
    }

    /// SHA-256 of the canonical JSON form, seed excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

fn uniform_phases(n: usize) -> Vec<f64> {
    (0..n).map(|k| 2.0 * std::f64::consts::PI * k as f64 / n as f64).collect()
}

// ---------------------------------------------------------------------------
// Running

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunSummary {
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: Config,
    pub results: serde_json::Value,
    pub files: Vec<FileDigest>,
}

struct Emitter<'a> {
    dir: &'a Path,
    stamp: String,
    files: Vec<FileDigest>,
}

impl Emitter<'_> {
    fn csv<F>(&mut self, name: &str, write: F) -> anyhow::Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> anyhow::Result<()>,
    {
        let mut buf = self.stamp.clone().into_bytes();
        write(&mut buf)?;
        let path = self.dir.join(name);
        fs::write(&path, &buf).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(FileDigest { name: name.to_string(), sha256: hex::encode(Sha256::digest(&buf)) });
        Ok(())
    }
}

fn stamp_line(hash: &str, seed: u64) -> String {
    format!("# qnet-interf {VERSION} config_sha256={hash} seed={seed}\n")
}

/// Runs one subcommand on a validated config and writes all artifacts into
/// `out`. Parallel sweeps use the ambient rayon pool.
pub fn run_subcommand(sub: Subcommand, cfg: &Config, out: &Path) -> anyhow::Result<RunSummary> {
    if sub == Subcommand::Verify {
        bail!("`verify` does not produce a run");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let hash = cfg.hash();
    let mut em = Emitter { dir: out, stamp: stamp_line(&hash, cfg.seed), files: Vec::new() };
    let results = match sub {
        Subcommand::Nonlocal => run_nonlocal(cfg, &mut em)?,
        Subcommand::Timebin => run_timebin(cfg, &mut em)?,
        Subcommand::Entangle => run_entangle(cfg, &mut em)?,
        Subcommand::ErasureMap => run_erasure_map(cfg, &mut em)?,
        Subcommand::Fisher => run_fisher(cfg, &mut em)?,
        Subcommand::Schemes => run_schemes(cfg, &mut em)?,
        Subcommand::Verify => unreachable!(),
    };
    let echo = toml::to_string(cfg).context("serializing config echo")?;
    fs::write(out.join(CONFIG_ECHO_FILE), echo)?;
    let summary = RunSummary {
        version: VERSION.to_string(),
        subcommand: sub.name().to_string(),
        seed: cfg.seed,
        config_sha256: hash,
        config: cfg.clone(),
        results,
        files: em.files,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(out.join(SUMMARY_FILE), text)?;
    Ok(summary)
}

fn run_nonlocal(cfg: &Config, em: &mut Emitter) -> anyhow::Result<serde_json::Value> {
    let base = ProtocolConfig { mu_sig: cfg.nonlocal.mu_sig, ..cfg.protocol() };
    let rows = parity_curve(&base, &uniform_phases(cfg.nonlocal.phi_points)).context("parity sweep")?;
    let (h, u) = parity_visibilities(&rows)?;
    em.csv("parity.csv", |b| Ok(write_parity_csv(&rows, b)?))?;
    let herald = herald_probability_curve(&base, &cfg.nonlocal.herald_mu_grid).context("herald sweep")?;
    em.csv("herald.csv", |b| Ok(write_herald_csv(&herald, b)?))?;
    Ok(json!({
        "visibility_heralded": h.visibility,
        "visibility_unheralded": u.visibility,
        "phase_offset_heralded": h.phase_offset,
        "mean_success_heralded": rows.iter().map(|r| r.success_heralded).sum::<f64>() / rows.len() as f64,
    }))
}

fn run_timebin(cfg: &Config, em: &mut Emitter) -> anyhow::Result<serde_json::Value> {
    let base = ProtocolConfig { mu_sig: cfg.timebin.mu_sig, ..cfg.protocol() };
    let rows = timebin_curve(&base, &uniform_phases(cfg.timebin.theta_points)).context("time-bin sweep")?;
    let (h, u) = timebin_visibilities(&rows)?;
    em.csv("timebin.csv", |b| Ok(write_timebin_csv(&rows, b)?))?;
    Ok(json!({
        "visibility_heralded": h.visibility,
        "visibility_unheralded": u.visibility,
        "herald_probability": rows[0].herald_prob,
    }))
}

fn run_entangle(cfg: &Config, em: &mut Emitter) -> anyhow::Result<serde_json::Value> {
    let e = &cfg.entangle;
    let base = ProtocolConfig { delta_phi_e: e.delta_phi_e, error_detection: e.error_detection, ..cfg.protocol() };
    let rows = entanglement_curve(&base, &e.mu_ent_grid).context("entanglement sweep")?;
    em.csv("entanglement.csv", |b| Ok(write_entanglement_csv(&rows, b)?))?;
    let table = phase_jitter_penalty(&e.jitter_deltas)?;
    em.csv("jitter.csv", |b| Ok(write_jitter_csv(&table, b)?))?;
    let sigma = sigma_from_lock_visibility(e.lock_visibility)?;
    let mut rng = point_rng(cfg.seed, 0);
    let (gh, _) = jitter_average_fidelity(sigma, JitterMethod::GaussHermite { nodes: e.jitter_nodes }, &mut rng)?;
    let (mc, se) = jitter_average_fidelity(sigma, JitterMethod::MonteCarlo { samples: e.mc_samples }, &mut rng)?;
    let nuclear = run_nuclear_entanglement(&ProtocolConfig { mu_ent: e.nuclear_mu_ent, ..base }).context("nuclear entanglement")?;
    Ok(json!({
        "lock_coefficient": table.coefficient,
        "lock_f0": table.f0,
        "jitter_sigma": sigma,
        "jitter_fidelity_gauss_hermite": gh,
        "jitter_fidelity_monte_carlo": mc,
        "jitter_fidelity_monte_carlo_se": se,
        "nuclear_fidelity": nuclear.pair.fidelity,
        "nuclear_fidelity_unselected": nuclear.unselected.fidelity,
        "nuclear_herald_probability": nuclear.pair.herald_probability,
        "error_detect_discard_fraction": nuclear.error_detect_discard_fraction,
    }))
}

fn run_erasure_map(cfg: &Config, em: &mut Emitter) -> anyhow::Result<serde_json::Value> {
    let m = &cfg.erasure_map;
    let pmh = p_mh(cfg.noise.eps_mw, m.eta_herald, m.mu_sig)?;
    let lambda = (pmh + cfg.noise.eps_mw).min(1.0);
    let det = cfg.detector();
    let mut rows = erasure_performance_map(&m.alpha_grid, &det, Strategy::Strategy1, lambda).context("strategy 1 map")?;
    rows.extend(erasure_performance_map(&m.alpha_grid, &det, Strategy::Strategy2, lambda).context("strategy 2 map")?);
    em.csv("erasure_map.csv", |b| Ok(write_map_csv(&rows, b)?))?;
    let best = rows
        .iter()
        .filter(|r| r.strategy == Strategy::Strategy2)
        .max_by(|a, b| a.fidelity.total_cmp(&b.fidelity))
        .map(|r| r.alpha);
    Ok(json!({ "p_mh": pmh, "mixing_lambda": lambda, "strategy2_best_alpha": best }))
}

fn run_fisher(cfg: &Config, em: &mut Emitter) -> anyhow::Result<serde_json::Value> {
    let f = &cfg.fisher;
    let p = FisherParams { eta_erasure: f.eta_erasure, eta_herald: f.eta_herald, v_bar: f.v_bar, eps_mh: f.eps_mh };
    let rows = fisher_curves(&log_grid(f.mu_min, f.mu_max, f.points), &p)?;
    em.csv("fisher.csv", |b| Ok(write_fisher_csv(&rows, b)?))?;
    let crossover = if f.eta_herald > 0.0 { f.eps_mh / f.eta_herald } else { f64::INFINITY };
    Ok(json!({ "misherald_crossover_mu": crossover }))
}

fn run_schemes(cfg: &Config, em: &mut Emitter) -> anyhow::Result<serde_json::Value> {
    let s = &cfg.schemes;
    let steps = (s.l_max_km / s.l_step_km).floor() as usize;
    let grid: Vec<f64> = (0..=steps).map(|k| k as f64 * s.l_step_km).collect();
    let rows = scheme_sweep(&s.baseline, &grid)?;
    em.csv("schemes.csv", |b| Ok(write_scheme_csv(&rows, b)?))?;
    let mux = multiplex_resources(&s.baseline).ok();
    let budget = RateBudget::default();
    Ok(json!({
        "gain_max": gain_max(&s.baseline),
        "gain_at_l_max": rows.last().map(|r| r.gain),
        "kink_km": detect_kink(&rows),
        "kink_km_closed_form": s.baseline.kink_length(),
        "multiplexing": mux,
        "link_efficiency": budget.link_efficiency()?,
        "success_probability_mu_0_1": budget.success_probability(0.1)?,
        "success_probability_mu_1": budget.success_probability(1.0)?,
    }))
}

// ---------------------------------------------------------------------------
// Verification

/// Re-derives the config hash from the echoed config and checks it against
/// the summary, every CSV stamp and every recorded file digest.
pub fn verify_dir(dir: &Path) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(dir.join(SUMMARY_FILE)).with_context(|| format!("reading {}", dir.join(SUMMARY_FILE).display()))?;
    let summary: RunSummary = serde_json::from_str(&text).context("parsing summary")?;
    let sub = Subcommand::from_str(&summary.subcommand, false).map_err(|e| anyhow::anyhow!("summary subcommand: {e}"))?;
    let echo = fs::read_to_string(dir.join(CONFIG_ECHO_FILE)).context("reading config echo")?;
    let reparsed = validate_config(parse_config(&echo)?, sub)?;
    let derived = reparsed.hash();
    let mut checked = Vec::new();
    if derived != summary.config_sha256 || summary.config.hash() != derived {
        bail!("config hash mismatch: summary {} vs derived {derived}", summary.config_sha256);
    }
    let stamp = stamp_line(&derived, summary.seed);
    for f in &summary.files {
        let bytes = fs::read(dir.join(&f.name)).with_context(|| format!("reading {}", f.name))?;
        if !bytes.starts_with(stamp.as_bytes()) {
            bail!("{}: missing or stale config stamp", f.name);
        }
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != f.sha256 {
            bail!("{}: content digest {digest} does not match summary {}", f.name, f.sha256);
        }
        checked.push(f.name.clone());
    }
    Ok(checked)
}

// ---------------------------------------------------------------------------
// Entry point

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => parse_config(&fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?),
    }
}

/// Executes parsed arguments; returns the summary for run subcommands.
pub fn execute(args: &Args) -> anyhow::Result<Option<RunSummary>> {
    let sub = args.resolve()?;
    if sub == Subcommand::Verify {
        let files = verify_dir(&args.out)?;
        println!("verified {} file(s) in {}", files.len(), args.out.display());
        return Ok(None);
    }
    if args.workers == 0 {
        bail!("--workers must be at least 1");
    }
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let cfg = validate_config(cfg, sub)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.workers).build()?;
    let summary = pool.install(|| run_subcommand(sub, &cfg, &args.out))?;
    Ok(Some(summary))
}

pub fn main_with_args<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match execute(&args) {
        Ok(Some(s)) => {
            println!("{}", serde_json::to_string_pretty(&s.results).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
