use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use proptest::prelude::*;
use qnet_interferometry::erasure::Strategy;
use qnet_interferometry::protocols::*;
use qnet_interferometry::spin_photon::{psi_minus_fidelity_closed_form, GateFlavor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn single_photon(flavor: GateFlavor) -> ProtocolConfig {
    ProtocolConfig { gate_flavor: flavor, source: SignalSource::SinglePhoton, erasure: ErasureMode::Ideal, ..Default::default() }
}

fn quarter_grid() -> Vec<f64> {
    (0..4).map(|k| k as f64 * FRAC_PI_2).collect()
}

#[test]
fn phase_flavor_doubles_visibility_and_herald_rate() {
    let a = run_nonlocal_sensing(&single_photon(GateFlavor::AmplitudeReflection)).unwrap();
    let p = run_nonlocal_sensing(&single_photon(GateFlavor::PhaseReflection)).unwrap();
    assert!((p.parity_heralded - 2.0 * a.parity_heralded).abs() < 1e-9);
    assert!((p.success_prob - 2.0 * a.success_prob).abs() < 1e-9);
    assert!((p.parity_heralded + 1.0).abs() < 1e-9);
    assert!((p.success_prob - 1.0).abs() < 1e-9);
}

#[test]
fn ideal_parity_follows_negative_cosine() {
    for phi in [0.0, 0.4, 1.3, PI, 4.0] {
        let r = run_nonlocal_sensing(&ProtocolConfig { phi, ..single_photon(GateFlavor::PhaseReflection) }).unwrap();
        assert!((r.parity_heralded + phi.cos()).abs() < 1e-9, "phi {phi}");
    }
}

#[test]
fn vacuum_never_heralds_with_perfect_pair() {
    for erasure in [ErasureMode::Ideal, ErasureMode::Detected] {
        let cfg = ProtocolConfig { mu_sig: 0.0, erasure, ..Default::default() };
        let r = run_nonlocal_sensing(&cfg).unwrap();
        assert!(r.herald_prob_upup <= 1e-12 && r.herald_prob_downdown <= 1e-12, "{erasure:?}");
        assert!(r.erasure_accepted > 0.0);
    }
}

#[test]
fn heralding_improves_visibility_and_fits_a_cosine() {
    for mu in [0.1, 0.5, 1.0] {
        let cfg = ProtocolConfig { mu_sig: mu, erasure: ErasureMode::Ideal, ..Default::default() };
        let rows = parity_curve(&cfg, &quarter_grid()).unwrap();
        let (h, u) = parity_visibilities(&rows).unwrap();
        assert!(h.visibility >= u.visibility, "mu {mu}: {} < {}", h.visibility, u.visibility);
        assert!(h.residual <= 1e-6 && u.residual <= 1e-6);
    }
}

#[test]
fn parity_curve_keeps_grid_order() {
    let phis = [0.3, 2.0, 1.0];
    let rows = parity_curve(&single_photon(GateFlavor::PhaseReflection), &phis).unwrap();
    let got: Vec<f64> = rows.iter().map(|r| r.phi).collect();
    assert_eq!(got, phis);
}

#[test]
fn noisy_run_accounts_for_all_probability() {
    let cfg = ProtocolConfig { mu_sig: 0.25, phi: 0.7, noise: NoiseModel::experimental(0.55), ..Default::default() };
    let r = run_nonlocal_sensing(&cfg).unwrap();
    let total: f64 = r.branch_log.iter().map(|b| b.weight).sum();
    assert!((total - 1.0).abs() < 1e-10, "total {total}");
    let [plus, minus, fail] = r.outcome_probabilities();
    assert!((plus + minus + fail - 1.0).abs() < 1e-12);
    assert!((plus + minus - r.success_prob).abs() < 1e-12);
    assert!((r.success_prob + r.discarded_weight + r.reject_weight - 1.0).abs() < 1e-10);
}

// Even-parity weight at μ = 0 for a Bell-diagonal pair: Φ components give
// even parity unless exactly one electron flips; Ψ components need one flip.
fn even_floor_oracle(w: [f64; 4], eps: f64) -> f64 {
    let w_phi = w[2] + w[3];
    (1.0 - w_phi) * 2.0 * eps * (1.0 - eps) + w_phi * ((1.0 - eps).powi(2) + eps * eps)
}

#[test]
fn mis_herald_floor_matches_bell_diagonal_oracle() {
    for (f, depol, eps) in [(0.9, 0.0, 0.0), (0.8, 0.0, 0.0), (0.9, 0.05, 0.0), (0.95, 0.0, 0.06), (0.85, 0.03, 0.04)] {
        let mut noise = NoiseModel::ideal(0.55);
        noise.bell_fidelity = f;
        noise.nuclear_depolarization = depol;
        noise.eps_mw = eps;
        let cfg = ProtocolConfig { mu_sig: 0.0, noise, erasure: ErasureMode::Ideal, ..Default::default() };
        let r = run_nonlocal_sensing(&cfg).unwrap();
        let oracle = even_floor_oracle(bell_diagonal_weights(f, depol), eps);
        assert!((r.success_prob - oracle).abs() < 1e-10, "F {f} p {depol} eps {eps}: {} vs {oracle}", r.success_prob);
    }
    assert!((even_floor_oracle(bell_diagonal_weights(0.91, 0.0), 0.0) - 2.0 * 0.09 / 3.0).abs() < 1e-15);
}

#[test]
fn electron_damping_biases_floor_towards_down_down() {
    let mut noise = NoiseModel::ideal(0.55);
    noise.bell_fidelity = 0.9;
    noise.electron_damping = 0.1;
    let cfg = ProtocolConfig { mu_sig: 0.0, noise, erasure: ErasureMode::Ideal, ..Default::default() };
    let r = run_nonlocal_sensing(&cfg).unwrap();
    assert!(r.herald_prob_downdown > r.herald_prob_upup);
}

#[test]
fn herald_probability_grows_with_signal() {
    let mut noise = NoiseModel::ideal(0.55);
    noise.bell_fidelity = 0.9;
    let cfg = ProtocolConfig { noise, erasure: ErasureMode::Ideal, ..Default::default() };
    let mus = [0.05, 0.1, 0.25, 0.5];
    let rows = herald_probability_curve(&cfg, &mus).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].p_upup > w[0].p_upup && w[1].p_downdown > w[0].p_downdown);
    }
}

#[test]
fn bell_weights_match_kraus_depolarization() {
    let paulis = |k: usize| -> DMatrix<C64> {
        let (o, z, i) = (C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 1.0));
        match k {
            0 => DMatrix::from_row_slice(2, 2, &[o, z, z, o]),
            1 => DMatrix::from_row_slice(2, 2, &[z, o, o, z]),
            2 => DMatrix::from_row_slice(2, 2, &[z, -i, i, z]),
            _ => DMatrix::from_row_slice(2, 2, &[o, z, z, -o]),
        }
    };
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let bell: [[f64; 4]; 4] = [[0.0, -h, h, 0.0], [0.0, h, h, 0.0], [h, 0.0, 0.0, -h], [h, 0.0, 0.0, h]];
    let (f, p) = (0.83, 0.12);
    let werner = [f, (1.0 - f) / 3.0, (1.0 - f) / 3.0, (1.0 - f) / 3.0];
    let mut rho = DMatrix::<C64>::zeros(4, 4);
    for (k, b) in bell.iter().enumerate() {
        let v = DMatrix::from_fn(4, 1, |i, _| C64::new(b[i], 0.0));
        rho += &v * v.adjoint() * C64::new(werner[k], 0.0);
    }
    for side in 0..2 {
        let mut next = &rho * C64::new(1.0 - 3.0 * p / 4.0, 0.0);
        for k in 1..4 {
            let op = if side == 0 { paulis(k).kronecker(&paulis(0)) } else { paulis(0).kronecker(&paulis(k)) };
            next += &op * &rho * op.adjoint() * C64::new(p / 4.0, 0.0);
        }
        rho = next;
    }
    let w = bell_diagonal_weights(f, p);
    for (k, b) in bell.iter().enumerate() {
        let v = DMatrix::from_fn(4, 1, |i, _| C64::new(b[i], 0.0));
        let overlap = (v.adjoint() * &rho * &v)[(0, 0)].re;
        assert!((overlap - w[k]).abs() < 1e-14, "state {k}");
    }
    let mixed = bell_diagonal_weights(1.0, 1.0);
    assert!(mixed.iter().all(|x| (x - 0.25).abs() < 1e-15));
}

#[test]
fn timebin_ideal_phase_gate_teleports_the_phase() {
    let cfg = single_photon(GateFlavor::PhaseReflection);
    let zero = run_timebin_sensing(&ProtocolConfig { phi: 0.0, ..cfg }).unwrap();
    let pi = run_timebin_sensing(&ProtocolConfig { phi: PI, ..cfg }).unwrap();
    assert!((zero.p_down_heralded - 1.0).abs() < 1e-9);
    assert!(pi.p_down_heralded.abs() < 1e-9);
    assert!((zero.herald_prob - 1.0).abs() < 1e-9);
    let amp = run_timebin_sensing(&single_photon(GateFlavor::AmplitudeReflection)).unwrap();
    assert!((amp.z_heralded - 0.5).abs() < 1e-9 && (amp.herald_prob - 0.5).abs() < 1e-9);
}

#[test]
fn timebin_nuclear_depolarization_scales_contrast() {
    let base = single_photon(GateFlavor::PhaseReflection);
    let mut noise = NoiseModel::ideal(0.55);
    noise.nuclear_depolarization = 0.1;
    let r = run_timebin_sensing(&ProtocolConfig { phi: 0.6, noise, ..base }).unwrap();
    assert!((r.z_heralded - 0.9 * 0.6f64.cos()).abs() < 1e-9);
}

#[test]
fn timebin_curve_visibility_ideal() {
    let rows = timebin_curve(&single_photon(GateFlavor::PhaseReflection), &quarter_grid()).unwrap();
    let (h, _) = timebin_visibilities(&rows).unwrap();
    assert!((h.visibility - 1.0).abs() < 1e-9 && h.residual < 1e-12);
}

#[test]
fn entanglement_fidelity_rises_as_pulse_weakens() {
    let run = |mu_ent| run_parallel_entanglement(&ProtocolConfig { mu_ent, ..Default::default() }).unwrap();
    let (a, b, c) = (run(1e-3), run(2e-3), run(0.1));
    assert!(a.fidelity > 0.999);
    assert!(c.fidelity < b.fidelity && b.fidelity < a.fidelity);
    assert!((b.herald_probability / a.herald_probability - 2.0).abs() < 0.01);
}

#[test]
fn entanglement_is_best_at_opposite_phase() {
    let f = |d| run_parallel_entanglement(&ProtocolConfig { mu_ent: 0.01, delta_phi_e: d, ..Default::default() }).unwrap().fidelity;
    assert!(f(PI) > f(PI - 0.3) && f(PI) > f(PI + 0.3));
    assert!(f(0.0) < f(FRAC_PI_2));
}

#[test]
fn error_detection_raises_nuclear_fidelity() {
    let mut noise = NoiseModel::ideal(0.55);
    noise.eps_mw = 0.05;
    let r = run_nuclear_entanglement(&ProtocolConfig { mu_ent: 0.05, noise, ..Default::default() }).unwrap();
    assert!(r.pair.fidelity > r.unselected.fidelity);
    assert!(r.error_detect_discard_fraction > 0.0);
    let clean = run_nuclear_entanglement(&ProtocolConfig { mu_ent: 0.05, ..Default::default() }).unwrap();
    assert!(clean.error_detect_discard_fraction < 1e-12);
    assert!((clean.pair.fidelity - clean.unselected.fidelity).abs() < 1e-12);
}

#[test]
fn gauss_hermite_integrates_normal_moments() {
    for n in [1usize, 4, 12, 24] {
        let rule = gauss_hermite_normal(n);
        assert_eq!(rule.len(), n);
        let mut double_factorial = 1.0;
        for k in 0..n {
            let m: f64 = rule.iter().map(|&(x, w)| w * x.powi(2 * k as i32)).sum();
            assert!((m - double_factorial).abs() <= 1e-9 * double_factorial, "n {n} k {k}");
            double_factorial *= (2 * k + 1) as f64;
        }
    }
}

#[test]
fn jitter_average_agrees_between_methods() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    assert!((jitter_average_fidelity(0.0, JitterMethod::GaussHermite { nodes: 8 }, &mut rng).unwrap().0 - 1.0).abs() < 1e-14);
    let sigma = sigma_from_lock_visibility(0.93).unwrap();
    assert!((sigma - 0.381).abs() < 1e-3);
    let (gh, _) = jitter_average_fidelity(sigma, JitterMethod::GaussHermite { nodes: 24 }, &mut rng).unwrap();
    let (mc, se) = jitter_average_fidelity(sigma, JitterMethod::MonteCarlo { samples: 100_000 }, &mut rng).unwrap();
    assert!((gh - mc).abs() <= 3.0 * se, "{gh} vs {mc} ± {se}");
    // F(π + δ) = 1 − 3δ²/4 + O(δ⁴).
    let s = 0.05;
    let (small, _) = jitter_average_fidelity(s, JitterMethod::GaussHermite { nodes: 24 }, &mut rng).unwrap();
    assert!((1.0 - small - 0.75 * s * s).abs() < 2.0 * s.powi(4));
}

#[test]
fn jitter_penalty_fit_recovers_small_angle_coefficient() {
    let deltas: Vec<f64> = (-5..=5).map(|k| k as f64 * 0.002).collect();
    let t = phase_jitter_penalty(&deltas).unwrap();
    assert!((t.f0 - 1.0).abs() < 1e-9);
    assert!((t.coefficient - 0.75).abs() < 1e-4);
    assert!(phase_jitter_penalty(&[0.1]).is_err());
}

#[test]
fn jitter_in_pipeline_matches_closed_form_average() {
    let sigma = 0.2;
    let cfg = ProtocolConfig { mu_ent: 1e-4, phase_jitter_sigma: sigma, jitter_nodes: 16, ..Default::default() };
    let r = run_parallel_entanglement(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (closed, _) = jitter_average_fidelity(sigma, JitterMethod::GaussHermite { nodes: 16 }, &mut rng).unwrap();
    assert!((r.fidelity - closed).abs() < 2e-3, "{} vs {closed}", r.fidelity);
}

#[test]
fn point_rng_streams_are_reproducible_and_distinct() {
    use rand::Rng;
    let a: u64 = point_rng(3, 1).gen();
    let b: u64 = point_rng(3, 1).gen();
    let c: u64 = point_rng(3, 2).gen();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn readout_flips_shrink_measured_fidelity() {
    assert_eq!(measured_fidelity(0.9, 0.0), 0.9);
    assert!((measured_fidelity(1.0, 0.5) - 0.25).abs() < 1e-15);
    assert!((measured_fidelity(0.8, 0.05) - (0.25 + 0.55 * 0.81)).abs() < 1e-15);
}

#[test]
fn invalid_configs_name_the_field() {
    let cfg = ProtocolConfig { mu_sig: -1.0, ..Default::default() };
    let err = run_nonlocal_sensing(&cfg).unwrap_err().to_string();
    assert!(err.contains("mu_sig"), "{err}");
    let mut noise = NoiseModel::ideal(0.55);
    noise.eps_mw = 0.7;
    let err = ProtocolConfig { noise, ..Default::default() }.validate().unwrap_err().to_string();
    assert!(err.contains("eps_mw"), "{err}");
    assert!(run_parallel_entanglement(&ProtocolConfig { mu_ent: 0.0, ..Default::default() }).is_err());
}

#[test]
fn csv_headers() {
    let mut buf = Vec::new();
    write_parity_csv(&[ParityRow { phi: 0.0, parity_heralded: 1.0, parity_unheralded: 0.5, success_heralded: 0.1, success_unheralded: 0.2 }], &mut buf)
        .unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next(), Some("phi,parity_heralded,parity_unheralded,success_heralded,success_unheralded"));
    assert_eq!(text.lines().count(), 2);

    let mut buf = Vec::new();
    write_herald_csv(&[], &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "mu_sig,p_upup,p_downdown\n");
    let mut buf = Vec::new();
    write_timebin_csv(&[], &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "theta,p_down_heralded,p_down_unheralded,herald_prob\n");
    let mut buf = Vec::new();
    write_entanglement_csv(&[], &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "mu_ent,herald_probability,fidelity\n");
    let mut buf = Vec::new();
    write_jitter_csv(&JitterTable { rows: vec![(0.0, 1.0)], f0: 1.0, coefficient: 0.75 }, &mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("delta,fidelity\n0.000000000,"));
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = ProtocolConfig { mu_sig: 0.5, strategy: Strategy::Strategy1, noise: NoiseModel::experimental(0.45), ..Default::default() };
    let text = toml::to_string(&cfg).unwrap();
    let back: ProtocolConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let partial: ProtocolConfig = toml::from_str("mu_sig = 0.3").unwrap();
    assert_eq!(partial, ProtocolConfig { mu_sig: 0.3, ..Default::default() });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bell_weights_form_a_distribution(f in 0.0..=1.0f64, p in 0.0..=1.0f64) {
        let w = bell_diagonal_weights(f, p);
        prop_assert!(w.iter().all(|x| *x >= -1e-15));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ideal_parity_is_negative_cosine(phi in -PI..PI) {
        let r = run_nonlocal_sensing(&ProtocolConfig { phi, ..single_photon(GateFlavor::PhaseReflection) }).unwrap();
        prop_assert!((r.parity_heralded + phi.cos()).abs() < 1e-9);
    }

    #[test]
    fn outcome_probabilities_are_a_distribution(mu in 0.0..1.5f64, phi in -PI..PI) {
        let cfg = ProtocolConfig { mu_sig: mu, phi, erasure: ErasureMode::Ideal, ..Default::default() };
        let p = run_nonlocal_sensing(&cfg).unwrap().outcome_probabilities();
        prop_assert!(p.iter().all(|x| (-1e-12..=1.0 + 1e-12).contains(x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn jitter_only_lowers_fidelity(sigma in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (f, _) = jitter_average_fidelity(sigma, JitterMethod::GaussHermite { nodes: 24 }, &mut rng).unwrap();
        prop_assert!(f <= 1.0 + 1e-12 && f >= psi_minus_fidelity_closed_form(PI) - 1e-12);
    }
}
