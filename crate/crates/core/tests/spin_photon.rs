use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64 as C64;
use proptest::prelude::*;
use qnet_interferometry::hilbert::*;
use qnet_interferometry::spin_photon::*;

fn r(x: f64) -> C64 {
    C64::new(x, 0.0)
}

fn gate_register(cutoff: usize) -> Vec<ModeSpec> {
    vec![
        ModeSpec::bosonic("in", cutoff),
        ModeSpec::bosonic("refl", cutoff),
        ModeSpec::bosonic("lost", cutoff).in_environment(),
        ModeSpec::qubit("e"),
    ]
}

const AMP: Ports<'static> = Ports { input: "in", reflected: "refl", lost: Some("lost") };
const PHASE: Ports<'static> = Ports { input: "in", reflected: "refl", lost: None };

fn photon_plus(n: u8, cutoff: usize) -> HybridState {
    HybridState::from_amplitudes(gate_register(cutoff), [(vec![n, 0, 0, 0], r(1.0))])
        .unwrap()
        .apply_qubit_gate(&QubitGate::rot_y("e", PI / 2.0))
        .unwrap()
}

#[test]
fn amplitude_gate_single_photon() {
    let out = smspg(&photon_plus(1, 2), AMP, "e", GateFlavor::AmplitudeReflection).unwrap();
    assert!((out.amplitude(&[0, 1, 0, UP]) - r(FRAC_1_SQRT_2)).norm() < 1e-15);
    assert!((out.amplitude(&[0, 0, 1, DOWN]) - r(FRAC_1_SQRT_2)).norm() < 1e-15);
    assert_eq!(out.len(), 2);
    let rho = out.trace_out_dense(DENSE_CAP).unwrap();
    let p_reflected: f64 = rho
        .m
        .diagonal()
        .iter()
        .enumerate()
        .filter(|(i, _)| (i / 2) % 3 == 1)
        .map(|(_, x)| x.re)
        .sum();
    assert!((p_reflected - 0.5).abs() < 1e-15);
}

#[test]
fn vacuum_is_untouched_by_both_flavors() {
    let s = photon_plus(0, 2);
    let a = smspg(&s, AMP, "e", GateFlavor::AmplitudeReflection).unwrap();
    let p = smspg(&s, PHASE, "e", GateFlavor::PhaseReflection).unwrap();
    assert!((pure_fidelity(&a, &s).unwrap() - 1.0).abs() < 1e-15);
    assert!((pure_fidelity(&p, &s).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn phase_gate_maps_plus_to_minus() {
    let s = photon_plus(1, 2);
    let out = smspg(&s, PHASE, "e", GateFlavor::PhaseReflection).unwrap();
    assert!((out.amplitude(&[0, 1, 0, DOWN]) - r(FRAC_1_SQRT_2)).norm() < 1e-15);
    assert!((out.amplitude(&[0, 1, 0, UP]) - r(-FRAC_1_SQRT_2)).norm() < 1e-15);
    let moved_back = HybridState::from_amplitudes(gate_register(2), [(vec![0, 1, 0, DOWN], r(FRAC_1_SQRT_2)), (vec![0, 1, 0, UP], r(FRAC_1_SQRT_2))]).unwrap();
    assert!(out.inner(&moved_back).unwrap().norm() < 1e-15);

    let in_place = Ports { input: "refl", reflected: "refl", lost: None };
    let s = HybridState::from_amplitudes(gate_register(2), [(vec![0, 1, 0, UP], r(1.0))]).unwrap();
    let out = smspg(&s, in_place, "e", GateFlavor::PhaseReflection).unwrap();
    assert!((out.amplitude(&[0, 1, 0, UP]) - r(-1.0)).norm() < 1e-15);
}

#[test]
fn flavor_and_mode_mismatches_are_errors() {
    let s = photon_plus(1, 2);
    assert!(matches!(smspg(&s, PHASE, "e", GateFlavor::AmplitudeReflection), Err(GateError::FlavorMismatch(_))));
    assert!(matches!(smspg(&s, AMP, "e", GateFlavor::PhaseReflection), Err(GateError::FlavorMismatch(_))));
    let same = Ports { input: "in", reflected: "in", lost: Some("lost") };
    assert!(matches!(smspg(&s, same, "e", GateFlavor::AmplitudeReflection), Err(GateError::FlavorMismatch(_))));
    let sys_lost = Ports { input: "in", reflected: "lost", lost: Some("refl") };
    assert!(matches!(smspg(&s, sys_lost, "e", GateFlavor::AmplitudeReflection), Err(GateError::FlavorMismatch(_))));
    assert!(smspg(&s, AMP, "in", GateFlavor::AmplitudeReflection).is_err());
}

#[test]
fn contrast_splits_photons_binomially() {
    let n = 3u8;
    let r_down: f64 = 0.4;
    let s = HybridState::from_amplitudes(gate_register(3), [(vec![n, 0, 0, DOWN], r(1.0))]).unwrap();
    let out = Smspg { flavor: GateFlavor::AmplitudeReflection, r_down }.apply(&s, AMP, "e").unwrap();
    for k in 0..=n {
        let c = [1.0, 3.0, 3.0, 1.0][k as usize];
        let want = c * r_down.powi(2 * k as i32) * (1.0 - r_down * r_down).powi((n - k) as i32);
        assert!((out.amplitude(&[0, k, n - k, DOWN]).norm_sqr() - want).abs() < 1e-14);
    }
}

#[test]
fn smphone_noiseless_matches_declared_map() {
    let reg = vec![
        ModeSpec::bosonic("in", 1),
        ModeSpec::bosonic("refl", 1),
        ModeSpec::bosonic("lost", 1).in_environment(),
        ModeSpec::qubit("e"),
        ModeSpec::qubit("n"),
    ];
    let h = 0.5;
    let input = HybridState::from_amplitudes(
        reg.clone(),
        [
            (vec![0, 0, 0, UP, DOWN], r(h)),
            (vec![0, 0, 0, UP, UP], r(h)),
            (vec![1, 0, 0, UP, DOWN], r(h)),
            (vec![1, 0, 0, UP, UP], r(h)),
        ],
    )
    .unwrap();
    let out = smphone(&input, AMP, "e", "n").unwrap();
    let [down, _] = out.measure_qubit("e", MeasBasis::Z).unwrap();
    assert!(down.probability < 1e-15);
    // |↑⟩_e(|0⟩|+⟩_n + |1⟩|↓⟩_n/√2), written in the reflected mode with the
    // lost mode in vacuum.
    let target = HybridState::from_amplitudes(
        reg,
        [
            (vec![0, 0, 0, UP, DOWN], r(FRAC_1_SQRT_2)),
            (vec![0, 0, 0, UP, UP], r(FRAC_1_SQRT_2)),
            (vec![0, 1, 0, UP, DOWN], r(FRAC_1_SQRT_2)),
        ],
    )
    .unwrap();
    let kept = out.project_out("lost", 0).unwrap();
    let target = target.project_out("lost", 0).unwrap();
    assert!((pure_fidelity(&kept, &target).unwrap() - 1.0).abs() < 1e-12);
    assert!((kept.norm_sq() - 0.75).abs() < 1e-12);
}

#[test]
fn smphone_rejects_bad_inputs() {
    let reg = vec![
        ModeSpec::bosonic("in", 1),
        ModeSpec::bosonic("refl", 1),
        ModeSpec::bosonic("lost", 1).in_environment(),
        ModeSpec::qubit("e"),
        ModeSpec::qubit("n"),
    ];
    let wrong_e = HybridState::from_amplitudes(reg.clone(), [(vec![1, 0, 0, DOWN, DOWN], r(1.0))])
        .unwrap()
        .apply_qubit_gate(&QubitGate::rot_y("n", PI / 2.0))
        .unwrap();
    assert!(matches!(smphone(&wrong_e, AMP, "e", "n"), Err(GateError::Precondition(_))));
    let wrong_n = HybridState::from_amplitudes(reg, [(vec![1, 0, 0, UP, DOWN], r(1.0))]).unwrap();
    assert!(matches!(smphone(&wrong_n, AMP, "e", "n"), Err(GateError::Precondition(_))));
}

fn smphone_input() -> HybridState {
    let reg = vec![
        ModeSpec::bosonic("in", 1),
        ModeSpec::bosonic("refl", 1),
        ModeSpec::bosonic("lost", 1).in_environment(),
        ModeSpec::qubit("e"),
        ModeSpec::qubit("n"),
    ];
    HybridState::from_amplitudes(reg, [(vec![0, 0, 0, UP, DOWN], r(FRAC_1_SQRT_2)), (vec![1, 0, 0, UP, DOWN], r(FRAC_1_SQRT_2))])
        .unwrap()
        .apply_qubit_gate(&QubitGate::rot_y("n", PI / 2.0))
        .unwrap()
}

// Dense state over (refl, n) after tracing the lost mode and the electron.
fn photon_nucleus(m: &MixedState) -> DensityMatrix {
    m.trace_out_dense(DENSE_CAP).unwrap().partial_trace(&[1, 3]).unwrap().normalized()
}

#[test]
fn smphone_error_detection() {
    let ideal = MixedState::pure(smphone(&smphone_input(), AMP, "e", "n").unwrap());
    let zero = smphone_noisy(&MixedState::pure(smphone_input()), AMP, "e", "n", 0.0).unwrap();
    let [down, _] = zero.measure_qubit("e", MeasBasis::Z).unwrap();
    assert!(down.total_probability() < 1e-15);

    let noisy = smphone_noisy(&MixedState::pure(smphone_input()), AMP, "e", "n", 0.06).unwrap();
    let [down, up] = noisy.measure_qubit("e", MeasBasis::Z).unwrap();
    assert!(down.total_probability() > 0.0);
    assert!((down.total_probability() - 0.06).abs() < 1e-12);
    let reference = photon_nucleus(&ideal);
    let f_all = fidelity(&photon_nucleus(&noisy), &reference).unwrap();
    let f_sel = fidelity(&photon_nucleus(&up), &reference).unwrap();
    assert!(f_sel > f_all);
    assert!((f_sel - 1.0).abs() < 1e-9);
}

#[test]
fn entangling_projection_examples() {
    let at_pi = entangling_projection(PI);
    assert!((at_pi.fidelity_psi_minus() - 1.0).abs() < 1e-12);
    assert!((at_pi.herald_weight - 0.125).abs() < 1e-15);
    assert!(entangling_projection(0.0).fidelity_psi_minus() < 1e-15);
    let grid: Vec<f64> = (0..64).map(|k| 2.0 * PI * k as f64 / 64.0).collect();
    let min = grid.iter().copied().min_by(|a, b| {
        entangling_projection(*a).fidelity_psi_minus().partial_cmp(&entangling_projection(*b).fidelity_psi_minus()).unwrap()
    });
    assert_eq!(min, Some(0.0));
}

// Brute-force dual-rail run: one photon split over two rails with phase δφ_e
// on the right rail, SMSPG at each station, 50:50 recombination, click on
// the first output port.
fn dual_rail(delta_phi: f64) -> (DensityMatrix, f64) {
    let reg = vec![
        ModeSpec::bosonic("in_l", 1),
        ModeSpec::bosonic("in_r", 1),
        ModeSpec::bosonic("r_l", 1),
        ModeSpec::bosonic("r_r", 1),
        ModeSpec::bosonic("l_l", 1).in_environment(),
        ModeSpec::bosonic("l_r", 1).in_environment(),
        ModeSpec::qubit("e_l"),
        ModeSpec::qubit("e_r"),
    ];
    let s = HybridState::from_amplitudes(
        reg,
        [
            (vec![1, 0, 0, 0, 0, 0, 0, 0], r(FRAC_1_SQRT_2)),
            (vec![0, 1, 0, 0, 0, 0, 0, 0], C64::from_polar(FRAC_1_SQRT_2, delta_phi)),
        ],
    )
    .unwrap()
    .apply_gates(&[QubitGate::rot_y("e_l", PI / 2.0), QubitGate::rot_y("e_r", PI / 2.0)])
    .unwrap();
    let g = GateFlavor::AmplitudeReflection;
    let s = smspg(&s, Ports { input: "in_l", reflected: "r_l", lost: Some("l_l") }, "e_l", g).unwrap();
    let s = smspg(&s, Ports { input: "in_r", reflected: "r_r", lost: Some("l_r") }, "e_r", g).unwrap();
    let s = s.apply_beamsplitter("r_l", "r_r", 0.5, 0.0).unwrap();
    let click = s.measure_fock(&["r_l", "r_r"]).unwrap().into_iter().find(|o| o.counts == vec![1, 0]).unwrap();
    let rho = click.state.trace_out_dense(DENSE_CAP).unwrap();
    // system modes left: in_l, in_r, e_l, e_r
    let rho = rho.partial_trace(&[2, 3]).unwrap();
    (rho.normalized(), click.probability)
}

#[test]
fn closed_form_matches_photonic_simulation() {
    let delta = PI + 0.1;
    let (rho, p) = dual_rail(delta);
    let pair = entangling_projection(delta);
    let psi: Vec<C64> = pair.amplitudes.to_vec();
    let f_sim = overlap_with_pure(&rho, &[C64::default(), r(-FRAC_1_SQRT_2), r(FRAC_1_SQRT_2), C64::default()]).unwrap();
    assert!((f_sim - pair.fidelity_psi_minus()).abs() < 1e-9);
    assert!((f_sim - psi_minus_fidelity_closed_form(0.1)).abs() < 1e-9);
    assert!((overlap_with_pure(&rho, &psi).unwrap() - 1.0).abs() < 1e-9);
    assert!((p - pair.herald_weight).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn amplitude_gate_norm_accounting(n in 0..4u8, r_down in 0.0..1.0f64, theta in -3.2..3.2f64, phi in -3.2..3.2f64) {
        let s = HybridState::from_amplitudes(gate_register(3), [(vec![n, 0, 0, 0], r(1.0))])
            .unwrap()
            .apply_gates(&[QubitGate::rot_y("e", theta), QubitGate::rot_z("e", phi)])
            .unwrap();
        let out = Smspg { flavor: GateFlavor::AmplitudeReflection, r_down }.apply(&s, AMP, "e").unwrap();
        prop_assert!((out.norm_sq() - 1.0).abs() < 1e-12);
        let moved: f64 = out.amplitudes().map(|(b, a)| (b[1] + b[2]) as f64 * a.norm_sqr()).sum();
        prop_assert!((moved - n as f64).abs() < 1e-12);
        prop_assert!(out.amplitudes().all(|(b, _)| b[0] == 0));
    }

    #[test]
    fn phase_gate_is_cz(c0 in -1.0..1.0f64, c1 in -1.0..1.0f64, c2 in -1.0..1.0f64, c3 in -1.0..1.0f64) {
        let amps = [c0, c1, c2, c3];
        let norm: f64 = amps.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
        let in_place = Ports { input: "refl", reflected: "refl", lost: None };
        let entries: Vec<(Vec<u8>, C64)> = (0..4).map(|k| (vec![0, (k / 2) as u8, 0, (k % 2) as u8], r(amps[k] / norm))).collect();
        let s = HybridState::from_amplitudes(gate_register(1), entries).unwrap();
        let out = smspg(&s, in_place, "e", GateFlavor::PhaseReflection).unwrap();
        prop_assert!((out.norm_sq() - s.norm_sq()).abs() < 1e-15);
        let cz = [1.0, 1.0, 1.0, -1.0];
        for k in 0..4 {
            let b = vec![0, (k / 2) as u8, 0, (k % 2) as u8];
            prop_assert!((out.amplitude(&b) - s.amplitude(&b) * cz[k]).norm() < 1e-15);
        }
    }

    #[test]
    fn smphone_keeps_electron_up(a0 in -1.0..1.0f64, a1 in -1.0..1.0f64, ph in -3.2..3.2f64) {
        let reg = vec![
            ModeSpec::bosonic("in", 1),
            ModeSpec::bosonic("refl", 1),
            ModeSpec::bosonic("lost", 1).in_environment(),
            ModeSpec::qubit("e"),
            ModeSpec::qubit("n"),
        ];
        let s = HybridState::from_amplitudes(reg, [(vec![0, 0, 0, UP, DOWN], r(a0)), (vec![1, 0, 0, UP, DOWN], C64::from_polar(a1, ph))])
            .unwrap()
            .apply_qubit_gate(&QubitGate::rot_y("n", PI / 2.0))
            .unwrap();
        prop_assume!(s.norm_sq() > 1e-6);
        let out = smphone(&s.normalized(), AMP, "e", "n").unwrap();
        let [down, _] = out.measure_qubit("e", MeasBasis::Z).unwrap();
        prop_assert!(down.probability < 1e-12);
    }

    #[test]
    fn bell_fidelity_is_convention_independent(delta in 0.0..6.28f64, a in -3.2..3.2f64, b in -3.2..3.2f64, c in -3.2..3.2f64) {
        let pair = entangling_projection(delta);
        let rot = [QubitGate::rot_z("l", a), QubitGate::rot_y("l", b), QubitGate::rot_z("l", c),
                   QubitGate::rot_z("r", a), QubitGate::rot_y("r", b), QubitGate::rot_z("r", c)];
        let s = pair.to_state("l", "r").apply_gates(&rot).unwrap();
        let singlet = HybridState::from_amplitudes(
            vec![ModeSpec::qubit("l"), ModeSpec::qubit("r")],
            [(vec![UP, DOWN], r(FRAC_1_SQRT_2)), (vec![DOWN, UP], r(-FRAC_1_SQRT_2))],
        ).unwrap().apply_gates(&rot).unwrap();
        prop_assert!((pure_fidelity(&s, &singlet).unwrap() - pair.fidelity_psi_minus()).abs() < 1e-12);
    }

    #[test]
    fn closed_form_fidelity_tracks_projection(delta in -1.0..1.0f64) {
        let f = entangling_projection(PI + delta).fidelity_psi_minus();
        prop_assert!((f - psi_minus_fidelity_closed_form(delta)).abs() < 1e-12);
    }
}
