use proptest::prelude::*;
use qnet_interferometry::schemes::*;

fn fig() -> BaselineParams {
    BaselineParams::default()
}

// dB loss to the midpoint: 10^{−att·(L/2)/10}.
fn db_oracle(att: f64, l: f64) -> f64 {
    10f64.powf(-att * (l / 2.0) / 10.0)
}

#[test]
fn direct_detection_examples() {
    let p = fig();
    assert_eq!(p_direct(&p, 0.0).unwrap(), 1.0);
    assert!((p_direct(&p, 2.0 * p.l0() * 2f64.ln()).unwrap() - 0.5).abs() < 1e-15);
    assert!((p.l0() - 14.4764).abs() < 1e-4);
    assert!((p_direct(&p, 100.0).unwrap() - 0.0316228).abs() < 1e-6);
    assert!(p_direct(&p, -1.0).is_err());
}

#[test]
fn kbgl_examples() {
    let p = fig();
    assert!((p_kbgl(&p, 0.0).unwrap() - 1.0 / 1.001).abs() < 1e-15);
    assert!((p.kink_length() - 2.0 * p.l0() * 1000f64.ln()).abs() < 1e-12);
    assert!((p_kbgl(&p, p.kink_length()).unwrap() - 0.5).abs() < 1e-12);
    assert!((gain_kbgl(&p, 0.0).unwrap() - 1.0 / 1.001).abs() < 1e-15);
    assert_eq!(gain_max(&p), 1000.0);
    assert!((gain_kbgl(&p, 1000.0).unwrap() / 1000.0 - 1.0).abs() < 1e-6);
}

#[test]
fn kbgl_crosses_direct_once() {
    let p = fig();
    let grid: Vec<f64> = (0..=4000).map(|k| k as f64 * 0.1).collect();
    let mut sign_changes = 0;
    let mut prev = None;
    for &l in &grid {
        let d = p_kbgl(&p, l).unwrap() - p_direct(&p, l).unwrap();
        let s = d > 0.0;
        if let Some(ps) = prev {
            if ps != s {
                sign_changes += 1;
            }
        }
        prev = Some(s);
    }
    // At L = 0 direct detection wins by τ_ent0/(τ_meas + τ_ent0); KBGL wins beyond.
    assert_eq!(sign_changes, 1);
}

#[test]
fn gjc_parameterization() {
    let mut p = fig();
    for l in [0.0, 10.0, 100.0] {
        assert!((gjc_success(&p, l).unwrap() / p_direct(&p, l).unwrap() - 0.01).abs() < 1e-15);
    }
    p.source_duty = 1.0;
    assert_eq!(gjc_success(&p, 30.0).unwrap(), p_direct(&p, 30.0).unwrap());
    p.source_duty = 1.5;
    assert!(gjc_success(&p, 30.0).is_err());
}

#[test]
fn multiplexing_examples() {
    let r = multiplex_resources(&fig()).unwrap();
    assert_eq!(r, MultiplexResources { timebins: 1_000_000, qubits_per_node: 20, freq_windows: 1, freq_qubits: 0 });
    assert_eq!(address_qubits(32), 5);
    assert_eq!(address_qubits(33), 6);
    assert_eq!(address_qubits(1), 0);

    let wide = BaselineParams { delta_f_signal: 1e11, tau_meas: 1e-6, ..fig() };
    let r = multiplex_resources(&wide).unwrap();
    assert_eq!((r.timebins, r.freq_windows, r.freq_qubits), (100_000, 100, 7));

    let short = BaselineParams { tau_meas: 1e-7, ..fig() };
    assert!(multiplex_resources(&short).is_err());
}

#[test]
fn addresses() {
    assert_eq!(binary_timebin_address(19, 5).unwrap(), "10011");
    assert_eq!(binary_timebin_address(0, 5).unwrap(), "00000");
    assert!(matches!(binary_timebin_address(32, 5), Err(SchemesError::AddressOverflow { .. })));
    for i in 0..256u64 {
        assert_eq!(parse_timebin_address(&binary_timebin_address(i, 8).unwrap()).unwrap(), i);
    }
    assert!(parse_timebin_address("10a1").is_err());
}

#[test]
fn kink_detection_on_grid() {
    let p = fig();
    let step = 0.5;
    let grid: Vec<f64> = (0..=800).map(|k| k as f64 * step).collect();
    let rows = scheme_sweep(&p, &grid).unwrap();
    let kink = detect_kink(&rows).unwrap();
    assert!((kink - p.kink_length()).abs() <= step);
}

#[test]
fn scheme_csv_layout() {
    let rows = scheme_sweep(&fig(), &[0.0, 50.0]).unwrap();
    let mut buf = Vec::new();
    write_scheme_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next(), Some("L_km,p_direct,p_gjc,p_kbgl,gain"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn rate_budget_arithmetic() {
    let b = RateBudget::default();
    let link = b.link_efficiency().unwrap();
    assert!((link - 0.7 * 0.7 * 0.8 * 0.5 * 0.074 * 0.95).abs() < 1e-15);
    let lo = b.success_probability(0.1).unwrap();
    let hi = b.success_probability(1.0).unwrap();
    assert!((lo - 1.4e-4).abs() < 0.05e-4);
    assert!((hi - 1.4e-3).abs() < 0.05e-3);
    let (e, n) = b.rates(0.1).unwrap();
    assert!((e - 1.38).abs() < 0.01);
    assert!((n - 0.28).abs() < 0.01);
}

#[test]
fn error_rows_combine_multiplicatively() {
    let (e, n) = entanglement_error_rows();
    let ce = combined_error(&e).unwrap();
    let cn = combined_error(&n).unwrap();
    assert!((ce - (1.0 - 0.99 * 0.85 * 0.95)).abs() < 1e-15);
    assert!((cn - (1.0 - 0.97 * 0.85 * 0.95 * 0.95)).abs() < 1e-15);
    assert_eq!(combined_error(&[]).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn db_consistency(att in 0.05..1.0f64, l in 0.0..500.0f64) {
        let p = BaselineParams { attenuation_db_per_km: att, ..fig() };
        let a = p_direct(&p, l).unwrap();
        prop_assert!((a - db_oracle(att, l)).abs() <= 1e-12);
    }

    #[test]
    fn kbgl_near_one_while_entanglement_is_fast(l in 0.0..300.0f64) {
        let p = fig();
        let pk = p_kbgl(&p, l).unwrap();
        prop_assert!((pk - 1.0).abs() <= p.tau_ent(l) / p.tau_meas + 1e-15);
    }

    #[test]
    fn gain_monotone_and_bounded(l in 0.0..600.0f64, dl in 0.0..10.0f64, tm in 1e-3..10.0f64, t0 in 1e-6..1e-2f64) {
        let p = BaselineParams { tau_meas: tm, tau_ent0: t0, ..fig() };
        let a = gain_kbgl(&p, l).unwrap();
        let b = gain_kbgl(&p, l + dl).unwrap();
        prop_assert!(b >= a * (1.0 - 1e-14));
        prop_assert!(b <= gain_max(&p) + 1e-12 * gain_max(&p).max(1.0));
    }

    #[test]
    fn probabilities_in_unit_interval(l in 0.0..1000.0f64, att in 0.01..2.0f64, tm in 1e-4..10.0f64, t0 in 1e-7..1.0f64) {
        let p = BaselineParams { attenuation_db_per_km: att, tau_meas: tm, tau_ent0: t0, ..fig() };
        for x in [p_direct(&p, l).unwrap(), p_kbgl(&p, l).unwrap(), gjc_success(&p, l).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}
