use stambridge::gradcheck::{gradcheck, relative_error, GradCheckConfig, REL_ERR_FLOOR};
use stambridge::ringing::{
    dirichlet_oracle, hard_mask, kept_bins, ringing_compare, soft_gate, Transient,
};
use stambridge::Error;

#[test]
fn every_parameter_passes_and_distillation_is_detached() {
    let report = gradcheck(&GradCheckConfig::default()).unwrap();
    let worst = report
        .params
        .iter()
        .map(|p| p.max_rel_err)
        .fold(0.0, f64::max);
    assert!(
        report.passed,
        "offenders {:?} (worst {worst:e})",
        report.offenders
    );
    assert!(report.params.len() > 40);
    assert_eq!(report.detach.bridge_max_abs, 0.0);
    assert!(report.detach.dead_aux_params.is_empty());
}

#[test]
fn a_one_percent_backward_error_is_caught() {
    let cfg = GradCheckConfig {
        fault: Some(("gelu", 1.01)),
        ..GradCheckConfig::default()
    };
    let report = gradcheck(&cfg).unwrap();
    assert!(!report.passed);
    assert!(!report.offenders.is_empty());
}

#[test]
fn relative_error_uses_the_floor_for_tiny_gradients() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    assert!((relative_error(0.0, 1e-9) - 1e-9 / REL_ERR_FLOOR).abs() < 1e-18);
}

#[test]
fn bad_gradcheck_settings_are_rejected() {
    let cfg = GradCheckConfig {
        step: 0.0,
        ..GradCheckConfig::default()
    };
    assert!(matches!(gradcheck(&cfg), Err(Error::Config(_))));
    let cfg = GradCheckConfig {
        batch: 8,
        n_classes: 4,
        ..GradCheckConfig::default()
    };
    assert!(matches!(gradcheck(&cfg), Err(Error::Config(_))));
}

#[test]
fn hard_mask_matches_the_dirichlet_closed_form() {
    for (t, pos, kf) in [
        (250, 125, 0.5),
        (64, 10, 0.25),
        (33, 20, 0.7),
        (250, 3, 0.1),
    ] {
        let keep = kept_bins(t, kf);
        let mut x = vec![0.0; t];
        x[pos] = 1.0;
        let got = hard_mask(&x, keep);
        let want = dirichlet_oracle(t, pos, keep);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "T={t} pos={pos}");
        }
    }
}

#[test]
fn hard_truncation_leaks_before_onset_and_soft_gating_does_not() {
    for tr in [Transient::Impulse, Transient::Burst] {
        let m = ringing_compare(250, 125, 0.5, tr).unwrap();
        // The burst mostly lies inside the kept band and leaks far less.
        let floor = if tr == Transient::Impulse { 1e-3 } else { 1e-6 };
        assert!(
            m.pre_onset_energy_hard > floor * m.total_energy_hard,
            "{tr:?}: {} of {}",
            m.pre_onset_energy_hard,
            m.total_energy_hard
        );
        assert_eq!(m.pre_onset_energy_soft, 0.0);
        assert!(m.total_energy_soft > 0.0);
        assert!(m.distortion_soft < 1e-12);
        assert!(m.distortion_hard > 0.0);
    }
}

#[test]
fn keeping_every_bin_is_the_identity() {
    let x = Transient::Burst.signal(128, 40);
    let y = hard_mask(&x, kept_bins(128, 1.0));
    for (a, b) in x.iter().zip(&y) {
        assert!((a - b).abs() < 1e-12);
    }
    let m = ringing_compare(128, 40, 1.0, Transient::Impulse).unwrap();
    assert!(m.pre_onset_energy_hard < 1e-24);
}

#[test]
fn soft_gate_only_rescales_channels() {
    let x = Transient::Impulse.signal(64, 30);
    let out = soft_gate(&x, 3, 4).unwrap();
    assert_eq!(out.len(), 3);
    for ch in &out {
        assert!(ch.iter().enumerate().all(|(i, &v)| (i == 30) == (v != 0.0)));
    }
}
