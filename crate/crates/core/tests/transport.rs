use nlslab::sampler::{CutoffSpec, EnsembleSpec};
use nlslab::spectral::{japanese_bracket, ModelParams};
use nlslab::transport::{
    chaos_moment_check, default_cutoff_radius, default_tail_grid, kinetic_oracle_sd, tail_report, tail_samples,
    transport_battery, Observable, TransportMode, CHAOS_SLOPE_BOUND,
};

#[test]
fn short_time_battery_agrees_in_every_mode() {
    // Before the importance weights degenerate the three identities hold at the Monte Carlo level.
    let params = ModelParams::new(5, 1.3, 4).unwrap().with_tol(1e-8);
    let spec = EnsembleSpec::new(31, 2000, 1.3, 4).unwrap();
    let cut = CutoffSpec::new(default_cutoff_radius(&params, &spec).unwrap(), 4, 1.3).unwrap();
    let b = transport_battery(&params, &[0.0, 0.0005], &Observable::ALL, &TransportMode::ALL, &spec, Some(&cut)).unwrap();
    assert_eq!(b.reports.len(), 2 * 3 * 3);
    for r in &b.reports {
        if r.t == 0.0 {
            assert_eq!(r.z_score, 0.0);
        } else {
            assert!(r.z_score <= 3.0, "{} {} z={}", r.mode.id(), r.observable_id, r.z_score);
        }
    }
}

#[test]
fn linear_diagnostic_has_unit_density_and_small_z() {
    let params = ModelParams::new(5, 1.3, 4).unwrap().linear();
    let spec = EnsembleSpec::new(32, 2000, 1.3, 4).unwrap();
    let b = transport_battery(&params, &[0.5], &Observable::ALL, &[TransportMode::Plain], &spec, None).unwrap();
    assert!(b.samples.iter().all(|s| s.rows[0].log_g.abs() <= 1e-10));
    assert!(b.reports.iter().all(|r| r.z_score <= 3.0));
}

#[test]
fn transport_rejects_mismatched_ensemble() {
    let params = ModelParams::new(5, 1.3, 4).unwrap();
    let spec = EnsembleSpec::new(1, 10, 1.3, 6).unwrap();
    assert!(transport_battery(&params, &[0.1], &Observable::ALL, &[TransportMode::Plain], &spec, None).is_err());
    let spec = EnsembleSpec::new(1, 10, 1.3, 4).unwrap();
    assert!(transport_battery(&params, &[0.1], &Observable::ALL, &[TransportMode::Weighted], &spec, None).is_err());
}

#[test]
fn kinetic_oracle_matches_termwise_variance() {
    // Var(½ w (|g|² - 2)) = w² with Var|g|² = 4; both signs of n.
    let (s, n, m) = (1.3, 8usize, 64usize);
    let direct: f64 = (n as i64 + 1..=m as i64)
        .map(|k| {
            let w = (k * k) as f64 / japanese_bracket(k).powf(2.0 * s);
            2.0 * w * w
        })
        .sum::<f64>()
        .sqrt();
    assert!((kinetic_oracle_sd(s, n, m) - direct).abs() <= 1e-12 * direct);
}

#[test]
fn tail_slope_sign_is_stable_under_doubling_t() {
    let params = ModelParams::new(5, 1.3, 4).unwrap().with_tol(1e-8);
    let spec = EnsembleSpec::new(33, 1000, 1.3, 4).unwrap();
    let cut = CutoffSpec::new(default_cutoff_radius(&params, &spec).unwrap(), 4, 1.3).unwrap();
    let mut slopes = Vec::new();
    for t in [0.5, 1.0] {
        let samples = tail_samples(&params, t, &spec, Some(&cut)).unwrap();
        let grid = default_tail_grid(&samples, 8);
        let report = tail_report(samples, &grid, &params, t, &spec, Some(&cut)).unwrap();
        assert!(report.points.iter().all(|p| (0.0..=1.0).contains(&p.probability)));
        assert!(report.m_grid.windows(2).all(|w| w[0] < w[1]));
        slopes.push(report.slope.unwrap());
    }
    assert!(slopes.iter().all(|s| *s < 0.0), "{slopes:?}");
}

#[test]
fn quadratic_chaos_moments_grow_at_most_linearly() {
    let spec = EnsembleSpec::new(34, 20_000, 1.3, 16).unwrap();
    let r = chaos_moment_check(1.3, 16, &[2.0, 4.0, 6.0, 8.0], &spec).unwrap();
    assert_eq!(r.ratios[0], 1.0);
    assert!(r.ratios.windows(2).all(|w| w[1] >= w[0]));
    assert!(r.slope <= CHAOS_SLOPE_BOUND && r.passed, "slope {}", r.slope);
}
