use num_complex::Complex64;
use proptest::prelude::*;

use nlslab::config::{load_config, parse_config, save_config, RunConfig};
use nlslab::functionals::{mass, FrequencyTuple, Symbol};
use nlslab::resonance::{sp_threshold, threshold_polynomial};
use nlslab::sampler::{sample_mu_s, smooth_cutoff, EnsembleSpec};
use nlslab::spectral::{project, sobolev_norm, FourierState};

fn state(n: usize) -> impl Strategy<Value = FourierState> {
    prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2 * n + 1).prop_map(move |v| {
        FourierState::from_coeffs(n, v.into_iter().map(|(a, b)| Complex64::new(a, b)).collect()).unwrap()
    })
}

fn tuple(slots: usize) -> impl Strategy<Value = Vec<i64>> {
    prop::collection::vec(-30i64..=30, slots)
}

fn opt<T: std::fmt::Debug + Clone + 'static>(s: impl Strategy<Value = T> + 'static) -> BoxedStrategy<Option<T>> {
    prop::option::of(s).boxed()
}

prop_compose! {
    fn config()(
        p in opt(prop::sample::select(vec![5usize, 7, 9])),
        s in opt(1.0f64..1.5),
        n in opt(1usize..64),
        tol in opt(1e-14f64..1e-4),
        seed in opt(any::<u64>()),
        samples in opt(1usize..100_000),
        cutoff in opt(any::<bool>()),
        times in opt(prop::collection::vec(-2.0f64..2.0, 0..5)),
        modes in opt(prop::collection::vec(prop::sample::select(vec!["plain".to_string(), "cutoff".into(), "weighted".into()]), 0..3)),
        k in opt(1i64..40),
        output_dir in opt("[a-z]{1,8}"),
    ) -> RunConfig {
        RunConfig { p, s, n, tol, seed, samples, cutoff, times, modes, k, output_dir, ..Default::default() }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips_through_file(c in config()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        save_config(&c, &path).unwrap();
        prop_assert_eq!(load_config(&path).unwrap(), c.clone());
        prop_assert_eq!(parse_config(&c.to_toml().unwrap()).unwrap().hash(), c.hash());
    }

    #[test]
    fn binary_state_round_trips(u in state(6)) {
        let mut buf = Vec::new();
        u.write_binary(&mut buf).unwrap();
        prop_assert_eq!(buf.len(), 16 + 16 * 13);
        prop_assert_eq!(FourierState::read_binary(buf.as_slice()).unwrap(), u);
    }

    #[test]
    fn projection_is_idempotent_and_contracts_norms(u in state(8), n in 0usize..10, r in 0.0f64..2.0) {
        let once = project(&u, n);
        prop_assert_eq!(project(&once, n), once.clone());
        prop_assert!(sobolev_norm(&once, r) <= sobolev_norm(&u, r) * (1.0 + 1e-15));
        prop_assert!(mass(&once) <= mass(&u) * (1.0 + 1e-15));
    }

    #[test]
    fn psi_is_odd_under_slot_swap(k in tuple(6), s in 1.0f64..1.5) {
        let t = FrequencyTuple::new(k.clone());
        let mut swapped = k.clone();
        for pair in swapped.chunks_mut(2) {
            pair.swap(0, 1);
        }
        let u = FrequencyTuple::new(swapped);
        prop_assert_eq!(u.psi_with(Symbol::Bracket, s), -t.psi_with(Symbol::Bracket, s));
        prop_assert_eq!(u.omega(), -t.omega());
        prop_assert_eq!(u.linear_sum(), -t.linear_sum());
    }

    #[test]
    fn psi_vanishes_on_paired_magnitudes(k in tuple(3), signs in prop::collection::vec(any::<bool>(), 3), s in 1.0f64..1.5) {
        let mut full = Vec::new();
        for (a, flip) in k.iter().zip(signs) {
            full.push(*a);
            full.push(if flip { -*a } else { *a });
        }
        prop_assert_eq!(FrequencyTuple::new(full).psi(s), 0.0);
    }

    #[test]
    fn omega_matches_definition(k in tuple(6)) {
        let t = FrequencyTuple::new(k.clone());
        let direct: i64 = k.iter().enumerate().map(|(j, x)| if j % 2 == 0 { x * x } else { -x * x }).sum();
        prop_assert_eq!(t.omega(), direct);
    }

    #[test]
    fn threshold_equivalence_holds(p in prop::sample::select(vec![5usize, 7, 9, 11, 21, 99]), s in 1.0f64..1.5) {
        let sp = sp_threshold(p).unwrap();
        prop_assume!((s - sp).abs() > 1e-9);
        prop_assert_eq!(threshold_polynomial(p, s) < 2.0, s > sp);
    }

    #[test]
    fn cutoff_is_even_and_decreasing_in_magnitude(a in 0.0f64..2.0, b in 0.0f64..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (x, y) = (smooth_cutoff(lo), smooth_cutoff(hi));
        prop_assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
        prop_assert!(y <= x);
        prop_assert_eq!(smooth_cutoff(-a), smooth_cutoff(a));
    }

    #[test]
    fn samples_depend_only_on_seed_and_index(seed in any::<u64>(), i in 0usize..50) {
        let small = EnsembleSpec::new(seed, 50, 1.3, 4).unwrap();
        let large = EnsembleSpec::new(seed, 5000, 1.3, 4).unwrap();
        prop_assert_eq!(sample_mu_s(&small, i).unwrap(), sample_mu_s(&large, i).unwrap());
    }
}
