use std::collections::BTreeSet;

use fedrca_core::ekf::{FilterState, JacobianMode, LinearModel};
use fedrca_core::inference::{
    arl_metrics, calibrate_threshold, diagnose, episode_roots, fit_residual_stats, mahalanobis_sq, rca_metrics, Class,
    LookupTable,
};
use fedrca_core::linalg::{norm2, Mat};
use fedrca_core::neural::{Net, NetSpec};
use fedrca_core::privacy::{clip_grad, randomize_flag, rr_probability};
use fedrca_core::seeds::substream;
use fedrca_core::synthetic::{Episode, World, WorldConfig};
use proptest::prelude::*;
use rand::Rng;

fn class() -> impl Strategy<Value = Class> {
    prop_oneof![Just(Class::RootCause), Just(Class::Propagated), Just(Class::Nominal)]
}

fn table() -> impl Strategy<Value = LookupTable> {
    (class(), class(), class(), class()).prop_map(|(both, proprietary_only, augmented_only, neither)| LookupTable {
        both,
        proprietary_only,
        augmented_only,
        neither,
    })
}

fn episode(onset: usize, duration: usize, root: usize) -> Episode {
    Episode {
        onset,
        duration,
        root,
        shift: vec![0.0],
    }
}

/// Non-overlapping episodes inside `[0, n)`.
fn episodes(n: usize) -> impl Strategy<Value = Vec<Episode>> {
    prop::collection::vec((1usize..40, 1usize..20, 0usize..3), 0..6).prop_map(move |spec| {
        let mut out = Vec::new();
        let mut t = 0;
        for (gap, dur, root) in spec {
            if t + gap + dur > n {
                break;
            }
            out.push(episode(t + gap, dur, root));
            t += gap + dur;
        }
        out
    })
}

proptest! {
    #[test]
    fn mahalanobis_is_nonnegative(
        samples in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 3), 4..40),
        r in prop::collection::vec(-100.0..100.0f64, 3),
    ) {
        let stats = fit_residual_stats(&samples).unwrap();
        let d2 = mahalanobis_sq(&r, &stats).unwrap();
        prop_assert!(d2.is_finite() && d2 >= 0.0);
        prop_assert!(mahalanobis_sq(&stats.mean, &stats).unwrap() < 1e-9);
    }

    #[test]
    fn threshold_is_monotone_in_q(
        stream in prop::collection::vec(-1e3..1e3f64, 1..200),
        q1 in 0.01..100.0f64,
        q2 in 0.01..100.0f64,
    ) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let a = calibrate_threshold(&stream, lo).unwrap();
        let b = calibrate_threshold(&stream, hi).unwrap();
        prop_assert!(a <= b);
        prop_assert!(stream.contains(&a));
        // At most (100 − q)% of the calibration stream exceeds the threshold.
        let above = stream.iter().filter(|&&v| v > b).count() as f64;
        prop_assert!(above <= (1.0 - hi / 100.0) * stream.len() as f64 + 1e-9);
    }

    #[test]
    fn lookup_is_total_and_diagnosis_partitions(
        t in table(),
        flags in prop::collection::vec((any::<bool>(), any::<bool>()), 0..12),
    ) {
        let reports: Vec<_> = flags.iter().copied().map(Some).collect();
        let d = diagnose(&reports, &t).unwrap();
        prop_assert!(d.root_cause.is_disjoint(&d.propagated));
        for (m, &(zc, za)) in flags.iter().enumerate() {
            match t.classify(zc, za) {
                Class::RootCause => prop_assert!(d.root_cause.contains(&m)),
                Class::Propagated => prop_assert!(d.propagated.contains(&m)),
                Class::Nominal => prop_assert!(!d.root_cause.contains(&m) && !d.propagated.contains(&m)),
            }
        }
    }

    #[test]
    fn default_lookup_needs_the_proprietary_flag(za in any::<bool>()) {
        let t = LookupTable::default();
        prop_assert_eq!(t.classify(false, za), Class::Nominal);
        prop_assert_ne!(t.classify(true, za), Class::Nominal);
    }

    #[test]
    fn missing_report_is_an_error(
        flags in prop::collection::vec(prop::option::of((any::<bool>(), any::<bool>())), 1..8),
    ) {
        let r = diagnose(&flags, &LookupTable::default());
        prop_assert_eq!(r.is_err(), flags.iter().any(Option::is_none));
    }

    #[test]
    fn arl_counts_are_consistent(
        (alarms, eps) in (50usize..400).prop_flat_map(|n| (prop::collection::vec(prop::bool::weighted(0.05), n), episodes(n))),
        guard in 0usize..10,
    ) {
        let m = arl_metrics(&alarms, &eps, guard);
        prop_assert_eq!(m.episodes, eps.len());
        prop_assert!(m.detected <= m.episodes);
        prop_assert_eq!(m.arl1.is_some(), !eps.is_empty());
        if let Some(a0) = m.arl0 {
            prop_assert!(a0 >= 0.0 && a0 < alarms.len() as f64);
        }
        // Silencing every alarm can only lengthen both run lengths.
        let quiet = arl_metrics(&vec![false; alarms.len()], &eps, guard);
        prop_assert_eq!(quiet.detected, 0);
        if let (Some(a), Some(b)) = (m.arl0, quiet.arl0) {
            prop_assert!(b >= a);
        }
        if let (Some(a), Some(b)) = (m.arl1, quiet.arl1) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn rca_scores_are_bounded(
        rows in prop::collection::vec((prop::collection::btree_set(0usize..5, 0..4), 0usize..5), 1..30),
    ) {
        let (pred, truth): (Vec<BTreeSet<usize>>, Vec<usize>) = rows.into_iter().unzip();
        let r = rca_metrics(&pred, &truth).unwrap();
        for v in [r.precision, r.recall, r.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(r.true_positives + r.false_negatives, truth.len());
        let perfect: Vec<BTreeSet<usize>> = truth.iter().map(|&m| BTreeSet::from([m])).collect();
        prop_assert_eq!(rca_metrics(&perfect, &truth).unwrap().f1, 1.0);
    }

    #[test]
    fn vote_is_monotone_in_fraction(
        classes in prop::collection::vec(prop::collection::vec(class(), 60), 1..5),
        f1 in 0.0..1.0f64,
        f2 in 0.0..1.0f64,
    ) {
        let eps = vec![episode(5, 20, 0), episode(30, 25, 0)];
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let loose = episode_roots(&classes, &eps, lo);
        let strict = episode_roots(&classes, &eps, hi);
        for (l, s) in loose.iter().zip(&strict) {
            prop_assert!(s.is_subset(l));
        }
    }

    #[test]
    fn clipping_bounds_the_norm(g in prop::collection::vec(-1e3..1e3f64, 1..20), c in 1e-3..10.0f64) {
        let out = clip_grad(&g, c);
        prop_assert!(norm2(&out) <= c * (1.0 + 1e-12));
        if norm2(&g) <= c {
            prop_assert_eq!(out, g);
        }
    }

    #[test]
    fn rr_retention_matches_its_budget(eps in 1e-3..10.0f64) {
        let p = rr_probability(eps).unwrap();
        prop_assert!(p > 0.5 && p < 1.0);
        prop_assert!(((p / (1.0 - p)).ln() - eps).abs() < 1e-9 * eps.max(1.0));
    }

    #[test]
    fn randomized_flags_replay_from_the_seed(seed in any::<u64>(), p in 0.0..1.0f64) {
        let draw = || {
            let mut rng = substream(seed, "privacy", 0);
            (0..64).map(|i| randomize_flag(i % 3 == 0, p, &mut rng)).collect::<Vec<_>>()
        };
        prop_assert_eq!(draw(), draw());
        let mut a = substream(seed, "privacy", 0);
        let mut b = substream(seed, "privacy", 1);
        prop_assert_ne!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn kf_covariance_stays_symmetric_psd(
        a in prop::collection::vec(-0.9..0.9f64, 4),
        c in prop::collection::vec(-2.0..2.0f64, 2),
        ys in prop::collection::vec(-5.0..5.0f64, 1..60),
        q in 1e-4..1.0f64,
        r in 1e-4..1.0f64,
    ) {
        let model = LinearModel::new(Mat::from_vec(2, 2, a).unwrap(), Mat::from_vec(1, 2, c).unwrap());
        let mut f = FilterState::isotropic(vec![0.0; 2], 1, 1.0, q, r);
        for y in ys {
            f.step(&model, &[y], JacobianMode::Auto).unwrap();
            prop_assert!(f.p.asymmetry() < 1e-9);
            prop_assert!(f.p.min_sym_eigenvalue() > -1e-9);
            prop_assert!(f.x.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn net_flat_params_round_trip(seed in any::<u64>(), input in 1usize..6, hidden in 1usize..10, output in 1usize..4) {
        let spec = NetSpec::mlp(input, hidden, output);
        let net = Net::init(&spec, seed).unwrap();
        let flat = net.flat_params();
        prop_assert_eq!(flat.len(), net.param_count());
        let mut other = Net::zeros(&spec).unwrap();
        other.set_flat_params(&flat);
        let x = vec![0.5; input];
        prop_assert_eq!(net.forward(&x).unwrap().0, other.forward(&x).unwrap().0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn world_is_a_function_of_its_seed(seed in any::<u64>()) {
        let cfg = WorldConfig { seed, ..WorldConfig::default() };
        let a = World::build(&cfg).unwrap();
        let b = World::build(&cfg).unwrap();
        prop_assert_eq!(a.checksum(), b.checksum());
        let da = a.generate_split(300, "test", true).unwrap();
        let db = b.generate_split(300, "test", true).unwrap();
        prop_assert_eq!(&da, &db);
        prop_assert!(da.obs.iter().flatten().flatten().all(|v| v.is_finite()));
        for e in &da.episodes {
            prop_assert!(e.end() <= 300 && e.root < da.clients());
        }
        let other = World::build(&WorldConfig { seed: seed ^ 1, ..cfg }).unwrap();
        prop_assert_ne!(a.checksum(), other.checksum());
    }
}
