use std::collections::BTreeSet;

use proptest::prelude::*;
use surrogacy::data::{
    build_study_blocks, parse_dataset, within_study_covariance, write_dataset, CovarianceOptions,
    Dataset, Tracer, TrialContrast,
};
use surrogacy::mcmc::{derive_seed, quantile_sorted, summarize_values};
use surrogacy::model::{
    evaluate_criteria, regression_band, restrict_blocks, SurrogacySummary, VerdictLabel,
};
use surrogacy::scale::{centiloid_delta_from_suvr, suvr_delta_from_centiloid};

fn contrast() -> impl Strategy<Value = TrialContrast> {
    (
        -1.0..1.0f64,
        0.001..0.5f64,
        -3.0..3.0f64,
        0.01..1.0f64,
        proptest::option::of(-0.9..0.9f64),
        0usize..3,
    )
        .prop_map(|(y1, se1, y2, se2, rho, t)| {
            let mut c = TrialContrast::new("S", ["a", "b", "c"][t], "c", y1, se1, y2, se2);
            c.rho_within = rho;
            c
        })
}

/// Up to five studies of one to four contrasts each, ids made unique.
fn dataset() -> impl Strategy<Value = Dataset> {
    prop::collection::vec(prop::collection::vec(contrast(), 1..5), 1..6).prop_map(|studies| {
        let mut out = Vec::new();
        for (i, study) in studies.into_iter().enumerate() {
            for (k, mut c) in study.into_iter().enumerate() {
                c.study_id = format!("S{i}");
                c.contrast_id = format!("c{k}");
                out.push(c);
            }
        }
        Dataset::new(out)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_is_symmetric_with_se_diagonal(
        cs in prop::collection::vec(contrast(), 1..6),
        rho in -0.9..0.9f64,
        shared in 0.0..0.9f64,
    ) {
        let s = within_study_covariance(&cs, rho, shared);
        prop_assert_eq!(s.nrows(), 2 * cs.len());
        prop_assert!((&s - s.transpose()).abs().max() == 0.0);
        for (k, c) in cs.iter().enumerate() {
            prop_assert_eq!(s[(2 * k, 2 * k)], c.se1 * c.se1);
            prop_assert_eq!(s[(2 * k + 1, 2 * k + 1)], c.se2 * c.se2);
        }
    }

    #[test]
    fn repaired_blocks_are_positive_semidefinite(d in dataset()) {
        for b in build_study_blocks(&d, &CovarianceOptions::default()).unwrap() {
            let eig = b.sigma_within.clone().symmetric_eigen();
            prop_assert!(eig.eigenvalues.min() >= -1e-10);
            prop_assert_eq!(b.repaired, b.min_eigenvalue < -1e-10);
        }
    }

    #[test]
    fn keep_all_restriction_is_identity(d in dataset()) {
        let blocks = build_study_blocks(&d, &CovarianceOptions::default()).unwrap();
        prop_assert_eq!(restrict_blocks(&blocks, |_| true), blocks);
    }

    #[test]
    fn restriction_keeps_matching_contrasts_only(d in dataset()) {
        let blocks = build_study_blocks(&d, &CovarianceOptions::default()).unwrap();
        let sub = restrict_blocks(&blocks, |c| c.treatment == "a");
        let kept: usize = sub.iter().map(|b| b.len()).sum();
        prop_assert_eq!(kept, d.contrasts.iter().filter(|c| c.treatment == "a").count());
        for b in &sub {
            prop_assert!(!b.is_empty());
            prop_assert_eq!(b.sigma_within.nrows(), 2 * b.len());
        }
    }

    #[test]
    fn dataset_csv_round_trip(d in dataset()) {
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let back = parse_dataset(&buf[..]).unwrap();
        prop_assert_eq!(back.contrasts, d.contrasts);
    }

    #[test]
    fn quantiles_are_monotone_and_bounded(
        mut v in prop::collection::vec(-1e3..1e3f64, 1..200),
        p in 0.0..1.0f64,
        q in 0.0..1.0f64,
    ) {
        v.sort_by(f64::total_cmp);
        let (lo, hi) = (p.min(q), p.max(q));
        let (a, b) = (quantile_sorted(&v, lo), quantile_sorted(&v, hi));
        prop_assert!(a <= b);
        prop_assert!(v[0] <= a && b <= v[v.len() - 1]);
    }

    #[test]
    fn band_is_linear_in_x(
        draws in prop::collection::vec((-2.0..2.0f64, -3.0..3.0f64), 2..100),
        grid in prop::collection::vec(-5.0..5.0f64, 1..10),
    ) {
        let (l0, l1): (Vec<f64>, Vec<f64>) = draws.into_iter().unzip();
        let m0 = l0.iter().sum::<f64>() / l0.len() as f64;
        let m1 = l1.iter().sum::<f64>() / l1.len() as f64;
        for p in regression_band(&l0, &l1, &grid).unwrap() {
            prop_assert!((p.mean - (m0 + m1 * p.x)).abs() < 1e-9);
            prop_assert!(p.lo <= p.hi);
        }
    }

    #[test]
    fn scale_conversion_round_trips(d in -1.0..1.0f64, se in 0.0..0.5f64, which in 0usize..4) {
        let sets = [
            BTreeSet::from([Tracer::Florbetapir]),
            BTreeSet::from([Tracer::Florbetaben]),
            BTreeSet::from([Tracer::Flutemetamol]),
            BTreeSet::from([Tracer::Florbetapir, Tracer::Flutemetamol]),
        ];
        let (cl, cl_se) = centiloid_delta_from_suvr(&sets[which], d, se).unwrap();
        let (back, back_se) = suvr_delta_from_centiloid(&sets[which], cl, cl_se).unwrap();
        prop_assert!((back - d).abs() <= 1e-12);
        prop_assert!((back_se - se).abs() <= 1e-12);
    }

    #[test]
    fn slope_interval_through_zero_is_never_supported(
        slope in prop::collection::vec(-1.0..1.0f64, 20..60),
        psi2 in prop::collection::vec(0.0..0.1f64, 20..60),
    ) {
        let p = SurrogacySummary {
            lambda0: summarize_values("lambda0", &[0.0, 0.01, -0.01]),
            lambda1: summarize_values("lambda1", &slope),
            psi2: summarize_values("psi2", &psi2),
            lambda2: None,
        };
        let v = evaluate_criteria(&p, 0.05);
        prop_assert_eq!(v.label == VerdictLabel::NotSupported, p.lambda1.contains(0.0));
    }

    #[test]
    fn derived_seeds_differ_by_index(base in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
        prop_assume!(a != b);
        prop_assert_ne!(derive_seed(base, a), derive_seed(base, b));
    }
}
