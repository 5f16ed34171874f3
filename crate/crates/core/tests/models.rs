use surrogacy::crossval::{loo_metrics, loo_predict};
use surrogacy::data::{build_study_blocks, CovarianceOptions, Dataset, StudyBlock};
use surrogacy::mcmc::McmcSettings;
use surrogacy::model::{
    fit_hierarchical, fit_pooled, fit_subgroup, FitOptions, HierarchicalMode, ModelKind,
    PriorConfig, PsiPrior,
};
use surrogacy::simgen::{simulate_dataset, simulate_dataset_with_truth, SimDesign, TreatmentSpec};
use surrogacy::SurrogacyError;

fn blocks(d: &Dataset) -> Vec<StudyBlock> {
    build_study_blocks(d, &CovarianceOptions::default()).unwrap()
}

fn short(seed: u64) -> McmcSettings {
    McmcSettings {
        iterations: 4_000,
        burn_in: 2_000,
        thin: 1,
        chains: 2,
        seed,
        adapt_window: 50,
    }
}

fn three_treatments(seed: u64) -> Dataset {
    let design = SimDesign {
        treatments: ["a", "b", "c"].map(|t| TreatmentSpec::new(t, 1.0)).to_vec(),
        ..SimDesign::two_arm(24)
    };
    simulate_dataset(&design.with_seed(seed)).unwrap()
}

#[test]
fn shifting_final_effects_shifts_the_intercept() {
    let data = simulate_dataset(&SimDesign::reference_design().with_seed(3)).unwrap();
    let mut shifted = data.clone();
    for c in &mut shifted.contrasts {
        c.y2 += 1.0;
    }
    let s = short(9);
    let a = fit_pooled(&blocks(&data), &FitOptions::default(), &s).unwrap();
    let b = fit_pooled(&blocks(&shifted), &FitOptions::default(), &s).unwrap();
    let (a0, b0) = (a.summary("lambda0").unwrap(), b.summary("lambda0").unwrap());
    let ess = a.diagnostics.get("lambda0").unwrap().ess;
    assert!(
        (b0.mean - a0.mean - 1.0).abs() < 4.0 * a0.sd * (2.0 / ess).sqrt(),
        "{} vs {}",
        a0.mean,
        b0.mean
    );
    let (a1, b1) = (a.summary("lambda1").unwrap(), b.summary("lambda1").unwrap());
    assert!((a1.mean - b1.mean).abs() < 4.0 * a1.sd * (2.0 / ess).sqrt());
}

#[test]
fn larger_fixed_psi_widens_predictions() {
    let data = simulate_dataset(&SimDesign::reference_design().with_seed(4)).unwrap();
    let widths: Vec<f64> = [0.01, 0.5]
        .iter()
        .map(|&value| {
            let opts = FitOptions {
                priors: PriorConfig {
                    psi: PsiPrior::Fixed { value },
                    ..PriorConfig::default()
                },
                ..FitOptions::default()
            };
            let recs = loo_predict(&blocks(&data), ModelKind::Pooled, &opts, &short(2)).unwrap();
            loo_metrics(&recs).unwrap().width_ratio
        })
        .collect();
    assert!(widths[1] > widths[0], "{widths:?}");
}

#[test]
fn tight_hyper_sd_collapses_to_pooled() {
    let data = three_treatments(5);
    let b = blocks(&data);
    let opts = FitOptions {
        priors: PriorConfig {
            hyper_sd_scale: 1e-4,
            psi: PsiPrior::Uniform { upper: 2.0 },
            psi_structure: surrogacy::model::PsiStructure::Common,
            ..PriorConfig::default()
        },
        ..FitOptions::default()
    };
    let s = short(6);
    let pooled = fit_pooled(&b, &opts, &s).unwrap();
    let hier = fit_hierarchical(&b, HierarchicalMode::Full, &opts, &s).unwrap();
    let p1 = pooled.summary("lambda1").unwrap();
    for t in &hier.treatments {
        let h = hier.treatment_parameters(t).unwrap();
        assert!(
            (h.lambda1.mean - p1.mean).abs() < 0.25 * p1.sd,
            "{t}: {} vs {}",
            h.lambda1.mean,
            p1.mean
        );
        assert!((h.lambda1.sd / p1.sd - 1.0).abs() < 0.2);
    }
}

#[test]
fn hierarchical_intervals_are_narrower_than_subgroup() {
    let data = three_treatments(7);
    let b = blocks(&data);
    let s = short(8);
    let opts = FitOptions::default();
    let hier = fit_hierarchical(&b, HierarchicalMode::Full, &opts, &s).unwrap();
    for t in ["a", "b", "c"] {
        let sub = fit_subgroup(&b, t, &opts, &s)
            .unwrap()
            .parameters()
            .unwrap();
        let h = hier.treatment_parameters(t).unwrap();
        assert!(h.lambda1.width() < sub.lambda1.width(), "{t}");
    }
}

#[test]
fn partial_model_reports_mixture_weights() {
    let data = three_treatments(10);
    let hier = fit_hierarchical(
        &blocks(&data),
        HierarchicalMode::Partial,
        &FitOptions::default(),
        &short(1),
    )
    .unwrap();
    let w = hier.mixture_weights();
    assert_eq!(w.len(), 3);
    for m in &w {
        assert!((0.0..=1.0).contains(&m.membership));
        assert!((0.0..=1.0).contains(&m.weight_mean));
    }
    let mean = hier.mean_mixture_weight().unwrap();
    assert!((0.0..=1.0).contains(&mean));
}

#[test]
fn generator_reproduces_design_moments() {
    let design = SimDesign {
        lambda0: 0.1,
        lambda1: 1.4,
        psi2: 0.04,
        delta1_mean: -0.2,
        delta1_sd: 0.1,
        ..SimDesign::two_arm(4000)
    };
    let (data, truth) = simulate_dataset_with_truth(&design.with_seed(2)).unwrap();
    let n = truth.delta1.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
    };
    assert!((mean(&truth.delta1) + 0.2).abs() < 4.0 * 0.1 / n.sqrt());
    assert!((var(&truth.delta1) / 0.01 - 1.0).abs() < 0.1);

    let resid: Vec<f64> = truth
        .delta1
        .iter()
        .zip(&truth.delta2)
        .map(|(d1, d2)| d2 - 0.1 - 1.4 * d1)
        .collect();
    assert!(mean(&resid).abs() < 4.0 * 0.2 / n.sqrt());
    assert!((var(&resid) / 0.04 - 1.0).abs() < 0.1);

    let z: Vec<f64> = data
        .contrasts
        .iter()
        .zip(&truth.delta2)
        .map(|(c, d2)| (c.y2 - d2) / c.se2)
        .collect();
    assert!((var(&z) - 1.0).abs() < 0.1);
}

#[test]
fn same_seed_same_draws() {
    let data = simulate_dataset(&SimDesign::two_arm(8).with_seed(1)).unwrap();
    let a = fit_pooled(&blocks(&data), &FitOptions::default(), &short(3)).unwrap();
    let b = fit_pooled(&blocks(&data), &FitOptions::default(), &short(3)).unwrap();
    let c = fit_pooled(&blocks(&data), &FitOptions::default(), &short(4)).unwrap();
    assert_eq!(a.chains, b.chains);
    assert_ne!(a.chains[0].draws, c.chains[0].draws);
}

#[test]
fn data_errors_are_reported() {
    let data = simulate_dataset(&SimDesign::two_arm(6).with_seed(1)).unwrap();
    let two = data.filter(|c| c.study_id.as_str() <= "SIM002");
    assert_eq!(two.len(), 2);
    let err = fit_pooled(&blocks(&two), &FitOptions::default(), &short(1)).unwrap_err();
    assert!(matches!(err, SurrogacyError::InsufficientData(_)));

    let b = blocks(&data);
    let err = fit_hierarchical(
        &b,
        HierarchicalMode::Full,
        &FitOptions::default(),
        &short(1),
    )
    .unwrap_err();
    assert!(matches!(err, SurrogacyError::SingleTreatment(_)));
    let err = fit_subgroup(&b, "nope", &FitOptions::default(), &short(1)).unwrap_err();
    assert!(matches!(err, SurrogacyError::UnknownTreatment(_)));
    let err = loo_predict(&b, ModelKind::Subgroup, &FitOptions::default(), &short(1)).unwrap_err();
    assert!(matches!(err, SurrogacyError::InvalidConfig(_)));
}
