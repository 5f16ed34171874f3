//! Synthetic datasets with known surrogacy parameters, and simulation-based
//! calibration of the pooled model.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::{
    build_study_blocks, within_study_covariance, CovarianceOptions, Dataset, TrialContrast,
};
use crate::error::{Result, SurrogacyError};
use crate::linalg::psd_factor;
use crate::mcmc::{derive_seed, pooled_column, quantile_sorted, ChainRng, McmcSettings};
use crate::model::{fit_pooled, FitOptions, ModelKind, PriorConfig, PsiPrior};

/// Number of arms (placebo included) of each simulated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArmLayout {
    /// One entry per study.
    Explicit { arms: Vec<usize> },
    /// Relative frequencies of 2, 3, 4, 5 and 6 arms.
    Random { weights: [f64; 5] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentSpec {
    pub name: String,
    /// Relative share of all contrasts given to this treatment.
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default)]
    pub lambda0_offset: f64,
    #[serde(default)]
    pub lambda1_offset: f64,
}

fn one() -> f64 {
    1.0
}

impl TreatmentSpec {
    pub fn new(name: impl Into<String>, weight: f64) -> Self {
        TreatmentSpec {
            name: name.into(),
            weight,
            lambda0_offset: 0.0,
            lambda1_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimDesign {
    pub n_studies: usize,
    pub arms: ArmLayout,
    pub lambda0: f64,
    pub lambda1: f64,
    pub psi2: f64,
    pub delta1_mean: f64,
    pub delta1_sd: f64,
    /// Uniform range of surrogate standard errors.
    pub se1: [f64; 2],
    /// Uniform range of final-outcome standard errors.
    pub se2: [f64; 2],
    pub rho_within: f64,
    pub shared_control_rho: f64,
    pub treatments: Vec<TreatmentSpec>,
    pub seed: u64,
}

impl Default for SimDesign {
    fn default() -> Self {
        SimDesign::reference_design()
    }
}

impl SimDesign {
    /// 23 studies: 14 two-arm, 6 three-arm, 1 four-arm and 2 six-arm
    /// (39 contrasts), one treatment.
    pub fn reference_design() -> Self {
        let mut arms = vec![2; 14];
        arms.extend([3; 6]);
        arms.push(4);
        arms.extend([6; 2]);
        SimDesign {
            n_studies: arms.len(),
            arms: ArmLayout::Explicit { arms },
            lambda0: 0.0,
            lambda1: 1.4,
            psi2: 0.02,
            delta1_mean: -0.15,
            delta1_sd: 0.1,
            se1: [0.01, 0.03],
            se2: [0.1, 0.3],
            rho_within: 0.0,
            shared_control_rho: 0.5,
            treatments: vec![TreatmentSpec::new("drug", 1.0)],
            seed: 1,
        }
    }

    /// `n` two-arm studies.
    pub fn two_arm(n: usize) -> Self {
        SimDesign {
            n_studies: n,
            arms: ArmLayout::Explicit { arms: vec![2; n] },
            ..SimDesign::reference_design()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SurrogacyError::InvalidDesign(m));
        if self.n_studies < 3 {
            return bad(format!("n_studies = {} (at least 3)", self.n_studies));
        }
        match &self.arms {
            ArmLayout::Explicit { arms } => {
                if arms.len() != self.n_studies {
                    return bad(format!(
                        "{} arm counts for {} studies",
                        arms.len(),
                        self.n_studies
                    ));
                }
                if let Some(a) = arms.iter().find(|a| !(2..=6).contains(*a)) {
                    return bad(format!("{a} arms (allowed 2..=6)"));
                }
            }
            ArmLayout::Random { weights } => {
                if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
                    return bad("arm weights must be non-negative, not all zero".into());
                }
            }
        }
        for (name, v) in [
            ("psi2", self.psi2),
            ("delta1_sd", self.delta1_sd),
            ("se1 lower", self.se1[0]),
            ("se2 lower", self.se2[0]),
        ] {
            if !(v >= 0.0) {
                return bad(format!("{name} = {v} must be non-negative"));
            }
        }
        if !(self.se1[1] >= self.se1[0]) || !(self.se2[1] >= self.se2[0]) {
            return bad("standard-error ranges must be ordered".into());
        }
        if !self.lambda0.is_finite() || !self.lambda1.is_finite() || !self.delta1_mean.is_finite() {
            return bad("regression parameters must be finite".into());
        }
        for (name, r) in [
            ("rho_within", self.rho_within),
            ("shared_control_rho", self.shared_control_rho),
        ] {
            if !(r > -1.0 && r < 1.0) {
                return bad(format!("{name} = {r} must lie in (-1, 1)"));
            }
        }
        if self.treatments.is_empty() {
            return bad("no treatments".into());
        }
        if self.treatments.iter().any(|t| !(t.weight > 0.0)) {
            return bad("treatment weights must be positive".into());
        }
        Ok(())
    }

    fn arm_counts(&self, rng: &mut ChainRng) -> Vec<usize> {
        match &self.arms {
            ArmLayout::Explicit { arms } => arms.clone(),
            ArmLayout::Random { weights } => {
                let w = WeightedIndex::new(weights).expect("validated weights");
                (0..self.n_studies).map(|_| 2 + w.sample(rng)).collect()
            }
        }
    }

    /// Largest-remainder allocation of `n` contrasts to treatments.
    fn allocation(&self, n: usize) -> Vec<usize> {
        let total: f64 = self.treatments.iter().map(|t| t.weight).sum();
        let exact: Vec<f64> = self
            .treatments
            .iter()
            .map(|t| n as f64 * t.weight / total)
            .collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let short = n - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        counts
    }
}

/// True latent effects behind a simulated dataset, in contrast order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub delta1: Vec<f64>,
    pub delta2: Vec<f64>,
}

pub fn simulate_dataset(d: &SimDesign) -> Result<Dataset> {
    simulate_dataset_with_truth(d).map(|(data, _)| data)
}

pub fn simulate_dataset_with_truth(d: &SimDesign) -> Result<(Dataset, SimTruth)> {
    d.validate()?;
    let mut rng = ChainRng::seed_from_u64(d.seed);
    let arms = d.arm_counts(&mut rng);
    let n_contrasts: usize = arms.iter().map(|a| a - 1).sum();
    let mut assignment: Vec<usize> = d
        .allocation(n_contrasts)
        .into_iter()
        .enumerate()
        .flat_map(|(t, n)| std::iter::repeat_n(t, n))
        .collect();
    assignment.shuffle(&mut rng);

    let psi = d.psi2.sqrt();
    let mut contrasts = Vec::with_capacity(n_contrasts);
    let mut truth = SimTruth {
        delta1: Vec::with_capacity(n_contrasts),
        delta2: Vec::with_capacity(n_contrasts),
    };
    let mut next = 0;
    for (s, &k) in arms.iter().enumerate() {
        let study_id = format!("SIM{:03}", s + 1);
        let mut study = Vec::new();
        let mut means = Vec::new();
        for c in 0..k - 1 {
            let spec = &d.treatments[assignment[next]];
            next += 1;
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let delta1 = d.delta1_mean + d.delta1_sd * z1;
            let delta2 = d.lambda0
                + spec.lambda0_offset
                + (d.lambda1 + spec.lambda1_offset) * delta1
                + psi * z2;
            let se1 = rng.random_range(d.se1[0]..=d.se1[1]);
            let se2 = rng.random_range(d.se2[0]..=d.se2[1]);
            let mut tc = TrialContrast::new(
                study_id.clone(),
                spec.name.clone(),
                format!("c{}", c + 1),
                delta1,
                se1,
                delta2,
                se2,
            );
            tc.rho_within = Some(d.rho_within);
            tc.n_final = 200;
            study.push(tc);
            means.extend([delta1, delta2]);
            truth.delta1.push(delta1);
            truth.delta2.push(delta2);
        }
        let sigma = within_study_covariance(&study, d.rho_within, d.shared_control_rho);
        let l = psd_factor(&sigma);
        let z: Vec<f64> = (0..sigma.nrows())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let noise = l * nalgebra::DVector::from_vec(z);
        for (i, tc) in study.iter_mut().enumerate() {
            tc.y1 = means[2 * i] + noise[2 * i];
            tc.y2 = means[2 * i + 1] + noise[2 * i + 1];
        }
        contrasts.extend(study);
    }
    let mut data = Dataset::new(contrasts);
    data.provenance = format!("simulated (seed {})", d.seed);
    Ok((data, truth))
}

/// Surrogacy parameters drawn from the priors of a [`PriorConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthParameters {
    pub lambda0: f64,
    pub lambda1: f64,
    pub psi2: f64,
}

pub fn draw_prior_truth(priors: &PriorConfig, rng: &mut impl Rng) -> TruthParameters {
    let normal = |rng: &mut dyn rand::RngCore, m: f64, s: f64| {
        let z: f64 = StandardNormal.sample(rng);
        m + s * z
    };
    let lambda0 = normal(rng, priors.intercept.mean, priors.intercept.sd);
    let lambda1 = normal(rng, priors.slope.mean, priors.slope.sd);
    let psi = match priors.psi {
        PsiPrior::Uniform { upper } => rng.random_range(0.0..upper),
        PsiPrior::HalfNormal { scale } => normal(rng, 0.0, scale).abs(),
        PsiPrior::GammaPrecision { shape, rate } => {
            let tau = Gamma::new(shape, 1.0 / rate)
                .expect("positive gamma parameters")
                .sample(rng);
            1.0 / tau.sqrt()
        }
        PsiPrior::Fixed { value } => value,
    };
    TruthParameters {
        lambda0,
        lambda1,
        psi2: psi * psi,
    }
}

impl SimDesign {
    /// Copy generating from `truth`, with true surrogate effects drawn from
    /// the δ1 prior and every treatment sharing one relationship.
    pub fn matched_to(&self, truth: &TruthParameters, priors: &PriorConfig) -> SimDesign {
        SimDesign {
            lambda0: truth.lambda0,
            lambda1: truth.lambda1,
            psi2: truth.psi2,
            delta1_mean: priors.delta1.mean,
            delta1_sd: priors.delta1.sd,
            treatments: self
                .treatments
                .iter()
                .map(|t| TreatmentSpec {
                    lambda0_offset: 0.0,
                    lambda1_offset: 0.0,
                    ..t.clone()
                })
                .collect(),
            ..self.clone()
        }
    }
}

/// Draws kept per replicate when ranking the truth.
pub const SBC_RANK_DRAWS: usize = 99;
pub const SBC_BINS: usize = 10;
/// Fewest replicates for which the uniformity test is reported.
pub const SBC_MIN_REPS_FOR_TEST: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcParameter {
    pub name: String,
    /// Rank of the truth among the thinned draws, `0..=SBC_RANK_DRAWS`.
    pub ranks: Vec<usize>,
    pub histogram: Vec<usize>,
    /// Fraction of replicates whose 95% CrI covers the truth.
    pub coverage: f64,
    pub chi_square: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcReport {
    pub reps: usize,
    pub rank_draws: usize,
    pub bins: usize,
    pub parameters: Vec<SbcParameter>,
}

impl SbcReport {
    pub fn get(&self, name: &str) -> Option<&SbcParameter> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

struct RepOutcome {
    ranks: [usize; 3],
    covered: [bool; 3],
}

fn one_replicate(
    design: &SimDesign,
    opts: &FitOptions,
    s: &McmcSettings,
    rep: usize,
) -> Result<RepOutcome> {
    let mut rng = ChainRng::seed_from_u64(derive_seed(s.seed, 2 * rep as u64));
    let truth = draw_prior_truth(&opts.priors, &mut rng);
    let d = design
        .matched_to(&truth, &opts.priors)
        .with_seed(rng.random());
    let data = simulate_dataset(&d)?;
    let blocks = build_study_blocks(
        &data,
        &CovarianceOptions {
            default_rho: d.rho_within,
            shared_control_rho: d.shared_control_rho,
            repair_psd: true,
        },
    )?;
    let settings = s.with_seed(derive_seed(s.seed, 2 * rep as u64 + 1));
    let post = fit_pooled(&blocks, opts, &settings)?;
    let mut ranks = [0; 3];
    let mut covered = [false; 3];
    for (k, (name, value)) in [
        ("lambda0", truth.lambda0),
        ("lambda1", truth.lambda1),
        ("psi2", truth.psi2),
    ]
    .into_iter()
    .enumerate()
    {
        let draws = pooled_column(&post.chains, name)?;
        let n = draws.len();
        ranks[k] = (0..SBC_RANK_DRAWS)
            .map(|i| draws[i * n / SBC_RANK_DRAWS])
            .filter(|&x| x < value)
            .count();
        let mut sorted = draws;
        sorted.sort_by(f64::total_cmp);
        covered[k] =
            quantile_sorted(&sorted, 0.025) <= value && value <= quantile_sorted(&sorted, 0.975);
    }
    Ok(RepOutcome { ranks, covered })
}

/// Simulation-based calibration: truths drawn from the fit priors, data
/// simulated from `design`'s layout, pooled model refitted per replicate.
/// Every seed derives from `s.seed`; `design.seed` is not used.
pub fn sbc_run(
    design: &SimDesign,
    opts: &FitOptions,
    reps: usize,
    model: ModelKind,
    s: &McmcSettings,
) -> Result<SbcReport> {
    if model != ModelKind::Pooled {
        return Err(SurrogacyError::InvalidConfig(format!(
            "calibration is implemented for the pooled model only (got `{model}`)"
        )));
    }
    if reps == 0 {
        return Err(SurrogacyError::InvalidConfig(
            "reps must be positive".into(),
        ));
    }
    design.validate()?;
    s.validate()?;
    if s.retained() * s.chains < SBC_RANK_DRAWS {
        return Err(SurrogacyError::InvalidSettings(format!(
            "calibration needs at least {SBC_RANK_DRAWS} retained draws"
        )));
    }
    let outcomes: Vec<RepOutcome> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            one_replicate(design, opts, s, rep).map_err(|e| SurrogacyError::Replicate {
                rep,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let mut parameters = Vec::new();
    for (k, name) in ["lambda0", "lambda1", "psi2"].into_iter().enumerate() {
        let ranks: Vec<usize> = outcomes.iter().map(|o| o.ranks[k]).collect();
        let mut histogram = vec![0; SBC_BINS];
        for &r in &ranks {
            histogram[r * SBC_BINS / (SBC_RANK_DRAWS + 1)] += 1;
        }
        let coverage = outcomes.iter().filter(|o| o.covered[k]).count() as f64 / reps as f64;
        let (chi_square, p_value) = if reps >= SBC_MIN_REPS_FOR_TEST {
            let expected = reps as f64 / SBC_BINS as f64;
            let stat: f64 = histogram
                .iter()
                .map(|&o| (o as f64 - expected).powi(2) / expected)
                .sum();
            let dist = ChiSquared::new((SBC_BINS - 1) as f64).expect("positive df");
            (Some(stat), Some(1.0 - dist.cdf(stat)))
        } else {
            (None, None)
        };
        parameters.push(SbcParameter {
            name: name.to_string(),
            ranks,
            histogram,
            coverage,
            chi_square,
            p_value,
        });
    }
    Ok(SbcReport {
        reps,
        rank_draws: SBC_RANK_DRAWS,
        bins: SBC_BINS,
        parameters,
    })
}

/// Contrast counts per treatment in a dataset.
pub fn contrasts_per_treatment(d: &Dataset) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for c in &d.contrasts {
        *m.entry(c.treatment.clone()).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_design_has_39_contrasts() {
        let d = simulate_dataset(&SimDesign::reference_design()).unwrap();
        assert_eq!(d.len(), 39);
        assert_eq!(d.study_ids().len(), 23);
    }

    #[test]
    fn same_seed_same_data() {
        let a = simulate_dataset(&SimDesign::reference_design().with_seed(4)).unwrap();
        let b = simulate_dataset(&SimDesign::reference_design().with_seed(4)).unwrap();
        let c = simulate_dataset(&SimDesign::reference_design().with_seed(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_points_lie_on_line() {
        let d = SimDesign {
            lambda0: 0.1,
            lambda1: 2.0,
            psi2: 0.0,
            se1: [0.0, 0.0],
            se2: [0.0, 0.0],
            ..SimDesign::two_arm(10)
        };
        for c in simulate_dataset(&d).unwrap().contrasts {
            assert!((c.y2 - (0.1 + 2.0 * c.y1)).abs() < 1e-6);
        }
    }

    #[test]
    fn allocation_is_exact() {
        let d = SimDesign {
            treatments: (0..3)
                .map(|i| TreatmentSpec::new(format!("t{i}"), (i + 2) as f64))
                .collect(),
            ..SimDesign::two_arm(9)
        };
        let counts = contrasts_per_treatment(&simulate_dataset(&d).unwrap());
        assert_eq!(counts.values().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn invalid_designs() {
        assert!(matches!(
            simulate_dataset(&SimDesign::two_arm(2)),
            Err(SurrogacyError::InvalidDesign(_))
        ));
        let neg = SimDesign {
            psi2: -0.1,
            ..SimDesign::two_arm(5)
        };
        assert!(simulate_dataset(&neg).is_err());
        let arms = SimDesign {
            arms: ArmLayout::Explicit {
                arms: vec![2, 7, 2],
            },
            ..SimDesign::two_arm(3)
        };
        assert!(simulate_dataset(&arms).is_err());
    }
}
