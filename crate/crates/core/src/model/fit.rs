use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::sampler::{ContrastTerm, ModelState, Structure, SurrogacyModel};
use super::{Covariate, FitOptions, HierarchicalMode, PsiStructure};
use crate::data::{StudyBlock, TrialContrast};
use crate::error::{Result, SurrogacyError};
use crate::mcmc::{
    derive_seed, diagnostics, pooled_column, run_chains, summarize_values, Chain, ChainRng,
    DiagnosticsReport, McmcSettings, PosteriorSummary,
};

/// Fewest contrasts (with an observed final-outcome effect) a fit accepts.
pub const MIN_CONTRASTS: usize = 3;

/// Keeps the contrasts matching `keep`, extracting the matching sub-block of
/// each within-study covariance. Studies left empty are dropped.
pub fn restrict_blocks(
    blocks: &[StudyBlock],
    keep: impl Fn(&TrialContrast) -> bool,
) -> Vec<StudyBlock> {
    let mut out = Vec::new();
    for b in blocks {
        let idx: Vec<usize> = (0..b.len()).filter(|&i| keep(&b.contrasts[i])).collect();
        if idx.is_empty() {
            continue;
        }
        let rows: Vec<usize> = idx.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect();
        let n = rows.len();
        out.push(StudyBlock {
            study_id: b.study_id.clone(),
            contrasts: idx.iter().map(|&i| b.contrasts[i].clone()).collect(),
            sigma_within: DMatrix::from_fn(n, n, |r, c| b.sigma_within[(rows[r], rows[c])]),
            min_eigenvalue: b.min_eigenvalue,
            repaired: b.repaired,
        });
    }
    out
}

fn check_homogeneous(blocks: &[StudyBlock]) -> Result<()> {
    let outcomes: BTreeSet<String> = blocks
        .iter()
        .flat_map(|b| b.contrasts.iter().map(|c| c.outcome.to_string()))
        .collect();
    if outcomes.len() > 1 {
        return Err(SurrogacyError::MixedOutcome(
            outcomes.into_iter().collect::<Vec<_>>().join(", "),
        ));
    }
    let scales: BTreeSet<_> = blocks
        .iter()
        .flat_map(|b| b.contrasts.iter().map(|c| c.surrogate_scale))
        .collect();
    if scales.len() > 1 {
        return Err(SurrogacyError::MixedScale);
    }
    Ok(())
}

fn covariate_value(c: &TrialContrast, cov: Covariate) -> Result<f64> {
    let v = match cov {
        Covariate::None => return Ok(0.0),
        Covariate::Aria => c.aria_effect,
        Covariate::Apoe => c.apoe_prop,
    };
    v.ok_or_else(|| SurrogacyError::MissingCovariate {
        covariate: cov.label().to_string(),
        study_id: c.study_id.clone(),
        contrast_id: c.contrast_id.clone(),
    })
}

/// Contrast bookkeeping shared by fitting and cross-validation.
pub(crate) struct FitLayout {
    pub model: SurrogacyModel,
    /// `(study index, contrast index within study)` per global contrast.
    pub positions: Vec<(usize, usize)>,
    /// Global indices of the held-out contrasts, in study order.
    pub held_out: Vec<usize>,
}

impl FitLayout {
    /// `holdout` masks the final-outcome effects of one study (its
    /// surrogate effects stay in the likelihood) and records their δ1.
    pub fn build(
        blocks: &[StudyBlock],
        structure: Structure,
        opts: &FitOptions,
        holdout: Option<usize>,
    ) -> Result<FitLayout> {
        check_homogeneous(blocks)?;
        let mut groups: Vec<String> = Vec::new();
        if structure != Structure::Independent {
            for b in blocks {
                for c in &b.contrasts {
                    if !groups.contains(&c.treatment) {
                        groups.push(c.treatment.clone());
                    }
                }
            }
        } else {
            groups.push("all".to_string());
        }

        let mut raw_x = Vec::new();
        for b in blocks {
            for c in &b.contrasts {
                raw_x.push(covariate_value(c, opts.covariate)?);
            }
        }
        let x_mean = if raw_x.is_empty() {
            0.0
        } else {
            raw_x.iter().sum::<f64>() / raw_x.len() as f64
        };

        let mut terms = Vec::new();
        let mut positions = Vec::new();
        let mut studies = Vec::new();
        let mut held_out = Vec::new();
        let mut tracked = Vec::new();
        for (s, b) in blocks.iter().enumerate() {
            let mut idx = Vec::new();
            for (k, c) in b.contrasts.iter().enumerate() {
                let gi = terms.len();
                let group = if structure == Structure::Independent {
                    0
                } else {
                    groups.iter().position(|g| *g == c.treatment).unwrap_or(0)
                };
                let masked = holdout == Some(s);
                if masked {
                    held_out.push(gi);
                    tracked.push((gi, format!("{}/{}", c.study_id, c.contrast_id)));
                }
                terms.push(ContrastTerm {
                    group,
                    x: raw_x[gi] - x_mean,
                    y1: c.y1,
                    y2: (!masked).then_some(c.y2),
                });
                positions.push((s, k));
                idx.push(gi);
            }
            studies.push((idx, b.sigma_within.clone()));
        }

        let observed = terms.iter().filter(|t| t.y2.is_some()).count();
        if observed < MIN_CONTRASTS {
            return Err(SurrogacyError::InsufficientData(format!(
                "{observed} contrast(s) with a final-outcome effect; at least {MIN_CONTRASTS} required"
            )));
        }
        let shared_psi = opts.priors.psi_structure == PsiStructure::Common;
        let model = SurrogacyModel::new(
            groups,
            terms,
            studies,
            structure,
            shared_psi,
            opts.covariate != Covariate::None,
            opts.priors,
            tracked,
        );
        Ok(FitLayout {
            model,
            positions,
            held_out,
        })
    }
}

/// Runs the sampler with deterministic, per-chain dispersed starting points.
pub(crate) fn sample_model(model: &SurrogacyModel, s: &McmcSettings) -> Result<Vec<Chain>> {
    let inits: Vec<ModelState> = (0..s.chains)
        .map(|k| {
            let mut rng = ChainRng::seed_from_u64(derive_seed(s.seed, 0x1_0000 + k as u64));
            model.dispersed_state(k, &mut rng)
        })
        .collect();
    run_chains(model, &inits, s)
}

fn is_latent(name: &str) -> bool {
    name.starts_with("delta1[")
}

fn summaries_for(chains: &[Chain]) -> Result<Vec<PosteriorSummary>> {
    let first = chains
        .first()
        .ok_or_else(|| SurrogacyError::InsufficientData("no chains".into()))?;
    first
        .names
        .iter()
        .filter(|n| !is_latent(n))
        .map(|n| Ok(summarize_values(n, &pooled_column(chains, n)?)))
        .collect()
}

/// Posterior summaries of the three surrogacy parameters (plus the
/// covariate coefficient when fitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogacySummary {
    pub lambda0: PosteriorSummary,
    pub lambda1: PosteriorSummary,
    pub psi2: PosteriorSummary,
    pub lambda2: Option<PosteriorSummary>,
}

/// Draws and summaries of a pooled or subgroup fit.
#[derive(Debug, Clone)]
pub struct SurrogacyPosterior {
    /// Set for subgroup fits.
    pub treatment: Option<String>,
    pub n_studies: usize,
    pub n_contrasts: usize,
    pub chains: Vec<Chain>,
    pub summaries: Vec<PosteriorSummary>,
    pub diagnostics: DiagnosticsReport,
}

impl SurrogacyPosterior {
    pub fn from_chains(
        chains: Vec<Chain>,
        treatment: Option<String>,
        n_studies: usize,
        n_contrasts: usize,
    ) -> Result<Self> {
        let summaries = summaries_for(&chains)?;
        let diagnostics = diagnostics(&chains)?;
        Ok(SurrogacyPosterior {
            treatment,
            n_studies,
            n_contrasts,
            chains,
            summaries,
            diagnostics,
        })
    }

    pub fn summary(&self, name: &str) -> Result<&PosteriorSummary> {
        self.summaries
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| SurrogacyError::UnknownParameter(name.to_string()))
    }

    pub fn draws(&self, name: &str) -> Result<Vec<f64>> {
        pooled_column(&self.chains, name)
    }

    pub fn parameters(&self) -> Result<SurrogacySummary> {
        Ok(SurrogacySummary {
            lambda0: self.summary("lambda0")?.clone(),
            lambda1: self.summary("lambda1")?.clone(),
            psi2: self.summary("psi2")?.clone(),
            lambda2: self.summary("lambda2").ok().cloned(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeight {
    pub treatment: String,
    /// Posterior probability that the treatment belongs to the exchangeable
    /// component.
    pub membership: f64,
    /// Posterior mean of the Uniform(0, 1) weight parameter itself.
    pub weight_mean: f64,
}

/// Draws and summaries of a full or partial exchangeability fit.
#[derive(Debug, Clone)]
pub struct HierarchicalPosterior {
    pub mode: HierarchicalMode,
    pub treatments: Vec<String>,
    pub n_studies: usize,
    pub n_contrasts: usize,
    pub chains: Vec<Chain>,
    pub summaries: Vec<PosteriorSummary>,
    pub diagnostics: DiagnosticsReport,
}

impl HierarchicalPosterior {
    pub fn from_chains(
        chains: Vec<Chain>,
        mode: HierarchicalMode,
        treatments: Vec<String>,
        n_studies: usize,
        n_contrasts: usize,
    ) -> Result<Self> {
        let summaries = summaries_for(&chains)?;
        let diagnostics = diagnostics(&chains)?;
        Ok(HierarchicalPosterior {
            mode,
            treatments,
            n_studies,
            n_contrasts,
            chains,
            summaries,
            diagnostics,
        })
    }

    pub fn summary(&self, name: &str) -> Result<&PosteriorSummary> {
        self.summaries
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| SurrogacyError::UnknownParameter(name.to_string()))
    }

    pub fn draws(&self, name: &str) -> Result<Vec<f64>> {
        pooled_column(&self.chains, name)
    }

    pub fn treatment_parameters(&self, treatment: &str) -> Result<SurrogacySummary> {
        if !self.treatments.iter().any(|t| t == treatment) {
            return Err(SurrogacyError::UnknownTreatment(treatment.to_string()));
        }
        Ok(SurrogacySummary {
            lambda0: self.summary(&format!("lambda0[{treatment}]"))?.clone(),
            lambda1: self.summary(&format!("lambda1[{treatment}]"))?.clone(),
            psi2: self.summary(&format!("psi2[{treatment}]"))?.clone(),
            lambda2: self.summary("lambda2").ok().cloned(),
        })
    }

    /// Per-treatment mixture weights (partial mode only; empty otherwise).
    pub fn mixture_weights(&self) -> Vec<MixtureWeight> {
        if self.mode != HierarchicalMode::Partial {
            return Vec::new();
        }
        self.treatments
            .iter()
            .filter_map(|t| {
                let membership = self.summary(&format!("p_exch[{t}]")).ok()?.mean;
                let weight_mean = self.summary(&format!("w[{t}]")).ok()?.mean;
                Some(MixtureWeight {
                    treatment: t.clone(),
                    membership,
                    weight_mean,
                })
            })
            .collect()
    }

    /// Average posterior membership probability over treatments.
    pub fn mean_mixture_weight(&self) -> Option<f64> {
        let w = self.mixture_weights();
        (!w.is_empty()).then(|| w.iter().map(|m| m.membership).sum::<f64>() / w.len() as f64)
    }

    /// Copy restricted to the named treatments (hyperparameters kept).
    pub fn select_treatments(&self, keep: &[String]) -> Result<HierarchicalPosterior> {
        for t in keep {
            if !self.treatments.contains(t) {
                return Err(SurrogacyError::UnknownTreatment(t.clone()));
            }
        }
        let dropped: Vec<&String> = self
            .treatments
            .iter()
            .filter(|t| !keep.contains(t))
            .collect();
        let drop_name = |n: &str| dropped.iter().any(|t| n.ends_with(&format!("[{t}]")));
        let chains = self
            .chains
            .iter()
            .map(|c| {
                let cols: Vec<usize> = (0..c.n_params())
                    .filter(|&j| !drop_name(&c.names[j]))
                    .collect();
                Chain {
                    names: cols.iter().map(|&j| c.names[j].clone()).collect(),
                    draws: (0..c.len())
                        .flat_map(|i| cols.iter().map(move |&j| c.draws[i * c.n_params() + j]))
                        .collect(),
                    iterations: c.iterations.clone(),
                    acceptance: c.acceptance.clone(),
                    step_sizes: c.step_sizes.clone(),
                }
            })
            .collect();
        Ok(HierarchicalPosterior {
            mode: self.mode,
            treatments: keep.to_vec(),
            n_studies: self.n_studies,
            n_contrasts: self.n_contrasts,
            chains,
            summaries: self
                .summaries
                .iter()
                .filter(|s| !drop_name(&s.name))
                .cloned()
                .collect(),
            diagnostics: DiagnosticsReport {
                parameters: self
                    .diagnostics
                    .parameters
                    .iter()
                    .filter(|p| !drop_name(&p.name))
                    .cloned()
                    .collect(),
                total_draws: self.diagnostics.total_draws,
            },
        })
    }
}

fn count(blocks: &[StudyBlock]) -> (usize, usize) {
    (blocks.len(), blocks.iter().map(StudyBlock::len).sum())
}

/// Pooled bivariate fit across all contrasts.
pub fn fit_pooled(
    blocks: &[StudyBlock],
    opts: &FitOptions,
    s: &McmcSettings,
) -> Result<SurrogacyPosterior> {
    s.validate()?;
    let layout = FitLayout::build(blocks, Structure::Independent, opts, None)?;
    let chains = sample_model(&layout.model, s)?;
    let (n_studies, n_contrasts) = count(blocks);
    SurrogacyPosterior::from_chains(chains, None, n_studies, n_contrasts)
}

/// Pooled model restricted to one treatment's contrasts.
pub fn fit_subgroup(
    blocks: &[StudyBlock],
    treatment: &str,
    opts: &FitOptions,
    s: &McmcSettings,
) -> Result<SurrogacyPosterior> {
    let subset = restrict_blocks(blocks, |c| c.treatment == treatment);
    if subset.is_empty() {
        return Err(SurrogacyError::UnknownTreatment(treatment.to_string()));
    }
    let mut post = fit_pooled(&subset, opts, s).map_err(|e| match e {
        SurrogacyError::InsufficientData(m) => {
            SurrogacyError::InsufficientData(format!("treatment `{treatment}`: {m}"))
        }
        other => other,
    })?;
    post.treatment = Some(treatment.to_string());
    Ok(post)
}

/// Full or partial exchangeability of per-treatment surrogacy parameters.
pub fn fit_hierarchical(
    blocks: &[StudyBlock],
    mode: HierarchicalMode,
    opts: &FitOptions,
    s: &McmcSettings,
) -> Result<HierarchicalPosterior> {
    s.validate()?;
    let treatments: Vec<String> = {
        let mut t: Vec<String> = Vec::new();
        for c in blocks.iter().flat_map(|b| &b.contrasts) {
            if !t.contains(&c.treatment) {
                t.push(c.treatment.clone());
            }
        }
        t
    };
    match treatments.len() {
        0 => return Err(SurrogacyError::InsufficientData("no contrasts".into())),
        1 => return Err(SurrogacyError::SingleTreatment(treatments[0].clone())),
        _ => {}
    }
    let structure = match mode {
        HierarchicalMode::Full => Structure::Full,
        HierarchicalMode::Partial => Structure::Partial,
    };
    let layout = FitLayout::build(blocks, structure, opts, None)?;
    let chains = sample_model(&layout.model, s)?;
    let (n_studies, n_contrasts) = count(blocks);
    HierarchicalPosterior::from_chains(
        chains,
        mode,
        layout.model.groups.clone(),
        n_studies,
        n_contrasts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_study_blocks, CovarianceOptions, Dataset};

    fn quick() -> McmcSettings {
        McmcSettings {
            iterations: 3_000,
            burn_in: 1_000,
            thin: 2,
            chains: 2,
            seed: 5,
            adapt_window: 50,
        }
    }

    fn blocks(contrasts: Vec<TrialContrast>) -> Vec<StudyBlock> {
        build_study_blocks(&Dataset::new(contrasts), &CovarianceOptions::default()).unwrap()
    }

    #[test]
    fn too_few_contrasts() {
        let b = blocks(vec![
            TrialContrast::new("S1", "a", "c1", -0.1, 0.02, -0.2, 0.1),
            TrialContrast::new("S2", "a", "c1", -0.2, 0.02, -0.3, 0.1),
        ]);
        assert!(matches!(
            fit_pooled(&b, &FitOptions::default(), &quick()),
            Err(SurrogacyError::InsufficientData(_))
        ));
        assert!(matches!(
            fit_subgroup(&b, "zzz", &FitOptions::default(), &quick()),
            Err(SurrogacyError::UnknownTreatment(_))
        ));
        assert!(matches!(
            fit_hierarchical(&b, HierarchicalMode::Full, &FitOptions::default(), &quick()),
            Err(SurrogacyError::SingleTreatment(_))
        ));
    }

    #[test]
    fn mixed_outcome_rejected() {
        let mut c = TrialContrast::new("S3", "a", "c1", -0.2, 0.02, -0.3, 0.1);
        c.outcome = crate::data::Outcome::Mmse;
        let b = blocks(vec![
            TrialContrast::new("S1", "a", "c1", -0.1, 0.02, -0.2, 0.1),
            TrialContrast::new("S2", "a", "c1", -0.2, 0.02, -0.3, 0.1),
            c,
        ]);
        assert!(matches!(
            fit_pooled(&b, &FitOptions::default(), &quick()),
            Err(SurrogacyError::MixedOutcome(_))
        ));
    }

    #[test]
    fn missing_covariate_reported() {
        let b = blocks(vec![
            TrialContrast::new("S1", "a", "c1", -0.1, 0.02, -0.2, 0.1),
            TrialContrast::new("S2", "a", "c1", -0.2, 0.02, -0.3, 0.1),
            TrialContrast::new("S3", "a", "c1", -0.3, 0.02, -0.4, 0.1),
        ]);
        let opts = FitOptions {
            covariate: Covariate::Aria,
            ..FitOptions::default()
        };
        assert!(matches!(
            fit_pooled(&b, &opts, &quick()),
            Err(SurrogacyError::MissingCovariate { .. })
        ));
    }

    #[test]
    fn restrict_extracts_sub_block() {
        let b = blocks(vec![
            TrialContrast::new("S1", "a", "c1", -0.1, 0.1, -0.2, 0.2),
            TrialContrast::new("S1", "b", "c2", -0.2, 0.3, -0.3, 0.4),
        ]);
        let r = restrict_blocks(&b, |c| c.treatment == "b");
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].sigma_within.nrows(), 2);
        assert!((r[0].sigma_within[(0, 0)] - 0.09).abs() < 1e-15);
        assert!((r[0].sigma_within[(1, 1)] - 0.16).abs() < 1e-15);
    }
}
