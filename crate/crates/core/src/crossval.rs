//! Leave-one-study-out prediction of final-outcome effects.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::StudyBlock;
use crate::error::{Result, SurrogacyError};
use crate::mcmc::{derive_seed, pooled_column, quantile_sorted, ChainRng, McmcSettings};
use crate::model::{sample_model, FitLayout, FitOptions, ModelKind, Structure};

/// Fewest studies accepted by [`loo_predict`].
pub const MIN_LOO_STUDIES: usize = 4;
const Z975: f64 = 1.959963984540054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub study_id: String,
    pub contrast_id: String,
    pub observed: f64,
    pub obs_lo: f64,
    pub obs_hi: f64,
    pub pred: f64,
    pub pred_lo: f64,
    pub pred_hi: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LooMetrics {
    pub coverage: f64,
    /// Mean absolute difference between observed and predicted effects.
    pub mad: f64,
    /// Mean ratio of predicted-interval width to observed-CI width.
    pub width_ratio: f64,
}

fn structure_for(kind: ModelKind) -> Result<Structure> {
    match kind {
        ModelKind::Pooled => Ok(Structure::Independent),
        ModelKind::Full => Ok(Structure::Full),
        ModelKind::Partial => Ok(Structure::Partial),
        ModelKind::Subgroup => Err(SurrogacyError::InvalidConfig(
            "cross-validation supports the pooled, full and partial models".into(),
        )),
    }
}

fn predict_study(
    blocks: &[StudyBlock],
    study: usize,
    structure: Structure,
    opts: &FitOptions,
    s: &McmcSettings,
) -> Result<Vec<PredictionRecord>> {
    let layout = FitLayout::build(blocks, structure, opts, Some(study))?;
    let seed = derive_seed(s.seed, study as u64);
    let chains = sample_model(&layout.model, &s.with_seed(seed))?;
    let mut rng = ChainRng::seed_from_u64(derive_seed(seed, u64::MAX));
    let hierarchical = structure != Structure::Independent;
    let lambda2 = if opts.covariate != crate::model::Covariate::None {
        Some(pooled_column(&chains, "lambda2")?)
    } else {
        None
    };

    let mut out = Vec::new();
    for &gi in &layout.held_out {
        let (_, k) = layout.positions[gi];
        let c = &blocks[study].contrasts[k];
        let term = &layout.model.terms[gi];
        let suffix = if hierarchical {
            format!("[{}]", layout.model.groups[term.group])
        } else {
            String::new()
        };
        let l0 = pooled_column(&chains, &format!("lambda0{suffix}"))?;
        let l1 = pooled_column(&chains, &format!("lambda1{suffix}"))?;
        let psi2 = pooled_column(&chains, &format!("psi2{suffix}"))?;
        let d1 = pooled_column(
            &chains,
            &format!("delta1[{}/{}]", c.study_id, c.contrast_id),
        )?;
        let n = d1.len();
        let mut mean_sum = 0.0;
        let mut y2_pred = Vec::with_capacity(n);
        for i in 0..n {
            let mut m = l0[i] + l1[i] * d1[i];
            if let Some(l2) = &lambda2 {
                m += l2[i] * term.x;
            }
            mean_sum += m;
            let z: f64 = rng.sample(StandardNormal);
            y2_pred.push(m + (psi2[i] + c.se2 * c.se2).sqrt() * z);
        }
        y2_pred.sort_by(f64::total_cmp);
        let pred_lo = quantile_sorted(&y2_pred, 0.025);
        let pred_hi = quantile_sorted(&y2_pred, 0.975);
        out.push(PredictionRecord {
            study_id: c.study_id.clone(),
            contrast_id: c.contrast_id.clone(),
            observed: c.y2,
            obs_lo: c.y2 - Z975 * c.se2,
            obs_hi: c.y2 + Z975 * c.se2,
            pred: mean_sum / n as f64,
            pred_lo,
            pred_hi,
            covered: pred_lo <= c.y2 && c.y2 <= pred_hi,
        });
    }
    Ok(out)
}

/// Refits the model once per study with that study's final-outcome effects
/// removed (its surrogate effects kept) and predicts the removed effects.
pub fn loo_predict(
    blocks: &[StudyBlock],
    kind: ModelKind,
    opts: &FitOptions,
    s: &McmcSettings,
) -> Result<Vec<PredictionRecord>> {
    let structure = structure_for(kind)?;
    s.validate()?;
    if blocks.len() < MIN_LOO_STUDIES {
        return Err(SurrogacyError::InsufficientData(format!(
            "cross-validation needs at least {MIN_LOO_STUDIES} studies, found {}",
            blocks.len()
        )));
    }
    if structure != Structure::Independent {
        let first = &blocks[0].contrasts[0].treatment;
        if blocks
            .iter()
            .flat_map(|b| &b.contrasts)
            .all(|c| &c.treatment == first)
        {
            return Err(SurrogacyError::SingleTreatment(first.clone()));
        }
    }
    let per_study: Vec<Vec<PredictionRecord>> = (0..blocks.len())
        .into_par_iter()
        .map(|i| predict_study(blocks, i, structure, opts, s))
        .collect::<Result<_>>()?;
    Ok(per_study.into_iter().flatten().collect())
}

pub fn loo_metrics(records: &[PredictionRecord]) -> Result<LooMetrics> {
    if records.is_empty() {
        return Err(SurrogacyError::EmptyRecords);
    }
    let n = records.len() as f64;
    Ok(LooMetrics {
        coverage: records.iter().filter(|r| r.covered).count() as f64 / n,
        mad: records
            .iter()
            .map(|r| (r.observed - r.pred).abs())
            .sum::<f64>()
            / n,
        width_ratio: records
            .iter()
            .map(|r| (r.pred_hi - r.pred_lo) / (r.obs_hi - r.obs_lo))
            .sum::<f64>()
            / n,
    })
}

pub fn write_records<W: Write>(records: &[PredictionRecord], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(source: R) -> Result<Vec<PredictionRecord>> {
    let mut r = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
