use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::fit::{HierarchicalPosterior, SurrogacyPosterior, SurrogacySummary};
use crate::error::{Result, SurrogacyError};
use crate::mcmc::quantile_sorted;

/// Default upper bound on the posterior median of ψ² for a surrogate to
/// count as predictive.
pub const DEFAULT_PSI2_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictLabel {
    Supported,
    Weak,
    NotSupported,
}

impl fmt::Display for VerdictLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictLabel::Supported => "supported",
            VerdictLabel::Weak => "weak",
            VerdictLabel::NotSupported => "not-supported",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogacyVerdict {
    /// 95% CrI of the intercept contains zero.
    pub intercept_zero: bool,
    /// 95% CrI of the slope excludes zero.
    pub slope_nonzero: bool,
    /// Posterior median of ψ² is below `psi2_threshold`.
    pub variance_small: bool,
    pub psi2_threshold: f64,
    pub label: VerdictLabel,
}

pub fn evaluate_criteria(p: &SurrogacySummary, psi2_threshold: f64) -> SurrogacyVerdict {
    let intercept_zero = p.lambda0.contains(0.0);
    let slope_nonzero = !p.lambda1.contains(0.0);
    let variance_small = p.psi2.q50 < psi2_threshold;
    let label = if !slope_nonzero {
        VerdictLabel::NotSupported
    } else if intercept_zero && variance_small {
        VerdictLabel::Supported
    } else {
        VerdictLabel::Weak
    };
    SurrogacyVerdict {
        intercept_zero,
        slope_nonzero,
        variance_small,
        psi2_threshold,
        label,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub x: f64,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Pointwise posterior mean and central 95% interval of `λ0 + λ1·x`.
pub fn regression_band(lambda0: &[f64], lambda1: &[f64], grid: &[f64]) -> Result<Vec<BandPoint>> {
    if grid.is_empty() {
        return Err(SurrogacyError::InsufficientData("empty band grid".into()));
    }
    if lambda0.is_empty() || lambda0.len() != lambda1.len() {
        return Err(SurrogacyError::InsufficientData(
            "intercept and slope draws must be non-empty and paired".into(),
        ));
    }
    let n = lambda0.len() as f64;
    Ok(grid
        .iter()
        .map(|&x| {
            let mut v: Vec<f64> = lambda0
                .iter()
                .zip(lambda1)
                .map(|(a, b)| a + b * x)
                .collect();
            let mean = v.iter().sum::<f64>() / n;
            v.sort_by(f64::total_cmp);
            BandPoint {
                x,
                mean,
                lo: quantile_sorted(&v, 0.025),
                hi: quantile_sorted(&v, 0.975),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentReduction {
    pub treatment: String,
    pub slope_width_subgroup: f64,
    pub slope_width_hierarchical: f64,
    /// Fractional reduction in 95% CrI width (0.71 = 71% narrower).
    pub slope: f64,
    pub psi2_width_subgroup: f64,
    pub psi2_width_hierarchical: f64,
    pub psi2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl WidthStats {
    fn of(v: &[f64]) -> WidthStats {
        WidthStats {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthReduction {
    pub treatments: Vec<TreatmentReduction>,
    pub slope: WidthStats,
    pub psi2: WidthStats,
}

fn reduction(sub: f64, hier: f64) -> f64 {
    if sub > 0.0 {
        (sub - hier) / sub
    } else {
        0.0
    }
}

/// Per-treatment reduction in CrI width from the subgroup fits to the
/// hierarchical fit. Both sides must cover exactly the same treatments.
pub fn width_reduction(
    subgroup: &BTreeMap<String, SurrogacyPosterior>,
    hier: &HierarchicalPosterior,
) -> Result<WidthReduction> {
    let mut sub_names: Vec<&String> = subgroup.keys().collect();
    let mut hier_names: Vec<&String> = hier.treatments.iter().collect();
    sub_names.sort();
    hier_names.sort();
    if sub_names != hier_names || sub_names.is_empty() {
        return Err(SurrogacyError::TreatmentMismatch(format!(
            "subgroup fits cover [{}], hierarchical fit covers [{}]",
            sub_names
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", "),
            hier_names
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    let mut rows = Vec::new();
    for t in &hier.treatments {
        let s = subgroup[t].parameters()?;
        let h = hier.treatment_parameters(t)?;
        rows.push(TreatmentReduction {
            treatment: t.clone(),
            slope_width_subgroup: s.lambda1.width(),
            slope_width_hierarchical: h.lambda1.width(),
            slope: reduction(s.lambda1.width(), h.lambda1.width()),
            psi2_width_subgroup: s.psi2.width(),
            psi2_width_hierarchical: h.psi2.width(),
            psi2: reduction(s.psi2.width(), h.psi2.width()),
        });
    }
    let slope: Vec<f64> = rows.iter().map(|r| r.slope).collect();
    let psi2: Vec<f64> = rows.iter().map(|r| r.psi2).collect();
    Ok(WidthReduction {
        slope: WidthStats::of(&slope),
        psi2: WidthStats::of(&psi2),
        treatments: rows,
    })
}
