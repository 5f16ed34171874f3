//! Bivariate surrogacy model (pooled, per-treatment subgroup, and full or
//! partial exchangeability across treatments).
//!
//! For contrast `i` of treatment `j` with true effects `(δ1ᵢ, δ2ᵢ)`:
//!
//! ```text
//! y_s        ~ N(stack(δ1, δ2)_s, Σ_s)                 (per study)
//! δ2ᵢ | δ1ᵢ  ~ N(λ0ⱼ + λ1ⱼ·δ1ᵢ + λ2·xᵢ, ψⱼ²)
//! δ1ᵢ        ~ N(μ_δ, σ_δ²)
//! ```
//!
//! The sampler integrates `δ2` out analytically and alternates Gibbs draws of
//! `δ1` and `λ` with random-walk Metropolis on `log ψ` (and on the log
//! hyper-SDs in the hierarchical models).

mod criteria;
mod fit;
mod sampler;

pub use criteria::{
    evaluate_criteria, regression_band, width_reduction, BandPoint, SurrogacyVerdict,
    TreatmentReduction, VerdictLabel, WidthReduction, WidthStats, DEFAULT_PSI2_THRESHOLD,
};
pub use fit::{
    fit_hierarchical, fit_pooled, fit_subgroup, restrict_blocks, HierarchicalPosterior,
    MixtureWeight, SurrogacyPosterior, SurrogacySummary, MIN_CONTRASTS,
};
pub(crate) use fit::{sample_model, FitLayout};
pub(crate) use sampler::Structure;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

impl NormalPrior {
    pub const fn new(mean: f64, sd: f64) -> Self {
        NormalPrior { mean, sd }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        -0.5 * z * z - self.sd.ln()
    }
}

/// Prior on the conditional standard deviation ψ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PsiPrior {
    /// ψ ~ Uniform(0, upper).
    Uniform { upper: f64 },
    /// ψ ~ half-Normal(0, scale²).
    HalfNormal { scale: f64 },
    /// 1/ψ² ~ Gamma(shape, rate).
    GammaPrecision { shape: f64, rate: f64 },
    /// ψ held at `value`; not sampled.
    Fixed { value: f64 },
}

impl Default for PsiPrior {
    fn default() -> Self {
        PsiPrior::Uniform { upper: 2.0 }
    }
}

impl PsiPrior {
    /// Log density of `θ = ln ψ`, Jacobian included, up to a constant.
    pub fn log_density_log_psi(&self, theta: f64) -> f64 {
        match *self {
            PsiPrior::Uniform { upper } => {
                if theta.exp() < upper {
                    theta
                } else {
                    f64::NEG_INFINITY
                }
            }
            PsiPrior::HalfNormal { scale } => {
                let psi = theta.exp();
                -0.5 * (psi / scale).powi(2) + theta
            }
            PsiPrior::GammaPrecision { shape, rate } => {
                -2.0 * shape * theta - rate * (-2.0 * theta).exp()
            }
            PsiPrior::Fixed { .. } => 0.0,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PsiPrior::Uniform { .. } => "uniform",
            PsiPrior::HalfNormal { .. } => "halfnormal",
            PsiPrior::GammaPrecision { .. } => "gamma-precision",
            PsiPrior::Fixed { .. } => "fixed",
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, PsiPrior::Fixed { .. })
    }
}

impl FromStr for PsiPrior {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(PsiPrior::Uniform { upper: 2.0 }),
            "halfnormal" | "half-normal" => Ok(PsiPrior::HalfNormal { scale: 1.0 }),
            "gamma-precision" | "gamma" => Ok(PsiPrior::GammaPrecision {
                shape: 0.001,
                rate: 0.001,
            }),
            other => match other.strip_prefix("fixed:").map(str::parse::<f64>) {
                Some(Ok(value)) if value >= 0.0 => Ok(PsiPrior::Fixed { value }),
                _ => Err(format!("unknown psi prior `{other}`")),
            },
        }
    }
}

/// Whether per-treatment ψⱼ are exchangeable on the log scale or a single
/// ψ is shared by all treatments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PsiStructure {
    #[default]
    Exchangeable,
    Common,
}

/// Every prior of every model variant. All values are echoed into reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub intercept: NormalPrior,
    pub slope: NormalPrior,
    pub covariate: NormalPrior,
    /// Prior on each true surrogate effect δ1.
    pub delta1: NormalPrior,
    pub psi: PsiPrior,
    /// Hypermeans of intercepts and slopes.
    pub hypermean: NormalPrior,
    /// Half-normal scale for the intercept and slope hyper-SDs.
    pub hyper_sd_scale: f64,
    /// Location prior for exchangeable log ψⱼ.
    pub log_psi_mean: NormalPrior,
    /// Half-normal scale of the log ψⱼ spread.
    pub log_psi_sd_scale: f64,
    pub psi_structure: PsiStructure,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            intercept: NormalPrior::new(0.0, 100.0),
            slope: NormalPrior::new(0.0, 100.0),
            covariate: NormalPrior::new(0.0, 100.0),
            delta1: NormalPrior::new(0.0, 100.0),
            psi: PsiPrior::default(),
            hypermean: NormalPrior::new(0.0, 100.0),
            hyper_sd_scale: 1.0,
            log_psi_mean: NormalPrior::new(0.0, 1.0),
            log_psi_sd_scale: 1.0,
            psi_structure: PsiStructure::Exchangeable,
        }
    }
}

/// Optional trial-level covariate entering the conditional mean of δ2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Covariate {
    #[default]
    None,
    /// Treatment effect on ARIA.
    Aria,
    /// Proportion of APOE ε4 carriers.
    Apoe,
}

impl Covariate {
    pub fn label(&self) -> &'static str {
        match self {
            Covariate::None => "none",
            Covariate::Aria => "aria",
            Covariate::Apoe => "apoe",
        }
    }
}

impl FromStr for Covariate {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Covariate::None),
            "aria" => Ok(Covariate::Aria),
            "apoe" => Ok(Covariate::Apoe),
            other => Err(format!("unknown covariate `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub priors: PriorConfig,
    pub covariate: Covariate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HierarchicalMode {
    Full,
    Partial,
}

/// Model variants selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Pooled,
    Subgroup,
    Full,
    Partial,
}

impl ModelKind {
    pub fn hierarchical_mode(self) -> Option<HierarchicalMode> {
        match self {
            ModelKind::Full => Some(HierarchicalMode::Full),
            ModelKind::Partial => Some(HierarchicalMode::Partial),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Pooled => "pooled",
            ModelKind::Subgroup => "subgroup",
            ModelKind::Full => "full",
            ModelKind::Partial => "partial",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pooled" => Ok(ModelKind::Pooled),
            "subgroup" => Ok(ModelKind::Subgroup),
            "full" => Ok(ModelKind::Full),
            "partial" => Ok(ModelKind::Partial),
            other => Err(format!("unknown model `{other}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psi_prior_log_scale_densities() {
        let u = PsiPrior::Uniform { upper: 2.0 };
        assert_eq!(u.log_density_log_psi(0.0), 0.0);
        assert_eq!(u.log_density_log_psi(2f64.ln() + 1e-9), f64::NEG_INFINITY);
        // gamma on precision: p(θ) ∝ τ^a e^{-bτ}, τ = e^{-2θ}
        let g = PsiPrior::GammaPrecision {
            shape: 2.0,
            rate: 3.0,
        };
        let theta: f64 = -0.4;
        let tau = (-2.0 * theta).exp();
        assert!((g.log_density_log_psi(theta) - (2.0 * tau.ln() - 3.0 * tau)).abs() < 1e-12);
    }

    #[test]
    fn parses_labels() {
        assert_eq!("full".parse::<ModelKind>().unwrap(), ModelKind::Full);
        assert_eq!("apoe".parse::<Covariate>().unwrap(), Covariate::Apoe);
        assert_eq!(
            "halfnormal".parse::<PsiPrior>().unwrap(),
            PsiPrior::HalfNormal { scale: 1.0 }
        );
        assert_eq!(
            "fixed:0.2".parse::<PsiPrior>().unwrap(),
            PsiPrior::Fixed { value: 0.2 }
        );
        assert!("fixed:-1".parse::<PsiPrior>().is_err());
    }
}
