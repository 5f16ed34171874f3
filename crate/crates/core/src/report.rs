//! Run configuration, JSON/CSV reports and plot-ready data files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::crossval::{write_records, LooMetrics, PredictionRecord};
use crate::data::{
    build_study_blocks, CovarianceOptions, Dataset, Outcome, StudyBlock, SurrogateScale,
    TimepointPolicy,
};
use crate::error::{Result, SurrogacyError};
use crate::mcmc::{DiagnosticsReport, McmcSettings, PosteriorSummary};
use crate::model::{
    evaluate_criteria, regression_band, Covariate, FitOptions, HierarchicalPosterior,
    MixtureWeight, ModelKind, PriorConfig, SurrogacyPosterior, SurrogacySummary, SurrogacyVerdict,
    WidthReduction, DEFAULT_PSI2_THRESHOLD,
};
use crate::scale::harmonize_surrogate_scale;

/// Everything that determines a run. Echoed verbatim into `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub outcome: Outcome,
    pub scale: SurrogateScale,
    pub timepoints: TimepointPolicy,
    pub model: ModelKind,
    /// Subgroup fits only; all treatments when absent.
    pub treatment: Option<String>,
    pub priors: PriorConfig,
    pub covariate: Covariate,
    pub mcmc: McmcSettings,
    pub default_rho: f64,
    pub shared_control_rho: f64,
    pub psi2_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cov = CovarianceOptions::default();
        RunConfig {
            input: None,
            output_dir: PathBuf::from("out"),
            outcome: Outcome::CdrSob,
            scale: SurrogateScale::Suvr,
            timepoints: TimepointPolicy::Earliest,
            model: ModelKind::Pooled,
            treatment: None,
            priors: PriorConfig::default(),
            covariate: Covariate::None,
            mcmc: McmcSettings::default(),
            default_rho: cov.default_rho,
            shared_control_rho: cov.shared_control_rho,
            psi2_threshold: DEFAULT_PSI2_THRESHOLD,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| SurrogacyError::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SurrogacyError::InvalidConfig(e.to_string()))
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            priors: self.priors,
            covariate: self.covariate,
        }
    }

    pub fn covariance_options(&self) -> CovarianceOptions {
        CovarianceOptions {
            default_rho: self.default_rho,
            shared_control_rho: self.shared_control_rho,
            repair_psd: true,
        }
    }

    /// Outcome filter, scale harmonization and time-point selection, in that
    /// order, followed by covariance assembly.
    pub fn prepare(&self, raw: &Dataset) -> Result<(Dataset, Vec<StudyBlock>)> {
        let d = raw.with_outcome(self.outcome);
        if d.is_empty() {
            return Err(SurrogacyError::InsufficientData(format!(
                "no contrasts with outcome {}",
                self.outcome
            )));
        }
        let d = harmonize_surrogate_scale(&d, self.scale)?;
        let d = d.select_timepoints(self.timepoints);
        let blocks = build_study_blocks(&d, &self.covariance_options())?;
        Ok((d, blocks))
    }
}

/// One row of `summaries.csv` (and of the parameter lists in `report.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// `pooled`, `subgroup`, `full` or `partial`.
    pub section: String,
    pub parameter: String,
    pub treatment: Option<String>,
    pub mean: f64,
    pub sd: f64,
    pub q2_5: f64,
    pub q50: f64,
    pub q97_5: f64,
    pub ess: Option<f64>,
    pub rhat: Option<f64>,
    /// Mixture membership probability (partial model, per-treatment rows).
    pub w: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictEntry {
    pub section: String,
    pub treatment: Option<String>,
    pub summary: SurrogacySummary,
    pub verdict: SurrogacyVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: RunConfig,
    pub n_studies: usize,
    pub n_contrasts: usize,
    pub notes: Vec<String>,
    pub parameters: Vec<SummaryRow>,
    pub verdicts: Vec<VerdictEntry>,
    pub width_reduction: Option<WidthReduction>,
    pub mixture_weights: Vec<MixtureWeight>,
    pub mean_mixture_weight: Option<f64>,
    pub loo: Option<LooMetrics>,
}

/// Completed fits that feed a report.
#[derive(Debug, Clone, Default)]
pub struct FitResults {
    pub pooled: Option<SurrogacyPosterior>,
    pub subgroups: BTreeMap<String, SurrogacyPosterior>,
    pub hierarchical: Option<HierarchicalPosterior>,
    pub width_reduction: Option<WidthReduction>,
    pub loo: Option<(Vec<PredictionRecord>, LooMetrics)>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Splits `lambda1[drug]` into (`lambda1`, `drug`).
fn split_name(name: &str) -> (String, Option<String>) {
    match (name.find('['), name.ends_with(']')) {
        (Some(i), true) => (
            name[..i].to_string(),
            Some(name[i + 1..name.len() - 1].to_string()),
        ),
        _ => (name.to_string(), None),
    }
}

fn rows_for(
    section: &str,
    summaries: &[PosteriorSummary],
    diag: &DiagnosticsReport,
    forced_treatment: Option<&str>,
    weights: &[MixtureWeight],
) -> Vec<SummaryRow> {
    summaries
        .iter()
        .map(|s| {
            let d = diag.get(&s.name);
            let (parameter, t) = split_name(&s.name);
            let treatment = t.or_else(|| forced_treatment.map(str::to_string));
            let w = match (&parameter[..], &treatment) {
                ("lambda0" | "lambda1" | "psi2", Some(t)) => weights
                    .iter()
                    .find(|m| &m.treatment == t)
                    .map(|m| m.membership),
                _ => None,
            };
            SummaryRow {
                section: section.to_string(),
                parameter,
                treatment,
                mean: s.mean,
                sd: s.sd,
                q2_5: s.q2_5,
                q50: s.q50,
                q97_5: s.q97_5,
                ess: d.and_then(|d| finite(d.ess)),
                rhat: d.and_then(|d| d.rhat.and_then(finite)),
                w,
            }
        })
        .collect()
}

pub fn build_report(config: &RunConfig, dataset: &Dataset, results: &FitResults) -> Result<Report> {
    let mut parameters = Vec::new();
    let mut verdicts = Vec::new();
    let thr = config.psi2_threshold;
    if let Some(p) = &results.pooled {
        parameters.extend(rows_for("pooled", &p.summaries, &p.diagnostics, None, &[]));
        let summary = p.parameters()?;
        verdicts.push(VerdictEntry {
            section: "pooled".into(),
            treatment: None,
            verdict: evaluate_criteria(&summary, thr),
            summary,
        });
    }
    for (t, p) in &results.subgroups {
        parameters.extend(rows_for(
            "subgroup",
            &p.summaries,
            &p.diagnostics,
            Some(t),
            &[],
        ));
        let summary = p.parameters()?;
        verdicts.push(VerdictEntry {
            section: "subgroup".into(),
            treatment: Some(t.clone()),
            verdict: evaluate_criteria(&summary, thr),
            summary,
        });
    }
    let mut mixture_weights = Vec::new();
    let mut mean_mixture_weight = None;
    if let Some(h) = &results.hierarchical {
        let section = match h.mode {
            crate::model::HierarchicalMode::Full => "full",
            crate::model::HierarchicalMode::Partial => "partial",
        };
        mixture_weights = h.mixture_weights();
        mean_mixture_weight = h.mean_mixture_weight();
        parameters.extend(rows_for(
            section,
            &h.summaries,
            &h.diagnostics,
            None,
            &mixture_weights,
        ));
        for t in &h.treatments {
            let summary = h.treatment_parameters(t)?;
            verdicts.push(VerdictEntry {
                section: section.into(),
                treatment: Some(t.clone()),
                verdict: evaluate_criteria(&summary, thr),
                summary,
            });
        }
    }
    let mut notes =
        vec!["psi2 is the conditional variance; verdicts use its posterior median".to_string()];
    if results.loo.is_some() {
        notes.push(
            "held-out studies keep their surrogate effects; only final-outcome effects are predicted"
                .to_string(),
        );
    }
    if !mixture_weights.is_empty() {
        notes.push(
            "mixture weight w = posterior probability of membership in the exchangeable component"
                .to_string(),
        );
    }
    Ok(Report {
        config: config.clone(),
        n_studies: dataset.study_ids().len(),
        n_contrasts: dataset.len(),
        notes,
        parameters,
        verdicts,
        width_reduction: results.width_reduction.clone(),
        mixture_weights,
        mean_mixture_weight,
        loo: results.loo.as_ref().map(|(_, m)| *m),
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_rows<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(dir, name)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads any CSV written by this module back into its row type.
pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

/// Writes `report.json` and `summaries.csv` into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<()> {
    let mut w = create(dir, "report.json")?;
    serde_json::to_writer_pretty(&mut w, report)?;
    writeln!(w)?;
    w.flush()?;
    write_rows(dir, "summaries.csv", &report.parameters)
}

pub fn read_report(path: &Path) -> Result<Report> {
    Ok(serde_json::from_reader(File::open(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestRow {
    pub treatment: String,
    pub study_id: String,
    pub contrast_id: String,
    pub y1: f64,
    pub y1_lo: f64,
    pub y1_hi: f64,
    pub y2: f64,
    pub y2_lo: f64,
    pub y2_hi: f64,
    pub imputed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleRow {
    pub study_id: String,
    pub contrast_id: String,
    pub treatment: String,
    pub y1: f64,
    pub y2: f64,
    pub n_final: u32,
    pub imputed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    /// `all` for the pooled model, otherwise the treatment.
    pub treatment: String,
    pub x: f64,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

pub const BAND_POINTS: usize = 41;

/// Grid over the observed surrogate range widened by 10% on each side, with
/// zero always included.
pub fn band_grid(dataset: &Dataset) -> Vec<f64> {
    let lo = dataset
        .contrasts
        .iter()
        .map(|c| c.y1)
        .fold(f64::INFINITY, f64::min);
    let hi = dataset
        .contrasts
        .iter()
        .map(|c| c.y1)
        .fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return vec![0.0];
    }
    let pad = 0.1 * (hi - lo);
    let (a, b) = (lo - pad, hi + pad);
    let mut grid: Vec<f64> = (0..BAND_POINTS)
        .map(|i| a + (b - a) * i as f64 / (BAND_POINTS - 1) as f64)
        .collect();
    if !grid.contains(&0.0) {
        grid.push(0.0);
        grid.sort_by(f64::total_cmp);
    }
    grid
}

const Z975: f64 = 1.959963984540054;

/// Writes `forest.csv`, `bubble.csv`, `band.csv` and (after cross-validation)
/// `loo_forest.csv` into `dir`.
pub fn emit_plot_data(results: &FitResults, dataset: &Dataset, dir: &Path) -> Result<()> {
    let mut forest: Vec<ForestRow> = dataset
        .contrasts
        .iter()
        .map(|c| ForestRow {
            treatment: c.treatment.clone(),
            study_id: c.study_id.clone(),
            contrast_id: c.contrast_id.clone(),
            y1: c.y1,
            y1_lo: c.y1 - Z975 * c.se1,
            y1_hi: c.y1 + Z975 * c.se1,
            y2: c.y2,
            y2_lo: c.y2 - Z975 * c.se2,
            y2_hi: c.y2 + Z975 * c.se2,
            imputed: c.imputed_scale,
        })
        .collect();
    forest.sort_by(|a, b| a.treatment.cmp(&b.treatment));
    write_rows(dir, "forest.csv", &forest)?;

    let bubble: Vec<BubbleRow> = dataset
        .contrasts
        .iter()
        .map(|c| BubbleRow {
            study_id: c.study_id.clone(),
            contrast_id: c.contrast_id.clone(),
            treatment: c.treatment.clone(),
            y1: c.y1,
            y2: c.y2,
            n_final: c.n_final,
            imputed: c.imputed_scale,
        })
        .collect();
    write_rows(dir, "bubble.csv", &bubble)?;

    let grid = band_grid(dataset);
    let mut band = Vec::new();
    let mut push = |label: &str, l0: Vec<f64>, l1: Vec<f64>| -> Result<()> {
        for p in regression_band(&l0, &l1, &grid)? {
            band.push(BandRow {
                treatment: label.to_string(),
                x: p.x,
                mean: p.mean,
                lo: p.lo,
                hi: p.hi,
            });
        }
        Ok(())
    };
    if let Some(p) = &results.pooled {
        push("all", p.draws("lambda0")?, p.draws("lambda1")?)?;
    }
    for (t, p) in &results.subgroups {
        push(t, p.draws("lambda0")?, p.draws("lambda1")?)?;
    }
    if let Some(h) = &results.hierarchical {
        for t in &h.treatments {
            push(
                t,
                h.draws(&format!("lambda0[{t}]"))?,
                h.draws(&format!("lambda1[{t}]"))?,
            )?;
        }
    }
    write_rows(dir, "band.csv", &band)?;

    if let Some((records, _)) = &results.loo {
        write_records(records, create(dir, "loo_forest.csv")?)?;
    }
    Ok(())
}
