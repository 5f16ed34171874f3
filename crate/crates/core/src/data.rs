//! Contrast-level trial evidence: schema, CSV I/O, validation and per-study
//! covariance blocks.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurrogacyError};

/// Scale on which the surrogate (amyloid PET) effect is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SurrogateScale {
    #[serde(rename = "SUVR")]
    Suvr,
    #[serde(rename = "Centiloid")]
    Centiloid,
}

impl fmt::Display for SurrogateScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SurrogateScale::Suvr => "SUVR",
            SurrogateScale::Centiloid => "Centiloid",
        })
    }
}

impl FromStr for SurrogateScale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "suvr" => Ok(SurrogateScale::Suvr),
            "centiloid" | "cl" => Ok(SurrogateScale::Centiloid),
            other => Err(format!("unknown surrogate scale `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tracer {
    Florbetapir,
    Florbetaben,
    Flutemetamol,
    Other,
}

impl fmt::Display for Tracer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tracer::Florbetapir => "florbetapir",
            Tracer::Florbetaben => "florbetaben",
            Tracer::Flutemetamol => "flutemetamol",
            Tracer::Other => "other",
        })
    }
}

impl FromStr for Tracer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "florbetapir" => Ok(Tracer::Florbetapir),
            "florbetaben" => Ok(Tracer::Florbetaben),
            "flutemetamol" => Ok(Tracer::Flutemetamol),
            "other" => Ok(Tracer::Other),
            other => Err(format!("unknown tracer `{other}`")),
        }
    }
}

/// Clinical outcome on which the final-outcome effect is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "CDR-SOB")]
    CdrSob,
    #[serde(rename = "ADAS-Cog")]
    AdasCog,
    #[serde(rename = "MMSE")]
    Mmse,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::CdrSob => "CDR-SOB",
            Outcome::AdasCog => "ADAS-Cog",
            Outcome::Mmse => "MMSE",
        })
    }
}

impl FromStr for Outcome {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_uppercase().replace('_', "-").as_str() {
            "CDR-SOB" | "CDRSOB" | "CDR-SB" => Ok(Outcome::CdrSob),
            "ADAS-COG" | "ADASCOG" => Ok(Outcome::AdasCog),
            "MMSE" => Ok(Outcome::Mmse),
            other => Err(format!("unknown outcome `{other}`")),
        }
    }
}

/// One active-versus-placebo contrast. Effects are differences in change from
/// baseline, active minus placebo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialContrast {
    pub study_id: String,
    pub treatment: String,
    pub contrast_id: String,
    /// Effect on the surrogate.
    pub y1: f64,
    pub se1: f64,
    pub surrogate_scale: SurrogateScale,
    pub tracers: BTreeSet<Tracer>,
    /// Weeks from baseline at which `y1` was measured.
    pub t_surrogate: f64,
    /// Effect on the final clinical outcome.
    pub y2: f64,
    pub se2: f64,
    pub outcome: Outcome,
    pub adascog_variant: Option<u8>,
    pub t_final: f64,
    /// Patients contributing to `y2`.
    pub n_final: u32,
    pub rho_within: Option<f64>,
    pub aria_effect: Option<f64>,
    pub apoe_prop: Option<f64>,
    /// Set when `y1` was mapped from the other PET scale.
    pub imputed_scale: bool,
}

impl TrialContrast {
    /// Convenience constructor with the optional fields left empty.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        study_id: impl Into<String>,
        treatment: impl Into<String>,
        contrast_id: impl Into<String>,
        y1: f64,
        se1: f64,
        y2: f64,
        se2: f64,
    ) -> Self {
        TrialContrast {
            study_id: study_id.into(),
            treatment: treatment.into(),
            contrast_id: contrast_id.into(),
            y1,
            se1,
            surrogate_scale: SurrogateScale::Suvr,
            tracers: BTreeSet::from([Tracer::Florbetapir]),
            t_surrogate: 52.0,
            y2,
            se2,
            outcome: Outcome::CdrSob,
            adascog_variant: None,
            t_final: 78.0,
            n_final: 100,
            rho_within: None,
            aria_effect: None,
            apoe_prop: None,
            imputed_scale: false,
        }
    }
}

/// A collection of contrasts plus free-text provenance notes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub contrasts: Vec<TrialContrast>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(contrasts: Vec<TrialContrast>) -> Self {
        Dataset {
            contrasts,
            provenance: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.contrasts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contrasts.is_empty()
    }

    /// Study identifiers in order of first appearance.
    pub fn study_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.contrasts
            .iter()
            .filter(|c| seen.insert(c.study_id.as_str()))
            .map(|c| c.study_id.clone())
            .collect()
    }

    /// Treatment labels in order of first appearance.
    pub fn treatments(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.contrasts
            .iter()
            .filter(|c| seen.insert(c.treatment.as_str()))
            .map(|c| c.treatment.clone())
            .collect()
    }

    pub fn filter(&self, keep: impl Fn(&TrialContrast) -> bool) -> Dataset {
        Dataset {
            contrasts: self.contrasts.iter().filter(|c| keep(c)).cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Keeps only contrasts measured on `outcome`.
    pub fn with_outcome(&self, outcome: Outcome) -> Dataset {
        self.filter(|c| c.outcome == outcome)
    }

    /// Resolves repeated time points of the same comparison.
    ///
    /// Rows belong to the same comparison when they share `study_id`,
    /// `outcome` and the part of `contrast_id` before an optional `@` suffix
    /// (for example `high@26` and `high@78`).
    pub fn select_timepoints(&self, policy: TimepointPolicy) -> Dataset {
        let mut best: BTreeMap<(String, Outcome, String), usize> = BTreeMap::new();
        for (idx, c) in self.contrasts.iter().enumerate() {
            let base = c.contrast_id.split('@').next().unwrap_or("").to_string();
            let key = (c.study_id.clone(), c.outcome, base);
            match best.get(&key) {
                None => {
                    best.insert(key, idx);
                }
                Some(&cur) => {
                    if policy.prefers(c, &self.contrasts[cur]) {
                        best.insert(key, idx);
                    }
                }
            }
        }
        let keep: HashSet<usize> = best.into_values().collect();
        Dataset {
            contrasts: self
                .contrasts
                .iter()
                .enumerate()
                .filter(|(i, _)| keep.contains(i))
                .map(|(_, c)| c.clone())
                .collect(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Which time point to keep when a comparison is reported more than once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimepointPolicy {
    /// Earliest surrogate measurement (ties broken by latest final outcome).
    #[default]
    Earliest,
    /// Surrogate and final outcome at the same time point, or closest.
    Matched,
}

impl TimepointPolicy {
    fn prefers(self, candidate: &TrialContrast, current: &TrialContrast) -> bool {
        match self {
            TimepointPolicy::Earliest => {
                candidate.t_surrogate < current.t_surrogate
                    || (candidate.t_surrogate == current.t_surrogate
                        && candidate.t_final > current.t_final)
            }
            TimepointPolicy::Matched => {
                let gap = |c: &TrialContrast| (c.t_surrogate - c.t_final).abs();
                gap(candidate) < gap(current)
                    || (gap(candidate) == gap(current) && candidate.t_final > current.t_final)
            }
        }
    }
}

impl FromStr for TimepointPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "earliest" | "earliest-surrogate" => Ok(TimepointPolicy::Earliest),
            "matched" => Ok(TimepointPolicy::Matched),
            other => Err(format!("unknown timepoint policy `{other}`")),
        }
    }
}

pub const REQUIRED_COLUMNS: [&str; 13] = [
    "study_id",
    "treatment",
    "contrast_id",
    "y1",
    "se1",
    "surrogate_scale",
    "tracers",
    "t_surrogate_weeks",
    "y2",
    "se2",
    "outcome",
    "t_final_weeks",
    "n_final",
];

pub const OPTIONAL_COLUMNS: [&str; 5] = [
    "adascog_variant",
    "rho_within",
    "aria_effect",
    "apoe_prop",
    "imputed_scale",
];

struct RowReader<'a> {
    record: &'a csv::StringRecord,
    index: &'a BTreeMap<&'static str, usize>,
    line: u64,
}

impl RowReader<'_> {
    fn cell(&self, column: &'static str) -> Option<&str> {
        self.index
            .get(column)
            .and_then(|&i| self.record.get(i))
            .map(str::trim)
            .filter(|s| !s.is_empty())
    }

    fn bad(&self, column: &str, message: impl Into<String>) -> SurrogacyError {
        SurrogacyError::MalformedRow {
            line: self.line,
            column: column.to_string(),
            message: message.into(),
        }
    }

    fn text(&self, column: &'static str) -> Result<String> {
        self.cell(column)
            .map(str::to_string)
            .ok_or_else(|| self.bad(column, "empty required cell"))
    }

    fn parsed<T: FromStr>(&self, column: &'static str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self
            .cell(column)
            .ok_or_else(|| self.bad(column, "empty required cell"))?;
        raw.parse::<T>()
            .map_err(|e| self.bad(column, format!("`{raw}`: {e}")))
    }

    fn optional<T: FromStr>(&self, column: &'static str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.cell(column) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| self.bad(column, format!("`{raw}`: {e}"))),
        }
    }
}

fn parse_flag(raw: &str) -> Result<bool, String> {
    match raw.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        other => Err(format!("not a boolean: `{other}`")),
    }
}

/// Parses the contrast CSV layout. Unknown columns are ignored and row order
/// is preserved.
pub fn parse_dataset<R: Read>(source: R) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let mut index: BTreeMap<&'static str, usize> = BTreeMap::new();
    for name in REQUIRED_COLUMNS.iter().chain(OPTIONAL_COLUMNS.iter()) {
        if let Some(pos) = headers.iter().position(|h| h == *name) {
            index.insert(name, pos);
        }
    }
    for name in REQUIRED_COLUMNS {
        if !index.contains_key(name) {
            return Err(SurrogacyError::MissingColumn(name.to_string()));
        }
    }

    let mut contrasts = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row = RowReader {
            record: &record,
            index: &index,
            line,
        };
        let tracers = row
            .text("tracers")?
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<Tracer>().map_err(|e| row.bad("tracers", e)))
            .collect::<Result<BTreeSet<_>>>()?;
        let imputed_scale = match row.cell("imputed_scale") {
            None => false,
            Some(raw) => parse_flag(raw).map_err(|e| row.bad("imputed_scale", e))?,
        };
        let contrast = TrialContrast {
            study_id: row.text("study_id")?,
            treatment: row.text("treatment")?,
            contrast_id: row.text("contrast_id")?,
            y1: row.parsed("y1")?,
            se1: row.parsed("se1")?,
            surrogate_scale: row.parsed("surrogate_scale")?,
            tracers,
            t_surrogate: row.parsed("t_surrogate_weeks")?,
            y2: row.parsed("y2")?,
            se2: row.parsed("se2")?,
            outcome: row.parsed("outcome")?,
            adascog_variant: row.optional("adascog_variant")?,
            t_final: row.parsed("t_final_weeks")?,
            n_final: row.parsed("n_final")?,
            rho_within: row.optional("rho_within")?,
            aria_effect: row.optional("aria_effect")?,
            apoe_prop: row.optional("apoe_prop")?,
            imputed_scale,
        };
        if !seen.insert((contrast.study_id.clone(), contrast.contrast_id.clone())) {
            return Err(SurrogacyError::DuplicateContrast {
                study_id: contrast.study_id,
                contrast_id: contrast.contrast_id,
            });
        }
        contrasts.push(contrast);
    }
    Ok(Dataset {
        contrasts,
        provenance: String::new(),
    })
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

/// Writes a dataset in the same CSV layout that [`parse_dataset`] reads,
/// including the `imputed_scale` flag column.
pub fn write_dataset<W: Write>(dataset: &Dataset, sink: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    let header: Vec<&str> = [
        "study_id",
        "treatment",
        "contrast_id",
        "y1",
        "se1",
        "surrogate_scale",
        "tracers",
        "t_surrogate_weeks",
        "y2",
        "se2",
        "outcome",
        "adascog_variant",
        "t_final_weeks",
        "n_final",
        "rho_within",
        "aria_effect",
        "apoe_prop",
        "imputed_scale",
    ]
    .to_vec();
    writer.write_record(&header)?;
    for c in &dataset.contrasts {
        let tracers: Vec<String> = c.tracers.iter().map(Tracer::to_string).collect();
        writer.write_record([
            c.study_id.clone(),
            c.treatment.clone(),
            c.contrast_id.clone(),
            c.y1.to_string(),
            c.se1.to_string(),
            c.surrogate_scale.to_string(),
            tracers.join(";"),
            c.t_surrogate.to_string(),
            c.y2.to_string(),
            c.se2.to_string(),
            c.outcome.to_string(),
            opt(&c.adascog_variant),
            c.t_final.to_string(),
            c.n_final.to_string(),
            opt(&c.rho_within),
            opt(&c.aria_effect),
            opt(&c.apoe_prop),
            c.imputed_scale.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub study_id: Option<String>,
    pub contrast_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn has_errors(&self) -> bool {
        self.findings.iter().any(|f| f.severity == Severity::Error)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings
            .iter()
            .filter(|f| f.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Finding> {
        self.findings
            .iter()
            .filter(|f| f.severity == Severity::Warning)
    }
}

/// Checks schema invariants. Problems are returned as findings, never as
/// errors.
pub fn validate_dataset(d: &Dataset) -> ValidationReport {
    let mut findings = Vec::new();
    let mut push = |severity, c: Option<&TrialContrast>, message: String| {
        findings.push(Finding {
            severity,
            study_id: c.map(|c| c.study_id.clone()),
            contrast_id: c.map(|c| c.contrast_id.clone()),
            message,
        })
    };

    if d.is_empty() {
        push(Severity::Error, None, "dataset has no contrasts".into());
    }

    let mut seen = HashSet::new();
    for c in &d.contrasts {
        if !seen.insert((&c.study_id, &c.contrast_id)) {
            push(Severity::Error, Some(c), "duplicate contrast id".into());
        }
        for (name, v) in [("y1", c.y1), ("y2", c.y2), ("se1", c.se1), ("se2", c.se2)] {
            if !v.is_finite() {
                push(Severity::Error, Some(c), format!("non-finite {name}"));
            }
        }
        if !(c.se1 > 0.0) || !(c.se2 > 0.0) {
            push(
                Severity::Error,
                Some(c),
                "nonpositive standard error".into(),
            );
        }
        if c.n_final == 0 {
            push(
                Severity::Error,
                Some(c),
                "n_final must be at least 1".into(),
            );
        }
        if let Some(rho) = c.rho_within {
            if !(rho > -1.0 && rho < 1.0) {
                push(
                    Severity::Error,
                    Some(c),
                    format!("rho_within {rho} outside (-1, 1)"),
                );
            }
        }
        if let Some(p) = c.apoe_prop {
            if !(0.0..=1.0).contains(&p) {
                push(
                    Severity::Error,
                    Some(c),
                    format!("apoe_prop {p} outside [0, 1]"),
                );
            }
        }
        if let Some(v) = c.adascog_variant {
            if !matches!(v, 11..=14) {
                push(
                    Severity::Error,
                    Some(c),
                    format!("ADAS-Cog variant {v} not in 11..=14"),
                );
            }
            if c.outcome != Outcome::AdasCog {
                push(
                    Severity::Warning,
                    Some(c),
                    "adascog_variant given for a non-ADAS-Cog outcome".into(),
                );
            }
        }
        if c.tracers.is_empty() {
            push(Severity::Warning, Some(c), "no tracer listed".into());
        }
        if c.t_surrogate < 0.0 || c.t_final < 0.0 {
            push(Severity::Error, Some(c), "negative follow-up time".into());
        }
    }

    let variants: BTreeSet<u8> = d
        .contrasts
        .iter()
        .filter(|c| c.outcome == Outcome::AdasCog)
        .filter_map(|c| c.adascog_variant)
        .collect();
    if variants.len() > 1 {
        let list: Vec<String> = variants.iter().map(u8::to_string).collect();
        push(
            Severity::Warning,
            None,
            format!("mixed ADAS-Cog variants ({})", list.join(", ")),
        );
    }
    let scales: BTreeSet<SurrogateScale> = d.contrasts.iter().map(|c| c.surrogate_scale).collect();
    if scales.len() > 1 {
        push(
            Severity::Warning,
            None,
            "mixed surrogate scales; harmonize before fitting".into(),
        );
    }
    ValidationReport { findings }
}

/// How within-study covariance blocks are assembled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceOptions {
    /// Surrogate/final correlation used when a contrast has no `rho_within`.
    pub default_rho: f64,
    /// Correlation between same-outcome effects of two contrasts that share
    /// a placebo arm.
    pub shared_control_rho: f64,
    /// Clip negative eigenvalues instead of failing.
    pub repair_psd: bool,
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        CovarianceOptions {
            default_rho: 0.0,
            shared_control_rho: 0.5,
            repair_psd: true,
        }
    }
}

/// All contrasts of one study with the joint covariance of their observed
/// effects. Rows and columns are interleaved per contrast:
/// `(y1_1, y2_1, y1_2, y2_2, ...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyBlock {
    pub study_id: String,
    pub contrasts: Vec<TrialContrast>,
    pub sigma_within: DMatrix<f64>,
    /// Smallest eigenvalue before any repair.
    pub min_eigenvalue: f64,
    pub repaired: bool,
}

impl StudyBlock {
    pub fn len(&self) -> usize {
        self.contrasts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contrasts.is_empty()
    }
}

/// Covariance of the interleaved `(y1, y2)` effects for the given contrasts.
pub fn within_study_covariance(
    contrasts: &[TrialContrast],
    default_rho: f64,
    shared_control_rho: f64,
) -> DMatrix<f64> {
    let k = contrasts.len();
    let rho: Vec<f64> = contrasts
        .iter()
        .map(|c| c.rho_within.unwrap_or(default_rho))
        .collect();
    let mut sigma = DMatrix::zeros(2 * k, 2 * k);
    for a in 0..k {
        let ca = &contrasts[a];
        sigma[(2 * a, 2 * a)] = ca.se1 * ca.se1;
        sigma[(2 * a + 1, 2 * a + 1)] = ca.se2 * ca.se2;
        let cross = rho[a] * ca.se1 * ca.se2;
        sigma[(2 * a, 2 * a + 1)] = cross;
        sigma[(2 * a + 1, 2 * a)] = cross;
        for b in a + 1..k {
            let cb = &contrasts[b];
            let rho_ab = 0.5 * (rho[a] + rho[b]);
            let entries = [
                ((2 * a, 2 * b), shared_control_rho * ca.se1 * cb.se1),
                ((2 * a + 1, 2 * b + 1), shared_control_rho * ca.se2 * cb.se2),
                ((2 * a, 2 * b + 1), shared_control_rho * rho_ab * ca.se1 * cb.se2),
                ((2 * a + 1, 2 * b), shared_control_rho * rho_ab * ca.se2 * cb.se1),
            ];
            for ((i, j), v) in entries {
                sigma[(i, j)] = v;
                sigma[(j, i)] = v;
            }
        }
    }
    sigma
}

/// Eigenvalues below this are treated as a PSD violation.
pub const PSD_TOLERANCE: f64 = -1e-10;

/// Groups contrasts by study (first-appearance order) and builds the
/// within-study covariance of each block.
pub fn build_study_blocks(d: &Dataset, opts: &CovarianceOptions) -> Result<Vec<StudyBlock>> {
    for (name, v) in [
        ("default_rho", opts.default_rho),
        ("shared_control_rho", opts.shared_control_rho),
    ] {
        if !(v > -1.0 && v < 1.0) {
            return Err(SurrogacyError::InvalidConfig(format!(
                "{name} = {v} must lie in (-1, 1)"
            )));
        }
    }
    let mut blocks = Vec::new();
    for study in d.study_ids() {
        let contrasts: Vec<TrialContrast> = d
            .contrasts
            .iter()
            .filter(|c| c.study_id == study)
            .cloned()
            .collect();
        let mut sigma =
            within_study_covariance(&contrasts, opts.default_rho, opts.shared_control_rho);
        let eig = SymmetricEigen::new(sigma.clone());
        let min_eigenvalue = eig.eigenvalues.min();
        let mut repaired = false;
        if min_eigenvalue < PSD_TOLERANCE {
            if !opts.repair_psd {
                return Err(SurrogacyError::NotPositiveSemiDefinite(study));
            }
            log::warn!(
                "study {study}: within-study covariance has eigenvalue {min_eigenvalue:.3e}; clipping at 0"
            );
            sigma = crate::linalg::clip_eigenvalues(&eig, 0.0);
            repaired = true;
        }
        blocks.push(StudyBlock {
            study_id: study,
            contrasts,
            sigma_within: sigma,
            min_eigenvalue,
            repaired,
        });
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const HEADER: &str = "study_id,treatment,contrast_id,y1,se1,surrogate_scale,tracers,t_surrogate_weeks,y2,se2,outcome,adascog_variant,t_final_weeks,n_final,rho_within,aria_effect,apoe_prop\n";

    #[test]
    fn parses_two_rows() {
        let text = format!(
            "{HEADER}S1,lecanemab,c1,-0.2,0.02,SUVR,florbetapir,18,-0.4,0.2,CDR-SOB,,78,300,,,\n\
             S2,aducanumab,c1,-0.25,0.03,SUVR,florbetapir;florbetaben,26,-0.3,0.15,CDR-SOB,,78,500,0.2,0.3,0.65\n"
        );
        let d = parse_dataset(text.as_bytes()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.study_ids(), vec!["S1", "S2"]);
        assert_eq!(d.contrasts[1].tracers.len(), 2);
        assert_eq!(d.contrasts[1].rho_within, Some(0.2));
        assert_eq!(d.contrasts[0].rho_within, None);
        assert!(validate_dataset(&d).findings.is_empty());
    }

    #[test]
    fn missing_se2_column() {
        let text = "study_id,treatment,contrast_id,y1,se1,surrogate_scale,tracers,t_surrogate_weeks,y2,outcome,t_final_weeks,n_final\n";
        match parse_dataset(text.as_bytes()) {
            Err(SurrogacyError::MissingColumn(c)) => assert_eq!(c, "se2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_cell_reports_line() {
        let text =
            format!("{HEADER}S1,x,c1,abc,0.02,SUVR,florbetapir,18,-0.4,0.2,CDR-SOB,,78,300,,,\n");
        match parse_dataset(text.as_bytes()) {
            Err(SurrogacyError::MalformedRow { line, column, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(column, "y1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_contrast_rejected() {
        let row = "S1,x,c1,-0.2,0.02,SUVR,florbetapir,18,-0.4,0.2,CDR-SOB,,78,300,,,\n";
        let text = format!("{HEADER}{row}{row}");
        assert!(matches!(
            parse_dataset(text.as_bytes()),
            Err(SurrogacyError::DuplicateContrast { .. })
        ));
    }

    #[test]
    fn validation_flags_zero_se_and_mixed_variants() {
        let mut a = TrialContrast::new("S1", "x", "c1", -0.2, 0.0, -0.3, 0.2);
        a.outcome = Outcome::AdasCog;
        a.adascog_variant = Some(11);
        let mut b = TrialContrast::new("S2", "x", "c1", -0.2, 0.02, -0.3, 0.2);
        b.outcome = Outcome::AdasCog;
        b.adascog_variant = Some(13);
        let report = validate_dataset(&Dataset::new(vec![a, b]));
        assert!(report
            .errors()
            .any(|f| f.message == "nonpositive standard error"));
        assert!(report
            .warnings()
            .any(|f| f.message.starts_with("mixed ADAS-Cog variants")));
    }

    #[test]
    fn single_contrast_block_matches_formula() {
        let mut c = TrialContrast::new("S1", "x", "c1", -0.2, 0.1, -0.3, 0.3);
        c.rho_within = Some(0.2);
        let blocks =
            build_study_blocks(&Dataset::new(vec![c]), &CovarianceOptions::default()).unwrap();
        let s = &blocks[0].sigma_within;
        assert_abs_diff_eq!(s[(0, 0)], 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(s[(0, 1)], 0.006, epsilon = 1e-15);
        assert_abs_diff_eq!(s[(1, 0)], 0.006, epsilon = 1e-15);
        assert_abs_diff_eq!(s[(1, 1)], 0.09, epsilon = 1e-15);
        assert!(!blocks[0].repaired);
    }

    #[test]
    fn independent_arms_give_block_diagonal() {
        let a = TrialContrast::new("S1", "x", "c1", -0.2, 0.1, -0.3, 0.3);
        let b = TrialContrast::new("S1", "x", "c2", -0.1, 0.2, -0.2, 0.4);
        let opts = CovarianceOptions {
            default_rho: 0.3,
            shared_control_rho: 0.0,
            repair_psd: true,
        };
        let s = &build_study_blocks(&Dataset::new(vec![a, b]), &opts).unwrap()[0].sigma_within;
        for i in 0..2 {
            for j in 2..4 {
                assert_eq!(s[(i, j)], 0.0);
                assert_eq!(s[(j, i)], 0.0);
            }
        }
    }

    #[test]
    fn shared_control_entries_and_psd() {
        let a = TrialContrast::new("S1", "x", "c1", -0.2, 0.1, -0.3, 0.1);
        let b = TrialContrast::new("S1", "x", "c2", -0.1, 0.1, -0.2, 0.1);
        let opts = CovarianceOptions {
            default_rho: 0.2,
            shared_control_rho: 0.5,
            repair_psd: true,
        };
        let block = &build_study_blocks(&Dataset::new(vec![a, b]), &opts).unwrap()[0];
        let s = &block.sigma_within;
        assert_abs_diff_eq!(s[(0, 2)], 0.5 * 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(s[(1, 3)], 0.5 * 0.01, epsilon = 1e-15);
        // Eigenvalues of (compound symmetry) x (2x2 correlation), times se^2.
        let eig = SymmetricEigen::new(s.clone()).eigenvalues;
        let mut got: Vec<f64> = eig.iter().copied().collect();
        got.sort_by(f64::total_cmp);
        let mut expected = vec![];
        for cs in [0.5, 1.5] {
            for r in [0.8, 1.2] {
                expected.push(0.01 * cs * r);
            }
        }
        expected.sort_by(f64::total_cmp);
        for (g, e) in got.iter().zip(&expected) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-14);
        }
        assert!(block.min_eigenvalue > 0.0);
    }

    #[test]
    fn indefinite_block_is_repaired_or_rejected() {
        let mut a = TrialContrast::new("S1", "x", "c1", -0.2, 0.1, -0.3, 0.1);
        a.rho_within = Some(0.95);
        let mut b = TrialContrast::new("S1", "x", "c2", -0.1, 0.1, -0.2, 0.1);
        b.rho_within = Some(-0.95);
        let d = Dataset::new(vec![a, b]);
        let mut opts = CovarianceOptions {
            default_rho: 0.0,
            shared_control_rho: 0.95,
            repair_psd: false,
        };
        assert!(matches!(
            build_study_blocks(&d, &opts),
            Err(SurrogacyError::NotPositiveSemiDefinite(_))
        ));
        opts.repair_psd = true;
        let block = &build_study_blocks(&d, &opts).unwrap()[0];
        assert!(block.repaired);
        assert!(block.min_eigenvalue < PSD_TOLERANCE);
        let min = SymmetricEigen::new(block.sigma_within.clone())
            .eigenvalues
            .min();
        assert!(min > -1e-12);
    }

    #[test]
    fn timepoint_policies() {
        let mut early = TrialContrast::new("S1", "x", "hi@26", -0.1, 0.02, -0.2, 0.2);
        early.t_surrogate = 26.0;
        early.t_final = 78.0;
        let mut late = TrialContrast::new("S1", "x", "hi@78", -0.2, 0.02, -0.2, 0.2);
        late.t_surrogate = 78.0;
        late.t_final = 78.0;
        let d = Dataset::new(vec![early, late]);
        let e = d.select_timepoints(TimepointPolicy::Earliest);
        assert_eq!(e.contrasts.len(), 1);
        assert_eq!(e.contrasts[0].contrast_id, "hi@26");
        let m = d.select_timepoints(TimepointPolicy::Matched);
        assert_eq!(m.contrasts[0].contrast_id, "hi@78");
    }

    #[test]
    fn write_then_parse_round_trips() {
        let mut c = TrialContrast::new("S1", "x", "c1", -0.2, 0.02, -0.3, 0.2);
        c.imputed_scale = true;
        c.apoe_prop = Some(0.7);
        let d = Dataset::new(vec![c]);
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let back = parse_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, d);
    }
}
