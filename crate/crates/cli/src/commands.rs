use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::warn;
use serde::{Deserialize, Serialize};
use surrogacy::crossval::{loo_metrics, loo_predict, read_records};
use surrogacy::data::{
    parse_dataset, validate_dataset, write_dataset, Dataset, Severity, SurrogateScale,
};
use surrogacy::mcmc::{Chain, McmcSettings};
use surrogacy::model::{
    fit_hierarchical, fit_pooled, fit_subgroup, width_reduction, HierarchicalMode,
    HierarchicalPosterior, ModelKind, NormalPrior, PriorConfig, PsiPrior, SurrogacyPosterior,
    MIN_CONTRASTS,
};
use surrogacy::report::{build_report, emit_plot_data, emit_report, FitResults, RunConfig};
use surrogacy::scale::harmonize_surrogate_scale;
use surrogacy::simgen::{sbc_run, simulate_dataset, SimDesign};
use surrogacy::SurrogacyError;

use crate::{usage, SbcArgs, SimArgs};

fn read_dataset(path: &Path) -> Result<Dataset> {
    let file =
        File::open(path).map_err(|e| usage(format!("cannot open {}: {e}", path.display())))?;
    let mut d = parse_dataset(file)?;
    if d.provenance.is_empty() {
        d.provenance = path.display().to_string();
    }
    Ok(d)
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

pub fn validate(input: &Path) -> Result<()> {
    let d = read_dataset(input)?;
    let report = validate_dataset(&d);
    for f in &report.findings {
        let tag = match f.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        let at = match (&f.study_id, &f.contrast_id) {
            (Some(s), Some(c)) => format!(" [{s}/{c}]"),
            (Some(s), None) => format!(" [{s}]"),
            _ => String::new(),
        };
        println!("{tag}{at}: {}", f.message);
    }
    println!(
        "{} contrasts, {} studies, {} error(s), {} warning(s)",
        d.len(),
        d.study_ids().len(),
        report.errors().count(),
        report.warnings().count()
    );
    if report.has_errors() {
        return Err(usage("validation failed"));
    }
    Ok(())
}

pub fn convert(input: &Path, target: SurrogateScale, output: Option<&Path>) -> Result<()> {
    let d = read_dataset(input)?;
    let before = d.contrasts.iter().filter(|c| c.imputed_scale).count();
    let out = harmonize_surrogate_scale(&d, target)?;
    let after = out.contrasts.iter().filter(|c| c.imputed_scale).count();
    write_dataset(&out, sink(output)?)?;
    eprintln!(
        "{} row(s) converted to {target} and flagged imputed",
        after - before
    );
    Ok(())
}

/// Where the draws of each fit are stored, so `report` can rebuild output.
#[derive(Debug, Default, Serialize, Deserialize)]
struct DrawManifest {
    entries: Vec<DrawEntry>,
    loo: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct DrawEntry {
    section: String,
    treatment: Option<String>,
    treatments: Vec<String>,
    n_studies: usize,
    n_contrasts: usize,
    files: Vec<String>,
}

const DRAWS_DIR: &str = "draws";

fn save_chains(dir: &Path, stem: &str, chains: &[Chain]) -> Result<Vec<String>> {
    let mut files = Vec::new();
    for (k, c) in chains.iter().enumerate() {
        let name = format!("{stem}.chain{k}.csv");
        c.write_csv(BufWriter::new(File::create(dir.join(&name))?))?;
        files.push(name);
    }
    Ok(files)
}

fn save_draws(out: &Path, results: &FitResults) -> Result<()> {
    let dir = out.join(DRAWS_DIR);
    std::fs::create_dir_all(&dir)?;
    let mut manifest = DrawManifest {
        loo: results.loo.is_some(),
        ..DrawManifest::default()
    };
    let mut add =
        |section: &str, treatment: Option<String>, p: &SurrogacyPosterior, stem: String| {
            let files = save_chains(&dir, &stem, &p.chains)?;
            manifest.entries.push(DrawEntry {
                section: section.into(),
                treatment,
                treatments: Vec::new(),
                n_studies: p.n_studies,
                n_contrasts: p.n_contrasts,
                files,
            });
            anyhow::Ok(())
        };
    if let Some(p) = &results.pooled {
        add("pooled", None, p, "pooled".into())?;
    }
    for (i, (t, p)) in results.subgroups.iter().enumerate() {
        add("subgroup", Some(t.clone()), p, format!("subgroup{i}"))?;
    }
    if let Some(h) = &results.hierarchical {
        let section = mode_label(h.mode);
        manifest.entries.push(DrawEntry {
            section: section.into(),
            treatment: None,
            treatments: h.treatments.clone(),
            n_studies: h.n_studies,
            n_contrasts: h.n_contrasts,
            files: save_chains(&dir, section, &h.chains)?,
        });
    }
    let mut w = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.flush()?;
    Ok(())
}

fn mode_label(mode: HierarchicalMode) -> &'static str {
    match mode {
        HierarchicalMode::Full => "full",
        HierarchicalMode::Partial => "partial",
    }
}

fn write_outputs(c: &RunConfig, data: &Dataset, results: &FitResults) -> Result<()> {
    let out = &c.output_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), c.to_toml()?)?;
    save_draws(out, results)?;
    let report = build_report(c, data, results)?;
    emit_report(&report, out)?;
    emit_plot_data(results, data, out)?;
    for v in &report.verdicts {
        let who = v.treatment.as_deref().unwrap_or("all treatments");
        println!(
            "{:8} {:20} slope {:.3} ({:.3}, {:.3})  psi2 {:.3}  verdict {}",
            v.section,
            who,
            v.summary.lambda1.mean,
            v.summary.lambda1.q2_5,
            v.summary.lambda1.q97_5,
            v.summary.psi2.q50,
            v.verdict.label
        );
    }
    if let Some(w) = &report.width_reduction {
        println!(
            "CrI width reduction: slope {:.0}% ({:.0}%-{:.0}%), psi2 {:.0}% ({:.0}%-{:.0}%)",
            100.0 * w.slope.mean,
            100.0 * w.slope.min,
            100.0 * w.slope.max,
            100.0 * w.psi2.mean,
            100.0 * w.psi2.min,
            100.0 * w.psi2.max
        );
    }
    if let Some(m) = report.mean_mixture_weight {
        println!("mean mixture weight {m:.2}");
    }
    if let Some(m) = &report.loo {
        println!(
            "LOO coverage {:.3}, mad {:.3}, width ratio {:.3}",
            m.coverage, m.mad, m.width_ratio
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn eligible_treatments(data: &Dataset) -> Vec<String> {
    data.treatments()
        .into_iter()
        .filter(|t| {
            let n = data.contrasts.iter().filter(|c| &c.treatment == t).count();
            if n < MIN_CONTRASTS {
                warn!("skipping subgroup fit for `{t}`: {n} contrast(s)");
            }
            n >= MIN_CONTRASTS
        })
        .collect()
}

fn subgroup_fits(
    data: &Dataset,
    blocks: &[surrogacy::data::StudyBlock],
    c: &RunConfig,
    only: Option<&str>,
) -> Result<BTreeMap<String, SurrogacyPosterior>> {
    let treatments = match only {
        Some(t) => vec![t.to_string()],
        None => eligible_treatments(data),
    };
    let mut out = BTreeMap::new();
    for t in treatments {
        let p = fit_subgroup(blocks, &t, &c.fit_options(), &c.mcmc)?;
        out.insert(t, p);
    }
    Ok(out)
}

pub fn fit(c: &RunConfig) -> Result<()> {
    let raw = read_dataset(c.input.as_deref().expect("resolved input"))?;
    let (data, blocks) = c.prepare(&raw)?;
    let opts = c.fit_options();
    let mut results = FitResults::default();
    match c.model {
        ModelKind::Pooled => results.pooled = Some(fit_pooled(&blocks, &opts, &c.mcmc)?),
        ModelKind::Subgroup => {
            results.subgroups = subgroup_fits(&data, &blocks, c, c.treatment.as_deref())?;
            if results.subgroups.is_empty() {
                return Err(SurrogacyError::InsufficientData(format!(
                    "no treatment has {MIN_CONTRASTS} or more contrasts"
                ))
                .into());
            }
        }
        ModelKind::Full | ModelKind::Partial => {
            let mode = c.model.hierarchical_mode().expect("hierarchical model");
            let hier = fit_hierarchical(&blocks, mode, &opts, &c.mcmc)?;
            let subgroups = subgroup_fits(&data, &blocks, c, None)?;
            if !subgroups.is_empty() {
                let keep: Vec<String> = subgroups.keys().cloned().collect();
                results.width_reduction = Some(width_reduction(
                    &subgroups,
                    &hier.select_treatments(&keep)?,
                )?);
            }
            results.subgroups = subgroups;
            results.hierarchical = Some(hier);
        }
    }
    write_outputs(c, &data, &results)
}

pub fn loo(c: &RunConfig) -> Result<()> {
    let raw = read_dataset(c.input.as_deref().expect("resolved input"))?;
    let (data, blocks) = c.prepare(&raw)?;
    let records = loo_predict(&blocks, c.model, &c.fit_options(), &c.mcmc)?;
    let metrics = loo_metrics(&records)?;
    let results = FitResults {
        loo: Some((records, metrics)),
        ..FitResults::default()
    };
    write_outputs(c, &data, &results)
}

pub fn simulate(args: &SimArgs) -> Result<()> {
    let mut design = match &args.design {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read design {}: {e}", p.display())))?;
            toml::from_str::<SimDesign>(&text).map_err(|e| usage(format!("invalid design: {e}")))?
        }
        None => SimDesign::reference_design(),
    };
    if let Some(seed) = args.seed {
        design.seed = seed;
    }
    let d = simulate_dataset(&design)?;
    write_dataset(&d, sink(args.output.as_deref())?)?;
    eprintln!(
        "simulated {} contrasts in {} studies",
        d.len(),
        d.study_ids().len()
    );
    Ok(())
}

/// Configuration of an `sbc` run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SbcConfig {
    design: SimDesign,
    priors: PriorConfig,
    mcmc: McmcSettings,
}

impl Default for SbcConfig {
    /// Informative priors on the scale of amyloid-PET and CDR-SOB effects, so
    /// that simulated datasets resemble real ones.
    fn default() -> Self {
        SbcConfig {
            design: SimDesign::reference_design(),
            priors: PriorConfig {
                intercept: NormalPrior::new(0.0, 0.2),
                slope: NormalPrior::new(1.5, 0.5),
                psi: PsiPrior::Uniform { upper: 0.3 },
                delta1: NormalPrior::new(-0.15, 0.1),
                ..PriorConfig::default()
            },
            mcmc: McmcSettings {
                iterations: 5_000,
                burn_in: 2_500,
                thin: 1,
                ..McmcSettings::default()
            },
        }
    }
}

#[derive(Serialize)]
struct SbcOutput<'a> {
    config: &'a SbcConfig,
    reps: usize,
    report: surrogacy::simgen::SbcReport,
}

pub fn sbc(args: &SbcArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<SbcConfig>(&text).map_err(|e| usage(format!("invalid config: {e}")))?
        }
        None => SbcConfig::default(),
    };
    let s = &mut cfg.mcmc;
    for (flag, target) in [
        (args.iterations, &mut s.iterations),
        (args.burnin, &mut s.burn_in),
        (args.thin, &mut s.thin),
        (args.chains, &mut s.chains),
    ] {
        if let Some(v) = flag {
            *target = v;
        }
    }
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    let opts = surrogacy::model::FitOptions {
        priors: cfg.priors,
        covariate: surrogacy::model::Covariate::None,
    };
    let report = sbc_run(&cfg.design, &opts, args.reps, args.model, &cfg.mcmc)?;
    for p in &report.parameters {
        let test = match p.p_value {
            Some(pv) => format!("chi-square p {pv:.3}"),
            None => "no uniformity test".into(),
        };
        println!("{:8} coverage {:.3}  {test}", p.name, p.coverage);
    }
    std::fs::create_dir_all(&args.output_dir)?;
    let mut w = BufWriter::new(File::create(args.output_dir.join("sbc.json"))?);
    serde_json::to_writer_pretty(
        &mut w,
        &SbcOutput {
            config: &cfg,
            reps: args.reps,
            report,
        },
    )?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load_chains(dir: &Path, files: &[String]) -> Result<Vec<Chain>> {
    files
        .iter()
        .map(|f| {
            let path = dir.join(f);
            let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            Ok(Chain::read_csv(file)?)
        })
        .collect()
}

pub fn report(out: &Path, psi2_threshold: Option<f64>) -> Result<()> {
    let cfg_path = out.join("config.toml");
    let text = std::fs::read_to_string(&cfg_path)
        .map_err(|e| usage(format!("cannot read {}: {e}", cfg_path.display())))?;
    let mut c = RunConfig::from_toml(&text)?;
    if let Some(t) = psi2_threshold {
        c.psi2_threshold = t;
    }
    c.output_dir = PathBuf::from(out);
    let input = c
        .input
        .clone()
        .ok_or_else(|| usage("config.toml has no input dataset"))?;
    let raw = read_dataset(&input)?;
    let (data, _) = c.prepare(&raw)?;

    let dir = out.join(DRAWS_DIR);
    let manifest: DrawManifest = serde_json::from_reader(
        File::open(dir.join("manifest.json")).context("opening draw manifest")?,
    )?;
    let mut results = FitResults::default();
    for e in &manifest.entries {
        let chains = load_chains(&dir, &e.files)?;
        match e.section.as_str() {
            "pooled" => {
                results.pooled = Some(SurrogacyPosterior::from_chains(
                    chains,
                    None,
                    e.n_studies,
                    e.n_contrasts,
                )?)
            }
            "subgroup" => {
                let t = e
                    .treatment
                    .clone()
                    .context("subgroup entry without treatment")?;
                let p = SurrogacyPosterior::from_chains(
                    chains,
                    Some(t.clone()),
                    e.n_studies,
                    e.n_contrasts,
                )?;
                results.subgroups.insert(t, p);
            }
            "full" | "partial" => {
                let mode = if e.section == "full" {
                    HierarchicalMode::Full
                } else {
                    HierarchicalMode::Partial
                };
                results.hierarchical = Some(HierarchicalPosterior::from_chains(
                    chains,
                    mode,
                    e.treatments.clone(),
                    e.n_studies,
                    e.n_contrasts,
                )?);
            }
            other => anyhow::bail!("unknown section `{other}` in draw manifest"),
        }
    }
    if let (Some(h), false) = (&results.hierarchical, results.subgroups.is_empty()) {
        let keep: Vec<String> = results.subgroups.keys().cloned().collect();
        results.width_reduction = Some(width_reduction(
            &results.subgroups,
            &h.select_treatments(&keep)?,
        )?);
    }
    if manifest.loo {
        let records = read_records(File::open(out.join("loo_forest.csv"))?)?;
        let metrics = loo_metrics(&records)?;
        results.loo = Some((records, metrics));
    }
    write_outputs(&c, &data, &results)
}
