//! Effective sample size, rank-normalised split-R̂ and autocorrelations.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::Chain;
use crate::error::{Result, SurrogacyError};

pub const MAX_LAG: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostics {
    pub name: String,
    pub ess: f64,
    /// Only defined with two or more chains.
    pub rhat: Option<f64>,
    /// Lags 1..=50, averaged over chains.
    pub autocorrelation: Vec<f64>,
    /// The parameter never moved.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub parameters: Vec<ParameterDiagnostics>,
    pub total_draws: usize,
}

impl DiagnosticsReport {
    pub fn get(&self, name: &str) -> Option<&ParameterDiagnostics> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Biased autocovariance at `lag`.
fn autocov(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    if lag >= n {
        return 0.0;
    }
    x[..n - lag]
        .iter()
        .zip(&x[lag..])
        .map(|(a, b)| (a - m) * (b - m))
        .sum::<f64>()
        / n as f64
}

/// Sample autocorrelation of one sequence at lags `1..=max_lag`.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let m = mean(x);
    let c0 = autocov(x, m, 0);
    (1..=max_lag)
        .map(|k| if c0 > 0.0 { autocov(x, m, k) / c0 } else { 0.0 })
        .collect()
}

/// Multi-chain ESS with Geyer's initial monotone positive sequence.
/// Chains are truncated to the shortest length.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let nf = n as f64;
    let within: f64 = chains
        .iter()
        .zip(&means)
        .map(|(c, &mu)| autocov(c, mu, 0) * nf / (nf - 1.0))
        .sum::<f64>()
        / m as f64;
    let var_plus = if m > 1 {
        let grand = mean(&means);
        let between =
            nf / (m as f64 - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
        within * (nf - 1.0) / nf + between / nf
    } else {
        within * (nf - 1.0) / nf
    };
    if !(var_plus > 0.0) {
        return f64::NAN;
    }
    let rho = |t: usize| -> f64 {
        let mean_acov = chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocov(c, mu, t))
            .sum::<f64>()
            / m as f64;
        1.0 - (within - mean_acov) / var_plus
    };
    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let mut pair = rho(t) + rho(t + 1);
        if pair <= 0.0 {
            break;
        }
        pair = pair.min(prev_pair);
        sum_pairs += pair;
        prev_pair = pair;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / (m as f64 * nf).log10().max(1.0));
    let total = (m * n) as f64;
    (total / tau).min(total)
}

fn rhat_raw(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let between = n / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let within = chains
        .iter()
        .zip(&means)
        .map(|(c, &mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    let var_plus = (n - 1.0) / n * within + between / n;
    (var_plus / within).sqrt()
}

fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(Vec::len).sum();
    let mut flat: Vec<(f64, usize)> = chains
        .iter()
        .flatten()
        .copied()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    flat.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && flat[j + 1].0 == flat[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for item in &flat[i..=j] {
            ranks[item.1] = avg;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let s = total as f64;
    let z: Vec<f64> = ranks
        .iter()
        .map(|r| normal.inverse_cdf((r - 0.375) / (s + 0.25)))
        .collect();
    let mut out = Vec::with_capacity(chains.len());
    let mut offset = 0;
    for c in chains {
        out.push(z[offset..offset + c.len()].to_vec());
        offset += c.len();
    }
    out
}

/// Rank-normalised split-R̂ (maximum of bulk and folded versions). Needs at
/// least two chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.len() < 2 {
        return None;
    }
    let n = chains.iter().map(Vec::len).min()?;
    let half = n / 2;
    if half < 2 {
        return None;
    }
    let mut split = Vec::with_capacity(2 * chains.len());
    for c in chains {
        split.push(c[..half].to_vec());
        split.push(c[n - half..n].to_vec());
    }
    let bulk = rhat_raw(&rank_normalize(&split));
    let mut all: Vec<f64> = split.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    let median = super::quantile_sorted(&all, 0.5);
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|x| (x - median).abs()).collect())
        .collect();
    let tail = rhat_raw(&rank_normalize(&folded));
    let r = bulk.max(tail);
    r.is_finite().then_some(r)
}

/// ESS, split-R̂ and lag-1..50 autocorrelations for every recorded column.
pub fn diagnostics(chains: &[Chain]) -> Result<DiagnosticsReport> {
    let first = chains
        .first()
        .ok_or_else(|| SurrogacyError::InsufficientData("no chains".into()))?;
    let min_len = chains.iter().map(Chain::len).min().unwrap_or(0);
    if min_len < super::MIN_RETAINED {
        return Err(SurrogacyError::InsufficientData(format!(
            "diagnostics need at least {} draws per chain, found {min_len}",
            super::MIN_RETAINED
        )));
    }
    let mut parameters = Vec::with_capacity(first.n_params());
    for (j, name) in first.names.iter().enumerate() {
        let cols: Vec<Vec<f64>> = chains.iter().map(|c| c.column_at(j)).collect();
        let lo = cols.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let hi = cols
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let degenerate = lo == hi;
        if degenerate {
            parameters.push(ParameterDiagnostics {
                name: name.clone(),
                ess: f64::NAN,
                rhat: None,
                autocorrelation: vec![f64::NAN; MAX_LAG],
                degenerate,
            });
            continue;
        }
        let lags = MAX_LAG.min(min_len - 1);
        let mut acf = vec![0.0; lags];
        for c in &cols {
            for (a, r) in acf.iter_mut().zip(autocorrelation(c, lags)) {
                *a += r / cols.len() as f64;
            }
        }
        parameters.push(ParameterDiagnostics {
            name: name.clone(),
            ess: effective_sample_size(&cols),
            rhat: split_rhat(&cols),
            autocorrelation: acf,
            degenerate,
        });
    }
    Ok(DiagnosticsReport {
        parameters,
        total_draws: chains.iter().map(Chain::len).sum(),
    })
}
