use serde::{Deserialize, Serialize};

use super::{pooled_column, Chain};
use crate::error::Result;

/// Posterior mean, SD and central quantiles of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q2_5: f64,
    pub q50: f64,
    pub q97_5: f64,
}

impl PosteriorSummary {
    pub fn contains(&self, x: f64) -> bool {
        self.q2_5 <= x && x <= self.q97_5
    }

    pub fn width(&self) -> f64 {
        self.q97_5 - self.q2_5
    }
}

/// Quantile of sorted data by linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize_values(name: &str, values: &[f64]) -> PosteriorSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    PosteriorSummary {
        name: name.to_string(),
        mean,
        sd,
        q2_5: quantile_sorted(&sorted, 0.025),
        q50: quantile_sorted(&sorted, 0.5),
        q97_5: quantile_sorted(&sorted, 0.975),
    }
}

/// Summary over draws pooled across chains.
pub fn summarize(chains: &[Chain], name: &str) -> Result<PosteriorSummary> {
    Ok(summarize_values(name, &pooled_column(chains, name)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::SurrogacyError;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn small_sample() {
        let s = summarize_values("x", &[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.q50, 3.0);
        assert_eq!(s.q2_5, 1.1);
        assert!((s.q97_5 - 4.9).abs() < 1e-12);
    }

    #[test]
    fn normal_upper_quantile() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
        let s = summarize_values("z", &v);
        assert!((s.q97_5 - 1.959964).abs() < 0.03);
        assert!(s.q2_5 <= s.q50 && s.q50 <= s.q97_5);
    }

    #[test]
    fn unknown_parameter() {
        let c = Chain {
            names: vec!["a".into()],
            draws: vec![1.0, 2.0],
            iterations: vec![1, 2],
            acceptance: vec![],
            step_sizes: vec![],
        };
        assert!(matches!(
            summarize(&[c], "b"),
            Err(SurrogacyError::UnknownParameter(_))
        ));
    }
}
