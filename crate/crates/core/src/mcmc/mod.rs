//! Generic Gibbs / adaptive random-walk Metropolis kernel with chain
//! management, draw dumps and convergence diagnostics.

mod diagnostics;
mod summary;

pub use diagnostics::{
    autocorrelation, diagnostics, effective_sample_size, split_rhat, DiagnosticsReport,
    ParameterDiagnostics, MAX_LAG,
};
pub use summary::{quantile_sorted, summarize, summarize_values, PosteriorSummary};

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurrogacyError};

pub type ChainRng = ChaCha8Rng;

/// Run length, thinning and seeding of a sampler run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcSettings {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    /// Iterations per step-size update during burn-in.
    pub adapt_window: usize,
}

impl Default for McmcSettings {
    fn default() -> Self {
        McmcSettings {
            iterations: 100_000,
            burn_in: 50_000,
            thin: 10,
            chains: 2,
            seed: 1,
            adapt_window: 50,
        }
    }
}

pub const MIN_RETAINED: usize = 100;

impl McmcSettings {
    pub fn retained(&self) -> usize {
        if self.thin == 0 || self.burn_in >= self.iterations {
            0
        } else {
            (self.iterations - self.burn_in) / self.thin
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SurrogacyError::InvalidSettings(m));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.burn_in >= self.iterations {
            return bad(format!(
                "burn-in {} must be below iterations {}",
                self.burn_in, self.iterations
            ));
        }
        if self.thin == 0 {
            return bad("thin must be positive".into());
        }
        if self.chains == 0 {
            return bad("at least one chain is required".into());
        }
        if self.adapt_window == 0 {
            return bad("adapt_window must be positive".into());
        }
        if self.retained() < MIN_RETAINED {
            return bad(format!(
                "only {} retained draws per chain; at least {MIN_RETAINED} required",
                self.retained()
            ));
        }
        Ok(())
    }

    /// Seed of chain `index`.
    pub fn chain_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(index as u64)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Derives a well-separated seed for job `index` (a refit or a replicate)
/// from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Robbins–Monro acceptance target for random-walk blocks.
pub const TARGET_ACCEPTANCE: f64 = 0.44;

#[derive(Debug, Clone)]
struct RandomWalkBlock {
    log_step: f64,
    window_proposals: usize,
    window_accepts: usize,
    windows: usize,
    proposals: usize,
    accepts: usize,
}

impl RandomWalkBlock {
    fn new(step: f64) -> Self {
        RandomWalkBlock {
            log_step: step.ln(),
            window_proposals: 0,
            window_accepts: 0,
            windows: 0,
            proposals: 0,
            accepts: 0,
        }
    }

    fn adapt(&mut self) {
        if self.window_proposals == 0 {
            return;
        }
        self.windows += 1;
        let rate = self.window_accepts as f64 / self.window_proposals as f64;
        let gain = (self.windows as f64).powf(-0.5).min(1.0);
        self.log_step = (self.log_step + gain * (rate - TARGET_ACCEPTANCE)).clamp(-20.0, 5.0);
        self.window_proposals = 0;
        self.window_accepts = 0;
    }
}

/// Per-sweep handle given to [`Posterior::update`]: the chain's RNG and the
/// adaptive random-walk blocks.
pub struct Step<'a> {
    rng: &'a mut ChainRng,
    blocks: &'a mut [RandomWalkBlock],
    adapting: bool,
}

impl Step<'_> {
    pub fn rng(&mut self) -> &mut ChainRng {
        self.rng
    }

    /// One random-walk Metropolis update of a scalar coordinate. `log_target`
    /// returns the unnormalised log density (`-inf` outside the support).
    /// Returns the new value and its log density.
    pub fn random_walk(
        &mut self,
        block: usize,
        current: f64,
        current_lp: f64,
        mut log_target: impl FnMut(f64) -> f64,
    ) -> Result<(f64, f64)> {
        let b = &mut self.blocks[block];
        let z: f64 = self.rng.sample(StandardNormal);
        let proposal = current + b.log_step.exp() * z;
        let lp = log_target(proposal);
        if lp.is_nan() {
            return Err(SurrogacyError::Numerical(format!(
                "NaN log density in Metropolis block {block}"
            )));
        }
        let u: f64 = self.rng.random();
        let accepted = lp > f64::NEG_INFINITY && u.ln() < lp - current_lp;
        if self.adapting {
            b.window_proposals += 1;
            b.window_accepts += accepted as usize;
        } else {
            b.proposals += 1;
            b.accepts += accepted as usize;
        }
        Ok(if accepted {
            (proposal, lp)
        } else {
            (current, current_lp)
        })
    }
}

/// A posterior the kernel can sample: conjugate (Gibbs) updates run directly
/// on the state, non-conjugate coordinates go through [`Step::random_walk`].
pub trait Posterior: Sync {
    type State: Clone + Send + Sync;

    /// Names of the recorded columns.
    fn parameter_names(&self) -> Vec<String>;

    /// Number of random-walk blocks used by [`Posterior::update`].
    fn metropolis_blocks(&self) -> usize;

    fn initial_step(&self, _block: usize) -> f64 {
        0.5
    }

    /// Unnormalised log posterior; `-inf` outside the support.
    fn log_density(&self, state: &Self::State) -> f64;

    /// One full sweep over all blocks.
    fn update(&self, state: &mut Self::State, step: &mut Step<'_>) -> Result<()>;

    /// Appends the recorded columns for `state`.
    fn record(&self, state: &Self::State, out: &mut Vec<f64>);
}

/// Retained draws of one chain, row-major (draw × parameter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub names: Vec<String>,
    pub draws: Vec<f64>,
    /// Iteration number (1-based) of each retained draw.
    pub iterations: Vec<usize>,
    /// Post-burn-in acceptance rate per Metropolis block.
    pub acceptance: Vec<f64>,
    /// Final random-walk step size per block.
    pub step_sizes: Vec<f64>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column_at(&self, j: usize) -> Vec<f64> {
        let p = self.n_params();
        (0..self.len()).map(|i| self.draws[i * p + j]).collect()
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        self.index_of(name)
            .map(|j| self.column_at(j))
            .ok_or_else(|| SurrogacyError::UnknownParameter(name.to_string()))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_params();
        &self.draws[i * p..(i + 1) * p]
    }

    /// Writes `iteration,<param>...` rows.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["iteration".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.iterations[i].to_string()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(source: R) -> Result<Chain> {
        let mut r = csv::Reader::from_reader(source);
        let headers = r.headers()?.clone();
        if headers.get(0) != Some("iteration") {
            return Err(SurrogacyError::MissingColumn("iteration".into()));
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut draws = Vec::new();
        let mut iterations = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let bad = |column: &str, e: String| SurrogacyError::MalformedRow {
                line,
                column: column.to_string(),
                message: e,
            };
            iterations.push(
                rec[0]
                    .parse::<usize>()
                    .map_err(|e| bad("iteration", e.to_string()))?,
            );
            for (j, name) in names.iter().enumerate() {
                draws.push(
                    rec.get(j + 1)
                        .unwrap_or("")
                        .parse::<f64>()
                        .map_err(|e| bad(name, e.to_string()))?,
                );
            }
        }
        Ok(Chain {
            names,
            draws,
            iterations,
            acceptance: Vec::new(),
            step_sizes: Vec::new(),
        })
    }
}

/// Concatenates a column across chains.
pub fn pooled_column(chains: &[Chain], name: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for c in chains {
        out.extend(c.column(name)?);
    }
    if chains.is_empty() {
        return Err(SurrogacyError::UnknownParameter(name.to_string()));
    }
    Ok(out)
}

fn run_one<P: Posterior>(
    model: &P,
    mut state: P::State,
    s: &McmcSettings,
    chain_index: usize,
) -> Result<Chain> {
    if !model.log_density(&state).is_finite() {
        return Err(SurrogacyError::InitOutOfSupport(chain_index));
    }
    let names = model.parameter_names();
    let n_params = names.len();
    let mut rng = ChainRng::seed_from_u64(s.chain_seed(chain_index));
    let mut blocks: Vec<RandomWalkBlock> = (0..model.metropolis_blocks())
        .map(|b| RandomWalkBlock::new(model.initial_step(b)))
        .collect();
    let retained = s.retained();
    let mut draws = Vec::with_capacity(retained * n_params);
    let mut iterations = Vec::with_capacity(retained);
    let mut row = Vec::with_capacity(n_params);

    for it in 1..=s.iterations {
        let adapting = it <= s.burn_in;
        {
            let mut step = Step {
                rng: &mut rng,
                blocks: &mut blocks,
                adapting,
            };
            model
                .update(&mut state, &mut step)
                .map_err(|e| SurrogacyError::DivergentChain {
                    chain: chain_index,
                    iteration: it,
                    message: e.to_string(),
                })?;
        }
        if adapting && it % s.adapt_window == 0 {
            blocks.iter_mut().for_each(RandomWalkBlock::adapt);
        }
        if !adapting && (it - s.burn_in).is_multiple_of(s.thin) && iterations.len() < retained {
            row.clear();
            model.record(&state, &mut row);
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(SurrogacyError::DivergentChain {
                    chain: chain_index,
                    iteration: it,
                    message: format!("non-finite value for `{}`", names[j]),
                });
            }
            draws.extend_from_slice(&row);
            iterations.push(it);
        }
    }
    if !model.log_density(&state).is_finite() {
        return Err(SurrogacyError::DivergentChain {
            chain: chain_index,
            iteration: s.iterations,
            message: "log density not finite at final state".into(),
        });
    }
    let acceptance = blocks
        .iter()
        .map(|b| {
            if b.proposals == 0 {
                f64::NAN
            } else {
                b.accepts as f64 / b.proposals as f64
            }
        })
        .collect();
    Ok(Chain {
        names,
        draws,
        iterations,
        acceptance,
        step_sizes: blocks.iter().map(|b| b.log_step.exp()).collect(),
    })
}

/// Runs `s.chains` chains, in parallel when a thread pool is available.
/// Chain `k` is seeded with `seed + k`, so output does not depend on the
/// degree of parallelism. `inits` holds one state per chain, or a single
/// state shared by all chains.
pub fn run_chains<P: Posterior>(
    model: &P,
    inits: &[P::State],
    s: &McmcSettings,
) -> Result<Vec<Chain>> {
    s.validate()?;
    if inits.is_empty() || (inits.len() != 1 && inits.len() != s.chains) {
        return Err(SurrogacyError::InvalidSettings(format!(
            "{} initial states for {} chains",
            inits.len(),
            s.chains
        )));
    }
    (0..s.chains)
        .into_par_iter()
        .map(|k| {
            let init = inits.get(k).unwrap_or(&inits[0]).clone();
            run_one(model, init, s, k)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_distr::StandardNormal;

    /// y ~ N(mu, sigma²), mu ~ N(0, tau²), sampled either by Gibbs or by
    /// random-walk Metropolis.
    struct NormalMean {
        y: f64,
        sigma: f64,
        tau: f64,
        gibbs: bool,
    }

    impl Posterior for NormalMean {
        type State = f64;
        fn parameter_names(&self) -> Vec<String> {
            vec!["mu".into()]
        }
        fn metropolis_blocks(&self) -> usize {
            usize::from(!self.gibbs)
        }
        fn initial_step(&self, _: usize) -> f64 {
            0.1
        }
        fn log_density(&self, mu: &f64) -> f64 {
            -0.5 * ((self.y - mu) / self.sigma).powi(2) - 0.5 * (mu / self.tau).powi(2)
        }
        fn update(&self, mu: &mut f64, step: &mut Step<'_>) -> Result<()> {
            if self.gibbs {
                let prec = 1.0 / self.sigma.powi(2) + 1.0 / self.tau.powi(2);
                let mean = self.y / self.sigma.powi(2) / prec;
                let z: f64 = step.rng().sample(StandardNormal);
                *mu = mean + z / prec.sqrt();
            } else {
                let lp = self.log_density(mu);
                *mu = step.random_walk(0, *mu, lp, |m| self.log_density(&m))?.0;
            }
            Ok(())
        }
        fn record(&self, mu: &f64, out: &mut Vec<f64>) {
            out.push(*mu);
        }
    }

    struct Bounded;
    impl Posterior for Bounded {
        type State = f64;
        fn parameter_names(&self) -> Vec<String> {
            vec!["x".into()]
        }
        fn metropolis_blocks(&self) -> usize {
            1
        }
        fn log_density(&self, x: &f64) -> f64 {
            if (0.0..1.0).contains(x) {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
        fn update(&self, x: &mut f64, step: &mut Step<'_>) -> Result<()> {
            *x = step.random_walk(0, *x, 0.0, |v| self.log_density(&v))?.0;
            Ok(())
        }
        fn record(&self, x: &f64, out: &mut Vec<f64>) {
            out.push(*x);
        }
    }

    fn settings(iterations: usize, burn_in: usize) -> McmcSettings {
        McmcSettings {
            iterations,
            burn_in,
            thin: 1,
            chains: 2,
            seed: 11,
            adapt_window: 50,
        }
    }

    #[test]
    fn normal_mean_matches_conjugate_posterior() {
        for gibbs in [true, false] {
            let model = NormalMean {
                y: 1.0,
                sigma: 1.0,
                tau: 1000.0,
                gibbs,
            };
            let chains = run_chains(&model, &[0.0], &settings(12_000, 2_000)).unwrap();
            let s = summarize(&chains, "mu").unwrap();
            // closed form: mean 1/(1+1e-6), sd sqrt(1/(1+1e-6))
            assert_abs_diff_eq!(s.mean, 1.0, epsilon = 0.05);
            assert_abs_diff_eq!(s.sd, 1.0, epsilon = 0.05);
            if !gibbs {
                let acc = chains[0].acceptance[0];
                assert!((0.1..=0.6).contains(&acc), "acceptance {acc}");
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let model = NormalMean {
            y: 1.0,
            sigma: 1.0,
            tau: 10.0,
            gibbs: false,
        };
        let a = run_chains(&model, &[0.0], &settings(2_000, 500)).unwrap();
        let b = run_chains(&model, &[0.0], &settings(2_000, 500)).unwrap();
        assert_eq!(a, b);
        let c = run_chains(&model, &[0.0], &settings(2_000, 500).with_seed(12)).unwrap();
        assert_ne!(a[0].draws, c[0].draws);
        // chain k with seed s equals chain 0 with seed s + k
        let single = McmcSettings {
            chains: 1,
            ..settings(2_000, 500).with_seed(12)
        };
        let d = run_chains(&model, &[0.0], &single).unwrap();
        assert_eq!(a[1].draws, d[0].draws);
    }

    #[test]
    fn init_outside_support_is_rejected() {
        assert!(matches!(
            run_chains(&Bounded, &[2.0], &settings(1_000, 100)),
            Err(SurrogacyError::InitOutOfSupport(0))
        ));
        let chains = run_chains(&Bounded, &[0.5], &settings(2_000, 500)).unwrap();
        assert!(chains[0]
            .column_at(0)
            .iter()
            .all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn settings_validation() {
        let mut s = McmcSettings::default();
        assert!(s.validate().is_ok());
        assert_eq!(s.retained(), 5_000);
        s.burn_in = s.iterations;
        assert!(s.validate().is_err());
        let s = McmcSettings {
            iterations: 1_000,
            burn_in: 950,
            ..McmcSettings::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn draws_csv_round_trip() {
        let model = NormalMean {
            y: 1.0,
            sigma: 1.0,
            tau: 10.0,
            gibbs: true,
        };
        let chains = run_chains(&model, &[0.0], &settings(300, 100)).unwrap();
        let mut buf = Vec::new();
        chains[0].write_csv(&mut buf).unwrap();
        let back = Chain::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.names, chains[0].names);
        assert_eq!(back.iterations, chains[0].iterations);
        assert_eq!(back.draws, chains[0].draws);
    }
}
