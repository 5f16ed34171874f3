//! Collapsed Gibbs / Metropolis sampler for the surrogacy models.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use super::{NormalPrior, PriorConfig};
use crate::error::{Result, SurrogacyError};
use crate::linalg::{mvn_log_density, robust_cholesky, sample_from_precision};
use crate::mcmc::{Posterior, Step};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Structure {
    /// One set of surrogacy parameters per group with fixed vague priors.
    Independent,
    /// Groups exchangeable around hypermeans.
    Full,
    /// Two-component mixture: exchangeable or independent, per group.
    Partial,
}

#[derive(Debug, Clone)]
pub(crate) struct ContrastTerm {
    pub group: usize,
    /// Centred covariate (0 without covariate).
    pub x: f64,
    pub y1: f64,
    pub y2: Option<f64>,
}

#[derive(Debug, Clone)]
struct Entry {
    /// Index into the study's contrast list.
    local: usize,
    is_final: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct StudyTerm {
    /// Global contrast indices.
    contrasts: Vec<usize>,
    entries: Vec<Entry>,
    y: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl StudyTerm {
    /// `sigma_full` is the interleaved `(y1, y2)` covariance of all
    /// contrasts; unobserved final-outcome rows are dropped.
    pub fn new(contrasts: Vec<usize>, terms: &[ContrastTerm], sigma_full: &DMatrix<f64>) -> Self {
        let mut entries = Vec::new();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (local, &gi) in contrasts.iter().enumerate() {
            entries.push(Entry {
                local,
                is_final: false,
            });
            rows.push(2 * local);
            y.push(terms[gi].y1);
            if let Some(y2) = terms[gi].y2 {
                entries.push(Entry {
                    local,
                    is_final: true,
                });
                rows.push(2 * local + 1);
                y.push(y2);
            }
        }
        let n = rows.len();
        let sigma = DMatrix::from_fn(n, n, |a, b| sigma_full[(rows[a], rows[b])]);
        StudyTerm {
            contrasts,
            entries,
            y: DVector::from_vec(y),
            sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ModelState {
    pub delta1: Vec<f64>,
    pub lambda0: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: f64,
    pub log_psi: Vec<f64>,
    pub b0: f64,
    pub b1: f64,
    pub log_t0: f64,
    pub log_t1: f64,
    pub b_psi: f64,
    pub log_t_psi: f64,
    pub exchangeable: Vec<bool>,
    pub weight: Vec<f64>,
    pub p_exchangeable: Vec<f64>,
}

pub(crate) struct SurrogacyModel {
    pub groups: Vec<String>,
    pub terms: Vec<ContrastTerm>,
    studies: Vec<StudyTerm>,
    structure: Structure,
    shared_psi: bool,
    covariate: bool,
    priors: PriorConfig,
    /// Studies touched by each ψ index.
    psi_studies: Vec<Vec<usize>>,
    /// Contrasts whose δ1 is recorded.
    tracked: Vec<usize>,
    tracked_labels: Vec<String>,
}

fn log_normal_kernel(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln()
}

impl SurrogacyModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        groups: Vec<String>,
        terms: Vec<ContrastTerm>,
        studies: Vec<(Vec<usize>, DMatrix<f64>)>,
        structure: Structure,
        shared_psi: bool,
        covariate: bool,
        priors: PriorConfig,
        tracked: Vec<(usize, String)>,
    ) -> Self {
        let studies: Vec<StudyTerm> = studies
            .into_iter()
            .map(|(idx, sigma)| StudyTerm::new(idx, &terms, &sigma))
            .collect();
        let shared_psi = shared_psi || structure == Structure::Independent && groups.len() == 1;
        let n_psi = if shared_psi { 1 } else { groups.len() };
        let mut psi_studies = vec![Vec::new(); n_psi];
        for (s, st) in studies.iter().enumerate() {
            for (p, list) in psi_studies.iter_mut().enumerate() {
                let touches = st
                    .entries
                    .iter()
                    .any(|e| e.is_final && (shared_psi || terms[st.contrasts[e.local]].group == p));
                if touches {
                    list.push(s);
                }
            }
        }
        let (tracked, tracked_labels) = tracked.into_iter().unzip();
        SurrogacyModel {
            groups,
            terms,
            studies,
            structure,
            shared_psi,
            covariate,
            priors,
            psi_studies,
            tracked,
            tracked_labels,
        }
    }

    fn n_groups(&self) -> usize {
        self.groups.len()
    }

    fn n_psi(&self) -> usize {
        if self.shared_psi {
            1
        } else {
            self.n_groups()
        }
    }

    fn psi_index(&self, group: usize) -> usize {
        if self.shared_psi {
            0
        } else {
            group
        }
    }

    fn hierarchical(&self) -> bool {
        self.structure != Structure::Independent
    }

    fn exchangeable_log_psi(&self) -> bool {
        self.hierarchical() && !self.shared_psi && !self.priors.psi.is_fixed()
    }

    fn psi2(&self, state: &ModelState, group: usize) -> f64 {
        (2.0 * state.log_psi[self.psi_index(group)]).exp()
    }

    /// Observation covariance with δ2 integrated out.
    fn marginal_cov(&self, st: &StudyTerm, log_psi: &[f64]) -> DMatrix<f64> {
        let mut m = st.sigma.clone();
        for (e, entry) in st.entries.iter().enumerate() {
            if entry.is_final {
                let g = self.terms[st.contrasts[entry.local]].group;
                m[(e, e)] += (2.0 * log_psi[self.psi_index(g)]).exp();
            }
        }
        m
    }

    fn mean_final(&self, state: &ModelState, gi: usize) -> f64 {
        let t = &self.terms[gi];
        state.lambda0[t.group] + state.lambda1[t.group] * state.delta1[gi] + state.lambda2 * t.x
    }

    fn study_log_lik(&self, st: &StudyTerm, state: &ModelState, log_psi: &[f64]) -> Result<f64> {
        let m = self.marginal_cov(st, log_psi);
        let chol = robust_cholesky(&m)?;
        let resid = DVector::from_fn(st.entries.len(), |e, _| {
            let entry = &st.entries[e];
            let gi = st.contrasts[entry.local];
            let mean = if entry.is_final {
                self.mean_final(state, gi)
            } else {
                state.delta1[gi]
            };
            st.y[e] - mean
        });
        Ok(mvn_log_density(&resid, &chol))
    }

    fn psi_block_log_lik(&self, p: usize, state: &ModelState, log_psi: &[f64]) -> Result<f64> {
        let mut ll = 0.0;
        for &s in &self.psi_studies[p] {
            ll += self.study_log_lik(&self.studies[s], state, log_psi)?;
        }
        Ok(ll)
    }

    fn log_psi_prior(&self, state: &ModelState, theta: f64) -> f64 {
        if self.exchangeable_log_psi() {
            log_normal_kernel(theta, state.b_psi, state.log_t_psi.exp())
        } else {
            self.priors.psi.log_density_log_psi(theta)
        }
    }

    /// Prior of group `g`'s (λ0, λ1) given its current component.
    fn lambda_priors(&self, state: &ModelState, g: usize) -> (NormalPrior, NormalPrior) {
        let exchangeable = match self.structure {
            Structure::Independent => false,
            Structure::Full => true,
            Structure::Partial => state.exchangeable[g],
        };
        if exchangeable {
            (
                NormalPrior::new(state.b0, state.log_t0.exp()),
                NormalPrior::new(state.b1, state.log_t1.exp()),
            )
        } else {
            (self.priors.intercept, self.priors.slope)
        }
    }

    fn update_delta1(&self, state: &mut ModelState, rng: &mut impl Rng) -> Result<()> {
        let prior = self.priors.delta1;
        let prior_prec = 1.0 / (prior.sd * prior.sd);
        for st in &self.studies {
            let k = st.contrasts.len();
            let n = st.entries.len();
            let m = self.marginal_cov(st, &state.log_psi);
            let chol: Cholesky<f64, Dyn> = robust_cholesky(&m)?;
            let mut a = DMatrix::zeros(n, k);
            let mut r = DVector::zeros(n);
            for (e, entry) in st.entries.iter().enumerate() {
                let gi = st.contrasts[entry.local];
                let t = &self.terms[gi];
                if entry.is_final {
                    a[(e, entry.local)] = state.lambda1[t.group];
                    r[e] = st.y[e] - state.lambda0[t.group] - state.lambda2 * t.x;
                } else {
                    a[(e, entry.local)] = 1.0;
                    r[e] = st.y[e];
                }
            }
            let minv_a = chol.solve(&a);
            let minv_r = chol.solve(&r);
            let mut q = a.transpose() * &minv_a;
            let mut b = a.transpose() * &minv_r;
            for j in 0..k {
                q[(j, j)] += prior_prec;
                b[j] += prior.mean * prior_prec;
            }
            let draw = sample_from_precision(q, &b, rng)?;
            for (j, &gi) in st.contrasts.iter().enumerate() {
                state.delta1[gi] = draw[j];
            }
        }
        Ok(())
    }

    fn update_lambda(&self, state: &mut ModelState, rng: &mut impl Rng) -> Result<()> {
        let g_n = self.n_groups();
        let dim = 2 * g_n + usize::from(self.covariate);
        let mut q = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        for g in 0..g_n {
            let (ip, sp) = self.lambda_priors(state, g);
            q[(g, g)] += 1.0 / (ip.sd * ip.sd);
            b[g] += ip.mean / (ip.sd * ip.sd);
            q[(g_n + g, g_n + g)] += 1.0 / (sp.sd * sp.sd);
            b[g_n + g] += sp.mean / (sp.sd * sp.sd);
        }
        if self.covariate {
            let cp = self.priors.covariate;
            q[(2 * g_n, 2 * g_n)] += 1.0 / (cp.sd * cp.sd);
            b[2 * g_n] += cp.mean / (cp.sd * cp.sd);
        }
        for st in &self.studies {
            if !st.entries.iter().any(|e| e.is_final) {
                continue;
            }
            let n = st.entries.len();
            let m = self.marginal_cov(st, &state.log_psi);
            let chol = robust_cholesky(&m)?;
            let mut design = DMatrix::zeros(n, dim);
            let mut r = DVector::zeros(n);
            for (e, entry) in st.entries.iter().enumerate() {
                let gi = st.contrasts[entry.local];
                let t = &self.terms[gi];
                if entry.is_final {
                    design[(e, t.group)] = 1.0;
                    design[(e, g_n + t.group)] = state.delta1[gi];
                    if self.covariate {
                        design[(e, 2 * g_n)] = t.x;
                    }
                    r[e] = st.y[e];
                } else {
                    r[e] = st.y[e] - state.delta1[gi];
                }
            }
            let minv_d = chol.solve(&design);
            q += design.transpose() * &minv_d;
            b += minv_d.transpose() * &r;
        }
        let draw = sample_from_precision(q, &b, rng)?;
        for g in 0..g_n {
            state.lambda0[g] = draw[g];
            state.lambda1[g] = draw[g_n + g];
        }
        if self.covariate {
            state.lambda2 = draw[2 * g_n];
        }
        Ok(())
    }

    fn update_psi(&self, state: &mut ModelState, step: &mut Step<'_>) -> Result<()> {
        if self.priors.psi.is_fixed() {
            return Ok(());
        }
        for p in 0..self.n_psi() {
            let current = state.log_psi[p];
            let mut lp_err = None;
            let current_lp = self.psi_block_log_lik(p, state, &state.log_psi)?
                + self.log_psi_prior(state, current);
            let mut trial = state.log_psi.clone();
            let (next, _) = step.random_walk(p, current, current_lp, |theta| {
                let prior = self.log_psi_prior(state, theta);
                if prior == f64::NEG_INFINITY {
                    return prior;
                }
                trial[p] = theta;
                match self.psi_block_log_lik(p, state, &trial) {
                    Ok(ll) => ll + prior,
                    Err(e) => {
                        lp_err = Some(e);
                        f64::NEG_INFINITY
                    }
                }
            })?;
            if let Some(e) = lp_err {
                log::debug!("psi proposal rejected: {e}");
            }
            state.log_psi[p] = next;
        }
        Ok(())
    }

    /// Conjugate normal update of a hypermean from its member values.
    fn draw_hypermean(
        prior: NormalPrior,
        values: impl Iterator<Item = f64>,
        sd: f64,
        rng: &mut impl Rng,
    ) -> f64 {
        let mut prec = 1.0 / (prior.sd * prior.sd);
        let mut lin = prior.mean * prec;
        for v in values {
            prec += 1.0 / (sd * sd);
            lin += v / (sd * sd);
        }
        let z: f64 = rng.sample(StandardNormal);
        lin / prec + z / prec.sqrt()
    }

    fn log_sd_target(values: &[f64], center: f64, log_sd: f64, scale: f64) -> f64 {
        let sd = log_sd.exp();
        let ll: f64 = values
            .iter()
            .map(|v| log_normal_kernel(*v, center, sd))
            .sum();
        ll - 0.5 * (sd / scale).powi(2) + log_sd
    }

    fn update_hyper(&self, state: &mut ModelState, step: &mut Step<'_>) -> Result<()> {
        let g_n = self.n_groups();
        let members: Vec<usize> = (0..g_n)
            .filter(|&g| self.structure == Structure::Full || state.exchangeable[g])
            .collect();
        let l0: Vec<f64> = members.iter().map(|&g| state.lambda0[g]).collect();
        let l1: Vec<f64> = members.iter().map(|&g| state.lambda1[g]).collect();
        let hp = self.priors.hypermean;
        let t0 = state.log_t0.exp();
        state.b0 = Self::draw_hypermean(hp, l0.iter().copied(), t0, step.rng());
        let t1 = state.log_t1.exp();
        state.b1 = Self::draw_hypermean(hp, l1.iter().copied(), t1, step.rng());

        let scale = self.priors.hyper_sd_scale;
        let n_psi = self.n_psi();
        let (b0, b1) = (state.b0, state.b1);
        let lp = Self::log_sd_target(&l0, b0, state.log_t0, scale);
        state.log_t0 = step
            .random_walk(n_psi, state.log_t0, lp, |s| {
                Self::log_sd_target(&l0, b0, s, scale)
            })?
            .0;
        let lp = Self::log_sd_target(&l1, b1, state.log_t1, scale);
        state.log_t1 = step
            .random_walk(n_psi + 1, state.log_t1, lp, |s| {
                Self::log_sd_target(&l1, b1, s, scale)
            })?
            .0;

        if self.exchangeable_log_psi() {
            let t_psi = state.log_t_psi.exp();
            state.b_psi = Self::draw_hypermean(
                self.priors.log_psi_mean,
                state.log_psi.iter().copied(),
                t_psi,
                step.rng(),
            );
            let thetas = state.log_psi.clone();
            let b_psi = state.b_psi;
            let scale = self.priors.log_psi_sd_scale;
            let lp = Self::log_sd_target(&thetas, b_psi, state.log_t_psi, scale);
            state.log_t_psi = step
                .random_walk(n_psi + 2, state.log_t_psi, lp, |s| {
                    Self::log_sd_target(&thetas, b_psi, s, scale)
                })?
                .0;
        }

        if self.structure == Structure::Partial {
            let (ip, sp) = (self.priors.intercept, self.priors.slope);
            let (t0, t1) = (state.log_t0.exp(), state.log_t1.exp());
            for g in 0..g_n {
                let w = state.weight[g];
                let l_ex = w.ln()
                    + log_normal_kernel(state.lambda0[g], state.b0, t0)
                    + log_normal_kernel(state.lambda1[g], state.b1, t1);
                let l_in = (1.0 - w).ln()
                    + ip.log_density(state.lambda0[g])
                    + sp.log_density(state.lambda1[g]);
                let p = 1.0 / (1.0 + (l_in - l_ex).exp());
                state.p_exchangeable[g] = p;
                let u: f64 = step.rng().random();
                state.exchangeable[g] = u < p;
                let z = f64::from(u8::from(state.exchangeable[g]));
                let beta = Beta::new(1.0 + z, 2.0 - z)
                    .map_err(|e| SurrogacyError::Numerical(e.to_string()))?;
                state.weight[g] = beta.sample(step.rng()).clamp(1e-300, 1.0 - 1e-16);
            }
        }
        Ok(())
    }

    /// Translates every exchangeable (λ0, λ1) together with (b0, b1) by a
    /// common offset drawn from its Gaussian full conditional. Keeps the chain
    /// moving when tight hyper-SDs tie the group values to their hypermeans.
    fn update_location_shift(&self, state: &mut ModelState, rng: &mut impl Rng) -> Result<()> {
        let member: Vec<bool> = (0..self.n_groups())
            .map(|g| self.structure == Structure::Full || state.exchangeable[g])
            .collect();
        if !member.iter().any(|&m| m) {
            return Ok(());
        }
        let hp = self.priors.hypermean;
        let hp_prec = 1.0 / (hp.sd * hp.sd);
        let mut q = DMatrix::from_diagonal_element(2, 2, hp_prec);
        let mut b = DVector::from_vec(vec![
            (hp.mean - state.b0) * hp_prec,
            (hp.mean - state.b1) * hp_prec,
        ]);
        for st in &self.studies {
            let touches = st
                .entries
                .iter()
                .any(|e| e.is_final && member[self.terms[st.contrasts[e.local]].group]);
            if !touches {
                continue;
            }
            let n = st.entries.len();
            let m = self.marginal_cov(st, &state.log_psi);
            let chol = robust_cholesky(&m)?;
            let mut design = DMatrix::zeros(n, 2);
            let mut r = DVector::zeros(n);
            for (e, entry) in st.entries.iter().enumerate() {
                let gi = st.contrasts[entry.local];
                if entry.is_final {
                    if member[self.terms[gi].group] {
                        design[(e, 0)] = 1.0;
                        design[(e, 1)] = state.delta1[gi];
                    }
                    r[e] = st.y[e] - self.mean_final(state, gi);
                } else {
                    r[e] = st.y[e] - state.delta1[gi];
                }
            }
            let minv_d = chol.solve(&design);
            q += design.transpose() * &minv_d;
            b += minv_d.transpose() * &r;
        }
        let eps = sample_from_precision(q, &b, rng)?;
        for g in (0..self.n_groups()).filter(|&g| member[g]) {
            state.lambda0[g] += eps[0];
            state.lambda1[g] += eps[1];
        }
        state.b0 += eps[0];
        state.b1 += eps[1];
        Ok(())
    }

    /// Deterministic starting point: δ1 at the observed surrogate effects and
    /// a least-squares line through the observed pairs.
    pub fn initial_state(&self) -> ModelState {
        let g_n = self.n_groups();
        let pairs: Vec<(f64, f64)> = self
            .terms
            .iter()
            .filter_map(|t| t.y2.map(|y2| (t.y1, y2)))
            .collect();
        let n = pairs.len() as f64;
        let (mut a, mut b) = (0.0, 0.0);
        if n > 0.0 {
            let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
            let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
            let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
            a = my - b * mx;
        }
        let log_psi0 = match self.priors.psi {
            super::PsiPrior::Uniform { upper } => (0.1f64).min(0.5 * upper).ln(),
            super::PsiPrior::Fixed { value } => value.ln(),
            _ => (0.1f64).ln(),
        };
        ModelState {
            delta1: self.terms.iter().map(|t| t.y1).collect(),
            lambda0: vec![a; g_n],
            lambda1: vec![b; g_n],
            lambda2: 0.0,
            log_psi: vec![log_psi0; self.n_psi()],
            b0: a,
            b1: b,
            log_t0: (0.5f64).ln(),
            log_t1: (0.5f64).ln(),
            b_psi: if log_psi0.is_finite() { log_psi0 } else { 0.0 },
            log_t_psi: (0.5f64).ln(),
            exchangeable: vec![true; g_n],
            weight: vec![0.5; g_n],
            p_exchangeable: vec![0.5; g_n],
        }
    }

    /// Over-dispersed variant of the initial state for chain `k > 0`.
    pub fn dispersed_state(&self, k: usize, rng: &mut impl Rng) -> ModelState {
        let mut s = self.initial_state();
        if k == 0 {
            return s;
        }
        let mut jitter = |x: &mut f64, sd: f64| {
            let z: f64 = rng.sample(StandardNormal);
            *x += sd * z;
        };
        for g in 0..self.n_groups() {
            jitter(&mut s.lambda0[g], 0.1);
            let sd = 0.25 * s.lambda1[g].abs().max(0.1);
            jitter(&mut s.lambda1[g], sd);
        }
        for p in 0..self.n_psi() {
            if self.priors.psi.is_fixed() {
                break;
            }
            jitter(&mut s.log_psi[p], 0.3);
            if let super::PsiPrior::Uniform { upper } = self.priors.psi {
                s.log_psi[p] = s.log_psi[p].min(upper.ln() - 0.1);
            }
        }
        s
    }
}

impl Posterior for SurrogacyModel {
    type State = ModelState;

    fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.hierarchical() {
            for g in &self.groups {
                names.push(format!("lambda0[{g}]"));
                names.push(format!("lambda1[{g}]"));
                names.push(format!("psi2[{g}]"));
            }
            names.extend(["b0", "b1", "t0", "t1"].map(String::from));
            if self.exchangeable_log_psi() {
                names.extend(["b_psi", "t_psi"].map(String::from));
            }
            if self.structure == Structure::Partial {
                for g in &self.groups {
                    names.push(format!("w[{g}]"));
                    names.push(format!("p_exch[{g}]"));
                }
            }
        } else if self.n_groups() == 1 {
            names.extend(["lambda0", "lambda1", "psi2"].map(String::from));
        } else {
            for g in &self.groups {
                names.push(format!("lambda0[{g}]"));
                names.push(format!("lambda1[{g}]"));
                names.push(format!("psi2[{g}]"));
            }
        }
        if self.covariate {
            names.push("lambda2".into());
        }
        for label in &self.tracked_labels {
            names.push(format!("delta1[{label}]"));
        }
        names
    }

    fn metropolis_blocks(&self) -> usize {
        let mut n = self.n_psi();
        if self.hierarchical() {
            n += 2 + usize::from(self.exchangeable_log_psi());
        }
        n
    }

    fn log_density(&self, state: &ModelState) -> f64 {
        let mut lp = 0.0;
        for st in &self.studies {
            match self.study_log_lik(st, state, &state.log_psi) {
                Ok(v) => lp += v,
                Err(_) => return f64::NEG_INFINITY,
            }
        }
        let d = self.priors.delta1;
        lp += state.delta1.iter().map(|x| d.log_density(*x)).sum::<f64>();
        for g in 0..self.n_groups() {
            let (ip, sp) = self.lambda_priors(state, g);
            lp += ip.log_density(state.lambda0[g]) + sp.log_density(state.lambda1[g]);
        }
        if self.covariate {
            lp += self.priors.covariate.log_density(state.lambda2);
        }
        for &theta in &state.log_psi {
            lp += self.log_psi_prior(state, theta);
        }
        if self.hierarchical() {
            let hp = self.priors.hypermean;
            lp += hp.log_density(state.b0) + hp.log_density(state.b1);
            let s = self.priors.hyper_sd_scale;
            lp += -0.5 * (state.log_t0.exp() / s).powi(2) + state.log_t0;
            lp += -0.5 * (state.log_t1.exp() / s).powi(2) + state.log_t1;
            if self.exchangeable_log_psi() {
                lp += self.priors.log_psi_mean.log_density(state.b_psi);
                let s = self.priors.log_psi_sd_scale;
                lp += -0.5 * (state.log_t_psi.exp() / s).powi(2) + state.log_t_psi;
            }
            if self.structure == Structure::Partial {
                for g in 0..self.n_groups() {
                    let w = state.weight[g];
                    if !(w > 0.0 && w < 1.0) {
                        return f64::NEG_INFINITY;
                    }
                    lp += if state.exchangeable[g] {
                        w.ln()
                    } else {
                        (1.0 - w).ln()
                    };
                }
            }
        }
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }

    fn update(&self, state: &mut ModelState, step: &mut Step<'_>) -> Result<()> {
        self.update_delta1(state, step.rng())?;
        self.update_lambda(state, step.rng())?;
        self.update_psi(state, step)?;
        if self.hierarchical() {
            self.update_hyper(state, step)?;
            self.update_location_shift(state, step.rng())?;
        }
        Ok(())
    }

    fn record(&self, state: &ModelState, out: &mut Vec<f64>) {
        let per_group = self.hierarchical() || self.n_groups() > 1;
        for g in 0..self.n_groups() {
            out.push(state.lambda0[g]);
            out.push(state.lambda1[g]);
            out.push(self.psi2(state, g));
        }
        if per_group && self.hierarchical() {
            out.push(state.b0);
            out.push(state.b1);
            out.push(state.log_t0.exp());
            out.push(state.log_t1.exp());
            if self.exchangeable_log_psi() {
                out.push(state.b_psi);
                out.push(state.log_t_psi.exp());
            }
            if self.structure == Structure::Partial {
                for g in 0..self.n_groups() {
                    out.push(state.weight[g]);
                    out.push(state.p_exchangeable[g]);
                }
            }
        }
        if self.covariate {
            out.push(state.lambda2);
        }
        for &gi in &self.tracked {
            out.push(state.delta1[gi]);
        }
    }
}
