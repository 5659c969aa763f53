//! Mixture of probabilistic PCA models: responsibilities, two-stage EM
//! training, entropy-based model-count selection.
//!
//! The E-step computes posterior responsibilities in log-space. The M-step
//! is a generalized EM sweep: mixing weights and means are updated in closed
//! form first, then each component's responsibility-weighted covariance
//! feeds one fixed-point update of its loading matrix and noise variance.
//! Every full iteration weakly increases the mixture log-likelihood.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppca::{
    eigen_descending, fit_ppca_closed_form, sample_covariance, sample_mean, sigma2_floor,
    PpcaFactors, PpcaParams,
};

/// K local PPCA models with mixing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    locals: Vec<PpcaParams>,
    pi: Vec<f64>,
}

/// N x K posterior membership weights; each row sums to 1.
#[derive(Debug, Clone)]
pub struct ResponsibilityMatrix {
    pub values: DMatrix<f64>,
}

/// How to pick the number of local models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KChoice {
    Fixed(usize),
    /// Inclusive range scanned by [`select_k`].
    Range(usize, usize),
}

/// How to pick the latent dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QChoice {
    Fixed(usize),
    /// Smallest q reaching this cumulative eigenvalue fraction in (0, 1].
    ContributionRate(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub k: KChoice,
    pub q: QChoice,
    pub max_iterations: usize,
    /// Relative log-likelihood change below which EM stops.
    pub tolerance: f64,
    pub seed: u64,
    /// Independent EM runs from different initializations; the run with the
    /// best final log-likelihood wins. Accepted model files written before
    /// this field existed default to a single run.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_restarts() -> usize {
    1
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            k: KChoice::Fixed(1),
            q: QChoice::Fixed(1),
            max_iterations: 500,
            tolerance: 1e-6,
            seed: 0,
            restarts: 1,
        }
    }
}

impl TrainingConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::InvalidParameter(
                "max_iterations must be >= 1".into(),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidParameter("tolerance must be > 0".into()));
        }
        if self.restarts < 1 {
            return Err(Error::InvalidParameter("restarts must be >= 1".into()));
        }
        if let QChoice::ContributionRate(r) = self.q {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "contribution rate must lie in (0, 1], got {r}"
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of one EM run.
#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub params: MixtureParams,
    /// Mixture log-likelihood at the start of each iteration.
    pub log_likelihood_trace: Vec<f64>,
    pub iterations_used: usize,
    /// Entropy criterion of the final model on the training data.
    pub h_value: f64,
    /// Number of empty-component re-seedings performed.
    pub rescues: usize,
}

/// Per-K outcome of a model-count scan.
#[derive(Debug, Clone)]
pub struct KCandidate {
    pub k: usize,
    pub outcome: std::result::Result<TrainingReport, String>,
}

#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub best_k: usize,
    pub candidates: Vec<KCandidate>,
}

impl MixtureParams {
    pub fn new(locals: Vec<PpcaParams>, pi: Vec<f64>) -> Result<Self> {
        if locals.is_empty() {
            return Err(Error::InvalidParameter(
                "mixture needs at least one component".into(),
            ));
        }
        if locals.len() != pi.len() {
            return Err(Error::DimensionMismatch {
                expected: locals.len(),
                got: pi.len(),
            });
        }
        let (d, q) = (locals[0].d(), locals[0].q());
        for p in &locals[1..] {
            if p.d() != d || p.q() != q {
                return Err(Error::InvalidParameter(
                    "all local models must share d and q".into(),
                ));
            }
        }
        if pi.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidParameter(
                "mixing weights must be nonnegative".into(),
            ));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "mixing weights must sum to 1, got {total}"
            )));
        }
        Ok(Self { locals, pi })
    }

    pub fn k(&self) -> usize {
        self.locals.len()
    }

    pub fn d(&self) -> usize {
        self.locals[0].d()
    }

    pub fn q(&self) -> usize {
        self.locals[0].q()
    }

    pub fn locals(&self) -> &[PpcaParams] {
        &self.locals
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub(crate) fn factors(&self) -> Vec<PpcaFactors> {
        self.locals.iter().map(|p| p.factors()).collect()
    }

    fn check_data(&self, data: &DMatrix<f64>) -> Result<()> {
        if data.nrows() == 0 {
            return Err(Error::EmptyData);
        }
        if data.ncols() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: data.ncols(),
            });
        }
        Ok(())
    }

    /// Component log-densities `ln p(t_n | i)` for every row of `data`.
    pub fn component_log_densities(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_data(data)?;
        let factors = self.factors();
        let mut out = DMatrix::zeros(data.nrows(), self.k());
        for n in 0..data.nrows() {
            let t = data.row(n).transpose();
            for (i, (p, f)) in self.locals.iter().zip(&factors).enumerate() {
                out[(n, i)] = p.log_density_with(f, &t);
            }
        }
        Ok(out)
    }

    /// Posterior weights of each component for one sample, in log-space.
    pub fn responsibilities_single(&self, t: &DVector<f64>) -> Result<Vec<f64>> {
        let data = DMatrix::from_rows(&[t.transpose()]);
        let r = self.responsibilities(&data)?;
        Ok(r.values.row(0).iter().copied().collect())
    }

    /// Bayes-rule responsibilities, computed with per-row max subtraction so
    /// no row underflows to all zeros.
    pub fn responsibilities(&self, data: &DMatrix<f64>) -> Result<ResponsibilityMatrix> {
        let log_dens = self.component_log_densities(data)?;
        Ok(self.responsibilities_from(&log_dens).0)
    }

    /// Responsibilities plus the mixture log-likelihood from precomputed
    /// component log-densities.
    fn responsibilities_from(&self, log_dens: &DMatrix<f64>) -> (ResponsibilityMatrix, f64) {
        let (n_rows, k) = (log_dens.nrows(), self.k());
        let mut values = DMatrix::zeros(n_rows, k);
        let mut log_likelihood = 0.0;
        let log_pi: Vec<f64> = self.pi.iter().map(|&p| p.ln()).collect();
        for n in 0..n_rows {
            let mut max = f64::NEG_INFINITY;
            for i in 0..k {
                let v = log_pi[i] + log_dens[(n, i)];
                values[(n, i)] = v;
                if v > max {
                    max = v;
                }
            }
            if !max.is_finite() {
                // Every weighted density underflowed; fall back to uniform.
                for i in 0..k {
                    values[(n, i)] = 1.0 / k as f64;
                }
                continue;
            }
            let mut sum = 0.0;
            for i in 0..k {
                let e = (values[(n, i)] - max).exp();
                values[(n, i)] = e;
                sum += e;
            }
            for i in 0..k {
                values[(n, i)] /= sum;
            }
            log_likelihood += max + sum.ln();
        }
        (ResponsibilityMatrix { values }, log_likelihood)
    }

    /// Mixture log-likelihood `sum_n ln sum_i pi_i p(t_n | i)`.
    pub fn log_likelihood(&self, data: &DMatrix<f64>) -> Result<f64> {
        let log_dens = self.component_log_densities(data)?;
        Ok(self.responsibilities_from(&log_dens).1)
    }

    /// Entropy criterion
    /// `H = -(1/N) sum_n sum_i R_ni ln p(t_n|i) - sum_i pi_i ln pi_i`,
    /// with the `0 ln 0 := 0` convention on the mixing term.
    pub fn entropy_criterion(&self, data: &DMatrix<f64>) -> Result<f64> {
        let log_dens = self.component_log_densities(data)?;
        let (resp, _) = self.responsibilities_from(&log_dens);
        let n = data.nrows() as f64;
        let mut cross = 0.0;
        for row in 0..data.nrows() {
            for i in 0..self.k() {
                let r = resp.values[(row, i)];
                if r > 0.0 {
                    cross += r * log_dens[(row, i)];
                }
            }
        }
        let mixing_entropy: f64 = self
            .pi
            .iter()
            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .sum();
        Ok(-cross / n + mixing_entropy)
    }
}

impl ResponsibilityMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }
}

/// Smallest q whose cumulative eigenvalue fraction reaches `rate`.
pub fn choose_q(data: &DMatrix<f64>, rate: f64) -> Result<usize> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "contribution rate must lie in (0, 1], got {rate}"
        )));
    }
    if data.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    let mu = sample_mean(data);
    let s = sample_covariance(data, &mu);
    let (values, _) = eigen_descending(&s);
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateSample(
            "covariance has no positive eigenvalues".into(),
        ));
    }
    let mut cum = 0.0;
    for (j, v) in values.iter().enumerate() {
        cum += v.max(0.0);
        if cum / total >= rate {
            return Ok(j + 1);
        }
    }
    Ok(values.len())
}

/// Deterministic initialization: samples are shuffled by `seed`, split into
/// K equal groups, and each group gets a local closed-form PPCA fit. Groups
/// too small to support the fit fall back to the global fit with a jittered
/// mean.
pub fn initialize(data: &DMatrix<f64>, k: usize, q: usize, seed: u64) -> Result<MixtureParams> {
    if k < 1 {
        return Err(Error::InvalidParameter("K must be >= 1".into()));
    }
    let n = data.nrows();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    if k == 1 {
        let p = fit_ppca_closed_form(data, q)?;
        return MixtureParams::new(vec![p], vec![1.0]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Seed component centers on data rows, spread apart in the k-means++
    // fashion, then group every row with its nearest center. Fitting each
    // component inside its own group breaks the symmetry that stalls EM when
    // all components start from near-identical global statistics.
    let mut centers = vec![rng.gen_range(0..n)];
    let mut nearest_d2: Vec<f64> = (0..n)
        .map(|r| (data.row(r) - data.row(centers[0])).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = nearest_d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut picked = n - 1;
            for (r, &w) in nearest_d2.iter().enumerate() {
                if u < w {
                    picked = r;
                    break;
                }
                u -= w;
            }
            picked
        } else {
            rng.gen_range(0..n)
        };
        centers.push(next);
        for r in 0..n {
            nearest_d2[r] = nearest_d2[r].min((data.row(r) - data.row(next)).norm_squared());
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for r in 0..n {
        let best = (0..k)
            .min_by(|&a, &b| {
                let da = (data.row(r) - data.row(centers[a])).norm_squared();
                let db = (data.row(r) - data.row(centers[b])).norm_squared();
                da.total_cmp(&db)
            })
            .unwrap();
        groups[best].push(r);
    }

    let global = fit_ppca_closed_form(data, q)?;
    let s = sample_covariance(data, &sample_mean(data));
    let jitter_scale = 0.1 * (s.trace() / data.ncols() as f64).sqrt();

    let mut locals = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for group in &groups {
        weights.push((group.len().max(1)) as f64);
        if group.len() < q + 2 {
            let jitter = DVector::from_fn(data.ncols(), |_, _| {
                jitter_scale * rng.sample::<f64, _>(StandardNormal)
            });
            locals.push(PpcaParams::new(
                global.w().clone(),
                global.mu() + jitter,
                global.sigma2(),
            )?);
            continue;
        }
        let rows: Vec<_> = group.iter().map(|&r| data.row(r)).collect();
        let sub = DMatrix::from_rows(&rows);
        locals.push(fit_ppca_closed_form(&sub, q)?);
    }
    let total: f64 = weights.iter().sum();
    MixtureParams::new(locals, weights.into_iter().map(|w| w / total).collect())
}

fn resolve_q(data: &DMatrix<f64>, choice: &QChoice) -> Result<usize> {
    match choice {
        QChoice::Fixed(q) => Ok(*q),
        QChoice::ContributionRate(rate) => choose_q(data, *rate),
    }
}

/// One full EM iteration in place. Returns the number of empty components
/// re-seeded. Responsibilities and per-sample mixture log-densities must
/// come from the current parameters.
fn m_step(
    m: &mut MixtureParams,
    data: &DMatrix<f64>,
    resp: &ResponsibilityMatrix,
    sample_log_density: &[f64],
) -> usize {
    let (n, d, k) = (data.nrows(), m.d(), m.k());
    let empty_eps = 1e-6 * n as f64;
    let mut new_pi = vec![0.0; k];
    let mut rescues = 0;

    for i in 0..k {
        let r_sum: f64 = (0..n).map(|row| resp.values[(row, i)]).sum();
        if r_sum < empty_eps {
            // Re-seed a starved component at the worst-explained sample.
            let worst = (0..n)
                .min_by(|&a, &b| sample_log_density[a].total_cmp(&sample_log_density[b]))
                .unwrap();
            let p = &m.locals[i];
            m.locals[i] =
                PpcaParams::new(p.w().clone(), data.row(worst).transpose(), p.sigma2())
                    .expect("re-seeded component keeps valid shape");
            new_pi[i] = 1.0 / n as f64;
            rescues += 1;
            continue;
        }
        new_pi[i] = r_sum / n as f64;

        // Stage 1: weighted mean.
        let mut mu = DVector::zeros(d);
        for row in 0..n {
            mu.axpy(resp.values[(row, i)], &data.row(row).transpose(), 1.0);
        }
        mu /= r_sum;

        // Stage 2: responsibility-weighted covariance about the new mean,
        // then one GEM fixed-point update of W and sigma2.
        let mut s_i = DMatrix::zeros(d, d);
        for row in 0..n {
            let z = data.row(row).transpose() - &mu;
            s_i.syger(resp.values[(row, i)], &z, &z, 1.0);
        }
        s_i /= r_sum;
        // syger fills the lower triangle only; mirror it.
        for a in 0..d {
            for b in (a + 1)..d {
                s_i[(a, b)] = s_i[(b, a)];
            }
        }

        let p = &m.locals[i];
        let (w, sigma2, q) = (p.w(), p.sigma2(), p.q());
        let m_inv = p.factors().m_inv;
        let sw = &s_i * w;
        // W~ = S W (sigma2 I + M^-1 W^T S W)^-1
        let mut inner = &m_inv * (w.transpose() * &sw);
        for j in 0..q {
            inner[(j, j)] += sigma2;
        }
        let w_new = &sw
            * inner
                .lu()
                .solve(&DMatrix::identity(q, q))
                .expect("GEM inner q x q system is invertible");
        // sigma2~ = (1/d) tr(S - S W M^-1 W~^T)
        let correction = &sw * (&m_inv * w_new.transpose());
        let mut trace = 0.0;
        for a in 0..d {
            trace += s_i[(a, a)] - correction[(a, a)];
        }
        let sigma2_new = (trace / d as f64).max(sigma2_floor(s_i.trace(), d));
        m.locals[i] = PpcaParams::new(w_new, mu, sigma2_new)
            .expect("GEM update preserves parameter validity");
    }

    let total: f64 = new_pi.iter().sum();
    for v in &mut new_pi {
        *v /= total;
    }
    m.pi = new_pi;
    rescues
}

/// Two-stage EM fit with a fixed K from `config`.
pub fn em_fit(data: &DMatrix<f64>, config: &TrainingConfig) -> Result<TrainingReport> {
    config.validate()?;
    let k = match config.k {
        KChoice::Fixed(k) => k,
        KChoice::Range(..) => {
            return Err(Error::InvalidParameter(
                "em_fit requires a fixed K; use select_k for a range".into(),
            ))
        }
    };
    let q = resolve_q(data, &config.q)?;
    let mut best: Option<TrainingReport> = None;
    for run in 0..config.restarts as u64 {
        // Spread the restart seeds far apart; run 0 keeps the configured seed.
        let seed = config.seed.wrapping_add(run.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut params = initialize(data, k, q, seed)?;
        let report = em_refine(data, &mut params, config)?;
        let final_ll = *report
            .log_likelihood_trace
            .last()
            .unwrap_or(&f64::NEG_INFINITY);
        let improved = best
            .as_ref()
            .and_then(|b| b.log_likelihood_trace.last().copied())
            .map_or(true, |b| final_ll > b);
        if improved {
            best = Some(report);
        }
    }
    Ok(best.expect("restarts >= 1 yields a report"))
}

/// Run EM iterations on an existing mixture until convergence.
pub fn em_refine(
    data: &DMatrix<f64>,
    params: &mut MixtureParams,
    config: &TrainingConfig,
) -> Result<TrainingReport> {
    config.validate()?;
    let mut trace = Vec::new();
    let mut rescues = 0;
    let mut iterations_used = 0;
    for _ in 0..config.max_iterations {
        let log_dens = params.component_log_densities(data)?;
        let (resp, log_likelihood) = params.responsibilities_from(&log_dens);
        let converged = trace.last().is_some_and(|&prev: &f64| {
            (log_likelihood - prev).abs() <= config.tolerance * prev.abs().max(1.0)
        });
        trace.push(log_likelihood);
        if converged {
            break;
        }
        let log_pi: Vec<f64> = params.pi.iter().map(|&p| p.ln()).collect();
        let sample_log_density: Vec<f64> = (0..data.nrows())
            .map(|n| {
                let max = (0..params.k())
                    .map(|i| log_pi[i] + log_dens[(n, i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if !max.is_finite() {
                    return max;
                }
                let sum: f64 = (0..params.k())
                    .map(|i| (log_pi[i] + log_dens[(n, i)] - max).exp())
                    .sum();
                max + sum.ln()
            })
            .collect();
        rescues += m_step(params, data, &resp, &sample_log_density);
        iterations_used += 1;
    }
    let h_value = params.entropy_criterion(data)?;
    Ok(TrainingReport {
        params: params.clone(),
        log_likelihood_trace: trace,
        iterations_used,
        h_value,
        rescues,
    })
}

/// Fit every K in the configured range and pick the entropy-criterion
/// minimizer. Failed fits are recorded and excluded from the argmin.
pub fn select_k(data: &DMatrix<f64>, config: &TrainingConfig) -> Result<SelectionReport> {
    config.validate()?;
    let (lo, hi) = match config.k {
        KChoice::Range(lo, hi) => (lo, hi),
        KChoice::Fixed(k) => (k, k),
    };
    if lo < 1 || hi < lo {
        return Err(Error::InvalidParameter(format!(
            "invalid K range {lo}..={hi}"
        )));
    }
    let mut candidates = Vec::new();
    for k in lo..=hi {
        let sub = TrainingConfig {
            k: KChoice::Fixed(k),
            ..config.clone()
        };
        let outcome = em_fit(data, &sub).map_err(|e| e.to_string());
        candidates.push(KCandidate { k, outcome });
    }
    let best_k = candidates
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok().map(|r| (c.k, r.h_value)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
        .ok_or_else(|| Error::InvalidParameter("every candidate K failed to fit".into()))?;
    Ok(SelectionReport { best_k, candidates })
}

/// Alternative model-count rule: the smallest K at which the entropy
/// criterion plateaus, i.e. adding one more component improves H by less
/// than `delta`. More robust than the raw argmin when H keeps creeping down
/// marginally past the true count. `delta` defaults to `0.05 * |H(first)|`
/// when `None`; falls back to the largest fitted K if H never plateaus.
pub fn select_k_by_delta(report: &SelectionReport, delta: Option<f64>) -> Option<usize> {
    let fitted: Vec<(usize, f64)> = report
        .candidates
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok().map(|r| (c.k, r.h_value)))
        .collect();
    let delta = delta.unwrap_or(0.05 * fitted.first()?.1.abs());
    fitted
        .windows(2)
        .find(|w| w[0].1 - w[1].1 < delta)
        .map(|w| w[0].0)
        .or_else(|| fitted.last().map(|&(k, _)| k))
}

/// Draw `n` samples from a mixture; used by the synthetic benchmark and by
/// generator-based tests.
pub fn sample_mixture(m: &MixtureParams, rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let d = m.d();
    let mut data = DMatrix::zeros(n, d);
    for row in 0..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut comp = m.k() - 1;
        for (i, &p) in m.pi.iter().enumerate() {
            acc += p;
            if u < acc {
                comp = i;
                break;
            }
        }
        let p = &m.locals[comp];
        let x = DVector::from_fn(p.q(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = DVector::from_fn(d, |_, _| {
            p.sigma2().sqrt() * rng.sample::<f64, _>(StandardNormal)
        });
        let t = p.w() * x + p.mu() + noise;
        data.set_row(row, &t.transpose());
    }
    data
}
