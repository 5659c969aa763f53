//! Training and monitoring with partially observed samples.
//!
//! Missing entries are handled by Gaussian marginalization (for densities)
//! and by responsibility-weighted conditional-mean imputation (for
//! everything that needs a complete vector). Training alternates imputation
//! under the current model with one standard EM iteration on the completed
//! data; monitoring imputes and then scores the completed vector, so the
//! thresholds calibrated on complete training statistics stay valid for any
//! mask.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mixture::{
    em_fit, em_refine, initialize, MixtureParams, TrainingConfig, TrainingReport,
};
use crate::monitoring::{detect, global_statistics, AlarmDecision, DetectionMode};
use crate::monitoring::{GlobalStatistics, StatisticMode, ThresholdSet};
use crate::ppca::{PpcaParams, LN_2PI};

/// One observation with a per-coordinate observed mask. Unobserved values
/// are carried as NaN and never read by any computation.
#[derive(Debug, Clone)]
pub struct MaskedSample {
    values: DVector<f64>,
    observed: Vec<bool>,
}

// Manual equality: NaN placeholders at unobserved coordinates must not make
// otherwise-identical samples compare unequal.
impl PartialEq for MaskedSample {
    fn eq(&self, other: &Self) -> bool {
        self.observed == other.observed
            && self
                .observed
                .iter()
                .enumerate()
                .all(|(j, &o)| !o || self.values[j] == other.values[j])
    }
}

impl MaskedSample {
    pub fn new(values: DVector<f64>, observed: Vec<bool>) -> Result<Self> {
        if values.len() != observed.len() {
            return Err(Error::DimensionMismatch {
                expected: values.len(),
                got: observed.len(),
            });
        }
        if !observed.iter().any(|&o| o) {
            return Err(Error::EmptyMask);
        }
        let mut values = values;
        for (j, &o) in observed.iter().enumerate() {
            if !o {
                values[j] = f64::NAN;
            }
        }
        Ok(Self { values, observed })
    }

    pub fn complete(values: DVector<f64>) -> Result<Self> {
        let observed = vec![true; values.len()];
        Self::new(values, observed)
    }

    pub fn d(&self) -> usize {
        self.values.len()
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    /// Value at an observed coordinate; NaN at missing coordinates.
    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn is_complete(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.d()).filter(|&j| self.observed[j]).collect()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.d()).filter(|&j| !self.observed[j]).collect()
    }
}

/// Log-density of the observed sub-vector under the Gaussian marginal of
/// `p` restricted to the observed coordinates. Full masks take the exact
/// same code path as [`PpcaParams::log_density`].
pub fn marginal_log_density(p: &PpcaParams, s: &MaskedSample) -> Result<f64> {
    if s.d() != p.d() {
        return Err(Error::DimensionMismatch {
            expected: p.d(),
            got: s.d(),
        });
    }
    if s.is_complete() {
        return p.log_density(s.values());
    }
    let obs = s.observed_indices();
    let d_o = obs.len();
    let q = p.q();
    // Observed-rows loading and centered observed vector.
    let w_o = DMatrix::from_fn(d_o, q, |r, c| p.w()[(obs[r], c)]);
    let z_o = DVector::from_fn(d_o, |r, _| s.values()[obs[r]] - p.mu()[obs[r]]);
    // C_oo = sigma2 I + W_o W_o^T; same Woodbury structure as the full model.
    let mut m_o = w_o.transpose() * &w_o;
    for j in 0..q {
        m_o[(j, j)] += p.sigma2();
    }
    let chol = nalgebra::Cholesky::new(m_o).expect("M_o is positive definite for sigma2 > 0");
    let ln_det_m: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let ln_det_c = (d_o as f64 - q as f64) * p.sigma2().ln() + ln_det_m;
    let a = w_o.transpose() * &z_o;
    let quad = (z_o.dot(&z_o) - a.dot(&chol.solve(&a))) / p.sigma2();
    Ok(-0.5 * (d_o as f64 * LN_2PI + ln_det_c + quad))
}

/// Log of the mixture marginal density of the observed sub-vector.
pub fn mixture_marginal_log_density(m: &MixtureParams, s: &MaskedSample) -> Result<f64> {
    let mut terms = Vec::with_capacity(m.k());
    for (p, &pi) in m.locals().iter().zip(m.pi()) {
        terms.push(pi.ln() + marginal_log_density(p, s)?);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Ok(max);
    }
    let sum: f64 = terms.iter().map(|&t| (t - max).exp()).sum();
    Ok(max + sum.ln())
}

fn marginal_responsibilities(m: &MixtureParams, s: &MaskedSample) -> Result<Vec<f64>> {
    let mut terms = Vec::with_capacity(m.k());
    for (p, &pi) in m.locals().iter().zip(m.pi()) {
        terms.push(pi.ln() + marginal_log_density(p, s)?);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Ok(vec![1.0 / m.k() as f64; m.k()]);
    }
    let mut weights: Vec<f64> = terms.iter().map(|&t| (t - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// Fill the missing block with the responsibility-weighted Gaussian
/// conditional means; observed coordinates pass through unchanged.
pub fn conditional_impute(m: &MixtureParams, s: &MaskedSample) -> Result<DVector<f64>> {
    if s.d() != m.d() {
        return Err(Error::DimensionMismatch {
            expected: m.d(),
            got: s.d(),
        });
    }
    if s.is_complete() {
        return Ok(s.values().clone());
    }
    let obs = s.observed_indices();
    let miss = s.missing_indices();
    let weights = marginal_responsibilities(m, s)?;
    let mut filled = s.values().clone();
    for j in &miss {
        filled[*j] = 0.0;
    }
    for (p, &r) in m.locals().iter().zip(&weights) {
        let d_o = obs.len();
        let q = p.q();
        let w_o = DMatrix::from_fn(d_o, q, |a, b| p.w()[(obs[a], b)]);
        let z_o = DVector::from_fn(d_o, |a, _| s.values()[obs[a]] - p.mu()[obs[a]]);
        let mut c_oo = &w_o * w_o.transpose();
        for j in 0..d_o {
            c_oo[(j, j)] += p.sigma2();
        }
        let solved = nalgebra::Cholesky::new(c_oo)
            .expect("C_oo is positive definite for sigma2 > 0")
            .solve(&z_o);
        // Cross-covariance C_uo = W_u W_o^T (u and o are disjoint, so the
        // isotropic term contributes nothing off-diagonal).
        let w_u = DMatrix::from_fn(miss.len(), q, |a, b| p.w()[(miss[a], b)]);
        let cond = &w_u * (w_o.transpose() * &solved);
        for (a, &j) in miss.iter().enumerate() {
            filled[j] += r * (p.mu()[j] + cond[a]);
        }
    }
    Ok(filled)
}

fn check_rows(rows: &[MaskedSample]) -> Result<usize> {
    let d = rows.first().ok_or(Error::EmptyData)?.d();
    for s in rows {
        if s.d() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.d(),
            });
        }
    }
    for j in 0..d {
        if !rows.iter().any(|s| s.observed()[j]) {
            return Err(Error::UnobservedCoordinate(j));
        }
    }
    Ok(d)
}

fn column_mean_fill(rows: &[MaskedSample], d: usize) -> DMatrix<f64> {
    let mut means = vec![0.0; d];
    for (j, mean) in means.iter_mut().enumerate() {
        let (mut sum, mut count) = (0.0, 0usize);
        for s in rows {
            if s.observed()[j] {
                sum += s.values()[j];
                count += 1;
            }
        }
        *mean = sum / count as f64;
    }
    DMatrix::from_fn(rows.len(), d, |r, c| {
        if rows[r].observed()[c] {
            rows[r].values()[c]
        } else {
            means[c]
        }
    })
}

pub fn impute_all(m: &MixtureParams, rows: &[MaskedSample]) -> Result<DMatrix<f64>> {
    let mut data = DMatrix::zeros(rows.len(), m.d());
    for (r, s) in rows.iter().enumerate() {
        let filled = conditional_impute(m, s)?;
        data.set_row(r, &filled.transpose());
    }
    Ok(data)
}

/// EM with missing values: alternate conditional-mean imputation under the
/// current model with one standard EM iteration on the completed data. The
/// reported trace is the observed-data marginal log-likelihood. Fully
/// observed input delegates to [`em_fit`] and reproduces it exactly.
pub fn em_fit_missing(rows: &[MaskedSample], config: &TrainingConfig) -> Result<TrainingReport> {
    let d = check_rows(rows)?;
    if rows.iter().all(|s| s.is_complete()) {
        let data = DMatrix::from_fn(rows.len(), d, |r, c| rows[r].values()[c]);
        return em_fit(&data, config);
    }
    let filled0 = column_mean_fill(rows, d);
    let k = match config.k {
        crate::mixture::KChoice::Fixed(k) => k,
        crate::mixture::KChoice::Range(..) => {
            return Err(Error::InvalidParameter(
                "em_fit_missing requires a fixed K".into(),
            ))
        }
    };
    let q = match config.q {
        crate::mixture::QChoice::Fixed(q) => q,
        crate::mixture::QChoice::ContributionRate(rate) => {
            crate::mixture::choose_q(&filled0, rate)?
        }
    };
    let mut params = initialize(&filled0, k, q, config.seed)?;
    let step_config = TrainingConfig {
        max_iterations: 1,
        ..config.clone()
    };
    let mut trace = Vec::new();
    let mut rescues = 0;
    let mut iterations_used = 0;
    let mut imputed = filled0;
    for _ in 0..config.max_iterations {
        imputed = impute_all(&params, rows)?;
        let observed_ll: f64 = rows
            .iter()
            .map(|s| mixture_marginal_log_density(&params, s))
            .sum::<Result<f64>>()?;
        let converged = trace.last().is_some_and(|&prev: &f64| {
            (observed_ll - prev).abs() <= config.tolerance * prev.abs().max(1.0)
        });
        trace.push(observed_ll);
        if converged {
            break;
        }
        let step = em_refine(&imputed, &mut params, &step_config)?;
        rescues += step.rescues;
        iterations_used += 1;
    }
    let h_value = params.entropy_criterion(&imputed)?;
    Ok(TrainingReport {
        params,
        log_likelihood_trace: trace,
        iterations_used,
        h_value,
        rescues,
    })
}

/// Impute a masked sample, then run the standard monitoring path on the
/// completed vector.
pub fn monitor_missing(
    m: &MixtureParams,
    th: &ThresholdSet,
    s: &MaskedSample,
    stat_mode: StatisticMode,
    det_mode: DetectionMode,
) -> Result<(GlobalStatistics, AlarmDecision)> {
    let filled = conditional_impute(m, s)?;
    let g = global_statistics(m, &filled, stat_mode)?;
    let decision = detect(&g, th, det_mode);
    Ok((g, decision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{sample_mixture, KChoice, QChoice};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_params(rng: &mut ChaCha8Rng, d: usize, q: usize) -> PpcaParams {
        let w = DMatrix::from_fn(d, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mu = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        PpcaParams::new(w, mu, 0.2 + rng.gen::<f64>()).unwrap()
    }

    fn dense_marginal_oracle(p: &PpcaParams, s: &MaskedSample) -> f64 {
        let obs = s.observed_indices();
        let c = p.model_covariance();
        let d_o = obs.len();
        let c_oo = DMatrix::from_fn(d_o, d_o, |a, b| c[(obs[a], obs[b])]);
        let mu_o = DVector::from_fn(d_o, |a, _| p.mu()[obs[a]]);
        let t_o = DVector::from_fn(d_o, |a, _| s.values()[obs[a]]);
        let chol = nalgebra::Cholesky::new(c_oo).unwrap();
        let ln_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let z = &t_o - &mu_o;
        let quad = z.dot(&chol.solve(&z));
        -0.5 * (d_o as f64 * LN_2PI + ln_det + quad)
    }

    #[test]
    fn full_mask_equals_log_density_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng, 5, 2);
        let t = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = MaskedSample::complete(t.clone()).unwrap();
        assert_eq!(
            marginal_log_density(&p, &s).unwrap(),
            p.log_density(&t).unwrap()
        );
    }

    #[test]
    fn one_observed_coordinate_standard_normal() {
        let p = PpcaParams::new(DMatrix::zeros(2, 1), DVector::zeros(2), 1.0).unwrap();
        let s = MaskedSample::new(
            DVector::from_column_slice(&[0.0, 123.0]),
            vec![true, false],
        )
        .unwrap();
        let v = marginal_log_density(&p, &s).unwrap();
        assert_relative_eq!(v, -0.5 * LN_2PI, epsilon = 1e-12);
    }

    #[test]
    fn marginal_matches_dense_submatrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let p = random_params(&mut rng, 6, 2);
            let t = DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut mask: Vec<bool> = (0..6).map(|_| rng.gen_bool(0.6)).collect();
            if !mask.iter().any(|&o| o) {
                mask[0] = true;
            }
            let s = MaskedSample::new(t, mask).unwrap();
            assert_relative_eq!(
                marginal_log_density(&p, &s).unwrap(),
                dense_marginal_oracle(&p, &s),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(matches!(
            MaskedSample::new(DVector::zeros(3), vec![false, false, false]),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn impute_full_mask_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, 4, 1);
        let m = MixtureParams::new(vec![p], vec![1.0]).unwrap();
        let t = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = MaskedSample::complete(t.clone()).unwrap();
        assert_eq!(conditional_impute(&m, &s).unwrap(), t);
    }

    #[test]
    fn impute_diagonal_model_fills_mean() {
        let mu = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let p = PpcaParams::new(DMatrix::zeros(3, 1), mu.clone(), 1.0).unwrap();
        let m = MixtureParams::new(vec![p], vec![1.0]).unwrap();
        let s = MaskedSample::new(
            DVector::from_column_slice(&[5.0, 0.0, 0.0]),
            vec![true, false, false],
        )
        .unwrap();
        let filled = conditional_impute(&m, &s).unwrap();
        assert_eq!(filled[0], 5.0);
        assert_relative_eq!(filled[1], 2.0, epsilon = 1e-12);
        assert_relative_eq!(filled[2], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn impute_matches_bivariate_conditional_oracle() {
        // d=2, q=1 correlated model: E[t2 | t1] = mu2 + C21/C11 (t1 - mu1).
        let w = DMatrix::from_column_slice(2, 1, &[1.0, 0.8]);
        let mu = DVector::from_column_slice(&[0.5, -0.5]);
        let p = PpcaParams::new(w, mu.clone(), 0.3).unwrap();
        let c = p.model_covariance();
        let m = MixtureParams::new(vec![p], vec![1.0]).unwrap();
        let s = MaskedSample::new(
            DVector::from_column_slice(&[2.0, 0.0]),
            vec![true, false],
        )
        .unwrap();
        let filled = conditional_impute(&m, &s).unwrap();
        let want = mu[1] + c[(1, 0)] / c[(0, 0)] * (2.0 - mu[0]);
        assert_relative_eq!(filled[1], want, epsilon = 1e-9);
    }

    #[test]
    fn impute_never_alters_observed_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let locals = vec![random_params(&mut rng, 5, 2), random_params(&mut rng, 5, 2)];
        let m = MixtureParams::new(locals, vec![0.4, 0.6]).unwrap();
        for _ in 0..20 {
            let t = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut mask: Vec<bool> = (0..5).map(|_| rng.gen_bool(0.5)).collect();
            if !mask.iter().any(|&o| o) {
                mask[2] = true;
            }
            let s = MaskedSample::new(t.clone(), mask.clone()).unwrap();
            let filled = conditional_impute(&m, &s).unwrap();
            for j in 0..5 {
                if mask[j] {
                    assert_eq!(filled[j], t[j]);
                }
            }
        }
    }

    fn mask_rows(data: &DMatrix<f64>, rate: f64, seed: u64) -> Vec<MaskedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..data.nrows())
            .map(|r| {
                let mut mask: Vec<bool> = (0..data.ncols())
                    .map(|_| !rng.gen_bool(rate))
                    .collect();
                if !mask.iter().any(|&o| o) {
                    mask[0] = true;
                }
                MaskedSample::new(data.row(r).transpose(), mask).unwrap()
            })
            .collect()
    }

    fn two_cluster(separation: f64) -> MixtureParams {
        let d = 4;
        let w1 = DMatrix::from_column_slice(d, 1, &[1.0, 0.5, 0.0, 0.0]);
        let w2 = DMatrix::from_column_slice(d, 1, &[0.0, 0.0, 1.0, -0.5]);
        MixtureParams::new(
            vec![
                PpcaParams::new(w1, DVector::zeros(d), 0.4).unwrap(),
                PpcaParams::new(w2, DVector::from_element(d, separation), 0.4).unwrap(),
            ],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn fully_observed_reproduces_em_fit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = sample_mixture(&two_cluster(6.0), &mut rng, 200);
        let rows: Vec<MaskedSample> = (0..200)
            .map(|r| MaskedSample::complete(data.row(r).transpose()).unwrap())
            .collect();
        let config = TrainingConfig {
            k: KChoice::Fixed(2),
            q: QChoice::Fixed(1),
            seed: 17,
            max_iterations: 40,
            ..Default::default()
        };
        let a = em_fit_missing(&rows, &config).unwrap();
        let b = em_fit(&data, &config).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log_likelihood_trace, b.log_likelihood_trace);
    }

    #[test]
    fn mcar_training_recovers_complete_data_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gen = two_cluster(8.0);
        let data = sample_mixture(&gen, &mut rng, 2000);
        let rows = mask_rows(&data, 0.15, 99);
        let config = TrainingConfig {
            k: KChoice::Fixed(2),
            q: QChoice::Fixed(1),
            seed: 5,
            max_iterations: 100,
            ..Default::default()
        };
        let complete = em_fit(&data, &config).unwrap();
        let masked = em_fit_missing(&rows, &config).unwrap();
        // Match components by nearest mean, then compare coordinates.
        for pm in masked.params.locals() {
            let closest = complete
                .params
                .locals()
                .iter()
                .min_by(|a, b| {
                    (pm.mu() - a.mu()).norm().total_cmp(&(pm.mu() - b.mu()).norm())
                })
                .unwrap();
            let sigma = closest.sigma2().sqrt();
            for j in 0..4 {
                assert!(
                    (pm.mu()[j] - closest.mu()[j]).abs() < 0.2 * sigma.max(1.0),
                    "coordinate {j} off: {} vs {}",
                    pm.mu()[j],
                    closest.mu()[j]
                );
            }
        }
    }

    #[test]
    fn observed_loglik_trace_nondecreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = sample_mixture(&two_cluster(6.0), &mut rng, 400);
        let rows = mask_rows(&data, 0.10, 3);
        let config = TrainingConfig {
            k: KChoice::Fixed(2),
            q: QChoice::Fixed(1),
            seed: 11,
            max_iterations: 60,
            ..Default::default()
        };
        let report = em_fit_missing(&rows, &config).unwrap();
        for w in report.log_likelihood_trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-6 * w[0].abs().max(1.0),
                "{} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn unobserved_coordinate_is_an_error() {
        let rows: Vec<MaskedSample> = (0..5)
            .map(|_| {
                MaskedSample::new(
                    DVector::from_column_slice(&[1.0, 2.0, 3.0]),
                    vec![true, true, false],
                )
                .unwrap()
            })
            .collect();
        let config = TrainingConfig {
            k: KChoice::Fixed(1),
            q: QChoice::Fixed(1),
            ..Default::default()
        };
        assert!(matches!(
            em_fit_missing(&rows, &config),
            Err(Error::UnobservedCoordinate(2))
        ));
    }

    #[test]
    fn monitor_full_mask_matches_standard_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gen = two_cluster(6.0);
        let train = sample_mixture(&gen, &mut rng, 400);
        let th = crate::monitoring::fit_thresholds(
            &gen,
            &train,
            0.99,
            StatisticMode::PosteriorNormalized,
        )
        .unwrap();
        let t = train.row(0).transpose();
        let s = MaskedSample::complete(t.clone()).unwrap();
        let (g, decision) = monitor_missing(
            &gen,
            &th,
            &s,
            StatisticMode::PosteriorNormalized,
            DetectionMode::Combined,
        )
        .unwrap();
        let g_direct = global_statistics(&gen, &t, StatisticMode::PosteriorNormalized).unwrap();
        assert_eq!(g.tc2, g_direct.tc2);
        assert_eq!(
            decision.alarm,
            detect(&g_direct, &th, DetectionMode::Combined).alarm
        );
    }
}
