//! Monitoring statistics, KDE-based alarm thresholds, detection logic, and
//! MAR/FAR evaluation.
//!
//! Each local model scores a sample with three statistics: T2 in the latent
//! subspace, SPE in the residual subspace, and the composite Tc2, which is
//! the full Mahalanobis distance under the local model covariance. Global
//! statistics are responsibility-weighted means of the local ones. Alarm
//! limits are alpha-quantiles of a Gaussian-kernel density estimate over the
//! training statistics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::mixture::MixtureParams;
use crate::ppca::{PpcaFactors, PpcaParams};

/// Which algebraic form of the T2 / SPE statistics to evaluate.
///
/// The posterior-normalized form scales the latent score by the posterior
/// precision (`M^-1`); the literal form uses `M` in its place. The
/// composite Tc2 statistic is identical in both modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatisticMode {
    PosteriorNormalized,
    Literal,
}

impl Default for StatisticMode {
    fn default() -> Self {
        StatisticMode::PosteriorNormalized
    }
}

/// Alarm rule: dual chart (T2 or SPE exceeds its limit) or the single
/// combined chart (Tc2 exceeds its limit).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionMode {
    Dual,
    Combined,
}

impl Default for DetectionMode {
    fn default() -> Self {
        DetectionMode::Combined
    }
}

/// Statistics of one sample under one local model.
#[derive(Debug, Clone, Copy)]
pub struct LocalStatistics {
    pub t2: f64,
    pub spe: f64,
    pub tc2: f64,
    pub model_index: usize,
}

/// Responsibility-weighted statistics of one sample under the mixture.
#[derive(Debug, Clone)]
pub struct GlobalStatistics {
    pub t2: f64,
    pub spe: f64,
    pub tc2: f64,
    pub responsibilities: Vec<f64>,
}

/// Alarm limits for the three statistics at confidence `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub j_t2: f64,
    pub j_spe: f64,
    pub j_tc2: f64,
    pub alpha: f64,
    pub h_t2: f64,
    pub h_spe: f64,
    pub h_tc2: f64,
    /// Number of training statistics the thresholds were estimated from.
    pub n: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AlarmDecision {
    pub alarm: bool,
    pub mode: DetectionMode,
}

/// Confusion counts and the derived alarm rates, as percentages. A rate is
/// `None` when its denominator is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mar: Option<f64>,
    pub far: Option<f64>,
    pub detected_faults: usize,
    pub missed_faults: usize,
    pub false_alarms: usize,
    pub true_negatives: usize,
}

fn center(p: &PpcaParams, t: &DVector<f64>) -> DVector<f64> {
    t - p.mu()
}

pub(crate) fn local_statistics_with(
    p: &PpcaParams,
    f: &PpcaFactors,
    t: &DVector<f64>,
    mode: StatisticMode,
    model_index: usize,
) -> LocalStatistics {
    let z = center(p, t);
    let a = p.w().transpose() * &z;
    let tc2 = p.mahalanobis_sq(f, t);
    let (t2, spe) = match mode {
        StatisticMode::PosteriorNormalized => {
            let t2 = a.dot(&(&f.m_inv * &a)) / p.sigma2();
            let residual = &z - p.w() * (&f.m_inv * &a);
            (t2, residual.dot(&residual) / p.sigma2())
        }
        StatisticMode::Literal => {
            let m = p.m_matrix();
            let score = &m * &a;
            let t2 = score.dot(&score);
            let residual = &z - p.w() * (&m * &a);
            (t2, residual.dot(&residual) / p.sigma2())
        }
    };
    LocalStatistics {
        t2,
        spe,
        tc2,
        model_index,
    }
}

/// Three monitoring statistics of `t` under local model `i` (0-based).
pub fn local_statistics(
    m: &MixtureParams,
    i: usize,
    t: &DVector<f64>,
    mode: StatisticMode,
) -> Result<LocalStatistics> {
    if i >= m.k() {
        return Err(Error::InvalidParameter(format!(
            "model index {i} out of range for K={}",
            m.k()
        )));
    }
    if t.len() != m.d() {
        return Err(Error::DimensionMismatch {
            expected: m.d(),
            got: t.len(),
        });
    }
    let p = &m.locals()[i];
    Ok(local_statistics_with(p, &p.factors(), t, mode, i))
}

/// Responsibility-weighted global statistics of one sample. Since the
/// responsibilities sum to 1, the weighted sums need no denominator.
pub fn global_statistics(
    m: &MixtureParams,
    t: &DVector<f64>,
    mode: StatisticMode,
) -> Result<GlobalStatistics> {
    let factors = m.factors();
    global_statistics_with(m, &factors, t, mode)
}

pub(crate) fn global_statistics_with(
    m: &MixtureParams,
    factors: &[PpcaFactors],
    t: &DVector<f64>,
    mode: StatisticMode,
) -> Result<GlobalStatistics> {
    let responsibilities = m.responsibilities_single(t)?;
    let (mut t2, mut spe, mut tc2) = (0.0, 0.0, 0.0);
    for (i, (p, f)) in m.locals().iter().zip(factors).enumerate() {
        let local = local_statistics_with(p, f, t, mode, i);
        let r = responsibilities[i];
        t2 += r * local.t2;
        spe += r * local.spe;
        tc2 += r * local.tc2;
    }
    Ok(GlobalStatistics {
        t2,
        spe,
        tc2,
        responsibilities,
    })
}

/// Gaussian-kernel density estimate at `z`.
pub fn kde_density(samples: &[f64], h: f64, z: f64) -> f64 {
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let sum: f64 = samples
        .iter()
        .map(|&zn| {
            let u = (z - zn) / h;
            norm * (-0.5 * u * u).exp()
        })
        .sum();
    sum / (samples.len() as f64 * h)
}

fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// KDE cumulative distribution: mean of standard-normal CDFs centered at
/// the samples with scale `h`.
pub fn kde_cdf(samples: &[f64], h: f64, z: f64) -> f64 {
    let sum: f64 = samples
        .iter()
        .map(|&zn| standard_normal_cdf((z - zn) / h))
        .sum();
    sum / samples.len() as f64
}

/// Rule-of-thumb bandwidth `1.06 s N^(-1/5)` with `s` the sample standard
/// deviation (two-pass, N-1 denominator).
pub fn optimal_bandwidth(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::DegenerateSample(
            "bandwidth needs at least two samples".into(),
        ));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let s = var.sqrt();
    if s <= 0.0 {
        return Err(Error::DegenerateSample(
            "all statistic samples identical; bandwidth undefined".into(),
        ));
    }
    Ok(1.06 * s * (n as f64).powf(-0.2))
}

/// Alpha-quantile of the KDE distribution with rule-of-thumb bandwidth.
pub fn threshold(samples: &[f64], alpha: f64) -> Result<f64> {
    let h = optimal_bandwidth(samples)?;
    threshold_with_bandwidth(samples, h, alpha)
}

/// Solve `KDE-CDF(J) = alpha` by bisection over
/// `[min - 10h, max + 10h]`.
pub fn threshold_with_bandwidth(samples: &[f64], h: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (min - 10.0 * h, max + 10.0 * h);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let c = kde_cdf(samples, h, mid);
        if (c - alpha).abs() < 1e-8 {
            return Ok(mid);
        }
        if c < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // The CDF is monotone, so 200 halvings of the bracket leave only a
    // sub-epsilon interval; reaching it with a residual above tolerance
    // means the inputs were not finite.
    if lo.is_finite() && hi.is_finite() {
        Ok(0.5 * (lo + hi))
    } else {
        Err(Error::NonConvergence)
    }
}

/// Estimate the three thresholds from training-data global statistics.
pub fn fit_thresholds(
    m: &MixtureParams,
    data: &DMatrix<f64>,
    alpha: f64,
    mode: StatisticMode,
) -> Result<ThresholdSet> {
    let factors = m.factors();
    let n = data.nrows();
    let mut t2 = Vec::with_capacity(n);
    let mut spe = Vec::with_capacity(n);
    let mut tc2 = Vec::with_capacity(n);
    for row in 0..n {
        let g = global_statistics_with(m, &factors, &data.row(row).transpose(), mode)?;
        t2.push(g.t2);
        spe.push(g.spe);
        tc2.push(g.tc2);
    }
    let (h_t2, h_spe, h_tc2) = (
        optimal_bandwidth(&t2)?,
        optimal_bandwidth(&spe)?,
        optimal_bandwidth(&tc2)?,
    );
    Ok(ThresholdSet {
        j_t2: threshold_with_bandwidth(&t2, h_t2, alpha)?,
        j_spe: threshold_with_bandwidth(&spe, h_spe, alpha)?,
        j_tc2: threshold_with_bandwidth(&tc2, h_tc2, alpha)?,
        alpha,
        h_t2,
        h_spe,
        h_tc2,
        n,
    })
}

/// Alarm decision. Values exactly at the threshold do not alarm.
pub fn detect(g: &GlobalStatistics, th: &ThresholdSet, mode: DetectionMode) -> AlarmDecision {
    let alarm = match mode {
        DetectionMode::Dual => g.t2 > th.j_t2 || g.spe > th.j_spe,
        DetectionMode::Combined => g.tc2 > th.j_tc2,
    };
    AlarmDecision { alarm, mode }
}

/// Missing-alarm and false-alarm rates of an alarm series against fault
/// labels, as percentages.
pub fn evaluate(alarms: &[bool], fault_labels: &[bool]) -> Result<EvaluationReport> {
    if alarms.len() != fault_labels.len() {
        return Err(Error::DimensionMismatch {
            expected: fault_labels.len(),
            got: alarms.len(),
        });
    }
    let (mut detected, mut missed, mut false_alarms, mut true_negatives) = (0, 0, 0, 0);
    for (&alarm, &faulty) in alarms.iter().zip(fault_labels) {
        match (alarm, faulty) {
            (true, true) => detected += 1,
            (false, true) => missed += 1,
            (true, false) => false_alarms += 1,
            (false, false) => true_negatives += 1,
        }
    }
    let faults = detected + missed;
    let normals = false_alarms + true_negatives;
    Ok(EvaluationReport {
        mar: (faults > 0).then(|| 100.0 * missed as f64 / faults as f64),
        far: (normals > 0).then(|| 100.0 * false_alarms as f64 / normals as f64),
        detected_faults: detected,
        missed_faults: missed,
        false_alarms,
        true_negatives,
    })
}
