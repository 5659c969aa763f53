//! Reproducible synthetic process generator with fault injection and
//! missing-value masking; a desk-scale stand-in for plant benchmark data.
//!
//! Draws come from a configured PPCA mixture. The seed feeds a ChaCha
//! generator with fixed stream splitting (train / test / mask), so the
//! train and test draws are independent and every dataset is byte-identical
//! for the same spec.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::missing::MaskedSample;
use crate::mixture::{sample_mixture, MixtureParams};
use crate::ppca::PpcaParams;

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const MASK_STREAM: u64 = 3;

/// One generating cluster; `w` is row-major d x q.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub w: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub sigma2: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    /// Constant offset on the affected variables from the onset onward.
    StepBias,
    /// Offset growing linearly from 0 at onset to the full magnitude at the
    /// end of the test stream.
    RampDrift,
    /// Deviation from the process mean amplified by (1 + magnitude).
    GainChange,
    /// Extra zero-mean noise with the given magnitude.
    NoiseIncrease,
}

/// Fault transform applied to the test stream. Magnitude is in units of the
/// per-variable marginal standard deviation of the normal process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub magnitude: f64,
    /// Test-stream index of the first faulty sample.
    pub onset: usize,
    pub variables: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub clusters: Vec<ClusterSpec>,
    pub n_normal: usize,
    pub n_test: usize,
    pub fault: FaultSpec,
    /// MCAR cell-masking rate applied to both generated datasets.
    pub missing_rate: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn d(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.mu.len())
    }

    pub fn to_mixture(&self) -> Result<MixtureParams> {
        let locals = self
            .clusters
            .iter()
            .map(|c| {
                let d = c.mu.len();
                let q = c.w.first().map_or(0, Vec::len);
                if c.w.len() != d || c.w.iter().any(|row| row.len() != q) {
                    return Err(Error::InvalidParameter(
                        "cluster loading matrix is ragged or mismatched with mu".into(),
                    ));
                }
                let w = DMatrix::from_fn(d, q, |r, col| c.w[r][col]);
                PpcaParams::new(w, DVector::from_vec(c.mu.clone()), c.sigma2)
            })
            .collect::<Result<Vec<_>>>()?;
        MixtureParams::new(locals, self.clusters.iter().map(|c| c.weight).collect())
    }

    fn validate(&self) -> Result<MixtureParams> {
        let mixture = self.to_mixture()?;
        if self.n_normal == 0 || self.n_test == 0 {
            return Err(Error::InvalidParameter(
                "n_normal and n_test must be positive".into(),
            ));
        }
        if self.fault.onset >= self.n_test {
            return Err(Error::InvalidParameter(format!(
                "fault onset {} outside test range 0..{}",
                self.fault.onset, self.n_test
            )));
        }
        if self.fault.magnitude < 0.0 {
            return Err(Error::InvalidParameter(
                "fault magnitude must be nonnegative".into(),
            ));
        }
        if self.fault.variables.iter().any(|&v| v >= mixture.d()) {
            return Err(Error::InvalidParameter(
                "fault variable index out of range".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::InvalidParameter(format!(
                "missing rate must lie in [0, 1), got {}",
                self.missing_rate
            )));
        }
        Ok(mixture)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Marginal mean and standard deviation of each variable under the mixture.
fn marginal_moments(m: &MixtureParams) -> (DVector<f64>, DVector<f64>) {
    let d = m.d();
    let mut mean = DVector::zeros(d);
    for (p, &pi) in m.locals().iter().zip(m.pi()) {
        mean.axpy(pi, p.mu(), 1.0);
    }
    let mut var = DVector::zeros(d);
    for (p, &pi) in m.locals().iter().zip(m.pi()) {
        for j in 0..d {
            let c_jj = p.sigma2() + p.w().row(j).norm_squared();
            var[j] += pi * (c_jj + p.mu()[j].powi(2));
        }
    }
    for j in 0..d {
        var[j] -= mean[j].powi(2);
    }
    (mean, var.map(f64::sqrt))
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn apply_fault(
    data: &mut DMatrix<f64>,
    fault: &FaultSpec,
    mean: &DVector<f64>,
    sigma: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) {
    let n = data.nrows();
    for row in fault.onset..n {
        for &j in &fault.variables {
            let shift = fault.magnitude * sigma[j];
            match fault.kind {
                FaultKind::StepBias => data[(row, j)] += shift,
                FaultKind::RampDrift => {
                    let span = (n - fault.onset).max(1) as f64;
                    let progress = (row - fault.onset + 1) as f64 / span;
                    data[(row, j)] += shift * progress;
                }
                FaultKind::GainChange => {
                    data[(row, j)] =
                        mean[j] + (1.0 + fault.magnitude) * (data[(row, j)] - mean[j]);
                }
                FaultKind::NoiseIncrease => {
                    data[(row, j)] += shift * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }
}

fn mask_dataset(data: &DMatrix<f64>, rate: f64, rng: &mut ChaCha8Rng) -> Vec<MaskedSample> {
    (0..data.nrows())
        .map(|r| {
            let mut mask: Vec<bool> = (0..data.ncols()).map(|_| !rng.gen_bool(rate)).collect();
            if !mask.iter().any(|&o| o) {
                // Keep the row usable: force one observed coordinate.
                mask[r % data.ncols()] = true;
            }
            MaskedSample::new(data.row(r).transpose(), mask).expect("mask has observed entry")
        })
        .collect()
}

/// Generate the training stream (normal operation) and the labeled test
/// stream (fault from the onset index onward).
pub fn generate(spec: &ScenarioSpec) -> Result<(Dataset, Dataset)> {
    let mixture = spec.validate()?;
    let (mean, sigma) = marginal_moments(&mixture);

    let mut train_rng = rng_for(spec.seed, TRAIN_STREAM);
    let train_matrix = sample_mixture(&mixture, &mut train_rng, spec.n_normal);

    let mut test_rng = rng_for(spec.seed, TEST_STREAM);
    let mut test_matrix = sample_mixture(&mixture, &mut test_rng, spec.n_test);
    apply_fault(&mut test_matrix, &spec.fault, &mean, &sigma, &mut test_rng);

    let mut mask_rng = rng_for(spec.seed, MASK_STREAM);
    let (train_rows, test_rows) = if spec.missing_rate > 0.0 {
        (
            mask_dataset(&train_matrix, spec.missing_rate, &mut mask_rng),
            mask_dataset(&test_matrix, spec.missing_rate, &mut mask_rng),
        )
    } else {
        (
            Dataset::from_matrix(&train_matrix).rows,
            Dataset::from_matrix(&test_matrix).rows,
        )
    };

    let column_names: Vec<String> = (1..=spec.d()).map(|j| format!("x{j}")).collect();
    let train = Dataset {
        rows: train_rows,
        column_names: column_names.clone(),
        fault_labels: None,
        has_header: true,
    };
    let labels: Vec<bool> = (0..spec.n_test).map(|i| i >= spec.fault.onset).collect();
    let test = Dataset {
        rows: test_rows,
        column_names,
        fault_labels: Some(labels),
        has_header: true,
    };
    Ok((train, test))
}

/// A well-separated multi-cluster scenario used by the benchmark harness
/// and examples: `k_true` clusters in `d` dimensions with latent dimension
/// `q`, cluster centers `separation` noise-stds apart.
pub fn benchmark_scenario(
    k_true: usize,
    d: usize,
    q: usize,
    separation: f64,
    n_normal: usize,
    n_test: usize,
    fault: FaultSpec,
    missing_rate: f64,
    seed: u64,
) -> ScenarioSpec {
    let sigma2: f64 = 0.3;
    let unit = separation * sigma2.sqrt();
    let clusters = (0..k_true)
        .map(|i| {
            // Loadings occupy a cluster-specific band of coordinates.
            let w = (0..d)
                .map(|r| {
                    (0..q)
                        .map(|c| {
                            let active = (r + i) % d < q + 2;
                            if active && (r + c) % 2 == 0 {
                                1.0
                            } else if active {
                                0.5
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
            let mu = (0..d)
                .map(|j| if j % k_true.max(1) == i { unit } else { 0.0 })
                .collect();
            ClusterSpec {
                w,
                mu,
                sigma2,
                weight: 1.0 / k_true as f64,
            }
        })
        .collect();
    ScenarioSpec {
        clusters,
        n_normal,
        n_test,
        fault,
        missing_rate,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{em_fit, KChoice, QChoice, TrainingConfig};
    use crate::monitoring::{detect, fit_thresholds, global_statistics};
    use crate::monitoring::{DetectionMode, StatisticMode};

    fn no_fault(n_test: usize) -> FaultSpec {
        FaultSpec {
            kind: FaultKind::StepBias,
            magnitude: 0.0,
            onset: n_test / 2,
            variables: vec![0],
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let spec = benchmark_scenario(2, 6, 2, 8.0, 200, 100, no_fault(100), 0.05, 42);
        let (a_train, a_test) = generate(&spec).unwrap();
        let (b_train, b_test) = generate(&spec).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
    }

    #[test]
    fn missing_rate_matches_counting_oracle() {
        let spec = benchmark_scenario(2, 10, 2, 8.0, 1500, 100, no_fault(100), 0.10, 7);
        let (train, _) = generate(&spec).unwrap();
        let total = train.n() * train.d();
        let observed: usize = train
            .rows
            .iter()
            .map(|r| r.observed().iter().filter(|&&o| o).count())
            .sum();
        let fraction = observed as f64 / total as f64;
        assert!((fraction - 0.9).abs() < 0.01, "observed fraction {fraction}");
    }

    #[test]
    fn magnitude_zero_fault_keeps_far_calibrated() {
        let spec = benchmark_scenario(2, 6, 2, 10.0, 1500, 2000, no_fault(2000), 0.0, 5);
        let (train, test) = generate(&spec).unwrap();
        let train_m = train.to_matrix().unwrap();
        let config = TrainingConfig {
            k: KChoice::Fixed(2),
            q: QChoice::Fixed(2),
            seed: 1,
            ..Default::default()
        };
        let report = em_fit(&train_m, &config).unwrap();
        let th = fit_thresholds(
            &report.params,
            &train_m,
            0.99,
            StatisticMode::PosteriorNormalized,
        )
        .unwrap();
        let test_m = test.to_matrix().unwrap();
        let alarms: usize = (0..test_m.nrows())
            .filter(|&r| {
                let g = global_statistics(
                    &report.params,
                    &test_m.row(r).transpose(),
                    StatisticMode::PosteriorNormalized,
                )
                .unwrap();
                detect(&g, &th, DetectionMode::Combined).alarm
            })
            .count();
        let far = 100.0 * alarms as f64 / test_m.nrows() as f64;
        assert!((far - 1.0).abs() <= 2.0, "FAR {far}% not within 1% +- 2 points");
    }

    #[test]
    fn generated_data_matches_generator_likelihood() {
        let spec = benchmark_scenario(2, 6, 2, 8.0, 5000, 100, no_fault(100), 0.0, 9);
        let (train, _) = generate(&spec).unwrap();
        let data = train.to_matrix().unwrap();
        let gen = spec.to_mixture().unwrap();
        let config = TrainingConfig {
            k: KChoice::Fixed(2),
            q: QChoice::Fixed(2),
            seed: 2,
            ..Default::default()
        };
        // Fit on the first 4000 rows, compare held-out likelihoods on the rest.
        let fit_data = data.rows(0, 4000).into_owned();
        let held_out = data.rows(4000, 1000).into_owned();
        let report = em_fit(&fit_data, &config).unwrap();
        let ll_fit = report.params.log_likelihood(&held_out).unwrap();
        let ll_gen = gen.log_likelihood(&held_out).unwrap();
        assert!(
            (ll_fit - ll_gen).abs() <= 0.02 * ll_gen.abs(),
            "fitted {ll_fit} vs generating {ll_gen}"
        );
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = benchmark_scenario(3, 10, 3, 10.0, 100, 50, no_fault(50), 0.1, 11);
        let parsed = ScenarioSpec::from_json(&spec.to_json().unwrap()).unwrap();
        assert_eq!(parsed, spec);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = benchmark_scenario(2, 4, 1, 5.0, 10, 10, no_fault(10), 0.0, 1);
        spec.fault.onset = 10;
        assert!(generate(&spec).is_err());
        let mut spec2 = benchmark_scenario(2, 4, 1, 5.0, 10, 10, no_fault(10), 0.0, 1);
        spec2.missing_rate = 1.0;
        assert!(generate(&spec2).is_err());
        let mut spec3 = benchmark_scenario(2, 4, 1, 5.0, 10, 10, no_fault(10), 0.0, 1);
        spec3.fault.variables = vec![9];
        assert!(generate(&spec3).is_err());
    }
}
