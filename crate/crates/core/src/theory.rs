//! Correct-quantization probabilities under additive Gaussian noise.
//!
//! For a uniform quantizer with step `delta` and noise `N(0, sigma^2)`, an
//! interior level survives iff `|noise| <= delta / 2`, which happens with
//! probability `erf(delta / (2 sqrt(2) sigma))`. Independent dimensions
//! multiply. Outer levels have a one-sided decision region, so for them the
//! formula is a lower bound.
//!
//! The Monte Carlo estimators here draw codewords of a [`QuantizerConfig`],
//! perturb their scaled-domain representatives and run them back through
//! [`crate::fsq::requantize_indices`], so they exercise the real codec rather
//! than a model of it. In the scaled domain the FSQ step is `alpha`.

use libm::erf;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsq::{self, QuantizerConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TheoryError {
    #[error("noise standard deviation must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("quantizer span must satisfy lower < upper, got [{lower}, {upper}]")]
    BadSpan { lower: f64, upper: f64 },
    #[error("a uniform quantizer needs at least 2 levels, got {0}")]
    TooFewLevels(u32),
    #[error("at least one dimension is required")]
    NoDimensions,
    #[error("at least one trial is required")]
    NoTrials,
    #[error("sigma grid is empty")]
    EmptyGrid,
}

/// Uniform quantizer over `[lower, upper]` with `m` evenly spaced points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformQuantizerSpec {
    lower: f64,
    upper: f64,
    m: u32,
}

impl UniformQuantizerSpec {
    pub fn new(lower: f64, upper: f64, m: u32) -> Result<Self, TheoryError> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(TheoryError::BadSpan { lower, upper });
        }
        if m < 2 {
            return Err(TheoryError::TooFewLevels(m));
        }
        Ok(Self { lower, upper, m })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn levels(&self) -> u32 {
        self.m
    }

    /// `(upper - lower) / (m - 1)`.
    pub fn step(&self) -> f64 {
        (self.upper - self.lower) / f64::from(self.m - 1)
    }

    /// Quantization point `j`.
    pub fn point(&self, j: u32) -> f64 {
        self.lower + f64::from(j) * self.step()
    }

    /// Nearest quantization point index for `x` (clamped to the span).
    pub fn nearest(&self, x: f64) -> u32 {
        let j = ((x - self.lower) / self.step()).round();
        j.clamp(0.0, f64::from(self.m - 1)) as u32
    }
}

/// Per-dimension uniform quantizers equivalent to an FSQ config in the
/// scaled domain: levels `alpha * {-floor(m/2) ..}`, step `alpha`.
pub fn fsq_uniform_specs(cfg: &QuantizerConfig) -> Vec<UniformQuantizerSpec> {
    (0..cfg.dims())
        .map(|d| {
            let (lo, hi) = cfg.level_range(d);
            UniformQuantizerSpec::new(lo as f64 * cfg.alpha(), hi as f64 * cfg.alpha(), cfg.levels()[d])
                .expect("valid FSQ config yields a valid span")
        })
        .collect()
}

fn check_sigma(sigma: f64) -> Result<(), TheoryError> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(TheoryError::BadSigma(sigma))
    }
}

/// `erf(step / (2 sqrt(2) sigma))`.
pub fn p_correct_single(spec: &UniformQuantizerSpec, sigma: f64) -> Result<f64, TheoryError> {
    check_sigma(sigma)?;
    Ok(p_correct_step(spec.step(), sigma))
}

fn p_correct_step(step: f64, sigma: f64) -> f64 {
    erf(step / (2.0 * std::f64::consts::SQRT_2 * sigma))
}

/// Product of the single-dimension probabilities.
pub fn p_correct_multi(specs: &[UniformQuantizerSpec], sigma: f64) -> Result<f64, TheoryError> {
    if specs.is_empty() {
        return Err(TheoryError::NoDimensions);
    }
    check_sigma(sigma)?;
    Ok(specs.iter().map(|s| p_correct_step(s.step(), sigma)).product())
}

/// `p_correct_single(spec, sigma)^n_dims` for identical dimensions.
pub fn p_correct_identical(spec: &UniformQuantizerSpec, sigma: f64, n_dims: u32) -> Result<f64, TheoryError> {
    if n_dims == 0 {
        return Err(TheoryError::NoDimensions);
    }
    Ok(p_correct_single(spec, sigma)?.powi(n_dims as i32))
}

/// Predicted joint recovery for an FSQ config; `sigma == 0` gives 1.
pub fn predicted_recovery(cfg: &QuantizerConfig, sigma: f64) -> Result<f64, TheoryError> {
    if sigma == 0.0 {
        return Ok(1.0);
    }
    p_correct_multi(&fsq_uniform_specs(cfg), sigma)
}

/// Which codewords the Monte Carlo estimator draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodewordSampling {
    /// Uniform over the whole codebook.
    Uniform,
    /// Uniform over codewords whose every level is interior.
    Interior,
    /// Every dimension on the lowest or highest level.
    Extreme,
}

impl CodewordSampling {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Interior => "interior",
            Self::Extreme => "extreme",
        }
    }
}

/// Counts from a Monte Carlo run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub trials: u64,
    /// Trials where every index was recovered.
    pub correct: u64,
    /// Per-dimension recovery counts.
    pub per_dim_correct: Vec<u64>,
    /// Trials whose transmitted codeword was all-interior.
    pub interior_trials: u64,
    pub interior_correct: u64,
}

/// Binomial `(rate, stderr)` for `k` successes in `n`.
pub fn binomial(k: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let p = k as f64 / n as f64;
    (p, (p * (1.0 - p) / n as f64).sqrt())
}

impl McEstimate {
    fn empty(dims: usize) -> Self {
        Self { trials: 0, correct: 0, per_dim_correct: vec![0; dims], interior_trials: 0, interior_correct: 0 }
    }

    fn merge(mut self, other: Self) -> Self {
        self.trials += other.trials;
        self.correct += other.correct;
        for (a, b) in self.per_dim_correct.iter_mut().zip(other.per_dim_correct) {
            *a += b;
        }
        self.interior_trials += other.interior_trials;
        self.interior_correct += other.interior_correct;
        self
    }

    pub fn rate(&self) -> f64 {
        binomial(self.correct, self.trials).0
    }

    pub fn stderr(&self) -> f64 {
        binomial(self.correct, self.trials).1
    }

    /// `(rate, stderr)` restricted to all-interior codewords.
    pub fn interior(&self) -> (f64, f64) {
        binomial(self.interior_correct, self.interior_trials)
    }

    pub fn per_dim_rate(&self, dim: usize) -> f64 {
        binomial(self.per_dim_correct[dim], self.trials).0
    }

    /// Product of per-dimension marginal rates and its delta-method stderr.
    pub fn marginal_product(&self) -> (f64, f64) {
        let n = self.trials as f64;
        let rates: Vec<f64> = (0..self.per_dim_correct.len()).map(|d| self.per_dim_rate(d)).collect();
        let prod: f64 = rates.iter().product();
        let var: f64 = rates
            .iter()
            .enumerate()
            .map(|(d, &p)| {
                let others: f64 = rates.iter().enumerate().filter(|&(e, _)| e != d).map(|(_, &q)| q).product();
                others * others * p * (1.0 - p) / n
            })
            .sum();
        (prod, var.sqrt())
    }
}

const TRIALS_PER_WORKER: u64 = 1 << 16;

/// Monte Carlo joint recovery rate of `cfg` under scaled-domain AWGN.
///
/// Trials are split into fixed-size blocks; block `k` draws from the stream
/// seeded with `seed ^ k`, so the result is independent of thread count.
/// `sigma == 0` adds no noise.
pub fn mc_correct_rate(
    cfg: &QuantizerConfig,
    sigma: f64,
    n_trials: u64,
    seed: u64,
    sampling: CodewordSampling,
) -> Result<McEstimate, TheoryError> {
    if n_trials == 0 {
        return Err(TheoryError::NoTrials);
    }
    if sigma != 0.0 {
        check_sigma(sigma)?;
    }
    let blocks = n_trials.div_ceil(TRIALS_PER_WORKER);
    let est = (0..blocks)
        .into_par_iter()
        .map(|k| {
            let start = k * TRIALS_PER_WORKER;
            let n = TRIALS_PER_WORKER.min(n_trials - start);
            let mut stream = rng::stream(rng::derive_seed(seed, k));
            run_block(cfg, sigma, n, sampling, &mut stream)
        })
        .reduce(|| McEstimate::empty(cfg.dims()), McEstimate::merge);
    Ok(est)
}

fn draw_index<R: Rng + ?Sized>(m: u32, sampling: CodewordSampling, rng: &mut R) -> u32 {
    match sampling {
        CodewordSampling::Uniform => rng.random_range(0..m),
        // Two-level dimensions have no interior; fall back to uniform.
        CodewordSampling::Interior if m > 2 => rng.random_range(1..m - 1),
        CodewordSampling::Interior => rng.random_range(0..m),
        CodewordSampling::Extreme => {
            if rng.random::<bool>() {
                m - 1
            } else {
                0
            }
        }
    }
}

fn run_block<R: Rng + ?Sized>(cfg: &QuantizerConfig, sigma: f64, n: u64, sampling: CodewordSampling, rng: &mut R) -> McEstimate {
    let dims = cfg.dims();
    let mut est = McEstimate::empty(dims);
    let mut sent = vec![0u32; dims];
    let mut rx = vec![0f64; dims];
    let mut back = vec![0u32; dims];
    for _ in 0..n {
        for d in 0..dims {
            sent[d] = draw_index(cfg.levels()[d], sampling, rng);
            let x = fsq::scaled_value_of(sent[d], d, cfg).expect("drawn index in range");
            let noise: f64 = if sigma == 0.0 { 0.0 } else { sigma * rng.sample::<f64, _>(StandardNormal) };
            rx[d] = x + noise;
        }
        fsq::requantize_indices(&rx, cfg, &mut back);
        let mut all = true;
        for d in 0..dims {
            if sent[d] == back[d] {
                est.per_dim_correct[d] += 1;
            } else {
                all = false;
            }
        }
        let interior = sent.iter().enumerate().all(|(d, &i)| cfg.is_interior(d, i));
        est.trials += 1;
        est.correct += u64::from(all);
        if interior {
            est.interior_trials += 1;
            est.interior_correct += u64::from(all);
        }
    }
    est
}

/// One row of [`robustness_report`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub sigma: f64,
    pub theory_single: f64,
    pub theory_multi: f64,
    /// Interior-sampled MC rate; directly comparable with `theory_multi`.
    pub mc_rate: f64,
    pub mc_stderr: f64,
    /// Unconditional (uniform-codeword) MC rate.
    pub mc_uniform_rate: f64,
    pub mc_uniform_stderr: f64,
}

/// Theory and Monte Carlo side by side over a sigma grid.
pub fn robustness_report(cfg: &QuantizerConfig, sigma_grid: &[f64], n_trials: u64, seed: u64) -> Result<Vec<ReportRow>, TheoryError> {
    if sigma_grid.is_empty() {
        return Err(TheoryError::EmptyGrid);
    }
    let specs = fsq_uniform_specs(cfg);
    sigma_grid
        .iter()
        .enumerate()
        .map(|(row, &sigma)| {
            let (single, multi) =
                if sigma == 0.0 { (1.0, 1.0) } else { (p_correct_single(&specs[0], sigma)?, p_correct_multi(&specs, sigma)?) };
            let row_seed = rng::derive_seed(seed, row as u64);
            let interior = mc_correct_rate(cfg, sigma, n_trials, row_seed, CodewordSampling::Interior)?;
            let uniform = mc_correct_rate(cfg, sigma, n_trials, !row_seed, CodewordSampling::Uniform)?;
            Ok(ReportRow {
                sigma,
                theory_single: single,
                theory_multi: multi,
                mc_rate: interior.rate(),
                mc_stderr: interior.stderr(),
                mc_uniform_rate: uniform.rate(),
                mc_uniform_stderr: uniform.stderr(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    // erf reference values, mpmath at 40 digits.
    const ERF_TABLE: [(f64, f64); 20] = [
        (0.0, 0.0),
        (0.01, 0.011_283_415_555_849_616),
        (0.1, 0.112_462_916_018_284_9),
        (0.2, 0.222_702_589_210_478_45),
        (0.3, 0.328_626_759_459_127_45),
        (0.5, 0.520_499_877_813_046_5),
        (std::f64::consts::FRAC_1_SQRT_2, 0.682_689_492_137_085_9),
        (0.75, 0.711_155_633_653_515_1),
        (1.0, 0.842_700_792_949_714_9),
        (1.25, 0.922_900_128_256_458_3),
        (1.5, 0.966_105_146_475_310_8),
        (1.75, 0.986_671_671_219_182_4),
        (2.0, 0.995_322_265_018_952_7),
        (2.5, 0.999_593_047_982_555),
        (3.0, 0.999_977_909_503_001_4),
        (3.5, 0.999_999_256_901_627_6),
        (4.0, 0.999_999_984_582_742_1),
        (5.0, 0.999_999_999_998_462_6),
        (-0.5, -0.520_499_877_813_046_5),
        (-2.0, -0.995_322_265_018_952_7),
    ];

    #[test]
    fn erf_matches_reference_table() {
        for (x, want) in ERF_TABLE {
            assert_abs_diff_eq!(erf(x), want, epsilon = 1e-12);
        }
    }

    fn spec(lower: f64, upper: f64, m: u32) -> UniformQuantizerSpec {
        UniformQuantizerSpec::new(lower, upper, m).unwrap()
    }

    #[test]
    fn single_dimension_examples() {
        // Step 1 over [0, 1] with two points.
        assert_abs_diff_eq!(p_correct_single(&spec(0.0, 1.0, 2), 0.5).unwrap(), 0.682689492137086, epsilon = 1e-12);
        assert_abs_diff_eq!(p_correct_single(&spec(-1.0, 1.0, 5), 0.1).unwrap(), 0.987580669348448, epsilon = 1e-12);
        assert!(p_correct_single(&spec(0.0, 1.0, 2), 1e-6).unwrap() > 1.0 - 1e-15);
        assert_eq!(p_correct_single(&spec(0.0, 1.0, 2), 0.0), Err(TheoryError::BadSigma(0.0)));
        assert!(p_correct_single(&spec(0.0, 1.0, 2), -1.0).is_err());
    }

    #[test]
    fn multi_dimension_examples() {
        let s = spec(-1.0, 1.0, 5);
        assert_eq!(p_correct_multi(&[s], 0.1).unwrap(), p_correct_single(&s, 0.1).unwrap());
        assert_abs_diff_eq!(p_correct_multi(&[s; 5], 0.1).unwrap(), 0.939426707587140, epsilon = 1e-12);
        assert_abs_diff_eq!(p_correct_identical(&s, 0.1, 5).unwrap(), p_correct_multi(&[s; 5], 0.1).unwrap(), epsilon = 1e-15);
        assert!(p_correct_multi(&[s; 5], 1e6).unwrap() < 1e-20);
        assert_eq!(p_correct_multi(&[], 0.1), Err(TheoryError::NoDimensions));
    }

    #[test]
    fn depends_only_on_step_over_sigma() {
        for k in [0.25, 3.0, 17.0] {
            let a = p_correct_single(&spec(0.0, 2.0, 3), 0.7).unwrap();
            let b = p_correct_single(&spec(0.0, 2.0 * k, 3), 0.7 * k).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn spec_validation_and_points() {
        assert!(UniformQuantizerSpec::new(1.0, 1.0, 3).is_err());
        assert!(UniformQuantizerSpec::new(0.0, 1.0, 1).is_err());
        let s = spec(-2.0, 2.0, 5);
        assert_eq!(s.step(), 1.0);
        assert_eq!(s.point(4), 2.0);
        assert_eq!(s.nearest(0.49), 2);
        assert_eq!(s.nearest(9.0), 4);
    }

    #[test]
    fn fsq_specs_have_step_alpha() {
        let cfg = QuantizerConfig::with_alpha(vec![5, 4, 2], 2.0).unwrap();
        for s in fsq_uniform_specs(&cfg) {
            assert_abs_diff_eq!(s.step(), 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_sigma_recovers_everything() {
        let cfg = QuantizerConfig::paper_default();
        for sampling in [CodewordSampling::Uniform, CodewordSampling::Interior, CodewordSampling::Extreme] {
            let est = mc_correct_rate(&cfg, 0.0, 5000, 1, sampling).unwrap();
            assert_eq!(est.rate(), 1.0);
            assert_eq!(est.stderr(), 0.0);
        }
    }

    #[test]
    fn mc_is_deterministic_and_thread_independent() {
        let cfg = QuantizerConfig::paper_default();
        let a = mc_correct_rate(&cfg, 0.8, 150_000, 9, CodewordSampling::Uniform).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| mc_correct_rate(&cfg, 0.8, 150_000, 9, CodewordSampling::Uniform).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.trials, 150_000);
    }

    #[test]
    fn mc_single_level_example() {
        let cfg = QuantizerConfig::with_alpha(vec![5], 2.0).unwrap();
        let est = mc_correct_rate(&cfg, 1.0, 200_000, 3, CodewordSampling::Interior).unwrap();
        let theory = 0.682689492137086;
        assert!((est.rate() - theory).abs() <= 4.0 * est.stderr());
        let edge = mc_correct_rate(&cfg, 1.0, 200_000, 4, CodewordSampling::Extreme).unwrap();
        assert!(edge.rate() >= theory - 4.0 * edge.stderr());
        assert_eq!(edge.interior_trials, 0);
    }

    #[test]
    fn mc_rejects_bad_inputs() {
        let cfg = QuantizerConfig::paper_default();
        assert_eq!(mc_correct_rate(&cfg, 1.0, 0, 0, CodewordSampling::Uniform), Err(TheoryError::NoTrials));
        assert!(mc_correct_rate(&cfg, -1.0, 10, 0, CodewordSampling::Uniform).is_err());
    }

    #[test]
    fn report_is_monotone() {
        let cfg = QuantizerConfig::paper_default();
        let grid = [0.0, 0.25, 0.5, 1.0, 2.0];
        let rows = robustness_report(&cfg, &grid, 20_000, 5).unwrap();
        assert_eq!(rows[0].mc_rate, 1.0);
        for w in rows.windows(2) {
            assert!(w[1].theory_single <= w[0].theory_single);
            assert!(w[1].theory_multi <= w[0].theory_multi);
        }
        for r in &rows[1..] {
            assert_abs_diff_eq!(r.theory_multi, r.theory_single.powi(5), epsilon = 1e-12);
        }
        let wide = QuantizerConfig::with_alpha(vec![5; 5], 4.0).unwrap();
        let wide_rows = robustness_report(&wide, &grid[1..], 1000, 5).unwrap();
        for (a, b) in rows[1..].iter().zip(&wide_rows) {
            assert!(b.theory_single > a.theory_single);
            assert!(b.theory_multi > a.theory_multi);
        }
        assert_eq!(robustness_report(&cfg, &[], 10, 0), Err(TheoryError::EmptyGrid));
    }
}
