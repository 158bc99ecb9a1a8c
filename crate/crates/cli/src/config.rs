//! Run configuration.
//!
//! A run is described by one JSON document. Every field has a default, so an
//! empty object `{}` is a valid configuration; unknown keys are rejected.
//! Command-line flags override the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sehilo::channel::NoiseMode;
use sehilo::fsq::{QuantizerConfig, DEFAULT_EPSILON};
use sehilo::HiLoConfig;
use serde::{Deserialize, Serialize};

/// Seed used when neither a flag, the config file nor `SEHILO_SEED` gives one.
pub const DEFAULT_SEED: u64 = 7;

/// Environment variable consulted when no seed is configured.
pub const SEED_ENV: &str = "SEHILO_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerSection {
    pub levels: Vec<u32>,
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        Self { levels: vec![5; 5], alpha: 2.0, epsilon: DEFAULT_EPSILON }
    }
}

impl QuantizerSection {
    pub fn build(&self) -> Result<QuantizerConfig> {
        QuantizerConfig::new(self.levels.clone(), self.alpha, self.epsilon).context("invalid quantizer section")
    }

    /// Same levels and epsilon with a different `alpha`.
    pub fn with_alpha(&self, alpha: f64) -> Result<QuantizerConfig> {
        QuantizerConfig::new(self.levels.clone(), alpha, self.epsilon).with_context(|| format!("invalid quantizer with alpha {alpha}"))
    }
}

/// Grids for the closed-form tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySection {
    pub sigma_grid: Vec<f64>,
    /// Scaling factors tabulated for the configured levels.
    pub alpha_grid: Vec<f64>,
    /// Fixed span `[lower, upper]` for the level-count rows.
    pub span: [f64; 2],
    pub span_levels: Vec<u32>,
    /// Largest dimension count in the dimension rows.
    pub max_dims: u32,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            sigma_grid: vec![0.25, 0.5, 1.0, 2.0],
            alpha_grid: vec![0.5, 1.0, 2.0, 4.0],
            span: [-1.0, 1.0],
            span_levels: vec![2, 3, 5, 9, 17],
            max_dims: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub sigma_grid: Vec<f64>,
    pub trials: u64,
}

impl Default for McSection {
    fn default() -> Self {
        Self { sigma_grid: vec![0.0, 0.5, 1.0, 2.0], trials: 1_000_000 }
    }
}

/// Shared by the pipeline sweeps: how many synthetic images and how many
/// channel draws per image and grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub snr_grid_db: Vec<f64>,
    /// Fixed noise levels for the alpha comparison rows.
    pub sigma_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub images: usize,
    pub draws: usize,
    pub image_size: [usize; 2],
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            snr_grid_db: vec![10.0, 7.5, 5.0, 2.5, 0.0, -2.5, -5.0],
            sigma_grid: vec![0.25, 0.5, 1.0, 2.0],
            alpha_grid: vec![1.0, 2.0],
            images: 4,
            draws: 64,
            image_size: [32, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HiLoNoiseSection {
    pub snr_hi_db: Vec<f64>,
    pub snr_lo_db: Vec<f64>,
}

impl Default for HiLoNoiseSection {
    fn default() -> Self {
        let grid = vec![10.0, 5.0, 0.0, -5.0];
        Self { snr_hi_db: grid.clone(), snr_lo_db: grid }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundtripSection {
    pub frames: u64,
    /// Upper bound on tokens per stream in a fuzzed frame.
    pub max_tokens: u32,
    /// Every `truncate_every`-th frame is also decoded with its last byte removed.
    pub truncate_every: u64,
    /// Optional golden frame on disk, compared alongside the built-in one.
    pub golden: Option<PathBuf>,
}

impl Default for RoundtripSection {
    fn default() -> Self {
        Self { frames: 10_000, max_tokens: 80, truncate_every: 100, golden: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardSection {
    pub channel_hi: NoiseMode,
    pub channel_lo: NoiseMode,
}

impl Default for ForwardSection {
    fn default() -> Self {
        Self { channel_hi: NoiseMode::Noiseless, channel_lo: NoiseMode::Noiseless }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub quantizer: QuantizerSection,
    pub model: HiLoConfig,
    pub theory: TheorySection,
    pub mc: McSection,
    pub sweep: SweepSection,
    pub hilo_noise: HiLoNoiseSection,
    pub roundtrip: RoundtripSection,
    pub forward: ForwardSection,
}

#[derive(Clone, Copy)]
enum Bound {
    Any,
    NonNegative,
    Positive,
}

fn check_grid(name: &str, grid: &[f64], bound: Bound) -> Result<()> {
    if grid.is_empty() {
        bail!("{name} must not be empty");
    }
    for &v in grid {
        let ok = v.is_finite()
            && match bound {
                Bound::Any => true,
                Bound::NonNegative => v >= 0.0,
                Bound::Positive => v > 0.0,
            };
        if !ok {
            bail!("{name} contains an invalid value {v}");
        }
    }
    Ok(())
}

impl RunConfig {
    /// Parses a JSON document; errors carry the line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| anyhow::anyhow!("config error at line {}, column {}: {e}", e.line(), e.column()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Checks every section, including cross-section consistency.
    pub fn validate(&self) -> Result<()> {
        let q = self.quantizer.build()?;
        self.model.validate().context("invalid model section")?;
        if self.model.d_fsq != q.dims() {
            bail!("model.d_fsq ({}) must equal the number of quantizer levels ({})", self.model.d_fsq, q.dims());
        }
        check_grid("theory.sigma_grid", &self.theory.sigma_grid, Bound::Positive)?;
        check_grid("theory.alpha_grid", &self.theory.alpha_grid, Bound::Positive)?;
        for &a in &self.theory.alpha_grid {
            self.quantizer.with_alpha(a)?;
        }
        let [lo, hi] = self.theory.span;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            bail!("theory.span must satisfy lower < upper");
        }
        if self.theory.span_levels.iter().any(|&m| m < 2) || self.theory.span_levels.is_empty() {
            bail!("theory.span_levels must be non-empty with every entry >= 2");
        }
        if self.theory.max_dims == 0 {
            bail!("theory.max_dims must be positive");
        }
        check_grid("mc.sigma_grid", &self.mc.sigma_grid, Bound::NonNegative)?;
        if self.mc.trials < 10_000 {
            bail!("mc.trials must be at least 10000, got {}", self.mc.trials);
        }
        check_grid("sweep.snr_grid_db", &self.sweep.snr_grid_db, Bound::Any)?;
        check_grid("sweep.sigma_grid", &self.sweep.sigma_grid, Bound::Positive)?;
        check_grid("sweep.alpha_grid", &self.sweep.alpha_grid, Bound::Positive)?;
        for &a in &self.sweep.alpha_grid {
            self.quantizer.with_alpha(a)?;
        }
        if self.sweep.images == 0 || self.sweep.draws == 0 {
            bail!("sweep.images and sweep.draws must be positive");
        }
        let [h, w] = self.sweep.image_size;
        self.model.token_grid(h, w).context("sweep.image_size does not fit the model")?;
        check_grid("hilo_noise.snr_hi_db", &self.hilo_noise.snr_hi_db, Bound::Any)?;
        check_grid("hilo_noise.snr_lo_db", &self.hilo_noise.snr_lo_db, Bound::Any)?;
        if self.roundtrip.frames == 0 || self.roundtrip.truncate_every == 0 {
            bail!("roundtrip.frames and roundtrip.truncate_every must be positive");
        }
        self.forward.channel_hi.validate().context("forward.channel_hi")?;
        self.forward.channel_lo.validate().context("forward.channel_lo")?;
        Ok(())
    }

    /// Resolved seed: explicit flag, then the file, then `SEHILO_SEED`, then [`DEFAULT_SEED`].
    pub fn resolve_seed(&self, flag: Option<u64>, env: Option<&str>) -> Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match env {
            Some(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not a u64")),
            None => Ok(DEFAULT_SEED),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let q = cfg.quantizer.build().unwrap();
        assert_eq!(q.levels(), &[5, 5, 5, 5, 5]);
        assert_eq!(q.alpha(), 2.0);
        assert_eq!(cfg.model, HiLoConfig::desk());
    }

    #[test]
    fn paper_model_parses() {
        let text = r#"{"model": {"d_model": 512, "d_hi": 256, "d_lo": 256}}"#;
        assert_eq!(RunConfig::from_json(text).unwrap().model, HiLoConfig::paper());
    }

    #[test]
    fn diagnostics_carry_line() {
        let text = "{\n  \"quantizer\": {\n    \"alpah\": 2.0\n  }\n}";
        let err = RunConfig::from_json(text).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let err = RunConfig::from_json("{\n\"mc\": {\"trials\": 10}\n}").unwrap_err().to_string();
        assert!(err.contains("10000"), "{err}");
    }

    #[test]
    fn d_fsq_must_match_levels() {
        let text = r#"{"quantizer": {"levels": [8, 5, 5, 5]}}"#;
        assert!(RunConfig::from_json(text).is_err());
        let text = r#"{"quantizer": {"levels": [8, 5, 5, 5]}, "model": {"d_fsq": 4}}"#;
        RunConfig::from_json(text).unwrap();
    }

    #[test]
    fn noise_modes_parse() {
        let text = r#"{"forward": {"channel_hi": {"snr_db": 5.0}, "channel_lo": {"fixed_sigma": 0.5}}}"#;
        let cfg = RunConfig::from_json(text).unwrap();
        assert_eq!(cfg.forward.channel_hi, NoiseMode::SnrDb(5.0));
        assert_eq!(cfg.forward.channel_lo, NoiseMode::FixedSigma(0.5));
        assert!(RunConfig::from_json(r#"{"forward": {"channel_hi": {"fixed_sigma": -1.0}}}"#).is_err());
    }

    #[test]
    fn seed_precedence() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.resolve_seed(None, None).unwrap(), DEFAULT_SEED);
        assert_eq!(cfg.resolve_seed(None, Some("11")).unwrap(), 11);
        assert!(cfg.resolve_seed(None, Some("x")).is_err());
        cfg.seed = Some(3);
        assert_eq!(cfg.resolve_seed(None, Some("11")).unwrap(), 3);
        assert_eq!(cfg.resolve_seed(Some(5), Some("11")).unwrap(), 5);
    }
}
