//! Single pipeline run on a tensor file.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sehilo::channel::{ChannelConfig, NoiseMode};
use sehilo::hilo::{self, StreamStats};
use sehilo::rng;
use sehilo::{AwgnChannel, HiLoConfig, Tensor};

use crate::config::RunConfig;

/// Version of the stats document layout.
pub const STATS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerStats {
    pub levels: Vec<u32>,
    pub alpha: f64,
    pub epsilon: f64,
}

/// The stats JSON written next to the reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardStats {
    pub schema_version: u32,
    pub seed: u64,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub token_grid: [usize; 2],
    pub tokens_per_stream: usize,
    pub quantizer: QuantizerStats,
    pub model: HiLoConfig,
    pub channel_hi: NoiseMode,
    pub channel_lo: NoiseMode,
    pub hi: StreamStats,
    pub lo: StreamStats,
    pub overall_symbol_accuracy: f64,
}

/// Runs the pipeline on `image`; weights and channels are seeded from `seed`.
pub fn run_tensor(cfg: &RunConfig, image: &Tensor, seed: u64) -> Result<(Tensor, ForwardStats)> {
    let q = cfg.quantizer.build()?;
    let ws = hilo::init_weights(&cfg.model, seed)?;
    let (s_hi, s_lo) = rng::stream_pair_seeds(seed);
    let f = &cfg.forward;
    let mut ch_hi = AwgnChannel::new(ChannelConfig::new(f.channel_hi, s_hi)?);
    let mut ch_lo = AwgnChannel::new(ChannelConfig::new(f.channel_lo, s_lo)?);
    let out = hilo::pipeline(image, &ws, &cfg.model, &q, &mut ch_hi, &mut ch_lo)?;
    let (gh, gw) = out.stats.token_grid;
    let stats = ForwardStats {
        schema_version: STATS_SCHEMA_VERSION,
        seed,
        input_shape: image.shape().to_vec(),
        output_shape: out.reconstruction.shape().to_vec(),
        token_grid: [gh, gw],
        tokens_per_stream: gh * gw,
        quantizer: QuantizerStats { levels: q.levels().to_vec(), alpha: q.alpha(), epsilon: q.epsilon() },
        model: cfg.model.clone(),
        channel_hi: f.channel_hi,
        channel_lo: f.channel_lo,
        hi: out.stats.hi,
        lo: out.stats.lo,
        overall_symbol_accuracy: out.stats.overall_symbol_accuracy,
    };
    Ok((out.reconstruction, stats))
}

/// Reads `input`, writes the reconstruction to `output` and the stats JSON to `stats_path`.
pub fn run(cfg: &RunConfig, input: &Path, output: &Path, stats_path: &Path, seed: u64) -> Result<ForwardStats> {
    let image = Tensor::load(input).with_context(|| format!("loading {}", input.display()))?;
    let (recon, stats) = run_tensor(cfg, &image, seed).with_context(|| format!("running the pipeline on {}", input.display()))?;
    recon.save(output).with_context(|| format!("writing {}", output.display()))?;
    let json = serde_json::to_string_pretty(&stats)?;
    std::fs::write(stats_path, json + "\n").with_context(|| format!("writing {}", stats_path.display()))?;
    Ok(stats)
}
