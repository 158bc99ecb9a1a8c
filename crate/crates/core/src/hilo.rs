//! HiLo transformer blocks and the dual-stream encoder / decoder.
//!
//! A block splits its channels into a Hi part (the first `d_hi` channels),
//! which runs multi-head self-attention inside non-overlapping
//! `window_size x window_size` windows, and a Lo part, whose full-resolution
//! queries attend to keys / values average-pooled by `pool_stride`. The two
//! outputs are concatenated back to `d_model` channels. Blocks are pre-norm:
//!
//! ```text
//! y   = x + concat(hi(ln1(x)[..d_hi]), lo(ln1(x)[d_hi..]))
//! out = y + mlp(ln2(y))
//! ```
//!
//! The encoder patch-embeds an `[H, W, C]` image, runs `n_blocks` blocks,
//! projects the Hi and Lo channels separately to `d_fsq` dimensions and
//! quantizes each token. The decoder requantizes what it receives, maps each
//! stream back to its channel width, concatenates, runs `n_blocks` blocks and
//! unembeds to pixels. Weights are random but seeded; nothing here trains.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{AwgnChannel, ChannelError, Transmission};
use crate::fsq::{self, DualIndices, FsqError, QuantizerConfig, StreamIndices};
use crate::metrics::{self, MetricsError};
use crate::nn::{self, Init, WeightError, WeightSet};
use crate::tensor::{Tensor, TensorError};
use crate::theory::{self, TheoryError};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum HiLoError {
    #[error("invalid HiLo config: {0}")]
    Config(String),
    #[error("image shape {shape:?} incompatible with config: {reason}")]
    Geometry { shape: Vec<usize>, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Fsq(#[from] FsqError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HiLoConfig {
    pub d_model: usize,
    pub d_hi: usize,
    pub d_lo: usize,
    /// Downsampling factor for the Lo branch keys / values.
    pub pool_stride: usize,
    pub window_size: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub patch_size: usize,
    pub d_fsq: usize,
    pub mlp_ratio: usize,
    /// Image channels.
    pub channels: usize,
}

impl Default for HiLoConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl HiLoConfig {
    /// Small configuration for fast runs: 16 + 16 channels, 8 blocks.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            d_hi: 16,
            d_lo: 16,
            pool_stride: 2,
            window_size: 2,
            n_heads: 4,
            n_blocks: 8,
            patch_size: 4,
            d_fsq: 5,
            mlp_ratio: 4,
            channels: 3,
        }
    }

    /// 256 + 256 channels, 8 blocks.
    pub fn paper() -> Self {
        Self { d_model: 512, d_hi: 256, d_lo: 256, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<(), HiLoError> {
        let bad = |m: String| Err(HiLoError::Config(m));
        if self.d_hi + self.d_lo != self.d_model {
            return bad(format!("d_hi ({}) + d_lo ({}) != d_model ({})", self.d_hi, self.d_lo, self.d_model));
        }
        if self.d_model == 0 {
            return bad("d_model must be positive".into());
        }
        for (name, v) in [
            ("pool_stride", self.pool_stride),
            ("window_size", self.window_size),
            ("n_heads", self.n_heads),
            ("patch_size", self.patch_size),
            ("d_fsq", self.d_fsq),
            ("mlp_ratio", self.mlp_ratio),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, d) in [("d_hi", self.d_hi), ("d_lo", self.d_lo)] {
            if d % self.n_heads != 0 {
                return bad(format!("{name} ({d}) is not divisible by n_heads ({})", self.n_heads));
            }
        }
        Ok(())
    }

    /// Token grid for an image of `height x width`, after checking divisibility.
    pub fn token_grid(&self, height: usize, width: usize) -> Result<(usize, usize), HiLoError> {
        let p = self.patch_size;
        let geo = |reason: String| HiLoError::Geometry { shape: vec![height, width], reason };
        if height == 0 || width == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
            return Err(geo(format!("patch size {p} must divide the image size")));
        }
        let (gh, gw) = (height / p, width / p);
        if self.d_hi > 0 && (gh % self.window_size != 0 || gw % self.window_size != 0) {
            return Err(geo(format!("window size {} must divide the {gh}x{gw} token grid", self.window_size)));
        }
        if self.d_lo > 0 && (gh % self.pool_stride != 0 || gw % self.pool_stride != 0) {
            return Err(geo(format!("pool stride {} must divide the {gh}x{gw} token grid", self.pool_stride)));
        }
        Ok((gh, gw))
    }

    fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Every parameter tensor with its shape and initializer.
    pub fn weight_layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let mut lin = |name: String, d_in: usize, d_out: usize| {
            out.push((format!("{name}.w"), vec![d_in, d_out], Init::Uniform));
            out.push((format!("{name}.b"), vec![d_out], Init::Zeros));
        };
        lin("embed".into(), self.patch_dim(), self.d_model);
        lin("head.hi".into(), self.d_hi, self.d_fsq);
        lin("head.lo".into(), self.d_lo, self.d_fsq);
        lin("rec.hi".into(), self.d_fsq, self.d_hi);
        lin("rec.lo".into(), self.d_fsq, self.d_lo);
        lin("unembed".into(), self.d_model, self.patch_dim());
        let hidden = self.d_model * self.mlp_ratio;
        for stage in ["enc", "dec"] {
            for b in 0..self.n_blocks {
                let p = format!("{stage}.{b}");
                for (branch, d) in [("hi", self.d_hi), ("lo", self.d_lo)] {
                    if d > 0 {
                        for proj in ["q", "k", "v", "o"] {
                            lin(format!("{p}.{branch}.{proj}"), d, d);
                        }
                    }
                }
                lin(format!("{p}.mlp.fc1"), self.d_model, hidden);
                lin(format!("{p}.mlp.fc2"), hidden, self.d_model);
            }
        }
        for stage in ["enc", "dec"] {
            let mut names = vec![format!("{stage}.norm")];
            names.extend((0..self.n_blocks).flat_map(|b| [format!("{stage}.{b}.ln1"), format!("{stage}.{b}.ln2")]));
            for n in names {
                out.push((format!("{n}.g"), vec![self.d_model], Init::Ones));
                out.push((format!("{n}.b"), vec![self.d_model], Init::Zeros));
            }
        }
        out
    }
}

/// Seeded weights for `cfg`.
pub fn init_weights(cfg: &HiLoConfig, seed: u64) -> Result<WeightSet, HiLoError> {
    cfg.validate()?;
    Ok(WeightSet::init(&cfg.weight_layout(), seed))
}

/// Borrowed Q / K / V / output projections of one attention branch.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams<'a> {
    pub q: (&'a Tensor, &'a Tensor),
    pub k: (&'a Tensor, &'a Tensor),
    pub v: (&'a Tensor, &'a Tensor),
    pub o: (&'a Tensor, &'a Tensor),
}

impl<'a> AttentionParams<'a> {
    /// Looks up `{prefix}.{q,k,v,o}.{w,b}`.
    pub fn from_set(ws: &'a WeightSet, prefix: &str) -> Result<Self, WeightError> {
        let pair = |p: &str| -> Result<(&'a Tensor, &'a Tensor), WeightError> {
            Ok((ws.get(&format!("{prefix}.{p}.w"))?, ws.get(&format!("{prefix}.{p}.b"))?))
        };
        Ok(Self { q: pair("q")?, k: pair("k")?, v: pair("v")?, o: pair("o")? })
    }
}

/// Multi-head attention of `queries [N, d]` over `context [M, d]`.
///
/// Returns the projected output `[N, d]` and one `[N, M]` weight matrix per head.
pub fn multi_head_attention(
    queries: &Tensor,
    context: &Tensor,
    params: &AttentionParams<'_>,
    n_heads: usize,
) -> Result<(Tensor, Vec<Tensor>), HiLoError> {
    queries.expect_rank("attention", 2)?;
    context.expect_rank("attention", 2)?;
    let d = queries.shape()[1];
    if !d.is_multiple_of(n_heads) {
        return Err(HiLoError::Config(format!("width {d} not divisible by {n_heads} heads")));
    }
    let (n, m) = (queries.shape()[0], context.shape()[0]);
    let q = nn::linear(queries, params.q.0, params.q.1)?;
    let k = nn::linear(context, params.k.0, params.k.1)?;
    let v = nn::linear(context, params.v.0, params.v.1)?;
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut mixed = vec![0.0; n * d];
    let mut maps = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let off = h * hd;
        let mut weights = vec![0.0; n * m];
        for i in 0..n {
            let qi = &q.row(i)[off..off + hd];
            let row = &mut weights[i * m..(i + 1) * m];
            for (j, slot) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[off..off + hd];
                *slot = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            nn::softmax_in_place(row);
            let out = &mut mixed[i * d + off..i * d + off + hd];
            for (j, &a) in row.iter().enumerate() {
                for (o, vj) in out.iter_mut().zip(&v.row(j)[off..off + hd]) {
                    *o += a * vj;
                }
            }
        }
        maps.push(Tensor::new(vec![n, m], weights)?);
    }
    let mixed = Tensor::new(vec![n, d], mixed)?;
    Ok((nn::linear(&mixed, params.o.0, params.o.1)?, maps))
}

/// Channel split: `[0, d_hi)` to Hi, `[d_hi, d_model)` to Lo.
pub fn split_channels(x: &Tensor, cfg: &HiLoConfig) -> Result<(Tensor, Tensor), HiLoError> {
    if x.last_dim() != cfg.d_model {
        return Err(HiLoError::Config(format!("input has {} channels, config expects {}", x.last_dim(), cfg.d_model)));
    }
    Ok(nn::split_last(x, cfg.d_hi)?)
}

fn flatten_tokens(x: &Tensor) -> Result<Tensor, TensorError> {
    Tensor::new(vec![x.rows(), x.last_dim()], x.data().to_vec())
}

/// Lo branch with its per-head `[HW, HW / stride^2]` attention maps.
pub fn lo_branch_traced(x_lo: &Tensor, params: &AttentionParams<'_>, cfg: &HiLoConfig) -> Result<(Tensor, Vec<Tensor>), HiLoError> {
    x_lo.expect_rank("lo_branch", 3)?;
    let pooled = nn::avgpool2d(x_lo, cfg.pool_stride)?;
    let (out, maps) = multi_head_attention(&flatten_tokens(x_lo)?, &flatten_tokens(&pooled)?, params, cfg.n_heads)?;
    Ok((out.reshape(x_lo.shape().to_vec())?, maps))
}

/// Full-resolution queries attending to pooled keys / values.
pub fn lo_branch(x_lo: &Tensor, params: &AttentionParams<'_>, cfg: &HiLoConfig) -> Result<Tensor, HiLoError> {
    Ok(lo_branch_traced(x_lo, params, cfg)?.0)
}

/// Hi branch with attention maps, indexed `[window][head]`.
pub fn hi_branch_traced(x_hi: &Tensor, params: &AttentionParams<'_>, cfg: &HiLoConfig) -> Result<(Tensor, Vec<Vec<Tensor>>), HiLoError> {
    x_hi.expect_rank("hi_branch", 3)?;
    let (h, w, d) = (x_hi.shape()[0], x_hi.shape()[1], x_hi.shape()[2]);
    let windows = nn::window_partition(x_hi, cfg.window_size)?;
    let (n_win, t) = (windows.shape()[0], windows.shape()[1]);
    let mut out = Vec::with_capacity(windows.len());
    let mut all_maps = Vec::with_capacity(n_win);
    for k in 0..n_win {
        let tokens = Tensor::new(vec![t, d], windows.data()[k * t * d..(k + 1) * t * d].to_vec())?;
        let (y, maps) = multi_head_attention(&tokens, &tokens, params, cfg.n_heads)?;
        out.extend_from_slice(y.data());
        all_maps.push(maps);
    }
    let merged = nn::window_merge(&Tensor::new(vec![n_win, t, d], out)?, h, w)?;
    Ok((merged, all_maps))
}

/// Self-attention inside each `window_size x window_size` window.
pub fn hi_branch(x_hi: &Tensor, params: &AttentionParams<'_>, cfg: &HiLoConfig) -> Result<Tensor, HiLoError> {
    Ok(hi_branch_traced(x_hi, params, cfg)?.0)
}

fn layer_norm(x: &Tensor, ws: &WeightSet, prefix: &str) -> Result<Tensor, HiLoError> {
    Ok(nn::layernorm(x, ws.get(&format!("{prefix}.g"))?, ws.get(&format!("{prefix}.b"))?, LN_EPS)?)
}

fn apply_linear(x: &Tensor, ws: &WeightSet, prefix: &str) -> Result<Tensor, HiLoError> {
    Ok(nn::linear(x, ws.get(&format!("{prefix}.w"))?, ws.get(&format!("{prefix}.b"))?)?)
}

/// One HiLo block on an `[H, W, d_model]` tensor; `prefix` selects its
/// weights (e.g. `"enc.3"`).
pub fn hilo_block(x: &Tensor, ws: &WeightSet, prefix: &str, cfg: &HiLoConfig) -> Result<Tensor, HiLoError> {
    x.expect_rank("hilo_block", 3)?;
    let normed = layer_norm(x, ws, &format!("{prefix}.ln1"))?;
    let (x_hi, x_lo) = split_channels(&normed, cfg)?;
    let y_hi = if cfg.d_hi > 0 { hi_branch(&x_hi, &AttentionParams::from_set(ws, &format!("{prefix}.hi"))?, cfg)? } else { x_hi };
    let y_lo = if cfg.d_lo > 0 { lo_branch(&x_lo, &AttentionParams::from_set(ws, &format!("{prefix}.lo"))?, cfg)? } else { x_lo };
    let y = x.add(&nn::concat_last(&y_hi, &y_lo)?)?;
    let hidden = nn::gelu(&apply_linear(&layer_norm(&y, ws, &format!("{prefix}.ln2"))?, ws, &format!("{prefix}.mlp.fc1"))?);
    Ok(y.add(&apply_linear(&hidden, ws, &format!("{prefix}.mlp.fc2"))?)?)
}

/// Scaled-domain token streams, `[N, d_fsq]` each, plus the token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DualStream {
    pub hi: Tensor,
    pub lo: Tensor,
    /// `(rows, cols)` of the token grid; `rows * cols == N`.
    pub grid: (usize, usize),
}

impl DualStream {
    pub fn n_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Level indices of both streams, recovered by requantization.
    pub fn indices(&self, qcfg: &QuantizerConfig) -> Result<DualIndices, FsqError> {
        Ok(DualIndices { hi: stream_indices(&self.hi, qcfg)?, lo: stream_indices(&self.lo, qcfg)? })
    }
}

fn stream_indices(t: &Tensor, qcfg: &QuantizerConfig) -> Result<StreamIndices, FsqError> {
    (0..t.rows()).map(|r| fsq::requantize(t.row(r), qcfg).map(|c| c.indices)).collect()
}

fn patchify(image: &Tensor, p: usize, grid: (usize, usize)) -> Result<Tensor, TensorError> {
    let (w, c) = (image.shape()[1], image.shape()[2]);
    let mut out = Vec::with_capacity(image.len());
    for ti in 0..grid.0 {
        for tj in 0..grid.1 {
            for py in 0..p {
                let s = ((ti * p + py) * w + tj * p) * c;
                out.extend_from_slice(&image.data()[s..s + p * c]);
            }
        }
    }
    Tensor::new(vec![grid.0, grid.1, p * p * c], out)
}

fn unpatchify(patches: &Tensor, p: usize, c: usize) -> Result<Tensor, TensorError> {
    let (gh, gw) = (patches.shape()[0], patches.shape()[1]);
    let (h, w) = (gh * p, gw * p);
    let mut out = vec![0.0; h * w * c];
    for ti in 0..gh {
        for tj in 0..gw {
            let src = &patches.data()[(ti * gw + tj) * p * p * c..];
            for py in 0..p {
                let o = ((ti * p + py) * w + tj * p) * c;
                out[o..o + p * c].copy_from_slice(&src[py * p * c..(py + 1) * p * c]);
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

fn check_fsq(cfg: &HiLoConfig, qcfg: &QuantizerConfig) -> Result<(), HiLoError> {
    if qcfg.dims() != cfg.d_fsq {
        return Err(HiLoError::Config(format!("d_fsq ({}) does not match the quantizer's {} dimensions", cfg.d_fsq, qcfg.dims())));
    }
    Ok(())
}

fn quantize_stream(t: &Tensor, qcfg: &QuantizerConfig) -> Result<Tensor, HiLoError> {
    let mut out = Vec::with_capacity(t.len());
    for r in 0..t.rows() {
        out.extend(fsq::fsq_forward(t.row(r), qcfg)?.scaled_values);
    }
    Ok(Tensor::new(vec![t.rows(), qcfg.dims()], out)?)
}

/// Image `[H, W, C]` to quantized scaled-domain Hi / Lo streams.
pub fn encode(image: &Tensor, ws: &WeightSet, cfg: &HiLoConfig, qcfg: &QuantizerConfig) -> Result<DualStream, HiLoError> {
    cfg.validate()?;
    check_fsq(cfg, qcfg)?;
    image.expect_rank("encode", 3)?;
    if image.shape()[2] != cfg.channels {
        return Err(HiLoError::Geometry { shape: image.shape().to_vec(), reason: format!("expected {} channels", cfg.channels) });
    }
    image.check_finite()?;
    let grid = cfg.token_grid(image.shape()[0], image.shape()[1])?;
    let mut x = apply_linear(&patchify(image, cfg.patch_size, grid)?, ws, "embed")?;
    for b in 0..cfg.n_blocks {
        x = hilo_block(&x, ws, &format!("enc.{b}"), cfg)?;
    }
    let x = layer_norm(&x, ws, "enc.norm")?;
    let (x_hi, x_lo) = split_channels(&x, cfg)?;
    let t_hi = apply_linear(&flatten_tokens(&x_hi)?, ws, "head.hi")?;
    let t_lo = apply_linear(&flatten_tokens(&x_lo)?, ws, "head.lo")?;
    Ok(DualStream { hi: quantize_stream(&t_hi, qcfg)?, lo: quantize_stream(&t_lo, qcfg)?, grid })
}

fn requantize_stream(t: &Tensor, qcfg: &QuantizerConfig) -> Result<Tensor, HiLoError> {
    let mut out = Vec::with_capacity(t.len());
    for r in 0..t.rows() {
        out.extend(fsq::requantize(t.row(r), qcfg)?.normalized_values);
    }
    Ok(Tensor::new(vec![t.rows(), qcfg.dims()], out)?)
}

/// Received streams back to an image.
pub fn decode(received: &DualStream, ws: &WeightSet, cfg: &HiLoConfig, qcfg: &QuantizerConfig) -> Result<Tensor, HiLoError> {
    cfg.validate()?;
    check_fsq(cfg, qcfg)?;
    let n = received.n_tokens();
    for t in [&received.hi, &received.lo] {
        if t.shape() != [n, cfg.d_fsq] {
            return Err(HiLoError::Geometry { shape: t.shape().to_vec(), reason: format!("expected a [{n}, {}] stream", cfg.d_fsq) });
        }
    }
    let (gh, gw) = received.grid;
    cfg.token_grid(gh * cfg.patch_size, gw * cfg.patch_size)?;
    let p_hi = apply_linear(&requantize_stream(&received.hi, qcfg)?, ws, "rec.hi")?;
    let p_lo = apply_linear(&requantize_stream(&received.lo, qcfg)?, ws, "rec.lo")?;
    let mut x = nn::concat_last(&p_hi, &p_lo)?.reshape(vec![gh, gw, cfg.d_model])?;
    for b in 0..cfg.n_blocks {
        x = hilo_block(&x, ws, &format!("dec.{b}"), cfg)?;
    }
    let x = layer_norm(&x, ws, "dec.norm")?;
    let patches = apply_linear(&x, ws, "unembed")?;
    Ok(unpatchify(&patches, cfg.patch_size, cfg.channels)?)
}

/// Channel-level statistics of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamStats {
    pub tokens: usize,
    pub correct_tokens: usize,
    pub symbol_accuracy: f64,
    /// Tokens whose transmitted codeword has every level interior.
    pub interior_tokens: usize,
    pub interior_correct: usize,
    pub sigma: f64,
    pub signal_power: f64,
    /// Realized SNR in dB; `None` when no noise was added.
    pub measured_snr_db: Option<f64>,
    /// Joint recovery probability predicted for interior tokens at `sigma`.
    pub theory_accuracy: f64,
}

/// Everything a pipeline run reports besides the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub image_shape: Vec<usize>,
    pub token_grid: (usize, usize),
    pub hi: StreamStats,
    pub lo: StreamStats,
    pub overall_symbol_accuracy: f64,
}

/// Output of [`pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub reconstruction: Tensor,
    pub sent: DualIndices,
    pub received: DualIndices,
    /// Per-token correctness, Hi then Lo.
    pub token_correct: (Vec<bool>, Vec<bool>),
    pub stats: PipelineStats,
}

fn stream_stats(
    sent: &StreamIndices,
    recovered: &StreamIndices,
    tx: &Transmission,
    qcfg: &QuantizerConfig,
) -> Result<(StreamStats, Vec<bool>), HiLoError> {
    let per_token = metrics::token_matches(sent, recovered)?;
    let correct = per_token.iter().filter(|&&c| c).count();
    let interior: Vec<bool> = sent.iter().map(|row| row.iter().enumerate().all(|(d, &i)| qcfg.is_interior(d, i))).collect();
    let interior_tokens = interior.iter().filter(|&&b| b).count();
    let interior_correct = interior.iter().zip(&per_token).filter(|(&i, &c)| i && c).count();
    let stats = StreamStats {
        tokens: sent.len(),
        correct_tokens: correct,
        symbol_accuracy: if sent.is_empty() { 1.0 } else { correct as f64 / sent.len() as f64 },
        interior_tokens,
        interior_correct,
        sigma: tx.sigma,
        signal_power: tx.signal_power,
        measured_snr_db: (tx.sigma > 0.0).then(|| tx.measured_snr_db()),
        theory_accuracy: theory::predicted_recovery(qcfg, tx.sigma)?,
    };
    Ok((stats, per_token))
}

/// Sends already-encoded streams through the two channels and decodes.
pub fn transmit_and_decode(
    encoded: &DualStream,
    ws: &WeightSet,
    cfg: &HiLoConfig,
    qcfg: &QuantizerConfig,
    channel_hi: &mut AwgnChannel,
    channel_lo: &mut AwgnChannel,
) -> Result<PipelineOutput, HiLoError> {
    let sent = encoded.indices(qcfg)?;
    let tx_hi = channel_hi.transmit(&encoded.hi)?;
    let tx_lo = channel_lo.transmit(&encoded.lo)?;
    let received_streams = DualStream { hi: tx_hi.output.clone(), lo: tx_lo.output.clone(), grid: encoded.grid };
    let received = received_streams.indices(qcfg)?;
    let reconstruction = decode(&received_streams, ws, cfg, qcfg)?;
    let (hi, hi_ok) = stream_stats(&sent.hi, &received.hi, &tx_hi, qcfg)?;
    let (lo, lo_ok) = stream_stats(&sent.lo, &received.lo, &tx_lo, qcfg)?;
    let total = hi.tokens + lo.tokens;
    let overall = if total == 0 { 1.0 } else { (hi.correct_tokens + lo.correct_tokens) as f64 / total as f64 };
    let stats =
        PipelineStats { image_shape: reconstruction.shape().to_vec(), token_grid: encoded.grid, hi, lo, overall_symbol_accuracy: overall };
    Ok(PipelineOutput { reconstruction, sent, received, token_correct: (hi_ok, lo_ok), stats })
}

/// Encode, pass each stream through its own channel, decode.
pub fn pipeline(
    image: &Tensor,
    ws: &WeightSet,
    cfg: &HiLoConfig,
    qcfg: &QuantizerConfig,
    channel_hi: &mut AwgnChannel,
    channel_lo: &mut AwgnChannel,
) -> Result<PipelineOutput, HiLoError> {
    let encoded = encode(image, ws, cfg, qcfg)?;
    transmit_and_decode(&encoded, ws, cfg, qcfg, channel_hi, channel_lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelConfig, NoiseMode};
    use crate::rng;
    use rand::Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut s = rng::stream(seed);
        Tensor::from_fn(shape, |_| s.random_range(-1.0..1.0))
    }

    fn small() -> HiLoConfig {
        HiLoConfig { n_blocks: 2, ..HiLoConfig::desk() }
    }

    #[test]
    fn config_validation() {
        HiLoConfig::desk().validate().unwrap();
        HiLoConfig::paper().validate().unwrap();
        assert!(HiLoConfig { d_hi: 15, ..HiLoConfig::desk() }.validate().is_err());
        assert!(HiLoConfig { d_hi: 14, d_lo: 18, n_heads: 4, ..HiLoConfig::desk() }.validate().is_err());
        assert!(HiLoConfig { window_size: 0, ..HiLoConfig::desk() }.validate().is_err());
        HiLoConfig { d_hi: 0, d_lo: 32, ..HiLoConfig::desk() }.validate().unwrap();
        let c = HiLoConfig::desk();
        assert_eq!(c.token_grid(32, 32).unwrap(), (8, 8));
        assert!(c.token_grid(30, 32).is_err());
        assert!(c.token_grid(12, 32).is_err());
    }

    #[test]
    fn split_examples() {
        let cfg = HiLoConfig { d_model: 4, d_hi: 2, d_lo: 2, n_heads: 1, ..HiLoConfig::desk() };
        let x = Tensor::from_fn(vec![1, 1, 4], |i| i as f64);
        let (hi, lo) = split_channels(&x, &cfg).unwrap();
        assert_eq!(hi.data(), &[0.0, 1.0]);
        assert_eq!(lo.data(), &[2.0, 3.0]);
        assert_eq!(nn::concat_last(&hi, &lo).unwrap(), x);
        let degenerate = HiLoConfig { d_hi: 0, d_lo: 4, ..cfg };
        let (hi, lo) = split_channels(&x, &degenerate).unwrap();
        assert!(hi.is_empty());
        assert_eq!(lo, x);
        assert!(split_channels(&Tensor::zeros(vec![1, 1, 5]), &cfg).is_err());
    }

    #[test]
    fn patchify_roundtrip() {
        let img = random(vec![8, 12, 3], 1);
        let p = patchify(&img, 4, (2, 3)).unwrap();
        assert_eq!(p.shape(), &[2, 3, 48]);
        // Token (0, 1), first pixel is image (0, 4).
        assert_eq!(&p.data()[48..51], &img.data()[12..15]);
        assert_eq!(unpatchify(&p, 4, 3).unwrap(), img);
    }

    #[test]
    fn lo_constant_input_gives_constant_output() {
        let cfg = small();
        let ws = init_weights(&cfg, 3).unwrap();
        let params = AttentionParams::from_set(&ws, "enc.0.lo").unwrap();
        let row: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Tensor::from_fn(vec![4, 4, 16], |i| row[i % 16]);
        let (y, maps) = lo_branch_traced(&x, &params, &cfg).unwrap();
        assert_eq!(maps[0].shape(), &[16, 4]);
        for r in 1..16 {
            for (a, b) in y.row(r).iter().zip(y.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_one_lo_equals_global_hi() {
        let cfg = HiLoConfig { pool_stride: 1, window_size: 4, d_model: 16, d_hi: 8, d_lo: 8, ..small() };
        let ws = init_weights(&cfg, 11).unwrap();
        let params = AttentionParams::from_set(&ws, "enc.0.lo").unwrap();
        let x = random(vec![4, 4, 8], 12);
        let lo = lo_branch(&x, &params, &cfg).unwrap();
        let hi = hi_branch(&x, &params, &cfg).unwrap();
        for (a, b) in lo.data().iter().zip(hi.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn block_shapes_and_determinism() {
        let cfg = HiLoConfig { d_model: 16, d_hi: 8, d_lo: 8, ..small() };
        let ws = init_weights(&cfg, 5).unwrap();
        let x = random(vec![8, 8, 16], 6);
        let y = hilo_block(&x, &ws, "enc.0", &cfg).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y, hilo_block(&x, &ws, "enc.0", &cfg).unwrap());
        assert_ne!(y, x);
    }

    #[test]
    fn degenerate_branches_run() {
        for (d_hi, d_lo) in [(0, 32), (32, 0)] {
            let cfg = HiLoConfig { d_hi, d_lo, ..small() };
            let ws = init_weights(&cfg, 1).unwrap();
            let qcfg = QuantizerConfig::paper_default();
            let img = random(vec![16, 16, 3], 2);
            let enc = encode(&img, &ws, &cfg, &qcfg).unwrap();
            assert_eq!(enc.hi.shape(), &[16, 5]);
            let rec = decode(&enc, &ws, &cfg, &qcfg).unwrap();
            assert_eq!(rec.shape(), img.shape());
        }
    }

    #[test]
    fn encode_shapes() {
        let cfg = small();
        let ws = init_weights(&cfg, 1).unwrap();
        let qcfg = QuantizerConfig::paper_default();
        let img = random(vec![32, 32, 3], 2);
        let enc = encode(&img, &ws, &cfg, &qcfg).unwrap();
        assert_eq!(enc.grid, (8, 8));
        assert_eq!(enc.hi.shape(), &[64, 5]);
        assert_eq!(enc.lo.shape(), &[64, 5]);
        let idx = enc.indices(&qcfg).unwrap();
        for (row, vals) in idx.hi.iter().zip(0..) {
            let code = fsq::code_from_indices(row, &qcfg).unwrap();
            assert_eq!(code.scaled_values, enc.hi.row(vals));
        }
        let wrong = QuantizerConfig::with_alpha(vec![5; 4], 2.0).unwrap();
        assert!(matches!(encode(&img, &ws, &cfg, &wrong), Err(HiLoError::Config(_))));
        assert!(matches!(encode(&random(vec![30, 32, 3], 0), &ws, &cfg, &qcfg), Err(HiLoError::Geometry { .. })));
        assert!(matches!(encode(&random(vec![32, 32, 1], 0), &ws, &cfg, &qcfg), Err(HiLoError::Geometry { .. })));
    }

    #[test]
    fn noiseless_pipeline_is_exact() {
        let cfg = small();
        let ws = init_weights(&cfg, 1).unwrap();
        let qcfg = QuantizerConfig::paper_default();
        let img = random(vec![32, 32, 3], 2);
        let quiet = ChannelConfig::new(NoiseMode::Noiseless, 0).unwrap();
        let out = pipeline(&img, &ws, &cfg, &qcfg, &mut AwgnChannel::new(quiet), &mut AwgnChannel::new(quiet)).unwrap();
        assert_eq!(out.stats.overall_symbol_accuracy, 1.0);
        assert_eq!(out.sent, out.received);
        let direct = decode(&encode(&img, &ws, &cfg, &qcfg).unwrap(), &ws, &cfg, &qcfg).unwrap();
        assert_eq!(out.reconstruction, direct);
        assert_eq!(out.stats.hi.measured_snr_db, None);
    }
}
