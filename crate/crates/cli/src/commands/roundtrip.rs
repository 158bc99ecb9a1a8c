//! Frame codec fuzzing and golden-file check.

use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use sehilo::frame::{self, FrameError};
use sehilo::fsq::{DualIndices, QuantizerConfig, StreamIndices};
use sehilo::rng;

use crate::config::RunConfig;

/// Level configurations the fuzzer draws from.
pub const FUZZ_LEVELS: [&[u32]; 5] = [&[3], &[4], &[5, 5], &[5, 5, 5, 5, 5], &[8, 6, 5]];

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RoundtripReport {
    pub frames: u64,
    /// Frames that decoded to something other than what was encoded.
    pub mismatches: u64,
    /// Intact frames that failed to decode.
    pub decode_errors: u64,
    pub truncated_injected: u64,
    /// Truncated frames rejected with a decode error.
    pub truncated_rejected: u64,
    pub golden_builtin_ok: bool,
    /// `None` when no golden file was configured.
    pub golden_file_ok: Option<bool>,
}

impl RoundtripReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
            && self.decode_errors == 0
            && self.truncated_rejected == self.truncated_injected
            && self.golden_builtin_ok
            && self.golden_file_ok != Some(false)
    }
}

impl fmt::Display for RoundtripReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} mismatches / {}", self.mismatches, self.frames)?;
        writeln!(f, "{} decode errors on intact frames", self.decode_errors)?;
        writeln!(f, "{} / {} truncated frames rejected", self.truncated_rejected, self.truncated_injected)?;
        writeln!(f, "golden frame (built-in): {}", if self.golden_builtin_ok { "match" } else { "MISMATCH" })?;
        match self.golden_file_ok {
            Some(ok) => writeln!(f, "golden frame (file): {}", if ok { "match" } else { "MISMATCH" }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Default)]
struct Outcome {
    mismatch: bool,
    decode_error: bool,
    truncated: bool,
    truncated_rejected: bool,
}

fn random_stream<R: Rng>(levels: &[u32], n: u32, rng: &mut R) -> StreamIndices {
    (0..n).map(|_| levels.iter().map(|&m| rng.random_range(0..m)).collect()).collect()
}

/// A random valid frame input: streams, quantizer (exact in `f32`) and seed.
pub fn random_frame_input(seed: u64, max_tokens: u32) -> (DualIndices, QuantizerConfig, u64) {
    let mut s = rng::stream(seed);
    let levels = FUZZ_LEVELS[s.random_range(0..FUZZ_LEVELS.len())].to_vec();
    let alpha = f64::from(s.random_range(0.25f32..4.0));
    let epsilon = f64::from(s.random_range(0.0f32..0.01));
    let q = QuantizerConfig::new(levels.clone(), alpha, epsilon).expect("fuzz quantizer is valid");
    let streams = DualIndices {
        hi: random_stream(&levels, s.random_range(0..=max_tokens), &mut s),
        lo: random_stream(&levels, s.random_range(0..=max_tokens), &mut s),
    };
    (streams, q, s.random())
}

fn fuzz_one(seed: u64, max_tokens: u32, truncate: bool) -> Result<Outcome, FrameError> {
    let (streams, q, frame_seed) = random_frame_input(seed, max_tokens);
    let bytes = frame::encode_frame(&streams, &q, frame_seed)?;
    let mut out = Outcome::default();
    match frame::decode_frame(&bytes) {
        Ok(d) => {
            out.mismatch = d.streams != streams
                || d.seed() != frame_seed
                || d.qcfg.levels() != q.levels()
                || d.qcfg.alpha() != q.alpha()
                || d.qcfg.epsilon() != q.epsilon();
        }
        Err(_) => out.decode_error = true,
    }
    if truncate {
        out.truncated = true;
        out.truncated_rejected = frame::decode_frame(&bytes[..bytes.len() - 1]).is_err();
    }
    Ok(out)
}

/// Compares the built-in golden input against the stored bytes.
pub fn golden_matches(stored: &[u8]) -> Result<bool> {
    let (streams, q, seed) = frame::golden_frame_input();
    let encoded = frame::encode_frame(&streams, &q, seed)?;
    let decoded_ok = frame::decode_frame(stored).map(|d| d.streams == streams && d.seed() == seed).unwrap_or(false);
    Ok(encoded == stored && decoded_ok)
}

pub fn run_with(frames: u64, max_tokens: u32, truncate_every: u64, golden: Option<&Path>, seed: u64) -> Result<RoundtripReport> {
    let outcomes = (0..frames)
        .into_par_iter()
        .map(|i| fuzz_one(rng::derive_seed(seed, i), max_tokens, i % truncate_every == 0))
        .collect::<Result<Vec<_>, _>>()?;
    let count = |f: fn(&Outcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as u64;
    let golden_file_ok = match golden {
        Some(p) => Some(golden_matches(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)?),
        None => None,
    };
    Ok(RoundtripReport {
        frames,
        mismatches: count(|o| o.mismatch),
        decode_errors: count(|o| o.decode_error),
        truncated_injected: count(|o| o.truncated),
        truncated_rejected: count(|o| o.truncated_rejected),
        golden_builtin_ok: golden_matches(frame::GOLDEN_FRAME)?,
        golden_file_ok,
    })
}

pub fn run(cfg: &RunConfig, seed: u64) -> Result<RoundtripReport> {
    let r = &cfg.roundtrip;
    run_with(r.frames, r.max_tokens, r.truncate_every, r.golden.as_deref(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_fuzz_passes() {
        let r = run_with(500, 20, 10, None, 3).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.truncated_injected, 50);
        assert!(r.to_string().starts_with("0 mismatches / 500\n"));
    }

    #[test]
    fn corrupted_golden_is_flagged() {
        let mut bytes = frame::GOLDEN_FRAME.to_vec();
        assert!(golden_matches(&bytes).unwrap());
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(!golden_matches(&bytes).unwrap());
    }

    #[test]
    fn fuzz_inputs_are_exact_in_f32() {
        for seed in 0..50 {
            let (_, q, _) = random_frame_input(seed, 4);
            assert_eq!(f64::from(q.alpha() as f32), q.alpha());
            assert_eq!(f64::from(q.epsilon() as f32), q.epsilon());
        }
    }
}
