//! Per-stream noise study: independent SNRs on the Hi and Lo channels.

use anyhow::Result;
use rayon::prelude::*;
use serde::Serialize;

use sehilo::channel::NoiseMode;
use sehilo::rng;

use crate::config::RunConfig;
use crate::output::ser_f64;
use crate::workload::{run_point, Workload};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HiLoNoiseRow {
    #[serde(serialize_with = "ser_f64")]
    pub snr_hi_db: f64,
    #[serde(serialize_with = "ser_f64")]
    pub snr_lo_db: f64,
    #[serde(serialize_with = "ser_f64")]
    pub sigma_hi: f64,
    #[serde(serialize_with = "ser_f64")]
    pub sigma_lo: f64,
    #[serde(serialize_with = "ser_f64")]
    pub symbol_acc_hi: f64,
    #[serde(serialize_with = "ser_f64")]
    pub stderr_hi: f64,
    #[serde(serialize_with = "ser_f64")]
    pub symbol_acc_lo: f64,
    #[serde(serialize_with = "ser_f64")]
    pub stderr_lo: f64,
    /// Mean per-token frequency of recovering both streams.
    #[serde(serialize_with = "ser_f64")]
    pub joint_acc: f64,
    /// Mean per-token product of the two stream frequencies.
    #[serde(serialize_with = "ser_f64")]
    pub product_acc: f64,
    #[serde(serialize_with = "ser_f64")]
    pub product_gap_stderr: f64,
    /// MSE of the noisy reconstruction against the noiseless one.
    #[serde(serialize_with = "ser_f64")]
    pub feature_mse: f64,
    pub seed: u64,
}

/// One grid point on an existing workload.
pub fn point_row(w: &Workload, snr_hi_db: f64, snr_lo_db: f64, seed: u64, draws: usize) -> Result<HiLoNoiseRow> {
    let st = run_point(w, NoiseMode::SnrDb(snr_hi_db), NoiseMode::SnrDb(snr_lo_db), seed, draws)?;
    let (hi, se_hi) = st.hi.rate();
    let (lo, se_lo) = st.lo.rate();
    Ok(HiLoNoiseRow {
        snr_hi_db,
        snr_lo_db,
        sigma_hi: st.sigma_hi,
        sigma_lo: st.sigma_lo,
        symbol_acc_hi: hi,
        stderr_hi: se_hi,
        symbol_acc_lo: lo,
        stderr_lo: se_lo,
        joint_acc: st.joint,
        product_acc: st.product,
        product_gap_stderr: st.product_gap_stderr,
        feature_mse: st.feature_mse,
        seed,
    })
}

/// Full `snr_hi x snr_lo` grid, Hi-major.
pub fn run(cfg: &RunConfig, seed: u64) -> Result<Vec<HiLoNoiseRow>> {
    let s = &cfg.sweep;
    let w = Workload::build(&cfg.model, &cfg.quantizer.build()?, s.image_size, s.images, seed)?;
    let grid: Vec<(f64, f64)> =
        cfg.hilo_noise.snr_hi_db.iter().flat_map(|&h| cfg.hilo_noise.snr_lo_db.iter().map(move |&l| (h, l))).collect();
    grid.par_iter().enumerate().map(|(k, &(h, l))| point_row(&w, h, l, rng::derive_seed(seed, k as u64), s.draws)).collect()
}

fn gap(a: f64, sa: f64, b: f64, sb: f64) -> f64 {
    (a - b).abs() / (sa * sa + sb * sb).sqrt().max(f64::MIN_POSITIVE)
}

/// Checks on a grid; returns every violation found.
///
/// * at fixed Hi SNR, Hi accuracy does not depend on the Lo SNR (and vice
///   versa) beyond `z` combined standard errors;
/// * joint recovery equals the product of the stream frequencies within `z`
///   standard errors.
pub fn violations(rows: &[HiLoNoiseRow], z: f64) -> Vec<String> {
    let mut out = Vec::new();
    for a in rows {
        for b in rows {
            if a.snr_hi_db == b.snr_hi_db && a.snr_lo_db < b.snr_lo_db {
                let g = gap(a.symbol_acc_hi, a.stderr_hi, b.symbol_acc_hi, b.stderr_hi);
                if a.symbol_acc_hi != b.symbol_acc_hi && g > z {
                    out.push(format!(
                        "hi accuracy at {} dB moves with lo SNR ({} vs {} dB): {} vs {}",
                        a.snr_hi_db, a.snr_lo_db, b.snr_lo_db, a.symbol_acc_hi, b.symbol_acc_hi
                    ));
                }
            }
            if a.snr_lo_db == b.snr_lo_db && a.snr_hi_db < b.snr_hi_db {
                let g = gap(a.symbol_acc_lo, a.stderr_lo, b.symbol_acc_lo, b.stderr_lo);
                if a.symbol_acc_lo != b.symbol_acc_lo && g > z {
                    out.push(format!(
                        "lo accuracy at {} dB moves with hi SNR ({} vs {} dB): {} vs {}",
                        a.snr_lo_db, a.snr_hi_db, b.snr_hi_db, a.symbol_acc_lo, b.symbol_acc_lo
                    ));
                }
            }
        }
        let d = a.joint_acc - a.product_acc;
        if d != 0.0 && d.abs() > z * a.product_gap_stderr {
            out.push(format!(
                "joint accuracy {} differs from product {} at ({}, {}) dB",
                a.joint_acc, a.product_acc, a.snr_hi_db, a.snr_lo_db
            ));
        }
    }
    out
}
