//! Pipeline SNR sweep with random seeded weights.
//!
//! Rows come in three sections: a noiseless control, the SNR grid (both
//! streams at the same SNR), and fixed-sigma rows for every scaling factor in
//! the alpha grid. Absolute image quality is meaningless without trained
//! weights, so the interesting columns are the symbol accuracies and their
//! agreement with the closed-form prediction.

use std::time::Instant;

use anyhow::Result;
use rayon::prelude::*;
use serde::Serialize;

use sehilo::channel::NoiseMode;
use sehilo::rng;

use crate::config::RunConfig;
use crate::output::{ser_f64, ser_opt_f64};
use crate::workload::{run_point, PointStats, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Noiseless,
    Snr,
    FixedSigma,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub section: Section,
    #[serde(serialize_with = "ser_f64")]
    pub alpha: f64,
    #[serde(serialize_with = "ser_opt_f64")]
    pub snr_db: Option<f64>,
    #[serde(serialize_with = "ser_opt_f64")]
    pub fixed_sigma: Option<f64>,
    /// Mean noise standard deviation over channel uses.
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
    pub tokens_per_stream: u64,
    pub interior_tokens: u64,
    #[serde(serialize_with = "ser_f64")]
    pub interior_acc: f64,
    #[serde(serialize_with = "ser_f64")]
    pub interior_stderr: f64,
    /// Predicted interior recovery rate.
    #[serde(serialize_with = "ser_f64")]
    pub theory_acc: f64,
    #[serde(serialize_with = "ser_f64")]
    pub psnr_feature: f64,
    pub seed: u64,
    pub runtime_ms: u64,
}

impl SweepRow {
    fn new(
        section: Section,
        alpha: f64,
        snr_db: Option<f64>,
        fixed_sigma: Option<f64>,
        st: &PointStats,
        seed: u64,
        runtime_ms: u64,
    ) -> Self {
        let (hi, se_hi) = st.hi.rate();
        let (lo, se_lo) = st.lo.rate();
        let (int, _) = st.interior.rate();
        Self {
            section,
            alpha,
            snr_db,
            fixed_sigma,
            sigma_hi: st.sigma_hi,
            sigma_lo: st.sigma_lo,
            symbol_acc_hi: hi,
            stderr_hi: se_hi,
            symbol_acc_lo: lo,
            stderr_lo: se_lo,
            tokens_per_stream: st.hi.total,
            interior_tokens: st.interior.total,
            interior_acc: int,
            interior_stderr: st.interior_test_stderr(),
            theory_acc: st.interior_theory(),
            psnr_feature: st.psnr_feature,
            seed,
            runtime_ms,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Point {
    section: Section,
    alpha_slot: usize,
    mode: NoiseMode,
}

/// One SNR row on an existing workload; both streams share the SNR.
pub fn snr_row(w: &Workload, snr_db: f64, seed: u64, draws: usize) -> Result<SweepRow> {
    let t = Instant::now();
    let st = run_point(w, NoiseMode::SnrDb(snr_db), NoiseMode::SnrDb(snr_db), seed, draws)?;
    Ok(SweepRow::new(Section::Snr, w.qcfg.alpha(), Some(snr_db), None, &st, seed, t.elapsed().as_millis() as u64))
}

pub fn run(cfg: &RunConfig, seed: u64) -> Result<Vec<SweepRow>> {
    let s = &cfg.sweep;
    let base = cfg.quantizer.build()?;
    let mut alphas = vec![base.alpha()];
    alphas.extend(s.alpha_grid.iter().copied());
    let workloads = alphas
        .iter()
        .map(|&a| Workload::build(&cfg.model, &cfg.quantizer.with_alpha(a)?, s.image_size, s.images, seed))
        .collect::<Result<Vec<_>>>()?;

    let mut points = vec![Point { section: Section::Noiseless, alpha_slot: 0, mode: NoiseMode::Noiseless }];
    points.extend(s.snr_grid_db.iter().map(|&snr| Point { section: Section::Snr, alpha_slot: 0, mode: NoiseMode::SnrDb(snr) }));
    for slot in 1..alphas.len() {
        points.extend(s.sigma_grid.iter().map(|&sg| Point {
            section: Section::FixedSigma,
            alpha_slot: slot,
            mode: NoiseMode::FixedSigma(sg),
        }));
    }
    points
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let t = Instant::now();
            let row_seed = rng::derive_seed(seed, k as u64);
            let w = &workloads[p.alpha_slot];
            let st = run_point(w, p.mode, p.mode, row_seed, s.draws)?;
            let (snr, sigma) = match p.mode {
                NoiseMode::SnrDb(x) => (Some(x), None),
                NoiseMode::FixedSigma(x) => (None, Some(x)),
                NoiseMode::Noiseless => (None, None),
            };
            Ok(SweepRow::new(p.section, alphas[p.alpha_slot], snr, sigma, &st, row_seed, t.elapsed().as_millis() as u64))
        })
        .collect()
}

fn combined(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

/// Structural checks on a sweep table; returns every violation found.
///
/// * the noiseless row recovers every symbol;
/// * along the SNR grid (ordered by decreasing SNR) per-stream accuracy never
///   rises by more than `z` combined standard errors;
/// * interior accuracy matches the prediction within `z` standard errors;
/// * at equal fixed sigma, a larger alpha is never worse by more than `z`
///   combined standard errors.
pub fn violations(rows: &[SweepRow], z: f64) -> Vec<String> {
    let mut out = Vec::new();
    for r in rows.iter().filter(|r| r.section == Section::Noiseless) {
        if r.symbol_acc_hi != 1.0 || r.symbol_acc_lo != 1.0 {
            out.push(format!("noiseless row has accuracy {} / {}", r.symbol_acc_hi, r.symbol_acc_lo));
        }
    }
    let mut snr: Vec<&SweepRow> = rows.iter().filter(|r| r.section == Section::Snr).collect();
    snr.sort_by(|a, b| b.snr_db.partial_cmp(&a.snr_db).expect("finite snr"));
    for w in snr.windows(2) {
        for (name, a, sa, b, sb) in [
            ("hi", w[0].symbol_acc_hi, w[0].stderr_hi, w[1].symbol_acc_hi, w[1].stderr_hi),
            ("lo", w[0].symbol_acc_lo, w[0].stderr_lo, w[1].symbol_acc_lo, w[1].stderr_lo),
        ] {
            if b - a > z * combined(sa, sb) {
                out.push(format!("{name} accuracy rises from {a} to {b} between {:?} and {:?} dB", w[0].snr_db, w[1].snr_db));
            }
        }
    }
    for r in rows {
        if r.interior_tokens > 0 && (r.interior_acc - r.theory_acc).abs() > z * r.interior_stderr {
            out.push(format!(
                "{:?} row (alpha {}, snr {:?}, sigma {:?}): interior accuracy {} vs theory {} (stderr {})",
                r.section, r.alpha, r.snr_db, r.fixed_sigma, r.interior_acc, r.theory_acc, r.interior_stderr
            ));
        }
    }
    let fixed: Vec<&SweepRow> = rows.iter().filter(|r| r.section == Section::FixedSigma).collect();
    for a in &fixed {
        for b in &fixed {
            if a.fixed_sigma == b.fixed_sigma && b.alpha > a.alpha {
                let (acc_a, acc_b) = (a.symbol_acc_hi + a.symbol_acc_lo, b.symbol_acc_hi + b.symbol_acc_lo);
                let se = combined(combined(a.stderr_hi, a.stderr_lo), combined(b.stderr_hi, b.stderr_lo));
                if acc_a - acc_b > z * se || b.theory_acc < a.theory_acc {
                    out.push(format!("alpha {} does not dominate alpha {} at sigma {:?}", b.alpha, a.alpha, a.fixed_sigma));
                }
            }
        }
    }
    out
}
