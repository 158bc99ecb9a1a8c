//! Closed-form correct-quantization tables.

use anyhow::Result;
use serde::Serialize;

use sehilo::theory::{self, UniformQuantizerSpec};

use crate::config::RunConfig;
use crate::output::{levels_label, ser_f64, ser_opt_f64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    /// The configured FSQ levels at one scaling factor.
    Fsq,
    /// A fixed span split into a varying number of levels.
    Span,
    /// Identical copies of the first FSQ dimension, varying the count.
    Dims,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryRow {
    pub kind: RowKind,
    #[serde(serialize_with = "ser_f64")]
    pub sigma: f64,
    pub levels: String,
    /// Empty for fixed-span rows.
    #[serde(serialize_with = "ser_opt_f64")]
    pub alpha: Option<f64>,
    #[serde(serialize_with = "ser_f64")]
    pub lower: f64,
    #[serde(serialize_with = "ser_f64")]
    pub upper: f64,
    #[serde(serialize_with = "ser_f64")]
    pub step: f64,
    pub n_dims: u32,
    #[serde(serialize_with = "ser_f64")]
    pub p_single: f64,
    #[serde(serialize_with = "ser_f64")]
    pub p_multi: f64,
}

fn row(
    kind: RowKind,
    sigma: f64,
    levels: String,
    alpha: Option<f64>,
    spec: &UniformQuantizerSpec,
    n_dims: u32,
    p_multi: f64,
) -> Result<TheoryRow> {
    Ok(TheoryRow {
        kind,
        sigma,
        levels,
        alpha,
        lower: spec.lower(),
        upper: spec.upper(),
        step: spec.step(),
        n_dims,
        p_single: theory::p_correct_single(spec, sigma)?,
        p_multi,
    })
}

/// Builds every table row.
pub fn run(cfg: &RunConfig) -> Result<Vec<TheoryRow>> {
    let t = &cfg.theory;
    let mut rows = Vec::new();
    for &alpha in &t.alpha_grid {
        let q = cfg.quantizer.with_alpha(alpha)?;
        let specs = theory::fsq_uniform_specs(&q);
        for &sigma in &t.sigma_grid {
            let p_multi = theory::p_correct_multi(&specs, sigma)?;
            rows.push(row(RowKind::Fsq, sigma, levels_label(q.levels()), Some(alpha), &specs[0], q.dims() as u32, p_multi)?);
        }
    }
    let [lower, upper] = t.span;
    let n = cfg.quantizer.levels.len() as u32;
    for &m in &t.span_levels {
        let spec = UniformQuantizerSpec::new(lower, upper, m)?;
        for &sigma in &t.sigma_grid {
            let p_multi = theory::p_correct_identical(&spec, sigma, n)?;
            rows.push(row(RowKind::Span, sigma, m.to_string(), None, &spec, n, p_multi)?);
        }
    }
    let q = cfg.quantizer.build()?;
    let spec = theory::fsq_uniform_specs(&q)[0];
    for dims in 1..=t.max_dims {
        let label = levels_label(&vec![q.levels()[0]; dims as usize]);
        for &sigma in &t.sigma_grid {
            let p_multi = theory::p_correct_identical(&spec, sigma, dims)?;
            rows.push(row(RowKind::Dims, sigma, label.clone(), Some(q.alpha()), &spec, dims, p_multi)?);
        }
    }
    Ok(rows)
}

/// Checks the qualitative conclusions the table is meant to show; returns a
/// description of every violation.
///
/// * more levels on a fixed span lowers `p_single`;
/// * a larger `alpha` raises both probabilities;
/// * more dimensions lowers `p_multi`, which equals `p_single^N`;
/// * more noise lowers every probability.
pub fn violations(rows: &[TheoryRow]) -> Vec<String> {
    let mut out = Vec::new();
    let of = |kind: RowKind| rows.iter().filter(move |r| r.kind == kind);
    let mut sigmas: Vec<f64> = rows.iter().map(|r| r.sigma).collect();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    for &sigma in &sigmas {
        let at = |kind| of(kind).filter(|r| r.sigma == sigma).collect::<Vec<_>>();
        for w in at(RowKind::Span).windows(2) {
            if w[1].step < w[0].step && w[1].p_single >= w[0].p_single {
                out.push(format!("span rows at sigma {sigma}: {} levels not below {} levels", w[1].levels, w[0].levels));
            }
        }
        for w in at(RowKind::Fsq).windows(2) {
            if w[1].alpha > w[0].alpha && !(w[1].p_single > w[0].p_single && w[1].p_multi > w[0].p_multi) {
                out.push(format!("fsq rows at sigma {sigma}: alpha {:?} does not beat alpha {:?}", w[1].alpha, w[0].alpha));
            }
        }
        for w in at(RowKind::Dims).windows(2) {
            if w[1].n_dims > w[0].n_dims && w[1].p_multi >= w[0].p_multi {
                out.push(format!("dims rows at sigma {sigma}: N={} not below N={}", w[1].n_dims, w[0].n_dims));
            }
        }
    }
    for r in rows {
        let expect = r.p_single.powi(r.n_dims as i32);
        if r.kind != RowKind::Fsq && r.p_multi != expect {
            out.push(format!("{:?} row {} at sigma {}: p_multi != p_single^N", r.kind, r.levels, r.sigma));
        }
    }
    for a in rows {
        for b in rows {
            let same = a.kind == b.kind && a.levels == b.levels && a.n_dims == b.n_dims && a.step == b.step;
            if same && b.sigma > a.sigma && (b.p_single > a.p_single || b.p_multi > a.p_multi) {
                out.push(format!("{:?} row {}: probability rises from sigma {} to {}", a.kind, a.levels, a.sigma, b.sigma));
            }
        }
    }
    out
}
