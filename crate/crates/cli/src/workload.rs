//! Synthetic pipeline workload shared by the sweep commands.
//!
//! A workload is a set of seeded standard-normal images pushed once through
//! the encoder. Grid points then reuse the encoded streams and only redraw
//! channel noise, so every point sees the same transmitted codewords.

use anyhow::Result;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use sehilo::channel::{ChannelConfig, NoiseMode};
use sehilo::fsq::{DualIndices, QuantizerConfig, StreamIndices};
use sehilo::hilo::{self, DualStream};
use sehilo::metrics;
use sehilo::nn::WeightSet;
use sehilo::rng;
use sehilo::theory;
use sehilo::{AwgnChannel, HiLoConfig, Tensor};

/// Mixed into the run seed before deriving per-image seeds.
const IMAGE_TAG: u64 = 0x494d_4147_4553_0000;

pub struct Workload {
    pub model: HiLoConfig,
    pub qcfg: QuantizerConfig,
    pub weights: WeightSet,
    pub encoded: Vec<DualStream>,
    pub sent: Vec<DualIndices>,
    /// Noiseless reconstructions, the reference for feature distortion.
    pub clean: Vec<Tensor>,
}

/// Seeded standard-normal image `[h, w, c]`.
pub fn synthetic_image(shape: [usize; 3], seed: u64) -> Tensor {
    let mut s = rng::stream(seed);
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(&mut s))
}

impl Workload {
    /// Encodes `n_images` synthetic images of `size` with weights seeded by `seed`.
    pub fn build(model: &HiLoConfig, qcfg: &QuantizerConfig, size: [usize; 2], n_images: usize, seed: u64) -> Result<Self> {
        let weights = hilo::init_weights(model, seed)?;
        let mut encoded = Vec::with_capacity(n_images);
        let mut sent = Vec::with_capacity(n_images);
        let mut clean = Vec::with_capacity(n_images);
        for i in 0..n_images {
            let image = synthetic_image([size[0], size[1], model.channels], rng::derive_seed(seed ^ IMAGE_TAG, i as u64));
            let e = hilo::encode(&image, &weights, model, qcfg)?;
            sent.push(e.indices(qcfg)?);
            clean.push(hilo::decode(&e, &weights, model, qcfg)?);
            encoded.push(e);
        }
        Ok(Self { model: model.clone(), qcfg: qcfg.clone(), weights, encoded, sent, clean })
    }

    pub fn tokens_per_stream(&self) -> usize {
        self.sent.iter().map(|s| s.hi.len()).sum()
    }
}

/// Success counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Tally {
    pub correct: u64,
    pub total: u64,
}

impl Tally {
    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += u64::from(ok);
    }

    /// `(rate, binomial stderr)`; a rate of 1 for an empty tally.
    pub fn rate(&self) -> (f64, f64) {
        if self.total == 0 {
            return (1.0, 0.0);
        }
        theory::binomial(self.correct, self.total)
    }
}

/// Aggregate of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointStats {
    pub hi: Tally,
    pub lo: Tally,
    /// Tokens whose codeword is interior in every dimension, both streams.
    pub interior: Tally,
    /// Expected interior recoveries under the per-call noise level.
    pub interior_expected: f64,
    pub sigma_hi: f64,
    pub sigma_lo: f64,
    /// Mean over tokens of the joint Hi-and-Lo recovery frequency.
    pub joint: f64,
    /// Mean over tokens of the product of Hi and Lo recovery frequencies.
    pub product: f64,
    /// Standard error of `joint - product` across tokens.
    pub product_gap_stderr: f64,
    /// Mean PSNR of the first-draw reconstruction against the clean one.
    pub psnr_feature: f64,
    /// Mean squared error of the first-draw reconstruction against the clean one.
    pub feature_mse: f64,
}

impl PointStats {
    /// Theory-predicted interior recovery rate.
    pub fn interior_theory(&self) -> f64 {
        if self.interior.total == 0 {
            1.0
        } else {
            self.interior_expected / self.interior.total as f64
        }
    }

    /// Standard error for comparing the interior rate with its prediction:
    /// the larger of the observed and the predicted binomial error.
    pub fn interior_test_stderr(&self) -> f64 {
        let n = self.interior.total.max(1) as f64;
        let p = self.interior_theory();
        self.interior.rate().1.max((p * (1.0 - p) / n).sqrt())
    }
}

fn recovered(t: &Tensor, q: &QuantizerConfig) -> StreamIndices {
    let mut out = Vec::with_capacity(t.rows());
    for r in 0..t.rows() {
        let mut idx = vec![0; q.dims()];
        sehilo::fsq::requantize_indices(t.row(r), q, &mut idx);
        out.push(idx);
    }
    out
}

fn all_interior(token: &[u32], q: &QuantizerConfig) -> bool {
    token.iter().enumerate().all(|(d, &i)| q.is_interior(d, i))
}

/// Runs `draws` channel uses per image. Image `i` uses the channel pair
/// derived from `seed ^ i`.
pub fn run_point(w: &Workload, mode_hi: NoiseMode, mode_lo: NoiseMode, seed: u64, draws: usize) -> Result<PointStats> {
    let q = &w.qcfg;
    let mut st = PointStats {
        hi: Tally::default(),
        lo: Tally::default(),
        interior: Tally::default(),
        interior_expected: 0.0,
        sigma_hi: 0.0,
        sigma_lo: 0.0,
        joint: 0.0,
        product: 0.0,
        product_gap_stderr: 0.0,
        psnr_feature: 0.0,
        feature_mse: 0.0,
    };
    let mut gaps = Vec::new();
    let mut calls = 0usize;
    for (i, (enc, sent)) in w.encoded.iter().zip(&w.sent).enumerate() {
        let (s_hi, s_lo) = rng::stream_pair_seeds(rng::derive_seed(seed, i as u64));
        let mut ch_hi = AwgnChannel::new(ChannelConfig::new(mode_hi, s_hi)?);
        let mut ch_lo = AwgnChannel::new(ChannelConfig::new(mode_lo, s_lo)?);
        let n = sent.hi.len();
        let mut per_token = vec![[0u32; 3]; n];
        for d in 0..draws {
            let tx_hi = ch_hi.transmit(&enc.hi)?;
            let tx_lo = ch_lo.transmit(&enc.lo)?;
            calls += 1;
            st.sigma_hi += tx_hi.sigma;
            st.sigma_lo += tx_lo.sigma;
            let got_hi = recovered(&tx_hi.output, q);
            let got_lo = recovered(&tx_lo.output, q);
            for (stream, sigma, sent_s, got) in [(0, tx_hi.sigma, &sent.hi, &got_hi), (1, tx_lo.sigma, &sent.lo, &got_lo)] {
                let p = theory::predicted_recovery(q, sigma)?;
                for (t, (a, b)) in sent_s.iter().zip(got).enumerate() {
                    let ok = a == b;
                    if stream == 0 {
                        st.hi.add(ok);
                    } else {
                        st.lo.add(ok);
                    }
                    per_token[t][stream] += u32::from(ok);
                    if all_interior(a, q) {
                        st.interior.add(ok);
                        st.interior_expected += p;
                    }
                }
            }
            for t in 0..n {
                per_token[t][2] += u32::from(sent.hi[t] == got_hi[t] && sent.lo[t] == got_lo[t]);
            }
            if d == 0 {
                let rx = DualStream { hi: tx_hi.output, lo: tx_lo.output, grid: enc.grid };
                let recon = hilo::decode(&rx, &w.weights, &w.model, q)?;
                let clean = &w.clean[i];
                let (lo, hi) = clean.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                st.psnr_feature += metrics::psnr(&recon, clean, (hi - lo).max(f64::MIN_POSITIVE))?;
                st.feature_mse += metrics::mse(&recon, clean)?;
            }
        }
        let dn = draws as f64;
        for c in &per_token {
            let (h, l, b) = (f64::from(c[0]) / dn, f64::from(c[1]) / dn, f64::from(c[2]) / dn);
            st.joint += b;
            st.product += h * l;
            gaps.push(b - h * l);
        }
    }
    let n_img = w.encoded.len() as f64;
    st.psnr_feature /= n_img;
    st.feature_mse /= n_img;
    st.sigma_hi /= calls as f64;
    st.sigma_lo /= calls as f64;
    let k = gaps.len() as f64;
    st.joint /= k;
    st.product /= k;
    let mean = gaps.iter().sum::<f64>() / k;
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
    st.product_gap_stderr = (var / k).sqrt();
    Ok(st)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Workload {
        let model = HiLoConfig { n_blocks: 2, ..HiLoConfig::desk() };
        Workload::build(&model, &QuantizerConfig::paper_default(), [16, 16], 2, 3).unwrap()
    }

    #[test]
    fn noiseless_point_is_perfect() {
        let w = tiny();
        assert_eq!(w.tokens_per_stream(), 32);
        let st = run_point(&w, NoiseMode::Noiseless, NoiseMode::Noiseless, 1, 3).unwrap();
        assert_eq!(st.hi, Tally { correct: 96, total: 96 });
        assert_eq!(st.lo, Tally { correct: 96, total: 96 });
        assert_eq!((st.joint, st.product, st.product_gap_stderr), (1.0, 1.0, 0.0));
        assert_eq!(st.psnr_feature, metrics::PSNR_CAP_DB);
        assert_eq!(st.feature_mse, 0.0);
        assert_eq!(st.interior.correct, st.interior.total);
    }

    #[test]
    fn points_are_deterministic() {
        let w = tiny();
        let a = run_point(&w, NoiseMode::SnrDb(0.0), NoiseMode::FixedSigma(1.0), 9, 4).unwrap();
        let b = run_point(&w, NoiseMode::SnrDb(0.0), NoiseMode::FixedSigma(1.0), 9, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sigma_lo, 1.0);
        assert!(a.hi.correct < a.hi.total);
    }
}
