//! Forward-only dense kernels and seeded weight sets.
//!
//! Everything runs in `f64` with fixed loop order, so outputs are a pure
//! function of inputs. Spatial tensors are `[H, W, D]`; token matrices are
//! `[N, D]`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("weight set has no tensor named {0:?}")]
    Missing(String),
    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("bad weight manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `[n, k] x [k, m] -> [n, m]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    a.expect_rank("matmul", 2)?;
    b.expect_rank("matmul", 2)?;
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let (k2, m) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch { op: "matmul", left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

/// `x W + b` over the last axis of `x`; leading axes are preserved.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    w.expect_rank("linear", 2)?;
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    if x.last_dim() != d_in || b.shape() != [d_out] {
        return Err(TensorError::ShapeMismatch { op: "linear", left: x.shape().to_vec(), right: w.shape().to_vec() });
    }
    let rows = x.rows();
    let flat = Tensor::new(vec![rows, d_in], x.data().to_vec())?;
    let mut y = matmul(&flat, w)?;
    for r in y.data_mut().chunks_exact_mut(d_out.max(1)) {
        for (v, bias) in r.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = d_out;
    y.reshape(shape)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, TensorError> {
    x.expect_rank("softmax_rows", 2)?;
    x.check_finite()?;
    let mut out = x.clone();
    let cols = x.shape()[1];
    if cols == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(cols) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Normalizes each last-axis row to zero mean / unit variance, then applies
/// `scale * x + bias`.
pub fn layernorm(x: &Tensor, scale: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
    let d = x.last_dim();
    if scale.shape() != [d] || bias.shape() != [d] {
        return Err(TensorError::ShapeMismatch { op: "layernorm", left: x.shape().to_vec(), right: scale.shape().to_vec() });
    }
    let mut out = x.clone();
    if d == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(scale.data()).zip(bias.data()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Tanh-approximated GELU, elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let mut out = x.clone();
    for v in out.data_mut() {
        let u = *v;
        *v = 0.5 * u * (1.0 + (C * (u + 0.044715 * u * u * u)).tanh());
    }
    out
}

fn spatial_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
    x.expect_rank(op, 3)?;
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

fn check_divides(op: &'static str, size: usize, by: usize) -> Result<(), TensorError> {
    if by == 0 || !size.is_multiple_of(by) {
        Err(TensorError::NotDivisible { op, size, by })
    } else {
        Ok(())
    }
}

/// Mean over non-overlapping `stride x stride` blocks of an `[H, W, D]` tensor.
pub fn avgpool2d(x: &Tensor, stride: usize) -> Result<Tensor, TensorError> {
    let (h, w, d) = spatial_dims(x, "avgpool2d")?;
    check_divides("avgpool2d", h, stride)?;
    check_divides("avgpool2d", w, stride)?;
    let (oh, ow) = (h / stride, w / stride);
    let mut out = vec![0.0; oh * ow * d];
    let src = x.data();
    for i in 0..h {
        for j in 0..w {
            let o = ((i / stride) * ow + j / stride) * d;
            let s = (i * w + j) * d;
            for c in 0..d {
                out[o + c] += src[s + c];
            }
        }
    }
    let inv = 1.0 / (stride * stride) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![oh, ow, d], out)
}

/// Splits `[H, W, D]` into `[(H/w)(W/w), w*w, D]` windows, row-major over
/// windows and over tokens within a window.
pub fn window_partition(x: &Tensor, window: usize) -> Result<Tensor, TensorError> {
    let (h, w, d) = spatial_dims(x, "window_partition")?;
    check_divides("window_partition", h, window)?;
    check_divides("window_partition", w, window)?;
    let (nh, nw) = (h / window, w / window);
    let mut out = Vec::with_capacity(x.len());
    let src = x.data();
    for wi in 0..nh {
        for wj in 0..nw {
            for i in 0..window {
                for j in 0..window {
                    let s = ((wi * window + i) * w + wj * window + j) * d;
                    out.extend_from_slice(&src[s..s + d]);
                }
            }
        }
    }
    Tensor::new(vec![nh * nw, window * window, d], out)
}

/// Inverse of [`window_partition`].
pub fn window_merge(windows: &Tensor, height: usize, width: usize) -> Result<Tensor, TensorError> {
    windows.expect_rank("window_merge", 3)?;
    let (n, t, d) = (windows.shape()[0], windows.shape()[1], windows.shape()[2]);
    let window = (t as f64).sqrt().round() as usize;
    if window * window != t || window == 0 {
        return Err(TensorError::NotDivisible { op: "window_merge", size: t, by: window.max(1) });
    }
    check_divides("window_merge", height, window)?;
    check_divides("window_merge", width, window)?;
    let nw = width / window;
    if n != (height / window) * nw {
        return Err(TensorError::ShapeMismatch { op: "window_merge", left: windows.shape().to_vec(), right: vec![height, width, d] });
    }
    let mut out = vec![0.0; height * width * d];
    let src = windows.data();
    for k in 0..n {
        let (wi, wj) = (k / nw, k % nw);
        for i in 0..window {
            for j in 0..window {
                let s = (k * t + i * window + j) * d;
                let o = ((wi * window + i) * width + wj * window + j) * d;
                out[o..o + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    Tensor::new(vec![height, width, d], out)
}

/// Splits the last axis of `x` at `at`.
pub fn split_last(x: &Tensor, at: usize) -> Result<(Tensor, Tensor), TensorError> {
    let d = x.last_dim();
    if at > d {
        return Err(TensorError::ShapeMismatch { op: "split_last", left: x.shape().to_vec(), right: vec![at] });
    }
    let rows = x.rows();
    let mut a = Vec::with_capacity(rows * at);
    let mut b = Vec::with_capacity(rows * (d - at));
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        a.extend_from_slice(&row[..at]);
        b.extend_from_slice(&row[at..]);
    }
    let mut sa = x.shape().to_vec();
    let mut sb = x.shape().to_vec();
    *sa.last_mut().expect("rank >= 1") = at;
    *sb.last_mut().expect("rank >= 1") = d - at;
    Ok((Tensor::new(sa, a)?, Tensor::new(sb, b)?))
}

/// Concatenates along the last axis; leading axes must agree.
pub fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let lead_a = &a.shape()[..a.rank() - 1];
    let lead_b = &b.shape()[..b.rank() - 1];
    if lead_a != lead_b {
        return Err(TensorError::ShapeMismatch { op: "concat_last", left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    let (da, db) = (a.last_dim(), b.last_dim());
    let rows: usize = lead_a.iter().product();
    let mut out = Vec::with_capacity(rows * (da + db));
    for r in 0..rows {
        out.extend_from_slice(&a.data()[r * da..(r + 1) * da]);
        out.extend_from_slice(&b.data()[r * db..(r + 1) * db]);
    }
    let mut shape = lead_a.to_vec();
    shape.push(da + db);
    Tensor::new(shape, out)
}

/// How a named parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, fan-in from `shape[0]`.
    Uniform,
    Zeros,
    Ones,
}

/// Named parameter tensors, reproducible from `init_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub init_seed: u64,
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    init_seed: u64,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl WeightSet {
    /// Draws every tensor of `layout` in order from one stream seeded with `seed`.
    pub fn init(layout: &[(String, Vec<usize>, Init)], seed: u64) -> Self {
        let mut stream = rng::stream(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout {
            let t = match init {
                Init::Zeros => Tensor::zeros(shape.clone()),
                Init::Ones => Tensor::filled(shape.clone(), 1.0),
                Init::Uniform => {
                    let fan_in = shape.first().copied().unwrap_or(1).max(1);
                    let limit = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(shape.clone(), |_| stream.random_range(-limit..=limit))
                }
            };
            tensors.insert(name.clone(), t);
        }
        Self { init_seed: seed, tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, WeightError> {
        self.tensors.get(name).ok_or_else(|| WeightError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, WeightError> {
        self.tensors.get_mut(name).ok_or_else(|| WeightError::Missing(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Checks that every `layout` entry exists with the right shape.
    pub fn check_layout(&self, layout: &[(String, Vec<usize>, Init)]) -> Result<(), WeightError> {
        for (name, shape, _) in layout {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(WeightError::Shape { name: name.clone(), expected: shape.clone(), got: t.shape().to_vec() });
            }
        }
        Ok(())
    }

    /// Writes one `.shlt` file per tensor plus `manifest.json` into `dir`.
    /// Values are stored as `f32`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), WeightError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(TensorError::from)?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let file = format!("{name}.shlt");
            t.save(dir.join(&file))?;
            entries.push(ManifestEntry { name: name.clone(), file, shape: t.shape().to_vec() });
        }
        let manifest = Manifest { init_seed: self.init_seed, tensors: entries };
        let json = serde_json::to_vec_pretty(&manifest)?;
        std::fs::write(dir.join(MANIFEST_FILE), json).map_err(TensorError::from)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, WeightError> {
        let dir = dir.as_ref();
        let raw = std::fs::read(dir.join(MANIFEST_FILE)).map_err(TensorError::from)?;
        let manifest: Manifest = serde_json::from_slice(&raw)?;
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let t = Tensor::load(dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(WeightError::Shape { name: e.name, expected: e.shape, got: t.shape().to_vec() });
            }
            tensors.insert(e.name, t);
        }
        Ok(Self { init_seed: manifest.init_seed, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut s = rng::stream(seed);
        Tensor::from_fn(shape, |_| s.random_range(-1.0..1.0))
    }

    fn eye(n: usize) -> Tensor {
        Tensor::from_fn(vec![n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    #[test]
    fn matmul_examples() {
        let a = random(vec![4, 4], 1);
        assert_eq!(matmul(&a, &eye(4)).unwrap(), a);
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
        let (a, b, c) = (random(vec![8, 8], 2), random(vec![8, 8], 3), random(vec![8, 8], 4));
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
        assert!(matches!(matmul(&a, &random(vec![3, 2], 0)), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        for v in softmax_rows(&x).unwrap().data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let a = random(vec![3, 5], 9);
        let shifted = Tensor::from_fn(vec![3, 5], |i| a.data()[i] + 123.4);
        let (sa, sb) = (softmax_rows(&a).unwrap(), softmax_rows(&shifted).unwrap());
        for (x, y) in sa.data().iter().zip(sb.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        let big = softmax_rows(&Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap()).unwrap();
        assert_eq!(big.data()[0], 1.0);
        assert!(big.data()[1] >= 0.0 && big.data()[1] < 1e-300);
    }

    #[test]
    fn layernorm_examples() {
        let ones = Tensor::filled(vec![6], 1.0);
        let zeros = Tensor::zeros(vec![6]);
        let c = Tensor::filled(vec![2, 6], 3.5);
        assert!(layernorm(&c, &ones, &zeros, 1e-5).unwrap().data().iter().all(|&v| v == 0.0));
        let x = random(vec![10, 6], 5);
        let y = layernorm(&x, &ones, &zeros, 0.0).unwrap();
        for r in 0..10 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
        }
        let bias = Tensor::from_fn(vec![6], |i| i as f64);
        let y = layernorm(&x, &zeros, &bias, 1e-5).unwrap();
        for r in 0..10 {
            assert_eq!(y.row(r), bias.data());
        }
        assert!(layernorm(&x, &Tensor::zeros(vec![5]), &bias, 1e-5).is_err());
    }

    #[test]
    fn avgpool_examples() {
        let c = Tensor::filled(vec![4, 6, 2], 1.25);
        let p = avgpool2d(&c, 2).unwrap();
        assert_eq!(p.shape(), &[2, 3, 2]);
        assert!(p.data().iter().all(|&v| v == 1.25));
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avgpool2d(&x, 2).unwrap().data(), &[2.5]);
        let r = random(vec![8, 8, 3], 6);
        assert_abs_diff_eq!(avgpool2d(&r, 4).unwrap().mean(), r.mean(), epsilon = 1e-12);
        assert!(matches!(avgpool2d(&r, 3), Err(TensorError::NotDivisible { .. })));
    }

    #[test]
    fn window_examples() {
        let x = random(vec![4, 4, 3], 7);
        let p = window_partition(&x, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4, 3]);
        // Window 1 is the top-right block; its first token is grid cell (0, 2).
        assert_eq!(&p.data()[12..15], &x.data()[6..9]);
        assert!(window_partition(&x, 3).is_err());

        // Swapping windows 0 and 3 swaps the top-left and bottom-right blocks.
        let mut swapped = p.clone();
        let t = 4 * 3;
        let (w0, w3) = (p.data()[..t].to_vec(), p.data()[3 * t..4 * t].to_vec());
        swapped.data_mut()[..t].copy_from_slice(&w3);
        swapped.data_mut()[3 * t..].copy_from_slice(&w0);
        let merged = window_merge(&swapped, 4, 4).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let a = ((i * 4) + j) * 3;
                let b = (((i + 2) * 4) + j + 2) * 3;
                assert_eq!(&merged.data()[a..a + 3], &x.data()[b..b + 3]);
                assert_eq!(&merged.data()[b..b + 3], &x.data()[a..a + 3]);
            }
        }
    }

    #[test]
    fn split_concat_roundtrip() {
        let x = random(vec![3, 3, 5], 8);
        let (a, b) = split_last(&x, 2).unwrap();
        assert_eq!(a.shape(), &[3, 3, 2]);
        assert_eq!(b.shape(), &[3, 3, 3]);
        assert_eq!(concat_last(&a, &b).unwrap(), x);
        let (e, f) = split_last(&x, 0).unwrap();
        assert_eq!(e.shape(), &[3, 3, 0]);
        assert_eq!(concat_last(&e, &f).unwrap(), x);
    }

    #[test]
    fn linear_keeps_leading_axes() {
        let x = random(vec![2, 3, 4], 10);
        let w = random(vec![4, 5], 11);
        let b = Tensor::filled(vec![5], 0.5);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[2, 3, 5]);
        let empty_in = linear(&Tensor::zeros(vec![7, 0]), &Tensor::zeros(vec![0, 3]), &b);
        assert!(empty_in.is_err());
        let y0 = linear(&Tensor::zeros(vec![7, 0]), &Tensor::zeros(vec![0, 5]), &b).unwrap();
        assert!(y0.data().iter().all(|&v| v == 0.5));
    }

    fn layout() -> Vec<(String, Vec<usize>, Init)> {
        vec![("a.w".into(), vec![256, 256], Init::Uniform), ("a.b".into(), vec![256], Init::Zeros), ("ln.g".into(), vec![256], Init::Ones)]
    }

    #[test]
    fn init_is_seeded() {
        let a = WeightSet::init(&layout(), 1);
        assert_eq!(a, WeightSet::init(&layout(), 1));
        assert_ne!(a.get("a.w").unwrap(), WeightSet::init(&layout(), 2).get("a.w").unwrap());
        let w = a.get("a.w").unwrap();
        let limit = 1.0 / 16.0;
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        // Uniform(-l, l) has sd l / sqrt(3).
        let sd = limit / 3f64.sqrt();
        assert!(w.mean().abs() <= 4.0 * sd / (w.len() as f64).sqrt());
        assert!(a.get("a.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(a.get("nope"), Err(WeightError::Missing(_))));
        a.check_layout(&layout()).unwrap();
    }

    #[test]
    fn weights_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = WeightSet::init(&layout(), 3);
        a.save(dir.path()).unwrap();
        let b = WeightSet::load(dir.path()).unwrap();
        assert_eq!(b.init_seed, 3);
        let names: Vec<&str> = b.names().collect();
        assert_eq!(names, vec!["a.b", "a.w", "ln.g"]);
        for n in names {
            for (x, y) in a.get(n).unwrap().data().iter().zip(b.get(n).unwrap().data()) {
                assert_eq!(*y, f64::from(*x as f32));
            }
        }
    }

    proptest! {
        #[test]
        fn merge_inverts_partition(hw in 1usize..5, w in 1usize..4, d in 1usize..4, seed in any::<u64>()) {
            let x = random(vec![hw * w, (hw + 1) * w, d], seed);
            let p = window_partition(&x, w).unwrap();
            prop_assert_eq!(p.shape(), &[hw * (hw + 1), w * w, d]);
            prop_assert_eq!(window_merge(&p, hw * w, (hw + 1) * w).unwrap(), x);
        }

        #[test]
        fn softmax_rows_are_distributions(seed in any::<u64>(), scale in 0.1f64..500.0) {
            let x = Tensor::from_fn(vec![4, 7], {
                let mut s = rng::stream(seed);
                move |_| scale * s.random_range(-1.0..1.0)
            });
            let y = softmax_rows(&x).unwrap();
            for r in 0..4 {
                let row = y.row(r);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}
