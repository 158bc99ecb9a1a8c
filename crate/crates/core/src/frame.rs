//! Wire frames for dual FSQ token streams.
//!
//! Layout, little-endian throughout:
//!
//! | field         | size        | notes                                  |
//! |---------------|-------------|----------------------------------------|
//! | magic         | 4           | `b"SHLF"`                              |
//! | version       | 1           | currently 1                            |
//! | n_dims        | 1           |                                        |
//! | levels        | n_dims      | one `u8` level count per dimension     |
//! | alpha         | 4           | `f32`                                  |
//! | epsilon       | 4           | `f32`                                  |
//! | n_tokens_hi   | 4           | `u32`                                  |
//! | n_tokens_lo   | 4           | `u32`                                  |
//! | seed          | 8           | `u64`                                  |
//! | payload       | see below   | Hi tokens, then Lo tokens              |
//!
//! Each token is packed as the mixed-radix integer
//! `sum_i index_i * prod_{j<i} m_j` (dimension 0 least significant) and
//! written in `ceil(log2(prod m_i))` bits. Bits fill each byte from the least
//! significant end; unused bits of the last byte must be zero. With five
//! 5-level dimensions a token costs 12 bits against an entropy of
//! `log2(3125) ~= 11.61`.

use thiserror::Error;

use crate::fsq::{DualIndices, FsqError, QuantizerConfig, StreamIndices};

pub const FRAME_MAGIC: [u8; 4] = *b"SHLF";
pub const FRAME_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrameError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u8),
    #[error("frame truncated: need {needed} bytes, have {got}")]
    Truncated { needed: usize, got: usize },
    #[error("frame has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("packed token value {value} at token {token} exceeds codebook size {codebook}")]
    IndexOverflow { token: usize, value: u64, codebook: u64 },
    #[error("padding bits after the last token are not zero")]
    NonZeroPadding,
    #[error("index {index} out of range for {levels} levels (dimension {dim})")]
    IndexOutOfRange { dim: usize, index: u32, levels: u32 },
    #[error("token has {got} indices, expected {expected}")]
    TokenWidth { expected: usize, got: usize },
    #[error("level count {0} does not fit the one-byte header field")]
    LevelTooLarge(u32),
    #[error("{0} dimensions do not fit the one-byte header field")]
    TooManyDims(usize),
    #[error("codebook of {0} entries does not fit a 64-bit token")]
    CodebookTooLarge(u128),
    #[error("stream of {0} tokens does not fit the u32 header field")]
    TooManyTokens(usize),
    #[error("header describes an invalid quantizer: {0}")]
    InvalidHeader(#[from] FsqError),
}

/// `ceil(log2(prod levels))`.
pub fn bits_per_token(levels: &[u32]) -> Result<u32, FrameError> {
    let product = codebook(levels)?;
    Ok(64 - (product - 1).leading_zeros())
}

fn codebook(levels: &[u32]) -> Result<u64, FrameError> {
    let mut product: u128 = 1;
    for &m in levels {
        product *= u128::from(m);
        if product > u128::from(u64::MAX) {
            return Err(FrameError::CodebookTooLarge(product));
        }
    }
    Ok(product as u64)
}

/// Mixed-radix packing, dimension 0 least significant.
pub fn pack_token(indices: &[u32], levels: &[u32]) -> Result<u64, FrameError> {
    if indices.len() != levels.len() {
        return Err(FrameError::TokenWidth { expected: levels.len(), got: indices.len() });
    }
    codebook(levels)?;
    let mut value = 0u64;
    let mut place = 1u64;
    for (dim, (&i, &m)) in indices.iter().zip(levels).enumerate() {
        if i >= m {
            return Err(FrameError::IndexOutOfRange { dim, index: i, levels: m });
        }
        value += u64::from(i) * place;
        place = place.wrapping_mul(u64::from(m));
    }
    Ok(value)
}

/// Inverse of [`pack_token`].
pub fn unpack_token(value: u64, levels: &[u32]) -> Result<Vec<u32>, FrameError> {
    let size = codebook(levels)?;
    if value >= size {
        return Err(FrameError::IndexOverflow { token: 0, value, codebook: size });
    }
    let mut rest = value;
    Ok(levels
        .iter()
        .map(|&m| {
            let i = (rest % u64::from(m)) as u32;
            rest /= u64::from(m);
            i
        })
        .collect())
}

/// Fixed header fields.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameHeader {
    pub levels: Vec<u8>,
    pub alpha: f32,
    pub epsilon: f32,
    pub n_tokens_hi: u32,
    pub n_tokens_lo: u32,
    pub seed: u64,
}

impl FrameHeader {
    pub fn encoded_len(&self) -> usize {
        4 + 1 + 1 + self.levels.len() + 4 + 4 + 4 + 4 + 8
    }

    fn level_counts(&self) -> Vec<u32> {
        self.levels.iter().map(|&m| u32::from(m)).collect()
    }

    /// Exact payload size implied by the header.
    pub fn payload_len(&self) -> Result<usize, FrameError> {
        let bits = bits_per_token(&self.level_counts())? as usize;
        let tokens = self.n_tokens_hi as usize + self.n_tokens_lo as usize;
        Ok((tokens * bits).div_ceil(8))
    }
}

/// Output of [`decode_frame`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFrame {
    pub header: FrameHeader,
    pub streams: DualIndices,
    /// Quantizer rebuilt from the header (alpha / epsilon at `f32` precision).
    pub qcfg: QuantizerConfig,
}

impl DecodedFrame {
    pub fn seed(&self) -> u64 {
        self.header.seed
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitWriter {
    fn with_capacity(bytes: usize) -> Self {
        Self { bytes: Vec::with_capacity(bytes), bit: 0 }
    }

    fn put(&mut self, value: u64, width: u32) {
        for k in 0..width {
            if self.bit.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if (value >> k) & 1 == 1 {
                *self.bytes.last_mut().expect("pushed above") |= 1 << (self.bit % 8);
            }
            self.bit += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl BitReader<'_> {
    fn take(&mut self, width: u32) -> u64 {
        let mut v = 0u64;
        for k in 0..width {
            let b = (self.bytes[self.bit / 8] >> (self.bit % 8)) & 1;
            v |= u64::from(b) << k;
            self.bit += 1;
        }
        v
    }
}

/// Serializes both index streams with the quantizer settings and `seed`.
pub fn encode_frame(streams: &DualIndices, qcfg: &QuantizerConfig, seed: u64) -> Result<Vec<u8>, FrameError> {
    let levels = qcfg.levels();
    if levels.len() > usize::from(u8::MAX) {
        return Err(FrameError::TooManyDims(levels.len()));
    }
    let level_bytes = levels.iter().map(|&m| u8::try_from(m).map_err(|_| FrameError::LevelTooLarge(m))).collect::<Result<Vec<u8>, _>>()?;
    let count = |s: &StreamIndices| u32::try_from(s.len()).map_err(|_| FrameError::TooManyTokens(s.len()));
    let header = FrameHeader {
        levels: level_bytes,
        alpha: qcfg.alpha() as f32,
        epsilon: qcfg.epsilon() as f32,
        n_tokens_hi: count(&streams.hi)?,
        n_tokens_lo: count(&streams.lo)?,
        seed,
    };
    let bits = bits_per_token(levels)?;
    let payload_len = header.payload_len()?;
    let mut out = Vec::with_capacity(header.encoded_len() + payload_len);
    out.extend_from_slice(&FRAME_MAGIC);
    out.push(FRAME_VERSION);
    out.push(header.levels.len() as u8);
    out.extend_from_slice(&header.levels);
    out.extend_from_slice(&header.alpha.to_le_bytes());
    out.extend_from_slice(&header.epsilon.to_le_bytes());
    out.extend_from_slice(&header.n_tokens_hi.to_le_bytes());
    out.extend_from_slice(&header.n_tokens_lo.to_le_bytes());
    out.extend_from_slice(&header.seed.to_le_bytes());
    let mut w = BitWriter::with_capacity(payload_len);
    for token in streams.hi.iter().chain(&streams.lo) {
        w.put(pack_token(token, levels)?, bits);
    }
    debug_assert_eq!(w.bytes.len(), payload_len);
    out.extend_from_slice(&w.bytes);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(FrameError::Truncated { needed: end, got: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FrameError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Parses a complete frame. The buffer length must match the header exactly.
pub fn decode_frame(bytes: &[u8]) -> Result<DecodedFrame, FrameError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.array()?;
    if magic != FRAME_MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    let [version] = c.array()?;
    if version != FRAME_VERSION {
        return Err(FrameError::UnsupportedVersion(version));
    }
    let [n_dims] = c.array()?;
    let levels = c.take(usize::from(n_dims))?.to_vec();
    let header = FrameHeader {
        levels,
        alpha: f32::from_le_bytes(c.array()?),
        epsilon: f32::from_le_bytes(c.array()?),
        n_tokens_hi: u32::from_le_bytes(c.array()?),
        n_tokens_lo: u32::from_le_bytes(c.array()?),
        seed: u64::from_le_bytes(c.array()?),
    };
    let level_counts = header.level_counts();
    let qcfg = QuantizerConfig::new(level_counts.clone(), f64::from(header.alpha), f64::from(header.epsilon))?;
    let payload = c.take(header.payload_len()?)?;
    let trailing = bytes.len() - c.pos;
    if trailing != 0 {
        return Err(FrameError::TrailingBytes(trailing));
    }
    let bits = bits_per_token(&level_counts)?;
    let size = codebook(&level_counts)?;
    let mut r = BitReader { bytes: payload, bit: 0 };
    let mut read_stream = |n: u32, first: usize| -> Result<StreamIndices, FrameError> {
        (0..n as usize)
            .map(|t| {
                let value = r.take(bits);
                if value >= size {
                    return Err(FrameError::IndexOverflow { token: first + t, value, codebook: size });
                }
                unpack_token(value, &level_counts)
            })
            .collect()
    };
    let hi = read_stream(header.n_tokens_hi, 0)?;
    let lo = read_stream(header.n_tokens_lo, header.n_tokens_hi as usize)?;
    let used = r.bit;
    if !used.is_multiple_of(8) && payload[used / 8] >> (used % 8) != 0 {
        return Err(FrameError::NonZeroPadding);
    }
    Ok(DecodedFrame { header, streams: DualIndices { hi, lo }, qcfg })
}

/// The reference frame stored in `data/golden_frame.bin`.
pub fn golden_frame_input() -> (DualIndices, QuantizerConfig, u64) {
    let streams = DualIndices {
        hi: vec![vec![0, 0, 0, 0, 0], vec![4, 4, 4, 4, 4], vec![1, 0, 0, 0, 0]],
        lo: vec![vec![0, 1, 0, 0, 0], vec![2, 3, 1, 4, 0]],
    };
    (streams, QuantizerConfig::paper_default(), 7)
}

/// Bytes of the checked-in golden frame.
pub const GOLDEN_FRAME: &[u8] = include_bytes!("../data/golden_frame.bin");
