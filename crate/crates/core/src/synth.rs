//! Synthetic Q/K/V generation matching the distributional assumptions the
//! pipeline is evaluated under, plus the tensor file format.
//!
//! Tokens are i.i.d. Gaussian per channel. Channel-wise outliers are
//! injected as large channel *means* (not variances): mean subtraction is
//! exactly the remedy the smoothing transforms apply, so zero-mean
//! outliers would be unremovable by design. V can carry an optional
//! uniform per-channel bias.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Channel-wise outlier injection: `channels` designated channels get
/// their mean boosted to roughly ±multiplier. Q and K draw independent
/// channel sets; K outliers are typically milder than Q's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub channels: usize,
    pub q_multiplier: f64,
    pub k_multiplier: f64,
}

impl Default for OutlierSpec {
    fn default() -> Self {
        Self { channels: 0, q_multiplier: 20.0, k_multiplier: 10.0 }
    }
}

/// Generation spec: token counts, the per-channel Gaussian token model,
/// outlier injection, and the optional V channel bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub n_tokens: usize,
    pub head_dim: usize,
    /// Master seed; batch runs overwrite this per trial.
    #[serde(default)]
    pub seed: u64,
    /// Uniform range the per-channel means are drawn from.
    #[serde(default = "GenSpec::default_mean_range")]
    pub channel_mean: (f64, f64),
    /// Uniform range the per-channel standard deviations are drawn from.
    #[serde(default = "GenSpec::default_std_range")]
    pub channel_std: (f64, f64),
    #[serde(default)]
    pub outliers: OutlierSpec,
    /// Per-channel bias range for V, e.g. (8.0, 9.0).
    #[serde(default)]
    pub v_bias: Option<(f64, f64)>,
}

impl GenSpec {
    fn default_mean_range() -> (f64, f64) {
        (0.0, 0.0)
    }

    fn default_std_range() -> (f64, f64) {
        (1.0, 1.0)
    }

    /// Plain unit-Gaussian tokens, no outliers, no bias.
    pub fn gaussian(n_tokens: usize, head_dim: usize, seed: u64) -> Self {
        Self {
            n_tokens,
            head_dim,
            seed,
            channel_mean: Self::default_mean_range(),
            channel_std: Self::default_std_range(),
            outliers: OutlierSpec { channels: 0, ..OutlierSpec::default() },
            v_bias: None,
        }
    }

    /// Default ablation inputs: one outlier channel per eight, Q outliers
    /// stronger than K's.
    pub fn with_outliers(n_tokens: usize, head_dim: usize, seed: u64) -> Self {
        Self {
            n_tokens,
            head_dim,
            seed,
            outliers: OutlierSpec {
                channels: (head_dim / 8).max(1),
                q_multiplier: 20.0,
                k_multiplier: 10.0,
            },
            ..Self::gaussian(n_tokens, head_dim, seed)
        }
    }

    /// Same as [`Self::with_outliers`] plus a positive V channel bias.
    pub fn with_outliers_and_v_bias(n_tokens: usize, head_dim: usize, seed: u64) -> Self {
        Self {
            v_bias: Some((8.0, 9.0)),
            ..Self::with_outliers(n_tokens, head_dim, seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 || self.head_dim == 0 {
            return Err(Error::Config(format!(
                "n_tokens and head_dim must be >= 1, got {}x{}",
                self.n_tokens, self.head_dim
            )));
        }
        if self.outliers.q_multiplier < 1.0 || self.outliers.k_multiplier < 1.0 {
            return Err(Error::Config("outlier multiplier must be >= 1".into()));
        }
        if self.outliers.channels > self.head_dim {
            return Err(Error::Config(format!(
                "{} outlier channels exceed head_dim {}",
                self.outliers.channels, self.head_dim
            )));
        }
        Ok(())
    }
}

// Distinct ChaCha streams per output so Q, K, V draws never interleave.
const STREAM_Q: u64 = 0;
const STREAM_K: u64 = 1;
const STREAM_V: u64 = 2;
const STREAM_META: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-channel means with outlier channels boosted to ±multiplier with a
/// small magnitude jitter.
fn channel_means(spec: &GenSpec, rng: &mut ChaCha8Rng, multiplier: f64) -> Vec<f64> {
    let (lo, hi) = spec.channel_mean;
    let mut means: Vec<f64> = (0..spec.head_dim)
        .map(|_| if lo == hi { lo } else { rng.random_range(lo..hi) })
        .collect();
    let outlier_channels =
        rand::seq::index::sample(rng, spec.head_dim, spec.outliers.channels).into_vec();
    for c in outlier_channels {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let jitter = rng.random_range(1.0..1.25);
        means[c] = sign * multiplier * jitter;
    }
    means
}

fn channel_stds(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (lo, hi) = spec.channel_std;
    (0..spec.head_dim)
        .map(|_| if lo == hi { lo } else { rng.random_range(lo..hi) })
        .collect()
}

fn sample_matrix(spec: &GenSpec, rng: &mut ChaCha8Rng, means: &[f64], stds: &[f64]) -> Tensor {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(spec.n_tokens, spec.head_dim, |_, j| {
        means[j] + stds[j] * unit.sample(rng)
    })
}

/// Deterministic Q/K/V generation from the spec and its seed.
pub fn gen_qkv(spec: &GenSpec) -> Result<(Tensor, Tensor, Tensor)> {
    spec.validate()?;
    let mut meta = stream_rng(spec.seed, STREAM_META);
    let q_means = channel_means(spec, &mut meta, spec.outliers.q_multiplier);
    let k_means = channel_means(spec, &mut meta, spec.outliers.k_multiplier);
    let stds = channel_stds(spec, &mut meta);
    let v_bias: Vec<f64> = match spec.v_bias {
        Some((lo, hi)) => (0..spec.head_dim)
            .map(|_| if lo == hi { lo } else { meta.random_range(lo..hi) })
            .collect(),
        None => vec![0.0; spec.head_dim],
    };

    let q = sample_matrix(spec, &mut stream_rng(spec.seed, STREAM_Q), &q_means, &stds);
    let k = sample_matrix(spec, &mut stream_rng(spec.seed, STREAM_K), &k_means, &stds);
    let v = sample_matrix(spec, &mut stream_rng(spec.seed, STREAM_V), &v_bias, &stds);
    Ok((q, k, v))
}

// ---------------------------------------------------------------------
// Tensor file format: little-endian, magic "QATN", u32 version, u8 dtype
// code (0 = f64, 1 = f32), u32 rank, u64 dims[rank], then raw values in
// row-major order. Round-trips are bit-exact.
// ---------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"QATN";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + 4 + 1 + 4 + 16 + t.as_slice().len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(DTYPE_F64);
    buf.extend_from_slice(&2u32.to_le_bytes());
    buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for v in t.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::TruncatedFile
        } else {
            Error::Io(e)
        }
    })
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    read_exact(&mut file, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    read_exact(&mut file, &mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut u8buf = [0u8; 1];
    read_exact(&mut file, &mut u8buf)?;
    let dtype = u8buf[0];
    if dtype != DTYPE_F64 && dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    read_exact(&mut file, &mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf);
    if rank != 2 {
        return Err(Error::Config(format!("expected rank-2 tensor, got rank {rank}")));
    }
    let mut u64buf = [0u8; 8];
    read_exact(&mut file, &mut u64buf)?;
    let rows = u64::from_le_bytes(u64buf);
    read_exact(&mut file, &mut u64buf)?;
    let cols = u64::from_le_bytes(u64buf);
    let count = rows
        .checked_mul(cols)
        .filter(|&c| c <= (isize::MAX as u64) / 8)
        .ok_or(Error::DimensionOverflow)? as usize;
    let rows = usize::try_from(rows).map_err(|_| Error::DimensionOverflow)?;
    let cols = usize::try_from(cols).map_err(|_| Error::DimensionOverflow)?;
    let mut data = Vec::with_capacity(count);
    if dtype == DTYPE_F64 {
        let mut buf = [0u8; 8];
        for _ in 0..count {
            read_exact(&mut file, &mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
    } else {
        let mut buf = [0u8; 4];
        for _ in 0..count {
            read_exact(&mut file, &mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
    }
    Tensor::from_data(rows, cols, data)
}
