//! Scale computation, code generation, and dequantization at every
//! quantization granularity, including the per-thread granularity derived
//! from the tensor-core mma output layout.
//!
//! A quantization group is a set of tokens (rows) — or channels (columns)
//! for [`Granularity::PerChannel`] — that share one positive scale. Codes
//! are stored widened into `f64`.

use crate::error::{Error, Result};
use crate::formats::{cast_fp8, round_to_int, Fp8Variant, LowPrecisionFormat};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Floor applied to a group's max before dividing by the format's max
/// code, so all-zero groups still get a positive scale.
pub const ZERO_GROUP_FLOOR: f64 = 1e-30;

/// Whether a per-thread grouping follows the query-block or key-block
/// layout of the mma instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Query,
    Key,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    /// One scale for the whole tensor.
    PerTensor,
    /// One scale per token (row).
    PerToken,
    /// One scale per channel (column); used for V.
    PerChannel,
    /// One scale per block of `tokens` consecutive tokens.
    PerBlock { tokens: usize },
    /// One scale per mma-thread group: 8 groups per warp on the query
    /// side (8·c_w per block of b_q tokens), 4 groups per key block.
    PerThread {
        b_q: usize,
        b_kv: usize,
        c_w: usize,
        side: Side,
    },
}

impl Granularity {
    fn validate(&self) -> Result<()> {
        match *self {
            Granularity::PerBlock { tokens } if tokens == 0 => {
                Err(Error::Config("per-block granularity needs tokens > 0".into()))
            }
            Granularity::PerThread { b_q, b_kv, c_w, side } => {
                validate_per_thread(b_q, b_kv, c_w, side)
            }
            _ => Ok(()),
        }
    }
}

fn validate_per_thread(b_q: usize, b_kv: usize, c_w: usize, side: Side) -> Result<()> {
    match side {
        Side::Query => {
            if c_w == 0 || b_q == 0 || b_q % c_w != 0 || (b_q / c_w) % 8 != 0 {
                return Err(Error::Config(format!(
                    "per-thread query grouping needs b_q divisible by c_w and \
                     a warp tile divisible by 8, got b_q={b_q}, c_w={c_w}"
                )));
            }
        }
        Side::Key => {
            if b_kv == 0 || b_kv % 8 != 0 {
                return Err(Error::Config(format!(
                    "per-thread key grouping needs b_kv divisible by 8, got b_kv={b_kv}"
                )));
            }
        }
    }
    Ok(())
}

/// Group id of token `n` under per-thread quantization.
///
/// Query side: warp `w = (n mod b_q) / (b_q/c_w)` owns a contiguous warp
/// tile; within the tile, token offsets that agree mod 8 share a group,
/// giving 8 groups per warp. Key side: within a block, token offsets that
/// agree in `(t mod 8) / 2` share a group, giving 4 groups per block.
pub fn per_thread_group(
    n: usize,
    side: Side,
    b_q: usize,
    b_kv: usize,
    c_w: usize,
) -> Result<usize> {
    validate_per_thread(b_q, b_kv, c_w, side)?;
    Ok(match side {
        Side::Query => {
            let block = n / b_q;
            let t = n % b_q;
            let warp_tile = b_q / c_w;
            let warp = t / warp_tile;
            let offset = t % warp_tile;
            block * 8 * c_w + warp * 8 + offset % 8
        }
        Side::Key => {
            let block = n / b_kv;
            let t = n % b_kv;
            block * 4 + (t % 8) / 2
        }
    })
}

fn per_thread_group_count(tokens: usize, b_q: usize, b_kv: usize, c_w: usize, side: Side) -> usize {
    match side {
        Side::Query => tokens.div_ceil(b_q) * 8 * c_w,
        Side::Key => tokens.div_ceil(b_kv) * 4,
    }
}

/// Map every token (or channel, for per-channel) to its group id.
/// Returns the map and the total group count.
pub fn group_map(tokens: usize, channels: usize, g: &Granularity) -> Result<(Vec<usize>, usize)> {
    g.validate()?;
    Ok(match *g {
        Granularity::PerTensor => (vec![0; tokens], 1),
        Granularity::PerToken => ((0..tokens).collect(), tokens),
        Granularity::PerChannel => ((0..channels).collect(), channels),
        Granularity::PerBlock { tokens: bs } => {
            ((0..tokens).map(|n| n / bs).collect(), tokens.div_ceil(bs))
        }
        Granularity::PerThread { b_q, b_kv, c_w, side } => {
            let map = (0..tokens)
                .map(|n| per_thread_group(n, side, b_q, b_kv, c_w))
                .collect::<Result<Vec<_>>>()?;
            (map, per_thread_group_count(tokens, b_q, b_kv, c_w, side))
        }
    })
}

fn scale_denominator(format: LowPrecisionFormat) -> Result<f64> {
    match format {
        LowPrecisionFormat::Int4 => Ok(7.0),
        LowPrecisionFormat::Int8 => Ok(127.0),
        LowPrecisionFormat::Fp8E4m3 | LowPrecisionFormat::Fp8E5m2 => Ok(448.0),
        other => Err(Error::Config(format!(
            "no quantizer for format {other:?}"
        ))),
    }
}

/// Per-group scales: max |x| over the group divided by the format's max
/// code, floored so all-zero groups stay positive.
pub fn compute_scales(
    x: &Tensor,
    g: &Granularity,
    format: LowPrecisionFormat,
) -> Result<Vec<f64>> {
    if !x.all_finite() {
        return Err(Error::NonFiniteInput(f64::NAN));
    }
    let denom = scale_denominator(format)?;
    let (map, count) = group_map(x.rows(), x.cols(), g)?;
    let mut maxes = vec![0.0f64; count];
    if matches!(g, Granularity::PerChannel) {
        for i in 0..x.rows() {
            for (j, &v) in x.row(i).iter().enumerate() {
                let m = &mut maxes[map[j]];
                *m = m.max(v.abs());
            }
        }
    } else {
        for i in 0..x.rows() {
            let m = &mut maxes[map[i]];
            for &v in x.row(i) {
                *m = m.max(v.abs());
            }
        }
    }
    Ok(maxes
        .into_iter()
        .map(|m| m.max(ZERO_GROUP_FLOOR) / denom)
        .collect())
}

/// Low-precision codes plus the scale array that maps them back.
#[derive(Debug, Clone)]
pub struct QuantizedTensor {
    /// Codes widened to f64 (integers for INT formats, exact FP8 values
    /// for FP8 formats).
    pub codes: Tensor,
    /// One scale per group, strictly positive.
    pub scales: Vec<f64>,
    pub granularity: Granularity,
    /// Token index -> group id (channel index -> group id for
    /// per-channel).
    pub group_of: Vec<usize>,
    pub format: LowPrecisionFormat,
}

impl QuantizedTensor {
    #[inline]
    pub fn scale_of_token(&self, token: usize) -> f64 {
        self.scales[self.group_of[token]]
    }

    #[inline]
    pub fn scale_of_channel(&self, channel: usize) -> f64 {
        self.scales[self.group_of[channel]]
    }
}

/// Quantize `x` at the given granularity and format.
pub fn quantize(
    x: &Tensor,
    g: Granularity,
    format: LowPrecisionFormat,
) -> Result<QuantizedTensor> {
    let scales = compute_scales(x, &g, format)?;
    let (map, _) = group_map(x.rows(), x.cols(), &g)?;
    let per_channel = matches!(g, Granularity::PerChannel);
    let mut codes = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let src = x.row(i);
        let dst = codes.row_mut(i);
        for j in 0..src.len() {
            let scale = scales[map[if per_channel { j } else { i }]];
            let scaled = src[j] / scale;
            dst[j] = match format {
                LowPrecisionFormat::Int4 => round_to_int(scaled, 7)? as f64,
                LowPrecisionFormat::Int8 => round_to_int(scaled, 127)? as f64,
                LowPrecisionFormat::Fp8E4m3 => cast_fp8(scaled, Fp8Variant::E4M3)?,
                LowPrecisionFormat::Fp8E5m2 => cast_fp8(scaled, Fp8Variant::E5M2)?,
                other => return Err(Error::Config(format!("no quantizer for format {other:?}"))),
            };
        }
    }
    Ok(QuantizedTensor {
        codes,
        scales,
        granularity: g,
        group_of: map,
        format,
    })
}

/// Element-wise scaling of codes back to real values.
pub fn dequantize(qt: &QuantizedTensor) -> Tensor {
    let per_channel = matches!(qt.granularity, Granularity::PerChannel);
    let mut out = qt.codes.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        if per_channel {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= qt.scales[qt.group_of[j]];
            }
        } else {
            let s = qt.scales[qt.group_of[i]];
            for v in row.iter_mut() {
                *v *= s;
            }
        }
    }
    out
}

/// Quantize an unnormalized softmax block to FP8 E4M3 with the static
/// scale 1/448: codes are `cast(448·p)`, valid because p lies in [0, 1].
pub fn quantize_p_static(p: &Tensor) -> Result<QuantizedTensor> {
    const TOL: f64 = 1e-6;
    let mut codes = Tensor::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let src = p.row(i);
        let dst = codes.row_mut(i);
        for j in 0..src.len() {
            let v = src[j];
            if !(-TOL..=1.0 + TOL).contains(&v) {
                return Err(Error::UnnormalizedProbability(v));
            }
            dst[j] = cast_fp8(448.0 * v, Fp8Variant::E4M3)?;
        }
    }
    Ok(QuantizedTensor {
        codes,
        scales: vec![1.0 / 448.0],
        granularity: Granularity::PerTensor,
        group_of: vec![0; p.rows()],
        format: LowPrecisionFormat::Fp8E4m3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const DEFAULT_BQ: usize = 128;
    const DEFAULT_BKV: usize = 64;
    const DEFAULT_CW: usize = 4;

    fn pt(side: Side) -> Granularity {
        Granularity::PerThread {
            b_q: DEFAULT_BQ,
            b_kv: DEFAULT_BKV,
            c_w: DEFAULT_CW,
            side,
        }
    }

    #[test]
    fn per_thread_query_groups_match_mma_layout() {
        let g = |n| per_thread_group(n, Side::Query, 128, 64, 4).unwrap();
        assert_eq!(g(0), 0);
        for &n in &[0, 8, 16, 24] {
            assert_eq!(g(n), 0, "token {n}");
        }
        // Block 1, warp 0, offset 2.
        assert_eq!(g(130), 34);
        // First token of each warp starts a new run of 8 groups.
        assert_eq!(g(32), 8);
        assert_eq!(g(96), 24);
    }

    #[test]
    fn per_thread_key_groups_pair_tokens() {
        let g = |n| per_thread_group(n, Side::Key, 128, 64, 4).unwrap();
        assert_eq!(g(9), 0);
        let group0: Vec<usize> = (0..64).filter(|&n| g(n) == 0).collect();
        let expected: Vec<usize> = (0..8).flat_map(|k| [8 * k, 8 * k + 1]).collect();
        assert_eq!(group0, expected);
        assert_eq!(g(2), 1);
        assert_eq!(g(7), 3);
        assert_eq!(g(64), 4); // next block
    }

    #[test]
    fn per_thread_group_counts() {
        let (_, q_groups) = group_map(128, 64, &pt(Side::Query)).unwrap();
        assert_eq!(q_groups, 32);
        let (_, k_groups) = group_map(64, 64, &pt(Side::Key)).unwrap();
        assert_eq!(k_groups, 4);
    }

    #[test]
    fn per_thread_rejects_bad_divisibility() {
        assert!(per_thread_group(0, Side::Query, 100, 64, 4).is_err());
        assert!(per_thread_group(0, Side::Query, 128, 64, 3).is_err());
        assert!(per_thread_group(0, Side::Key, 128, 60, 4).is_err());
    }

    #[test]
    fn compute_scales_examples() {
        let x = Tensor::from_rows(&[&[7.0, -7.0], &[3.0, 1.0]]);
        let s = compute_scales(&x, &Granularity::PerTensor, LowPrecisionFormat::Int4).unwrap();
        assert_eq!(s, vec![1.0]);

        let zero = Tensor::zeros(4, 4);
        let s = compute_scales(&zero, &Granularity::PerToken, LowPrecisionFormat::Int4).unwrap();
        assert!(s.iter().all(|&v| v > 0.0));
        let qt = quantize(&zero, Granularity::PerToken, LowPrecisionFormat::Int4).unwrap();
        assert_eq!(dequantize(&qt), zero);

        // Two blocks with maxima 14 and 7.
        let mut x = Tensor::zeros(4, 2);
        x.set(0, 0, 14.0);
        x.set(2, 1, -7.0);
        let s = compute_scales(
            &x,
            &Granularity::PerBlock { tokens: 2 },
            LowPrecisionFormat::Int4,
        )
        .unwrap();
        assert_eq!(s, vec![2.0, 1.0]);
    }

    #[test]
    fn quantize_endpoints_hit_max_codes() {
        let x = Tensor::from_rows(&[&[1.0, -1.0]]);
        let qt = quantize(&x, Granularity::PerTensor, LowPrecisionFormat::Int4).unwrap();
        assert!((qt.scales[0] - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(qt.codes.row(0), &[7.0, -7.0]);
    }

    #[test]
    fn quantize_is_fixed_point_on_exact_grids() {
        let scale = 0.37;
        let codes = [-7.0, -3.0, 0.0, 2.0, 7.0, 5.0];
        let x = Tensor::from_data(2, 3, codes.iter().map(|c| c * scale).collect()).unwrap();
        let qt = quantize(&x, Granularity::PerTensor, LowPrecisionFormat::Int4).unwrap();
        assert_eq!(qt.codes.as_slice(), &codes);
    }

    #[test]
    fn per_thread_quantize_matches_naive_per_group_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_fn(200, 16, |_, _| rng.random_range(-3.0..3.0));
        let g = pt(Side::Query);
        let qt = quantize(&x, g, LowPrecisionFormat::Int4).unwrap();

        let (map, count) = group_map(200, 16, &g).unwrap();
        for group in 0..count {
            let tokens: Vec<usize> = (0..200).filter(|&n| map[n] == group).collect();
            if tokens.is_empty() {
                continue;
            }
            let gmax = tokens
                .iter()
                .flat_map(|&n| x.row(n))
                .fold(0.0f64, |m, &v| m.max(v.abs()));
            let scale = gmax.max(ZERO_GROUP_FLOOR) / 7.0;
            assert!((qt.scales[group] - scale).abs() < 1e-15);
            for &n in &tokens {
                for (j, &v) in x.row(n).iter().enumerate() {
                    let expected = round_to_int(v / scale, 7).unwrap() as f64;
                    assert_eq!(qt.codes.get(n, j), expected);
                }
            }
        }
    }

    #[test]
    fn dequantize_round_trip_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(32, 8, |_, _| rng.random_range(-7.0..7.0));
        let qt = quantize(&x, Granularity::PerTensor, LowPrecisionFormat::Int4).unwrap();
        let back = dequantize(&qt);
        // delta = max/7 <= 1, so round-trip error <= delta/2 <= 0.5.
        assert!(x.max_abs_diff(&back) <= qt.scales[0] / 2.0 + 1e-15);
    }

    #[test]
    fn per_channel_fp8_round_trip_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::from_fn(64, 8, |_, _| rng.random_range(-9.0..9.0));
        let qt = quantize(&x, Granularity::PerChannel, LowPrecisionFormat::Fp8E4m3).unwrap();
        let back = dequantize(&qt);
        for j in 0..x.cols() {
            let cmax = (0..x.rows()).fold(0.0f64, |m, i| m.max(x.get(i, j).abs()));
            let bound = (1.0 / 8.0) * (9.0 / 8.0) * cmax;
            for i in 0..x.rows() {
                assert!(
                    (x.get(i, j) - back.get(i, j)).abs() <= bound,
                    "channel {j} exceeded E4M3 round-trip bound"
                );
            }
        }
    }

    #[test]
    fn quantize_p_static_examples() {
        let p = Tensor::from_rows(&[&[1.0, 0.0, (-10.0f64).exp2()]]);
        let qt = quantize_p_static(&p).unwrap();
        assert_eq!(qt.codes.get(0, 0), 448.0);
        assert_eq!(qt.codes.get(0, 1), 0.0);
        // 448 * 2^-10 = 0.4375 is exactly representable in E4M3.
        assert_eq!(qt.codes.get(0, 2), 0.4375);
        assert_eq!(qt.scales, vec![1.0 / 448.0]);

        let bad = Tensor::from_rows(&[&[1.5]]);
        assert!(matches!(
            quantize_p_static(&bad),
            Err(Error::UnnormalizedProbability(_))
        ));
    }

    #[test]
    fn granularity_refinement_is_statistically_monotone() {
        // Mean round-trip RMSE over outlier-injected tensors must not get
        // worse as granularity refines: token <= thread <= block <= tensor.
        let n = 256;
        let d = 32;
        let grans = [
            Granularity::PerToken,
            pt(Side::Query),
            Granularity::PerBlock { tokens: DEFAULT_BQ },
            Granularity::PerTensor,
        ];
        let mut sums = [0.0f64; 4];
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = Tensor::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
            // A few hot tokens create token-wise scale variation.
            for _ in 0..4 {
                let t = rng.random_range(0..n);
                for v in x.row_mut(t) {
                    *v *= 20.0;
                }
            }
            for (s, g) in sums.iter_mut().zip(&grans) {
                let qt = quantize(&x, *g, LowPrecisionFormat::Int4).unwrap();
                let back = dequantize(&qt);
                let mse: f64 = x
                    .as_slice()
                    .iter()
                    .zip(back.as_slice())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / (n * d) as f64;
                *s += mse.sqrt();
            }
        }
        assert!(sums[0] <= sums[1], "per-token {} > per-thread {}", sums[0], sums[1]);
        assert!(sums[1] <= sums[2], "per-thread {} > per-block {}", sums[1], sums[2]);
        assert!(sums[2] <= sums[3], "per-block {} > per-tensor {}", sums[2], sums[3]);
    }

    proptest! {
        #[test]
        fn every_token_maps_to_exactly_one_group(
            tokens in 1usize..300,
            kind in 0usize..5,
        ) {
            let g = match kind {
                0 => Granularity::PerTensor,
                1 => Granularity::PerToken,
                2 => Granularity::PerBlock { tokens: 64 },
                3 => pt(Side::Query),
                _ => pt(Side::Key),
            };
            let (map, count) = group_map(tokens, 16, &g).unwrap();
            prop_assert_eq!(map.len(), tokens);
            for &gid in &map {
                prop_assert!(gid < count);
            }
        }

        #[test]
        fn scales_are_strictly_positive(values in proptest::collection::vec(-100.0f64..100.0, 32)) {
            let x = Tensor::from_data(8, 4, values).unwrap();
            for g in [Granularity::PerTensor, Granularity::PerToken, Granularity::PerChannel] {
                let scales = compute_scales(&x, &g, LowPrecisionFormat::Int8).unwrap();
                prop_assert!(scales.iter().all(|&s| s > 0.0));
            }
        }
    }
}
