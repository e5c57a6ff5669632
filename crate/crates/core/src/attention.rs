//! Attention engines: a dense double-precision oracle, a full-precision
//! tiled engine with online softmax, and the quantized pipeline with
//! configurable formats, granularities, smoothing, and accumulator
//! precision emulation.
//!
//! The quantized pipeline follows a five-step workflow: smooth Q/K/V,
//! compute the ΔS correction with a GEMV per block pair, quantize Q and K
//! at the configured granularity and V per channel, run the tiled kernel
//! (integer QK products accumulated exactly, online softmax on the
//! dequantized scores, the P·V product accumulated per the configured
//! accumulator model), and correct the output by 1/l, the static P scale,
//! the per-channel V scales, and the V mean when smooth-V is on.

use crate::error::{Error, Result};
use crate::formats::{cast_fp16, cast_fp8, round_to_int, truncate_f32_to_fp22, Fp8Variant,
    LowPrecisionFormat};
use crate::quantize::{group_map, quantize, quantize_p_static, Granularity, QuantizedTensor, Side};
use crate::smooth::{compute_delta_s, smooth_k, smooth_q, smooth_v, baseline_hadamard,
    baseline_smoothquant, SmoothingFlags, SmoothingState};
use crate::tensor::{dot, Tensor};
use serde::{Deserialize, Serialize};

/// Number format for the Q·K^T product. `Off` keeps the product in the
/// working precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QkFormat {
    Off,
    Int4,
    Int8,
}

/// Quantization granularity for Q and K; lowered to a concrete
/// [`Granularity`] per side using the configured block sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QkGranularity {
    PerTensor,
    PerBlock,
    PerToken,
    PerThread,
}

/// Number format for the P·V product inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PvFormat {
    /// Identity: P and V enter the product unquantized.
    Off,
    /// Cast P and V to IEEE half precision, unit scale.
    Fp16,
    /// FP8 E4M3: static 1/448 scale for P, per-channel scales for V.
    E4m3,
    /// FP8 E5M2 with the same scale placement as E4M3.
    E5m2,
    /// INT8 with a static 1/127 scale for P, per-channel scales for V.
    Int8,
}

impl PvFormat {
    fn p_scale(self) -> f64 {
        match self {
            PvFormat::Off | PvFormat::Fp16 => 1.0,
            PvFormat::E4m3 | PvFormat::E5m2 => 1.0 / 448.0,
            PvFormat::Int8 => 1.0 / 127.0,
        }
    }
}

/// Accumulator model for the P·V product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Accumulation {
    /// Wide (exact) accumulation everywhere.
    Fp32Exact,
    /// One running accumulator across all key blocks, truncated to FP22
    /// after every fused multiply-add.
    Fp22SingleLevel,
    /// Fresh per-block accumulator truncated to FP22 within the block,
    /// folded into a wide buffer after each block.
    Fp22TwoLevel,
}

/// How often the FP22 accumulator emulation truncates. The per-fma
/// cadence is the most conservative model; the every-32 cadence mirrors
/// one mma instruction's k extent, for sensitivity studies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruncationCadence {
    #[default]
    EveryFma,
    Every32,
}

/// Baseline transform applied to Q and K instead of smoothing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    #[default]
    None,
    SmoothQuant,
    Hadamard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub b_q: usize,
    pub b_kv: usize,
    pub c_w: usize,
    pub qk_format: QkFormat,
    pub qk_granularity: QkGranularity,
    pub pv_format: PvFormat,
    pub accumulation: Accumulation,
    #[serde(default)]
    pub fp22_cadence: TruncationCadence,
    pub smoothing: SmoothingFlags,
    #[serde(default)]
    pub baseline: Baseline,
    #[serde(default = "AttentionConfig::default_smoothquant_alpha")]
    pub smoothquant_alpha: f64,
    #[serde(default)]
    pub hadamard_seed: u64,
    pub causal: bool,
    /// Score scale; defaults to 1/√d at run time when absent.
    #[serde(default)]
    pub scale: Option<f64>,
}

impl Default for AttentionConfig {
    /// The full quantized pipeline: INT4 per-thread Q/K with Q and K
    /// smoothing, FP8 E4M3 P/V, two-level accumulation.
    fn default() -> Self {
        Self {
            b_q: 128,
            b_kv: 64,
            c_w: 4,
            qk_format: QkFormat::Int4,
            qk_granularity: QkGranularity::PerThread,
            pv_format: PvFormat::E4m3,
            accumulation: Accumulation::Fp22TwoLevel,
            fp22_cadence: TruncationCadence::EveryFma,
            smoothing: SmoothingFlags::qk(),
            baseline: Baseline::None,
            smoothquant_alpha: 0.5,
            hadamard_seed: 0,
            causal: false,
            scale: None,
        }
    }
}

impl AttentionConfig {
    fn default_smoothquant_alpha() -> f64 {
        0.5
    }

    /// Everything off: the degenerate configuration that must reproduce
    /// the full-precision tiled engine exactly.
    pub fn exact() -> Self {
        Self {
            qk_format: QkFormat::Off,
            qk_granularity: QkGranularity::PerTensor,
            pv_format: PvFormat::Off,
            accumulation: Accumulation::Fp32Exact,
            smoothing: SmoothingFlags::none(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_q == 0 || self.b_kv == 0 || self.c_w == 0 {
            return Err(Error::Config("block sizes and warp count must be positive".into()));
        }
        if matches!(self.qk_granularity, QkGranularity::PerThread) {
            if self.b_q % self.c_w != 0 || (self.b_q / self.c_w) % 8 != 0 {
                return Err(Error::Config(format!(
                    "per-thread grouping needs b_q divisible by c_w and a warp tile \
                     divisible by 8, got b_q={}, c_w={}",
                    self.b_q, self.c_w
                )));
            }
            if self.b_kv % 8 != 0 {
                return Err(Error::Config(format!(
                    "per-thread grouping needs b_kv divisible by 8, got b_kv={}",
                    self.b_kv
                )));
            }
        }
        if matches!(
            self.accumulation,
            Accumulation::Fp22SingleLevel | Accumulation::Fp22TwoLevel
        ) && !matches!(self.pv_format, PvFormat::E4m3 | PvFormat::E5m2)
        {
            return Err(Error::Config(
                "FP22 accumulation models the FP8 matmul path and requires an FP8 P/V format"
                    .into(),
            ));
        }
        if !matches!(self.baseline, Baseline::None) && (self.smoothing.q || self.smoothing.k) {
            return Err(Error::Config(
                "baseline transforms replace Q/K smoothing; enable one or the other".into(),
            ));
        }
        if let Some(s) = self.scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!("scale must be positive, got {s}")));
            }
        }
        Ok(())
    }

    fn qk_side_granularity(&self, side: Side) -> Granularity {
        match self.qk_granularity {
            QkGranularity::PerTensor => Granularity::PerTensor,
            QkGranularity::PerToken => Granularity::PerToken,
            QkGranularity::PerBlock => Granularity::PerBlock {
                tokens: match side {
                    Side::Query => self.b_q,
                    Side::Key => self.b_kv,
                },
            },
            QkGranularity::PerThread => Granularity::PerThread {
                b_q: self.b_q,
                b_kv: self.b_kv,
                c_w: self.c_w,
                side,
            },
        }
    }
}

/// Counters and extrema recorded while the quantized pipeline runs.
#[derive(Debug, Clone, Default)]
pub struct SageDiagnostics {
    pub q_blocks: usize,
    pub kv_blocks: usize,
    pub q_groups: usize,
    pub k_groups: usize,
    pub max_abs_delta_s: f64,
    /// Nonzero softmax entries whose P code underflowed to zero.
    pub p_zero_codes: usize,
}

fn check_qkv_shapes(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    if q.is_empty() || k.is_empty() || v.is_empty() {
        return Err(Error::EmptyTensor);
    }
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            expected: format!("Q: Nq x d, K: Nk x d, V: Nk x dv (d = {})", q.cols()),
            got: format!(
                "Q {}x{}, K {}x{}, V {}x{}",
                q.rows(), q.cols(), k.rows(), k.cols(), v.rows(), v.cols()
            ),
        });
    }
    Ok(())
}

/// Dense double-precision softmax attention; the ground truth for every
/// accuracy metric.
pub fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    check_qkv_shapes(q, k, v)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let n_k = k.rows();
    let mut out = Tensor::zeros(q.rows(), v.cols());
    let mut scores = vec![0.0f64; n_k];
    for i in 0..q.rows() {
        let limit = if causal { (i + 1).min(n_k) } else { n_k };
        let q_row = q.row(i);
        for (j, s) in scores[..limit].iter_mut().enumerate() {
            *s = dot(q_row, k.row(j)) * scale;
        }
        let m = scores[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut l = 0.0;
        for s in scores[..limit].iter_mut() {
            *s = (*s - m).exp();
            l += *s;
        }
        let out_row = out.row_mut(i);
        for (j, &p) in scores[..limit].iter().enumerate() {
            let w = p / l;
            for (o, &vv) in out_row.iter_mut().zip(v.row(j)) {
                *o += w * vv;
            }
        }
    }
    Ok(out)
}

/// Full-precision tiled attention with online softmax. Quantization
/// fields of the config are ignored; only the block sizes, the causal
/// flag, and the scale apply.
pub fn attention_tiled_fp(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttentionConfig) -> Result<Tensor> {
    attention_tiled_fp_with_state(q, k, v, cfg).map(|(o, _, _)| o)
}

/// Tiled engine that also returns the final running row-max `m` and
/// row-sum `l`, so tests can check the implicit softmax normalization.
pub fn attention_tiled_fp_with_state(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttentionConfig,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    check_qkv_shapes(q, k, v)?;
    cfg.validate()?;
    let d = q.cols();
    let n_q = q.rows();
    let n_k = k.rows();
    let scale = cfg.scale.unwrap_or(1.0 / (d as f64).sqrt());
    let mut out = Tensor::zeros(n_q, v.cols());
    let mut m_final = vec![f64::NEG_INFINITY; n_q];
    let mut l_final = vec![0.0f64; n_q];

    for q_start in (0..n_q).step_by(cfg.b_q) {
        let q_end = (q_start + cfg.b_q).min(n_q);
        let bq = q_end - q_start;
        let mut tile = TileState::new(bq, v.cols());
        for kv_start in (0..n_k).step_by(cfg.b_kv) {
            let kv_end = (kv_start + cfg.b_kv).min(n_k);
            if cfg.causal && kv_start > q_end - 1 {
                break;
            }
            let bkv = kv_end - kv_start;
            // S_ij for this block pair.
            let mut s_block = Tensor::zeros(bq, bkv);
            for r in 0..bq {
                let q_row = q.row(q_start + r);
                let s_row = s_block.row_mut(r);
                for (c, s) in s_row.iter_mut().enumerate() {
                    *s = dot(q_row, k.row(kv_start + c)) * scale;
                }
            }
            if cfg.causal {
                mask_causal(&mut s_block, q_start, kv_start);
            }
            let (p_block, alphas) = tile.online_softmax(&s_block);
            for r in 0..bq {
                let alpha = alphas[r];
                let o_row = tile.o.row_mut(r);
                if alpha != 1.0 {
                    for o in o_row.iter_mut() {
                        *o *= alpha;
                    }
                }
                for c in 0..bkv {
                    let p = p_block.get(r, c);
                    if p == 0.0 {
                        continue;
                    }
                    for (o, &vv) in o_row.iter_mut().zip(v.row(kv_start + c)) {
                        *o += p * vv;
                    }
                }
            }
        }
        for r in 0..bq {
            let inv_l = 1.0 / tile.l[r];
            for (dst, &o) in out.row_mut(q_start + r).iter_mut().zip(tile.o.row(r)) {
                *dst = o * inv_l;
            }
            m_final[q_start + r] = tile.m[r];
            l_final[q_start + r] = tile.l[r];
        }
    }
    Ok((out, m_final, l_final))
}

/// Running online-softmax state for one Q block.
struct TileState {
    m: Vec<f64>,
    l: Vec<f64>,
    o: Tensor,
}

impl TileState {
    fn new(bq: usize, d: usize) -> Self {
        Self {
            m: vec![f64::NEG_INFINITY; bq],
            l: vec![0.0; bq],
            o: Tensor::zeros(bq, d),
        }
    }

    /// Update m and l from a score block and return the unnormalized
    /// probabilities plus the per-row rescale factors for the output
    /// accumulator.
    fn online_softmax(&mut self, s_block: &Tensor) -> (Tensor, Vec<f64>) {
        let bq = s_block.rows();
        let mut p = Tensor::zeros(bq, s_block.cols());
        let mut alphas = vec![1.0f64; bq];
        for r in 0..bq {
            let row_max = s_block.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let m_new = self.m[r].max(row_max);
            debug_assert!(m_new >= self.m[r], "running max must be nondecreasing");
            let alpha = if self.m[r] == f64::NEG_INFINITY {
                0.0
            } else {
                (self.m[r] - m_new).exp()
            };
            let mut row_sum = 0.0;
            let p_row = p.row_mut(r);
            for (dst, &s) in p_row.iter_mut().zip(s_block.row(r)) {
                let e = if s == f64::NEG_INFINITY { 0.0 } else { (s - m_new).exp() };
                *dst = e;
                row_sum += e;
            }
            self.l[r] = alpha * self.l[r] + row_sum;
            self.m[r] = m_new;
            alphas[r] = alpha;
        }
        (p, alphas)
    }
}

fn mask_causal(s_block: &mut Tensor, q_start: usize, kv_start: usize) {
    for r in 0..s_block.rows() {
        let qi = q_start + r;
        for c in 0..s_block.cols() {
            if kv_start + c > qi {
                s_block.set(r, c, f64::NEG_INFINITY);
            }
        }
    }
}

/// Code-space P·V product of one block pair, accumulated into `acc` with
/// the requested accumulator emulation. Loops key-index-outer so each
/// output element sees its fused multiply-adds in key order.
fn pv_product_into(
    acc: &mut Tensor,
    p_codes: &Tensor,
    v_codes: &Tensor,
    kv_start: usize,
    emulate_fp22: bool,
    cadence: TruncationCadence,
) {
    let bq = p_codes.rows();
    let bkv = p_codes.cols();
    let d = v_codes.cols();
    if !emulate_fp22 {
        for r in 0..bq {
            let acc_row = acc.row_mut(r);
            for c in 0..bkv {
                let p = p_codes.get(r, c);
                if p == 0.0 {
                    continue;
                }
                for (a, &vv) in acc_row.iter_mut().zip(v_codes.row(kv_start + c)) {
                    *a += p * vv;
                }
            }
        }
        return;
    }
    match cadence {
        TruncationCadence::EveryFma => {
            for r in 0..bq {
                let acc_row = acc.row_mut(r);
                for c in 0..bkv {
                    let p = p_codes.get(r, c);
                    for (a, &vv) in acc_row.iter_mut().zip(v_codes.row(kv_start + c)) {
                        *a = truncate_f32_to_fp22((*a + p * vv) as f32) as f64;
                    }
                }
            }
        }
        TruncationCadence::Every32 => {
            let mut partial = vec![0.0f64; d];
            for r in 0..bq {
                for chunk_start in (0..bkv).step_by(32) {
                    let chunk_end = (chunk_start + 32).min(bkv);
                    partial.iter_mut().for_each(|p| *p = 0.0);
                    for c in chunk_start..chunk_end {
                        let p = p_codes.get(r, c);
                        if p == 0.0 {
                            continue;
                        }
                        for (a, &vv) in partial.iter_mut().zip(v_codes.row(kv_start + c)) {
                            *a += p * vv;
                        }
                    }
                    let acc_row = acc.row_mut(r);
                    for (a, &pt) in acc_row.iter_mut().zip(&partial) {
                        *a = truncate_f32_to_fp22((*a + pt) as f32) as f64;
                    }
                }
            }
        }
    }
}

/// One block product R = P̂·V̂ under the requested accumulator model,
/// starting from a fresh accumulator. In the two-level pipeline the
/// result is folded into the wide output buffer by the caller; in the
/// single-level pipeline the running accumulator itself stays FP22
/// across blocks.
pub fn accumulate_pv(
    p_hat: &QuantizedTensor,
    v_hat: &QuantizedTensor,
    mode: Accumulation,
    cadence: TruncationCadence,
) -> Result<Tensor> {
    if p_hat.codes.cols() != v_hat.codes.rows() {
        return Err(Error::ShapeMismatch {
            expected: format!("inner dimension {}", p_hat.codes.cols()),
            got: format!("{} V rows", v_hat.codes.rows()),
        });
    }
    let mut acc = Tensor::zeros(p_hat.codes.rows(), v_hat.codes.cols());
    let emulate = !matches!(mode, Accumulation::Fp32Exact);
    pv_product_into(&mut acc, &p_hat.codes, &v_hat.codes, 0, emulate, cadence);
    Ok(acc)
}

enum QkPath {
    Exact {
        q: Tensor,
        k: Tensor,
    },
    Quantized {
        q_codes: Vec<i64>,
        k_codes: Vec<i64>,
        q_hat: QuantizedTensor,
        k_hat: QuantizedTensor,
    },
}

fn quantize_p_block(
    p: &Tensor,
    format: PvFormat,
    diag_zero_codes: &mut usize,
) -> Result<Tensor> {
    match format {
        PvFormat::Off => Ok(p.clone()),
        PvFormat::Fp16 => {
            let mut codes = p.clone();
            for v in codes.as_mut_slice() {
                *v = cast_fp16(*v);
            }
            Ok(codes)
        }
        PvFormat::E4m3 => {
            let qt = quantize_p_static(p)?;
            for (&orig, &code) in p.iter().zip(qt.codes.iter()) {
                if orig > 0.0 && code == 0.0 {
                    *diag_zero_codes += 1;
                }
            }
            Ok(qt.codes)
        }
        PvFormat::E5m2 => {
            let mut codes = Tensor::zeros(p.rows(), p.cols());
            for i in 0..p.rows() {
                for (j, &v) in p.row(i).iter().enumerate() {
                    if !(-1e-6..=1.0 + 1e-6).contains(&v) {
                        return Err(Error::UnnormalizedProbability(v));
                    }
                    let code = cast_fp8(448.0 * v, Fp8Variant::E5M2)?;
                    if v > 0.0 && code == 0.0 {
                        *diag_zero_codes += 1;
                    }
                    codes.set(i, j, code);
                }
            }
            Ok(codes)
        }
        PvFormat::Int8 => {
            let mut codes = Tensor::zeros(p.rows(), p.cols());
            for i in 0..p.rows() {
                for (j, &v) in p.row(i).iter().enumerate() {
                    if !(-1e-6..=1.0 + 1e-6).contains(&v) {
                        return Err(Error::UnnormalizedProbability(v));
                    }
                    let code = round_to_int(127.0 * v, 127)? as f64;
                    if v > 0.0 && code == 0.0 {
                        *diag_zero_codes += 1;
                    }
                    codes.set(i, j, code);
                }
            }
            Ok(codes)
        }
    }
}

fn quantize_v(v: &Tensor, format: PvFormat) -> Result<(Tensor, Vec<f64>)> {
    match format {
        PvFormat::Off => Ok((v.clone(), vec![1.0; v.cols()])),
        PvFormat::Fp16 => {
            let mut codes = v.clone();
            for x in codes.as_mut_slice() {
                *x = cast_fp16(*x);
            }
            Ok((codes, vec![1.0; v.cols()]))
        }
        PvFormat::E4m3 => {
            let qt = quantize(v, Granularity::PerChannel, LowPrecisionFormat::Fp8E4m3)?;
            Ok((qt.codes, qt.scales))
        }
        PvFormat::E5m2 => {
            let qt = quantize(v, Granularity::PerChannel, LowPrecisionFormat::Fp8E5m2)?;
            Ok((qt.codes, qt.scales))
        }
        PvFormat::Int8 => {
            let qt = quantize(v, Granularity::PerChannel, LowPrecisionFormat::Int8)?;
            Ok((qt.codes, qt.scales))
        }
    }
}

fn codes_as_i64(t: &Tensor) -> Vec<i64> {
    t.as_slice().iter().map(|&v| v as i64).collect()
}

/// The quantized attention pipeline. Returns the output, the smoothing
/// state used for the corrections, and run diagnostics.
pub fn attention_sage2(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttentionConfig,
) -> Result<(Tensor, SmoothingState, SageDiagnostics)> {
    check_qkv_shapes(q, k, v)?;
    cfg.validate()?;
    let d = q.cols();
    let n_q = q.rows();
    let n_k = k.rows();
    let scale = cfg.scale.unwrap_or(1.0 / (d as f64).sqrt());
    let mut diag = SageDiagnostics::default();

    // Step 1: baseline transform or smoothing.
    let (mut q_work, mut k_work) = match cfg.baseline {
        Baseline::None => (q.clone(), k.clone()),
        Baseline::SmoothQuant => baseline_smoothquant(q, k, cfg.smoothquant_alpha)?,
        Baseline::Hadamard => baseline_hadamard(q, k, cfg.hadamard_seed)?,
    };
    let mut state = SmoothingState::empty();
    state.mode = cfg.smoothing;
    if cfg.smoothing.k {
        let (smoothed, k_bar) = smooth_k(&k_work)?;
        k_work = smoothed;
        state.k_bar = Some(k_bar);
    }
    if cfg.smoothing.q {
        let (smoothed, q_bar) = smooth_q(&q_work, cfg.b_q)?;
        q_work = smoothed;
        state.q_bar = Some(q_bar);
    }
    let v_work = if cfg.smoothing.v {
        let (smoothed, v_mean) = smooth_v(v)?;
        state.v_mean = Some(v_mean);
        smoothed
    } else {
        v.clone()
    };

    // Step 2: ΔS rows, one GEMV per Q block over the (smoothed) K.
    if let Some(q_bar) = &state.q_bar {
        let mut ds = Tensor::zeros(q_bar.rows(), n_k);
        for i in 0..q_bar.rows() {
            let row = compute_delta_s(q_bar.row(i), &k_work);
            diag.max_abs_delta_s = row
                .iter()
                .fold(diag.max_abs_delta_s, |m, &v| m.max(v.abs()));
            ds.row_mut(i).copy_from_slice(&row);
        }
        state.delta_s = Some(ds);
    }

    // Step 3: quantize Q and K at the configured granularity, V per
    // channel.
    let qk_path = match cfg.qk_format {
        QkFormat::Off => QkPath::Exact { q: q_work, k: k_work },
        QkFormat::Int4 | QkFormat::Int8 => {
            let fmt = if matches!(cfg.qk_format, QkFormat::Int4) {
                LowPrecisionFormat::Int4
            } else {
                LowPrecisionFormat::Int8
            };
            let q_hat = quantize(&q_work, cfg.qk_side_granularity(Side::Query), fmt)?;
            let k_hat = quantize(&k_work, cfg.qk_side_granularity(Side::Key), fmt)?;
            diag.q_groups = q_hat.scales.len();
            diag.k_groups = k_hat.scales.len();
            QkPath::Quantized {
                q_codes: codes_as_i64(&q_hat.codes),
                k_codes: codes_as_i64(&k_hat.codes),
                q_hat,
                k_hat,
            }
        }
    };
    if let QkPath::Exact { .. } = qk_path {
        let (_, q_groups) = group_map(n_q, d, &cfg.qk_side_granularity(Side::Query))?;
        let (_, k_groups) = group_map(n_k, d, &cfg.qk_side_granularity(Side::Key))?;
        diag.q_groups = q_groups;
        diag.k_groups = k_groups;
    }
    let (v_codes, delta_v) = quantize_v(&v_work, cfg.pv_format)?;
    let delta_p = cfg.pv_format.p_scale();

    // Step 4: the tiled kernel.
    let mut out = Tensor::zeros(n_q, v.cols());
    diag.q_blocks = n_q.div_ceil(cfg.b_q);
    diag.kv_blocks = n_k.div_ceil(cfg.b_kv);
    let single_level = matches!(cfg.accumulation, Accumulation::Fp22SingleLevel);
    let two_level = matches!(cfg.accumulation, Accumulation::Fp22TwoLevel);

    for (i_block, q_start) in (0..n_q).step_by(cfg.b_q).enumerate() {
        let q_end = (q_start + cfg.b_q).min(n_q);
        let bq = q_end - q_start;
        let mut tile = TileState::new(bq, v.cols());
        for kv_start in (0..n_k).step_by(cfg.b_kv) {
            let kv_end = (kv_start + cfg.b_kv).min(n_k);
            if cfg.causal && kv_start > q_end - 1 {
                break;
            }
            let bkv = kv_end - kv_start;

            // Dequantized (or exact) scores with the ΔS correction.
            let mut s_block = Tensor::zeros(bq, bkv);
            match &qk_path {
                QkPath::Exact { q, k } => {
                    for r in 0..bq {
                        let q_row = q.row(q_start + r);
                        for (c, s) in s_block.row_mut(r).iter_mut().enumerate() {
                            *s = dot(q_row, k.row(kv_start + c)) * scale;
                        }
                    }
                }
                QkPath::Quantized { q_codes, k_codes, q_hat, k_hat } => {
                    for r in 0..bq {
                        let qi = q_start + r;
                        let q_row = &q_codes[qi * d..(qi + 1) * d];
                        let dq = q_hat.scale_of_token(qi);
                        for (c, s) in s_block.row_mut(r).iter_mut().enumerate() {
                            let kj = kv_start + c;
                            let k_row = &k_codes[kj * d..(kj + 1) * d];
                            // Exact wide-integer accumulation, as the
                            // INT32 mma accumulator is at these sizes.
                            let mut acc: i64 = 0;
                            for (a, b) in q_row.iter().zip(k_row) {
                                acc += a * b;
                            }
                            *s = acc as f64 * dq * k_hat.scale_of_token(kj) * scale;
                        }
                    }
                }
            }
            if let Some(ds) = &state.delta_s {
                let ds_row = ds.row(i_block);
                for r in 0..bq {
                    for (c, s) in s_block.row_mut(r).iter_mut().enumerate() {
                        *s += ds_row[kv_start + c] * scale;
                    }
                }
            }
            if cfg.causal {
                mask_causal(&mut s_block, q_start, kv_start);
            }

            let (p_block, alphas) = tile.online_softmax(&s_block);
            let p_codes = quantize_p_block(&p_block, cfg.pv_format, &mut diag.p_zero_codes)?;

            // Rescale the running output, then fold in this block's
            // product under the configured accumulator model.
            for r in 0..bq {
                let alpha = alphas[r];
                let o_row = tile.o.row_mut(r);
                if alpha != 1.0 {
                    for o in o_row.iter_mut() {
                        *o *= alpha;
                    }
                }
                if single_level {
                    for o in o_row.iter_mut() {
                        *o = truncate_f32_to_fp22(*o as f32) as f64;
                    }
                }
            }
            if two_level {
                let mut r_block = Tensor::zeros(bq, v.cols());
                pv_product_into(&mut r_block, &p_codes, &v_codes, kv_start, true, cfg.fp22_cadence);
                for r in 0..bq {
                    for (o, &rv) in tile.o.row_mut(r).iter_mut().zip(r_block.row(r)) {
                        *o += rv;
                    }
                }
            } else {
                pv_product_into(
                    &mut tile.o,
                    &p_codes,
                    &v_codes,
                    kv_start,
                    single_level,
                    cfg.fp22_cadence,
                );
            }
        }

        // Step 5: output correction: 1/l, the static P scale, the
        // per-channel V scales, and the V mean when smooth-V is on.
        for r in 0..bq {
            let inv_l = 1.0 / tile.l[r];
            let out_row = out.row_mut(q_start + r);
            for (c, (dst, &o)) in out_row.iter_mut().zip(tile.o.row(r)).enumerate() {
                *dst = o * inv_l * delta_p * delta_v[c];
                if let Some(v_mean) = &state.v_mean {
                    *dst += v_mean[c];
                }
            }
        }
    }
    Ok((out, state, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
    }

    /// Second independent softmax attention, normalizing P first, for
    /// cross-checking the oracle.
    fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let scale = 1.0 / (q.cols() as f64).sqrt();
        let mut out = Tensor::zeros(q.rows(), v.cols());
        for i in 0..q.rows() {
            let scores: Vec<f64> = (0..k.rows())
                .map(|j| dot(q.row(i), k.row(j)) * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
            for (j, &p) in probs.iter().enumerate() {
                for (o, &vv) in out.row_mut(i).iter_mut().zip(v.row(j)) {
                    *o += p * vv;
                }
            }
        }
        out
    }

    #[test]
    fn oracle_single_token_returns_v() {
        let q = random_tensor(1, 8, 1);
        let k = random_tensor(1, 8, 2);
        let v = random_tensor(1, 8, 3);
        let o = attention_oracle(&q, &k, &v, false).unwrap();
        assert!(o.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn oracle_uniform_softmax_returns_column_mean() {
        let q = Tensor::zeros(3, 4);
        let k = random_tensor(16, 4, 4);
        let v = random_tensor(16, 4, 5);
        let o = attention_oracle(&q, &k, &v, false).unwrap();
        let means = v.col_means();
        for i in 0..o.rows() {
            for (j, &m) in means.iter().enumerate() {
                assert!((o.get(i, j) - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_matches_independent_implementation() {
        let q = Tensor::from_rows(&[&[0.3, -1.2], &[2.0, 0.1], &[-0.7, 0.9], &[1.1, 1.3]]);
        let k = Tensor::from_rows(&[&[0.5, 0.5], &[-1.0, 2.0], &[0.0, -0.4], &[1.5, -0.2]]);
        let v = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, -1.0], &[-0.5, 0.5]]);
        let o = attention_oracle(&q, &k, &v, false).unwrap();
        let naive = naive_attention(&q, &k, &v);
        assert!(o.max_abs_diff(&naive) < 1e-12);
    }

    #[test]
    fn oracle_rejects_shape_mismatch() {
        let q = random_tensor(4, 8, 6);
        let k = random_tensor(4, 6, 7);
        let v = random_tensor(4, 8, 8);
        assert!(attention_oracle(&q, &k, &v, false).is_err());
    }

    #[test]
    fn tiled_matches_oracle() {
        let q = random_tensor(512, 64, 9);
        let k = random_tensor(512, 64, 10);
        let v = random_tensor(512, 64, 11);
        let cfg = AttentionConfig::exact();
        let tiled = attention_tiled_fp(&q, &k, &v, &cfg).unwrap();
        let oracle = attention_oracle(&q, &k, &v, false).unwrap();
        assert!(tiled.max_abs_diff(&oracle) <= 1e-12);
    }

    #[test]
    fn tiled_single_block_equals_dense_two_pass() {
        // N <= b_kv: no online rescaling happens, so the tiled result
        // equals a dense exp/sum two-pass computed in the same order.
        let q = random_tensor(48, 16, 12);
        let k = random_tensor(48, 16, 13);
        let v = random_tensor(48, 16, 14);
        let cfg = AttentionConfig::exact();
        let tiled = attention_tiled_fp(&q, &k, &v, &cfg).unwrap();

        let scale = 1.0 / 4.0;
        let mut dense = Tensor::zeros(48, 16);
        for i in 0..48 {
            let scores: Vec<f64> = (0..48).map(|j| dot(q.row(i), k.row(j)) * scale).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let l: f64 = exps.iter().sum();
            for (j, &e) in exps.iter().enumerate() {
                for (o, &vv) in dense.row_mut(i).iter_mut().zip(v.row(j)) {
                    *o += e * vv;
                }
            }
            let inv_l = 1.0 / l;
            for o in dense.row_mut(i) {
                *o *= inv_l;
            }
        }
        assert_eq!(tiled, dense);
    }

    #[test]
    fn causal_first_row_is_first_value_row() {
        let q = random_tensor(64, 16, 15);
        let k = random_tensor(64, 16, 16);
        let v = random_tensor(64, 16, 17);
        let cfg = AttentionConfig { causal: true, ..AttentionConfig::exact() };
        let tiled = attention_tiled_fp(&q, &k, &v, &cfg).unwrap();
        for (a, b) in tiled.row(0).iter().zip(v.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        let oracle = attention_oracle(&q, &k, &v, true).unwrap();
        assert!(tiled.max_abs_diff(&oracle) <= 1e-12);
    }

    #[test]
    fn causal_output_ignores_future_kv_rows() {
        let q = random_tensor(40, 8, 18);
        let k = random_tensor(40, 8, 19);
        let v = random_tensor(40, 8, 20);
        let cfg = AttentionConfig { causal: true, ..AttentionConfig::exact() };
        let base = attention_tiled_fp(&q, &k, &v, &cfg).unwrap();

        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for j in 21..40 {
            for c in 0..8 {
                k2.set(j, c, 99.0 + j as f64);
                v2.set(j, c, -55.0);
            }
        }
        let changed = attention_tiled_fp(&q, &k2, &v2, &cfg).unwrap();
        for i in 0..=20 {
            for c in 0..8 {
                assert_eq!(base.get(i, c), changed.get(i, c), "row {i} depended on future kv");
            }
        }
    }

    #[test]
    fn degenerate_sage_equals_tiled_and_oracle() {
        let q = random_tensor(200, 32, 21);
        let k = random_tensor(200, 32, 22);
        let v = random_tensor(200, 32, 23);
        let cfg = AttentionConfig::exact();
        let (sage, _, _) = attention_sage2(&q, &k, &v, &cfg).unwrap();
        let tiled = attention_tiled_fp(&q, &k, &v, &cfg).unwrap();
        let oracle = attention_oracle(&q, &k, &v, false).unwrap();
        assert!(sage.max_abs_diff(&tiled) <= 1e-14);
        assert!(sage.max_abs_diff(&oracle) <= 1e-10);
    }

    #[test]
    fn smoothing_alone_is_exact() {
        let q = random_tensor(300, 32, 24);
        let k = random_tensor(300, 32, 25);
        let v = random_tensor(300, 32, 26);
        let oracle = attention_oracle(&q, &k, &v, false).unwrap();
        for (sq, sk, sv) in [
            (true, false, false),
            (false, true, false),
            (false, false, true),
            (true, true, true),
        ] {
            let cfg = AttentionConfig {
                smoothing: SmoothingFlags { q: sq, k: sk, v: sv },
                ..AttentionConfig::exact()
            };
            let (sage, state, _) = attention_sage2(&q, &k, &v, &cfg).unwrap();
            assert!(
                sage.max_abs_diff(&oracle) <= 1e-10,
                "smoothing ({sq},{sk},{sv}) broke exactness"
            );
            assert_eq!(state.mode, cfg.smoothing);
        }
    }

    #[test]
    fn quantized_pipeline_with_smoothing_tracks_oracle() {
        // INT8 per-thread with K smoothing on moderate-outlier inputs
        // keeps cosine similarity above 0.999.
        let spec = crate::synth::GenSpec {
            outliers: crate::synth::OutlierSpec {
                channels: 8,
                q_multiplier: 6.0,
                k_multiplier: 6.0,
            },
            ..crate::synth::GenSpec::gaussian(1024, 64, 42)
        };
        let (q, k, v) = crate::synth::gen_qkv(&spec).unwrap();
        let cfg = AttentionConfig {
            qk_format: QkFormat::Int8,
            smoothing: SmoothingFlags { q: false, k: true, v: false },
            ..AttentionConfig::default()
        };
        let (sage, _, _) = attention_sage2(&q, &k, &v, &cfg).unwrap();
        let oracle = attention_oracle(&q, &k, &v, false).unwrap();
        let cos = crate::metrics::cos_sim(&oracle, &sage).unwrap();
        assert!(cos > 0.999, "cos_sim {cos}");
    }

    #[test]
    fn unsmoothed_int4_per_tensor_degrades_clearly() {
        let spec = crate::synth::GenSpec::with_outliers(512, 64, 43);
        let (q, k, v) = crate::synth::gen_qkv(&spec).unwrap();
        let oracle = attention_oracle(&q, &k, &v, false).unwrap();

        let smoothed_cfg = AttentionConfig::default();
        let (smoothed, _, _) = attention_sage2(&q, &k, &v, &smoothed_cfg).unwrap();
        let cos_smoothed = crate::metrics::cos_sim(&oracle, &smoothed).unwrap();

        let raw_cfg = AttentionConfig {
            qk_granularity: QkGranularity::PerTensor,
            smoothing: SmoothingFlags::none(),
            ..AttentionConfig::default()
        };
        let (raw, _, _) = attention_sage2(&q, &k, &v, &raw_cfg).unwrap();
        let cos_raw = crate::metrics::cos_sim(&oracle, &raw).unwrap();

        assert!(
            cos_smoothed - cos_raw > 0.05,
            "expected a wide margin, got smoothed {cos_smoothed} vs raw {cos_raw}"
        );
    }

    #[test]
    fn accumulate_pv_zero_p_gives_zero() {
        let p = quantize_p_static(&Tensor::zeros(8, 16)).unwrap();
        let v = quantize(
            &random_tensor(16, 8, 27),
            Granularity::PerChannel,
            LowPrecisionFormat::Fp8E4m3,
        )
        .unwrap();
        for mode in [
            Accumulation::Fp32Exact,
            Accumulation::Fp22SingleLevel,
            Accumulation::Fp22TwoLevel,
        ] {
            let r = accumulate_pv(&p, &v, mode, TruncationCadence::EveryFma).unwrap();
            assert_eq!(r.max_abs(), 0.0);
        }
    }

    #[test]
    fn accumulate_pv_exact_when_sums_fit_in_13_mantissa_bits() {
        // Small integer codes: every partial sum stays well inside 13
        // mantissa bits, so FP22 truncation is the identity.
        let mut p = Tensor::zeros(4, 8);
        let mut v = Tensor::zeros(8, 4);
        for i in 0..4 {
            for j in 0..8 {
                p.set(i, j, ((i + j) % 3) as f64);
            }
        }
        for i in 0..8 {
            for j in 0..4 {
                v.set(i, j, ((i * j) % 5) as f64 - 2.0);
            }
        }
        let p_hat = QuantizedTensor {
            codes: p,
            scales: vec![1.0],
            granularity: Granularity::PerTensor,
            group_of: vec![0; 4],
            format: LowPrecisionFormat::Fp8E4m3,
        };
        let v_hat = QuantizedTensor {
            codes: v,
            scales: vec![1.0; 4],
            granularity: Granularity::PerChannel,
            group_of: (0..4).collect(),
            format: LowPrecisionFormat::Fp8E4m3,
        };
        let exact = accumulate_pv(&p_hat, &v_hat, Accumulation::Fp32Exact, TruncationCadence::EveryFma).unwrap();
        for mode in [Accumulation::Fp22SingleLevel, Accumulation::Fp22TwoLevel] {
            for cadence in [TruncationCadence::EveryFma, TruncationCadence::Every32] {
                let r = accumulate_pv(&p_hat, &v_hat, mode, cadence).unwrap();
                assert_eq!(r, exact);
            }
        }
    }

    #[test]
    fn accumulate_pv_checks_inner_dim() {
        let p = quantize_p_static(&Tensor::zeros(2, 3)).unwrap();
        let v = quantize(
            &random_tensor(4, 2, 28),
            Granularity::PerChannel,
            LowPrecisionFormat::Fp8E4m3,
        )
        .unwrap();
        assert!(accumulate_pv(&p, &v, Accumulation::Fp32Exact, TruncationCadence::EveryFma).is_err());
    }

    #[test]
    fn config_invariants_are_enforced() {
        let bad_fp22 = AttentionConfig {
            pv_format: PvFormat::Int8,
            accumulation: Accumulation::Fp22TwoLevel,
            ..AttentionConfig::default()
        };
        assert!(bad_fp22.validate().is_err());

        let bad_warp = AttentionConfig { c_w: 3, ..AttentionConfig::default() };
        assert!(bad_warp.validate().is_err());

        let bad_baseline = AttentionConfig {
            baseline: Baseline::Hadamard,
            ..AttentionConfig::default()
        };
        assert!(bad_baseline.validate().is_err());
    }

    #[test]
    fn ragged_sizes_work() {
        // N not divisible by either block size.
        let q = random_tensor(147, 32, 29);
        let k = random_tensor(147, 32, 30);
        let v = random_tensor(147, 32, 31);
        let oracle = attention_oracle(&q, &k, &v, false).unwrap();
        let (sage, _, diag) = attention_sage2(&q, &k, &v, &AttentionConfig::default()).unwrap();
        assert_eq!(diag.q_blocks, 2);
        assert_eq!(diag.kv_blocks, 3);
        let cos = crate::metrics::cos_sim(&oracle, &sage).unwrap();
        assert!(cos > 0.98, "cos_sim {cos}");
    }

    #[test]
    fn implicit_softmax_rows_sum_to_one() {
        let q = random_tensor(96, 16, 32);
        let k = random_tensor(80, 16, 33);
        let v = random_tensor(80, 16, 34);
        let cfg = AttentionConfig { b_q: 32, b_kv: 16, ..AttentionConfig::exact() };
        let (_, m, l) = attention_tiled_fp_with_state(&q, &k, &v, &cfg).unwrap();
        let scale = 0.25;
        for i in 0..q.rows() {
            let sum: f64 = (0..k.rows())
                .map(|j| ((dot(q.row(i), k.row(j)) * scale) - m[i]).exp())
                .sum();
            // exp(S - m) row-sums reproduce l, i.e. P rows sum to 1.
            assert!((sum / l[i] - 1.0).abs() <= 1e-6);
        }
    }
}
