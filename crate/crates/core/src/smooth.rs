//! Outlier-smoothing transforms for Q, K and V, the ΔS correction they
//! require, and the two baseline transforms they are compared against.
//!
//! Smoothing subtracts a mean (per block for Q, per tensor for K, per
//! channel for V) before quantization. Exactness is restored by adding
//! ΔS = q̄_i·γ(K_j)^T back after the QK product and V_m back after the
//! output; the remaining dropped term is constant along each row of S and
//! vanishes under softmax.

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which of the three smoothing transforms are enabled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothingFlags {
    pub q: bool,
    pub k: bool,
    pub v: bool,
}

impl SmoothingFlags {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn qk() -> Self {
        Self { q: true, k: true, v: false }
    }

    pub fn any(&self) -> bool {
        self.q || self.k || self.v
    }
}

/// Correction terms produced by preprocessing: the per-block Q means, the
/// global K mean, the V channel mean, and the materialized ΔS rows.
#[derive(Debug, Clone)]
pub struct SmoothingState {
    /// One mean row per Q block (n_q_blocks × d).
    pub q_bar: Option<Tensor>,
    /// Column mean of all of K (length d).
    pub k_bar: Option<Vec<f64>>,
    /// Channel mean of V (length d), added back to the output.
    pub v_mean: Option<Vec<f64>>,
    /// Row i holds q̄_i·γ(K)^T over all key tokens (n_q_blocks × n_kv);
    /// the slice for key block j is broadcast to the b_q rows of S_ij.
    pub delta_s: Option<Tensor>,
    pub mode: SmoothingFlags,
}

impl SmoothingState {
    pub fn empty() -> Self {
        Self {
            q_bar: None,
            k_bar: None,
            v_mean: None,
            delta_s: None,
            mode: SmoothingFlags::none(),
        }
    }
}

/// Subtract the global column mean from K. Returns the smoothed K and the
/// mean row.
pub fn smooth_k(k: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    if k.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let k_bar = k.col_means();
    Ok((k.sub_row_broadcast(&k_bar), k_bar))
}

/// Subtract each block's column mean from its `b_q` tokens; a ragged
/// final block is averaged over the tokens actually present. Returns the
/// smoothed Q and one mean row per block.
pub fn smooth_q(q: &Tensor, b_q: usize) -> Result<(Tensor, Tensor)> {
    if q.is_empty() {
        return Err(Error::EmptyTensor);
    }
    if b_q == 0 {
        return Err(Error::Config("b_q must be positive".into()));
    }
    let n_blocks = q.rows().div_ceil(b_q);
    let mut out = q.clone();
    let mut q_bar = Tensor::zeros(n_blocks, q.cols());
    for b in 0..n_blocks {
        let start = b * b_q;
        let end = ((b + 1) * b_q).min(q.rows());
        let block = q.row_block(start, end);
        let mean = block.col_means();
        for i in start..end {
            for (v, &m) in out.row_mut(i).iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        q_bar.row_mut(b).copy_from_slice(&mean);
    }
    Ok((out, q_bar))
}

/// ΔS row for one (Q-block, K-block) pair: the matrix-vector product
/// q̄_i·K_j'^T, one entry per key token in the block.
pub fn compute_delta_s(q_bar_i: &[f64], k_block: &Tensor) -> Vec<f64> {
    (0..k_block.rows())
        .map(|j| dot(q_bar_i, k_block.row(j)))
        .collect()
}

/// Subtract the channel mean from V; the mean is added back to the
/// output, exact because the normalized softmax rows sum to one.
pub fn smooth_v(v: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    if v.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let v_mean = v.col_means();
    Ok((v.sub_row_broadcast(&v_mean), v_mean))
}

/// SmoothQuant-style per-channel rebalancing: channel j is divided by
/// s_j = max|Q_j|^α / max|K_j|^(1−α) in Q and multiplied by it in K, so
/// Q'K'^T = QK^T exactly in exact arithmetic.
pub fn baseline_smoothquant(q: &Tensor, k: &Tensor, alpha: f64) -> Result<(Tensor, Tensor)> {
    if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
        return Err(Error::Config(format!("alpha must be in (0,1), got {alpha}")));
    }
    if q.cols() != k.cols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} channels", q.cols()),
            got: format!("{} channels", k.cols()),
        });
    }
    let d = q.cols();
    let mut q_max = vec![crate::quantize::ZERO_GROUP_FLOOR; d];
    let mut k_max = vec![crate::quantize::ZERO_GROUP_FLOOR; d];
    for i in 0..q.rows() {
        for (m, &v) in q_max.iter_mut().zip(q.row(i)) {
            *m = m.max(v.abs());
        }
    }
    for i in 0..k.rows() {
        for (m, &v) in k_max.iter_mut().zip(k.row(i)) {
            *m = m.max(v.abs());
        }
    }
    let s: Vec<f64> = q_max
        .iter()
        .zip(&k_max)
        .map(|(&qm, &km)| qm.powf(alpha) / km.powf(1.0 - alpha))
        .collect();
    let mut q_out = q.clone();
    let mut k_out = k.clone();
    for i in 0..q_out.rows() {
        for (v, &sj) in q_out.row_mut(i).iter_mut().zip(&s) {
            *v /= sj;
        }
    }
    for i in 0..k_out.rows() {
        for (v, &sj) in k_out.row_mut(i).iter_mut().zip(&s) {
            *v *= sj;
        }
    }
    Ok((q_out, k_out))
}

/// In-place Walsh–Hadamard transform; `data.len()` must be a power of two.
fn fwht(data: &mut [f64]) {
    let n = data.len();
    let mut h = 1;
    while h < n {
        for start in (0..n).step_by(h * 2) {
            for i in start..start + h {
                let a = data[i];
                let b = data[i + h];
                data[i] = a + b;
                data[i + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Random Hadamard rotation: Q' = Q·(D·H/√d), K' = K·(D·H/√d) with H the
/// Walsh–Hadamard matrix and D a seeded random ±1 diagonal. Because
/// (DH)(DH)^T = d·I, the product Q'K'^T equals QK^T exactly in exact
/// arithmetic.
pub fn baseline_hadamard(q: &Tensor, k: &Tensor, seed: u64) -> Result<(Tensor, Tensor)> {
    let d = q.cols();
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::Config(format!(
            "hadamard transform needs a power-of-two head dim, got {d}"
        )));
    }
    if k.cols() != d {
        return Err(Error::ShapeMismatch {
            expected: format!("{d} channels"),
            got: format!("{} channels", k.cols()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signs: Vec<f64> = (0..d)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let apply = |x: &Tensor| {
        let mut out = x.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for (v, &s) in row.iter_mut().zip(&signs) {
                *v *= s;
            }
            fwht(row);
            for v in row.iter_mut() {
                *v *= inv_sqrt_d;
            }
        }
        out
    };
    Ok((apply(q), apply(k)))
}
