//! Accuracy metrics comparing a quantized attention output against the
//! exact reference: cosine similarity, relative L1 distance, and RMSE,
//! all computed on the row-major flattened tensors in double precision.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// The three accuracy metrics for one (reference, candidate) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub cos_sim: f64,
    pub rel_l1: f64,
    pub rmse: f64,
}

impl Metrics {
    pub fn compare(reference: &Tensor, candidate: &Tensor) -> Result<Self> {
        Ok(Self {
            cos_sim: cos_sim(reference, candidate)?,
            rel_l1: rel_l1(reference, candidate)?,
            rmse: rmse(reference, candidate)?,
        })
    }
}

/// How a set of per-trial metrics is collapsed into one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Worst,
}

fn check_shapes(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", a.rows(), b.rows()),
            got: format!("{}x{}", b.rows(), b.cols()),
        });
    }
    Ok(())
}

/// Σ O·O' / (√Σ O² · √Σ O'²) over the flattened tensors.
pub fn cos_sim(o: &Tensor, o2: &Tensor) -> Result<f64> {
    check_shapes(o, o2)?;
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&a, &b) in o.iter().zip(o2.iter()) {
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if na == 0.0 && nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Σ |O − O'| / Σ |O|.
pub fn rel_l1(o: &Tensor, o2: &Tensor) -> Result<f64> {
    check_shapes(o, o2)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&a, &b) in o.iter().zip(o2.iter()) {
        num += (a - b).abs();
        den += a.abs();
    }
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(num / den)
}

/// √((1/n)·Σ (O − O')²).
pub fn rmse(o: &Tensor, o2: &Tensor) -> Result<f64> {
    check_shapes(o, o2)?;
    let n = (o.rows() * o.cols()) as f64;
    let sum: f64 = o
        .iter()
        .zip(o2.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok((sum / n).sqrt())
}

/// Mean averages each metric across trials; worst takes the minimum
/// cosine similarity and the maximum L1 and RMSE.
pub fn aggregate(reports: &[Metrics], mode: Aggregation) -> Option<Metrics> {
    if reports.is_empty() {
        return None;
    }
    Some(match mode {
        Aggregation::Mean => {
            let n = reports.len() as f64;
            Metrics {
                cos_sim: reports.iter().map(|r| r.cos_sim).sum::<f64>() / n,
                rel_l1: reports.iter().map(|r| r.rel_l1).sum::<f64>() / n,
                rmse: reports.iter().map(|r| r.rmse).sum::<f64>() / n,
            }
        }
        Aggregation::Worst => Metrics {
            cos_sim: reports.iter().map(|r| r.cos_sim).fold(f64::INFINITY, f64::min),
            rel_l1: reports.iter().map(|r| r.rel_l1).fold(0.0, f64::max),
            rmse: reports.iter().map(|r| r.rmse).fold(0.0, f64::max),
        },
    })
}
