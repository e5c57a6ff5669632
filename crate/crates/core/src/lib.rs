//! Bit-accurate software model of a quantized attention pipeline.
//!
//! The crate simulates, in double precision, every numerical effect of an
//! INT4/INT8 + FP8 attention kernel: number-format emulation with exact
//! rounding and truncation semantics ([`formats`]), scale computation and
//! code generation at every quantization granularity including per-thread
//! ([`quantize`]), outlier-smoothing transforms and their baselines
//! ([`smooth`]), the attention engines themselves ([`attention`]), the
//! accuracy metrics used to compare them ([`metrics`]), and synthetic
//! input generation plus tensor file I/O ([`synth`]).
//!
//! All emulated low-precision values are stored widened into `f64`, so
//! arithmetic between formats is exact up to the emulation itself and the
//! measured error is attributable to the formats, not the implementation.

pub mod attention;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod quantize;
pub mod smooth;
pub mod synth;
pub mod tensor;

pub use attention::{
    attention_oracle, attention_sage2, attention_tiled_fp, Accumulation, AttentionConfig,
    Baseline, PvFormat, QkFormat, QkGranularity, SageDiagnostics, TruncationCadence,
};
pub use error::{Error, Result};
pub use formats::{Fp8Variant, LowPrecisionFormat};
pub use metrics::{aggregate, cos_sim, rel_l1, rmse, Aggregation, Metrics};
pub use quantize::{Granularity, QuantizedTensor, Side};
pub use smooth::{SmoothingFlags, SmoothingState};
pub use synth::{GenSpec, OutlierSpec};
pub use tensor::Tensor;
