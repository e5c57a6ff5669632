//! Named attention configurations and the ablation axis row sets.

use qattn_core::{
    Accumulation, AttentionConfig, Baseline, PvFormat, QkFormat, QkGranularity, SmoothingFlags,
};

/// Resolve a named variant. Granularity-named variants are
/// quantization-only (no smoothing); the kernel-named variants carry
/// their full technique stacks.
pub fn resolve(name: &str) -> Option<AttentionConfig> {
    let cfg = match name {
        "fp-exact" => AttentionConfig::exact(),
        // INT4 per-thread, FP8 P/V, two-level accumulation, smooth Q+K.
        "sage2-4b" => AttentionConfig::default(),
        // INT8 per-thread variant: every technique except Q smoothing.
        "sage2-8b" => AttentionConfig {
            qk_format: QkFormat::Int8,
            smoothing: SmoothingFlags { q: false, k: true, v: false },
            ..AttentionConfig::default()
        },
        "per-token-int4" => granularity_only(QkGranularity::PerToken),
        "per-thread-int4" => granularity_only(QkGranularity::PerThread),
        "per-block-int4" => granularity_only(QkGranularity::PerBlock),
        "per-tensor-int4" => granularity_only(QkGranularity::PerTensor),
        "hadamard-int4" => AttentionConfig {
            baseline: Baseline::Hadamard,
            smoothing: SmoothingFlags::none(),
            ..AttentionConfig::default()
        },
        "smoothquant-int4" => AttentionConfig {
            baseline: Baseline::SmoothQuant,
            smoothing: SmoothingFlags::none(),
            ..AttentionConfig::default()
        },
        "smooth-k-int4" => AttentionConfig {
            smoothing: SmoothingFlags { q: false, k: true, v: false },
            ..AttentionConfig::default()
        },
        "smooth-q-int4" => AttentionConfig {
            smoothing: SmoothingFlags { q: true, k: false, v: false },
            ..AttentionConfig::default()
        },
        _ => return None,
    };
    Some(cfg)
}

fn granularity_only(g: QkGranularity) -> AttentionConfig {
    AttentionConfig {
        qk_granularity: g,
        smoothing: SmoothingFlags::none(),
        ..AttentionConfig::default()
    }
}

pub fn known_variants() -> &'static [&'static str] {
    &[
        "fp-exact",
        "sage2-4b",
        "sage2-8b",
        "per-token-int4",
        "per-thread-int4",
        "per-block-int4",
        "per-tensor-int4",
        "hadamard-int4",
        "smoothquant-int4",
        "smooth-k-int4",
        "smooth-q-int4",
    ]
}

/// Rows for one ablation axis, derived from a base configuration. Row
/// labels mirror the comparison tables they reproduce.
pub fn ablation_rows(axis: &str, base: &AttentionConfig) -> Option<Vec<(String, AttentionConfig)>> {
    let rows = match axis {
        "granularity" => [
            ("per-token", QkGranularity::PerToken),
            ("per-thread", QkGranularity::PerThread),
            ("per-block", QkGranularity::PerBlock),
            ("per-tensor", QkGranularity::PerTensor),
        ]
        .into_iter()
        .map(|(name, g)| {
            (name.to_string(), AttentionConfig { qk_granularity: g, ..base.clone() })
        })
        .collect(),
        "smoothing" => {
            let with = |smoothing: SmoothingFlags, baseline: Baseline| AttentionConfig {
                smoothing,
                baseline,
                ..base.clone()
            };
            vec![
                ("None".to_string(), with(SmoothingFlags::none(), Baseline::None)),
                ("HadmdAttn".to_string(), with(SmoothingFlags::none(), Baseline::Hadamard)),
                ("SmoothAttn".to_string(), with(SmoothingFlags::none(), Baseline::SmoothQuant)),
                (
                    "Smooth K".to_string(),
                    with(SmoothingFlags { q: false, k: true, v: false }, Baseline::None),
                ),
                (
                    "Smooth Q".to_string(),
                    with(SmoothingFlags { q: true, k: false, v: false }, Baseline::None),
                ),
                ("Smooth Q+K".to_string(), with(SmoothingFlags::qk(), Baseline::None)),
            ]
        }
        // The P/V data-type comparison runs with a wide exact
        // accumulator so only the formats differ.
        "pv_format" => [
            ("INT8", PvFormat::Int8),
            ("E5M2", PvFormat::E5m2),
            ("E4M3", PvFormat::E4m3),
            ("FP16", PvFormat::Fp16),
        ]
        .into_iter()
        .map(|(name, pv)| {
            (
                name.to_string(),
                AttentionConfig {
                    pv_format: pv,
                    accumulation: Accumulation::Fp32Exact,
                    ..base.clone()
                },
            )
        })
        .collect(),
        "accumulation" => {
            // FP22 emulation models the FP8 matmul path, so pin an FP8
            // P/V format when the base uses something else.
            let pv = match base.pv_format {
                PvFormat::E4m3 | PvFormat::E5m2 => base.pv_format,
                _ => PvFormat::E4m3,
            };
            [
                ("FP32-exact", Accumulation::Fp32Exact),
                ("FP22-two-level", Accumulation::Fp22TwoLevel),
                ("FP22-single-level", Accumulation::Fp22SingleLevel),
            ]
            .into_iter()
            .map(|(name, acc)| {
                (
                    name.to_string(),
                    AttentionConfig { accumulation: acc, pv_format: pv, ..base.clone() },
                )
            })
            .collect()
        }
        _ => return None,
    };
    Some(rows)
}

pub const ABLATION_AXES: &[&str] = &["granularity", "pv_format", "smoothing", "accumulation"];
