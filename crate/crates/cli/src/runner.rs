//! Sweep execution: fan trials out over a worker pool, compare each
//! variant against the exact oracle, and merge results in (variant,
//! trial) order regardless of completion order.

use crate::config::{InputSource, RunConfig};
use crate::report::{Report, ReportRow};
use crate::variants;
use qattn_core::{
    aggregate, attention_oracle, attention_sage2, synth, Aggregation, AttentionConfig, GenSpec,
    Metrics, Tensor,
};
use rayon::prelude::*;

#[derive(Debug)]
pub enum AppError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Config(msg) => write!(f, "config error: {msg}"),
            AppError::Runtime(msg) => write!(f, "runtime error: {msg}"),
        }
    }
}

impl std::error::Error for AppError {}

/// Worker pool size: QATTN_THREADS wins, then the config field, then
/// rayon's default.
fn build_pool(cfg: &RunConfig) -> Result<rayon::ThreadPool, AppError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    let threads = std::env::var("QATTN_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .or(cfg.parallelism);
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    builder
        .build()
        .map_err(|e| AppError::Runtime(format!("failed to build worker pool: {e}")))
}

fn resolve_variants(names: &[String]) -> Result<Vec<(String, AttentionConfig)>, AppError> {
    names
        .iter()
        .map(|name| {
            variants::resolve(name)
                .map(|cfg| (name.clone(), cfg))
                .ok_or_else(|| {
                    AppError::Config(format!(
                        "unknown variant name '{name}' (known: {})",
                        variants::known_variants().join(", ")
                    ))
                })
        })
        .collect()
}

fn trial_inputs(
    source: &InputSource,
    base_seed: u64,
    trial: usize,
) -> Result<(Tensor, Tensor, Tensor), AppError> {
    match source {
        InputSource::Gen(spec) => {
            let spec = GenSpec { seed: base_seed + trial as u64, ..spec.clone() };
            synth::gen_qkv(&spec).map_err(|e| AppError::Config(format!("generation spec: {e}")))
        }
        InputSource::Files(paths) => {
            let q = synth::load_tensor(&paths.q)
                .map_err(|e| AppError::Runtime(format!("loading {}: {e}", paths.q.display())))?;
            let k = synth::load_tensor(&paths.k)
                .map_err(|e| AppError::Runtime(format!("loading {}: {e}", paths.k.display())))?;
            let v = synth::load_tensor(&paths.v)
                .map_err(|e| AppError::Runtime(format!("loading {}: {e}", paths.v.display())))?;
            Ok((q, k, v))
        }
    }
}

fn sweep(
    cfg: &RunConfig,
    rows: &[(String, AttentionConfig)],
) -> Result<Report, AppError> {
    let pool = build_pool(cfg)?;
    let source = cfg.input_source();
    let verbose = std::env::var("QATTN_VERBOSE").is_ok();

    // [trial][variant] metrics, computed in parallel over trials, then
    // merged in index order.
    let per_trial: Result<Vec<Vec<Metrics>>, AppError> = pool.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|trial| {
                let (q, k, v) = trial_inputs(&source, cfg.seed, trial)?;
                let oracle = attention_oracle(&q, &k, &v, cfg.causal)
                    .map_err(|e| AppError::Runtime(format!("oracle: {e}")))?;
                rows.iter()
                    .map(|(name, var_cfg)| {
                        let var_cfg = AttentionConfig { causal: cfg.causal, ..var_cfg.clone() };
                        let (out, _, _) = attention_sage2(&q, &k, &v, &var_cfg)
                            .map_err(|e| AppError::Runtime(format!("variant '{name}': {e}")))?;
                        let m = Metrics::compare(&oracle, &out)
                            .map_err(|e| AppError::Runtime(format!("metrics '{name}': {e}")))?;
                        if verbose {
                            eprintln!(
                                "trial {trial} {name}: cos {:.6} l1 {:.6} rmse {:.6}",
                                m.cos_sim, m.rel_l1, m.rmse
                            );
                        }
                        Ok(m)
                    })
                    .collect()
            })
            .collect()
    });
    let per_trial = per_trial?;

    let report_rows = rows
        .iter()
        .enumerate()
        .map(|(vi, (name, _))| {
            let trials: Vec<Metrics> = per_trial.iter().map(|t| t[vi]).collect();
            ReportRow {
                variant: name.clone(),
                trials: trials.len(),
                mean: aggregate(&trials, Aggregation::Mean).expect("at least one trial"),
                worst: aggregate(&trials, Aggregation::Worst).expect("at least one trial"),
            }
        })
        .collect();
    Ok(Report { rows: report_rows })
}

/// `run`: evaluate every named variant over every trial.
pub fn execute_run(cfg: &RunConfig) -> Result<Report, AppError> {
    cfg.validate().map_err(AppError::Config)?;
    let rows = resolve_variants(&cfg.variants)?;
    sweep(cfg, &rows)
}

/// `ablate`: sweep one configuration axis starting from the first named
/// variant as the base.
pub fn execute_ablate(cfg: &RunConfig, axis: &str) -> Result<Report, AppError> {
    cfg.validate().map_err(AppError::Config)?;
    let base = resolve_variants(&cfg.variants)?
        .into_iter()
        .next()
        .expect("validated non-empty")
        .1;
    let rows = variants::ablation_rows(axis, &base).ok_or_else(|| {
        AppError::Config(format!(
            "unknown axis '{axis}' (known: {})",
            variants::ABLATION_AXES.join(", ")
        ))
    })?;
    sweep(cfg, &rows)
}

/// `gen`: write q.qatn / k.qatn / v.qatn for a generation spec.
pub fn execute_gen(spec: &GenSpec, dir: &std::path::Path) -> Result<(), AppError> {
    let (q, k, v) = synth::gen_qkv(spec)
        .map_err(|e| AppError::Config(format!("generation spec: {e}")))?;
    std::fs::create_dir_all(dir)
        .map_err(|e| AppError::Runtime(format!("creating {}: {e}", dir.display())))?;
    for (name, t) in [("q.qatn", &q), ("k.qatn", &k), ("v.qatn", &v)] {
        let path = dir.join(name);
        synth::save_tensor(&path, t)
            .map_err(|e| AppError::Runtime(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}
