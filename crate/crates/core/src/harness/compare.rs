//! AR-initialized vs randomly initialized diffusion training.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::{config_diff, RunConfig};
use super::metrics::MetricsRow;
use super::train::train;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub ar_init_metrics: PathBuf,
    pub scratch_metrics: PathBuf,
    /// Log points at or before this step are warmup and not scored.
    pub warmup_until: u64,
    pub points: usize,
    /// Points where the AR-initialized training loss is <= scratch.
    pub ar_init_wins: usize,
    pub fraction: f64,
    pub heldout_points: usize,
    pub heldout_wins: usize,
    pub heldout_fraction: Option<f64>,
    pub ar_init_first_loss: f64,
    pub scratch_first_loss: f64,
}

/// Both runs must be diffusion runs, identical except that the first has an
/// init checkpoint and the second does not.
pub fn validate_pair(ar_init: &RunConfig, scratch: &RunConfig) -> Result<()> {
    if !ar_init.mode.is_diffusion() || !scratch.mode.is_diffusion() {
        return Err(Error::Usage(
            "compare_init needs two diffusion-mode configs".into(),
        ));
    }
    if ar_init.init_checkpoint.is_none() {
        return Err(Error::Usage(
            "the AR-init config has no init_checkpoint".into(),
        ));
    }
    if scratch.init_checkpoint.is_some() {
        return Err(Error::Usage(
            "the scratch config must not set init_checkpoint".into(),
        ));
    }
    let extra: Vec<String> = config_diff(ar_init, scratch)
        .into_iter()
        .filter(|p| p != "init_checkpoint")
        .collect();
    if !extra.is_empty() {
        return Err(Error::Usage(format!(
            "configs differ beyond init: {}",
            extra.join(", ")
        )));
    }
    Ok(())
}

/// Score paired metrics: the share of post-warmup log points where the
/// AR-initialized run's loss is no higher.
pub fn summarize(
    ar: &[MetricsRow],
    scratch: &[MetricsRow],
    total_steps: u64,
) -> Result<CompareSummary> {
    if ar.len() != scratch.len() || ar.iter().zip(scratch).any(|(a, b)| a.step != b.step) {
        return Err(Error::Data("metrics logs are not aligned by step".into()));
    }
    let warmup_until = total_steps / 10;
    let scored: Vec<(&MetricsRow, &MetricsRow)> = ar
        .iter()
        .zip(scratch)
        .filter(|(a, _)| a.step > warmup_until)
        .collect();
    let wins = scored.iter().filter(|(a, b)| a.loss <= b.loss).count();
    let heldout: Vec<(f64, f64)> = scored
        .iter()
        .filter_map(|(a, b)| Some((a.heldout_loss?, b.heldout_loss?)))
        .collect();
    let heldout_wins = heldout.iter().filter(|(a, b)| a <= b).count();
    Ok(CompareSummary {
        ar_init_metrics: PathBuf::new(),
        scratch_metrics: PathBuf::new(),
        warmup_until,
        points: scored.len(),
        ar_init_wins: wins,
        fraction: if scored.is_empty() {
            0.0
        } else {
            wins as f64 / scored.len() as f64
        },
        heldout_points: heldout.len(),
        heldout_wins,
        heldout_fraction: (!heldout.is_empty()).then(|| heldout_wins as f64 / heldout.len() as f64),
        ar_init_first_loss: ar.first().map_or(f64::NAN, |r| r.loss),
        scratch_first_loss: scratch.first().map_or(f64::NAN, |r| r.loss),
    })
}

/// Train both runs under `out_dir/ar_init` and `out_dir/scratch` and write
/// `out_dir/summary.json`.
pub fn compare_init(
    ar_init: &RunConfig,
    scratch: &RunConfig,
    out_dir: &Path,
) -> Result<CompareSummary> {
    validate_pair(ar_init, scratch)?;
    let a = train(ar_init, &out_dir.join("ar_init"))?;
    let b = train(scratch, &out_dir.join("scratch"))?;
    let mut summary = summarize(&a.rows, &b.rows, ar_init.total_steps)?;
    summary.ar_init_metrics = a.metrics_path;
    summary.scratch_metrics = b.metrics_path;
    let path = out_dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::TrainMode;

    #[test]
    fn pair_validation() {
        let scratch =
            RunConfig::countdown_default(TrainMode::DiffusionPretrain, "t.jsonl".into(), None);
        let mut ar = scratch.clone();
        ar.init_checkpoint = Some("ar.ckpt".into());
        validate_pair(&ar, &scratch).unwrap();

        ar.optim.adamw.lr *= 10.0;
        let err = validate_pair(&ar, &scratch).unwrap_err().to_string();
        assert!(err.contains("optim.lr"), "{err}");
        assert!(validate_pair(&scratch, &scratch).is_err());
    }
}
