//! Manifest-level screening, scoring and ablation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::backbone::{not_found_or_io, BackboneHandle, FeatureStack};
use crate::cache::{extract_cached, FeatureCache};
use crate::confounder::{reproducible_timestamp, screen_channels_at, ConfounderDictionary, ScreeningConfig};
use crate::datasets::{DatasetManifest, PairRecord};
use crate::error::{Error, Result};
use crate::intervention::{sweep, InterventionOutcome, InterventionSpec};
use crate::metrics::{evaluate_scores, Evaluation};
use crate::scoring::{effective_weights, AblationMode, ScoreMapping, ScoringConfig};
use crate::transport::{aggregate, channel_costs, ChannelMetric, DistanceConfig};

/// Feature extraction for manifest runs: optional on-disk cache plus an
/// in-memory memo of reference stacks, which are shared by many pairs.
pub struct FeatureSource<'a> {
    handle: &'a BackboneHandle,
    cache: Option<FeatureCache>,
    refs: Mutex<HashMap<PathBuf, Arc<FeatureStack>>>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| not_found_or_io(path, e))
}

fn dimensions(bytes: &[u8]) -> Result<(u32, u32)> {
    image::ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()?
        .into_dimensions()
        .map_err(|e| Error::Decode(e.to_string()))
}

impl<'a> FeatureSource<'a> {
    pub fn new(handle: &'a BackboneHandle, cache: Option<FeatureCache>) -> Self {
        Self {
            handle,
            cache,
            refs: Mutex::new(HashMap::new()),
        }
    }

    pub fn handle(&self) -> &BackboneHandle {
        self.handle
    }

    pub fn features(&self, bytes: &[u8]) -> Result<FeatureStack> {
        extract_cached(self.handle, bytes, self.cache.as_ref())
    }

    fn reference(&self, path: &Path, bytes: &[u8]) -> Result<Arc<FeatureStack>> {
        if let Some(s) = self.refs.lock().expect("memo poisoned").get(path) {
            return Ok(s.clone());
        }
        let stack = Arc::new(self.features(bytes)?);
        self.refs
            .lock()
            .expect("memo poisoned")
            .insert(path.to_path_buf(), stack.clone());
        Ok(stack)
    }

    /// Reference and distorted stacks of one record.
    pub fn pair(&self, rec: &PairRecord) -> Result<(Arc<FeatureStack>, Arc<FeatureStack>)> {
        let ref_bytes = read_bytes(&rec.ref_path)?;
        let dist_bytes = read_bytes(&rec.dist_path)?;
        let (rw, rh) = dimensions(&ref_bytes)?;
        let (dw, dh) = dimensions(&dist_bytes)?;
        if (rw, rh) != (dw, dh) {
            return Err(Error::DimMismatchBetweenPair {
                ref_h: rh as usize,
                ref_w: rw as usize,
                dist_h: dh as usize,
                dist_w: dw as usize,
            });
        }
        let f_ref = self.reference(&rec.ref_path, &ref_bytes)?;
        let f_dist = if ref_bytes == dist_bytes {
            f_ref.clone()
        } else {
            Arc::new(self.features(&dist_bytes)?)
        };
        Ok((f_ref, f_dist))
    }
}

/// Intervention sweep of every calibration pair, in manifest order.
pub fn sweep_manifest(
    src: &FeatureSource<'_>,
    manifest: &DatasetManifest,
    spec: &InterventionSpec,
    dist: &DistanceConfig,
) -> Result<Vec<InterventionOutcome>> {
    if manifest.records.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    spec.validate()?;
    manifest
        .records
        .par_iter()
        .map(|rec| {
            let (f_ref, f_dist) = src.pair(rec)?;
            sweep(&f_ref, &f_dist, spec, dist)
        })
        .collect()
}

/// Build a confounder dictionary from a calibration manifest. The timestamp
/// defaults to [`reproducible_timestamp`].
pub fn screen_manifest(
    src: &FeatureSource<'_>,
    manifest: &DatasetManifest,
    spec: &InterventionSpec,
    dist: &DistanceConfig,
    screening: &ScreeningConfig,
    timestamp: Option<&str>,
) -> Result<ConfounderDictionary> {
    let outcomes = sweep_manifest(src, manifest, spec, dist)?;
    let ts = timestamp.map(str::to_owned).unwrap_or_else(reproducible_timestamp);
    let dict = screen_channels_at(&outcomes, screening, &ts)?;
    let total: usize = dict.channel_counts().iter().sum();
    if dict.total_causal() * 10 < total {
        log::warn!(
            "screening kept {} of {total} channels; the dictionary is nearly empty",
            dict.total_causal()
        );
    }
    Ok(dict)
}

/// Unweighted per-channel costs of every pair, in manifest order.
pub fn manifest_channel_costs(
    src: &FeatureSource<'_>,
    manifest: &DatasetManifest,
    metric: ChannelMetric,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if manifest.records.is_empty() {
        return Err(Error::EmptyManifest);
    }
    manifest
        .records
        .par_iter()
        .map(|rec| {
            let (f_ref, f_dist) = src.pair(rec)?;
            channel_costs(&f_ref, &f_dist, metric)
        })
        .collect()
}

/// Scores of precomputed channel costs under one ablation mode.
pub fn scores_from_costs(
    costs: &[Vec<Vec<f64>>],
    backbone_id: &str,
    dict: Option<&ConfounderDictionary>,
    cfg: &ScoringConfig,
) -> Result<Vec<f64>> {
    let first = costs.first().ok_or(Error::EmptyManifest)?;
    let counts: Vec<usize> = first.iter().map(Vec::len).collect();
    let weights = effective_weights(cfg.ablation_mode, dict, backbone_id, &counts)?;
    costs
        .iter()
        .map(|c| {
            let total = aggregate(c.clone(), &weights, &cfg.distance)?.total;
            Ok(match cfg.mapping {
                ScoreMapping::Identity => total,
                ScoreMapping::Negate => -total,
            })
        })
        .collect()
}

fn lower_better(cfg: &ScoringConfig) -> bool {
    cfg.mapping == ScoreMapping::Identity
}

/// Score a normalized manifest and correlate with its MOS.
pub fn benchmark_manifest(
    src: &FeatureSource<'_>,
    manifest: &DatasetManifest,
    dict: Option<&ConfounderDictionary>,
    cfg: &ScoringConfig,
) -> Result<(Vec<f64>, Evaluation)> {
    require_normalized(manifest)?;
    let costs = manifest_channel_costs(src, manifest, cfg.distance.per_channel_metric)?;
    let scores = scores_from_costs(&costs, src.handle().id(), dict, cfg)?;
    let eval = evaluate_scores(&manifest.mos_norm(), &scores, lower_better(cfg))?;
    Ok((scores, eval))
}

fn require_normalized(manifest: &DatasetManifest) -> Result<()> {
    if manifest.records.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if !manifest.normalized {
        return Err(Error::InvalidConfig("manifest must be normalized before evaluation".into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub scores: Vec<f64>,
    pub evaluation: Evaluation,
}

/// Evaluate θ, γ and η on one manifest, sharing the per-channel costs.
pub fn ablate_manifest(
    src: &FeatureSource<'_>,
    manifest: &DatasetManifest,
    dict: &ConfounderDictionary,
    base: &ScoringConfig,
) -> Result<Vec<AblationRow>> {
    require_normalized(manifest)?;
    let costs = manifest_channel_costs(src, manifest, base.distance.per_channel_metric)?;
    ablate_costs(&costs, &manifest.mos_norm(), src.handle().id(), dict, base)
}

/// Modes whose channel set is empty under `dict` are skipped with a warning.
pub fn ablate_costs(
    costs: &[Vec<Vec<f64>>],
    mos_norm: &[f64],
    backbone_id: &str,
    dict: &ConfounderDictionary,
    base: &ScoringConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &mode in AblationMode::ALL.iter() {
        let cfg = ScoringConfig {
            ablation_mode: mode,
            ..base.clone()
        };
        let scores = match scores_from_costs(costs, backbone_id, Some(dict), &cfg) {
            Err(Error::EmptyCausalSet) => {
                log::warn!("{} selects no channels under this dictionary, skipped", mode.short_name());
                continue;
            }
            r => r?,
        };
        let evaluation = evaluate_scores(mos_norm, &scores, lower_better(&cfg))?;
        rows.push(AblationRow {
            mode,
            scores,
            evaluation,
        });
    }
    Ok(rows)
}
