//! End-to-end quality prediction and the ablation modes.
//!
//! Scores are distances: 0 for identical images, larger for worse quality.

use serde::{Deserialize, Serialize};

use crate::backbone::{preprocess, BackboneHandle, FeatureStack};
use crate::confounder::{complement, ConfounderDictionary};
use crate::error::{Error, Result};
use crate::intervention::{apply_intervention_scaled, stage_std, InterventionSpec};
use crate::transport::{cot_distance_weights, DistanceConfig, TransportResult};

/// Which channel set the score is computed over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Every channel of the pretrained backbone.
    ThetaAll,
    /// Only the channels recorded as causal in the dictionary.
    #[default]
    GammaCausal,
    /// Only the channels the dictionary excludes.
    EtaComplement,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::ThetaAll, AblationMode::GammaCausal, AblationMode::EtaComplement];

    pub fn short_name(self) -> &'static str {
        match self {
            AblationMode::ThetaAll => "theta",
            AblationMode::GammaCausal => "gamma",
            AblationMode::EtaComplement => "eta",
        }
    }

    pub fn needs_dictionary(self) -> bool {
        self != AblationMode::ThetaAll
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theta" | "theta_all" => Ok(AblationMode::ThetaAll),
            "gamma" | "gamma_causal" => Ok(AblationMode::GammaCausal),
            "eta" | "eta_complement" => Ok(AblationMode::EtaComplement),
            other => Err(Error::InvalidConfig(format!("unknown ablation mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMapping {
    #[default]
    Identity,
    Negate,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    #[serde(default)]
    pub ablation_mode: AblationMode,
    #[serde(default)]
    pub distance: DistanceConfig,
    #[serde(default)]
    pub mapping: ScoreMapping,
}

impl ScoringConfig {
    pub fn with_mode(mode: AblationMode) -> Self {
        Self {
            ablation_mode: mode,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub value: f64,
    pub per_stage: Vec<f64>,
    pub mode: AblationMode,
    pub backbone_id: String,
}

/// Channel weights used by `mode`.
pub fn effective_weights(
    mode: AblationMode,
    dict: Option<&ConfounderDictionary>,
    backbone_id: &str,
    channel_counts: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if mode == AblationMode::ThetaAll {
        return Ok(channel_counts.iter().map(|c| vec![1.0; *c]).collect());
    }
    let dict = dict.ok_or_else(|| {
        Error::InvalidConfig(format!("mode {} requires a confounder dictionary", mode.short_name()))
    })?;
    dict.check_matches(backbone_id, channel_counts)?;
    Ok(match mode {
        AblationMode::GammaCausal => dict.weights.clone(),
        _ => complement(dict).weights,
    })
}

fn map_value(total: f64, mapping: ScoreMapping) -> f64 {
    match mapping {
        ScoreMapping::Identity => total,
        ScoreMapping::Negate => -total,
    }
}

/// Score two precomputed feature stacks.
pub fn score_stacks(
    f_ref: &FeatureStack,
    f_dist: &FeatureStack,
    dict: Option<&ConfounderDictionary>,
    cfg: &ScoringConfig,
) -> Result<(QualityScore, TransportResult)> {
    f_ref.ensure_compatible(f_dist)?;
    let weights = effective_weights(cfg.ablation_mode, dict, &f_ref.backbone_id, &f_ref.channel_counts())?;
    let transport = cot_distance_weights(f_ref, f_dist, &weights, &cfg.distance)?;
    let score = QualityScore {
        value: map_value(transport.total, cfg.mapping),
        per_stage: transport.per_stage_cost.clone(),
        mode: cfg.ablation_mode,
        backbone_id: f_ref.backbone_id.clone(),
    };
    Ok((score, transport))
}

/// Decode both images, extract features and check the pair has equal dimensions.
pub fn extract_pair(ref_bytes: &[u8], dist_bytes: &[u8], handle: &BackboneHandle) -> Result<(FeatureStack, FeatureStack)> {
    let spec = handle.spec();
    let ref_img = preprocess(ref_bytes, spec)?;
    let dist_img = preprocess(dist_bytes, spec)?;
    if ref_img.source_dims != dist_img.source_dims {
        return Err(Error::DimMismatchBetweenPair {
            ref_h: ref_img.height(),
            ref_w: ref_img.width(),
            dist_h: dist_img.height(),
            dist_w: dist_img.width(),
        });
    }
    let f_ref = handle.extract_features(&ref_img)?;
    let f_dist = if ref_bytes == dist_bytes {
        f_ref.clone()
    } else {
        handle.extract_features(&dist_img)?
    };
    Ok((f_ref, f_dist))
}

/// Predict the quality distance of `dist` against `ref`.
pub fn predict_quality(
    ref_bytes: &[u8],
    dist_bytes: &[u8],
    handle: &BackboneHandle,
    dict: Option<&ConfounderDictionary>,
    cfg: &ScoringConfig,
) -> Result<QualityScore> {
    if cfg.ablation_mode.needs_dictionary() && dict.is_none() {
        return Err(Error::InvalidConfig(format!(
            "mode {} requires a confounder dictionary",
            cfg.ablation_mode.short_name()
        )));
    }
    let (f_ref, f_dist) = extract_pair(ref_bytes, dist_bytes, handle)?;
    Ok(score_stacks(&f_ref, &f_dist, dict, cfg)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub baseline_score: f64,
    /// Largest |Q' - Q| / Q over positive intensities and draws (0 when Q = 0).
    pub max_score_deviation: f64,
    /// Largest relative deviation at each intensity of the grid.
    pub per_intensity: Vec<f64>,
}

/// Re-score intervened stacks under the mode's channel set and report how far
/// the score moves. Diagnostic only.
pub fn invariance_from_stacks(
    f_ref: &FeatureStack,
    f_dist: &FeatureStack,
    dict: Option<&ConfounderDictionary>,
    cfg: &ScoringConfig,
    spec: &InterventionSpec,
) -> Result<InvarianceReport> {
    spec.validate()?;
    let (base, _) = score_stacks(f_ref, f_dist, dict, cfg)?;
    let weights = effective_weights(cfg.ablation_mode, dict, &f_ref.backbone_id, &f_ref.channel_counts())?;
    let scales = if spec.relative_to_stage_std {
        stage_std(f_ref)
    } else {
        vec![1.0; f_ref.num_stages()]
    };
    let mut per_intensity = vec![0.0; spec.intensity_grid.len()];
    for (k, _) in spec.positive_intensities() {
        for d in 0..spec.draws_per_intensity {
            let pi = apply_intervention_scaled(f_ref, spec, k, d, &scales)?;
            let pd = apply_intervention_scaled(f_dist, spec, k, d, &scales)?;
            let q = map_value(cot_distance_weights(&pi, &pd, &weights, &cfg.distance)?.total, cfg.mapping);
            let dev = if base.value == 0.0 {
                0.0
            } else {
                ((q - base.value) / base.value).abs()
            };
            per_intensity[k] = f64::max(per_intensity[k], dev);
        }
    }
    Ok(InvarianceReport {
        baseline_score: base.value,
        max_score_deviation: per_intensity.iter().copied().fold(0.0, f64::max),
        per_intensity,
    })
}

pub fn regression_invariance_check(
    ref_bytes: &[u8],
    dist_bytes: &[u8],
    handle: &BackboneHandle,
    dict: Option<&ConfounderDictionary>,
    cfg: &ScoringConfig,
    spec: &InterventionSpec,
) -> Result<InvarianceReport> {
    let (f_ref, f_dist) = extract_pair(ref_bytes, dist_bytes, handle)?;
    invariance_from_stacks(&f_ref, &f_dist, dict, cfg, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn toy() -> (FeatureStack, FeatureStack) {
        let a = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c + y * 4 + x) as f32 * 0.25);
        let b = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c * 2 + y * 3 + x) as f32 * 0.3);
        (FeatureStack::new("toy", vec![a]), FeatureStack::new("toy", vec![b]))
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("gamma".parse::<AblationMode>().unwrap(), AblationMode::GammaCausal);
        assert_eq!("theta_all".parse::<AblationMode>().unwrap(), AblationMode::ThetaAll);
        assert!("delta".parse::<AblationMode>().is_err());
    }

    #[test]
    fn gamma_requires_dictionary() {
        let (a, b) = toy();
        let r = score_stacks(&a, &b, None, &ScoringConfig::with_mode(AblationMode::GammaCausal));
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
        assert!(score_stacks(&a, &b, None, &ScoringConfig::with_mode(AblationMode::ThetaAll)).is_ok());
    }

    #[test]
    fn all_ones_gamma_equals_theta() {
        let (a, b) = toy();
        let ones = ConfounderDictionary::all_ones("toy", &[3]);
        let g = score_stacks(&a, &b, Some(&ones), &ScoringConfig::with_mode(AblationMode::GammaCausal)).unwrap();
        let t = score_stacks(&a, &b, None, &ScoringConfig::with_mode(AblationMode::ThetaAll)).unwrap();
        assert_eq!(g.0.value, t.0.value);
    }

    #[test]
    fn negate_mapping() {
        let (a, b) = toy();
        let cfg = ScoringConfig {
            ablation_mode: AblationMode::ThetaAll,
            mapping: ScoreMapping::Negate,
            ..Default::default()
        };
        let (s, t) = score_stacks(&a, &b, None, &cfg).unwrap();
        assert_eq!(s.value, -t.total);
    }

    #[test]
    fn grid_of_zero_only_has_no_deviation() {
        let (a, b) = toy();
        let spec = InterventionSpec {
            intensity_grid: vec![0.0],
            ..Default::default()
        };
        let r = invariance_from_stacks(&a, &b, None, &ScoringConfig::with_mode(AblationMode::ThetaAll), &spec).unwrap();
        assert_eq!(r.max_score_deviation, 0.0);
    }

    #[test]
    fn identical_stacks_report_zero() {
        let (a, _) = toy();
        let r = invariance_from_stacks(
            &a,
            &a,
            None,
            &ScoringConfig::with_mode(AblationMode::ThetaAll),
            &InterventionSpec::default(),
        )
        .unwrap();
        assert_eq!(r.baseline_score, 0.0);
        assert_eq!(r.max_score_deviation, 0.0);
    }
}
