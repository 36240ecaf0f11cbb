//! Feature-space interventions and the invariance statistic.
//!
//! An intervention perturbs every channel of a feature stack with a seeded
//! realization that depends only on the master seed, the (stage, channel,
//! intensity, draw) indices and the channel's shape. Applying the same
//! intervention to the reference and distorted stacks therefore uses the
//! same realization for both. The invariance statistic of a channel is the
//! reference/distorted distance before the intervention minus the distance
//! after it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::FeatureStack;
use crate::error::{Error, Result};
use crate::transport::{channel_cost_f32, channel_costs, ChannelMetric, DistanceConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    /// Adds N(0, σ²) noise elementwise.
    #[default]
    AdditiveGaussian,
    /// Multiplies each channel by (1 + ε·u), u ~ U(-1, 1) per channel.
    ChannelScale,
    /// Zeroes each channel with probability p.
    ChannelDropout,
}

fn default_relative() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub kind: InterventionKind,
    pub intensity_grid: Vec<f64>,
    pub draws_per_intensity: usize,
    pub master_seed: u64,
    /// Scale additive noise by the per-stage standard deviation of the
    /// reference stack.
    #[serde(default = "default_relative")]
    pub relative_to_stage_std: bool,
}

impl Default for InterventionSpec {
    fn default() -> Self {
        Self {
            kind: InterventionKind::AdditiveGaussian,
            intensity_grid: vec![0.0, 0.05, 0.1, 0.2, 0.4],
            draws_per_intensity: 2,
            master_seed: 0,
            relative_to_stage_std: true,
        }
    }
}

impl InterventionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.intensity_grid.is_empty() {
            return Err(Error::InvalidConfig("intensity grid is empty".into()));
        }
        if self.intensity_grid.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidConfig("intensities must be finite and non-negative".into()));
        }
        if self.intensity_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("intensity grid must be strictly increasing".into()));
        }
        if self.draws_per_intensity == 0 {
            return Err(Error::InvalidConfig("draws_per_intensity must be >= 1".into()));
        }
        if self.kind == InterventionKind::ChannelDropout && self.intensity_grid.iter().any(|p| *p > 1.0) {
            return Err(Error::InvalidConfig("dropout probabilities must be <= 1".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| crate::backbone::not_found_or_io(path, e))?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    /// Stable 64-bit digest of the canonical JSON, as 16 hex digits.
    pub fn spec_hash(&self) -> String {
        hex::encode(&Sha256::digest(self.canonical_json().as_bytes())[..8])
    }

    pub fn positive_intensities(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.intensity_grid.iter().copied().enumerate().filter(|(_, v)| *v > 0.0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one (stage, channel, intensity, draw) cell.
fn cell_rng(seed: u64, stage: usize, channel: usize, intensity: usize, draw: usize, len: usize) -> ChaCha8Rng {
    let key = [stage as u64, channel as u64, intensity as u64, draw as u64, len as u64]
        .iter()
        .fold(splitmix64(seed), |acc, v| splitmix64(acc ^ splitmix64(*v)));
    ChaCha8Rng::seed_from_u64(key)
}

/// One channel's perturbation, independent of the values it is applied to.
#[derive(Clone, Debug, PartialEq)]
enum ChannelPerturbation {
    Identity,
    Additive(Vec<f32>),
    Scale(f32),
}

impl ChannelPerturbation {
    fn apply(&self, src: &[f32], dst: &mut Vec<f32>) {
        dst.clear();
        match self {
            ChannelPerturbation::Identity => dst.extend_from_slice(src),
            ChannelPerturbation::Additive(noise) => dst.extend(src.iter().zip(noise).map(|(x, n)| x + n)),
            ChannelPerturbation::Scale(f) => dst.extend(src.iter().map(|x| x * f)),
        }
    }
}

struct Cell {
    stage: usize,
    channel: usize,
    intensity: usize,
    draw: usize,
}

fn realize(spec: &InterventionSpec, cell: &Cell, len: usize, stage_scale: f64) -> ChannelPerturbation {
    let level = spec.intensity_grid[cell.intensity];
    if level == 0.0 {
        return ChannelPerturbation::Identity;
    }
    let mut rng = cell_rng(spec.master_seed, cell.stage, cell.channel, cell.intensity, cell.draw, len);
    match spec.kind {
        InterventionKind::AdditiveGaussian => {
            let sigma = level * stage_scale;
            ChannelPerturbation::Additive(
                (0..len)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (sigma * z) as f32
                    })
                    .collect(),
            )
        }
        InterventionKind::ChannelScale => {
            let u: f64 = rng.random_range(-1.0..1.0);
            ChannelPerturbation::Scale((1.0 + level * u) as f32)
        }
        InterventionKind::ChannelDropout => {
            let keep = rng.random::<f64>() >= level;
            ChannelPerturbation::Scale(if keep { 1.0 } else { 0.0 })
        }
    }
}

fn check_indices(spec: &InterventionSpec, intensity_index: usize, draw_index: usize) -> Result<()> {
    if intensity_index >= spec.intensity_grid.len() {
        return Err(Error::IndexOutOfRange {
            what: "intensity",
            index: intensity_index,
            len: spec.intensity_grid.len(),
        });
    }
    if draw_index >= spec.draws_per_intensity {
        return Err(Error::IndexOutOfRange {
            what: "draw",
            index: draw_index,
            len: spec.draws_per_intensity,
        });
    }
    Ok(())
}

/// Population standard deviation of each stage's activations.
pub fn stage_std(stack: &FeatureStack) -> Vec<f64> {
    stack
        .stages
        .iter()
        .map(|s| {
            let n = s.len() as f64;
            let mean = s.iter().map(|v| *v as f64).sum::<f64>() / n;
            (s.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Apply the intervention with absolute intensities (stage scale 1).
pub fn apply_intervention(
    stack: &FeatureStack,
    spec: &InterventionSpec,
    intensity_index: usize,
    draw_index: usize,
) -> Result<FeatureStack> {
    let scales = vec![1.0; stack.num_stages()];
    apply_intervention_scaled(stack, spec, intensity_index, draw_index, &scales)
}

/// Apply the intervention with additive noise scaled per stage by `stage_scales`.
pub fn apply_intervention_scaled(
    stack: &FeatureStack,
    spec: &InterventionSpec,
    intensity_index: usize,
    draw_index: usize,
    stage_scales: &[f64],
) -> Result<FeatureStack> {
    spec.validate()?;
    check_indices(spec, intensity_index, draw_index)?;
    if stage_scales.len() != stack.num_stages() {
        return Err(Error::ShapeMismatch(format!(
            "{} stage scales for {} stages",
            stage_scales.len(),
            stack.num_stages()
        )));
    }
    if spec.intensity_grid[intensity_index] == 0.0 {
        return Ok(stack.clone());
    }
    let mut out = stack.clone();
    for (s, stage) in out.stages.iter_mut().enumerate() {
        let (channels, h, w) = stage.dim();
        let len = h * w;
        let data = stage.as_slice_mut().expect("standard layout");
        data.par_chunks_mut(len).enumerate().for_each(|(c, chunk)| {
            let cell = Cell {
                stage: s,
                channel: c,
                intensity: intensity_index,
                draw: draw_index,
            };
            let p = realize(spec, &cell, len, stage_scales[s]);
            let mut buf = Vec::with_capacity(len);
            p.apply(chunk, &mut buf);
            chunk.copy_from_slice(&buf);
        });
        debug_assert_eq!(channels * len, stage.len());
    }
    Ok(out)
}

/// Per-(stage, channel) change in distance: Dis(f_I, f_D) - Dis(f'_I, f'_D).
pub fn channel_delta(
    f_i: &FeatureStack,
    f_d: &FeatureStack,
    fp_i: &FeatureStack,
    fp_d: &FeatureStack,
    dist: &DistanceConfig,
) -> Result<Vec<Vec<f64>>> {
    f_i.ensure_compatible(f_d)?;
    f_i.ensure_compatible(fp_i)?;
    f_i.ensure_compatible(fp_d)?;
    let before = channel_costs(f_i, f_d, dist.per_channel_metric)?;
    let after = channel_costs(fp_i, fp_d, dist.per_channel_metric)?;
    Ok(before
        .iter()
        .zip(&after)
        .map(|(b, a)| b.iter().zip(a).map(|(x, y)| x - y).collect())
        .collect())
}

/// Invariance statistics of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    /// Pre-intervention distance per channel.
    pub baseline_dist: Vec<f64>,
    /// `[channel][intensity]` mean of the statistic over draws.
    pub delta_mean: Vec<Vec<f64>>,
    /// `[channel][intensity]` population standard deviation over draws.
    pub delta_std: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub backbone_id: String,
    pub spec_hash: String,
    pub intensity_grid: Vec<f64>,
    pub stages: Vec<StageOutcome>,
}

impl InterventionOutcome {
    pub fn channel_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.baseline_dist.len()).collect()
    }
}

/// Sweep every intensity of `spec` over `draws_per_intensity` draws.
pub fn sweep(
    f_i: &FeatureStack,
    f_d: &FeatureStack,
    spec: &InterventionSpec,
    dist: &DistanceConfig,
) -> Result<InterventionOutcome> {
    spec.validate()?;
    f_i.ensure_compatible(f_d)?;
    let metric: ChannelMetric = dist.per_channel_metric;
    let scales = if spec.relative_to_stage_std {
        stage_std(f_i)
    } else {
        vec![1.0; f_i.num_stages()]
    };
    let grid = &spec.intensity_grid;
    let draws = spec.draws_per_intensity;

    let stages = (0..f_i.num_stages())
        .map(|s| {
            let (channels, h, w) = f_i.stages[s].dim();
            let len = h * w;
            let per_channel: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..channels)
                .into_par_iter()
                .map(|c| {
                    let (x, y) = (f_i.channel(s, c), f_d.channel(s, c));
                    let base = channel_cost_f32(x, y, metric);
                    let (mut xb, mut yb) = (Vec::with_capacity(len), Vec::with_capacity(len));
                    let mut means = Vec::with_capacity(grid.len());
                    let mut stds = Vec::with_capacity(grid.len());
                    for (k, level) in grid.iter().enumerate() {
                        if *level == 0.0 {
                            means.push(0.0);
                            stds.push(0.0);
                            continue;
                        }
                        let deltas: Vec<f64> = (0..draws)
                            .map(|d| {
                                let cell = Cell {
                                    stage: s,
                                    channel: c,
                                    intensity: k,
                                    draw: d,
                                };
                                let p = realize(spec, &cell, len, scales[s]);
                                p.apply(x, &mut xb);
                                p.apply(y, &mut yb);
                                base - channel_cost_f32(&xb, &yb, metric)
                            })
                            .collect();
                        let mean = deltas.iter().sum::<f64>() / draws as f64;
                        let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws as f64;
                        means.push(mean);
                        stds.push(if draws == 1 { 0.0 } else { var.sqrt() });
                    }
                    (base, means, stds)
                })
                .collect();
            let mut out = StageOutcome {
                baseline_dist: Vec::with_capacity(channels),
                delta_mean: Vec::with_capacity(channels),
                delta_std: Vec::with_capacity(channels),
            };
            for (b, m, sd) in per_channel {
                out.baseline_dist.push(b);
                out.delta_mean.push(m);
                out.delta_std.push(sd);
            }
            out
        })
        .collect();

    Ok(InterventionOutcome {
        backbone_id: f_i.backbone_id.clone(),
        spec_hash: spec.spec_hash(),
        intensity_grid: grid.clone(),
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn stack(stages: Vec<Array3<f32>>) -> FeatureStack {
        FeatureStack::new("toy", stages)
    }

    fn ramp(c: usize, h: usize, w: usize, offset: f32) -> Array3<f32> {
        Array3::from_shape_fn((c, h, w), |(c, y, x)| offset + (c * 100 + y * w + x) as f32 * 0.1)
    }

    #[test]
    fn zero_intensity_is_identity_for_every_kind() {
        let f = stack(vec![ramp(2, 4, 4, 0.0), ramp(3, 2, 2, 1.0)]);
        for kind in [
            InterventionKind::AdditiveGaussian,
            InterventionKind::ChannelScale,
            InterventionKind::ChannelDropout,
        ] {
            let spec = InterventionSpec {
                kind,
                ..Default::default()
            };
            assert_eq!(apply_intervention(&f, &spec, 0, 0).unwrap(), f);
        }
    }

    #[test]
    fn realization_is_shared_between_stacks() {
        let spec = InterventionSpec::default();
        let a = stack(vec![ramp(2, 4, 4, 0.0)]);
        let b = stack(vec![ramp(2, 4, 4, 7.5)]);
        let pa = apply_intervention(&a, &spec, 3, 1).unwrap();
        let pb = apply_intervention(&b, &spec, 3, 1).unwrap();
        let na = &pa.stages[0] - &a.stages[0];
        let nb = &pb.stages[0] - &b.stages[0];
        for (x, y) in na.iter().zip(nb.iter()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
        assert!(na.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn realization_depends_on_draw_and_seed() {
        let a = stack(vec![Array3::zeros((1, 4, 4))]);
        let spec = InterventionSpec::default();
        let d0 = apply_intervention(&a, &spec, 2, 0).unwrap();
        let d1 = apply_intervention(&a, &spec, 2, 1).unwrap();
        let other = InterventionSpec {
            master_seed: 9,
            ..spec.clone()
        };
        let s9 = apply_intervention(&a, &other, 2, 0).unwrap();
        assert_ne!(d0, d1);
        assert_ne!(d0, s9);
    }

    #[test]
    fn out_of_range_indices() {
        let a = stack(vec![Array3::zeros((1, 4, 4))]);
        let spec = InterventionSpec::default();
        assert!(matches!(
            apply_intervention(&a, &spec, 5, 0),
            Err(Error::IndexOutOfRange { what: "intensity", .. })
        ));
        assert!(matches!(
            apply_intervention(&a, &spec, 1, 2),
            Err(Error::IndexOutOfRange { what: "draw", .. })
        ));
    }

    #[test]
    fn scaled_application_rejects_wrong_scale_count() {
        let a = stack(vec![Array3::zeros((1, 4, 4))]);
        let r = apply_intervention_scaled(&a, &InterventionSpec::default(), 1, 0, &[1.0, 1.0]);
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn channel_scale_multiplies_whole_channel() {
        let spec = InterventionSpec {
            kind: InterventionKind::ChannelScale,
            ..Default::default()
        };
        let a = stack(vec![Array3::from_elem((3, 2, 2), 2.0)]);
        let p = apply_intervention(&a, &spec, 4, 0).unwrap();
        for c in 0..3 {
            let ch = p.channel(0, c);
            assert!(ch.iter().all(|v| *v == ch[0]));
            let factor = ch[0] / 2.0;
            assert!((factor - 1.0).abs() <= 0.4 + 1e-6);
        }
    }

    #[test]
    fn dropout_zeroes_whole_channels() {
        let spec = InterventionSpec {
            kind: InterventionKind::ChannelDropout,
            intensity_grid: vec![0.0, 0.5, 1.0],
            ..Default::default()
        };
        let a = stack(vec![Array3::from_elem((64, 2, 2), 1.0)]);
        let all = apply_intervention(&a, &spec, 2, 0).unwrap();
        assert!(all.stages[0].iter().all(|v| *v == 0.0));
        let half = apply_intervention(&a, &spec, 1, 0).unwrap();
        let dropped = (0..64).filter(|c| half.channel(0, *c)[0] == 0.0).count();
        assert!(dropped > 10 && dropped < 54, "{dropped} of 64 dropped");
        for c in 0..64 {
            let ch = half.channel(0, c);
            assert!(ch.iter().all(|v| *v == ch[0]));
        }
    }

    #[test]
    fn spec_validation() {
        let bad = InterventionSpec {
            intensity_grid: vec![0.0, 0.2, 0.1],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = InterventionSpec {
            draws_per_intensity: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spec_hash_is_stable_and_sensitive() {
        let a = InterventionSpec::default();
        assert_eq!(a.spec_hash(), InterventionSpec::default().spec_hash());
        assert_eq!(a.spec_hash().len(), 16);
        let b = InterventionSpec {
            master_seed: 1,
            ..Default::default()
        };
        assert_ne!(a.spec_hash(), b.spec_hash());
        let json = a.canonical_json();
        let back: InterventionSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn single_draw_has_zero_std() {
        let spec = InterventionSpec {
            draws_per_intensity: 1,
            ..Default::default()
        };
        let a = stack(vec![ramp(2, 4, 4, 0.0)]);
        let b = stack(vec![ramp(2, 4, 4, 0.5)]);
        let out = sweep(&a, &b, &spec, &DistanceConfig::default()).unwrap();
        assert!(out.stages[0].delta_std.iter().flatten().all(|v| *v == 0.0));
    }
}
