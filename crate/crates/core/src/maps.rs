//! Per-channel intervention effect maps.
//!
//! For one stage channel, the optimal 1D transport plan pairs the k-th
//! smallest distorted activation with the k-th smallest reference
//! activation, giving each distorted pixel a displacement. The effect map is
//! the absolute change of that displacement under the intervention.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::Array2;

use crate::backbone::FeatureStack;
use crate::error::{Error, Result};
use crate::intervention::{apply_intervention_scaled, stage_std, InterventionSpec};

fn rank_order(v: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

/// Transport displacement of every distorted sample toward its rank-matched
/// reference sample. Both slices must have equal length.
pub fn displacement(reference: &[f32], distorted: &[f32]) -> Vec<f64> {
    debug_assert_eq!(reference.len(), distorted.len());
    let (ro, d_order) = (rank_order(reference), rank_order(distorted));
    let mut out = vec![0.0; distorted.len()];
    for (r_idx, d_idx) in ro.into_iter().zip(d_order) {
        out[d_idx] = distorted[d_idx] as f64 - reference[r_idx] as f64;
    }
    out
}

/// Effect map of stage `s`, channel `c` between the original and intervened pairs.
pub fn effect_map(
    f_ref: &FeatureStack,
    f_dist: &FeatureStack,
    p_ref: &FeatureStack,
    p_dist: &FeatureStack,
    s: usize,
    c: usize,
) -> Array2<f64> {
    let (_, h, w) = f_ref.stages[s].dim();
    let before = displacement(f_ref.channel(s, c), f_dist.channel(s, c));
    let after = displacement(p_ref.channel(s, c), p_dist.channel(s, c));
    let data = before.iter().zip(&after).map(|(b, a)| (a - b).abs()).collect();
    Array2::from_shape_vec((h, w), data).expect("channel shape")
}

/// Min-max normalize to 8-bit grayscale; constant maps become black.
pub fn to_gray(map: &Array2<f64>) -> GrayImage {
    let (h, w) = map.dim();
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map[(y as usize, x as usize)];
        let g = if range > 0.0 { ((v - lo) / range * 255.0).round() } else { 0.0 };
        Luma([g as u8])
    })
}

pub fn map_file_name(stage: usize, channel: usize) -> String {
    format!("stage{stage}_ch{channel:04}.png")
}

/// Write one PNG per channel of each selected 1-based stage, using draw 0
/// at `intensity_index` of `spec`. Returns the written paths in order.
pub fn export_effect_maps(
    f_ref: &FeatureStack,
    f_dist: &FeatureStack,
    spec: &InterventionSpec,
    intensity_index: usize,
    stages: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    f_ref.ensure_compatible(f_dist)?;
    for &s in stages {
        if s == 0 || s > f_ref.num_stages() {
            return Err(Error::IndexOutOfRange {
                what: "stage",
                index: s,
                len: f_ref.num_stages(),
            });
        }
    }
    let scales = if spec.relative_to_stage_std {
        stage_std(f_ref)
    } else {
        vec![1.0; f_ref.num_stages()]
    };
    let p_ref = apply_intervention_scaled(f_ref, spec, intensity_index, 0, &scales)?;
    let p_dist = apply_intervention_scaled(f_dist, spec, intensity_index, 0, &scales)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for &stage in stages {
        let s = stage - 1;
        for c in 0..f_ref.stages[s].dim().0 {
            let map = effect_map(f_ref, f_dist, &p_ref, &p_dist, s, c);
            let path = out_dir.join(map_file_name(stage, c));
            to_gray(&map).save_with_format(&path, image::ImageFormat::Png)?;
            written.push(path);
        }
    }
    Ok(written)
}
