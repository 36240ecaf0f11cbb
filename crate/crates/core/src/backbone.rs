//! Backbone loading and feature extraction.
//!
//! A backbone is an ONNX graph with a single image input named `input` and one
//! named output per feature stage. A JSON sidecar ([`BackboneSpec`]) carries the
//! stage taps and the input normalization constants.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::{Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tract_onnx::pb::ModelProto;
use tract_onnx::prelude::*;

use crate::error::{Error, Result};

/// Smallest accepted image side, in pixels.
pub const MIN_IMAGE_SIDE: u32 = 32;

/// Name of the graph input every backbone must expose.
pub const INPUT_NAME: &str = "input";

/// Mean and standard deviation of the large-scale pretraining set, per RGB channel.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputLayout {
    pub channels: usize,
    pub color_order: String,
    pub layout: String,
}

impl Default for InputLayout {
    fn default() -> Self {
        Self {
            channels: 3,
            color_order: "RGB".into(),
            layout: "CHW".into(),
        }
    }
}

/// Sidecar description of a backbone graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub id: String,
    pub stage_taps: Vec<String>,
    pub input_norm_mean: [f32; 3],
    pub input_norm_std: [f32; 3],
    #[serde(default)]
    pub expected_input_layout: InputLayout,
}

impl BackboneSpec {
    /// Spec with the common pretraining normalization.
    pub fn with_imagenet_norm(id: impl Into<String>, stage_taps: Vec<String>) -> Self {
        Self {
            id: id.into(),
            stage_taps,
            input_norm_mean: IMAGENET_MEAN,
            input_norm_std: IMAGENET_STD,
            expected_input_layout: InputLayout::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidConfig("backbone id is empty".into()));
        }
        if self.stage_taps.is_empty() {
            return Err(Error::InvalidConfig("backbone has no stage taps".into()));
        }
        let mut seen = HashSet::new();
        for tap in &self.stage_taps {
            if !seen.insert(tap.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate stage tap `{tap}`")));
            }
        }
        if self.input_norm_std.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
            return Err(Error::InvalidConfig("input_norm_std entries must be > 0".into()));
        }
        if self.input_norm_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidConfig("input_norm_mean entries must be finite".into()));
        }
        let layout = &self.expected_input_layout;
        if layout.channels != 3 || layout.color_order != "RGB" || layout.layout != "CHW" {
            return Err(Error::InvalidConfig(format!(
                "unsupported input layout {}x{} {}",
                layout.channels, layout.layout, layout.color_order
            )));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| not_found_or_io(path, e))?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Conventional sidecar location: `model.onnx` -> `model.spec.json`.
    pub fn sidecar_path(graph: impl AsRef<Path>) -> PathBuf {
        graph.as_ref().with_extension("spec.json")
    }
}

pub(crate) fn not_found_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::FileNotFound(path.to_path_buf())
    } else {
        Error::Io(e)
    }
}

/// A normalized C×H×W image ready for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f32>,
    /// (height, width) in pixels.
    pub source_dims: (usize, usize),
}

impl ImageTensor {
    pub fn height(&self) -> usize {
        self.source_dims.0
    }

    pub fn width(&self) -> usize {
        self.source_dims.1
    }

    fn check(&self) -> Result<()> {
        let (c, h, w) = self.data.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("image tensor has {c} channels, expected 3")));
        }
        if h < MIN_IMAGE_SIDE as usize || w < MIN_IMAGE_SIDE as usize {
            return Err(Error::ImageTooSmall {
                width: w as u32,
                height: h as u32,
                min: MIN_IMAGE_SIDE,
            });
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("image tensor contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Decode an encoded PNG/BMP/JPEG image and normalize it for `spec`.
///
/// Pixels are scaled to [0, 1] and then mapped through `(x - mean) / std` per
/// channel. The image is never resized or cropped.
pub fn preprocess(image_bytes: &[u8], spec: &BackboneSpec) -> Result<ImageTensor> {
    let decoded = image::load_from_memory(image_bytes).map_err(|e| Error::Decode(e.to_string()))?;
    preprocess_rgb(&decoded.to_rgb8(), spec)
}

pub fn preprocess_rgb(img: &image::RgbImage, spec: &BackboneSpec) -> Result<ImageTensor> {
    let (width, height) = img.dimensions();
    if width < MIN_IMAGE_SIDE || height < MIN_IMAGE_SIDE {
        return Err(Error::ImageTooSmall {
            width,
            height,
            min: MIN_IMAGE_SIDE,
        });
    }
    let (h, w) = (height as usize, width as usize);
    let mut data = Array3::<f32>::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let v = px.0[c] as f32 / 255.0;
            data[[c, y as usize, x as usize]] = (v - spec.input_norm_mean[c]) / spec.input_norm_std[c];
        }
    }
    Ok(ImageTensor {
        data,
        source_dims: (h, w),
    })
}

/// Multi-stage activations of one image under one backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub backbone_id: String,
    pub stages: Vec<Array3<f32>>,
}

impl FeatureStack {
    pub fn new(backbone_id: impl Into<String>, stages: Vec<Array3<f32>>) -> Self {
        let stages = stages
            .into_iter()
            .map(|s| if s.is_standard_layout() { s } else { s.as_standard_layout().into_owned() })
            .collect();
        Self {
            backbone_id: backbone_id.into(),
            stages,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn channel_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.dim().0).collect()
    }

    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.stages.iter().map(|s| s.dim()).collect()
    }

    /// Flattened activations of channel `c` of stage `s`.
    pub fn channel(&self, s: usize, c: usize) -> &[f32] {
        let (_, h, w) = self.stages[s].dim();
        let stage = self.stages[s].as_slice().expect("stages are kept in standard layout");
        &stage[c * h * w..(c + 1) * h * w]
    }

    pub fn channel_view(&self, s: usize, c: usize) -> ArrayView2<'_, f32> {
        self.stages[s].index_axis(Axis(0), c)
    }

    /// Error unless `other` has exactly the same stage shapes.
    pub fn ensure_compatible(&self, other: &FeatureStack) -> Result<()> {
        if self.shapes() != other.shapes() {
            return Err(Error::ShapeMismatch(format!(
                "stacks have shapes {:?} and {:?}",
                self.shapes(),
                other.shapes()
            )));
        }
        Ok(())
    }
}

/// A loaded backbone. Immutable after load apart from an internal cache of
/// execution plans specialized per input size.
pub struct BackboneHandle {
    spec: BackboneSpec,
    model: InferenceModel,
    graph_digest: String,
    plans: Mutex<HashMap<(usize, usize), Arc<TypedRunnableModel>>>,
}

impl std::fmt::Debug for BackboneHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackboneHandle")
            .field("spec", &self.spec)
            .field("graph_digest", &self.graph_digest)
            .finish_non_exhaustive()
    }
}

/// Load an ONNX backbone and resolve its stage taps.
pub fn load_backbone(path: impl AsRef<Path>, spec: &BackboneSpec) -> Result<BackboneHandle> {
    let path = path.as_ref();
    spec.validate()?;
    let bytes = std::fs::read(path).map_err(|e| not_found_or_io(path, e))?;
    load_backbone_from_bytes(&bytes, spec)
}

pub fn load_backbone_from_bytes(bytes: &[u8], spec: &BackboneSpec) -> Result<BackboneHandle> {
    spec.validate()?;
    let onnx = tract_onnx::onnx();
    let proto: ModelProto = onnx
        .proto_model_for_read(&mut &bytes[..])
        .map_err(|e| Error::GraphParse(format!("{e:#}")))?;
    let graph = proto
        .graph
        .as_ref()
        .ok_or_else(|| Error::GraphParse("model has no graph".into()))?;

    let initializers: HashSet<&str> = graph.initializer.iter().map(|t| t.name.as_str()).collect();
    let inputs: Vec<&str> = graph
        .input
        .iter()
        .map(|i| i.name.as_str())
        .filter(|n| !initializers.contains(n))
        .collect();
    if inputs != [INPUT_NAME] {
        return Err(Error::GraphParse(format!(
            "expected a single graph input named `{INPUT_NAME}`, found {inputs:?}"
        )));
    }
    let produced: HashSet<&str> = graph
        .node
        .iter()
        .flat_map(|n| n.output.iter().map(String::as_str))
        .collect();
    for tap in &spec.stage_taps {
        if !produced.contains(tap.as_str()) {
            return Err(Error::UnknownStageTap(tap.clone()));
        }
    }

    let mut model = onnx
        .model_for_proto_model(&proto)
        .map_err(|e| Error::GraphParse(format!("{e:#}")))?;
    let outlets = spec
        .stage_taps
        .iter()
        .map(|tap| model.find_outlet_label(tap).ok_or_else(|| Error::UnknownStageTap(tap.clone())))
        .collect::<Result<Vec<_>>>()?;
    model
        .select_output_outlets(&outlets)
        .map_err(|e| Error::GraphParse(format!("{e:#}")))?;

    Ok(BackboneHandle {
        spec: spec.clone(),
        model,
        graph_digest: hex::encode(&Sha256::digest(bytes)[..16]),
        plans: Mutex::new(HashMap::new()),
    })
}

impl BackboneHandle {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn list_stages(&self) -> &[String] {
        &self.spec.stage_taps
    }

    /// Truncated SHA-256 of the graph bytes.
    pub fn graph_digest(&self) -> &str {
        &self.graph_digest
    }

    fn plan_for(&self, h: usize, w: usize) -> Result<Arc<TypedRunnableModel>> {
        if let Some(plan) = self.plans.lock().expect("plan cache poisoned").get(&(h, w)) {
            return Ok(plan.clone());
        }
        let plan = (|| -> TractResult<Arc<TypedRunnableModel>> {
            let mut model = self.model.clone();
            model.set_input_fact(0, f32::fact([1, 3, h, w]).into())?;
            model.into_optimized()?.into_runnable()
        })()
        .map_err(|e| Error::Inference(format!("{e:#}")))?;
        self.plans
            .lock()
            .expect("plan cache poisoned")
            .insert((h, w), plan.clone());
        Ok(plan)
    }

    /// Run the backbone on `img` and collect the stage activations.
    pub fn extract_features(&self, img: &ImageTensor) -> Result<FeatureStack> {
        img.check()?;
        let (_, h, w) = img.data.dim();
        let plan = self.plan_for(h, w)?;
        let input: Tensor = img
            .data
            .clone()
            .insert_axis(Axis(0))
            .into();
        let outputs = plan
            .run(tvec!(input.into()))
            .map_err(|e| Error::Inference(format!("{e:#}")))?;
        if outputs.len() != self.spec.stage_taps.len() {
            return Err(Error::Inference(format!(
                "graph produced {} outputs for {} taps",
                outputs.len(),
                self.spec.stage_taps.len()
            )));
        }
        let mut stages = Vec::with_capacity(outputs.len());
        for (tap, out) in self.spec.stage_taps.iter().zip(outputs) {
            let view = out
                .to_plain_array_view::<f32>()
                .map_err(|e| Error::Inference(format!("{tap}: {e:#}")))?;
            let shape = view.shape().to_vec();
            let (c, sh, sw) = match shape.as_slice() {
                [1, c, sh, sw] => (*c, *sh, *sw),
                [c, sh, sw] => (*c, *sh, *sw),
                other => {
                    return Err(Error::Inference(format!("{tap}: unexpected output shape {other:?}")))
                }
            };
            let stage = Array3::from_shape_vec((c, sh, sw), view.iter().copied().collect())
                .map_err(|e| Error::Inference(format!("{tap}: {e}")))?;
            if stage.iter().any(|v| !v.is_finite()) {
                return Err(Error::Inference(format!("{tap}: non-finite activations")));
            }
            stages.push(stage);
        }
        Ok(FeatureStack::new(self.spec.id.clone(), stages))
    }

    pub fn extract_from_bytes(&self, image_bytes: &[u8]) -> Result<FeatureStack> {
        self.extract_features(&preprocess(image_bytes, &self.spec)?)
    }
}
