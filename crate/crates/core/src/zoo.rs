//! Deterministic synthetic backbones.
//!
//! Builds ONNX graphs with the stage layout of VGG-16, ResNet-50 and
//! EfficientNet-B0 (plus a small `tiny` network for quick runs), filled with
//! seeded variance-preserving random weights. Batch normalization is folded
//! away, so every graph uses only Conv, Relu, Sigmoid, Mul, Add, MaxPool,
//! GlobalAveragePool and Identity.
//!
//! These graphs go through the same load path as exported pretrained
//! backbones: they are written as ONNX files with a JSON sidecar.

use std::path::{Path, PathBuf};

use prost::Message;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tract_onnx::pb::{
    attribute_proto::AttributeType, tensor_proto::DataType, tensor_shape_proto, type_proto,
    AttributeProto, GraphProto, ModelProto, NodeProto, OperatorSetIdProto, TensorProto,
    TensorShapeProto, TypeProto, ValueInfoProto,
};

use crate::backbone::{BackboneSpec, INPUT_NAME};
use crate::error::{Error, Result};

pub const OPSET: i64 = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Vgg16,
    Resnet50,
    EfficientnetB0,
    Tiny,
}

impl Architecture {
    pub const DEFAULT_SET: [Architecture; 3] =
        [Architecture::Vgg16, Architecture::Resnet50, Architecture::EfficientnetB0];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Vgg16 => "vgg16",
            Architecture::Resnet50 => "resnet50",
            Architecture::EfficientnetB0 => "efficientnet_b0",
            Architecture::Tiny => "tiny",
        }
    }

    pub fn num_stages(self) -> usize {
        match self {
            Architecture::Vgg16 | Architecture::EfficientnetB0 => 5,
            Architecture::Resnet50 => 4,
            Architecture::Tiny => 2,
        }
    }

    pub fn backbone_id(self, seed: u64) -> String {
        format!("{}-synth-{seed}", self.name())
    }

    pub fn stage_taps(self) -> Vec<String> {
        (1..=self.num_stages()).map(|i| format!("stage{i}")).collect()
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg16" => Ok(Architecture::Vgg16),
            "resnet50" => Ok(Architecture::Resnet50),
            "efficientnet_b0" => Ok(Architecture::EfficientnetB0),
            "tiny" => Ok(Architecture::Tiny),
            other => Err(Error::InvalidConfig(format!("unknown architecture `{other}`"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

struct GraphBuilder {
    rng: ChaCha8Rng,
    nodes: Vec<NodeProto>,
    initializers: Vec<TensorProto>,
    next_id: usize,
}

fn attr_ints(name: &str, ints: &[i64]) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        r#type: AttributeType::Ints as i32,
        ints: ints.to_vec(),
        ..Default::default()
    }
}

fn attr_int(name: &str, i: i64) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        r#type: AttributeType::Int as i32,
        i,
        ..Default::default()
    }
}

fn float_value_info(name: &str, dims: &[Option<i64>]) -> ValueInfoProto {
    let dim = dims
        .iter()
        .enumerate()
        .map(|(i, d)| tensor_shape_proto::Dimension {
            value: Some(match d {
                Some(v) => tensor_shape_proto::dimension::Value::DimValue(*v),
                None => tensor_shape_proto::dimension::Value::DimParam(format!("{name}_d{i}")),
            }),
            ..Default::default()
        })
        .collect();
    ValueInfoProto {
        name: name.into(),
        r#type: Some(TypeProto {
            value: Some(type_proto::Value::TensorType(type_proto::Tensor {
                elem_type: DataType::Float as i32,
                shape: Some(TensorShapeProto { dim }),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}

impl GraphBuilder {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            nodes: Vec::new(),
            initializers: Vec::new(),
            next_id: 0,
        }
    }

    fn fresh(&mut self, prefix: &str) -> String {
        self.next_id += 1;
        format!("{prefix}_{}", self.next_id)
    }

    fn initializer(&mut self, prefix: &str, dims: &[usize], values: &[f32]) -> String {
        let name = self.fresh(prefix);
        let raw_data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.initializers.push(TensorProto {
            name: name.clone(),
            dims: dims.iter().map(|d| *d as i64).collect(),
            data_type: DataType::Float as i32,
            raw_data,
            ..Default::default()
        });
        name
    }

    fn node(&mut self, op: &str, inputs: Vec<String>, attrs: Vec<AttributeProto>) -> String {
        let out = self.fresh(&op.to_ascii_lowercase());
        self.nodes.push(NodeProto {
            name: out.clone(),
            op_type: op.into(),
            input: inputs,
            output: vec![out.clone()],
            attribute: attrs,
            ..Default::default()
        });
        out
    }

    /// Conv with weights drawn from N(0, gain² / fan_in) and zero bias.
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        x: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        gain: f32,
    ) -> String {
        let per_group = cin / groups;
        let fan_in = (per_group * kernel * kernel) as f32;
        let std = gain / fan_in.sqrt();
        let weights: Vec<f32> = (0..cout * per_group * kernel * kernel)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        let w = self.initializer("w", &[cout, per_group, kernel, kernel], &weights);
        let b = self.initializer("b", &[cout], &vec![0.0; cout]);
        let pad = (kernel / 2) as i64;
        self.node(
            "Conv",
            vec![x.into(), w, b],
            vec![
                attr_ints("kernel_shape", &[kernel as i64, kernel as i64]),
                attr_ints("strides", &[stride as i64, stride as i64]),
                attr_ints("pads", &[pad, pad, pad, pad]),
                attr_int("group", groups as i64),
            ],
        )
    }

    fn relu(&mut self, x: &str) -> String {
        self.node("Relu", vec![x.into()], vec![])
    }

    fn silu(&mut self, x: &str) -> String {
        let s = self.node("Sigmoid", vec![x.into()], vec![]);
        self.node("Mul", vec![x.into(), s], vec![])
    }

    fn add(&mut self, a: &str, b: &str) -> String {
        self.node("Add", vec![a.into(), b.into()], vec![])
    }

    fn maxpool(&mut self, x: &str, kernel: usize, stride: usize, pad: usize) -> String {
        let (k, s, p) = (kernel as i64, stride as i64, pad as i64);
        self.node(
            "MaxPool",
            vec![x.into()],
            vec![
                attr_ints("kernel_shape", &[k, k]),
                attr_ints("strides", &[s, s]),
                attr_ints("pads", &[p, p, p, p]),
            ],
        )
    }

    fn tap(&mut self, x: &str, name: &str) {
        self.nodes.push(NodeProto {
            name: name.into(),
            op_type: "Identity".into(),
            input: vec![x.into()],
            output: vec![name.into()],
            ..Default::default()
        });
    }

    fn finish(self, name: &str, taps: &[String]) -> ModelProto {
        let graph = GraphProto {
            name: name.into(),
            node: self.nodes,
            initializer: self.initializers,
            input: vec![float_value_info(INPUT_NAME, &[Some(1), Some(3), None, None])],
            output: taps
                .iter()
                .map(|t| float_value_info(t, &[Some(1), None, None, None]))
                .collect(),
            ..Default::default()
        };
        ModelProto {
            ir_version: 8,
            producer_name: "ciqa-zoo".into(),
            opset_import: vec![OperatorSetIdProto {
                domain: String::new(),
                version: OPSET,
            }],
            graph: Some(graph),
            ..Default::default()
        }
    }
}

const RELU_GAIN: f32 = std::f32::consts::SQRT_2;

fn build_vgg16(g: &mut GraphBuilder) -> Vec<String> {
    const STAGES: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut x = INPUT_NAME.to_string();
    let mut cin = 3;
    let mut taps = Vec::new();
    for (i, (width, convs)) in STAGES.iter().enumerate() {
        if i > 0 {
            x = g.maxpool(&x, 2, 2, 0);
        }
        for _ in 0..*convs {
            x = g.conv(&x, cin, *width, 3, 1, 1, RELU_GAIN);
            x = g.relu(&x);
            cin = *width;
        }
        taps.push(x.clone());
    }
    taps
}

fn build_resnet50(g: &mut GraphBuilder) -> Vec<String> {
    const LAYERS: [(usize, usize); 4] = [(64, 3), (128, 4), (256, 6), (512, 3)];
    // Residual branch output scale keeping activations bounded without batch norm.
    let total_blocks: usize = LAYERS.iter().map(|(_, n)| n).sum();
    let branch_scale = (total_blocks as f32).powf(-0.25);

    let mut x = g.conv(INPUT_NAME, 3, 64, 7, 2, 1, RELU_GAIN);
    x = g.relu(&x);
    x = g.maxpool(&x, 3, 2, 1);
    let mut cin = 64;
    let mut taps = Vec::new();
    for (i, (width, blocks)) in LAYERS.iter().enumerate() {
        for b in 0..*blocks {
            let stride = if i > 0 && b == 0 { 2 } else { 1 };
            let cout = width * 4;
            let mut y = g.conv(&x, cin, *width, 1, 1, 1, RELU_GAIN);
            y = g.relu(&y);
            y = g.conv(&y, *width, *width, 3, stride, 1, RELU_GAIN);
            y = g.relu(&y);
            y = g.conv(&y, *width, cout, 1, 1, 1, branch_scale);
            let shortcut = if stride != 1 || cin != cout {
                g.conv(&x, cin, cout, 1, stride, 1, 1.0)
            } else {
                x.clone()
            };
            let sum = g.add(&y, &shortcut);
            x = g.relu(&sum);
            cin = cout;
        }
        taps.push(x.clone());
    }
    taps
}

fn build_efficientnet_b0(g: &mut GraphBuilder) -> Vec<String> {
    // (expand ratio, kernel, stride, output channels, repeats)
    const GROUPS: [(usize, usize, usize, usize, usize); 7] = [
        (1, 3, 1, 16, 1),
        (6, 3, 2, 24, 2),
        (6, 5, 2, 40, 2),
        (6, 3, 2, 80, 3),
        (6, 5, 1, 112, 3),
        (6, 5, 2, 192, 4),
        (6, 3, 1, 320, 1),
    ];
    const TAPPED_GROUPS: [usize; 5] = [0, 1, 2, 4, 6];
    // The squeeze-excitation gate halves activations on average; the projection
    // conv compensates.
    const PROJECT_GAIN: f32 = 2.0;

    let mut x = g.conv(INPUT_NAME, 3, 32, 3, 2, 1, RELU_GAIN);
    x = g.silu(&x);
    let mut cin = 32;
    let mut taps = Vec::new();
    for (gi, (expand, kernel, stride, cout, repeats)) in GROUPS.iter().enumerate() {
        for r in 0..*repeats {
            let stride = if r == 0 { *stride } else { 1 };
            let hidden = cin * expand;
            let mut y = x.clone();
            if *expand != 1 {
                y = g.conv(&y, cin, hidden, 1, 1, 1, RELU_GAIN);
                y = g.silu(&y);
            }
            y = g.conv(&y, hidden, hidden, *kernel, stride, hidden, RELU_GAIN);
            y = g.silu(&y);

            let squeezed = (cin / 4).max(1);
            let mut s = g.node("GlobalAveragePool", vec![y.clone()], vec![]);
            s = g.conv(&s, hidden, squeezed, 1, 1, 1, RELU_GAIN);
            s = g.silu(&s);
            s = g.conv(&s, squeezed, hidden, 1, 1, 1, 1.0);
            s = g.node("Sigmoid", vec![s], vec![]);
            y = g.node("Mul", vec![y, s], vec![]);

            let residual = stride == 1 && cin == *cout;
            let gain = if residual { PROJECT_GAIN * 0.5 } else { PROJECT_GAIN };
            y = g.conv(&y, hidden, *cout, 1, 1, 1, gain);
            x = if residual { g.add(&y, &x) } else { y };
            cin = *cout;
        }
        if TAPPED_GROUPS.contains(&gi) {
            taps.push(x.clone());
        }
    }
    taps
}

fn build_tiny(g: &mut GraphBuilder) -> Vec<String> {
    let mut x = g.conv(INPUT_NAME, 3, 8, 3, 1, 1, RELU_GAIN);
    x = g.relu(&x);
    let t1 = x.clone();
    x = g.maxpool(&x, 2, 2, 0);
    x = g.conv(&x, 8, 16, 3, 1, 1, RELU_GAIN);
    x = g.relu(&x);
    vec![t1, x]
}

/// Build the graph and sidecar for `arch` with weights drawn from `seed`.
pub fn synthesize(arch: Architecture, seed: u64) -> (ModelProto, BackboneSpec) {
    let mut g = GraphBuilder::new(seed);
    let internal = match arch {
        Architecture::Vgg16 => build_vgg16(&mut g),
        Architecture::Resnet50 => build_resnet50(&mut g),
        Architecture::EfficientnetB0 => build_efficientnet_b0(&mut g),
        Architecture::Tiny => build_tiny(&mut g),
    };
    let taps = arch.stage_taps();
    for (x, name) in internal.iter().zip(&taps) {
        g.tap(x, name);
    }
    let id = arch.backbone_id(seed);
    let model = g.finish(&id, &taps);
    (model, BackboneSpec::with_imagenet_norm(id, taps))
}

pub fn encode(model: &ModelProto) -> Vec<u8> {
    model.encode_to_vec()
}

/// Write `<dir>/<name>.onnx` and `<dir>/<name>.spec.json`, returning both paths.
/// Existing files are reused when the sidecar already names the same backbone.
pub fn write_synthetic(arch: Architecture, seed: u64, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let id = arch.backbone_id(seed);
    let graph_path = dir.join(format!("{id}.onnx"));
    let spec_path = BackboneSpec::sidecar_path(&graph_path);
    if graph_path.exists() {
        if let Ok(spec) = BackboneSpec::from_json_file(&spec_path) {
            if spec.id == id {
                return Ok((graph_path, spec_path));
            }
        }
    }
    let (model, spec) = synthesize(arch, seed);
    // Write through a temporary name so concurrent writers never expose a partial graph.
    let tmp = dir.join(format!(".{id}.onnx.{}", std::process::id()));
    std::fs::write(&tmp, encode(&model))?;
    std::fs::rename(&tmp, &graph_path)?;
    spec.to_json_file(&spec_path)?;
    Ok((graph_path, spec_path))
}
