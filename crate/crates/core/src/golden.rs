//! Reader for golden activation dumps.
//!
//! A dump directory holds `index.json` and raw little-endian float32 files:
//!
//! ```json
//! {
//!   "backbone_id": "vgg16",
//!   "dtype": "float32",
//!   "byte_order": "little",
//!   "samples": [
//!     {"input": {"file": "input_0.bin", "shape": [1, 3, 64, 64]},
//!      "outputs": [{"tap": "stage1", "file": "input_0_stage1.bin", "shape": [1, 64, 64, 64]}]}
//!   ]
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::backbone::{not_found_or_io, BackboneHandle, ImageTensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub tap: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldenSample {
    pub input: TensorEntry,
    pub outputs: Vec<OutputEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldenIndex {
    pub backbone_id: String,
    pub dtype: String,
    pub byte_order: String,
    pub samples: Vec<GoldenSample>,
}

#[derive(Clone, Debug)]
pub struct GoldenDump {
    pub dir: PathBuf,
    pub index: GoldenIndex,
}

pub fn read_f32_tensor(path: &Path, shape: &[usize]) -> Result<ArrayD<f32>> {
    let bytes = fs::read(path).map_err(|e| not_found_or_io(path, e))?;
    let expected: usize = shape.iter().product();
    if bytes.len() != expected * 4 {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} bytes for shape {shape:?}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

pub fn write_f32_tensor(path: &Path, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

impl GoldenDump {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let index_path = dir.join("index.json");
        let text = fs::read_to_string(&index_path).map_err(|e| not_found_or_io(&index_path, e))?;
        let index: GoldenIndex = serde_json::from_str(&text)?;
        if index.dtype != "float32" || index.byte_order != "little" {
            return Err(Error::InvalidConfig(format!(
                "unsupported golden encoding {} / {}",
                index.dtype, index.byte_order
            )));
        }
        if index.samples.is_empty() {
            return Err(Error::InvalidConfig("golden dump has no samples".into()));
        }
        Ok(Self { dir, index })
    }

    /// Input tensor of sample `i` as an already-normalized image tensor.
    pub fn input(&self, i: usize) -> Result<ImageTensor> {
        let entry = &self.sample(i)?.input;
        let t = read_f32_tensor(&self.dir.join(&entry.file), &entry.shape)?;
        let (c, h, w) = chw(&entry.shape)?;
        let data = Array3::from_shape_vec((c, h, w), t.into_raw_vec_and_offset().0)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(ImageTensor {
            data,
            source_dims: (h, w),
        })
    }

    /// Expected activations of sample `i`, one `C×H×W` array per tap.
    pub fn outputs(&self, i: usize) -> Result<Vec<(String, Array3<f32>)>> {
        self.sample(i)?
            .outputs
            .iter()
            .map(|o| {
                let t = read_f32_tensor(&self.dir.join(&o.file), &o.shape)?;
                let (c, h, w) = chw(&o.shape)?;
                let a = Array3::from_shape_vec((c, h, w), t.into_raw_vec_and_offset().0)
                    .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
                Ok((o.tap.clone(), a))
            })
            .collect()
    }

    fn sample(&self, i: usize) -> Result<&GoldenSample> {
        self.index.samples.get(i).ok_or(Error::IndexOutOfRange {
            what: "golden sample",
            index: i,
            len: self.index.samples.len(),
        })
    }

    /// Replay every sample through `handle`; returns the max-abs deviation
    /// per sample and tap, in dump order.
    pub fn replay(&self, handle: &BackboneHandle) -> Result<Vec<Vec<(String, f32)>>> {
        (0..self.index.samples.len())
            .map(|i| {
                let stack = handle.extract_features(&self.input(i)?)?;
                self.outputs(i)?
                    .into_iter()
                    .map(|(tap, expected)| {
                        let s = handle
                            .list_stages()
                            .iter()
                            .position(|t| *t == tap)
                            .ok_or_else(|| Error::UnknownStageTap(tap.clone()))?;
                        let got = &stack.stages[s];
                        if got.dim() != expected.dim() {
                            return Err(Error::ShapeMismatch(format!(
                                "{tap}: {:?} vs golden {:?}",
                                got.dim(),
                                expected.dim()
                            )));
                        }
                        let dev = got
                            .iter()
                            .zip(expected.iter())
                            .map(|(a, b)| (a - b).abs())
                            .fold(0.0f32, f32::max);
                        Ok((tap, dev))
                    })
                    .collect()
            })
            .collect()
    }
}

fn chw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [1, c, h, w] | [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::ShapeMismatch(format!("expected [1,C,H,W] or [C,H,W], got {other:?}"))),
    }
}
