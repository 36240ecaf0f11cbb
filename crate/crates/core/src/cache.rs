//! Content-addressed on-disk feature cache.
//!
//! Entries are keyed by the SHA-256 of the encoded image bytes together with
//! the backbone id and graph digest, so a changed graph never serves stale
//! features. Enabled through the `CIQA_CACHE_DIR` environment variable.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneHandle, FeatureStack};
use crate::error::{Error, Result};

pub const CACHE_ENV: &str = "CIQA_CACHE_DIR";
const MAGIC: &[u8; 4] = b"CIQF";

#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    /// Cache rooted at `$CIQA_CACHE_DIR`, if set and non-empty.
    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var_os(CACHE_ENV) {
            Some(v) if !v.is_empty() => Ok(Some(Self::new(PathBuf::from(v))?)),
            _ => Ok(None),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(image_bytes: &[u8], handle: &BackboneHandle) -> String {
        let mut h = Sha256::new();
        h.update(handle.id().as_bytes());
        h.update([0]);
        h.update(handle.graph_digest().as_bytes());
        h.update([0]);
        h.update(Sha256::digest(image_bytes));
        hex::encode(h.finalize())
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.feat"))
    }

    /// Read an entry; unreadable or corrupt entries count as misses.
    pub fn get(&self, key: &str, backbone_id: &str) -> Option<FeatureStack> {
        let bytes = fs::read(self.path_for(key)).ok()?;
        match decode(&bytes, backbone_id) {
            Ok(stack) => Some(stack),
            Err(e) => {
                log::warn!("ignoring corrupt cache entry {key}: {e}");
                None
            }
        }
    }

    pub fn put(&self, key: &str, stack: &FeatureStack) -> Result<()> {
        let path = self.path_for(key);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, encode(stack))?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }
}

fn encode(stack: &FeatureStack) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((stack.stages.len() as u32).to_le_bytes());
    for s in &stack.stages {
        let (c, h, w) = s.dim();
        for d in [c, h, w] {
            out.extend((d as u32).to_le_bytes());
        }
    }
    for s in &stack.stages {
        for v in s.iter() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

fn decode(bytes: &[u8], backbone_id: &str) -> Result<FeatureStack> {
    let bad = || Error::DictionaryFormat("truncated feature cache entry".into());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(bad)?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::DictionaryFormat("bad feature cache magic".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    let n = u32_at(take(4)?);
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        shapes.push((u32_at(take(4)?), u32_at(take(4)?), u32_at(take(4)?)));
    }
    let mut stages = Vec::with_capacity(n);
    for (c, h, w) in shapes {
        let raw = take(c * h * w * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        stages.push(Array3::from_shape_vec((c, h, w), data).map_err(|_| bad())?);
    }
    if pos != bytes.len() {
        return Err(Error::DictionaryFormat("trailing bytes in feature cache entry".into()));
    }
    Ok(FeatureStack::new(backbone_id, stages))
}

/// Extract features, consulting `cache` first when given.
pub fn extract_cached(handle: &BackboneHandle, image_bytes: &[u8], cache: Option<&FeatureCache>) -> Result<FeatureStack> {
    let Some(cache) = cache else {
        return handle.extract_from_bytes(image_bytes);
    };
    let key = FeatureCache::key(image_bytes, handle);
    if let Some(stack) = cache.get(&key, handle.id()) {
        if stack.num_stages() == handle.list_stages().len() {
            return Ok(stack);
        }
    }
    let stack = handle.extract_from_bytes(image_bytes)?;
    if let Err(e) = cache.put(&key, &stack) {
        log::warn!("could not write feature cache entry: {e}");
    }
    Ok(stack)
}
