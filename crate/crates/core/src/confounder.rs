//! Channel screening and the confounder dictionary.
//!
//! A channel is recorded as causal when the intervention changes its
//! reference/distorted distance by more than `tau_rel` times the
//! pre-intervention distance, at every positive intensity (or at a majority
//! of them under [`ScreeningRule::Majority`]). Statistics are averaged over
//! the calibration pairs before thresholding.
//!
//! # File layout
//!
//! All integers little-endian.
//!
//! | bytes          | content                                                      |
//! |----------------|--------------------------------------------------------------|
//! | 4              | magic `CIQA`                                                 |
//! | 4              | schema version, u32 (currently 1)                            |
//! | 4              | header length `L`, u32                                       |
//! | L              | UTF-8 JSON header: `backbone_id`, `channel_counts`, `provenance` |
//! | 8 × ΣC         | weights as f64, stage-major then channel order               |
//! | 8              | first 8 bytes of SHA-256 over everything above               |

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::intervention::InterventionOutcome;

pub const MAGIC: &[u8; 4] = b"CIQA";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreeningRule {
    /// Causal only if the threshold is passed at every positive intensity.
    #[default]
    AllIntensities,
    /// Causal if passed at more than half of the positive intensities.
    Majority,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreeningConfig {
    pub tau_rel: f64,
    #[serde(default)]
    pub rule: ScreeningRule,
    pub min_baseline: f64,
    /// Number of calibration pairs aggregated; filled in by screening.
    #[serde(default)]
    pub calibration_pairs: usize,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        Self {
            tau_rel: 0.05,
            rule: ScreeningRule::AllIntensities,
            min_baseline: 1e-8,
            calibration_pairs: 0,
        }
    }
}

impl ScreeningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_rel > 0.0 && self.tau_rel < 1.0) {
            return Err(Error::InvalidConfig(format!("tau_rel must be in (0, 1), got {}", self.tau_rel)));
        }
        if self.min_baseline.is_nan() || self.min_baseline <= 0.0 {
            return Err(Error::InvalidConfig("min_baseline must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec_hash: String,
    pub screening_config: ScreeningConfig,
    pub calibration_set_digest: String,
    pub build_timestamp: String,
    /// Set on dictionaries produced by [`complement`].
    #[serde(default)]
    pub complemented: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfounderDictionary {
    pub backbone_id: String,
    /// `weights[stage][channel]` in [0, 1].
    pub weights: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

impl ConfounderDictionary {
    /// Dictionary that keeps every channel.
    pub fn all_ones(backbone_id: impl Into<String>, channel_counts: &[usize]) -> Self {
        Self {
            backbone_id: backbone_id.into(),
            weights: channel_counts.iter().map(|c| vec![1.0; *c]).collect(),
            provenance: Provenance {
                spec_hash: "none".into(),
                screening_config: ScreeningConfig::default(),
                calibration_set_digest: "none".into(),
                build_timestamp: reproducible_timestamp(),
                complemented: false,
            },
        }
    }

    pub fn channel_counts(&self) -> Vec<usize> {
        self.weights.iter().map(Vec::len).collect()
    }

    /// Number of channels with non-zero weight, per stage.
    pub fn causal_counts(&self) -> Vec<usize> {
        self.weights.iter().map(|s| s.iter().filter(|w| **w > 0.0).count()).collect()
    }

    pub fn total_causal(&self) -> usize {
        self.causal_counts().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_id.is_empty() {
            return Err(Error::DictionaryFormat("empty backbone id".into()));
        }
        if self.weights.is_empty() {
            return Err(Error::DictionaryFormat("dictionary has no stages".into()));
        }
        if self.weights.iter().flatten().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::DictionaryFormat("weights must lie in [0, 1]".into()));
        }
        let p = &self.provenance;
        if p.spec_hash.is_empty() || p.calibration_set_digest.is_empty() || p.build_timestamp.is_empty() {
            return Err(Error::DictionaryFormat("provenance fields must be non-empty".into()));
        }
        Ok(())
    }

    /// Error unless the dictionary was built for this backbone and stage layout.
    pub fn check_matches(&self, backbone_id: &str, channel_counts: &[usize]) -> Result<()> {
        if self.backbone_id != backbone_id {
            return Err(Error::BackboneMismatch {
                expected: backbone_id.to_string(),
                found: self.backbone_id.clone(),
            });
        }
        if self.channel_counts() != channel_counts {
            return Err(Error::DimMismatch(format!(
                "dictionary has channel counts {:?}, backbone has {:?}",
                self.channel_counts(),
                channel_counts
            )));
        }
        Ok(())
    }

    pub fn with_calibration_digest(mut self, digest: impl Into<String>) -> Self {
        self.provenance.calibration_set_digest = digest.into();
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        #[derive(Serialize)]
        struct Header<'a> {
            backbone_id: &'a str,
            channel_counts: Vec<usize>,
            provenance: &'a Provenance,
        }
        let header = serde_json::to_vec(&Header {
            backbone_id: &self.backbone_id,
            channel_counts: self.channel_counts(),
            provenance: &self.provenance,
        })?;
        let mut out = Vec::with_capacity(12 + header.len() + 8 * self.weights.iter().map(Vec::len).sum::<usize>() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for w in self.weights.iter().flatten() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let check = Sha256::digest(&out);
        out.extend_from_slice(&check[..8]);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::SchemaVersionMismatch {
                found: "missing CIQA magic".into(),
                expected: SCHEMA_VERSION,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != SCHEMA_VERSION {
            return Err(Error::SchemaVersionMismatch {
                found: version.to_string(),
                expected: SCHEMA_VERSION,
            });
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| Error::DictionaryFormat("truncated header".into()))?;

        #[derive(Deserialize)]
        struct Header {
            backbone_id: String,
            channel_counts: Vec<usize>,
            provenance: Provenance,
        }
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::DictionaryFormat(format!("header: {e}")))?;
        let total: usize = header.channel_counts.iter().sum();
        let expected_len = header_end + 8 * total + 8;
        if bytes.len() != expected_len {
            return Err(Error::DictionaryFormat(format!(
                "expected {expected_len} bytes, found {}",
                bytes.len()
            )));
        }
        let body_end = expected_len - 8;
        if Sha256::digest(&bytes[..body_end])[..8] != bytes[body_end..] {
            return Err(Error::DictionaryFormat("checksum mismatch".into()));
        }
        let mut values = bytes[header_end..body_end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let weights = header
            .channel_counts
            .iter()
            .map(|c| values.by_ref().take(*c).collect())
            .collect();
        let dict = Self {
            backbone_id: header.backbone_id,
            weights,
            provenance: header.provenance,
        };
        dict.validate()?;
        Ok(dict)
    }
}

pub fn save_dictionary(dict: &ConfounderDictionary, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dict.to_bytes()?)?;
    Ok(())
}

pub fn load_dictionary(path: impl AsRef<Path>) -> Result<ConfounderDictionary> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| crate::backbone::not_found_or_io(path, e))?;
    ConfounderDictionary::from_bytes(&bytes)
}

/// Load and check the dictionary against the requested backbone layout.
pub fn load_dictionary_for(
    path: impl AsRef<Path>,
    backbone_id: &str,
    channel_counts: &[usize],
) -> Result<ConfounderDictionary> {
    let dict = load_dictionary(path)?;
    dict.check_matches(backbone_id, channel_counts)?;
    Ok(dict)
}

/// Elementwise `1 - weights`; the residual non-causal part.
pub fn complement(dict: &ConfounderDictionary) -> ConfounderDictionary {
    let mut out = dict.clone();
    out.weights.iter_mut().flatten().for_each(|w| *w = 1.0 - *w);
    out.provenance.complemented = !dict.provenance.complemented;
    out
}

/// Screen channels with a timestamp taken from the environment
/// (see [`reproducible_timestamp`]).
pub fn screen_channels(outcomes: &[InterventionOutcome], cfg: &ScreeningConfig) -> Result<ConfounderDictionary> {
    screen_channels_at(outcomes, cfg, &reproducible_timestamp())
}

pub fn screen_channels_at(
    outcomes: &[InterventionOutcome],
    cfg: &ScreeningConfig,
    build_timestamp: &str,
) -> Result<ConfounderDictionary> {
    cfg.validate()?;
    let first = outcomes.first().ok_or(Error::EmptyCalibrationSet)?;
    let counts = first.channel_counts();
    for o in outcomes {
        if o.channel_counts() != counts
            || o.intensity_grid != first.intensity_grid
            || o.backbone_id != first.backbone_id
        {
            return Err(Error::DimMismatch(
                "calibration outcomes disagree on backbone, channels or intensity grid".into(),
            ));
        }
        if o.spec_hash != first.spec_hash {
            return Err(Error::DimMismatch("calibration outcomes use different intervention specs".into()));
        }
    }
    let n = outcomes.len() as f64;
    let positive: Vec<usize> = first
        .intensity_grid
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(k, _)| k)
        .collect();

    let weights = counts
        .iter()
        .enumerate()
        .map(|(s, &channels)| {
            (0..channels)
                .map(|c| {
                    let baseline = outcomes.iter().map(|o| o.stages[s].baseline_dist[c]).sum::<f64>() / n;
                    if baseline < cfg.min_baseline || positive.is_empty() {
                        return 0.0;
                    }
                    let passed = positive
                        .iter()
                        .filter(|&&k| {
                            let delta = outcomes.iter().map(|o| o.stages[s].delta_mean[c][k]).sum::<f64>() / n;
                            delta.abs() > cfg.tau_rel * baseline
                        })
                        .count();
                    let causal = match cfg.rule {
                        ScreeningRule::AllIntensities => passed == positive.len(),
                        ScreeningRule::Majority => 2 * passed > positive.len(),
                    };
                    if causal {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let mut digest = Sha256::new();
    for o in outcomes {
        for stage in &o.stages {
            for b in &stage.baseline_dist {
                digest.update(b.to_le_bytes());
            }
        }
    }
    let dict = ConfounderDictionary {
        backbone_id: first.backbone_id.clone(),
        weights,
        provenance: Provenance {
            spec_hash: first.spec_hash.clone(),
            screening_config: ScreeningConfig {
                calibration_pairs: outcomes.len(),
                ..cfg.clone()
            },
            calibration_set_digest: hex::encode(&digest.finalize()[..16]),
            build_timestamp: build_timestamp.to_string(),
            complemented: false,
        },
    };
    Ok(dict)
}

/// RFC 3339 UTC timestamp from `SOURCE_DATE_EPOCH` when set, else the clock.
pub fn reproducible_timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse::<i64>().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs() as i64)
                .unwrap_or(0)
        });
    format_rfc3339(secs)
}

fn format_rfc3339(secs: i64) -> String {
    let days = secs.div_euclid(86_400);
    let rem = secs.rem_euclid(86_400);
    // Civil date from days since 1970-01-01 (proleptic Gregorian).
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = doy - (153 * mp + 2) / 5 + 1;
    let month = if mp < 10 { mp + 3 } else { mp - 9 };
    let year = yoe + era * 400 + i64::from(month <= 2);
    format!(
        "{year:04}-{month:02}-{day:02}T{:02}:{:02}:{:02}Z",
        rem / 3600,
        (rem % 3600) / 60,
        rem % 60
    )
}
