//! Dataset manifests, MOS normalization and the synthetic distortion corpus.
//!
//! CSV manifests are UTF-8 with a header row `ref,dist,mos[,tag][,mos_norm]`.
//! Relative paths resolve against the CSV's directory. A first line of the
//! form `#ciqa {json}` carries manifest metadata (name, raw range, polarity)
//! and is written by [`write_csv_manifest`].

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::not_found_or_io;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub ref_path: PathBuf,
    pub dist_path: PathBuf,
    pub mos_raw: f64,
    /// In [0, 1] once the manifest is normalized, NaN before.
    pub mos_norm: f64,
    pub distortion_tag: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub records: Vec<PairRecord>,
    pub mos_range_raw: (f64, f64),
    pub higher_better: bool,
    pub normalized: bool,
}

/// MOS polarity and raw score range of a known database.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetInfo {
    pub name: &'static str,
    pub higher_better: bool,
    pub mos_range: (f64, f64),
}

/// LIVE and CSIQ publish DMOS (lower is better); the others publish MOS.
pub const POLARITY_TABLE: &[DatasetInfo] = &[
    DatasetInfo {
        name: "live",
        higher_better: false,
        mos_range: (0.0, 100.0),
    },
    DatasetInfo {
        name: "csiq",
        higher_better: false,
        mos_range: (0.0, 1.0),
    },
    DatasetInfo {
        name: "tid2008",
        higher_better: true,
        mos_range: (0.0, 9.0),
    },
    DatasetInfo {
        name: "tid2013",
        higher_better: true,
        mos_range: (0.0, 9.0),
    },
    DatasetInfo {
        name: "kadid10k",
        higher_better: true,
        mos_range: (1.0, 5.0),
    },
    DatasetInfo {
        name: "pipal",
        higher_better: true,
        mos_range: (868.0, 1857.0),
    },
];

/// Look up a database by case-insensitive name (`kadid` matches `kadid10k`).
pub fn dataset_info(name: &str) -> Option<DatasetInfo> {
    let key = name.to_ascii_lowercase();
    POLARITY_TABLE
        .iter()
        .find(|d| d.name == key || d.name.starts_with(&key) && key.len() >= 4)
        .copied()
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let (lo, hi) = self.mos_range_raw;
        if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
            return Err(Error::DegenerateRange(lo));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.ref_path.as_os_str().is_empty() || r.dist_path.as_os_str().is_empty() {
                return Err(Error::Parse {
                    line: i + 2,
                    msg: "empty path".into(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Normalized MOS in record order.
    pub fn mos_norm(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mos_norm).collect()
    }

    /// Reference paths in first-appearance order.
    pub fn unique_refs(&self) -> Vec<PathBuf> {
        let mut seen = std::collections::HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.ref_path.clone()))
            .map(|r| r.ref_path.clone())
            .collect()
    }
}

fn data_range(records: &[PairRecord]) -> (f64, f64) {
    records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r.mos_raw), hi.max(r.mos_raw))
    })
}

#[derive(Serialize, Deserialize)]
struct CsvMeta {
    name: String,
    mos_min: f64,
    mos_max: f64,
    higher_better: bool,
}

const META_PREFIX: &str = "#ciqa ";

fn parse_real(s: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("{what} `{s}` is not a real number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("{what} must be finite"),
        });
    }
    Ok(v)
}

/// Load a CSV manifest. The raw range comes from the metadata line when
/// present, otherwise from the data; polarity defaults to higher-better.
pub fn load_csv_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| not_found_or_io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    parse_csv_manifest(&text, base, &name)
}

/// Parse CSV manifest text, resolving relative paths against `base`.
pub fn parse_csv_manifest(text: &str, base: &Path, default_name: &str) -> Result<DatasetManifest> {
    let (meta, body, line_offset) = match text.strip_prefix(META_PREFIX) {
        Some(rest) => {
            let (first, body) = rest.split_once('\n').unwrap_or((rest, ""));
            let meta: CsvMeta = serde_json::from_str(first.trim()).map_err(|e| Error::Parse {
                line: 1,
                msg: format!("bad metadata line: {e}"),
            })?;
            (Some(meta), body, 1)
        }
        None => (None, text, 0),
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let header_line = line_offset + 1;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: header_line,
            msg: e.to_string(),
        })?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let missing = |name: &str| Error::Parse {
        line: header_line,
        msg: format!("missing `{name}` column"),
    };
    let ref_col = column("ref").ok_or_else(|| missing("ref"))?;
    let dist_col = column("dist").ok_or_else(|| missing("dist"))?;
    let mos_col = column("mos").ok_or_else(|| missing("mos"))?;
    let tag_col = column("tag");
    let norm_col = column("mos_norm");

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0) + line_offset,
            msg: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0) + line_offset;
        let field = |i: usize| row.get(i).unwrap_or("");
        let (r, d) = (field(ref_col), field(dist_col));
        if r.is_empty() || d.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty path".into(),
            });
        }
        let mos_raw = parse_real(field(mos_col), line, "mos")?;
        let mos_norm = match norm_col.map(field) {
            Some(s) if !s.is_empty() => parse_real(s, line, "mos_norm")?,
            _ => f64::NAN,
        };
        let tag = tag_col.map(field).filter(|s| !s.is_empty()).map(str::to_owned);
        records.push(PairRecord {
            ref_path: base.join(r),
            dist_path: base.join(d),
            mos_raw,
            mos_norm,
            distortion_tag: tag,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest);
    }

    let normalized = norm_col.is_some() && records.iter().all(|r| r.mos_norm.is_finite());
    let manifest = match meta {
        Some(m) => DatasetManifest {
            name: m.name,
            mos_range_raw: (m.mos_min, m.mos_max),
            higher_better: m.higher_better,
            records,
            normalized,
        },
        None => DatasetManifest {
            name: default_name.to_owned(),
            mos_range_raw: data_range(&records),
            higher_better: true,
            records,
            normalized,
        },
    };
    Ok(manifest)
}

fn display_path(p: &Path, base: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
}

/// Write a manifest as CSV with a metadata line. Paths under the output
/// directory are written relative to it.
pub fn write_csv_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    let meta = CsvMeta {
        name: manifest.name.clone(),
        mos_min: manifest.mos_range_raw.0,
        mos_max: manifest.mos_range_raw.1,
        higher_better: manifest.higher_better,
    };
    writeln!(out, "{META_PREFIX}{}", serde_json::to_string(&meta)?)?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["ref", "dist", "mos", "tag", "mos_norm"]).map_err(io)?;
        for r in &manifest.records {
            let norm = if manifest.normalized {
                format!("{:?}", r.mos_norm)
            } else {
                String::new()
            };
            w.write_record([
                display_path(&r.ref_path, base),
                display_path(&r.dist_path, base),
                format!("{:?}", r.mos_raw),
                r.distortion_tag.clone().unwrap_or_default(),
                norm,
            ])
            .map_err(io)?;
        }
        w.flush()?;
    }
    fs::write(path, out)?;
    Ok(())
}

fn find_case_insensitive(dir: &Path, file_name: &str) -> Option<PathBuf> {
    let exact = dir.join(file_name);
    if exact.is_file() {
        return Some(exact);
    }
    fs::read_dir(dir).ok()?.flatten().map(|e| e.path()).find(|p| {
        p.is_file()
            && p.file_name()
                .map(|n| n.to_string_lossy().eq_ignore_ascii_case(file_name))
                .unwrap_or(false)
    })
}

/// Parse a TID-style `mos_with_names` file: one `<score> <distorted_name>`
/// per line. The reference is the distorted name's leading image id with the
/// same extension, looked up case-insensitively in `image_root/reference_images`
/// or `image_root`. Distorted images are taken from `image_root/distorted_images`
/// when that directory exists.
pub fn parse_tid_mos(mos_file: &Path, image_root: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(mos_file).map_err(|e| not_found_or_io(mos_file, e))?;
    let ref_dirs = [image_root.join("reference_images"), image_root.to_path_buf()];
    let dist_dir = if image_root.join("distorted_images").is_dir() {
        image_root.join("distorted_images")
    } else {
        image_root.to_path_buf()
    };
    let mut ref_cache: HashMap<String, PathBuf> = HashMap::new();
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.trim();
        if content.is_empty() {
            continue;
        }
        let mut parts = content.split_whitespace();
        let (Some(score), Some(name), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                line,
                msg: "expected `<score> <distorted_name>`".into(),
            });
        };
        let mos_raw = parse_real(score, line, "score")?;
        let stem = Path::new(name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let ext = Path::new(name)
            .extension()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let fields: Vec<&str> = stem.split('_').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                line,
                msg: format!("distorted name `{name}` is not <image>_<type>_<level>"),
            });
        }
        let ref_name = if ext.is_empty() {
            fields[0].to_owned()
        } else {
            format!("{}.{ext}", fields[0])
        };
        let ref_path = match ref_cache.get(&ref_name) {
            Some(p) => p.clone(),
            None => {
                let found = ref_dirs
                    .iter()
                    .find_map(|d| find_case_insensitive(d, &ref_name))
                    .ok_or_else(|| Error::MissingReferenceImage(ref_dirs[0].join(&ref_name)))?;
                ref_cache.insert(ref_name.clone(), found.clone());
                found
            }
        };
        records.push(PairRecord {
            ref_path,
            dist_path: dist_dir.join(name),
            mos_raw,
            mos_norm: f64::NAN,
            distortion_tag: Some(fields[1].to_owned()),
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest);
    }
    Ok(DatasetManifest {
        name: "tid".into(),
        records,
        mos_range_raw: (0.0, 9.0),
        higher_better: true,
        normalized: false,
    })
}

/// Linearly map raw MOS onto [0, 1] using `mos_range_raw`, flipping
/// lower-better scales so that 1 is always best quality.
pub fn normalize_mos(manifest: &DatasetManifest) -> Result<DatasetManifest> {
    if manifest.records.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let (lo, hi) = manifest.mos_range_raw;
    if hi <= lo || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::DegenerateRange(lo));
    }
    let mut out = manifest.clone();
    for r in &mut out.records {
        let x = ((r.mos_raw - lo) / (hi - lo)).clamp(0.0, 1.0);
        r.mos_norm = if manifest.higher_better { x } else { 1.0 - x };
    }
    out.normalized = true;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    GaussianBlur,
    AdditiveNoise,
    Quantize,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 3] = [
        DistortionKind::GaussianBlur,
        DistortionKind::AdditiveNoise,
        DistortionKind::Quantize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::GaussianBlur => "gaussian_blur",
            DistortionKind::AdditiveNoise => "additive_noise",
            DistortionKind::Quantize => "quantize",
        }
    }

    /// Strength at 1-based `level`: blur sigma in pixels, noise sigma in
    /// 8-bit units, or quantization step in 8-bit units.
    pub fn strength(self, level: usize) -> f64 {
        let k = level as f64;
        match self {
            DistortionKind::GaussianBlur => 0.6 * k,
            DistortionKind::AdditiveNoise => 6.0 * k,
            DistortionKind::Quantize => 2f64.powi(level as i32 + 2).min(128.0),
        }
    }
}

impl std::str::FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blur" | "blur" => Ok(DistortionKind::GaussianBlur),
            "additive_noise" | "noise" => Ok(DistortionKind::AdditiveNoise),
            "quantize" => Ok(DistortionKind::Quantize),
            other => Err(Error::InvalidConfig(format!("unknown distortion kind `{other}`"))),
        }
    }
}

fn mix(mut h: u64, v: u64) -> u64 {
    h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(parts.iter().fold(0x5eed, |h, v| mix(h, *v)))
}

/// Procedural natural-ish test image: smooth gradients, oriented gratings,
/// filled shapes and fine texture, all drawn from `seed`.
pub fn procedural_reference(seed: u64, width: u32, height: u32) -> RgbImage {
    let mut rng = rng_for(&[seed, 0xbeef]);
    let base: [f64; 3] = [rng.random_range(40.0..200.0), rng.random_range(40.0..200.0), rng.random_range(40.0..200.0)];
    let grad: [[f64; 2]; 3] = std::array::from_fn(|_| [rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0)]);
    let gratings: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let freq: f64 = rng.random_range(0.02..0.3);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = std::array::from_fn(|_| rng.random_range(-30.0..30.0));
            (angle, freq, phase, amp)
        })
        .collect();
    let shapes: Vec<(bool, f64, f64, f64, f64, [f64; 3])> = (0..rng.random_range(4..9))
        .map(|_| {
            let circle = rng.random_bool(0.5);
            let cx = rng.random_range(0.0..1.0);
            let cy = rng.random_range(0.0..1.0);
            let rx = rng.random_range(0.05..0.3);
            let ry = rng.random_range(0.05..0.3);
            let color = std::array::from_fn(|_| rng.random_range(0.0..255.0));
            (circle, cx, cy, rx, ry, color)
        })
        .collect();
    let texture_amp = rng.random_range(4.0..14.0);
    let (w, h) = (width as f64, height as f64);
    let mut img = RgbImage::new(width, height);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (u, v) = (x as f64 / w, y as f64 / h);
        let mut c: [f64; 3] = std::array::from_fn(|i| base[i] + grad[i][0] * (u - 0.5) + grad[i][1] * (v - 0.5));
        for (angle, freq, phase, amp) in &gratings {
            let t = (x as f64 * angle.cos() + y as f64 * angle.sin()) * freq + phase;
            for i in 0..3 {
                c[i] += amp[i] * t.sin();
            }
        }
        for (circle, cx, cy, rx, ry, color) in &shapes {
            let (dx, dy) = ((u - cx) / rx, (v - cy) / ry);
            let inside = if *circle { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
            if inside {
                for i in 0..3 {
                    c[i] = 0.35 * c[i] + 0.65 * color[i];
                }
            }
        }
        let tex = ((x as f64 * 1.7).sin() * (y as f64 * 2.3).cos() + (x as f64 * 0.37 + y as f64 * 0.61).sin()) * texture_amp;
        *px = Rgb(std::array::from_fn(|i| (c[i] + tex).round().clamp(0.0, 255.0) as u8));
    }
    img
}

/// `n` named procedural references `ref00`, `ref01`, ...
pub fn generate_references(n: usize, width: u32, height: u32, seed: u64) -> Vec<(String, RgbImage)> {
    (0..n)
        .map(|i| (format!("ref{i:02}"), procedural_reference(mix(seed, i as u64), width, height)))
        .collect()
}

/// Apply one distortion at 1-based `level`. Noise is drawn from `seed`.
pub fn distort(img: &RgbImage, kind: DistortionKind, level: usize, seed: u64) -> RgbImage {
    let s = kind.strength(level);
    match kind {
        DistortionKind::GaussianBlur => image::imageops::blur(img, s as f32),
        DistortionKind::AdditiveNoise => {
            let mut rng = rng_for(&[seed, level as u64, 0x401e]);
            let normal = Normal::new(0.0, s).expect("positive sigma");
            let mut out = img.clone();
            for px in out.pixels_mut() {
                for ch in px.0.iter_mut() {
                    *ch = (*ch as f64 + normal.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
                }
            }
            out
        }
        DistortionKind::Quantize => {
            let mut out = img.clone();
            for px in out.pixels_mut() {
                for ch in px.0.iter_mut() {
                    let q = ((*ch as f64 / s).floor() * s + s / 2.0).clamp(0.0, 255.0);
                    *ch = q.round() as u8;
                }
            }
            out
        }
    }
}

/// Pseudo-MOS in (0, 1): strictly decreasing in level, independent of kind.
pub fn pseudo_mos(level: usize, levels: usize) -> f64 {
    1.0 - level as f64 / (levels as f64 + 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kinds: Vec<DistortionKind>,
    pub levels: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kinds: DistortionKind::ALL.to_vec(),
            levels: 5,
            seed: 0,
        }
    }
}

fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    let tmp = path.with_extension("png.tmp");
    img.save_with_format(&tmp, image::ImageFormat::Png)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Write `out_dir/<ref>/reference.png` and `out_dir/<ref>/<kind>_<level>.png`
/// for every reference, kind and level `1..=levels`, plus `manifest.csv`.
/// Returns the normalized manifest (records ordered by ref, kind, level).
pub fn synth_corpus(refs: &[(String, RgbImage)], cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if refs.is_empty() {
        return Err(Error::InvalidConfig("synthetic corpus needs at least one reference".into()));
    }
    if cfg.levels < 2 {
        return Err(Error::InvalidConfig("synthetic corpus needs at least two levels".into()));
    }
    if cfg.kinds.is_empty() {
        return Err(Error::InvalidConfig("synthetic corpus needs at least one distortion kind".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut records = Vec::new();
    for (ri, (name, img)) in refs.iter().enumerate() {
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(Error::InvalidConfig(format!("invalid reference name `{name}`")));
        }
        let dir = out_dir.join(name);
        fs::create_dir_all(&dir)?;
        let ref_path = dir.join("reference.png");
        write_png(img, &ref_path)?;
        for kind in &cfg.kinds {
            for level in 1..=cfg.levels {
                let seed = mix(mix(cfg.seed, ri as u64), *kind as u64);
                let dist_path = dir.join(format!("{}_{level}.png", kind.name()));
                write_png(&distort(img, *kind, level, seed), &dist_path)?;
                let mos = pseudo_mos(level, cfg.levels);
                records.push(PairRecord {
                    ref_path: ref_path.clone(),
                    dist_path,
                    mos_raw: mos,
                    mos_norm: f64::NAN,
                    distortion_tag: Some(format!("{}_{level}", kind.name())),
                });
            }
        }
    }
    let manifest = normalize_mos(&DatasetManifest {
        name: "synthetic".into(),
        records,
        mos_range_raw: (0.0, 1.0),
        higher_better: true,
        normalized: false,
    })?;
    write_csv_manifest(&manifest, &out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
