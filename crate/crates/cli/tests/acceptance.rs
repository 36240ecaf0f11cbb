//! Acceptance suite. Prints one PASS, FAIL or SKIP line per criterion and
//! exits non-zero when any criterion fails.
//!
//! `CIQA_ACCEPTANCE=A1,A4` restricts the run to the listed criteria.
//! A7 needs `CIQA_TID2013_DIR` (database root with `mos_with_names.txt`) and
//! `CIQA_VGG16_GRAPH` (pretrained VGG16 graph with its spec sidecar).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{anyhow, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ciqa::backbone::{load_backbone, BackboneHandle, BackboneSpec};
use ciqa::confounder::{complement, screen_channels_at, ConfounderDictionary, ScreeningConfig};
use ciqa::datasets::{
    distort, generate_references, normalize_mos, parse_tid_mos, synth_corpus, DatasetManifest, DistortionKind,
    SynthConfig,
};
use ciqa::intervention::InterventionSpec;
use ciqa::metrics::{evaluate, logistic4, logistic4_fit, plcc, srcc};
use ciqa::pipeline::{ablate_manifest, benchmark_manifest, screen_manifest, sweep_manifest, FeatureSource};
use ciqa::scoring::{score_stacks, AblationMode, ScoringConfig};
use ciqa::transport::{channel_wasserstein, ot_oracle_1d, DistanceConfig, EmpiricalDistribution};
use ciqa::zoo::{write_synthetic, Architecture};

const TS: &str = "2000-01-01T00:00:00Z";
const ARCHS: [Architecture; 3] = [Architecture::Vgg16, Architecture::Resnet50, Architecture::EfficientnetB0];
const BACKBONE_SEED: u64 = 0;

const A1_INSTANCES: usize = 1000;
const A1_TOL: f64 = 1e-9;
const A1_BUDGET: Duration = Duration::from_secs(10);
const A2_IMAGES: usize = 10;
const A2_BUDGET: Duration = Duration::from_secs(120);
const A3_REFS: usize = 5;
const A3_LEVELS: usize = 5;
const A3_SIZE: u32 = 256;
const A3_MIN_FRACTION: f64 = 0.9;
const A3_BUDGET: Duration = Duration::from_secs(600);
const A4_MIN_GAP: f64 = 0.03;
const A5_TOL: f64 = 1e-12;
const A5_RMS: f64 = 1e-4;
const A7_TARGET: f64 = 0.884;
const A7_TOL: f64 = 0.05;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

/// Backbones, calibration dictionaries and scratch space shared by the checks.
struct Shared {
    dir: tempfile::TempDir,
    backbones: Vec<BackboneHandle>,
    dicts: Vec<ConfounderDictionary>,
    calibration_outcomes: usize,
    zero_delta_violations: usize,
}

fn calibration_manifest(dir: &Path) -> Result<DatasetManifest> {
    let refs = generate_references(2, 96, 96, 100);
    let cfg = SynthConfig {
        kinds: DistortionKind::ALL.to_vec(),
        levels: 3,
        seed: 100,
    };
    Ok(synth_corpus(&refs, &cfg, &dir.join("calibration"))?)
}

impl Shared {
    fn build() -> Result<Self> {
        let dir = tempfile::tempdir()?;
        let calib = desk_manifest(dir.path())?;
        let mut backbones = Vec::new();
        let mut dicts = Vec::new();
        let mut calibration_outcomes = 0;
        let mut zero_delta_violations = 0;
        let spec = InterventionSpec::default();
        for arch in ARCHS {
            let (graph, spec_path) = write_synthetic(arch, BACKBONE_SEED, dir.path().join("backbones"))?;
            let handle = load_backbone(&graph, &BackboneSpec::from_json_file(spec_path)?)?;
            let src = FeatureSource::new(&handle, None);
            let outcomes = sweep_manifest(&src, &calib, &spec, &DistanceConfig::default())?;
            zero_delta_violations += outcomes
                .iter()
                .flat_map(|o| o.stages.iter())
                .flat_map(|s| s.delta_mean.iter())
                .filter(|row| row[0] != 0.0)
                .count();
            calibration_outcomes += outcomes.len();
            let dict = screen_channels_at(&outcomes, &ScreeningConfig::default(), TS)?;
            eprintln!(
                "  {}: {} of {} channels causal",
                handle.id(),
                dict.total_causal(),
                dict.channel_counts().iter().sum::<usize>()
            );
            drop(src);
            backbones.push(handle);
            dicts.push(dict);
        }
        Ok(Self {
            dir,
            backbones,
            dicts,
            calibration_outcomes,
            zero_delta_violations,
        })
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }
}

fn a1() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..A1_INSTANCES {
        let n = rng.random_range(1..=6);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let order = if i % 2 == 0 { 2 } else { 1 };
        let closed = channel_wasserstein(
            &EmpiricalDistribution::new(xs.clone())?,
            &EmpiricalDistribution::new(ys.clone())?,
            order,
        )?;
        let cost = ot_oracle_1d(&xs, &ys, order)?;
        worst = worst.max((closed.powi(order as i32) - cost).abs());
    }
    let elapsed = start.elapsed();
    let detail = format!("max |closed - oracle| = {worst:.2e} over {A1_INSTANCES} instances in {elapsed:.2?}");
    Ok(if worst <= A1_TOL && elapsed < A1_BUDGET {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    })
}

fn png_bytes(img: &image::RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

fn a2(ctx: &Shared) -> Result<Outcome> {
    let start = Instant::now();
    let images = generate_references(A2_IMAGES, 64, 64, 7);
    let mut nonzero = Vec::new();
    for (handle, dict) in ctx.backbones.iter().zip(&ctx.dicts) {
        for (name, img) in &images {
            let f = handle.extract_from_bytes(&png_bytes(img)?)?;
            for mode in AblationMode::ALL {
                let d = mode.needs_dictionary().then_some(dict);
                match score_stacks(&f, &f, d, &ScoringConfig::with_mode(mode)) {
                    Ok((s, _)) if s.value == 0.0 => {}
                    Ok((s, _)) => nonzero.push(format!("{}/{name}/{}={}", handle.id(), mode.short_name(), s.value)),
                    // An empty channel set cannot be scored; not a self-distance violation.
                    Err(ciqa::Error::EmptyCausalSet) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }
    let mut dict_problems = Vec::new();
    for dict in &ctx.dicts {
        if complement(&complement(dict)) != *dict {
            dict_problems.push(format!("{}: complement is not an involution", dict.backbone_id));
        }
        let path = ctx.path().join(format!("{}.ciqa", dict.backbone_id));
        ciqa::confounder::save_dictionary(dict, &path)?;
        let bytes = std::fs::read(&path)?;
        let back = ciqa::confounder::load_dictionary(&path)?;
        ciqa::confounder::save_dictionary(&back, &path)?;
        if back != *dict || std::fs::read(&path)? != bytes {
            dict_problems.push(format!("{}: round trip not bit-exact", dict.backbone_id));
        }
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "{} self-scores, {} nonzero; {} sweeps, {} nonzero deltas at intensity 0; {} dictionary problems; {elapsed:.2?}",
        A2_IMAGES * ARCHS.len() * 3,
        nonzero.len(),
        ctx.calibration_outcomes,
        ctx.zero_delta_violations,
        dict_problems.len()
    );
    let ok = nonzero.is_empty() && ctx.zero_delta_violations == 0 && dict_problems.is_empty() && elapsed < A2_BUDGET;
    if !ok {
        for line in nonzero.iter().chain(&dict_problems).take(10) {
            eprintln!("  {line}");
        }
    }
    Ok(if ok { Outcome::Pass(detail) } else { Outcome::Fail(detail) })
}

fn a3(ctx: &Shared) -> Result<Outcome> {
    let start = Instant::now();
    let refs = generate_references(A3_REFS, A3_SIZE, A3_SIZE, 11);
    let cfg = ScoringConfig::with_mode(AblationMode::GammaCausal);
    let mut monotone = 0;
    let mut total = 0;
    for (handle, dict) in ctx.backbones.iter().zip(&ctx.dicts) {
        for (name, img) in &refs {
            let f_ref = handle.extract_from_bytes(&png_bytes(img)?)?;
            let mut scores = Vec::new();
            for level in 1..=A3_LEVELS {
                let dist = distort(img, DistortionKind::AdditiveNoise, level, 11);
                let f_dist = handle.extract_from_bytes(&png_bytes(&dist)?)?;
                match score_stacks(&f_ref, &f_dist, Some(dict), &cfg) {
                    Ok((s, _)) => scores.push(s.value),
                    Err(ciqa::Error::EmptyCausalSet) => scores.push(f64::NAN),
                    Err(e) => return Err(e.into()),
                }
            }
            let inc = scores.windows(2).all(|w| w[1] > w[0]);
            if !inc {
                eprintln!("  not increasing: {} {name} {scores:?}", handle.id());
            }
            monotone += inc as usize;
            total += 1;
        }
    }
    let elapsed = start.elapsed();
    let fraction = monotone as f64 / total as f64;
    let detail = format!("{monotone}/{total} (ref, backbone) combinations strictly increasing in sigma; {elapsed:.2?}");
    Ok(if fraction >= A3_MIN_FRACTION && elapsed < A3_BUDGET {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    })
}

fn desk_manifest(dir: &Path) -> Result<DatasetManifest> {
    let refs = generate_references(4, 128, 128, 0);
    Ok(synth_corpus(&refs, &SynthConfig::default(), &dir.join("desk"))?)
}

fn a4(ctx: &Shared) -> Result<Outcome> {
    let start = Instant::now();
    let manifest = desk_manifest(ctx.path())?;
    let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut per_backbone = Vec::new();
    let mut excluded = Vec::new();
    for (handle, dict) in ctx.backbones.iter().zip(&ctx.dicts) {
        let src = FeatureSource::new(handle, None);
        let rows = ablate_manifest(&src, &manifest, dict, &ScoringConfig::default())?;
        if rows.len() != 3 {
            excluded.push(handle.id().to_owned());
            continue;
        }
        let mut line = handle.id().to_owned();
        for r in &rows {
            *sums.entry(r.mode.short_name()).or_default() += r.evaluation.report.srcc;
            line.push_str(&format!(" {}={:.4}", r.mode.short_name(), r.evaluation.report.srcc));
        }
        per_backbone.push(line);
    }
    for line in &per_backbone {
        eprintln!("  {line}");
    }
    if per_backbone.is_empty() {
        return Ok(Outcome::Fail(format!("no backbone has both a non-empty Gamma and complement: {excluded:?}")));
    }
    let n = per_backbone.len() as f64;
    let (g, t, e) = (sums["gamma"] / n, sums["theta"] / n, sums["eta"] / n);
    let detail = format!(
        "mean SRCC over {} backbones, {} pairs: gamma {g:.4}, theta {t:.4}, eta {e:.4}, gamma-eta {:.4}; unscorable (empty set): {excluded:?}; {:.2?}",
        per_backbone.len(),
        manifest.records.len(),
        g - e,
        start.elapsed()
    );
    Ok(if excluded.is_empty() && g >= t && t >= e && g - e >= A4_MIN_GAP {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    })
}

fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn mid_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|a| {
            let less = v.iter().filter(|b| *b < a).count() as f64;
            let equal = v.iter().filter(|b| *b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ciqa")
}

fn run_cli(args: &[&str]) -> Result<Vec<u8>> {
    let out = Command::new(bin())
        .args(args)
        .env_remove("CIQA_CACHE_DIR")
        .env("SOURCE_DATE_EPOCH", "946684800")
        .output()?;
    ensure!(
        out.status.success(),
        "ciqa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(out.stdout)
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn a5(ctx: &Shared) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut vectors = 0;
    while vectors < 100 {
        let x: Vec<f64> = (0..40).map(|_| rng.random_range(-8i32..8) as f64).collect();
        let y: Vec<f64> = (0..40).map(|_| rng.random_range(-8i32..8) as f64).collect();
        let (Ok(pc), Ok(sc)) = (plcc(&x, &y), srcc(&x, &y)) else { continue };
        worst = worst
            .max((pc - pearson_oracle(&x, &y)).abs())
            .max((sc - pearson_oracle(&mid_ranks(&x), &mid_ranks(&y))).abs());
        vectors += 1;
    }

    let beta = [1.0, 0.0, 0.5, 0.1];
    let pred: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
    let mos: Vec<f64> = pred.iter().map(|x| logistic4(*x, &beta)).collect();
    let fit = logistic4_fit(&pred, &mos)?;
    let rms = (fit.mapped.iter().zip(&mos).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 50.0).sqrt();

    let manifest = desk_manifest(ctx.path())?;
    let in_process = evaluate(&manifest, |r| Ok(r.mos_norm), false)?.report;
    let cli: serde_json::Value = serde_json::from_slice(&run_cli(&[
        "benchmark",
        "--oracle",
        "--manifest",
        p(&ctx.path().join("desk/manifest.csv")),
    ])?)?;
    let cli_plcc = cli["plcc"].as_f64().ok_or_else(|| anyhow!("no plcc in report"))?;
    let cli_srcc = cli["srcc"].as_f64().ok_or_else(|| anyhow!("no srcc in report"))?;

    let detail = format!(
        "oracle deviation {worst:.2e} on {vectors} tied vectors; logistic RMS {rms:.2e}; oracle benchmark PLCC {cli_plcc:.12} SRCC {cli_srcc:.12}"
    );
    let ok = worst <= A5_TOL
        && rms <= A5_RMS
        && (cli_plcc - 1.0).abs() <= 1e-9
        && (cli_srcc - 1.0).abs() <= A5_TOL
        && (in_process.srcc - 1.0).abs() <= A5_TOL;
    Ok(if ok { Outcome::Pass(detail) } else { Outcome::Fail(detail) })
}

fn screen_and_benchmark(root: &Path, graph: &Path, manifest: &Path, tag: &str, threads: Option<&str>) -> Result<(Vec<u8>, Vec<u8>)> {
    let out = root.join(tag);
    std::fs::create_dir_all(&out)?;
    let dict = out.join("gamma.ciqa");
    let mut screen = vec!["screen", "--graph", p(graph), "--manifest", p(manifest), "--seed", "3", "--out", p(&dict)];
    let mut bench = vec![
        "benchmark", "--graph", p(graph), "--manifest", p(manifest), "--dict", p(&dict), "--mode", "gamma", "--out", p(&out),
    ];
    if let Some(t) = threads {
        screen.extend(["--threads", t]);
        bench.extend(["--threads", t]);
    }
    run_cli(&screen)?;
    run_cli(&bench)?;
    Ok((std::fs::read(&dict)?, std::fs::read(out.join("report.json"))?))
}

fn a6(ctx: &Shared) -> Result<Outcome> {
    let root = ctx.path().join("determinism");
    let (graph, _) = write_synthetic(Architecture::Resnet50, BACKBONE_SEED, root.join("backbone"))?;
    let refs = generate_references(2, 64, 64, 21);
    let cfg = SynthConfig {
        levels: 3,
        seed: 21,
        ..Default::default()
    };
    synth_corpus(&refs, &cfg, &root.join("corpus"))?;
    let manifest = root.join("corpus/manifest.csv");
    let first = screen_and_benchmark(&root, &graph, &manifest, "run1", None)?;
    let second = screen_and_benchmark(&root, &graph, &manifest, "run2", Some("4"))?;
    let dict_same = first.0 == second.0;
    let report_same = first.1 == second.1;
    let detail = format!(
        "dictionary {} ({} bytes), report {} ({} bytes), second run with --threads 4",
        if dict_same { "identical" } else { "differs" },
        first.0.len(),
        if report_same { "identical" } else { "differs" },
        first.1.len()
    );
    Ok(if dict_same && report_same { Outcome::Pass(detail) } else { Outcome::Fail(detail) })
}

fn a7(ctx: &Shared) -> Result<Outcome> {
    let (Some(root), Some(graph)) = (std::env::var_os("CIQA_TID2013_DIR"), std::env::var_os("CIQA_VGG16_GRAPH")) else {
        return Ok(Outcome::Skip("CIQA_TID2013_DIR or CIQA_VGG16_GRAPH not set".into()));
    };
    let (root, graph) = (PathBuf::from(root), PathBuf::from(graph));
    let mos_file = root.join("mos_with_names.txt");
    if !mos_file.is_file() {
        return Ok(Outcome::Skip(format!("{} not found", mos_file.display())));
    }
    let spec = BackboneSpec::from_json_file(BackboneSpec::sidecar_path(&graph)).context("VGG16 spec sidecar")?;
    let handle = load_backbone(&graph, &spec)?;
    let src = FeatureSource::new(&handle, ciqa::cache::FeatureCache::from_env()?);
    let calib = calibration_manifest(ctx.path())?;
    let dict = screen_manifest(
        &src,
        &calib,
        &InterventionSpec::default(),
        &DistanceConfig::default(),
        &ScreeningConfig::default(),
        Some(TS),
    )?;
    let tid = normalize_mos(&parse_tid_mos(&mos_file, &root)?)?;
    let (_, eval) = benchmark_manifest(&src, &tid, Some(&dict), &ScoringConfig::default())?;
    let srcc = eval.report.srcc;
    let detail = format!("TID2013 SRCC {srcc:.4} on {} pairs (target {A7_TARGET} +/- {A7_TOL})", tid.records.len());
    Ok(if (srcc - A7_TARGET).abs() <= A7_TOL {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    })
}

type Check = (&'static str, fn(&Shared) -> Result<Outcome>);

fn main() {
    let selected: Option<Vec<String>> = std::env::var("CIQA_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_uppercase()).collect());
    let wanted = |id: &str| selected.as_ref().is_none_or(|s| s.iter().any(|x| x == id));
    let mut failed = 0;
    let mut report = |id: &str, outcome: Result<Outcome>| {
        let (tag, detail) = match outcome {
            Ok(Outcome::Pass(d)) => ("PASS", d),
            Ok(Outcome::Fail(d)) => ("FAIL", d),
            Ok(Outcome::Skip(d)) => ("SKIP", d),
            Err(e) => ("FAIL", format!("error: {e:#}")),
        };
        failed += (tag == "FAIL") as usize;
        println!("{id} {tag} {detail}");
    };

    if wanted("A1") {
        report("A1", a1());
    }
    let checks: [Check; 6] = [("A2", a2), ("A3", a3), ("A4", a4), ("A5", a5), ("A6", a6), ("A7", a7)];
    if checks.iter().any(|(id, _)| wanted(id)) {
        let start = Instant::now();
        let ctx = match Shared::build() {
            Ok(ctx) => ctx,
            Err(e) => {
                for (id, _) in checks.iter().filter(|(id, _)| wanted(id)) {
                    report(id, Err(anyhow!("setup failed: {e:#}")));
                }
                std::process::exit(1);
            }
        };
        eprintln!("  shared setup (backbones and calibration screening): {:.2?}", start.elapsed());
        for (id, check) in checks {
            if wanted(id) {
                report(id, check(&ctx));
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
