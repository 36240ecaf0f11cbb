//! Command implementations behind the `ciqa` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ciqa::backbone::{load_backbone, BackboneHandle, BackboneSpec};
use ciqa::cache::FeatureCache;
use ciqa::confounder::{load_dictionary, save_dictionary, ConfounderDictionary, ScreeningConfig, ScreeningRule};
use ciqa::datasets::{
    dataset_info, generate_references, load_csv_manifest, normalize_mos, parse_tid_mos, synth_corpus,
    write_csv_manifest, DatasetManifest, DistortionKind, PairRecord, SynthConfig,
};
use ciqa::intervention::InterventionSpec;
use ciqa::maps::export_effect_maps;
use ciqa::metrics::{evaluate_scores, Evaluation, MetricsReport};
use ciqa::pipeline::{ablate_manifest, benchmark_manifest, screen_manifest, FeatureSource};
use ciqa::scoring::{effective_weights, invariance_from_stacks, score_stacks, AblationMode, ScoringConfig};
use ciqa::transport::{ChannelMetric, DistanceConfig};
use ciqa::zoo::{write_synthetic, Architecture};
use ciqa::Error;

#[derive(Debug, Parser)]
#[command(name = "ciqa", version, about = "Causal-screened optimal transport image quality assessment")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score one reference/distorted pair.
    Score(ScoreArgs),
    /// Build a confounder dictionary from a calibration manifest.
    Screen(ScreenArgs),
    /// Correlate scores with MOS on a manifest.
    Benchmark(BenchmarkArgs),
    /// Evaluate the theta, gamma and eta channel sets on a manifest.
    Ablate(AblateArgs),
    /// Write per-channel intervention effect maps for one pair.
    ExportMaps(ExportMapsArgs),
    /// Write per-pair (mos_norm, mapped prediction) CSV for a manifest.
    ExportScatter(ExportScatterArgs),
    /// Report how far a pair's score moves under the interventions.
    CheckInvariance(InvarianceArgs),
    /// Generate the synthetic distortion corpus.
    Synth(SynthArgs),
    /// Write a deterministic synthetic backbone graph and its spec sidecar.
    MakeBackbone(MakeBackboneArgs),
    /// Convert a TID-style `mos_with_names` file into a CSV manifest.
    TidManifest(TidManifestArgs),
}

#[derive(Debug, Clone, Args)]
pub struct BackboneArgs {
    /// ONNX backbone graph.
    #[arg(long)]
    pub graph: PathBuf,
    /// Backbone spec sidecar (default: `<graph stem>.spec.json`).
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Theta,
    Gamma,
    Eta,
}

impl From<ModeArg> for AblationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Theta => AblationMode::ThetaAll,
            ModeArg::Gamma => AblationMode::GammaCausal,
            ModeArg::Eta => AblationMode::EtaComplement,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    W2,
    W1,
    MeanAbsDiff,
}

impl From<MetricArg> for ChannelMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::W2 => ChannelMetric::Wasserstein2,
            MetricArg::W1 => ChannelMetric::Wasserstein1,
            MetricArg::MeanAbsDiff => ChannelMetric::MeanAbsDiff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Emit {
    #[default]
    Summary,
    PerChannel,
}

#[derive(Debug, Clone, Args)]
pub struct ScoringArgs {
    /// Confounder dictionary file.
    #[arg(long)]
    pub dict: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Gamma)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = MetricArg::W2)]
    pub metric: MetricArg,
    /// Comma-separated stage weights summing to one (default: uniform).
    #[arg(long, value_delimiter = ',')]
    pub stage_weights: Vec<f64>,
}

impl ScoringArgs {
    fn config(&self) -> ScoringConfig {
        ScoringConfig {
            ablation_mode: self.mode.into(),
            distance: DistanceConfig {
                per_channel_metric: self.metric.into(),
                stage_weights: self.stage_weights.clone(),
            },
            ..Default::default()
        }
    }

    fn dictionary(&self) -> Result<Option<ConfounderDictionary>> {
        let dict = self.dict.as_ref().map(load_dictionary).transpose()?;
        if dict.is_none() && AblationMode::from(self.mode).needs_dictionary() {
            return Err(Error::InvalidConfig(format!(
                "--mode {} requires --dict",
                AblationMode::from(self.mode).short_name()
            ))
            .into());
        }
        Ok(dict)
    }
}

#[derive(Debug, Clone, Args)]
pub struct InterventionArgs {
    /// Intervention spec JSON (default: additive Gaussian, grid 0,.05,.1,.2,.4, 2 draws).
    #[arg(long)]
    pub intervention: Option<PathBuf>,
    /// Master seed; overrides the spec file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl InterventionArgs {
    fn spec(&self) -> Result<InterventionSpec> {
        let mut spec = match &self.intervention {
            Some(p) => InterventionSpec::from_json_file(p)?,
            None => InterventionSpec::default(),
        };
        if let Some(seed) = self.seed {
            spec.master_seed = seed;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ManifestArgs {
    /// CSV manifest (`ref,dist,mos[,tag]`).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Known database name; sets MOS polarity and raw range.
    #[arg(long)]
    pub dataset: Option<String>,
}

impl ManifestArgs {
    fn load(&self) -> Result<DatasetManifest> {
        let mut m = load_csv_manifest(&self.manifest)?;
        if let Some(name) = &self.dataset {
            let info = dataset_info(name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown dataset `{name}`")))?;
            m.name = info.name.to_owned();
            m.higher_better = info.higher_better;
            m.mos_range_raw = info.mos_range;
            m.normalized = false;
        }
        if !m.normalized {
            m = normalize_mos(&m)?;
        }
        Ok(m)
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    pub reference: PathBuf,
    pub distorted: PathBuf,
    #[command(flatten)]
    pub backbone: BackboneArgs,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long, value_enum, default_value_t)]
    pub emit: Emit,
    /// Print a TSV line instead of JSON.
    #[arg(long)]
    pub tsv: bool,
}

#[derive(Debug, Args)]
pub struct ScreenArgs {
    #[command(flatten)]
    pub backbone: BackboneArgs,
    #[command(flatten)]
    pub manifest: ManifestArgs,
    #[command(flatten)]
    pub intervention: InterventionArgs,
    #[arg(long, value_enum, default_value_t = MetricArg::W2)]
    pub metric: MetricArg,
    /// Relative threshold on the invariance statistic.
    #[arg(long, default_value_t = 0.05)]
    pub tau_rel: f64,
    /// Require the threshold at all positive intensities, or at a majority.
    #[arg(long, value_enum, default_value_t = RuleArg::All)]
    pub rule: RuleArg,
    #[arg(long, default_value_t = 1e-8)]
    pub min_baseline: f64,
    /// Output dictionary file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    All,
    Majority,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Backbone graph; not needed with --oracle.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    pub manifest: ManifestArgs,
    /// Directory for `report.json` and `scatter.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use the normalized MOS itself as the score (harness self-check).
    #[arg(long, hide = true)]
    pub oracle: bool,
    #[arg(long)]
    pub tsv: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub backbone: BackboneArgs,
    /// Confounder dictionary file.
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricArg::W2)]
    pub metric: MetricArg,
    #[command(flatten)]
    pub manifest: ManifestArgs,
    /// Directory for `ablation.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub emit: Emit,
    #[arg(long)]
    pub tsv: bool,
}

#[derive(Debug, Args)]
pub struct ExportMapsArgs {
    pub reference: PathBuf,
    pub distorted: PathBuf,
    #[command(flatten)]
    pub backbone: BackboneArgs,
    #[command(flatten)]
    pub intervention: InterventionArgs,
    /// Index into the intensity grid (default: the largest intensity).
    #[arg(long)]
    pub intensity_index: Option<usize>,
    /// Comma-separated 1-based stages (default: all).
    #[arg(long, value_delimiter = ',')]
    pub stages: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportScatterArgs {
    #[command(flatten)]
    pub backbone: BackboneArgs,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    pub manifest: ManifestArgs,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InvarianceArgs {
    pub reference: PathBuf,
    pub distorted: PathBuf,
    #[command(flatten)]
    pub backbone: BackboneArgs,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    pub intervention: InterventionArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of procedural reference images.
    #[arg(long, default_value_t = 5)]
    pub refs: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 256)]
    pub size: u32,
    #[arg(long, default_value_t = 5)]
    pub levels: usize,
    /// Comma-separated distortion kinds (default: all).
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MakeBackboneArgs {
    /// vgg16, resnet50, efficientnet_b0 or tiny.
    #[arg(long)]
    pub arch: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TidManifestArgs {
    #[arg(long)]
    pub mos_file: PathBuf,
    /// Database root holding `reference_images/` and `distorted_images/`.
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit code for a failed command: 2 for input errors, 3 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_input_error() { 2 } else { 3 };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
        if cause.downcast_ref::<clap::Error>().is_some() {
            return 2;
        }
    }
    3
}

pub fn configure_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Error::InvalidConfig("--threads must be >= 1".into()).into());
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        log::debug!("thread pool already configured: {e}");
    }
    Ok(())
}

fn open_backbone(graph: &Path, spec: Option<&Path>) -> Result<BackboneHandle> {
    let spec_path = spec.map(Path::to_path_buf).unwrap_or_else(|| BackboneSpec::sidecar_path(graph));
    let spec = BackboneSpec::from_json_file(&spec_path)?;
    Ok(load_backbone(graph, &spec)?)
}

fn cache() -> Result<Option<FeatureCache>> {
    Ok(FeatureCache::from_env()?)
}

fn print_json(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

/// Run one parsed command, printing results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Score(a) => cmd_score(a, out),
        Command::Screen(a) => cmd_screen(a, out),
        Command::Benchmark(a) => cmd_benchmark(a, out),
        Command::Ablate(a) => cmd_ablate(a, out),
        Command::ExportMaps(a) => cmd_export_maps(a, out),
        Command::ExportScatter(a) => cmd_export_scatter(a, out),
        Command::CheckInvariance(a) => cmd_check_invariance(a, out),
        Command::Synth(a) => cmd_synth(a, out),
        Command::MakeBackbone(a) => cmd_make_backbone(a, out),
        Command::TidManifest(a) => cmd_tid_manifest(a, out),
    }
}

fn single_pair(reference: &Path, distorted: &Path) -> PairRecord {
    PairRecord {
        ref_path: reference.to_path_buf(),
        dist_path: distorted.to_path_buf(),
        mos_raw: f64::NAN,
        mos_norm: f64::NAN,
        distortion_tag: None,
    }
}

#[derive(Serialize)]
struct PerChannelScore<'a> {
    #[serde(flatten)]
    score: &'a ciqa::QualityScore,
    per_channel_cost: &'a [Vec<f64>],
    weights: &'a [Vec<f64>],
    skipped_stages: &'a [usize],
}

pub fn cmd_score(a: ScoreArgs, out: &mut dyn Write) -> Result<()> {
    let dict = a.scoring.dictionary()?;
    let cfg = a.scoring.config();
    let handle = open_backbone(&a.backbone.graph, a.backbone.spec.as_deref())?;
    let src = FeatureSource::new(&handle, cache()?);
    let (f_ref, f_dist) = src.pair(&single_pair(&a.reference, &a.distorted))?;
    let (score, transport) = score_stacks(&f_ref, &f_dist, dict.as_ref(), &cfg)?;
    if a.tsv {
        writeln!(out, "{}\t{}\t{}", score.value, score.mode.short_name(), score.backbone_id)?;
        return Ok(());
    }
    match a.emit {
        Emit::Summary => print_json(out, &score),
        Emit::PerChannel => {
            let weights = effective_weights(cfg.ablation_mode, dict.as_ref(), handle.id(), &f_ref.channel_counts())?;
            print_json(
                out,
                &PerChannelScore {
                    score: &score,
                    per_channel_cost: &transport.per_channel_cost,
                    weights: &weights,
                    skipped_stages: &transport.skipped_stages,
                },
            )
        }
    }
}

#[derive(Serialize)]
struct ScreenSummary {
    dictionary: PathBuf,
    backbone_id: String,
    spec_hash: String,
    channel_counts: Vec<usize>,
    causal_counts: Vec<usize>,
    calibration_pairs: usize,
}

pub fn cmd_screen(a: ScreenArgs, out: &mut dyn Write) -> Result<()> {
    let spec = a.intervention.spec()?;
    let screening = ScreeningConfig {
        tau_rel: a.tau_rel,
        rule: match a.rule {
            RuleArg::All => ScreeningRule::AllIntensities,
            RuleArg::Majority => ScreeningRule::Majority,
        },
        min_baseline: a.min_baseline,
        calibration_pairs: 0,
    };
    screening.validate()?;
    let manifest = a.manifest.load()?;
    let handle = open_backbone(&a.backbone.graph, a.backbone.spec.as_deref())?;
    let src = FeatureSource::new(&handle, cache()?);
    let dist = DistanceConfig::with_metric(a.metric.into());
    let dict = screen_manifest(&src, &manifest, &spec, &dist, &screening, None)?;
    if dict.total_causal() == 0 {
        log::warn!("no channel passed screening; gamma scoring will fail with this dictionary");
    }
    save_dictionary(&dict, &a.out)?;
    print_json(
        out,
        &ScreenSummary {
            dictionary: a.out.clone(),
            backbone_id: dict.backbone_id.clone(),
            spec_hash: dict.provenance.spec_hash.clone(),
            channel_counts: dict.channel_counts(),
            causal_counts: dict.causal_counts(),
            calibration_pairs: manifest.records.len(),
        },
    )
}

fn write_scatter(path: &Path, eval: &Evaluation) -> Result<()> {
    let mut text = String::from("mos_norm,mapped_pred\n");
    for (m, p) in &eval.scatter {
        text.push_str(&format!("{m:?},{p:?}\n"));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct BenchmarkOutput<'a> {
    manifest: &'a Path,
    dataset: &'a str,
    mode: &'a str,
    backbone_id: &'a str,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

fn run_benchmark(
    graph: Option<&Path>,
    spec: Option<&Path>,
    scoring: &ScoringArgs,
    manifest: &DatasetManifest,
    oracle: bool,
) -> Result<(Evaluation, String)> {
    if oracle {
        let mos = manifest.mos_norm();
        return Ok((evaluate_scores(&mos, &mos, false)?, "oracle".into()));
    }
    let Some(graph) = graph else {
        return Err(Error::InvalidConfig("--graph is required".into()).into());
    };
    let dict = scoring.dictionary()?;
    let handle = open_backbone(graph, spec)?;
    let src = FeatureSource::new(&handle, cache()?);
    let (_, eval) = benchmark_manifest(&src, manifest, dict.as_ref(), &scoring.config())?;
    Ok((eval, handle.id().to_owned()))
}

pub fn cmd_benchmark(a: BenchmarkArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = a.manifest.load()?;
    let (eval, backbone_id) = run_benchmark(a.graph.as_deref(), a.spec.as_deref(), &a.scoring, &manifest, a.oracle)?;
    let mode = if a.oracle { "oracle" } else { AblationMode::from(a.scoring.mode).short_name() };
    let output = BenchmarkOutput {
        manifest: &a.manifest.manifest,
        dataset: &manifest.name,
        mode,
        backbone_id: &backbone_id,
        report: &eval.report,
    };
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("report.json"), &output)?;
        write_scatter(&dir.join("scatter.csv"), &eval)?;
    }
    if a.tsv {
        writeln!(out, "{}", MetricsReport::TSV_HEADER)?;
        writeln!(out, "{}", eval.report.tsv_line(&format!("{}/{mode}", manifest.name)))?;
        Ok(())
    } else {
        print_json(out, &output)
    }
}

#[derive(Serialize)]
struct AblationEntry<'a> {
    mode: &'a str,
    #[serde(flatten)]
    report: &'a MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    channel_weights: Option<Vec<Vec<f64>>>,
}

pub fn cmd_ablate(a: AblateArgs, out: &mut dyn Write) -> Result<()> {
    let dict = load_dictionary(&a.dict)?;
    let manifest = a.manifest.load()?;
    let handle = open_backbone(&a.backbone.graph, a.backbone.spec.as_deref())?;
    let src = FeatureSource::new(&handle, cache()?);
    let base = ScoringConfig {
        distance: DistanceConfig::with_metric(a.metric.into()),
        ..Default::default()
    };
    let rows = ablate_manifest(&src, &manifest, &dict, &base)?;
    let counts = dict.channel_counts();
    let entries = rows
        .iter()
        .map(|r| {
            let channel_weights = match a.emit {
                Emit::Summary => None,
                Emit::PerChannel => Some(effective_weights(r.mode, Some(&dict), handle.id(), &counts)?),
            };
            Ok(AblationEntry {
                mode: r.mode.short_name(),
                report: &r.evaluation.report,
                channel_weights,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("ablation.json"), &entries)?;
    }
    if a.tsv {
        writeln!(out, "{}", MetricsReport::TSV_HEADER)?;
        for r in &rows {
            writeln!(out, "{}", r.evaluation.report.tsv_line(r.mode.short_name()))?;
        }
        Ok(())
    } else {
        print_json(out, &entries)
    }
}

#[derive(Serialize)]
struct MapsSummary {
    out: PathBuf,
    intensity: f64,
    stages: Vec<usize>,
    files: usize,
}

pub fn cmd_export_maps(a: ExportMapsArgs, out: &mut dyn Write) -> Result<()> {
    let spec = a.intervention.spec()?;
    let k = a.intensity_index.unwrap_or(spec.intensity_grid.len() - 1);
    if k >= spec.intensity_grid.len() {
        return Err(Error::InvalidConfig(format!(
            "--intensity-index {k} outside a grid of {} values",
            spec.intensity_grid.len()
        ))
        .into());
    }
    let handle = open_backbone(&a.backbone.graph, a.backbone.spec.as_deref())?;
    let stages = if a.stages.is_empty() {
        (1..=handle.list_stages().len()).collect()
    } else {
        a.stages.clone()
    };
    if let Some(&bad) = stages.iter().find(|s| **s == 0 || **s > handle.list_stages().len()) {
        return Err(Error::InvalidConfig(format!(
            "stage {bad} outside 1..={}",
            handle.list_stages().len()
        ))
        .into());
    }
    let src = FeatureSource::new(&handle, cache()?);
    let (f_ref, f_dist) = src.pair(&single_pair(&a.reference, &a.distorted))?;
    let files = export_effect_maps(&f_ref, &f_dist, &spec, k, &stages, &a.out)?;
    print_json(
        out,
        &MapsSummary {
            out: a.out.clone(),
            intensity: spec.intensity_grid[k],
            stages,
            files: files.len(),
        },
    )
}

pub fn cmd_export_scatter(a: ExportScatterArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = a.manifest.load()?;
    let (eval, _) = run_benchmark(
        Some(&a.backbone.graph),
        a.backbone.spec.as_deref(),
        &a.scoring,
        &manifest,
        false,
    )?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_scatter(&a.out, &eval)?;
    writeln!(out, "{}", a.out.display())?;
    Ok(())
}

pub fn cmd_check_invariance(a: InvarianceArgs, out: &mut dyn Write) -> Result<()> {
    let spec = a.intervention.spec()?;
    let dict = a.scoring.dictionary()?;
    let handle = open_backbone(&a.backbone.graph, a.backbone.spec.as_deref())?;
    let src = FeatureSource::new(&handle, cache()?);
    let (f_ref, f_dist) = src.pair(&single_pair(&a.reference, &a.distorted))?;
    let report = invariance_from_stacks(&f_ref, &f_dist, dict.as_ref(), &a.scoring.config(), &spec)?;
    print_json(out, &report)
}

#[derive(Serialize)]
struct SynthSummary {
    manifest: PathBuf,
    records: usize,
}

pub fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    if a.refs == 0 {
        bail!(Error::InvalidConfig("--refs must be >= 1".into()));
    }
    let kinds = if a.kinds.is_empty() {
        DistortionKind::ALL.to_vec()
    } else {
        a.kinds.iter().map(|k| k.parse()).collect::<Result<Vec<_>, _>>()?
    };
    let refs = generate_references(a.refs, a.size, a.size, a.seed);
    let cfg = SynthConfig {
        kinds,
        levels: a.levels,
        seed: a.seed,
    };
    let manifest = synth_corpus(&refs, &cfg, &a.out)?;
    print_json(
        out,
        &SynthSummary {
            manifest: a.out.join("manifest.csv"),
            records: manifest.records.len(),
        },
    )
}

#[derive(Serialize)]
struct BackbonePaths {
    graph: PathBuf,
    spec: PathBuf,
    backbone_id: String,
}

pub fn cmd_make_backbone(a: MakeBackboneArgs, out: &mut dyn Write) -> Result<()> {
    let arch: Architecture = a.arch.parse()?;
    let (graph, spec) = write_synthetic(arch, a.seed, &a.out)?;
    print_json(
        out,
        &BackbonePaths {
            graph,
            spec,
            backbone_id: arch.backbone_id(a.seed),
        },
    )
}

pub fn cmd_tid_manifest(a: TidManifestArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = normalize_mos(&parse_tid_mos(&a.mos_file, &a.root)?)?;
    write_csv_manifest(&manifest, &a.out)?;
    writeln!(out, "{} records -> {}", manifest.records.len(), a.out.display())?;
    Ok(())
}
