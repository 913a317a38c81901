//! The `gtfuse` command-line driver.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gtfuse_core::inference::EmConfig;
use gtfuse_core::model::dataset_stats;
use gtfuse_core::rational::{parse_decimal, to_f64, to_fixed};
use gtfuse_core::split::{budget, generate_budget_splits, leave_one_out, GroupSpec, SplitShape, SplitSpec};
use gtfuse_core::{AnnotatorId, Dataset, FusionPolicy, Rational};
use serde::Serialize;

use crate::coco::{export, ingest, IngestReport, Strictness};
use crate::compare::{compare_methods, read_specs, render_table};
use crate::error::{Error, Result};
use crate::pipeline::{run_pipeline, Method, PipelineSpec};

#[derive(Debug, Parser)]
#[command(name = "gtfuse", version, about = "Ground-truth inference for repeated detection and segmentation labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Aggregate repeated labels into one estimated ground truth.
    Aggregate(AggregateArgs),
    /// Draw annotation-budget subsets.
    Split(SplitArgs),
    /// Remove the annotations of one annotator group.
    LeaveOut(LeaveOutArgs),
    /// Print dataset statistics.
    Stats(StatsArgs),
    /// Run several aggregation specs and compare their outputs.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Reject out-of-canvas and degenerate labels instead of repairing them.
    #[arg(long)]
    pub strict: bool,
}

fn rational_arg(s: &str) -> std::result::Result<Rational, String> {
    parse_decimal(s).ok_or_else(|| format!("`{s}` is not a decimal number"))
}

fn fusion_arg(s: &str) -> std::result::Result<FusionPolicy, String> {
    s.parse().map_err(|e: gtfuse_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Laem)]
    pub method: Method,
    /// union, average or intersection (laem and mjv only; default average).
    #[arg(long, value_parser = fusion_arg)]
    pub fusion: Option<FusionPolicy>,
    #[arg(long, value_parser = rational_arg, default_value = "0.5")]
    pub theta: Rational,
    #[arg(long, value_parser = rational_arg, default_value = "0.55")]
    pub wbf_threshold: Rational,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = EmConfig::default().max_iter)]
    pub em_max_iter: usize,
    #[arg(long, default_value_t = EmConfig::default().tol)]
    pub em_tol: f64,
    #[arg(long, default_value_t = EmConfig::default().smoothing)]
    pub em_smoothing: f64,
    /// Most annotators per image for exact matching.
    #[arg(long, default_value_t = 6)]
    pub max_annotators: usize,
    /// Keep WBF cluster scores unscaled by the fraction of annotators.
    #[arg(long)]
    pub no_count_scaling: bool,
    /// Write the JSON run report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

impl AggregateArgs {
    pub fn spec(&self) -> PipelineSpec {
        PipelineSpec {
            method: self.method,
            fusion: self.fusion,
            theta: self.theta.clone(),
            wbf_threshold: self.wbf_threshold.clone(),
            seed: self.seed,
            em: EmConfig { max_iter: self.em_max_iter, tol: self.em_tol, smoothing: self.em_smoothing },
            max_annotators: self.max_annotators,
            count_scaling: !self.no_count_scaling,
        }
    }
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Parts as IMAGESxANNOTATORS joined by commas, e.g. "966x2,966x1".
    #[arg(long)]
    pub shape: String,
    #[arg(long, default_value_t = 5)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LeaveOutArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// JSON object mapping group names to annotator id lists.
    #[arg(long)]
    pub groups: PathBuf,
    #[arg(long)]
    pub leave_out: String,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// JSON array of pipeline specs.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Exact fraction plus its float value, for JSON reports.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Fraction {
    pub exact: String,
    pub value: f64,
}

impl From<&Rational> for Fraction {
    fn from(r: &Rational) -> Self {
        Fraction { exact: r.to_string(), value: to_f64(r) }
    }
}

fn percent(r: &Rational) -> String {
    format!("{}%", to_fixed(&(r * Rational::from_integer(100.into())), 1))
}

fn load(args: &InputArgs) -> Result<Dataset> {
    let strictness = if args.strict { Strictness::Strict } else { Strictness::Lenient };
    let (dataset, report) = ingest(&args.input, strictness)?;
    warn(&report);
    Ok(dataset)
}

fn warn(report: &IngestReport) {
    if report.warnings.is_empty() {
        return;
    }
    for w in report.warnings.iter().take(10) {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "warning: {} label(s) repaired ({} clipped, {} dropped, {} scores clamped)",
        report.warnings.len(),
        report.clipped,
        report.dropped,
        report.clamped
    );
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn aggregate(args: &AggregateArgs) -> Result<String> {
    let spec = args.spec();
    spec.validate()?;
    let dataset = load(&args.input)?;
    let out = run_pipeline(&dataset, &spec)?;
    export(&out.dataset, &args.output)?;
    if let Some(path) = &args.report {
        write_json(path, &out.report)?;
    }
    let r = &out.report;
    let mut text = String::new();
    let _ = writeln!(text, "method          {}", r.method);
    let _ = writeln!(text, "images          {}", r.images);
    let _ = writeln!(text, "input labels    {}", r.input_labels);
    let _ = writeln!(text, "output labels   {}", r.output_labels);
    let _ = writeln!(text, "discarded       {}", r.discarded);
    let _ = writeln!(text, "ties            {}", r.ties);
    if let Some(em) = &r.em {
        let _ = writeln!(text, "em iterations   {} ({})", em.iterations, if em.converged { "converged" } else { "not converged" });
        for (a, fit) in &em.annotators {
            let _ = writeln!(text, "  {a:<14}{:.4}", fit.confidence);
        }
    }
    Ok(text)
}

#[derive(Serialize)]
struct SplitReport {
    shape: String,
    absolute_budget: u64,
    available_annotations: u64,
    relative_budget: Fraction,
    replicates: Vec<ReplicateReport>,
}

#[derive(Serialize)]
struct ReplicateReport {
    index: usize,
    file: String,
    images: usize,
    annotations: usize,
    images_per_part: Vec<Vec<u64>>,
}

fn split(args: &SplitArgs) -> Result<String> {
    let shape: SplitShape = args.shape.parse()?;
    let dataset = load(&args.input)?;
    let spec = SplitSpec { shape: shape.clone(), replicates: args.replicates, seed: args.seed };
    let b = budget(&shape, &dataset);
    let replicates = generate_budget_splits(&dataset, &spec)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let mut reports = Vec::new();
    for r in &replicates {
        let file = format!("replicate-{}.json", r.index + 1);
        export(&r.dataset, args.out_dir.join(&file))?;
        reports.push(ReplicateReport {
            index: r.index + 1,
            file,
            images: r.dataset.images.len(),
            annotations: r.dataset.label_count(),
            images_per_part: r.images_per_part.clone(),
        });
    }
    let report = SplitReport {
        shape: shape.to_string(),
        absolute_budget: b.absolute,
        available_annotations: b.available,
        relative_budget: Fraction::from(&b.relative),
        replicates: reports,
    };
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    let mut text = String::new();
    let _ = writeln!(text, "shape            {}", report.shape);
    let _ = writeln!(text, "absolute budget  {}", b.absolute);
    let _ = writeln!(text, "available        {}", b.available);
    let _ = writeln!(text, "relative budget  {} ({})", percent(&b.relative), b.relative);
    for r in &report.replicates {
        let _ = writeln!(text, "{:<17}{} images, {} annotations", r.file, r.images, r.annotations);
    }
    Ok(text)
}

#[derive(Serialize)]
struct LeaveOutJson {
    group: String,
    removed_passes: usize,
    total_passes: usize,
    removed_passes_relative: Fraction,
    removed_annotations: usize,
    total_annotations: usize,
    removed_annotations_relative: Fraction,
    dropped_images: usize,
    total_images: usize,
}

pub fn read_groups(path: &Path) -> Result<BTreeMap<String, BTreeSet<AnnotatorId>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("groups file: {e}")))?;
    Ok(raw.into_iter().map(|(g, members)| (g, members.into_iter().map(AnnotatorId::from).collect())).collect())
}

fn leave_out(args: &LeaveOutArgs) -> Result<String> {
    let groups = read_groups(&args.groups)?;
    let dataset = load(&args.input)?;
    let (out, r) = leave_one_out(&dataset, &GroupSpec { groups, leave_out: args.leave_out.clone() })?;
    export(&out, &args.output)?;
    let report = LeaveOutJson {
        group: r.group.clone(),
        removed_passes: r.removed_passes,
        total_passes: r.total_passes,
        removed_passes_relative: Fraction::from(&r.removed_passes_relative()),
        removed_annotations: r.removed_annotations,
        total_annotations: r.total_annotations,
        removed_annotations_relative: Fraction::from(&r.removed_annotations_relative()),
        dropped_images: r.removed_images,
        total_images: r.total_images,
    };
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    let mut text = String::new();
    let _ = writeln!(text, "left out group       {}", r.group);
    let _ = writeln!(
        text,
        "images labelled      {} of {} ({})",
        r.removed_passes,
        r.total_passes,
        percent(&r.removed_passes_relative())
    );
    let _ = writeln!(
        text,
        "annotations removed  {} of {} ({})",
        r.removed_annotations,
        r.total_annotations,
        percent(&r.removed_annotations_relative())
    );
    let _ = writeln!(text, "images dropped       {} of {}", r.removed_images, r.total_images);
    Ok(text)
}

#[derive(Serialize)]
struct StatsJson {
    images: usize,
    annotators: usize,
    instances: usize,
    annotator_passes: usize,
    instances_per_image: Fraction,
}

fn stats(args: &StatsArgs) -> Result<String> {
    let dataset = load(&args.input)?;
    let s = dataset_stats(&dataset);
    if let Some(path) = &args.report {
        write_json(
            path,
            &StatsJson {
                images: s.images,
                annotators: s.annotators,
                instances: s.instances,
                annotator_passes: s.annotator_passes,
                instances_per_image: Fraction::from(&s.instances_per_image),
            },
        )?;
    }
    let mut text = String::new();
    let _ = writeln!(text, "images               {}", s.images);
    let _ = writeln!(text, "annotators           {}", s.annotators);
    let _ = writeln!(text, "instances            {}", s.instances);
    let _ = writeln!(text, "annotator passes     {}", s.annotator_passes);
    let _ = writeln!(
        text,
        "instances per image  {} ({})",
        to_fixed(&s.instances_per_image, 4),
        s.instances_per_image
    );
    let most = dataset.images.iter().map(|i| i.annotator_count()).max().unwrap_or(0);
    let _ = writeln!(text, "max annotators/image {most}");
    Ok(text)
}

fn compare(args: &CompareArgs) -> Result<String> {
    let specs = read_specs(&args.spec)?;
    let dataset = load(&args.input)?;
    let cmp = compare_methods(&dataset, &specs)?;
    if let Some(path) = &args.report {
        write_json(path, &cmp)?;
    }
    Ok(render_table(&cmp))
}

/// Runs a parsed command and returns its human-readable summary.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Aggregate(a) => aggregate(a),
        Command::Split(a) => split(a),
        Command::LeaveOut(a) => leave_out(a),
        Command::Stats(a) => stats(a),
        Command::Compare(a) => compare(a),
    }
}
