//! The `gcn` command-line tool.
//!
//! Exit codes: 0 success, 1 verification or training failure, 2 usage or
//! configuration error.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gcn_core::augment::{
    augmentation_plan, compare_augmentation, dataset_checksum, export_samples, expression_schema,
    generate_augmented_dataset, quality_filter, relabel, AugmentCounts, Rejection,
};
use gcn_core::config::{ExperimentConfig, OUTPUT_ROOT_ENV};
use gcn_core::data::{build_dataset, holdout_split, netpbm, DatasetManifest, Sample};
use gcn_core::gradcheck::{run_gradcheck, GradcheckOptions, LayerKind};
use gcn_core::layers::softmax_rows;
use gcn_core::train::{
    mean_pixel_loss, CooperativeTrainer, StepMetrics, CLASSIFIER_FILE, GENERATOR_FILE, METRICS_FILE,
};
use gcn_core::{ClassifierModel, FeatureSchema, GcnError, GeneratorModel, Tensor};

pub const CONFIG_ECHO: &str = "config.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const AUGMENT_REPORT: &str = "augment_report.json";
pub const EVAL_REPORT: &str = "eval_report.json";

#[derive(Parser, Debug)]
#[command(name = "gcn", version, about = "Train and use generative cooperative networks")]
pub struct Cli {
    /// Directory that relative output paths resolve against.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, value_name = "DIR")]
    pub output_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check every layer's backward pass against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train a generator and classifier cooperatively.
    Train(TrainArgs),
    /// Render one image from a feature assignment.
    Generate(GenerateArgs),
    /// Blend identity pairs into a filtered synthetic dataset.
    Augment(AugmentArgs),
    /// Compare recognizers trained on original and synthesized data.
    Eval(EvalArgs),
    /// Build or inspect dataset manifests.
    #[command(subcommand)]
    Dataset(DatasetCommand),
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Only check these layers (repeatable).
    #[arg(long = "layer", value_name = "NAME")]
    pub layers: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub cases: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Corrupt one layer's analytic gradient (failure-path check).
    #[arg(long, value_name = "NAME")]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set train.batch_size=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train on this manifest instead of the config's dataset source.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Continue the run saved in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Log progress every N batches (0 disables).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Run directory holding `generator.gcn1` and `classifier.gcn1`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `name=class`, class given by name or index (repeatable).
    #[arg(long = "feature", value_name = "NAME=CLASS")]
    pub features: Vec<String>,
    /// Convex mix for one feature, e.g. `p3:0.5,p7:0.5`.
    #[arg(long, value_name = "CLASS:W,...")]
    pub blend: Option<String>,
    /// Feature the blend applies to.
    #[arg(long, default_value = "identity")]
    pub blend_feature: String,
    /// Output `.ppm` (RGB) or `.pgm` (grey) file.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Identities to pair (P); defaults to all.
    #[arg(long)]
    pub identities: Option<usize>,
    /// Expressions to render (E); defaults to all.
    #[arg(long)]
    pub expressions: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long)]
    pub outdir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub synthesized: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Copy generation counts from this augment report.
    #[arg(long)]
    pub augment_report: Option<PathBuf>,
    /// Report path; defaults to `<output_dir>/eval_report.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum DatasetCommand {
    /// Materialize the config's dataset and write its manifest.
    Build(BuildArgs),
    /// Summarize a manifest.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every sample as a netpbm file with a files manifest.
    #[arg(long)]
    pub images: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub manifest: PathBuf,
}

/// Summary written next to the checkpoints after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSummary {
    pub batches: usize,
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub train_pixel_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_pixel_loss: Option<f64>,
}

/// Written by `gcn augment`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentRunReport {
    pub identities: usize,
    pub expressions: usize,
    pub alpha: f64,
    pub threshold: f64,
    pub counts: AugmentCounts,
    pub manifest: PathBuf,
    pub rejected: Vec<Rejection>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    pub fn failed(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<GcnError> for CliError {
    fn from(e: GcnError) -> Self {
        match e {
            GcnError::Divergence { .. } | GcnError::Contract(_) | GcnError::Io(_) => {
                CliError::failed(e.to_string())
            }
            _ => CliError::usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::failed(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::usage(e.to_string())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

struct Ctx<'a> {
    root: Option<PathBuf>,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn output_path(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(r) if p.is_relative() => r.join(p),
            _ => p.to_path_buf(),
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    let mut ctx = Ctx {
        root: cli.output_root,
        out,
    };
    match cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(&mut ctx, a),
        Command::Train(a) => cmd_train(&mut ctx, a),
        Command::Generate(a) => cmd_generate(&mut ctx, a),
        Command::Augment(a) => cmd_augment(&mut ctx, a),
        Command::Eval(a) => cmd_eval(&mut ctx, a),
        Command::Dataset(DatasetCommand::Build(a)) => cmd_dataset_build(&mut ctx, a),
        Command::Dataset(DatasetCommand::Inspect(a)) => cmd_dataset_inspect(&mut ctx, a),
    }
}

fn layer(name: &str) -> CliResult<LayerKind> {
    LayerKind::from_name(name).ok_or_else(|| {
        let known: Vec<&str> = LayerKind::ALL.iter().map(|k| k.name()).collect();
        CliError::usage(format!("unknown layer {name:?}; known: {}", known.join(", ")))
    })
}

fn cmd_gradcheck(ctx: &mut Ctx, a: GradcheckArgs) -> CliResult {
    let mut opts = GradcheckOptions::default();
    if !a.layers.is_empty() {
        opts.layers = a.layers.iter().map(|n| layer(n)).collect::<CliResult<_>>()?;
    }
    if a.cases == 0 {
        return Err(CliError::usage("--cases must be >= 1"));
    }
    opts.cases_per_layer = a.cases;
    if let Some(s) = a.seed {
        opts.seed = s;
    }
    opts.inject_fault = a.inject_fault.as_deref().map(layer).transpose()?;
    let report = run_gradcheck(&opts)?;
    write!(ctx.out, "{report}")?;
    if report.passed() {
        writeln!(ctx.out, "all {} layers within {:.0e}", report.layers.len(), report.rel_tol)?;
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|l| l.layer.name()).collect();
        Err(CliError::failed(format!("gradient check failed for {}", names.join(", "))))
    }
}

/// The config's dataset (or `manifest`), split by the config's hold-out rules.
fn load_training_data(
    cfg: &ExperimentConfig,
    manifest: Option<&Path>,
) -> CliResult<(DatasetManifest, Vec<Sample>, Vec<Sample>)> {
    let schema = cfg.schema()?;
    let (mut m, samples) = match manifest {
        Some(p) => {
            let m = DatasetManifest::load(p)?;
            let samples = m.samples(p.parent().unwrap_or(Path::new(".")))?;
            if m.schema.cardinalities() != schema.cardinalities() {
                return Err(CliError::usage(format!(
                    "manifest schema {:?} does not match the config's {:?}",
                    m.schema.cardinalities(),
                    schema.cardinalities()
                )));
            }
            (m, samples)
        }
        None => build_dataset(&cfg.dataset, cfg.dataset_seed, cfg.holdout.clone(), Path::new("."))?,
    };
    m.holdout_rules = cfg.holdout.clone();
    let (train, held) = holdout_split(&schema, samples, &cfg.holdout)?;
    Ok((m, train, held))
}

fn cmd_train(ctx: &mut Ctx, a: TrainArgs) -> CliResult {
    let cfg = ExperimentConfig::load_with_overrides(&a.config, &a.overrides)?;
    // Everything that can fail on bad input happens before the output
    // directory is touched.
    let (manifest, train, held) = load_training_data(&cfg, a.manifest.as_deref())?;
    let dir = match &a.out {
        Some(p) => ctx.output_path(p),
        None => cfg.resolve_output_dir(ctx.root.as_deref()),
    };
    let has_run = dir.join(GENERATOR_FILE).exists();
    if a.resume && !has_run {
        return Err(CliError::usage(format!("{}: no run to resume", dir.display())));
    }
    if !a.resume && has_run {
        return Err(CliError::usage(format!(
            "{} already holds a run; pass --resume or choose another --out",
            dir.display()
        )));
    }
    let schema = cfg.schema()?;
    let mut trainer = if a.resume {
        let t = CooperativeTrainer::resume(&dir, cfg.train.clone())?;
        if t.gen.spec() != &cfg.generator_spec()? || t.cls.spec() != &cfg.classifier_spec()? {
            return Err(CliError::usage("saved models do not match the config's architecture"));
        }
        t
    } else {
        CooperativeTrainer::from_specs(cfg.generator_spec()?, cfg.classifier_spec()?, cfg.train.clone())?
    };

    fs::create_dir_all(&dir).map_err(|e| GcnError::io(&dir, e))?;
    cfg.save(dir.join(CONFIG_ECHO))?;
    manifest.save(dir.join(DATASET_FILE))?;

    let metrics_path = dir.join(METRICS_FILE);
    let mut rows = Vec::new();
    if a.resume {
        let old = fs::read_to_string(&metrics_path).map_err(|e| GcnError::io(&metrics_path, e))?;
        rows.extend(old.lines().skip(1).take(trainer.batches_done()).map(str::to_string));
    }
    let log_every = a.log_every;
    let outcome = trainer.train_loop(&train, Some(&dir), |m| {
        rows.push(m.csv_row());
        if log_every > 0 && (m.batch + 1) % log_every == 0 {
            log::info!(
                "batch {} lr {:.3e} pixel {:.4} ce {:?}",
                m.batch + 1,
                m.lr,
                m.pixel_loss,
                m.ce
            );
        }
        Ok(())
    });
    let mut csv = StepMetrics::csv_header(&schema);
    csv.push('\n');
    for r in &rows {
        csv.push_str(r);
        csv.push('\n');
    }
    fs::write(&metrics_path, csv).map_err(|e| GcnError::io(&metrics_path, e))?;
    outcome?;

    let summary = TrainSummary {
        batches: trainer.batches_done(),
        train_samples: train.len(),
        holdout_samples: held.len(),
        train_pixel_loss: mean_pixel_loss(&trainer.gen, &train)?,
        holdout_pixel_loss: if held.is_empty() {
            None
        } else {
            Some(mean_pixel_loss(&trainer.gen, &held)?)
        },
    };
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")
        .map_err(|e| GcnError::io(dir.join(SUMMARY_FILE), e))?;
    writeln!(
        ctx.out,
        "trained {} batches on {} samples; mean pixel loss {:.4}; wrote {}",
        summary.batches,
        summary.train_samples,
        summary.train_pixel_loss,
        dir.display()
    )?;
    Ok(())
}

fn load_models(dir: &Path) -> CliResult<(GeneratorModel<f32>, ClassifierModel<f32>)> {
    let gen = GeneratorModel::load(dir.join(GENERATOR_FILE))?;
    let cls = ClassifierModel::load(dir.join(CLASSIFIER_FILE))?;
    if gen.schema().cardinalities() != cls.schema().cardinalities() {
        return Err(CliError::usage("generator and classifier schemas differ"));
    }
    Ok((gen, cls))
}

/// Parse `a:0.5,b:0.5` into a row for `feature`.
fn parse_blend(spec: &str, schema: &FeatureSchema, feature: usize) -> CliResult<Vec<f64>> {
    let f = &schema.features[feature];
    let mut row = vec![0.0; f.cardinality];
    for part in spec.split(',') {
        let (class, w) = part
            .split_once(':')
            .ok_or_else(|| CliError::usage(format!("blend term {part:?} is not CLASS:WEIGHT")))?;
        let w: f64 = w
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("blend weight {w:?} is not a number")))?;
        if !(w.is_finite() && w >= 0.0) {
            return Err(CliError::usage(format!("blend weight {w} must be non-negative")));
        }
        row[f.class_index(class.trim())?] += w;
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(CliError::usage(format!("blend weights sum to {total}, not 1")));
    }
    Ok(row)
}

fn cmd_generate(ctx: &mut Ctx, a: GenerateArgs) -> CliResult {
    let (gen, cls) = load_models(&a.checkpoint)?;
    let schema = gen.schema().clone();
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; schema.len()];
    for assignment in &a.features {
        let (name, class) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--feature {assignment:?} is not NAME=CLASS")))?;
        let i = schema.index_of(name)?;
        let f = &schema.features[i];
        let mut row = vec![0.0; f.cardinality];
        row[f.class_index(class)?] = 1.0;
        rows[i] = Some(row);
    }
    if let Some(b) = &a.blend {
        let i = schema.index_of(&a.blend_feature)?;
        if rows[i].is_some() {
            return Err(CliError::usage(format!(
                "feature {:?} is both assigned and blended",
                a.blend_feature
            )));
        }
        rows[i] = Some(parse_blend(b, &schema, i)?);
    }
    let missing: Vec<&str> = schema
        .features
        .iter()
        .zip(&rows)
        .filter(|(_, r)| r.is_none())
        .map(|(f, _)| f.name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::usage(format!("no value for feature(s) {}", missing.join(", "))));
    }
    let feats = rows
        .iter()
        .map(|r| {
            let r = r.as_ref().expect("checked above");
            Tensor::from_f64([1, r.len()], r)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let img = gen.generate(&feats)?;
    let image = img.index_axis0(0)?.map(|v| v.clamp(0.0, 1.0));
    let path = ctx.output_path(&a.output);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| GcnError::io(parent, e))?;
    }
    netpbm::save(&image, &path)?;
    writeln!(ctx.out, "wrote {}", path.display())?;

    let shape = image.shape().to_vec();
    let logits = cls.logits(&image.reshape([1, shape[0], shape[1], shape[2]])?)?;
    for (f, z) in schema.features.iter().zip(&logits) {
        let p = softmax_rows(z)?;
        let (best, prob) = p
            .data()
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        writeln!(ctx.out, "{}: {} (p={prob:.3})", f.name, f.class_name(best))?;
    }
    Ok(())
}

fn cmd_augment(ctx: &mut Ctx, a: AugmentArgs) -> CliResult {
    let (gen, cls) = load_models(&a.checkpoint)?;
    let schema = gen.schema().clone();
    let id_card = schema.feature("identity")?.cardinality;
    let head = schema.index_of("expression")?;
    let ex_card = schema.features[head].cardinality;
    let p = a.identities.unwrap_or(id_card);
    let e = a.expressions.unwrap_or(ex_card);
    if p < 2 || p > id_card || e == 0 || e > ex_card {
        return Err(CliError::usage(format!(
            "need 2 <= identities <= {id_card} and 1 <= expressions <= {ex_card}, got {p} and {e}"
        )));
    }
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(CliError::usage(format!("--alpha {} must lie in (0, 1)", a.alpha)));
    }
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(CliError::usage(format!("--threshold {} must lie in [0, 1]", a.threshold)));
    }
    let generated = generate_augmented_dataset(&gen, &augmentation_plan(p, e, a.alpha))?;
    let total = generated.len();
    let (kept, rejected) = quality_filter(generated, &cls, head, a.threshold)?;
    let dir = ctx.output_path(&a.outdir);
    fs::create_dir_all(&dir).map_err(|e| GcnError::io(&dir, e))?;
    export_samples(&dir, &expression_schema(&schema)?, &kept, 0)?;
    let report = AugmentRunReport {
        identities: p,
        expressions: e,
        alpha: a.alpha,
        threshold: a.threshold,
        counts: AugmentCounts {
            generated: total,
            filtered_out: rejected.len(),
            kept: kept.len(),
        },
        manifest: PathBuf::from("manifest.json"),
        rejected,
    };
    fs::write(dir.join(AUGMENT_REPORT), serde_json::to_string_pretty(&report)? + "\n")
        .map_err(|e| GcnError::io(dir.join(AUGMENT_REPORT), e))?;
    writeln!(
        ctx.out,
        "generated {} kept {} filtered {}; wrote {}",
        report.counts.generated,
        report.counts.kept,
        report.counts.filtered_out,
        dir.display()
    )?;
    Ok(())
}

/// Samples of `path` labelled only by `feature`, and that feature's
/// one-feature schema.
fn recognizer_view(path: &Path, feature: &str) -> CliResult<(FeatureSchema, Vec<Sample>)> {
    let m = DatasetManifest::load(path)?;
    let samples = m.samples(path.parent().unwrap_or(Path::new(".")))?;
    let i = m.schema.index_of(feature)?;
    let mut f = m.schema.features[i].clone();
    f.weight = 1.0;
    Ok((FeatureSchema::new(vec![f])?, relabel(&samples, i)))
}

fn cmd_eval(ctx: &mut Ctx, a: EvalArgs) -> CliResult {
    let cfg = ExperimentConfig::load_with_overrides(&a.config, &a.overrides)?;
    let feature = &cfg.augment.feature;
    let (schema, original) = recognizer_view(&a.original, feature)?;
    let (s_schema, mut synthesized) = recognizer_view(&a.synthesized, feature)?;
    let (t_schema, test) = recognizer_view(&a.test, feature)?;
    for (name, other) in [("synthesized", &s_schema), ("test", &t_schema)] {
        if other.cardinalities() != schema.cardinalities() {
            return Err(CliError::usage(format!(
                "{name} manifest has {:?} classes of {feature:?}, original has {:?}",
                other.cardinalities(),
                schema.cardinalities()
            )));
        }
    }
    let counts = match &a.augment_report {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| GcnError::io(p, e))?;
            let r: AugmentRunReport = serde_json::from_str(&text)?;
            r.counts
        }
        None => AugmentCounts {
            generated: synthesized.len(),
            filtered_out: 0,
            kept: synthesized.len(),
        },
    };
    if cfg.augment.include_original {
        synthesized.extend(original.iter().cloned());
    }
    let report = compare_augmentation(&schema, &original, &synthesized, &test, counts, &cfg.augment.recognizer)?;
    let path = match &a.out {
        Some(p) => ctx.output_path(p),
        None => cfg.resolve_output_dir(ctx.root.as_deref()).join(EVAL_REPORT),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| GcnError::io(parent, e))?;
    }
    let json = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(&path, &json).map_err(|e| GcnError::io(&path, e))?;
    writeln!(
        ctx.out,
        "original accuracy {:.4}, synthesized accuracy {:.4} (test {} samples, sha256 {}); wrote {}",
        report.original_accuracy,
        report.synthesized_accuracy,
        report.test_size,
        report.test_checksum,
        path.display()
    )?;
    Ok(())
}

fn cmd_dataset_build(ctx: &mut Ctx, a: BuildArgs) -> CliResult {
    let cfg = ExperimentConfig::load_with_overrides(&a.config, &a.overrides)?;
    let (manifest, samples) = build_dataset(&cfg.dataset, cfg.dataset_seed, cfg.holdout.clone(), Path::new("."))?;
    let (train, held) = manifest.split(samples.clone())?;
    let dir = ctx.output_path(&a.out);
    fs::create_dir_all(&dir).map_err(|e| GcnError::io(&dir, e))?;
    manifest.save(dir.join("manifest.json"))?;
    if a.images {
        let files = dir.join("files");
        let mut m = export_samples(&files, &manifest.schema, &samples, manifest.seed)?;
        m.holdout_rules = manifest.holdout_rules.clone();
        m.save(files.join("manifest.json"))?;
    }
    writeln!(
        ctx.out,
        "{} samples ({} train, {} held out); wrote {}",
        samples.len(),
        train.len(),
        held.len(),
        dir.display()
    )?;
    Ok(())
}

fn cmd_dataset_inspect(ctx: &mut Ctx, a: InspectArgs) -> CliResult {
    let m = DatasetManifest::load(&a.manifest)?;
    let samples = m.samples(a.manifest.parent().unwrap_or(Path::new(".")))?;
    let (train, held) = m.split(samples.clone())?;
    let kind = serde_json::to_value(&m.source)?
        .get("kind")
        .and_then(|k| k.as_str())
        .unwrap_or("?")
        .to_string();
    let out = &mut ctx.out;
    writeln!(out, "source: {kind} (seed {})", m.seed)?;
    writeln!(out, "samples: {} ({} train, {} held out)", samples.len(), train.len(), held.len())?;
    if let Some(s) = samples.first() {
        writeln!(out, "image shape: {:?}", s.image.shape())?;
    }
    for (i, f) in m.schema.features.iter().enumerate() {
        let mut counts = vec![0usize; f.cardinality];
        for r in &m.records {
            counts[r.labels[i]] += 1;
        }
        let present = counts.iter().filter(|&&c| c > 0).count();
        writeln!(
            out,
            "feature {}: {} classes ({} present), weight {}",
            f.name, f.cardinality, present, f.weight
        )?;
    }
    for r in &m.holdout_rules {
        writeln!(out, "holdout: {}", serde_json::to_string(r)?)?;
    }
    writeln!(out, "sha256: {}", dataset_checksum(&samples))?;
    Ok(())
}
