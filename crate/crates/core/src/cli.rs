//! `trace` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{container, InterventionSpec, Model};
use crate::oracle::{self, OracleSpec};
use crate::par::available_workers;
use crate::report::{self, ResultsDocument, RunSettings, SweepResults};
use crate::sweep::{self, SweepOptions};
use crate::tracing::{trace_one, CorruptionSpec, Dataset, TraceResult, DEFAULT_EPSILON_GAP};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  command-line usage error
  3  unreadable or unwritable file
  4  malformed weight container, dataset or results document
  5  every sample excluded by the validity filter
  6  invalid configuration or oracle spec
  7  model/runtime failure (shape mismatch, non-finite values, bad patch)";

#[derive(Debug, Parser)]
#[command(name = "trace", version, about = "Causal tracing for multimodal transformers", after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Copy-circuit oracle bundles.
    Oracle {
        #[command(subcommand)]
        command: OracleCommand,
    },
    /// Run a layer-wise, token-wise or single-intervention sweep.
    #[command(after_help = EXIT_CODES)]
    Sweep(SweepArgs),
    /// Re-render CSV and SVG figures from a results.json.
    #[command(after_help = EXIT_CODES)]
    Report(ReportArgs),
    /// Trace one sample with one intervention and print the result as JSON.
    #[command(after_help = EXIT_CODES)]
    Run(RunArgs),
}

#[derive(Debug, Subcommand)]
pub enum OracleCommand {
    /// Write an oracle model, dataset and manifest.
    #[command(after_help = EXIT_CODES)]
    Gen(OracleGenArgs),
}

#[derive(Debug, Args)]
pub struct OracleGenArgs {
    /// Output directory.
    #[arg(long, default_value = "oracle")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    /// 1-based block holding the copy head.
    #[arg(long, default_value_t = 2)]
    pub copy_block: usize,
    #[arg(long, default_value_t = 4)]
    pub attributes: usize,
    #[arg(long, default_value_t = 30.0)]
    pub attention_gain: f64,
    #[arg(long, default_value_t = 10.0)]
    pub readout_gain: f64,
    #[arg(long, default_value_t = 1)]
    pub audio_frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Assign attributes round-robin instead of at random.
    #[arg(long)]
    pub stratified: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindArg {
    Layers,
    Tokens,
    Single,
}

/// Sweep configuration, as read from `--config` (JSON) and overridden by
/// flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model_path: Option<PathBuf>,
    pub dataset_path: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub sweep_kind: KindArg,
    /// Sites to sweep; all sites when empty.
    pub sites: Vec<usize>,
    pub silence: Option<Vec<f64>>,
    pub epsilon_gap: f64,
    pub clamp: bool,
    pub include_audio_positions: bool,
    pub workers: usize,
    /// Recorded in results metadata; sweeps themselves are deterministic.
    pub seed: u64,
    /// `(site, position)` pairs for `sweep_kind = single`.
    pub patches: Vec<(usize, usize)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_path: None,
            dataset_path: None,
            output_dir: None,
            sweep_kind: KindArg::Layers,
            sites: Vec::new(),
            silence: None,
            epsilon_gap: DEFAULT_EPSILON_GAP,
            clamp: false,
            include_audio_positions: false,
            workers: available_workers(),
            seed: 0,
            patches: Vec::new(),
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// JSON file with RunConfig fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory for results.json, results.csv and SVG figures.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// Comma-separated site indices (0 = embeddings).
    #[arg(long, value_delimiter = ',')]
    pub sites: Option<Vec<usize>>,
    /// Comma-separated silence vector replacing every audio frame.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub silence: Option<Vec<f64>>,
    #[arg(long)]
    pub epsilon_gap: Option<f64>,
    /// Clamp per-sample RR to [0, 1] before averaging.
    #[arg(long)]
    pub clamp: bool,
    /// Patch audio positions too (ablation).
    #[arg(long)]
    pub include_audio_positions: bool,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Patch as SITE:POSITION, repeatable (single sweeps).
    #[arg(long = "patch", value_parser = parse_patch)]
    pub patches: Vec<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// results.json written by `trace sweep`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Sample id; defaults to the first sample.
    #[arg(long, conflicts_with = "index")]
    pub sample: Option<String>,
    /// Sample index in the dataset.
    #[arg(long)]
    pub index: Option<usize>,
    /// Patch as SITE:POSITION, repeatable.
    #[arg(long = "patch", value_parser = parse_patch)]
    pub patches: Vec<(usize, usize)>,
    /// Patch every textual position at this site.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub silence: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_EPSILON_GAP)]
    pub epsilon_gap: f64,
}

fn parse_patch(s: &str) -> std::result::Result<(usize, usize), String> {
    let (site, pos) = s
        .split_once(':')
        .ok_or_else(|| format!("expected SITE:POSITION, got {s:?}"))?;
    let site = site.trim().parse().map_err(|e| format!("bad site: {e}"))?;
    let pos = pos.trim().parse().map_err(|e| format!("bad position: {e}"))?;
    Ok((site, pos))
}

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Oracle {
            command: OracleCommand::Gen(args),
        } => {
            cmd_oracle_gen(&args)?;
            println!("wrote oracle bundle to {}", args.out.display());
            Ok(())
        }
        Command::Sweep(args) => {
            let config = resolve_config(&args)?;
            let summary = cmd_sweep(&config)?;
            print!("{summary}");
            Ok(())
        }
        Command::Report(args) => cmd_report(&args.input, &args.out),
        Command::Run(args) => {
            let out = cmd_run(&args)?;
            println!("{out}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct OracleManifest<'a> {
    spec: &'a OracleSpec,
    n_samples: usize,
    stratified: bool,
    model_file: &'a str,
    dataset_file: &'a str,
    expected_layer_map: Vec<f64>,
    expected_token_map: oracle::TokenMap,
}

pub fn cmd_oracle_gen(args: &OracleGenArgs) -> Result<()> {
    let spec = OracleSpec {
        n_layers: args.layers,
        copy_block: args.copy_block,
        n_attributes: args.attributes,
        attention_gain: args.attention_gain,
        readout_gain: args.readout_gain,
        n_audio_frames: args.audio_frames,
        seed: args.seed,
    };
    let model = oracle::build_oracle(&spec)?;
    let samples = oracle::gen_dataset(&spec, args.samples, args.stratified)?;
    let dataset = Dataset {
        header: crate::tracing::DatasetHeader {
            d_audio: spec.n_attributes,
            silence_vector: None,
            description: format!(
                "copy-circuit oracle: layers={} copy_block={} attributes={} seed={}",
                spec.n_layers, spec.copy_block, spec.n_attributes, spec.seed
            ),
        },
        samples: oracle::trace_samples(&spec, &samples),
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    container::save(&model, &args.out.join("model.bin"))?;
    dataset.save(&args.out.join("dataset.jsonl"))?;
    let manifest = OracleManifest {
        spec: &spec,
        n_samples: args.samples,
        stratified: args.stratified,
        model_file: "model.bin",
        dataset_file: "dataset.jsonl",
        expected_layer_map: oracle::expected_layer_map(&spec),
        expected_token_map: oracle::expected_token_map(&spec),
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_file(&args.out.join("manifest.json"), json)
}

/// Merge a config file (if any) with flags.
pub fn resolve_config(args: &SweepArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = &args.model {
        config.model_path = Some(v.clone());
    }
    if let Some(v) = &args.dataset {
        config.dataset_path = Some(v.clone());
    }
    if let Some(v) = &args.out {
        config.output_dir = Some(v.clone());
    }
    if let Some(v) = args.kind {
        config.sweep_kind = v;
    }
    if let Some(v) = &args.sites {
        config.sites = v.clone();
    }
    if let Some(v) = &args.silence {
        config.silence = Some(v.clone());
    }
    if let Some(v) = args.epsilon_gap {
        config.epsilon_gap = v;
    }
    config.clamp |= args.clamp;
    config.include_audio_positions |= args.include_audio_positions;
    if let Some(v) = args.workers {
        config.workers = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if !args.patches.is_empty() {
        config.patches = args.patches.clone();
    }
    Ok(config)
}

fn required<'a>(v: &'a Option<PathBuf>, name: &str) -> Result<&'a PathBuf> {
    v.as_ref()
        .ok_or_else(|| Error::Config(format!("{name} is required")))
}

fn load_inputs(model_path: &Path, dataset_path: &Path) -> Result<(Model, String, Dataset)> {
    let bytes = fs::read(model_path).map_err(|e| Error::io(model_path, e))?;
    let model = container::from_bytes(&bytes, &model_path.display().to_string())?;
    let digest = hex::encode(Sha256::digest(&bytes));
    let dataset = Dataset::load(dataset_path, Some(model.config().vocab_size))?;
    if dataset.header.d_audio != model.config().d_audio {
        return Err(Error::format(
            dataset_path.display().to_string(),
            format!(
                "d_audio {} does not match the model's {}",
                dataset.header.d_audio,
                model.config().d_audio
            ),
        ));
    }
    Ok((model, digest, dataset))
}

fn corruption_for(silence: &Option<Vec<f64>>, dataset: &Dataset) -> CorruptionSpec {
    match silence {
        Some(v) => CorruptionSpec {
            silence_vector: v.clone(),
        },
        None => dataset.default_corruption(),
    }
}

/// Build the results document for a config.
pub fn sweep_document(config: &RunConfig) -> Result<ResultsDocument> {
    if config.workers == 0 {
        return Err(Error::Config("workers must be >= 1".into()));
    }
    if config.epsilon_gap.is_nan() || config.epsilon_gap < 0.0 {
        return Err(Error::Config("epsilon_gap must be >= 0".into()));
    }
    let model_path = required(&config.model_path, "model path")?;
    let dataset_path = required(&config.dataset_path, "dataset path")?;
    let (model, model_digest, dataset) = load_inputs(model_path, dataset_path)?;
    let corruption = corruption_for(&config.silence, &dataset);
    corruption.validate(model.config().d_audio)?;

    let sites = if config.sites.is_empty() {
        sweep::all_sites(&model)
    } else {
        config.sites.clone()
    };
    let opts = SweepOptions {
        epsilon_gap: config.epsilon_gap,
        clamp: config.clamp,
        include_audio_positions: config.include_audio_positions,
        workers: config.workers,
    };
    let samples = &dataset.samples;
    let results = match config.sweep_kind {
        KindArg::Layers => {
            SweepResults::Layers(sweep::layer_sweep(&model, samples, &corruption, &sites, &opts)?)
        }
        KindArg::Tokens => {
            SweepResults::Tokens(sweep::token_sweep(&model, samples, &corruption, &sites, &opts)?)
        }
        KindArg::Single => {
            if config.patches.is_empty() {
                return Err(Error::Config("single sweeps need at least one --patch".into()));
            }
            let patches = InterventionSpec::from_pairs(config.patches.iter().copied())?;
            SweepResults::Single(sweep::single_sweep(&model, samples, &corruption, &patches, &opts)?)
        }
    };
    Ok(ResultsDocument {
        format_version: report::RESULTS_FORMAT_VERSION,
        settings: RunSettings {
            epsilon_gap: config.epsilon_gap,
            clamp: config.clamp,
            include_audio_positions: config.include_audio_positions,
            sites,
            seed: config.seed,
        },
        model_config: model.config().clone(),
        model_digest,
        corruption,
        dataset_digest: dataset.digest(),
        dataset_description: dataset.header.description.clone(),
        results,
    })
}

/// Human-readable summary printed after a sweep.
pub fn summary_table(doc: &ResultsDocument) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let counts = match &doc.results {
        SweepResults::Layers(r) => r.counts,
        SweepResults::Tokens(r) => r.counts,
        SweepResults::Single(r) => r.counts,
    };
    let _ = writeln!(s, "samples: {} ({counts})", counts.total());
    match &doc.results {
        SweepResults::Layers(r) => {
            let _ = writeln!(s, "{:>6}  {:>12}  {:>7}", "site", "mean_rr", "n_valid");
            for site in &r.sites {
                let _ = writeln!(s, "{:>6}  {:>12.6}  {:>7}", site.site, site.mean_rr, site.n_valid);
            }
        }
        SweepResults::Tokens(r) => {
            let _ = writeln!(
                s,
                "{:>6}  {:>13}  {:>12}  {:>12}",
                "site", "segment", "mean_rr", "max_rr"
            );
            for seg in &r.segments {
                let _ = writeln!(
                    s,
                    "{:>6}  {:>13}  {:>12.6}  {:>12.6}",
                    seg.site, seg.segment, seg.mean_rr, seg.max_rr
                );
            }
        }
        SweepResults::Single(r) => {
            let _ = writeln!(s, "mean_rr {:.6} over {} valid samples", r.mean_rr, r.n_valid);
        }
    }
    s
}

pub fn cmd_sweep(config: &RunConfig) -> Result<String> {
    let out_dir = required(&config.output_dir, "output directory")?;
    let doc = sweep_document(config)?;
    report::write_all(&doc, out_dir, true)?;
    Ok(summary_table(&doc))
}

pub fn cmd_report(input: &Path, out: &Path) -> Result<()> {
    let doc = ResultsDocument::load(input)?;
    let files = report::write_all(&doc, out, false)?;
    println!("wrote {}", files.join(", "));
    Ok(())
}

#[derive(Serialize)]
struct RunOutput<'a> {
    sample_id: &'a str,
    patches: Vec<(usize, usize)>,
    result: TraceResult,
}

pub fn cmd_run(args: &RunArgs) -> Result<String> {
    let (model, _, dataset) = load_inputs(&args.model, &args.dataset)?;
    let sample = match (&args.sample, args.index) {
        (Some(id), _) => dataset
            .samples
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::Config(format!("no sample with id {id:?}")))?,
        (None, Some(i)) => dataset.samples.get(i).ok_or(Error::OutOfRange {
            what: "sample index",
            index: i,
            limit: dataset.samples.len(),
        })?,
        (None, None) => dataset.samples.first().ok_or(Error::EmptyDataset)?,
    };
    let mut pairs = args.patches.clone();
    if let Some(site) = args.layer {
        pairs.extend(sample.sequence.textual_positions().into_iter().map(|p| (site, p)));
    }
    let patches = InterventionSpec::from_pairs(pairs)?;
    let corruption = corruption_for(&args.silence, &dataset);
    let result = trace_one(&model, sample, &corruption, &patches, args.epsilon_gap)?;
    let out = RunOutput {
        sample_id: &sample.id,
        patches: patches.iter().collect(),
        result,
    };
    Ok(serde_json::to_string_pretty(&out).expect("result serializes"))
}
