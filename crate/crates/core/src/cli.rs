//! `csad` command-line front end.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 no
//! surviving clusters, 4 too few samples, 5 missing or unreadable inputs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::HdbscanConfig;
use crate::component_features::BuiltinDescriptor;
use crate::histogram_scoring::HistError;
use crate::lgst_scoring::{lgst_maps, AnomalyMap, LgstError, TensorManifest};
use crate::mask_ops::{BinaryMask, MaskSet};
use crate::model::{class_remap, FitConfig, Model, ModelError};
use crate::pseudo_label::{self, LabelError, LabelGenConfig, SplitFile};
use crate::synth_bench::{
    self, AnomalyKind, BenchConfig, DatasetCounts, DatasetManifest, ManifestEntry, SceneSpec, Split, SynthError,
    DEFAULT_TENSOR_CHANNELS,
};
use crate::tensor_io::{self, IoError, LabelMap};
use crate::fusion_calibration::FusionError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NO_CLUSTERS: i32 = 3;
pub const EXIT_TOO_FEW_SAMPLES: i32 = 4;
pub const EXIT_MISSING_INPUT: i32 = 5;

pub const SPLIT_FILE: &str = "split.json";
pub const REMAP_FILE: &str = "remap.json";

#[derive(Debug, thiserror::Error)]
#[error("{msg}")]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    fn new(code: i32, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }
}

type Result<T> = std::result::Result<T, CliError>;

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::new(EXIT_MISSING_INPUT, e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        let code = match e {
            SynthError::SpecInfeasible(_) => EXIT_CONFIG,
            SynthError::Io(_) => EXIT_MISSING_INPUT,
            SynthError::EmptyInput => EXIT_FAILURE,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        let code = match e {
            LabelError::NoSurvivingClusters { .. } => EXIT_NO_CLUSTERS,
            LabelError::InvalidConfig(_) => EXIT_CONFIG,
            LabelError::NoMasks(_) | LabelError::CountMismatch { .. } => EXIT_MISSING_INPUT,
            _ => EXIT_FAILURE,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<LgstError> for CliError {
    fn from(e: LgstError) -> Self {
        let code = match e {
            LgstError::Io(_) | LgstError::MissingImage(_) => EXIT_MISSING_INPUT,
            _ => EXIT_FAILURE,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match &e {
            ModelError::TooFewSamples { .. }
            | ModelError::Hist(HistError::TooFewSamples { .. })
            | ModelError::Fusion(FusionError::TooFewScores { .. }) => EXIT_TOO_FEW_SAMPLES,
            ModelError::InvalidConfig(_) => EXIT_CONFIG,
            ModelError::Io(_) | ModelError::Hist(HistError::Io(_)) | ModelError::UnsupportedVersion(_) => {
                EXIT_MISSING_INPUT
            }
            _ => EXIT_FAILURE,
        };
        CliError::new(code, e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "csad", version, about = "Logical anomaly detection from component segmentations")]
pub struct Cli {
    /// JSON config with optional `synth`, `labels`, `fit` and `bench` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Model directory.
    #[arg(long, global = true, env = "CSAD_MODEL_DIR")]
    pub model: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Build pseudo-label maps and the labeled/unlabeled split.
    GenLabels(GenLabelsArgs),
    /// Fit histogram banks and the calibration profile.
    Fit(FitArgs),
    /// Score images, one JSON object per line.
    Score(ScoreArgs),
    /// Write anomaly maps as 16-bit PGM plus JSON range sidecars.
    Localize(LocalizeArgs),
    /// Time the scoring pipeline.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Normal training images (default 100).
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Normal test images (default 50).
    #[arg(long)]
    pub n_test_normal: Option<usize>,
    /// Per anomaly kind.
    #[arg(long)]
    pub n_test_anomalous: Option<usize>,
    /// Anomaly kinds to generate (default: all).
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<KindArg>>,
    /// Two archetypes instead of four.
    #[arg(long)]
    pub two_archetypes: bool,
    /// Skip the synthetic LGST tensors.
    #[arg(long)]
    pub no_tensors: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Missing,
    Extra,
    Swapped,
    Defect,
}

impl From<KindArg> for AnomalyKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Missing => AnomalyKind::MissingComponent,
            KindArg::Extra => AnomalyKind::ExtraComponent,
            KindArg::Swapped => AnomalyKind::SwappedPositions,
            KindArg::Defect => AnomalyKind::StructuralDefect,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenLabelsArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Minimum cluster size.
    #[arg(long)]
    pub alpha: Option<usize>,
    /// Use the dataset's ground-truth maps instead of clustering proposals.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output of `gen-labels`; without it the dataset's ground-truth maps are used.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Patch histogram cell sizes in pixels (default 256,128).
    #[arg(long, value_delimiter = ',')]
    pub patch_sizes: Option<Vec<usize>>,
    /// Ignore LGST tensors even if the dataset has them.
    #[arg(long)]
    pub no_lgst: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory of `{id}.pgm` maps already in model classes; otherwise images
    /// are segmented by color.
    #[arg(long)]
    pub label_maps: Option<PathBuf>,
    /// Tensor manifest overriding the dataset's.
    #[arg(long)]
    pub tensors: Option<PathBuf>,
    /// Score with patch histograms only.
    #[arg(long)]
    pub no_lgst: bool,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Restrict to these image ids.
    #[arg(long, value_delimiter = ',')]
    pub ids: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub input: InputArgs,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[command(flatten)]
    pub input: InputArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Timed runs (default 500).
    #[arg(long)]
    pub runs: Option<usize>,
    /// Images per run (default 8).
    #[arg(long)]
    pub batch: Option<usize>,
    /// Untimed runs before timing (default 10).
    #[arg(long)]
    pub warmup: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub scene: Option<SceneSpec>,
    pub counts: DatasetCounts,
    /// `null` disables tensors.
    pub tensor_channels: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelsSection {
    #[serde(flatten)]
    pub generation: LabelGenConfig,
    /// Clustering used to drop outlier maps; defaults to
    /// [`pseudo_label::label_map_hdbscan`].
    pub filter: Option<HdbscanConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SynthSection,
    pub labels: LabelsSection,
    pub fit: FitConfig,
    pub bench: BenchConfig,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config> {
        let Some(path) = path else {
            return Ok(Config {
                synth: SynthSection {
                    tensor_channels: Some(DEFAULT_TENSOR_CHANNELS),
                    ..SynthSection::default()
                },
                ..Config::default()
            });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new(EXIT_CONFIG, format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::new(EXIT_CONFIG, format!("bad config {}: {e}", path.display())))
    }
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            e.code
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        // a second call in the same process keeps the first pool
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            warn!("thread pool already initialized: {e}");
        }
    }
    let cfg = Config::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, cfg, a),
        Command::GenLabels(a) => cmd_gen_labels(cli, cfg, a),
        Command::Fit(a) => cmd_fit(cli, cfg, a),
        Command::Score(a) => cmd_score(cli, a),
        Command::Localize(a) => cmd_localize(cli, a),
        Command::Bench(a) => cmd_bench(cli, cfg, a),
    }
}

fn required_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| CliError::new(EXIT_CONFIG, "--out is required"))
}

fn required_model(cli: &Cli) -> Result<&Path> {
    cli.model
        .as_deref()
        .ok_or_else(|| CliError::new(EXIT_CONFIG, "--model or CSAD_MODEL_DIR is required"))
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| CliError::new(EXIT_FAILURE, format!("cannot create {}: {e}", p.display())))
}

fn cmd_synth(cli: &Cli, cfg: Config, a: &SynthArgs) -> Result<()> {
    let out = required_out(cli)?;
    let mut spec = match (&cfg.synth.scene, a.two_archetypes) {
        (_, true) => SceneSpec::two_archetypes(),
        (Some(s), false) => s.clone(),
        (None, false) => SceneSpec::default(),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let mut counts = cfg.synth.counts;
    counts.n_train = a.n_train.unwrap_or(counts.n_train);
    counts.n_test_normal = a.n_test_normal.unwrap_or(counts.n_test_normal);
    counts.n_test_anomalous = a.n_test_anomalous.unwrap_or(counts.n_test_anomalous);
    if let Some(k) = &a.kinds {
        counts.kinds = k.iter().map(|&k| k.into()).collect();
    }
    let channels = if a.no_tensors { None } else { cfg.synth.tensor_channels };
    mkdir(out)?;
    let m = synth_bench::generate_dataset(&spec, &counts, out, channels)?;
    info!("wrote {} images to {}", m.images.len(), out.display());
    Ok(())
}

fn train_entries(m: &DatasetManifest) -> Vec<&ManifestEntry> {
    m.images.iter().filter(|e| e.split == Split::Train).collect()
}

fn read_grounding(path: &Path) -> Result<BinaryMask> {
    let bytes = std::fs::read(path).map_err(|e| CliError::new(EXIT_MISSING_INPUT, format!("{}: {e}", path.display())))?;
    let (w, h, bits) = tensor_io::decode_mask(&bytes)?;
    Ok(BinaryMask::new(w, h, bits))
}

fn cmd_gen_labels(cli: &Cli, cfg: Config, a: &GenLabelsArgs) -> Result<()> {
    let out = required_out(cli)?;
    let manifest = DatasetManifest::read(&a.dataset)?;
    let entries = train_entries(&manifest);
    if entries.is_empty() {
        return Err(CliError::new(EXIT_MISSING_INPUT, "dataset has no training images"));
    }
    let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
    let truth = entries
        .par_iter()
        .map(|e| tensor_io::read_label_map(a.dataset.join(&e.label)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut gen = cfg.labels.generation.clone();
    if a.alpha.is_some() {
        gen.alpha = a.alpha;
    }
    let (n_cls, maps, remap) = if a.oracle {
        let n = manifest.spec.n_classes();
        (n, truth, (0..=n as u8).collect::<Vec<u8>>())
    } else {
        let loaded = entries
            .par_iter()
            .map(|e| -> Result<_> {
                let img = tensor_io::read_image(a.dataset.join(&e.image))?;
                let dir = e
                    .proposals
                    .as_ref()
                    .ok_or_else(|| CliError::new(EXIT_MISSING_INPUT, format!("{} has no proposals", e.id)))?;
                let set = MaskSet::read_dir(a.dataset.join(dir))?;
                let grounding = e.grounding.as_ref().map(|g| read_grounding(&a.dataset.join(g))).transpose()?;
                let refined = pseudo_label::refine_masks(&set, grounding.as_ref(), &gen)?;
                Ok((img, refined))
            })
            .collect::<Result<Vec<_>>>()?;
        let (images, masks): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
        let labels = pseudo_label::generate_labels(&images, &masks, &BuiltinDescriptor, &gen)?;
        let remap = class_remap(&truth, &labels.maps, manifest.spec.n_classes(), labels.n_cls);
        (labels.n_cls, labels.maps, remap)
    };
    let split = pseudo_label::filter_label_maps(&maps, n_cls, cfg.labels.filter)?;
    mkdir(&out.join("labels"))?;
    maps.par_iter().zip(&ids).try_for_each(|(m, id)| {
        tensor_io::write_label_map(m, out.join("labels").join(format!("{id}.pgm")))
    })?;
    tensor_io::write_json(out.join(SPLIT_FILE), &SplitFile::new(&split, &ids, n_cls))?;
    tensor_io::write_json(out.join(REMAP_FILE), &RemapFile { class_remap: remap })?;
    info!(
        "n_cls {n_cls}: {} labeled, {} unlabeled{}",
        split.labeled.len(),
        split.unlabeled.len(),
        if split.fallback { " (fallback)" } else { "" }
    );
    Ok(())
}

/// Segmenter class to pseudo class correspondence written by `gen-labels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemapFile {
    pub class_remap: Vec<u8>,
}

fn dataset_lgst(manifest: &DatasetManifest, dataset: &Path, override_path: Option<&Path>) -> Result<Option<(TensorManifest, PathBuf)>> {
    let path = match (override_path, &manifest.tensors) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => dataset.join(p),
        (None, None) => return Ok(None),
    };
    let tm = TensorManifest::read(&path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Some((tm, dir)))
}

fn lgst_map_for(tm: &TensorManifest, dir: &Path, id: &str) -> Result<AnomalyMap> {
    Ok(lgst_maps(&tm.load(dir, id)?)?.combined)
}

fn cmd_fit(cli: &Cli, cfg: Config, a: &FitArgs) -> Result<()> {
    let out = cli.out.as_deref().or(cli.model.as_deref()).ok_or_else(|| CliError::new(EXIT_CONFIG, "--out or --model is required"))?;
    let manifest = DatasetManifest::read(&a.dataset)?;
    let mut fit = cfg.fit.clone();
    if let Some(s) = cli.seed {
        fit.seed = s;
    }
    if let Some(p) = &a.patch_sizes {
        fit.patch_sizes = p.clone();
    }
    let (ids, maps, n_cls, remap) = match &a.labels {
        None => {
            let entries = train_entries(&manifest);
            let maps = entries
                .par_iter()
                .map(|e| tensor_io::read_label_map(a.dataset.join(&e.label)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            (entries.iter().map(|e| e.id.clone()).collect::<Vec<_>>(), maps, manifest.spec.n_classes(), None)
        }
        Some(dir) => {
            let split: SplitFile = tensor_io::read_json(dir.join(SPLIT_FILE))?;
            let remap: Option<RemapFile> = match tensor_io::read_json(dir.join(REMAP_FILE)) {
                Ok(r) => Some(r),
                Err(IoError::Io { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            let maps = split
                .labeled
                .par_iter()
                .map(|id| tensor_io::read_label_map(dir.join("labels").join(format!("{id}.pgm"))))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            (split.labeled.clone(), maps, split.n_cls, remap.map(|r| r.class_remap))
        }
    };
    let lgst = if a.no_lgst {
        None
    } else {
        match dataset_lgst(&manifest, &a.dataset, None)? {
            Some((tm, dir)) => Some(
                ids.par_iter()
                    .map(|id| lgst_map_for(&tm, &dir, id).map(Some))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        }
    };
    let mut model = Model::fit(&maps, &ids, lgst.as_deref(), n_cls, &fit)?;
    model.meta.class_remap = remap;
    mkdir(out)?;
    model.save(out)?;
    info!(
        "fitted {} banks on {} maps, calibrated {:?}",
        model.banks.len(),
        model.meta.train_ids.len(),
        model.calibration.streams.keys().collect::<Vec<_>>()
    );
    Ok(())
}

/// A test input ready for scoring: label map in model classes plus optional LGST map.
struct Prepared {
    entry: ManifestEntry,
    map: LabelMap,
    lgst: Option<AnomalyMap>,
}

/// Loaded inputs for repeated processing.
struct Inputs {
    manifest: DatasetManifest,
    entries: Vec<ManifestEntry>,
    lgst: Option<(TensorManifest, PathBuf)>,
}

fn select_inputs(a: &InputArgs) -> Result<Inputs> {
    let manifest = DatasetManifest::read(&a.dataset)?;
    let entries: Vec<ManifestEntry> = manifest
        .images
        .iter()
        .filter(|e| match a.split {
            SplitArg::All => true,
            SplitArg::Train => e.split == Split::Train,
            SplitArg::Test => e.split == Split::Test,
        })
        .filter(|e| a.ids.as_ref().is_none_or(|ids| ids.contains(&e.id)))
        .cloned()
        .collect();
    if let Some(ids) = &a.ids {
        if let Some(missing) = ids.iter().find(|id| !manifest.images.iter().any(|e| &e.id == *id)) {
            return Err(CliError::new(EXIT_MISSING_INPUT, format!("no image {missing:?} in dataset")));
        }
    }
    let lgst = if a.no_lgst {
        None
    } else {
        match dataset_lgst(&manifest, &a.dataset, a.tensors.as_deref()) {
            Ok(Some(t)) => Some(t),
            Ok(None) => {
                warn!("no tensor manifest; scoring patch histograms only");
                None
            }
            Err(e) if a.tensors.is_some() => return Err(e),
            Err(e) => {
                warn!("tensor manifest unreadable ({}); scoring patch histograms only", e.msg);
                None
            }
        }
    };
    Ok(Inputs {
        manifest,
        entries,
        lgst,
    })
}

fn prepare(model: &Model, a: &InputArgs, inputs: &Inputs, entry: &ManifestEntry) -> Result<Prepared> {
    let map = match &a.label_maps {
        Some(dir) => tensor_io::read_label_map(dir.join(format!("{}.pgm", entry.id)))?,
        None => {
            let img = tensor_io::read_image(a.dataset.join(&entry.image))?;
            model.to_model_classes(&synth_bench::oracle_segment(&img, &inputs.manifest.spec))
        }
    };
    let lgst = match &inputs.lgst {
        Some((tm, dir)) if tm.images.contains_key(&entry.id) => Some(lgst_map_for(tm, dir, &entry.id)?),
        Some(_) => {
            warn!("no tensors for {}; scoring patch histograms only", entry.id);
            None
        }
        None => None,
    };
    Ok(Prepared {
        entry: entry.clone(),
        map,
        lgst,
    })
}

/// One line of `score` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub id: String,
    pub split: Split,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kind: Option<AnomalyKind>,
    pub streams: BTreeMap<String, f64>,
    pub fused: f64,
}

fn output(cli: &Cli) -> Result<Box<dyn Write>> {
    Ok(match &cli.out {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_err(e: std::io::Error) -> CliError {
    CliError::new(EXIT_FAILURE, format!("write failed: {e}"))
}

fn cmd_score(cli: &Cli, a: &ScoreArgs) -> Result<()> {
    let model = Model::load(required_model(cli)?)?;
    let inputs = select_inputs(&a.input)?;
    let lines = inputs
        .entries
        .par_iter()
        .map(|e| -> Result<ScoreLine> {
            let p = prepare(&model, &a.input, &inputs, e)?;
            let r = model.score(&p.entry.id, &p.map, p.lgst.as_ref())?;
            Ok(ScoreLine {
                id: r.id,
                split: p.entry.split,
                kind: p.entry.anomaly.map(|x| x.kind),
                streams: r.streams,
                fused: r.fused,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = output(cli)?;
    for l in &lines {
        serde_json::to_writer(&mut w, l).map_err(|e| CliError::new(EXIT_FAILURE, e.to_string()))?;
        writeln!(w).map_err(write_err)?;
    }
    w.flush().map_err(write_err)
}

fn cmd_localize(cli: &Cli, a: &LocalizeArgs) -> Result<()> {
    let out = required_out(cli)?;
    let model = Model::load(required_model(cli)?)?;
    let inputs = select_inputs(&a.input)?;
    mkdir(out)?;
    inputs.entries.par_iter().try_for_each(|e| -> Result<()> {
        let p = prepare(&model, &a.input, &inputs, e)?;
        let r = model.localize(&p.map, p.lgst.as_ref())?;
        for (tag, m) in [("ph", &r.patch_hist_map), ("lgst", &r.lgst_map), ("merged", &r.merged)] {
            tensor_io::write_map16(m.width, m.height, &m.values, out.join(format!("{}.{tag}.pgm", e.id)))?;
        }
        Ok(())
    })?;
    info!("wrote maps for {} images to {}", inputs.entries.len(), out.display());
    Ok(())
}

fn cmd_bench(cli: &Cli, cfg: Config, a: &BenchArgs) -> Result<()> {
    let model = Model::load(required_model(cli)?)?;
    let inputs = select_inputs(&a.input)?;
    if inputs.entries.is_empty() {
        return Err(CliError::new(EXIT_MISSING_INPUT, "no images to benchmark"));
    }
    let mut bc = cfg.bench;
    bc.runs = a.runs.unwrap_or(bc.runs);
    bc.batch_size = a.batch.unwrap_or(bc.batch_size);
    bc.warmup = a.warmup.unwrap_or(bc.warmup);
    // decode once; the timed work is segmentation, LGST reduction and scoring
    let images = inputs
        .entries
        .par_iter()
        .map(|e| tensor_io::read_image(a.input.dataset.join(&e.image)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let tensors = match &inputs.lgst {
        Some((tm, dir)) => inputs
            .entries
            .iter()
            .map(|e| tm.load(dir, &e.id).ok())
            .collect::<Vec<_>>(),
        None => inputs.entries.iter().map(|_| None).collect(),
    };
    let spec = &inputs.manifest.spec;
    let one = |i: usize| -> f64 {
        let map = model.to_model_classes(&synth_bench::oracle_segment(&images[i], spec));
        let lg = tensors[i].as_ref().and_then(|t| lgst_maps(t).ok()).map(|m| m.combined);
        model.score("", &map, lg.as_ref()).map(|r| r.fused).unwrap_or(f64::NAN)
    };
    let report = synth_bench::bench(&bc, images.len(), |batch| {
        if batch.len() == 1 {
            std::hint::black_box(one(batch[0]));
        } else {
            let v: Vec<f64> = batch.par_iter().map(|&i| one(i)).collect();
            std::hint::black_box(v);
        }
    });
    let mut w = output(cli)?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| CliError::new(EXIT_FAILURE, e.to_string()))?;
    writeln!(w).map_err(write_err)?;
    w.flush().map_err(write_err)
}
