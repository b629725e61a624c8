//! Command-line entry point wiring the pipeline stages together.
//!
//! Every subcommand reads an optional JSON config file, applies flag
//! overrides, writes a `config.resolved.json` snapshot and a `run.log`
//! beside its outputs, and exits 0 on success, 1 on validation/runtime
//! failures, 2 on usage errors.
//!
//! Seeding rule: the global `seed` governs every stage; module-level seed
//! fields are overwritten with it during resolution so one value pins the
//! whole pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, read_viewsets_jsonl, write_viewsets_jsonl, AugmentConfig, ViewSet};
use crate::encoder::{EncoderConfig, ExpanderConfig};
use crate::error::{Error, Result};
use crate::eval::{
    run_experiment_suite, write_suite_report, MethodSource, Suite, SuiteData, SuiteMethod,
};
use crate::losses::{TripletConfig, VicregConfig};
use crate::score::{
    chunk_song, compute_summary, match_labels, parse_midi, read_chunks_jsonl, read_labels_jsonl,
    write_chunks_jsonl, write_labels_jsonl, MotifLabel, ParseOptions, PianoRollChunk, RoleMapping,
    TrackRole,
};
use crate::synth::{synth_benchmark, synth_origins, BenchmarkConfig, SynthOriginsConfig};
use crate::training::{
    read_checkpoint_meta, run_training, Method, Stage, TrainConfig, TrainData, TrainJob,
};
use crate::viz::{cluster_motifs, render_outputs, Eps, DEFAULT_MIN_PTS};

pub const WORK_DIR_ENV: &str = "MOTIFSPACE_WORK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub steps_per_bar: u32,
    pub default_beats_per_bar: u32,
    pub roles: RoleMapping,
    pub include_accompaniment: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            steps_per_bar: 16,
            default_beats_per_bar: 4,
            roles: RoleMapping::default(),
            include_accompaniment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VizConfig {
    /// DBSCAN radius; `None` = k-distance auto heuristic.
    pub eps: Option<f64>,
    pub min_pts: usize,
    pub row_normalize: bool,
}

impl Default for VizConfig {
    fn default() -> Self {
        Self { eps: None, min_pts: DEFAULT_MIN_PTS, row_normalize: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthFixturesConfig {
    pub origins: SynthOriginsConfig,
    pub benchmark: BenchmarkConfig,
}

/// Composite configuration covering every stage. Any JSON subset parses;
/// missing sections take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub work_dir: Option<PathBuf>,
    pub ingest: IngestConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub expander: ExpanderConfig,
    pub vicreg: VicregConfig,
    pub triplet: TripletConfig,
    pub train: TrainConfig,
    pub viz: VizConfig,
    pub synth: SynthFixturesConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let body = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))?;
                serde_json::from_str(&body)
                    .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        cfg.cascade_seed();
        Ok(cfg)
    }

    /// The global seed rules every module; stream tags keep stages apart.
    fn cascade_seed(&mut self) {
        self.augment.seed = self.seed;
        self.train.seed = self.seed;
        self.synth.origins.seed = self.seed;
        self.synth.benchmark.seed = self.seed;
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "motifspace",
    version,
    about = "Bar-level motif embeddings: ingest MIDI, augment, train, evaluate, visualize"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config file and cascades to every stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to a stage directory under the work dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Work directory root (default: $MOTIFSPACE_WORK, then ./work).
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Parse MIDI files into a chunk dataset (plus labels when present).
    Ingest {
        #[command(flatten)]
        common: Common,
        /// MIDI files or directories to scan recursively.
        #[arg(long, required = true, num_args = 1..)]
        midi: Vec<PathBuf>,
        /// CSV labels with header song_id,bar_index,motif_id.
        #[arg(long)]
        labels_csv: Option<PathBuf>,
    },
    /// Expand a chunk dataset into augmented view sets.
    AugmentPreview {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        chunks: PathBuf,
        /// Chunk whose views go onto the preview contact sheet.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Self-supervised pretraining on view sets.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Precomputed view sets (JSONL).
        #[arg(long)]
        views: Option<PathBuf>,
        /// Chunk dataset; views are built in-process.
        #[arg(long)]
        chunks: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Resume an interrupted run from its checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a pretrained checkpoint on labeled data (or train the
    /// same objective from scratch with --from-scratch).
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fresh initialization instead of a pretrained checkpoint.
        #[arg(long)]
        from_scratch: bool,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        freeze_encoder: bool,
    },
    /// Retrieval evaluation suites a-d.
    Eval {
        #[command(flatten)]
        common: Common,
        /// a = views/shared origin; b, c, d = labeled data/shared motif.
        #[arg(long)]
        suite: String,
        /// views.jsonl for suite a, chunks.jsonl otherwise.
        #[arg(long)]
        data: PathBuf,
        /// Labels JSONL (required for suites b, c, d).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Checkpoint to evaluate, as `name=path` or a bare path
        /// (repeatable).
        #[arg(long = "checkpoint")]
        checkpoints: Vec<String>,
        /// Include the IBPR baseline.
        #[arg(long)]
        ibpr: bool,
        /// Include a random-embedding baseline.
        #[arg(long)]
        random_baseline: bool,
    },
    /// Cluster one song's embeddings and render its structure figures.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        song: String,
        /// Chunk dataset containing the song.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        min_pts: Option<usize>,
        #[arg(long)]
        row_normalize: bool,
    },
    /// Generate the deterministic synthetic corpora and benchmark.
    SynthFixtures {
        #[command(flatten)]
        common: Common,
        /// Override the number of synthetic origins.
        #[arg(long)]
        origins: Option<usize>,
        /// Override the number of benchmark songs.
        #[arg(long)]
        songs: Option<usize>,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Ingest { .. } => "ingest",
            Cmd::AugmentPreview { .. } => "augment-preview",
            Cmd::Pretrain { .. } => "pretrain",
            Cmd::Finetune { .. } => "finetune",
            Cmd::Eval { .. } => "eval",
            Cmd::Visualize { .. } => "visualize",
            Cmd::SynthFixtures { .. } => "synth-fixtures",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Cmd::Ingest { common, .. }
            | Cmd::AugmentPreview { common, .. }
            | Cmd::Pretrain { common, .. }
            | Cmd::Finetune { common, .. }
            | Cmd::Eval { common, .. }
            | Cmd::Visualize { common, .. }
            | Cmd::SynthFixtures { common, .. } => common,
        }
    }

    /// Default output directory per stage, under the work dir.
    fn default_out(&self, work: &Path) -> PathBuf {
        match self {
            Cmd::Ingest { .. } => work.join("datasets").join("ingest"),
            Cmd::AugmentPreview { .. } => work.join("datasets").join("views"),
            Cmd::Pretrain { .. } => work.join("checkpoints").join("pretrain"),
            Cmd::Finetune { .. } => work.join("checkpoints").join("finetune"),
            Cmd::Eval { suite, .. } => work.join("reports").join(format!("suite-{suite}")),
            Cmd::Visualize { song, .. } => work.join("figures").join(song),
            Cmd::SynthFixtures { .. } => work.join("datasets").join("synth"),
        }
    }
}

struct RunLog {
    file: std::fs::File,
}

impl RunLog {
    fn create(dir: &Path) -> Result<Self> {
        Ok(Self { file: std::fs::File::create(dir.join("run.log"))? })
    }

    fn line(&mut self, msg: &str) {
        use std::io::Write;
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let _ = writeln!(self.file, "[{ts}] {msg}");
    }
}

/// Execution context shared by every stage handler.
struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    log: RunLog,
}

impl Ctx {
    fn wrote(&mut self, path: &Path) {
        self.log.line(&format!("wrote {}", path.display()));
    }
}

fn parse_method(s: &str) -> Result<Method> {
    match s {
        "vicreg" => Ok(Method::Vicreg),
        "cl" => Ok(Method::Cl),
        "necl" => Ok(Method::Necl),
        other => Err(Error::Config(format!(
            "unknown method {other:?} (expected vicreg, cl or necl)"
        ))),
    }
}

pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    let common = cmd.common();
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.cascade_seed();
    }
    if let Some(wd) = &common.work_dir {
        cfg.work_dir = Some(wd.clone());
    }
    let work = cfg
        .work_dir
        .clone()
        .or_else(|| std::env::var_os(WORK_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("work"));
    let out = common.out.clone().unwrap_or_else(|| cmd.default_out(&work));
    std::fs::create_dir_all(&out)?;

    let mut log = RunLog::create(&out)?;
    log.line(&format!("motifspace {} starting", cmd.name()));
    let mut ctx = Ctx { cfg, out, log };
    write_snapshot(&cmd, &mut ctx)?;

    let result = match &cmd {
        Cmd::Ingest { midi, labels_csv, .. } => cmd_ingest(&mut ctx, midi, labels_csv.as_deref()),
        Cmd::AugmentPreview { chunks, index, .. } => cmd_augment_preview(&mut ctx, chunks, *index),
        Cmd::Pretrain { views, chunks, method, steps, batch_size, lr, resume, .. } => cmd_pretrain(
            &mut ctx,
            views.as_deref(),
            chunks.as_deref(),
            method.as_deref(),
            *steps,
            *batch_size,
            *lr,
            resume.as_deref(),
        ),
        Cmd::Finetune {
            chunks,
            labels,
            checkpoint,
            from_scratch,
            method,
            steps,
            batch_size,
            lr,
            freeze_encoder,
            ..
        } => cmd_finetune(
            &mut ctx,
            chunks,
            labels,
            checkpoint.as_deref(),
            *from_scratch,
            method.as_deref(),
            *steps,
            *batch_size,
            *lr,
            *freeze_encoder,
        ),
        Cmd::Eval { suite, data, labels, checkpoints, ibpr, random_baseline, .. } => cmd_eval(
            &mut ctx,
            suite,
            data,
            labels.as_deref(),
            checkpoints,
            *ibpr,
            *random_baseline,
        ),
        Cmd::Visualize { checkpoint, song, data, eps, min_pts, row_normalize, .. } => {
            cmd_visualize(&mut ctx, checkpoint, song, data, *eps, *min_pts, *row_normalize)
        }
        Cmd::SynthFixtures { origins, songs, .. } => cmd_synth_fixtures(&mut ctx, *origins, *songs),
    };
    match &result {
        Ok(()) => ctx.log.line("done"),
        Err(e) => ctx.log.line(&format!("failed: {e}")),
    }
    result
}

fn write_snapshot(cmd: &Cmd, ctx: &mut Ctx) -> Result<()> {
    #[derive(Serialize)]
    struct Snapshot<'a> {
        command: &'a str,
        inputs: BTreeMap<&'static str, String>,
        config: &'a RunConfig,
    }
    fn path(inputs: &mut BTreeMap<&'static str, String>, key: &'static str, p: &Path) {
        inputs.insert(key, p.display().to_string());
    }
    let mut inputs = BTreeMap::new();
    match cmd {
        Cmd::Ingest { midi, labels_csv, .. } => {
            inputs.insert(
                "midi",
                midi.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
            );
            if let Some(p) = labels_csv {
                path(&mut inputs, "labels_csv", p);
            }
        }
        Cmd::AugmentPreview { chunks, .. } => path(&mut inputs, "chunks", chunks),
        Cmd::Pretrain { views, chunks, resume, .. } => {
            if let Some(p) = views {
                path(&mut inputs, "views", p);
            }
            if let Some(p) = chunks {
                path(&mut inputs, "chunks", p);
            }
            if let Some(p) = resume {
                path(&mut inputs, "resume", p);
            }
        }
        Cmd::Finetune { chunks, labels, checkpoint, .. } => {
            path(&mut inputs, "chunks", chunks);
            path(&mut inputs, "labels", labels);
            if let Some(p) = checkpoint {
                path(&mut inputs, "checkpoint", p);
            }
        }
        Cmd::Eval { suite, data, labels, checkpoints, .. } => {
            inputs.insert("suite", suite.clone());
            path(&mut inputs, "data", data);
            if let Some(p) = labels {
                path(&mut inputs, "labels", p);
            }
            if !checkpoints.is_empty() {
                inputs.insert("checkpoints", checkpoints.join(","));
            }
        }
        Cmd::Visualize { checkpoint, song, data, .. } => {
            path(&mut inputs, "checkpoint", checkpoint);
            inputs.insert("song", song.clone());
            path(&mut inputs, "data", data);
        }
        Cmd::SynthFixtures { .. } => {}
    }
    inputs.insert("out", ctx.out.display().to_string());

    let snap = Snapshot { command: cmd.name(), inputs, config: &ctx.cfg };
    let mut body = serde_json::to_string_pretty(&snap)?;
    body.push('\n');
    let p = ctx.out.join("config.resolved.json");
    std::fs::write(&p, body)?;
    ctx.wrote(&p);
    Ok(())
}

fn collect_midi_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found = Vec::new();
            walk(input, &mut found)?;
            files.extend(found.into_iter().filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_lowercase).as_deref(),
                    Some("mid") | Some("midi")
                )
            }));
        } else if input.is_file() {
            files.push(input.clone());
        } else {
            return Err(Error::Config(format!("midi input {} does not exist", input.display())));
        }
    }
    files.sort();
    files.dedup();
    if files.is_empty() {
        return Err(Error::Config("no MIDI files found under the given inputs".into()));
    }
    Ok(files)
}

fn read_labels_csv(path: &Path) -> Result<Vec<MotifLabel>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("labels csv {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Config(format!("labels csv {}: {e}", path.display())))?
        .clone();
    let idx = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Config(format!("labels csv {}: missing column {name}", path.display()))
        })
    };
    let (si, bi, mi) = (idx("song_id")?, idx("bar_index")?, idx("motif_id")?);
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| Error::Config(format!("labels csv {}: {e}", path.display())))?;
        let fail = |what: &str| {
            Error::Config(format!("labels csv {} record {}: bad {what}", path.display(), line + 1))
        };
        out.push(MotifLabel {
            song_id: record.get(si).ok_or_else(|| fail("song_id"))?.to_string(),
            bar_index: record
                .get(bi)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| fail("bar_index"))?,
            motif_id: record
                .get(mi)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| fail("motif_id"))?,
        });
    }
    Ok(out)
}

fn cmd_ingest(ctx: &mut Ctx, midi: &[PathBuf], labels_csv: Option<&Path>) -> Result<()> {
    let files = collect_midi_files(midi)?;
    let ingest = ctx.cfg.ingest.clone();
    let mut roles = vec![TrackRole::Melody];
    if ingest.include_accompaniment {
        roles.push(TrackRole::Accompaniment);
    }

    let mut all_chunks = Vec::new();
    let mut all_labels = Vec::new();
    let mut seen = BTreeMap::new();
    for file in &files {
        let song_id = file
            .file_stem()
            .and_then(|s| s.to_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Config(format!("{}: unusable file name", file.display())))?;
        if let Some(prev) = seen.insert(song_id.clone(), file.clone()) {
            return Err(Error::Config(format!(
                "song id {song_id:?} appears twice: {} and {}",
                prev.display(),
                file.display()
            )));
        }
        let bytes = std::fs::read(file)?;
        let opts = ParseOptions {
            song_id: song_id.clone(),
            default_beats_per_bar: ingest.default_beats_per_bar,
            roles: ingest.roles.clone(),
        };
        let parsed = parse_midi(&bytes, &opts)
            .map_err(|e| Error::Config(format!("{}: {e}", file.display())))?;
        for w in &parsed.warnings {
            log::warn!("{song_id}: {w}");
        }
        let chunks = chunk_song(&parsed.song, &roles, ingest.steps_per_bar)?;
        if let Some(track) =
            parsed.song.tracks.iter().find(|t| t.role == TrackRole::Label)
        {
            let matched = match_labels(&chunks, &track.notes, parsed.song.beats_per_bar);
            for w in &matched.warnings {
                log::warn!("{song_id}: {w}");
            }
            all_labels.extend(matched.labels);
        }
        log::info!("{song_id}: {} chunks", chunks.len());
        all_chunks.extend(chunks);
    }
    if let Some(csv_path) = labels_csv {
        all_labels.extend(read_labels_csv(csv_path)?);
    }

    let chunks_path = ctx.out.join("chunks.jsonl");
    write_chunks_jsonl(&chunks_path, &all_chunks)?;
    ctx.wrote(&chunks_path);
    let labels_path = ctx.out.join("labels.jsonl");
    write_labels_jsonl(&labels_path, &all_labels)?;
    ctx.wrote(&labels_path);

    let summary = compute_summary(&all_chunks, &all_labels);
    let summary_path = ctx.out.join("summary.json");
    let mut body = serde_json::to_string_pretty(&summary)?;
    body.push('\n');
    std::fs::write(&summary_path, body)?;
    ctx.wrote(&summary_path);
    Ok(())
}

fn build_views(chunks: &[PianoRollChunk], cfg: &AugmentConfig) -> Result<Vec<ViewSet>> {
    chunks.iter().map(|c| make_views(c, cfg)).collect()
}

fn cmd_augment_preview(ctx: &mut Ctx, chunks_path: &Path, index: usize) -> Result<()> {
    let chunks = read_chunks_jsonl(chunks_path)?;
    let sets = build_views(&chunks, &ctx.cfg.augment)?;
    let out = ctx.out.join("views.jsonl");
    write_viewsets_jsonl(&out, &sets)?;
    ctx.wrote(&out);
    let set = sets.get(index).ok_or_else(|| {
        Error::Config(format!("preview index {index} is out of range: {} chunks", sets.len()))
    })?;
    let sheet = ctx.out.join("preview.png");
    crate::viz::render_contact_sheet(set, &sheet)?;
    ctx.wrote(&sheet);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_pretrain(
    ctx: &mut Ctx,
    views: Option<&Path>,
    chunks: Option<&Path>,
    method: Option<&str>,
    steps: Option<u64>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    resume: Option<&Path>,
) -> Result<()> {
    let sets = match (views, chunks) {
        (Some(v), None) => read_viewsets_jsonl(v)?,
        (None, Some(c)) => build_views(&read_chunks_jsonl(c)?, &ctx.cfg.augment)?,
        _ => {
            return Err(Error::Config(
                "pretrain needs exactly one of --views or --chunks".into(),
            ))
        }
    };

    let mut train = ctx.cfg.train.clone();
    train.stage = Stage::Pretrain;
    if let Some(m) = method {
        train.method = parse_method(m)?;
    }
    if let Some(s) = steps {
        train.max_steps = s;
    }
    if let Some(b) = batch_size {
        train.batch_size = b;
    }
    if let Some(l) = lr {
        train.learning_rate = Some(l);
    }
    if let Some(r) = resume {
        train.checkpoint_in = Some(r.to_path_buf());
    }
    train.checkpoint_out = Some(ctx.out.join("model.ckpt"));
    train.metrics_out = Some(ctx.out.join("metrics.csv"));

    let job = TrainJob {
        data: TrainData::Views(&sets),
        encoder: ctx.cfg.encoder.clone(),
        expander: ctx.cfg.expander.clone(),
        vicreg: ctx.cfg.vicreg,
        triplet: ctx.cfg.triplet,
        train,
    };
    let outcome = run_training(&job)?;
    for name in ["model.ckpt", "metrics.csv"] {
        let p = ctx.out.join(name);
        ctx.wrote(&p);
    }
    if let Some(last) = outcome.history.last() {
        log::info!("pretrain finished at step {} with loss {}", last.step, last.loss_total);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    ctx: &mut Ctx,
    chunks_path: &Path,
    labels_path: &Path,
    checkpoint: Option<&Path>,
    from_scratch: bool,
    method: Option<&str>,
    steps: Option<u64>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    freeze_encoder: bool,
) -> Result<()> {
    let chunks = read_chunks_jsonl(chunks_path)?;
    let labels = read_labels_jsonl(labels_path)?;

    let mut train = ctx.cfg.train.clone();
    let (encoder, expander);
    if from_scratch {
        if checkpoint.is_some() {
            return Err(Error::Config(
                "--from-scratch and --checkpoint are mutually exclusive".into(),
            ));
        }
        train.stage = Stage::Scratch;
        train.checkpoint_in = None;
        encoder = ctx.cfg.encoder.clone();
        expander = ctx.cfg.expander.clone();
    } else {
        let ck = checkpoint
            .map(Path::to_path_buf)
            .or_else(|| train.checkpoint_in.clone())
            .ok_or_else(|| {
                Error::Config("finetune needs --checkpoint (or --from-scratch)".into())
            })?;
        // The checkpoint owns the architecture.
        let meta = read_checkpoint_meta(&ck)?;
        encoder = meta.encoder;
        expander = meta.expander;
        train.stage = Stage::Finetune;
        train.checkpoint_in = Some(ck);
    }
    if let Some(m) = method {
        train.method = parse_method(m)?;
    }
    if let Some(s) = steps {
        train.max_steps = s;
    }
    if let Some(b) = batch_size {
        train.batch_size = b;
    }
    if let Some(l) = lr {
        train.learning_rate = Some(l);
    }
    if freeze_encoder {
        train.freeze_encoder = true;
    }
    train.checkpoint_out = Some(ctx.out.join("model.ckpt"));
    train.metrics_out = Some(ctx.out.join("metrics.csv"));

    let job = TrainJob {
        data: TrainData::Labeled { chunks: &chunks, labels: &labels },
        encoder,
        expander,
        vicreg: ctx.cfg.vicreg,
        triplet: ctx.cfg.triplet,
        train,
    };
    let outcome = run_training(&job)?;
    for name in ["model.ckpt", "metrics.csv"] {
        let p = ctx.out.join(name);
        ctx.wrote(&p);
    }
    if let Some(last) = outcome.history.last() {
        log::info!("finetune finished at step {} with loss {}", last.step, last.loss_total);
    }
    Ok(())
}

fn cmd_eval(
    ctx: &mut Ctx,
    suite: &str,
    data: &Path,
    labels: Option<&Path>,
    checkpoints: &[String],
    ibpr: bool,
    random_baseline: bool,
) -> Result<()> {
    let suite: Suite = suite.parse()?;

    let mut methods = Vec::new();
    for entry in checkpoints {
        let (name, path) = match entry.split_once('=') {
            Some((name, path)) => (name.to_string(), PathBuf::from(path)),
            None => {
                let p = PathBuf::from(entry);
                let name = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("model")
                    .to_string();
                (name, p)
            }
        };
        methods.push(SuiteMethod { name, source: MethodSource::Checkpoint(path) });
    }
    if ibpr {
        methods.push(SuiteMethod { name: "ibpr".into(), source: MethodSource::Ibpr });
    }
    if random_baseline {
        methods.push(SuiteMethod {
            name: "random".into(),
            source: MethodSource::Random {
                seed: ctx.cfg.seed,
                dim: ctx.cfg.encoder.embed_dim,
            },
        });
    }
    if methods.is_empty() {
        return Err(Error::Config(
            "eval needs at least one of --checkpoint, --ibpr, --random-baseline".into(),
        ));
    }

    let views_data;
    let labeled_chunks;
    let labeled_labels;
    let suite_data = match suite {
        Suite::A => {
            views_data = read_viewsets_jsonl(data)?;
            SuiteData { views: Some(&views_data), labeled: None }
        }
        _ => {
            let lp = labels.ok_or_else(|| {
                Error::Config(format!("suite {} requires --labels", suite.as_str()))
            })?;
            labeled_chunks = read_chunks_jsonl(data)?;
            labeled_labels = read_labels_jsonl(lp)?;
            SuiteData { views: None, labeled: Some((&labeled_chunks, &labeled_labels)) }
        }
    };

    let report = run_experiment_suite(suite, &methods, &suite_data)?;
    for m in &report.methods {
        log::info!(
            "suite {} {}: auc_pr {:.4} over {} anchors",
            report.suite.as_str(),
            m.name,
            m.report.auc_pr,
            m.report.n_anchors
        );
    }
    for p in write_suite_report(&ctx.out.clone(), &report)? {
        ctx.wrote(&p);
    }
    Ok(())
}

fn cmd_visualize(
    ctx: &mut Ctx,
    checkpoint: &Path,
    song: &str,
    data: &Path,
    eps: Option<f64>,
    min_pts: Option<usize>,
    row_normalize: bool,
) -> Result<()> {
    let mut chunks: Vec<PianoRollChunk> = read_chunks_jsonl(data)?
        .into_iter()
        .filter(|c| c.song_id == song)
        .collect();
    if chunks.is_empty() {
        return Err(Error::Config(format!("song {song:?} not found in {}", data.display())));
    }
    chunks.sort_by_key(|c| c.bar_index);

    let loaded = crate::training::load_checkpoint(checkpoint)?;
    let mut points = Vec::with_capacity(chunks.len());
    for c in &chunks {
        points.push(loaded.model.encode_forward(c)?.0.to_vec());
    }

    let eps = match eps.or(ctx.cfg.viz.eps) {
        Some(e) => Eps::Fixed(e),
        None => Eps::Auto,
    };
    let min_pts = min_pts.unwrap_or(ctx.cfg.viz.min_pts);
    let row_normalize = row_normalize || ctx.cfg.viz.row_normalize;
    let assignment = cluster_motifs(&points, eps, min_pts)?;
    log::info!(
        "{song}: {} clusters over {} bars (eps {}, min_pts {min_pts})",
        assignment.n_clusters(),
        chunks.len(),
        assignment.eps
    );
    for p in render_outputs(&chunks, &points, &assignment, row_normalize, &ctx.out.clone())? {
        ctx.wrote(&p);
    }
    Ok(())
}

fn cmd_synth_fixtures(ctx: &mut Ctx, origins: Option<usize>, songs: Option<usize>) -> Result<()> {
    let mut synth = ctx.cfg.synth.clone();
    if let Some(n) = origins {
        synth.origins.n_origins = n;
    }
    if let Some(n) = songs {
        synth.benchmark.n_songs = n;
    }

    let origin_chunks = synth_origins(&synth.origins);
    let origins_path = ctx.out.join("origins.jsonl");
    write_chunks_jsonl(&origins_path, &origin_chunks)?;
    ctx.wrote(&origins_path);

    let sets = build_views(&origin_chunks, &ctx.cfg.augment)?;
    let views_path = ctx.out.join("views.jsonl");
    write_viewsets_jsonl(&views_path, &sets)?;
    ctx.wrote(&views_path);

    let bench = synth_benchmark(&synth.benchmark)?;
    let (train, eval) = bench.split();
    for (name, part) in [("train", &train), ("eval", &eval)] {
        let cp = ctx.out.join(format!("bench_{name}_chunks.jsonl"));
        write_chunks_jsonl(&cp, &part.chunks)?;
        ctx.wrote(&cp);
        let lp = ctx.out.join(format!("bench_{name}_labels.jsonl"));
        write_labels_jsonl(&lp, &part.labels)?;
        ctx.wrote(&lp);
    }
    let summary_path = ctx.out.join("bench_summary.json");
    let mut body = serde_json::to_string_pretty(&bench.dataset.summary)?;
    body.push('\n');
    std::fs::write(&summary_path, body)?;
    ctx.wrote(&summary_path);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> i32 {
        run(std::iter::once("motifspace".to_string()).chain(args.iter().map(|s| s.to_string())))
    }

    fn tiny_config(dir: &Path) -> PathBuf {
        let mut cfg = RunConfig::default();
        cfg.encoder = EncoderConfig {
            n_layers: 1,
            model_dim: 8,
            n_heads: 2,
            ffn_dim: 12,
            embed_dim: 4,
            pooling: crate::encoder::Pooling::Mean,
            steps_per_bar: 8,
        };
        cfg.expander = ExpanderConfig { hidden_dims: vec![6], out_dim: 6 };
        cfg.ingest.steps_per_bar = 8;
        cfg.synth.origins =
            SynthOriginsConfig { n_origins: 6, bars_per_song: 2, steps_per_bar: 8, ..cfg.synth.origins.clone() };
        cfg.synth.benchmark = BenchmarkConfig {
            n_songs: 4,
            motifs_per_song: 2,
            occurrences_range: (2, 3),
            distractors_per_song: 2,
            steps_per_bar: 8,
            ..cfg.synth.benchmark.clone()
        };
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        path
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(cli(&["no-such-command"]), 2);
        assert_eq!(cli(&["eval"]), 2); // missing required flags
        assert_eq!(cli(&["pretrain", "--bogus-flag"]), 2);
    }

    #[test]
    fn help_exits_0() {
        assert_eq!(cli(&["--help"]), 0);
        assert_eq!(cli(&["pretrain", "--help"]), 0);
    }

    #[test]
    fn synth_fixtures_then_pretrain_then_eval() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let cfg = cfg.to_str().unwrap();
        let fixtures = dir.path().join("fx");
        let fx = fixtures.to_str().unwrap();
        assert_eq!(cli(&["synth-fixtures", "--config", cfg, "--out", fx]), 0);
        for name in [
            "origins.jsonl",
            "views.jsonl",
            "bench_train_chunks.jsonl",
            "bench_train_labels.jsonl",
            "bench_eval_chunks.jsonl",
            "bench_eval_labels.jsonl",
            "bench_summary.json",
            "config.resolved.json",
            "run.log",
        ] {
            assert!(fixtures.join(name).exists(), "missing {name}");
        }

        let ck_dir = dir.path().join("pre");
        let views = fixtures.join("views.jsonl");
        assert_eq!(
            cli(&[
                "pretrain",
                "--config",
                cfg,
                "--views",
                views.to_str().unwrap(),
                "--steps",
                "2",
                "--batch-size",
                "4",
                "--out",
                ck_dir.to_str().unwrap(),
            ]),
            0
        );
        assert!(ck_dir.join("model.ckpt").exists());
        assert!(ck_dir.join("metrics.csv").exists());

        let report_dir = dir.path().join("rep");
        assert_eq!(
            cli(&[
                "eval",
                "--config",
                cfg,
                "--suite",
                "a",
                "--data",
                views.to_str().unwrap(),
                "--checkpoint",
                &format!("pre={}", ck_dir.join("model.ckpt").display()),
                "--ibpr",
                "--random-baseline",
                "--out",
                report_dir.to_str().unwrap(),
            ]),
            0
        );
        let report = std::fs::read_to_string(report_dir.join("report.json")).unwrap();
        assert!(report.contains("\"pre\"") && report.contains("\"ibpr\""));

        // Determinism: the same eval twice is byte-identical.
        let report_dir2 = dir.path().join("rep2");
        assert_eq!(
            cli(&[
                "eval",
                "--config",
                cfg,
                "--suite",
                "a",
                "--data",
                views.to_str().unwrap(),
                "--checkpoint",
                &format!("pre={}", ck_dir.join("model.ckpt").display()),
                "--ibpr",
                "--random-baseline",
                "--out",
                report_dir2.to_str().unwrap(),
            ]),
            0
        );
        assert_eq!(
            std::fs::read(report_dir.join("report.json")).unwrap(),
            std::fs::read(report_dir2.join("report.json")).unwrap()
        );
    }

    #[test]
    fn finetune_and_visualize_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = tiny_config(dir.path());
        let cfg = cfg_path.to_str().unwrap();
        let fixtures = dir.path().join("fx");
        assert_eq!(
            cli(&["synth-fixtures", "--config", cfg, "--out", fixtures.to_str().unwrap()]),
            0
        );
        let ck_dir = dir.path().join("pre");
        assert_eq!(
            cli(&[
                "pretrain",
                "--config",
                cfg,
                "--views",
                fixtures.join("views.jsonl").to_str().unwrap(),
                "--steps",
                "1",
                "--batch-size",
                "4",
                "--out",
                ck_dir.to_str().unwrap(),
            ]),
            0
        );

        let ft_dir = dir.path().join("ft");
        assert_eq!(
            cli(&[
                "finetune",
                "--config",
                cfg,
                "--chunks",
                fixtures.join("bench_train_chunks.jsonl").to_str().unwrap(),
                "--labels",
                fixtures.join("bench_train_labels.jsonl").to_str().unwrap(),
                "--checkpoint",
                ck_dir.join("model.ckpt").to_str().unwrap(),
                "--method",
                "cl",
                "--steps",
                "2",
                "--batch-size",
                "4",
                "--out",
                ft_dir.to_str().unwrap(),
            ]),
            0
        );
        assert!(ft_dir.join("model.ckpt").exists());

        // Pick any benchmark song for the figure pipeline.
        let chunks =
            read_chunks_jsonl(&fixtures.join("bench_train_chunks.jsonl")).unwrap();
        let song = chunks[0].song_id.clone();
        let fig_dir = dir.path().join("fig");
        assert_eq!(
            cli(&[
                "visualize",
                "--config",
                cfg,
                "--checkpoint",
                ft_dir.join("model.ckpt").to_str().unwrap(),
                "--song",
                &song,
                "--data",
                fixtures.join("bench_train_chunks.jsonl").to_str().unwrap(),
                "--min-pts",
                "2",
                "--out",
                fig_dir.to_str().unwrap(),
            ]),
            0
        );
        assert!(fig_dir.join("structure.json").exists());
        assert!(fig_dir.join("config.resolved.json").exists());
    }

    #[test]
    fn validation_failures_exit_1() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        // suite b without --labels
        assert_eq!(
            cli(&[
                "eval",
                "--suite",
                "b",
                "--data",
                "nope.jsonl",
                "--ibpr",
                "--out",
                out.to_str().unwrap(),
            ]),
            1
        );
        // pretrain with both data flags
        assert_eq!(
            cli(&[
                "pretrain",
                "--views",
                "a.jsonl",
                "--chunks",
                "b.jsonl",
                "--out",
                out.to_str().unwrap(),
            ]),
            1
        );
        // unknown method
        assert_eq!(
            cli(&[
                "pretrain",
                "--views",
                "a.jsonl",
                "--method",
                "sgd",
                "--out",
                out.to_str().unwrap(),
            ]),
            1
        );
    }

    #[test]
    fn seed_flag_cascades_into_the_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("fx");
        assert_eq!(
            cli(&[
                "synth-fixtures",
                "--seed",
                "7",
                "--origins",
                "4",
                "--songs",
                "3",
                "--out",
                out.to_str().unwrap(),
            ]),
            0
        );
        let snap: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("config.resolved.json")).unwrap())
                .unwrap();
        assert_eq!(snap["config"]["seed"], 7);
        assert_eq!(snap["config"]["augment"]["seed"], 7);
        assert_eq!(snap["config"]["train"]["seed"], 7);
        assert_eq!(snap["command"], "synth-fixtures");
    }
}
