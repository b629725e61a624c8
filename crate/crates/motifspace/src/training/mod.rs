//! Training regimes: VICReg pretraining, CL/NECL triplet training, and
//! fine-tuning from a checkpoint.
//!
//! One step is: draw a batch from the method's sampler, forward through the
//! encoder (and, for vicreg only, the expander), compute the loss and its
//! gradients, backprop, and apply one AdamW update. The sampler owns a
//! dedicated RNG stream (`train/sampler`) whose state is checkpointed, so a
//! resumed run replays the exact batch sequence of an uninterrupted one.

pub mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::augment::ViewSet;
use crate::encoder::{EncodeCache, EncoderConfig, ExpanderConfig, Model};
use crate::error::{Error, Result};
use crate::losses::{triplet_grad, vicreg_grad, TripletConfig, VicregConfig};
use crate::nn::{AdamW, GradStore};
use crate::rng::Stream;
use crate::sampling::{sample_pair_batch, LabeledSampler, SampleMode, ViewSampler};
use crate::score::{MotifLabel, PianoRollChunk};

pub use checkpoint::{
    load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointMeta, LoadedCheckpoint,
};

/// Parameter-name prefix excluded from updates under `freeze_encoder`.
/// The input/output projections stay trainable; only the Transformer
/// stack itself is frozen.
pub const FREEZE_PREFIX: &str = "enc.layers.";

const SAMPLER_STREAM: &str = "train/sampler";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
    Scratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vicreg,
    Cl,
    Necl,
}

impl Method {
    fn sample_mode(self) -> SampleMode {
        match self {
            Method::Necl => SampleMode::Necl,
            _ => SampleMode::Cl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub method: Method,
    /// `None` picks the stage default: 1e-4 for pretrain/scratch, 1e-5
    /// for finetune.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub max_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
    pub freeze_encoder: bool,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub metrics_out: Option<PathBuf>,
    /// Extra checkpoints every N steps (`<out stem>.step<N>` files).
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            method: Method::Vicreg,
            learning_rate: None,
            batch_size: 64,
            max_steps: 1000,
            weight_decay: 0.01,
            seed: 42,
            freeze_encoder: false,
            checkpoint_in: None,
            checkpoint_out: None,
            metrics_out: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn effective_lr(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.stage {
            Stage::Finetune => 1e-5,
            _ => 1e-4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.effective_lr();
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {lr}")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if matches!(self.stage, Stage::Finetune) && self.checkpoint_in.is_none() {
            return Err(Error::Config("finetune requires checkpoint_in".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Training data, matched against the stage: view sets for pretraining,
/// labeled chunks for fine-tuning. `scratch` accepts either.
pub enum TrainData<'a> {
    Views(&'a [ViewSet]),
    Labeled { chunks: &'a [PianoRollChunk], labels: &'a [MotifLabel] },
}

pub struct TrainJob<'a> {
    pub data: TrainData<'a>,
    pub encoder: EncoderConfig,
    pub expander: ExpanderConfig,
    pub vicreg: VicregConfig,
    pub triplet: TripletConfig,
    pub train: TrainConfig,
}

/// Per-step loss components, mirroring one metrics-file row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_total: f64,
    pub loss_inv: f64,
    pub loss_var: f64,
    pub loss_cov: f64,
    pub loss_triplet: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: AdamW,
    pub global_step: u64,
    pub history: Vec<StepMetrics>,
    /// Total NECL batch items that fell back to the unfiltered pool.
    pub necl_fallbacks: usize,
}

enum Sampler<'a> {
    ViewPairs(&'a [ViewSet]),
    ViewTriplets(ViewSampler<'a>),
    LabeledPairs(LabeledSampler<'a>),
    LabeledTriplets(LabeledSampler<'a>),
}

fn build_sampler<'a>(data: &TrainData<'a>, method: Method) -> Result<Sampler<'a>> {
    match (data, method) {
        (TrainData::Views(sets), Method::Vicreg) => Ok(Sampler::ViewPairs(sets)),
        (TrainData::Views(sets), m) => {
            Ok(Sampler::ViewTriplets(ViewSampler::new(sets, m.sample_mode())?))
        }
        (TrainData::Labeled { chunks, labels }, Method::Vicreg) => {
            Ok(Sampler::LabeledPairs(LabeledSampler::new(chunks, labels, SampleMode::Cl)?))
        }
        (TrainData::Labeled { chunks, labels }, m) => {
            Ok(Sampler::LabeledTriplets(LabeledSampler::new(chunks, labels, m.sample_mode())?))
        }
    }
}

fn encode_rows(model: &Model, chunks: &[PianoRollChunk]) -> Result<(Array2<f64>, Vec<EncodeCache>)> {
    let d = model.encoder_cfg.embed_dim;
    let mut z = Array2::zeros((chunks.len(), d));
    let mut caches = Vec::with_capacity(chunks.len());
    for (i, chunk) in chunks.iter().enumerate() {
        let (zi, cache) = model.encode_forward(chunk)?;
        z.row_mut(i).assign(&zi);
        caches.push(cache);
    }
    Ok((z, caches))
}

fn backprop_rows(model: &Model, dz: &Array2<f64>, caches: &[EncodeCache], grads: &mut GradStore) {
    for (i, cache) in caches.iter().enumerate() {
        model.encode_backward(&dz.row(i).to_owned(), cache, grads);
    }
}

fn periodic_path(out: &Path, step: u64) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let name = match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}.step{step}.{ext}"),
        None => format!("{stem}.step{step}"),
    };
    out.with_file_name(name)
}

struct MetricsWriter {
    file: Option<std::io::BufWriter<std::fs::File>>,
}

impl MetricsWriter {
    fn create(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
                writeln!(f, "step,loss_total,loss_inv,loss_var,loss_cov,loss_triplet,lr")?;
                Some(f)
            }
            None => None,
        };
        Ok(Self { file })
    }

    fn row(&mut self, m: &StepMetrics, lr: f64) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                m.step, m.loss_total, m.loss_inv, m.loss_var, m.loss_cov, m.loss_triplet, lr
            )?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

/// Run up to `max_steps` optimization steps and return the trained state.
/// Writes the final checkpoint to `checkpoint_out` when set, plus periodic
/// `.step<N>` siblings under `checkpoint_every`.
pub fn run_training(job: &TrainJob) -> Result<TrainOutcome> {
    let cfg = &job.train;
    cfg.validate()?;
    job.vicreg.validate()?;
    match (&job.data, cfg.stage) {
        (TrainData::Labeled { .. }, Stage::Pretrain) => {
            return Err(Error::Config("pretrain expects view sets, not a labeled dataset".into()))
        }
        (TrainData::Views(_), Stage::Finetune) => {
            return Err(Error::Config("finetune expects a labeled dataset, not view sets".into()))
        }
        _ => {}
    }

    let lr = cfg.effective_lr();
    let (mut model, mut optimizer, mut sampler_stream, start_step) = match (&cfg.checkpoint_in,
        cfg.stage)
    {
        (None, Stage::Finetune) => unreachable!("validated above"),
        (None, _) => (
            Model::init(job.encoder.clone(), job.expander.clone(), cfg.seed)?,
            AdamW::new(lr, cfg.weight_decay),
            Stream::new(cfg.seed, SAMPLER_STREAM),
            0u64,
        ),
        (Some(path), Stage::Finetune) => {
            // Fine-tuning takes the parameters only: fresh optimizer, fresh
            // sampler stream, step counter restarted.
            let loaded = load_checkpoint(path)?;
            if loaded.meta.encoder != job.encoder || loaded.meta.expander != job.expander {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different architecture",
                    path.display()
                )));
            }
            (
                loaded.model,
                AdamW::new(lr, cfg.weight_decay),
                Stream::new(cfg.seed, SAMPLER_STREAM),
                0u64,
            )
        }
        (Some(path), stage) => {
            // Resuming an interrupted run: everything must line up.
            let loaded = load_checkpoint(path)?;
            let meta = &loaded.meta;
            if meta.encoder != job.encoder || meta.expander != job.expander {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different architecture",
                    path.display()
                )));
            }
            if meta.stage != stage || meta.method != cfg.method {
                return Err(Error::Config(format!(
                    "cannot resume a {:?}/{:?} checkpoint as {:?}/{:?}",
                    meta.stage, meta.method, stage, cfg.method
                )));
            }
            if meta.learning_rate != lr || meta.weight_decay != cfg.weight_decay {
                return Err(Error::Config(
                    "optimizer hyperparameters differ from the resumed checkpoint".into(),
                ));
            }
            let stream = Stream::restore(&meta.sampler_rng);
            let step = meta.global_step;
            (loaded.model, loaded.optimizer, stream, step)
        }
    };

    let sampler = build_sampler(&job.data, cfg.method)?;
    let mut metrics = MetricsWriter::create(cfg.metrics_out.as_deref())?;
    let mut history = Vec::new();
    let mut necl_fallbacks = 0usize;
    let skip = |name: &str| cfg.freeze_encoder && name.starts_with(FREEZE_PREFIX);

    for step in (start_step + 1)..=cfg.max_steps {
        let mut grads = GradStore::default();
        let m = match &sampler {
            Sampler::ViewPairs(sets) => {
                let batch = sample_pair_batch(sets, cfg.batch_size, &mut sampler_stream)?;
                vicreg_step(&model, &batch.anchors, &batch.positives, &job.vicreg, &mut grads, step)?
            }
            Sampler::LabeledPairs(s) => {
                let batch = s.sample_pairs(cfg.batch_size, &mut sampler_stream)?;
                vicreg_step(&model, &batch.anchors, &batch.positives, &job.vicreg, &mut grads, step)?
            }
            Sampler::ViewTriplets(s) => {
                let batch =
                    s.sample_triplets(cfg.batch_size, cfg.method.sample_mode(), &mut sampler_stream)?;
                necl_fallbacks += batch.necl_fallbacks;
                triplet_step(&model, &batch, &job.triplet, &mut grads, step)?
            }
            Sampler::LabeledTriplets(s) => {
                let batch =
                    s.sample_triplets(cfg.batch_size, cfg.method.sample_mode(), &mut sampler_stream)?;
                necl_fallbacks += batch.necl_fallbacks;
                triplet_step(&model, &batch, &job.triplet, &mut grads, step)?
            }
        };
        optimizer.step(&grads, skip, |f| model.visit_params(f));
        metrics.row(&m, lr)?;
        history.push(m);
        if step % 100 == 0 || step == cfg.max_steps {
            log::info!("step {step}/{}: loss {}", cfg.max_steps, m.loss_total);
        }

        if let (Some(every), Some(out)) = (cfg.checkpoint_every, &cfg.checkpoint_out) {
            if step % every == 0 && step != cfg.max_steps {
                let meta = make_meta(job, &model, &optimizer, &sampler_stream, step, lr);
                save_checkpoint(&periodic_path(out, step), &mut model, &optimizer, &meta)?;
            }
        }
    }

    metrics.finish()?;
    let end = cfg.max_steps.max(start_step);
    if let Some(out) = &cfg.checkpoint_out {
        let meta = make_meta(job, &model, &optimizer, &sampler_stream, end, lr);
        save_checkpoint(out, &mut model, &optimizer, &meta)?;
    }
    if necl_fallbacks > 0 {
        log::warn!("necl filter emptied the candidate pool for {necl_fallbacks} batch items");
    }
    Ok(TrainOutcome { model, optimizer, global_step: end, history, necl_fallbacks })
}

fn make_meta(
    job: &TrainJob,
    model: &Model,
    optimizer: &AdamW,
    stream: &Stream,
    step: u64,
    lr: f64,
) -> CheckpointMeta {
    CheckpointMeta {
        encoder: model.encoder_cfg.clone(),
        expander: model.expander_cfg.clone(),
        stage: job.train.stage,
        method: job.train.method,
        global_step: step,
        sampler_rng: stream.state(),
        learning_rate: lr,
        weight_decay: job.train.weight_decay,
        optimizer_t: optimizer.t,
    }
}

fn vicreg_step(
    model: &Model,
    anchors: &[PianoRollChunk],
    positives: &[PianoRollChunk],
    cfg: &VicregConfig,
    grads: &mut GradStore,
    step: u64,
) -> Result<StepMetrics> {
    let (z, caches) = encode_rows(model, anchors)?;
    let (zp, caches_p) = encode_rows(model, positives)?;
    let (ze, cache_e) = model.expand_forward(&z);
    let (zpe, cache_pe) = model.expand_forward(&zp);
    let (parts, ge, gpe) = vicreg_grad(&ze, &zpe, cfg)?;
    if !parts.total.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let dz = model.expand_backward(&ge, &cache_e, grads);
    let dzp = model.expand_backward(&gpe, &cache_pe, grads);
    backprop_rows(model, &dz, &caches, grads);
    backprop_rows(model, &dzp, &caches_p, grads);
    Ok(StepMetrics {
        step,
        loss_total: parts.total,
        loss_inv: parts.invariance,
        loss_var: parts.variance,
        loss_cov: parts.covariance,
        loss_triplet: 0.0,
    })
}

fn triplet_step(
    model: &Model,
    batch: &crate::sampling::TripletBatch,
    cfg: &TripletConfig,
    grads: &mut GradStore,
    step: u64,
) -> Result<StepMetrics> {
    // The triplet loss lives in embedding space: the expander is not part
    // of the CL/NECL path.
    let (z, cz) = encode_rows(model, &batch.anchors)?;
    let (zp, czp) = encode_rows(model, &batch.positives)?;
    let (zn, czn) = encode_rows(model, &batch.negatives)?;
    let (loss, gz, gzp, gzn) = triplet_grad(&z, &zp, &zn, cfg)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    backprop_rows(model, &gz, &cz, grads);
    backprop_rows(model, &gzp, &czp, grads);
    backprop_rows(model, &gzn, &czn, grads);
    Ok(StepMetrics {
        step,
        loss_total: loss,
        loss_inv: 0.0,
        loss_var: 0.0,
        loss_cov: 0.0,
        loss_triplet: loss,
    })
}
