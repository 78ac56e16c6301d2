//! Two-stage training: Adam updates, the learning-rate schedule, CSV logs,
//! checkpoints that resume exactly, and selection among independently seeded
//! runs.

use std::fs::{self, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{trainable_in, ImageNoise, LossBreakdown, Model, ModelConfig, ModelError, Stage};
use crate::nn::{counter_rng, GradBuffer, NnError, ParamEntry, ParameterStore};
use crate::render::{CtfParams, RenderConfig, RenderError, Renderer};
use crate::simulate::{DatasetMeta, ParticleDataset};
use crate::structure::BaseStructure;

pub const CHECKPOINT_VERSION: u32 = 1;

// counter-rng stream tags
const STREAM_INIT: u64 = 0x1000;
const STREAM_SELECT: u64 = 0x2000;
const SHUFFLE_SLOT: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error("data format: {0}")]
    DataFormat(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NumericalOverflow(m) => TrainError::NumericalOverflow(m),
            other => TrainError::Model(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    /// Fraction of stage 1 after which the learning rate is halved.
    pub lr_halving_fraction: f64,
    pub adam: AdamConfig,
    pub seeds: Vec<u64>,
    /// Save a rolling checkpoint every this many epochs (0: only at stage end).
    pub checkpoint_every: usize,
    /// Every `heldout_every`-th particle is held out for model selection.
    pub heldout_every: usize,
    /// Abort when the batch-mean backbone loss exceeds this value (Å²).
    pub divergence_backbone: f64,
    /// Number of held-out images scored by model selection (0: all).
    pub selection_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            stage1_epochs: 200,
            stage2_epochs: 100,
            learning_rate: 3e-4,
            lr_halving_fraction: 0.5,
            adam: AdamConfig::default(),
            seeds: vec![0, 1, 2],
            checkpoint_every: 10,
            heldout_every: 20,
            divergence_backbone: 10.0,
            selection_images: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.lr_halving_fraction) {
            return bad("lr_halving_fraction must lie in [0, 1]");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.heldout_every < 2 {
            return bad("heldout_every must be at least 2");
        }
        if !(self.divergence_backbone > 0.0) {
            return bad("divergence_backbone must be positive");
        }
        Ok(())
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::PoseOnly => self.stage1_epochs,
            Stage::Full => self.stage2_epochs,
        }
    }

    /// Learning rate for an epoch of a stage.
    pub fn lr(&self, stage: Stage, epoch: usize) -> f64 {
        match stage {
            Stage::PoseOnly if epoch as f64 >= self.lr_halving_fraction * self.stage1_epochs as f64 => {
                0.5 * self.learning_rate
            }
            _ => self.learning_rate,
        }
    }
}

/// One Adam update with bias correction on every parameter accepted by
/// `trainable`. Each tensor keeps its own step count, so a tensor frozen
/// until now starts with fresh moments.
pub fn adam_step(
    store: &mut ParameterStore,
    grads: &GradBuffer,
    lr: f64,
    cfg: &AdamConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<(), TrainError> {
    if grads.grads.len() != store.len() {
        let name = store
            .params()
            .get(grads.grads.len())
            .map_or_else(|| "<extra>".to_string(), |p| p.name.clone());
        return Err(TrainError::MissingGradient(name));
    }
    for (p, g) in store.params().iter().zip(&grads.grads) {
        if g.len() != p.value.len() {
            return Err(TrainError::MissingGradient(p.name.clone()));
        }
        if trainable(&p.name) && g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NumericalOverflow(format!("non-finite gradient in {}", p.name)));
        }
    }
    let AdamConfig { beta1, beta2, eps } = *cfg;
    for (p, g) in store.params_mut().iter_mut().zip(&grads.grads) {
        if !trainable(&p.name) {
            continue;
        }
        p.step += 1;
        let c1 = 1.0 - beta1.powi(p.step as i32);
        let c2 = 1.0 - beta2.powi(p.step as i32);
        for i in 0..p.value.len() {
            p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g[i];
            p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g[i] * g[i];
            let mh = p.m[i] / c1;
            let vh = p.v[i] / c2;
            p.value[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Splits particle indices into training and held-out sets.
pub fn split_indices(n: usize, heldout_every: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| (i + 1) % heldout_every != 0)
}

/// Copies `meta`'s image geometry and noise level into a model config.
pub fn configure_for_dataset(cfg: &mut ModelConfig, meta: &DatasetMeta, n_residues: usize) {
    cfg.image_height = meta.render.height;
    cfg.image_width = meta.render.width;
    cfg.n_residues = n_residues;
    if meta.noise_sigma > 0.0 {
        cfg.image_sigma = meta.noise_sigma;
    }
}

/// Where a run stands: the next batch to process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    pub epoch: usize,
    pub batch: usize,
    /// Optimizer steps taken so far, over both stages.
    pub step: u64,
}

impl Progress {
    pub fn start() -> Self {
        Self {
            stage: Stage::PoseOnly,
            epoch: 0,
            batch: 0,
            step: 0,
        }
    }
}

/// Everything needed to rebuild a model and continue training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub model: ModelConfig,
    pub render: RenderConfig,
    pub ctf: Option<CtfParams>,
    pub base: BaseStructure,
    pub train: TrainConfig,
    pub seed: u64,
    pub progress: Progress,
    pub params: Vec<ParamEntry>,
    /// File name of the parameter blob, relative to the manifest.
    pub blob: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub store: ParameterStore,
}

impl Checkpoint {
    /// Writes `<stem>.json` and `<stem>.bin`; returns the manifest path.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<PathBuf, TrainError> {
        let stem = stem.as_ref();
        if let Some(dir) = stem.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let json = stem.with_extension("json");
        let bin = stem.with_extension("bin");
        let (bytes, entries) = self.store.to_blob();
        let mut manifest = self.manifest.clone();
        manifest.params = entries;
        manifest.blob = bin.file_name().expect("file stem").to_string_lossy().into_owned();
        // blob first, so a manifest on disk always points at complete data
        write_atomic(&bin, &bytes)?;
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| TrainError::DataFormat(e.to_string()))?;
        write_atomic(&json, text.as_bytes())?;
        Ok(json)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| TrainError::DataFormat(format!("{}: {e}", path.display())))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(TrainError::DataFormat(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                manifest.version
            )));
        }
        let blob = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
        let bytes = fs::read(&blob)?;
        let store = ParameterStore::from_blob(&bytes, &manifest.params)?;
        Ok(Self { manifest, store })
    }

    pub fn renderer(&self) -> Result<Renderer, TrainError> {
        Ok(Renderer::new(self.manifest.render, self.manifest.ctf.as_ref())?)
    }

    pub fn model(&self) -> Result<Model, TrainError> {
        let m = &self.manifest;
        Ok(Model::attach(m.model.clone(), Arc::new(m.base.clone()), self.renderer()?, &self.store)?)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

pub const LOG_HEADER: &str = "step,lr,total,reconstruction,kl_conf,kl_pose,centering,backbone";

/// One optimizer step's record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.lr, l.total, l.reconstruction, l.kl_conf, l.kl_pose, l.centering, l.backbone
        )
    }
}

/// Appends step records to a CSV file, writing the header for new files.
pub struct TrainLog {
    out: BufWriter<fs::File>,
}

impl TrainLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(f);
        if fresh {
            writeln!(out, "{LOG_HEADER}")?;
        }
        Ok(Self { out })
    }

    pub fn record(&mut self, r: &StepRecord) -> Result<(), TrainError> {
        writeln!(self.out, "{}", r.csv_line())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        self.out.flush()?;
        Ok(())
    }
}

/// File stems used by a seeded run inside an output directory.
pub fn checkpoint_stem(dir: &Path, seed: u64, stage: Stage, tag: &str) -> PathBuf {
    dir.join(format!("seed{seed}_{}_{tag}", stage_name(stage)))
}

pub fn log_path(dir: &Path, seed: u64, stage: Stage) -> PathBuf {
    dir.join(format!("train_seed{seed}_{}.csv", stage_name(stage)))
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::PoseOnly => "stage1",
        Stage::Full => "stage2",
    }
}

fn stage_tag(stage: Stage) -> u64 {
    match stage {
        Stage::PoseOnly => 1,
        Stage::Full => 2,
    }
}

/// Training state for one seed.
pub struct Trainer<'a> {
    data: &'a ParticleDataset,
    pub model: Model,
    pub store: ParameterStore,
    pub ctf: Option<CtfParams>,
    pub cfg: TrainConfig,
    pub seed: u64,
    pub progress: Progress,
    train_idx: Vec<usize>,
    order: Option<(Stage, usize, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    /// Fresh parameters drawn from stream `(seed, INIT)`.
    pub fn new(data: &'a ParticleDataset, model_cfg: ModelConfig, cfg: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        cfg.validate()?;
        check_dataset(data, &model_cfg)?;
        let renderer = Renderer::new(data.meta.render, Some(&data.meta.ctf))?;
        let mut store = ParameterStore::new();
        let model = Model::new(model_cfg, data.base.clone(), renderer, &mut store, &mut counter_rng(seed, STREAM_INIT, 0, 0))?;
        let (train_idx, _) = split_indices(data.len(), cfg.heldout_every);
        Ok(Self {
            data,
            model,
            store,
            ctf: Some(data.meta.ctf),
            cfg,
            seed,
            progress: Progress::start(),
            train_idx,
            order: None,
        })
    }

    /// Continues from a checkpoint. The stored training configuration is
    /// used unless `cfg` overrides it (e.g. more epochs).
    pub fn resume(data: &'a ParticleDataset, ckpt: Checkpoint, cfg: Option<TrainConfig>) -> Result<Self, TrainError> {
        let cfg = cfg.unwrap_or_else(|| ckpt.manifest.train.clone());
        cfg.validate()?;
        check_dataset(data, &ckpt.manifest.model)?;
        let model = ckpt.model()?;
        let (train_idx, _) = split_indices(data.len(), cfg.heldout_every);
        Ok(Self {
            data,
            model,
            ctf: ckpt.manifest.ctf,
            seed: ckpt.manifest.seed,
            progress: ckpt.manifest.progress,
            store: ckpt.store,
            cfg,
            train_idx,
            order: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            manifest: CheckpointManifest {
                version: CHECKPOINT_VERSION,
                model: self.model.config.clone(),
                render: self.model.renderer.config,
                ctf: self.ctf,
                base: self.model.base.as_ref().clone(),
                train: self.cfg.clone(),
                seed: self.seed,
                progress: self.progress,
                params: Vec::new(),
                blob: String::new(),
            },
            store: self.store.clone(),
        }
    }

    pub fn n_batches(&self) -> usize {
        self.train_idx.len().div_ceil(self.cfg.batch_size)
    }

    /// Whether the current stage has epochs left.
    pub fn stage_done(&self) -> bool {
        self.progress.epoch >= self.cfg.epochs(self.progress.stage)
    }

    /// Moves from a finished stage 1 to the start of stage 2.
    pub fn advance_stage(&mut self) {
        if self.progress.stage == Stage::PoseOnly {
            self.progress.stage = Stage::Full;
            self.progress.epoch = 0;
            self.progress.batch = 0;
        }
    }

    fn epoch_order(&mut self) -> &[usize] {
        let key = (self.progress.stage, self.progress.epoch);
        let stale = !matches!(&self.order, Some((s, e, _)) if (*s, *e) == key);
        if stale {
            let mut idx = self.train_idx.clone();
            let tag = stage_tag(key.0) << 32 | key.1 as u64;
            idx.shuffle(&mut counter_rng(self.seed, tag, SHUFFLE_SLOT, 0));
            self.order = Some((key.0, key.1, idx));
        }
        &self.order.as_ref().expect("just set").2
    }

    /// Runs the next mini-batch. On error the parameters are left as they
    /// were before the step.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        if self.train_idx.is_empty() {
            return Err(TrainError::DataFormat("no training images".into()));
        }
        let Progress { stage, epoch, batch, step } = self.progress;
        let bs = self.cfg.batch_size;
        let batch_idx: Vec<usize> = {
            let order = self.epoch_order();
            order[batch * bs..((batch + 1) * bs).min(order.len())].to_vec()
        };
        let tag = stage_tag(stage) << 32 | epoch as u64;
        let images: Vec<Vec<f64>> = batch_idx.iter().map(|&i| self.data.stack.image_f64(i)).collect();
        let noise: Vec<ImageNoise> = batch_idx
            .iter()
            .map(|&i| ImageNoise::draw(&self.model.config, stage, &mut counter_rng(self.seed, tag, i as u64, 0)))
            .collect();
        let refs: Vec<&[f64]> = images.iter().map(|v| v.as_slice()).collect();

        let mut grads = self.store.grad_buffer();
        let losses = self.model.objective_batch(&self.store, &refs, &noise, stage, Some(&mut grads))?;
        let loss = LossBreakdown::mean(&losses);
        if !loss.total.is_finite() {
            return Err(TrainError::NumericalOverflow(format!("non-finite loss at step {step}")));
        }
        if loss.backbone > self.cfg.divergence_backbone {
            return Err(TrainError::Diverged {
                step,
                reason: format!(
                    "backbone loss {} exceeds threshold {}",
                    loss.backbone, self.cfg.divergence_backbone
                ),
            });
        }
        let lr = self.cfg.lr(stage, epoch);
        adam_step(&mut self.store, &grads, lr, &self.cfg.adam, |name| trainable_in(name, stage))?;

        self.progress.step += 1;
        self.progress.batch += 1;
        if self.progress.batch >= self.n_batches() {
            self.progress.batch = 0;
            self.progress.epoch += 1;
        }
        Ok(StepRecord {
            step,
            stage,
            epoch,
            lr,
            loss,
        })
    }

    /// Trains the current stage to completion, logging every step and
    /// checkpointing into `out_dir`. On failure the last good state is saved
    /// under the `failed` tag before the error is returned.
    pub fn run_stage(&mut self, out_dir: &Path, mut on_step: impl FnMut(&StepRecord)) -> Result<PathBuf, TrainError> {
        fs::create_dir_all(out_dir)?;
        let stage = self.progress.stage;
        let mut log = TrainLog::open(log_path(out_dir, self.seed, stage))?;
        while !self.stage_done() {
            let rec = match self.step() {
                Ok(r) => r,
                Err(e) => {
                    log.flush()?;
                    self.checkpoint().save(checkpoint_stem(out_dir, self.seed, stage, "failed"))?;
                    return Err(e);
                }
            };
            log.record(&rec)?;
            on_step(&rec);
            let every = self.cfg.checkpoint_every;
            if self.progress.batch == 0 && every > 0 && self.progress.epoch % every == 0 && !self.stage_done() {
                log.flush()?;
                self.checkpoint().save(checkpoint_stem(out_dir, self.seed, stage, "latest"))?;
            }
        }
        log.flush()?;
        self.checkpoint().save(checkpoint_stem(out_dir, self.seed, stage, "final"))
    }
}

fn check_dataset(data: &ParticleDataset, cfg: &ModelConfig) -> Result<(), TrainError> {
    let r = &data.meta.render;
    if r.height != cfg.image_height || r.width != cfg.image_width {
        return Err(TrainError::DataFormat(format!(
            "dataset images are {}x{}, model expects {}x{}",
            r.height, r.width, cfg.image_height, cfg.image_width
        )));
    }
    if data.base.n_residues() != cfg.n_residues {
        return Err(TrainError::DataFormat(format!(
            "base structure has {} residues, model expects {}",
            data.base.n_residues(),
            cfg.n_residues
        )));
    }
    Ok(())
}

/// Mean held-out log-mean-exp reconstruction score (higher is better) with
/// stage-2 sample counts and a fixed noise stream.
pub fn heldout_score(ckpt: &Checkpoint, data: &ParticleDataset, heldout_every: usize, max_images: usize) -> Result<f64, TrainError> {
    let model = ckpt.model()?;
    let (_, mut held) = split_indices(data.len(), heldout_every);
    if max_images > 0 {
        held.truncate(max_images);
    }
    if held.is_empty() {
        return Err(TrainError::DataFormat("empty held-out shard".into()));
    }
    let mut total = 0.0;
    for chunk in held.chunks(64) {
        let images: Vec<Vec<f64>> = chunk.iter().map(|&i| data.stack.image_f64(i)).collect();
        let refs: Vec<&[f64]> = images.iter().map(|v| v.as_slice()).collect();
        let noise: Vec<ImageNoise> = chunk
            .iter()
            .map(|&i| ImageNoise::draw(&model.config, Stage::Full, &mut counter_rng(0, STREAM_SELECT, i as u64, 0)))
            .collect();
        total += model.log_likelihood_score(&ckpt.store, &refs, &noise, Stage::Full)?.iter().sum::<f64>();
    }
    Ok(total / held.len() as f64)
}

/// Index of the checkpoint with the highest held-out score; earlier entries
/// win ties.
pub fn select_best(
    checkpoints: &[Checkpoint],
    data: &ParticleDataset,
    heldout_every: usize,
    max_images: usize,
) -> Result<(usize, Vec<f64>), TrainError> {
    if checkpoints.is_empty() {
        return Err(TrainError::InvalidConfig("no checkpoints to select from".into()));
    }
    let scores = checkpoints
        .iter()
        .map(|c| heldout_score(c, data, heldout_every, max_images))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

/// Result of training every configured seed.
#[derive(Debug, Clone)]
pub struct MultiSeedOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub scores: Vec<f64>,
    pub best: usize,
    pub best_path: PathBuf,
}

/// Runs both stages for every seed in `cfg.seeds`, then copies the best
/// final checkpoint to `out_dir/best`.
pub fn train_all_seeds(
    data: &ParticleDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    mut on_step: impl FnMut(u64, &StepRecord),
) -> Result<MultiSeedOutcome, TrainError> {
    let mut paths = Vec::new();
    for &seed in &cfg.seeds {
        let mut t = Trainer::new(data, model_cfg.clone(), cfg.clone(), seed)?;
        t.run_stage(out_dir, |r| on_step(seed, r))?;
        t.advance_stage();
        paths.push(t.run_stage(out_dir, |r| on_step(seed, r))?);
    }
    let ckpts = paths.iter().map(Checkpoint::load).collect::<Result<Vec<_>, _>>()?;
    let (best, scores) = select_best(&ckpts, data, cfg.heldout_every, cfg.selection_images)?;
    let best_path = ckpts[best].save(out_dir.join("best"))?;
    Ok(MultiSeedOutcome {
        checkpoints: paths,
        scores,
        best,
        best_path,
    })
}
