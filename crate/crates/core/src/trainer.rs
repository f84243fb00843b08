//! Configuration, learning-rate schedule, optimization loop and checkpoints.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    augment_train, generate_synthetic, load_manifest, AugmentConfig, DatasetManifest, Modality, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalProtocol, EvalReport, EvalSource};
use crate::head::{identity_loss, BnMode};
use crate::losses::{ranking_objective, EmbeddingSet, LossTerms, MarginConfig, Reduction};
use crate::model::{images_to_tensor, prepare_input, ModelConfig, ReidModel};
use crate::optim::{Sgd, SgdConfig};
use crate::sampler::{BatchSampler, MiniBatch};
use crate::spectral::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Manifest { path: PathBuf },
    Synthetic(SyntheticSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<DatasetManifest> {
        match self {
            DatasetSource::Manifest { path } => load_manifest(path),
            DatasetSource::Synthetic(spec) => generate_synthetic(spec),
        }
    }
}

/// Piecewise schedule: linear warmup from `start_lr` (first epoch) to
/// `peak_lr` (last warmup epoch), `peak_lr` until `peak_until`, `mid_lr`
/// until `mid_until`, then `final_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub start_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub peak_until: usize,
    pub mid_lr: f64,
    pub mid_until: usize,
    pub final_lr: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            start_lr: 0.01,
            peak_lr: 0.1,
            warmup_epochs: 10,
            peak_until: 20,
            mid_lr: 0.01,
            mid_until: 50,
            final_lr: 0.001,
        }
    }
}

impl LrSchedule {
    /// Same rates with every boundary multiplied by `factor` (rounded).
    pub fn stretched(&self, factor: f64) -> Self {
        let scale = |e: usize| ((e as f64 * factor).round() as usize).max(1);
        Self {
            warmup_epochs: scale(self.warmup_epochs),
            peak_until: scale(self.peak_until),
            mid_until: scale(self.mid_until),
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.start_lr, self.peak_lr, self.mid_lr, self.final_lr];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("learning rates must be finite and positive".into()));
        }
        if self.warmup_epochs == 0 || self.warmup_epochs > self.peak_until || self.peak_until > self.mid_until {
            return Err(Error::Config(
                "schedule boundaries must satisfy 1 <= warmup <= peak_until <= mid_until".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize, total_epochs: usize) -> Result<f64> {
        if epoch >= total_epochs {
            return Err(Error::Config(format!(
                "epoch {epoch} outside a {total_epochs}-epoch run"
            )));
        }
        Ok(if epoch < self.warmup_epochs {
            if self.warmup_epochs == 1 {
                self.peak_lr
            } else {
                let t = epoch as f64 / (self.warmup_epochs - 1) as f64;
                (1.0 - t) * self.start_lr + t * self.peak_lr
            }
        } else if epoch < self.peak_until {
            self.peak_lr
        } else if epoch < self.mid_until {
            self.mid_lr
        } else {
            self.final_lr
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub margins: MarginConfig,
    pub losses: LossTerms,
    /// Identities per batch (N).
    pub batch_identities: usize,
    /// Images per identity per modality (K).
    pub images_per_identity: usize,
    pub epochs: usize,
    /// Overrides the sampler's batches-per-epoch.
    pub steps_per_epoch: Option<usize>,
    pub schedule: LrSchedule,
    pub optimizer: SgdConfig,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Metrics and checkpoints go here; nothing is written when unset.
    pub output_dir: Option<PathBuf>,
    /// Write a numbered checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Evaluate both directions every this many epochs (0 disables).
    pub eval_every: usize,
    pub eval_source: EvalSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            model: ModelConfig::default(),
            margins: MarginConfig::default(),
            losses: LossTerms::default(),
            batch_identities: 8,
            images_per_identity: 2,
            epochs: 80,
            steps_per_epoch: None,
            schedule: LrSchedule::default(),
            optimizer: SgdConfig::default(),
            seed: 0,
            augment: AugmentConfig::default(),
            output_dir: None,
            checkpoint_every: 0,
            eval_every: 0,
            eval_source: EvalSource::Test,
        }
    }
}

impl TrainConfig {
    /// Tiny backbone on the 8-identity synthetic set, schedule stretched to
    /// 200 epochs. Ranking terms are averaged over anchors; summed terms at the
    /// peak rate collapse the tiny extractor.
    pub fn toy() -> Self {
        Self {
            margins: MarginConfig {
                reduction: Reduction::Mean,
                ..MarginConfig::default()
            },
            dataset: DatasetSource::Synthetic(SyntheticSpec {
                num_identities: 8,
                images_per_identity_per_modality: 8,
                image_size: (32, 16),
                ..SyntheticSpec::default()
            }),
            epochs: 200,
            schedule: LrSchedule::default().stretched(2.5),
            augment: AugmentConfig {
                pad: 2,
                ..AugmentConfig::default()
            },
            eval_source: EvalSource::Train,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps per epoch must be at least 1".into()));
        }
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.margins.validate()?;
        self.model.backbone.validate()?;
        BatchSampler::new(self.batch_identities, self.images_per_identity)?;
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Learning rate of `epoch` under the configured schedule.
pub fn lr_at_epoch(epoch: usize, config: &TrainConfig) -> Result<f64> {
    config.schedule.lr_at_epoch(epoch, config.epochs)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub identity: f64,
    pub cross: f64,
    pub intra: f64,
    pub inter: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub direction: String,
    pub rank1: f64,
    pub map: f64,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            direction: r.direction.clone(),
            rank1: r.rank1(),
            map: r.map,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Per-step losses averaged over the epoch.
    pub mean: StepLosses,
    pub eval: Vec<EvalSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Number of completed epochs.
    pub epoch: usize,
    pub num_classes: usize,
    pub history: Vec<EpochRecord>,
}

const PARAMS_FILE: &str = "params.safetensors";
const OPTIMIZER_FILE: &str = "optimizer.safetensors";
const META_FILE: &str = "checkpoint.json";
const CONFIG_FILE: &str = "config.json";
const METRICS_FILE: &str = "metrics.jsonl";

/// Reads the config echo and metadata of a checkpoint directory and restores the model.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(TrainConfig, ReidModel, CheckpointMeta)> {
    let dir = dir.as_ref();
    let config = TrainConfig::from_json_file(dir.join(CONFIG_FILE))?;
    let meta_path = dir.join(META_FILE);
    let meta: CheckpointMeta =
        serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let model = ReidModel::new(config.model, meta.num_classes, config.seed)?;
    model.load_params(dir.join(PARAMS_FILE))?;
    Ok((config, model, meta))
}

/// Runs `evaluate` in both query directions.
pub fn evaluate_both(model: &ReidModel, manifest: &DatasetManifest, source: EvalSource) -> Result<[EvalReport; 2]> {
    Ok([
        evaluate(
            model,
            manifest,
            &EvalProtocol::visible_to_infrared().with_source(source),
        )?,
        evaluate(
            model,
            manifest,
            &EvalProtocol::infrared_to_visible().with_source(source),
        )?,
    ])
}

pub struct Trainer {
    config: TrainConfig,
    manifest: DatasetManifest,
    model: ReidModel,
    optimizer: Sgd,
    sampler: BatchSampler,
    history: Vec<EpochRecord>,
    epoch: usize,
    cache: HashMap<usize, Image>,
    metrics: Option<BufWriter<File>>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("epoch", &self.epoch)
            .field("model", &self.model)
            .finish()
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let manifest = config.dataset.load()?;
        Self::with_manifest(config, manifest)
    }

    pub fn with_manifest(config: TrainConfig, manifest: DatasetManifest) -> Result<Self> {
        config.validate()?;
        let model = ReidModel::new(config.model, manifest.num_identities(), config.seed)?;
        let metrics = match &config.output_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                config.write_json(dir.join(CONFIG_FILE))?;
                let path = dir.join(METRICS_FILE);
                Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
            }
            None => None,
        };
        Ok(Self {
            sampler: BatchSampler::new(config.batch_identities, config.images_per_identity)?,
            optimizer: Sgd::new(config.optimizer)?,
            config,
            manifest,
            model,
            history: Vec::new(),
            epoch: 0,
            cache: HashMap::new(),
            metrics,
        })
    }

    /// Continues from a checkpoint directory. Metrics are appended to the
    /// configured output directory.
    pub fn resume(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (config, model, meta) = load_checkpoint(dir)?;
        let manifest = config.dataset.load()?;
        if manifest.num_identities() != meta.num_classes {
            return Err(Error::Config(format!(
                "checkpoint has {} classes but the dataset has {} train identities",
                meta.num_classes,
                manifest.num_identities()
            )));
        }
        let mut optimizer = Sgd::new(config.optimizer)?;
        optimizer.load(dir.join(OPTIMIZER_FILE), model.params())?;
        let metrics = match &config.output_dir {
            Some(out) => {
                fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                let path = out.join(METRICS_FILE);
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some(BufWriter::new(file))
            }
            None => None,
        };
        Ok(Self {
            sampler: BatchSampler::new(config.batch_identities, config.images_per_identity)?,
            config,
            manifest,
            model,
            optimizer,
            history: meta.history,
            epoch: meta.epoch,
            cache: HashMap::new(),
            metrics,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn model(&self) -> &ReidModel {
        &self.model
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.config
            .steps_per_epoch
            .unwrap_or_else(|| self.sampler.batches_per_epoch(&self.manifest))
    }

    /// Resized and modality-converted input, computed once per record.
    fn prepared(&mut self, index: usize, modality: Modality) -> Result<Image> {
        if let Some(img) = self.cache.get(&index) {
            return Ok(img.clone());
        }
        let (h, w) = self.config.model.input_size;
        let img = self.manifest.load_image(index)?.resized(h, w)?;
        let img = prepare_input(&img, modality, self.config.model.visible_input)?;
        self.cache.insert(index, img.clone());
        Ok(img)
    }

    fn batch_tensor(&mut self, indices: &[usize], modality: Modality, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let images = indices
            .iter()
            .map(|&i| {
                let img = self.prepared(i, modality)?;
                augment_train(&img, &self.config.augment, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        images_to_tensor(&images, self.model.device())
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &MiniBatch, lr: f64, rng: &mut ChaCha8Rng) -> Result<StepLosses> {
        let gray = self.batch_tensor(&batch.visible, Modality::Visible, rng)?;
        let infrared = self.batch_tensor(&batch.infrared, Modality::Infrared, rng)?;
        let out = self.model.forward_pair(&gray, &infrared, BnMode::Train)?;
        let n = batch.len();
        let terms = self.config.losses;

        let mut losses = StepLosses::default();
        let mut surrogate: Option<Tensor> = None;
        if terms.any_ranking() {
            let pre_bn = out.pre_bn.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let dim = pre_bn.len() / (2 * n);
            let (g, t) = pre_bn.split_at(n * dim);
            let gray_set = EmbeddingSet::new(g.to_vec(), dim, batch.labels.clone())?;
            let ir_set = EmbeddingSet::new(t.to_vec(), dim, batch.labels.clone())?;
            let ranking = ranking_objective(&gray_set, &ir_set, &self.config.margins, terms)?;
            losses.cross = ranking.cross;
            losses.intra = ranking.intra;
            losses.inter = ranking.inter;
            losses.total += ranking.combined.value;
            let grad: Vec<f32> = ranking
                .combined
                .grad_gray
                .iter()
                .chain(&ranking.combined.grad_infrared)
                .map(|&v| v as f32)
                .collect();
            let grad = Tensor::from_vec(grad, out.pre_bn.dims(), self.model.device())?;
            surrogate = Some((&out.pre_bn * &grad)?.sum_all()?);
        }
        if terms.identity {
            let classes = self.model.num_classes();
            let logits = out.logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let labels: Vec<usize> = batch.labels.iter().chain(&batch.labels).copied().collect();
            let (value, grad) = identity_loss(&logits, classes, &labels, n)?;
            losses.identity = value;
            losses.total += value;
            let grad: Vec<f32> = grad.into_iter().map(|v| v as f32).collect();
            let grad = Tensor::from_vec(grad, out.logits.dims(), self.model.device())?;
            let term = (&out.logits * &grad)?.sum_all()?;
            surrogate = Some(match surrogate {
                Some(s) => (s + term)?,
                None => term,
            });
        }
        if !losses.total.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                step: 0,
                detail: format!("non-finite loss {losses:?}"),
            });
        }
        let surrogate = surrogate.ok_or_else(|| Error::Config("no loss term enabled".into()))?;
        let grads = surrogate.backward()?;
        self.optimizer.step(self.model.params(), &grads, lr)?;
        Ok(losses)
    }

    fn log_json(&mut self, value: serde_json::Value) -> Result<()> {
        if let Some(w) = &mut self.metrics {
            serde_json::to_writer(&mut *w, &value)?;
            w.write_all(b"\n").map_err(|e| Error::io(METRICS_FILE, e))?;
        }
        Ok(())
    }

    /// Runs the next epoch; every epoch draws from its own seeded stream so a
    /// resumed run replays exactly.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let lr = lr_at_epoch(epoch, &self.config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let steps = self.steps_per_epoch();
        let mut sum = StepLosses::default();
        for step in 0..steps {
            let batch = self.sampler.sample(&self.manifest, &mut rng)?;
            let losses = self.train_step(&batch, lr, &mut rng).map_err(|e| match e {
                Error::Diverged { detail, .. } => Error::Diverged { epoch, step, detail },
                other => other,
            })?;
            self.log_json(serde_json::json!({
                "kind": "step", "epoch": epoch, "step": step, "lr": lr, "losses": losses,
            }))?;
            sum.identity += losses.identity;
            sum.cross += losses.cross;
            sum.intra += losses.intra;
            sum.inter += losses.inter;
            sum.total += losses.total;
        }
        let k = steps as f64;
        let mean = StepLosses {
            identity: sum.identity / k,
            cross: sum.cross / k,
            intra: sum.intra / k,
            inter: sum.inter / k,
            total: sum.total / k,
        };
        self.epoch += 1;
        let eval_due = self.config.eval_every > 0
            && (self.epoch.is_multiple_of(self.config.eval_every) || self.epoch == self.config.epochs);
        let eval = if eval_due {
            evaluate_both(&self.model, &self.manifest, self.config.eval_source)?
                .iter()
                .map(EvalSummary::from)
                .collect()
        } else {
            Vec::new()
        };
        let record = EpochRecord {
            epoch,
            lr,
            steps,
            mean,
            eval,
        };
        info!(
            "epoch {epoch} lr {lr:.4} loss {:.4} (id {:.4} cross {:.4} intra {:.4} inter {:.4})",
            mean.total, mean.identity, mean.cross, mean.intra, mean.inter
        );
        for e in &record.eval {
            info!("  {} rank-1 {:.4} mAP {:.4}", e.direction, e.rank1, e.map);
        }
        self.log_json(serde_json::json!({ "kind": "epoch", "record": record }))?;
        self.history.push(record.clone());
        Ok(record)
    }

    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save_params(dir.join(PARAMS_FILE))?;
        self.optimizer.save(dir.join(OPTIMIZER_FILE))?;
        self.config.write_json(dir.join(CONFIG_FILE))?;
        let meta = CheckpointMeta {
            epoch: self.epoch,
            num_classes: self.model.num_classes(),
            history: self.history.clone(),
        };
        let path = dir.join(META_FILE);
        fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    /// Trains to the configured epoch count, writing checkpoints into the
    /// output directory (numbered ones at the interval, `checkpoint` at the end).
    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch()?;
            if let Some(out) = self.config.output_dir.clone() {
                let every = self.config.checkpoint_every;
                if every > 0 && self.epoch.is_multiple_of(every) {
                    self.save_checkpoint(out.join(format!("checkpoint-epoch{:04}", self.epoch)))?;
                }
            }
        }
        if let Some(out) = self.config.output_dir.clone() {
            self.save_checkpoint(out.join("checkpoint"))?;
        }
        if let Some(w) = &mut self.metrics {
            w.flush().map_err(|e| Error::io(METRICS_FILE, e))?;
        }
        Ok(())
    }
}

/// Builds a trainer and runs it to completion.
pub fn train(config: TrainConfig) -> Result<Trainer> {
    let mut trainer = Trainer::new(config)?;
    trainer.run()?;
    Ok(trainer)
}
