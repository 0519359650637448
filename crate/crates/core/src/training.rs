//! Training loop, validation, best-model checkpointing and the NDJSON log.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::LabelBatch;
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::config::ModelConfig;
use crate::data::{make_batch, round_robin, DatasetSplit, DomainDataset, SampleRef};
use crate::error::{Error, Result};
use crate::metrics::{mean_iou, IouAccumulator};
use crate::model::{forward_backward, predict, LossBundle, MethodRegistry, Segmenter};
use crate::nn::{Adam, ParamStore};
use crate::tensor::Tensor;

/// One line of the training log: epoch means over that epoch's steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub losses: LossBundle,
    pub var_gamma: Option<f64>,
    pub tau: Option<f64>,
    pub mean_max_prob: Option<f64>,
    pub val_miou: Option<f64>,
}

pub struct TrainState {
    pub model: Box<dyn Segmenter>,
    pub optimizer: Adam,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &ModelConfig, registry: &MethodRegistry) -> Result<Self> {
        let model = registry.build(cfg)?;
        let mut optimizer = Adam::new(model.params(), cfg.lr);
        optimizer.clip_norm = cfg.grad_clip;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            optimizer,
            epoch: 0,
            rng,
        })
    }
}

/// Photometric augmentation applied to each training image; none by default.
pub type Augment = fn(&mut Tensor, &mut ChaCha8Rng);

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where the best-validation checkpoint is kept.
    pub checkpoint: Option<PathBuf>,
    /// NDJSON log of [`StepRecord`]s.
    pub log: Option<PathBuf>,
    pub augment: Option<Augment>,
}

pub struct TrainOutcome {
    /// Holds the best-validation parameters on return.
    pub state: TrainState,
    pub log: Vec<StepRecord>,
    pub best_epoch: usize,
    pub best_val_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub iou: Vec<f64>,
    pub miou: f64,
    pub images: usize,
}

/// Hard-quantized predictions over `refs`, in order.
pub fn predict_refs(
    model: &dyn Segmenter,
    domains: &[DomainDataset],
    refs: &[SampleRef],
    batch_size: usize,
) -> Result<Vec<LabelBatch>> {
    refs.chunks(batch_size.max(1))
        .map(|chunk| {
            let (x, _) = make_batch(domains, chunk)?;
            predict(model, &x)
        })
        .collect()
}

pub fn evaluate(
    model: &dyn Segmenter,
    domains: &[DomainDataset],
    refs: &[SampleRef],
    batch_size: usize,
) -> Result<EvalResult> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let mut acc = IouAccumulator::new(model.config().categories);
    for chunk in refs.chunks(batch_size.max(1)) {
        let (x, y) = make_batch(domains, chunk)?;
        acc.add_batch(&predict(model, &x)?, &y)?;
    }
    let iou = acc.iou();
    Ok(EvalResult {
        miou: mean_iou(&iou),
        iou,
        images: refs.len(),
    })
}

fn checkpoint_meta(
    cfg: &ModelConfig,
    split: &DatasetSplit,
    epoch: usize,
    val: Option<f64>,
) -> CheckpointMeta {
    CheckpointMeta {
        method: cfg.method.clone(),
        config: cfg.to_text(),
        epoch,
        holdout: Some(split.holdout.clone()),
        fold: Some(split.fold),
        seed: cfg.seed,
        val_miou: val,
    }
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

struct LogWriter(Option<BufWriter<File>>);

impl LogWriter {
    fn open(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self(None));
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self(Some(BufWriter::new(f))))
    }

    fn write(&mut self, rec: &StepRecord, path: Option<&Path>) -> Result<()> {
        if let (Some(w), Some(path)) = (self.0.as_mut(), path) {
            let line = serde_json::to_string(rec).map_err(|e| Error::Checkpoint(e.to_string()))?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::data(path, e.to_string()))
        })
        .collect()
}

fn grads_finite(grads: &[Tensor]) -> bool {
    grads.iter().all(Tensor::is_finite)
}

/// Train one split. Each epoch visits the training pool in a round-robin
/// domain order, then scores validation mIoU; the best-scoring parameters
/// are checkpointed and restored into the returned state.
pub fn train(
    cfg: &ModelConfig,
    registry: &MethodRegistry,
    domains: &[DomainDataset],
    split: &DatasetSplit,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let cfg = cfg.clone().validate()?;
    if split.train.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let mut state = TrainState::new(&cfg, registry)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut writer = LogWriter::open(opts.log.as_deref())?;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        let order = round_robin(&split.train, &mut state.rng);
        let mut sum = LossBundle::default();
        let mut diag = (Vec::new(), Vec::new(), Vec::new());
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = if let Some(aug) = opts.augment {
                let (x, y) = make_batch(domains, chunk)?;
                let mut t = x.tensor().clone();
                aug(&mut t, &mut state.rng);
                (crate::batch::ImageBatch::new(t)?, y)
            } else {
                make_batch(domains, chunk)?
            };
            let (out, grads) = match forward_backward(state.model.as_ref(), &x, &y, &mut state.rng)
            {
                Ok(r) => r,
                Err(Error::NonFinite { term }) => return Err(Error::Diverged { epoch, term }),
                Err(e) => return Err(e),
            };
            if !grads_finite(&grads) {
                return Err(Error::Diverged {
                    epoch,
                    term: "gradient".into(),
                });
            }
            state.optimizer.step(state.model.params_mut(), &grads);
            sum.accumulate(&out.losses);
            diag.0.push(out.var_gamma);
            diag.1.push(out.tau);
            diag.2.push(out.mean_max_prob);
            steps += 1;
        }
        state.epoch = epoch;
        let val = if split.validation.is_empty() {
            None
        } else {
            Some(
                evaluate(
                    state.model.as_ref(),
                    domains,
                    &split.validation,
                    cfg.batch_size,
                )?
                .miou,
            )
        };
        let rec = StepRecord {
            epoch,
            step: state.optimizer.steps_taken(),
            losses: sum.scaled(1.0 / steps as f64),
            var_gamma: mean_of(&diag.0),
            tau: mean_of(&diag.1),
            mean_max_prob: mean_of(&diag.2),
            val_miou: val,
        };
        writer.write(&rec, opts.log.as_deref())?;
        log.push(rec);
        // without validation data the latest epoch counts as best
        let score = val.unwrap_or(f64::INFINITY);
        if best
            .as_ref()
            .map_or(true, |(b, _, _)| score > *b || val.is_none())
        {
            best = Some((score, epoch, state.model.params().clone()));
            if let Some(path) = &opts.checkpoint {
                save_checkpoint(
                    path,
                    state.model.as_ref(),
                    &checkpoint_meta(&cfg, split, epoch, val),
                )?;
            }
        }
    }
    let (score, best_epoch, params) =
        best.ok_or_else(|| Error::InvalidArgument("epochs must be positive".into()))?;
    *state.model.params_mut() = params;
    Ok(TrainOutcome {
        state,
        log,
        best_epoch,
        best_val_miou: score.is_finite().then_some(score),
    })
}
