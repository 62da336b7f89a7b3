//! Optimization loop: Adam on the class-average Dice loss with early stopping
//! on validation loss, optional mixed precision and timing instrumentation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use volseg_nn::precision::check_capability;
use volseg_nn::{checkpoint, Adam, Device, Graph, LossScaler, Mode, ModelHandle, Precision, Tensor};

use crate::error::{Error, Result};
use crate::preprocess::{invert_to_original, run_pipeline, PreprocessConfig};
use crate::sampling::{augment, AugmentPolicy, Slab};
use crate::volcore::{Geometry, Mask3D, ProbMap3D, Volume3D};

/// Minimum decrease of validation loss that counts as an improvement.
pub const MIN_DELTA: f64 = 1e-5;
/// Running-statistics momentum of batch normalization.
pub const NORM_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub patience: usize,
    pub precision: Precision,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 4,
            patience: 30,
            precision: Precision::Full,
            max_epochs: 300,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Slab-trained U-Net: batch 8 in full precision.
    pub fn unet() -> Self {
        Self {
            batch: 8,
            ..Self::default()
        }
    }

    /// Whole-volume PLS-Net: batch 4 in mixed precision.
    pub fn plsnet() -> Self {
        Self {
            batch: 4,
            precision: Precision::Mixed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            errs.push("train.batch must be >= 1".into());
        }
        if self.patience == 0 {
            errs.push("train.patience must be >= 1".into());
        }
        if self.max_epochs == 0 {
            errs.push("train.max_epochs must be >= 1".into());
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainingLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<EpochRecord>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
    }
}

/// Outcome of observing one validation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b.0)
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopSignal {
        match self.best {
            Some((_, b)) if !(val_loss < b - MIN_DELTA) => {}
            _ => {
                self.best = Some((epoch, val_loss));
                return StopSignal::Improved;
            }
        }
        let best = self.best.map_or(epoch, |b| b.0);
        if epoch - best >= self.patience {
            StopSignal::Stop
        } else {
            StopSignal::Continue
        }
    }
}

/// Runs epochs `1..=max_epochs` until early stopping, snapshotting `state` at
/// each improvement and restoring the best snapshot before returning.
///
/// `epoch_fn` trains one epoch and returns `(train_loss, val_loss)`;
/// `on_improve` is called with the new best state (checkpointing).
pub fn run_training_loop<S: Clone>(
    state: &mut S,
    max_epochs: usize,
    patience: usize,
    mut epoch_fn: impl FnMut(&mut S, usize) -> Result<(f64, f64)>,
    mut on_improve: impl FnMut(&S, usize) -> Result<()>,
) -> Result<TrainingLog> {
    let mut stopper = EarlyStopping::new(patience);
    let mut log = TrainingLog::default();
    let mut best_state: Option<S> = None;
    for epoch in 1..=max_epochs {
        let t0 = Instant::now();
        let (train_loss, val_loss) = epoch_fn(state, epoch)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: t0.elapsed().as_secs_f64(),
        });
        log.stopped_epoch = epoch;
        match stopper.observe(epoch, val_loss) {
            StopSignal::Improved => {
                best_state = Some(state.clone());
                on_improve(state, epoch)?;
            }
            StopSignal::Continue => {}
            StopSignal::Stop => break,
        }
    }
    log.best_epoch = stopper.best_epoch().unwrap_or(0);
    if let Some(best) = best_state {
        *state = best;
    }
    Ok(log)
}

/// One training or validation pair on a common grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: Volume3D,
    pub label: Mask3D,
}

impl From<Slab> for Example {
    fn from(s: Slab) -> Self {
        Self {
            image: s.image,
            label: s.label,
        }
    }
}

/// `[1, 1, z, y, x]` tensor of a volume; the x-fastest layout carries over unchanged.
pub fn volume_tensor(v: &Volume3D) -> Tensor {
    let [nx, ny, nz] = v.dims();
    Tensor::from_vec(&[1, 1, nz, ny, nx], v.data().to_vec()).expect("matching element count")
}

pub fn mask_tensor(m: &Mask3D) -> Tensor {
    let [nx, ny, nz] = m.dims();
    Tensor::from_vec(&[1, 1, nz, ny, nx], m.to_f32()).expect("matching element count")
}

/// Reads sample `n` of a `[n, 1, z, y, x]` probability tensor onto `geom`.
pub fn probmap_from_tensor(t: &Tensor, n: usize, geom: Geometry) -> Result<ProbMap3D> {
    let [b, c, z, y, x] = t.dims5()?;
    if n >= b || c != 1 || [x, y, z] != geom.dims {
        return Err(Error::InvalidArgument(format!(
            "tensor {:?} does not hold sample {n} of grid {:?}",
            t.shape(),
            geom.dims
        )));
    }
    ProbMap3D::new(geom, t.sample(n).to_vec())
}

fn batch_tensors(items: &[Example]) -> Result<(Tensor, Tensor)> {
    let images: Vec<Tensor> = items.iter().map(|e| volume_tensor(&e.image)).collect();
    let labels: Vec<Tensor> = items.iter().map(|e| mask_tensor(&e.label)).collect();
    Ok((Tensor::cat_batch(&images)?, Tensor::cat_batch(&labels)?))
}

/// Mean Dice loss over `set` in evaluation mode, weighted per example.
pub fn validation_loss(model: &ModelHandle, set: &[Example], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in set.chunks(batch.max(1)) {
        let (x, y) = batch_tensors(chunk)?;
        let mut g = Graph::new(model.store(), Mode::Eval, model.precision, 0);
        let xv = g.input(x);
        let p = model.forward(&mut g, xv)?;
        let l = g.dice_loss(p, &y)?;
        total += g.value(l).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Everything a training run needs beyond the data.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub config: TrainConfig,
    pub augment: Option<AugmentPolicy>,
    pub device: Device,
    /// Best-epoch checkpoint file, rewritten at every improvement.
    pub checkpoint: Option<PathBuf>,
}

struct Optimizer {
    adam: Adam,
    scaler: LossScaler,
    rng: ChaCha8Rng,
    seed: u64,
}

fn train_epoch(
    model: &mut ModelHandle,
    opt: &mut Optimizer,
    train_set: &[Example],
    opts: &TrainOptions,
    epoch: usize,
) -> Result<f64> {
    let cfg = &opts.config;
    let mixed = model.precision == Precision::Mixed;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut opt.rng);
    let mut total = 0.0;
    for (b, chunk) in order.chunks(cfg.batch).enumerate() {
        let items = chunk
            .iter()
            .map(|&i| {
                let e = &train_set[i];
                match &opts.augment {
                    Some(policy) => {
                        let d = policy.draw(&mut opt.rng);
                        augment(&e.image, &e.label, &d).map(|(image, label)| Example { image, label })
                    }
                    None => Ok(e.clone()),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let (x, y) = batch_tensors(&items)?;
        let scale = if mixed { opt.scaler.scale } else { 1.0 };
        let graph_seed = opt.seed ^ ((epoch as u64) << 32) ^ b as u64;
        let (loss, mut grads, updates) = {
            let mut g = Graph::new(model.store(), Mode::Train, model.precision, graph_seed);
            let xv = g.input(x);
            let p = model.forward(&mut g, xv)?;
            let l = g.dice_loss(p, &y)?;
            let loss = g.value(l).data()[0] as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {}", b + 1)));
            }
            let grads = g.backward(l, scale)?;
            (loss, grads, g.take_norm_updates())
        };
        total += loss * chunk.len() as f64;
        let apply = if mixed {
            opt.scaler.update(grads.all_finite())
        } else if !grads.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at epoch {epoch}, batch {}", b + 1)));
        } else {
            true
        };
        if apply {
            if scale != 1.0 {
                grads.scale(1.0 / scale);
            }
            opt.adam.step(model.store_mut(), &grads);
        }
        model.store_mut().apply_norm_updates(&updates, NORM_MOMENTUM);
    }
    Ok(total / train_set.len() as f64)
}

/// Trains `model` in place; on return it holds the best-validation weights.
pub fn train(model: &mut ModelHandle, train_set: &[Example], val_set: &[Example], opts: &TrainOptions) -> Result<TrainingLog> {
    let cfg = &opts.config;
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be nonempty".into()));
    }
    check_capability(opts.device, cfg.precision).map_err(|e| Error::Capability(e.to_string()))?;
    model.precision = cfg.precision;
    let mut opt = Optimizer {
        adam: Adam::new(cfg.lr as f32),
        scaler: LossScaler::default(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        seed: cfg.seed,
    };
    run_training_loop(
        model,
        cfg.max_epochs,
        cfg.patience,
        |m, epoch| {
            let tl = train_epoch(m, &mut opt, train_set, opts, epoch)?;
            let vl = validation_loss(m, val_set, cfg.batch)?;
            Ok((tl, vl))
        },
        |m, epoch| match &opts.checkpoint {
            Some(path) => Ok(checkpoint::save(path, m, epoch)?),
            None => Ok(()),
        },
    )
}

/// Probability map of a preprocessed volume on its own grid.
pub fn predict_volume(model: &ModelHandle, vol: &Volume3D) -> Result<ProbMap3D> {
    let out = model.predict(&volume_tensor(vol))?;
    probmap_from_tensor(&out, 0, *vol.geometry())
}

/// Preprocess, predict and map back to the original grid.
pub fn infer_original(model: &ModelHandle, vol: &Volume3D, pre: &PreprocessConfig) -> Result<ProbMap3D> {
    let p = run_pipeline(vol, None, pre)?;
    let prob = predict_volume(model, &p.volume)?;
    invert_to_original(&prob, &p.record)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub inference_ms: f64,
    pub per_patient_total_s: f64,
    pub s_per_epoch: Option<f64>,
}

/// Wall-clock timings on one case after a discarded warm-up run.
pub fn measure(model: &ModelHandle, vol: &Volume3D, pre: &PreprocessConfig, log: Option<&TrainingLog>) -> Result<Timing> {
    let p = run_pipeline(vol, None, pre)?;
    predict_volume(model, &p.volume)?;
    let t = Instant::now();
    predict_volume(model, &p.volume)?;
    let inference = t.elapsed().as_secs_f64();
    let t = Instant::now();
    infer_original(model, vol, pre)?;
    let total = t.elapsed().as_secs_f64();
    Ok(Timing {
        inference_ms: inference * 1e3,
        per_patient_total_s: total.max(inference),
        s_per_epoch: log.map(TrainingLog::mean_epoch_seconds),
    })
}
