//! Training loops for the CAR pair and the two-stage restorer.

use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::car::{CarConfig, CarModel};
use crate::edsr::Edsr;
use crate::error::{Error, Result};
use crate::hinet::{Hinet, HinetConfig};
use crate::imaging::{ImageTensor, PairedSample, PatchGrid};
use crate::learn::adam::{adam_step, AdamConfig, AdamState};
use crate::learn::checkpoint::{Checkpoint, ModelSpec};
use crate::learn::loss::{batch_psnr, psnr_loss_graph};
use crate::params::ParamSet;
use crate::resampler::Resampler;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub clip_grad_norm: Option<f64>,
    pub batch_size: usize,
    pub patch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Iterations at which a checkpoint is emitted.
    pub checkpoint_schedule: Vec<usize>,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::car()
    }
}

impl TrainConfig {
    pub fn car() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_grad_norm: None,
            batch_size: 10,
            patch_size: 128,
            iterations: 8000,
            seed: 0,
            validation_fraction: 3976.0 / 23856.0,
            checkpoint_schedule: vec![4000, 6000, 8000],
            log_interval: 100,
        }
    }

    pub fn hinet() -> Self {
        TrainConfig {
            batch_size: 4,
            iterations: 50_000,
            validation_fraction: 0.10,
            checkpoint_schedule: vec![50_000, 100_000],
            ..TrainConfig::car()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
            clip_grad_norm: self.clip_grad_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 || self.patch_size == 0 || self.iterations == 0 || self.log_interval == 0 {
            return Err(Error::Config(
                "batch_size, patch_size, iterations and log_interval must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.checkpoint_schedule.contains(&0) {
            return Err(Error::Config("checkpoint iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// What the restorer is trained to restore.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageInput {
    Deteriorated,
    CarOutputs,
}

impl std::fmt::Display for StageInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StageInput::Deteriorated => "deteriorated",
            StageInput::CarOutputs => "car_outputs",
        })
    }
}

/// One JSON-lines log entry. `loss` is the mean training loss since the
/// previous entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub val_psnr: Option<f64>,
}

/// Receives log entries and scheduled checkpoints as training proceeds.
pub trait TrainObserver {
    fn on_log(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _ck: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Keeps every scheduled checkpoint in memory.
#[derive(Default)]
pub struct CollectCheckpoints(pub Vec<Checkpoint>);

impl TrainObserver for CollectCheckpoints {
    fn on_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        self.0.push(ck.clone());
        Ok(())
    }
}

/// Writes log entries as JSON lines.
pub struct JsonLinesLog<W: Write>(pub W);

impl<W: Write> TrainObserver for JsonLinesLog<W> {
    fn on_log(&mut self, record: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.0, "{line}").map_err(|e| Error::io("<training log>", e))
    }
}

#[derive(Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    /// Training loss at every iteration.
    pub losses: Vec<f64>,
    pub train_patches: usize,
    pub val_patches: usize,
}

struct PatchSet {
    inputs: Vec<Tensor<f32>>,
    targets: Vec<Tensor<f32>>,
}

fn extract_pairs(inputs: &[&ImageTensor], targets: &[&ImageTensor], size: usize) -> Result<PatchSet> {
    let mut set = PatchSet {
        inputs: Vec::new(),
        targets: Vec::new(),
    };
    for (x, y) in inputs.iter().zip(targets) {
        let grid = PatchGrid::new(x.height(), x.width(), size)?;
        for i in 0..grid.origins.len() {
            set.inputs.push(grid.crop(x, i).to_tensor());
            set.targets.push(grid.crop(y, i).to_tensor());
        }
    }
    Ok(set)
}

/// Seeded split of patch indices into (train, validation). At least one
/// patch always stays in the training set.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "split")));
    let n_val = ((fraction * n as f64).floor() as usize).min(n.saturating_sub(1));
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Uniform-without-replacement batches, reshuffled every epoch.
struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    seed: u64,
}

impl BatchSampler {
    fn new(pool: Vec<usize>, seed: u64) -> Self {
        BatchSampler {
            pool,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            seed,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order = self.pool.clone();
                let tag = format!("epoch/{}", self.epoch);
                self.order
                    .shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &tag)));
                self.epoch += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

trait Objective {
    /// Loss and gradients for a batch.
    fn step(&self, params: &ParamSet<f32>, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<(f64, ParamSet<f32>)>;

    /// Forward output compared against the target by validation PSNR.
    fn predict(&self, params: &ParamSet<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

struct CarObjective(CarConfig);

impl CarObjective {
    fn model(&self, params: &ParamSet<f32>) -> CarModel {
        CarModel {
            resampler: Resampler {
                cfg: self.0.resampler.clone(),
                params: params.strip_prefix("resampler."),
            },
            edsr: Edsr {
                cfg: self.0.edsr.clone(),
                params: params.strip_prefix("edsr."),
            },
        }
    }
}

impl Objective for CarObjective {
    fn step(&self, params: &ParamSet<f32>, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<(f64, ParamSet<f32>)> {
        let model = self.model(params);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let xv = g.input(x.clone());
        let yv = g.input(y.clone());
        let (_, rec) = model.forward(&mut g, &bound, xv);
        let loss = g.l1(rec, yv);
        let mut grads = g.backward(loss);
        Ok((g.value(loss).data()[0] as f64, model.gradients(&bound, &mut grads)))
    }

    fn predict(&self, params: &ParamSet<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.model(params).reconstruct(x)
    }
}

struct HinetObjective(HinetConfig);

impl HinetObjective {
    fn model(&self, params: &ParamSet<f32>) -> Hinet {
        Hinet {
            cfg: self.0.clone(),
            params: params.clone(),
        }
    }
}

impl Objective for HinetObjective {
    fn step(&self, params: &ParamSet<f32>, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<(f64, ParamSet<f32>)> {
        let model = self.model(params);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let xv = g.input(x.clone());
        let yv = g.input(y.clone());
        let stages = model.forward(&mut g, &bound, xv);
        let loss = psnr_loss_graph(&mut g, &stages, yv);
        let mut grads = g.backward(loss);
        Ok((g.value(loss).data()[0] as f64, params.gradients(&bound, &mut grads)))
    }

    fn predict(&self, params: &ParamSet<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(crate::hinet::hinet_forward(&self.model(params), x)?.restored_2)
    }
}

fn mean_psnr(obj: &dyn Objective, params: &ParamSet<f32>, patches: &PatchSet, idx: &[usize]) -> Result<Option<f64>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for &i in idx {
        let out = obj.predict(params, &patches.inputs[i])?.map(|v| v.clamp(0.0, 1.0));
        total += batch_psnr(&out, &patches.targets[i])?;
    }
    Ok(Some(total / idx.len() as f64))
}

fn stack(items: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &items[i]).collect();
    Tensor::stack(&refs)
}

fn fit(
    obj: &dyn Objective,
    spec: ModelSpec,
    mut params: ParamSet<f32>,
    patches: PatchSet,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainRun> {
    let (train_idx, val_idx) = split_indices(patches.inputs.len(), cfg.validation_fraction, cfg.seed);
    info!(
        "training on {} patches, validating on {}",
        train_idx.len(),
        val_idx.len()
    );
    let (train_patches, val_patches) = (train_idx.len(), val_idx.len());
    let mut sampler = BatchSampler::new(train_idx, derive_seed(cfg.seed, "batches"));
    let adam = cfg.adam();
    let mut state = AdamState::new(&params);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut history = Vec::new();
    let mut since_log = Vec::new();

    for it in 1..=cfg.iterations {
        let batch = sampler.next_batch(cfg.batch_size);
        let x = stack(&patches.inputs, &batch)?;
        let y = stack(&patches.targets, &batch)?;
        let (loss, grads) = obj.step(&params, &x, &y)?;
        adam_step(&mut params, &grads, &mut state, &adam)?;
        losses.push(loss);
        since_log.push(loss);

        let scheduled = cfg.checkpoint_schedule.contains(&it);
        if it % cfg.log_interval == 0 || it == cfg.iterations || scheduled {
            let record = LogRecord {
                iteration: it,
                loss: since_log.iter().sum::<f64>() / since_log.len() as f64,
                val_psnr: mean_psnr(obj, &params, &patches, &val_idx)?,
            };
            since_log.clear();
            info!("iteration {it}: loss {:.6}, val psnr {:?}", record.loss, record.val_psnr);
            observer.on_log(&record)?;
            history.push(record);
        }
        if scheduled {
            observer.on_checkpoint(&Checkpoint {
                model: spec.clone(),
                train: cfg.clone(),
                iteration: it,
                seed: cfg.seed,
                history: history.clone(),
                params: params.clone(),
            })?;
        }
    }
    Ok(TrainRun {
        checkpoint: Checkpoint {
            model: spec,
            train: cfg.clone(),
            iteration: cfg.iterations,
            seed: cfg.seed,
            history,
            params,
        },
        losses,
        train_patches,
        val_patches,
    })
}

/// Jointly trains the resampler and upscaler under the L1 objective, with
/// the deteriorated image as input and the clean image as target.
pub fn train_car(
    dataset: &[PairedSample],
    car: &CarConfig,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainRun> {
    cfg.validate()?;
    car.validate()?;
    if dataset.is_empty() {
        return Err(Error::Precondition("training dataset is empty".into()));
    }
    let d = car.resampler.divisor();
    if cfg.patch_size % d != 0 {
        return Err(Error::Config(format!("patch_size {} must be divisible by {d}", cfg.patch_size)));
    }
    let inputs: Vec<&ImageTensor> = dataset.iter().map(|s| &s.deteriorated).collect();
    let targets: Vec<&ImageTensor> = dataset.iter().map(|s| &s.clean).collect();
    let patches = extract_pairs(&inputs, &targets, cfg.patch_size)?;
    let params = CarModel::<f32>::init(car, cfg.seed)?.params();
    fit(
        &CarObjective(car.clone()),
        ModelSpec::Car { car: car.clone() },
        params,
        patches,
        cfg,
        observer,
    )
}

/// Trains the restorer under the negative two-stage PSNR objective. With
/// [`StageInput::CarOutputs`] the inputs are the CAR reconstructions of the
/// deteriorated images, which requires `car`.
pub fn train_hinet(
    dataset: &[PairedSample],
    hinet: &HinetConfig,
    cfg: &TrainConfig,
    stage_input: StageInput,
    car: Option<&Checkpoint>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainRun> {
    cfg.validate()?;
    hinet.validate()?;
    if dataset.is_empty() {
        return Err(Error::Precondition("training dataset is empty".into()));
    }
    let d = hinet.divisor();
    if cfg.patch_size % d != 0 {
        return Err(Error::Config(format!("patch_size {} must be divisible by {d}", cfg.patch_size)));
    }
    let (materialized, car_source) = match stage_input {
        StageInput::Deteriorated => (None, None),
        StageInput::CarOutputs => {
            let ck = car.ok_or_else(|| Error::Config("car_outputs mode needs a CAR checkpoint".into()))?;
            let model = ck.car_model()?;
            let outs = dataset
                .iter()
                .map(|s| model.restore(&s.deteriorated))
                .collect::<Result<Vec<_>>>()?;
            (Some(outs), Some(ck.digest()?))
        }
    };
    let inputs: Vec<&ImageTensor> = match &materialized {
        Some(outs) => outs.iter().collect(),
        None => dataset.iter().map(|s| &s.deteriorated).collect(),
    };
    let targets: Vec<&ImageTensor> = dataset.iter().map(|s| &s.clean).collect();
    let patches = extract_pairs(&inputs, &targets, cfg.patch_size)?;
    let params = Hinet::<f32>::init(hinet.clone(), derive_seed(cfg.seed, "init/hinet"))?.params;
    fit(
        &HinetObjective(hinet.clone()),
        ModelSpec::Hinet {
            hinet: hinet.clone(),
            stage_input,
            car_source,
        },
        params,
        patches,
        cfg,
        observer,
    )
}
