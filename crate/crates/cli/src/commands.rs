use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use arin::car::CarConfig;
use arin::degrade::DegradationSpec;
use arin::hinet::HinetConfig;
use arin::imaging::{build_dataset, degrade_sample, load_image, load_triplets, save_image, synthetic_painting, write_triplets};
use arin::learn::{self, load_checkpoint, save_checkpoint, Checkpoint, JsonLinesLog, LogRecord, StageInput, TrainConfig, TrainObserver};
use arin::metrics::{CommandLpips, LpipsBackend};
use arin::pipeline::{self, Checkpoints, PipelineVariant, Restorer, SweepSpec, VariantRestorer};
use arin::seed::derive_seed;

use crate::{EvaluateArgs, ModelArgs, RestoreArgs, SweepArgs, SynthArgs, TrainCarArgs, TrainHinetArgs, TrainOverrides};

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct SynthConfig {
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
    degradation: DegradationSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 8,
            height: 96,
            width: 96,
            seed: 0,
            degradation: DegradationSpec::default(),
        }
    }
}

pub fn synth_data(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = read_config(a.config.as_deref())?;
    cfg.count = a.count.unwrap_or(cfg.count);
    cfg.height = a.height.unwrap_or(cfg.height);
    cfg.width = a.width.unwrap_or(cfg.width);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.degradation.validate()?;

    let samples = match &a.clean {
        Some(dir) => build_dataset(dir, &cfg.degradation, cfg.seed)?,
        None => (0..cfg.count)
            .map(|i| {
                let id = format!("img{i:04}");
                let clean = synthetic_painting(cfg.height, cfg.width, derive_seed(cfg.seed, &format!("painting/{id}")));
                degrade_sample(&id, clean, &cfg.degradation, cfg.seed)
            })
            .collect::<arin::Result<Vec<_>>>()?,
    };
    write_triplets(&a.out, &samples)?;
    info!("wrote {} triplets to {}", samples.len(), a.out.display());
    Ok(())
}

fn apply_overrides(train: &mut TrainConfig, o: &TrainOverrides) {
    if let Some(v) = o.iterations {
        train.iterations = v;
    }
    if let Some(v) = o.seed {
        train.seed = v;
    }
    if let Some(v) = o.learning_rate {
        train.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = o.patch_size {
        train.patch_size = v;
    }
    if let Some(v) = &o.checkpoint_at {
        train.checkpoint_schedule = v.clone();
    }
    if let Some(v) = o.log_interval {
        train.log_interval = v;
    }
}

/// Streams the log to a JSON-lines file and writes scheduled checkpoints.
struct DiskObserver {
    log: JsonLinesLog<BufWriter<fs::File>>,
    dir: PathBuf,
    prefix: &'static str,
}

impl DiskObserver {
    fn new(dir: &Path, prefix: &'static str) -> Result<Self> {
        create_dir(dir)?;
        let path = dir.join(format!("{prefix}-log.jsonl"));
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(DiskObserver {
            log: JsonLinesLog(BufWriter::new(file)),
            dir: dir.to_path_buf(),
            prefix,
        })
    }
}

impl TrainObserver for DiskObserver {
    fn on_log(&mut self, record: &LogRecord) -> arin::Result<()> {
        self.log.on_log(record)
    }

    fn on_checkpoint(&mut self, ck: &Checkpoint) -> arin::Result<()> {
        let path = self.dir.join(format!("{}-{:06}.ckpt", self.prefix, ck.iteration));
        info!("checkpoint {}", path.display());
        save_checkpoint(ck, path)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct CarTrainFile {
    car: CarConfig,
    train: TrainConfig,
}

impl Default for CarTrainFile {
    fn default() -> Self {
        CarTrainFile {
            car: CarConfig::default(),
            train: TrainConfig::car(),
        }
    }
}

pub fn train_car(a: TrainCarArgs) -> Result<()> {
    let mut cfg: CarTrainFile = read_config(a.config.as_deref())?;
    apply_overrides(&mut cfg.train, &a.train);
    let data = load_triplets(&a.data)?;
    let mut obs = DiskObserver::new(&a.out, "car")?;
    let run = learn::train_car(&data, &cfg.car, &cfg.train, &mut obs)?;
    save_checkpoint(&run.checkpoint, a.out.join("car-final.ckpt"))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct HinetTrainFile {
    hinet: HinetConfig,
    train: TrainConfig,
    stage_input: StageInput,
}

impl Default for HinetTrainFile {
    fn default() -> Self {
        HinetTrainFile {
            hinet: HinetConfig::default(),
            train: TrainConfig::hinet(),
            stage_input: StageInput::Deteriorated,
        }
    }
}

fn parse_stage_input(s: &str) -> Result<StageInput> {
    match s.replace('-', "_").as_str() {
        "deteriorated" => Ok(StageInput::Deteriorated),
        "car_outputs" => Ok(StageInput::CarOutputs),
        _ => bail!("unknown mode `{s}` (deteriorated or car_outputs)"),
    }
}

pub fn train_hinet(a: TrainHinetArgs) -> Result<()> {
    let mut cfg: HinetTrainFile = read_config(a.config.as_deref())?;
    apply_overrides(&mut cfg.train, &a.train);
    if let Some(m) = &a.mode {
        cfg.stage_input = parse_stage_input(m)?;
    }
    let car = a.car.as_ref().map(load_checkpoint).transpose()?;
    let data = load_triplets(&a.data)?;
    let mut obs = DiskObserver::new(&a.out, "hinet")?;
    let run = learn::train_hinet(&data, &cfg.hinet, &cfg.train, cfg.stage_input, car.as_ref(), &mut obs)?;
    save_checkpoint(&run.checkpoint, a.out.join("hinet-final.ckpt"))?;
    Ok(())
}

fn load_optional(path: Option<&PathBuf>) -> Result<Option<Checkpoint>> {
    Ok(path.map(load_checkpoint).transpose()?)
}

fn restorer(m: &ModelArgs) -> Result<VariantRestorer> {
    let variant: PipelineVariant = m.variant.parse()?;
    if variant == PipelineVariant::HinetDr && m.hinet.is_none() {
        warn!("HINET_DR ships untrained; pass --hinet to use real weights");
    }
    let cks = Checkpoints::for_variant(variant, load_optional(m.car.as_ref())?, load_optional(m.hinet.as_ref())?);
    Ok(VariantRestorer::new(variant, &cks)?)
}

pub fn restore(a: RestoreArgs) -> Result<()> {
    let r = restorer(&a.model)?;
    let img = load_image(&a.input)?;
    save_image(&r.restore(&img)?, &a.out)?;
    Ok(())
}

fn lpips_backend(cmd: Option<&PathBuf>) -> Option<CommandLpips> {
    cmd.map(|p| CommandLpips {
        program: p.clone(),
        args: Vec::new(),
    })
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let r = restorer(&a.model)?;
    let pairs = load_triplets(&a.data)?;
    let lp = lpips_backend(a.lpips_cmd.as_ref());
    let report = pipeline::evaluate(&pairs, &r, lp.as_ref().map(|b| b as &dyn LpipsBackend))?;
    create_dir(&a.out)?;
    write_file(&a.out.join("report.csv"), report.to_csv())?;
    write_file(&a.out.join("report.json"), report.to_json()?)?;
    info!(
        "{}: psnr {:.3} ssim {:.4} dssim {:.4}",
        report.variant, report.mean.psnr, report.mean.ssim, report.mean.dssim
    );
    Ok(())
}

/// File-name form of an overlay label: `GN(8)` becomes `gn8`.
fn slug(label: &str) -> String {
    label
        .to_ascii_lowercase()
        .chars()
        .filter_map(|c| match c {
            '+' => Some('-'),
            c if c.is_ascii_alphanumeric() || c == '.' => Some(c),
            _ => None,
        })
        .collect()
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let mut spec: SweepSpec = read_config(a.spec.as_deref())?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let cks = Checkpoints {
        car: load_optional(a.car.as_ref())?,
        hinet_db: load_optional(a.hinet_db.as_ref())?,
        hinet_dr: load_optional(a.hinet_dr.as_ref())?,
        hinet_arin: load_optional(a.hinet_arin.as_ref())?,
    };
    let pairs = load_triplets(&a.data)?;
    let lp = lpips_backend(a.lpips_cmd.as_ref());
    let grid = pipeline::robustness_sweep(&pairs, &spec, &cks, lp.as_ref().map(|b| b as &dyn LpipsBackend))?;
    create_dir(&a.out)?;
    for row in &grid.rows {
        write_file(&a.out.join(format!("sweep-{}.csv", slug(&row.overlay))), row.to_csv())?;
    }
    write_file(&a.out.join("grid.csv"), grid.to_csv())?;
    write_file(&a.out.join("grid.json"), grid.to_json()?)?;
    Ok(())
}
