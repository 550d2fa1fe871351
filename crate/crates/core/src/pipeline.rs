//! Restoration variants, evaluation and the robustness sweep.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::car::CarModel;
use crate::degrade::DegradationSpec;
use crate::error::{Error, Result};
use crate::hinet::{self, Hinet, HinetConfig};
use crate::imaging::{resize_to_multiple, restore_size, ImageTensor, PairedSample, SIZE_MULTIPLE};
use crate::learn::{Checkpoint, ModelKind, StageInput};
use crate::metrics::{LpipsBackend, MetricReport, MetricRow, REPORT_COLUMNS};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PipelineVariant {
    #[serde(rename = "CAR")]
    Car,
    #[serde(rename = "HINET_DB")]
    HinetDb,
    #[serde(rename = "HINET_DR")]
    HinetDr,
    #[serde(rename = "ARIN")]
    Arin,
}

impl PipelineVariant {
    pub const ALL: [PipelineVariant; 4] = [
        PipelineVariant::Car,
        PipelineVariant::HinetDb,
        PipelineVariant::HinetDr,
        PipelineVariant::Arin,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            PipelineVariant::Car => "CAR",
            PipelineVariant::HinetDb => "HINET_DB",
            PipelineVariant::HinetDr => "HINET_DR",
            PipelineVariant::Arin => "ARIN",
        }
    }

    pub fn needs_car(self) -> bool {
        matches!(self, PipelineVariant::Car | PipelineVariant::Arin)
    }

    pub fn needs_hinet(self) -> bool {
        !matches!(self, PipelineVariant::Car)
    }
}

impl fmt::Display for PipelineVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PipelineVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        PipelineVariant::ALL
            .into_iter()
            .find(|v| v.tag() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (car, hinet_db, hinet_dr, arin)")))
    }
}

/// Checkpoints available to build restorers from. Each HINet variant has
/// its own slot because ARIN's restorer is trained on CAR outputs.
#[derive(Clone, Debug, Default)]
pub struct Checkpoints {
    pub car: Option<Checkpoint>,
    pub hinet_db: Option<Checkpoint>,
    pub hinet_dr: Option<Checkpoint>,
    pub hinet_arin: Option<Checkpoint>,
}

impl Checkpoints {
    /// Places a single restorer checkpoint in the slot `variant` reads.
    pub fn for_variant(variant: PipelineVariant, car: Option<Checkpoint>, hinet: Option<Checkpoint>) -> Self {
        let mut cks = Checkpoints {
            car,
            ..Default::default()
        };
        match variant {
            PipelineVariant::HinetDb => cks.hinet_db = hinet,
            PipelineVariant::HinetDr => cks.hinet_dr = hinet,
            PipelineVariant::Arin => cks.hinet_arin = hinet,
            PipelineVariant::Car => {}
        }
        cks
    }

    pub fn hinet_for(&self, variant: PipelineVariant) -> Option<&Checkpoint> {
        match variant {
            PipelineVariant::HinetDb => self.hinet_db.as_ref(),
            PipelineVariant::HinetDr => self.hinet_dr.as_ref(),
            PipelineVariant::Arin => self.hinet_arin.as_ref(),
            PipelineVariant::Car => None,
        }
    }
}

/// Anything that maps a deteriorated image to a restored one of equal dims.
pub trait Restorer {
    fn name(&self) -> String;

    fn restore(&self, img: &ImageTensor) -> Result<ImageTensor>;

    /// Identities of the models behind the restorer.
    fn sources(&self) -> Vec<String> {
        Vec::new()
    }
}

/// One of the four pipeline variants with its models loaded.
pub struct VariantRestorer {
    pub variant: PipelineVariant,
    car: Option<CarModel>,
    hinet: Option<Hinet>,
    sources: Vec<String>,
}

fn check_stage_input(ck: &Checkpoint, expected: StageInput) -> Result<()> {
    let found = ck.stage_input().expect("hinet checkpoint");
    if found != expected {
        return Err(Error::Kind {
            expected: format!("hinet ({expected})"),
            found: format!("hinet ({found})"),
        });
    }
    Ok(())
}

impl VariantRestorer {
    pub fn new(variant: PipelineVariant, checkpoints: &Checkpoints) -> Result<Self> {
        let mut sources = Vec::new();
        let car = if variant.needs_car() {
            let ck = checkpoints
                .car
                .as_ref()
                .ok_or_else(|| Error::Config(format!("{variant} needs a CAR checkpoint")))?;
            ck.expect_kind(ModelKind::Car)?;
            sources.push(format!("car:{}", ck.digest()?));
            Some(ck.car_model()?)
        } else {
            None
        };
        let hinet = if variant.needs_hinet() {
            match (checkpoints.hinet_for(variant), variant) {
                (Some(ck), _) => {
                    ck.expect_kind(ModelKind::Hinet)?;
                    match variant {
                        PipelineVariant::Arin => check_stage_input(ck, StageInput::CarOutputs)?,
                        PipelineVariant::HinetDb => check_stage_input(ck, StageInput::Deteriorated)?,
                        _ => {}
                    }
                    sources.push(format!("hinet:{}", ck.digest()?));
                    Some(ck.hinet_model()?)
                }
                (None, PipelineVariant::HinetDr) => {
                    warn!("HINET_DR has no shipped weights; using an untrained (identity) restorer");
                    sources.push("hinet:untrained".into());
                    Some(Hinet::init(HinetConfig::default(), 0)?)
                }
                (None, _) => return Err(Error::Config(format!("{variant} needs a HINet checkpoint"))),
            }
        } else {
            None
        };
        Ok(VariantRestorer {
            variant,
            car,
            hinet,
            sources,
        })
    }

    /// Restoration at working resolution, clamped.
    fn restore_working(&self, x: &ImageTensor) -> Result<ImageTensor> {
        let mut out = x.clone();
        if let Some(car) = &self.car {
            out = car.restore(&out)?;
        }
        if let Some(h) = &self.hinet {
            out = hinet::restore(h, &out)?;
        }
        Ok(out)
    }
}

impl Restorer for VariantRestorer {
    fn name(&self) -> String {
        self.variant.tag().to_string()
    }

    /// Resizes to a multiple of 12, runs the variant fully convolutionally,
    /// and resizes back to the original dims.
    fn restore(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let (work, dims) = resize_to_multiple(img, SIZE_MULTIPLE)?;
        restore_size(&self.restore_working(&work)?, dims)
    }

    fn sources(&self) -> Vec<String> {
        self.sources.clone()
    }
}

pub fn restore(img: &ImageTensor, variant: PipelineVariant, checkpoints: &Checkpoints) -> Result<ImageTensor> {
    VariantRestorer::new(variant, checkpoints)?.restore(img)
}

/// Metrics of `restorer(deteriorated)` against `clean` for every pair.
pub fn evaluate(pairs: &[PairedSample], restorer: &dyn Restorer, lpips: Option<&dyn LpipsBackend>) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Precondition("evaluation needs at least one pair".into()));
    }
    let rows = pairs
        .iter()
        .map(|p| {
            let out = restorer.restore(&p.deteriorated)?;
            MetricRow::compute(p.id.clone(), &p.clean, &out, lpips)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new(restorer.name(), rows)?.with_sources(restorer.sources()))
}

/// A test-time corruption applied to the deteriorated inputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Overlay {
    pub gaussian_sigma: Option<f64>,
    pub jpeg_quality: Option<u8>,
}

impl Overlay {
    pub fn none() -> Self {
        Overlay::default()
    }

    pub fn gaussian(sigma: f64) -> Self {
        Overlay {
            gaussian_sigma: Some(sigma),
            jpeg_quality: None,
        }
    }

    pub fn jpeg(quality: u8) -> Self {
        Overlay {
            gaussian_sigma: None,
            jpeg_quality: Some(quality),
        }
    }

    /// `none`, `GN(8)`, `JPEG(60)` or `GN(8)+JPEG(60)`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(s) = self.gaussian_sigma {
            parts.push(format!("GN({s})"));
        }
        if let Some(q) = self.jpeg_quality {
            parts.push(format!("JPEG({q})"));
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    fn spec(&self) -> DegradationSpec {
        DegradationSpec {
            mask: None,
            gaussian_sigma: self.gaussian_sigma,
            jpeg_quality: self.jpeg_quality,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub overlays: Vec<Overlay>,
    pub variants: Vec<PipelineVariant>,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            overlays: vec![
                Overlay::none(),
                Overlay::gaussian(8.0),
                Overlay::gaussian(16.0),
                Overlay::jpeg(60),
                Overlay::jpeg(30),
            ],
            variants: vec![PipelineVariant::Car, PipelineVariant::HinetDb, PipelineVariant::Arin],
            seed: 0,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.overlays.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("sweep needs at least one overlay and one variant".into()));
        }
        for o in &self.overlays {
            o.spec().validate()?;
        }
        Ok(())
    }
}

/// Reports for every variant under one overlay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub overlay: String,
    pub reports: Vec<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub rows: Vec<SweepRow>,
}

const GRID_METRICS: [&str; 4] = ["psnr", "ssim", "dssim", "lpips"];

impl SweepGrid {
    /// One row per overlay, columns `variant_metric` of the mean rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("overlay");
        if let Some(first) = self.rows.first() {
            for r in &first.reports {
                for m in GRID_METRICS {
                    out.push_str(&format!(",{}_{m}", r.variant));
                }
            }
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.overlay);
            for r in &row.reports {
                let m = &r.mean;
                let lpips = m.lpips.map(|v| format!("{v:.6}")).unwrap_or_default();
                out.push_str(&format!(",{:.6},{:.6},{:.6},{lpips}", m.psnr, m.ssim, m.dssim));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl SweepRow {
    /// Every variant's per-image rows under one header.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_COLUMNS}\n");
        for r in &self.reports {
            out.extend(r.to_csv().lines().skip(1).map(|l| format!("{l}\n")));
        }
        out
    }
}

/// Corrupts the deteriorated inputs with each overlay (seeded per overlay
/// index and image id) and evaluates every restorer on them.
pub fn sweep_with(
    pairs: &[PairedSample],
    overlays: &[Overlay],
    seed: u64,
    restorers: &[&dyn Restorer],
    lpips: Option<&dyn LpipsBackend>,
) -> Result<SweepGrid> {
    let mut rows = Vec::with_capacity(overlays.len());
    for (k, overlay) in overlays.iter().enumerate() {
        let spec = overlay.spec();
        let corrupted = pairs
            .iter()
            .map(|p| {
                let s = derive_seed(seed, &format!("overlay/{k}/{}", p.id));
                Ok(PairedSample {
                    deteriorated: spec.apply_overlay(&p.deteriorated, s)?,
                    ..p.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let reports = restorers
            .iter()
            .map(|r| evaluate(&corrupted, *r, lpips))
            .collect::<Result<Vec<_>>>()?;
        rows.push(SweepRow {
            overlay: overlay.label(),
            reports,
        });
    }
    Ok(SweepGrid { rows })
}

pub fn robustness_sweep(
    pairs: &[PairedSample],
    spec: &SweepSpec,
    checkpoints: &Checkpoints,
    lpips: Option<&dyn LpipsBackend>,
) -> Result<SweepGrid> {
    spec.validate()?;
    let restorers = spec
        .variants
        .iter()
        .map(|&v| VariantRestorer::new(v, checkpoints))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn Restorer> = restorers.iter().map(|r| r as &dyn Restorer).collect();
    sweep_with(pairs, &spec.overlays, spec.seed, &refs, lpips)
}
