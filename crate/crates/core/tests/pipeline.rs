mod common;

use std::cell::Cell;

use arin::imaging::{degrade_sample, synthetic_painting};
use arin::learn::{train_car, train_hinet, StageInput, TrainConfig};
use arin::metrics::{self, LpipsBackend};
use arin::pipeline::{evaluate, robustness_sweep, Overlay, Restorer, VariantRestorer};
use arin::{
    Checkpoint, Checkpoints, DegradationSpec, Error, ImageTensor, MaskParams, MetricReport, MetricRow,
    PairedSample, PipelineVariant, SweepSpec,
};
use common::scenarios::*;

fn odd_sample(h: usize, w: usize, seed: u64) -> PairedSample {
    let spec = DegradationSpec::mask_only(MaskParams::default());
    degrade_sample("odd", synthetic_painting(h, w, seed), &spec, seed).unwrap()
}

fn all_fresh() -> Checkpoints {
    Checkpoints {
        car: Some(fresh_car_checkpoint(&tiny_car(), 1)),
        hinet_db: Some(fresh_hinet_checkpoint(tiny_hinet(), StageInput::Deteriorated, 2)),
        hinet_dr: Some(fresh_hinet_checkpoint(tiny_hinet(), StageInput::Deteriorated, 3)),
        hinet_arin: Some(fresh_hinet_checkpoint(tiny_hinet(), StageInput::CarOutputs, 4)),
    }
}

/// Briefly trained tiny models for every slot.
fn trained(data: &[PairedSample]) -> Checkpoints {
    let cfg = |base: TrainConfig| TrainConfig {
        iterations: 60,
        batch_size: 2,
        patch_size: 24,
        seed: 9,
        checkpoint_schedule: vec![],
        ..base
    };
    let car = train_car(data, &tiny_car(), &cfg(TrainConfig::car()), &mut ()).unwrap().checkpoint;
    let db = train_hinet(data, &tiny_hinet(), &cfg(TrainConfig::hinet()), StageInput::Deteriorated, None, &mut ())
        .unwrap()
        .checkpoint;
    let arin = train_hinet(
        data,
        &tiny_hinet(),
        &cfg(TrainConfig::hinet()),
        StageInput::CarOutputs,
        Some(&car),
        &mut (),
    )
    .unwrap()
    .checkpoint;
    Checkpoints {
        car: Some(car),
        hinet_db: Some(db.clone()),
        hinet_dr: Some(db),
        hinet_arin: Some(arin),
    }
}

struct Oracle<'a>(&'a [PairedSample]);

impl Restorer for Oracle<'_> {
    fn name(&self) -> String {
        "ORACLE".into()
    }

    fn restore(&self, img: &ImageTensor) -> arin::Result<ImageTensor> {
        let p = self.0.iter().find(|p| &p.deteriorated == img).expect("known input");
        Ok(p.clean.clone())
    }
}

struct Identity;

impl Restorer for Identity {
    fn name(&self) -> String {
        "IDENTITY".into()
    }

    fn restore(&self, img: &ImageTensor) -> arin::Result<ImageTensor> {
        Ok(img.clone())
    }
}

struct CountingLpips(Cell<usize>);

impl LpipsBackend for CountingLpips {
    fn score(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64, String> {
        self.0.set(self.0.get() + 1);
        Ok(metrics::mse(a, b).unwrap())
    }
}

#[test]
fn arin_with_fresh_restorer_equals_car_on_odd_sizes() {
    let cks = all_fresh();
    let car = VariantRestorer::new(PipelineVariant::Car, &cks).unwrap();
    let arin = VariantRestorer::new(PipelineVariant::Arin, &cks).unwrap();
    for (h, w) in [(37, 53), (48, 48), (61, 25)] {
        let x = odd_sample(h, w, (h * w) as u64).deteriorated;
        assert_eq!(arin.restore(&x).unwrap(), car.restore(&x).unwrap());
    }
}

#[test]
fn every_variant_preserves_dims() {
    let cks = all_fresh();
    for v in PipelineVariant::ALL {
        let r = VariantRestorer::new(v, &cks).unwrap();
        for (h, w) in [(37, 53), (24, 36), (50, 13)] {
            let out = r.restore(&odd_sample(h, w, 7).deteriorated).unwrap();
            assert_eq!((out.channels(), out.height(), out.width()), (3, h, w), "{v}");
        }
    }
}

#[test]
fn arin_composes_car_then_restorer() {
    let data = synthetic_triplets(2, 48, 11);
    let cks = trained(&data);
    let car = VariantRestorer::new(PipelineVariant::Car, &cks).unwrap();
    let arin = VariantRestorer::new(PipelineVariant::Arin, &cks).unwrap();
    let h = cks.hinet_arin.as_ref().unwrap().hinet_model().unwrap();
    for p in &data {
        let expected = arin::hinet::restore(&h, &car.restore(&p.deteriorated).unwrap()).unwrap();
        assert_eq!(arin.restore(&p.deteriorated).unwrap(), expected);
    }
}

#[test]
fn oracle_and_identity_restorers() {
    let data = synthetic_triplets(3, 48, 12);
    let rep = evaluate(&data, &Oracle(&data), None).unwrap();
    for r in rep.rows.iter().chain([&rep.mean]) {
        assert_eq!((r.psnr, r.ssim, r.dssim), (100.0, 1.0, 0.0));
        assert_eq!(r.lpips, None);
    }
    let rep = evaluate(&data, &Identity, None).unwrap();
    for (row, p) in rep.rows.iter().zip(&data) {
        assert_eq!(row.psnr, metrics::psnr(&p.clean, &p.deteriorated).unwrap());
        assert_eq!(row.ssim, metrics::ssim(&p.clean, &p.deteriorated).unwrap());
    }
}

#[test]
fn lpips_backend_is_called_once_per_pair() {
    let data = synthetic_triplets(3, 48, 13);
    let lp = CountingLpips(Cell::new(0));
    let rep = evaluate(&data, &Identity, Some(&lp)).unwrap();
    assert_eq!(lp.0.get(), 3);
    assert!(rep.rows.iter().all(|r| r.lpips.is_some()));
    assert!(rep.mean.lpips.is_some());
}

fn golden_report() -> MetricReport {
    let row = |id: &str, psnr, ssim, dssim, lpips| MetricRow {
        image: id.into(),
        psnr,
        ssim,
        dssim,
        lpips,
    };
    MetricReport::new(
        "ARIN",
        vec![
            row("img0002", 30.5, 0.875, 0.125, Some(0.5)),
            row("img0001", 20.25, 0.75, 0.25, Some(0.25)),
        ],
    )
    .unwrap()
    .with_sources(vec!["car:abc".into()])
}

#[test]
fn report_csv_matches_golden() {
    let expected = "variant,image,psnr,ssim,dssim,lpips\n\
                    ARIN,img0001,20.250000,0.750000,0.250000,0.250000\n\
                    ARIN,img0002,30.500000,0.875000,0.125000,0.500000\n\
                    ARIN,mean,25.375000,0.812500,0.187500,0.375000\n";
    assert_eq!(golden_report().to_csv(), expected);

    let mut no_lpips = golden_report();
    no_lpips.rows[0].lpips = None;
    let no_lpips = MetricReport::new("ARIN", no_lpips.rows).unwrap();
    let last = no_lpips.to_csv().lines().last().unwrap().to_string();
    assert_eq!(last, "ARIN,mean,25.375000,0.812500,0.187500,");
}

#[test]
fn report_json_matches_golden() {
    let json = golden_report().to_json().unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let expected = serde_json::json!({
        "variant": "ARIN",
        "sources": ["car:abc"],
        "rows": [
            {"image": "img0001", "psnr": 20.25, "ssim": 0.75, "dssim": 0.25, "lpips": 0.25},
            {"image": "img0002", "psnr": 30.5, "ssim": 0.875, "dssim": 0.125, "lpips": 0.5},
        ],
        "mean": {"image": "mean", "psnr": 25.375, "ssim": 0.8125, "dssim": 0.1875, "lpips": 0.375},
    });
    assert_eq!(v, expected);
    let back: MetricReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, golden_report());
}

#[test]
fn stage_input_mismatch_is_a_kind_error() {
    let car = fresh_car_checkpoint(&tiny_car(), 1);
    let db = fresh_hinet_checkpoint(tiny_hinet(), StageInput::Deteriorated, 2);
    let co = fresh_hinet_checkpoint(tiny_hinet(), StageInput::CarOutputs, 2);
    let build = |v, c: Option<Checkpoint>, h: Option<Checkpoint>| {
        VariantRestorer::new(v, &Checkpoints::for_variant(v, c, h)).err()
    };
    assert!(matches!(build(PipelineVariant::Arin, Some(car.clone()), Some(db.clone())), Some(Error::Kind { .. })));
    assert!(matches!(build(PipelineVariant::HinetDb, None, Some(co)), Some(Error::Kind { .. })));
    assert!(matches!(build(PipelineVariant::Car, Some(db.clone()), None), Some(Error::Kind { .. })));
    assert!(matches!(build(PipelineVariant::Arin, Some(db), Some(car.clone())), Some(Error::Kind { .. })));
    assert!(matches!(build(PipelineVariant::Arin, Some(car), None), Some(Error::Config(_))));
    assert!(build(PipelineVariant::HinetDr, None, None).is_none());
}

#[test]
fn sweep_rows_and_monotonicity() {
    let data = synthetic_triplets(3, 48, 14);
    let cks = trained(&data);
    let spec = SweepSpec::default();
    let grid = robustness_sweep(&data, &spec, &cks, None).unwrap();
    let labels: Vec<&str> = grid.rows.iter().map(|r| r.overlay.as_str()).collect();
    assert_eq!(labels, ["none", "GN(8)", "GN(16)", "JPEG(60)", "JPEG(30)"]);
    for row in &grid.rows {
        let names: Vec<&str> = row.reports.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, ["CAR", "HINET_DB", "ARIN"]);
    }

    for (k, v) in spec.variants.iter().enumerate() {
        let r = VariantRestorer::new(*v, &cks).unwrap();
        assert_eq!(grid.rows[0].reports[k], evaluate(&data, &r, None).unwrap(), "{v}");
        let (gn8, gn16) = (&grid.rows[1].reports[k].mean, &grid.rows[2].reports[k].mean);
        assert!(gn8.psnr >= gn16.psnr, "{v}: {} < {}", gn8.psnr, gn16.psnr);
    }

    let again = robustness_sweep(&data, &spec, &cks, None).unwrap();
    assert_eq!(again, grid);
    assert_eq!(again.to_csv(), grid.to_csv());

    let csv = grid.to_csv();
    assert!(csv.starts_with("overlay,CAR_psnr,CAR_ssim,CAR_dssim,CAR_lpips,HINET_DB_psnr"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn overlay_labels() {
    assert_eq!(Overlay::none().label(), "none");
    let both = Overlay {
        gaussian_sigma: Some(8.0),
        jpeg_quality: Some(60),
    };
    assert_eq!(both.label(), "GN(8)+JPEG(60)");
    assert!(SweepSpec {
        overlays: vec![],
        ..Default::default()
    }
    .validate()
    .is_err());
}

#[test]
fn untrained_dr_fallback_is_identity_at_working_size() {
    let r = VariantRestorer::new(PipelineVariant::HinetDr, &Checkpoints::default()).unwrap();
    assert_eq!(r.sources(), vec!["hinet:untrained".to_string()]);
    let x = odd_sample(48, 48, 21).deteriorated;
    assert_eq!(r.restore(&x).unwrap(), x);
}
