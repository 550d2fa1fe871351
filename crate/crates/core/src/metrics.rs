//! Full-reference quality metrics and report serialization.
//!
//! SSIM follows the canonical single-scale definition: 11x11 Gaussian window
//! with sigma 1.5, `K1 = 0.01`, `K2 = 0.03`, dynamic range 1.0, evaluated
//! over "valid" window positions only. Colour images are scored per channel
//! and the channel scores averaged.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::autodiff::psnr_from_mse;
use crate::error::{Error, Result};
use crate::imaging::{save_image, ImageTensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if (a.channels(), a.height(), a.width()) != (b.channels(), b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_shapes(a, b)?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(se / a.data().len() as f64)
}

/// PSNR in dB with peak 1.0; capped at 100 dB.
pub fn psnr(reference: &ImageTensor, test: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(reference, test)?))
}

/// PSNR restricted to pixels where `region[p]` is true (all channels).
pub fn psnr_in_region(reference: &ImageTensor, test: &ImageTensor, region: &[bool]) -> Result<f64> {
    check_shapes(reference, test)?;
    let plane = reference.height() * reference.width();
    if region.len() != plane {
        return Err(Error::Shape("region size differs from image plane".into()));
    }
    let mut se = 0.0;
    let mut count = 0usize;
    for c in 0..reference.channels() {
        for (p, &inside) in region.iter().enumerate() {
            if inside {
                let d = reference.data()[c * plane + p] as f64 - test.data()[c * plane + p] as f64;
                se += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Precondition("empty region".into()));
    }
    Ok(psnr_from_mse(se / count as f64))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of a `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &win);
    let mu_b = filter_valid(b, h, w, &win);
    let e_aa = filter_valid(&aa, h, w, &win);
    let e_bb = filter_valid(&bb, h, w, &win);
    let e_ab = filter_valid(&ab, h, w, &win);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

pub fn ssim(reference: &ImageTensor, test: &ImageTensor) -> Result<f64> {
    check_shapes(reference, test)?;
    let (h, w) = (reference.height(), reference.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..reference.channels() {
        let a: Vec<f64> = reference.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = test.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        total += ssim_plane(&a, &b, h, w);
    }
    Ok(total / reference.channels() as f64)
}

/// `1 - SSIM`.
pub fn dssim(reference: &ImageTensor, test: &ImageTensor) -> Result<f64> {
    Ok(dssim_from_ssim(ssim(reference, test)?))
}

pub fn dssim_from_ssim(ssim: f64) -> f64 {
    1.0 - ssim
}

/// An external perceptual scorer (e.g. an LPIPS process).
pub trait LpipsBackend {
    fn score(&self, reference: &ImageTensor, test: &ImageTensor) -> std::result::Result<f64, String>;
}

/// Scores a pair with the backend. No backend or a failing backend yields
/// `None`; failures are logged, never turned into numbers.
pub fn lpips_external(reference: &ImageTensor, test: &ImageTensor, backend: Option<&dyn LpipsBackend>) -> Option<f64> {
    let backend = backend?;
    match backend.score(reference, test) {
        Ok(v) if v.is_finite() => Some(v),
        Ok(v) => {
            log::warn!("lpips backend returned non-finite value {v}; recording as absent");
            None
        }
        Err(e) => {
            log::warn!("lpips backend failed: {e}; recording as absent");
            None
        }
    }
}

/// Runs `program [args..] <reference.png> <test.png>` and parses a single
/// float from its stdout.
#[derive(Clone, Debug)]
pub struct CommandLpips {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl LpipsBackend for CommandLpips {
    fn score(&self, reference: &ImageTensor, test: &ImageTensor) -> std::result::Result<f64, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (ra, rb) = (dir.path().join("reference.png"), dir.path().join("test.png"));
        save_image(reference, &ra).map_err(|e| e.to_string())?;
        save_image(test, &rb).map_err(|e| e.to_string())?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(&ra)
            .arg(&rb)
            .output()
            .map_err(|e| format!("{}: {e}", self.program.display()))?;
        if !out.status.success() {
            return Err(format!("{} exited with {}", self.program.display(), out.status));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.trim()
            .parse::<f64>()
            .map_err(|e| format!("unparsable lpips output {text:?}: {e}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
    pub dssim: f64,
    pub lpips: Option<f64>,
}

impl MetricRow {
    pub fn compute(
        image: impl Into<String>,
        reference: &ImageTensor,
        test: &ImageTensor,
        lpips: Option<&dyn LpipsBackend>,
    ) -> Result<Self> {
        let s = ssim(reference, test)?;
        Ok(MetricRow {
            image: image.into(),
            psnr: psnr(reference, test)?,
            ssim: s,
            dssim: dssim_from_ssim(s),
            lpips: lpips_external(reference, test, lpips),
        })
    }
}

pub const REPORT_COLUMNS: &str = "variant,image,psnr,ssim,dssim,lpips";

/// Per-image rows plus their column means, for one restoration variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    /// Identities of the models that produced the restorations.
    #[serde(default)]
    pub sources: Vec<String>,
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
}

impl MetricReport {
    /// Sorts rows by image id and computes the aggregate row.
    pub fn new(variant: impl Into<String>, mut rows: Vec<MetricRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Precondition("a report needs at least one row".into()));
        }
        rows.sort_by(|a, b| a.image.cmp(&b.image));
        let n = rows.len() as f64;
        let mean_of = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let lpips = rows
            .iter()
            .map(|r| r.lpips)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        let mean = MetricRow {
            image: "mean".into(),
            psnr: mean_of(|r| r.psnr),
            ssim: mean_of(|r| r.ssim),
            dssim: mean_of(|r| r.dssim),
            lpips,
        };
        Ok(MetricReport {
            variant: variant.into(),
            sources: Vec::new(),
            rows,
            mean,
        })
    }

    pub fn with_sources(mut self, sources: Vec<String>) -> Self {
        self.sources = sources;
        self
    }

    fn csv_line(out: &mut String, variant: &str, r: &MetricRow) {
        let lpips = r.lpips.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{variant},{},{:.6},{:.6},{:.6},{lpips}",
            r.image, r.psnr, r.ssim, r.dssim
        );
    }

    /// CSV with the fixed header; the last line is the `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(REPORT_COLUMNS);
        out.push('\n');
        for r in &self.rows {
            Self::csv_line(&mut out, &self.variant, r);
        }
        Self::csv_line(&mut out, &self.variant, &self.mean);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::synthetic_painting;
    use std::cell::Cell;

    fn constant(v: f32) -> ImageTensor {
        ImageTensor::constant(3, 16, 16, v).unwrap()
    }

    #[test]
    fn psnr_cap_and_half_offset() {
        assert_eq!(psnr(&constant(0.2), &constant(0.2)).unwrap(), 100.0);
        let p = psnr(&constant(0.0), &constant(0.5)).unwrap();
        assert!((p - 6.0206).abs() < 1e-3, "{p}");
        assert!(psnr(&constant(0.0), &ImageTensor::constant(1, 16, 16, 0.0).unwrap()).is_err());
    }

    #[test]
    fn psnr_falls_as_offset_grows() {
        let base = constant(0.2);
        let mut last = f64::INFINITY;
        for d in [0.01f32, 0.05, 0.1, 0.3, 0.6] {
            let p = psnr(&base, &constant(0.2 + d)).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_constant_closed_form() {
        let img = synthetic_painting(32, 40, 1);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-9);
        let got = ssim(&constant(0.5), &constant(0.6)).unwrap();
        let (a, b) = (0.5f32 as f64, 0.6f32 as f64);
        let want = (2.0 * a * b + 1e-4) / (a * a + b * b + 1e-4);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!((got - 0.98361).abs() < 1e-4);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let small = ImageTensor::constant(1, 10, 30, 0.1).unwrap();
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn dssim_is_one_minus_ssim() {
        let a = synthetic_painting(24, 24, 1);
        let b = synthetic_painting(24, 24, 2);
        assert_eq!(dssim(&a, &b).unwrap(), 1.0 - ssim(&a, &b).unwrap());
        assert_eq!(dssim(&a, &a).unwrap(), 1.0 - ssim(&a, &a).unwrap());
    }

    struct Stub {
        value: std::result::Result<f64, String>,
        calls: Cell<usize>,
    }

    impl LpipsBackend for Stub {
        fn score(&self, _: &ImageTensor, _: &ImageTensor) -> std::result::Result<f64, String> {
            self.calls.set(self.calls.get() + 1);
            self.value.clone()
        }
    }

    #[test]
    fn lpips_passthrough_and_absence() {
        let a = constant(0.1);
        assert_eq!(lpips_external(&a, &a, None), None);
        let ok = Stub {
            value: Ok(0.42),
            calls: Cell::new(0),
        };
        assert_eq!(lpips_external(&a, &a, Some(&ok)), Some(0.42));
        let bad = Stub {
            value: Err("boom".into()),
            calls: Cell::new(0),
        };
        assert_eq!(lpips_external(&a, &a, Some(&bad)), None);
    }

    #[test]
    fn lpips_called_once_per_row() {
        let stub = Stub {
            value: Ok(0.3),
            calls: Cell::new(0),
        };
        let imgs: Vec<ImageTensor> = (0..5).map(|i| synthetic_painting(16, 16, i)).collect();
        for (i, img) in imgs.iter().enumerate() {
            MetricRow::compute(format!("{i}"), img, img, Some(&stub)).unwrap();
        }
        assert_eq!(stub.calls.get(), 5);
    }

    #[test]
    fn report_means_and_csv_shape() {
        let rows = vec![
            MetricRow {
                image: "b".into(),
                psnr: 20.0,
                ssim: 0.8,
                dssim: 0.2,
                lpips: None,
            },
            MetricRow {
                image: "a".into(),
                psnr: 30.0,
                ssim: 0.9,
                dssim: 1.0 - 0.9,
                lpips: None,
            },
        ];
        let r = MetricReport::new("CAR", rows).unwrap();
        assert_eq!(r.rows[0].image, "a");
        assert!((r.mean.psnr - 25.0).abs() < 1e-9);
        assert!((r.mean.ssim - 0.85).abs() < 1e-9);
        let csv = r.to_csv();
        let golden = "variant,image,psnr,ssim,dssim,lpips\n\
                      CAR,a,30.000000,0.900000,0.100000,\n\
                      CAR,b,20.000000,0.800000,0.200000,\n\
                      CAR,mean,25.000000,0.850000,0.150000,\n";
        assert_eq!(csv, golden);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["rows"][0]["lpips"], serde_json::Value::Null);
        assert_eq!(json["variant"], "CAR");
    }
}
