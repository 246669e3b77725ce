//! Image-quality metrics and the standardisation applied before them.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::array::Array2;
use crate::error::{Error, Result};
use crate::signal::{self, Fringe, Provenance};

/// Percentile clipping followed by an affine map to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardize {
    pub p_low: f64,
    pub p_high: f64,
}

impl Default for Standardize {
    fn default() -> Self {
        Self {
            p_low: 1.0,
            p_high: 99.0,
        }
    }
}

impl Standardize {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.p_low) || !(0.0..=100.0).contains(&self.p_high) || self.p_low >= self.p_high {
            return Err(Error::domain(format!(
                "invalid percentile pair ({}, {})",
                self.p_low, self.p_high
            )));
        }
        Ok(())
    }
}

/// Linear-interpolation percentile of already sorted values.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub values: Array2,
    /// The clipped image was constant; `values` is all zeros.
    pub degenerate: bool,
}

pub fn standardize_for_eval(img: &Array2, spec: &Standardize) -> Result<Standardized> {
    spec.validate()?;
    if !img.all_finite() {
        return Err(Error::domain("cannot standardise a non-finite image"));
    }
    if img.as_slice().is_empty() {
        return Err(Error::shape("empty image"));
    }
    let mut sorted = img.as_slice().to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, spec.p_low);
    let hi = percentile_sorted(&sorted, spec.p_high);
    if !(hi > lo) {
        return Ok(Standardized {
            values: Array2::zeros(img.rows(), img.cols()),
            degenerate: true,
        });
    }
    Ok(Standardized {
        values: img.map(|v| (v.clamp(lo, hi) - lo) / (hi - lo)),
        degenerate: false,
    })
}

fn same_shape(a: &Array2, b: &Array2) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("metric inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.as_slice().is_empty() {
        return Err(Error::shape("metric inputs are empty"));
    }
    Ok(())
}

/// Pairwise summation, so the result does not depend on how a parallel
/// reduction was chunked.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

pub fn mse(a: &Array2, b: &Array2) -> Result<f64> {
    same_shape(a, b)?;
    let sq: Vec<f64> = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).collect();
    Ok(pairwise_sum(&sq) / sq.len() as f64)
}

/// RMSE over the dynamic range of the reference `gt`; NaN if `gt` is constant.
pub fn nrmse(pred: &Array2, gt: &Array2) -> Result<f64> {
    let m = mse(pred, gt)?;
    let (lo, hi) = gt.min_max().expect("non-empty");
    Ok(if hi > lo { m.sqrt() / (hi - lo) } else { f64::NAN })
}

/// `10·log10(L² / mse)`, infinite for identical images.
pub fn psnr(a: &Array2, b: &Array2, data_range: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / m).log10()
    })
}

pub const SSIM_WIN: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WIN] {
    let c = (SSIM_WIN / 2) as f64;
    let mut t = [0.0; SSIM_WIN];
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Separable "valid" filtering with the SSIM window.
fn gauss_valid(a: &[f64], rows: usize, cols: usize, taps: &[f64; SSIM_WIN]) -> Vec<f64> {
    let (vr, vc) = (rows - SSIM_WIN + 1, cols - SSIM_WIN + 1);
    let mut tmp = vec![0.0; rows * vc];
    for r in 0..rows {
        let row = &a[r * cols..][..cols];
        for c in 0..vc {
            tmp[r * vc + c] = taps.iter().zip(&row[c..]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; vr * vc];
    for r in 0..vr {
        for c in 0..vc {
            out[r * vc + c] = (0..SSIM_WIN).map(|i| taps[i] * tmp[(r + i) * vc + c]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows.
pub fn ssim(a: &Array2, b: &Array2, data_range: f64) -> Result<f64> {
    same_shape(a, b)?;
    let (rows, cols) = a.shape();
    if rows < SSIM_WIN || cols < SSIM_WIN {
        return Err(Error::domain(format!(
            "image {rows}×{cols} is smaller than the {SSIM_WIN}×{SSIM_WIN} SSIM window"
        )));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let taps = ssim_taps();
    let (x, y) = (a.as_slice(), b.as_slice());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let mx = gauss_valid(x, rows, cols, &taps);
    let my = gauss_valid(y, rows, cols, &taps);
    let sxx = gauss_valid(&xx, rows, cols, &taps);
    let syy = gauss_valid(&yy, rows, cols, &taps);
    let sxy = gauss_valid(&xy, rows, cols, &taps);
    let map: Vec<f64> = (0..mx.len())
        .map(|i| {
            let (ma, mb) = (mx[i], my[i]);
            let va = sxx[i] - ma * ma;
            let vb = syy[i] - mb * mb;
            let cov = sxy[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect();
    Ok(pairwise_sum(&map) / map.len() as f64)
}

/// Value range that metrics are reported on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MetricScale {
    #[default]
    Unit,
    EightBit,
}

impl MetricScale {
    pub fn data_range(self) -> f64 {
        match self {
            MetricScale::Unit => 1.0,
            MetricScale::EightBit => 255.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricScale::Unit => "unit",
            MetricScale::EightBit => "8bit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Comparison {
    /// Generated vs ground truth.
    Generated,
    /// Degraded input vs ground truth.
    Degraded,
}

impl Comparison {
    pub fn as_str(self) -> &'static str {
        match self {
            Comparison::Generated => "gen_vs_gt",
            Comparison::Degraded => "degraded_vs_gt",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub comparison: Comparison,
    pub mse: f64,
    pub nrmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean and standard deviation of one metric; `excluded` counts values
/// (infinite PSNR, undefined NRMSE) left out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub excluded: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let kept: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let excluded = values.len() - kept.len();
        if kept.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                excluded,
            };
        }
        let mean = pairwise_sum(&kept) / kept.len() as f64;
        let dev: Vec<f64> = kept.iter().map(|v| (v - mean) * (v - mean)).collect();
        Self {
            mean,
            std: (pairwise_sum(&dev) / kept.len() as f64).sqrt(),
            excluded,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonSummary {
    pub mse: Aggregate,
    pub nrmse: Aggregate,
    pub psnr: Aggregate,
    pub ssim: Aggregate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub standardize: Standardize,
    pub scale: MetricScale,
    /// Images whose standardisation was degenerate.
    pub degenerate: Vec<String>,
}

fn fmt_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.17e}")
    }
}

impl MetricReport {
    pub fn summary(&self, comparison: Comparison) -> ComparisonSummary {
        let pick = |f: fn(&MetricRow) -> f64| -> Aggregate {
            let v: Vec<f64> = self.rows.iter().filter(|r| r.comparison == comparison).map(f).collect();
            Aggregate::of(&v)
        };
        ComparisonSummary {
            mse: pick(|r| r.mse),
            nrmse: pick(|r| r.nrmse),
            psnr: pick(|r| r.psnr),
            ssim: pick(|r| r.ssim),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,comparison,mse,nrmse,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.id,
                r.comparison.as_str(),
                fmt_value(r.mse),
                fmt_value(r.nrmse),
                fmt_value(r.psnr),
                fmt_value(r.ssim)
            );
        }
        s
    }

    /// Mean (std) per metric and comparison; `*` marks the better value.
    pub fn summary_table(&self) -> String {
        let g = self.summary(Comparison::Generated);
        let d = self.summary(Comparison::Degraded);
        let mut s = format!(
            "# standardize p_low={} p_high={} scale={}\n",
            self.standardize.p_low,
            self.standardize.p_high,
            self.scale.as_str()
        );
        let _ = writeln!(s, "{:<8}{:>28}{:>28}", "metric", "degraded_vs_gt", "gen_vs_gt");
        let rows: [(&str, Aggregate, Aggregate, bool); 4] = [
            ("MSE", d.mse, g.mse, false),
            ("NRMSE", d.nrmse, g.nrmse, false),
            ("PSNR", d.psnr, g.psnr, true),
            ("SSIM", d.ssim, g.ssim, true),
        ];
        for (name, da, ga, higher) in rows {
            let gen_better = if higher { ga.mean > da.mean } else { ga.mean < da.mean };
            let cell = |a: Aggregate, best: bool| format!("{:.4} ({:.4}){}", a.mean, a.std, if best { "*" } else { " " });
            let _ = writeln!(s, "{:<8}{:>28}{:>28}", name, cell(da, !gen_better), cell(ga, gen_better));
        }
        for (name, c) in [("degraded_vs_gt", d), ("gen_vs_gt", g)] {
            if c.psnr.excluded > 0 {
                let _ = writeln!(s, "# {name}: {} infinite PSNR values excluded", c.psnr.excluded);
            }
            if c.nrmse.excluded > 0 {
                let _ = writeln!(s, "# {name}: {} undefined NRMSE values excluded", c.nrmse.excluded);
            }
        }
        if !self.degenerate.is_empty() {
            let _ = writeln!(s, "# degenerate standardisation: {}", self.degenerate.join(" "));
        }
        s
    }

    /// Writes `metrics.csv` and `summary.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.to_csv())?;
        std::fs::write(dir.join("summary.txt"), self.summary_table())?;
        Ok(())
    }
}

/// One test image in the domain the network worked in.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub id: String,
    pub gt: Array2,
    pub degraded: Array2,
    pub generated: Array2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalDomain {
    /// Samples are B-scans.
    Spatial,
    /// Samples are fringes; they are reconstructed before comparison.
    Spectral { log: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalConfig {
    pub standardize: Standardize,
    pub scale: MetricScale,
}

fn to_spatial(a: &Array2, domain: EvalDomain) -> Result<Array2> {
    match domain {
        EvalDomain::Spatial => Ok(a.clone()),
        EvalDomain::Spectral { log } => {
            let f = Fringe::new(a.clone(), Provenance::Generated)?;
            Ok(if log { signal::reconstruct_log(&f) } else { signal::reconstruct(&f) }.into_pixels())
        }
    }
}

fn compare(id: &str, comparison: Comparison, pred: &Array2, gt: &Array2, range: f64) -> Result<MetricRow> {
    Ok(MetricRow {
        id: id.to_owned(),
        comparison,
        mse: mse(pred, gt)?,
        nrmse: nrmse(pred, gt)?,
        psnr: psnr(pred, gt, range)?,
        ssim: ssim(pred, gt, range)?,
    })
}

/// Standardises every image identically and computes both comparisons.
pub fn evaluate_testset(samples: &[EvalSample], domain: EvalDomain, config: &EvalConfig) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::domain("empty test set"));
    }
    config.standardize.validate()?;
    let range = config.scale.data_range();
    let per: Vec<(Vec<MetricRow>, bool)> = samples
        .par_iter()
        .map(|s| {
            let prep = |a: &Array2| -> Result<Standardized> {
                let st = standardize_for_eval(&to_spatial(a, domain)?, &config.standardize)?;
                Ok(Standardized {
                    values: st.values.map(|v| v * range),
                    degenerate: st.degenerate,
                })
            };
            let (gt, deg, gen) = (prep(&s.gt)?, prep(&s.degraded)?, prep(&s.generated)?);
            let rows = vec![
                compare(&s.id, Comparison::Degraded, &deg.values, &gt.values, range)?,
                compare(&s.id, Comparison::Generated, &gen.values, &gt.values, range)?,
            ];
            Ok((rows, gt.degenerate || deg.degenerate || gen.degenerate))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(samples.len() * 2);
    let mut degenerate = Vec::new();
    for (s, (r, flag)) in samples.iter().zip(per) {
        rows.extend(r);
        if flag {
            degenerate.push(s.id.clone());
        }
    }
    Ok(MetricReport {
        rows,
        standardize: config.standardize,
        scale: config.scale,
        degenerate,
    })
}
