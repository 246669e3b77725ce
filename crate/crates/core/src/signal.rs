//! Spectral-domain OCT physics.
//!
//! A [`Fringe`] holds real detector samples indexed by wavenumber (rows)
//! and lateral position (columns). Multiplying it by a Gaussian mask narrows
//! the effective source bandwidth, and [`reconstruct`] takes the per-column
//! DFT magnitude to produce a depth image ([`BScan`]). The spatial-domain
//! counterpart of the degradation is [`mean_filter_vertical`].

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::array::Array2;
use crate::error::{Error, Result};

/// Guard added before taking the logarithm of a magnitude.
pub const LOG_EPS: f64 = 1e-12;

/// Where a fringe came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    GroundTruth,
    Windowed,
    Generated,
}

/// Spectral interferogram, `n_k` wavenumber samples by `W` A-scans.
#[derive(Debug, Clone, PartialEq)]
pub struct Fringe {
    samples: Array2,
    provenance: Provenance,
}

impl Fringe {
    pub fn new(samples: Array2, provenance: Provenance) -> Result<Self> {
        if samples.rows() < 2 {
            return Err(Error::domain(format!(
                "a fringe needs at least 2 spectral samples, got {}",
                samples.rows()
            )));
        }
        if !samples.all_finite() {
            return Err(Error::domain("fringe contains non-finite samples"));
        }
        Ok(Self {
            samples,
            provenance,
        })
    }

    pub fn n_k(&self) -> usize {
        self.samples.rows()
    }

    pub fn width(&self) -> usize {
        self.samples.cols()
    }

    pub fn samples(&self) -> &Array2 {
        &self.samples
    }

    pub fn into_samples(self) -> Array2 {
        self.samples
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }
}

/// Value range convention carried by a [`BScan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueDomain {
    LinearMagnitude,
    LogCompressed,
    /// Pixels in `[0, 1]`.
    UnitNormalized,
    /// Pixels in `[-1, 1]`.
    TrainNormalized,
}

/// Spatial-domain image, depth (rows) by lateral position (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct BScan {
    pixels: Array2,
    domain: ValueDomain,
}

impl BScan {
    pub fn new(pixels: Array2, domain: ValueDomain) -> Result<Self> {
        if !pixels.all_finite() {
            return Err(Error::domain("B-scan contains non-finite pixels"));
        }
        let bounds = match domain {
            ValueDomain::UnitNormalized => Some((0.0, 1.0)),
            ValueDomain::TrainNormalized => Some((-1.0, 1.0)),
            _ => None,
        };
        if let (Some((lo, hi)), Some((min, max))) = (bounds, pixels.min_max()) {
            if min < lo || max > hi {
                return Err(Error::domain(format!(
                    "pixels span [{min}, {max}], outside [{lo}, {hi}] for {domain:?}"
                )));
            }
        }
        Ok(Self { pixels, domain })
    }

    pub fn height(&self) -> usize {
        self.pixels.rows()
    }

    pub fn width(&self) -> usize {
        self.pixels.cols()
    }

    pub fn pixels(&self) -> &Array2 {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2 {
        self.pixels
    }

    pub fn domain(&self) -> ValueDomain {
        self.domain
    }
}

/// Source centre wavelength and bandwidth, both in nanometres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoherenceSpec {
    pub lambda0: f64,
    pub delta_lambda: f64,
}

/// Axial resolution estimate `λ₀² / Δλ` in nanometres.
pub fn coherence_length(spec: &CoherenceSpec) -> Result<f64> {
    let ok = |v: f64| v.is_finite() && v > 0.0;
    if !ok(spec.lambda0) || !ok(spec.delta_lambda) {
        return Err(Error::domain(format!(
            "wavelength and bandwidth must be positive, got {} and {}",
            spec.lambda0, spec.delta_lambda
        )));
    }
    Ok(spec.lambda0 * spec.lambda0 / spec.delta_lambda)
}

/// MATLAB-compatible Gaussian window:
/// `w(n) = exp(-½ (α n / ((N-1)/2))²)` for `n = -(N-1)/2 ..= (N-1)/2`.
pub fn gausswin(n_k: usize, alpha: f64) -> Result<Vec<f64>> {
    if n_k == 0 {
        return Err(Error::domain("gausswin length must be at least 1"));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::domain(format!("gausswin alpha must be positive, got {alpha}")));
    }
    if n_k == 1 {
        return Ok(vec![1.0]);
    }
    let half = (n_k - 1) as f64 / 2.0;
    let mut w: Vec<f64> = (0..n_k)
        .map(|i| {
            let n = i as f64 - half;
            (-0.5 * (alpha * n / half).powi(2)).exp()
        })
        .collect();
    // i - half and (n_k-1-i) - half are exact negatives, but make the
    // mirror symmetry explicit anyway.
    for i in 0..n_k / 2 {
        w[n_k - 1 - i] = w[i];
    }
    Ok(w)
}

/// Gaussian spectral window placed anywhere along the wavenumber axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    alpha: f64,
    center: f64,
    n_k: usize,
}

impl WindowSpec {
    /// `center` is a sample position; half-integers are allowed so that the
    /// exact midpoint of an even-length axis can be represented.
    pub fn new(n_k: usize, alpha: f64, center: f64) -> Result<Self> {
        if n_k < 2 {
            return Err(Error::domain("window length must be at least 2"));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::domain(format!("window alpha must be positive, got {alpha}")));
        }
        if !(center >= 0.0 && center <= (n_k - 1) as f64) {
            return Err(Error::domain(format!(
                "window center {center} outside [0, {}]",
                n_k - 1
            )));
        }
        Ok(Self { alpha, center, n_k })
    }

    pub fn centered(n_k: usize, alpha: f64) -> Result<Self> {
        Self::new(n_k, alpha, (n_k.max(1) - 1) as f64 / 2.0)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    /// Spectral standard deviation in samples, `((n_k - 1) / 2) / α`.
    pub fn sigma_k(&self) -> f64 {
        (self.n_k - 1) as f64 / 2.0 / self.alpha
    }

    pub fn mask(&self) -> Vec<f64> {
        let sigma = self.sigma_k();
        (0..self.n_k)
            .map(|i| {
                let z = (i as f64 - self.center) / sigma;
                (-0.5 * z * z).exp()
            })
            .collect()
    }
}

/// Multiplies every A-scan by the window mask.
pub fn apply_spectral_window(fringe: &Fringe, window: &WindowSpec) -> Result<Fringe> {
    if window.n_k() != fringe.n_k() {
        return Err(Error::shape(format!(
            "window length {} does not match fringe length {}",
            window.n_k(),
            fringe.n_k()
        )));
    }
    let mask = window.mask();
    let src = fringe.samples();
    let out = Array2::from_fn(src.rows(), src.cols(), |r, c| src.get(r, c) * mask[r]);
    Fringe::new(out, Provenance::Windowed)
}

/// Depth profile magnitude of every A-scan.
///
/// Keeps the first `n_k / 2` DFT bins (non-negative depths).
pub fn reconstruct(fringe: &Fringe) -> BScan {
    let pixels = depth_magnitudes(fringe.samples());
    BScan {
        pixels,
        domain: ValueDomain::LinearMagnitude,
    }
}

/// [`reconstruct`] followed by `20 log10(|·| + ε)`.
pub fn reconstruct_log(fringe: &Fringe) -> BScan {
    let pixels = depth_magnitudes(fringe.samples()).map(|m| 20.0 * (m + LOG_EPS).log10());
    BScan {
        pixels,
        domain: ValueDomain::LogCompressed,
    }
}

fn depth_magnitudes(samples: &Array2) -> Array2 {
    let n_k = samples.rows();
    let depth = n_k / 2;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_k);
    let mut out = Array2::zeros(depth, samples.cols());
    let mut buf = vec![Complex::new(0.0, 0.0); n_k];
    for c in 0..samples.cols() {
        for (r, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(samples.get(r, c), 0.0);
        }
        fft.process(&mut buf);
        for (r, v) in buf.iter().take(depth).enumerate() {
            out.set(r, c, v.norm());
        }
    }
    out
}

/// Length of the vertical box filter; always odd.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeanFilterSpec {
    n: usize,
}

impl MeanFilterSpec {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n % 2 == 0 {
            return Err(Error::domain(format!("mean filter length must be odd and positive, got {n}")));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// `1 × n` vertical mean filter with replicate padding at the top and bottom.
pub fn mean_filter_vertical(img: &BScan, spec: &MeanFilterSpec) -> Result<BScan> {
    let (h, w) = img.pixels().shape();
    if spec.n() > h {
        return Err(Error::domain(format!(
            "filter length {} exceeds image height {h}",
            spec.n()
        )));
    }
    let half = (spec.n() / 2) as isize;
    let src = img.pixels();
    let norm = 1.0 / spec.n() as f64;
    let out = Array2::from_fn(h, w, |r, c| {
        let sum: f64 = (-half..=half)
            .map(|d| {
                let rr = (r as isize + d).clamp(0, h as isize - 1) as usize;
                src.get(rr, c)
            })
            .sum();
        sum * norm
    });
    BScan::new(out, img.domain())
}

/// Full width at half maximum of the peak at `argmax(profile)`, in samples.
///
/// Half-maximum crossings are located by linear interpolation on each side
/// of the peak. Returns `None` when the profile is empty, non-positive, or
/// the peak never falls to half maximum on one side.
pub fn fwhm(profile: &[f64]) -> Option<f64> {
    let (peak, &max) = profile
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    if max <= 0.0 {
        return None;
    }
    let half = max / 2.0;
    let left = (0..peak).rev().find(|&i| profile[i] < half).map(|i| {
        let (a, b) = (profile[i], profile[i + 1]);
        i as f64 + (half - a) / (b - a)
    })?;
    let right = (peak + 1..profile.len()).find(|&i| profile[i] < half).map(|i| {
        let (a, b) = (profile[i - 1], profile[i]);
        (i - 1) as f64 + (a - half) / (a - b)
    })?;
    Some(right - left)
}

/// Index of the largest element.
pub fn argmax(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
}
