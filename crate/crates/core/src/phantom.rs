//! Synthetic layered-retina volumes and the data-pipeline rules applied to
//! them: patient-disjoint splits, B-scan subsampling, cropping, strips,
//! normalisation and augmentation.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::array::Array2;
use crate::error::{Error, Result};
use crate::signal::{self, BScan, Fringe, Provenance, ValueDomain, WindowSpec};

/// Parameters of the synthetic retina.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// Layer depths as fractions of the imaging range, strictly increasing in `(0, 1)`.
    pub layer_depths: Vec<f64>,
    pub layer_reflectivities: Vec<f64>,
    /// Mean number of point scatterers per A-scan.
    pub speckle_density: f64,
    /// Scale of the exponentially distributed scatterer reflectivities.
    pub speckle_reflectivity: f64,
    /// Peak lateral displacement of the layers, as a fraction of depth.
    pub layer_undulation: f64,
    /// Per-eye random shift of all layers, as a fraction of depth.
    pub depth_jitter: f64,
    /// `gausswin` alpha of the broad source spectrum.
    pub envelope_alpha: f64,
    pub noise_sigma: f64,
    pub n_k: usize,
    pub width: usize,
    pub n_bscans_per_eye: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            layer_depths: vec![0.18, 0.26, 0.42, 0.55, 0.63],
            layer_reflectivities: vec![1.0, 0.45, 0.6, 0.35, 0.9],
            speckle_density: 24.0,
            speckle_reflectivity: 0.12,
            layer_undulation: 0.03,
            depth_jitter: 0.04,
            envelope_alpha: 1.5,
            noise_sigma: 0.01,
            n_k: 512,
            width: 64,
            n_bscans_per_eye: 32,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn n_layers(&self) -> usize {
        self.layer_depths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_depths.len() != self.layer_reflectivities.len() {
            return Err(Error::domain("one reflectivity per layer required"));
        }
        if self.layer_depths.iter().any(|&d| !(d > 0.0 && d < 1.0)) {
            return Err(Error::domain("layer depths must lie in (0, 1)"));
        }
        if self.layer_depths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("layer depths must be strictly increasing"));
        }
        if self.layer_reflectivities.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::domain("layer reflectivities must be positive"));
        }
        if !self.n_k.is_power_of_two() || self.n_k < 2 {
            return Err(Error::domain(format!("n_k must be a power of two, got {}", self.n_k)));
        }
        let nonneg = [
            self.speckle_density,
            self.speckle_reflectivity,
            self.layer_undulation,
            self.depth_jitter,
            self.noise_sigma,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::domain("speckle, undulation, jitter and noise parameters must be non-negative"));
        }
        if !(self.envelope_alpha > 0.0) {
            return Err(Error::domain("envelope alpha must be positive"));
        }
        if self.width == 0 || self.n_bscans_per_eye == 0 {
            return Err(Error::domain("width and B-scans per eye must be positive"));
        }
        Ok(())
    }
}

/// One eye: an ordered stack of ground-truth fringes, one per B-scan.
#[derive(Debug, Clone, PartialEq)]
pub struct EyeRecord {
    pub patient_id: String,
    pub eye_id: String,
    pub volume: Vec<Fringe>,
}

/// FNV-1a, used to derive per-eye RNG streams from `(seed, eye_id)`.
pub(crate) fn stream_seed(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Adds `amp·cos(2π·bin·k/n + phase)` for every `k` by complex rotation.
fn add_reflector(out: &mut [f64], bin: f64, phase: f64, amp: f64) {
    let n = out.len() as f64;
    let (mut re, mut im) = (amp * phase.cos(), amp * phase.sin());
    let step = 2.0 * PI * bin / n;
    let (c, s) = (step.cos(), step.sin());
    for v in out.iter_mut() {
        *v += re;
        let r = re * c - im * s;
        im = re * s + im * c;
        re = r;
    }
}

/// Synthesises one eye volume; deterministic in `(spec.seed, eye_id)`.
///
/// Each A-scan is `Σ R cos(2π f k / n_k + φ)` over layer and speckle
/// reflectors, with `f = depth·n_k/2`, multiplied by a broad Gaussian
/// source envelope, plus Gaussian detector noise.
pub fn generate_eye(spec: &PhantomSpec, patient_id: &str, eye_id: &str) -> Result<EyeRecord> {
    spec.validate()?;
    let mut eye_rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, eye_id));
    let shift = if spec.depth_jitter > 0.0 {
        eye_rng.random_range(-spec.depth_jitter..=spec.depth_jitter)
    } else {
        0.0
    };
    let wave_phase = eye_rng.random_range(0.0..2.0 * PI);
    let wave_cycles = eye_rng.random_range(0.5..1.5);
    let envelope = signal::gausswin(spec.n_k, spec.envelope_alpha)?;
    let half = spec.n_k as f64 / 2.0;
    let (tissue_top, tissue_bottom) = match (spec.layer_depths.first(), spec.layer_depths.last()) {
        (Some(&a), Some(&b)) => ((a - 0.02).max(0.0), (b + 0.08).min(0.98)),
        _ => (0.02, 0.98),
    };
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let seeds: Vec<u64> = (0..spec.n_bscans_per_eye).map(|_| eye_rng.random()).collect();

    let volume = seeds
        .par_iter()
        .enumerate()
        .map(|(b, &bseed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(bseed);
            let mut samples = Array2::zeros(spec.n_k, spec.width);
            let mut col = vec![0.0; spec.n_k];
            let slow = (b as f64 / spec.n_bscans_per_eye as f64) * 0.5;
            for j in 0..spec.width {
                col.fill(0.0);
                let lateral = j as f64 / spec.width as f64;
                let bend = spec.layer_undulation * (2.0 * PI * (wave_cycles * lateral + slow) + wave_phase).sin();
                for (&d, &r) in spec.layer_depths.iter().zip(&spec.layer_reflectivities) {
                    let depth = (d + shift + bend).clamp(0.0, 0.999);
                    add_reflector(&mut col, depth * half, rng.random_range(0.0..2.0 * PI), r);
                }
                if spec.speckle_density > 0.0 {
                    let count = poisson_like(spec.speckle_density, &mut rng);
                    for _ in 0..count {
                        let depth = (rng.random_range(tissue_top..tissue_bottom) + shift + bend).clamp(0.0, 0.999);
                        let amp = -spec.speckle_reflectivity * (1.0 - rng.random::<f64>()).ln();
                        add_reflector(&mut col, depth * half, rng.random_range(0.0..2.0 * PI), amp);
                    }
                }
                for (k, v) in col.iter_mut().enumerate() {
                    *v *= envelope[k];
                    if spec.noise_sigma > 0.0 {
                        *v += noise.sample(&mut rng);
                    }
                }
                samples.set_column(j, &col);
            }
            Fringe::new(samples, Provenance::GroundTruth)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(EyeRecord {
        patient_id: patient_id.to_owned(),
        eye_id: eye_id.to_owned(),
        volume,
    })
}

/// Integer count with the given mean: `floor(mean)` plus a Bernoulli draw
/// for the fractional part.
fn poisson_like<R: Rng>(mean: f64, rng: &mut R) -> usize {
    let base = mean.floor();
    base as usize + usize::from(rng.random::<f64>() < mean - base)
}

/// Which split an eye belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

/// Eye identifiers per split.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn split_of(&self, eye_id: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|&s| self.get(s).iter().any(|e| e == eye_id))
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }
}

/// Largest-remainder apportionment of `total` items over `ratios`.
pub fn largest_remainder(total: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| r * total as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    // Stable: ties keep split order.
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Patient-disjoint split with eye counts given by largest-remainder
/// rounding of `ratios`.
///
/// Patients are shuffled with `seed`, then packed into the three splits by
/// a depth-first search that hits the target eye counts exactly whenever
/// the patients' eye counts allow it. If no exact packing exists the
/// packing with the smallest total deviation is used.
pub fn split_by_patient(eyes: &[(String, String)], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("split ratios must be non-negative and sum to 1, got {ratios:?}")));
    }
    let mut seen = HashSet::new();
    for (_, eye) in eyes {
        if !seen.insert(eye.as_str()) {
            return Err(Error::domain(format!("duplicate eye id {eye}")));
        }
    }

    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&str>> = HashMap::new();
    for (patient, eye) in eyes {
        let entry = groups.entry(patient.as_str()).or_default();
        if entry.is_empty() {
            order.push(patient.as_str());
        }
        entry.push(eye.as_str());
    }
    let active = ratios.iter().filter(|&&r| r > 0.0).count();
    if order.len() < active {
        return Err(Error::domain(format!(
            "{} patients cannot fill {active} non-empty splits",
            order.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    // Larger families first makes the search fail fast.
    order.sort_by_key(|p| std::cmp::Reverse(groups[p].len()));
    let sizes: Vec<usize> = order.iter().map(|p| groups[p].len()).collect();
    let targets = largest_remainder(eyes.len(), ratios);

    let placement = exact_packing(&sizes, targets).unwrap_or_else(|| closest_packing(&sizes, targets));

    let mut out = SplitAssignment::default();
    for (patient, split) in order.iter().zip(placement) {
        out.get_mut(split).extend(groups[patient].iter().map(|e| e.to_string()));
    }
    Ok(out)
}

fn exact_packing(sizes: &[usize], targets: [usize; 3]) -> Option<Vec<Split>> {
    fn go(
        i: usize,
        sizes: &[usize],
        left: [usize; 3],
        out: &mut Vec<Split>,
        dead: &mut HashSet<(usize, usize, usize)>,
    ) -> bool {
        if i == sizes.len() {
            return left == [0, 0, 0];
        }
        if dead.contains(&(i, left[0], left[1])) {
            return false;
        }
        let mut choices = [0usize, 1, 2];
        choices.sort_by_key(|&s| std::cmp::Reverse(left[s]));
        for s in choices {
            if left[s] >= sizes[i] {
                let mut next = left;
                next[s] -= sizes[i];
                out.push(Split::ALL[s]);
                if go(i + 1, sizes, next, out, dead) {
                    return true;
                }
                out.pop();
            }
        }
        dead.insert((i, left[0], left[1]));
        false
    }
    let mut out = Vec::with_capacity(sizes.len());
    go(0, sizes, targets, &mut out, &mut HashSet::new()).then_some(out)
}

/// Greedy fallback: each patient goes to the split with the largest
/// remaining deficit.
fn closest_packing(sizes: &[usize], targets: [usize; 3]) -> Vec<Split> {
    let mut left = targets.map(|t| t as isize);
    sizes
        .iter()
        .map(|&n| {
            let s = (0..3).max_by_key(|&s| (left[s], std::cmp::Reverse(s))).expect("three splits");
            left[s] -= n as isize;
            Split::ALL[s]
        })
        .collect()
}

/// Indices `0, k, 2k, …` below `len`.
pub fn every_kth_indices(len: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::domain("stride k must be at least 1"));
    }
    Ok((0..len).step_by(k).collect())
}

/// Keeps every `k`-th element, starting with the first.
pub fn select_every_kth<T: Clone>(volume: &[T], k: usize) -> Result<Vec<T>> {
    Ok(every_kth_indices(volume.len(), k)?
        .into_iter()
        .map(|i| volume[i].clone())
        .collect())
}

/// Rows `[top, top + height)`.
pub fn crop_axial(img: &BScan, top: usize, height: usize) -> Result<BScan> {
    BScan::new(img.pixels().row_slice(top, height)?, img.domain())
}

/// Non-overlapping vertical strips of `strip_width` A-scans, left to right.
pub fn to_strips(img: &BScan, strip_width: usize) -> Result<Vec<BScan>> {
    if strip_width == 0 || img.width() % strip_width != 0 {
        return Err(Error::domain(format!(
            "width {} is not divisible by strip width {strip_width}",
            img.width()
        )));
    }
    (0..img.width() / strip_width)
        .map(|i| BScan::new(img.pixels().col_slice(i * strip_width, strip_width)?, img.domain()))
        .collect()
}

/// Inverse of [`to_strips`].
pub fn concat_strips(strips: &[BScan]) -> Result<BScan> {
    let domain = strips
        .first()
        .ok_or_else(|| Error::shape("no strips to concatenate"))?
        .domain();
    let parts: Vec<Array2> = strips.iter().map(|s| s.pixels().clone()).collect();
    BScan::new(Array2::hconcat(&parts)?, domain)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// `[min, max] → [-1, 1]`.
    Train,
    /// `[min, max] → [0, 1]`.
    Eval,
}

/// `y = scale·x + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    pub scale: f64,
    pub offset: f64,
}

impl AffineMap {
    pub fn apply(&self, a: &Array2) -> Array2 {
        a.map(|v| self.scale * v + self.offset)
    }

    /// Maps normalised values back to the original range. A degenerate map
    /// (zero scale) sends everything to `offset`'s preimage, i.e. the
    /// original constant.
    pub fn invert(&self, a: &Array2, original_constant: f64) -> Array2 {
        if self.scale == 0.0 {
            return Array2::filled(a.rows(), a.cols(), original_constant);
        }
        a.map(|v| (v - self.offset) / self.scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Array2,
    pub map: AffineMap,
    /// Set when the input was constant (or empty) and mapped to all zeros.
    pub degenerate: bool,
    /// Input minimum, used to invert a degenerate map.
    pub min: f64,
}

impl Normalized {
    pub fn invert(&self, a: &Array2) -> Array2 {
        self.map.invert(a, self.min)
    }
}

/// Affine min–max normalisation of any 2-D array.
pub fn normalize_array(a: &Array2, mode: NormMode) -> Normalized {
    let (lo, hi) = match mode {
        NormMode::Train => (-1.0, 1.0),
        NormMode::Eval => (0.0, 1.0),
    };
    match a.min_max() {
        Some((min, max)) if max > min && (max - min).is_finite() => {
            let scale = (hi - lo) / (max - min);
            let offset = lo - min * scale;
            // Clamp so that rounding never leaves the target interval.
            let values = a.map(|v| (scale * v + offset).clamp(lo, hi));
            Normalized {
                values,
                map: AffineMap { scale, offset },
                degenerate: false,
                min,
            }
        }
        other => Normalized {
            values: Array2::zeros(a.rows(), a.cols()),
            map: AffineMap {
                scale: 0.0,
                offset: 0.0,
            },
            degenerate: true,
            min: other.map_or(0.0, |(m, _)| m),
        },
    }
}

/// [`normalize_array`] on an image, tagging its value domain.
pub fn normalize(img: &BScan, mode: NormMode) -> Result<(BScan, Normalized)> {
    let n = normalize_array(img.pixels(), mode);
    let domain = match mode {
        NormMode::Train => ValueDomain::TrainNormalized,
        NormMode::Eval => ValueDomain::UnitNormalized,
    };
    Ok((BScan::new(n.values.clone(), domain)?, n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub h_flip: bool,
    pub v_flip: bool,
    /// Largest absolute shift of the window centre, in samples.
    pub window_center_jitter: f64,
    pub window_alpha_range: (f64, f64),
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            h_flip: true,
            v_flip: true,
            window_center_jitter: 0.0,
            window_alpha_range: (8.0, 8.0),
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.window_alpha_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::domain(format!("invalid alpha range [{lo}, {hi}]")));
        }
        if !(self.window_center_jitter >= 0.0 && self.window_center_jitter.is_finite()) {
            return Err(Error::domain("window centre jitter must be non-negative"));
        }
        Ok(())
    }
}

/// Flips chosen for one spatial augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

impl Flips {
    pub fn apply(&self, a: &Array2) -> Array2 {
        let mut out = a.clone();
        if self.horizontal {
            out = out.flip_horizontal();
        }
        if self.vertical {
            out = out.flip_vertical();
        }
        out
    }
}

/// Draws independent 50 % horizontal and vertical flips (for the enabled
/// axes) and applies the same flips to every image of the sample.
pub fn augment_spatial<R: Rng>(images: &[Array2], spec: &AugmentSpec, rng: &mut R) -> (Vec<Array2>, Flips) {
    let flips = Flips {
        horizontal: spec.h_flip && rng.random::<bool>(),
        vertical: spec.v_flip && rng.random::<bool>(),
    };
    (images.iter().map(|a| flips.apply(a)).collect(), flips)
}

/// Draws a window centre offset in `[-jitter, jitter]` around the middle of
/// the spectrum and an alpha in the configured range, then windows the
/// fringe.
pub fn augment_spectral<R: Rng>(fringe: &Fringe, spec: &AugmentSpec, rng: &mut R) -> Result<(Fringe, WindowSpec)> {
    spec.validate()?;
    let n_k = fringe.n_k();
    let mid = (n_k - 1) as f64 / 2.0;
    if spec.window_center_jitter > mid {
        return Err(Error::domain(format!(
            "centre jitter {} can leave the spectrum of length {n_k}",
            spec.window_center_jitter
        )));
    }
    let j = spec.window_center_jitter;
    let offset = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
    let (lo, hi) = spec.window_alpha_range;
    let alpha = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let window = WindowSpec::new(n_k, alpha, mid + offset)?;
    Ok((signal::apply_spectral_window(fringe, &window)?, window))
}
