//! End-to-end plumbing: phantom cohorts, the dataset directory, training
//! pairs, and a train-then-evaluate run driven by a [`RunConfig`].
//!
//! A dataset directory holds `manifest.tsv`, `dataset.txt` (the resolved
//! configuration that produced it) and one `eyes/<eye_id>.oct1` fringe
//! stack `[n_bscans, n_k, width]` per eye.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::array::Array2;
use crate::autodiff::{load_ckp1, save_ckp1, Ctx, ParamSet, Tensor, Var};
use crate::config::{Degradation, PipelineConfig, RunConfig};
use crate::error::{Error, Result};
use crate::io::{format_manifest, load_stack, parse_manifest, save_stack, ManifestEntry};
use crate::metrics::{evaluate_testset, EvalDomain, EvalSample, MetricReport};
use crate::models::{Discriminator, Network, ResUNetA, SrganGenerator};
use crate::phantom::{
    augment_spatial, augment_spectral, crop_axial, generate_eye, normalize_array, select_every_kth, split_by_patient,
    stream_seed, to_strips, AugmentSpec, EyeRecord, NormMode, Normalized, PhantomSpec, Split, SplitAssignment,
};
use crate::signal::{self, BScan, Fringe, Provenance};
use crate::train::{generate, train_run, GanModels, RunSummary, TrainData, TrainDomain};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const DATASET_CONFIG_FILE: &str = "dataset.txt";
pub const FINAL_TAG: &str = "final";

/// `(patient_id, eye_id)` for `n_eyes` eyes over `n_patients` patients.
/// The first `n_eyes - n_patients` patients contribute both eyes.
pub fn cohort_ids(n_eyes: usize, n_patients: usize) -> Result<Vec<(String, String)>> {
    if n_patients == 0 || n_patients > n_eyes || n_eyes > 2 * n_patients {
        return Err(Error::domain(format!(
            "{n_eyes} eyes cannot come from {n_patients} patients with one or two eyes each"
        )));
    }
    let pairs = n_eyes - n_patients;
    let mut ids = Vec::with_capacity(n_eyes);
    for p in 0..n_patients {
        let patient = format!("P{p:03}");
        let eyes: &[&str] = if p < pairs { &["OD", "OS"] } else { &["OD"] };
        for side in eyes {
            ids.push((patient.clone(), format!("{patient}_{side}")));
        }
    }
    Ok(ids)
}

/// Generates every eye (in parallel; each eye has its own RNG stream).
pub fn generate_cohort(spec: &PhantomSpec, ids: &[(String, String)]) -> Result<Vec<EyeRecord>> {
    ids.par_iter().map(|(p, e)| generate_eye(spec, p, e)).collect()
}

/// The phantom cohort and its patient-disjoint split, as configured.
pub fn phantom_cohort(cfg: &RunConfig) -> Result<(Vec<EyeRecord>, SplitAssignment)> {
    let (n_eyes, n_patients) = cfg.cohort()?;
    let ids = cohort_ids(n_eyes, n_patients)?;
    let eyes = generate_cohort(&cfg.phantom_spec()?, &ids)?;
    let split = split_by_patient(&ids, cfg.split_ratios()?, cfg.seed())?;
    Ok((eyes, split))
}

fn volume_stack(eye: &EyeRecord) -> Vec<Array2> {
    eye.volume.iter().map(|f| f.samples().clone()).collect()
}

/// Writes the dataset directory and returns its manifest entries.
pub fn write_dataset(dir: &Path, eyes: &[EyeRecord], split: &SplitAssignment, resolved: &str) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir.join("eyes"))?;
    let mut entries = Vec::with_capacity(eyes.len());
    for eye in eyes {
        let s = split
            .split_of(&eye.eye_id)
            .ok_or_else(|| Error::domain(format!("eye {} has no split", eye.eye_id)))?;
        let path = format!("eyes/{}.oct1", eye.eye_id);
        save_stack(&dir.join(&path), &volume_stack(eye))?;
        entries.push(ManifestEntry {
            patient_id: eye.patient_id.clone(),
            eye_id: eye.eye_id.clone(),
            split: s,
            path,
        });
    }
    fs::write(dir.join(MANIFEST_FILE), format_manifest(&entries))?;
    fs::write(dir.join(DATASET_CONFIG_FILE), resolved)?;
    Ok(entries)
}

/// Reads a dataset directory back into eyes and their split.
pub fn read_dataset(dir: &Path) -> Result<(Vec<EyeRecord>, SplitAssignment)> {
    let manifest = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest)
        .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", manifest.display())))?;
    let entries = parse_manifest(&text)?;
    let mut split = SplitAssignment::default();
    let mut eyes = Vec::with_capacity(entries.len());
    for e in entries {
        let volume = load_stack(&dir.join(&e.path))?
            .into_iter()
            .map(|a| Fringe::new(a, Provenance::GroundTruth))
            .collect::<Result<Vec<_>>>()?;
        match e.split {
            Split::Train => split.train.push(e.eye_id.clone()),
            Split::Val => split.val.push(e.eye_id.clone()),
            Split::Test => split.test.push(e.eye_id.clone()),
        }
        eyes.push(EyeRecord {
            patient_id: e.patient_id,
            eye_id: e.eye_id,
            volume,
        });
    }
    Ok((eyes, split))
}

/// Applies a degradation to one ground-truth fringe, returning the
/// degraded B-scan image. `log` selects the magnitude scale.
pub fn degrade_image(gt: &Fringe, degradation: &Degradation, log: bool) -> Result<BScan> {
    match degradation {
        Degradation::Window(w) => Ok(image(&signal::apply_spectral_window(gt, w)?, log)),
        Degradation::MeanFilter(m) => signal::mean_filter_vertical(&image(gt, log), m),
    }
}

fn image(f: &Fringe, log: bool) -> BScan {
    if log { signal::reconstruct_log(f) } else { signal::reconstruct(f) }
}

/// One training or evaluation sample, train-normalised to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub id: String,
    pub degraded: Normalized,
    pub gt: Normalized,
}

impl Pair {
    fn new(id: String, degraded: &Array2, gt: &Array2) -> Self {
        Self {
            id,
            degraded: normalize_array(degraded, NormMode::Train),
            gt: normalize_array(gt, NormMode::Train),
        }
    }

    pub fn arrays(&self) -> (Array2, Array2) {
        (self.degraded.values.clone(), self.gt.values.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl PairSet {
    pub fn get(&self, split: Split) -> &[Pair] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn train_data(&self) -> TrainData {
        TrainData {
            train: self.train.iter().map(Pair::arrays).collect(),
            val: self.val.iter().map(Pair::arrays).collect(),
        }
    }
}

/// Options for turning eyes into pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOptions {
    pub domain: TrainDomain,
    pub pipeline: PipelineConfig,
    pub degradation: Degradation,
    pub augment: AugmentSpec,
    pub seed: u64,
}

impl PairOptions {
    pub fn from_config(cfg: &RunConfig, n_k: usize) -> Result<Self> {
        Ok(Self {
            domain: cfg.domain(),
            pipeline: cfg.pipeline()?,
            degradation: cfg.degradation(n_k)?,
            augment: cfg.augment()?,
            seed: cfg.seed(),
        })
    }
}

fn strips(a: &Array2, width: Option<usize>) -> Result<Vec<Array2>> {
    match width {
        None => Ok(vec![a.clone()]),
        Some(w) => Ok(to_strips(&BScan::new(a.clone(), signal::ValueDomain::LinearMagnitude)?, w)?
            .into_iter()
            .map(BScan::into_pixels)
            .collect()),
    }
}

fn crop(img: BScan, crop: Option<(usize, usize)>) -> Result<Array2> {
    Ok(match crop {
        Some((top, height)) => crop_axial(&img, top, height)?.into_pixels(),
        None => img.into_pixels(),
    })
}

/// Raw `(degraded, gt)` arrays for one ground-truth fringe, before strips.
fn raw_pair(gt: &Fringe, degraded: Option<&Fringe>, opt: &PairOptions) -> Result<(Array2, Array2)> {
    let p = &opt.pipeline;
    match opt.domain {
        TrainDomain::Spatial => {
            let g = crop(image(gt, p.log), p.crop)?;
            let d = match degraded {
                Some(f) => image(f, p.log),
                None => degrade_image(gt, &opt.degradation, p.log)?,
            };
            Ok((crop(d, p.crop)?, g))
        }
        TrainDomain::Spectral => {
            if p.crop.is_some() {
                return Err(Error::Config("axial cropping applies to images, not to spectral training".into()));
            }
            let d = match (degraded, &opt.degradation) {
                (Some(f), _) => f.samples().clone(),
                (None, Degradation::Window(w)) => signal::apply_spectral_window(gt, w)?.into_samples(),
                (None, Degradation::MeanFilter(_)) => {
                    return Err(Error::Config("spectral training needs a spectral window degradation".into()))
                }
            };
            Ok((d, gt.samples().clone()))
        }
    }
}

fn eye_pairs(eye: &EyeRecord, augment_copies: usize, opt: &PairOptions) -> Result<Vec<Pair>> {
    let kept = select_every_kth(&eye.volume, opt.pipeline.every_kth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(opt.seed ^ 0xa46e_0000, &eye.eye_id));
    let mut out = Vec::new();
    for (b, f) in kept.iter().enumerate() {
        let idx = b * opt.pipeline.every_kth;
        let push = |out: &mut Vec<Pair>, tag: &str, d: &Array2, g: &Array2| -> Result<()> {
            for (s, (ds, gs)) in strips(d, opt.pipeline.strip_width)?
                .iter()
                .zip(strips(g, opt.pipeline.strip_width)?)
                .enumerate()
            {
                out.push(Pair::new(format!("{}_b{idx:03}_s{s:02}{tag}", eye.eye_id), ds, &gs));
            }
            Ok(())
        };
        let (d, g) = raw_pair(f, None, opt)?;
        push(&mut out, "", &d, &g)?;
        for c in 0..augment_copies {
            let tag = format!("_a{c}");
            match opt.domain {
                TrainDomain::Spatial => {
                    let (imgs, _) = augment_spatial(&[d.clone(), g.clone()], &opt.augment, &mut rng);
                    push(&mut out, &tag, &imgs[0], &imgs[1])?;
                }
                TrainDomain::Spectral => {
                    let (windowed, _) = augment_spectral(f, &opt.augment, &mut rng)?;
                    let (da, ga) = raw_pair(f, Some(&windowed), opt)?;
                    push(&mut out, &tag, &da, &ga)?;
                }
            }
        }
    }
    Ok(out)
}

/// Pairs for every split. Only training eyes receive augmented copies,
/// which are made here once rather than during training.
pub fn build_pairs(eyes: &[EyeRecord], split: &SplitAssignment, opt: &PairOptions) -> Result<PairSet> {
    let per_eye: Vec<(Split, Vec<Pair>)> = eyes
        .par_iter()
        .filter_map(|eye| split.split_of(&eye.eye_id).map(|s| (s, eye)))
        .map(|(s, eye)| {
            let copies = if s == Split::Train { opt.pipeline.augment_copies } else { 0 };
            Ok((s, eye_pairs(eye, copies, opt)?))
        })
        .collect::<Result<_>>()?;
    let mut set = PairSet::default();
    for (s, pairs) in per_eye {
        match s {
            Split::Train => set.train.extend(pairs),
            Split::Val => set.val.extend(pairs),
            Split::Test => set.test.extend(pairs),
        }
    }
    Ok(set)
}

/// Evaluation samples for generated outputs. Spectral outputs are mapped
/// back with their input's normalisation so every fringe returns to its
/// original scale before reconstruction.
pub fn eval_samples(pairs: &[Pair], generated: &[Array2], domain: TrainDomain) -> Result<Vec<EvalSample>> {
    if pairs.len() != generated.len() {
        return Err(Error::shape(format!("{} pairs but {} outputs", pairs.len(), generated.len())));
    }
    Ok(pairs
        .iter()
        .zip(generated)
        .map(|(p, g)| match domain {
            TrainDomain::Spatial => EvalSample {
                id: p.id.clone(),
                gt: p.gt.values.clone(),
                degraded: p.degraded.values.clone(),
                generated: g.clone(),
            },
            TrainDomain::Spectral => EvalSample {
                id: p.id.clone(),
                gt: p.gt.invert(&p.gt.values),
                degraded: p.degraded.invert(&p.degraded.values),
                generated: p.degraded.invert(g),
            },
        })
        .collect())
}

/// Either generator, so runs can be driven from configuration.
#[derive(Debug, Clone)]
pub enum AnyGenerator {
    Srgan(SrganGenerator),
    ResUNetA(ResUNetA),
}

impl Network for AnyGenerator {
    fn params(&self) -> &ParamSet {
        match self {
            Self::Srgan(g) => g.params(),
            Self::ResUNetA(g) => g.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Self::Srgan(g) => g.params_mut(),
            Self::ResUNetA(g) => g.params_mut(),
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            Self::Srgan(g) => g.forward(ctx, x),
            Self::ResUNetA(g) => g.forward(ctx, x),
        }
    }
}

/// The configured generator for samples of `(height, width)`.
pub fn build_generator(cfg: &RunConfig, (h, _w): (usize, usize)) -> Result<AnyGenerator> {
    Ok(match cfg.domain() {
        TrainDomain::Spatial => AnyGenerator::Srgan(SrganGenerator::new(cfg.generator()?, cfg.seed())?),
        TrainDomain::Spectral => AnyGenerator::ResUNetA(ResUNetA::new(cfg.resuneta(h)?, cfg.seed())?),
    })
}

pub fn build_models(cfg: &RunConfig, shape: (usize, usize)) -> Result<GanModels<AnyGenerator>> {
    let g = build_generator(cfg, shape)?;
    let d = Discriminator::new(cfg.discriminator(cfg.domain(), shape)?, cfg.seed().wrapping_add(1))?;
    GanModels::new(g, d, &cfg.train()?)
}

pub fn eval_domain(cfg: &RunConfig) -> Result<EvalDomain> {
    Ok(match cfg.domain() {
        TrainDomain::Spatial => EvalDomain::Spatial,
        TrainDomain::Spectral => EvalDomain::Spectral { log: cfg.pipeline()?.log },
    })
}

/// Runs `generator` over `pairs` and scores the outputs.
pub fn evaluate_generator<G: Network>(generator: &G, pairs: &[Pair], cfg: &RunConfig) -> Result<MetricReport> {
    let inputs: Vec<&Array2> = pairs.iter().map(|p| &p.degraded.values).collect();
    let precision = cfg.train()?.precision;
    let generated = generate(generator, &inputs, precision)?;
    let samples = eval_samples(pairs, &generated, cfg.domain())?;
    evaluate_testset(&samples, eval_domain(cfg)?, &cfg.eval()?)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub report: MetricReport,
    /// Checkpoint of the generator that was evaluated.
    pub final_checkpoint: PathBuf,
    pub models: GanModels<AnyGenerator>,
}

fn sample_shape(pairs: &PairSet) -> Result<(usize, usize)> {
    pairs
        .train
        .first()
        .map(|p| p.gt.values.shape())
        .ok_or_else(|| Error::domain("no training pairs"))
}

/// Trains as configured, saves the final models, and evaluates the final
/// generator, as restored from its checkpoint, on the test pairs. Metrics
/// land in the run directory.
pub fn train_and_evaluate(cfg: &RunConfig, pairs: &PairSet) -> Result<RunOutput> {
    let tc = cfg.train()?;
    let mut models = build_models(cfg, sample_shape(pairs)?)?;
    if let Some(path) = cfg.init_checkpoint() {
        let restored = models.load_checkpoint(&load_ckp1(&path)?)?;
        log::info!("warm start from {} (discriminator restored: {restored})", path.display());
    }
    let summary = train_run(&mut models, &pairs.train_data(), &tc, &cfg.to_text())?;
    let step = summary.losses.last().map_or(0, |r| r.step);
    let final_checkpoint = tc.save_dir.join(format!("ckpt_{step}_{FINAL_TAG}.ckp1"));
    save_ckp1(&final_checkpoint, &models.named())?;
    if pairs.test.is_empty() {
        return Err(Error::domain("no test pairs to evaluate"));
    }
    // Score what the run directory holds, so `eval` on it reproduces the report.
    let restored = load_generator(cfg, &final_checkpoint, sample_shape(pairs)?)?;
    let report = evaluate_generator(&restored, &pairs.test, cfg)?;
    report.write(&tc.save_dir)?;
    Ok(RunOutput {
        summary,
        report,
        final_checkpoint,
        models,
    })
}

/// A generator restored from a checkpoint written by a run.
pub fn load_generator(cfg: &RunConfig, checkpoint: &Path, shape: (usize, usize)) -> Result<AnyGenerator> {
    let mut g = build_generator(cfg, shape)?;
    let entries: Vec<(String, Tensor)> = load_ckp1(checkpoint)?;
    let wanted: Vec<(String, Tensor)> = entries
        .into_iter()
        .filter(|(n, _)| g.params().iter().any(|p| p.name == *n))
        .collect();
    g.params_mut().load_named(&wanted)?;
    Ok(g)
}

/// The newest `ckpt_<step>_final.ckp1` in a run directory.
pub fn final_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(run_dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let step = name
            .strip_prefix("ckpt_")
            .and_then(|r| r.strip_suffix(&format!("_{FINAL_TAG}.ckp1")))
            .and_then(|s| s.parse::<usize>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::Config(format!("no final checkpoint in {}", run_dir.display())))
}
