//! Adversarial training: alternating discriminator and generator updates,
//! the checkpoint rule and run-directory bookkeeping.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::Array2;
use crate::autodiff::{bce_mean, save_ckp1, AdamState, Ctx, Graph, Mode, Precision, Tensor};
use crate::error::{Error, Result};
use crate::io::encode_pgm;
use crate::metrics::{self, EvalConfig, EvalDomain, EvalSample};
use crate::models::{image_batch, split_images, Discriminator, Network};

/// Epoch after which spectral runs are flagged as likely to overfit.
pub const SPECTRAL_EPOCH_LIMIT: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainDomain {
    /// Samples are B-scans fed whole to the networks.
    Spatial,
    /// Samples are fringes fed to the networks one A-scan at a time.
    Spectral,
}

impl TrainDomain {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainDomain::Spatial => "spatial",
            TrainDomain::Spectral => "spectral",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointCadence {
    /// Rule evaluated on the mean losses of each epoch.
    Epoch,
    /// Rule evaluated on every step.
    Step,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub domain: TrainDomain,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub lambda_adv: f64,
    pub seed: u64,
    /// Validation metrics period in steps; 0 disables them.
    pub eval_every: usize,
    /// Stop after this many generator steps.
    pub max_steps: Option<usize>,
    pub checkpoint: CheckpointCadence,
    pub bn_momentum: f64,
    pub precision: Precision,
    pub save_dir: PathBuf,
    /// Stop once this many consecutive validations fail to improve the
    /// validation SSIM; 0 disables early stopping.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            domain: TrainDomain::Spatial,
            epochs: 100,
            batch_size: 10,
            lr_g: 1e-4,
            lr_d: 1e-4,
            beta1: 0.5,
            lambda_adv: 1e-3,
            seed: 0,
            eval_every: 0,
            max_steps: None,
            checkpoint: CheckpointCadence::Epoch,
            bn_momentum: 0.9,
            precision: Precision::F32,
            save_dir: PathBuf::from("run"),
            early_stop_patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::domain("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::domain("batch size must be at least 2 for batch normalisation"));
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::domain("lambda_adv must be a non-negative number"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::domain("batch-norm momentum must lie in [0, 1)"));
        }
        AdamState::with_defaults(self.lr_g, self.beta1)?;
        AdamState::with_defaults(self.lr_d, self.beta1)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub epoch: usize,
    pub i_mse: f64,
    pub i_gt: f64,
    pub i_generated: f64,
    /// Adversarial BCE of the generated batch against the "real" label,
    /// measured before the discriminator update.
    pub g_adv: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [self.i_mse, self.i_gt, self.i_generated, self.g_adv].iter().all(|v| v.is_finite())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e}",
            self.step, self.epoch, self.i_mse, self.i_gt, self.i_generated, self.g_adv
        )
    }
}

pub const LOSS_CSV_HEADER: &str = "step,epoch,i_mse,i_gt,i_generated,g_adv";

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(p: &[f64], y: f64) -> f64 {
    bce_mean(p, y)
}

/// Pixel-wise mean squared error.
pub fn content_loss(gen: &[f64], gt: &[f64]) -> Result<f64> {
    if gen.len() != gt.len() || gen.is_empty() {
        return Err(Error::shape("content loss needs equally sized non-empty inputs"));
    }
    Ok(gen.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / gen.len() as f64)
}

/// Generator, discriminator and their optimisers.
#[derive(Debug, Clone)]
pub struct GanModels<G> {
    pub generator: G,
    pub discriminator: Discriminator,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
}

impl<G: Network> GanModels<G> {
    pub fn new(generator: G, discriminator: Discriminator, config: &TrainConfig) -> Result<Self> {
        Ok(Self {
            generator,
            discriminator,
            opt_g: AdamState::with_defaults(config.lr_g, config.beta1)?,
            opt_d: AdamState::with_defaults(config.lr_d, config.beta1)?,
        })
    }

    /// Warm start from checkpoint tensors. Every generator tensor must be
    /// present. The discriminator is restored only when the checkpoint
    /// holds a complete, shape-compatible set for it; otherwise it keeps
    /// its initialisation. Returns whether it was restored.
    pub fn load_checkpoint(&mut self, entries: &[(String, Tensor)]) -> Result<bool> {
        let pick = |ps: &crate::autodiff::ParamSet| -> Vec<(String, Tensor)> {
            entries
                .iter()
                .filter(|(name, _)| ps.iter().any(|p| p.name == *name))
                .cloned()
                .collect()
        };
        let g_entries = pick(self.generator.params());
        self.generator.params_mut().load_named(&g_entries)?;
        let mut d_params = self.discriminator.params().clone();
        let restored = d_params.load_named(&pick(&d_params)).is_ok();
        if restored {
            *self.discriminator.params_mut() = d_params;
        }
        Ok(restored)
    }

    /// Generator then discriminator parameters, for checkpoints.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut v = self.generator.params().named();
        v.extend(self.discriminator.params().named());
        v
    }
}

/// Network-ready input and target.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub degraded: Tensor,
    pub gt: Tensor,
}

impl Batch {
    pub fn from_pairs(pairs: &[&(Array2, Array2)]) -> Result<Self> {
        let deg: Vec<&Array2> = pairs.iter().map(|p| &p.0).collect();
        let gt: Vec<&Array2> = pairs.iter().map(|p| &p.1).collect();
        Ok(Self {
            degraded: image_batch(&deg)?,
            gt: image_batch(&gt)?,
        })
    }
}

fn numerical(step: usize, what: &str, values: &[(&str, f64)]) -> Error {
    let mut s = format!("non-finite {what} at step {step}:");
    for (k, v) in values {
        let _ = write!(s, " {k}={v}");
    }
    Error::Numerical(s)
}

/// One discriminator update on `x` against a constant label.
fn d_update(models_d: &mut Discriminator, opt: &mut AdamState, x: &Tensor, label: f64, cfg: &TrainConfig) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new(cfg.precision);
    let xv = g.constant(x.clone());
    let mut ctx = Ctx::new(&mut g, models_d.params(), Mode::Train, true);
    let p = models_d.forward(&mut ctx, xv)?;
    let (bound, updates) = ctx.finish();
    let loss = g.bce(p, label);
    g.backward(loss)?;
    let probs = g.value(p).data().to_vec();
    let grads = bound.grads(&g);
    opt.step(models_d.params_mut(), &grads)?;
    models_d.params_mut().apply_bn_updates(&updates, cfg.bn_momentum);
    Ok((g.value(loss).item(), probs))
}

/// One adversarial step: a discriminator update on the ground-truth batch,
/// a second on the generated batch, then a generator update on
/// `i_mse + lambda_adv · BCE(D(G(x)), 1)` with the discriminator frozen.
///
/// With `lambda_adv == 0` the discriminator is not consulted for the
/// generator update at all.
pub fn gan_step<G: Network>(batch: &Batch, models: &mut GanModels<G>, config: &TrainConfig, step: usize, epoch: usize) -> Result<LossReport> {
    let mut g = Graph::new(config.precision);
    let x = g.constant(batch.degraded.clone());
    let t = g.constant(batch.gt.clone());
    let mut ctx = Ctx::new(&mut g, models.generator.params(), Mode::Train, true);
    let fake = models.generator.forward(&mut ctx, x)?;
    let (bound_g, g_updates) = ctx.finish();
    let fake_value = g.value(fake).clone();

    let (i_gt, _) = d_update(&mut models.discriminator, &mut models.opt_d, &batch.gt, 1.0, config)?;
    let (i_generated, fake_probs) = d_update(&mut models.discriminator, &mut models.opt_d, &fake_value, 0.0, config)?;
    let g_adv = bce_mean(&fake_probs, 1.0);

    let i_mse_var = g.mse(fake, t)?;
    let i_mse = g.value(i_mse_var).item();
    let loss = if config.lambda_adv > 0.0 {
        let mut dctx = Ctx::new(&mut g, models.discriminator.params(), Mode::Train, false);
        let p = models.discriminator.forward(&mut dctx, fake)?;
        drop(dctx);
        let adv = g.bce(p, 1.0);
        let weighted = g.scale(adv, config.lambda_adv);
        g.add(i_mse_var, weighted)?
    } else {
        i_mse_var
    };
    let total = g.value(loss).item();
    let report = LossReport {
        step,
        epoch,
        i_mse,
        i_gt,
        i_generated,
        g_adv,
    };
    if !report.all_finite() || !total.is_finite() {
        return Err(numerical(
            step,
            "loss",
            &[("i_mse", i_mse), ("i_gt", i_gt), ("i_generated", i_generated), ("g_adv", g_adv), ("g_total", total)],
        ));
    }
    g.backward(loss)?;
    let grads = bound_g.grads(&g);
    if grads.iter().flatten().any(|t| !t.all_finite()) {
        return Err(numerical(step, "generator gradient", &[("i_mse", i_mse)]));
    }
    models.opt_g.step(models.generator.params_mut(), &grads)?;
    models.generator.params_mut().apply_bn_updates(&g_updates, config.bn_momentum);
    Ok(report)
}

/// Best value seen so far of each tracked loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestSoFar {
    pub i_mse: f64,
    pub i_gt: f64,
    pub i_generated: f64,
}

impl Default for BestSoFar {
    fn default() -> Self {
        Self {
            i_mse: f64::INFINITY,
            i_gt: f64::NEG_INFINITY,
            i_generated: f64::NEG_INFINITY,
        }
    }
}

/// Which triggers of the save rule fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SaveReason {
    pub i_mse: bool,
    pub i_gt: bool,
    pub i_generated: bool,
}

impl SaveReason {
    pub fn any(&self) -> bool {
        self.i_mse || self.i_gt || self.i_generated
    }

    /// e.g. `i_mse+i_gt`.
    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if self.i_mse {
            parts.push("i_mse");
        }
        if self.i_gt {
            parts.push("i_gt");
        }
        if self.i_generated {
            parts.push("i_generated");
        }
        parts.join("+")
    }
}

/// Save when `i_mse` is lower, or `i_gt` or `i_generated` higher, than its
/// best so far. Returns the reason (if any) and the updated bests.
pub fn checkpoint_rule(history: &BestSoFar, new: &LossReport) -> (Option<SaveReason>, BestSoFar) {
    let reason = SaveReason {
        i_mse: new.i_mse < history.i_mse,
        i_gt: new.i_gt > history.i_gt,
        i_generated: new.i_generated > history.i_generated,
    };
    let best = BestSoFar {
        i_mse: if reason.i_mse { new.i_mse } else { history.i_mse },
        i_gt: if reason.i_gt { new.i_gt } else { history.i_gt },
        i_generated: if reason.i_generated {
            new.i_generated
        } else {
            history.i_generated
        },
    };
    (reason.any().then_some(reason), best)
}

/// Train-normalised `(degraded, gt)` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainData {
    pub train: Vec<(Array2, Array2)>,
    pub val: Vec<(Array2, Array2)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub losses: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
    pub warnings: Vec<String>,
    /// `(step, mean ssim, mean nrmse)` of the generated validation images.
    pub validation: Vec<(usize, f64, f64)>,
}

/// Runs the generator over `inputs` in inference mode, in chunks.
pub fn generate<G: Network>(generator: &G, inputs: &[&Array2], precision: Precision) -> Result<Vec<Array2>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(8) {
        let y = generator.infer(&image_batch(chunk)?, precision)?;
        out.extend(split_images(&y)?);
    }
    Ok(out)
}

fn mean_losses(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let last = reports.last().expect("non-empty epoch");
    LossReport {
        step: last.step,
        epoch: last.epoch,
        i_mse: reports.iter().map(|r| r.i_mse).sum::<f64>() / n,
        i_gt: reports.iter().map(|r| r.i_gt).sum::<f64>() / n,
        i_generated: reports.iter().map(|r| r.i_generated).sum::<f64>() / n,
        g_adv: reports.iter().map(|r| r.g_adv).sum::<f64>() / n,
    }
}

fn to_unit(a: &Array2) -> Array2 {
    crate::phantom::normalize_array(a, crate::phantom::NormMode::Eval).values
}

/// Trains on `data.train` and writes the run directory:
/// `config.txt`, `losses.csv`, `ckpt_<step>_<reason>.ckp1` and
/// `samples/step_<n>_{degraded,gt,generated}.pgm`.
///
/// Every epoch visits the training pairs in a fresh order drawn from the
/// seed; a trailing batch smaller than two is dropped.
pub fn train_run<G: Network>(models: &mut GanModels<G>, data: &TrainData, config: &TrainConfig, resolved_config: &str) -> Result<RunSummary> {
    config.validate()?;
    if data.train.len() < 2 {
        return Err(Error::domain(format!("{} training pairs cannot fill a batch", data.train.len())));
    }
    let dir = &config.save_dir;
    fs::create_dir_all(dir.join("samples"))?;
    fs::write(dir.join("config.txt"), resolved_config)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_ba7c);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    let mut summary = RunSummary {
        dir: dir.clone(),
        losses: Vec::new(),
        checkpoints: Vec::new(),
        warnings: Vec::new(),
        validation: Vec::new(),
    };
    let mut best = BestSoFar::default();
    let mut step = 0;
    let max_steps = config.max_steps.unwrap_or(usize::MAX);

    let mut stop = false;
    let (mut best_val, mut stale) = (f64::NEG_INFINITY, 0);
    for epoch in 1..=config.epochs {
        if config.domain == TrainDomain::Spectral && epoch == SPECTRAL_EPOCH_LIMIT + 1 {
            let msg = format!(
                "spectral training continues past epoch {SPECTRAL_EPOCH_LIMIT}; expect overfitting, monitor validation"
            );
            log::warn!("{msg}");
            summary.warnings.push(msg);
        }
        order.shuffle(&mut rng);
        let mut epoch_reports = Vec::new();
        for idx in order.chunks(config.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            if step >= max_steps {
                stop = true;
                break;
            }
            step += 1;
            let pairs: Vec<&(Array2, Array2)> = idx.iter().map(|&i| &data.train[i]).collect();
            let batch = Batch::from_pairs(&pairs)?;
            let report = gan_step(&batch, models, config, step, epoch)?;
            csv.push_str(&report.csv_row());
            csv.push('\n');
            summary.losses.push(report);
            epoch_reports.push(report);

            if config.checkpoint == CheckpointCadence::Step {
                save_if_improved(models, &report, &mut best, dir, &mut summary)?;
            }
            if config.eval_every > 0 && step % config.eval_every == 0 && !data.val.is_empty() {
                let ssim = validate(models, data, config, step, &mut summary)?;
                if ssim > best_val {
                    best_val = ssim;
                    stale = 0;
                } else {
                    stale += 1;
                }
                if config.early_stop_patience > 0 && stale >= config.early_stop_patience {
                    log::info!("early stop at step {step}: validation ssim has not improved for {stale} checks");
                    stop = true;
                    break;
                }
            }
        }
        if config.checkpoint == CheckpointCadence::Epoch && !epoch_reports.is_empty() {
            save_if_improved(models, &mean_losses(&epoch_reports), &mut best, dir, &mut summary)?;
        }
        fs::write(dir.join("losses.csv"), &csv)?;
        if stop || step >= max_steps {
            break;
        }
    }
    fs::write(dir.join("losses.csv"), &csv)?;
    Ok(summary)
}

fn save_if_improved<G: Network>(
    models: &GanModels<G>,
    report: &LossReport,
    best: &mut BestSoFar,
    dir: &Path,
    summary: &mut RunSummary,
) -> Result<()> {
    let (reason, next) = checkpoint_rule(best, report);
    *best = next;
    if let Some(reason) = reason {
        let path = dir.join(format!("ckpt_{}_{}.ckp1", report.step, reason.tag()));
        save_ckp1(&path, &models.named())?;
        summary.checkpoints.push(path);
    }
    Ok(())
}

/// Returns the mean validation SSIM.
fn validate<G: Network>(models: &GanModels<G>, data: &TrainData, config: &TrainConfig, step: usize, summary: &mut RunSummary) -> Result<f64> {
    let inputs: Vec<&Array2> = data.val.iter().map(|p| &p.0).collect();
    let generated = generate(&models.generator, &inputs, config.precision)?;
    let samples: Vec<EvalSample> = data
        .val
        .iter()
        .zip(&generated)
        .enumerate()
        .map(|(i, ((d, t), g))| EvalSample {
            id: format!("val{i}"),
            gt: t.clone(),
            degraded: d.clone(),
            generated: g.clone(),
        })
        .collect();
    let domain = match config.domain {
        TrainDomain::Spatial => EvalDomain::Spatial,
        TrainDomain::Spectral => EvalDomain::Spectral { log: false },
    };
    let report = metrics::evaluate_testset(&samples, domain, &EvalConfig::default())?;
    let s = report.summary(metrics::Comparison::Generated);
    summary.validation.push((step, s.ssim.mean, s.nrmse.mean));
    log::info!("step {step}: validation ssim {:.4} nrmse {:.4}", s.ssim.mean, s.nrmse.mean);

    let (d, t) = &data.val[0];
    let show = |a: &Array2| -> Result<Array2> {
        Ok(match config.domain {
            TrainDomain::Spatial => to_unit(a),
            TrainDomain::Spectral => {
                let f = crate::signal::Fringe::new(a.clone(), crate::signal::Provenance::Generated)?;
                to_unit(crate::signal::reconstruct_log(&f).pixels())
            }
        })
    };
    for (name, img) in [("degraded", d), ("gt", t), ("generated", &generated[0])] {
        let path = config.save_dir.join("samples").join(format!("step_{step}_{name}.pgm"));
        fs::write(path, encode_pgm(&show(img)?)?)?;
    }
    Ok(s.ssim.mean)
}
