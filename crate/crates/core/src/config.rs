//! Plain-text `key = value` run configuration.
//!
//! Keys are namespaced (`signal.alpha`, `train.batch_size`, ...) and drawn
//! from a fixed table; unknown or repeated keys are errors. `seed` has no
//! default and must always be given. [`RunConfig::to_text`] writes every
//! key with its resolved value, and parsing that text reproduces the same
//! configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::autodiff::Precision;
use crate::error::{Error, Result};
use crate::metrics::{EvalConfig, MetricScale, Standardize};
use crate::models::{DiscriminatorConfig, ResUNetAConfig, SrganGeneratorConfig};
use crate::phantom::{AugmentSpec, PhantomSpec};
use crate::signal::{MeanFilterSpec, WindowSpec};
use crate::train::{CheckpointCadence, TrainConfig, TrainDomain};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Uint,
    Float,
    Bool,
    Choice(&'static [&'static str]),
    Text,
    /// A float or `auto`.
    FloatOrAuto,
    FloatList,
    UintList,
}

#[derive(Debug)]
struct Key {
    name: &'static str,
    kind: Kind,
    default: Option<&'static str>,
}

const fn key(name: &'static str, kind: Kind, default: &'static str) -> Key {
    Key {
        name,
        kind,
        default: Some(default),
    }
}

const DOMAINS: &[&str] = &["spatial", "spectral"];

static KEYS: &[Key] = &[
    Key {
        name: "seed",
        kind: Kind::Uint,
        default: None,
    },
    key("phantom.n_eyes", Kind::Uint, "24"),
    key("phantom.n_patients", Kind::Uint, "16"),
    key("phantom.n_k", Kind::Uint, "512"),
    key("phantom.width", Kind::Uint, "64"),
    key("phantom.n_bscans", Kind::Uint, "32"),
    key("phantom.layer_depths", Kind::FloatList, "0.18,0.26,0.42,0.55,0.63"),
    key("phantom.layer_reflectivities", Kind::FloatList, "1,0.45,0.6,0.35,0.9"),
    key("phantom.speckle_density", Kind::Float, "24"),
    key("phantom.speckle_reflectivity", Kind::Float, "0.12"),
    key("phantom.layer_undulation", Kind::Float, "0.03"),
    key("phantom.depth_jitter", Kind::Float, "0.04"),
    key("phantom.envelope_alpha", Kind::Float, "1.5"),
    key("phantom.noise_sigma", Kind::Float, "0.01"),
    key("split.ratios", Kind::FloatList, "0.6,0.2,0.2"),
    key("pipeline.every_kth", Kind::Uint, "8"),
    key("pipeline.crop_top", Kind::Uint, "0"),
    key("pipeline.crop_height", Kind::Uint, "0"),
    key("pipeline.strip_width", Kind::Uint, "0"),
    key("signal.alpha", Kind::Float, "8"),
    key("signal.center", Kind::FloatOrAuto, "auto"),
    key("signal.log", Kind::Bool, "false"),
    key("degrade.mode", Kind::Choice(DOMAINS), "spectral"),
    key("degrade.mean_n", Kind::Uint, "11"),
    key("augment.copies", Kind::Uint, "0"),
    key("augment.h_flip", Kind::Bool, "true"),
    key("augment.v_flip", Kind::Bool, "true"),
    key("augment.center_jitter", Kind::Float, "0"),
    key("augment.alpha_min", Kind::Float, "8"),
    key("augment.alpha_max", Kind::Float, "8"),
    key("model.res_blocks", Kind::Uint, "4"),
    key("model.channels", Kind::Uint, "16"),
    key("model.kernel", Kind::UintList, "3,1"),
    key("unet.depth", Kind::Uint, "3"),
    key("unet.base", Kind::Uint, "8"),
    key("unet.kernel", Kind::Uint, "3"),
    key("unet.dilations", Kind::UintList, "1,3,15"),
    key("unet.input_skip", Kind::Bool, "false"),
    key("disc.style", Kind::Choice(&["light", "vgg"]), "light"),
    key("disc.base", Kind::Uint, "8"),
    key("disc.blocks", Kind::Uint, "5"),
    key("disc.kernel", Kind::UintList, "3,3"),
    key("train.domain", Kind::Choice(DOMAINS), "spatial"),
    key("train.epochs", Kind::Uint, "100"),
    key("train.batch_size", Kind::Uint, "10"),
    key("train.lr_g", Kind::Float, "1e-4"),
    key("train.lr_d", Kind::Float, "1e-4"),
    key("train.beta1", Kind::Float, "0.5"),
    key("train.lambda_adv", Kind::Float, "1e-3"),
    key("train.eval_every", Kind::Uint, "0"),
    key("train.max_steps", Kind::Uint, "0"),
    key("train.checkpoint", Kind::Choice(&["epoch", "step"]), "epoch"),
    key("train.bn_momentum", Kind::Float, "0.9"),
    key("train.precision", Kind::Choice(&["f32", "f64"]), "f32"),
    key("train.save_dir", Kind::Text, "run"),
    key("train.init_checkpoint", Kind::Text, ""),
    key("train.early_stop_patience", Kind::Uint, "0"),
    key("eval.p_low", Kind::Float, "1"),
    key("eval.p_high", Kind::Float, "99"),
    key("eval.scale", Kind::Choice(&["unit", "8bit"]), "unit"),
];

fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Checks `value` against the key's type; the message has no position.
fn check_value(k: &Key, value: &str) -> std::result::Result<(), String> {
    let bad = |what: &str| Err(format!("{} expects {what}, got {value:?}", k.name));
    let float = |v: &str| v.trim().parse::<f64>().ok().filter(|x| x.is_finite());
    let uint = |v: &str| v.trim().parse::<u64>().ok();
    match k.kind {
        Kind::Uint if uint(value).is_none() => bad("a non-negative integer"),
        Kind::Float if float(value).is_none() => bad("a finite number"),
        Kind::Bool if !matches!(value, "true" | "false") => bad("true or false"),
        Kind::Choice(opts) if !opts.contains(&value) => bad(&format!("one of {}", opts.join("|"))),
        Kind::FloatOrAuto if value != "auto" && float(value).is_none() => bad("a number or auto"),
        Kind::FloatList if value.split(',').any(|v| float(v).is_none()) => bad("comma-separated numbers"),
        Kind::UintList if value.split(',').any(|v| uint(v).is_none()) => bad("comma-separated integers"),
        Kind::Text if value.contains('\n') => bad("a single line"),
        _ => Ok(()),
    }
}

/// Resolved configuration: every known key mapped to its value text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    /// Defaults for everything except the seed.
    pub fn with_seed(seed: u64) -> Self {
        let mut values: BTreeMap<_, _> = KEYS
            .iter()
            .filter_map(|k| k.default.map(|d| (k.name, d.to_string())))
            .collect();
        values.insert("seed", seed.to_string());
        Self { values }
    }

    /// Parses `key = value` lines. `#` starts a comment line; blank lines
    /// are skipped. Errors carry the byte offset of the offending line or
    /// value. Keys missing from the text take their defaults; a missing
    /// `seed` is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut given: BTreeMap<&'static str, String> = BTreeMap::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let body = line.trim_end_matches(['\n', '\r']);
            let lead = body.len() - body.trim_start().len();
            let trimmed = body.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let eq = body
                .find('=')
                .ok_or_else(|| Error::parse(start + lead, format!("expected key = value, got {trimmed:?}")))?;
            let name = body[..eq].trim();
            let k = lookup(name).ok_or_else(|| Error::parse(start + lead, format!("unknown key {name:?}")))?;
            let raw = &body[eq + 1..];
            let value = raw.trim();
            let value_at = start + eq + 1 + (raw.len() - raw.trim_start().len());
            check_value(k, value).map_err(|m| Error::parse(value_at, m))?;
            if given.insert(k.name, value.to_string()).is_some() {
                return Err(Error::parse(start + lead, format!("duplicate key {name:?}")));
            }
        }
        if !given.contains_key("seed") {
            return Err(Error::Config("seed is mandatory".into()));
        }
        let mut cfg = Self::with_seed(0);
        cfg.values.extend(given);
        Ok(cfg)
    }

    /// Overrides one key, as a command-line flag does.
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let k = lookup(name).ok_or_else(|| Error::Config(format!("unknown key {name:?}")))?;
        let value = value.trim();
        check_value(k, value).map_err(Error::Config)?;
        self.values.insert(k.name, value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str)
    }

    /// Every key in table order with its resolved value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{} = {}", k.name, self.values[k.name]);
        }
        s
    }

    fn raw(&self, name: &str) -> &str {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("config key {name} missing from table"))
    }

    fn uint(&self, name: &str) -> u64 {
        self.raw(name).parse().expect("validated on insert")
    }

    fn usize(&self, name: &str) -> Result<usize> {
        usize::try_from(self.uint(name)).map_err(|_| Error::Config(format!("{name} is too large")))
    }

    fn float(&self, name: &str) -> f64 {
        self.raw(name).parse().expect("validated on insert")
    }

    fn flag(&self, name: &str) -> bool {
        self.raw(name) == "true"
    }

    fn floats(&self, name: &str) -> Vec<f64> {
        self.raw(name).split(',').map(|v| v.trim().parse().expect("validated on insert")).collect()
    }

    fn uints(&self, name: &str) -> Result<Vec<usize>> {
        self.raw(name)
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{name} entry {v:?} is too large")))
            })
            .collect()
    }

    fn pair(&self, name: &str) -> Result<(usize, usize)> {
        match self.uints(name)?[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::Config(format!("{name} needs two entries"))),
        }
    }

    pub fn seed(&self) -> u64 {
        self.uint("seed")
    }

    pub fn domain(&self) -> TrainDomain {
        match self.raw("train.domain") {
            "spectral" => TrainDomain::Spectral,
            _ => TrainDomain::Spatial,
        }
    }

    /// Eye and patient counts of the phantom dataset.
    pub fn cohort(&self) -> Result<(usize, usize)> {
        Ok((self.usize("phantom.n_eyes")?, self.usize("phantom.n_patients")?))
    }

    pub fn phantom_spec(&self) -> Result<PhantomSpec> {
        let spec = PhantomSpec {
            layer_depths: self.floats("phantom.layer_depths"),
            layer_reflectivities: self.floats("phantom.layer_reflectivities"),
            speckle_density: self.float("phantom.speckle_density"),
            speckle_reflectivity: self.float("phantom.speckle_reflectivity"),
            layer_undulation: self.float("phantom.layer_undulation"),
            depth_jitter: self.float("phantom.depth_jitter"),
            envelope_alpha: self.float("phantom.envelope_alpha"),
            noise_sigma: self.float("phantom.noise_sigma"),
            n_k: self.usize("phantom.n_k")?,
            width: self.usize("phantom.width")?,
            n_bscans_per_eye: self.usize("phantom.n_bscans")?,
            seed: self.seed(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn split_ratios(&self) -> Result<[f64; 3]> {
        self.floats("split.ratios")
            .try_into()
            .map_err(|_| Error::Config("split.ratios needs three entries".into()))
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let height = self.usize("pipeline.crop_height")?;
        let strip = self.usize("pipeline.strip_width")?;
        Ok(PipelineConfig {
            every_kth: self.usize("pipeline.every_kth")?,
            crop: (height > 0).then_some((self.usize("pipeline.crop_top")?, height)),
            strip_width: (strip > 0).then_some(strip),
            log: self.flag("signal.log"),
            augment_copies: self.usize("augment.copies")?,
        })
    }

    /// The degradation window for fringes of length `n_k`.
    pub fn window(&self, n_k: usize) -> Result<WindowSpec> {
        let alpha = self.float("signal.alpha");
        match self.raw("signal.center") {
            "auto" => WindowSpec::centered(n_k, alpha),
            c => WindowSpec::new(n_k, alpha, c.parse().expect("validated on insert")),
        }
    }

    pub fn degradation(&self, n_k: usize) -> Result<Degradation> {
        Ok(match self.raw("degrade.mode") {
            "spatial" => Degradation::MeanFilter(MeanFilterSpec::new(self.usize("degrade.mean_n")?)?),
            _ => Degradation::Window(self.window(n_k)?),
        })
    }

    pub fn augment(&self) -> Result<AugmentSpec> {
        let spec = AugmentSpec {
            h_flip: self.flag("augment.h_flip"),
            v_flip: self.flag("augment.v_flip"),
            window_center_jitter: self.float("augment.center_jitter"),
            window_alpha_range: (self.float("augment.alpha_min"), self.float("augment.alpha_max")),
        };
        let (lo, hi) = spec.window_alpha_range;
        if !(spec.window_center_jitter >= 0.0 && lo > 0.0 && lo <= hi) {
            return Err(Error::Config("augment needs jitter >= 0 and 0 < alpha_min <= alpha_max".into()));
        }
        Ok(spec)
    }

    pub fn generator(&self) -> Result<SrganGeneratorConfig> {
        Ok(SrganGeneratorConfig {
            n_res_blocks: self.usize("model.res_blocks")?,
            channels: self.usize("model.channels")?,
            kernel: self.pair("model.kernel")?,
        })
    }

    /// ResUNet-a for A-scans of length `len`; dilations too wide for a
    /// level are dropped.
    pub fn resuneta(&self, len: usize) -> Result<ResUNetAConfig> {
        let cfg = ResUNetAConfig::truncated(
            self.usize("unet.depth")?,
            self.usize("unet.base")?,
            self.usize("unet.kernel")?,
            len,
            &self.uints("unet.dilations")?,
        );
        let cfg = ResUNetAConfig {
            input_skip: self.flag("unet.input_skip"),
            ..cfg
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Discriminator for training images of `(height, width)` in `domain`.
    /// Spectral runs score every A-scan with a 1-D classifier.
    pub fn discriminator(&self, domain: TrainDomain, (h, w): (usize, usize)) -> Result<DiscriminatorConfig> {
        let base = self.usize("disc.base")?;
        let blocks = self.usize("disc.blocks")?;
        let kernel = self.pair("disc.kernel")?;
        Ok(match (domain, self.raw("disc.style")) {
            (TrainDomain::Spectral, _) => DiscriminatorConfig::ascan(h, base, blocks, kernel.0),
            (TrainDomain::Spatial, "vgg") => DiscriminatorConfig::vgg_style((1, h, w), base, kernel, false),
            (TrainDomain::Spatial, _) => DiscriminatorConfig::light((1, h, w), base, blocks, kernel, false),
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let max_steps = self.usize("train.max_steps")?;
        let cfg = TrainConfig {
            domain: self.domain(),
            epochs: self.usize("train.epochs")?,
            batch_size: self.usize("train.batch_size")?,
            lr_g: self.float("train.lr_g"),
            lr_d: self.float("train.lr_d"),
            beta1: self.float("train.beta1"),
            lambda_adv: self.float("train.lambda_adv"),
            seed: self.seed(),
            eval_every: self.usize("train.eval_every")?,
            max_steps: (max_steps > 0).then_some(max_steps),
            checkpoint: match self.raw("train.checkpoint") {
                "step" => CheckpointCadence::Step,
                _ => CheckpointCadence::Epoch,
            },
            bn_momentum: self.float("train.bn_momentum"),
            precision: match self.raw("train.precision") {
                "f64" => Precision::F64,
                _ => Precision::F32,
            },
            save_dir: PathBuf::from(self.raw("train.save_dir")),
            early_stop_patience: self.usize("train.early_stop_patience")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn init_checkpoint(&self) -> Option<PathBuf> {
        let p = self.raw("train.init_checkpoint");
        (!p.is_empty()).then(|| PathBuf::from(p))
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        let cfg = EvalConfig {
            standardize: Standardize {
                p_low: self.float("eval.p_low"),
                p_high: self.float("eval.p_high"),
            },
            scale: match self.raw("eval.scale") {
                "8bit" => MetricScale::EightBit,
                _ => MetricScale::Unit,
            },
        };
        cfg.standardize.validate()?;
        Ok(cfg)
    }
}

/// How kept B-scans become training pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineConfig {
    pub every_kth: usize,
    /// `(top, height)` rows kept, in the image (depth) domain.
    pub crop: Option<(usize, usize)>,
    pub strip_width: Option<usize>,
    /// Log-magnitude images instead of linear magnitude.
    pub log: bool,
    /// Augmented copies added per training pair.
    pub augment_copies: usize,
}

/// The degradation applied to ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Degradation {
    /// Gaussian spectral window on the fringe.
    Window(WindowSpec),
    /// Vertical `1×n` mean filter on the reconstructed image.
    MeanFilter(MeanFilterSpec),
}
