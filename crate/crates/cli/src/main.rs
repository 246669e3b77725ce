//! `specrec`: phantom generation, degradation, training, evaluation,
//! gradient checks and PGM import/export.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data or parse
//! error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use specrec::array::Array2;
use specrec::autodiff::{layer_suite, LAYER_TOL};
use specrec::config::{Degradation, RunConfig};
use specrec::error::Error;
use specrec::io::{decode_pgm, encode_pgm, load_stack, save_stack};
use specrec::metrics::{standardize_for_eval, Comparison};
use specrec::phantom::Split;
use specrec::pipeline::{self, build_pairs, PairOptions};
use specrec::signal::{self, Fringe, MeanFilterSpec, Provenance};
use specrec::train::TrainDomain;

#[derive(Parser)]
#[command(name = "specrec", version, about = "OCT axial-resolution recovery toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed; overrides the file's value.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generates a phantom cohort, its split and manifest.
    Phantom {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Degrades a fringe stack (spectral) or an image stack (spatial).
    Degrade {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides degrade.mode.
        #[arg(long)]
        mode: Option<Mode>,
        /// Spectral mode: write reconstructed magnitude images instead of fringes.
        #[arg(long)]
        reconstruct: bool,
    },
    /// Trains on a dataset directory and evaluates the final generator.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluates a run's final (or a given) checkpoint on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Run directory holding config.txt and checkpoints.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Domain the generator works in; spectral outputs are
        /// reconstructed before scoring.
        #[arg(long)]
        domain: Option<Mode>,
        /// Where metrics.csv and summary.txt go; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check of every layer type.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = LAYER_TOL)]
        tol: f64,
    },
    /// Reads an 8-bit binary PGM into a one-image OCT1 stack in [0, 1].
    ImportPgm { input: PathBuf, output: PathBuf },
    /// Writes one image of an OCT1 stack as an 8-bit binary PGM.
    ExportPgm {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Percentile-normalise first instead of clamping to [0, 1].
        #[arg(long)]
        standardize: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Spectral,
    Spatial,
}

impl Mode {
    fn as_str(self) -> &'static str {
        match self {
            Mode::Spectral => "spectral",
            Mode::Spatial => "spatial",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

impl ConfigArgs {
    fn resolve_from(&self, base: Option<&Path>) -> Result<RunConfig, Error> {
        let path = self.config.as_deref().or(base);
        let mut cfg = match (path, self.seed) {
            (Some(p), seed) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                match (RunConfig::parse(&text), seed) {
                    // The seed may come from the flag alone.
                    (Err(Error::Config(_)), Some(s)) => RunConfig::parse(&format!("{text}\nseed = {s}\n"))?,
                    (r, _) => r?,
                }
            }
            (None, Some(s)) => RunConfig::with_seed(s),
            (None, None) => return Err(Error::Config("a seed is required: pass --seed or set seed in --config".into())),
        };
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        for pair in &self.set {
            cfg.set_pair(pair)?;
        }
        Ok(cfg)
    }

    fn resolve(&self) -> Result<RunConfig, Error> {
        self.resolve_from(None)
    }
}

fn cmd_phantom(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let (eyes, split) = pipeline::phantom_cohort(cfg)?;
    pipeline::write_dataset(out, &eyes, &split, &cfg.to_text())?;
    let [tr, va, te] = split.counts();
    println!("{} eyes -> {} (train {tr}, val {va}, test {te})", eyes.len(), out.display());
    Ok(())
}

fn cmd_degrade(cfg: &RunConfig, input: &Path, out: &Path, reconstruct: bool) -> Result<(), Error> {
    let stack = load_stack(input)?;
    let n_k = stack.first().map_or(0, Array2::rows);
    let log = cfg.pipeline()?.log;
    let result = match cfg.degradation(n_k)? {
        Degradation::Window(w) => stack
            .into_iter()
            .map(|a| {
                let f = signal::apply_spectral_window(&Fringe::new(a, Provenance::GroundTruth)?, &w)?;
                Ok(match (reconstruct, log) {
                    (false, _) => f.into_samples(),
                    (true, false) => signal::reconstruct(&f).into_pixels(),
                    (true, true) => signal::reconstruct_log(&f).into_pixels(),
                })
            })
            .collect::<Result<Vec<_>, Error>>()?,
        Degradation::MeanFilter(m) => mean_filter_stack(stack, &m)?,
    };
    save_stack(out, &result)?;
    println!("{} images -> {}", result.len(), out.display());
    Ok(())
}

fn mean_filter_stack(stack: Vec<Array2>, m: &MeanFilterSpec) -> Result<Vec<Array2>, Error> {
    stack
        .into_iter()
        .map(|a| {
            let img = signal::BScan::new(a, signal::ValueDomain::LinearMagnitude)?;
            Ok(signal::mean_filter_vertical(&img, m)?.into_pixels())
        })
        .collect()
}

fn dataset_pairs(cfg: &RunConfig, data: &Path) -> Result<pipeline::PairSet, Error> {
    let (eyes, split) = pipeline::read_dataset(data)?;
    let n_k = eyes
        .first()
        .and_then(|e| e.volume.first())
        .map(Fringe::n_k)
        .ok_or_else(|| Error::Domain(format!("dataset {} is empty", data.display())))?;
    build_pairs(&eyes, &split, &PairOptions::from_config(cfg, n_k)?)
}

fn cmd_train(cfg: &RunConfig, data: &Path) -> Result<(), Error> {
    let pairs = dataset_pairs(cfg, data)?;
    log::info!(
        "{} train / {} val / {} test pairs",
        pairs.get(Split::Train).len(),
        pairs.get(Split::Val).len(),
        pairs.get(Split::Test).len()
    );
    let out = pipeline::train_and_evaluate(cfg, &pairs)?;
    for w in &out.summary.warnings {
        log::warn!("{w}");
    }
    println!("run directory: {}", out.summary.dir.display());
    println!("final checkpoint: {}", out.final_checkpoint.display());
    print!("{}", out.report.summary_table());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, data: &Path, run: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<(), Error> {
    let pairs = dataset_pairs(cfg, data)?;
    let test = pairs.get(Split::Test);
    let shape = test
        .first()
        .map(|p| p.gt.values.shape())
        .ok_or_else(|| Error::Domain("no test pairs to evaluate".into()))?;
    let ckpt = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => pipeline::final_checkpoint(run)?,
    };
    let generator = pipeline::load_generator(cfg, &ckpt, shape)?;
    let report = pipeline::evaluate_generator(&generator, test, cfg)?;
    report.write(out)?;
    println!("checkpoint: {}", ckpt.display());
    print!("{}", report.summary_table());
    let (g, d) = (report.summary(Comparison::Generated), report.summary(Comparison::Degraded));
    log::info!("ssim generated {:.4} vs degraded {:.4}", g.ssim.mean, d.ssim.mean);
    Ok(())
}

fn cmd_gradcheck(seeds: u64, tol: f64) -> Result<(), Error> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for seed in 0..seeds {
        for c in layer_suite(seed)? {
            match worst.iter_mut().find(|(n, _)| *n == c.name) {
                Some(w) => w.1 = w.1.max(c.max_rel_err),
                None => worst.push((c.name, c.max_rel_err)),
            }
        }
    }
    let mut failed = 0;
    for (name, err) in &worst {
        let ok = *err < tol;
        failed += usize::from(!ok);
        println!("{:<32} {err:.3e} {}", name, if ok { "ok" } else { "FAIL" });
    }
    if failed > 0 {
        return Err(Error::Numerical(format!("{failed} layer checks exceed {tol:e}")));
    }
    println!("all {} layer checks pass over {seeds} seeds", worst.len());
    Ok(())
}

fn cmd_import_pgm(input: &Path, output: &Path) -> Result<(), Error> {
    let img = decode_pgm(&fs::read(input)?)?;
    save_stack(output, &[img])?;
    Ok(())
}

fn cmd_export_pgm(input: &Path, output: &Path, index: usize, standardize: bool) -> Result<(), Error> {
    let stack = load_stack(input)?;
    let n = stack.len();
    let img = stack
        .into_iter()
        .nth(index)
        .ok_or_else(|| Error::Domain(format!("index {index} out of range for a stack of {n}")))?;
    let img = if standardize {
        standardize_for_eval(&img, &Default::default())?.values
    } else {
        img
    };
    fs::write(output, encode_pgm(&img)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Phantom { cfg, out } => cmd_phantom(&cfg.resolve()?, &out),
        Command::Degrade {
            cfg,
            input,
            out,
            mode,
            reconstruct,
        } => {
            let mut c = cfg.resolve()?;
            if let Some(m) = mode {
                c.set("degrade.mode", m.as_str())?;
            }
            cmd_degrade(&c, &input, &out, reconstruct)
        }
        Command::Train { cfg, data } => cmd_train(&cfg.resolve()?, &data),
        Command::Eval {
            cfg,
            data,
            run,
            checkpoint,
            domain,
            out,
        } => {
            let mut c = cfg.resolve_from(Some(&run.join("config.txt")))?;
            if let Some(d) = domain {
                c.set("train.domain", d.as_str())?;
            }
            if c.domain() == TrainDomain::Spectral {
                log::info!("reconstructing spectral outputs before scoring");
            }
            cmd_eval(&c, &data, &run, checkpoint.as_deref(), out.as_deref().unwrap_or(&run))
        }
        Command::Gradcheck { seeds, tol } => cmd_gradcheck(seeds, tol),
        Command::ImportPgm { input, output } => cmd_import_pgm(&input, &output),
        Command::ExportPgm {
            input,
            output,
            index,
            standardize,
        } => cmd_export_pgm(&input, &output, index, standardize),
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("SPECREC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("SPECREC_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
