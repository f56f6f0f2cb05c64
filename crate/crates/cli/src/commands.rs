use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ctuq_core::mnist::{load_mnist, make_splits, Splits, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use ctuq_core::prior::{load_model, save_model, train_with_progress, TrainLog};
use ctuq_core::uq::{report_from_seeds, run_fbp_seed, run_seed, SeedResult};
use ctuq_core::{ood_flag, Image, PriorModel, ScanGeometry, UncertaintyReport};

use crate::config::{ExperimentConfig, DATA_DIR_ENV};
use crate::output::{csv_header, image_csv, write_atomic, write_pgm16};
use crate::CliError;

/// Population std of values in `[0, 1]` is at most 0.5, so std maps are
/// doubled before quantization to use the full PGM range.
pub const STD_PGM_SCALE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Lpn,
    Fbp,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Lpn, Method::Fbp];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lpn => "lpn",
            Method::Fbp => "fbp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "lpn" => Ok(Method::Lpn),
            "fbp" => Ok(Method::Fbp),
            _ => Err(CliError::Usage(format!("unknown method `{s}` (expected lpn or fbp)"))),
        }
    }
}

/// Validated config plus the loaded train / evaluation split.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub geometry: ScanGeometry,
    pub splits: Splits,
}

impl Workspace {
    pub fn open(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let geometry = cfg.validate()?;
        let dir = &cfg.data_dir;
        let data = load_mnist(dir).map_err(|e| {
            CliError::Runtime(format!(
                "{e}\nMNIST is not downloaded automatically. Put the uncompressed files {TRAIN_IMAGES}, \
                 {TRAIN_LABELS}, {TEST_IMAGES} and {TEST_LABELS} in {} or point {DATA_DIR_ENV} at them.",
                dir.display()
            ))
        })?;
        let splits = make_splits(&data, cfg.train_digit, cfg.eval_per_digit, cfg.split_seed)?;
        Ok(Workspace { cfg: cfg.clone(), geometry, splits })
    }

    pub fn eval_image(&self, digit: u8, index: usize) -> Result<&Image, CliError> {
        if digit > 9 || index >= self.cfg.eval_per_digit {
            return Err(CliError::Usage(format!(
                "no evaluation image for digit {digit} index {index} (digits 0-9, indices 0-{})",
                self.cfg.eval_per_digit - 1
            )));
        }
        Ok(&self.splits.eval_image(digit, index).expect("splits hold every digit and index").image)
    }

    pub fn check_views(&self, n_views: usize) -> Result<(), CliError> {
        self.cfg.protocol(n_views).validate(&self.geometry).map_err(|e| CliError::Usage(e.to_string()))
    }
}

pub fn load_prior(cfg: &ExperimentConfig) -> Result<PriorModel, CliError> {
    let path = cfg.checkpoint_path();
    if !path.is_file() {
        return Err(CliError::Runtime(format!(
            "prior checkpoint {} not found; run `ctuq train` first",
            path.display()
        )));
    }
    let model = load_model(&path)?;
    if model.architecture().input_dim != cfg.geometry.image_side * cfg.geometry.image_side {
        return Err(CliError::Runtime(format!(
            "checkpoint {} expects {} pixels, geometry has {}",
            path.display(),
            model.architecture().input_dim,
            cfg.geometry.image_side * cfg.geometry.image_side
        )));
    }
    Ok(model)
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub log: TrainLog,
    pub n_images: usize,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome, CliError> {
    let ws = Workspace::open(cfg)?;
    let mut images = ws.splits.train;
    if let Some(limit) = cfg.train_limit {
        images.truncate(limit);
    }
    let (model, log) = train_with_progress(&images, cfg.arch.clone(), &cfg.train, |e| {
        eprintln!("epoch {:>3}  gamma {:.4}  loss {:.6}", e.epoch, e.gamma, e.mean_loss)
    })?;

    let checkpoint = cfg.checkpoint_path();
    if let Some(dir) = checkpoint.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    save_model(&model, &checkpoint)?;
    let mut csv = csv_header("train-log", &["epoch", "gamma", "mean_loss"]);
    for e in &log.epochs {
        csv += &format!("{},{},{}\n", e.epoch, e.gamma, e.mean_loss);
    }
    let log_path = cfg.output_dir.join("train_log.csv");
    write_atomic(&log_path, csv.as_bytes())?;
    Ok(TrainOutcome { checkpoint, log_path, log, n_images: images.len() })
}

/// One seeded reconstruction of evaluation image `(digit, index)`.
pub fn reconstruct_seed(
    ws: &Workspace,
    prior: Option<&PriorModel>,
    method: Method,
    x: &Image,
    n_views: usize,
    seed: usize,
) -> Result<SeedResult, CliError> {
    let protocol = ws.cfg.protocol(n_views);
    Ok(match method {
        Method::Lpn => {
            let prior = prior.ok_or_else(|| CliError::Runtime("lpn reconstruction needs a prior".into()))?;
            run_seed(x, &ws.geometry, &protocol, prior, seed)?
        }
        Method::Fbp => run_fbp_seed(x, &ws.geometry, &protocol, &ws.cfg.fbp, seed)?,
    })
}

pub struct ReconOutcome {
    pub result: SeedResult,
    pub pgm: PathBuf,
    pub csv: PathBuf,
    pub line: String,
}

pub fn cmd_reconstruct(
    cfg: &ExperimentConfig,
    digit: u8,
    index: usize,
    n_views: usize,
    seed: usize,
    method: Method,
) -> Result<ReconOutcome, CliError> {
    let ws = Workspace::open(cfg)?;
    ws.check_views(n_views)?;
    let x = ws.eval_image(digit, index)?;
    let prior = match method {
        Method::Lpn => Some(load_prior(cfg)?),
        Method::Fbp => None,
    };
    let result = reconstruct_seed(&ws, prior.as_ref(), method, x, n_views, seed)?;

    let stem = format!("d{digit}_i{index}_v{n_views}_s{seed}_{method}");
    let dir = cfg.output_dir.join("reconstruct");
    let pgm = dir.join(format!("{stem}.pgm"));
    write_pgm16(&pgm, &result.reconstruction, 1.0)?;
    let line = format!("{digit},{index},{n_views},{seed},{method},{},{}", result.psnr, result.ssim);
    let csv_path = dir.join(format!("{stem}.csv"));
    let csv = csv_header("reconstruction", &["digit", "index", "n_views", "seed", "method", "psnr", "ssim"]) + &line + "\n";
    write_atomic(&csv_path, csv.as_bytes())?;
    Ok(ReconOutcome { result, pgm, csv: csv_path, line })
}

pub struct UqOutcome {
    pub report: UncertaintyReport,
    pub dir: PathBuf,
    pub line: String,
    pub flagged: Option<bool>,
}

pub fn cmd_uq(cfg: &ExperimentConfig, digit: u8, index: usize, n_views: usize) -> Result<UqOutcome, CliError> {
    let ws = Workspace::open(cfg)?;
    ws.check_views(n_views)?;
    let x = ws.eval_image(digit, index)?;
    let prior = load_prior(cfg)?;
    let seeds = (0..cfg.n_seeds)
        .map(|s| {
            reconstruct_seed(&ws, Some(&prior), Method::Lpn, x, n_views, s).map_err(|e| match e {
                CliError::Core(e) => CliError::Core(ctuq_core::Error::Seed { seed: s, source: Box::new(e) }),
                other => other,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = report_from_seeds(seeds)?;

    let dir = cfg.output_dir.join("uq").join(format!("d{digit}_i{index}_v{n_views}"));
    write_report_images(&dir, &report)?;
    for s in &report.seeds {
        write_pgm16(&dir.join(format!("seed_{:02}.pgm", s.seed)), &s.reconstruction, 1.0)?;
    }
    let flagged = cfg.threshold.map(|t| ood_flag(&report, t));
    let line = format!(
        "{digit},{index},{n_views},{},{},{}",
        report.score,
        cfg.threshold.map_or(String::new(), |t| t.to_string()),
        flagged.map_or(String::new(), |f| f.to_string())
    );
    let csv = csv_header("uq-summary", &["digit", "index", "n_views", "score", "threshold", "flagged"]) + &line + "\n";
    write_atomic(&dir.join("summary.csv"), csv.as_bytes())?;
    Ok(UqOutcome { report, dir, line, flagged })
}

pub(crate) fn write_report_images(dir: &std::path::Path, report: &UncertaintyReport) -> Result<(), CliError> {
    write_pgm16(&dir.join("mean.pgm"), &report.mean, 1.0)?;
    write_pgm16(&dir.join("std.pgm"), &report.std, STD_PGM_SCALE)?;
    write_atomic(&dir.join("mean.csv"), image_csv("mean-image", &report.mean).as_bytes())?;
    write_atomic(&dir.join("std.csv"), image_csv("std-image", &report.std).as_bytes())
}
