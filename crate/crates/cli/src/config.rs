//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error. Every key is optional; missing keys keep the defaults listed in
//! [`ExperimentConfig::default`]. Relative paths are taken relative to the
//! working directory. `CTUQ_DATA_DIR`, when set, overrides `data_dir`.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `data_dir` | `data/mnist` | directory holding the four MNIST IDX files |
//! | `output_dir` | `out` | root of every written artifact |
//! | `checkpoint` | `<output_dir>/prior.ckpt` | prior checkpoint path |
//! | `image_side` | 28 | image side in pixels |
//! | `detector_bins` | 22 | detector bins |
//! | `source_to_center` | `2 * image_side` | source to rotation axis distance |
//! | `center_to_detector` | `2 * image_side` | rotation axis to detector distance |
//! | `detector_spacing` | smallest covering pitch | detector bin pitch |
//! | `candidate_angles` | 360 | equispaced candidate view angles |
//! | `budgets` | `11,22,33` | view budgets swept by `experiment` |
//! | `n_seeds` | 10 | measurement draws per image |
//! | `noise_sigma` | 2 | sinogram noise standard deviation |
//! | `base_seed` | 0 | base of the per-seed angle / noise streams |
//! | `resample_mode` | `fresh_acquisition` | or `fixed_pool_subsets` |
//! | `pool_views` | 99 | pool size for `fixed_pool_subsets` |
//! | `max_iters`, `step_scale`, `tol` | 200, 1, 1e-4 | solver |
//! | `init` | `fbp` | solver start, `fbp` or `zeros` |
//! | `clamp_iterates` | true | clamp iterates to `[0, 1]` |
//! | `fbp_cutoff` | 1 | ramp filter cutoff as a fraction of Nyquist |
//! | `hidden` | `128,128` | hidden layer widths of the prior |
//! | `beta`, `alpha` | 2, 0.01 | softplus sharpness, quadratic weight |
//! | `gamma0`, `gamma_min`, `gamma_decay`, `epochs_per_gamma` | 12, 5, 0.8, 4 | loss annealing |
//! | `epochs`, `batch_size`, `learning_rate` | 40, 32, 1e-3 | training loop |
//! | `sigma_train` | 0.15 | training noise level |
//! | `optimizer`, `momentum` | `adam`, 0.9 | `adam` or `sgd` |
//! | `train_seed` | 0 | initialization and noise stream of training |
//! | `train_digit` | 0 | digit the prior is trained on |
//! | `train_limit` | all | use only the first N training images |
//! | `eval_per_digit` | 10 | evaluation images per digit |
//! | `split_seed` | 0 | seed of the evaluation draw |
//! | `jobs` | 0 | sweep worker threads, 0 for one per core |
//! | `threshold` | none | flag scores above this value |

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ctuq_core::prior::{Architecture, OptimizerKind};
use ctuq_core::{FbpConfig, InitMode, ProxMatchConfig, ResampleMode, ScanGeometry, SolveConfig, UqProtocol};

use crate::CliError;

pub const DATA_DIR_ENV: &str = "CTUQ_DATA_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryConfig {
    pub image_side: usize,
    pub detector_bins: usize,
    pub source_to_center: Option<f64>,
    pub center_to_detector: Option<f64>,
    pub detector_spacing: Option<f64>,
    pub candidate_angles: usize,
}

impl GeometryConfig {
    pub fn build(&self) -> Result<ScanGeometry, CliError> {
        let d = 2.0 * self.image_side as f64;
        let sod = self.source_to_center.unwrap_or(d);
        let odd = self.center_to_detector.unwrap_or(d);
        let spacing = self
            .detector_spacing
            .unwrap_or_else(|| ScanGeometry::min_covering_spacing(self.image_side, self.detector_bins, sod, odd));
        ScanGeometry::new(self.image_side, self.detector_bins, sod, odd, spacing, self.candidate_angles)
            .map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub geometry: GeometryConfig,
    pub budgets: Vec<usize>,
    pub n_seeds: usize,
    pub noise_sigma: f64,
    pub base_seed: u64,
    pub resample: ResampleMode,
    pub pool_views: usize,
    pub solver: SolveConfig,
    pub fbp: FbpConfig,
    pub arch: Architecture,
    pub train: ProxMatchConfig,
    pub train_digit: u8,
    pub train_limit: Option<usize>,
    pub eval_per_digit: usize,
    pub split_seed: u64,
    pub jobs: usize,
    pub threshold: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: PathBuf::from("data/mnist"),
            output_dir: PathBuf::from("out"),
            checkpoint: None,
            geometry: GeometryConfig {
                image_side: 28,
                detector_bins: 22,
                source_to_center: None,
                center_to_detector: None,
                detector_spacing: None,
                candidate_angles: 360,
            },
            budgets: vec![11, 22, 33],
            n_seeds: 10,
            noise_sigma: 2.0,
            base_seed: 0,
            resample: ResampleMode::FreshAcquisition,
            pool_views: 99,
            solver: SolveConfig::default(),
            fbp: FbpConfig::default(),
            arch: Architecture::default(),
            train: ProxMatchConfig::default(),
            train_digit: 0,
            train_limit: None,
            eval_per_digit: 10,
            split_seed: 0,
            jobs: 0,
            threshold: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::Usage(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Usage(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl ExperimentConfig {
    /// Defaults, then the file (if any), then the data directory variable.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse_str(&text)?
            }
            None => Self::default(),
        };
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            cfg.data_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn parse_str(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| CliError::Usage(format!("line {}: {}", n + 1, e.message())))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "image_side" => self.geometry.image_side = parse(key, value)?,
            "detector_bins" => self.geometry.detector_bins = parse(key, value)?,
            "source_to_center" => self.geometry.source_to_center = Some(parse(key, value)?),
            "center_to_detector" => self.geometry.center_to_detector = Some(parse(key, value)?),
            "detector_spacing" => self.geometry.detector_spacing = Some(parse(key, value)?),
            "candidate_angles" => self.geometry.candidate_angles = parse(key, value)?,
            "budgets" => self.budgets = parse_list(key, value)?,
            "n_seeds" => self.n_seeds = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "base_seed" => self.base_seed = parse(key, value)?,
            "resample_mode" => {
                self.resample = match value {
                    "fresh_acquisition" => ResampleMode::FreshAcquisition,
                    "fixed_pool_subsets" => ResampleMode::FixedPoolSubsets { pool_views: self.pool_views },
                    _ => return Err(CliError::Usage(format!("unknown resample_mode `{value}`"))),
                }
            }
            "pool_views" => {
                self.pool_views = parse(key, value)?;
                if let ResampleMode::FixedPoolSubsets { .. } = self.resample {
                    self.resample = ResampleMode::FixedPoolSubsets { pool_views: self.pool_views };
                }
            }
            "max_iters" => self.solver.max_iters = parse(key, value)?,
            "step_scale" => self.solver.step_scale = parse(key, value)?,
            "tol" => self.solver.tol = parse(key, value)?,
            "init" => {
                self.solver.init = match value {
                    "fbp" => InitMode::Fbp,
                    "zeros" => InitMode::Zeros,
                    _ => return Err(CliError::Usage(format!("unknown init `{value}`"))),
                }
            }
            "clamp_iterates" => self.solver.clamp_iterates = parse_bool(key, value)?,
            "fbp_cutoff" => self.fbp.cutoff = parse(key, value)?,
            "hidden" => self.arch.hidden = parse_list(key, value)?,
            "beta" => self.arch.beta = parse(key, value)?,
            "alpha" => self.arch.alpha = parse(key, value)?,
            "gamma0" => self.train.gamma0 = parse(key, value)?,
            "gamma_min" => self.train.gamma_min = parse(key, value)?,
            "gamma_decay" => self.train.gamma_decay = parse(key, value)?,
            "epochs_per_gamma" => self.train.epochs_per_gamma = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "sigma_train" => self.train.sigma_train = parse(key, value)?,
            "optimizer" => {
                self.train.optimizer = match value {
                    "adam" => OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
                    "sgd" => OptimizerKind::Sgd { momentum: 0.9 },
                    _ => return Err(CliError::Usage(format!("unknown optimizer `{value}`"))),
                }
            }
            "momentum" => match &mut self.train.optimizer {
                OptimizerKind::Sgd { momentum } => *momentum = parse(key, value)?,
                OptimizerKind::Adam { .. } => {
                    return Err(CliError::Usage("`momentum` applies only with `optimizer = sgd`".into()))
                }
            },
            "train_seed" => self.train.seed = parse(key, value)?,
            "train_digit" => self.train_digit = parse(key, value)?,
            "train_limit" => self.train_limit = Some(parse(key, value)?),
            "eval_per_digit" => self.eval_per_digit = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            "threshold" => self.threshold = Some(parse(key, value)?),
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("prior.ckpt"))
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<ScanGeometry, CliError> {
        let geometry = self.geometry.build()?;
        if self.budgets.is_empty() {
            return Err(CliError::Usage("`budgets` must list at least one view count".into()));
        }
        if self.eval_per_digit == 0 {
            return Err(CliError::Usage("`eval_per_digit` must be positive".into()));
        }
        if let Some(t) = self.threshold {
            if !(t >= 0.0) {
                return Err(CliError::Usage("`threshold` must be non-negative".into()));
            }
        }
        let usage = |e: ctuq_core::Error| CliError::Usage(e.to_string());
        for &n in &self.budgets {
            self.protocol(n).validate(&geometry).map_err(usage)?;
        }
        self.fbp.validate().map_err(usage)?;
        self.arch.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        Ok(geometry)
    }

    pub fn protocol(&self, n_views: usize) -> UqProtocol {
        UqProtocol {
            n_views,
            n_seeds: self.n_seeds,
            noise_sigma: self.noise_sigma,
            base_seed: self.base_seed,
            solver: self.solver.clone(),
            resample: self.resample,
            metrics: Default::default(),
        }
    }
}
