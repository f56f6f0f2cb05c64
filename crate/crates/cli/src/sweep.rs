//! The full digit x image x budget x method sweep.
//!
//! Work is split into cells, one per `(digit, index, n_views, method)`. Each
//! cell writes its own directory and is recorded in `manifest.csv`; a rerun
//! against the same configuration and checkpoint skips finished cells.
//! Aggregate tables and mosaics are rebuilt from the cell files on disk, in a
//! fixed order, so they do not depend on scheduling or on how many runs it
//! took to finish the sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use ctuq_core::uq::report_from_seeds;
use ctuq_core::Image;

use crate::commands::{load_prior, reconstruct_seed, write_report_images, Method, Workspace, STD_PGM_SCALE};
use crate::config::ExperimentConfig;
use crate::output::{csv_header, parse_f64, parse_image_csv, table_rows, write_atomic, write_pgm16, mosaic};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub digit: u8,
    pub index: usize,
    pub n_views: usize,
    pub method: Method,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("d{}_i{:02}_v{:03}_{}", self.digit, self.index, self.n_views, self.method)
    }
}

/// Canonical order: digit, image, budget, then method.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for digit in 0..10u8 {
        for index in 0..cfg.eval_per_digit {
            for &n_views in &cfg.budgets {
                for method in Method::ALL {
                    out.push(Cell { digit, index, n_views, method });
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    /// Seeded reconstructions computed by this invocation.
    pub new_reconstructions: usize,
    pub cells: usize,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
enum Status {
    Pending,
    Ok,
    Failed(String),
}

/// Everything that changes cell results, hashed together with the prior
/// checkpoint bytes. Thread count, threshold and paths are excluded.
fn fingerprint(cfg: &ExperimentConfig, checkpoint: &[u8]) -> String {
    let desc = format!(
        "{:?}|{:?}|{}|{}|{}|{:?}|{:?}|{:?}|{}|{}|{}",
        cfg.geometry,
        cfg.budgets,
        cfg.n_seeds,
        cfg.noise_sigma,
        cfg.base_seed,
        cfg.resample,
        cfg.solver,
        cfg.fbp,
        cfg.train_digit,
        cfg.eval_per_digit,
        cfg.split_seed,
    );
    let mut h = Sha256::new();
    h.update(desc.as_bytes());
    h.update(checkpoint);
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

const FINGERPRINT_PREFIX: &str = "# fingerprint ";

fn manifest_text(fp: &str, cells: &[Cell], status: &[Status]) -> String {
    let mut s = csv_header("manifest", &["cell", "status", "detail"]);
    s.insert_str(s.find('\n').unwrap() + 1, &format!("{FINGERPRINT_PREFIX}{fp}\n"));
    for (c, st) in cells.iter().zip(status) {
        let (name, detail) = match st {
            Status::Pending => ("pending", String::new()),
            Status::Ok => ("ok", String::new()),
            Status::Failed(m) => ("failed", m.replace([',', '\n', '\r'], ";")),
        };
        let _ = writeln!(s, "{},{name},{detail}", c.id());
    }
    s
}

/// Cells already marked ok by a previous run with the same fingerprint.
fn previous_ok(path: &Path, fp: &str) -> Result<Vec<String>, CliError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(CliError::io(format!("reading {}", path.display()), e)),
    };
    let old = text.lines().find_map(|l| l.strip_prefix(FINGERPRINT_PREFIX)).unwrap_or("");
    if old != fp {
        return Err(CliError::Usage(format!(
            "{} was produced with a different configuration or checkpoint; use a fresh output_dir",
            path.display()
        )));
    }
    Ok(table_rows(&text).into_iter().filter(|r| r.get(1).map(String::as_str) == Some("ok")).map(|r| r[0].clone()).collect())
}

pub fn cmd_experiment(cfg: &ExperimentConfig) -> Result<SweepOutcome, CliError> {
    let ws = Workspace::open(cfg)?;
    let prior = load_prior(cfg)?;
    let ckpt_path = cfg.checkpoint_path();
    let ckpt = std::fs::read(&ckpt_path).map_err(|e| CliError::io(format!("reading {}", ckpt_path.display()), e))?;
    let fp = fingerprint(cfg, &ckpt);

    let dir = cfg.output_dir.join("experiment");
    let manifest_path = dir.join("manifest.csv");
    let done = previous_ok(&manifest_path, &fp)?;
    let all = cells(cfg);
    let status: Vec<Status> = all
        .iter()
        .map(|c| {
            let id = c.id();
            if done.contains(&id) && dir.join("cells").join(&id).join("summary.csv").is_file() {
                Status::Ok
            } else {
                Status::Pending
            }
        })
        .collect();
    write_atomic(&manifest_path, manifest_text(&fp, &all, &status).as_bytes())?;

    let todo: Vec<usize> = (0..all.len()).filter(|&i| status[i] != Status::Ok).collect();
    let status = Mutex::new(status);
    let computed = AtomicUsize::new(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    pool.install(|| {
        todo.par_iter().for_each(|&i| {
            let cell = all[i];
            let result = run_cell(&ws, &prior, cell, &dir.join("cells").join(cell.id()));
            let st = match result {
                Ok(n) => {
                    computed.fetch_add(n, Ordering::Relaxed);
                    Status::Ok
                }
                Err(e) => {
                    eprintln!("cell {} failed: {}", cell.id(), e.message());
                    Status::Failed(e.message())
                }
            };
            let mut guard = status.lock().unwrap();
            guard[i] = st;
            if let Err(e) = write_atomic(&manifest_path, manifest_text(&fp, &all, &guard).as_bytes()) {
                eprintln!("manifest update failed: {}", e.message());
            }
        })
    });
    let status = status.into_inner().unwrap();
    write_atomic(&manifest_path, manifest_text(&fp, &all, &status).as_bytes())?;

    let failed = status.iter().filter(|s| !matches!(s, Status::Ok)).count();
    if failed > 0 {
        return Err(CliError::PartialSweep { failed, total: all.len(), manifest: manifest_path });
    }
    aggregate(cfg, &dir, &all)?;
    Ok(SweepOutcome { new_reconstructions: computed.into_inner(), cells: all.len(), dir })
}

/// Runs every seed of one cell and returns how many reconstructions it made.
fn run_cell(ws: &Workspace, prior: &ctuq_core::PriorModel, cell: Cell, out: &Path) -> Result<usize, CliError> {
    let x = ws.eval_image(cell.digit, cell.index)?;
    let seeds = (0..ws.cfg.n_seeds)
        .map(|s| reconstruct_seed(ws, Some(prior), cell.method, x, cell.n_views, s))
        .collect::<Result<Vec<_>, _>>()?;
    let report = report_from_seeds(seeds)?;

    let mut seeds_csv = csv_header("cell-seeds", &["seed", "psnr", "ssim", "iterations"]);
    for s in &report.seeds {
        let _ = writeln!(seeds_csv, "{},{},{},{}", s.seed, s.psnr, s.ssim, s.iterations);
    }
    write_atomic(&out.join("seeds.csv"), seeds_csv.as_bytes())?;
    write_report_images(out, &report)?;
    let n = report.seeds.len() as f64;
    let psnr = report.seeds.iter().map(|s| s.psnr).sum::<f64>() / n;
    let ssim = report.seeds.iter().map(|s| s.ssim).sum::<f64>() / n;
    // summary.csv is written last; its presence marks the cell complete
    let summary = csv_header("cell-summary", &["digit", "index", "n_views", "method", "score", "psnr_mean", "ssim_mean"])
        + &format!("{},{},{},{},{},{psnr},{ssim}\n", cell.digit, cell.index, cell.n_views, cell.method, report.score);
    write_atomic(&out.join("summary.csv"), summary.as_bytes())?;
    Ok(report.seeds.len())
}

/// Per-seed metrics and the score of one finished cell, read back from disk.
#[derive(Clone, Debug)]
pub struct CellRecord {
    pub cell: Cell,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub score: f64,
}

pub fn read_cell(dir: &Path, cell: Cell) -> Result<CellRecord, CliError> {
    let cdir = dir.join("cells").join(cell.id());
    let read = |name: &str| {
        let p = cdir.join(name);
        std::fs::read_to_string(&p).map_err(|e| CliError::io(format!("reading {}", p.display()), e))
    };
    let seeds = table_rows(&read("seeds.csv")?);
    let psnr = seeds.iter().map(|r| parse_f64(&r[1])).collect::<Result<Vec<_>, _>>()?;
    let ssim = seeds.iter().map(|r| parse_f64(&r[2])).collect::<Result<Vec<_>, _>>()?;
    let summary = table_rows(&read("summary.csv")?);
    let score = parse_f64(summary.first().and_then(|r| r.get(4)).ok_or_else(|| {
        CliError::Runtime(format!("empty summary for cell {}", cell.id()))
    })?)?;
    Ok(CellRecord { cell, psnr, ssim, score })
}

fn stats(v: &[f64]) -> (f64, f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

fn aggregate(cfg: &ExperimentConfig, dir: &Path, all: &[Cell]) -> Result<(), CliError> {
    let records = all.iter().map(|&c| read_cell(dir, c)).collect::<Result<Vec<_>, _>>()?;

    // group key (digit, budget, method), images in index order
    let mut groups: BTreeMap<(u8, usize, Method), Vec<&CellRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry((r.cell.digit, r.cell.n_views, r.cell.method)).or_default().push(r);
    }

    let metric_cols = |m: &str| {
        ["mean", "min", "max", "image_min", "image_max"].map(|s| format!("{m}_{s}"))
    };
    let mut cols = vec!["digit".to_string(), "n_views".into(), "method".into(), "n".into()];
    cols.extend(metric_cols("psnr"));
    cols.extend(metric_cols("ssim"));
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut summary = csv_header("sweep-summary", &cols);
    let mut scores = csv_header("sweep-scores", &["digit", "index", "n_views", "method", "score"]);
    let mut avg_std = csv_header("sweep-avg-std", &["digit", "n_views", "method", "score_mean", "score_min", "score_max"]);
    for ((digit, v, method), recs) in &groups {
        let _ = write!(summary, "{digit},{v},{method},{}", recs.iter().map(|r| r.psnr.len()).sum::<usize>());
        for pick in [|r: &CellRecord| r.psnr.clone(), |r: &CellRecord| r.ssim.clone()] {
            let per_seed: Vec<f64> = recs.iter().flat_map(|r| pick(r)).collect();
            let per_image: Vec<f64> = recs.iter().map(|r| stats(&pick(r)).0).collect();
            let (mean, min, max) = stats(&per_seed);
            let (_, imin, imax) = stats(&per_image);
            let _ = write!(summary, ",{mean},{min},{max},{imin},{imax}");
        }
        summary.push('\n');
        let s: Vec<f64> = recs.iter().map(|r| r.score).collect();
        let (mean, min, max) = stats(&s);
        let _ = writeln!(avg_std, "{digit},{v},{method},{mean},{min},{max}");
    }
    for r in &records {
        let c = r.cell;
        let _ = writeln!(scores, "{},{},{},{},{}", c.digit, c.index, c.n_views, c.method, r.score);
    }
    write_atomic(&dir.join("summary.csv"), summary.as_bytes())?;
    write_atomic(&dir.join("avg_std.csv"), avg_std.as_bytes())?;
    write_atomic(&dir.join("scores.csv"), scores.as_bytes())?;

    // mosaics: one row per digit, one column per evaluation image
    for &v in &cfg.budgets {
        for method in Method::ALL {
            for (kind, scale) in [("mean", 1.0), ("std", STD_PGM_SCALE)] {
                let rows = (0..10u8)
                    .map(|digit| {
                        (0..cfg.eval_per_digit)
                            .map(|index| {
                                let p = dir.join("cells").join(Cell { digit, index, n_views: v, method }.id()).join(format!("{kind}.csv"));
                                let text = std::fs::read_to_string(&p)
                                    .map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
                                parse_image_csv(&text)
                            })
                            .collect::<Result<Vec<Image>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                write_pgm16(&dir.join("grids").join(format!("{kind}_v{v}_{method}.pgm")), &mosaic(&rows)?, scale)?;
            }
        }
    }
    Ok(())
}
