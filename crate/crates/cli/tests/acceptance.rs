//! End-to-end acceptance run: one line per criterion, nonzero exit on any
//! failure. Needs the four MNIST IDX files in `$CTUQ_DATA_DIR` or
//! `<workspace>/data/mnist`. Trains the prior with the default configuration
//! and runs the full sweep twice, so expect several minutes per core.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ctuq_cli::config::DATA_DIR_ENV;
use ctuq_cli::output::table_rows;
use ctuq_cli::{cmd_experiment, cmd_train, ExperimentConfig};
use ctuq_core::mnist::{load_mnist, make_splits};
use ctuq_core::prior::{load_model, Architecture};
use ctuq_core::solver::Constant;
use ctuq_core::uq::draw_angle_subset;
use ctuq_core::{
    build_operator, clamp01, psnr, run_uq, ssim, Identity, Image, InitMode, MetricConfig, PriorModel, ScanGeometry,
    SolveConfig, SparseOperator, UqProtocol,
};

// criterion 1
const ADJOINT_REL_TOL: f64 = 1e-10;
const LINEARITY_REL_TOL: f64 = 1e-12;
const NORM_REL_TOL: f64 = 1e-5;
const OPERATOR_BUDGET: Duration = Duration::from_secs(10);
// criterion 2
const CONVEXITY_SLACK: f64 = 1e-9;
const PROX_FD_REL_TOL: f64 = 1e-4;
const PARAM_FD_REL_TOL: f64 = 1e-3;
const PRIOR_BUDGET: Duration = Duration::from_secs(60);
// criterion 3
const DENOISE_TRIALS: usize = 50;
const DENOISE_MIN_WINS: usize = 45;
const STAGE_LOSS_TOL: f64 = 0.05;
const STAGE_TAIL: usize = 3;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
// criterion 7
const PSNR_OFFSET_TOL: f64 = 1e-12;
// criterion 9
const SWEEP_BUDGET: Duration = Duration::from_secs(2 * 60 * 60);

struct Report {
    lines: Vec<(String, bool, String)>,
}

impl Report {
    fn record(&mut self, label: &str, pass: bool, detail: impl Into<String>) {
        let detail = detail.into();
        println!("{label}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((label.to_string(), pass, detail));
    }
}

fn data_dir() -> PathBuf {
    let dir = std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    for f in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
        if !dir.join(f).is_file() {
            panic!(
                "acceptance needs MNIST: {} is missing. Place the four uncompressed IDX files in {} or set {DATA_DIR_ENV}.",
                dir.join(f).display(),
                dir.display()
            );
        }
    }
    dir
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn criterion_1(rep: &mut Report) {
    let start = Instant::now();
    let g = ScanGeometry::mnist();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_adj: f64 = 0.0;
    let mut worst_lin: f64 = 0.0;
    for k in 0..100u64 {
        let n_views = rng.random_range(1..=40);
        let op = build_operator(&g, &draw_angle_subset(&g, n_views, k).unwrap()).unwrap();
        let x: Vec<f64> = (0..784).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..op.rows()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ax = op.forward(&Image::square(28, x.clone()).unwrap()).unwrap();
        let atu = op.adjoint(&u).unwrap();
        let lhs = dot(&ax, &u);
        let rhs = dot(&x, atu.as_slice());
        worst_adj = worst_adj.max((lhs - rhs).abs() / (norm(&ax) * norm(&u)));

        let y: Vec<f64> = (0..784).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = op.forward(&Image::square(28, combo).unwrap()).unwrap();
        let ay = op.forward(&Image::square(28, y).unwrap()).unwrap();
        let rhs: Vec<f64> = ax.iter().zip(&ay).map(|(p, q)| a * p + b * q).collect();
        let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(p, q)| p - q).collect();
        worst_lin = worst_lin.max(norm(&diff) / norm(&rhs).max(f64::MIN_POSITIVE));
    }

    // dense oracle: largest singular value of an embedded 50 x 49 matrix
    let (rows, side) = (50, 7);
    let mut triplets = Vec::new();
    for r in 0..rows {
        for c in 0..side * side {
            if rng.random_bool(0.3) {
                triplets.push((r, c, rng.random_range(0.01..2.0)));
            }
        }
    }
    let op = SparseOperator::from_triplets(rows, (side, side), &triplets).unwrap();
    let mut dense = DMatrix::<f64>::zeros(rows, side * side);
    for &(r, c, w) in &triplets {
        dense[(r, c)] += w;
    }
    let oracle = dense.singular_values().max().powi(2);
    let est = op.operator_norm_sq().unwrap();
    let norm_err = (est - oracle).abs() / oracle;

    let elapsed = start.elapsed();
    let pass = worst_adj <= ADJOINT_REL_TOL
        && worst_lin <= LINEARITY_REL_TOL
        && norm_err <= NORM_REL_TOL
        && elapsed < OPERATOR_BUDGET;
    rep.record(
        "criterion 1 (operator correctness)",
        pass,
        format!(
            "adjoint rel err {worst_adj:.2e}, linearity rel err {worst_lin:.2e}, norm rel err {norm_err:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn perturbed(arch: Architecture, seed: u64) -> PriorModel {
    let base = PriorModel::random(arch.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let params = base.params().iter().map(|p| p + rng.random_range(0.05..0.4)).collect();
    PriorModel::from_params(arch, params).unwrap()
}

fn criterion_2(rep: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let model = PriorModel::random(Architecture::default(), 1).unwrap();
    let rand_img = |rng: &mut ChaCha8Rng, s: f64| Image::square(28, (0..784).map(|_| rng.random_range(-s..s)).collect()).unwrap();

    let mut worst_convex = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let a = rand_img(&mut rng, 1.5);
        let b = rand_img(&mut rng, 1.5);
        let mid = a.with_data(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| 0.5 * (x + y)).collect()).unwrap();
        let gap = model.potential(&mid).unwrap() - 0.5 * (model.potential(&a).unwrap() + model.potential(&b).unwrap());
        worst_convex = worst_convex.max(gap);
    }

    let mut worst_mono = f64::INFINITY;
    for _ in 0..100 {
        let a = rand_img(&mut rng, 1.0);
        let b = rand_img(&mut rng, 1.0);
        let fa = model.prox_apply(&a).unwrap();
        let fb = model.prox_apply(&b).unwrap();
        let df: Vec<f64> = fa.as_slice().iter().zip(fb.as_slice()).map(|(x, y)| x - y).collect();
        let dz: Vec<f64> = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x - y).collect();
        worst_mono = worst_mono.min(dot(&df, &dz));
    }

    // prox against central differences of the potential
    let small = perturbed(Architecture { input_dim: 25, hidden: vec![8, 8], beta: 2.0, alpha: 0.01 }, 3);
    let z = Image::square(5, (0..25).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let f = small.prox_apply(&z).unwrap();
    let h = 1e-5;
    let mut worst_prox: f64 = 0.0;
    for j in 0..25 {
        let shifted = |d: f64| {
            let mut v = z.as_slice().to_vec();
            v[j] += d;
            small.potential(&Image::square(5, v).unwrap()).unwrap()
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let an = f.as_slice()[j];
        worst_prox = worst_prox.max((fd - an).abs() / an.abs().max(1e-3));
    }

    // loss gradient against central differences in parameter space, n = 4
    let arch = Architecture { input_dim: 4, hidden: vec![3, 3], beta: 4.0, alpha: 0.1 };
    let tiny = perturbed(arch.clone(), 21);
    let batch: Vec<(Image, Image)> = (0..3)
        .map(|_| {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
            (Image::square(2, x).unwrap(), Image::square(2, z).unwrap())
        })
        .collect();
    let gamma = 1.5;
    let analytic = tiny.prox_match_loss(&batch, gamma).unwrap().grad;
    let h = 1e-6;
    let mut worst_param: f64 = 0.0;
    for i in 0..tiny.n_params() {
        let at = |d: f64| {
            let mut p = tiny.params().to_vec();
            p[i] += d;
            PriorModel::from_params(arch.clone(), p).unwrap().prox_match_loss(&batch, gamma).unwrap().loss
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        worst_param = worst_param.max((analytic[i] - fd).abs() / analytic[i].abs().max(1e-4));
    }

    let elapsed = start.elapsed();
    let pass = worst_convex <= CONVEXITY_SLACK
        && worst_mono >= 0.0
        && worst_prox <= PROX_FD_REL_TOL
        && worst_param <= PARAM_FD_REL_TOL
        && elapsed < PRIOR_BUDGET;
    rep.record(
        "criterion 2 (prior correctness)",
        pass,
        format!(
            "max midpoint gap {worst_convex:.2e}, min monotone product {worst_mono:.3e}, prox fd rel err {worst_prox:.2e}, \
             param fd rel err {worst_param:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn criterion_7(rep: &mut Report) {
    let g = ScanGeometry::mnist();
    let x = Image::from_fn(28, 28, |r, c| if (8..20).contains(&r) && (10..18).contains(&c) { 0.8 } else { 0.0 });

    let mut p = UqProtocol::new(11);
    p.n_seeds = 5;
    let c = Image::from_fn(28, 28, |r, c| ((r * 28 + c) % 7) as f64 / 7.0);
    let constant = run_uq(&x, &g, &p, &Constant(c)).unwrap().score;

    let mut p = UqProtocol::new(360);
    p.n_seeds = 3;
    p.noise_sigma = 0.0;
    p.solver = SolveConfig { max_iters: 5, init: InitMode::Zeros, clamp_iterates: false, tol: 0.0, ..SolveConfig::default() };
    let linear = run_uq(&x, &g, &p, &Identity).unwrap().score;

    let cfg = MetricConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noisy = Image::square(28, (0..784).map(|_| rng.random_range(-0.5..1.5)).collect()).unwrap();
    let clamped = clamp01(&noisy);
    let clamp_ok = clamp01(&clamped) == clamped
        && clamped.as_slice().iter().all(|v| (0.0..=1.0).contains(v))
        && clamp01(&x) == x;
    let self_ssim = ssim(&clamped, &clamped, &cfg).unwrap();
    let offset = clamped.map(|v| v + 0.1);
    let offset_psnr = psnr(&offset, &clamped, &cfg).unwrap();

    let pass = constant == 0.0
        && linear == 0.0
        && clamp_ok
        && self_ssim == 1.0
        && (offset_psnr - 20.0).abs() <= PSNR_OFFSET_TOL;
    rep.record(
        "criterion 7 (degenerate cases)",
        pass,
        format!(
            "constant-prox score {constant}, noiseless full linear score {linear}, clamp idempotent {clamp_ok}, \
             ssim(x,x) {self_ssim}, psnr at offset 0.1 {offset_psnr:.15} dB"
        ),
    );
}

/// Held-out zeros: test-file zeros that are not evaluation images.
fn denoising_trials(cfg: &ExperimentConfig, model: &PriorModel) -> (usize, f64) {
    let data = load_mnist(&cfg.data_dir).unwrap();
    let splits = make_splits(&data, cfg.train_digit, cfg.eval_per_digit, cfg.split_seed).unwrap();
    let used: Vec<usize> = splits.eval.iter().filter(|e| e.digit == cfg.train_digit).map(|e| e.source_index).collect();
    let held: Vec<usize> = data.test.indices_of(cfg.train_digit).into_iter().filter(|i| !used.contains(i)).take(DENOISE_TRIALS).collect();
    assert_eq!(held.len(), DENOISE_TRIALS);
    let sigma = cfg.train.sigma_train;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut wins = 0;
    let mut ratio = 0.0;
    for &i in &held {
        let x = &data.test.images[i];
        let noise: Vec<f64> = (0..x.len()).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let z = x.with_data(x.as_slice().iter().zip(&noise).map(|(a, n)| a + n).collect()).unwrap();
        let f = model.prox_apply(&z).unwrap();
        let err: Vec<f64> = f.as_slice().iter().zip(x.as_slice()).map(|(a, b)| a - b).collect();
        let r = norm(&err) / norm(&noise);
        ratio += r / DENOISE_TRIALS as f64;
        if r < 1.0 {
            wins += 1;
        }
    }
    (wins, ratio)
}

/// Every CSV under `dir`, keyed by relative path.
fn csv_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

struct Tables {
    /// (digit, n_views, method) -> mean PSNR
    psnr: BTreeMap<(u8, usize, String), f64>,
    /// (digit, n_views) -> mean LPN score over the digit's images
    score: BTreeMap<(u8, usize), f64>,
}

fn read_tables(dir: &Path) -> Tables {
    let summary = table_rows(&std::fs::read_to_string(dir.join("summary.csv")).unwrap());
    let psnr = summary
        .iter()
        .map(|r| ((r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].clone()), r[4].parse().unwrap()))
        .collect();
    let avg = table_rows(&std::fs::read_to_string(dir.join("avg_std.csv")).unwrap());
    let score = avg
        .iter()
        .filter(|r| r[2] == "lpn")
        .map(|r| ((r[0].parse().unwrap(), r[1].parse().unwrap()), r[3].parse().unwrap()))
        .collect();
    Tables { psnr, score }
}

fn ood_mean(t: &Tables, v: usize) -> f64 {
    (1..10u8).map(|d| t.score[&(d, v)]).sum::<f64>() / 9.0
}

fn main() {
    let mut rep = Report { lines: Vec::new() };
    criterion_1(&mut rep);
    criterion_2(&mut rep);
    criterion_7(&mut rep);

    let data = data_dir();
    let work = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { data_dir: data, output_dir: work.path().join("run1"), ..ExperimentConfig::default() };

    // criterion 3
    let start = Instant::now();
    let trained = cmd_train(&cfg).unwrap();
    let train_time = start.elapsed();
    let model = load_model(&trained.checkpoint).unwrap();
    let (wins, ratio) = denoising_trials(&cfg, &model);
    let mut worst_rise = f64::NEG_INFINITY;
    for stage in trained.log.stages() {
        let tail = &stage[stage.len().saturating_sub(STAGE_TAIL)..];
        for w in tail.windows(2) {
            worst_rise = worst_rise.max(w[1].mean_loss - w[0].mean_loss);
        }
    }
    let first = trained.log.epochs.first().unwrap().mean_loss;
    let last = trained.log.epochs.last().unwrap().mean_loss;
    rep.record(
        "criterion 3 (training sanity)",
        wins >= DENOISE_MIN_WINS && worst_rise <= STAGE_LOSS_TOL && train_time <= TRAIN_BUDGET,
        format!(
            "denoised {wins}/{DENOISE_TRIALS} held-out zeros (mean error ratio {ratio:.3}), largest in-stage loss rise \
             {worst_rise:.4}, first/last epoch loss {first:.4}/{last:.4}, trained on {} images in {:.0}s",
            trained.n_images,
            train_time.as_secs_f64()
        ),
    );

    // criteria 4 to 6 and 9
    let start = Instant::now();
    let sweep = cmd_experiment(&cfg).unwrap();
    let sweep_time = start.elapsed();
    let t = read_tables(&sweep.dir);

    let mut losses = Vec::new();
    for d in 0..10u8 {
        for &v in &cfg.budgets {
            let (l, f) = (t.psnr[&(d, v, "lpn".into())], t.psnr[&(d, v, "fbp".into())]);
            if l <= f {
                losses.push(format!("d{d}/v{v} {l:.2}<={f:.2}"));
            }
        }
    }
    let d0 = t.psnr[&(0, 11, "lpn".into())];
    let others = (1..10u8).map(|d| t.psnr[&(d, 11, "lpn".into())]).sum::<f64>() / 9.0;
    rep.record(
        "criterion 4 (LPN beats FBP; in-distribution best at 11 views)",
        losses.is_empty() && d0 > others,
        format!(
            "LPN not above FBP in {}/30 cells [{}]; LPN PSNR digit 0 {d0:.2} dB vs digits 1-9 mean {others:.2} dB at 11 views",
            losses.len(),
            losses.join(", ")
        ),
    );

    let s0 = t.score[&(0, 11)];
    let (min_d, min_s) = (1..10u8).map(|d| (d, t.score[&(d, 11)])).fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let floor: Vec<String> = cfg
        .budgets
        .iter()
        .map(|&v| format!("v{v} {:.4}<{:.4}", t.score[&(0, v)], ood_mean(&t, v)))
        .collect();
    let floor_ok = cfg.budgets.iter().all(|&v| t.score[&(0, v)] < ood_mean(&t, v));
    let strict_ok = s0 < min_s;
    rep.record(
        "criterion 5 (in-distribution score below OOD)",
        floor_ok,
        format!(
            "score(0) below OOD mean at every budget: {floor_ok} [{}]; strict at 11 views: {} (score(0) {s0:.4}, lowest OOD digit {min_d} {min_s:.4})",
            floor.join(", "),
            if strict_ok { "holds" } else { "does not hold" }
        ),
    );

    let gaps: Vec<(usize, f64)> = cfg.budgets.iter().map(|&v| (v, ood_mean(&t, v) - t.score[&(0, v)])).collect();
    let g11 = gaps.iter().find(|g| g.0 == 11).map(|g| g.1).unwrap();
    let gap_ok = gaps.iter().all(|&(v, g)| v == 11 || g11 > g);
    rep.record(
        "criterion 6 (gap largest at 11 views)",
        gap_ok,
        gaps.iter().map(|(v, g)| format!("gap v{v} {g:.4}")).collect::<Vec<_>>().join(", "),
    );

    // criterion 8: same config and checkpoint, fresh output tree
    let mut again = cfg.clone();
    again.output_dir = work.path().join("run2");
    again.checkpoint = Some(trained.checkpoint.clone());
    let rerun = cmd_experiment(&again).unwrap();
    let (a, b) = (csv_tree(&sweep.dir), csv_tree(&rerun.dir));
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    rep.record(
        "criterion 8 (determinism)",
        differing.is_empty() && !a.is_empty(),
        format!("{} CSV files compared, {} differ {:?}", a.len(), differing.len(), differing.iter().take(5).collect::<Vec<_>>()),
    );

    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    rep.record(
        "criterion 9 (sweep runtime)",
        sweep.new_reconstructions == 6000 && sweep_time <= SWEEP_BUDGET,
        format!("{} reconstructions in {:.0}s on {cores} threads", sweep.new_reconstructions, sweep_time.as_secs_f64()),
    );

    // supplementary pipeline checks
    let lpn0 = t.psnr[&(0, 11, "lpn".into())];
    let fbp0 = t.psnr[&(0, 11, "fbp".into())];
    rep.record("pipeline (LPN above FBP on digit 0 at 11 views)", lpn0 > fbp0, format!("{lpn0:.2} vs {fbp0:.2} dB"));
    rep.record("pipeline (final training loss below first)", last < first, format!("{last:.4} vs {first:.4}"));

    let failed: Vec<&String> = rep.lines.iter().filter(|l| !l.1).map(|l| &l.0).collect();
    println!("{} of {} checks passed", rep.lines.len() - failed.len(), rep.lines.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
