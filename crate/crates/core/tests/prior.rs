use ctuq_core::prior::{load_model, model_to_bytes, save_model, Architecture};
use ctuq_core::{Image, PriorModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> PriorModel {
    PriorModel::random(Architecture { beta: 2.0, ..Architecture::default() }, 11).unwrap()
}

fn image(rng: &mut ChaCha8Rng, scale: f64) -> Image {
    Image::square(28, (0..784).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn sub(a: &Image, b: &Image) -> Vec<f64> {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x - y).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn potential_is_midpoint_convex(seed in any::<u64>(), scale in 0.01f64..3.0) {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (image(&mut rng, scale), image(&mut rng, scale));
        let mid = a.with_data(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| 0.5 * (x + y)).collect()).unwrap();
        let lhs = m.potential(&mid).unwrap();
        let rhs = 0.5 * (m.potential(&a).unwrap() + m.potential(&b).unwrap());
        prop_assert!(lhs <= rhs + 1e-9, "{lhs} > {rhs}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn prox_is_strongly_monotone(seed in any::<u64>(), scale in 0.01f64..2.0) {
        let m = model();
        let alpha = m.architecture().alpha;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (image(&mut rng, scale), image(&mut rng, scale));
        let df = sub(&m.prox_apply(&a).unwrap(), &m.prox_apply(&b).unwrap());
        let dz = sub(&a, &b);
        let inner: f64 = df.iter().zip(&dz).map(|(p, q)| p * q).sum();
        let dz2: f64 = dz.iter().map(|v| v * v).sum();
        prop_assert!(inner >= alpha * dz2 - 1e-9 * dz2.max(1.0), "{inner} < {}", alpha * dz2);
    }

    #[test]
    fn prox_is_gradient_of_potential(seed in any::<u64>()) {
        let m = PriorModel::random(Architecture { input_dim: 25, hidden: vec![12, 9], beta: 3.0, alpha: 0.05 }, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Image::square(5, (0..25).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let f = m.prox_apply(&z).unwrap();
        let h = 1e-4;
        for j in 0..25 {
            let mut zp = z.clone();
            zp.as_mut_slice()[j] += h;
            let mut zm = z.clone();
            zm.as_mut_slice()[j] -= h;
            let fd = (m.potential(&zp).unwrap() - m.potential(&zm).unwrap()) / (2.0 * h);
            let an = f.as_slice()[j];
            prop_assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-2), "{j}: {fd} vs {an}");
        }
    }

    #[test]
    fn potential_finite_for_finite_inputs(seed in any::<u64>(), scale in 0.0f64..1e3) {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = image(&mut rng, scale.max(1e-12));
        prop_assert!(m.potential(&z).unwrap().is_finite());
        prop_assert!(m.prox_apply(&z).unwrap().is_finite());
    }
}

#[test]
fn checkpoint_survives_the_filesystem() {
    let dir = tempfile_dir();
    let path = dir.join("prior.ckpt");
    let m = model();
    save_model(&m, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), model_to_bytes(&m));
    assert_eq!(load_model(&path).unwrap(), m);
    std::fs::remove_dir_all(dir).unwrap();
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("ctuq-prior-it-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
