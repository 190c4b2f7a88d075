use rand::Rng;
use rand_distr::StandardNormal;
use rsrdiff::degradation::{gen_phantom, PhantomKind, PhantomSpec};
use rsrdiff::loss::perceptual_proxy;
use rsrdiff::metrics::{bootstrap_ci, dunn_bonferroni, kruskal_wallis};
use rsrdiff::rng::stream_rng;
use rsrdiff::{Image64, TensorImage};

#[test]
fn separated_groups_are_highly_significant() {
    let mut rng = stream_rng(1, 0);
    let a: Vec<f64> = (0..30)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let b: Vec<f64> = (0..30)
        .map(|_| 10.0 + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let d = dunn_bonferroni(&[a.clone(), b.clone()]).unwrap();
    assert!(d.p_adjusted[0][1] < 1e-3, "p = {}", d.p_adjusted[0][1]);
    assert!(kruskal_wallis(&[a, b]).unwrap().p_value < 1e-3);
}

#[test]
fn bootstrap_interval_covers_the_sample_mean() {
    let mut covered = 0;
    for seed in 0..200 {
        let mut rng = stream_rng(seed, 7);
        let xs: Vec<f64> = (0..20)
            .map(|_| 2.0 + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let (lo, hi) = bootstrap_ci(&xs, 2000, 0.95, seed).unwrap();
        covered += (lo <= mean && mean <= hi) as usize;
    }
    assert!(covered >= 198, "{covered}/200");
}

#[test]
fn proxy_grows_with_noise_strength() {
    let mut ordered = 0;
    for trial in 0..100u64 {
        let kind = PhantomKind::ALL[trial as usize % 3];
        let a = gen_phantom::<f64>(&PhantomSpec::new(32, 32, kind, trial)).unwrap();
        let mut rng = stream_rng(trial, 11);
        let n: Vec<f64> = (0..a.len()).map(|_| rng.sample(StandardNormal)).collect();
        let noisy = |s: f64| -> Image64 {
            TensorImage::from_fn(32, 32, |y, x| a.get(0, y, x) + s * n[y * 32 + x])
        };
        let weak = perceptual_proxy(&a, &noisy(0.02)).unwrap();
        let strong = perceptual_proxy(&a, &noisy(0.2)).unwrap();
        ordered += (strong > weak) as usize;
    }
    assert!(ordered >= 95, "{ordered}/100");
}
