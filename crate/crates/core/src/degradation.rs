//! Synthetic HR/LR pairs: phantoms, block-average downsampling and
//! nearest-neighbour pre-upsampling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::ImagePair;
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::scalar::Scalar;
use crate::tensor::TensorImage;

pub const MIN_PHANTOM_SIDE: usize = 16;

fn check_factors(h: usize, w: usize, fh: usize, fw: usize) -> Result<()> {
    if fh == 0 || fw == 0 {
        return Err(Error::arg("downsampling factor must be positive"));
    }
    if !h.is_multiple_of(fh) || !w.is_multiple_of(fw) {
        return Err(Error::shape(format!(
            "factor {fh}x{fw} does not divide image size {h}x{w}"
        )));
    }
    Ok(())
}

/// Non-overlapping `fh×fw` block means. Sums run relative to the block's
/// first pixel, so constant blocks come back bit-exact.
pub fn downsample_by<S: Scalar>(
    img: &TensorImage<S>,
    fh: usize,
    fw: usize,
) -> Result<TensorImage<S>> {
    let (c, h, w) = img.dims();
    check_factors(h, w, fh, fw)?;
    let (oh, ow) = (h / fh, w / fw);
    let inv = 1.0 / (fh * fw) as f64;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = img.plane(ch);
        for by in 0..oh {
            for bx in 0..ow {
                let anchor = plane[by * fh * w + bx * fw].as_f64();
                let mut s = 0.0;
                for y in by * fh..(by + 1) * fh {
                    for x in bx * fw..(bx + 1) * fw {
                        s += plane[y * w + x].as_f64() - anchor;
                    }
                }
                out.push(S::lit(anchor + s * inv));
            }
        }
    }
    Ok(TensorImage::from_raw(oh, ow, c, out))
}

pub fn downsample<S: Scalar>(img: &TensorImage<S>, factor: usize) -> Result<TensorImage<S>> {
    downsample_by(img, factor, factor)
}

/// Replicates every pixel into an `fh×fw` block.
pub fn upsample_nearest_by<S: Scalar>(
    img: &TensorImage<S>,
    fh: usize,
    fw: usize,
) -> Result<TensorImage<S>> {
    if fh == 0 || fw == 0 {
        return Err(Error::arg("upsampling factor must be positive"));
    }
    let (c, h, w) = img.dims();
    let (oh, ow) = (h * fh, w * fw);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = img.plane(ch);
        for y in 0..oh {
            let row = &plane[(y / fh) * w..(y / fh + 1) * w];
            out.extend((0..ow).map(|x| row[x / fw]));
        }
    }
    Ok(TensorImage::from_raw(oh, ow, c, out))
}

pub fn upsample_nearest<S: Scalar>(img: &TensorImage<S>, factor: usize) -> Result<TensorImage<S>> {
    upsample_nearest_by(img, factor, factor)
}

/// The LR operator at HR size: block average, then nearest upsampling.
pub fn degrade<S: Scalar>(hr: &TensorImage<S>, factor: usize) -> Result<TensorImage<S>> {
    upsample_nearest(&downsample(hr, factor)?, factor)
}

pub fn make_pair<S: Scalar>(hr: &TensorImage<S>, factor: usize) -> Result<ImagePair<S>> {
    ImagePair::new(hr.clone(), degrade(hr, factor)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhantomKind {
    SmoothField,
    Ellipses,
    CheckerLesion,
}

impl PhantomKind {
    pub const ALL: [PhantomKind; 3] = [
        PhantomKind::SmoothField,
        PhantomKind::Ellipses,
        PhantomKind::CheckerLesion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhantomKind::SmoothField => "smooth-field",
            PhantomKind::Ellipses => "ellipses",
            PhantomKind::CheckerLesion => "checker-lesion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub kind: PhantomKind,
    pub seed: u64,
    /// Degradation factor the lesions must survive.
    pub factor: usize,
}

impl PhantomSpec {
    pub fn new(height: usize, width: usize, kind: PhantomKind, seed: u64) -> Self {
        PhantomSpec {
            height,
            width,
            kind,
            seed,
            factor: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_PHANTOM_SIDE || self.width < MIN_PHANTOM_SIDE {
            return Err(Error::arg(format!(
                "phantom must be at least {MIN_PHANTOM_SIDE}x{MIN_PHANTOM_SIDE}, got {}x{}",
                self.height, self.width
            )));
        }
        if self.factor == 0 {
            return Err(Error::arg("phantom factor must be positive"));
        }
        if self.kind == PhantomKind::CheckerLesion
            && lesion_diameter(self.factor) + 2 > self.height.min(self.width)
        {
            return Err(Error::arg(format!(
                "lesions of diameter {} do not fit a {}x{} phantom",
                lesion_diameter(self.factor),
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

fn lesion_diameter(factor: usize) -> usize {
    3 * factor
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * data[y * w + reflect(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn rescale(data: &mut [f64], lo: f64, hi: f64) {
    let min = data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    for v in data.iter_mut() {
        *v = if span > 0.0 {
            lo + (hi - lo) * (*v - min) / span
        } else {
            0.5 * (lo + hi)
        };
    }
}

fn smooth_field(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let sigma = h.min(w) as f64 / 8.0;
    blur(&noise, h, w, sigma)
}

fn ellipses(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut img = vec![0.0; h * w];
    let (hf, wf) = (h as f64, w as f64);
    let count = rng.gen_range(3..=6);
    for _ in 0..count {
        let cy = rng.gen_range(0.2..0.8) * hf;
        let cx = rng.gen_range(0.2..0.8) * wf;
        let ay = rng.gen_range(0.1..0.4) * hf;
        let ax = rng.gen_range(0.1..0.4) * wf;
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let value = rng.gen_range(0.2..1.0);
        let (s, c) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                if (u / ax).powi(2) + (v / ay).powi(2) <= 1.0 {
                    img[y * w + x] = value;
                }
            }
        }
    }
    img
}

fn lesions(h: usize, w: usize, factor: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut img = smooth_field(h, w, rng);
    rescale(&mut img, 0.2, 0.6);
    let count = rng.gen_range(1..=3);
    for i in 0..count {
        let d = lesion_diameter(factor) + if i == 0 { 0 } else { rng.gen_range(0..=factor) };
        let r = (d as f64 / 2.0 + 1.0).min(h.min(w) as f64 / 2.0);
        let cy = rng.gen_range(r..=h as f64 - r);
        let cx = rng.gen_range(r..=w as f64 - r);
        let value = rng.gen_range(0.85..1.0);
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                if dy * dy + dx * dx <= r * r {
                    img[y * w + x] = value;
                }
            }
        }
    }
    img
}

/// Deterministic synthetic slice with values in `[0, 1]`.
pub fn gen_phantom<S: Scalar>(spec: &PhantomSpec) -> Result<TensorImage<S>> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = stream_rng(spec.seed, 0x9a47 + spec.kind as u64);
    let mut data = match spec.kind {
        PhantomKind::SmoothField => {
            let mut d = smooth_field(h, w, &mut rng);
            rescale(&mut d, 0.05, 0.95);
            d
        }
        PhantomKind::Ellipses => ellipses(h, w, &mut rng),
        PhantomKind::CheckerLesion => lesions(h, w, spec.factor, &mut rng),
    };
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(TensorImage::from_raw(
        h,
        w,
        1,
        data.into_iter().map(S::lit).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_image;
    use proptest::prelude::*;

    #[test]
    fn block_average_example() {
        let img = TensorImage::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let d = downsample(&img, 2).unwrap();
        assert_eq!((d.height(), d.width()), (1, 1));
        assert_eq!(d.data(), &[2.5]);
        assert_eq!(downsample(&img, 1).unwrap(), img);
        assert!(downsample(&img, 3).is_err());
        assert!(downsample(&img, 0).is_err());
    }

    #[test]
    fn nearest_example() {
        let img = TensorImage::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let u = upsample_nearest(&img, 2).unwrap();
        let want = TensorImage::from_rows(&[
            &[1.0, 1.0, 2.0, 2.0],
            &[1.0, 1.0, 2.0, 2.0],
            &[3.0, 3.0, 4.0, 4.0],
            &[3.0, 3.0, 4.0, 4.0],
        ])
        .unwrap();
        assert_eq!(u, want);
        assert_eq!(upsample_nearest(&img, 1).unwrap(), img);
    }

    #[test]
    fn anisotropic_factors() {
        let img = TensorImage::<f64>::from_fn(6, 4, |y, x| (y * 4 + x) as f64);
        let d = downsample_by(&img, 3, 2).unwrap();
        assert_eq!((d.height(), d.width()), (2, 2));
        assert_eq!(d.get(0, 0, 0), (0.0 + 1.0 + 4.0 + 5.0 + 8.0 + 9.0) / 6.0);
        let u = upsample_nearest_by(&d, 3, 2).unwrap();
        assert_eq!((u.height(), u.width()), (6, 4));
    }

    #[test]
    fn constant_and_grid_aligned_pairs_have_zero_residual() {
        let c = TensorImage::<f64>::filled(16, 16, 0.3);
        let p = make_pair(&c, 4).unwrap();
        assert_eq!(p.lr(), &c);
        assert!(p.residual().data().iter().all(|&v| v == 0.0));

        let blocks = TensorImage::<f64>::from_fn(16, 16, |y, x| ((y / 4 + x / 4) % 2) as f64);
        assert!(make_pair(&blocks, 4).unwrap().residual().norm() == 0.0);

        let noisy = gaussian_image::<f64>(16, 16, 1, &mut stream_rng(1, 0));
        assert!(make_pair(&noisy, 4).unwrap().residual().norm() > 0.0);
    }

    #[test]
    fn phantoms_are_deterministic_and_bounded() {
        for kind in PhantomKind::ALL {
            let spec = PhantomSpec::new(32, 48, kind, 9);
            let a = gen_phantom::<f64>(&spec).unwrap();
            let b = gen_phantom::<f64>(&spec).unwrap();
            assert_eq!(a, b);
            assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let other = gen_phantom::<f64>(&PhantomSpec { seed: 10, ..spec }).unwrap();
            assert_ne!(a, other, "{}", kind.name());
        }
        assert!(gen_phantom::<f64>(&PhantomSpec::new(8, 32, PhantomKind::Ellipses, 0)).is_err());
    }

    /// Largest disc of near-uniform bright pixels, measured as the widest
    /// horizontal run at or above the lesion intensity floor.
    fn widest_bright_run(img: &TensorImage<f64>) -> usize {
        let (h, w) = (img.height(), img.width());
        let mut best = 0;
        for y in 0..h {
            let mut run = 0;
            for x in 0..w {
                if img.get(0, y, x) >= 0.85 {
                    run += 1;
                    best = best.max(run);
                } else {
                    run = 0;
                }
            }
        }
        best
    }

    #[test]
    fn lesions_are_wide_enough_to_survive_degradation() {
        for seed in 0..20 {
            for factor in [2, 4] {
                let spec = PhantomSpec {
                    factor,
                    ..PhantomSpec::new(32, 32, PhantomKind::CheckerLesion, seed)
                };
                let img = gen_phantom::<f64>(&spec).unwrap();
                assert!(
                    widest_bright_run(&img) >= 3 * factor,
                    "seed {seed} factor {factor}"
                );
            }
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in PhantomKind::ALL {
            assert_eq!(PhantomKind::parse(kind.name()), Some(kind));
        }
        assert_eq!(PhantomKind::parse("blob"), None);
    }

    proptest! {
        #[test]
        fn downsampling_preserves_the_mean(seed in 0u64..1000, f in 1usize..5, bh in 1usize..5, bw in 1usize..5) {
            let img = gaussian_image::<f64>(f * bh, f * bw, 1, &mut stream_rng(seed, 0));
            let d = downsample(&img, f).unwrap();
            prop_assert!((d.mean() - img.mean()).abs() <= 1e-12);
        }

        #[test]
        fn degradation_is_idempotent(seed in 0u64..1000, f in 1usize..5) {
            let img = gaussian_image::<f64>(4 * f, 4 * f, 1, &mut stream_rng(seed, 0));
            let lr = degrade(&img, f).unwrap();
            prop_assert_eq!(degrade(&lr, f).unwrap(), lr.clone());
            prop_assert_eq!(downsample(&upsample_nearest(&img, f).unwrap(), f).unwrap(), img);
        }
    }
}
