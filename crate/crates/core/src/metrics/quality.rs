//! Full-reference image quality: PSNR, SSIM, GMSD.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const GMSD_C_255: f64 = 170.0;

fn check_range(data_range: f64) -> Result<()> {
    if data_range > 0.0 && data_range.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!(
            "data_range must be positive, got {data_range}"
        )))
    }
}

/// `10·log10(R² / MSE)`; `f64::INFINITY` when the images are identical.
pub fn psnr<S: Scalar>(pred: &TensorImage<S>, gt: &TensorImage<S>, data_range: f64) -> Result<f64> {
    pred.check_same_shape(gt, "psnr")?;
    check_range(data_range)?;
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

pub(crate) fn ssim_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * plane[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over the valid region of an 11×11, σ = 1.5 Gaussian window,
/// averaged over channels.
pub fn ssim<S: Scalar>(pred: &TensorImage<S>, gt: &TensorImage<S>, data_range: f64) -> Result<f64> {
    pred.check_same_shape(gt, "ssim")?;
    check_range(data_range)?;
    let (c, h, w) = pred.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least 11x11, got {h}x{w}"
        )));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let k = ssim_kernel();
    let mut total = 0.0;
    for ch in 0..c {
        let a: Vec<f64> = pred.plane(ch).iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = gt.plane(ch).iter().map(|v| v.as_f64()).collect();
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            a.iter().zip(&b).map(|(&x, &y)| f(x, y)).collect()
        };
        let mu_a = filter_valid(&a, h, w, &k);
        let mu_b = filter_valid(&b, h, w, &k);
        let aa = filter_valid(&prod(&|x, _| x * x), h, w, &k);
        let bb = filter_valid(&prod(&|_, y| y * y), h, w, &k);
        let ab = filter_valid(&prod(&|x, y| x * y), h, w, &k);
        let n = mu_a.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / n as f64;
    }
    Ok(total / c as f64)
}

/// Prewitt gradient magnitude (kernels divided by 3) over the valid region.
pub(crate) fn prewitt_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h - 2, w - 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let p = |dy: usize, dx: usize| plane[(y + dy) * w + x + dx];
            let mut gx = 0.0;
            let mut gy = 0.0;
            for i in 0..3 {
                gx += p(i, 0) - p(i, 2);
                gy += p(0, i) - p(2, i);
            }
            gx /= 3.0;
            gy /= 3.0;
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Population standard deviation of the gradient-magnitude similarity map,
/// with `c = 170·(R/255)²`. Channels are pooled.
pub fn gmsd<S: Scalar>(pred: &TensorImage<S>, gt: &TensorImage<S>, data_range: f64) -> Result<f64> {
    pred.check_same_shape(gt, "gmsd")?;
    check_range(data_range)?;
    let (c, h, w) = pred.dims();
    if h < 3 || w < 3 {
        return Err(Error::shape(format!(
            "gmsd needs at least 3x3, got {h}x{w}"
        )));
    }
    let cst = GMSD_C_255 * (data_range / 255.0).powi(2);
    let mut sims = Vec::with_capacity(c * (h - 2) * (w - 2));
    for ch in 0..c {
        let a: Vec<f64> = pred.plane(ch).iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = gt.plane(ch).iter().map(|v| v.as_f64()).collect();
        let ma = prewitt_magnitude(&a, h, w);
        let mb = prewitt_magnitude(&b, h, w);
        sims.extend(
            ma.iter()
                .zip(&mb)
                .map(|(&p, &g)| (2.0 * p * g + cst) / (p * p + g * g + cst)),
        );
    }
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}
