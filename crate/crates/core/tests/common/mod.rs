//! Shared oracles and fixtures for the integration suites. Everything here
//! is written against definitions, independent of the library's
//! implementation paths.

#![allow(dead_code)]

use occlusim_core::imaging::OcclusionField;
use occlusim_core::losses::LossConfig;
use occlusim_core::ImageTensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rand_image(seed: u64, h: usize, w: usize, lo: f32, hi: f32) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(h, w, 3, |_, _, _| rng.gen_range(lo..hi))
}

pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m >= n {
        m = period - m;
    }
    m as usize
}

// ---------------------------------------------------------------------------
// Degradation physics oracle: per-pixel, per-tap evaluation in f64.
// ---------------------------------------------------------------------------

/// Blur one logical image (given as a closure) at one output pixel.
fn blur_at(
    f: &dyn Fn(usize, usize, usize) -> f64,
    weights: &ndarray::Array2<f32>,
    h: usize,
    w: usize,
    y: usize,
    x: usize,
    ch: usize,
) -> f64 {
    let k = weights.dim().0;
    let r = k as isize / 2;
    let mut acc = 0.0;
    for ky in 0..k {
        for kx in 0..k {
            let sy = reflect(y as isize + ky as isize - r, h);
            let sx = reflect(x as isize + kx as isize - r, w);
            acc += weights[(ky, kx)] as f64 * f(sy, sx, ch);
        }
    }
    acc
}

/// Brute-force evaluation of the degradation composition (default order:
/// attenuation applied to blurred terms), clipped to `[0, 1]`.
pub fn degrade_oracle(
    clean: &ImageTensor,
    field: &OcclusionField,
    weights: &ndarray::Array2<f32>,
    tau_c: f32,
    tau_p: f32,
) -> ImageTensor {
    let (h, w, c) = clean.dims();
    let alpha = |y: usize, x: usize| field.alpha[(y, x)] as f64;
    if field.beta == 0 {
        return ImageTensor::from_fn(h, w, c, |y, x, ch| {
            let scene = blur_at(
                &|sy, sx, sc| clean.get(sy, sx, sc) as f64,
                weights,
                h,
                w,
                y,
                x,
                ch,
            );
            let glow = blur_at(
                &|sy, sx, sc| field.intensification.get(sy, sx, sc) as f64,
                weights,
                h,
                w,
                y,
                x,
                ch,
            );
            let a = alpha(y, x);
            (a * scene + (1.0 - a) * glow).clamp(0.0, 1.0) as f32
        });
    }
    let occluded = |y: usize, x: usize| field.alpha[(y, x)] < tau_p;
    let core = |y: usize, x: usize| field.alpha[(y, x)] <= tau_c;
    ImageTensor::from_fn(h, w, c, |y, x, ch| {
        let scene = blur_at(
            &|sy, sx, sc| clean.get(sy, sx, sc) as f64,
            weights,
            h,
            w,
            y,
            x,
            ch,
        );
        let part = blur_at(
            &|sy, sx, sc| {
                if occluded(sy, sx) {
                    clean.get(sy, sx, sc) as f64
                } else {
                    0.0
                }
            },
            weights,
            h,
            w,
            y,
            x,
            ch,
        );
        let cv = blur_at(
            &|sy, sx, sc| {
                if core(sy, sx) {
                    field.complete_value[sc] as f64
                } else {
                    0.0
                }
            },
            weights,
            h,
            w,
            y,
            x,
            ch,
        );
        let v = scene + (alpha(y, x) - 1.0) * part + cv;
        v.clamp(0.0, 1.0) as f32
    })
}

// ---------------------------------------------------------------------------
// Metric oracle: scalar-loop PSNR and SSIM using the covariance form
// E[(x - mu_x)(y - mu_y)] rather than the implementation's E[xy] - mu mu.
// ---------------------------------------------------------------------------

pub fn psnr_oracle(x: &ImageTensor, y: &ImageTensor, range: f64) -> f64 {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    let (h, w, c) = x.dims();
    for yy in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let d = x.get(yy, xx, ch) as f64 - y.get(yy, xx, ch) as f64;
                sum += d * d;
                n += 1;
            }
        }
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (range * range / mse).log10()).min(100.0)
    }
}

pub fn ssim_oracle(x: &ImageTensor, y: &ImageTensor) -> f64 {
    const K: usize = 11;
    const SIGMA: f64 = 1.5;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let c_mid = (K / 2) as f64;
    let g1: Vec<f64> = (0..K)
        .map(|i| (-((i as f64 - c_mid).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let norm: f64 = g1.iter().sum();
    let wgt = |ky: usize, kx: usize| g1[ky] * g1[kx] / (norm * norm);

    let (h, w, c) = x.dims();
    let (ho, wo) = (h - K + 1, w - K + 1);
    let mut total = 0.0;
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut mx = 0.0;
                let mut my = 0.0;
                for ky in 0..K {
                    for kx in 0..K {
                        mx += wgt(ky, kx) * x.get(oy + ky, ox + kx, ch) as f64;
                        my += wgt(ky, kx) * y.get(oy + ky, ox + kx, ch) as f64;
                    }
                }
                let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
                for ky in 0..K {
                    for kx in 0..K {
                        let dvx = x.get(oy + ky, ox + kx, ch) as f64 - mx;
                        let dvy = y.get(oy + ky, ox + kx, ch) as f64 - my;
                        sx += wgt(ky, kx) * dvx * dvx;
                        sy += wgt(ky, kx) * dvy * dvy;
                        sxy += wgt(ky, kx) * dvx * dvy;
                    }
                }
                total += ((2.0 * mx * my + C1) * (2.0 * sxy + C2))
                    / ((mx * mx + my * my + C1) * (sx + sy + C2));
            }
        }
    }
    total / (c * ho * wo) as f64
}

// ---------------------------------------------------------------------------
// f64 branch-loss oracle (value only; finite differences supply gradients).
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct Img {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl Img {
    pub fn from_tensor(t: &ImageTensor) -> Self {
        let (h, w, c) = t.dims();
        let mut v = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    v[(y * w + x) * c + ch] = t.get(y, x, ch) as f64;
                }
            }
        }
        Self { h, w, c, v }
    }

    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.v[(y * self.w + x) * self.c + ch]
    }
}

fn gauss1d(k: usize, sigma: f64) -> Vec<f64> {
    let c = (k / 2) as f64;
    let raw: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn level_weights(levels: usize) -> Vec<f64> {
    let canonical = [0.0448f64, 0.2856, 0.3001, 0.2363, 0.1333];
    let w: Vec<f64> = canonical[..levels.min(5)].to_vec();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn downsample2(img: &Img) -> Img {
    let (ho, wo) = (img.h / 2, img.w / 2);
    let mut v = vec![0.0; ho * wo * img.c];
    for y in 0..ho {
        for x in 0..wo {
            for ch in 0..img.c {
                let s = img.at(2 * y, 2 * x, ch)
                    + img.at(2 * y, 2 * x + 1, ch)
                    + img.at(2 * y + 1, 2 * x, ch)
                    + img.at(2 * y + 1, 2 * x + 1, ch);
                v[(y * wo + x) * img.c + ch] = s * 0.25;
            }
        }
    }
    Img {
        h: ho,
        w: wo,
        c: img.c,
        v,
    }
}

fn ssim_level(x: &Img, y: &Img, k: usize, sigma: f64, c1: f64, c2: f64) -> (f64, f64) {
    let g = gauss1d(k, sigma);
    let (ho, wo) = (x.h - k + 1, x.w - k + 1);
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    for ch in 0..x.c {
        for oy in 0..ho {
            for ox in 0..wo {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..k {
                    for kx in 0..k {
                        let wgt = g[ky] * g[kx];
                        let xv = x.at(oy + ky, ox + kx, ch);
                        let yv = y.at(oy + ky, ox + kx, ch);
                        mx += wgt * xv;
                        my += wgt * yv;
                        mxx += wgt * xv * xv;
                        myy += wgt * yv * yv;
                        mxy += wgt * xv * yv;
                    }
                }
                let sx = mxx - mx * mx;
                let sy = myy - my * my;
                let sxy = mxy - mx * my;
                let cs = (2.0 * sxy + c2) / (sx + sy + c2);
                let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                ssim_sum += l * cs;
                cs_sum += cs;
            }
        }
    }
    let n = (x.c * ho * wo) as f64;
    (ssim_sum / n, cs_sum / n)
}

fn remap01(img: &ImageTensor) -> Img {
    // The remap must stay in f64: rounding it in f32 would quantize the
    // effective step of any finite difference taken over this oracle.
    let mut out = Img::from_tensor(img);
    for v in out.v.iter_mut() {
        *v = (*v + 1.0) * 0.5;
    }
    out
}

pub fn oracle_ms_ssim(pred: &ImageTensor, target: &ImageTensor, cfg: &LossConfig) -> f64 {
    let mut x = remap01(pred);
    let mut y = remap01(target);
    let weights = level_weights(cfg.msssim_levels);
    let mut acc = 1.0;
    for (level, &w) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_level(
            &x,
            &y,
            cfg.msssim_window,
            cfg.msssim_sigma as f64,
            cfg.c1 as f64,
            cfg.c2 as f64,
        );
        let factor = if level + 1 == weights.len() { ssim } else { cs };
        acc *= factor.max(0.0).powf(w);
        if level + 1 != weights.len() {
            x = downsample2(&x);
            y = downsample2(&y);
        }
    }
    acc
}

pub fn oracle_weighted_l1(pred: &ImageTensor, target: &ImageTensor, cfg: &LossConfig) -> f64 {
    let x = Img::from_tensor(pred);
    let y = Img::from_tensor(target);
    let (h, w, c) = (x.h, x.w, x.c);
    let err = |yy: usize, xx: usize, ch: usize| (x.at(yy, xx, ch) - y.at(yy, xx, ch)).abs();
    if cfg.gaussian_weight_sigma <= 0.0 {
        let mut total = 0.0;
        for yy in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    total += err(yy, xx, ch);
                }
            }
        }
        return total / (h * w * c) as f64;
    }
    let k = cfg.msssim_window;
    let g = gauss1d(k, cfg.gaussian_weight_sigma as f64);
    let r = (k / 2) as isize;
    let mut total = 0.0;
    for ch in 0..c {
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = reflect(oy as isize + ky as isize - r, h);
                        let sx = reflect(ox as isize + kx as isize - r, w);
                        acc += g[ky] * g[kx] * err(sy, sx, ch);
                    }
                }
                total += acc;
            }
        }
    }
    total / (h * w * c) as f64
}

pub fn oracle_branch_loss(pred: &ImageTensor, target: &ImageTensor, cfg: &LossConfig) -> f64 {
    let a0 = cfg.alpha0 as f64;
    a0 * (1.0 - oracle_ms_ssim(pred, target, cfg))
        + (1.0 - a0) * oracle_weighted_l1(pred, target, cfg)
}
