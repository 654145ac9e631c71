//! Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5) on [0, 1]
//! images, channel-averaged, plus the analytic backward pass used by the
//! mapping loss. Windows at image borders renormalize over the in-bounds
//! kernel mass, so constant images score exactly 1 everywhere.

use crate::img::ImageRgb;

pub const WINDOW: usize = 11;
const HALF: isize = (WINDOW as isize) / 2;
pub const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// 1D Gaussian kernel, normalized to sum 1.
fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let mut total = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - HALF as f64;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        total += *v;
    }
    for v in &mut k {
        *v /= total;
    }
    k
}

/// In-bounds kernel mass per coordinate along an axis of length `n`.
fn axis_mass(n: usize) -> Vec<f64> {
    let k = kernel();
    (0..n)
        .map(|c| {
            let mut mass = 0.0;
            for (j, kj) in k.iter().enumerate() {
                let t = c as isize + j as isize - HALF;
                if t >= 0 && t < n as isize {
                    mass += kj;
                }
            }
            mass
        })
        .collect()
}

/// Separable same-size convolution; `normalize` divides by in-bounds mass
/// (the forward windowed mean), otherwise borders zero-pad (the adjoint).
fn conv_separable(field: &[f64], w: usize, h: usize, normalize: bool) -> Vec<f64> {
    let k = kernel();
    let mass_x = axis_mass(w);
    let mass_y = axis_mass(h);
    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                let t = x as isize + j as isize - HALF;
                if t >= 0 && t < w as isize {
                    acc += kj * field[y * w + t as usize];
                }
            }
            rows[y * w + x] = if normalize { acc / mass_x[x] } else { acc };
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                let t = y as isize + j as isize - HALF;
                if t >= 0 && t < h as isize {
                    acc += kj * rows[t as usize * w + x];
                }
            }
            out[y * w + x] = if normalize { acc / mass_y[y] } else { acc };
        }
    }
    out
}

/// Forward caches: windowed moments per channel, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SsimCache {
    width: usize,
    height: usize,
    x: Vec<[f64; 3]>,
    y: Vec<[f64; 3]>,
    mx: [Vec<f64>; 3],
    my: [Vec<f64>; 3],
    mxx: [Vec<f64>; 3],
    myy: [Vec<f64>; 3],
    mxy: [Vec<f64>; 3],
    pub mean: f64,
}

/// Mean SSIM of `x` against `y` (channel- and pixel-averaged) plus the cache
/// needed to differentiate w.r.t. `x`.
pub fn ssim_forward(x: &ImageRgb, y: &ImageRgb) -> SsimCache {
    assert_eq!((x.width, x.height), (y.width, y.height));
    let (w, h) = (x.width, x.height);
    let n = w * h;
    let channel = |img: &ImageRgb, c: usize| -> Vec<f64> {
        img.data.iter().map(|p| p[c]).collect()
    };
    let mut mx: [Vec<f64>; 3] = Default::default();
    let mut my: [Vec<f64>; 3] = Default::default();
    let mut mxx: [Vec<f64>; 3] = Default::default();
    let mut myy: [Vec<f64>; 3] = Default::default();
    let mut mxy: [Vec<f64>; 3] = Default::default();
    let mut total = 0.0;
    for c in 0..3 {
        let xc = channel(x, c);
        let yc = channel(y, c);
        let xx: Vec<f64> = xc.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = yc.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xc.iter().zip(&yc).map(|(a, b)| a * b).collect();
        mx[c] = conv_separable(&xc, w, h, true);
        my[c] = conv_separable(&yc, w, h, true);
        mxx[c] = conv_separable(&xx, w, h, true);
        myy[c] = conv_separable(&yy, w, h, true);
        mxy[c] = conv_separable(&xy, w, h, true);
        for p in 0..n {
            total += ssim_value(mx[c][p], my[c][p], mxx[c][p], myy[c][p], mxy[c][p]);
        }
    }
    SsimCache {
        width: w,
        height: h,
        x: x.data.clone(),
        y: y.data.clone(),
        mx,
        my,
        mxx,
        myy,
        mxy,
        mean: total / (3.0 * n as f64),
    }
}

/// Mean SSIM without keeping the cache.
pub fn ssim(x: &ImageRgb, y: &ImageRgb) -> f64 {
    ssim_forward(x, y).mean
}

fn ssim_value(mx: f64, my: f64, mxx: f64, myy: f64, mxy: f64) -> f64 {
    let a1 = 2.0 * mx * my + C1;
    let a2 = 2.0 * (mxy - mx * my) + C2;
    let b1 = mx * mx + my * my + C1;
    let b2 = (mxx - mx * mx) + (myy - my * my) + C2;
    a1 * a2 / (b1 * b2)
}

/// Gradient of `g_mean * mean_ssim` w.r.t. the first image. The chain runs
/// through the three x-dependent moment maps; the adjoint of the normalized
/// window is a plain convolution of the per-pixel gradient divided by the
/// window mass.
pub fn ssim_backward(cache: &SsimCache, g_mean: f64) -> Vec<[f64; 3]> {
    let (w, h) = (cache.width, cache.height);
    let n = w * h;
    let u = g_mean / (3.0 * n as f64);
    let mass_x = axis_mass(w);
    let mass_y = axis_mass(h);
    let mut out = vec![[0.0; 3]; n];
    for c in 0..3 {
        let mut gmx = vec![0.0; n];
        let mut gmxx = vec![0.0; n];
        let mut gmxy = vec![0.0; n];
        for p in 0..n {
            let (mx, my) = (cache.mx[c][p], cache.my[c][p]);
            let (mxx, myy, mxy) = (cache.mxx[c][p], cache.myy[c][p], cache.mxy[c][p]);
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * (mxy - mx * my) + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = (mxx - mx * mx) + (myy - my * my) + C2;
            let s = a1 * a2 / (b1 * b2);
            gmx[p] = u * (2.0 * my * (a2 - a1) / (b1 * b2) - 2.0 * mx * s / b1 + 2.0 * mx * s / b2);
            gmxx[p] = u * (-s / b2);
            gmxy[p] = u * (2.0 * a1 / (b1 * b2));
        }
        // Divide by the window mass before the plain adjoint convolution.
        for p in 0..n {
            let mass = mass_x[p % w] * mass_y[p / w];
            gmx[p] /= mass;
            gmxx[p] /= mass;
            gmxy[p] /= mass;
        }
        let adj_mx = conv_separable(&gmx, w, h, false);
        let adj_mxx = conv_separable(&gmxx, w, h, false);
        let adj_mxy = conv_separable(&gmxy, w, h, false);
        for p in 0..n {
            out[p][c] =
                adj_mx[p] + 2.0 * cache.x[p][c] * adj_mxx[p] + cache.y[p][c] * adj_mxy[p];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_image(rng: &mut StdRng, w: usize, h: usize) -> ImageRgb {
        ImageRgb::from_fn(w, h, |_, _| {
            [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ]
        })
    }

    /// Direct per-window reference: no separability, no shared code.
    fn reference_ssim(x: &ImageRgb, y: &ImageRgb) -> f64 {
        let k = kernel();
        let (w, h) = (x.width, x.height);
        let mut total = 0.0;
        for c in 0..3 {
            for py in 0..h as isize {
                for px in 0..w as isize {
                    let mut mass = 0.0;
                    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -HALF..=HALF {
                        for dx in -HALF..=HALF {
                            let (tx, ty) = (px + dx, py + dy);
                            if tx < 0 || ty < 0 || tx >= w as isize || ty >= h as isize {
                                continue;
                            }
                            let wgt = k[(dx + HALF) as usize] * k[(dy + HALF) as usize];
                            let xv = x.pixel(tx as usize, ty as usize)[c];
                            let yv = y.pixel(tx as usize, ty as usize)[c];
                            mass += wgt;
                            sx += wgt * xv;
                            sy += wgt * yv;
                            sxx += wgt * xv * xv;
                            syy += wgt * yv * yv;
                            sxy += wgt * xv * yv;
                        }
                    }
                    total += ssim_value(sx / mass, sy / mass, sxx / mass, syy / mass, sxy / mass);
                }
            }
        }
        total / (3.0 * (w * h) as f64)
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = StdRng::seed_from_u64(1);
        let img = random_image(&mut rng, 20, 14);
        assert!((ssim(&img, &img) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_window_reference() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..3 {
            let a = random_image(&mut rng, 23, 17);
            let b = random_image(&mut rng, 23, 17);
            assert!((ssim(&a, &b) - reference_ssim(&a, &b)).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_offset_images_match_closed_form() {
        // Zero variance collapses the structure term; only luminance remains.
        let a = ImageRgb::from_fn(16, 16, |_, _| [0.5; 3]);
        let b = ImageRgb::from_fn(16, 16, |_, _| [0.6; 3]);
        let expect = (2.0 * 0.5 * 0.6 + C1) / (0.5 * 0.5 + 0.6 * 0.6 + C1);
        assert!((ssim(&a, &b) - expect).abs() < 1e-12);
    }

    #[test]
    fn more_distortion_scores_lower() {
        let mut rng = StdRng::seed_from_u64(3);
        let clean = random_image(&mut rng, 24, 24);
        let jitter = |img: &ImageRgb, amp: f64, rng: &mut StdRng| {
            ImageRgb::from_fn(img.width, img.height, |x, y| {
                let p = img.pixel(x, y);
                [
                    (p[0] + rng.gen_range(-amp..amp)).clamp(0.0, 1.0),
                    (p[1] + rng.gen_range(-amp..amp)).clamp(0.0, 1.0),
                    (p[2] + rng.gen_range(-amp..amp)).clamp(0.0, 1.0),
                ]
            })
        };
        let mild = jitter(&clean, 0.05, &mut rng);
        let heavy = jitter(&clean, 0.3, &mut rng);
        assert!(ssim(&clean, &mild) > ssim(&clean, &heavy));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(4);
        let x = random_image(&mut rng, 9, 7);
        let y = random_image(&mut rng, 9, 7);
        let cache = ssim_forward(&x, &y);
        let grads = ssim_backward(&cache, 1.0);
        let h = 1e-6;
        for &(px, py, c) in &[(0usize, 0usize, 0usize), (4, 3, 1), (8, 6, 2), (2, 5, 0)] {
            let mut xp = x.clone();
            xp.pixel_mut(px, py)[c] += h;
            let mut xm = x.clone();
            xm.pixel_mut(px, py)[c] -= h;
            let fd = (ssim(&xp, &y) - ssim(&xm, &y)) / (2.0 * h);
            let analytic = grads[py * x.width + px][c];
            assert!(
                (fd - analytic).abs() <= 1e-6 + 1e-4 * fd.abs(),
                "pixel ({px},{py},{c}): analytic {analytic} vs fd {fd}"
            );
        }
    }
}
