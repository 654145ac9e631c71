//! CPU splat rasterizer: EWA projection of 3D Gaussians to screen-space
//! splats, front-to-back alpha compositing into color/depth/alpha targets,
//! the mapping loss, and the analytic backward pass to every Gaussian
//! attribute and the camera pose twist.
//!
//! Camera poses are camera-to-world throughout.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::field::{
    covariance_from, rotation_matrix, rotation_matrix_jacobian, GaussianGrad, NeuralGaussian,
};
use crate::geometry::{skew, Intrinsics, Pose, Twist};
use crate::img::{ImageDepth, ImageRgb};
use crate::ssim::{ssim_backward, ssim_forward};

/// Gaussians closer than this to the camera plane are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Isotropic dilation added to every 2D covariance, in pixels squared.
const COV_DILATION: f64 = 0.3;
/// Upper clamp on per-splat alpha during compositing.
const ALPHA_CLAMP: f64 = 0.99;
/// Per-pixel compositing stops once transmittance drops below this.
const STOP_TRANSMITTANCE: f64 = 1e-4;
/// Rasterization box half-width in units of the largest 2D standard
/// deviation. exp(-6.5^2/2) ~ 7e-10, so box-edge effects sit far below the
/// gradient-check tolerances.
const RASTER_SIGMAS: f64 = 6.5;
/// Image-bounds cull: splats fully outside the image by this many standard
/// deviations produce no splat at all.
const CULL_SIGMAS: f64 = 3.0;

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone)]
pub struct Splat2D {
    pub mean: Vector2<f64>,
    /// 2x2 image covariance, dilation included; always positive definite.
    pub cov: Matrix2<f64>,
    /// Camera-space depth of the mean, > NEAR_PLANE.
    pub depth: f64,
    /// Effective opacity (clamped at zero).
    pub opacity: f64,
    pub color: [f64; 3],
    /// Index into the input Gaussian list; ties in depth sort break on it.
    pub gauss_index: usize,
    cov_inv: Matrix2<f64>,
    p_cam: Vector3<f64>,
    sigma_cam: Matrix3<f64>,
    radius: f64,
}

/// Largest eigenvalue of a symmetric 2x2 matrix.
fn max_eigen_2x2(m: &Matrix2<f64>) -> f64 {
    let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    0.5 * ((a + c) + ((a - c) * (a - c) + 4.0 * b * b).sqrt())
}

/// EWA projection of one Gaussian. Returns `None` behind the near plane or
/// fully outside the image bounds (3-sigma test).
pub fn project_gaussian(
    g: &NeuralGaussian,
    pose: &Pose,
    intr: &Intrinsics,
    gauss_index: usize,
) -> Option<Splat2D> {
    let inv = pose.inverse();
    let p_cam = inv.transform_point(&g.position);
    if p_cam.z <= NEAR_PLANE {
        return None;
    }
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let u = intr.fx * x / z + intr.cx;
    let v = intr.fy * y / z + intr.cy;

    let sigma_world = covariance_from(&g.quaternion, &g.scale);
    let r_w2c = inv.rotation.to_rotation_matrix().into_inner();
    let sigma_cam = r_w2c * sigma_world * r_w2c.transpose();
    let j = projection_jacobian(intr, &p_cam);
    let mut cov = j * sigma_cam * j.transpose();
    cov[(0, 0)] += COV_DILATION;
    cov[(1, 1)] += COV_DILATION;

    let sigma_max = max_eigen_2x2(&cov).sqrt();
    let cull_r = CULL_SIGMAS * sigma_max;
    if u + cull_r < 0.0
        || u - cull_r > (intr.width - 1) as f64
        || v + cull_r < 0.0
        || v - cull_r > (intr.height - 1) as f64
    {
        return None;
    }

    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
    let cov_inv = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(0, 1)], cov[(0, 0)]) / det;
    Some(Splat2D {
        mean: Vector2::new(u, v),
        cov,
        depth: z,
        opacity: g.effective_opacity(),
        color: g.color,
        gauss_index,
        cov_inv,
        p_cam,
        sigma_cam,
        radius: RASTER_SIGMAS * sigma_max,
    })
}

fn projection_jacobian(intr: &Intrinsics, p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let (x, y, z) = (p.x, p.y, p.z);
    nalgebra::Matrix2x3::new(
        intr.fx / z,
        0.0,
        -intr.fx * x / (z * z),
        0.0,
        intr.fy / z,
        -intr.fy * y / (z * z),
    )
}

/// Rendered images: color, alpha-normalized expected depth, accumulated alpha.
#[derive(Debug, Clone)]
pub struct RenderTarget {
    pub color: ImageRgb,
    pub depth: ImageDepth,
    pub alpha: Vec<f64>,
}

/// Forward-pass state the backward pass replays: depth-sorted splats, final
/// per-pixel transmittance, and the last splat composited per pixel.
#[derive(Debug, Clone)]
pub struct RenderCache {
    pub splats: Vec<Splat2D>,
    final_transmittance: Vec<f64>,
    last_composited: Vec<i64>,
    width: usize,
    height: usize,
}

fn splat_pixel_box(splat: &Splat2D, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let x0 = (splat.mean.x - splat.radius).floor().max(0.0) as usize;
    let x1 = (splat.mean.x + splat.radius).ceil().min((width - 1) as f64) as usize;
    let y0 = (splat.mean.y - splat.radius).floor().max(0.0) as usize;
    let y1 = (splat.mean.y + splat.radius).ceil().min((height - 1) as f64) as usize;
    (x0, x1, y0, y1)
}

/// Rasterizes Gaussians front-to-back. Culled Gaussians (opacity zero) pass
/// through compositing with zero weight so the output never depends on
/// whether the caller filtered them.
pub fn render_with_cache(
    gaussians: &[NeuralGaussian],
    pose: &Pose,
    intr: &Intrinsics,
) -> (RenderTarget, RenderCache) {
    let (w, h) = (intr.width, intr.height);
    let n = w * h;
    let mut splats: Vec<Splat2D> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(g, pose, intr, i))
        .collect();
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.gauss_index.cmp(&b.gauss_index))
    });

    let mut color = vec![[0.0f64; 3]; n];
    let mut depth_sum = vec![0.0f64; n];
    let mut alpha = vec![0.0f64; n];
    let mut trans = vec![1.0f64; n];
    let mut last = vec![-1i64; n];

    for (si, splat) in splats.iter().enumerate() {
        let (x0, x1, y0, y1) = splat_pixel_box(splat, w, h);
        let inv = &splat.cov_inv;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let p = py * w + px;
                if trans[p] < STOP_TRANSMITTANCE {
                    continue;
                }
                let dx = px as f64 - splat.mean.x;
                let dy = py as f64 - splat.mean.y;
                let e = -0.5
                    * (inv[(0, 0)] * dx * dx
                        + 2.0 * inv[(0, 1)] * dx * dy
                        + inv[(1, 1)] * dy * dy);
                let a = (splat.opacity * e.exp()).min(ALPHA_CLAMP);
                let wgt = a * trans[p];
                for c in 0..3 {
                    color[p][c] += splat.color[c] * wgt;
                }
                depth_sum[p] += splat.depth * wgt;
                alpha[p] += wgt;
                trans[p] *= 1.0 - a;
                last[p] = si as i64;
            }
        }
    }

    let mut target = RenderTarget {
        color: ImageRgb::new(w, h),
        depth: ImageDepth::new(w, h),
        alpha,
    };
    target.color.data = color;
    for p in 0..n {
        // Alpha-weighted mean depth; empty pixels stay at exactly zero.
        target.depth.data[p] = if target.alpha[p] > 0.0 {
            depth_sum[p] / target.alpha[p]
        } else {
            0.0
        };
    }
    (
        target,
        RenderCache {
            splats,
            final_transmittance: trans,
            last_composited: last,
            width: w,
            height: h,
        },
    )
}

pub fn render(gaussians: &[NeuralGaussian], pose: &Pose, intr: &Intrinsics) -> RenderTarget {
    render_with_cache(gaussians, pose, intr).0
}

/// Mapping-loss weights; defaults follow the tuned desk-scale configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_ssim: f64,
    pub lambda_vol: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_d: 1.0,
            lambda_ssim: 0.2,
            lambda_vol: 0.001,
        }
    }
}

/// Loss components. `total` is exactly
/// `color + ssim_term + lambda_d * depth + lambda_vol * volume`.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingLoss {
    pub total: f64,
    /// Mean absolute color error over all pixels and channels.
    pub color: f64,
    /// Structural term: `(1 - lambda_ssim) * |L1| + lambda_ssim * (1 - SSIM)`.
    /// The plain color term above is kept separate, so the L1 error is
    /// deliberately counted twice, once alone and once inside this term.
    pub ssim_term: f64,
    /// Mean absolute depth error over valid pixels.
    pub depth: f64,
    /// Sum over surviving Gaussians of the product of their scale components.
    pub volume: f64,
    pub weights: LossWeights,
    pub valid_depth_pixels: usize,
    /// Set when no pixel had both valid target depth and alpha > 0.5.
    pub depth_flagged: bool,
}

/// Mean absolute color difference over all pixels and channels.
pub fn color_l1_mean(a: &ImageRgb, b: &ImageRgb) -> f64 {
    l1_mean(a, b)
}

fn l1_mean(a: &ImageRgb, b: &ImageRgb) -> f64 {
    let mut total = 0.0;
    for (pa, pb) in a.data.iter().zip(&b.data) {
        for c in 0..3 {
            total += (pa[c] - pb[c]).abs();
        }
    }
    total / (3.0 * a.data.len() as f64)
}

/// Total volume `sum_i prod_j s_ij` over surviving (non-culled) Gaussians.
pub fn volume_loss(gaussians: &[NeuralGaussian]) -> f64 {
    gaussians
        .iter()
        .filter(|g| !g.culled())
        .map(|g| g.scale.x * g.scale.y * g.scale.z)
        .sum()
}

/// d(volume_loss)/d(scale) per Gaussian, scaled by `lambda`.
pub fn volume_gradients(gaussians: &[NeuralGaussian], lambda: f64) -> Vec<Vector3<f64>> {
    gaussians
        .iter()
        .map(|g| {
            if g.culled() {
                Vector3::zeros()
            } else {
                Vector3::new(
                    lambda * g.scale.y * g.scale.z,
                    lambda * g.scale.x * g.scale.z,
                    lambda * g.scale.x * g.scale.y,
                )
            }
        })
        .collect()
}

/// Mean absolute depth error over pixels with valid target depth and
/// accumulated alpha above one half, plus the count of such pixels.
pub fn depth_l1_masked(rendered: &RenderTarget, target_depth: &ImageDepth) -> (f64, usize) {
    depth_l1(rendered, target_depth)
}

fn depth_l1(
    rendered: &RenderTarget,
    target_depth: &ImageDepth,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..target_depth.data.len() {
        let d = target_depth.data[p];
        if d > 0.0 && rendered.alpha[p] > 0.5 {
            total += (rendered.depth.data[p] - d).abs();
            count += 1;
        }
    }
    (if count > 0 { total / count as f64 } else { 0.0 }, count)
}

/// Full mapping loss of a render against an observed frame.
pub fn mapping_loss(
    rendered: &RenderTarget,
    target_rgb: &ImageRgb,
    target_depth: &ImageDepth,
    gaussians: &[NeuralGaussian],
    weights: LossWeights,
) -> MappingLoss {
    let l1 = l1_mean(&rendered.color, target_rgb);
    let ssim_mean = crate::ssim::ssim(&rendered.color, target_rgb);
    assemble_loss(rendered, target_depth, gaussians, weights, l1, ssim_mean)
}

fn assemble_loss(
    rendered: &RenderTarget,
    target_depth: &ImageDepth,
    gaussians: &[NeuralGaussian],
    weights: LossWeights,
    l1: f64,
    ssim_mean: f64,
) -> MappingLoss {
    let ssim_term = (1.0 - weights.lambda_ssim) * l1 + weights.lambda_ssim * (1.0 - ssim_mean);
    let (depth, valid) = depth_l1(rendered, target_depth);
    let volume = volume_loss(gaussians);
    MappingLoss {
        total: l1 + ssim_term + weights.lambda_d * depth + weights.lambda_vol * volume,
        color: l1,
        ssim_term,
        depth,
        volume,
        weights,
        valid_depth_pixels: valid,
        depth_flagged: valid == 0,
    }
}

/// Per-pixel upstream gradients for the renderer backward pass.
#[derive(Debug, Clone)]
pub struct ImageGrads {
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl ImageGrads {
    pub fn zeros(width: usize, height: usize) -> Self {
        ImageGrads {
            color: vec![[0.0; 3]; width * height],
            depth: vec![0.0; width * height],
            alpha: vec![0.0; width * height],
        }
    }
}

/// Mapping loss plus its gradients w.r.t. the rendered images. Volume-term
/// gradients flow directly to scales via [`volume_gradients`], not through
/// the images.
pub fn mapping_loss_backward(
    rendered: &RenderTarget,
    target_rgb: &ImageRgb,
    target_depth: &ImageDepth,
    gaussians: &[NeuralGaussian],
    weights: LossWeights,
) -> (MappingLoss, ImageGrads) {
    let (w, h) = (rendered.color.width, rendered.color.height);
    let n = w * h;
    let cache = ssim_forward(&rendered.color, target_rgb);
    let l1 = l1_mean(&rendered.color, target_rgb);
    let loss = assemble_loss(rendered, target_depth, gaussians, weights, l1, cache.mean);

    let mut grads = ImageGrads::zeros(w, h);
    // L1 appears once as the color term and once inside the structural term.
    let l1_weight = (1.0 + (1.0 - weights.lambda_ssim)) / (3.0 * n as f64);
    for p in 0..n {
        for c in 0..3 {
            let diff = rendered.color.data[p][c] - target_rgb.data[p][c];
            grads.color[p][c] = l1_weight * sign(diff);
        }
    }
    let ssim_grads = ssim_backward(&cache, -weights.lambda_ssim);
    for p in 0..n {
        for c in 0..3 {
            grads.color[p][c] += ssim_grads[p][c];
        }
    }
    if loss.valid_depth_pixels > 0 {
        let scale = weights.lambda_d / loss.valid_depth_pixels as f64;
        for p in 0..n {
            let d = target_depth.data[p];
            if d > 0.0 && rendered.alpha[p] > 0.5 {
                grads.depth[p] = scale * sign(rendered.depth.data[p] - d);
            }
        }
    }
    (loss, grads)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Tracking loss `L_c + lambda_d * L_d` and its image gradients. Structural
/// and volume terms are mapping-only and deliberately absent here.
pub fn photometric_loss_backward(
    rendered: &RenderTarget,
    target_rgb: &ImageRgb,
    target_depth: &ImageDepth,
    lambda_d: f64,
) -> (f64, ImageGrads) {
    let (w, h) = (rendered.color.width, rendered.color.height);
    let n = w * h;
    let l1 = l1_mean(&rendered.color, target_rgb);
    let (depth, valid) = depth_l1(rendered, target_depth);
    let mut grads = ImageGrads::zeros(w, h);
    let cw = 1.0 / (3.0 * n as f64);
    for p in 0..n {
        for c in 0..3 {
            grads.color[p][c] = cw * sign(rendered.color.data[p][c] - target_rgb.data[p][c]);
        }
    }
    if valid > 0 {
        let dw = lambda_d / valid as f64;
        for p in 0..n {
            let d = target_depth.data[p];
            if d > 0.0 && rendered.alpha[p] > 0.5 {
                grads.depth[p] = dw * sign(rendered.depth.data[p] - d);
            }
        }
    }
    (l1 + lambda_d * depth, grads)
}

/// Gradients produced by the renderer backward pass.
#[derive(Debug, Clone)]
pub struct RenderBackward {
    /// Per input Gaussian, world-frame attribute gradients.
    pub gaussians: Vec<GaussianGrad>,
    /// Loss gradient w.r.t. a right-multiplied twist on the camera-to-world
    /// pose: `d loss / d xi` at `pose * exp(xi)`, xi = 0.
    pub pose: Twist,
}

/// Replays compositing per pixel in reverse depth order, reconstructing
/// transmittance by division, then chains splat-space gradients through the
/// EWA projection to world-frame attributes and the pose tangent.
pub fn render_backward(
    gaussians: &[NeuralGaussian],
    pose: &Pose,
    intr: &Intrinsics,
    rendered: &RenderTarget,
    cache: &RenderCache,
    grads: &ImageGrads,
) -> RenderBackward {
    let (w, h) = (cache.width, cache.height);
    let n = w * h;
    let ns = cache.splats.len();

    // Depth is a normalized weighted mean D = S/A: fold its gradient into the
    // raw weighted-sum channel and the alpha channel once per pixel.
    let mut g_depth_sum = vec![0.0f64; n];
    let mut g_alpha = grads.alpha.clone();
    for p in 0..n {
        let a = rendered.alpha[p];
        if a > 1e-6 {
            g_depth_sum[p] = grads.depth[p] / a;
            g_alpha[p] -= grads.depth[p] * rendered.depth.data[p] / a;
        }
    }

    // Phase 1: per-splat gradients in splat space.
    let mut g_mean = vec![Vector2::zeros(); ns];
    let mut g_cov2d = vec![Matrix2::zeros(); ns];
    let mut g_color = vec![[0.0f64; 3]; ns];
    let mut g_depth = vec![0.0f64; ns];
    let mut g_opacity = vec![0.0f64; ns];

    let mut t_back = cache.final_transmittance.clone();
    let mut suffix_c = vec![[0.0f64; 3]; n];
    let mut suffix_d = vec![0.0f64; n];
    let mut suffix_w = vec![0.0f64; n];

    for si in (0..ns).rev() {
        let splat = &cache.splats[si];
        let (x0, x1, y0, y1) = splat_pixel_box(splat, w, h);
        let inv = &splat.cov_inv;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let p = py * w + px;
                if cache.last_composited[p] < si as i64 {
                    continue;
                }
                let dx = px as f64 - splat.mean.x;
                let dy = py as f64 - splat.mean.y;
                let e = -0.5
                    * (inv[(0, 0)] * dx * dx
                        + 2.0 * inv[(0, 1)] * dx * dy
                        + inv[(1, 1)] * dy * dy);
                let g = e.exp();
                let a_raw = splat.opacity * g;
                let a = a_raw.min(ALPHA_CLAMP);
                let t_i = t_back[p] / (1.0 - a);
                t_back[p] = t_i;
                let wgt = a * t_i;

                let gc = &grads.color[p];
                let gd = g_depth_sum[p];
                let ga = g_alpha[p];

                for c in 0..3 {
                    g_color[si][c] += wgt * gc[c];
                }
                g_depth[si] += wgt * gd;

                let direct = splat.color[0] * gc[0]
                    + splat.color[1] * gc[1]
                    + splat.color[2] * gc[2]
                    + splat.depth * gd
                    + ga;
                let suffix = suffix_c[p][0] * gc[0]
                    + suffix_c[p][1] * gc[1]
                    + suffix_c[p][2] * gc[2]
                    + suffix_d[p] * gd
                    + suffix_w[p] * ga;
                let d_alpha_prime = t_i * direct - suffix / (1.0 - a);

                for c in 0..3 {
                    suffix_c[p][c] += wgt * splat.color[c];
                }
                suffix_d[p] += wgt * splat.depth;
                suffix_w[p] += wgt;

                // The clamp gates the gradient; the zero-opacity case keeps
                // its opacity path open (g stays finite) for grow-back.
                let d_a_raw = if a_raw >= ALPHA_CLAMP { 0.0 } else { d_alpha_prime };
                g_opacity[si] += g * d_a_raw;
                let de = d_a_raw * splat.opacity * g;
                let v = inv * Vector2::new(dx, dy);
                g_mean[si] += de * v;
                g_cov2d[si] += (0.5 * de) * (v * v.transpose());
            }
        }
    }

    // Phase 2: chain each splat to world attributes and the pose tangent.
    let inv_pose = pose.inverse();
    let r_w2c = inv_pose.rotation.to_rotation_matrix().into_inner();
    let mut out = RenderBackward {
        gaussians: vec![GaussianGrad::zero(); gaussians.len()],
        pose: Twist::zero(),
    };
    let generators = [
        skew(&Vector3::x()),
        skew(&Vector3::y()),
        skew(&Vector3::z()),
    ];
    for si in 0..ns {
        let splat = &cache.splats[si];
        let gauss = &gaussians[splat.gauss_index];
        let (x, y, z) = (splat.p_cam.x, splat.p_cam.y, splat.p_cam.z);

        let mut g_pcam = Vector3::new(
            g_mean[si].x * intr.fx / z,
            g_mean[si].y * intr.fy / z,
            -g_mean[si].x * intr.fx * x / (z * z) - g_mean[si].y * intr.fy * y / (z * z)
                + g_depth[si],
        );

        let j = projection_jacobian(intr, &splat.p_cam);
        let g_sigma_cam = j.transpose() * g_cov2d[si] * j;
        let g_j = 2.0 * g_cov2d[si] * j * splat.sigma_cam;
        g_pcam.x += g_j[(0, 2)] * (-intr.fx / (z * z));
        g_pcam.y += g_j[(1, 2)] * (-intr.fy / (z * z));
        g_pcam.z += g_j[(0, 0)] * (-intr.fx / (z * z))
            + g_j[(1, 1)] * (-intr.fy / (z * z))
            + g_j[(0, 2)] * (2.0 * intr.fx * x / (z * z * z))
            + g_j[(1, 2)] * (2.0 * intr.fy * y / (z * z * z));

        let g_sigma_world = r_w2c.transpose() * g_sigma_cam * r_w2c;
        let rq = rotation_matrix(&gauss.quaternion);
        let d_sq = Matrix3::from_diagonal(&Vector3::new(
            gauss.scale.x * gauss.scale.x,
            gauss.scale.y * gauss.scale.y,
            gauss.scale.z * gauss.scale.z,
        ));
        let g_rq = 2.0 * g_sigma_world * rq * d_sq;
        let m = rq.transpose() * g_sigma_world * rq;
        let jac = rotation_matrix_jacobian(&gauss.quaternion);

        let target = &mut out.gaussians[splat.gauss_index];
        target.position += pose.rotation * g_pcam;
        target.opacity += g_opacity[si];
        for c in 0..3 {
            target.color[c] += g_color[si][c];
        }
        for jdim in 0..3 {
            target.scale[jdim] += 2.0 * gauss.scale[jdim] * m[(jdim, jdim)];
        }
        for q in 0..4 {
            target.quaternion[q] += g_rq.component_mul(&jac[q]).sum();
        }

        out.pose.omega += g_pcam.cross(&splat.p_cam);
        out.pose.v -= g_pcam;
        for kdim in 0..3 {
            let ek = &generators[kdim];
            let dsigma = -ek * splat.sigma_cam + splat.sigma_cam * ek;
            out.pose.omega[kdim] += g_sigma_cam.component_mul(&dsigma).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Twist;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn test_intrinsics(w: usize, h: usize, f: f64) -> Intrinsics {
        Intrinsics {
            fx: f,
            fy: f,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            width: w,
            height: h,
        }
    }

    fn plain_gaussian(
        position: Vector3<f64>,
        opacity: f64,
        scale: f64,
        color: [f64; 3],
    ) -> NeuralGaussian {
        NeuralGaussian {
            position,
            opacity,
            quaternion: [1.0, 0.0, 0.0, 0.0],
            scale: Vector3::repeat(scale),
            color,
            degenerate_rotation: false,
        }
    }

    fn random_unit_quat(rng: &mut StdRng) -> [f64; 4] {
        let q = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    }

    #[test]
    fn axis_gaussian_projects_to_principal_point() {
        let intr = test_intrinsics(32, 24, 100.0);
        let g = plain_gaussian(Vector3::new(0.0, 0.0, 1.0), 0.8, 0.05, [1.0, 0.0, 0.0]);
        let splat = project_gaussian(&g, &Pose::identity(), &intr, 0).unwrap();
        assert_relative_eq!(splat.mean.x, intr.cx, epsilon = 1e-12);
        assert_relative_eq!(splat.mean.y, intr.cy, epsilon = 1e-12);
        // Isotropic scale on axis: cov = (fx * s)^2 I + dilation.
        let expect = (100.0f64 * 0.05).powi(2) + 0.3;
        assert_relative_eq!(splat.cov[(0, 0)], expect, epsilon = 1e-9);
        assert_relative_eq!(splat.cov[(1, 1)], expect, epsilon = 1e-9);
        assert_relative_eq!(splat.cov[(0, 1)], 0.0, epsilon = 1e-9);
        assert_relative_eq!(splat.depth, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gaussians_behind_camera_are_culled() {
        let intr = test_intrinsics(32, 24, 100.0);
        let behind = plain_gaussian(Vector3::new(0.0, 0.0, -1.0), 0.8, 0.05, [1.0; 3]);
        assert!(project_gaussian(&behind, &Pose::identity(), &intr, 0).is_none());
        let too_close = plain_gaussian(Vector3::new(0.0, 0.0, 0.005), 0.8, 0.05, [1.0; 3]);
        assert!(project_gaussian(&too_close, &Pose::identity(), &intr, 0).is_none());
    }

    #[test]
    fn offscreen_gaussians_are_culled_but_marginal_ones_kept() {
        let intr = test_intrinsics(32, 24, 100.0);
        // Tiny splat far off the left edge.
        let far = plain_gaussian(Vector3::new(-2.0, 0.0, 1.0), 0.8, 0.001, [1.0; 3]);
        assert!(project_gaussian(&far, &Pose::identity(), &intr, 0).is_none());
        // Just outside, but within 3 sigma of the border.
        let near = plain_gaussian(Vector3::new(-0.17, 0.0, 1.0), 0.8, 0.02, [1.0; 3]);
        assert!(project_gaussian(&near, &Pose::identity(), &intr, 0).is_some());
    }

    #[test]
    fn projected_mean_matches_projection_oracle() {
        let mut rng = StdRng::seed_from_u64(1);
        let intr = test_intrinsics(64, 48, 60.0);
        for _ in 0..200 {
            let pose = Pose::exp(&Twist::new(
                Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ),
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
            ));
            let g = plain_gaussian(
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                0.8,
                0.01,
                [0.5; 3],
            );
            let p_cam = pose.inverse().transform_point(&g.position);
            match (
                project_gaussian(&g, &pose, &intr, 0),
                intr.project(&p_cam),
            ) {
                (Some(splat), Some((u, v))) => {
                    assert_relative_eq!(splat.mean.x, u, epsilon = 1e-9);
                    assert_relative_eq!(splat.mean.y, v, epsilon = 1e-9);
                }
                (Some(_), None) => panic!("projected a gaussian the camera cannot see"),
                _ => {}
            }
        }
    }

    #[test]
    fn empty_scene_renders_all_zero() {
        let intr = test_intrinsics(8, 8, 8.0);
        let target = render(&[], &Pose::identity(), &intr);
        assert!(target.color.data.iter().all(|p| *p == [0.0; 3]));
        assert!(target.depth.data.iter().all(|d| *d == 0.0));
        assert!(target.alpha.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn single_opaque_splat_composites_one_term() {
        let intr = test_intrinsics(9, 9, 10.0);
        // Centered exactly on pixel (4, 4) at depth 2 with saturating opacity.
        let g = plain_gaussian(Vector3::new(0.0, 0.0, 2.0), 0.999, 0.1, [1.0, 0.0, 0.0]);
        let target = render(&[g], &Pose::identity(), &intr);
        let p = 4 * 9 + 4;
        assert_relative_eq!(target.color.data[p][0], 0.99, epsilon = 1e-12);
        assert_eq!(target.color.data[p][1], 0.0);
        assert_relative_eq!(target.alpha[p], 0.99, epsilon = 1e-12);
        // Normalized alpha-weighted depth recovers the splat depth exactly.
        assert_relative_eq!(target.depth.data[p], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn two_stacked_splats_match_hand_compositing() {
        let intr = test_intrinsics(9, 9, 10.0);
        let front = plain_gaussian(Vector3::new(0.0, 0.0, 1.0), 0.6, 0.08, [1.0, 0.0, 0.0]);
        let back = plain_gaussian(Vector3::new(0.0, 0.0, 2.0), 0.7, 0.16, [0.0, 1.0, 0.0]);
        let target = render(&[back.clone(), front.clone()], &Pose::identity(), &intr);
        let p = 4 * 9 + 4;
        // Both splats hit the center pixel at their mean (weight exp(0) = 1).
        let a1 = 0.6;
        let a2 = 0.7 * (1.0 - a1);
        assert_relative_eq!(target.color.data[p][0], a1, epsilon = 1e-12);
        assert_relative_eq!(target.color.data[p][1], a2, epsilon = 1e-12);
        assert_relative_eq!(target.alpha[p], a1 + a2, epsilon = 1e-12);
        let depth = (1.0 * a1 + 2.0 * a2) / (a1 + a2);
        assert_relative_eq!(target.depth.data[p], depth, epsilon = 1e-12);
    }

    #[test]
    fn render_is_invariant_to_input_permutation() {
        let mut rng = StdRng::seed_from_u64(7);
        let intr = test_intrinsics(16, 12, 14.0);
        let gaussians: Vec<NeuralGaussian> = (0..12)
            .map(|i| {
                let mut g = plain_gaussian(
                    Vector3::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.4..0.4),
                        1.0 + 0.1 * i as f64, // strictly distinct depths
                    ),
                    rng.gen_range(0.2..0.9),
                    rng.gen_range(0.05..0.2),
                    [rng.gen(), rng.gen(), rng.gen()],
                );
                g.quaternion = random_unit_quat(&mut rng);
                g
            })
            .collect();
        let base = render(&gaussians, &Pose::identity(), &intr);
        let mut shuffled = gaussians.clone();
        shuffled.reverse();
        shuffled.swap(0, 5);
        let other = render(&shuffled, &Pose::identity(), &intr);
        assert_eq!(base.color.data, other.color.data);
        assert_eq!(base.depth.data, other.depth.data);
        assert_eq!(base.alpha, other.alpha);
    }

    #[test]
    fn alpha_stays_in_unit_range() {
        let mut rng = StdRng::seed_from_u64(9);
        let intr = test_intrinsics(12, 12, 10.0);
        let gaussians: Vec<NeuralGaussian> = (0..40)
            .map(|_| {
                plain_gaussian(
                    Vector3::new(
                        rng.gen_range(-0.6..0.6),
                        rng.gen_range(-0.6..0.6),
                        rng.gen_range(0.5..3.0),
                    ),
                    rng.gen_range(0.5..0.99),
                    rng.gen_range(0.1..0.4),
                    [rng.gen(), rng.gen(), rng.gen()],
                )
            })
            .collect();
        let target = render(&gaussians, &Pose::identity(), &intr);
        for &a in &target.alpha {
            assert!((0.0..=1.0 + 1e-12).contains(&a), "alpha {a} out of range");
        }
    }

    #[test]
    fn culled_gaussians_never_change_the_render() {
        let mut rng = StdRng::seed_from_u64(11);
        let intr = test_intrinsics(10, 10, 9.0);
        let mut gaussians: Vec<NeuralGaussian> = (0..8)
            .map(|i| {
                plain_gaussian(
                    Vector3::new(
                        rng.gen_range(-0.4..0.4),
                        rng.gen_range(-0.4..0.4),
                        1.0 + 0.2 * i as f64,
                    ),
                    rng.gen_range(0.3..0.8),
                    0.15,
                    [rng.gen(), rng.gen(), rng.gen()],
                )
            })
            .collect();
        gaussians[2].opacity = -0.4;
        gaussians[5].opacity = 0.0;
        let full = render(&gaussians, &Pose::identity(), &intr);
        let survivors: Vec<NeuralGaussian> =
            gaussians.iter().filter(|g| !g.culled()).cloned().collect();
        let filtered = render(&survivors, &Pose::identity(), &intr);
        assert_eq!(full.color.data, filtered.color.data);
        assert_eq!(full.depth.data, filtered.depth.data);
        assert_eq!(full.alpha, filtered.alpha);
    }

    #[test]
    fn loss_against_own_render_leaves_only_volume() {
        let intr = test_intrinsics(10, 10, 9.0);
        let gaussians = vec![
            plain_gaussian(Vector3::new(0.1, 0.0, 1.0), 0.7, 0.2, [0.8, 0.2, 0.1]),
            plain_gaussian(Vector3::new(-0.1, 0.1, 1.5), 0.6, 0.25, [0.1, 0.7, 0.3]),
        ];
        let rendered = render(&gaussians, &Pose::identity(), &intr);
        let weights = LossWeights::default();
        let loss = mapping_loss(
            &rendered,
            &rendered.color,
            &rendered.depth,
            &gaussians,
            weights,
        );
        assert_eq!(loss.color, 0.0);
        assert!(loss.ssim_term.abs() < 1e-12);
        assert_eq!(loss.depth, 0.0);
        assert!(loss.valid_depth_pixels > 0);
        assert!(!loss.depth_flagged);
        assert_relative_eq!(loss.total, weights.lambda_vol * loss.volume, epsilon = 1e-12);
    }

    #[test]
    fn volume_loss_is_sum_of_scale_products() {
        let mut a = plain_gaussian(Vector3::new(0.0, 0.0, 1.0), 0.5, 1.0, [1.0; 3]);
        a.scale = Vector3::new(1.0, 2.0, 3.0);
        let b = plain_gaussian(Vector3::new(0.0, 0.0, 1.0), 0.5, 1.0, [1.0; 3]);
        assert_eq!(volume_loss(&[a.clone(), b.clone()]), 7.0);

        let grads = volume_gradients(&[a], 1.0);
        assert_eq!(grads[0], Vector3::new(6.0, 3.0, 2.0));

        let mut culled = b;
        culled.opacity = -0.1;
        assert_eq!(volume_loss(&[culled.clone()]), 0.0);
        assert_eq!(volume_gradients(&[culled], 1.0)[0], Vector3::zeros());
    }

    #[test]
    fn constant_images_give_expected_color_loss() {
        let intr = test_intrinsics(8, 8, 8.0);
        let rendered = RenderTarget {
            color: ImageRgb::from_fn(8, 8, |_, _| [0.5; 3]),
            depth: ImageDepth::new(8, 8),
            alpha: vec![0.0; 64],
        };
        let target = ImageRgb::from_fn(8, 8, |_, _| [0.6; 3]);
        let loss = mapping_loss(
            &rendered,
            &target,
            &ImageDepth::new(8, 8),
            &[],
            LossWeights::default(),
        );
        assert_relative_eq!(loss.color, 0.1, epsilon = 1e-12);
        assert!(loss.depth_flagged);
        assert_eq!(loss.depth, 0.0);
        let _ = intr;
    }

    #[test]
    fn identical_render_yields_zero_gradients() {
        let intr = test_intrinsics(10, 10, 9.0);
        let gaussians = vec![
            plain_gaussian(Vector3::new(0.05, 0.0, 1.0), 0.7, 0.2, [0.8, 0.2, 0.1]),
            plain_gaussian(Vector3::new(-0.1, 0.08, 1.4), 0.6, 0.25, [0.1, 0.7, 0.3]),
        ];
        let (rendered, cache) = render_with_cache(&gaussians, &Pose::identity(), &intr);
        let weights = LossWeights {
            lambda_vol: 0.0,
            ..Default::default()
        };
        let (loss, image_grads) = mapping_loss_backward(
            &rendered,
            &rendered.color,
            &rendered.depth,
            &gaussians,
            weights,
        );
        assert_relative_eq!(loss.total, 0.0, epsilon = 1e-12);
        let back = render_backward(
            &gaussians,
            &Pose::identity(),
            &intr,
            &rendered,
            &cache,
            &image_grads,
        );
        assert!(back.pose.to_vector().norm() < 1e-9);
        for g in &back.gaussians {
            assert!(g.position.norm() < 1e-9);
            assert!(g.opacity.abs() < 1e-9);
            assert!(g.scale.norm() < 1e-9);
        }
    }

    /// Full-loss finite-difference check over every Gaussian attribute and
    /// the six pose-twist directions.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(21);
        let intr = test_intrinsics(6, 6, 7.0);
        let pose = Pose::exp(&Twist::new(
            Vector3::new(0.05, -0.03, 0.08),
            Vector3::new(0.02, 0.01, -0.04),
        ));
        // Moderate opacities: far from the 0.99 clamp and the cull at zero,
        // and transmittance stays well above the early-stop threshold.
        let gaussians: Vec<NeuralGaussian> = (0..3)
            .map(|i| {
                let mut g = plain_gaussian(
                    pose.transform_point(&Vector3::new(
                        rng.gen_range(-0.25..0.25),
                        rng.gen_range(-0.25..0.25),
                        1.0 + 0.4 * i as f64,
                    )),
                    rng.gen_range(0.4..0.7),
                    rng.gen_range(0.1..0.2),
                    [rng.gen(), rng.gen(), rng.gen()],
                );
                g.quaternion = random_unit_quat(&mut rng);
                g.scale = Vector3::new(
                    rng.gen_range(0.08..0.2),
                    rng.gen_range(0.08..0.2),
                    rng.gen_range(0.08..0.2),
                );
                g
            })
            .collect();

        // Target: a perturbed render, with depth supervision only where the
        // base render is confidently opaque so the validity mask cannot flip
        // under the finite-difference perturbations. Every color offset stays
        // bounded away from zero so no absolute-error kink sits inside the
        // finite-difference interval.
        let base = render(&gaussians, &pose, &intr);
        let target_rgb = ImageRgb::from_fn(6, 6, |x, y| {
            let p = base.color.pixel(x, y);
            [
                (p[0] + 0.1 * ((x + y) as f64 % 3.0) - 0.15).clamp(0.0, 1.0),
                (p[1] + 0.07 * (x as f64 % 2.0) - 0.035).clamp(0.0, 1.0),
                (p[2] + 0.05).clamp(0.0, 1.0),
            ]
        });
        let target_depth = ImageDepth::from_fn(6, 6, |x, y| {
            let p = y * 6 + x;
            if base.alpha[p] > 0.8 {
                base.depth.data[p] + 0.05
            } else {
                0.0
            }
        });
        let weights = LossWeights::default();

        let loss_of = |gaussians: &[NeuralGaussian], pose: &Pose| -> f64 {
            let rendered = render(gaussians, pose, &intr);
            mapping_loss(&rendered, &target_rgb, &target_depth, gaussians, weights).total
        };

        let (rendered, cache) = render_with_cache(&gaussians, &pose, &intr);
        let (_, image_grads) =
            mapping_loss_backward(&rendered, &target_rgb, &target_depth, &gaussians, weights);
        let mut back = render_backward(&gaussians, &pose, &intr, &rendered, &cache, &image_grads);
        let vol = volume_gradients(&gaussians, weights.lambda_vol);
        for (g, v) in back.gaussians.iter_mut().zip(&vol) {
            g.scale += v;
        }

        let check = |name: &str, analytic: f64, fd: f64| {
            let tol = 2e-3 * fd.abs().max(analytic.abs()).max(1e-4);
            assert!(
                (analytic - fd).abs() <= tol,
                "{name}: analytic {analytic} vs fd {fd}"
            );
        };

        let h = 1e-5;
        for (gi, base_g) in gaussians.iter().enumerate() {
            let fd_attr = |set: &dyn Fn(&mut NeuralGaussian, f64), base: f64| -> f64 {
                let mut plus = gaussians.clone();
                set(&mut plus[gi], base + h);
                let mut minus = gaussians.clone();
                set(&mut minus[gi], base - h);
                (loss_of(&plus, &pose) - loss_of(&minus, &pose)) / (2.0 * h)
            };
            for dim in 0..3 {
                let fd = fd_attr(&|g, v| g.position[dim] = v, base_g.position[dim]);
                check(
                    &format!("g{gi}.position[{dim}]"),
                    back.gaussians[gi].position[dim],
                    fd,
                );
                let fd = fd_attr(&|g, v| g.scale[dim] = v, base_g.scale[dim]);
                check(&format!("g{gi}.scale[{dim}]"), back.gaussians[gi].scale[dim], fd);
                let fd = fd_attr(&|g, v| g.color[dim] = v, base_g.color[dim]);
                check(&format!("g{gi}.color[{dim}]"), back.gaussians[gi].color[dim], fd);
            }
            let fd = fd_attr(&|g, v| g.opacity = v, base_g.opacity);
            check(&format!("g{gi}.opacity"), back.gaussians[gi].opacity, fd);
            for q in 0..4 {
                let fd = fd_attr(&|g, v| g.quaternion[q] = v, base_g.quaternion[q]);
                check(
                    &format!("g{gi}.quaternion[{q}]"),
                    back.gaussians[gi].quaternion[q],
                    fd,
                );
            }
        }

        let hp = 1e-4;
        let analytic_pose = back.pose.to_vector();
        for i in 0..6 {
            let mut xi = nalgebra::Vector6::zeros();
            xi[i] = hp;
            let plus = pose.compose(&Pose::exp(&Twist::from_vector(&xi)));
            xi[i] = -hp;
            let minus = pose.compose(&Pose::exp(&Twist::from_vector(&xi)));
            let fd = (loss_of(&gaussians, &plus) - loss_of(&gaussians, &minus)) / (2.0 * hp);
            check(&format!("pose[{i}]"), analytic_pose[i], fd);
        }
    }

    #[test]
    fn culled_gaussian_receives_opacity_gradient_for_growth() {
        let intr = test_intrinsics(8, 8, 8.0);
        // An opaque backdrop plus one culled Gaussian in front of it.
        let backdrop = plain_gaussian(Vector3::new(0.0, 0.0, 2.0), 0.9, 0.5, [0.0, 0.0, 1.0]);
        let mut hidden = plain_gaussian(Vector3::new(0.0, 0.0, 1.0), -0.3, 0.2, [1.0, 0.0, 0.0]);
        hidden.opacity = -0.3;
        let gaussians = vec![backdrop, hidden];
        let (rendered, cache) = render_with_cache(&gaussians, &Pose::identity(), &intr);
        // Target wants red where the scene renders blue.
        let target_rgb = ImageRgb::from_fn(8, 8, |_, _| [1.0, 0.0, 0.0]);
        let (_, image_grads) = mapping_loss_backward(
            &rendered,
            &target_rgb,
            &ImageDepth::new(8, 8),
            &gaussians,
            LossWeights::default(),
        );
        let back = render_backward(
            &gaussians,
            &Pose::identity(),
            &intr,
            &rendered,
            &cache,
            &image_grads,
        );
        // The culled Gaussian gets a live opacity gradient but no other paths.
        assert!(back.gaussians[1].opacity.abs() > 1e-9);
        assert_eq!(back.gaussians[1].color, [0.0; 3]);
        assert_eq!(back.gaussians[1].scale, Vector3::zeros());
        assert_eq!(back.gaussians[1].position, Vector3::zeros());
    }
}
