//! Coarse-to-fine camera tracking: constant-velocity prediction, a 2D
//! quality gate that can bypass the photometric stage, quarter-resolution
//! photometric pose refinement against a frozen Gaussian snapshot, and a
//! robust voxel-ICP fine stage with an online-adapted Geman-McClure kernel.

use nalgebra::{Matrix6, Vector3, Vector6};

use crate::field::NeuralGaussian;
use crate::geometry::{Intrinsics, Pose, Twist};
use crate::img::{ImageDepth, ImageRgb};
use crate::render::{
    color_l1_mean, depth_l1_masked, render, render_backward, render_with_cache, ImageGrads,
};
use crate::voxel::VoxelMap;

/// Lower clamp for the adapted kernel scale.
pub const SIGMA_MIN: f64 = 1e-4;
/// ICP stops once the solved update twist norm drops below this.
const ICP_CONVERGENCE: f64 = 1e-6;
/// Maximum step halvings before an ICP iteration gives up.
const MAX_HALVINGS: usize = 12;

/// Tunables for both tracking stages.
#[derive(Debug, Clone)]
pub struct TrackerConfig {
    /// Correspondence acceptance radius, meters.
    pub tau_t: f64,
    /// Voxel level the correspondence search runs at; the level's cell size
    /// must be >= tau_t for the 27-cell search to be exact.
    pub search_level: usize,
    /// Quality threshold below which the photometric stage is skipped.
    pub zeta: f64,
    /// Normalizer for the image-gradient term of the quality score.
    pub gradient_normalizer: f64,
    pub coarse_iterations: usize,
    /// Ceiling on the per-iteration twist norm of the photometric descent.
    pub coarse_step_limit: f64,
    /// Depth weight in the photometric tracking loss.
    pub lambda_d: f64,
    pub min_correspondences: usize,
    pub max_icp_iterations: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            tau_t: 0.2,
            search_level: 0,
            zeta: 0.4,
            gradient_normalizer: 0.05,
            coarse_iterations: 20,
            coarse_step_limit: 0.01,
            lambda_d: 1.0,
            min_correspondences: 20,
            max_icp_iterations: 100,
        }
    }
}

/// Which stages a frame actually ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStage {
    /// Photometric and ICP stages both ran.
    Full,
    /// Quality below zeta: ICP only.
    CoarseBypassed,
    /// Too few correspondences: pose falls back to the stage input.
    Lost,
}

impl TrackStage {
    fn label(&self) -> &'static str {
        match self {
            TrackStage::Full => "full",
            TrackStage::CoarseBypassed => "coarse_bypassed",
            TrackStage::Lost => "lost",
        }
    }
}

/// Per-frame tracking record for the diagnostics stream.
#[derive(Debug, Clone)]
pub struct TrackDiagnostics {
    pub frame_id: u64,
    pub stage: TrackStage,
    pub icp_iterations: usize,
    pub inliers: usize,
    /// Mean correspondence distance at the final pose.
    pub final_residual: f64,
    pub quality_score: f64,
    /// Per Gauss-Newton iteration, the robust objective before and after the
    /// accepted step, both on that iteration's correspondence set; the step
    /// halving guarantees after <= before.
    pub objective_history: Vec<(f64, f64)>,
}

impl TrackDiagnostics {
    fn new(frame_id: u64) -> Self {
        TrackDiagnostics {
            frame_id,
            stage: TrackStage::Full,
            icp_iterations: 0,
            inliers: 0,
            final_residual: 0.0,
            quality_score: 0.0,
            objective_history: Vec::new(),
        }
    }
}

/// Pose history, adapted kernel scale, and the latest frame diagnostics.
#[derive(Debug, Clone)]
pub struct TrackingState {
    prev: Option<Pose>,
    prev_prev: Option<Pose>,
    pub sigma_t: f64,
    pub sigma_max: f64,
    pub diagnostics: TrackDiagnostics,
}

impl TrackingState {
    /// Starts with the kernel scale at its ceiling `tau_t^2`.
    pub fn new(tau_t: f64) -> Self {
        let sigma_max = tau_t * tau_t;
        TrackingState {
            prev: None,
            prev_prev: None,
            sigma_t: sigma_max,
            sigma_max,
            diagnostics: TrackDiagnostics::new(0),
        }
    }

    /// Records an estimated pose, shifting the two-frame history.
    pub fn observe_pose(&mut self, pose: Pose) {
        self.prev_prev = self.prev;
        self.prev = Some(pose);
    }

    /// Constant-velocity prediction: replays the last relative motion on top
    /// of the last pose. Falls back to the last pose, then to identity.
    pub fn predict_pose(&self) -> Pose {
        match (self.prev_prev, self.prev) {
            (Some(a), Some(b)) => b.compose(&a.inverse().compose(&b)),
            (None, Some(b)) => b,
            _ => Pose::identity(),
        }
    }

    /// One diagnostics row:
    /// `frame_id, stage_used, icp_iters, inliers, final_residual, sigma_t, quality_score`.
    pub fn csv_line(&self) -> String {
        let d = &self.diagnostics;
        format!(
            "{},{},{},{},{:.6},{:.6},{:.4}",
            d.frame_id,
            d.stage.label(),
            d.icp_iterations,
            d.inliers,
            d.final_residual,
            self.sigma_t,
            d.quality_score
        )
    }
}

/// Geman-McClure kernel `rho(e) = (e^2 / 2) / (sigma_t / 3 + e^2)`.
pub fn robust_kernel(e: f64, sigma_t: f64) -> f64 {
    let a = sigma_t / 3.0;
    0.5 * e * e / (a + e * e)
}

/// Derivative `rho'(e) = e * (sigma_t / 3) / (sigma_t / 3 + e^2)^2`.
pub fn robust_kernel_derivative(e: f64, sigma_t: f64) -> f64 {
    let a = sigma_t / 3.0;
    let denom = a + e * e;
    e * a / (denom * denom)
}

/// Iteratively-reweighted least-squares weight `rho'(e) / e`, finite at zero.
pub fn robust_weight(e: f64, sigma_t: f64) -> f64 {
    let a = sigma_t / 3.0;
    let denom = a + e * e;
    a / (denom * denom)
}

/// Re-centers the kernel on the current inlier statistics:
/// `sigma_t = clamp(3 * median(|residual|)^2, SIGMA_MIN, sigma_max)`.
/// With no residuals, the scale is left unchanged.
pub fn adapt_sigma(state: &mut TrackingState, residuals: &[f64]) -> f64 {
    if !residuals.is_empty() {
        let mut sorted: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        state.sigma_t = (3.0 * median * median).clamp(SIGMA_MIN, state.sigma_max);
    }
    state.sigma_t
}

/// Source/map point pairs within `tau` of each other.
#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    /// (source point in sensor frame, matched map point, distance at gather).
    pub pairs: Vec<(Vector3<f64>, Vector3<f64>, f64)>,
    pub tau: f64,
}

/// Nearest map neighbor per transformed scan point, in scan order.
pub fn gather_correspondences(
    scan: &[Vector3<f64>],
    map: &VoxelMap,
    pose: &Pose,
    tau: f64,
    level: usize,
) -> CorrespondenceSet {
    let mut pairs = Vec::new();
    for s in scan {
        let world = pose.transform_point(s);
        if let Some(m) = map.nearest_neighbor(&world, tau, level) {
            pairs.push((*s, m, (world - m).norm()));
        }
    }
    CorrespondenceSet { pairs, tau }
}

/// Photometric quality of the predicted view against the observed frame:
/// `0.4 * exp(-L_c / 0.1) + 0.3 * exp(-L_d / 0.2) + 0.3 * clamp(grad / g0, 0, 1)`.
pub fn assess_2d_quality(
    frame_rgb: &ImageRgb,
    frame_depth: &ImageDepth,
    preview: &crate::render::RenderTarget,
    gradient_normalizer: f64,
) -> f64 {
    let l_c = color_l1_mean(&preview.color, frame_rgb);
    let (l_d, _) = depth_l1_masked(preview, frame_depth);
    let grad = frame_rgb.mean_gradient_magnitude();
    0.4 * (-l_c / 0.1).exp()
        + 0.3 * (-l_d / 0.2).exp()
        + 0.3 * (grad / gradient_normalizer).clamp(0.0, 1.0)
}

/// Color loss on quarter-resolution images plus full-resolution depth loss,
/// with the color gradient routed back through the 4x4 box averaging. The
/// render itself stays at full resolution so the rendered and observed
/// images share the same formation; image dimensions must be divisible by 4.
fn coarse_loss_backward(
    rendered: &crate::render::RenderTarget,
    rgb_quarter: &ImageRgb,
    frame_depth: &ImageDepth,
    lambda_d: f64,
) -> (f64, crate::render::ImageGrads) {
    let (w, h) = (rendered.color.width, rendered.color.height);
    assert!(w % 4 == 0 && h % 4 == 0, "coarse stage needs dims divisible by 4");
    let l1_sign = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let color_q = rendered.color.downsample().downsample();
    let color_loss = color_l1_mean(&color_q, rgb_quarter);

    let mut grads = ImageGrads::zeros(w, h);
    let nq = (w / 4) * (h / 4);
    // Each quarter pixel averages a 4x4 block, so its gradient spreads
    // uniformly over the sixteen source pixels.
    let gq_scale = 1.0 / (3.0 * nq as f64) / 16.0;
    for y in 0..h {
        for x in 0..w {
            let q = (y / 4) * (w / 4) + x / 4;
            for c in 0..3 {
                let diff = color_q.data[q][c] - rgb_quarter.data[q][c];
                grads.color[y * w + x][c] = gq_scale * l1_sign(diff);
            }
        }
    }

    let (depth_loss, valid) = depth_l1_masked(rendered, frame_depth);
    if valid > 0 {
        let dw = lambda_d / valid as f64;
        for p in 0..w * h {
            let d = frame_depth.data[p];
            if d > 0.0 && rendered.alpha[p] > 0.5 {
                grads.depth[p] = dw * l1_sign(rendered.depth.data[p] - d);
            }
        }
    }
    (color_loss + lambda_d * depth_loss, grads)
}

/// Photometric pose refinement with the Gaussian field frozen: the color
/// objective lives at quarter resolution for a wider basin, depth at full
/// resolution. Descends the tangent space from `init` with Polyak-sized
/// subgradient steps (the loss is piecewise linear, so `loss / |g|^2` is the
/// natural scale), keeps the best-loss iterate, and exits early after five
/// consecutive loss increases.
pub fn coarse_track(
    frame_rgb: &ImageRgb,
    frame_depth: &ImageDepth,
    gaussians: &[NeuralGaussian],
    intr: &Intrinsics,
    init: &Pose,
    cfg: &TrackerConfig,
) -> Pose {
    let rgb_q = frame_rgb.downsample().downsample();

    let mut pose = *init;
    let (mut rendered, mut cache) = render_with_cache(gaussians, &pose, intr);
    let (mut loss, mut image_grads) =
        coarse_loss_backward(&rendered, &rgb_q, frame_depth, cfg.lambda_d);
    let mut best_pose = pose;
    let mut best_loss = loss;
    let mut rejections = 0;

    for _ in 0..cfg.coarse_iterations {
        let back = render_backward(gaussians, &pose, intr, &rendered, &cache, &image_grads);
        let grad = back.pose.to_vector();
        let gnorm2 = grad.norm_squared();
        if gnorm2 < 1e-18 {
            break;
        }
        // Polyak step toward a zero-loss target, capped so a noisy frame
        // cannot fling the pose; backtracking below absorbs the optimism.
        let mut scale = (loss / gnorm2).min(cfg.coarse_step_limit / gnorm2.sqrt());

        // Backtrack past subgradient kinks; the landscape is piecewise smooth.
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let candidate = pose.compose(&Pose::exp(&Twist::from_vector(&(-scale * grad))));
            let (cand_rendered, cand_cache) = render_with_cache(gaussians, &candidate, intr);
            let (cand_loss, cand_grads) =
                coarse_loss_backward(&cand_rendered, &rgb_q, frame_depth, cfg.lambda_d);
            if cand_loss < loss {
                pose = candidate;
                rendered = cand_rendered;
                cache = cand_cache;
                loss = cand_loss;
                image_grads = cand_grads;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if accepted {
            rejections = 0;
            if loss < best_loss {
                best_loss = loss;
                best_pose = pose;
            }
        } else {
            rejections += 1;
            if rejections >= 5 {
                break;
            }
        }
    }

    best_pose
}

fn robust_objective(corr: &CorrespondenceSet, pose: &Pose, sigma_t: f64) -> f64 {
    corr.pairs
        .iter()
        .map(|(s, m, _)| robust_kernel((pose.transform_point(s) - m).norm(), sigma_t))
        .sum()
}

fn solve_normal_equations(h: &Matrix6<f64>, b: &Vector6<f64>) -> Vector6<f64> {
    if let Some(chol) = h.cholesky() {
        chol.solve(b)
    } else {
        // Rank-deficient geometry: damp the diagonal and retry.
        let damped = h + Matrix6::identity() * 1e-6;
        damped
            .cholesky()
            .map(|c| c.solve(b))
            .unwrap_or_else(Vector6::zeros)
    }
}

/// Robust point-to-point ICP against the voxel map. Each iteration gathers
/// nearest-neighbor correspondences at the current estimate, solves one
/// reweighted Gauss-Newton step with the Geman-McClure kernel, and halves
/// the step until the robust objective does not increase. Ends by adapting
/// the kernel scale from the final inlier residuals.
pub fn fine_track_icp(
    scan: &[Vector3<f64>],
    map: &VoxelMap,
    init: &Pose,
    state: &mut TrackingState,
    cfg: &TrackerConfig,
) -> Pose {
    let mut pose = *init;
    state.diagnostics.icp_iterations = 0;
    state.diagnostics.objective_history.clear();

    for iter in 0..cfg.max_icp_iterations {
        let corr = gather_correspondences(scan, map, &pose, cfg.tau_t, cfg.search_level);
        if corr.pairs.len() < cfg.min_correspondences {
            state.diagnostics.stage = TrackStage::Lost;
            state.diagnostics.inliers = corr.pairs.len();
            return *init;
        }

        let objective = robust_objective(&corr, &pose, state.sigma_t);

        let mut h = Matrix6::<f64>::zeros();
        let mut b = Vector6::<f64>::zeros();
        for (s, m, _) in &corr.pairs {
            let p = pose.transform_point(s);
            let r = p - m;
            let w = robust_weight(r.norm(), state.sigma_t);
            // Left-perturbation Jacobian: d(exp(xi) p)/d xi = [-[p]x | I].
            let jw = -crate::geometry::skew(&p);
            let top = jw.transpose() * jw;
            for i in 0..3 {
                for j in 0..3 {
                    h[(i, j)] += w * top[(i, j)];
                    h[(i, j + 3)] += w * jw[(j, i)];
                    h[(i + 3, j)] += w * jw[(i, j)];
                }
                h[(i + 3, i + 3)] += w;
            }
            let jtr_top = jw.transpose() * r;
            for k in 0..3 {
                b[k] -= w * jtr_top[k];
                b[k + 3] -= w * r[k];
            }
        }

        let xi = solve_normal_equations(&h, &b);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let candidate =
                Pose::exp(&Twist::from_vector(&(xi * step))).compose(&pose);
            let candidate_obj = robust_objective(&corr, &candidate, state.sigma_t);
            if candidate_obj <= objective {
                pose = candidate;
                state
                    .diagnostics
                    .objective_history
                    .push((objective, candidate_obj));
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        state.diagnostics.icp_iterations = iter + 1;
        if !accepted || (xi * step).norm() < ICP_CONVERGENCE {
            break;
        }
    }

    let corr = gather_correspondences(scan, map, &pose, cfg.tau_t, cfg.search_level);
    let residuals: Vec<f64> = corr
        .pairs
        .iter()
        .map(|(s, m, _)| (pose.transform_point(s) - m).norm())
        .collect();
    state.diagnostics.inliers = residuals.len();
    state.diagnostics.final_residual = if residuals.is_empty() {
        0.0
    } else {
        residuals.iter().sum::<f64>() / residuals.len() as f64
    };
    adapt_sigma(state, &residuals);
    pose
}

/// Full per-frame pipeline: predict, gate the photometric stage on 2D
/// quality, then refine with robust ICP. Records the estimate in the pose
/// history and fills the frame diagnostics.
#[allow(clippy::too_many_arguments)]
pub fn track_frame(
    frame_id: u64,
    frame_rgb: &ImageRgb,
    frame_depth: &ImageDepth,
    gaussians: &[NeuralGaussian],
    intr: &Intrinsics,
    scan: &[Vector3<f64>],
    map: &VoxelMap,
    state: &mut TrackingState,
    cfg: &TrackerConfig,
) -> Pose {
    state.diagnostics = TrackDiagnostics::new(frame_id);
    let predicted = state.predict_pose();

    let preview = render(gaussians, &predicted, intr);
    let quality = assess_2d_quality(frame_rgb, frame_depth, &preview, cfg.gradient_normalizer);
    state.diagnostics.quality_score = quality;

    let coarse = if quality >= cfg.zeta {
        coarse_track(frame_rgb, frame_depth, gaussians, intr, &predicted, cfg)
    } else {
        state.diagnostics.stage = TrackStage::CoarseBypassed;
        predicted
    };

    let pose = fine_track_icp(scan, map, &coarse, state, cfg);
    state.observe_pose(pose);
    pose
}
