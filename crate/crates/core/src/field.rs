//! Anchor attributes and the anchor -> neural-Gaussian decode path: three
//! 2-layer perceptrons map an anchor's feature plus view geometry to opacity,
//! color, and covariance (quaternion + scale) for k Gaussians per anchor, with
//! analytic gradients for every learnable quantity.
//!
//! Anchors live in world coordinates but decode in their submap's local frame,
//! so a rigid correction of the submap changes decoded Gaussians by exactly
//! that rigid transform and nothing else.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::Pose;
use crate::{Error, Result};

pub const FEATURE_DIM: usize = 32;
pub const HIDDEN_DIM: usize = 32;
/// Decoder input: anchor feature (32) + distance (1) + view direction (3).
pub const INPUT_DIM: usize = FEATURE_DIM + 4;
/// Raw quaternion norms below this decode to the identity rotation.
const QUAT_NORM_FLOOR: f64 = 1e-8;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LINEAR -> RELU -> LINEAR perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    pre: DVector<f64>,
    post: DVector<f64>,
    out: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl Mlp {
    /// He-style uniform init: weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)),
    /// biases zero.
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound1 = (6.0 / input as f64).sqrt();
        let bound2 = (6.0 / hidden as f64).sqrt();
        Mlp {
            w1: DMatrix::from_fn(hidden, input, |_, _| rng.gen_range(-bound1..bound1)),
            b1: DVector::zeros(hidden),
            w2: DMatrix::from_fn(output, hidden, |_, _| rng.gen_range(-bound2..bound2)),
            b2: DVector::zeros(output),
        }
    }

    pub fn forward(&self, x: &DVector<f64>) -> MlpCache {
        let pre = &self.w1 * x + &self.b1;
        let post = pre.map(|v| v.max(0.0));
        let out = &self.w2 * &post + &self.b2;
        MlpCache { pre, post, out }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        x: &DVector<f64>,
        cache: &MlpCache,
        gout: &DVector<f64>,
        grads: &mut MlpGrads,
    ) -> DVector<f64> {
        grads.b2 += gout;
        grads.w2.ger(1.0, gout, &cache.post, 1.0);
        let gpost = self.w2.tr_mul(gout);
        let gpre = DVector::from_fn(gpost.len(), |i, _| {
            if cache.pre[i] > 0.0 {
                gpost[i]
            } else {
                0.0
            }
        });
        grads.b1 += &gpre;
        grads.w1.ger(1.0, &gpre, x, 1.0);
        self.w1.tr_mul(&gpre)
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            w1: DMatrix::zeros(self.w1.nrows(), self.w1.ncols()),
            b1: DVector::zeros(self.b1.len()),
            w2: DMatrix::zeros(self.w2.nrows(), self.w2.ncols()),
            b2: DVector::zeros(self.b2.len()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn append_flat(w1: &DMatrix<f64>, b1: &DVector<f64>, w2: &DMatrix<f64>, b2: &DVector<f64>, out: &mut Vec<f64>) {
        out.extend(w1.iter());
        out.extend(b1.iter());
        out.extend(w2.iter());
        out.extend(b2.iter());
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        Self::append_flat(&self.w1, &self.b1, &self.w2, &self.b2, out);
    }

    pub fn read_flat(&mut self, data: &[f64]) -> usize {
        let mut idx = 0;
        for v in self.w1.iter_mut().chain(self.b1.iter_mut()) {
            *v = data[idx];
            idx += 1;
        }
        for v in self.w2.iter_mut().chain(self.b2.iter_mut()) {
            *v = data[idx];
            idx += 1;
        }
        idx
    }
}

impl MlpGrads {
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        Mlp::append_flat(&self.w1, &self.b1, &self.w2, &self.b2, out);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.write_flat(&mut out);
        out
    }
}

/// The three attribute decoders. The covariance decoder's output splits into
/// k raw quaternions (4k values) followed by k raw scales (3k values).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub k: usize,
    pub opacity: Mlp,
    pub color: Mlp,
    pub covariance: Mlp,
}

#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub opacity: MlpGrads,
    pub color: MlpGrads,
    pub covariance: MlpGrads,
}

impl DecoderParams {
    pub fn init(k: usize, rng: &mut ChaCha8Rng) -> Self {
        let opacity = {
            let mut mlp = Mlp::init(INPUT_DIM, HIDDEN_DIM, k, rng);
            // A small positive output bias keeps freshly decoded Gaussians
            // above the opacity cull threshold.
            mlp.b2.fill(0.1);
            mlp
        };
        DecoderParams {
            k,
            opacity,
            color: Mlp::init(INPUT_DIM, HIDDEN_DIM, 3 * k, rng),
            covariance: Mlp::init(INPUT_DIM, HIDDEN_DIM, 7 * k, rng),
        }
    }

    pub fn zero_grads(&self) -> DecoderGrads {
        DecoderGrads {
            opacity: self.opacity.zero_grads(),
            color: self.color.zero_grads(),
            covariance: self.covariance.zero_grads(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.opacity.param_count() + self.color.param_count() + self.covariance.param_count()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.opacity.write_flat(&mut out);
        self.color.write_flat(&mut out);
        self.covariance.write_flat(&mut out);
        out
    }

    pub fn assign_from_flat(&mut self, data: &[f64]) {
        let mut idx = self.opacity.read_flat(data);
        idx += self.color.read_flat(&data[idx..]);
        idx += self.covariance.read_flat(&data[idx..]);
        debug_assert_eq!(idx, data.len());
    }
}

impl DecoderGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.opacity.write_flat(&mut out);
        self.color.write_flat(&mut out);
        self.covariance.write_flat(&mut out);
        out
    }
}

/// A voxel anchor: fixed world position plus learnable feature, offset
/// scaling, offsets, and base scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub id: u64,
    pub level: usize,
    pub position: Vector3<f64>,
    pub feature: DVector<f64>,
    pub scaling: Vector3<f64>,
    pub offsets: Vec<Vector3<f64>>,
    pub base_scale: Vector3<f64>,
}

impl Anchor {
    /// Fresh anchor at `position`: offsets ~ U(-0.5, 0.5), feature ~ N(0, 0.1),
    /// offset scaling and base scale set to the spawning level's voxel size so
    /// initial Gaussians stay inside their voxel.
    pub fn init(
        id: u64,
        level: usize,
        position: Vector3<f64>,
        voxel_size: f64,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let normal = Normal::new(0.0, 0.1).unwrap();
        Anchor {
            id,
            level,
            position,
            feature: DVector::from_fn(FEATURE_DIM, |_, _| normal.sample(rng)),
            scaling: Vector3::repeat(voxel_size),
            offsets: (0..k)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    )
                })
                .collect(),
            base_scale: Vector3::repeat(voxel_size),
        }
    }

    pub fn k(&self) -> usize {
        self.offsets.len()
    }

    /// Learnable parameter count: feature + scaling + offsets + base scale.
    pub fn param_count(&self) -> usize {
        FEATURE_DIM + 3 + 3 * self.offsets.len() + 3
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.feature.iter());
        out.extend(self.scaling.iter());
        for o in &self.offsets {
            out.extend(o.iter());
        }
        out.extend(self.base_scale.iter());
        out
    }

    pub fn assign_from_flat(&mut self, data: &[f64]) {
        let mut idx = 0;
        for v in self.feature.iter_mut() {
            *v = data[idx];
            idx += 1;
        }
        for v in self.scaling.iter_mut() {
            *v = data[idx];
            idx += 1;
        }
        for o in self.offsets.iter_mut() {
            for v in o.iter_mut() {
                *v = data[idx];
                idx += 1;
            }
        }
        for v in self.base_scale.iter_mut() {
            *v = data[idx];
            idx += 1;
        }
        debug_assert_eq!(idx, data.len());
    }
}

/// Gradients w.r.t. one anchor's learnables, in [`Anchor::flatten`] order.
#[derive(Debug, Clone)]
pub struct AnchorGrads {
    pub feature: DVector<f64>,
    pub scaling: Vector3<f64>,
    pub offsets: Vec<Vector3<f64>>,
    pub base_scale: Vector3<f64>,
}

impl AnchorGrads {
    pub fn zero(k: usize) -> Self {
        AnchorGrads {
            feature: DVector::zeros(FEATURE_DIM),
            scaling: Vector3::zeros(),
            offsets: vec![Vector3::zeros(); k],
            base_scale: Vector3::zeros(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.feature.iter());
        out.extend(self.scaling.iter());
        for o in &self.offsets {
            out.extend(o.iter());
        }
        out.extend(self.base_scale.iter());
        out
    }
}

/// One decoded Gaussian in world coordinates. `opacity` is the raw tanh value;
/// the renderer uses `effective_opacity` which clamps negatives to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralGaussian {
    pub position: Vector3<f64>,
    pub opacity: f64,
    /// Normalized (w, x, y, z).
    pub quaternion: [f64; 4],
    pub scale: Vector3<f64>,
    pub color: [f64; 3],
    pub degenerate_rotation: bool,
}

impl NeuralGaussian {
    pub fn culled(&self) -> bool {
        self.opacity <= 0.0
    }

    pub fn effective_opacity(&self) -> f64 {
        self.opacity.max(0.0)
    }
}

/// Upstream gradients for one Gaussian, matching [`NeuralGaussian`] fields.
/// `opacity` differentiates the effective (clamped) opacity.
#[derive(Debug, Clone, Copy)]
pub struct GaussianGrad {
    pub position: Vector3<f64>,
    pub opacity: f64,
    pub quaternion: [f64; 4],
    pub scale: Vector3<f64>,
    pub color: [f64; 3],
}

impl GaussianGrad {
    pub fn zero() -> Self {
        GaussianGrad {
            position: Vector3::zeros(),
            opacity: 0.0,
            quaternion: [0.0; 4],
            scale: Vector3::zeros(),
            color: [0.0; 3],
        }
    }
}

/// Frame bundle for decoding: the submap's world pose, its cached inverse,
/// and the camera center expressed in the submap frame.
#[derive(Debug, Clone)]
pub struct DecodeContext {
    pub world_from_submap: Pose,
    pub submap_from_world: Pose,
    pub camera_local: Vector3<f64>,
}

impl DecodeContext {
    pub fn new(world_from_submap: &Pose, camera_center_world: &Vector3<f64>) -> Self {
        let submap_from_world = world_from_submap.inverse();
        DecodeContext {
            world_from_submap: *world_from_submap,
            camera_local: submap_from_world.transform_point(camera_center_world),
            submap_from_world,
        }
    }
}

/// Distance and unit view direction from `camera` to `anchor_pos`, both in
/// the same frame. Coincident points are a hard error.
pub fn view_geometry(
    anchor_pos: &Vector3<f64>,
    camera: &Vector3<f64>,
) -> Result<(f64, Vector3<f64>)> {
    let diff = anchor_pos - camera;
    let dist = diff.norm();
    if dist < 1e-12 {
        return Err(Error::DegenerateViewDirection);
    }
    Ok((dist, diff / dist))
}

/// Gaussian centers spawned by an anchor in the anchor's own frame:
/// `mu_m = x_a + O_m ⊙ l`.
pub fn spawn_positions(anchor: &Anchor) -> Vec<Vector3<f64>> {
    anchor
        .offsets
        .iter()
        .map(|o| anchor.position + o.component_mul(&anchor.scaling))
        .collect()
}

#[derive(Debug, Clone)]
struct DecodeCache {
    input: DVector<f64>,
    anchor_local: Vector3<f64>,
    op: MlpCache,
    co: MlpCache,
    cv: MlpCache,
    q_local: Vec<[f64; 4]>,
    q_norm: Vec<f64>,
    scale_sig: Vec<Vector3<f64>>,
}

/// Decode result: world-frame Gaussians plus the cache the backward pass needs.
#[derive(Debug, Clone)]
pub struct DecodedAnchor {
    pub gaussians: Vec<NeuralGaussian>,
    cache: DecodeCache,
}

/// Single-pass decode of all k Gaussians for one anchor under one view.
pub fn decode_anchor(
    anchor: &Anchor,
    params: &DecoderParams,
    ctx: &DecodeContext,
) -> Result<DecodedAnchor> {
    let k = params.k;
    debug_assert_eq!(anchor.k(), k);
    let anchor_local = ctx.submap_from_world.transform_point(&anchor.position);
    let (dist, dir) = view_geometry(&anchor_local, &ctx.camera_local)?;
    let mut input = DVector::zeros(INPUT_DIM);
    input.rows_mut(0, FEATURE_DIM).copy_from(&anchor.feature);
    input[FEATURE_DIM] = dist;
    input[FEATURE_DIM + 1] = dir.x;
    input[FEATURE_DIM + 2] = dir.y;
    input[FEATURE_DIM + 3] = dir.z;

    let op = params.opacity.forward(&input);
    let co = params.color.forward(&input);
    let cv = params.covariance.forward(&input);

    let t_quat = {
        let q = ctx.world_from_submap.rotation.into_inner();
        [q.w, q.i, q.j, q.k]
    };

    let mut gaussians = Vec::with_capacity(k);
    let mut q_local_all = Vec::with_capacity(k);
    let mut q_norm_all = Vec::with_capacity(k);
    let mut scale_sig_all = Vec::with_capacity(k);
    for m in 0..k {
        let opacity = op.out[m].tanh();
        let color = [
            sigmoid(co.out[3 * m]),
            sigmoid(co.out[3 * m + 1]),
            sigmoid(co.out[3 * m + 2]),
        ];
        let q_raw = [
            cv.out[4 * m],
            cv.out[4 * m + 1],
            cv.out[4 * m + 2],
            cv.out[4 * m + 3],
        ];
        let norm = (q_raw[0] * q_raw[0]
            + q_raw[1] * q_raw[1]
            + q_raw[2] * q_raw[2]
            + q_raw[3] * q_raw[3])
            .sqrt();
        let (q_local, degenerate) = if norm < QUAT_NORM_FLOOR {
            ([1.0, 0.0, 0.0, 0.0], true)
        } else {
            (
                [
                    q_raw[0] / norm,
                    q_raw[1] / norm,
                    q_raw[2] / norm,
                    q_raw[3] / norm,
                ],
                false,
            )
        };
        let quaternion = quat_mul(&t_quat, &q_local);
        let scale_sig = Vector3::new(
            sigmoid(cv.out[4 * k + 3 * m]),
            sigmoid(cv.out[4 * k + 3 * m + 1]),
            sigmoid(cv.out[4 * k + 3 * m + 2]),
        );
        let scale = scale_sig.component_mul(&anchor.base_scale);
        let mu_local = anchor_local + anchor.offsets[m].component_mul(&anchor.scaling);
        let position = ctx.world_from_submap.transform_point(&mu_local);

        q_local_all.push(q_local);
        q_norm_all.push(norm);
        scale_sig_all.push(scale_sig);
        gaussians.push(NeuralGaussian {
            position,
            opacity,
            quaternion,
            scale,
            color,
            degenerate_rotation: degenerate,
        });
    }

    Ok(DecodedAnchor {
        gaussians,
        cache: DecodeCache {
            input,
            anchor_local,
            op,
            co,
            cv,
            q_local: q_local_all,
            q_norm: q_norm_all,
            scale_sig: scale_sig_all,
        },
    })
}

impl DecodedAnchor {
    /// Chain-rule pass from per-Gaussian gradients back to the anchor's
    /// learnables and the decoder parameters. Culled Gaussians propagate only
    /// their opacity gradient (straight through the zero clamp) so opacity can
    /// recover across the cull threshold; their other attributes are frozen.
    pub fn backward(
        &self,
        anchor: &Anchor,
        params: &DecoderParams,
        ctx: &DecodeContext,
        upstream: &[GaussianGrad],
        decoder_grads: &mut DecoderGrads,
    ) -> AnchorGrads {
        let k = params.k;
        debug_assert_eq!(upstream.len(), k);
        let t_quat = {
            let q = ctx.world_from_submap.rotation.into_inner();
            [q.w, q.i, q.j, q.k]
        };
        let mut grads = AnchorGrads::zero(k);
        let mut g_op = DVector::zeros(k);
        let mut g_co = DVector::zeros(3 * k);
        let mut g_cv = DVector::zeros(7 * k);

        for m in 0..k {
            let g = &upstream[m];
            let gauss = &self.gaussians[m];
            let alpha = gauss.opacity;
            g_op[m] = g.opacity * (1.0 - alpha * alpha);
            if gauss.culled() {
                continue;
            }
            for c in 0..3 {
                let col = gauss.color[c];
                g_co[3 * m + c] = g.color[c] * col * (1.0 - col);
            }
            let sig = &self.cache.scale_sig[m];
            for j in 0..3 {
                g_cv[4 * k + 3 * m + j] =
                    g.scale[j] * anchor.base_scale[j] * sig[j] * (1.0 - sig[j]);
                grads.base_scale[j] += g.scale[j] * sig[j];
            }
            if !gauss.degenerate_rotation {
                let gq_local = quat_mul_left_transpose(&t_quat, &g.quaternion);
                let q_local = self.cache.q_local[m];
                let dot = gq_local[0] * q_local[0]
                    + gq_local[1] * q_local[1]
                    + gq_local[2] * q_local[2]
                    + gq_local[3] * q_local[3];
                let n = self.cache.q_norm[m];
                for j in 0..4 {
                    g_cv[4 * m + j] = (gq_local[j] - dot * q_local[j]) / n;
                }
            }
            let g_mu_local = ctx.submap_from_world.rotate(&g.position);
            grads.offsets[m] += g_mu_local.component_mul(&anchor.scaling);
            grads.scaling += g_mu_local.component_mul(&anchor.offsets[m]);
        }

        let gx_op = params
            .opacity
            .backward(&self.cache.input, &self.cache.op, &g_op, &mut decoder_grads.opacity);
        let gx_co = params
            .color
            .backward(&self.cache.input, &self.cache.co, &g_co, &mut decoder_grads.color);
        let gx_cv = params.covariance.backward(
            &self.cache.input,
            &self.cache.cv,
            &g_cv,
            &mut decoder_grads.covariance,
        );
        let gx = gx_op + gx_co + gx_cv;
        grads.feature += gx.rows(0, FEATURE_DIM);
        grads
    }

    /// The anchor's position in its submap frame, cached at decode time.
    pub fn anchor_local(&self) -> Vector3<f64> {
        self.cache.anchor_local
    }
}

/// Hamilton product `a ⊗ b` on (w, x, y, z) arrays.
pub fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// `L(a)^T g` where `L(a)` is the matrix of left-multiplication by `a`:
/// the adjoint of `b -> a ⊗ b`.
fn quat_mul_left_transpose(a: &[f64; 4], g: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * g[0] + a[1] * g[1] + a[2] * g[2] + a[3] * g[3],
        -a[1] * g[0] + a[0] * g[1] + a[3] * g[2] - a[2] * g[3],
        -a[2] * g[0] - a[3] * g[1] + a[0] * g[2] + a[1] * g[3],
        -a[3] * g[0] + a[2] * g[1] - a[1] * g[2] + a[0] * g[3],
    ]
}

/// Rotation matrix of a unit quaternion (w, x, y, z), polynomial form.
pub fn rotation_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Derivatives of the rotation-matrix polynomial w.r.t. each quaternion
/// component, in (w, x, y, z) order. The polynomial is differentiated as-is;
/// normalization is the decoder's responsibility.
pub fn rotation_matrix_jacobian(q: &[f64; 4]) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0),
        Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x),
        Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y),
        Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0),
    ]
}

/// `Σ = R(q) diag(s)^2 R(q)^T`, symmetric positive definite for s > 0.
pub fn covariance_from(q: &[f64; 4], s: &Vector3<f64>) -> Matrix3<f64> {
    let r = rotation_matrix(q);
    let d = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
    r * d * r.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Twist;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_pose(r: &mut ChaCha8Rng) -> Pose {
        Pose::exp(&Twist::new(
            Vector3::new(
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
            ),
            Vector3::new(
                r.gen_range(-2.0..2.0),
                r.gen_range(-2.0..2.0),
                r.gen_range(-2.0..2.0),
            ),
        ))
    }

    #[test]
    fn spawn_positions_apply_scaled_offsets() {
        let mut anchor = Anchor::init(0, 0, Vector3::zeros(), 1.0, 1, &mut rng(1));
        anchor.offsets = vec![Vector3::new(1.0, 0.0, 0.0)];
        anchor.scaling = Vector3::new(2.0, 2.0, 2.0);
        assert_eq!(spawn_positions(&anchor)[0], Vector3::new(2.0, 0.0, 0.0));

        anchor.offsets = vec![Vector3::zeros()];
        assert_eq!(spawn_positions(&anchor)[0], anchor.position);
    }

    #[test]
    fn spawn_positions_match_elementwise_oracle() {
        let mut r = rng(2);
        let anchor = Anchor::init(1, 0, Vector3::new(0.3, -0.7, 1.1), 0.05, 10, &mut r);
        let spawned = spawn_positions(&anchor);
        for (m, mu) in spawned.iter().enumerate() {
            for j in 0..3 {
                let expect = anchor.position[j] + anchor.offsets[m][j] * anchor.scaling[j];
                assert_relative_eq!(mu[j], expect, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn view_geometry_known_triangles() {
        let (d, dir) = view_geometry(&Vector3::new(3.0, 4.0, 0.0), &Vector3::zeros()).unwrap();
        assert_relative_eq!(d, 5.0, epsilon = 1e-15);
        assert_relative_eq!(dir.x, 0.6, epsilon = 1e-15);
        assert_relative_eq!(dir.y, 0.8, epsilon = 1e-15);

        let (d2, dir2) =
            view_geometry(&Vector3::new(0.0, 0.0, 3.0), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(d2, 2.0, epsilon = 1e-15);
        assert_eq!(dir2, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn view_direction_is_unit_norm() {
        let mut r = rng(3);
        for _ in 0..1000 {
            let a = Vector3::new(
                r.gen_range(-5.0..5.0),
                r.gen_range(-5.0..5.0),
                r.gen_range(-5.0..5.0),
            );
            let c = Vector3::new(
                r.gen_range(-5.0..5.0),
                r.gen_range(-5.0..5.0),
                r.gen_range(-5.0..5.0),
            );
            if (a - c).norm() < 1e-9 {
                continue;
            }
            let (_, dir) = view_geometry(&a, &c).unwrap();
            assert!((dir.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn view_geometry_rejects_coincident_points() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert!(matches!(
            view_geometry(&p, &p),
            Err(Error::DegenerateViewDirection)
        ));
    }

    #[test]
    fn zero_decoder_produces_neutral_attributes() {
        let mut params = DecoderParams::init(4, &mut rng(4));
        for mlp in [&mut params.opacity, &mut params.color, &mut params.covariance] {
            mlp.w1.fill(0.0);
            mlp.b1.fill(0.0);
            mlp.w2.fill(0.0);
            mlp.b2.fill(0.0);
        }
        let anchor = Anchor::init(0, 0, Vector3::new(0.0, 0.0, 2.0), 0.1, 4, &mut rng(5));
        let ctx = DecodeContext::new(&Pose::identity(), &Vector3::zeros());
        let decoded = decode_anchor(&anchor, &params, &ctx).unwrap();
        for g in &decoded.gaussians {
            assert_eq!(g.opacity, 0.0);
            assert!(g.culled());
            assert_eq!(g.color, [0.5, 0.5, 0.5]);
            assert_eq!(g.scale, anchor.base_scale * 0.5);
            assert_eq!(g.quaternion, [1.0, 0.0, 0.0, 0.0]);
            assert!(g.degenerate_rotation);
        }
    }

    #[test]
    fn large_color_logits_stay_below_one() {
        let mut params = DecoderParams::init(1, &mut rng(6));
        params.color.w1.fill(0.0);
        params.color.b1.fill(0.0);
        params.color.w2.fill(0.0);
        // Large enough to saturate visually, small enough that f64 still
        // resolves 1 - sigmoid(x) as nonzero.
        params.color.b2.fill(30.0);
        let anchor = Anchor::init(0, 0, Vector3::new(0.0, 0.0, 2.0), 0.1, 1, &mut rng(7));
        let ctx = DecodeContext::new(&Pose::identity(), &Vector3::zeros());
        let decoded = decode_anchor(&anchor, &params, &ctx).unwrap();
        for c in decoded.gaussians[0].color {
            assert!(c < 1.0 && c > 0.999);
        }
    }

    #[test]
    fn decode_matches_straight_line_reference() {
        // Independent re-implementation with bare loops; no shared code with
        // the production matmul path.
        fn ref_mlp(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
            let hidden: Vec<f64> = (0..mlp.w1.nrows())
                .map(|i| {
                    let mut acc = mlp.b1[i];
                    for (j, xj) in x.iter().enumerate() {
                        acc += mlp.w1[(i, j)] * xj;
                    }
                    acc.max(0.0)
                })
                .collect();
            (0..mlp.w2.nrows())
                .map(|i| {
                    let mut acc = mlp.b2[i];
                    for (j, hj) in hidden.iter().enumerate() {
                        acc += mlp.w2[(i, j)] * hj;
                    }
                    acc
                })
                .collect()
        }

        let k = 10;
        let mut r = rng(8);
        let params = DecoderParams::init(k, &mut r);
        let anchor = Anchor::init(3, 0, Vector3::new(0.4, 0.2, 1.5), 0.05, k, &mut r);
        let camera = Vector3::new(-0.1, 0.05, 0.0);
        let ctx = DecodeContext::new(&Pose::identity(), &camera);
        let decoded = decode_anchor(&anchor, &params, &ctx).unwrap();

        let diff = anchor.position - camera;
        let dist = diff.norm();
        let dir = diff / dist;
        let mut x: Vec<f64> = anchor.feature.iter().copied().collect();
        x.extend([dist, dir.x, dir.y, dir.z]);

        let op = ref_mlp(&params.opacity, &x);
        let co = ref_mlp(&params.color, &x);
        let cv = ref_mlp(&params.covariance, &x);
        for m in 0..k {
            let g = &decoded.gaussians[m];
            assert_relative_eq!(g.opacity, op[m].tanh(), epsilon = 1e-9);
            for c in 0..3 {
                assert_relative_eq!(g.color[c], sigmoid(co[3 * m + c]), epsilon = 1e-9);
                let sig = sigmoid(cv[4 * k + 3 * m + c]);
                assert_relative_eq!(g.scale[c], sig * anchor.base_scale[c], epsilon = 1e-9);
            }
            let q = [cv[4 * m], cv[4 * m + 1], cv[4 * m + 2], cv[4 * m + 3]];
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            for j in 0..4 {
                assert_relative_eq!(g.quaternion[j], q[j] / n, epsilon = 1e-9);
            }
            let mu = anchor.position + anchor.offsets[m].component_mul(&anchor.scaling);
            assert!((g.position - mu).norm() < 1e-12);
        }
    }

    #[test]
    fn decode_is_bitwise_deterministic() {
        let mut r = rng(9);
        let params = DecoderParams::init(10, &mut r);
        let anchor = Anchor::init(0, 0, Vector3::new(1.0, 0.5, 2.0), 0.05, 10, &mut r);
        let ctx = DecodeContext::new(&random_pose(&mut r), &Vector3::new(0.2, 0.0, -0.4));
        let a = decode_anchor(&anchor, &params, &ctx).unwrap();
        let b = decode_anchor(&anchor, &params, &ctx).unwrap();
        assert_eq!(a.gaussians, b.gaussians);
    }

    #[test]
    fn decoded_ranges_respect_activations() {
        let mut r = rng(10);
        for trial in 0..20 {
            let params = DecoderParams::init(10, &mut r);
            let anchor = Anchor::init(
                trial,
                0,
                Vector3::new(
                    r.gen_range(-1.0..1.0),
                    r.gen_range(-1.0..1.0),
                    r.gen_range(1.0..3.0),
                ),
                0.05,
                10,
                &mut r,
            );
            let ctx = DecodeContext::new(&Pose::identity(), &Vector3::zeros());
            let decoded = decode_anchor(&anchor, &params, &ctx).unwrap();
            for g in &decoded.gaussians {
                for c in g.color {
                    assert!(c > 0.0 && c < 1.0);
                }
                for j in 0..3 {
                    assert!(g.scale[j] > 0.0 && g.scale[j] < anchor.base_scale[j]);
                }
                if !g.culled() {
                    assert!(g.opacity > 0.0 && g.opacity < 1.0);
                }
                let qn: f64 = g.quaternion.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((qn - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decode_commutes_with_rigid_submap_correction() {
        // Re-expressing the submap pose and the camera by the same rigid
        // transform must move Gaussians rigidly and keep attributes fixed.
        let mut r = rng(11);
        let params = DecoderParams::init(10, &mut r);
        let anchor_world = Vector3::new(0.4, -0.3, 2.0);
        let submap_pose = random_pose(&mut r);
        let anchor = Anchor::init(0, 0, anchor_world, 0.05, 10, &mut r);
        let camera = Vector3::new(0.1, 0.2, -0.5);
        let base = decode_anchor(
            &anchor,
            &params,
            &DecodeContext::new(&submap_pose, &camera),
        )
        .unwrap();

        let g_corr = random_pose(&mut r);
        let mut moved = anchor.clone();
        moved.position = g_corr.transform_point(&anchor.position);
        let corrected = decode_anchor(
            &moved,
            &params,
            &DecodeContext::new(&g_corr.compose(&submap_pose), &g_corr.transform_point(&camera)),
        )
        .unwrap();

        for (a, b) in base.gaussians.iter().zip(&corrected.gaussians) {
            assert!((g_corr.transform_point(&a.position) - b.position).norm() < 1e-9);
            assert_relative_eq!(a.opacity, b.opacity, epsilon = 1e-12);
            for c in 0..3 {
                assert_relative_eq!(a.color[c], b.color[c], epsilon = 1e-12);
            }
            assert!((a.scale - b.scale).norm() < 1e-12);
            let ra = rotation_matrix(&a.quaternion);
            let rb = rotation_matrix(&b.quaternion);
            let expected = g_corr.rotation.to_rotation_matrix().into_inner() * ra;
            assert!((expected - rb).norm() < 1e-9);
        }
    }

    #[test]
    fn covariance_from_known_cases() {
        let sigma = covariance_from(&[1.0, 0.0, 0.0, 0.0], &Vector3::new(1.0, 2.0, 3.0));
        assert!((sigma - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0))).norm() < 1e-15);

        let mut r = rng(12);
        for _ in 0..10 {
            let pose = random_pose(&mut r);
            let q = pose.rotation.into_inner();
            let iso = covariance_from(&[q.w, q.i, q.j, q.k], &Vector3::repeat(0.7));
            assert!((iso - Matrix3::identity() * 0.49).norm() < 1e-12);
        }
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut r = rng(13);
        for _ in 0..50 {
            let pose = random_pose(&mut r);
            let q = pose.rotation.into_inner();
            let s = Vector3::new(
                r.gen_range(0.1..2.0),
                r.gen_range(0.1..2.0),
                r.gen_range(0.1..2.0),
            );
            let sigma = covariance_from(&[q.w, q.i, q.j, q.k], &s);
            let mut eig: Vec<f64> = sigma.symmetric_eigenvalues().iter().copied().collect();
            let mut expect: Vec<f64> = s.iter().map(|v| v * v).collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (e, x) in eig.iter().zip(&expect) {
                assert_relative_eq!(e, x, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn rotation_matrix_jacobian_matches_finite_differences() {
        let mut r = rng(14);
        for _ in 0..20 {
            let q = [
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
            ];
            let jac = rotation_matrix_jacobian(&q);
            let h = 1e-6;
            for j in 0..4 {
                let mut qp = q;
                let mut qm = q;
                qp[j] += h;
                qm[j] -= h;
                let fd = (rotation_matrix(&qp) - rotation_matrix(&qm)) / (2.0 * h);
                assert!((fd - jac[j]).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_upstream_yields_zero_gradients() {
        let mut r = rng(15);
        let params = DecoderParams::init(5, &mut r);
        let anchor = Anchor::init(0, 0, Vector3::new(0.0, 0.0, 2.0), 0.05, 5, &mut r);
        let ctx = DecodeContext::new(&Pose::identity(), &Vector3::zeros());
        let decoded = decode_anchor(&anchor, &params, &ctx).unwrap();
        let mut dgrads = params.zero_grads();
        let agrads = decoded.backward(
            &anchor,
            &params,
            &ctx,
            &vec![GaussianGrad::zero(); 5],
            &mut dgrads,
        );
        assert!(agrads.flatten().iter().all(|g| *g == 0.0));
        assert!(dgrads.flatten().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn position_gradient_reaches_scaling_as_offset_product() {
        // d mu / d l = diag(O_m): a unit position gradient on Gaussian m must
        // land in the scaling gradient multiplied by that offset row.
        let mut r = rng(16);
        let mut params = DecoderParams::init(3, &mut r);
        params.opacity.b2.fill(0.5); // keep every Gaussian alive
        let anchor = Anchor::init(0, 0, Vector3::new(0.0, 0.0, 2.0), 0.05, 3, &mut r);
        let ctx = DecodeContext::new(&Pose::identity(), &Vector3::zeros());
        let decoded = decode_anchor(&anchor, &params, &ctx).unwrap();
        assert!(decoded.gaussians.iter().all(|g| !g.culled()));
        let mut upstream = vec![GaussianGrad::zero(); 3];
        upstream[1].position = Vector3::new(1.0, 1.0, 1.0);
        let mut dgrads = params.zero_grads();
        let agrads = decoded.backward(&anchor, &params, &ctx, &upstream, &mut dgrads);
        assert!((agrads.scaling - anchor.offsets[1]).norm() < 1e-12);
        assert!((agrads.offsets[1] - anchor.scaling).norm() < 1e-12);
        assert_eq!(agrads.offsets[0], Vector3::zeros());
    }

    #[test]
    fn culled_gaussian_only_propagates_opacity() {
        let mut r = rng(17);
        let mut params = DecoderParams::init(2, &mut r);
        // Force strongly negative opacity so both Gaussians are culled.
        params.opacity.b2.fill(-2.0);
        let anchor = Anchor::init(0, 0, Vector3::new(0.0, 0.0, 2.0), 0.05, 2, &mut r);
        let ctx = DecodeContext::new(&Pose::identity(), &Vector3::zeros());
        let decoded = decode_anchor(&anchor, &params, &ctx).unwrap();
        assert!(decoded.gaussians.iter().all(|g| g.culled()));
        let mut upstream = vec![GaussianGrad::zero(); 2];
        upstream[0].position = Vector3::new(1.0, 2.0, 3.0);
        upstream[0].color = [1.0, 1.0, 1.0];
        upstream[0].scale = Vector3::new(1.0, 1.0, 1.0);
        upstream[0].opacity = 1.0;
        let mut dgrads = params.zero_grads();
        let agrads = decoded.backward(&anchor, &params, &ctx, &upstream, &mut dgrads);
        // Geometry and appearance stay frozen for culled Gaussians.
        assert_eq!(agrads.scaling, Vector3::zeros());
        assert_eq!(agrads.offsets[0], Vector3::zeros());
        assert_eq!(agrads.base_scale, Vector3::zeros());
        assert!(dgrads.color.flatten().iter().all(|g| *g == 0.0));
        assert!(dgrads.covariance.flatten().iter().all(|g| *g == 0.0));
        // The opacity path stays open so the Gaussian can grow back.
        assert!(dgrads.opacity.flatten().iter().any(|g| *g != 0.0));
        assert!(agrads.feature.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn decoder_backward_matches_finite_differences() {
        let k = 4;
        let mut r = rng(18);
        let mut params = DecoderParams::init(k, &mut r);
        // Shrink weights and lift the opacity bias so every Gaussian stays
        // alive; the clamp at zero is non-differentiable across the cull.
        for mlp in [&mut params.opacity, &mut params.color, &mut params.covariance] {
            mlp.w1 *= 0.3;
            mlp.w2 *= 0.3;
        }
        params.opacity.b2.fill(0.5);
        let anchors = vec![
            Anchor::init(0, 0, Vector3::new(0.3, 0.1, 1.8), 0.05, k, &mut r),
            Anchor::init(1, 0, Vector3::new(-0.4, 0.25, 2.3), 0.05, k, &mut r),
        ];
        let submap_pose = random_pose(&mut r);
        let camera_world = submap_pose.transform_point(&Vector3::new(0.05, -0.1, -0.2));
        let ctx = DecodeContext::new(&submap_pose, &camera_world);

        // Random linear functional over every decoded attribute.
        let weights: Vec<Vec<GaussianGrad>> = (0..anchors.len())
            .map(|_| {
                (0..k)
                    .map(|_| GaussianGrad {
                        position: Vector3::new(
                            r.gen_range(-1.0..1.0),
                            r.gen_range(-1.0..1.0),
                            r.gen_range(-1.0..1.0),
                        ),
                        opacity: r.gen_range(-1.0..1.0),
                        quaternion: [
                            r.gen_range(-1.0..1.0),
                            r.gen_range(-1.0..1.0),
                            r.gen_range(-1.0..1.0),
                            r.gen_range(-1.0..1.0),
                        ],
                        scale: Vector3::new(
                            r.gen_range(-1.0..1.0),
                            r.gen_range(-1.0..1.0),
                            r.gen_range(-1.0..1.0),
                        ),
                        color: [
                            r.gen_range(-1.0..1.0),
                            r.gen_range(-1.0..1.0),
                            r.gen_range(-1.0..1.0),
                        ],
                    })
                    .collect()
            })
            .collect();

        let loss = |params: &DecoderParams, anchors: &[Anchor]| -> f64 {
            let mut total = 0.0;
            for (a, ws) in anchors.iter().zip(&weights) {
                let decoded = decode_anchor(a, params, &ctx).unwrap();
                assert!(decoded.gaussians.iter().all(|g| !g.culled()));
                for (g, w) in decoded.gaussians.iter().zip(ws) {
                    total += g.position.dot(&w.position)
                        + g.effective_opacity() * w.opacity
                        + g.scale.dot(&w.scale);
                    for j in 0..4 {
                        total += g.quaternion[j] * w.quaternion[j];
                    }
                    for c in 0..3 {
                        total += g.color[c] * w.color[c];
                    }
                }
            }
            total
        };

        // Analytic gradients.
        let mut dgrads = params.zero_grads();
        let mut agrad_flat: Vec<Vec<f64>> = Vec::new();
        for (a, ws) in anchors.iter().zip(&weights) {
            let decoded = decode_anchor(a, &params, &ctx).unwrap();
            let ag = decoded.backward(a, &params, &ctx, ws, &mut dgrads);
            agrad_flat.push(ag.flatten());
        }
        let dgrad_flat = dgrads.flatten();

        let h = 1e-5;
        let check = |name: &str, analytic: f64, fd: f64| {
            let tol = 1e-4 * fd.abs().max(analytic.abs()).max(1e-3);
            assert!(
                (analytic - fd).abs() <= tol.max(1e-7),
                "{name}: analytic {analytic} vs fd {fd}"
            );
        };

        // Decoder parameters.
        let base_flat = params.flatten();
        for i in 0..base_flat.len() {
            let mut p_plus = params.clone();
            let mut p_minus = params.clone();
            let mut fp = base_flat.clone();
            fp[i] += h;
            p_plus.assign_from_flat(&fp);
            fp[i] -= 2.0 * h;
            p_minus.assign_from_flat(&fp);
            let fd = (loss(&p_plus, &anchors) - loss(&p_minus, &anchors)) / (2.0 * h);
            check(&format!("decoder[{i}]"), dgrad_flat[i], fd);
        }

        // Anchor learnables.
        for (ai, anchor) in anchors.iter().enumerate() {
            let base = anchor.flatten();
            for i in 0..base.len() {
                let mut mod_anchors = anchors.clone();
                let mut fp = base.clone();
                fp[i] += h;
                mod_anchors[ai].assign_from_flat(&fp);
                let lp = loss(&params, &mod_anchors);
                fp[i] -= 2.0 * h;
                mod_anchors[ai].assign_from_flat(&fp);
                let lm = loss(&params, &mod_anchors);
                let fd = (lp - lm) / (2.0 * h);
                check(&format!("anchor{ai}[{i}]"), agrad_flat[ai][i], fd);
            }
        }
    }
}
