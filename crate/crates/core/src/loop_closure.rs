//! Loop closure: compact place-recognition descriptors with a persistent
//! database, geometric loop verification through the tracking stack,
//! pose-graph optimization with robust loop edges, rigid correction
//! propagation into submaps, and distillation-based submap fusion.
//!
//! All poses follow the crate convention: a pose maps its local frame into
//! the world (camera poses are `world_from_camera`, graph nodes are
//! `world_from_node`), and edge measurements are `from_from_to` relatives.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};

use crate::field::{AnchorGrads, NeuralGaussian};
use crate::geometry::{skew, Intrinsics, Pose, Twist};
use crate::img::ImageRgb;
use crate::render::{
    mapping_loss_backward, render, render_backward, render_with_cache, volume_gradients,
    ImageGrads, LossWeights, RenderTarget,
};
use crate::submap::{Keyframe, Submap};
use crate::tracker::{
    adapt_sigma, assess_2d_quality, coarse_track, fine_track_icp, gather_correspondences,
    TrackStage, TrackerConfig, TrackingState,
};
use crate::{Error, Result};

/// Descriptor length: an 8x8 grid of per-channel mean intensities plus a
/// 64-bin gradient-orientation histogram.
pub const DESCRIPTOR_DIM: usize = DESCRIPTOR_GRID * DESCRIPTOR_GRID * 3 + ORIENTATION_BINS;
const DESCRIPTOR_GRID: usize = 8;
const ORIENTATION_BINS: usize = 64;
const DATABASE_MAGIC: &[u8; 4] = b"VPGD";

/// Detection and verification thresholds.
#[derive(Debug, Clone)]
pub struct LoopConfig {
    /// Minimum descriptor cosine similarity for a detection.
    pub sim_threshold: f64,
    /// The most recently inserted database entries are never candidates.
    pub exclusion_window: usize,
    /// Minimum correspondences a verified loop must retain.
    pub min_inliers: usize,
    /// Correspondence radius for the wide first ICP pass, meters; the tight
    /// second pass reuses the tracker's own radius.
    pub wide_tau: f64,
    /// Floor on the mean residual when scaling edge information, so exact
    /// revisits do not produce unbounded weights.
    pub residual_floor: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            sim_threshold: 0.92,
            exclusion_window: 30,
            min_inliers: 50,
            wide_tau: 0.6,
            residual_floor: 1e-3,
        }
    }
}

/// Unit-norm place signature for one keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub frame_id: u64,
    pub submap_id: u64,
    pub vector: DVector<f64>,
}

/// Grid of mean-removed cell intensities concatenated with a
/// magnitude-weighted gradient-orientation histogram, L2-normalized.
/// Removing the per-channel mean makes the grid block invariant to global
/// brightness offsets; normalization handles global gain. A featureless
/// frame (zero after mean removal, no gradients) falls back to the uniform
/// unit vector so the norm invariant always holds.
pub fn compute_descriptor(frame_id: u64, submap_id: u64, color: &ImageRgb) -> GlobalDescriptor {
    let (w, h) = (color.width, color.height);
    let g = DESCRIPTOR_GRID;
    let mut sums = vec![[0.0f64; 3]; g * g];
    let mut counts = vec![0usize; g * g];
    for y in 0..h {
        let cy = (y * g / h).min(g - 1);
        for x in 0..w {
            let cx = (x * g / w).min(g - 1);
            let px = color.data[y * w + x];
            for ch in 0..3 {
                sums[cy * g + cx][ch] += px[ch];
            }
            counts[cy * g + cx] += 1;
        }
    }
    let mut means = vec![[0.0f64; 3]; g * g];
    let mut channel_mean = [0.0f64; 3];
    for (cell, (s, n)) in means.iter_mut().zip(sums.iter().zip(&counts)) {
        for ch in 0..3 {
            cell[ch] = if *n > 0 { s[ch] / *n as f64 } else { 0.0 };
            channel_mean[ch] += cell[ch] / (g * g) as f64;
        }
    }

    let mut v = DVector::zeros(DESCRIPTOR_DIM);
    for (i, cell) in means.iter().enumerate() {
        for ch in 0..3 {
            v[i * 3 + ch] = cell[ch] - channel_mean[ch];
        }
    }

    let luma = |x: usize, y: usize| -> f64 {
        let p = color.data[y * w + x];
        (p[0] + p[1] + p[2]) / 3.0
    };
    let hist_base = g * g * 3;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let gx = luma(x + 1, y) - luma(x - 1, y);
            let gy = luma(x, y + 1) - luma(x, y - 1);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag > 0.0 {
                let theta = gy.atan2(gx);
                let bin = (((theta + PI) / (2.0 * PI)) * ORIENTATION_BINS as f64) as usize;
                v[hist_base + bin.min(ORIENTATION_BINS - 1)] += mag;
            }
        }
    }

    let norm = v.norm();
    if norm < 1e-12 {
        v.fill(1.0 / (DESCRIPTOR_DIM as f64).sqrt());
    } else {
        v /= norm;
    }
    GlobalDescriptor {
        frame_id,
        submap_id,
        vector: v,
    }
}

/// Dot product of two unit descriptors; mismatched lengths score zero.
pub fn cosine_similarity(a: &GlobalDescriptor, b: &GlobalDescriptor) -> f64 {
    if a.vector.len() != b.vector.len() {
        return 0.0;
    }
    a.vector.dot(&b.vector)
}

/// Append-only store of keyframe descriptors in insertion (time) order.
#[derive(Debug, Clone, Default)]
pub struct DescriptorDatabase {
    entries: Vec<GlobalDescriptor>,
}

impl DescriptorDatabase {
    pub fn new() -> Self {
        DescriptorDatabase::default()
    }

    pub fn insert(&mut self, descriptor: GlobalDescriptor) {
        self.entries.push(descriptor);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[GlobalDescriptor] {
        &self.entries
    }

    /// Binary dump: magic, descriptor length, row count, then per row the
    /// frame id, submap id, and the vector, all little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dim = self
            .entries
            .first()
            .map_or(DESCRIPTOR_DIM, |d| d.vector.len());
        if let Some(bad) = self.entries.iter().find(|d| d.vector.len() != dim) {
            return Err(Error::Invalid(format!(
                "descriptor for frame {} has length {}, database uses {}",
                bad.frame_id,
                bad.vector.len(),
                dim
            )));
        }
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut out = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
        out.write_all(DATABASE_MAGIC).map_err(io_err)?;
        out.write_u32::<LittleEndian>(dim as u32).map_err(io_err)?;
        out.write_u64::<LittleEndian>(self.entries.len() as u64)
            .map_err(io_err)?;
        for d in &self.entries {
            out.write_u64::<LittleEndian>(d.frame_id).map_err(io_err)?;
            out.write_u64::<LittleEndian>(d.submap_id).map_err(io_err)?;
            for v in d.vector.iter() {
                out.write_f64::<LittleEndian>(*v).map_err(io_err)?;
            }
        }
        out.flush().map_err(io_err)
    }

    /// Strict reader for [`DescriptorDatabase::save`]'s format; every row
    /// must be unit-norm within 1e-6.
    pub fn load(path: &Path) -> Result<DescriptorDatabase> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut input = BufReader::new(file);
        let context = path.display().to_string();
        let io_err = |e: std::io::Error| Error::parse(context.clone(), e.to_string());
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(io_err)?;
        if &magic != DATABASE_MAGIC {
            return Err(Error::parse(context, "bad magic, not a descriptor database"));
        }
        let dim = input.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let count = input.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        if dim == 0 {
            return Err(Error::parse(context, "descriptor length is zero"));
        }
        let mut entries = Vec::with_capacity(count);
        for row in 0..count {
            let frame_id = input.read_u64::<LittleEndian>().map_err(io_err)?;
            let submap_id = input.read_u64::<LittleEndian>().map_err(io_err)?;
            let mut vector = DVector::zeros(dim);
            for v in vector.iter_mut() {
                *v = input.read_f64::<LittleEndian>().map_err(io_err)?;
            }
            let norm = vector.norm();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::parse(
                    context,
                    format!("row {row} has norm {norm}, expected unit"),
                ));
            }
            entries.push(GlobalDescriptor {
                frame_id,
                submap_id,
                vector,
            });
        }
        Ok(DescriptorDatabase { entries })
    }
}

/// Best database match for a query descriptor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopCandidate {
    pub frame_id: u64,
    pub submap_id: u64,
    pub similarity: f64,
}

/// Highest-similarity entry from a different submap, ignoring the most
/// recent `exclusion_window` insertions; `None` when nothing clears
/// `sim_threshold`. Ties keep the earliest entry.
pub fn detect_loop(
    query: &GlobalDescriptor,
    database: &DescriptorDatabase,
    sim_threshold: f64,
    exclusion_window: usize,
) -> Option<LoopCandidate> {
    let eligible = database.entries.len().saturating_sub(exclusion_window);
    let mut best: Option<LoopCandidate> = None;
    for entry in &database.entries[..eligible] {
        if entry.submap_id == query.submap_id {
            continue;
        }
        let similarity = cosine_similarity(query, entry);
        if similarity >= sim_threshold && best.is_none_or(|b| similarity > b.similarity) {
            best = Some(LoopCandidate {
                frame_id: entry.frame_id,
                submap_id: entry.submap_id,
                similarity,
            });
        }
    }
    best
}

/// Verified loop constraint between two keyframes.
#[derive(Debug, Clone)]
pub struct LoopMeasurement {
    /// Relative pose `candidate_from_query`, measured against the
    /// candidate submap's geometry.
    pub relative: Pose,
    /// Diagonal information from the final inlier statistics.
    pub information: Matrix6<f64>,
    pub inliers: usize,
    pub mean_residual: f64,
    /// 2D quality score at the geometric estimate; the photometric
    /// refinement only ran when this cleared the tracker's zeta.
    pub quality: f64,
}

/// Geometric and photometric verification of a detected loop.
///
/// Runs ICP between the query scan (sensor frame) and the candidate
/// submap's voxel map in two passes: a wide-radius pass to cover the
/// accumulated drift, then the tracker's own radius. When the rendered
/// preview at the geometric estimate scores above the quality gate, the
/// photometric stage refines further. Returns `None` when too few
/// correspondences survive or the mean residual is out of statistical
/// range; reactivation failures propagate as errors so the caller can
/// discard the candidate.
#[allow(clippy::too_many_arguments)]
pub fn verify_and_measure(
    query: &Keyframe,
    query_scan: &[Vector3<f64>],
    candidate_pose: &Pose,
    submap: &mut Submap,
    storage_root: Option<&Path>,
    intr: &Intrinsics,
    tracker: &TrackerConfig,
    cfg: &LoopConfig,
) -> Result<Option<LoopMeasurement>> {
    if !submap.active {
        let root = storage_root.ok_or(Error::SubmapInactive(submap.id))?;
        submap.reactivate(root)?;
    }

    let wide_tau = cfg.wide_tau.max(tracker.tau_t);
    let wide = TrackerConfig {
        tau_t: wide_tau,
        search_level: submap.voxel_map.ladder.search_level_for_radius(wide_tau),
        ..tracker.clone()
    };
    let mut wide_state = TrackingState::new(wide.tau_t);
    let coarse_fit = fine_track_icp(
        query_scan,
        &submap.voxel_map,
        &query.world_from_camera,
        &mut wide_state,
        &wide,
    );
    if wide_state.diagnostics.stage == TrackStage::Lost {
        return Ok(None);
    }
    let mut tight_state = TrackingState::new(tracker.tau_t);
    let tight_fit = fine_track_icp(
        query_scan,
        &submap.voxel_map,
        &coarse_fit,
        &mut tight_state,
        tracker,
    );
    if tight_state.diagnostics.stage == TrackStage::Lost {
        return Ok(None);
    }

    let decode = submap.decode(&tight_fit)?;
    let preview = render(&decode.gaussians, &tight_fit, intr);
    let quality = assess_2d_quality(&query.color, &query.depth, &preview, tracker.gradient_normalizer);
    let refined = if quality >= tracker.zeta {
        coarse_track(
            &query.color,
            &query.depth,
            &decode.gaussians,
            intr,
            &tight_fit,
            tracker,
        )
    } else {
        tight_fit
    };

    let corr = gather_correspondences(
        query_scan,
        &submap.voxel_map,
        &refined,
        tracker.tau_t,
        tracker.search_level,
    );
    let inliers = corr.pairs.len();
    let residuals: Vec<f64> = corr.pairs.iter().map(|&(_, _, d)| d).collect();
    let mean_residual = if residuals.is_empty() {
        f64::INFINITY
    } else {
        residuals.iter().sum::<f64>() / residuals.len() as f64
    };
    let mut stats = TrackingState::new(tracker.tau_t);
    let sigma = adapt_sigma(&mut stats, &residuals);
    if inliers < cfg.min_inliers || mean_residual > 3.0 * sigma.sqrt() {
        return Ok(None);
    }

    Ok(Some(LoopMeasurement {
        relative: candidate_pose.inverse().compose(&refined),
        information: loop_information(inliers, mean_residual, cfg.residual_floor),
        inliers,
        mean_residual,
        quality,
    }))
}

/// Fixed weight of odometry edges, rotation block.
pub const ODOMETRY_ROTATION_INFO: f64 = 100.0;
/// Fixed weight of odometry edges, translation block.
pub const ODOMETRY_TRANSLATION_INFO: f64 = 400.0;

/// Diagonal information for an odometry edge.
pub fn odometry_information() -> Matrix6<f64> {
    block_diagonal(ODOMETRY_ROTATION_INFO, ODOMETRY_TRANSLATION_INFO)
}

/// Diagonal information for a verified loop edge: scaled by the inlier
/// count over the mean residual, keeping the odometry rotation/translation
/// anisotropy.
pub fn loop_information(inliers: usize, mean_residual: f64, residual_floor: f64) -> Matrix6<f64> {
    let base = inliers as f64 / mean_residual.max(residual_floor);
    block_diagonal(base, 4.0 * base)
}

fn block_diagonal(rotation: f64, translation: f64) -> Matrix6<f64> {
    Matrix6::from_diagonal(&Vector6::new(
        rotation,
        rotation,
        rotation,
        translation,
        translation,
        translation,
    ))
}

/// Edge class: odometry edges define connectivity and stay quadratic; loop
/// edges carry the robust kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    Loop,
}

/// One graph node: its current pose estimate and, for submap anchor-frame
/// nodes, the submap it rigidly carries.
#[derive(Debug, Clone)]
pub struct GraphNode {
    pub pose: Pose,
    pub submap_id: Option<u64>,
}

/// Relative-pose constraint `measurement ~ from.inverse() ∘ to`.
#[derive(Debug, Clone)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    pub measurement: Pose,
    pub information: Matrix6<f64>,
    pub kind: EdgeKind,
}

/// Pose graph over submap anchor frames and loop-endpoint keyframes.
#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    nodes: Vec<GraphNode>,
    edges: Vec<GraphEdge>,
}

impl PoseGraph {
    pub fn new() -> Self {
        PoseGraph::default()
    }

    pub fn add_node(&mut self, pose: Pose, submap_id: Option<u64>) -> usize {
        self.nodes.push(GraphNode { pose, submap_id });
        self.nodes.len() - 1
    }

    pub fn add_edge(
        &mut self,
        from: usize,
        to: usize,
        measurement: Pose,
        information: Matrix6<f64>,
        kind: EdgeKind,
    ) -> Result<usize> {
        if from >= self.nodes.len() || to >= self.nodes.len() {
            return Err(Error::Invalid(format!(
                "edge {from} -> {to} references a missing node (graph has {})",
                self.nodes.len()
            )));
        }
        self.edges.push(GraphEdge {
            from,
            to,
            measurement,
            information,
            kind,
        });
        Ok(self.edges.len() - 1)
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    /// Text dump in the g2o vertex/edge dialect: poses as
    /// `tx ty tz qx qy qz qw`, information as the 21 upper-triangular
    /// entries in row-major order.
    pub fn write_g2o(&self, out: &mut impl Write) -> std::io::Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let p = node.pose.to_array();
            writeln!(
                out,
                "VERTEX_SE3:QUAT {i} {} {} {} {} {} {} {}",
                p[0], p[1], p[2], p[3], p[4], p[5], p[6]
            )?;
        }
        for e in &self.edges {
            let p = e.measurement.to_array();
            write!(
                out,
                "EDGE_SE3:QUAT {} {} {} {} {} {} {} {} {}",
                e.from, e.to, p[0], p[1], p[2], p[3], p[4], p[5], p[6]
            )?;
            for r in 0..6 {
                for c in r..6 {
                    write!(out, " {}", e.information[(r, c)])?;
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn to_g2o_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_g2o(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("g2o dump is ASCII")
    }

    /// Connected components under odometry edges only, each sorted.
    fn odometry_components(&self) -> Vec<Vec<usize>> {
        let n = self.nodes.len();
        let mut adjacency = vec![Vec::new(); n];
        for e in &self.edges {
            if e.kind == EdgeKind::Odometry {
                adjacency[e.from].push(e.to);
                adjacency[e.to].push(e.from);
            }
        }
        let mut component = vec![usize::MAX; n];
        let mut components = Vec::new();
        for start in 0..n {
            if component[start] != usize::MAX {
                continue;
            }
            let id = components.len();
            let mut members = vec![start];
            component[start] = id;
            let mut queue = vec![start];
            while let Some(u) = queue.pop() {
                for &v in &adjacency[u] {
                    if component[v] == usize::MAX {
                        component[v] = id;
                        members.push(v);
                        queue.push(v);
                    }
                }
            }
            members.sort_unstable();
            components.push(members);
        }
        components
    }
}

/// Rigid correction for one submap, applied on the world side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correction {
    pub submap_id: u64,
    pub transform: Pose,
}

/// Result of one pose-graph solve.
#[derive(Debug, Clone)]
pub struct PgoOutcome {
    /// Optimized pose per node, in node order.
    pub poses: Vec<Pose>,
    /// `optimized ∘ inverse(original)` for every submap anchor node.
    pub corrections: Vec<Correction>,
    /// Robust objective at the start and after each accepted step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// Group adjoint of a pose on `(omega, v)` twists:
/// `T ∘ exp(xi) ∘ T⁻¹ = exp(adjoint(T) · xi)`.
pub fn adjoint(pose: &Pose) -> Matrix6<f64> {
    let r = pose.rotation.to_rotation_matrix().into_inner();
    let tr = skew(&pose.translation) * r;
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&tr);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    out
}

/// Lie-algebra adjoint of a twist on `(omega, v)` ordering.
fn twist_ad(e: &Twist) -> Matrix6<f64> {
    let so = skew(&e.omega);
    let sv = skew(&e.v);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&so);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&sv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&so);
    out
}

/// Inverse left Jacobian of SE(3), truncated at second order; exact enough
/// for the small edge errors a converging graph produces.
fn inverse_left_jacobian(e: &Twist) -> Matrix6<f64> {
    let ad = twist_ad(e);
    Matrix6::identity() - 0.5 * ad + (ad * ad) / 12.0
}

fn edge_error(edge: &GraphEdge, from: &Pose, to: &Pose) -> Twist {
    edge.measurement
        .inverse()
        .compose(&from.inverse())
        .compose(to)
        .log()
}

/// Geman-McClure scale on the squared Mahalanobis norm of loop edges.
const LOOP_KERNEL: f64 = 1.0;
const PGO_MAX_ITERATIONS: usize = 100;
const PGO_CONVERGENCE: f64 = 1e-8;
const PGO_MAX_HALVINGS: usize = 12;

fn robust_edge_cost(kind: EdgeKind, squared: f64) -> f64 {
    match kind {
        EdgeKind::Odometry => squared,
        EdgeKind::Loop => LOOP_KERNEL * squared / (LOOP_KERNEL + squared),
    }
}

fn robust_edge_weight(kind: EdgeKind, squared: f64) -> f64 {
    match kind {
        EdgeKind::Odometry => 1.0,
        EdgeKind::Loop => {
            let r = LOOP_KERNEL / (LOOP_KERNEL + squared);
            r * r
        }
    }
}

fn graph_objective(graph: &PoseGraph, poses: &[Pose]) -> f64 {
    graph
        .edges
        .iter()
        .map(|e| {
            let err = edge_error(e, &poses[e.from], &poses[e.to]).to_vector();
            robust_edge_cost(e.kind, err.dot(&(e.information * err)))
        })
        .sum()
}

fn solve_damped(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let mut lambda = 0.0f64;
    for _ in 0..12 {
        let trial = if lambda == 0.0 {
            h.clone()
        } else {
            h.clone() + DMatrix::identity(h.nrows(), h.ncols()) * lambda
        };
        if let Some(ch) = trial.cholesky() {
            return Ok(ch.solve(rhs));
        }
        lambda = if lambda == 0.0 { 1e-9 } else { lambda * 100.0 };
    }
    Err(Error::Invalid(
        "pose-graph normal equations stayed singular under damping".into(),
    ))
}

/// Gauss-Newton on left-perturbed node twists minimizing the robust sum of
/// edge errors `log(measurement⁻¹ ∘ from⁻¹ ∘ to)`. The first node is the
/// gauge and never moves. Steps are halved until the objective does not
/// increase, so the reported trace is non-increasing; the solve stops when
/// the applied update drops below 1e-8 or after 100 iterations.
pub fn optimize_pose_graph(graph: &PoseGraph) -> Result<PgoOutcome> {
    if graph.nodes.is_empty() {
        return Err(Error::Invalid("pose graph has no nodes".into()));
    }
    let components = graph.odometry_components();
    if components.len() > 1 {
        return Err(Error::DisconnectedGraph(components));
    }

    let mut poses: Vec<Pose> = graph.nodes.iter().map(|n| n.pose).collect();
    let n = poses.len();
    let mut objective = vec![graph_objective(graph, &poses)];
    let mut iterations = 0;

    let dim = 6 * (n - 1);
    while iterations < PGO_MAX_ITERATIONS && dim > 0 {
        iterations += 1;
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        let add_block = |h: &mut DMatrix<f64>, row: usize, col: usize, m: &Matrix6<f64>| {
            let (r0, c0) = (6 * (row - 1), 6 * (col - 1));
            for i in 0..6 {
                for j in 0..6 {
                    h[(r0 + i, c0 + j)] += m[(i, j)];
                }
            }
        };
        for e in &graph.edges {
            let err = edge_error(e, &poses[e.from], &poses[e.to]);
            let ev = err.to_vector();
            let squared = ev.dot(&(e.information * ev));
            let w = robust_edge_weight(e.kind, squared);
            // Left perturbation x <- exp(d) ∘ x gives, to first order,
            // err' = err + J * (d_to - d_from) with J the inverse left
            // Jacobian times the adjoint of measurement⁻¹ ∘ from⁻¹.
            let j = inverse_left_jacobian(&err)
                * adjoint(&e.measurement.inverse().compose(&poses[e.from].inverse()));
            let jt_lam = j.transpose() * (w * e.information);
            let jt_lam_j = jt_lam * j;
            let jt_lam_e = jt_lam * ev;
            if e.from > 0 {
                add_block(&mut h, e.from, e.from, &jt_lam_j);
                for i in 0..6 {
                    g[6 * (e.from - 1) + i] -= jt_lam_e[i];
                }
            }
            if e.to > 0 {
                add_block(&mut h, e.to, e.to, &jt_lam_j);
                for i in 0..6 {
                    g[6 * (e.to - 1) + i] += jt_lam_e[i];
                }
            }
            if e.from > 0 && e.to > 0 {
                let off = -jt_lam_j;
                add_block(&mut h, e.from, e.to, &off);
                add_block(&mut h, e.to, e.from, &off);
            }
        }

        let delta = solve_damped(&h, &(-g))?;
        let current = *objective.last().expect("trace starts non-empty");
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..PGO_MAX_HALVINGS {
            let mut candidate = poses.clone();
            for (i, pose) in candidate.iter_mut().enumerate().skip(1) {
                let xi = Vector6::from_fn(|r, _| delta[6 * (i - 1) + r] * step);
                *pose = Pose::exp(&Twist::from_vector(&xi)).compose(pose);
            }
            let obj = graph_objective(graph, &candidate);
            if obj <= current {
                poses = candidate;
                objective.push(obj);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || delta.norm() * step < PGO_CONVERGENCE {
            break;
        }
    }

    let corrections = graph
        .nodes
        .iter()
        .enumerate()
        .filter_map(|(i, node)| {
            node.submap_id.map(|submap_id| Correction {
                submap_id,
                transform: poses[i].compose(&graph.nodes[i].pose.inverse()),
            })
        })
        .collect();
    Ok(PgoOutcome {
        poses,
        corrections,
        objective,
        iterations,
    })
}

/// Applies per-submap rigid corrections everywhere pose state lives: each
/// corrected submap's anchor frame and anchor positions move with the
/// correction (decoded Gaussian rotations inherit it through the anchor
/// frame), the spatial hash is rebuilt from the moved anchors, and keyframe
/// and trajectory poses are left-composed through `frame_submap`, the
/// per-frame submap assignment. Every corrected submap must be resident.
pub fn apply_corrections(
    corrections: &[Correction],
    submaps: &mut [Submap],
    keyframes: &mut [Keyframe],
    trajectory: &mut [Pose],
    frame_submap: &[u64],
) -> Result<()> {
    if trajectory.len() != frame_submap.len() {
        return Err(Error::Invalid(format!(
            "{} trajectory poses but {} frame assignments",
            trajectory.len(),
            frame_submap.len()
        )));
    }
    let mut by_submap: IndexMap<u64, Pose> = IndexMap::new();
    for c in corrections {
        by_submap.insert(c.submap_id, c.transform);
    }
    for id in by_submap.keys() {
        let submap = submaps
            .iter()
            .find(|s| s.id == *id)
            .ok_or_else(|| Error::Invalid(format!("correction for unknown submap {id}")))?;
        if !submap.active {
            return Err(Error::SubmapInactive(*id));
        }
    }

    for submap in submaps.iter_mut() {
        let Some(correction) = by_submap.get(&submap.id) else {
            continue;
        };
        submap.anchor_frame_pose = correction.compose(&submap.anchor_frame_pose);
        let mut bounds = crate::submap::Aabb::empty();
        for anchor in &mut submap.anchors {
            anchor.position = correction.transform_point(&anchor.position);
            bounds.expand(&anchor.position);
        }
        submap.bounds = bounds;
        submap.rebuild_spatial_index();
    }

    for kf in keyframes.iter_mut() {
        let Some(assigned) = frame_submap.get(kf.frame_id) else {
            return Err(Error::Invalid(format!(
                "keyframe {} has no frame assignment",
                kf.frame_id
            )));
        };
        if let Some(correction) = by_submap.get(assigned) {
            kf.world_from_camera = correction.compose(&kf.world_from_camera);
        }
    }
    for (pose, assigned) in trajectory.iter_mut().zip(frame_submap) {
        if let Some(correction) = by_submap.get(assigned) {
            *pose = correction.compose(pose);
        }
    }
    Ok(())
}

/// Keyframe pair judged to observe the same region of two submaps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapPair {
    pub frame_a: u64,
    pub frame_b: u64,
    pub similarity: f64,
}

/// Mutually-best descriptor pairs between two submaps' keyframes with
/// similarity at or above `sim_threshold`, in `a` order. Ties keep the
/// earliest index on both sides.
pub fn find_overlap_pairs(
    a: &[GlobalDescriptor],
    b: &[GlobalDescriptor],
    sim_threshold: f64,
) -> Vec<OverlapPair> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let best_in = |query: &GlobalDescriptor, pool: &[GlobalDescriptor]| -> (usize, f64) {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (j, cand) in pool.iter().enumerate() {
            let s = cosine_similarity(query, cand);
            if s > best.1 {
                best = (j, s);
            }
        }
        best
    };
    let best_b: Vec<(usize, f64)> = a.iter().map(|d| best_in(d, b)).collect();
    let best_a: Vec<(usize, f64)> = b.iter().map(|d| best_in(d, a)).collect();
    let mut pairs = Vec::new();
    for (i, &(j, sim)) in best_b.iter().enumerate() {
        if sim >= sim_threshold && best_a[j].0 == i {
            pairs.push(OverlapPair {
                frame_a: a[i].frame_id,
                frame_b: b[j].frame_id,
                similarity: sim,
            });
        }
    }
    pairs
}

/// Distillation settings. The mapping term is a light regularizer keeping
/// each submap honest against its own observations while the distillation
/// term pulls the two renders together; its weight must stay well below the
/// distillation gradients or the submaps pin to their observations.
#[derive(Debug, Clone)]
pub struct FusionConfig {
    pub mapping_weight: f64,
    pub weights: LossWeights,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mapping_weight: 0.02,
            weights: LossWeights::default(),
        }
    }
}

/// Outcome of one fusion run.
#[derive(Debug, Clone, Default)]
pub struct FusionReport {
    /// Accepted distillation loss per iteration, non-increasing.
    pub trace: Vec<f64>,
    /// Set when no overlap pairs were given; nothing was optimized.
    pub no_overlap: bool,
    /// Steps rejected and rolled back for regressing the distillation loss.
    pub rejected: usize,
}

/// Mean squared color difference over all pixels and channels plus mean
/// squared depth difference over pixels both renders cover, with the image
/// gradients of the symmetric loss accumulated into both submaps' buffers.
fn distill_terms(
    ra: &RenderTarget,
    rb: &RenderTarget,
    poses: usize,
    ga: &mut ImageGrads,
    gb: &mut ImageGrads,
) -> f64 {
    let px = ra.color.data.len();
    let mut color_sum = 0.0;
    let cw = 1.0 / (poses as f64 * px as f64 * 3.0);
    for p in 0..px {
        for c in 0..3 {
            let diff = ra.color.data[p][c] - rb.color.data[p][c];
            color_sum += diff * diff;
            ga.color[p][c] += 2.0 * diff * cw;
            gb.color[p][c] -= 2.0 * diff * cw;
        }
    }
    let covered: Vec<usize> = (0..px)
        .filter(|&p| ra.alpha[p] > 0.5 && rb.alpha[p] > 0.5)
        .collect();
    let mut depth_sum = 0.0;
    if !covered.is_empty() {
        let dw = 1.0 / (poses as f64 * covered.len() as f64);
        for &p in &covered {
            let diff = ra.depth.data[p] - rb.depth.data[p];
            depth_sum += diff * diff;
            ga.depth[p] += 2.0 * diff * dw;
            gb.depth[p] -= 2.0 * diff * dw;
        }
        depth_sum /= covered.len() as f64;
    }
    (color_sum / (px as f64 * 3.0) + depth_sum) / poses as f64
}

fn add_scaled_grads(dst: &mut ImageGrads, src: &ImageGrads, scale: f64) {
    for (d, s) in dst.color.iter_mut().zip(&src.color) {
        for c in 0..3 {
            d[c] += scale * s[c];
        }
    }
    for (d, s) in dst.depth.iter_mut().zip(&src.depth) {
        *d += scale * s;
    }
    for (d, s) in dst.alpha.iter_mut().zip(&src.alpha) {
        *d += scale * s;
    }
}

fn add_anchor_grads(dst: &mut AnchorGrads, src: &AnchorGrads) {
    dst.feature += &src.feature;
    dst.scaling += src.scaling;
    for (d, s) in dst.offsets.iter_mut().zip(&src.offsets) {
        *d += s;
    }
    dst.base_scale += src.base_scale;
}

/// Joint distillation of two submaps over their overlap keyframes.
///
/// Every distinct keyframe pose named by `pairs` renders both submaps; the
/// distillation loss is the mean color and covered-depth discrepancy across
/// those poses. Each submap additionally descends its own mapping loss on
/// its side of the pairs, scaled by the fusion mapping weight. Steps that
/// raise the distillation loss are rolled back on both submaps, so the
/// returned trace is non-increasing; ten straight rollbacks or stalls end
/// the run early.
pub fn fuse_submaps(
    a: &mut Submap,
    b: &mut Submap,
    pairs: &[OverlapPair],
    keyframes: &IndexMap<u64, Keyframe>,
    intr: &Intrinsics,
    iterations: usize,
    cfg: &FusionConfig,
) -> Result<FusionReport> {
    for submap in [&*a, &*b] {
        if !submap.active {
            return Err(Error::SubmapInactive(submap.id));
        }
    }
    let mut report = FusionReport::default();
    if pairs.is_empty() {
        report.no_overlap = true;
        return Ok(report);
    }

    let mut pose_frames: Vec<u64> = Vec::new();
    let mut own_a: Vec<u64> = Vec::new();
    let mut own_b: Vec<u64> = Vec::new();
    for p in pairs {
        for frame in [p.frame_a, p.frame_b] {
            if !pose_frames.contains(&frame) {
                pose_frames.push(frame);
            }
        }
        if !own_a.contains(&p.frame_a) {
            own_a.push(p.frame_a);
        }
        if !own_b.contains(&p.frame_b) {
            own_b.push(p.frame_b);
        }
    }
    for f in &pose_frames {
        if !keyframes.contains_key(f) {
            return Err(Error::Invalid(format!("overlap keyframe {f} not provided")));
        }
    }
    let m = pose_frames.len();

    const STAGNATION_LIMIT: usize = 10;
    let mut best: Option<f64> = None;
    let mut prev: Option<((Vec<Vec<f64>>, Vec<f64>), (Vec<Vec<f64>>, Vec<f64>))> = None;
    let mut stagnation = 0usize;

    let mut it = 0;
    while it < iterations {
        let mut dec_grads_a = a.decoder.zero_grads();
        let mut dec_grads_b = b.decoder.zero_grads();
        let mut acc_a: Vec<AnchorGrads> =
            a.anchors.iter().map(|_| AnchorGrads::zero(a.k())).collect();
        let mut acc_b: Vec<AnchorGrads> =
            b.anchors.iter().map(|_| AnchorGrads::zero(b.k())).collect();
        let mut distill = 0.0;

        for frame in &pose_frames {
            let kf = &keyframes[frame];
            let pose = kf.world_from_camera;
            let da = a.decode(&pose)?;
            let db = b.decode(&pose)?;
            let (ra, cache_a) = render_with_cache(&da.gaussians, &pose, intr);
            let (rb, cache_b) = render_with_cache(&db.gaussians, &pose, intr);

            let mut ga = ImageGrads::zeros(intr.width, intr.height);
            let mut gb = ImageGrads::zeros(intr.width, intr.height);
            distill += distill_terms(&ra, &rb, m, &mut ga, &mut gb);

            let mapping =
                |gauss: &[NeuralGaussian], rendered: &RenderTarget, grads: &mut ImageGrads| {
                    let (_, mg) =
                        mapping_loss_backward(rendered, &kf.color, &kf.depth, gauss, cfg.weights);
                    add_scaled_grads(grads, &mg, cfg.mapping_weight);
                };
            let own_frame_a = cfg.mapping_weight > 0.0 && own_a.contains(frame);
            let own_frame_b = cfg.mapping_weight > 0.0 && own_b.contains(frame);
            if own_frame_a {
                mapping(&da.gaussians, &ra, &mut ga);
            }
            if own_frame_b {
                mapping(&db.gaussians, &rb, &mut gb);
            }

            let back_a = render_backward(&da.gaussians, &pose, intr, &ra, &cache_a, &ga);
            let mut gauss_a = back_a.gaussians;
            if own_frame_a {
                let vol =
                    volume_gradients(&da.gaussians, cfg.mapping_weight * cfg.weights.lambda_vol);
                for (g, v) in gauss_a.iter_mut().zip(&vol) {
                    g.scale += v;
                }
            }
            let ka = a.k();
            for (i, d) in da.decoded.iter().enumerate() {
                let g = d.backward(
                    &a.anchors[i],
                    &a.decoder,
                    &da.ctx,
                    &gauss_a[i * ka..(i + 1) * ka],
                    &mut dec_grads_a,
                );
                add_anchor_grads(&mut acc_a[i], &g);
            }

            let back_b = render_backward(&db.gaussians, &pose, intr, &rb, &cache_b, &gb);
            let mut gauss_b = back_b.gaussians;
            if own_frame_b {
                let vol =
                    volume_gradients(&db.gaussians, cfg.mapping_weight * cfg.weights.lambda_vol);
                for (g, v) in gauss_b.iter_mut().zip(&vol) {
                    g.scale += v;
                }
            }
            let kb = b.k();
            for (i, d) in db.decoded.iter().enumerate() {
                let g = d.backward(
                    &b.anchors[i],
                    &b.decoder,
                    &db.ctx,
                    &gauss_b[i * kb..(i + 1) * kb],
                    &mut dec_grads_b,
                );
                add_anchor_grads(&mut acc_b[i], &g);
            }
        }

        if let Some(bst) = best {
            if distill > bst {
                report.trace.push(bst);
                report.rejected += 1;
                if let Some((snap_a, snap_b)) = prev.take() {
                    a.restore_params(&snap_a);
                    b.restore_params(&snap_b);
                }
                stagnation += 1;
                if stagnation >= STAGNATION_LIMIT {
                    break;
                }
                it += 1;
                continue;
            }
            if distill < bst * (1.0 - 1e-6) {
                stagnation = 0;
            } else {
                stagnation += 1;
            }
        } else {
            stagnation = 0;
        }
        best = Some(distill);
        report.trace.push(distill);
        if stagnation >= STAGNATION_LIMIT {
            break;
        }

        prev = Some((a.snapshot_params(), b.snapshot_params()));
        a.step_params(&acc_a, &dec_grads_a);
        b.step_params(&acc_b, &dec_grads_b);
        it += 1;
    }
    Ok(report)
}
