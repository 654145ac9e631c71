//! Progressive submap lifecycle: creation triggers, frame-to-submap
//! assignment, keyframe-driven anchor expansion, windowed optimization with
//! anchor grow/prune refinement, and activation-gated serialization so
//! dormant submaps can leave working memory entirely.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::field::{
    decode_anchor, spawn_positions, Anchor, AnchorGrads, DecodeContext, DecodedAnchor,
    DecoderGrads, DecoderParams, Mlp, NeuralGaussian, FEATURE_DIM,
};
use crate::geometry::{Intrinsics, Pose};
use crate::img::{ImageDepth, ImageRgb};
use crate::render::{
    mapping_loss_backward, render_backward, render_with_cache, volume_gradients, LossWeights,
    RenderTarget,
};
use crate::voxel::{voxel_key, ResolutionLadder, VoxelKey, VoxelMap};
use crate::{Error, Result};

/// Floor for anchor offset scaling and base scale so decoded Gaussian
/// extents stay strictly positive under optimization.
const MIN_EXTENT: f64 = 1e-4;

/// Axis-aligned bounding box; starts inverted (empty) and grows by points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn empty() -> Self {
        Aabb {
            min: Vector3::repeat(f64::INFINITY),
            max: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x
    }

    pub fn expand(&mut self, p: &Vector3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        !self.is_empty()
            && (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// One mapped frame: estimated pose plus the observations mapping trains on.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub frame_id: usize,
    /// Camera pose in the world frame, the same convention the renderer and
    /// tracker use throughout.
    pub world_from_camera: Pose,
    pub color: ImageRgb,
    pub depth: ImageDepth,
}

/// Submap creation and expansion thresholds.
#[derive(Debug, Clone)]
pub struct SubmapTriggerConfig {
    /// Translation from the anchor frame that starts a new submap, meters.
    pub distance: f64,
    /// Rotation from the anchor frame that starts a new submap, degrees.
    pub rotation_deg: f64,
    /// Every n-th frame becomes a keyframe.
    pub keyframe_interval: usize,
    /// Upper bound on expansion candidates sampled per keyframe.
    pub expansion_samples: usize,
    /// No new anchor within this radius of an existing Gaussian mean, meters.
    pub dedup_radius: f64,
    /// Pixels with accumulated alpha below this are under-reconstructed.
    pub alpha_threshold: f64,
    /// Rendered-vs-measured depth gap that marks a pixel for expansion, meters.
    pub depth_discrepancy: f64,
}

impl SubmapTriggerConfig {
    /// Desk/room scale: 0.5 m / 50 degree triggers on a 5 cm base voxel.
    pub fn indoor() -> Self {
        SubmapTriggerConfig {
            distance: 0.5,
            rotation_deg: 50.0,
            keyframe_interval: 5,
            expansion_samples: 2000,
            dedup_radius: 0.025,
            alpha_threshold: 0.5,
            depth_discrepancy: 0.25,
        }
    }

    /// Street scale: 10 m trigger on a 0.5 m base voxel.
    pub fn outdoor() -> Self {
        SubmapTriggerConfig {
            distance: 10.0,
            rotation_deg: 50.0,
            keyframe_interval: 5,
            expansion_samples: 2000,
            dedup_radius: 0.25,
            alpha_threshold: 0.5,
            depth_discrepancy: 2.5,
        }
    }
}

/// Per-submap optimization settings.
#[derive(Debug, Clone)]
pub struct MappingConfig {
    pub lr_anchor: f64,
    pub lr_decoder: f64,
    /// Grow/prune runs every this many iterations.
    pub refine_interval: usize,
    /// Mean per-step position-gradient magnitude above which a cell grows an
    /// anchor.
    pub tau_g: f64,
    /// Windowed mean opacity below which an anchor is pruned.
    pub prune_opacity: f64,
    /// Minimum accumulation steps before a cell is considered for pruning.
    pub prune_window: usize,
    pub weights: LossWeights,
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig {
            lr_anchor: 1e-2,
            lr_decoder: 2e-3,
            refine_interval: 50,
            tau_g: 1e-4,
            prune_opacity: 0.05,
            prune_window: 100,
            weights: LossWeights::default(),
        }
    }
}

/// What one [`Submap::optimize`] call did.
#[derive(Debug, Clone, Default)]
pub struct OptimizeReport {
    /// Loss of the parameters each iteration ended with; shorter than the
    /// requested iteration count when the call stopped early on stagnation.
    pub trace: Vec<f64>,
    pub grown: usize,
    pub pruned: usize,
    /// Times the learning rates were halved after a diverging step.
    pub lr_halvings: usize,
    /// Steps dropped for regressing past an already-achieved loss.
    pub rejected: usize,
}

/// All decoded Gaussians of a submap for one view, with the per-anchor
/// caches the backward pass needs.
pub struct SubmapDecode {
    pub gaussians: Vec<NeuralGaussian>,
    pub decoded: Vec<DecodedAnchor>,
    pub ctx: DecodeContext,
}

/// One progressive submap: a voxel-anchored neural Gaussian field plus the
/// optimizer state that trains it.
#[derive(Debug, Clone)]
pub struct Submap {
    pub id: u64,
    /// World pose of the submap frame (the first keyframe's camera-to-world).
    pub anchor_frame_pose: Pose,
    pub keyframe_ids: Vec<usize>,
    pub voxel_map: VoxelMap,
    pub anchors: Vec<Anchor>,
    pub decoder: DecoderParams,
    pub active: bool,
    pub bounds: Aabb,
    next_anchor_id: u64,
    /// Divergence-guard halvings so far; configured rates are scaled by
    /// `0.5^lr_halvings` and the discount outlives deactivation.
    lr_halvings: u64,
    current_lr_anchor: f64,
    anchor_opt: IndexMap<u64, Adam>,
    decoder_opt: Adam,
    rng: ChaCha8Rng,
}

impl Submap {
    pub fn new(id: u64, anchor_frame_pose: Pose, ladder: ResolutionLadder, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let decoder = DecoderParams::init(k, &mut rng);
        let decoder_opt = Adam::new(decoder.param_count(), MappingConfig::default().lr_decoder);
        Submap {
            id,
            anchor_frame_pose,
            keyframe_ids: Vec::new(),
            voxel_map: VoxelMap::new(ladder),
            anchors: Vec::new(),
            decoder,
            active: true,
            bounds: Aabb::empty(),
            next_anchor_id: 0,
            lr_halvings: 0,
            current_lr_anchor: MappingConfig::default().lr_anchor,
            anchor_opt: IndexMap::new(),
            decoder_opt,
            rng,
        }
    }

    pub fn k(&self) -> usize {
        self.decoder.k
    }

    /// Creates, registers, and returns a fresh anchor at `position` (world).
    pub fn add_anchor_at(&mut self, level: usize, position: Vector3<f64>) -> u64 {
        let id = self.next_anchor_id;
        self.next_anchor_id += 1;
        let size = self.voxel_map.ladder.voxel_size(level);
        let anchor = Anchor::init(id, level, position, size, self.decoder.k, &mut self.rng);
        let key = voxel_key(&position, size, level);
        self.voxel_map.set_anchor(key, id);
        self.anchor_opt
            .insert(id, Adam::new(anchor.param_count(), self.current_lr_anchor));
        self.bounds.expand(&position);
        self.anchors.push(anchor);
        id
    }

    /// Decodes every anchor for the camera at `world_from_camera`.
    pub fn decode(&self, world_from_camera: &Pose) -> Result<SubmapDecode> {
        if !self.active {
            return Err(Error::SubmapInactive(self.id));
        }
        let camera_world = world_from_camera.translation;
        let ctx = DecodeContext::new(&self.anchor_frame_pose, &camera_world);
        let mut gaussians = Vec::with_capacity(self.anchors.len() * self.decoder.k);
        let mut decoded = Vec::with_capacity(self.anchors.len());
        for anchor in &self.anchors {
            let d = decode_anchor(anchor, &self.decoder, &ctx)?;
            gaussians.extend_from_slice(&d.gaussians);
            decoded.push(d);
        }
        Ok(SubmapDecode {
            gaussians,
            decoded,
            ctx,
        })
    }

    /// Renders the submap from a camera pose. Errors when inactive.
    pub fn render_view(&self, world_from_camera: &Pose, intr: &Intrinsics) -> Result<RenderTarget> {
        let decode = self.decode(world_from_camera)?;
        Ok(crate::render::render(&decode.gaussians, world_from_camera, intr))
    }

    /// Spawns anchors for under-reconstructed or depth-inconsistent pixels of
    /// a keyframe. Candidates are back-projected, voxelized by camera
    /// distance, and each still-anchorless voxel receives one anchor unless an
    /// existing Gaussian mean lies within the dedup radius. Candidates are
    /// processed in scanline order so the result is order-stable.
    pub fn expand(
        &mut self,
        kf: &Keyframe,
        intr: &Intrinsics,
        cfg: &SubmapTriggerConfig,
    ) -> Result<Vec<u64>> {
        if !self.active {
            return Err(Error::SubmapInactive(self.id));
        }
        if kf.depth.valid_fraction() == 0.0 {
            return Err(Error::Invalid(format!(
                "keyframe {} has no valid depth; skipping expansion",
                kf.frame_id
            )));
        }
        let rendered = if self.anchors.is_empty() {
            None
        } else {
            Some(self.render_view(&kf.world_from_camera, intr)?)
        };

        let (w, h) = (kf.depth.width, kf.depth.height);
        let mut candidates = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let measured = kf.depth.at(x, y);
                if measured <= 0.0 {
                    continue;
                }
                let (alpha, rdepth) = match &rendered {
                    Some(r) => (r.alpha[y * w + x], r.depth.at(x, y)),
                    None => (0.0, 0.0),
                };
                if alpha < cfg.alpha_threshold
                    || (rdepth - measured).abs() > cfg.depth_discrepancy
                {
                    candidates.push((x, y, measured));
                }
            }
        }

        let chosen: Vec<usize> = if candidates.len() <= cfg.expansion_samples {
            (0..candidates.len()).collect()
        } else {
            let mut idx =
                rand::seq::index::sample(&mut self.rng, candidates.len(), cfg.expansion_samples)
                    .into_vec();
            idx.sort_unstable();
            idx
        };

        // Existing Gaussian means, accumulated as new anchors are accepted so
        // the dedup radius applies to this call's own spawns too.
        let mut means = VoxelMap::new(self.voxel_map.ladder.clone());
        for anchor in &self.anchors {
            for m in spawn_positions(anchor) {
                means.insert_points(&[m]);
            }
        }
        let search_level = means.ladder.search_level_for_radius(cfg.dedup_radius);
        let world_from_camera = kf.world_from_camera;

        let mut created = Vec::new();
        for ci in chosen {
            let (x, y, depth) = candidates[ci];
            let p_cam = intr.backproject(x as f64, y as f64, depth);
            let level = self.voxel_map.ladder.level_for_distance(p_cam.norm());
            let p_world = world_from_camera.transform_point(&p_cam);
            let size = self.voxel_map.ladder.voxel_size(level);
            let key = voxel_key(&p_world, size, level);
            let occupied = self
                .voxel_map
                .cell(&key)
                .map(|c| c.anchor_id.is_some())
                .unwrap_or(false);
            if occupied {
                continue;
            }
            if means
                .nearest_neighbor(&p_world, cfg.dedup_radius, search_level)
                .is_some()
            {
                continue;
            }
            let center = self.voxel_map.voxel_center(&key);
            let id = self.add_anchor_at(level, center);
            for m in spawn_positions(self.anchors.last().unwrap()) {
                means.insert_points(&[m]);
            }
            created.push(id);
        }

        if !self.keyframe_ids.contains(&kf.frame_id) {
            self.keyframe_ids.push(kf.frame_id);
        }
        Ok(created)
    }

    /// Runs up to `iterations` of adaptive-moment descent on the mapping loss
    /// over a round-robin keyframe window, refining anchors (grow/prune) at
    /// every refine-interval boundary. Effective learning rates are the
    /// configured ones scaled by `0.5^lr_halvings`. Two safeguards keep the
    /// recorded loss under control: a step whose loss exceeds 10x the first
    /// iteration's (or goes non-finite) is reverted and bumps the persistent
    /// halving count; a step whose loss merely regresses past the last
    /// accepted value for the same keyframe is reverted without touching the
    /// rates. The call returns early once progress stagnates, so the trace
    /// may be shorter than `iterations`. Each trace entry is the loss of the
    /// parameters as the iteration left them.
    pub fn optimize(
        &mut self,
        window: &[&Keyframe],
        intr: &Intrinsics,
        iterations: usize,
        cfg: &MappingConfig,
    ) -> Result<OptimizeReport> {
        if !self.active {
            return Err(Error::SubmapInactive(self.id));
        }
        if window.is_empty() {
            return Err(Error::Invalid("empty keyframe window".into()));
        }
        let discount = 0.5f64.powi(self.lr_halvings.min(i32::MAX as u64) as i32);
        self.current_lr_anchor = cfg.lr_anchor * discount;
        for opt in self.anchor_opt.values_mut() {
            opt.lr = self.current_lr_anchor;
        }
        self.decoder_opt.lr = cfg.lr_decoder * discount;

        // Iterations without meaningful improvement on any keyframe before
        // the call stops early; covers plateau oscillation at convergence.
        const STAGNATION_LIMIT: usize = 10;

        let mut report = OptimizeReport::default();
        let mut baseline = None;
        let mut prev_params: Option<(Vec<Vec<f64>>, Vec<f64>)> = None;
        let mut accepted: Vec<Option<f64>> = vec![None; window.len()];
        let mut stagnation = 0usize;
        let k = self.decoder.k;

        let mut it = 0;
        while it < iterations {
            let slot = it % window.len();
            let kf = window[slot];
            let decode = self.decode(&kf.world_from_camera)?;
            let (rendered, cache) =
                render_with_cache(&decode.gaussians, &kf.world_from_camera, intr);
            let (loss, image_grads) = mapping_loss_backward(
                &rendered,
                &kf.color,
                &kf.depth,
                &decode.gaussians,
                cfg.weights,
            );
            let base = *baseline.get_or_insert(loss.total);

            if !loss.total.is_finite() || loss.total > 10.0 * base {
                // Diverged: restore the pre-step parameters and halve rates.
                report.trace.push(accepted[slot].unwrap_or(loss.total));
                if let Some(snap) = prev_params.take() {
                    self.restore_params(&snap);
                }
                self.lr_halvings += 1;
                self.current_lr_anchor *= 0.5;
                for opt in self.anchor_opt.values_mut() {
                    opt.lr *= 0.5;
                }
                self.decoder_opt.lr *= 0.5;
                report.lr_halvings += 1;
                it += 1;
                continue;
            }

            if let Some(best) = accepted[slot] {
                if loss.total > best {
                    // Regressed on a frame it had already fit better: drop the
                    // step. The renderer is deterministic, so the restored
                    // parameters still score `best` on this keyframe.
                    report.trace.push(best);
                    report.rejected += 1;
                    if let Some(snap) = prev_params.take() {
                        self.restore_params(&snap);
                    }
                    stagnation += 1;
                    if stagnation >= STAGNATION_LIMIT {
                        break;
                    }
                    it += 1;
                    continue;
                }
                if loss.total < best * (1.0 - 1e-6) {
                    stagnation = 0;
                } else {
                    stagnation += 1;
                }
            } else {
                stagnation = 0;
            }
            accepted[slot] = Some(loss.total);
            report.trace.push(loss.total);
            if stagnation >= STAGNATION_LIMIT {
                break;
            }

            let back = render_backward(
                &decode.gaussians,
                &kf.world_from_camera,
                intr,
                &rendered,
                &cache,
                &image_grads,
            );
            let mut gauss_grads = back.gaussians;
            let vol = volume_gradients(&decode.gaussians, cfg.weights.lambda_vol);
            for (g, v) in gauss_grads.iter_mut().zip(&vol) {
                g.scale += v;
            }

            // Per-cell statistics: the anchor's summed Gaussian opacity feeds
            // pruning in its own cell; mean position-gradient magnitude feeds
            // growth in whatever cell each Gaussian landed in.
            let mut cell_acc: IndexMap<VoxelKey, (f64, f64, usize)> = IndexMap::new();
            for (i, anchor) in self.anchors.iter().enumerate() {
                let own = self
                    .voxel_map
                    .anchor_cell(anchor.id)
                    .expect("registered anchor has a cell");
                let op_sum: f64 = decode.gaussians[i * k..(i + 1) * k]
                    .iter()
                    .map(|g| g.effective_opacity())
                    .sum();
                cell_acc.entry(own).or_insert((0.0, 0.0, 0)).0 += op_sum;
                let size = self.voxel_map.ladder.voxel_size(anchor.level);
                for m in 0..k {
                    let j = i * k + m;
                    let gk = voxel_key(&decode.gaussians[j].position, size, anchor.level);
                    let e = cell_acc.entry(gk).or_insert((0.0, 0.0, 0));
                    e.1 += gauss_grads[j].position.norm();
                    e.2 += 1;
                }
            }
            for (key, (op, gsum, gcount)) in cell_acc {
                let mean_grad = if gcount > 0 { gsum / gcount as f64 } else { 0.0 };
                self.voxel_map.accumulate_cell(key, op, mean_grad);
            }

            prev_params = Some(self.snapshot_params());

            let mut decoder_grads = self.decoder.zero_grads();
            let mut anchor_grads = Vec::with_capacity(self.anchors.len());
            for (i, d) in decode.decoded.iter().enumerate() {
                anchor_grads.push(d.backward(
                    &self.anchors[i],
                    &self.decoder,
                    &decode.ctx,
                    &gauss_grads[i * k..(i + 1) * k],
                    &mut decoder_grads,
                ));
            }
            self.step_params(&anchor_grads, &decoder_grads);

            if cfg.refine_interval > 0 && (it + 1) % cfg.refine_interval == 0 {
                let (grown, pruned) = self.refine(cfg);
                if grown + pruned > 0 {
                    report.grown += grown;
                    report.pruned += pruned;
                    // The anchor set changed, so the pre-step snapshot and the
                    // per-keyframe accepted losses no longer describe the
                    // current model.
                    prev_params = None;
                    accepted.fill(None);
                    stagnation = 0;
                }
            }
            it += 1;
        }
        Ok(report)
    }

    /// One grow/prune boundary across all levels.
    fn refine(&mut self, cfg: &MappingConfig) -> (usize, usize) {
        let mut grown = 0;
        let mut removed = Vec::new();
        for level in 0..self.voxel_map.ladder.num_levels {
            for site in self.voxel_map.grow_anchors(level, cfg.tau_g) {
                self.add_anchor_at(level, site.center);
                grown += 1;
            }
            removed.extend(self.voxel_map.prune_anchors(
                level,
                cfg.prune_opacity,
                cfg.prune_window,
            ));
        }
        if !removed.is_empty() {
            self.anchors.retain(|a| !removed.contains(&a.id));
            for id in &removed {
                self.anchor_opt.shift_remove(id);
            }
        }
        (grown, removed.len())
    }

    /// Flat copies of every anchor's parameters plus the decoder's, in
    /// anchor order. Only valid for restoring over the same anchor set.
    pub(crate) fn snapshot_params(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        (
            self.anchors.iter().map(|a| a.flatten()).collect(),
            self.decoder.flatten(),
        )
    }

    pub(crate) fn restore_params(&mut self, snap: &(Vec<Vec<f64>>, Vec<f64>)) {
        for (a, p) in self.anchors.iter_mut().zip(&snap.0) {
            a.assign_from_flat(p);
        }
        self.decoder.assign_from_flat(&snap.1);
    }

    /// One optimizer step on every anchor and the decoder. `per_anchor`
    /// holds one gradient per anchor in anchor order; extents are clamped
    /// after the step so decoded Gaussians never collapse to zero volume.
    pub(crate) fn step_params(
        &mut self,
        per_anchor: &[AnchorGrads],
        decoder_grads: &DecoderGrads,
    ) {
        debug_assert_eq!(per_anchor.len(), self.anchors.len());
        for (anchor, grads) in self.anchors.iter_mut().zip(per_anchor) {
            let opt = self
                .anchor_opt
                .get_mut(&anchor.id)
                .expect("every anchor has optimizer state");
            let mut params = anchor.flatten();
            opt.step(&mut params, &grads.flatten());
            anchor.assign_from_flat(&params);
            for j in 0..3 {
                anchor.scaling[j] = anchor.scaling[j].max(MIN_EXTENT);
                anchor.base_scale[j] = anchor.base_scale[j].max(MIN_EXTENT);
            }
        }
        let mut dec_params = self.decoder.flatten();
        self.decoder_opt.step(&mut dec_params, &decoder_grads.flatten());
        self.decoder.assign_from_flat(&dec_params);
    }

    /// Drops and rebuilds the voxel hash from the current anchor set: every
    /// anchor re-registers its cell and re-seeds the map with its Gaussian
    /// spawn positions. Accumulated observation statistics and retained scan
    /// points are not carried over.
    pub(crate) fn rebuild_spatial_index(&mut self) {
        let mut voxel_map = VoxelMap::new(self.voxel_map.ladder.clone());
        for anchor in &self.anchors {
            let size = voxel_map.ladder.voxel_size(anchor.level);
            let key = voxel_key(&anchor.position, size, anchor.level);
            voxel_map.set_anchor(key, anchor.id);
            for m in spawn_positions(anchor) {
                voxel_map.insert_points(&[m]);
            }
        }
        self.voxel_map = voxel_map;
    }

    /// Bytes of parameter and map state currently held in memory.
    pub fn resident_parameter_bytes(&self) -> usize {
        let anchors: usize = self
            .anchors
            .iter()
            .map(|a| (a.param_count() + 3) * 8)
            .sum();
        let anchor_moments: usize = self.anchor_opt.values().map(|o| o.m.len() * 16).sum();
        let decoder = self.decoder.param_count() * 8;
        let decoder_moments = self.decoder_opt.m.len() * 16;
        let points: usize = (0..self.voxel_map.ladder.num_levels)
            .map(|l| self.voxel_map.num_points(l))
            .sum::<usize>()
            * 24;
        anchors + anchor_moments + decoder + decoder_moments + points
    }

    fn dir_in(&self, root: &Path) -> PathBuf {
        root.join(format!("submap_{}", self.id))
    }

    /// Serializes all learnable and optimizer state under
    /// `root/submap_<id>/` and drops it from memory. No-op when already
    /// inactive.
    pub fn deactivate(&mut self, root: &Path) -> Result<()> {
        if !self.active {
            return Ok(());
        }
        let dir = self.dir_in(root);
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        write_anchors_ply(&dir.join("anchors.ply"), &self.anchors, self.decoder.k)?;
        write_decoder_bin(
            &dir.join("decoder.bin"),
            &self.decoder,
            &self.decoder_opt,
            self.lr_halvings,
            self.current_lr_anchor,
            &self.anchors,
            &self.anchor_opt,
        )?;
        let meta = SubmapMeta::capture(self);
        let meta_path = dir.join("meta.json");
        let text = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::parse("meta.json", e.to_string()))?;
        fs::write(&meta_path, text).map_err(|e| Error::io(meta_path.display().to_string(), e))?;

        self.anchors = Vec::new();
        self.anchor_opt = IndexMap::new();
        self.decoder = placeholder_decoder(self.decoder.k);
        self.decoder_opt = Adam::new(0, self.decoder_opt.lr);
        self.voxel_map = VoxelMap::new(self.voxel_map.ladder.clone());
        self.active = false;
        Ok(())
    }

    /// Reloads the state serialized by [`Self::deactivate`]. The voxel map is
    /// rebuilt from anchor positions and spawned Gaussian means (scan points
    /// inserted before deactivation are not retained on disk).
    pub fn reactivate(&mut self, root: &Path) -> Result<()> {
        if self.active {
            return Ok(());
        }
        let dir = self.dir_in(root);
        *self = Submap::load(&dir)?;
        Ok(())
    }

    /// Reads a serialized submap directory written by [`Self::deactivate`].
    pub fn load(dir: &Path) -> Result<Submap> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path)
            .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
        let meta: SubmapMeta =
            serde_json::from_str(&text).map_err(|e| Error::parse("meta.json", e.to_string()))?;
        let anchors = read_anchors_ply(&dir.join("anchors.ply"), meta.k)?;
        if anchors.len() != meta.anchor_count {
            return Err(Error::parse(
                "anchors.ply",
                format!(
                    "anchor count {} does not match manifest {}",
                    anchors.len(),
                    meta.anchor_count
                ),
            ));
        }
        let (decoder, decoder_opt, lr_halvings, current_lr_anchor, anchor_opt) =
            read_decoder_bin(&dir.join("decoder.bin"), meta.k, &anchors)?;

        let bands = meta
            .ladder_bands
            .iter()
            .map(|b| b.unwrap_or(f64::INFINITY))
            .collect();
        let ladder = ResolutionLadder::new(meta.ladder_base_size, meta.ladder_num_levels, bands)?;

        let mut bounds = Aabb::empty();
        if let Some([min, max]) = meta.bounds {
            bounds.expand(&Vector3::new(min[0], min[1], min[2]));
            bounds.expand(&Vector3::new(max[0], max[1], max[2]));
        }
        let mut rng = ChaCha8Rng::from_seed(meta.rng_seed);
        rng.set_word_pos(
            ((meta.rng_word_pos_hi as u128) << 64) | meta.rng_word_pos_lo as u128,
        );

        let mut submap = Submap {
            id: meta.id,
            anchor_frame_pose: Pose::from_array(&meta.anchor_frame_pose),
            keyframe_ids: meta.keyframe_ids,
            voxel_map: VoxelMap::new(ladder),
            anchors,
            decoder,
            active: true,
            bounds,
            next_anchor_id: meta.next_anchor_id,
            lr_halvings,
            current_lr_anchor,
            anchor_opt,
            decoder_opt,
            rng,
        };
        submap.rebuild_spatial_index();
        Ok(submap)
    }
}

/// True when `current` has moved or turned past the submap thresholds
/// relative to the submap's anchor frame. Both poses are camera-to-world, so
/// the test is invariant under a global rigid transform of the trajectory.
pub fn should_create_submap(current: &Pose, anchor: &Pose, cfg: &SubmapTriggerConfig) -> bool {
    current.translation_distance_to(anchor) > cfg.distance
        || current.rotation_angle_to(anchor).to_degrees() > cfg.rotation_deg
}

/// Index of the submap whose anchor-frame position is closest to `pose`
/// (camera-to-world); ties keep the lowest id. Empty input yields `None`.
pub fn assign_frame(pose: &Pose, submaps: &[Submap]) -> Option<u64> {
    let mut best: Option<(f64, u64)> = None;
    for s in submaps {
        let d = pose.translation_distance_to(&s.anchor_frame_pose);
        let better = match best {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && s.id < bid),
        };
        if better {
            best = Some((d, s.id));
        }
    }
    best.map(|(_, id)| id)
}

/// Zero-size decoder standing in while a submap is deactivated.
fn placeholder_decoder(k: usize) -> DecoderParams {
    let empty = Mlp {
        w1: DMatrix::zeros(0, 0),
        b1: DVector::zeros(0),
        w2: DMatrix::zeros(0, 0),
        b2: DVector::zeros(0),
    };
    DecoderParams {
        k,
        opacity: empty.clone(),
        color: empty.clone(),
        covariance: empty,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SubmapMeta {
    id: u64,
    anchor_frame_pose: [f64; 7],
    keyframe_ids: Vec<usize>,
    /// `None` when no anchor has ever been added.
    bounds: Option<[[f64; 3]; 2]>,
    next_anchor_id: u64,
    k: usize,
    anchor_count: usize,
    ladder_base_size: f64,
    ladder_num_levels: usize,
    /// `None` encodes an unbounded final distance band.
    ladder_bands: Vec<Option<f64>>,
    rng_seed: [u8; 32],
    rng_word_pos_lo: u64,
    rng_word_pos_hi: u64,
}

impl SubmapMeta {
    fn capture(s: &Submap) -> SubmapMeta {
        let pos = s.rng.get_word_pos();
        SubmapMeta {
            id: s.id,
            anchor_frame_pose: s.anchor_frame_pose.to_array(),
            keyframe_ids: s.keyframe_ids.clone(),
            bounds: if s.bounds.is_empty() {
                None
            } else {
                Some([
                    [s.bounds.min.x, s.bounds.min.y, s.bounds.min.z],
                    [s.bounds.max.x, s.bounds.max.y, s.bounds.max.z],
                ])
            },
            next_anchor_id: s.next_anchor_id,
            k: s.decoder.k,
            anchor_count: s.anchors.len(),
            ladder_base_size: s.voxel_map.ladder.base_size,
            ladder_num_levels: s.voxel_map.ladder.num_levels,
            ladder_bands: s
                .voxel_map
                .ladder
                .distance_bands
                .iter()
                .map(|&b| if b.is_finite() { Some(b) } else { None })
                .collect(),
            rng_seed: s.rng.get_seed(),
            rng_word_pos_lo: pos as u64,
            rng_word_pos_hi: (pos >> 64) as u64,
        }
    }
}

fn ply_property_names(k: usize) -> Vec<String> {
    let mut names = vec!["x".into(), "y".into(), "z".into()];
    for i in 0..FEATURE_DIM {
        names.push(format!("f_{i}"));
    }
    names.extend(["l_x".into(), "l_y".into(), "l_z".into()]);
    for m in 0..k {
        for axis in ["x", "y", "z"] {
            names.push(format!("off{m}_{axis}"));
        }
    }
    names.extend(["sv_x".into(), "sv_y".into(), "sv_z".into()]);
    names
}

/// Binary little-endian PLY with one `anchor` element per anchor: position,
/// feature, offset scaling, offsets, base scale as doubles, then id and level
/// as uints. Header comments record k and the format version.
fn write_anchors_ply(path: &Path, anchors: &[Anchor], k: usize) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);

    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str("comment format_version 1\n");
    header.push_str(&format!("comment k {k}\n"));
    header.push_str(&format!("element anchor {}\n", anchors.len()));
    for name in ply_property_names(k) {
        header.push_str(&format!("property double {name}\n"));
    }
    header.push_str("property uint id\nproperty uint level\nend_header\n");
    w.write_all(header.as_bytes()).map_err(io_err)?;

    for a in anchors {
        debug_assert_eq!(a.k(), k);
        for v in [a.position.x, a.position.y, a.position.z] {
            w.write_f64::<LittleEndian>(v).map_err(io_err)?;
        }
        for v in a.feature.iter() {
            w.write_f64::<LittleEndian>(*v).map_err(io_err)?;
        }
        for v in [a.scaling.x, a.scaling.y, a.scaling.z] {
            w.write_f64::<LittleEndian>(v).map_err(io_err)?;
        }
        for o in &a.offsets {
            for v in [o.x, o.y, o.z] {
                w.write_f64::<LittleEndian>(v).map_err(io_err)?;
            }
        }
        for v in [a.base_scale.x, a.base_scale.y, a.base_scale.z] {
            w.write_f64::<LittleEndian>(v).map_err(io_err)?;
        }
        w.write_u32::<LittleEndian>(u32::try_from(a.id).expect("anchor id fits u32"))
            .map_err(io_err)?;
        w.write_u32::<LittleEndian>(a.level as u32).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn read_anchors_ply(path: &Path, k: usize) -> Result<Vec<Anchor>> {
    let data = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let ctx = || path.display().to_string();
    let header_end = data
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| Error::parse(ctx(), "missing end_header"))?
        + 11;
    let header = std::str::from_utf8(&data[..header_end])
        .map_err(|_| Error::parse(ctx(), "non-utf8 header"))?;

    let mut count = None;
    let mut props = Vec::new();
    let mut file_k = None;
    for line in header.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                if parts.next() != Some("binary_little_endian") {
                    return Err(Error::parse(ctx(), "expected binary_little_endian"));
                }
            }
            Some("comment") => {
                if parts.next() == Some("k") {
                    file_k = parts.next().and_then(|v| v.parse::<usize>().ok());
                }
            }
            Some("element") => {
                if parts.next() != Some("anchor") {
                    return Err(Error::parse(ctx(), "expected a single anchor element"));
                }
                count = parts.next().and_then(|v| v.parse::<usize>().ok());
            }
            Some("property") => {
                let ty = parts.next().unwrap_or("");
                let name = parts.next().unwrap_or("");
                props.push((ty.to_string(), name.to_string()));
            }
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::parse(ctx(), "missing anchor element"))?;
    let file_k = file_k.ok_or_else(|| Error::parse(ctx(), "missing k comment"))?;
    if file_k != k {
        return Err(Error::parse(
            ctx(),
            format!("k mismatch: file {file_k}, manifest {k}"),
        ));
    }
    let mut expected: Vec<(String, String)> = ply_property_names(k)
        .into_iter()
        .map(|n| ("double".to_string(), n))
        .collect();
    expected.push(("uint".into(), "id".into()));
    expected.push(("uint".into(), "level".into()));
    if props != expected {
        return Err(Error::parse(ctx(), "unexpected property layout"));
    }

    let doubles = 3 + FEATURE_DIM + 3 + 3 * k + 3;
    let stride = doubles * 8 + 8;
    let payload = &data[header_end..];
    if payload.len() != count * stride {
        return Err(Error::parse(
            ctx(),
            format!("payload size {} != {}", payload.len(), count * stride),
        ));
    }

    let mut anchors = Vec::with_capacity(count);
    let mut cursor = payload;
    for _ in 0..count {
        let mut vals = vec![0.0f64; doubles];
        for v in vals.iter_mut() {
            *v = cursor.read_f64::<LittleEndian>().map_err(|e| Error::io(ctx(), e))?;
        }
        let id = cursor.read_u32::<LittleEndian>().map_err(|e| Error::io(ctx(), e))? as u64;
        let level = cursor.read_u32::<LittleEndian>().map_err(|e| Error::io(ctx(), e))? as usize;

        let position = Vector3::new(vals[0], vals[1], vals[2]);
        let feature = DVector::from_iterator(FEATURE_DIM, vals[3..3 + FEATURE_DIM].iter().copied());
        let base = 3 + FEATURE_DIM;
        let scaling = Vector3::new(vals[base], vals[base + 1], vals[base + 2]);
        let mut offsets = Vec::with_capacity(k);
        for m in 0..k {
            let o = base + 3 + 3 * m;
            offsets.push(Vector3::new(vals[o], vals[o + 1], vals[o + 2]));
        }
        let sv = base + 3 + 3 * k;
        let base_scale = Vector3::new(vals[sv], vals[sv + 1], vals[sv + 2]);
        anchors.push(Anchor {
            id,
            level,
            position,
            feature,
            scaling,
            offsets,
            base_scale,
        });
    }
    Ok(anchors)
}

const DECODER_MAGIC: &[u8; 4] = b"VPGS";
const DECODER_VERSION: u32 = 1;

/// Versioned little-endian blob: decoder parameters, decoder optimizer state,
/// the current anchor learning rate, and per-anchor optimizer moments in
/// anchor order.
fn write_decoder_bin(
    path: &Path,
    decoder: &DecoderParams,
    decoder_opt: &Adam,
    lr_halvings: u64,
    current_lr_anchor: f64,
    anchors: &[Anchor],
    anchor_opt: &IndexMap<u64, Adam>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);

    w.write_all(DECODER_MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(DECODER_VERSION).map_err(io_err)?;
    w.write_u32::<LittleEndian>(decoder.k as u32).map_err(io_err)?;

    let params = decoder.flatten();
    w.write_u64::<LittleEndian>(params.len() as u64).map_err(io_err)?;
    for v in &params {
        w.write_f64::<LittleEndian>(*v).map_err(io_err)?;
    }
    w.write_f64::<LittleEndian>(decoder_opt.lr).map_err(io_err)?;
    w.write_u64::<LittleEndian>(decoder_opt.t).map_err(io_err)?;
    for v in decoder_opt.m.iter().chain(decoder_opt.v.iter()) {
        w.write_f64::<LittleEndian>(*v).map_err(io_err)?;
    }

    w.write_u64::<LittleEndian>(lr_halvings).map_err(io_err)?;
    w.write_f64::<LittleEndian>(current_lr_anchor).map_err(io_err)?;
    w.write_u64::<LittleEndian>(anchors.len() as u64).map_err(io_err)?;
    for a in anchors {
        let opt = &anchor_opt[&a.id];
        w.write_u64::<LittleEndian>(a.id).map_err(io_err)?;
        w.write_u64::<LittleEndian>(opt.m.len() as u64).map_err(io_err)?;
        w.write_f64::<LittleEndian>(opt.lr).map_err(io_err)?;
        w.write_u64::<LittleEndian>(opt.t).map_err(io_err)?;
        for v in opt.m.iter().chain(opt.v.iter()) {
            w.write_f64::<LittleEndian>(*v).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

type DecoderBlob = (DecoderParams, Adam, u64, f64, IndexMap<u64, Adam>);

fn read_decoder_bin(path: &Path, k: usize, anchors: &[Anchor]) -> Result<DecoderBlob> {
    let data = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let ctx = || path.display().to_string();
    let mut r = &data[..];
    let io_err = |e| Error::io(ctx(), e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != DECODER_MAGIC {
        return Err(Error::parse(ctx(), "bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != DECODER_VERSION {
        return Err(Error::parse(ctx(), format!("unsupported version {version}")));
    }
    let file_k = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    if file_k != k {
        return Err(Error::parse(ctx(), format!("k mismatch: {file_k} vs {k}")));
    }

    let n = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut decoder = DecoderParams::init(k, &mut rng);
    if decoder.param_count() != n {
        return Err(Error::parse(
            ctx(),
            format!("decoder size {n} != expected {}", decoder.param_count()),
        ));
    }
    let mut params = vec![0.0f64; n];
    for v in params.iter_mut() {
        *v = r.read_f64::<LittleEndian>().map_err(io_err)?;
    }
    decoder.assign_from_flat(&params);

    let mut decoder_opt = Adam::new(n, r.read_f64::<LittleEndian>().map_err(io_err)?);
    decoder_opt.t = r.read_u64::<LittleEndian>().map_err(io_err)?;
    for v in decoder_opt.m.iter_mut() {
        *v = r.read_f64::<LittleEndian>().map_err(io_err)?;
    }
    for v in decoder_opt.v.iter_mut() {
        *v = r.read_f64::<LittleEndian>().map_err(io_err)?;
    }

    let lr_halvings = r.read_u64::<LittleEndian>().map_err(io_err)?;
    let current_lr_anchor = r.read_f64::<LittleEndian>().map_err(io_err)?;
    let n_anchors = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    if n_anchors != anchors.len() {
        return Err(Error::parse(
            ctx(),
            format!("optimizer count {n_anchors} != anchors {}", anchors.len()),
        ));
    }
    let mut anchor_opt = IndexMap::with_capacity(n_anchors);
    for a in anchors {
        let id = r.read_u64::<LittleEndian>().map_err(io_err)?;
        if id != a.id {
            return Err(Error::parse(ctx(), "optimizer state out of order"));
        }
        let dim = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        if dim != a.param_count() {
            return Err(Error::parse(ctx(), "optimizer dimension mismatch"));
        }
        let mut opt = Adam::new(dim, r.read_f64::<LittleEndian>().map_err(io_err)?);
        opt.t = r.read_u64::<LittleEndian>().map_err(io_err)?;
        for v in opt.m.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(io_err)?;
        }
        for v in opt.v.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(io_err)?;
        }
        anchor_opt.insert(id, opt);
    }
    Ok((decoder, decoder_opt, lr_halvings, current_lr_anchor, anchor_opt))
}
