//! Multi-resolution spatial-hash voxel map. Each level hashes points into
//! cubic cells; cells keep original point coordinates (never voxel centers),
//! an optional anchor reference, and running opacity/gradient statistics that
//! drive anchor growing and pruning.

use std::io::Write;

use indexmap::IndexMap;
use nalgebra::Vector3;

use crate::{Error, Result};

/// Grid coordinates of one cell at one resolution level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VoxelKey {
    pub i: i64,
    pub j: i64,
    pub k: i64,
    pub level: usize,
}

/// Floor-convention grid coordinates: every point in the half-open cube
/// `[i*size, (i+1)*size)^3` maps to the same key.
pub fn voxel_key(p: &Vector3<f64>, size: f64, level: usize) -> VoxelKey {
    debug_assert!(size > 0.0);
    VoxelKey {
        i: (p.x / size).floor() as i64,
        j: (p.y / size).floor() as i64,
        k: (p.z / size).floor() as i64,
        level,
    }
}

/// Per-cell payload: retained map points plus the accumulators behind anchor
/// growing (gradient) and pruning (opacity).
#[derive(Debug, Clone, Default)]
pub struct VoxelCell {
    pub retained_points: Vec<Vector3<f64>>,
    pub anchor_id: Option<u64>,
    pub accumulated_opacity: f64,
    pub accumulated_gradient: f64,
    pub observation_count: usize,
}

impl VoxelCell {
    fn is_vacant(&self) -> bool {
        self.retained_points.is_empty() && self.anchor_id.is_none() && self.observation_count == 0
    }
}

/// Voxel sizes and camera-distance bands for each resolution level. Sizes
/// double per level; bands give the maximum camera distance served by a level.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionLadder {
    pub base_size: f64,
    pub num_levels: usize,
    pub distance_bands: Vec<f64>,
}

impl ResolutionLadder {
    pub fn new(base_size: f64, num_levels: usize, distance_bands: Vec<f64>) -> Result<Self> {
        if base_size <= 0.0 {
            return Err(Error::Config(format!("base voxel size {base_size} must be > 0")));
        }
        if num_levels == 0 {
            return Err(Error::Config("ladder needs at least one level".into()));
        }
        if distance_bands.len() != num_levels {
            return Err(Error::Config(format!(
                "{} distance bands for {} levels",
                distance_bands.len(),
                num_levels
            )));
        }
        if distance_bands.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("distance bands must be strictly increasing".into()));
        }
        Ok(ResolutionLadder {
            base_size,
            num_levels,
            distance_bands,
        })
    }

    /// Desk/room scale: 5 cm base voxels.
    pub fn indoor() -> Self {
        ResolutionLadder::new(0.05, 3, vec![2.0, 8.0, f64::INFINITY]).unwrap()
    }

    /// Street scale: 0.5 m base voxels.
    pub fn outdoor() -> Self {
        ResolutionLadder::new(0.5, 3, vec![2.0, 8.0, f64::INFINITY]).unwrap()
    }

    pub fn voxel_size(&self, level: usize) -> f64 {
        self.base_size * (1u64 << level) as f64
    }

    /// Smallest level whose distance band covers `camera_distance`; distances
    /// beyond the last band clamp to the coarsest level.
    pub fn level_for_distance(&self, camera_distance: f64) -> usize {
        for (level, band) in self.distance_bands.iter().enumerate() {
            if camera_distance <= *band {
                return level;
            }
        }
        self.num_levels - 1
    }

    /// Smallest level whose voxel size is >= `radius`, so a 27-cell search at
    /// that level is exhaustive within `radius`; clamps to the coarsest level.
    pub fn search_level_for_radius(&self, radius: f64) -> usize {
        for level in 0..self.num_levels {
            if self.voxel_size(level) >= radius {
                return level;
            }
        }
        self.num_levels - 1
    }
}

/// Voxel retained for a new anchor by [`VoxelMap::grow_anchors`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowSite {
    pub key: VoxelKey,
    pub center: Vector3<f64>,
}

/// Multi-level voxel hash map. Points are stored at every level so searches
/// can pick the level matching their radius or camera distance.
#[derive(Debug, Clone)]
pub struct VoxelMap {
    pub ladder: ResolutionLadder,
    levels: Vec<IndexMap<VoxelKey, VoxelCell>>,
    anchor_cells: IndexMap<u64, VoxelKey>,
}

impl VoxelMap {
    pub fn new(ladder: ResolutionLadder) -> Self {
        let levels = (0..ladder.num_levels).map(|_| IndexMap::new()).collect();
        VoxelMap {
            ladder,
            levels,
            anchor_cells: IndexMap::new(),
        }
    }

    pub fn num_cells(&self, level: usize) -> usize {
        self.levels[level].len()
    }

    pub fn num_points(&self, level: usize) -> usize {
        self.levels[level]
            .values()
            .map(|c| c.retained_points.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.iter().all(|m| m.is_empty())
    }

    pub fn cell(&self, key: &VoxelKey) -> Option<&VoxelCell> {
        self.levels[key.level].get(key)
    }

    pub fn voxel_center(&self, key: &VoxelKey) -> Vector3<f64> {
        let s = self.ladder.voxel_size(key.level);
        Vector3::new(
            (key.i as f64 + 0.5) * s,
            (key.j as f64 + 0.5) * s,
            (key.k as f64 + 0.5) * s,
        )
    }

    /// Inserts one batch at every level, retaining at most one new point per
    /// cell per call. Callers feed batches through [`double_downsample`] first.
    pub fn insert_points(&mut self, points: &[Vector3<f64>]) {
        for level in 0..self.ladder.num_levels {
            let size = self.ladder.voxel_size(level);
            let mut touched: IndexMap<VoxelKey, ()> = IndexMap::new();
            for p in points {
                let key = voxel_key(p, size, level);
                if touched.contains_key(&key) {
                    continue;
                }
                touched.insert(key, ());
                self.levels[level]
                    .entry(key)
                    .or_default()
                    .retained_points
                    .push(*p);
            }
        }
    }

    /// Removes an exact point coordinate from every level, dropping cells
    /// that end up carrying nothing.
    pub fn remove_point(&mut self, p: &Vector3<f64>) {
        for level in 0..self.ladder.num_levels {
            let size = self.ladder.voxel_size(level);
            let key = voxel_key(p, size, level);
            if let Some(cell) = self.levels[level].get_mut(&key) {
                cell.retained_points.retain(|q| q != p);
                if cell.is_vacant() {
                    self.levels[level].shift_remove(&key);
                }
            }
        }
    }

    /// Closest retained point to `query` within the 27-cell neighborhood at
    /// `level`, accepted only when strictly closer than `tau`. Ties resolve to
    /// the smallest lexicographic key, then first-inserted point, which is
    /// exactly the iteration order below.
    pub fn nearest_neighbor(
        &self,
        query: &Vector3<f64>,
        tau: f64,
        level: usize,
    ) -> Option<Vector3<f64>> {
        let size = self.ladder.voxel_size(level);
        let center = voxel_key(query, size, level);
        let mut best: Option<(f64, Vector3<f64>)> = None;
        for di in -1..=1i64 {
            for dj in -1..=1i64 {
                for dk in -1..=1i64 {
                    let key = VoxelKey {
                        i: center.i + di,
                        j: center.j + dj,
                        k: center.k + dk,
                        level,
                    };
                    let Some(cell) = self.levels[level].get(&key) else {
                        continue;
                    };
                    for p in &cell.retained_points {
                        let d = (p - query).norm();
                        if d < tau && best.map_or(true, |(bd, _)| d < bd) {
                            best = Some((d, *p));
                        }
                    }
                }
            }
        }
        best.map(|(_, p)| p)
    }

    /// Registers `anchor_id` as living in `key`'s cell (created when absent).
    pub fn set_anchor(&mut self, key: VoxelKey, anchor_id: u64) {
        let cell = self.levels[key.level].entry(key).or_default();
        cell.anchor_id = Some(anchor_id);
        self.anchor_cells.insert(anchor_id, key);
    }

    pub fn anchor_cell(&self, anchor_id: u64) -> Option<VoxelKey> {
        self.anchor_cells.get(&anchor_id).copied()
    }

    /// Drops the anchor back-reference (map points stay).
    pub fn remove_anchor(&mut self, anchor_id: u64) {
        if let Some(key) = self.anchor_cells.shift_remove(&anchor_id) {
            if let Some(cell) = self.levels[key.level].get_mut(&key) {
                cell.anchor_id = None;
                if cell.is_vacant() {
                    self.levels[key.level].shift_remove(&key);
                }
            }
        }
    }

    /// Folds one optimization step's aggregate into a cell: `opacity` is the
    /// summed opacity of the cell anchor's Gaussians this step, `gradient`
    /// the mean position-gradient magnitude of Gaussians inside the cell.
    /// Must be called at most once per cell per step so the window count stays
    /// meaningful. Creates the cell when absent so growth can reach new space.
    pub fn accumulate_cell(&mut self, key: VoxelKey, opacity: f64, gradient: f64) {
        let cell = self.levels[key.level].entry(key).or_default();
        cell.accumulated_opacity += opacity;
        cell.accumulated_gradient += gradient;
        cell.observation_count += 1;
    }

    /// Cells whose per-step mean gradient exceeds `tau_g` and which have no
    /// anchor yet become anchor sites at their voxel centers. All gradient
    /// accumulators at the level reset afterwards, starting a fresh window.
    ///
    /// Grow and prune form one refine boundary: call [`Self::prune_anchors`]
    /// right after this so the shared observation counter restarts together
    /// with the gradient window.
    pub fn grow_anchors(&mut self, level: usize, tau_g: f64) -> Vec<GrowSite> {
        let mut sites = Vec::new();
        let size = self.ladder.voxel_size(level);
        for (key, cell) in self.levels[level].iter_mut() {
            if cell.observation_count > 0 && cell.anchor_id.is_none() {
                let avg = cell.accumulated_gradient / cell.observation_count as f64;
                if avg > tau_g {
                    sites.push(GrowSite {
                        key: *key,
                        center: Vector3::new(
                            (key.i as f64 + 0.5) * size,
                            (key.j as f64 + 0.5) * size,
                            (key.k as f64 + 0.5) * size,
                        ),
                    });
                }
            }
            cell.accumulated_gradient = 0.0;
        }
        sites
    }

    /// Removes anchors whose windowed mean opacity fell below the threshold.
    /// Only cells with at least `window` observations are eligible; every
    /// eligible cell's opacity window restarts afterwards.
    pub fn prune_anchors(
        &mut self,
        level: usize,
        opacity_threshold: f64,
        window: usize,
    ) -> Vec<u64> {
        let mut removed = Vec::new();
        for cell in self.levels[level].values_mut() {
            if cell.observation_count < window.max(1) {
                continue;
            }
            if let Some(id) = cell.anchor_id {
                let mean = cell.accumulated_opacity / cell.observation_count as f64;
                if mean < opacity_threshold {
                    cell.anchor_id = None;
                    removed.push(id);
                }
            }
            cell.accumulated_opacity = 0.0;
            cell.observation_count = 0;
        }
        for id in &removed {
            self.anchor_cells.shift_remove(id);
        }
        removed
    }

    /// Iterates retained points at one level in insertion order.
    pub fn points(&self, level: usize) -> impl Iterator<Item = &Vector3<f64>> {
        self.levels[level]
            .values()
            .flat_map(|c| c.retained_points.iter())
    }

    /// Writes `level i j k n_points has_anchor` per occupied cell, sorted by
    /// (level, i, j, k) so dumps diff cleanly across runs.
    pub fn dump_debug(&self, out: &mut impl Write) -> std::io::Result<()> {
        for (level, cells) in self.levels.iter().enumerate() {
            let mut keys: Vec<&VoxelKey> = cells.keys().collect();
            keys.sort();
            for key in keys {
                let cell = &cells[key];
                writeln!(
                    out,
                    "{} {} {} {} {} {}",
                    level,
                    key.i,
                    key.j,
                    key.k,
                    cell.retained_points.len(),
                    u8::from(cell.anchor_id.is_some())
                )?;
            }
        }
        Ok(())
    }
}

/// Two-pass voxel downsampling: one retained point per `size_a` cell, then
/// one per `size_b` cell, always keeping the first-inserted original
/// coordinates. Output is a subset of the input.
pub fn double_downsample(
    points: &[Vector3<f64>],
    size_a: f64,
    size_b: f64,
) -> Vec<Vector3<f64>> {
    let first = downsample_pass(points.iter().copied(), size_a);
    downsample_pass(first.into_iter(), size_b)
}

fn downsample_pass(points: impl Iterator<Item = Vector3<f64>>, size: f64) -> Vec<Vector3<f64>> {
    let mut seen: IndexMap<VoxelKey, ()> = IndexMap::new();
    let mut out = Vec::new();
    for p in points {
        let key = voxel_key(&p, size, 0);
        if !seen.contains_key(&key) {
            seen.insert(key, ());
            out.push(p);
        }
    }
    out
}
