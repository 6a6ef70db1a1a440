//! Sagittal mirroring and the voxel filter that keeps only mirrored points
//! filling geometry the original view could not see.
//!
//! Both clouds are quantized with half-open cubic voxels
//! (`floor(coord / voxel_size)`). A mirrored point is removed when
//!
//! * **adjacency**: an original point occupies a voxel within
//!   `neighborhood_radius` (Chebyshev distance) of the mirrored point's voxel;
//! * **occlusion**: in the mirrored point's `(x, y)` voxel column the largest
//!   original `z` exceeds the mirrored point's `z + z_margin`, i.e. the
//!   mirrored point would sit in front of original geometry along +z.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{GridPointCloud, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelFilterConfig {
    /// Voxel edge length; `None` uses 1.5x the median nearest-neighbor
    /// spacing of the original cloud.
    pub voxel_size: Option<f64>,
    /// Chebyshev radius of the adjacency neighborhood, in voxels.
    pub neighborhood_radius: u32,
    /// Occlusion margin; `None` uses half the voxel size.
    pub z_margin: Option<f64>,
}

impl Default for VoxelFilterConfig {
    fn default() -> Self {
        Self {
            voxel_size: None,
            neighborhood_radius: 1,
            z_margin: None,
        }
    }
}

/// Filter parameters after defaults have been resolved against a cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelParams {
    pub voxel_size: f64,
    pub neighborhood_radius: u32,
    pub z_margin: f64,
}

impl VoxelFilterConfig {
    pub fn resolve(&self, original: &GridPointCloud) -> Result<VoxelParams> {
        let voxel_size = match self.voxel_size {
            Some(v) => v,
            None => 1.5 * median_nn_spacing(&original.iter_valid().map(|(_, p)| p).collect::<Vec<_>>())?,
        };
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::invalid(format!("voxel size must be positive, got {voxel_size}")));
        }
        let z_margin = self.z_margin.unwrap_or(0.5 * voxel_size);
        if !(z_margin >= 0.0) {
            return Err(Error::invalid("z margin must be nonnegative"));
        }
        Ok(VoxelParams {
            voxel_size,
            neighborhood_radius: self.neighborhood_radius,
            z_margin,
        })
    }
}

pub type VoxelIndex = [i64; 3];

#[inline]
pub fn voxel_index(p: &Vec3, size: f64) -> VoxelIndex {
    [
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    ]
}

/// Reflects every valid point across the x = 0 plane; cell layout and
/// validity are unchanged.
pub fn mirror_x(cloud: &GridPointCloud) -> GridPointCloud {
    let mut out = cloud.clone();
    for (cell, p) in cloud.iter_valid() {
        out.set(cell, Vec3::new(-p.x, p.y, p.z));
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub voxel_size: f64,
    pub z_margin: f64,
    pub mirrored_in: usize,
    /// Removed by the adjacency rule (checked first).
    pub removed_adjacent: usize,
    /// Removed by the occlusion rule only.
    pub removed_occluding: usize,
    pub survivors: usize,
    /// Set when the original cloud was empty and nothing was filtered.
    pub empty_original: bool,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub cloud: GridPointCloud,
    pub report: FilterReport,
}

/// Why a mirrored point was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Removal {
    Adjacent,
    Occluding,
}

/// Hash-grid view of the original cloud.
pub struct VoxelGrid {
    params: VoxelParams,
    occupied: HashSet<VoxelIndex>,
    column_max_z: HashMap<[i64; 2], f64>,
}

impl VoxelGrid {
    pub fn build(points: impl IntoIterator<Item = Vec3>, params: VoxelParams) -> Self {
        let mut occupied = HashSet::new();
        let mut column_max_z: HashMap<[i64; 2], f64> = HashMap::new();
        for p in points {
            let v = voxel_index(&p, params.voxel_size);
            occupied.insert(v);
            column_max_z
                .entry([v[0], v[1]])
                .and_modify(|z| *z = z.max(p.z))
                .or_insert(p.z);
        }
        Self {
            params,
            occupied,
            column_max_z,
        }
    }

    pub fn classify(&self, p: &Vec3) -> Option<Removal> {
        let v = voxel_index(p, self.params.voxel_size);
        let r = self.params.neighborhood_radius as i64;
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if self.occupied.contains(&[v[0] + dx, v[1] + dy, v[2] + dz]) {
                        return Some(Removal::Adjacent);
                    }
                }
            }
        }
        match self.column_max_z.get(&[v[0], v[1]]) {
            Some(&zmax) if zmax > p.z + self.params.z_margin => Some(Removal::Occluding),
            _ => None,
        }
    }
}

/// Removes mirrored points that overlap or occlude `original`.
pub fn voxel_filter(original: &GridPointCloud, mirrored: &GridPointCloud, cfg: &VoxelFilterConfig) -> Result<FilterOutcome> {
    let mirrored_in = mirrored.valid_count();
    if original.valid_count() == 0 {
        log::warn!("voxel filter: original cloud is empty, mirrored cloud passes unchanged");
        return Ok(FilterOutcome {
            cloud: mirrored.clone(),
            report: FilterReport {
                mirrored_in,
                survivors: mirrored_in,
                empty_original: true,
                ..Default::default()
            },
        });
    }
    let params = cfg.resolve(original)?;
    let grid = VoxelGrid::build(original.iter_valid().map(|(_, p)| p), params);
    let mut out = mirrored.clone();
    let mut report = FilterReport {
        voxel_size: params.voxel_size,
        z_margin: params.z_margin,
        mirrored_in,
        ..Default::default()
    };
    for (cell, p) in mirrored.iter_valid() {
        match grid.classify(&p) {
            Some(Removal::Adjacent) => {
                report.removed_adjacent += 1;
                out.invalidate(cell);
            }
            Some(Removal::Occluding) => {
                report.removed_occluding += 1;
                out.invalidate(cell);
            }
            None => report.survivors += 1,
        }
    }
    Ok(FilterOutcome { cloud: out, report })
}

/// Mirror then filter: returns the original cloud and its filtered mirror.
pub fn symmetric_complete(refined: &GridPointCloud, cfg: &VoxelFilterConfig) -> Result<(GridPointCloud, FilterOutcome)> {
    let mirrored = mirror_x(refined);
    let outcome = voxel_filter(refined, &mirrored, cfg)?;
    Ok((refined.clone(), outcome))
}

/// Median nearest-neighbor distance among `points` (positive distances only).
pub fn median_nn_spacing(points: &[Vec3]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("need at least two points to estimate spacing"));
    }
    let (mut lo, mut hi) = (points[0], points[0]);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = (hi - lo).max();
    if !(extent > 0.0) {
        return Err(Error::invalid("all points coincide"));
    }
    let cell = extent / (points.len() as f64).sqrt();
    let key = |p: &Vec3| -> [i64; 3] {
        [
            ((p.x - lo.x) / cell).floor() as i64,
            ((p.y - lo.y) / cell).floor() as i64,
            ((p.z - lo.z) / cell).floor() as i64,
        ]
    };
    let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        buckets.entry(key(p)).or_default().push(i);
    }
    let max_ring = (extent / cell).ceil() as i64 + 1;
    let mut dists = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let k = key(p);
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(b) = buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            for &j in b {
                                let d = (points[j] - p).norm();
                                if j != i && d > 0.0 && d < best {
                                    best = d;
                                }
                            }
                        }
                    }
                }
            }
            // unvisited points lie at least ring * cell away
            if best <= ring as f64 * cell {
                break;
            }
        }
        if best.is_finite() {
            dists.push(best);
        }
    }
    if dists.is_empty() {
        return Err(Error::invalid("no positive nearest-neighbor distances"));
    }
    dists.sort_by(f64::total_cmp);
    Ok(dists[dists.len() / 2])
}
