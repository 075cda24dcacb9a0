//! Overlapping tile grids: each assembly member owns one tile of the global volume.
//!
//! Per axis with length `L`, `N` tiles of extent `T`, tile `i` starts at
//! `floor(i * (L - T) / (N - 1))`, so the first and last tiles touch the volume faces.
//! Feasibility requires `T >= floor(2L / (N + 1))`, the real-valued 50%-overlap bound.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{GridSpec, LabelMap, MultiChannelVolume, Volume, VolumeError};

const AXES: [char; 3] = ['x', 'y', 'z'];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TilingError {
    #[error("infeasible tiling on axis {axis}: length {length}, count {count}, tile {tile}: {reason}")]
    Infeasible {
        axis: char,
        length: usize,
        count: usize,
        tile: usize,
        reason: &'static str,
    },
    #[error("tile at {origin:?} with extent {extent:?} exceeds grid {dims:?}")]
    OutOfBounds {
        origin: [usize; 3],
        extent: [usize; 3],
        dims: [usize; 3],
    },
    #[error("voxel {voxel:?} outside grid {dims:?}")]
    VoxelOutOfBounds { voxel: [usize; 3], dims: [usize; 3] },
    #[error("tile index {0:?} outside the grid counts")]
    BadIndex([usize; 3]),
}

/// Set of overlapping sub-volumes covering a global grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub global: GridSpec,
    pub counts: [usize; 3],
    pub tile_dims: [usize; 3],
    pub origins: [Vec<usize>; 3],
}

/// One member's territory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub index: [usize; 3],
    pub origin: [usize; 3],
    pub extent: [usize; 3],
}

impl Tile {
    pub fn contains(&self, voxel: [usize; 3]) -> bool {
        (0..3).all(|a| voxel[a] >= self.origin[a] && voxel[a] < self.origin[a] + self.extent[a])
    }
}

fn axis_origins(axis: usize, length: usize, count: usize, tile: usize) -> Result<Vec<usize>, TilingError> {
    let infeasible = |reason| TilingError::Infeasible {
        axis: AXES[axis],
        length,
        count,
        tile,
        reason,
    };
    if count == 0 {
        return Err(infeasible("tile count must be positive"));
    }
    if tile == 0 || tile > length {
        return Err(infeasible("tile extent must be in 1..=length"));
    }
    if count == 1 {
        if tile != length {
            return Err(infeasible("a single tile must span the axis"));
        }
        return Ok(vec![0]);
    }
    if tile < 2 * length / (count + 1) {
        return Err(infeasible("tile too small for 50% overlap"));
    }
    let span = length - tile;
    if span < count - 1 {
        return Err(infeasible("tiles would share an origin"));
    }
    Ok((0..count).map(|i| i * span / (count - 1)).collect())
}

/// Build the tile grid, or name the first axis whose configuration is infeasible.
pub fn build_tile_grid(global: GridSpec, counts: [usize; 3], tile_dims: [usize; 3]) -> Result<TileGrid, TilingError> {
    let origins = [
        axis_origins(0, global.dims[0], counts[0], tile_dims[0])?,
        axis_origins(1, global.dims[1], counts[1], tile_dims[1])?,
        axis_origins(2, global.dims[2], counts[2], tile_dims[2])?,
    ];
    Ok(TileGrid {
        global,
        counts,
        tile_dims,
        origins,
    })
}

impl TileGrid {
    /// The fine-scale configuration used on 181x217x181 MNI grids: 5x5x5 tiles of 64x72x64.
    pub fn mri_fine() -> TileGrid {
        build_tile_grid(GridSpec::isotropic([181, 217, 181]).unwrap(), [5, 5, 5], [64, 72, 64])
            .expect("preset is feasible")
    }

    /// The coarse-scale configuration: 5x5x5 tiles of 32x48x32 on the 2 mm grid.
    pub fn mri_coarse() -> TileGrid {
        build_tile_grid(GridSpec::new([91, 109, 91], [2.0; 3]).unwrap(), [5, 5, 5], [32, 48, 32])
            .expect("preset is feasible")
    }

    pub fn num_tiles(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn tile(&self, index: [usize; 3]) -> Result<Tile, TilingError> {
        if (0..3).any(|a| index[a] >= self.counts[a]) {
            return Err(TilingError::BadIndex(index));
        }
        Ok(Tile {
            index,
            origin: [0, 1, 2].map(|a| self.origins[a][index[a]]),
            extent: self.tile_dims,
        })
    }

    /// All tiles in lexicographic index order (x index slowest).
    pub fn tiles(&self) -> impl Iterator<Item = Tile> + '_ {
        let [nx, ny, nz] = self.counts;
        (0..nx).flat_map(move |i| (0..ny).flat_map(move |j| (0..nz).map(move |k| self.tile([i, j, k]).unwrap())))
    }

    /// Smallest overlap between adjacent tiles on each axis (the tile extent when there is one tile).
    pub fn min_overlap(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            self.origins[a]
                .windows(2)
                .map(|w| self.tile_dims[a] - (w[1] - w[0]))
                .min()
                .unwrap_or(self.tile_dims[a])
        })
    }

    /// Indices of every tile whose box contains `voxel`, lexicographically ordered.
    pub fn tiles_covering(&self, voxel: [usize; 3]) -> Result<Vec<[usize; 3]>, TilingError> {
        if !self.global.contains(voxel) {
            return Err(TilingError::VoxelOutOfBounds {
                voxel,
                dims: self.global.dims,
            });
        }
        let per_axis: [Vec<usize>; 3] = [0, 1, 2].map(|a| {
            self.origins[a]
                .iter()
                .enumerate()
                .filter(|(_, &o)| voxel[a] >= o && voxel[a] < o + self.tile_dims[a])
                .map(|(i, _)| i)
                .collect()
        });
        let mut out = Vec::new();
        for &i in &per_axis[0] {
            for &j in &per_axis[1] {
                for &k in &per_axis[2] {
                    out.push([i, j, k]);
                }
            }
        }
        Ok(out)
    }
}

fn check_bounds(grid: &GridSpec, tile: &Tile) -> Result<(), TilingError> {
    if (0..3).any(|a| tile.extent[a] == 0 || tile.origin[a] + tile.extent[a] > grid.dims[a]) {
        return Err(TilingError::OutOfBounds {
            origin: tile.origin,
            extent: tile.extent,
            dims: grid.dims,
        });
    }
    Ok(())
}

fn crop<T: Copy>(grid: &GridSpec, data: &[T], tile: &Tile) -> Vec<T> {
    let [ex, ey, ez] = tile.extent;
    let [ox, oy, oz] = tile.origin;
    let mut out = Vec::with_capacity(ex * ey * ez);
    for z in oz..oz + ez {
        for y in oy..oy + ey {
            let start = grid.index(ox, y, z);
            out.extend_from_slice(&data[start..start + ex]);
        }
    }
    out
}

fn tile_grid_spec(grid: &GridSpec, tile: &Tile) -> GridSpec {
    GridSpec {
        dims: tile.extent,
        spacing: grid.spacing,
    }
}

/// Copy the tile's sub-volume out of every channel.
pub fn extract_tile(mc: &MultiChannelVolume, tile: &Tile) -> Result<MultiChannelVolume, TilingError> {
    check_bounds(mc.grid(), tile)?;
    let spec = tile_grid_spec(mc.grid(), tile);
    let channels = mc
        .channels()
        .iter()
        .map(|c| Volume::new(spec, crop(c.grid(), c.data(), tile)))
        .collect::<Result<Vec<_>, VolumeError>>()
        .expect("cropped finite data has the tile's length");
    Ok(MultiChannelVolume::new(channels).expect("channels share the tile grid"))
}

pub fn extract_label_tile(lm: &LabelMap, tile: &Tile) -> Result<LabelMap, TilingError> {
    check_bounds(lm.grid(), tile)?;
    let spec = tile_grid_spec(lm.grid(), tile);
    Ok(LabelMap::new(spec, crop(lm.grid(), lm.labels(), tile), lm.num_labels()).expect("cropped labels stay in range"))
}
