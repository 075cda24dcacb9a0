//! MC-dropout inference, hard majority voting and the coarse-to-fine cascade.

use rayon::prelude::*;
use thiserror::Error;

use crate::nn3d::{unet_forward, Mode, NnError, Tensor, UNetParams};
use crate::priors::encode_prior_channel;
use crate::rng::{mix_seed, seeded, tile_seed};
use crate::scheduler::{Node, TrainedAssembly};
use crate::tiling::{extract_tile, Tile, TilingError};
use crate::volume::{
    downsample_intensity_mean, downsample_label_nn, upsample_label_nn, GridSpec, Label, LabelMap, MultiChannelVolume,
    Volume, VolumeError,
};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("passes must be at least 1")]
    NoPasses,
    #[error("tile at {origin:?} with extent {extent:?} does not fit the grid {dims:?}")]
    TileOutsideGrid {
        origin: [usize; 3],
        extent: [usize; 3],
        dims: [usize; 3],
    },
    #[error("tile probabilities have shape {found:?}, expected {expected:?}")]
    ProbShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("voxel {0:?} received no votes")]
    Uncovered([usize; 3]),
    #[error("accumulators differ in grid or label count")]
    AccumulatorMismatch,
    #[error("assembly has no member for tile {0:?}")]
    MissingMember(Node),
    #[error("input grid {found:?} does not match assembly grid {expected:?}")]
    GridMismatch { expected: [usize; 3], found: [usize; 3] },
    #[error("{stage} stage: {message}")]
    Stage { stage: &'static str, message: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Mean of `passes` forwards with dropout active.
pub fn mc_dropout_infer<R: rand::Rng + ?Sized>(
    params: &UNetParams<f32>,
    input: &Tensor<f32>,
    passes: usize,
    rng: &mut R,
) -> Result<Tensor<f32>, InferenceError> {
    if passes == 0 {
        return Err(InferenceError::NoPasses);
    }
    let mut acc: Vec<f64> = Vec::new();
    let mut shape = Vec::new();
    for _ in 0..passes {
        let p = unet_forward(params, input, Mode::EvalStochastic, rng)?;
        if acc.is_empty() {
            acc = vec![0.0; p.len()];
            shape = p.shape().to_vec();
        }
        for (a, &v) in acc.iter_mut().zip(p.data()) {
            *a += v as f64;
        }
    }
    let n = passes as f64;
    Ok(Tensor::from_vec(
        &shape,
        acc.into_iter().map(|v| (v / n) as f32).collect(),
    )?)
}

/// Per-voxel class with the highest probability; ties go to the lowest class.
pub fn argmax_channels(probs: &Tensor<f32>) -> Result<Vec<Label>, InferenceError> {
    let [c, ..] = probs.dims4()?;
    let n = probs.voxels();
    Ok((0..n)
        .map(|v| {
            let mut best = 0;
            for k in 1..c {
                if probs.channel(k)[v] > probs.channel(best)[v] {
                    best = k;
                }
            }
            best as Label
        })
        .collect())
}

/// Hard-vote counts per voxel and class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteAccumulator {
    grid: GridSpec,
    num_labels: usize,
    counts: Vec<u32>,
}

impl VoteAccumulator {
    pub fn new(grid: GridSpec, num_labels: usize) -> Self {
        VoteAccumulator {
            grid,
            num_labels,
            counts: vec![0; grid.len() * num_labels],
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Vote counts of one voxel (flat index).
    pub fn counts(&self, voxel: usize) -> &[u32] {
        &self.counts[voxel * self.num_labels..(voxel + 1) * self.num_labels]
    }

    pub fn total(&self, voxel: usize) -> u32 {
        self.counts(voxel).iter().sum()
    }

    /// Add one vote per tile voxel for its label in `tile_labels` (tile-local, x fastest).
    pub fn add_labels(&mut self, tile: &Tile, tile_labels: &[Label]) -> Result<(), InferenceError> {
        let dims = self.grid.dims;
        if (0..3).any(|a| tile.origin[a] + tile.extent[a] > dims[a]) {
            return Err(InferenceError::TileOutsideGrid {
                origin: tile.origin,
                extent: tile.extent,
                dims,
            });
        }
        let [ex, ey, ez] = tile.extent;
        if tile_labels.len() != ex * ey * ez {
            return Err(InferenceError::ProbShape {
                expected: vec![ez, ey, ex],
                found: vec![tile_labels.len()],
            });
        }
        let mut i = 0;
        for z in 0..ez {
            for y in 0..ey {
                for x in 0..ex {
                    let l = tile_labels[i] as usize;
                    if l >= self.num_labels {
                        return Err(InferenceError::AccumulatorMismatch);
                    }
                    let v = self
                        .grid
                        .index(tile.origin[0] + x, tile.origin[1] + y, tile.origin[2] + z);
                    self.counts[v * self.num_labels + l] += 1;
                    i += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &VoteAccumulator) -> Result<(), InferenceError> {
        if self.grid.dims != other.grid.dims || self.num_labels != other.num_labels {
            return Err(InferenceError::AccumulatorMismatch);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// One count per class as a float volume, for debugging dumps.
    pub fn class_volume(&self, class: usize) -> Volume {
        let data = (0..self.grid.len()).map(|v| self.counts(v)[class] as f32).collect();
        Volume::new(self.grid, data).expect("finite counts")
    }
}

/// Cast the hard votes of one tile: the argmax class of each tile voxel.
pub fn vote(acc: &mut VoteAccumulator, tile: &Tile, tile_probs: &Tensor<f32>) -> Result<(), InferenceError> {
    let [c, z, y, x] = tile_probs.dims4()?;
    let expected = vec![acc.num_labels, tile.extent[2], tile.extent[1], tile.extent[0]];
    if [c, z, y, x][..] != expected[..] {
        return Err(InferenceError::ProbShape {
            expected,
            found: tile_probs.shape().to_vec(),
        });
    }
    acc.add_labels(tile, &argmax_channels(tile_probs)?)
}

/// Majority label per voxel; ties go to the lowest label.
pub fn finalize_vote(acc: &VoteAccumulator) -> Result<LabelMap, InferenceError> {
    let labels = (0..acc.grid.len())
        .map(|v| {
            let c = acc.counts(v);
            let mut best = 0;
            for k in 1..c.len() {
                if c[k] > c[best] {
                    best = k;
                }
            }
            if c[best] == 0 {
                Err(InferenceError::Uncovered(acc.grid.coords(v)))
            } else {
                Ok(best as Label)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LabelMap::new(acc.grid, labels, acc.num_labels as Label)?)
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub labels: LabelMap,
    pub votes: VoteAccumulator,
}

fn run_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers <= 1 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Segment a volume with every member of an assembly. Each tile uses its own RNG
/// stream derived from `seed` and its index; votes are added in tile order.
pub fn segment_assembly(
    assembly: &TrainedAssembly,
    input: &MultiChannelVolume,
    passes: usize,
    seed: u64,
    workers: usize,
) -> Result<Segmentation, InferenceError> {
    if passes == 0 {
        return Err(InferenceError::NoPasses);
    }
    let expected = assembly.tile_grid.global.dims;
    if input.grid().dims != expected {
        return Err(InferenceError::GridMismatch {
            expected,
            found: input.grid().dims,
        });
    }
    if input.num_channels() != assembly.config.in_channels {
        return Err(NnError::ChannelMismatch {
            expected: assembly.config.in_channels,
            found: input.num_channels(),
        }
        .into());
    }
    let tiles: Vec<Tile> = assembly.tile_grid.tiles().collect();
    let per_tile = |tile: &Tile| -> Result<Vec<Label>, InferenceError> {
        let params = assembly
            .member(tile.index)
            .ok_or(InferenceError::MissingMember(tile.index))?;
        let x = Tensor::from_channels(&extract_tile(input, tile)?);
        let probs = mc_dropout_infer(params, &x, passes, &mut seeded(tile_seed(seed, tile.index)))?;
        argmax_channels(&probs)
    };
    let votes: Vec<Result<Vec<Label>, InferenceError>> = run_pool(workers, || tiles.par_iter().map(per_tile).collect());
    let mut acc = VoteAccumulator::new(*input.grid(), assembly.config.num_classes);
    for (tile, v) in tiles.iter().zip(votes) {
        acc.add_labels(tile, &v?)?;
    }
    Ok(Segmentation {
        labels: finalize_vote(&acc)?,
        votes: acc,
    })
}

/// Coarse-scale input: block-mean downsampled intensity and the downsampled prior.
pub fn coarse_input(t1: &Volume, prior: &LabelMap) -> Result<MultiChannelVolume, InferenceError> {
    if t1.grid().dims != prior.grid().dims {
        return Err(stage(
            "coarse",
            format!("t1 {:?} vs prior {:?}", t1.grid().dims, prior.grid().dims),
        ));
    }
    let small = downsample_intensity_mean(t1);
    let p = downsample_label_nn(prior, 2)?;
    Ok(MultiChannelVolume::new(vec![small, encode(&p)?])?)
}

/// Fine-scale input: intensity, prior and the upsampled coarse segmentation.
pub fn fine_input(t1: &Volume, prior: &LabelMap, coarse_seg: &LabelMap) -> Result<MultiChannelVolume, InferenceError> {
    if t1.grid().dims != prior.grid().dims {
        return Err(stage(
            "fine",
            format!("t1 {:?} vs prior {:?}", t1.grid().dims, prior.grid().dims),
        ));
    }
    let up = upsample_label_nn(coarse_seg, t1.grid()).map_err(|e| stage("fine", e.to_string()))?;
    Ok(MultiChannelVolume::new(vec![t1.clone(), encode(prior)?, encode(&up)?])?)
}

fn encode(lm: &LabelMap) -> Result<Volume, InferenceError> {
    encode_prior_channel(lm).map_err(|e| stage("encoding", e.to_string()))
}

fn stage(stage: &'static str, message: String) -> InferenceError {
    InferenceError::Stage { stage, message }
}

#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub coarse: Segmentation,
    pub fine: Segmentation,
}

pub fn cascade_segment(
    coarse: &TrainedAssembly,
    fine: &TrainedAssembly,
    t1: &Volume,
    prior: &LabelMap,
    passes: usize,
    seed: u64,
    workers: usize,
) -> Result<CascadeOutput, InferenceError> {
    let cin = coarse_input(t1, prior)?;
    let coarse_seg = segment_assembly(coarse, &cin, passes, mix_seed(seed, &[0]), workers)
        .map_err(|e| stage("coarse", e.to_string()))?;
    let fin = fine_input(t1, prior, &coarse_seg.labels)?;
    let fine_seg = segment_assembly(fine, &fin, passes, mix_seed(seed, &[1]), workers)
        .map_err(|e| stage("fine", e.to_string()))?;
    Ok(CascadeOutput {
        coarse: coarse_seg,
        fine: fine_seg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(origin: [usize; 3], extent: [usize; 3]) -> Tile {
        Tile {
            index: [0; 3],
            origin,
            extent,
        }
    }

    #[test]
    fn finalize_tie_rule() {
        let g = GridSpec::isotropic([2, 1, 1]).unwrap();
        let mut acc = VoteAccumulator::new(g, 3);
        acc.counts = vec![3, 1, 0, 2, 2, 0];
        assert_eq!(finalize_vote(&acc).unwrap().labels(), &[0, 0]);
        acc.counts = vec![0, 1, 2, 0, 0, 0];
        assert!(matches!(finalize_vote(&acc), Err(InferenceError::Uncovered([1, 0, 0]))));
    }

    #[test]
    fn overlapping_agreement_counts_twice() {
        let g = GridSpec::isotropic([3, 1, 1]).unwrap();
        let mut acc = VoteAccumulator::new(g, 2);
        let probs = Tensor::from_vec(&[2, 1, 1, 2], vec![0.2, 0.2, 0.8, 0.8]).unwrap();
        vote(&mut acc, &tile([0, 0, 0], [2, 1, 1]), &probs).unwrap();
        vote(&mut acc, &tile([1, 0, 0], [2, 1, 1]), &probs).unwrap();
        assert_eq!(acc.counts(1), &[0, 2]);
        assert_eq!(acc.total(0), 1);
        assert!(vote(&mut acc, &tile([2, 0, 0], [2, 1, 1]), &probs).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::from_vec(&[3, 1, 1, 2], vec![0.4, 0.1, 0.4, 0.45, 0.2, 0.45]).unwrap();
        assert_eq!(argmax_channels(&t).unwrap(), vec![0, 1]);
    }

    #[test]
    fn coarse_grid_is_halved() {
        let g = GridSpec::isotropic([32, 32, 32]).unwrap();
        let t1 = Volume::zeros(g);
        let prior = LabelMap::filled(g, 2, 5).unwrap();
        let c = coarse_input(&t1, &prior).unwrap();
        assert_eq!(c.grid().dims, [16, 16, 16]);
        assert_eq!(c.num_channels(), 2);
        assert_eq!(c.channels()[1].data()[0], 0.5);
        let seg = LabelMap::filled(*c.grid(), 4, 5).unwrap();
        let f = fine_input(&t1, &prior, &seg).unwrap();
        assert_eq!(f.num_channels(), 3);
        assert_eq!(f.channels()[2].data()[0], 1.0);
        let wrong = LabelMap::filled(GridSpec::isotropic([8, 8, 8]).unwrap(), 0, 5).unwrap();
        assert!(matches!(
            coarse_input(&t1, &wrong),
            Err(InferenceError::Stage { stage: "coarse", .. })
        ));
    }
}
