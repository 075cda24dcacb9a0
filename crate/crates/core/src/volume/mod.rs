//! Volumes, label maps and the operations shared by every other module.
//!
//! Voxel layout is row-major with x fastest: `index = x + nx * (y + ny * z)`.

pub mod avol;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Label = u16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("invalid grid: dims {dims:?}, spacing {spacing:?}")]
    InvalidGrid { dims: [usize; 3], spacing: [f32; 3] },
    #[error("payload length {found} does not match grid size {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),
    #[error("label {label} at voxel {voxel} is not below num_labels {num_labels}")]
    LabelOutOfRange {
        voxel: usize,
        label: Label,
        num_labels: Label,
    },
    #[error("grid mismatch: {0:?} vs {1:?}")]
    GridMismatch([usize; 3], [usize; 3]),
    #[error("degenerate mask: {0}")]
    DegenerateMask(&'static str),
    #[error("unsupported resampling factor {0} (only 2 is supported)")]
    UnsupportedFactor(usize),
    #[error("upsampling target dims {target:?} not admissible for from dims {from:?}")]
    InvalidUpsampleTarget { from: [usize; 3], target: [usize; 3] },
    #[error("invalid label pairs: {0}")]
    InvalidPairs(String),
    #[error("a multichannel volume needs at least one channel")]
    NoChannels,
}

/// Voxel counts and spacing of a 3D grid, axes ordered x, y, z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self, VolumeError> {
        let ok = dims.iter().all(|&d| d >= 1) && spacing.iter().all(|&s| s.is_finite() && s > 0.0);
        if ok {
            Ok(GridSpec { dims, spacing })
        } else {
            Err(VolumeError::InvalidGrid { dims, spacing })
        }
    }

    /// Grid with 1 mm isotropic spacing.
    pub fn isotropic(dims: [usize; 3]) -> Result<Self, VolumeError> {
        Self::new(dims, [1.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let r = index / self.dims[0];
        [x, r % self.dims[1], r / self.dims[1]]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        p[0] < self.dims[0] && p[1] < self.dims[1] && p[2] < self.dims[2]
    }

    /// Grid obtained by 2x downsampling: dims rounded up, spacing doubled.
    pub fn halved(&self) -> GridSpec {
        GridSpec {
            dims: self.dims.map(|d| d.div_ceil(2)),
            spacing: self.spacing.map(|s| 2.0 * s),
        }
    }

    fn check_same(&self, other: &GridSpec) -> Result<(), VolumeError> {
        if self.dims == other.dims {
            Ok(())
        } else {
            Err(VolumeError::GridMismatch(self.dims, other.dims))
        }
    }
}

/// Scalar intensity field.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: GridSpec,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: GridSpec, data: Vec<f32>) -> Result<Self, VolumeError> {
        if data.len() != grid.len() {
            return Err(VolumeError::LengthMismatch {
                expected: grid.len(),
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Volume { grid, data })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Volume {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..grid.dims[2] {
            for y in 0..grid.dims[1] {
                for x in 0..grid.dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume { grid, data }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.grid.index(x, y, z)]
    }

    /// Mirror along x (the sagittal axis): voxel x moves to `nx - 1 - x`.
    pub fn flip_sagittal(&self) -> Volume {
        Volume {
            grid: self.grid,
            data: mirror_x(&self.grid, &self.data),
        }
    }
}

/// Integer label field; label 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    grid: GridSpec,
    labels: Vec<Label>,
    num_labels: Label,
}

// Eq on GridSpec is sound for our purposes: spacing is always finite.
impl Eq for GridSpec {}

impl LabelMap {
    pub fn new(grid: GridSpec, labels: Vec<Label>, num_labels: Label) -> Result<Self, VolumeError> {
        if labels.len() != grid.len() {
            return Err(VolumeError::LengthMismatch {
                expected: grid.len(),
                found: labels.len(),
            });
        }
        if let Some(voxel) = labels.iter().position(|&l| l >= num_labels) {
            return Err(VolumeError::LabelOutOfRange {
                voxel,
                label: labels[voxel],
                num_labels,
            });
        }
        Ok(LabelMap {
            grid,
            labels,
            num_labels,
        })
    }

    pub fn filled(grid: GridSpec, label: Label, num_labels: Label) -> Result<Self, VolumeError> {
        Self::new(grid, vec![label; grid.len()], num_labels)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn num_labels(&self) -> Label {
        self.num_labels
    }

    pub fn into_labels(self) -> Vec<Label> {
        self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> Label {
        self.labels[self.grid.index(x, y, z)]
    }

    /// Voxel count per label, indexed by label.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_labels as usize];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Sorted set of labels present.
    pub fn label_set(&self) -> Vec<Label> {
        self.label_counts()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(l, _)| l as Label)
            .collect()
    }

    /// Mirror along x and swap the labels of each `(a, b)` pair.
    pub fn flip_sagittal(&self, pairs: &[(Label, Label)]) -> Result<LabelMap, VolumeError> {
        let perm = pair_permutation(pairs, self.num_labels)?;
        let labels = mirror_x(&self.grid, &self.labels)
            .into_iter()
            .map(|l| perm[l as usize])
            .collect();
        Ok(LabelMap {
            grid: self.grid,
            labels,
            num_labels: self.num_labels,
        })
    }
}

fn mirror_x<T: Copy>(grid: &GridSpec, data: &[T]) -> Vec<T> {
    let nx = grid.dims[0];
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(nx) {
        out.extend(row.iter().rev());
    }
    out
}

fn pair_permutation(pairs: &[(Label, Label)], num_labels: Label) -> Result<Vec<Label>, VolumeError> {
    let mut perm: Vec<Label> = (0..num_labels).collect();
    let mut seen = vec![false; num_labels as usize];
    for &(a, b) in pairs {
        if a >= num_labels || b >= num_labels {
            return Err(VolumeError::InvalidPairs(format!(
                "pair ({a}, {b}) references a label >= {num_labels}"
            )));
        }
        if a == b || seen[a as usize] || seen[b as usize] {
            return Err(VolumeError::InvalidPairs(format!(
                "pair ({a}, {b}) overlaps another pair"
            )));
        }
        seen[a as usize] = true;
        seen[b as usize] = true;
        perm[a as usize] = b;
        perm[b as usize] = a;
    }
    Ok(perm)
}

/// Ordered channels over one shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelVolume {
    grid: GridSpec,
    channels: Vec<Volume>,
}

impl MultiChannelVolume {
    pub fn new(channels: Vec<Volume>) -> Result<Self, VolumeError> {
        let first = channels.first().ok_or(VolumeError::NoChannels)?;
        let grid = first.grid;
        for c in &channels[1..] {
            grid.check_same(&c.grid)?;
        }
        Ok(MultiChannelVolume { grid, channels })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn channels(&self) -> &[Volume] {
        &self.channels
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }
}

/// Centre and scale intensities inside a mask: in-mask mean 0 and population std 1,
/// out-of-mask voxels set to 0. Any nonzero mask label counts as inside.
pub fn normalize_intensity(vol: &Volume, mask: &LabelMap) -> Result<Volume, VolumeError> {
    vol.grid.check_same(&mask.grid)?;
    let inside = || {
        vol.data
            .iter()
            .zip(&mask.labels)
            .filter(|(_, &m)| m != 0)
            .map(|(&v, _)| v as f64)
    };
    let n = inside().count();
    if n < 2 {
        return Err(VolumeError::DegenerateMask("fewer than 2 in-mask voxels"));
    }
    let mean = inside().sum::<f64>() / n as f64;
    let var = inside().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var.is_nan() || var <= 0.0 {
        return Err(VolumeError::DegenerateMask("constant in-mask intensity"));
    }
    let std = var.sqrt();
    let data = vol
        .data
        .iter()
        .zip(&mask.labels)
        .map(|(&v, &m)| if m != 0 { ((v as f64 - mean) / std) as f32 } else { 0.0 })
        .collect();
    Ok(Volume { grid: vol.grid, data })
}

/// Nearest-neighbour 2x downsampling: output voxel `(i, j, k)` takes the input label at `(2i, 2j, 2k)`.
pub fn downsample_label_nn(lm: &LabelMap, factor: usize) -> Result<LabelMap, VolumeError> {
    if factor != 2 {
        return Err(VolumeError::UnsupportedFactor(factor));
    }
    let grid = lm.grid.halved();
    let [nx, ny, nz] = grid.dims;
    let mut labels = Vec::with_capacity(grid.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                labels.push(lm.get(2 * i, 2 * j, 2 * k));
            }
        }
    }
    Ok(LabelMap {
        grid,
        labels,
        num_labels: lm.num_labels,
    })
}

/// 2x downsampling of intensities by averaging each 2x2x2 block (partial blocks at odd edges
/// average the voxels they have).
pub fn downsample_intensity_mean(vol: &Volume) -> Volume {
    let grid = vol.grid.halved();
    let src = vol.grid.dims;
    Volume::from_fn(grid, |i, j, k| {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for z in 2 * k..(2 * k + 2).min(src[2]) {
            for y in 2 * j..(2 * j + 2).min(src[1]) {
                for x in 2 * i..(2 * i + 2).min(src[0]) {
                    sum += vol.get(x, y, z) as f64;
                    n += 1;
                }
            }
        }
        (sum / n as f64) as f32
    })
}

/// Nearest-neighbour 2x upsampling onto `target`: output voxel `(i, j, k)` reads source
/// `(i/2, j/2, k/2)`. Target dims must be `2d` or `2d - 1` per source axis `d`.
pub fn upsample_label_nn(lm: &LabelMap, target: &GridSpec) -> Result<LabelMap, VolumeError> {
    let src = lm.grid.dims;
    let admissible = (0..3).all(|a| target.dims[a] == 2 * src[a] || target.dims[a] + 1 == 2 * src[a]);
    if !admissible {
        return Err(VolumeError::InvalidUpsampleTarget {
            from: src,
            target: target.dims,
        });
    }
    let [nx, ny, nz] = target.dims;
    let mut labels = Vec::with_capacity(target.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                labels.push(lm.get(i / 2, j / 2, k / 2));
            }
        }
    }
    Ok(LabelMap {
        grid: *target,
        labels,
        num_labels: lm.num_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(d: [usize; 3]) -> GridSpec {
        GridSpec::isotropic(d).unwrap()
    }

    #[test]
    fn grid_rejects_bad_values() {
        assert!(GridSpec::new([0, 1, 1], [1.0; 3]).is_err());
        assert!(GridSpec::new([1, 1, 1], [1.0, 0.0, 1.0]).is_err());
        assert!(GridSpec::new([1, 1, 1], [1.0, f32::NAN, 1.0]).is_err());
    }

    #[test]
    fn normalize_two_values() {
        let g = grid([2, 1, 1]);
        let v = Volume::new(g, vec![0.0, 2.0]).unwrap();
        let m = LabelMap::filled(g, 1, 2).unwrap();
        let n = normalize_intensity(&v, &m).unwrap();
        assert_eq!(n.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn normalize_zeroes_outside_mask() {
        let g = grid([4, 1, 1]);
        let v = Volume::new(g, vec![5.0, 1.0, 3.0, 9.0]).unwrap();
        let m = LabelMap::new(g, vec![0, 1, 1, 0], 2).unwrap();
        let n = normalize_intensity(&v, &m).unwrap();
        assert_eq!(n.data(), &[0.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn normalize_random_volume_has_unit_moments() {
        let g = grid([7, 5, 3]);
        let data: Vec<f32> = (0..g.len())
            .map(|i| (crate::rng::hash_uniform(11, i as u64, 0) * 40.0 - 3.0) as f32)
            .collect();
        let v = Volume::new(g, data).unwrap();
        let m = LabelMap::filled(g, 1, 2).unwrap();
        let n = normalize_intensity(&v, &m).unwrap();
        let xs: Vec<f64> = n.data().iter().map(|&x| x as f64).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((std - 1.0).abs() < 1e-6, "std {std}");
    }

    #[test]
    fn normalize_degenerate_masks() {
        let g = grid([3, 1, 1]);
        let v = Volume::new(g, vec![2.0, 2.0, 2.0]).unwrap();
        let full = LabelMap::filled(g, 1, 2).unwrap();
        assert!(matches!(
            normalize_intensity(&v, &full),
            Err(VolumeError::DegenerateMask(_))
        ));
        let v = Volume::new(g, vec![1.0, 2.0, 3.0]).unwrap();
        let single = LabelMap::new(g, vec![0, 1, 0], 2).unwrap();
        assert!(matches!(
            normalize_intensity(&v, &single),
            Err(VolumeError::DegenerateMask(_))
        ));
    }

    #[test]
    fn downsample_constant_and_dims() {
        let lm = LabelMap::filled(grid([4, 4, 4]), 3, 4).unwrap();
        let d = downsample_label_nn(&lm, 2).unwrap();
        assert_eq!(d.grid().dims, [2, 2, 2]);
        assert!(d.labels().iter().all(|&l| l == 3));
        assert_eq!(d.grid().spacing, [2.0; 3]);

        let big = LabelMap::filled(grid([181, 217, 181]), 0, 2).unwrap();
        assert_eq!(downsample_label_nn(&big, 2).unwrap().grid().dims, [91, 109, 91]);
        assert!(matches!(
            downsample_label_nn(&lm, 3),
            Err(VolumeError::UnsupportedFactor(3))
        ));
    }

    #[test]
    fn downsample_picks_corner() {
        let mut labels = vec![1; 8];
        labels[0] = 5;
        let lm = LabelMap::new(grid([2, 2, 2]), labels, 6).unwrap();
        let d = downsample_label_nn(&lm, 2).unwrap();
        assert_eq!(d.labels(), &[5]);
    }

    #[test]
    fn upsample_reads_floor_index() {
        let lm = LabelMap::filled(grid([1, 1, 1]), 7, 8).unwrap();
        let u = upsample_label_nn(&lm, &grid([2, 2, 2])).unwrap();
        assert_eq!(u.labels(), &[7; 8]);

        let src_grid = grid([91, 109, 91]);
        let labels: Vec<Label> = (0..src_grid.len()).map(|i| (i % 13) as Label).collect();
        let src = LabelMap::new(src_grid, labels, 13).unwrap();
        let up = upsample_label_nn(&src, &grid([181, 217, 181])).unwrap();
        assert_eq!(up.get(180, 216, 180), src.get(90, 108, 90));
        assert_eq!(up.get(1, 2, 3), src.get(0, 1, 1));

        assert!(upsample_label_nn(&lm, &grid([3, 2, 2])).is_err());
    }

    #[test]
    fn flip_swaps_pairs() {
        let g = grid([4, 1, 1]);
        let lm = LabelMap::new(g, vec![2, 0, 1, 3], 4).unwrap();
        let f = lm.flip_sagittal(&[(2, 3)]).unwrap();
        assert_eq!(f.labels(), &[2, 1, 0, 3]);
        assert_eq!(f.get(3, 0, 0), 3);
        let mirrored = lm.flip_sagittal(&[]).unwrap();
        assert_eq!(mirrored.labels(), &[3, 1, 0, 2]);
        assert!(lm.flip_sagittal(&[(1, 2), (2, 3)]).is_err());
        assert!(lm.flip_sagittal(&[(1, 4)]).is_err());
    }

    #[test]
    fn downsample_intensity_averages_blocks() {
        let g = grid([3, 2, 2]);
        let v = Volume::from_fn(g, |x, _, _| x as f32);
        let d = downsample_intensity_mean(&v);
        assert_eq!(d.grid().dims, [2, 1, 1]);
        assert_eq!(d.data(), &[0.5, 2.0]);
    }

    fn arb_labelmap() -> impl Strategy<Value = LabelMap> {
        (1usize..7, 1usize..7, 1usize..7, 2u16..6).prop_flat_map(|(x, y, z, l)| {
            prop::collection::vec(0..l, x * y * z).prop_map(move |v| LabelMap::new(grid([x, y, z]), v, l).unwrap())
        })
    }

    proptest! {
        #[test]
        fn flip_is_involution(lm in arb_labelmap()) {
            let pairs = if lm.num_labels() >= 3 { vec![(1, 2)] } else { vec![] };
            let twice = lm.flip_sagittal(&pairs).unwrap().flip_sagittal(&pairs).unwrap();
            prop_assert_eq!(&twice, &lm);
        }

        #[test]
        fn flip_preserves_counts_under_swap(lm in arb_labelmap()) {
            prop_assume!(lm.num_labels() >= 3);
            let before = lm.label_counts();
            let after = lm.flip_sagittal(&[(1, 2)]).unwrap().label_counts();
            prop_assert_eq!(before[0], after[0]);
            prop_assert_eq!(before[1], after[2]);
            prop_assert_eq!(before[2], after[1]);
        }

        #[test]
        fn upsample_preserves_label_set(lm in arb_labelmap(), shrink in prop::array::uniform3(0usize..2)) {
            let d = lm.grid().dims;
            let target = grid([0, 1, 2].map(|a| 2 * d[a] - shrink[a]));
            let up = upsample_label_nn(&lm, &target).unwrap();
            // source voxel (i,j,k) is read back at output voxel (2i,2j,2k)
            prop_assert_eq!(up.label_set(), lm.label_set());
        }

        #[test]
        fn down_up_constant_is_identity(d in prop::array::uniform3(1usize..9), l in 0u16..4) {
            let lm = LabelMap::filled(grid(d), l, 4).unwrap();
            let down = downsample_label_nn(&lm, 2).unwrap();
            let up = upsample_label_nn(&down, lm.grid()).unwrap();
            prop_assert_eq!(up, lm);
        }

        #[test]
        fn normalize_is_idempotent(vals in prop::collection::vec(-100.0f32..100.0, 27)) {
            let g = grid([3, 3, 3]);
            let v = Volume::new(g, vals).unwrap();
            let m = LabelMap::filled(g, 1, 2).unwrap();
            if let Ok(n1) = normalize_intensity(&v, &m) {
                let n2 = normalize_intensity(&n1, &m).unwrap();
                for (a, b) in n1.data().iter().zip(n2.data()) {
                    prop_assert!((a - b).abs() < 1e-5);
                }
            }
        }
    }
}
