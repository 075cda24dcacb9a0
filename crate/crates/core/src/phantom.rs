//! Synthetic labelled phantoms and scan-rescan simulation.
//!
//! A phantom is a stack of nested ellipsoidal shells plus a mirrored left/right pair
//! of small structures, with a T1-like intensity image. All randomness is hash-based
//! per voxel, so outputs are identical across runs and platforms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{hash_gaussian, hash_uniform, mix_seed};
use crate::volume::{GridSpec, Label, LabelMap, Volume, VolumeError};

const NOISE_TAG: u64 = 0x006e_6f69_7365;
const SHAPE_TAG: u64 = 0x0073_6861_7065;
const BIAS_TAG: u64 = 0x6269_6173;
const SCALE_TAG: u64 = 0x0073_6361_6c65;
const RATER_TAG: u64 = 0x0072_6174_6572;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("transform outside the supported range: {0}")]
    TransformOutOfRange(String),
    #[error("transform moves {fraction:.3} of the foreground out of frame (limit 0.05)")]
    OutOfFrame { fraction: f64 },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub num_labels: Label,
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
    pub shape_scale: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 32, 32],
            num_labels: 5,
            noise_sigma: 0.1,
            bias_amplitude: 0.1,
            shape_scale: 1.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.dims.iter().any(|&d| d == 0 || d % 4 != 0) {
            return bad(format!("dims {:?} must be positive multiples of 4", self.dims));
        }
        if self.num_labels < 2 {
            return bad("num_labels must be at least 2".into());
        }
        if !(0.8..=1.2).contains(&self.shape_scale) {
            return bad(format!("shape_scale {} outside [0.8, 1.2]", self.shape_scale));
        }
        if !(self.noise_sigma >= 0.0 && self.bias_amplitude >= 0.0 && self.bias_amplitude < 1.0) {
            return bad("noise_sigma must be >= 0 and bias_amplitude in [0, 1)".into());
        }
        Ok(())
    }

    /// Number of nested shell labels; the remaining two labels (if any) form the lateral pair.
    pub fn num_shells(&self) -> Label {
        if self.num_labels >= 4 {
            self.num_labels - 3
        } else {
            self.num_labels - 1
        }
    }

    /// Left/right label pairs swapped by a sagittal flip.
    pub fn flip_pairs(&self) -> Vec<(Label, Label)> {
        if self.num_labels >= 4 {
            vec![(self.num_labels - 2, self.num_labels - 1)]
        } else {
            Vec::new()
        }
    }

    /// Mean intensity of each label before bias and noise.
    pub fn label_means(&self) -> Vec<f64> {
        let s = self.num_shells() as f64;
        (0..self.num_labels)
            .map(|l| match l {
                0 => 0.0,
                l if (l as f64) <= s => 0.9 - 0.5 * (l as f64 - 1.0) / s,
                _ => 0.3,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub id: String,
    pub spec: PhantomSpec,
    /// Intensity with bias field, before noise.
    pub clean: Volume,
    pub t1: Volume,
    pub gt: LabelMap,
    pub mask: LabelMap,
}

impl Phantom {
    pub fn noise_seed(&self) -> u64 {
        mix_seed(self.spec.seed, &[NOISE_TAG])
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

struct Geometry {
    shells: Vec<Ellipsoid>,
    pair: Option<[Ellipsoid; 2]>,
}

fn geometry(spec: &PhantomSpec) -> Geometry {
    let d = spec.dims.map(|v| v as f64);
    let jitter = |k: u64| 2.0 * hash_uniform(spec.seed, SHAPE_TAG, k) - 1.0;
    let s = spec.shape_scale;
    let center = [0, 1, 2].map(|a| (d[a] - 1.0) / 2.0 + [0.0, 1.0, 1.0][a] * jitter(a as u64));
    let base = [0.36, 0.40, 0.33];
    let radii = [0, 1, 2].map(|a| base[a] * d[a] * s * (1.0 + 0.06 * jitter(3 + a as u64)));
    let n = spec.num_shells() as usize;
    let shells = (0..n)
        .map(|k| {
            let f = 1.0 - 0.6 * k as f64 / n as f64;
            Ellipsoid {
                center,
                radii: radii.map(|r| r * f),
            }
        })
        .collect();
    let pair = (spec.num_labels >= 4).then(|| {
        let offset = 0.55 * radii[0];
        let r = 0.085 * d[0] * s;
        let mk = |sign: f64| Ellipsoid {
            // centred on the mid-sagittal plane so a flip maps one onto the other
            center: [
                (d[0] - 1.0) / 2.0 + sign * offset,
                center[1] - 0.1 * radii[1],
                center[2],
            ],
            radii: [r, 1.2 * r, r],
        };
        [mk(-1.0), mk(1.0)]
    });
    Geometry { shells, pair }
}

/// Smooth multiplicative field `1 + a * b(p)` with `|b| <= 1`, a random low-order polynomial.
fn bias_field(spec: &PhantomSpec, p: [f64; 3]) -> f64 {
    let c: Vec<f64> = (0..4)
        .map(|k| 2.0 * hash_uniform(spec.seed, BIAS_TAG, k) - 1.0)
        .collect();
    let norm: f64 = c.iter().map(|v| v.abs()).sum::<f64>().max(1e-12);
    let u = [0, 1, 2].map(|a| 2.0 * p[a] / (spec.dims[a] as f64 - 1.0).max(1.0) - 1.0);
    let b = (c[0] * u[0] + c[1] * u[1] + c[2] * u[2] + c[3] * u[0] * u[1]) / norm;
    1.0 + spec.bias_amplitude * b
}

fn add_noise(clean: &Volume, sigma: f64, seed: u64) -> Volume {
    let data = clean
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 + sigma * hash_gaussian(seed, i as u64)) as f32)
        .collect();
    Volume::new(*clean.grid(), data).expect("finite noise")
}

/// Foreground (`gt > 0`) dilated by one voxel in the 26-neighbourhood.
pub fn foreground_mask(gt: &LabelMap) -> LabelMap {
    let g = *gt.grid();
    let [nx, ny, nz] = g.dims;
    let mut out = vec![0u16; g.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if gt.get(x, y, z) == 0 {
                    continue;
                }
                for dz in z.saturating_sub(1)..(z + 2).min(nz) {
                    for dy in y.saturating_sub(1)..(y + 2).min(ny) {
                        for dx in x.saturating_sub(1)..(x + 2).min(nx) {
                            out[g.index(dx, dy, dz)] = 1;
                        }
                    }
                }
            }
        }
    }
    LabelMap::new(g, out, 2).expect("binary mask")
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    generate_named(spec, format!("phantom-{:016x}", spec.seed))
}

fn generate_named(spec: &PhantomSpec, id: String) -> Result<Phantom, PhantomError> {
    spec.validate()?;
    let grid = GridSpec::isotropic(spec.dims)?;
    let geo = geometry(spec);
    let n = spec.num_labels;
    let mut labels = vec![0u16; grid.len()];
    for (i, l) in labels.iter_mut().enumerate() {
        let [x, y, z] = grid.coords(i);
        let p = [x as f64, y as f64, z as f64];
        for (k, e) in geo.shells.iter().enumerate() {
            if e.contains(p) {
                *l = k as Label + 1;
            }
        }
        if let Some([left, right]) = &geo.pair {
            if left.contains(p) {
                *l = n - 2;
            } else if right.contains(p) {
                *l = n - 1;
            }
        }
    }
    let gt = LabelMap::new(grid, labels, n)?;
    let means = spec.label_means();
    let clean = Volume::from_fn(grid, |x, y, z| {
        let m = means[gt.get(x, y, z) as usize];
        (m * bias_field(spec, [x as f64, y as f64, z as f64])) as f32
    });
    let mut ph = Phantom {
        id,
        spec: *spec,
        t1: clean.clone(),
        clean,
        mask: foreground_mask(&gt),
        gt,
    };
    ph.t1 = add_noise(&ph.clean, spec.noise_sigma, ph.noise_seed());
    Ok(ph)
}

/// Shape scale of pool member `i`: a uniform grid over [0.8, 1.2] when stratified.
pub fn pool_scale(i: usize, n: usize, stratify: bool, base_seed: u64) -> f64 {
    if stratify {
        if n == 1 {
            1.0
        } else {
            (0.8 + 0.4 * i as f64 / (n - 1) as f64).min(1.2)
        }
    } else {
        0.8 + 0.4 * hash_uniform(base_seed, SCALE_TAG, i as u64)
    }
}

/// `n` phantoms with ids `{prefix}{i:03}`, each seeded from `base_seed` and its index.
pub fn generate_pool(
    n: usize,
    stratify: bool,
    base_seed: u64,
    template: &PhantomSpec,
    prefix: &str,
) -> Result<Vec<Phantom>, PhantomError> {
    if n == 0 {
        return Err(PhantomError::InvalidSpec("pool size must be at least 1".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let spec = PhantomSpec {
                shape_scale: pool_scale(i, n, stratify, base_seed),
                seed: mix_seed(base_seed, &[i as u64]),
                ..*template
            };
            generate_named(&spec, format!("{prefix}{i:03}"))
        })
        .collect()
}

/// Rigid motion about the grid centre: `p' = R (p - c) + c + t`, `R = Rz Ry Rx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        RigidTransform {
            rotation: [0.0; 3],
            translation: t,
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let pi = std::f64::consts::PI;
        if self.rotation.iter().any(|&a| !(a > -pi && a <= pi)) {
            return Err(PhantomError::TransformOutOfRange("angles must lie in (-pi, pi]".into()));
        }
        if self.translation.iter().any(|t| !t.is_finite()) {
            return Err(PhantomError::TransformOutOfRange("translation must be finite".into()));
        }
        Ok(())
    }

    fn matrix(&self) -> [[f64; 3]; 3] {
        let [a, b, c] = self.rotation;
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
        matmul(&rz, &matmul(&ry, &rx))
    }

    fn center(dims: [usize; 3]) -> [f64; 3] {
        dims.map(|d| (d as f64 - 1.0) / 2.0)
    }

    pub fn apply(&self, p: [f64; 3], dims: [usize; 3]) -> [f64; 3] {
        let r = self.matrix();
        let c = Self::center(dims);
        let q = [0, 1, 2].map(|a| p[a] - c[a]);
        [0, 1, 2].map(|i| (0..3).map(|j| r[i][j] * q[j]).sum::<f64>() + c[i] + self.translation[i])
    }

    pub fn apply_inverse(&self, p: [f64; 3], dims: [usize; 3]) -> [f64; 3] {
        let r = self.matrix();
        let c = Self::center(dims);
        let q = [0, 1, 2].map(|a| p[a] - c[a] - self.translation[a]);
        // R is orthonormal, so its inverse is its transpose.
        [0, 1, 2].map(|i| (0..3).map(|j| r[j][i] * q[j]).sum::<f64>() + c[i])
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn nearest(p: [f64; 3], dims: [usize; 3]) -> Option<[usize; 3]> {
    let r = p.map(|v| v.round());
    (0..3)
        .all(|a| r[a] >= 0.0 && r[a] < dims[a] as f64)
        .then(|| r.map(|v| v as usize))
}

/// Resample labels with nearest neighbour: `out(p) = lm(source(p))`, background outside.
pub fn warp_labels_nn(lm: &LabelMap, source: impl Fn([f64; 3]) -> [f64; 3]) -> LabelMap {
    let g = *lm.grid();
    let labels = (0..g.len())
        .map(|i| {
            let p = g.coords(i).map(|v| v as f64);
            nearest(source(p), g.dims).map_or(0, |[x, y, z]| lm.get(x, y, z))
        })
        .collect();
    LabelMap::new(g, labels, lm.num_labels()).expect("labels come from the input")
}

/// Trilinear resampling: `out(p) = vol(source(p))`, zero outside.
pub fn warp_intensity_linear(vol: &Volume, source: impl Fn([f64; 3]) -> [f64; 3]) -> Volume {
    let g = *vol.grid();
    let [nx, ny, nz] = g.dims;
    let at = |x: isize, y: isize, z: isize| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
            0.0
        } else {
            vol.get(x as usize, y as usize, z as usize) as f64
        }
    };
    let data = (0..g.len())
        .map(|i| {
            let q = source(g.coords(i).map(|v| v as f64));
            let f = q.map(f64::floor);
            let w = [0, 1, 2].map(|a| q[a] - f[a]);
            let [x0, y0, z0] = f.map(|v| v as isize);
            let mut s = 0.0;
            for (dz, wz) in [(0, 1.0 - w[2]), (1, w[2])] {
                for (dy, wy) in [(0, 1.0 - w[1]), (1, w[1])] {
                    for (dx, wx) in [(0, 1.0 - w[0]), (1, w[0])] {
                        let wt = wx * wy * wz;
                        if wt != 0.0 {
                            s += wt * at(x0 + dx, y0 + dy, z0 + dz);
                        }
                    }
                }
            }
            s as f32
        })
        .collect();
    Volume::new(g, data).expect("finite interpolation")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rescan {
    pub t1: Volume,
    pub gt: LabelMap,
    pub transform: RigidTransform,
}

/// Second acquisition of `phantom` after rigid motion `transform`, with fresh noise.
pub fn simulate_rescan(phantom: &Phantom, transform: &RigidTransform, noise_seed: u64) -> Result<Rescan, PhantomError> {
    transform.validate()?;
    let dims = phantom.spec.dims;
    for (t, r, d) in (0..3).map(|a| (transform.translation[a], transform.rotation[a], dims[a])) {
        if t.abs() > d as f64 / 8.0 {
            return Err(PhantomError::TransformOutOfRange(format!(
                "translation {:?} exceeds dims/8",
                transform.translation
            )));
        }
        if r.abs() > 0.2 {
            return Err(PhantomError::TransformOutOfRange(format!(
                "rotation {:?} exceeds 0.2 rad",
                transform.rotation
            )));
        }
    }
    let g = phantom.gt.grid();
    let fg: Vec<usize> = (0..g.len()).filter(|&i| phantom.gt.labels()[i] > 0).collect();
    let lost = fg
        .iter()
        .filter(|&&i| nearest(transform.apply(g.coords(i).map(|v| v as f64), dims), dims).is_none())
        .count();
    let fraction = lost as f64 / fg.len().max(1) as f64;
    if fraction > 0.05 {
        return Err(PhantomError::OutOfFrame { fraction });
    }
    let back = |p| transform.apply_inverse(p, dims);
    let clean = warp_intensity_linear(&phantom.clean, back);
    Ok(Rescan {
        t1: add_noise(&clean, phantom.spec.noise_sigma, noise_seed),
        gt: warp_labels_nn(&phantom.gt, back),
        transform: *transform,
    })
}

/// Map a segmentation of the rescan back into scan space using the known motion.
pub fn rescan_to_scan(seg_rescan: &LabelMap, transform: &RigidTransform) -> LabelMap {
    let dims = seg_rescan.grid().dims;
    warp_labels_nn(seg_rescan, |p| transform.apply(p, dims))
}

/// Imitation of a manual rater: each voxel on a label boundary takes the label of a
/// random 6-neighbour with probability `rate`.
pub fn noisy_rater(gt: &LabelMap, rate: f64, seed: u64) -> LabelMap {
    let g = *gt.grid();
    let [nx, ny, nz] = g.dims;
    let labels = (0..g.len())
        .map(|i| {
            let [x, y, z] = g.coords(i);
            let own = gt.labels()[i];
            let mut nbrs = Vec::with_capacity(6);
            if x > 0 {
                nbrs.push(gt.get(x - 1, y, z));
            }
            if x + 1 < nx {
                nbrs.push(gt.get(x + 1, y, z));
            }
            if y > 0 {
                nbrs.push(gt.get(x, y - 1, z));
            }
            if y + 1 < ny {
                nbrs.push(gt.get(x, y + 1, z));
            }
            if z > 0 {
                nbrs.push(gt.get(x, y, z - 1));
            }
            if z + 1 < nz {
                nbrs.push(gt.get(x, y, z + 1));
            }
            if nbrs.iter().all(|&l| l == own) || hash_uniform(seed, RATER_TAG, i as u64) >= rate {
                return own;
            }
            let pick = (hash_uniform(seed, RATER_TAG ^ 1, i as u64) * nbrs.len() as f64) as usize;
            nbrs[pick.min(nbrs.len() - 1)]
        })
        .collect();
    LabelMap::new(g, labels, gt.num_labels()).expect("labels come from the input")
}
