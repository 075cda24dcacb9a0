//! Phantom datasets on disk: a directory of AVOL files plus `index.json`.
//!
//! Each entry `{id}` has `{id}_t1.avol` (raw intensity), `{id}_gt.avol`,
//! `{id}_mask.avol` and `{id}_prior.avol`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{id_seed, Subject};
use crate::error::{Error, Result};
use crate::phantom::{foreground_mask, generate_pool, simulate_rescan, Phantom, PhantomSpec, RigidTransform};
use crate::priors::synthetic_prior;
use crate::rng::{mix_seed, seeded};
use crate::volume::avol::{read_labels, read_volume, write_avol, AvolData};
use crate::volume::{normalize_intensity, LabelMap, Volume};

pub const INDEX_FILE: &str = "index.json";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Labeled,
    Unlabeled,
    Test,
    Rescan,
}

impl Role {
    fn tag(self) -> u64 {
        match self {
            Role::Labeled => 1,
            Role::Unlabeled => 2,
            Role::Test => 3,
            Role::Rescan => 4,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Role::Labeled => "lab",
            Role::Unlabeled => "unl",
            Role::Test => "test",
            Role::Rescan => "rescan",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub role: Role,
    pub spec: PhantomSpec,
    /// For rescans: the test subject that was re-acquired.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan_of: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<RigidTransform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub generator: DatasetSpec,
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn ids(&self, role: Role) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.role == role)
            .map(|e| e.id.as_str())
            .collect()
    }
}

/// Pool sizes and phantom template of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    /// Every test subject up to this count also gets a rescan.
    pub n_rescan: usize,
    pub stratify: bool,
    pub seed: u64,
    pub template: PhantomSpec,
    pub prior_strength: f64,
    /// Largest rescan rotation per axis (radians) and translation per axis (voxels).
    pub max_rotation: f64,
    pub max_translation: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_labeled: 10,
            n_unlabeled: 0,
            n_test: 8,
            n_rescan: 0,
            stratify: true,
            seed: 1,
            template: PhantomSpec::default(),
            prior_strength: 1.0,
            max_rotation: 0.05,
            max_translation: 1.5,
        }
    }
}

/// One generated item, held in memory.
#[derive(Debug, Clone)]
pub struct Item {
    pub entry: IndexEntry,
    pub t1: Volume,
    pub gt: LabelMap,
    pub mask: LabelMap,
    pub prior: LabelMap,
}

impl Item {
    fn from_phantom(ph: Phantom, role: Role, prior_strength: f64, seed: u64) -> Result<Item> {
        let prior = synthetic_prior(&ph.gt, prior_strength, &mut seeded(id_seed(seed, &ph.id)))?;
        Ok(Item {
            entry: IndexEntry {
                id: ph.id,
                role,
                spec: ph.spec,
                scan_of: None,
                transform: None,
            },
            t1: ph.t1,
            gt: ph.gt,
            mask: ph.mask,
            prior,
        })
    }

    pub fn subject(&self) -> Result<Subject> {
        Ok(Subject {
            id: self.entry.id.clone(),
            t1: normalize_intensity(&self.t1, &self.mask)?,
            prior: self.prior.clone(),
            gt: Some(self.gt.clone()),
        })
    }
}

fn random_transform(spec: &DatasetSpec, i: usize) -> RigidTransform {
    let mut rng = seeded(mix_seed(spec.seed, &[Role::Rescan.tag(), i as u64]));
    let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let rotation = [0; 3].map(|_| sym(spec.max_rotation));
    let translation = [0; 3].map(|_| sym(spec.max_translation));
    RigidTransform { rotation, translation }
}

/// Generate every pool of `spec` in memory. Pools are seeded by role, so growing one
/// pool leaves the others unchanged.
pub fn generate_items(spec: &DatasetSpec) -> Result<Vec<Item>> {
    if spec.n_rescan > spec.n_test {
        return Err(Error::Config(format!(
            "n_rescan {} exceeds n_test {}",
            spec.n_rescan, spec.n_test
        )));
    }
    let mut items = Vec::new();
    let mut test_phantoms = Vec::new();
    for (role, n) in [
        (Role::Labeled, spec.n_labeled),
        (Role::Unlabeled, spec.n_unlabeled),
        (Role::Test, spec.n_test),
    ] {
        if n == 0 {
            continue;
        }
        let pool = generate_pool(
            n,
            spec.stratify,
            mix_seed(spec.seed, &[role.tag()]),
            &spec.template,
            role.prefix(),
        )?;
        for ph in pool {
            if role == Role::Test {
                test_phantoms.push(ph.clone());
            }
            items.push(Item::from_phantom(ph, role, spec.prior_strength, spec.seed)?);
        }
    }
    for (i, ph) in test_phantoms.iter().take(spec.n_rescan).enumerate() {
        let transform = random_transform(spec, i);
        let r = simulate_rescan(ph, &transform, mix_seed(ph.noise_seed(), &[Role::Rescan.tag()]))?;
        let id = format!("{}-{}", ph.id, Role::Rescan.prefix());
        let prior = synthetic_prior(&r.gt, spec.prior_strength, &mut seeded(id_seed(spec.seed, &id)))?;
        items.push(Item {
            entry: IndexEntry {
                id,
                role: Role::Rescan,
                spec: ph.spec,
                scan_of: Some(ph.id.clone()),
                transform: Some(transform),
            },
            mask: foreground_mask(&r.gt),
            t1: r.t1,
            gt: r.gt,
            prior,
        });
    }
    Ok(items)
}

fn file(dir: &Path, id: &str, kind: &str) -> PathBuf {
    dir.join(format!("{id}_{kind}.avol"))
}

fn avol_err(path: &Path, e: crate::volume::avol::AvolError) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Write a dataset directory and return its index.
pub fn generate_dataset(dir: impl AsRef<Path>, spec: &DatasetSpec) -> Result<DatasetIndex> {
    let dir = dir.as_ref();
    let items = generate_items(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for it in &items {
        let id = &it.entry.id;
        let files: [(&str, AvolData); 4] = [
            ("t1", it.t1.clone().into()),
            ("gt", it.gt.clone().into()),
            ("mask", it.mask.clone().into()),
            ("prior", it.prior.clone().into()),
        ];
        for (kind, data) in files {
            let path = file(dir, id, kind);
            write_avol(&path, &data).map_err(|e| avol_err(&path, e))?;
        }
    }
    let index = DatasetIndex {
        version: INDEX_VERSION,
        generator: spec.clone(),
        entries: items.into_iter().map(|it| it.entry).collect(),
    };
    let path = dir.join(INDEX_FILE);
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_index(dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    let path = dir.as_ref().join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if index.version != INDEX_VERSION {
        return Err(Error::Data(format!("unsupported index version {}", index.version)));
    }
    Ok(index)
}

pub fn load_item(dir: impl AsRef<Path>, entry: &IndexEntry) -> Result<Item> {
    let dir = dir.as_ref();
    let id = &entry.id;
    let labels = |kind| {
        let p = file(dir, id, kind);
        read_labels(&p).map_err(|e| avol_err(&p, e))
    };
    let p = file(dir, id, "t1");
    Ok(Item {
        entry: entry.clone(),
        t1: read_volume(&p).map_err(|e| avol_err(&p, e))?,
        gt: labels("gt")?,
        mask: labels("mask")?,
        prior: labels("prior")?,
    })
}

/// Subjects of one role, in index order.
pub fn load_subjects(dir: impl AsRef<Path>, role: Role) -> Result<Vec<Subject>> {
    let dir = dir.as_ref();
    read_index(dir)?
        .entries
        .iter()
        .filter(|e| e.role == role)
        .map(|e| load_item(dir, e)?.subject())
        .collect()
}

/// A test subject, its rescan and the motion between them.
#[derive(Debug, Clone)]
pub struct RescanPair {
    pub scan: Subject,
    pub rescan: Subject,
    pub transform: RigidTransform,
}

pub fn load_rescan_pairs(dir: impl AsRef<Path>) -> Result<Vec<RescanPair>> {
    let dir = dir.as_ref();
    let index = read_index(dir)?;
    index
        .entries
        .iter()
        .filter(|e| e.role == Role::Rescan)
        .map(|e| {
            let scan_id = e
                .scan_of
                .as_ref()
                .ok_or_else(|| Error::Data(format!("rescan {} has no scan_of", e.id)))?;
            let scan_entry = index
                .entries
                .iter()
                .find(|s| &s.id == scan_id)
                .ok_or_else(|| Error::Data(format!("rescan {} refers to unknown {scan_id}", e.id)))?;
            let transform = e
                .transform
                .ok_or_else(|| Error::Data(format!("rescan {} has no transform", e.id)))?;
            Ok(RescanPair {
                scan: load_item(dir, scan_entry)?.subject()?,
                rescan: load_item(dir, e)?.subject()?,
                transform,
            })
        })
        .collect()
}
