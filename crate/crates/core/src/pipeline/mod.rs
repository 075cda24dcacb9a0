//! End-to-end cascade: subjects, configuration, training, segmentation and scoring.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{mean_dice, scan_rescan_consistency};
use crate::inference::{cascade_segment, coarse_input, fine_input, segment_assembly, CascadeOutput};
use crate::nn3d::UNetConfig;
use crate::phantom::{noisy_rater, Phantom, RigidTransform};
use crate::priors::synthetic_prior;
use crate::rng::{mix_seed, seeded};
use crate::scheduler::{finetune_assembly, train_assembly, Scale, TrainPlan, TrainedAssembly};
use crate::tiling::{build_tile_grid, TileGrid};
use crate::volume::{
    downsample_label_nn, normalize_intensity, upsample_label_nn, GridSpec, Label, LabelMap, MultiChannelVolume, Volume,
};

pub mod data;
pub mod report;

pub const CONFIG_VERSION: u32 = 1;

/// Stable seed for a named item.
pub fn id_seed(seed: u64, id: &str) -> u64 {
    let words: Vec<u64> = id.bytes().map(u64::from).collect();
    mix_seed(seed, &words)
}

/// One subject: normalized intensity, atlas prior and (when labelled) ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub t1: Volume,
    pub prior: LabelMap,
    pub gt: Option<LabelMap>,
}

impl Subject {
    /// Normalize the phantom intensity inside its mask and draw a prior of the given strength.
    pub fn from_phantom(ph: &Phantom, prior_strength: f64, seed: u64) -> Result<Subject> {
        let prior = synthetic_prior(&ph.gt, prior_strength, &mut seeded(id_seed(seed, &ph.id)))?;
        Ok(Subject {
            id: ph.id.clone(),
            t1: normalize_intensity(&ph.t1, &ph.mask)?,
            prior,
            gt: Some(ph.gt.clone()),
        })
    }

    pub fn gt(&self) -> Result<&LabelMap> {
        self.gt
            .as_ref()
            .ok_or_else(|| Error::Data(format!("subject {} has no labels", self.id)))
    }

    /// Mirror image with left/right labels swapped.
    pub fn flipped(&self, pairs: &[(Label, Label)]) -> Result<Subject> {
        Ok(Subject {
            id: format!("{}-flip", self.id),
            t1: self.t1.flip_sagittal(),
            prior: self.prior.flip_sagittal(pairs)?,
            gt: self.gt.as_ref().map(|g| g.flip_sagittal(pairs)).transpose()?,
        })
    }

    /// Same subject with different labels (used for pseudo-labels).
    pub fn with_labels(&self, gt: LabelMap) -> Subject {
        Subject {
            gt: Some(gt),
            ..self.clone()
        }
    }
}

/// Epoch counts of one training phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseEpochs {
    pub epochs_main: usize,
    pub epochs_avg: usize,
}

/// Tiling, network and optimiser settings of one assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssemblySpec {
    pub counts: [usize; 3],
    pub tile_dims: [usize; 3],
    pub base_filters: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    pub epochs_main: usize,
    pub epochs_avg: usize,
    pub lr: f64,
    pub mixup_alpha: f64,
}

impl AssemblySpec {
    fn net(&self, in_channels: usize, num_classes: usize) -> UNetConfig {
        UNetConfig {
            in_channels,
            num_classes,
            base_filters: self.base_filters,
            depth: self.depth,
            dropout_rate: self.dropout_rate,
        }
    }

    fn plan(&self, seed: u64, workers: usize, epochs: Option<PhaseEpochs>) -> TrainPlan {
        let e = epochs.unwrap_or(PhaseEpochs {
            epochs_main: self.epochs_main,
            epochs_avg: self.epochs_avg,
        });
        TrainPlan {
            epochs_main: e.epochs_main,
            epochs_avg: e.epochs_avg,
            lr: self.lr,
            mixup_alpha: self.mixup_alpha,
            seed,
            workers,
        }
    }
}

/// Versioned JSON configuration of a two-scale cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    pub version: u32,
    pub grid: [usize; 3],
    pub num_labels: Label,
    pub coarse: AssemblySpec,
    pub fine: AssemblySpec,
    /// Train on mirrored copies as well, swapping these label pairs.
    pub flip_pairs: Option<Vec<(Label, Label)>>,
    /// Stochastic forward passes per tile at inference.
    pub passes: usize,
    pub seed: u64,
    pub workers: usize,
}

impl CascadeConfig {
    /// Small configuration for 32^3 phantoms with 2x2x2 tiles at both scales.
    pub fn desk_default() -> CascadeConfig {
        let spec = |counts, tile_dims| AssemblySpec {
            counts,
            tile_dims,
            base_filters: 4,
            depth: 2,
            dropout_rate: 0.1,
            epochs_main: 15,
            epochs_avg: 3,
            lr: 1e-3,
            mixup_alpha: 0.4,
        };
        CascadeConfig {
            version: CONFIG_VERSION,
            grid: [32, 32, 32],
            num_labels: 5,
            coarse: spec([2, 2, 2], [12, 12, 12]),
            fine: spec([2, 2, 2], [24, 24, 24]),
            flip_pairs: Some(vec![(3, 4)]),
            passes: 3,
            seed: 1,
            workers: 1,
        }
    }

    pub fn coarse_grid(&self) -> Result<GridSpec> {
        Ok(GridSpec::isotropic(self.grid)?.halved())
    }

    pub fn tile_grids(&self) -> Result<(TileGrid, TileGrid)> {
        let coarse = build_tile_grid(self.coarse_grid()?, self.coarse.counts, self.coarse.tile_dims)?;
        let fine = build_tile_grid(GridSpec::isotropic(self.grid)?, self.fine.counts, self.fine.tile_dims)?;
        Ok((coarse, fine))
    }

    pub fn coarse_net(&self) -> UNetConfig {
        self.coarse.net(2, self.num_labels as usize)
    }

    pub fn fine_net(&self) -> UNetConfig {
        self.fine.net(3, self.num_labels as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.passes == 0 || self.workers == 0 {
            return Err(Error::Config("passes and workers must be at least 1".into()));
        }
        self.tile_grids()?;
        self.coarse_net().validate()?;
        self.fine_net().validate()?;
        self.coarse_net().check_spatial(self.coarse.tile_dims)?;
        self.fine_net().check_spatial(self.fine.tile_dims)?;
        self.coarse.plan(0, 1, None).validate()?;
        self.fine.plan(0, 1, None).validate()?;
        if let Some(p) = &self.flip_pairs {
            if p.iter()
                .any(|&(a, b)| a >= self.num_labels || b >= self.num_labels || a == b)
            {
                return Err(Error::Config(format!("invalid flip pairs {p:?}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<CascadeConfig> {
        let c: CascadeConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CascadeConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Which subjects a training phase saw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: String,
    pub subject_ids: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CascadeManifest {
    config: CascadeConfig,
    phases: Vec<PhaseRecord>,
}

/// Trained coarse and fine assemblies.
#[derive(Debug, Clone)]
pub struct Cascade {
    pub config: CascadeConfig,
    pub coarse: TrainedAssembly,
    pub fine: TrainedAssembly,
    pub phases: Vec<PhaseRecord>,
}

fn augmented(subjects: &[Subject], config: &CascadeConfig) -> Result<Vec<Subject>> {
    let mut out = subjects.to_vec();
    if let Some(pairs) = &config.flip_pairs {
        for s in subjects {
            out.push(s.flipped(pairs)?);
        }
    }
    Ok(out)
}

fn check_subjects(subjects: &[Subject], config: &CascadeConfig) -> Result<()> {
    if subjects.is_empty() {
        return Err(Error::Data("no training subjects".into()));
    }
    for s in subjects {
        let gt = s.gt()?;
        if s.t1.grid().dims != config.grid || gt.grid().dims != config.grid || s.prior.grid().dims != config.grid {
            return Err(Error::Data(format!(
                "subject {} grid {:?} does not match config grid {:?}",
                s.id,
                s.t1.grid().dims,
                config.grid
            )));
        }
        if gt.num_labels() != config.num_labels {
            return Err(Error::Data(format!(
                "subject {} has {} labels, config expects {}",
                s.id,
                gt.num_labels(),
                config.num_labels
            )));
        }
    }
    Ok(())
}

fn coarse_dataset(subjects: &[Subject]) -> Result<Vec<(MultiChannelVolume, LabelMap)>> {
    subjects
        .iter()
        .map(|s| Ok((coarse_input(&s.t1, &s.prior)?, downsample_label_nn(s.gt()?, 2)?)))
        .collect()
}

/// Fine-scale samples built on the coarse assembly's own predictions.
fn fine_dataset(
    coarse: &TrainedAssembly,
    subjects: &[Subject],
    config: &CascadeConfig,
    seed: u64,
) -> Result<Vec<(MultiChannelVolume, LabelMap)>> {
    subjects
        .iter()
        .map(|s| {
            let cin = coarse_input(&s.t1, &s.prior)?;
            let seg = segment_assembly(coarse, &cin, config.passes, id_seed(seed, &s.id), config.workers)?;
            Ok((fine_input(&s.t1, &s.prior, &seg.labels)?, s.gt()?.clone()))
        })
        .collect()
}

const SALT_COARSE: u64 = 1;
const SALT_FINE: u64 = 2;
const SALT_COARSE_PRED: u64 = 3;
const SALT_SEGMENT: u64 = 4;

/// Train both assemblies from scratch. `phase` names the run in the lineage record and
/// salts every seed, so different phases draw independent streams.
pub fn train_cascade_phase(
    config: &CascadeConfig,
    subjects: &[Subject],
    phase: &str,
    epochs: Option<(PhaseEpochs, PhaseEpochs)>,
) -> Result<Cascade> {
    config.validate()?;
    check_subjects(subjects, config)?;
    let seed = id_seed(config.seed, phase);
    let (coarse_grid, fine_grid) = config.tile_grids()?;
    let train = augmented(subjects, config)?;
    let coarse_plan = config
        .coarse
        .plan(mix_seed(seed, &[SALT_COARSE]), config.workers, epochs.map(|e| e.0));
    let coarse = train_assembly(
        &coarse_grid,
        &coarse_dataset(&train)?,
        &coarse_plan,
        &config.coarse_net(),
        Scale::Coarse,
    )?;
    let fine_data = fine_dataset(&coarse, &train, config, mix_seed(seed, &[SALT_COARSE_PRED]))?;
    let fine_plan = config
        .fine
        .plan(mix_seed(seed, &[SALT_FINE]), config.workers, epochs.map(|e| e.1));
    let fine = train_assembly(&fine_grid, &fine_data, &fine_plan, &config.fine_net(), Scale::Fine)?;
    Ok(Cascade {
        config: config.clone(),
        coarse,
        fine,
        phases: vec![PhaseRecord {
            phase: phase.to_string(),
            subject_ids: subjects.iter().map(|s| s.id.clone()).collect(),
        }],
    })
}

pub fn train_cascade(config: &CascadeConfig, subjects: &[Subject]) -> Result<Cascade> {
    train_cascade_phase(config, subjects, "supervised", None)
}

/// Continue training both assemblies of `cascade` on `subjects`.
pub fn finetune_cascade(
    cascade: &Cascade,
    subjects: &[Subject],
    phase: &str,
    epochs: (PhaseEpochs, PhaseEpochs),
) -> Result<Cascade> {
    let config = &cascade.config;
    check_subjects(subjects, config)?;
    let seed = id_seed(config.seed, phase);
    let train = augmented(subjects, config)?;
    let coarse_plan = config
        .coarse
        .plan(mix_seed(seed, &[SALT_COARSE]), config.workers, Some(epochs.0));
    let coarse = finetune_assembly(&cascade.coarse, &coarse_dataset(&train)?, &coarse_plan)?;
    let fine_data = fine_dataset(&coarse, &train, config, mix_seed(seed, &[SALT_COARSE_PRED]))?;
    let fine_plan = config
        .fine
        .plan(mix_seed(seed, &[SALT_FINE]), config.workers, Some(epochs.1));
    let fine = finetune_assembly(&cascade.fine, &fine_data, &fine_plan)?;
    let mut phases = cascade.phases.clone();
    phases.push(PhaseRecord {
        phase: phase.to_string(),
        subject_ids: subjects.iter().map(|s| s.id.clone()).collect(),
    });
    Ok(Cascade {
        config: config.clone(),
        coarse,
        fine,
        phases,
    })
}

impl Cascade {
    pub fn segment(&self, subject: &Subject) -> Result<CascadeOutput> {
        let seed = id_seed(mix_seed(self.config.seed, &[SALT_SEGMENT]), &subject.id);
        self.segment_seeded(&subject.t1, &subject.prior, seed)
    }

    pub fn segment_seeded(&self, t1: &Volume, prior: &LabelMap, seed: u64) -> Result<CascadeOutput> {
        Ok(cascade_segment(
            &self.coarse,
            &self.fine,
            t1,
            prior,
            self.config.passes,
            seed,
            self.config.workers,
        )?)
    }

    pub fn with_workers(mut self, workers: usize) -> Cascade {
        self.config.workers = workers.max(1);
        self
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.coarse.save(dir.join("coarse"))?;
        self.fine.save(dir.join("fine"))?;
        let manifest = CascadeManifest {
            config: self.config.clone(),
            phases: self.phases.clone(),
        };
        let path = dir.join("cascade.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Cascade> {
        let dir = dir.as_ref();
        let path = dir.join("cascade.json");
        let text = fs::read_to_string(&path)
            .map_err(|_| Error::MissingWeights(format!("no trained cascade at {}", dir.display())))?;
        let manifest: CascadeManifest = serde_json::from_str(&text)?;
        manifest.config.validate()?;
        Ok(Cascade {
            coarse: TrainedAssembly::load(dir.join("coarse"))?,
            fine: TrainedAssembly::load(dir.join("fine"))?,
            config: manifest.config,
            phases: manifest.phases,
        })
    }
}

/// Per-subject mean Dice of the coarse-only and the full cascade output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub id: String,
    pub coarse_dice: f64,
    pub fine_dice: f64,
}

pub fn score_output(subject: &Subject, out: &CascadeOutput) -> Result<SubjectScore> {
    let gt = subject.gt()?;
    let coarse_up = upsample_label_nn(&out.coarse.labels, gt.grid())?;
    Ok(SubjectScore {
        id: subject.id.clone(),
        coarse_dice: mean_dice(&coarse_up, gt)?,
        fine_dice: mean_dice(&out.fine.labels, gt)?,
    })
}

pub fn evaluate_cascade(cascade: &Cascade, subjects: &[Subject]) -> Result<Vec<SubjectScore>> {
    subjects.iter().map(|s| score_output(s, &cascade.segment(s)?)).collect()
}

/// Scan-rescan agreement of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescanScore {
    pub id: String,
    /// Automatic scan vs automatic rescan.
    pub intra_method: f64,
    /// Automatic rescan vs the simulated manual segmentation of the scan.
    pub expert_method: f64,
}

/// Noise level of the simulated manual rater.
pub const RATER_RATE: f64 = 0.5;

pub fn scan_rescan(
    cascade: &Cascade,
    scan: &Subject,
    rescan: &Subject,
    transform: &RigidTransform,
) -> Result<RescanScore> {
    let a = cascade.segment(scan)?.fine.labels;
    let b = cascade.segment(rescan)?.fine.labels;
    let manual = noisy_rater(scan.gt()?, RATER_RATE, id_seed(cascade.config.seed, &scan.id));
    Ok(RescanScore {
        id: scan.id.clone(),
        intra_method: scan_rescan_consistency(&a, &b, transform)?,
        expert_method: scan_rescan_consistency(&manual, &b, transform)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid_and_round_trips() {
        let c = CascadeConfig::desk_default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(CascadeConfig::from_json(&text).unwrap(), c);
        let (coarse, fine) = c.tile_grids().unwrap();
        assert_eq!(coarse.global.dims, [16, 16, 16]);
        assert_eq!(fine.origins[0], vec![0, 8]);
        assert_eq!(c.coarse_net().in_channels, 2);
        assert_eq!(c.fine_net().in_channels, 3);
    }

    #[test]
    fn unknown_keys_and_versions_rejected() {
        let mut v = serde_json::to_value(CascadeConfig::desk_default()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(CascadeConfig::from_json(&v.to_string()).is_err());
        let mut v = serde_json::to_value(CascadeConfig::desk_default()).unwrap();
        v["version"] = serde_json::json!(2);
        assert!(CascadeConfig::from_json(&v.to_string()).is_err());
        let mut c = CascadeConfig::desk_default();
        c.fine.tile_dims = [22, 24, 24];
        assert!(c.validate().is_err());
    }

    #[test]
    fn id_seeds_differ() {
        assert_ne!(id_seed(1, "a"), id_seed(1, "b"));
        assert_ne!(id_seed(1, "a"), id_seed(2, "a"));
    }
}
