//! Teacher-student training on pseudo-labelled data.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{finetune_cascade, train_cascade_phase, Cascade, CascadeConfig, PhaseEpochs, Subject};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslPlan {
    /// Epochs of the from-scratch phase on pseudo-labels (both assemblies).
    pub pseudo: PhaseEpochs,
    /// Epochs of the fine-tuning phase on the labelled set.
    pub finetune: PhaseEpochs,
    pub generations: usize,
}

impl Default for SslPlan {
    fn default() -> Self {
        SslPlan {
            pseudo: PhaseEpochs {
                epochs_main: 12,
                epochs_avg: 6,
            },
            finetune: PhaseEpochs {
                epochs_main: 6,
                epochs_avg: 3,
            },
            generations: 1,
        }
    }
}

impl SslPlan {
    pub fn validate(&self) -> Result<()> {
        if self.generations == 0 {
            return Err(Error::Config("generations must be at least 1".into()));
        }
        for e in [self.pseudo, self.finetune] {
            if e.epochs_main == 0 {
                return Err(Error::Config(format!("invalid epochs {e:?}")));
            }
        }
        Ok(())
    }
}

/// Replace the labels of each subject by the teacher's cascade segmentation.
pub fn pseudo_label(teacher: &Cascade, unlabeled: &[Subject]) -> Result<Vec<Subject>> {
    unlabeled
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let out = teacher
                .segment(s)
                .map_err(|e| Error::Data(format!("pseudo-labelling sample {i} ({}): {e}", s.id)))?;
            Ok(s.with_labels(out.fine.labels))
        })
        .collect()
}

fn ids(subjects: &[Subject]) -> Vec<String> {
    subjects.iter().map(|s| s.id.clone()).collect()
}

fn check_disjoint(pseudo: &[Subject], labeled: &[Subject]) -> Result<()> {
    let lab: BTreeSet<&str> = labeled.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = pseudo.iter().find(|s| lab.contains(s.id.as_str())) {
        return Err(Error::Data(format!(
            "subject {} is in both the pseudo and labelled sets",
            s.id
        )));
    }
    Ok(())
}

/// Train a fresh cascade on `pseudo`, then fine-tune it on `labeled`.
pub fn train_student(
    pseudo: &[Subject],
    labeled: &[Subject],
    plan: &SslPlan,
    config: &CascadeConfig,
    generation: usize,
) -> Result<Cascade> {
    plan.validate()?;
    if pseudo.is_empty() || labeled.is_empty() {
        return Err(Error::Data(
            "student training needs pseudo-labelled and labelled subjects".into(),
        ));
    }
    check_disjoint(pseudo, labeled)?;
    let student = train_cascade_phase(
        config,
        pseudo,
        &format!("gen{generation}-pseudo"),
        Some((plan.pseudo, plan.pseudo)),
    )?;
    finetune_cascade(
        &student,
        labeled,
        &format!("gen{generation}-finetune"),
        (plan.finetune, plan.finetune),
    )
}

/// Lineage record of one generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub generation: usize,
    pub teacher: String,
    pub student: String,
    pub pseudo_ids: Vec<String>,
    pub labeled_ids: Vec<String>,
}

impl GenerationManifest {
    /// True when the student's from-scratch phase saw none of the labelled subjects.
    pub fn pseudo_phase_excludes_labeled(&self, student: &Cascade) -> bool {
        let Some(first) = student.phases.first() else {
            return false;
        };
        let lab: BTreeSet<&String> = self.labeled_ids.iter().collect();
        first.subject_ids == self.pseudo_ids && !first.subject_ids.iter().any(|id| lab.contains(id))
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub manifest: GenerationManifest,
    pub student: Cascade,
}

pub fn model_id(generation: usize) -> String {
    if generation == 0 {
        "teacher".into()
    } else {
        format!("student-{generation}")
    }
}

/// Run `plan.generations` rounds; each round's teacher is the previous round's student.
pub fn ssl_generations(
    teacher: &Cascade,
    unlabeled: &[Subject],
    labeled: &[Subject],
    plan: &SslPlan,
) -> Result<Vec<Generation>> {
    plan.validate()?;
    check_disjoint(unlabeled, labeled)?;
    let mut out: Vec<Generation> = Vec::with_capacity(plan.generations);
    for g in 1..=plan.generations {
        let current = out.last().map_or(teacher, |gen| &gen.student);
        let pseudo = pseudo_label(current, unlabeled)?;
        let student = train_student(&pseudo, labeled, plan, &teacher.config, g)?;
        out.push(Generation {
            manifest: GenerationManifest {
                generation: g,
                teacher: model_id(g - 1),
                student: model_id(g),
                pseudo_ids: ids(&pseudo),
                labeled_ids: ids(labeled),
            },
            student,
        });
    }
    Ok(out)
}
