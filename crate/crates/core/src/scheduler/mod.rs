//! Transfer-learning order and training of assemblies.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn3d::{
    adam_step, backward, dice_loss, forward_with_cache, mixup, one_hot, sample_lambda, AdamConfig, AdamState, Dropout,
    NnError, Tensor, UNetConfig, UNetParams,
};
use crate::tiling::TilingError;
use crate::volume::{LabelMap, MultiChannelVolume};

mod assembly;
mod dag;

pub use assembly::{
    finetune_assembly, train_assembly, AssemblyManifest, Event, EventKind, MemberRecord, Scale, TrainedAssembly,
};
pub use dag::{build_transfer_dag, parent_of, Node, TransferDag};

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("invalid training plan: {0}")]
    InvalidPlan(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("member {tile:?}: {source}")]
    Member {
        tile: Node,
        #[source]
        source: NnError,
    },
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl ScheduleError {
    pub fn is_numerical(&self) -> bool {
        match self {
            ScheduleError::Member { source, .. } | ScheduleError::Nn(source) => source.is_numerical(),
            _ => false,
        }
    }
}

/// Optimisation schedule for every member of an assembly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub epochs_main: usize,
    pub epochs_avg: usize,
    pub lr: f64,
    pub mixup_alpha: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            epochs_main: 10,
            epochs_avg: 2,
            lr: 1e-3,
            mixup_alpha: 0.4,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: &str| Err(ScheduleError::InvalidPlan(m.into()));
        if self.epochs_main == 0 {
            return bad("epochs_main must be at least 1");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.mixup_alpha >= 0.0 && self.mixup_alpha.is_finite()) {
            return bad("mixup_alpha must be finite and non-negative");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// One training pair as network tensors: `(C, Z, Y, X)` input and one-hot target.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
}

impl Sample {
    pub fn new(input: &MultiChannelVolume, labels: &LabelMap, num_classes: usize) -> Result<Sample, ScheduleError> {
        if input.grid().dims != labels.grid().dims {
            return Err(ScheduleError::Data(format!(
                "input grid {:?} vs label grid {:?}",
                input.grid().dims,
                labels.grid().dims
            )));
        }
        Ok(Sample {
            input: Tensor::from_channels(input),
            target: one_hot(labels, num_classes)?,
        })
    }
}

/// Copy the descending path of `parent`; draw a fresh decoder and head from `rng`.
pub fn transfer_weights<R: Rng + ?Sized>(
    parent: &UNetParams<f32>,
    config: &UNetConfig,
    rng: &mut R,
) -> Result<UNetParams<f32>, NnError> {
    parent.check_config(config)?;
    let (decoder, head) = UNetParams::init_decoder(config, rng);
    Ok(UNetParams {
        config: *config,
        encoder: parent.encoder.clone(),
        decoder,
        head,
    })
}

/// Running mean: `avg + (new - avg) / (k + 1)`, where `k` models are already averaged.
pub fn swa_update(avg: &UNetParams<f32>, new: &UNetParams<f32>, k: usize) -> Result<UNetParams<f32>, NnError> {
    if k == 0 {
        return Err(NnError::Config("swa_update needs k >= 1".into()));
    }
    new.check_config(&avg.config)?;
    let mut out = avg.clone();
    let w = 1.0 / (k as f64 + 1.0);
    for (o, n) in out.tensors_mut().into_iter().zip(new.tensors()) {
        for (a, &b) in o.data_mut().iter_mut().zip(n.data()) {
            *a = (*a as f64 + (b as f64 - *a as f64) * w) as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Mean loss of each epoch, main epochs first.
    pub epoch_losses: Vec<f64>,
}

impl TrainStats {
    pub fn initial_loss(&self) -> f64 {
        self.epoch_losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

fn check_samples(config: &UNetConfig, samples: &[Sample]) -> Result<(), ScheduleError> {
    let first = samples
        .first()
        .ok_or_else(|| ScheduleError::Data("empty training set".into()))?;
    let [c, z, y, x] = first.input.dims4()?;
    if c != config.in_channels {
        return Err(NnError::ChannelMismatch {
            expected: config.in_channels,
            found: c,
        }
        .into());
    }
    config.check_spatial([x, y, z])?;
    for (i, s) in samples.iter().enumerate() {
        if s.input.shape() != first.input.shape() || s.target.shape() != [config.num_classes, z, y, x] {
            return Err(ScheduleError::Data(format!("sample {i} has inconsistent shape")));
        }
    }
    Ok(())
}

/// Train one network with batch size 1, MixUp on consecutive pairs of each shuffled
/// epoch, and a cumulative weight average over the last `epochs_avg` epochs.
pub fn train_unet<R: Rng + ?Sized>(
    init: UNetParams<f32>,
    samples: &[Sample],
    plan: &TrainPlan,
    rng: &mut R,
) -> Result<(UNetParams<f32>, TrainStats), ScheduleError> {
    plan.validate()?;
    check_samples(&init.config, samples)?;
    let mut params = init;
    let mut adam = AdamState::new(&params, plan.adam());
    let mut avg: Option<(UNetParams<f32>, usize)> = None;
    let mut stats = TrainStats {
        epoch_losses: Vec::new(),
    };
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..plan.epochs_main + plan.epochs_avg {
        order.shuffle(rng);
        let mut total = 0.0;
        for i in 0..n {
            let a = &samples[order[i]];
            let b = &samples[order[(i + 1) % n]];
            let lambda = sample_lambda(plan.mixup_alpha, rng);
            let (input, target) = if lambda < 1.0 {
                mixup((&a.input, &a.target), (&b.input, &b.target), lambda)?
            } else {
                (a.input.clone(), a.target.clone())
            };
            let cache = forward_with_cache(&params, &input, Dropout::Sample(rng))?;
            let (loss, grad) = dice_loss(&cache.probs, &target)?;
            if !loss.is_finite() {
                return Err(NnError::NonFinite(format!("loss at epoch {epoch}, step {i}")).into());
            }
            let grads = backward(&params, &cache, &grad)?;
            adam_step(&mut params, &grads, &mut adam).map_err(|e| match e {
                NnError::NonFinite(m) => NnError::NonFinite(format!("{m} at epoch {epoch}, step {i}")),
                other => other,
            })?;
            total += loss as f64;
        }
        stats.epoch_losses.push(total / n as f64);
        if epoch >= plan.epochs_main {
            avg = Some(match avg {
                None => (params.clone(), 1),
                Some((a, k)) => (swa_update(&a, &params, k)?, k + 1),
            });
        }
    }
    Ok((avg.map_or(params, |(a, _)| a), stats))
}
