use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::dag::{build_transfer_dag, Node, TransferDag};
use super::{train_unet, transfer_weights, Sample, ScheduleError, TrainPlan, TrainStats};
use crate::error::{Error, Result};
use crate::nn3d::{encode_weights, read_weights, write_weights, UNetConfig, UNetParams};
use crate::rng::{seeded, tile_seed};
use crate::tiling::{extract_label_tile, extract_tile, TileGrid};
use crate::volume::{LabelMap, MultiChannelVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Start,
    Finish,
}

/// Scheduler log entry. `seq` is a total order over all events of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: usize,
    pub tile: Node,
    pub kind: EventKind,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub tile: Node,
    pub parent: Option<Node>,
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub start_seconds: f64,
    pub finish_seconds: f64,
    pub weights_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyManifest {
    pub scale: Scale,
    pub config: UNetConfig,
    pub plan: TrainPlan,
    pub tile_grid: TileGrid,
    /// True when members were warm-started from an existing assembly.
    pub warm_start: bool,
    pub edges: Vec<(Node, Node)>,
    pub members: Vec<MemberRecord>,
    pub events: Vec<Event>,
}

/// One network per tile, all sharing a configuration.
#[derive(Debug, Clone)]
pub struct TrainedAssembly {
    pub tile_grid: TileGrid,
    pub scale: Scale,
    pub config: UNetConfig,
    pub members: BTreeMap<Node, UNetParams<f32>>,
    pub manifest: AssemblyManifest,
}

fn weights_file(node: Node) -> String {
    format!("member_{}_{}_{}.awts", node[0], node[1], node[2])
}

impl TrainedAssembly {
    pub fn member(&self, node: Node) -> Option<&UNetParams<f32>> {
        self.members.get(&node)
    }

    /// Serialized weights of every member, in tile order.
    pub fn weight_bytes(&self) -> Vec<(Node, Vec<u8>)> {
        self.members.iter().map(|(&n, p)| (n, encode_weights(p))).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (&node, p) in &self.members {
            let path = dir.join(weights_file(node));
            write_weights(&path, p)?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<TrainedAssembly> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path)
            .map_err(|_| Error::MissingWeights(format!("no assembly manifest at {}", path.display())))?;
        let manifest: AssemblyManifest = serde_json::from_str(&text)?;
        let mut members = BTreeMap::new();
        for tile in manifest.tile_grid.tiles() {
            let file = dir.join(weights_file(tile.index));
            if !file.exists() {
                return Err(Error::MissingWeights(file.display().to_string()));
            }
            let p = read_weights(&file)?;
            p.check_config(&manifest.config)?;
            members.insert(tile.index, p);
        }
        Ok(TrainedAssembly {
            tile_grid: manifest.tile_grid.clone(),
            scale: manifest.scale,
            config: manifest.config,
            members,
            manifest,
        })
    }
}

struct Shared<T> {
    ready: BTreeSet<Node>,
    done: BTreeMap<Node, Arc<T>>,
    failed: Option<ScheduleError>,
    panic: Option<Box<dyn Any + Send>>,
    events: Vec<Event>,
}

/// Run `task` on every node of `dag` with up to `workers` threads. A node starts only
/// after its parent has finished, and receives the parent's result.
fn execute<T, F>(dag: &TransferDag, workers: usize, task: F) -> Result<(BTreeMap<Node, T>, Vec<Event>), ScheduleError>
where
    T: Send + Sync,
    F: Fn(Node, Option<&T>) -> Result<T, ScheduleError> + Sync,
{
    let total = dag.len();
    let state = Mutex::new(Shared {
        ready: dag.roots().into_iter().collect(),
        done: BTreeMap::new(),
        failed: None,
        panic: None,
        events: Vec::new(),
    });
    let wake = Condvar::new();
    let clock = Instant::now();
    let log = |s: &mut Shared<T>, tile, kind| {
        let seq = s.events.len();
        s.events.push(Event {
            seq,
            tile,
            kind,
            seconds: clock.elapsed().as_secs_f64(),
        });
    };

    thread::scope(|scope| {
        for _ in 0..workers.clamp(1, total.max(1)) {
            scope.spawn(|| loop {
                let (node, parent) = {
                    let mut s = state.lock().unwrap();
                    let node = loop {
                        if s.failed.is_some() || s.panic.is_some() || s.done.len() == total {
                            return;
                        }
                        if let Some(n) = s.ready.pop_first() {
                            break n;
                        }
                        s = wake.wait(s).unwrap();
                    };
                    log(&mut s, node, EventKind::Start);
                    let parent = dag.parent(node).map(|p| Arc::clone(&s.done[&p]));
                    (node, parent)
                };
                let outcome = catch_unwind(AssertUnwindSafe(|| task(node, parent.as_deref())));
                drop(parent);
                let mut s = state.lock().unwrap();
                match outcome {
                    Ok(Ok(value)) => {
                        s.done.insert(node, Arc::new(value));
                        log(&mut s, node, EventKind::Finish);
                        s.ready.extend(dag.children(node));
                    }
                    Ok(Err(e)) => {
                        s.failed.get_or_insert(e);
                    }
                    Err(payload) => {
                        s.panic.get_or_insert(payload);
                    }
                }
                wake.notify_all();
            });
        }
    });

    let s = state.into_inner().unwrap();
    if let Some(p) = s.panic {
        resume_unwind(p);
    }
    if let Some(e) = s.failed {
        return Err(e);
    }
    let results = s
        .done
        .into_iter()
        .map(|(n, v)| (n, Arc::try_unwrap(v).ok().expect("no outstanding references")))
        .collect();
    Ok((results, s.events))
}

struct Outcome {
    params: UNetParams<f32>,
    stats: TrainStats,
    seed: u64,
}

fn check_dataset(
    grid: &TileGrid,
    dataset: &[(MultiChannelVolume, LabelMap)],
    config: &UNetConfig,
) -> Result<(), ScheduleError> {
    if dataset.is_empty() {
        return Err(ScheduleError::Data("empty training set".into()));
    }
    config.validate()?;
    config.check_spatial(grid.tile_dims)?;
    for (i, (x, y)) in dataset.iter().enumerate() {
        if x.grid().dims != grid.global.dims || y.grid().dims != grid.global.dims {
            return Err(ScheduleError::Data(format!(
                "subject {i} has grid {:?}, assembly expects {:?}",
                x.grid().dims,
                grid.global.dims
            )));
        }
        if x.num_channels() != config.in_channels {
            return Err(ScheduleError::Data(format!(
                "subject {i} has {} channels, network expects {}",
                x.num_channels(),
                config.in_channels
            )));
        }
    }
    Ok(())
}

fn tile_samples(
    grid: &TileGrid,
    node: Node,
    dataset: &[(MultiChannelVolume, LabelMap)],
    num_classes: usize,
) -> Result<Vec<Sample>, ScheduleError> {
    let tile = grid.tile(node)?;
    dataset
        .iter()
        .map(|(x, y)| Sample::new(&extract_tile(x, &tile)?, &extract_label_tile(y, &tile)?, num_classes))
        .collect()
}

fn name_member(node: Node, e: ScheduleError) -> ScheduleError {
    match e {
        ScheduleError::Nn(source) => ScheduleError::Member { tile: node, source },
        ScheduleError::Data(m) => ScheduleError::Data(format!("member {node:?}: {m}")),
        other => other,
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    tile_grid: &TileGrid,
    scale: Scale,
    config: UNetConfig,
    plan: &TrainPlan,
    dag: &TransferDag,
    warm_start: bool,
    results: BTreeMap<Node, Outcome>,
    events: Vec<Event>,
) -> TrainedAssembly {
    let time = |n: Node, k: EventKind| {
        events
            .iter()
            .find(|e| e.tile == n && e.kind == k)
            .map_or(0.0, |e| e.seconds)
    };
    let members_meta = results
        .iter()
        .map(|(&n, o)| MemberRecord {
            tile: n,
            parent: dag.parent(n),
            seed: o.seed,
            initial_loss: o.stats.initial_loss(),
            final_loss: o.stats.final_loss(),
            start_seconds: time(n, EventKind::Start),
            finish_seconds: time(n, EventKind::Finish),
            weights_file: weights_file(n),
        })
        .collect();
    let manifest = AssemblyManifest {
        scale,
        config,
        plan: *plan,
        tile_grid: tile_grid.clone(),
        warm_start,
        edges: dag.edges(),
        members: members_meta,
        events,
    };
    TrainedAssembly {
        tile_grid: tile_grid.clone(),
        scale,
        config,
        members: results.into_iter().map(|(n, o)| (n, o.params)).collect(),
        manifest,
    }
}

/// Train every member in transfer order. Each member draws from its own RNG stream
/// seeded by the plan seed and its tile index, so results do not depend on `workers`.
pub fn train_assembly(
    tile_grid: &TileGrid,
    dataset: &[(MultiChannelVolume, LabelMap)],
    plan: &TrainPlan,
    config: &UNetConfig,
    scale: Scale,
) -> Result<TrainedAssembly, ScheduleError> {
    plan.validate()?;
    check_dataset(tile_grid, dataset, config)?;
    let dag = build_transfer_dag(tile_grid.counts);
    let (results, events) = execute(&dag, plan.workers, |node, parent: Option<&Outcome>| {
        let run = || {
            let samples = tile_samples(tile_grid, node, dataset, config.num_classes)?;
            let seed = tile_seed(plan.seed, node);
            let mut rng = seeded(seed);
            let init = match parent {
                None => UNetParams::init(*config, &mut rng)?,
                Some(p) => transfer_weights(&p.params, config, &mut rng)?,
            };
            let (params, stats) = train_unet(init, &samples, plan, &mut rng)?;
            Ok(Outcome { params, stats, seed })
        };
        run().map_err(|e| name_member(node, e))
    })?;
    Ok(assemble(tile_grid, scale, *config, plan, &dag, false, results, events))
}

/// Continue training every member from its current weights on a new dataset.
pub fn finetune_assembly(
    assembly: &TrainedAssembly,
    dataset: &[(MultiChannelVolume, LabelMap)],
    plan: &TrainPlan,
) -> Result<TrainedAssembly, ScheduleError> {
    plan.validate()?;
    let grid = &assembly.tile_grid;
    check_dataset(grid, dataset, &assembly.config)?;
    let dag = TransferDag::independent(grid.counts);
    let (results, events) = execute(&dag, plan.workers, |node, _: Option<&Outcome>| {
        let run = || {
            let samples = tile_samples(grid, node, dataset, assembly.config.num_classes)?;
            let seed = tile_seed(plan.seed, node);
            let init = assembly
                .member(node)
                .ok_or_else(|| ScheduleError::Data("missing member weights".into()))?
                .clone();
            let (params, stats) = train_unet(init, &samples, plan, &mut seeded(seed))?;
            Ok(Outcome { params, stats, seed })
        };
        run().map_err(|e| name_member(node, e))
    })?;
    Ok(assemble(
        grid,
        assembly.scale,
        assembly.config,
        plan,
        &dag,
        true,
        results,
        events,
    ))
}
