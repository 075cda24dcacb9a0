use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use assemblynet::evaluation::{dice_per_label, mann_whitney_one_sided, mean_dice};
use assemblynet::phantom::PhantomSpec;
use assemblynet::pipeline::data::{self, DatasetSpec, Role};
use assemblynet::pipeline::report::{compare, write_report_csv, MethodScores, ReportRow};
use assemblynet::pipeline::{scan_rescan, score_output, train_cascade, Cascade, CascadeConfig, PhaseEpochs, Subject};
use assemblynet::ssl::{ssl_generations, GenerationManifest, SslPlan};
use assemblynet::volume::avol::{read_labels, read_volume, write_avol, AvolData};
use assemblynet::volume::{normalize_intensity, LabelMap};

#[derive(Parser)]
#[command(
    name = "assemblynet",
    version,
    about = "Tile-assembly 3D segmentation on synthetic phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset directory.
    PhantomGen(PhantomGenArgs),
    /// Train a coarse+fine cascade on the labeled subjects of a dataset.
    Train(TrainArgs),
    /// Segment one volume with a trained cascade.
    Segment(SegmentArgs),
    /// Teacher-student training on the unlabeled pool.
    Ssl(SslArgs),
    /// Scan-rescan consistency on the rescan pairs of a dataset.
    ScanRescan(ScanRescanArgs),
    /// Dice of predicted label maps against a dataset's ground truth.
    Evaluate(EvaluateArgs),
    /// Evaluate trained runs on a dataset's test subjects and write a comparison table.
    Report(ReportArgs),
}

#[derive(Args)]
struct PhantomGenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    n_labeled: usize,
    #[arg(long, default_value_t = 0)]
    n_unlabeled: usize,
    #[arg(long, default_value_t = 8)]
    n_test: usize,
    /// Rescans of the first R test subjects.
    #[arg(long, default_value_t = 0)]
    n_rescan: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    stratify: bool,
    /// Cubic grid size.
    #[arg(long, default_value_t = 32)]
    dims: usize,
    #[arg(long, default_value_t = 5)]
    labels: u16,
    #[arg(long, default_value_t = 1.0)]
    prior_strength: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON cascade configuration; the built-in desk configuration when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured worker count.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    run: PathBuf,
    /// Intensity AVOL, already normalized unless --mask is given.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    prior: PathBuf,
    /// Normalize the input inside this mask first.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-class vote counts as `<out>_votes_<class>.avol`.
    #[arg(long)]
    dump_votes: bool,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SslArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    generations: usize,
    #[arg(long)]
    out: PathBuf,
    /// Epochs of the pseudo-label phase as MAIN:AVG.
    #[arg(long, value_parser = parse_epochs)]
    pseudo_epochs: Option<PhaseEpochs>,
    /// Epochs of the fine-tuning phase as MAIN:AVG.
    #[arg(long, value_parser = parse_epochs)]
    finetune_epochs: Option<PhaseEpochs>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct ScanRescanArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prediction directories as NAME=DIR or DIR; the first is the baseline.
    #[arg(long, required = true, num_args = 1..)]
    pred: Vec<String>,
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-subject, per-label Dice table.
    #[arg(long)]
    per_subject: Option<PathBuf>,
    /// Unpaired comparison (Mann-Whitney) instead of paired (Wilcoxon).
    #[arg(long)]
    unpaired: bool,
    #[arg(long, value_enum, default_value = "test")]
    role: RoleArg,
}

#[derive(Args)]
struct ReportArgs {
    /// Training or SSL output directories; the first run's coarse-only row is the baseline.
    #[arg(long, required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Dataset to evaluate on; defaults to the dataset each run was trained on.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Leave the wall_seconds column empty.
    #[arg(long)]
    no_timing: bool,
    /// Also write segmentations as `<dir>/<method>/<id>_seg.avol`.
    #[arg(long)]
    save_segmentations: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RoleArg {
    Labeled,
    Unlabeled,
    Test,
    Rescan,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Role {
        match r {
            RoleArg::Labeled => Role::Labeled,
            RoleArg::Unlabeled => Role::Unlabeled,
            RoleArg::Test => Role::Test,
            RoleArg::Rescan => Role::Rescan,
        }
    }
}

fn parse_epochs(s: &str) -> Result<PhaseEpochs, String> {
    let (m, a) = s.split_once(':').ok_or("expected MAIN:AVG")?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok(PhaseEpochs {
        epochs_main: num(m)?,
        epochs_avg: num(a)?,
    })
}

/// Bad arguments detected after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Written next to a trained cascade.
#[derive(Debug, Serialize, Deserialize)]
struct RunInfo {
    data: PathBuf,
    train_seconds: f64,
}

const RUN_INFO: &str = "run.json";
const LINEAGE: &str = "lineage.json";

#[derive(Debug, Serialize, Deserialize)]
struct Lineage {
    teacher_run: PathBuf,
    data: PathBuf,
    plan: SslPlan,
    generations: Vec<LineageEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LineageEntry {
    dir: String,
    manifest: GenerationManifest,
    labeled_unused_in_pseudo_phase: bool,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn load_run(dir: &Path, workers: Option<usize>) -> anyhow::Result<Cascade> {
    let c = Cascade::load(dir)?;
    Ok(c.with_workers(workers.unwrap_or_else(default_workers)))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn phantom_gen(a: PhantomGenArgs) -> anyhow::Result<()> {
    let spec = DatasetSpec {
        n_labeled: a.n_labeled,
        n_unlabeled: a.n_unlabeled,
        n_test: a.n_test,
        n_rescan: a.n_rescan,
        stratify: a.stratify,
        seed: a.seed,
        template: PhantomSpec {
            dims: [a.dims; 3],
            num_labels: a.labels,
            ..PhantomSpec::default()
        },
        prior_strength: a.prior_strength,
        ..DatasetSpec::default()
    };
    let index = data::generate_dataset(&a.out, &spec)?;
    println!("wrote {} subjects to {}", index.entries.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut config = match &a.config {
        Some(p) => CascadeConfig::load(p)?,
        None => CascadeConfig::desk_default(),
    };
    if let Some(w) = a.workers {
        if w == 0 {
            return Err(usage("--workers must be at least 1"));
        }
        config.workers = w;
    }
    let subjects = data::load_subjects(&a.data, Role::Labeled)?;
    let start = Instant::now();
    let cascade = train_cascade(&config, &subjects)?;
    cascade.save(&a.out)?;
    let info = RunInfo {
        data: a.data.clone(),
        train_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&a.out.join(RUN_INFO), &info)?;
    println!("trained on {} subjects in {:.1}s", subjects.len(), info.train_seconds);
    Ok(())
}

fn segment(a: SegmentArgs) -> anyhow::Result<()> {
    let cascade = load_run(&a.run, a.workers)?;
    let data_err = |p: &Path, e: &dyn std::fmt::Display| assemblynet::Error::Data(format!("{}: {e}", p.display()));
    let mut t1 = read_volume(&a.input).map_err(|e| data_err(&a.input, &e))?;
    let prior = read_labels(&a.prior).map_err(|e| data_err(&a.prior, &e))?;
    if let Some(m) = &a.mask {
        let mask = read_labels(m).map_err(|e| data_err(m, &e))?;
        t1 = normalize_intensity(&t1, &mask).map_err(assemblynet::Error::from)?;
    }
    let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
    let subject = Subject {
        id: stem.strip_suffix("_t1").unwrap_or(stem).to_string(),
        t1,
        prior,
        gt: None,
    };
    let out = cascade.segment(&subject)?;
    write_avol(&a.out, &AvolData::Labels(out.fine.labels.clone())).map_err(|e| data_err(&a.out, &e))?;
    if a.dump_votes {
        let base = a.out.with_extension("");
        for c in 0..out.fine.votes.num_labels() {
            let p = PathBuf::from(format!("{}_votes_{c}.avol", base.display()));
            write_avol(&p, &AvolData::Intensity(out.fine.votes.class_volume(c))).map_err(|e| data_err(&p, &e))?;
        }
    }
    Ok(())
}

fn ssl(a: SslArgs) -> anyhow::Result<()> {
    let mut plan = SslPlan {
        generations: a.generations,
        ..SslPlan::default()
    };
    if let Some(e) = a.pseudo_epochs {
        plan.pseudo = e;
    }
    if let Some(e) = a.finetune_epochs {
        plan.finetune = e;
    }
    plan.validate().map_err(|e| usage(e.to_string()))?;
    let teacher = load_run(&a.run, a.workers)?;
    let labeled = data::load_subjects(&a.data, Role::Labeled)?;
    let unlabeled: Vec<Subject> = data::load_subjects(&a.data, Role::Unlabeled)?
        .into_iter()
        .map(|s| Subject { gt: None, ..s })
        .collect();
    if unlabeled.is_empty() {
        return Err(assemblynet::Error::Data("dataset has no unlabeled subjects".into()).into());
    }
    let start = Instant::now();
    let gens = ssl_generations(&teacher, &unlabeled, &labeled, &plan)?;
    let train_seconds = start.elapsed().as_secs_f64();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut entries = Vec::new();
    for g in gens {
        let dir = format!("gen{}", g.manifest.generation);
        g.student.save(a.out.join(&dir))?;
        write_json(
            &a.out.join(&dir).join(RUN_INFO),
            &RunInfo {
                data: a.data.clone(),
                train_seconds,
            },
        )?;
        entries.push(LineageEntry {
            dir,
            labeled_unused_in_pseudo_phase: g.manifest.pseudo_phase_excludes_labeled(&g.student),
            manifest: g.manifest,
        });
    }
    write_json(
        &a.out.join(LINEAGE),
        &Lineage {
            teacher_run: a.run.clone(),
            data: a.data.clone(),
            plan,
            generations: entries,
        },
    )
}

fn scan_rescan_cmd(a: ScanRescanArgs) -> anyhow::Result<()> {
    let cascade = load_run(&a.run, a.workers)?;
    let pairs = data::load_rescan_pairs(&a.data)?;
    if pairs.is_empty() {
        return Err(assemblynet::Error::Data("dataset has no rescan pairs".into()).into());
    }
    let start = Instant::now();
    let scores = pairs
        .iter()
        .map(|p| scan_rescan(&cascade, &p.scan, &p.rescan, &p.transform))
        .collect::<Result<Vec<_>, _>>()?;
    let secs = start.elapsed().as_secs_f64();
    let rows = compare(
        "scan-rescan",
        &[
            MethodScores {
                method: "expert-method (noisy rater)".into(),
                scores: scores.iter().map(|s| s.expert_method).collect(),
                wall_seconds: None,
            },
            MethodScores {
                method: "intra-method".into(),
                scores: scores.iter().map(|s| s.intra_method).collect(),
                wall_seconds: Some(secs),
            },
        ],
    )?;
    write_report_csv(&a.out, &rows, true)?;
    Ok(())
}

fn prediction_path(dir: &Path, id: &str) -> Option<PathBuf> {
    [format!("{id}_seg.avol"), format!("{id}.avol"), format!("{id}_gt.avol")]
        .into_iter()
        .map(|f| dir.join(f))
        .find(|p| p.is_file())
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let index = data::read_index(&a.gt)?;
    let entries: Vec<_> = index.entries.iter().filter(|e| e.role == Role::from(a.role)).collect();
    if entries.is_empty() {
        return Err(assemblynet::Error::Data("no subjects with the requested role".into()).into());
    }
    let gts: Vec<LabelMap> = entries
        .iter()
        .map(|e| data::load_item(&a.gt, e).map(|it| it.gt))
        .collect::<Result<_, _>>()?;
    let mut methods = Vec::new();
    let mut table = String::new();
    for spec in &a.pred {
        let (name, dir) = match spec.split_once('=') {
            Some((n, d)) => (n.to_string(), PathBuf::from(d)),
            None => (spec.clone(), PathBuf::from(spec)),
        };
        let mut scores = Vec::new();
        for (e, gt) in entries.iter().zip(&gts) {
            let path = prediction_path(&dir, &e.id)
                .ok_or_else(|| assemblynet::Error::Data(format!("no prediction for {} in {}", e.id, dir.display())))?;
            let pred =
                read_labels(&path).map_err(|err| assemblynet::Error::Data(format!("{}: {err}", path.display())))?;
            let per_label = dice_per_label(&pred, gt).map_err(assemblynet::Error::from)?;
            let m = mean_dice(&pred, gt).map_err(assemblynet::Error::from)?;
            let cells: Vec<String> = per_label.iter().map(|d| format!("{d:.6}")).collect();
            table.push_str(&format!("{name},{},{},{m:.6}\n", e.id, cells.join(",")));
            scores.push(m);
        }
        methods.push(MethodScores {
            method: name,
            scores,
            wall_seconds: None,
        });
    }
    let dataset = format!("{:?}", Role::from(a.role)).to_lowercase();
    let mut rows = compare(&dataset, &methods)?;
    if a.unpaired {
        let base = &methods[0].scores;
        for (row, m) in rows.iter_mut().zip(&methods).skip(1) {
            row.p_vs_baseline = Some(mann_whitney_one_sided(base, &m.scores).map_err(assemblynet::Error::from)?);
        }
    }
    write_report_csv(&a.out, &rows, false)?;
    if let Some(p) = &a.per_subject {
        let labels = gts[0].num_labels();
        let header: Vec<String> = (1..labels).map(|l| format!("dice_{l}")).collect();
        let text = format!("method,id,{},mean_dice\n{table}", header.join(","));
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

/// Named cascades found under a run directory: the run itself, or each SSL generation.
fn discover_runs(dir: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("run").to_string();
    let lineage = dir.join(LINEAGE);
    if lineage.is_file() {
        let l: Lineage = serde_json::from_str(&fs::read_to_string(&lineage)?)
            .map_err(|e| assemblynet::Error::Data(format!("{}: {e}", lineage.display())))?;
        return Ok(l
            .generations
            .iter()
            .map(|g| (format!("{name}/{}", g.manifest.student), dir.join(&g.dir)))
            .collect());
    }
    Ok(vec![(name, dir.to_path_buf())])
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let mut methods = Vec::new();
    for run in &a.runs {
        for (name, dir) in discover_runs(run)? {
            let cascade = load_run(&dir, a.workers)?;
            let data_dir = match &a.data {
                Some(d) => d.clone(),
                None => {
                    let p = dir.join(RUN_INFO);
                    let text = fs::read_to_string(&p)
                        .map_err(|_| assemblynet::Error::Data(format!("{} missing; pass --data", p.display())))?;
                    serde_json::from_str::<RunInfo>(&text)?.data
                }
            };
            let subjects = data::load_subjects(&data_dir, Role::Test)?;
            if subjects.is_empty() {
                return Err(assemblynet::Error::Data(format!("{} has no test subjects", data_dir.display())).into());
            }
            let start = Instant::now();
            let mut coarse = Vec::new();
            let mut fine = Vec::new();
            for s in &subjects {
                let out = cascade.segment(s)?;
                if let Some(root) = &a.save_segmentations {
                    let d = root.join(name.replace('/', "_"));
                    fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
                    let p = d.join(format!("{}_seg.avol", s.id));
                    write_avol(&p, &AvolData::Labels(out.fine.labels.clone()))
                        .map_err(|e| anyhow!("{}: {e}", p.display()))?;
                }
                let sc = score_output(s, &out)?;
                coarse.push(sc.coarse_dice);
                fine.push(sc.fine_dice);
            }
            let secs = start.elapsed().as_secs_f64() / subjects.len() as f64;
            methods.push(MethodScores {
                method: format!("{name}:coarse-only"),
                scores: coarse,
                wall_seconds: Some(secs),
            });
            methods.push(MethodScores {
                method: format!("{name}:cascade"),
                scores: fine,
                wall_seconds: Some(secs),
            });
        }
    }
    let rows: Vec<ReportRow> = compare("test", &methods)?;
    write_report_csv(&a.out, &rows, !a.no_timing)?;
    for r in &rows {
        eprintln!("{:<40} {:.4} ({:.4})", r.method, r.mean_dice, r.std_dice);
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::PhantomGen(a) => phantom_gen(a),
        Command::Train(a) => train(a),
        Command::Segment(a) => segment(a),
        Command::Ssl(a) => ssl(a),
        Command::ScanRescan(a) => scan_rescan_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    }
}

/// Exit code and category of a failure.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    if err.downcast_ref::<Usage>().is_some() {
        return (1, "usage");
    }
    match err.downcast_ref::<assemblynet::Error>() {
        Some(e) if e.is_numerical() => (3, "numerical"),
        _ => (2, "data"),
    }
}

fn one_line(err: &anyhow::Error) -> String {
    format!("{err:#}").replace(['\n', '\r'], " ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!("error[{kind}]: {}", one_line(&e));
            ExitCode::from(code)
        }
    }
}
