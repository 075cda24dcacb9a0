use std::sync::OnceLock;

use assemblynet::evaluation::mean_dice;
use assemblynet::inference::mc_dropout_infer;
use assemblynet::nn3d::{unet_forward, Mode, Tensor, UNetConfig, UNetParams};
use assemblynet::phantom::PhantomSpec;
use assemblynet::pipeline::data::{generate_items, DatasetSpec, Role};
use assemblynet::pipeline::{train_cascade, Cascade, CascadeConfig, Subject};
use assemblynet::rng::seeded;
use assemblynet::ssl::{pseudo_label, ssl_generations, train_student, SslPlan};
use assemblynet::Error;

fn tiny_config() -> CascadeConfig {
    let mut c = CascadeConfig::desk_default();
    c.grid = [16, 16, 16];
    for (a, tile) in [(&mut c.coarse, 6), (&mut c.fine, 12)] {
        a.tile_dims = [tile; 3];
        a.depth = 1;
        a.base_filters = 4;
        a.epochs_main = 8;
        a.epochs_avg = 2;
    }
    c.passes = 2;
    c
}

struct Fixture {
    labeled: Vec<Subject>,
    unlabeled: Vec<Subject>,
    teacher: Cascade,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = DatasetSpec {
            n_labeled: 4,
            n_unlabeled: 4,
            n_test: 0,
            seed: 11,
            template: PhantomSpec {
                dims: [16, 16, 16],
                ..PhantomSpec::default()
            },
            ..DatasetSpec::default()
        };
        let items = generate_items(&spec).unwrap();
        let by_role = |role| -> Vec<Subject> {
            items
                .iter()
                .filter(|i| i.entry.role == role)
                .map(|i| i.subject().unwrap())
                .collect()
        };
        let labeled = by_role(Role::Labeled);
        let teacher = train_cascade(&tiny_config(), &labeled).unwrap();
        Fixture {
            labeled,
            unlabeled: by_role(Role::Unlabeled),
            teacher,
        }
    })
}

fn quick_plan(generations: usize) -> SslPlan {
    let e = assemblynet::pipeline::PhaseEpochs {
        epochs_main: 1,
        epochs_avg: 1,
    };
    SslPlan {
        pseudo: e,
        finetune: e,
        generations,
    }
}

#[test]
fn save_load_round_trip_segments_identically() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    f.teacher.save(dir.path()).unwrap();
    let loaded = Cascade::load(dir.path()).unwrap();
    assert_eq!(loaded.phases, f.teacher.phases);
    let s = &f.unlabeled[0];
    assert_eq!(
        loaded.segment(s).unwrap().fine.labels,
        f.teacher.segment(s).unwrap().fine.labels
    );
    assert!(matches!(
        Cascade::load(dir.path().join("missing")),
        Err(Error::MissingWeights(_))
    ));
}

#[test]
fn segmentation_does_not_depend_on_workers() {
    let f = fixture();
    let s = &f.unlabeled[1];
    let one = f.teacher.clone().with_workers(1).segment(s).unwrap();
    let four = f.teacher.clone().with_workers(4).segment(s).unwrap();
    assert_eq!(one.fine.labels, four.fine.labels);
    assert_eq!(one.coarse.votes, four.coarse.votes);
}

#[test]
fn pseudo_labels_follow_the_teacher() {
    let f = fixture();
    assert!(pseudo_label(&f.teacher, &[]).unwrap().is_empty());
    let pseudo = pseudo_label(&f.teacher, &f.unlabeled).unwrap();
    let ids: Vec<_> = pseudo.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["unl000", "unl001", "unl002", "unl003"]);
    // a training subject is labelled exactly as the teacher segments it
    let own = pseudo_label(&f.teacher, &f.labeled[..1]).unwrap();
    assert_eq!(
        own[0].gt.as_ref().unwrap(),
        &f.teacher.segment(&f.labeled[0]).unwrap().fine.labels
    );
    let dice: f64 = pseudo
        .iter()
        .zip(&f.unlabeled)
        .map(|(p, u)| mean_dice(p.gt.as_ref().unwrap(), u.gt.as_ref().unwrap()).unwrap())
        .sum::<f64>()
        / 4.0;
    assert!((dice - PSEUDO_DICE).abs() < 1e-9, "{dice}");
}

/// Mean Dice of the tiny teacher's pseudo-labels against the hidden labels.
const PSEUDO_DICE: f64 = 0.361799203828243;

#[test]
fn student_is_reproducible_and_keeps_lineage() {
    let f = fixture();
    let pseudo = pseudo_label(&f.teacher, &f.unlabeled).unwrap();
    let a = train_student(&pseudo, &f.labeled, &quick_plan(1), &f.teacher.config, 1).unwrap();
    let b = train_student(&pseudo, &f.labeled, &quick_plan(1), &f.teacher.config, 1).unwrap();
    assert_eq!(a.fine.weight_bytes(), b.fine.weight_bytes());
    assert_eq!(a.phases.len(), 2);
    assert_eq!(a.phases[0].subject_ids, ["unl000", "unl001", "unl002", "unl003"]);
    assert_eq!(a.phases[1].subject_ids, ["lab000", "lab001", "lab002", "lab003"]);
    // overlapping pools are rejected
    assert!(train_student(&f.labeled, &f.labeled, &quick_plan(1), &f.teacher.config, 1).is_err());
}

#[test]
fn second_generation_is_taught_by_the_first_student() {
    let f = fixture();
    let gens = ssl_generations(&f.teacher, &f.unlabeled[..2], &f.labeled, &quick_plan(2)).unwrap();
    assert_eq!(gens.len(), 2);
    assert_eq!(gens[0].manifest.teacher, "teacher");
    assert_eq!(gens[1].manifest.teacher, "student-1");
    assert!(gens
        .iter()
        .all(|g| g.manifest.pseudo_phase_excludes_labeled(&g.student)));
    // the second pseudo-labels are the first student's segmentations
    let relabeled = pseudo_label(&gens[0].student, &f.unlabeled[..2]).unwrap();
    let again = pseudo_label(&gens[0].student, &f.unlabeled[..2]).unwrap();
    assert_eq!(relabeled, again);
    assert_eq!(gens[1].student.phases[0].phase, "gen2-pseudo");
}

#[test]
fn zero_dropout_inference_is_deterministic() {
    let cfg = UNetConfig {
        in_channels: 2,
        num_classes: 3,
        base_filters: 2,
        depth: 1,
        dropout_rate: 0.0,
    };
    let params: UNetParams<f32> = UNetParams::init(cfg, &mut seeded(1)).unwrap();
    let x = Tensor::from_vec(&[2, 4, 4, 4], (0..128).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let det = unet_forward(&params, &x, Mode::EvalDeterministic, &mut seeded(0)).unwrap();
    for passes in [1, 3, 5] {
        let mc = mc_dropout_infer(&params, &x, passes, &mut seeded(passes as u64)).unwrap();
        let err = mc
            .data()
            .iter()
            .zip(det.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-6, "passes {passes}: {err}");
    }
}
