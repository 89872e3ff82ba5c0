mod common;

use fibromap::imgvol::Volume3D;
use fibromap::nn::{model_bytes, CnnModel, ModelSpec};
use fibromap::patches::{NormStats, Split};
use fibromap::phantom::write_corpus;
use fibromap::pipeline::{
    evaluate, evaluate_subjects, extract_corpus, infer_damage_map, metrics_csv, sweep_patch_size,
    train, ConstantClassifier, CorpusDir, PatchClassifier, PhantomCorpus, SubjectSource,
};

#[test]
fn damage_map_matches_brute_force() {
    for (seed, p) in [(1, 3), (2, 5), (3, 7)] {
        let (cine, myo) = common::ring_case(seed, 40);
        let (worst, in_range, covered) = common::damage_oracle(&common::ProbeClassifier { p }, &cine, &myo);
        assert!(worst <= 1e-12, "p = {p}: {worst}");
        assert!(in_range);
        assert!(covered > 100);
    }
}

#[test]
fn damage_map_of_a_network_on_a_phantom() {
    let source = PhantomCorpus::new(1, 1, &common::small_params(5)).unwrap();
    let s = source.load(0).unwrap();
    let mut model = CnnModel::init(ModelSpec::new(5), 2).unwrap();
    model.norm = Some(NormStats::new(40.0, 160.0).unwrap());
    let (worst, in_range, _) = common::damage_oracle(&model, &s.cine, &s.myo);
    assert!(worst <= 1e-12, "{worst}");
    assert!(in_range);
}

#[test]
fn uncovered_voxels_copy_nearest_covered_voxel() {
    let (cine, mut myo) = common::ring_case(4, 40);
    myo.set(1, 1, 0, 1.0);
    myo.set(38, 20, 1, 1.0);
    let model = common::ProbeClassifier { p: 5 };
    let map = infer_damage_map(&model, &cine, &myo, 0.5).unwrap();
    let want = common::brute_damage(&model, &cine, &myo);
    let g = *myo.geometry();
    for (i, j, k) in [(1usize, 1usize, 0usize), (38, 20, 1)] {
        assert!(want[g.index(i, j, k)].is_none());
        let mut best = (f64::INFINITY, 0.0);
        for jj in 0..40 {
            for ii in 0..40 {
                if let Some(v) = want[g.index(ii, jj, k)] {
                    let d = (ii as f64 - i as f64).hypot(jj as f64 - j as f64);
                    if d < best.0 {
                        best = (d, v);
                    }
                }
            }
        }
        assert!((map.map.get(i, j, k) - best.1).abs() <= 1e-12);
    }
}

#[test]
fn metrics_recount() {
    let source = PhantomCorpus::new(8, 4, &common::small_params(8)).unwrap();
    let run = train(&source, &common::quick_config(2)).unwrap();
    let ds = &run.datasets.val;
    let m = evaluate(&run.outcome.model, ds).unwrap();
    let (mut tp, mut tn, mut fp, mut fneg) = (0, 0, 0, 0);
    for p in &ds.patches {
        let q = run.outcome.model.predict(&p.pixels, p.position_features()).unwrap();
        match (q >= 0.5, p.label == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
        }
    }
    assert_eq!((m.true_pos, m.true_neg, m.false_pos, m.false_neg), (tp, tn, fp, fneg));
    assert_eq!(m.accuracy, (tp + tn) as f64 / ds.len() as f64);
    assert_eq!(m, run.outcome.best_val);
}

#[test]
fn training_is_deterministic_and_keeps_best_validation() {
    let source = PhantomCorpus::new(8, 4, &common::small_params(9)).unwrap();
    let cfg = common::quick_config(7);
    let a = train(&source, &cfg).unwrap();
    let b = train(&source, &cfg).unwrap();
    assert_eq!(model_bytes(&a.outcome.model), model_bytes(&b.outcome.model));
    assert_eq!(metrics_csv(&a.outcome.history), metrics_csv(&b.outcome.history));
    let h = &a.outcome.history;
    assert_eq!(h[0].epoch, 0);
    let best = h
        .iter()
        .filter(|r| r.split == Split::Val)
        .map(|r| r.accuracy)
        .fold(f64::MIN, f64::max);
    assert_eq!(a.outcome.best_val.accuracy, best);
    for ds in [&a.datasets.train, &a.datasets.val, &a.datasets.test] {
        assert_eq!(ds.class_counts[0], ds.class_counts[1]);
    }
    let train_ids = a.datasets.train.subjects();
    assert!(a.datasets.val.subjects().is_disjoint(&train_ids));
    assert!(a.datasets.test.subjects().is_disjoint(&train_ids));
}

#[test]
fn sweep_rows_and_inventory() {
    let source = PhantomCorpus::new(8, 4, &common::small_params(10)).unwrap();
    let mut cfg = common::quick_config(1);
    cfg.max_epochs = 1;
    cfg.stride = None;
    let one = sweep_patch_size(&source, &[11], &cfg, 10).unwrap();
    assert_eq!(one.rows.len(), 1);
    assert_eq!(one.to_csv().lines().count(), 2);
    let counts: Vec<usize> = [5, 7, 9, 11]
        .iter()
        .map(|&p| extract_corpus(&source, p, p).unwrap().total())
        .collect();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    assert!(sweep_patch_size(&source, &[6], &cfg, 10).is_err());
}

#[test]
fn corpus_directory_matches_in_memory_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let mem = PhantomCorpus::new(3, 1, &common::small_params(12)).unwrap();
    write_corpus(&mem.plans, dir.path()).unwrap();
    let disk = CorpusDir::open(dir.path()).unwrap();
    assert_eq!(disk.subjects(), mem.subjects());
    for i in 0..3 {
        let (a, b) = (mem.load(i).unwrap(), disk.load(i).unwrap());
        let same = |x: &Volume3D, y: &Volume3D| x.geometry() == y.geometry() && x.data() == y.data();
        assert!(same(&a.cine, &b.cine) && same(&a.myo, &b.myo) && same(&a.lesion, &b.lesion));
    }
}

#[test]
fn constant_classifier_subject_summary() {
    let source = PhantomCorpus::new(2, 1, &common::small_params(13)).unwrap();
    let model = ConstantClassifier { patch_size: 5, prob: 0.7 };
    let results = evaluate_subjects(&source, &[0, 1], &model, 0.5).unwrap();
    for r in &results {
        assert!(r.decision);
        assert_eq!(r.correct(), r.has_lesion);
        assert!((r.healthy_mean.unwrap() - 0.7).abs() < 1e-12);
        assert!((r.mean_score - 0.7).abs() < 1e-12);
        assert_eq!(r.lesion_mean.is_some(), r.has_lesion);
    }
}
