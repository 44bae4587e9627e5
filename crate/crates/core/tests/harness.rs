use serde_json::json;
use structguard::datakit::LabeledDataset;
use structguard::diffcore::Tensor;
use structguard::harness::*;
use structguard::model::{snapshot, Affine, ModelDims, ModelParams};
use structguard::unlearn::Method;
use structguard::Error;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_value(json!({
        "seed": 3,
        "data": {"classes": 3, "per_class": 30, "d_in": 6, "k": 8},
        "model": {"hidden": [8], "d": 4, "pretrain": {"epochs": 120, "lr": 0.5}},
        "probes": {"n_adv": 2},
        "unlearn": {"steps": 15, "lr": 0.02},
        "eval": {"retrieval_ks": [1, 5], "max_retrieval_queries": 20},
        "sweep": {"ks": [8], "seeds": [1, 2, 3],
                  "arms": [{"name": "sg", "set": {"unlearn": {"method": "structguard"}}},
                           {"name": "ng", "set": {"unlearn": {"method": "neggrad"}}}]}
    }))
    .unwrap()
}

/// Identity 2-d extractor: features are the normalized positive inputs.
fn identity_model(b: usize) -> ModelParams {
    let dims = ModelDims {
        d_in: 2,
        hidden: vec![],
        d: 2,
        b,
    };
    let mut p = ModelParams::init(dims, 0).unwrap();
    p.psi[0] = Affine::identity(2);
    p.set_projector_identity();
    p
}

fn points(rows: &[[f64; 2]], labels: &[usize], b: usize) -> LabeledDataset {
    let data = rows.iter().flatten().cloned().collect();
    LabeledDataset::new("pts", Tensor::matrix(rows.len(), 2, data), labels.to_vec(), b).unwrap()
}

#[test]
fn equal_logits_predict_class_zero() {
    let mut p = identity_model(3);
    p.phi = Affine::zeros(2, 3);
    let d = points(&[[1.0, 0.1], [0.2, 1.0], [1.0, 1.0], [0.5, 0.5]], &[0, 1, 0, 2], 3);
    assert_eq!(accuracy(&p, &d, EvalPath::Direct).unwrap(), 50.0);
    assert_eq!(accuracy(&p, &d, EvalPath::Projected).unwrap(), 50.0);
}

#[test]
fn consistency_of_snapshot_is_one() {
    let p = identity_model(2);
    let snap = snapshot(&p, "ori");
    let d = points(&[[1.0, 0.1], [0.2, 1.0]], &[0, 1], 2);
    let c = representation_consistency(&snap, &p, &d).unwrap();
    assert!(c.iter().all(|v| (v - 1.0).abs() < 1e-12));
    let mut rotated = p.clone();
    rotated.psi[0] = Affine {
        w: Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]),
        b: Tensor::vector(vec![0.0, 0.0]),
    };
    // swapped coordinates of [1, 0.1]: cos = 0.2 / 1.01
    let c = representation_consistency(&snap, &rotated, &d).unwrap();
    assert!((c[0] - 0.2 / 1.01).abs() < 1e-12);
}

#[test]
fn retrieval_hand_fixtures() {
    let p = identity_model(2);
    let q = points(&[[1.0, 0.0]], &[0], 2);
    let g1 = points(&[[1.0, 0.1]], &[0], 2);
    let r = retrieval_eval(&p, &q, &g1, &[1]).unwrap();
    assert_eq!(r.recall, vec![(1, 100.0)]);
    assert_eq!(r.map, 100.0);

    let g_none = points(&[[1.0, 0.1], [0.0, 1.0]], &[1, 1], 2);
    assert_eq!(retrieval_eval(&p, &q, &g_none, &[1, 2]).unwrap().map, 0.0);

    // ranking by cosine to [1, 0]: items 2, 0, 3, 1; relevant items 0 and 1
    // sit at ranks 2 and 4 → AP = (1/2 + 2/4) / 2 = 0.5
    let g4 = points(&[[1.0, 0.5], [0.1, 1.0], [1.0, 0.0], [0.5, 1.0]], &[0, 0, 1, 1], 2);
    let r = retrieval_eval(&p, &q, &g4, &[1, 2, 4]).unwrap();
    assert!((r.map - 50.0).abs() < 1e-12);
    assert_eq!(r.recall, vec![(1, 0.0), (2, 100.0), (4, 100.0)]);
}

#[test]
fn retrieval_rejects_bad_k() {
    let p = identity_model(2);
    let q = points(&[[1.0, 0.0]], &[0], 2);
    let g = points(&[[1.0, 0.1], [0.0, 1.0]], &[0, 1], 2);
    assert!(matches!(retrieval_eval(&p, &q, &g, &[0]), Err(Error::InvalidK(_))));
    assert!(matches!(retrieval_eval(&p, &q, &g, &[3]), Err(Error::InvalidK(_))));
}

#[test]
fn profiles_of_unchanged_model_agree() {
    let p = identity_model(2);
    let snap = snapshot(&p, "ori");
    let anchors = structguard::anchor::AnchorSet::from_rows(
        &[vec![1.0, 0.0], vec![0.0, 1.0]],
        structguard::anchor::AnchorSource::Synthetic,
    )
    .unwrap();
    let prof = anchor_profile(&p, &snap, &[0.3, 0.9], 1, &anchors, 2).unwrap();
    assert_eq!(prof.original, prof.current);
    assert_eq!(prof.top, vec![1, 0]);
}

#[test]
fn confusion_rows_sum_to_class_counts() {
    let prep = prepare(&tiny()).unwrap();
    let forget = &prep.split.forget;
    let m = confusion_matrix(prep.snapshot.params(), forget).unwrap();
    let counts = forget.class_counts();
    for (row, c) in m.iter().zip(&counts) {
        assert_eq!(row.iter().sum::<usize>(), *c);
    }
    let diag: usize = (0..m.len()).map(|i| m[i][i]).sum();
    assert!(diag * 2 > forget.len());
}

#[test]
fn reports_are_reproducible() {
    let cfg = tiny();
    let a = run_experiment(&cfg).unwrap().report;
    let b = run_experiment(&cfg).unwrap().report;
    assert_eq!(a.to_json_without_timing(), b.to_json_without_timing());
    assert_eq!(a.access.unlearning_reads, 0);
    assert_eq!(a.checksums.anchors_before, a.checksums.anchors_after);
    assert_eq!(a.checksums.snapshot_before, a.checksums.snapshot_after);
    assert_eq!(a.schema_version, SCHEMA_VERSION);
    assert_eq!(a.collapse.trajectory.len(), a.run.steps_executed);
}

#[test]
fn report_round_trips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment_to_dir(&tiny(), dir.path()).unwrap();
    let back = RunReport::load(dir.path().join("report.json")).unwrap();
    assert_eq!(back.to_json(), out.report.to_json());
    assert!(dir.path().join("trace.csv").exists());
    assert!(dir.path().join("model.json").exists());
}

#[test]
fn oracle_reads_are_counted() {
    let mut cfg = tiny();
    cfg.unlearn.method = Method::Oracle;
    let r = run_experiment(&cfg).unwrap().report;
    assert_eq!(r.access.unlearning_reads, cfg.unlearn.steps);
}

#[test]
fn prototype_anchor_reads_are_attributed_to_construction() {
    let mut cfg = tiny();
    cfg.anchors.kind = AnchorKind::Prototype;
    let r = run_experiment(&cfg).unwrap().report;
    assert_eq!(r.access.anchor_construction_reads, 1);
    assert_eq!(r.access.unlearning_reads, 0);
}

#[test]
fn unknown_method_is_a_config_error_naming_the_field() {
    let mut v = serde_json::to_value(tiny()).unwrap();
    v["unlearn"]["method"] = json!("retrain");
    match ExperimentConfig::from_value(v).unwrap_err() {
        Error::Config { path, .. } => assert_eq!(path, "unlearn.method"),
        e => panic!("{e:?}"),
    }
}

#[test]
fn invalid_values_are_rejected_with_paths() {
    for (patch, want) in [
        (json!({"unlearn": {"steps": 0}}), "unlearn.steps"),
        (json!({"probes": {"radius": 0.0}}), "probes.radius"),
        (json!({"data": {"test_fraction": 1.5}}), "data.test_fraction"),
        (json!({"anchors": {"kind": "file"}}), "anchors.path"),
    ] {
        match tiny().patched(&patch).unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, want),
            e => panic!("{e:?}"),
        }
    }
}

#[test]
fn single_cell_grid_equals_lone_run() {
    let mut cfg = tiny();
    cfg.sweep.arms = vec![Arm::new("sg", json!({}))];
    cfg.sweep.seeds = vec![cfg.seed];
    cfg.sweep.ks = vec![cfg.data.k];
    let sweep_res = sweep(&cfg).unwrap();
    assert_eq!(sweep_res.cells.len(), 1);
    let lone = run_experiment(&cfg).unwrap().report;
    let cell = sweep_res.cells[0].report().unwrap();
    assert_eq!(cell.to_json_without_timing(), lone.to_json_without_timing());
    let row = &sweep_res.aggregate()[0];
    assert_eq!(row.a_r, (lone.a_r(), 0.0));
}

#[test]
fn sweep_table_has_nonnegative_spread() {
    let res = sweep(&tiny()).unwrap();
    assert_eq!(res.cells.len(), 6);
    let order: Vec<(String, u64)> = res.cells.iter().map(|c| (c.arm.clone(), c.seed)).collect();
    assert_eq!(order[0], ("sg".to_string(), 1));
    assert_eq!(order[3], ("ng".to_string(), 1));
    for row in res.aggregate() {
        assert_eq!(row.ok + row.failed, 3);
        assert!(row.a_r.1 >= 0.0 && row.collapse.1 >= 0.0);
    }
    let table = res.table_csv();
    assert_eq!(table.lines().count(), 3);
    assert_eq!(res.scatter_csv().lines().count(), 7);
    let dir = tempfile::tempdir().unwrap();
    res.write_to_dir(dir.path()).unwrap();
    assert!(dir.path().join("cells/sg-k8-s1.json").exists());
}

#[test]
fn failed_cells_are_marked_not_fatal() {
    let mut cfg = tiny();
    cfg.sweep.arms = vec![
        Arm::new("ok", json!({})),
        Arm::new("boom", json!({"unlearn": {"method": "neggrad", "lr": 1.7976931348623157e308}})),
    ];
    cfg.sweep.seeds = vec![1];
    let res = sweep(&cfg).unwrap();
    assert!(res.cells[0].outcome.is_ok());
    assert!(res.cells[1].outcome.is_err());
    assert_eq!(res.failures_csv().lines().count(), 2);
}

#[test]
fn bundled_default_config_parses() {
    let text = include_str!("../../../configs/default.json");
    let cfg = ExperimentConfig::from_json_str(text).unwrap();
    assert_eq!(cfg.sweep.arms.len(), Method::ALL.len());
    assert_eq!(cfg.sweep.ks, vec![16, 64]);
    assert!(expand_grid(&cfg).unwrap().len() == 70);
}

#[test]
fn class_mode_forgets_whole_classes() {
    let mut cfg = tiny();
    cfg.data.mode = structguard::datakit::SplitMode::Class;
    cfg.data.class_fraction = 0.3;
    let prep = prepare(&cfg).unwrap();
    let labels = prep.split.forget.labels();
    assert!(labels.iter().all(|&y| y == labels[0]));
    assert!(prep.split.retain.for_evaluation().labels().iter().all(|&y| y != labels[0]));
}

#[test]
fn checkpoint_can_replace_pretraining() {
    let cfg = tiny();
    let prep = prepare(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    prep.snapshot.params().save_json(&path).unwrap();
    let mut c2 = cfg.clone();
    c2.model.checkpoint = Some(path);
    let a = run_experiment(&cfg).unwrap().report;
    let b = run_experiment(&c2).unwrap().report;
    assert_eq!(a.after, b.after);
}
