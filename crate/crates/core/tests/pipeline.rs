use std::fs;
use std::path::{Path, PathBuf};

use fsgt_core::bridge::{reconstruct_lr, LrSchedule, ScheduleKind};
use fsgt_core::nulls::NullVariant;
use fsgt_core::pipeline::bridge::{cmd_bridge, CROSS_STEP};
use fsgt_core::pipeline::fit::{FITS_FILE, SUMMARY_FILE};
use fsgt_core::pipeline::json::read_json;
use fsgt_core::pipeline::probe::{load_temporal, ProbeReport, PROBE_REPORT_FILE};
use fsgt_core::pipeline::synth::{model_id_for, snapshot_name};
use fsgt_core::pipeline::{cmd_audit, cmd_fit, cmd_probe, cmd_synth, FitsFile, RunConfig};
use fsgt_core::snapshot::{snapshot_paths, write_snapshot, FieldKind, FieldSnapshot, SnapshotMeta};
use fsgt_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(dir: &Path, toml: &str) -> RunConfig {
    let mut cfg = RunConfig::from_toml_str(toml).unwrap();
    cfg.resolve_paths(dir);
    cfg
}

fn gaussian(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect()
}

fn put(root: &Path, family: &str, model: &str, step: u64, values: Vec<f32>) -> PathBuf {
    let snap = FieldSnapshot::new(
        SnapshotMeta {
            family: family.into(),
            model_id: model.into(),
            field_kind: FieldKind::RawGradient,
            step,
            seed: None,
            source: "test".into(),
        },
        values,
    )
    .unwrap();
    let dir = root.join(model);
    write_snapshot(&snap, &dir, &snapshot_name(model, step)).unwrap();
    snapshot_paths(&dir, &snapshot_name(model, step)).0
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(dir).unwrap().to_path_buf(), fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}

const TWO_STEPS: &str = r#"
family = "fx"
snapshot_root = "snaps"
cache_dir = "cache"
[nulls]
variants = ["n0"]
"#;

#[test]
fn probe_writes_one_file_per_model_and_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), TWO_STEPS);
    for step in [1, 2] {
        put(&cfg.snapshot_root, "fx", "m1", step, gaussian(3000, step));
    }
    let out = tmp.path().join("out");
    let outcome = cmd_probe(&cfg, &out, false).unwrap();
    assert_eq!((outcome.computed, outcome.reused, outcome.errors), (4, 0, 0));
    let files = load_temporal(&out).unwrap();
    assert_eq!(files.len(), 2);
    for f in &files {
        assert_eq!(f.records.len(), 2);
        assert_eq!(f.records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2]);
    }
    let variants: Vec<NullVariant> = files.iter().map(|f| f.variant).collect();
    assert_eq!(variants, vec![NullVariant::N0, NullVariant::Real]);
}

#[test]
fn probe_rerun_reuses_records_and_keeps_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), TWO_STEPS);
    for step in [1, 2] {
        put(&cfg.snapshot_root, "fx", "m1", step, gaussian(3000, step));
    }
    let out = tmp.path().join("out");
    cmd_probe(&cfg, &out, false).unwrap();
    let before = read_tree(&out);
    let again = cmd_probe(&cfg, &out, false).unwrap();
    assert_eq!((again.computed, again.reused), (0, 4));
    assert_eq!(read_tree(&out), before);
}

#[test]
fn probe_refuses_changed_settings_unless_forced() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), TWO_STEPS);
    put(&cfg.snapshot_root, "fx", "m1", 1, gaussian(2000, 1));
    let out = tmp.path().join("out");
    cmd_probe(&cfg, &out, false).unwrap();

    let mut changed = cfg.clone();
    changed.probe.alpha = 0.25;
    assert!(matches!(cmd_probe(&changed, &out, false), Err(Error::Config(_))));
    let forced = cmd_probe(&changed, &out, true).unwrap();
    assert_eq!(forced.computed, 2);
    assert!(load_temporal(&out).unwrap().iter().all(|f| f.config_hash == changed.probe_hash()));
}

#[test]
fn corrupt_snapshot_is_isolated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), TWO_STEPS);
    put(&cfg.snapshot_root, "fx", "m1", 1, gaussian(2000, 1));
    let bad = put(&cfg.snapshot_root, "fx", "m1", 2, gaussian(2000, 2));
    let mut bytes = fs::read(&bad).unwrap();
    bytes[17] ^= 0x40;
    fs::write(&bad, bytes).unwrap();

    let out = tmp.path().join("out");
    let outcome = cmd_probe(&cfg, &out, false).unwrap();
    assert_eq!(outcome.computed, 2);
    assert_eq!(outcome.errors, 1);
    let report: ProbeReport = read_json(&out.join(PROBE_REPORT_FILE)).unwrap();
    assert_eq!(report.errors.len(), 1);
    assert!(report.errors[0].snapshot.contains("step00000002"));
}

#[test]
fn off_grid_model_is_kept_but_not_fitted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        r#"
family = "fx"
snapshot_root = "snaps"
cache_dir = "cache"
scales = [1000, 2000, 4000]
[nulls]
variants = []
"#,
    );
    for (i, n) in [1000usize, 1500, 2000, 4000].into_iter().enumerate() {
        put(&cfg.snapshot_root, "fx", &format!("m{n}"), 5, gaussian(n, i as u64));
    }
    let out = tmp.path().join("out");
    cmd_probe(&cfg, &out, false).unwrap();
    let report: ProbeReport = read_json(&out.join(PROBE_REPORT_FILE)).unwrap();
    assert_eq!(report.off_grid.len(), 1);
    assert_eq!(report.off_grid[0].n_elements, 1500);
    assert_eq!(load_temporal(&out).unwrap().len(), 4);

    let fits = cmd_fit(&cfg, &out).unwrap();
    let f = &fits.fits_for(NullVariant::Real)[0];
    assert_eq!(f.scales_used, vec![1000, 2000, 4000]);
}

#[test]
fn all_degenerate_scale_means_no_fittable_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        r#"
family = "fx"
snapshot_root = "snaps"
cache_dir = "cache"
scales = [1000, 2000, 4000]
require_all_scales = true
[nulls]
variants = []
"#,
    );
    for step in [1, 2, 3] {
        put(&cfg.snapshot_root, "fx", "a", step, gaussian(1000, step));
        put(&cfg.snapshot_root, "fx", "b", step, vec![0.0; 2000]);
        put(&cfg.snapshot_root, "fx", "c", step, gaussian(4000, 10 + step));
    }
    let out = tmp.path().join("out");
    cmd_probe(&cfg, &out, false).unwrap();
    let err = cmd_fit(&cfg, &out).unwrap_err();
    assert!(matches!(err, Error::NoFittableSteps(_)));
    assert_eq!(err.exit_code(), 4);
    let fits: FitsFile = read_json(&out.join(FITS_FILE)).unwrap();
    assert_eq!(fits.total_fits(), 0);
    assert_eq!(fits.variants[0].skipped.len(), 3);
    assert!(!out.join(SUMMARY_FILE).exists());
}

#[test]
fn synth_is_deterministic_and_guards_existing_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        r#"
family = "syn"
scales = [1000, 2000, 4000]
[synth]
steps = [1, 2]
seed = 3
"#,
    );
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(cmd_synth(&cfg, &a, false).unwrap().len(), 6);
    cmd_synth(&cfg, &b, false).unwrap();
    assert_eq!(read_tree(&a), read_tree(&b));
    assert!(matches!(cmd_synth(&cfg, &a, false), Err(Error::Config(_))));
    cmd_synth(&cfg, &a, true).unwrap();
    assert_eq!(read_tree(&a), read_tree(&b));
    assert!(a.join(model_id_for("syn", 1000)).is_dir());
}

#[test]
fn single_synth_snapshot_has_requested_size() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        r#"
family = "one"
[synth]
steps = [1]
"#,
    );
    let mut cfg = cfg;
    cfg.scales = vec![10_000];
    let written = cmd_synth(&cfg, &tmp.path().join("s"), false).unwrap();
    assert_eq!(written.len(), 1);
    let snap = fsgt_core::snapshot::read_snapshot(&written[0]).unwrap();
    assert_eq!(snap.len(), 10_000);
    assert_eq!(snap.manifest().field_kind, FieldKind::Synthetic);
}

const SCHEDULE: LrSchedule = LrSchedule {
    kind: ScheduleKind::LinearWarmupCosine,
    eta_max: 1e-3,
    eta_min: 1e-4,
    t_warm: 3,
    t_total: 30,
};

#[test]
fn bridge_rows_on_constructed_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let steps: Vec<String> = (1..=21).map(|s| s.to_string()).collect();
    let toml = format!(
        r#"
family = "br"
scales = [2000, 4000, 8000]
[nulls]
variants = []
[synth]
steps = [{}]
seed = 11
[bridge]
metrics = "metrics.csv"
metric_kind = "mean_accuracy"
[bridge.schedule]
kind = "linear_warmup_cosine"
eta_max = 1e-3
eta_min = 1e-4
t_warm = 3
t_total = 30
"#,
        steps.join(", ")
    );
    let cfg = config(tmp.path(), &toml);
    cmd_synth(&cfg, &cfg.snapshot_root, false).unwrap();
    let out = tmp.path().join("out");
    cmd_probe(&cfg, &out, false).unwrap();
    cmd_fit(&cfg, &out).unwrap();

    let files = load_temporal(&out).unwrap();
    let model_a = model_id_for("br", 2000);
    let model_b = model_id_for("br", 4000);
    let real_a = files.iter().find(|f| f.model_id == model_a).unwrap();
    let mut csv = String::from("model_id,n,step,value\n");
    for r in &real_a.records {
        csv += &format!("{model_a},2000,{},{}\n", r.step, 2.0 * r.v_rel.unwrap());
    }
    for s in 1..=21u64 {
        csv += &format!("{model_b},4000,{s},{}\n", reconstruct_lr(&SCHEDULE, s).unwrap());
    }
    fs::write(tmp.path().join("metrics.csv"), csv).unwrap();

    let report = cmd_bridge(&cfg, &out).unwrap();
    let row = |scope: &str, internal: &str| {
        report
            .rows
            .iter()
            .find(|r| r.scope == scope && r.internal == internal && r.external == "metric")
            .unwrap()
    };
    let a = row(&model_a, "v_rel");
    assert_eq!(a.n, 21);
    assert!((a.raw.unwrap().r - 1.0).abs() < 1e-12);
    let b = row(&model_b, "v_rel");
    assert_eq!(b.n, 21);
    assert!(b.lr_partial.unwrap().degenerate);
    assert_eq!(b.lr_partial.unwrap().r, 0.0);
    // two metric scales only, so no external exponent at any step
    assert!(report.external_exponents.is_empty());
    assert!(report.rows.iter().any(|r| r.scope == CROSS_STEP));

    cmd_audit(&cfg, &out).unwrap();
    let summary: serde_json::Value = read_json(&out.join(SUMMARY_FILE)).unwrap();
    assert!(!summary["bridge_panels"].is_null());
}

#[test]
fn audit_detects_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        r#"
family = "au"
scales = [1000, 2000, 4000]
[nulls]
variants = ["n2"]
[synth]
steps = [1, 2, 3]
"#,
    );
    cmd_synth(&cfg, &cfg.snapshot_root, false).unwrap();
    let out = tmp.path().join("out");
    cmd_probe(&cfg, &out, false).unwrap();
    cmd_fit(&cfg, &out).unwrap();
    assert!(cmd_audit(&cfg, &out).unwrap().ok());

    let path = out.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("\"r2_d\": 1", "\"r2_d\": 0.5", 1).replacen("  ", "   ", 1)).unwrap();
    assert!(matches!(cmd_audit(&cfg, &out), Err(Error::Data(_))));
}
