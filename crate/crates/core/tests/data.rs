use std::fs;
use std::path::PathBuf;

use mgnet3d::data::synth::sphere_mask;
use mgnet3d::data::volume::read_geometry;
use mgnet3d::data::{
    load_volume, save_volume, stratified_group_kfold, synth_generate, FoldAssignment, Manifest,
    SynthConfig, VolumeRecord,
};
use mgnet3d::engine::Tensor;
use mgnet3d::Error;

fn record(subject: &str, scan: &str, label: u8) -> VolumeRecord {
    VolumeRecord {
        subject_id: subject.into(),
        scan_id: scan.into(),
        label,
        volume_path: PathBuf::from(format!("{subject}_{scan}.vol3")),
    }
}

#[test]
fn synthetic_effect_matches_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        effect_size: 0.8,
        ..SynthConfig::cube(12, 1, 12)
    };
    let m = synth_generate(&cfg, dir.path()).unwrap();
    let mask = sphere_mask(cfg.geometry);
    let mut inside = [0.0f64; 2];
    let mut outside = [0.0f64; 2];
    for r in &m.records {
        let v = load_volume(&r.volume_path).unwrap();
        let (mut si, mut so, mut ni, mut no) = (0.0, 0.0, 0.0, 0.0);
        for (&x, &m) in v.data().iter().zip(&mask) {
            if m {
                si += x as f64;
                ni += 1.0;
            } else {
                so += x as f64;
                no += 1.0;
            }
        }
        inside[r.label as usize] += si / ni / 12.0;
        outside[r.label as usize] += so / no / 12.0;
    }
    let effect = (inside[0] - inside[1]) - (outside[0] - outside[1]);
    assert!((effect - 0.8).abs() < 0.15, "measured effect {effect}");
    assert!((outside[0] - 1.0).abs() < 0.15 && (outside[1] - 1.0).abs() < 0.15);
}

#[test]
fn synthesis_is_deterministic_per_seed() {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    let cfg = SynthConfig::cube(2, 2, 5);
    synth_generate(&cfg, a.path()).unwrap();
    synth_generate(&cfg, b.path()).unwrap();
    synth_generate(
        &SynthConfig {
            seed: 1,
            ..cfg.clone()
        },
        c.path(),
    )
    .unwrap();
    let file = |d: &tempfile::TempDir, n: &str| fs::read(d.path().join(n)).unwrap();
    for name in [
        "manifest.csv",
        "volumes/sub-000_scan-0.vol3",
        "volumes/sub-003_scan-1.vol3",
    ] {
        assert_eq!(file(&a, name), file(&b, name), "{name}");
    }
    assert_ne!(
        file(&a, "volumes/sub-000_scan-0.vol3"),
        file(&c, "volumes/sub-000_scan-0.vol3")
    );
}

#[test]
fn manifest_round_trips_and_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(&SynthConfig::cube(2, 2, 4), dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    assert!(text.starts_with("subject_id,scan_id,label,path\n"));
    assert!(text.contains(",volumes/sub-000_scan-0.vol3"));
    let loaded = Manifest::load(dir.path().join("manifest.csv")).unwrap();
    assert_eq!(loaded, m);
    assert_eq!(loaded.geometry, [1, 4, 4, 4]);
    assert_eq!(
        read_geometry(&loaded.records[0].volume_path).unwrap(),
        [1, 4, 4, 4]
    );
}

#[test]
fn manifest_rejects_inconsistent_records() {
    let dup = vec![record("a", "1", 0), record("a", "1", 0)];
    assert!(matches!(
        Manifest::new(dup, [1, 2, 2, 2]),
        Err(Error::Data(_))
    ));
    let conflict = vec![record("a", "1", 0), record("a", "2", 1)];
    assert!(matches!(
        Manifest::new(conflict, [1, 2, 2, 2]),
        Err(Error::Data(_))
    ));
    let label = vec![record("a", "1", 2)];
    assert!(Manifest::new(label, [1, 2, 2, 2]).is_err());
}

#[test]
fn manifest_rejects_mixed_geometry_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    save_volume(&Tensor::zeros(&[1, 2, 2, 2]), dir.path().join("a.vol3")).unwrap();
    save_volume(&Tensor::zeros(&[1, 3, 2, 2]), dir.path().join("b.vol3")).unwrap();
    let csv = dir.path().join("m.csv");
    fs::write(
        &csv,
        "subject_id,scan_id,label,path\na,1,0,a.vol3\nb,1,1,b.vol3\n",
    )
    .unwrap();
    assert_eq!(Manifest::load(&csv).unwrap_err().exit_code(), 3);
    fs::write(
        &csv,
        "subject_id,scan_id,label,path\na,1,0,a.vol3\nb,1,1,missing.vol3\n",
    )
    .unwrap();
    assert!(matches!(Manifest::load(&csv), Err(Error::Io(_))));
}

#[test]
fn fold_file_round_trips() {
    let records: Vec<VolumeRecord> = (0..10)
        .map(|i| record(&format!("s{i}"), "1", (i % 2) as u8))
        .collect();
    let m = Manifest::new(records, [1, 2, 2, 2]).unwrap();
    let folds = stratified_group_kfold(&m, 3, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("folds.csv");
    folds.save(&path).unwrap();
    assert_eq!(FoldAssignment::load(&path).unwrap(), folds);
    assert!(stratified_group_kfold(&m, 6, 0).is_err());
    assert!(stratified_group_kfold(&m, 1, 0).is_err());
}
