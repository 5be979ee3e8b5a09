//! Preparation of raw annotation drops and the synthetic generator, end to end.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hierseg::dataprep::dataset::{
    prepare_dataset, Dataset, PrepareOptions, FOLDS_FILE, STATS_FILE, WEIGHTS_FILE,
};
use hierseg::dataprep::{hier_targets_to_mask, mask_to_hier_targets, SemanticMask, Split};
use hierseg::hierarchy::{validate_hierarchy, Rule, Severity};
use hierseg::metrics::{aggregate, evaluate_image, image_records, EmptyPolicy};
use hierseg::model::Prediction;
use hierseg::synthetic::{generate, SyntheticSpec};
use hierseg::trainer::class_names;
use ndarray::{Array2, Array3};

fn synth_options(spec: &SyntheticSpec) -> PrepareOptions {
    PrepareOptions {
        folds: 3,
        holdout: 0.2,
        priority: spec.child_names(),
        ..PrepareOptions::default()
    }
}

fn prepare_synthetic(spec: &SyntheticSpec, raw: &Path, out: &Path) {
    let data = generate(spec).unwrap();
    data.write(raw).unwrap();
    prepare_dataset(&raw.join("annotations.json"), &raw.join("images"), &data.tree, out, &synth_options(spec)).unwrap();
}

fn read_tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn synthetic_generation_is_byte_identical_for_a_seed() {
    let spec = SyntheticSpec {
        image_size: 64,
        images: 20,
        ..SyntheticSpec::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(&spec).unwrap().write(a.path()).unwrap();
    generate(&spec).unwrap().write(b.path()).unwrap();
    let (fa, fb) = (read_tree_bytes(a.path()), read_tree_bytes(b.path()));
    assert_eq!(fa.len(), 20 + 3);
    assert_eq!(fa, fb);

    let other = generate(&SyntheticSpec { seed: 1, ..spec }).unwrap();
    let first = generate(&spec).unwrap();
    assert_ne!(other.images[0].image, first.images[0].image);
}

#[test]
fn single_child_spec_breaks_the_child_count_rule() {
    let spec = SyntheticSpec {
        children: 1,
        ..SyntheticSpec::default()
    };
    let violations = validate_hierarchy(&spec.tree());
    assert!(violations
        .iter()
        .any(|v| v.rule == Rule::ChildCount && v.severity == Severity::Error && v.class == "Blob"));
    assert!(validate_hierarchy(&SyntheticSpec::default().tree())
        .iter()
        .all(|v| v.severity != Severity::Error));
}

#[test]
fn masks_round_trip_through_targets() {
    let data = generate(&SyntheticSpec::default()).unwrap();
    for img in &data.images {
        let targets = mask_to_hier_targets(&img.mask, &data.tree).unwrap();
        assert_eq!(hier_targets_to_mask(&targets, &data.tree).unwrap(), img.mask);
    }
}

/// Labels each pixel with the class whose gray level is nearest.
fn nearest_level_prediction(image: &Array2<f64>, spec: &SyntheticSpec, tree: &hierseg::hierarchy::ClassTree) -> Prediction {
    let levels = spec.class_levels();
    let labels = image.mapv(|v| {
        let k = (0..levels.len())
            .min_by(|&a, &b| (levels[a] - v).abs().total_cmp(&(levels[b] - v).abs()))
            .unwrap();
        if k == 0 {
            0u8
        } else {
            k as u8 + 1
        }
    });
    let targets = mask_to_hier_targets(&SemanticMask::new(labels), tree).unwrap();
    Prediction {
        levels: targets.levels().iter().map(|l| l.mapv(|v| v == 1)).collect::<Vec<Array3<bool>>>(),
    }
}

#[test]
fn intensity_oracle_recovers_noise_free_synthetic_masks() {
    for noise in [0.0, 0.05] {
        let spec = SyntheticSpec {
            noise,
            ..SyntheticSpec::default()
        };
        let data = generate(&spec).unwrap();
        let mut records = Vec::new();
        for (img, sample) in data.images.iter().zip(data.samples().unwrap()) {
            let pred = nearest_level_prediction(&img.image, &spec, &data.tree);
            let counts = evaluate_image(&pred, &sample.targets, &data.tree).unwrap();
            records.extend(image_records(&img.id, 0, &counts, &data.tree, EmptyPolicy::One));
        }
        let report = aggregate(records, &class_names(&data.tree)).unwrap();
        let iou = report.average().iou.mean;
        assert!(iou >= 0.95, "noise {noise}: mean IoU {iou}");
        if noise == 0.0 {
            assert_eq!(iou, 1.0);
        }
    }
}

#[test]
fn prepare_is_idempotent_and_loads_back() {
    let spec = SyntheticSpec::default();
    let raw = tempfile::tempdir().unwrap();
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    prepare_synthetic(&spec, raw.path(), out_a.path());
    prepare_synthetic(&spec, raw.path(), out_b.path());
    let (a, b) = (read_tree_bytes(out_a.path()), read_tree_bytes(out_b.path()));
    assert_eq!(a, b);
    for file in [FOLDS_FILE, STATS_FILE, WEIGHTS_FILE] {
        assert!(a.contains_key(file), "missing {file}");
    }

    let data = generate(&spec).unwrap();
    let dataset = Dataset::load(out_a.path()).unwrap();
    assert_eq!(dataset.samples.len(), spec.images);
    assert_eq!(dataset.manifest.folds(), 3);
    let test = dataset.manifest.test_ids();
    assert_eq!(test.len(), 4);
    for img in &data.images {
        let sample = dataset.sample(&img.id).unwrap();
        assert_eq!(hier_targets_to_mask(&sample.targets, &dataset.tree).unwrap(), img.mask);
        // Images go through 8-bit PNG.
        let err = (&sample.image - &img.image).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err <= 0.5 / 255.0 + 1e-12);
    }
    // Every non-test image sits in exactly one validation fold.
    let mut seen: Vec<String> = (0..3).flat_map(|k| dataset.manifest.val_ids(k)).collect();
    seen.sort();
    let mut expected: Vec<String> = data.ids().into_iter().filter(|id| !test.contains(id)).collect();
    expected.sort();
    assert_eq!(seen, expected);
    assert!(dataset
        .manifest
        .assignments()
        .iter()
        .all(|(id, s)| (*s == Split::Test) == test.contains(id)));
}

#[test]
fn empty_annotation_drop_fails_without_output() {
    let spec = SyntheticSpec::default();
    let raw = tempfile::tempdir().unwrap();
    fs::create_dir_all(raw.path().join("annotations")).unwrap();
    let out = raw.path().join("prepared");
    let err = prepare_dataset(
        &raw.path().join("annotations"),
        &raw.path().join("images"),
        &spec.tree(),
        &out,
        &synth_options(&spec),
    )
    .unwrap_err();
    assert!(err.is_data_error(), "{err}");
    assert!(!out.exists());
}

#[test]
fn unknown_annotation_class_is_rejected() {
    let spec = SyntheticSpec::default();
    let raw = tempfile::tempdir().unwrap();
    generate(&spec).unwrap().write(raw.path()).unwrap();
    let path = raw.path().join("annotations.json");
    let text = fs::read_to_string(&path).unwrap().replacen("Part1", "Part9", 1);
    fs::write(&path, text).unwrap();
    let out = raw.path().join("prepared");
    let err = prepare_dataset(&path, &raw.path().join("images"), &spec.tree(), &out, &synth_options(&spec)).unwrap_err();
    assert!(err.to_string().contains("Part9"), "{err}");
    assert!(!out.exists());
}
