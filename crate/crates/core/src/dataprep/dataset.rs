//! Prepared dataset layout and the annotation-to-dataset pipeline.
//!
//! A prepared dataset directory holds:
//!
//! ```text
//! class_map.csv     class_tree.json    folds.csv
//! weights.json      stats.csv
//! images/<id>.png   masks/<id>.png
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataprep::io::{self, AnnotatedImage};
use crate::dataprep::{
    compute_class_weights, compute_flat_weights, make_folds, mask_to_hier_targets, polygons_to_mask, FoldManifest,
    HierTargetStack, LossWeights, PriorityOrder, SemanticMask, WeightScheme,
};
use crate::error::{Error, Result};
use crate::hierarchy::{parse_class_map, parse_class_tree, validate_hierarchy, ClassTree, Severity};

pub const CLASS_MAP_FILE: &str = "class_map.csv";
pub const CLASS_TREE_FILE: &str = "class_tree.json";
pub const FOLDS_FILE: &str = "folds.csv";
pub const WEIGHTS_FILE: &str = "weights.json";
pub const STATS_FILE: &str = "stats.csv";
pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
pub const ANNOTATIONS_FILE: &str = "annotations.json";

/// Reads `class_map.csv` and `class_tree.json` from a directory and rejects
/// trees that break a hierarchy rule.
pub fn load_tree(dir: &Path) -> Result<ClassTree> {
    load_tree_files(&dir.join(CLASS_MAP_FILE), &dir.join(CLASS_TREE_FILE))
}

pub fn load_tree_files(map_path: &Path, tree_path: &Path) -> Result<ClassTree> {
    let map = parse_class_map(&io::read_text(map_path)?).map_err(|e| with_source(e, map_path))?;
    let tree = parse_class_tree(&io::read_text(tree_path)?, &map).map_err(|e| with_source(e, tree_path))?;
    let errors: Vec<String> = validate_hierarchy(&tree)
        .into_iter()
        .filter(|v| v.severity == Severity::Error)
        .map(|v| v.to_string())
        .collect();
    if !errors.is_empty() {
        return Err(Error::Validation(format!(
            "{}: {}",
            tree_path.display(),
            errors.join("; ")
        )));
    }
    Ok(tree)
}

fn with_source(err: Error, path: &Path) -> Error {
    match err {
        Error::Format { message, .. } => Error::Format {
            source_name: path.display().to_string(),
            message,
        },
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// One training/evaluation image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Array2<f64>,
    pub targets: HierTargetStack,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub tree: ClassTree,
    pub manifest: FoldManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Validation(format!("dataset directory {} does not exist", root.display())));
        }
        let tree = load_tree(root)?;
        let manifest = FoldManifest::from_csv(&io::read_text(&root.join(FOLDS_FILE))?)?;
        let mut samples = Vec::with_capacity(manifest.assignments().len());
        for (id, _) in manifest.assignments() {
            let image_path = root.join(IMAGES_DIR).join(format!("{id}.png"));
            let image = io::read_gray_image(&image_path)?;
            let mask = io::read_mask(&root.join(MASKS_DIR).join(format!("{id}.png")))?;
            if mask.data().dim() != image.dim() {
                return Err(Error::Validation(format!(
                    "{}: image is {:?} but mask is {:?}",
                    image_path.display(),
                    image.dim(),
                    mask.data().dim()
                )));
            }
            let targets = mask_to_hier_targets(&mask, &tree)
                .map_err(|e| Error::Validation(format!("mask of '{id}': {e}")))?;
            samples.push(Sample {
                id: id.clone(),
                image,
                targets,
            });
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            tree,
            manifest,
            samples,
        })
    }

    pub fn from_samples(tree: ClassTree, manifest: FoldManifest, samples: Vec<Sample>) -> Self {
        Dataset {
            root: PathBuf::new(),
            tree,
            manifest,
            samples,
        }
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn subset(&self, ids: &[String]) -> Result<Vec<&Sample>> {
        ids.iter()
            .map(|id| {
                self.sample(id)
                    .ok_or_else(|| Error::Validation(format!("image '{id}' is in the fold manifest but not loaded")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareOptions {
    /// Region attribute holding the class name.
    pub class_key: String,
    pub folds: usize,
    pub holdout: f64,
    pub seed: u64,
    pub priority: Vec<String>,
    pub weights: WeightScheme,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            class_key: "class".into(),
            folds: 5,
            holdout: 0.10,
            seed: 0,
            priority: PriorityOrder::tl_pano().0,
            weights: WeightScheme::default(),
        }
    }
}

/// Per-class statistics in the layout of the reference dataset table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: String,
    pub value: Option<u8>,
    pub images: usize,
    pub pixels: u64,
    pub pixels_per_image: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub hierarchical: LossWeights,
    pub flat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareSummary {
    pub images: usize,
    pub stats: Vec<ClassStats>,
    pub weights: WeightsFile,
    pub manifest: FoldManifest,
}

pub fn class_stats(targets: &[HierTargetStack], tree: &ClassTree) -> Vec<ClassStats> {
    tree.nodes()
        .iter()
        .map(|node| {
            let (level, pos) = tree.position(&node.name).expect("node belongs to the tree");
            let mut images = 0;
            let mut pixels = 0u64;
            for t in targets {
                let n = t.level(level).index_axis(Axis(0), pos).iter().filter(|&&v| v == 1).count() as u64;
                if n > 0 {
                    images += 1;
                }
                pixels += n;
            }
            ClassStats {
                class: node.name.clone(),
                value: node.stored_value(),
                images,
                pixels,
                pixels_per_image: if images == 0 { 0.0 } else { pixels as f64 / images as f64 },
            }
        })
        .collect()
}

pub fn stats_csv(stats: &[ClassStats]) -> String {
    let mut out = String::from("class,value,images,pixels,pixels_per_image\n");
    for s in stats {
        let value = s.value.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{:.1}\n",
            s.class, value, s.images, s.pixels, s.pixels_per_image
        ));
    }
    out
}

fn annotation_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn image_id(filename: &str) -> String {
    Path::new(filename)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| filename.to_string())
}

/// Rasterizes annotations into masks, assigns folds, computes weights and
/// writes the prepared dataset. Nothing is written unless every input parses.
pub fn prepare_dataset(
    annotations: &Path,
    images_dir: &Path,
    tree: &ClassTree,
    out: &Path,
    options: &PrepareOptions,
) -> Result<PrepareSummary> {
    let mut records: Vec<AnnotatedImage> = Vec::new();
    for file in annotation_files(annotations)? {
        let text = io::read_text(&file)?;
        records.extend(io::parse_via_annotations(&text, &options.class_key, &file.display().to_string())?);
    }
    if records.is_empty() {
        return Err(Error::Validation(format!("no annotated images found in {}", annotations.display())));
    }
    records.sort_by(|a, b| a.filename.cmp(&b.filename));
    let mut seen = BTreeSet::new();
    for r in &records {
        if !seen.insert(image_id(&r.filename)) {
            return Err(Error::Validation(format!("image '{}' is annotated twice", r.filename)));
        }
    }

    let priority = PriorityOrder(options.priority.clone());
    let mut prepared: Vec<(String, Array2<f64>, SemanticMask)> = Vec::with_capacity(records.len());
    for r in &records {
        let image = io::read_gray_image(&images_dir.join(&r.filename))?;
        let (h, w) = image.dim();
        let mask = polygons_to_mask(&r.instances, w, h, tree, &priority)?;
        prepared.push((image_id(&r.filename), image, mask));
    }

    let ids: Vec<String> = prepared.iter().map(|p| p.0.clone()).collect();
    let manifest = make_folds(&ids, options.folds, options.holdout, options.seed)?;
    let targets: Vec<HierTargetStack> = prepared
        .iter()
        .map(|(_, _, m)| mask_to_hier_targets(m, tree))
        .collect::<Result<_>>()?;
    let test: BTreeSet<String> = manifest.test_ids().into_iter().collect();
    let train_targets: Vec<HierTargetStack> = prepared
        .iter()
        .zip(&targets)
        .filter(|((id, _, _), _)| !test.contains(id))
        .map(|(_, t)| t.clone())
        .collect();
    let train_masks: Vec<SemanticMask> = prepared
        .iter()
        .filter(|(id, _, _)| !test.contains(id))
        .map(|(_, _, m)| m.clone())
        .collect();
    let weights = WeightsFile {
        hierarchical: compute_class_weights(&train_targets, tree, options.weights)?,
        flat: compute_flat_weights(&train_masks, tree)?,
    };
    let stats = class_stats(&targets, tree);

    io::write_bytes(&out.join(CLASS_MAP_FILE), tree.class_map().to_csv().as_bytes())?;
    io::write_bytes(&out.join(CLASS_TREE_FILE), tree.to_json().as_bytes())?;
    io::write_bytes(&out.join(FOLDS_FILE), manifest.to_csv().as_bytes())?;
    let mut weights_json = serde_json::to_string_pretty(&weights)?;
    weights_json.push('\n');
    io::write_bytes(&out.join(WEIGHTS_FILE), weights_json.as_bytes())?;
    io::write_bytes(&out.join(STATS_FILE), stats_csv(&stats).as_bytes())?;
    for (id, image, mask) in &prepared {
        io::write_gray_image(&out.join(IMAGES_DIR).join(format!("{id}.png")), image)?;
        io::write_mask(&out.join(MASKS_DIR).join(format!("{id}.png")), mask)?;
    }
    Ok(PrepareSummary {
        images: prepared.len(),
        stats,
        weights,
        manifest,
    })
}
