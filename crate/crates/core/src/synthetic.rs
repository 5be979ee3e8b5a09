//! Toy two-level datasets: rectangular blobs split into vertical strips, one
//! strip per child class, each class drawn at its own gray level.
//!
//! Output matches a raw annotation drop, so `prepare` runs on it unchanged:
//!
//! ```text
//! class_map.csv  class_tree.json  annotations.json  images/<id>.png
//! ```

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataprep::dataset::{Sample, ANNOTATIONS_FILE, CLASS_MAP_FILE, CLASS_TREE_FILE, IMAGES_DIR};
use crate::dataprep::io::{self, AnnotatedImage};
use crate::dataprep::{mask_to_hier_targets, polygons_to_mask, PolygonInstance, PriorityOrder, SemanticMask, MIN_OBJECT_PIXELS};
use crate::error::{Error, Result};
use crate::hierarchy::{parse_class_map, parse_class_tree, ClassTree};

pub const PARENT_CLASS: &str = "Blob";
pub const BACKGROUND_LEVEL: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Side length of the square images.
    pub image_size: usize,
    pub images: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Child classes per blob. Values below 2 give a degenerate tree.
    pub children: usize,
    /// Standard deviation of additive Gaussian noise on `[0, 1]` intensities.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 32,
            images: 20,
            min_shapes: 1,
            max_shapes: 2,
            children: 3,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.children == 0 || self.children > 8 {
            return Err(Error::Config(format!("children must be in 1..=8, got {}", self.children)));
        }
        if self.images == 0 || self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!(
                "need at least one image and 1 <= min_shapes <= max_shapes (got {}..={})",
                self.min_shapes, self.max_shapes
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be non-negative", self.noise)));
        }
        let (height, width) = self.strip_geometry().0;
        if height + 2 > self.image_size || width * self.children + 2 > self.image_size {
            return Err(Error::Config(format!(
                "{}×{} images cannot hold a blob with {} strips of more than {MIN_OBJECT_PIXELS} pixels",
                self.image_size, self.image_size, self.children
            )));
        }
        Ok(())
    }

    /// Smallest blob height and strip width, and the largest blob height.
    fn strip_geometry(&self) -> ((usize, usize), usize) {
        let max_h = (self.image_size / 2).max(8);
        let min_h = (self.image_size / 4).max(8).min(max_h);
        let min_w = (MIN_OBJECT_PIXELS + 1).div_ceil(min_h);
        ((min_h, min_w), max_h)
    }

    pub fn child_names(&self) -> Vec<String> {
        (1..=self.children).map(|k| format!("Part{k}")).collect()
    }

    /// Noise-free intensity of every class, Background first.
    pub fn class_levels(&self) -> Vec<f64> {
        let k = self.children;
        let mut levels = vec![BACKGROUND_LEVEL];
        levels.extend((0..k).map(|i| {
            if k == 1 {
                0.6
            } else {
                0.35 + 0.55 * i as f64 / (k - 1) as f64
            }
        }));
        levels
    }

    pub fn class_map_csv(&self) -> String {
        let mut out = format!("Background,0\n{PARENT_CLASS},1\n");
        for (i, name) in self.child_names().iter().enumerate() {
            out.push_str(&format!("{name},{}\n", i + 2));
        }
        out
    }

    pub fn class_tree_json(&self) -> String {
        let children: serde_json::Map<String, serde_json::Value> = self
            .child_names()
            .into_iter()
            .map(|n| (n, serde_json::json!({})))
            .collect();
        let mut root = serde_json::Map::new();
        root.insert("Background".into(), serde_json::json!({}));
        root.insert(PARENT_CLASS.into(), serde_json::Value::Object(children));
        let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(root)).expect("valid JSON value");
        text.push('\n');
        text
    }

    /// The tree without hierarchy-rule checks, so degenerate specs can be audited.
    pub fn tree(&self) -> ClassTree {
        let map = parse_class_map(&self.class_map_csv()).expect("generated class map is valid");
        parse_class_tree(&self.class_tree_json(), &map).expect("generated class tree is valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: String,
    pub image: Array2<f64>,
    pub mask: SemanticMask,
    pub instances: Vec<PolygonInstance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub tree: ClassTree,
    pub images: Vec<SyntheticImage>,
}

impl SyntheticDataset {
    pub fn samples(&self) -> Result<Vec<Sample>> {
        self.images
            .iter()
            .map(|img| {
                Ok(Sample {
                    id: img.id.clone(),
                    image: img.image.clone(),
                    targets: mask_to_hier_targets(&img.mask, &self.tree)?,
                })
            })
            .collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.images.iter().map(|i| i.id.clone()).collect()
    }

    /// Writes the raw annotation layout.
    pub fn write(&self, out: &Path) -> Result<()> {
        io::write_bytes(&out.join(CLASS_MAP_FILE), self.spec.class_map_csv().as_bytes())?;
        io::write_bytes(&out.join(CLASS_TREE_FILE), self.spec.class_tree_json().as_bytes())?;
        let annotated: Vec<AnnotatedImage> = self
            .images
            .iter()
            .map(|img| AnnotatedImage {
                filename: format!("{}.png", img.id),
                instances: img.instances.clone(),
            })
            .collect();
        io::write_bytes(&out.join(ANNOTATIONS_FILE), io::via_annotations_json(&annotated, "class").as_bytes())?;
        for img in &self.images {
            io::write_gray_image(&out.join(IMAGES_DIR).join(format!("{}.png", img.id)), &img.image)?;
        }
        Ok(())
    }
}

struct Rect {
    x: usize,
    y: usize,
    widths: Vec<usize>,
    height: usize,
}

impl Rect {
    fn width(&self) -> usize {
        self.widths.iter().sum()
    }

    /// Overlap test with a one-pixel gap so blobs never touch.
    fn collides(&self, other: &Rect) -> bool {
        self.x < other.x + other.width() + 1
            && other.x < self.x + self.width() + 1
            && self.y < other.y + other.height + 1
            && other.y < self.y + self.height + 1
    }
}

fn sample_rect(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Option<Rect> {
    let ((min_h, _), max_h) = spec.strip_geometry();
    let n = spec.image_size;
    let height = rng.random_range(min_h..=max_h.min(n - 2));
    let strip_min = (MIN_OBJECT_PIXELS + 1).div_ceil(height).max(2);
    let budget = n - 2;
    if strip_min * spec.children > budget {
        return None;
    }
    let widths: Vec<usize> = (0..spec.children)
        .map(|_| rng.random_range(strip_min..=strip_min + (n / 8).max(1)))
        .collect();
    let width: usize = widths.iter().sum();
    if width > budget {
        return None;
    }
    Some(Rect {
        x: rng.random_range(1..=n - 1 - width),
        y: rng.random_range(1..=n - 1 - height),
        widths,
        height,
    })
}

fn render(spec: &SyntheticSpec, index: usize, tree: &ClassTree, rng: &mut ChaCha8Rng) -> Result<SyntheticImage> {
    let n = spec.image_size;
    let id = format!("synth_{index:04}");
    let shapes = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let mut rects: Vec<Rect> = Vec::new();
    for _ in 0..shapes * 20 {
        if rects.len() == shapes {
            break;
        }
        if let Some(r) = sample_rect(spec, rng) {
            if rects.iter().all(|o| !o.collides(&r)) {
                rects.push(r);
            }
        }
    }
    let names = spec.child_names();
    let mut instances = Vec::new();
    for r in &rects {
        let mut x = r.x;
        for (k, &w) in r.widths.iter().enumerate() {
            let (x0, x1) = (x as f64, (x + w) as f64);
            let (y0, y1) = (r.y as f64, (r.y + r.height) as f64);
            instances.push(PolygonInstance {
                class: names[k].clone(),
                vertices: vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)],
                image_id: format!("{id}.png"),
            });
            x += w;
        }
    }
    let mask = polygons_to_mask(&instances, n, n, tree, &PriorityOrder(names))?;
    let levels = spec.class_levels();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let image = mask.data().map(|&v| {
        let base = if v == 0 { levels[0] } else { levels[v as usize - 1] };
        let jitter = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
        (base + jitter).clamp(0.0, 1.0)
    });
    Ok(SyntheticImage {
        id,
        image,
        mask,
        instances,
    })
}

/// Generates a dataset; identical specs give identical datasets.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let tree = spec.tree();
    let images = (0..spec.images)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            render(spec, i, &tree, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset {
        spec: spec.clone(),
        tree,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_partitioned_by_children() {
        let data = generate(&SyntheticSpec::default()).unwrap();
        for img in &data.images {
            // Mask values are Background (0) or a child (2..); the parent is never stored.
            assert!(img.mask.data().iter().all(|&v| v != 1));
            let blob = img.mask.data().iter().filter(|&&v| v >= 2).count();
            assert!(blob > MIN_OBJECT_PIXELS * data.spec.children);
        }
    }
}
