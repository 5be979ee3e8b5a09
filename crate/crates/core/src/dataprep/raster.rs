use std::collections::{HashMap, VecDeque};

use ndarray::Array2;

use crate::dataprep::SemanticMask;
use crate::error::{Error, Result};
use crate::hierarchy::ClassTree;

/// Objects must keep strictly more than this many pixels after overlap removal.
pub const MIN_OBJECT_PIXELS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct PolygonInstance {
    pub class: String,
    /// `(x, y)` vertices in pixel units, origin at the top-left image corner.
    pub vertices: Vec<(f64, f64)>,
    pub image_id: String,
}

/// Overlap resolution order, highest priority first. Leaf classes not listed
/// rank below every listed class, in tree order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriorityOrder(pub Vec<String>);

impl PriorityOrder {
    /// Composite, enamel, pulp, dentin, then alveolar bone.
    pub fn tl_pano() -> Self {
        PriorityOrder(
            ["Composite", "Enamel", "Pulp", "Dentin", "Upper", "Lower"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
    }

    /// Rank of every leaf class (0 = highest priority).
    pub fn ranks(&self, tree: &ClassTree) -> HashMap<String, usize> {
        let mut ranks: HashMap<String, usize> = self
            .0
            .iter()
            .enumerate()
            .map(|(i, name)| (name.clone(), i))
            .collect();
        let mut next = self.0.len();
        for leaf in tree.leaves() {
            ranks.entry(leaf.name.clone()).or_insert_with(|| {
                next += 1;
                next - 1
            });
        }
        ranks
    }
}

impl Default for PriorityOrder {
    fn default() -> Self {
        Self::tl_pano()
    }
}

/// Even–odd fill sampled at pixel centers; vertices outside the image are clipped.
pub fn rasterize_polygon(vertices: &[(f64, f64)], width: usize, height: usize) -> Array2<bool> {
    let mut out = Array2::from_elem((height, width), false);
    if vertices.len() < 3 {
        return out;
    }
    let mut crossings = Vec::new();
    for y in 0..height {
        let cy = y as f64 + 0.5;
        crossings.clear();
        for (i, &(x0, y0)) in vertices.iter().enumerate() {
            let (x1, y1) = vertices[(i + 1) % vertices.len()];
            if (y0 <= cy) != (y1 <= cy) {
                crossings.push(x0 + (cy - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            // Pixel x is inside when its center x + 0.5 lies in [a, b).
            let start = (pair[0] - 0.5).ceil().max(0.0);
            let end = (pair[1] - 0.5).ceil().min(width as f64);
            let (start, end) = (start as usize, end.max(0.0) as usize);
            for x in start..end.max(start) {
                out[[y, x]] = true;
            }
        }
    }
    out
}

/// Labels 8-connected components of `mask`; returns one pixel list per component.
pub fn connected_components(mask: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || seen[[y, x]] {
                continue;
            }
            let mut pixels = Vec::new();
            seen[[y, x]] = true;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                pixels.push((cy, cx));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let ny = cy as i64 + dy;
                        let nx = cx as i64 + dx;
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            components.push(pixels);
        }
    }
    components
}

/// Rasterizes overlapping instances into one semantic mask.
///
/// Instances are visited from highest to lowest priority. Each instance keeps
/// only pixels not already claimed; every remaining 8-connected piece with more
/// than [`MIN_OBJECT_PIXELS`] pixels is written with its class-map value.
/// Unclaimed pixels stay Background (0).
pub fn polygons_to_mask(
    instances: &[PolygonInstance],
    width: usize,
    height: usize,
    tree: &ClassTree,
    priority: &PriorityOrder,
) -> Result<SemanticMask> {
    let ranks = priority.ranks(tree);
    let mut ordered = Vec::with_capacity(instances.len());
    for inst in instances {
        let node = tree.node(&inst.class).ok_or_else(|| {
            Error::Validation(format!(
                "instance in '{}' has class '{}' missing from the class map",
                inst.image_id, inst.class
            ))
        })?;
        let value = node.stored_value().ok_or_else(|| {
            Error::Validation(format!(
                "instance in '{}' has parent class '{}'; only leaf classes are stored",
                inst.image_id, inst.class
            ))
        })?;
        if inst.vertices.len() < 3 {
            return Err(Error::Validation(format!(
                "instance of '{}' in '{}' has fewer than 3 vertices",
                inst.class, inst.image_id
            )));
        }
        ordered.push((ranks[&inst.class], value, inst));
    }
    ordered.sort_by_key(|(rank, _, _)| *rank);

    let mut data = Array2::<u8>::zeros((height, width));
    let mut claimed = Array2::from_elem((height, width), false);
    for (_, value, inst) in ordered {
        let mut remnant = rasterize_polygon(&inst.vertices, width, height);
        remnant.zip_mut_with(&claimed, |r, &c| *r = *r && !c);
        for component in connected_components(&remnant) {
            if component.len() <= MIN_OBJECT_PIXELS {
                continue;
            }
            for (y, x) in component {
                data[[y, x]] = value;
                claimed[[y, x]] = true;
            }
        }
    }
    Ok(SemanticMask::new(data))
}
