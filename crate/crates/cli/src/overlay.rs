//! Prediction overlays: class colors blended over the grayscale input.

use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::Deserialize;

use hierseg::dataprep::PriorityOrder;
use hierseg::hierarchy::ClassTree;
use hierseg::model::Prediction;

pub type Color = [u8; 3];

/// Colors for classes outside the reference palette, assigned in tree order.
const FALLBACK: [Color; 8] = [
    [0, 255, 255],
    [255, 128, 0],
    [128, 0, 255],
    [128, 255, 128],
    [255, 0, 255],
    [0, 128, 128],
    [128, 128, 0],
    [255, 192, 128],
];

#[derive(Debug, Clone, PartialEq)]
pub struct Palette(pub BTreeMap<String, Color>);

impl Palette {
    pub fn tl_pano() -> Self {
        let entries: [(&str, Color); 6] = [
            ("Upper", [255, 255, 0]),
            ("Lower", [255, 105, 180]),
            ("Pulp", [0, 0, 139]),
            ("Dentin", [255, 255, 255]),
            ("Enamel", [255, 0, 0]),
            ("Composite", [0, 255, 0]),
        ];
        Palette(entries.iter().map(|(n, c)| (n.to_string(), *c)).collect())
    }

    /// Reference colors plus fallbacks for every other non-background leaf.
    pub fn for_tree(tree: &ClassTree) -> Self {
        let mut palette = Self::tl_pano();
        let mut spare = FALLBACK.iter().cycle();
        for node in tree.leaves() {
            if node.name != "Background" && !palette.0.contains_key(&node.name) {
                palette.0.insert(node.name.clone(), *spare.next().expect("cycle never ends"));
            }
        }
        palette
    }

    /// Overrides entries from a JSON object of `name -> [r, g, b]` or `"#rrggbb"`.
    pub fn apply_overrides(&mut self, json: &str, tree: &ClassTree) -> anyhow::Result<()> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Entry {
            Rgb(Color),
            Hex(String),
        }
        let entries: BTreeMap<String, Entry> = serde_json::from_str(json).context("palette must map class names to colors")?;
        for (name, entry) in entries {
            if tree.node(&name).is_none() {
                bail!("palette names unknown class '{name}'");
            }
            let color = match entry {
                Entry::Rgb(c) => c,
                Entry::Hex(h) => parse_hex(&h).with_context(|| format!("bad color '{h}' for '{name}'"))?,
            };
            self.0.insert(name, color);
        }
        Ok(())
    }
}

fn parse_hex(text: &str) -> anyhow::Result<Color> {
    let digits = text.strip_prefix('#').unwrap_or(text);
    if digits.len() != 6 {
        bail!("expected six hex digits");
    }
    let mut color = [0u8; 3];
    for (i, c) in color.iter_mut().enumerate() {
        *c = u8::from_str_radix(&digits[2 * i..2 * i + 2], 16)?;
    }
    Ok(color)
}

/// Class painted at every pixel, or `None`. Among positive classes with a
/// color, the highest-priority one wins; classes outside the priority list
/// rank below it, deeper levels first.
pub fn label_map(pred: &Prediction, tree: &ClassTree, palette: &Palette, priority: &PriorityOrder) -> Array2<Option<String>> {
    let leaf_ranks = priority.ranks(tree);
    let mut candidates: Vec<(usize, Reverse<usize>, usize, &str)> = Vec::new();
    for level in 0..pred.levels.len() {
        for (pos, name) in tree.level_names(level).into_iter().enumerate() {
            if palette.0.contains_key(name) {
                let rank = leaf_ranks.get(name).copied().unwrap_or(usize::MAX);
                candidates.push((rank, Reverse(level), pos, name));
            }
        }
    }
    candidates.sort();
    let (_, h, w) = pred.levels.first().map(|p| p.dim()).unwrap_or((0, 0, 0));
    Array2::from_shape_fn((h, w), |(y, x)| {
        candidates
            .iter()
            .find(|(_, Reverse(level), pos, _)| pred.levels[*level][[*pos, y, x]])
            .map(|(.., name)| name.to_string())
    })
}

pub fn render(image: &Array2<f64>, labels: &Array2<Option<String>>, palette: &Palette, alpha: f64) -> RgbImage {
    let (h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let gray = (image[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round();
        match labels[[y as usize, x as usize]].as_ref().and_then(|n| palette.0.get(n)) {
            None => Rgb([gray as u8; 3]),
            Some(color) => Rgb(color.map(|c| ((1.0 - alpha) * gray + alpha * c as f64).round() as u8)),
        }
    })
}

pub fn save(img: &RgbImage, path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
