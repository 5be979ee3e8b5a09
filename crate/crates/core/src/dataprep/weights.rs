use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataprep::{HierTargetStack, SemanticMask};
use crate::error::{Error, Result};
use crate::hierarchy::ClassTree;

/// Which classes share the median in `w_c = median(freq) / freq_c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MedianScope {
    /// One median over every class of every level.
    #[default]
    Global,
    /// An independent median per level.
    PerLevel,
}

/// Denominator of a class frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyBasis {
    /// Positive pixels over all image pixels.
    #[default]
    AllPixels,
    /// Positive pixels over pixels whose target is not `-1`.
    VisiblePixels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct WeightScheme {
    #[serde(default)]
    pub median: MedianScope,
    #[serde(default)]
    pub basis: FrequencyBasis,
}

/// Per-level class weights, in level order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub levels: Vec<Vec<f64>>,
}

impl LossWeights {
    pub fn uniform(tree: &ClassTree) -> Self {
        LossWeights {
            levels: (0..tree.depth()).map(|l| vec![1.0; tree.level_size(l)]).collect(),
        }
    }

    pub fn level(&self, level: usize) -> &[f64] {
        &self.levels[level]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        LossWeights {
            levels: self
                .levels
                .iter()
                .map(|l| l.iter().map(|w| w * factor).collect())
                .collect(),
        }
    }
}

/// Pixel tallies per level and class.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub positive: Vec<Vec<u64>>,
    pub visible: Vec<Vec<u64>>,
    pub total_pixels: u64,
}

pub fn count_classes<'a>(
    targets: impl IntoIterator<Item = &'a HierTargetStack>,
    tree: &ClassTree,
) -> ClassCounts {
    let mut counts = ClassCounts {
        positive: (0..tree.depth()).map(|l| vec![0; tree.level_size(l)]).collect(),
        visible: (0..tree.depth()).map(|l| vec![0; tree.level_size(l)]).collect(),
        total_pixels: 0,
    };
    for stack in targets {
        counts.total_pixels += (stack.height() * stack.width()) as u64;
        for (level, plane) in stack.levels().iter().enumerate() {
            for (c, class_plane) in plane.outer_iter().enumerate() {
                for &t in class_plane.iter() {
                    if t == 1 {
                        counts.positive[level][c] += 1;
                    }
                    if t != -1 {
                        counts.visible[level][c] += 1;
                    }
                }
            }
        }
    }
    counts
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Inverse median frequency over one group of frequencies. Zero frequencies
/// take the group's smallest nonzero frequency.
fn inverse_median(freqs: &mut [f64], labels: &[String]) -> Vec<f64> {
    let smallest = freqs
        .iter()
        .copied()
        .filter(|&f| f > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !smallest.is_finite() {
        warn!("no class in {labels:?} has any pixels; using unit weights");
        return vec![1.0; freqs.len()];
    }
    for (f, label) in freqs.iter_mut().zip(labels) {
        if *f == 0.0 {
            warn!("class '{label}' has zero frequency; substituting {smallest}");
            *f = smallest;
        }
    }
    let m = median(freqs);
    freqs.iter().map(|f| m / f).collect()
}

pub fn weights_from_counts(counts: &ClassCounts, tree: &ClassTree, scheme: WeightScheme) -> LossWeights {
    let freq = |level: usize, c: usize| -> f64 {
        let denom = match scheme.basis {
            FrequencyBasis::AllPixels => counts.total_pixels,
            FrequencyBasis::VisiblePixels => counts.visible[level][c],
        };
        if denom == 0 {
            0.0
        } else {
            counts.positive[level][c] as f64 / denom as f64
        }
    };
    let labels = |level: usize| -> Vec<String> {
        tree.level_names(level).into_iter().map(String::from).collect()
    };

    match scheme.median {
        MedianScope::PerLevel => LossWeights {
            levels: (0..counts.positive.len())
                .map(|l| {
                    let mut f: Vec<f64> = (0..counts.positive[l].len()).map(|c| freq(l, c)).collect();
                    inverse_median(&mut f, &labels(l))
                })
                .collect(),
        },
        MedianScope::Global => {
            let sizes: Vec<usize> = counts.positive.iter().map(Vec::len).collect();
            let mut flat: Vec<f64> = Vec::new();
            let mut flat_labels = Vec::new();
            for (l, &n) in sizes.iter().enumerate() {
                flat.extend((0..n).map(|c| freq(l, c)));
                flat_labels.extend(labels(l));
            }
            let flat_weights = inverse_median(&mut flat, &flat_labels);
            let mut levels = Vec::with_capacity(sizes.len());
            let mut offset = 0;
            for n in sizes {
                levels.push(flat_weights[offset..offset + n].to_vec());
                offset += n;
            }
            LossWeights { levels }
        }
    }
}

/// Inverse median frequency class weights for the hierarchical heads.
pub fn compute_class_weights(
    targets: &[HierTargetStack],
    tree: &ClassTree,
    scheme: WeightScheme,
) -> Result<LossWeights> {
    if targets.is_empty() {
        return Err(Error::Validation(
            "cannot compute class weights from an empty training split".into(),
        ));
    }
    Ok(weights_from_counts(&count_classes(targets, tree), tree, scheme))
}

/// Inverse median frequency weights over the flat leaf output set, in leaf order.
pub fn compute_flat_weights(masks: &[SemanticMask], tree: &ClassTree) -> Result<Vec<f64>> {
    if masks.is_empty() {
        return Err(Error::Validation(
            "cannot compute class weights from an empty training split".into(),
        ));
    }
    let leaves = tree.leaves();
    let mut positive = vec![0u64; leaves.len()];
    let mut total = 0u64;
    for mask in masks {
        total += mask.data().len() as u64;
        for &v in mask.data().iter() {
            if let Some(i) = leaves.iter().position(|n| n.stored_value() == Some(v)) {
                positive[i] += 1;
            }
        }
    }
    let mut freqs: Vec<f64> = positive.iter().map(|&p| p as f64 / total as f64).collect();
    let labels: Vec<String> = leaves.iter().map(|n| n.name.clone()).collect();
    Ok(inverse_median(&mut freqs, &labels))
}
