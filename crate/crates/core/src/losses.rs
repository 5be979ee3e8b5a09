//! Hierarchical losses and their gradients with respect to the composed
//! probabilities.
//!
//! Every class carries a visibility map: all ones at the root, and at deeper
//! levels the pixels inside the direct parent's target. Targets encode
//! invisible pixels as `-1`, so the map is recovered as `y != -1` and such
//! pixels are treated as `y = 0` with zero weight.

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::composition::{restrict_pyramid, HierarchyLayout, ProbPyramid};
use crate::dataprep::{HierTargetStack, LossWeights};
use crate::error::{Error, Result};

pub const DEFAULT_DICE_EPS: f64 = 1e-6;
pub const DEFAULT_CE_CLAMP: f64 = 1e-7;
/// Deviations below this magnitude count as zero in the consistency gradient.
const CONSISTENCY_DEADZONE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CeReduction {
    /// Sum over pixels.
    #[default]
    Sum,
    /// Sum over pixels divided by the pixel count.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CeMode {
    /// `-y log P` only.
    #[default]
    Positive,
    /// `-y log P - (1 - y) log(1 - P)`.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyInput {
    /// Threshold-gated probabilities.
    #[default]
    Restricted,
    /// Composed probabilities; the loss is then identically zero.
    Composed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub dice_eps: f64,
    pub ce_clamp: f64,
    pub ce_reduction: CeReduction,
    pub ce_mode: CeMode,
    pub consistency_input: ConsistencyInput,
    pub threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            dice_eps: DEFAULT_DICE_EPS,
            ce_clamp: DEFAULT_CE_CLAMP,
            ce_reduction: CeReduction::Sum,
            ce_mode: CeMode::Positive,
            consistency_input: ConsistencyInput::Restricted,
            threshold: crate::composition::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LevelLoss {
    pub dice: f64,
    pub ce: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub levels: Vec<LevelLoss>,
    pub consistency: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn whl(&self) -> f64 {
        self.levels.iter().map(|l| l.dice + l.ce).sum()
    }
}

fn visible(t: i8) -> f64 {
    if t == -1 {
        0.0
    } else {
        1.0
    }
}

fn positive(t: i8) -> f64 {
    if t == 1 {
        1.0
    } else {
        0.0
    }
}

fn check_shapes(p: &ArrayView3<f64>, y: &ArrayView3<i8>, w: &[f64]) {
    assert_eq!(p.dim(), y.dim(), "probability and target shapes differ");
    assert_eq!(p.dim().0, w.len(), "one weight per class");
}

fn dice_terms(p: ArrayView3<f64>, y: ArrayView3<i8>, w: &[f64], eps: f64) -> Vec<(f64, f64)> {
    p.outer_iter()
        .zip(y.outer_iter())
        .zip(w)
        .map(|((pc, yc), &wc)| {
            let mut num = 0.0;
            let mut den = 0.0;
            Zip::from(&pc).and(&yc).for_each(|&p, &t| {
                let mw = visible(t) * wc;
                num += mw * positive(t) * p;
                den += mw * (positive(t) + p);
            });
            (2.0 * num + eps, den + eps)
        })
        .collect()
}

/// Weighted, visibility-masked Dice loss of one level.
pub fn hier_dice(p: ArrayView3<f64>, y: ArrayView3<i8>, w: &[f64], eps: f64) -> f64 {
    check_shapes(&p, &y, w);
    let terms = dice_terms(p, y, w, eps);
    let c = terms.len() as f64;
    1.0 - terms.iter().map(|(n, d)| n / d).sum::<f64>() / c
}

pub fn hier_dice_grad(p: ArrayView3<f64>, y: ArrayView3<i8>, w: &[f64], eps: f64) -> Array3<f64> {
    check_shapes(&p, &y, w);
    let terms = dice_terms(p, y, w, eps);
    let c = terms.len() as f64;
    let mut grad = Array3::zeros(p.dim());
    for (((mut gc, yc), &wc), &(num, den)) in grad.outer_iter_mut().zip(y.outer_iter()).zip(w).zip(&terms) {
        Zip::from(&mut gc).and(&yc).for_each(|g, &t| {
            let mw = visible(t) * wc;
            *g = -(2.0 * mw * positive(t) / den - num * mw / (den * den)) / c;
        });
    }
    grad
}

fn ce_scale(p: &ArrayView3<f64>, config: &LossConfig) -> f64 {
    let (c, h, w) = p.dim();
    let pixels = match config.ce_reduction {
        CeReduction::Sum => 1.0,
        CeReduction::Mean => (h * w) as f64,
    };
    1.0 / (c as f64 * pixels)
}

/// Weighted, visibility-masked cross-entropy of one level.
pub fn hier_ce(p: ArrayView3<f64>, y: ArrayView3<i8>, w: &[f64], config: &LossConfig) -> f64 {
    check_shapes(&p, &y, w);
    let delta = config.ce_clamp;
    let mut total = 0.0;
    for ((pc, yc), &wc) in p.outer_iter().zip(y.outer_iter()).zip(w) {
        Zip::from(&pc).and(&yc).for_each(|&p, &t| {
            let mw = visible(t) * wc;
            let yv = positive(t);
            total -= mw * yv * p.max(delta).ln();
            if config.ce_mode == CeMode::Binary {
                total -= mw * (1.0 - yv) * (1.0 - p).max(delta).ln();
            }
        });
    }
    total * ce_scale(&p, config)
}

pub fn hier_ce_grad(p: ArrayView3<f64>, y: ArrayView3<i8>, w: &[f64], config: &LossConfig) -> Array3<f64> {
    check_shapes(&p, &y, w);
    let delta = config.ce_clamp;
    let scale = ce_scale(&p, config);
    let mut grad = Array3::zeros(p.dim());
    for (((mut gc, pc), yc), &wc) in grad.outer_iter_mut().zip(p.outer_iter()).zip(y.outer_iter()).zip(w) {
        Zip::from(&mut gc).and(&pc).and(&yc).for_each(|g, &p, &t| {
            let mw = visible(t) * wc;
            let yv = positive(t);
            let mut d = 0.0;
            if p > delta {
                d -= mw * yv / p;
            }
            if config.ce_mode == CeMode::Binary && 1.0 - p > delta {
                d += mw * (1.0 - yv) / (1.0 - p);
            }
            *g = d * scale;
        });
    }
    grad
}

fn check_levels(probs: &[Array3<f64>], targets: &HierTargetStack, weights: &LossWeights) -> Result<()> {
    if probs.len() != targets.depth() || probs.len() != weights.levels.len() {
        return Err(Error::Shape(format!(
            "{} probability levels, {} target levels, {} weight levels",
            probs.len(),
            targets.depth(),
            weights.levels.len()
        )));
    }
    for (level, (p, y)) in probs.iter().zip(targets.levels()).enumerate() {
        if p.dim() != y.dim() || p.dim().0 != weights.levels[level].len() {
            return Err(Error::Shape(format!(
                "level {level}: probabilities {:?}, targets {:?}, {} weights",
                p.dim(),
                y.dim(),
                weights.levels[level].len()
            )));
        }
    }
    Ok(())
}

/// Dice and cross-entropy of every level.
pub fn whl(
    probs: &[Array3<f64>],
    targets: &HierTargetStack,
    weights: &LossWeights,
    config: &LossConfig,
) -> Result<Vec<LevelLoss>> {
    check_levels(probs, targets, weights)?;
    Ok(probs
        .iter()
        .zip(targets.levels())
        .zip(&weights.levels)
        .map(|((p, y), w)| LevelLoss {
            dice: hier_dice(p.view(), y.view(), w, config.dice_eps),
            ce: hier_ce(p.view(), y.view(), w, config),
        })
        .collect())
}

pub fn whl_grad(
    probs: &[Array3<f64>],
    targets: &HierTargetStack,
    weights: &LossWeights,
    config: &LossConfig,
) -> Result<Vec<Array3<f64>>> {
    check_levels(probs, targets, weights)?;
    Ok(probs
        .iter()
        .zip(targets.levels())
        .zip(&weights.levels)
        .map(|((p, y), w)| {
            hier_dice_grad(p.view(), y.view(), w, config.dice_eps) + hier_ce_grad(p.view(), y.view(), w, config)
        })
        .collect())
}

/// Mean absolute gap between each parent and the sum of its children,
/// averaged over pixels per parent and divided by the number of parents.
pub fn consistency_loss(probs: &[Array3<f64>], layout: &HierarchyLayout) -> f64 {
    let np = layout.parent_count();
    if np == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for level in 1..layout.depth() {
        let (_, h, w) = probs[level].dim();
        let pixels = (h * w) as f64;
        for g in &layout.levels[level].groups {
            let mut sum = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let children: f64 = g.children.iter().map(|&c| probs[level][[c, y, x]]).sum();
                    sum += (children - probs[level - 1][[g.parent, y, x]]).abs();
                }
            }
            total += sum / pixels;
        }
    }
    total / np as f64
}

pub fn consistency_grad(probs: &[Array3<f64>], layout: &HierarchyLayout) -> Vec<Array3<f64>> {
    let mut grads: Vec<Array3<f64>> = probs.iter().map(|p| Array3::zeros(p.dim())).collect();
    let np = layout.parent_count();
    if np == 0 {
        return grads;
    }
    for level in 1..layout.depth() {
        let (_, h, w) = probs[level].dim();
        let scale = 1.0 / ((h * w) as f64 * np as f64);
        for g in &layout.levels[level].groups {
            for y in 0..h {
                for x in 0..w {
                    let children: f64 = g.children.iter().map(|&c| probs[level][[c, y, x]]).sum();
                    let d = children - probs[level - 1][[g.parent, y, x]];
                    if d.abs() <= CONSISTENCY_DEADZONE {
                        continue;
                    }
                    let s = d.signum() * scale;
                    for &c in &g.children {
                        grads[level][[c, y, x]] += s;
                    }
                    grads[level - 1][[g.parent, y, x]] -= s;
                }
            }
        }
    }
    grads
}

pub fn total_loss(whl: f64, consistency: f64) -> f64 {
    whl + consistency
}

/// Full objective of one image and its gradient with respect to the composed
/// probabilities of every level.
pub fn loss_and_grad(
    pyramid: &ProbPyramid,
    targets: &HierTargetStack,
    weights: &LossWeights,
    layout: &HierarchyLayout,
    config: &LossConfig,
) -> Result<(LossBreakdown, Vec<Array3<f64>>)> {
    let levels = whl(&pyramid.probs, targets, weights, config)?;
    let mut grads = whl_grad(&pyramid.probs, targets, weights, config)?;
    let consistency = match config.consistency_input {
        ConsistencyInput::Composed => {
            for (g, c) in grads.iter_mut().zip(consistency_grad(&pyramid.probs, layout)) {
                *g += &c;
            }
            consistency_loss(&pyramid.probs, layout)
        }
        ConsistencyInput::Restricted => {
            let restricted = restrict_pyramid(pyramid, layout, config.threshold);
            // The gates are piecewise constant, so the gradient passes through them.
            for ((g, c), gate) in grads
                .iter_mut()
                .zip(consistency_grad(&restricted.probs, layout))
                .zip(&restricted.gates)
            {
                *g += &(c * gate);
            }
            consistency_loss(&restricted.probs, layout)
        }
    };
    let whl_total: f64 = levels.iter().map(|l| l.dice + l.ce).sum();
    let breakdown = LossBreakdown {
        levels,
        consistency,
        total: total_loss(whl_total, consistency),
    };
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn single(values: &[f64], targets: &[i8]) -> (Array3<f64>, Array3<i8>) {
        let n = values.len();
        (
            Array3::from_shape_vec((1, 1, n), values.to_vec()).unwrap(),
            Array3::from_shape_vec((1, 1, n), targets.to_vec()).unwrap(),
        )
    }

    #[test]
    fn dice_examples() {
        let (p, y) = single(&[1.0, 0.0], &[1, 0]);
        assert!(hier_dice(p.view(), y.view(), &[1.0], 1e-6) < 1e-6);
        let (p, y) = single(&[1.0, 1.0], &[1, 0]);
        assert!((hier_dice(p.view(), y.view(), &[1.0], 0.0) - 1.0 / 3.0).abs() < 1e-15);
        let (p, y) = single(&[0.3, 0.9], &[-1, -1]);
        assert_eq!(hier_dice(p.view(), y.view(), &[1.0], 1e-6), 0.0);
    }

    #[test]
    fn ce_examples() {
        let cfg = LossConfig::default();
        let (p, y) = single(&[0.5], &[1]);
        assert!((hier_ce(p.view(), y.view(), &[1.0], &cfg) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((hier_ce(p.view(), y.view(), &[2.0], &cfg) - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        let (p, y) = single(&[0.2, 0.7, 0.9], &[0, 0, 0]);
        assert_eq!(hier_ce(p.view(), y.view(), &[1.0], &cfg), 0.0);
        // Clamped at the lower bound.
        let (p, y) = single(&[0.0], &[1]);
        assert!((hier_ce(p.view(), y.view(), &[1.0], &cfg) + 1e-7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.0, 0.0), 0.0);
        assert!((total_loss(1.5, 0.2) - 1.7).abs() < 1e-15);
    }
}
