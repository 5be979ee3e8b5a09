//! Hierarchical probability composition.
//!
//! Root classes are independent sigmoids. At every deeper level, the children
//! of each parent `p` get a softmax over their logits shifted by
//! `ln(P(p) + eps)`, and the absolute child probability is that conditional
//! distribution scaled by the parent probability:
//!
//! ```text
//! Q(c | p) = exp(Z(c) + ln(P(p) + eps)) / Σ_{c' ∈ C(p)} exp(Z(c') + ln(P(p) + eps))
//! P(c)     = P(p) · Q(c | p)
//! ```
//!
//! Within one parent group the shift is a constant and cancels, so `Q` does
//! not depend on the parent and parent gradients flow only through the
//! product. [`SoftmaxScope::Level`] normalizes across the whole level instead,
//! where the shifts no longer cancel.
//!
//! All tensors are `[class, row, column]` for a single image.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::hierarchy::{ClassTree, ParentGroup};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Logit written where a child is removed by its parent's gate.
pub const LOGIT_SENTINEL: f64 = -1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxScope {
    /// One softmax per parent's children.
    #[default]
    ParentGroup,
    /// One softmax across every class of the level.
    Level,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionConfig {
    pub eps: f64,
    pub scope: SoftmaxScope,
    /// Parent probability at or above which a parent counts as predicted.
    pub threshold: f64,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        CompositionConfig {
            eps: DEFAULT_EPS,
            scope: SoftmaxScope::ParentGroup,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Shape of one hierarchy level as seen by the composition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelSpec {
    pub size: usize,
    pub groups: Vec<ParentGroup>,
    /// Parent position (in the previous level) of every class; empty at level 0.
    pub parent_of: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchyLayout {
    pub levels: Vec<LevelSpec>,
}

impl HierarchyLayout {
    pub fn from_tree(tree: &ClassTree) -> Self {
        let levels = (0..tree.depth())
            .map(|l| {
                let size = tree.level_size(l);
                let groups = tree.parent_groups(l);
                let mut parent_of = if l == 0 { Vec::new() } else { vec![usize::MAX; size] };
                for g in &groups {
                    for &c in &g.children {
                        parent_of[c] = g.parent;
                    }
                }
                LevelSpec {
                    size,
                    groups,
                    parent_of,
                }
            })
            .collect();
        HierarchyLayout { levels }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.size).collect()
    }

    /// Number of parent groups across all levels.
    pub fn parent_count(&self) -> usize {
        self.levels.iter().map(|l| l.groups.len()).sum()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Element-wise sigmoid; root classes are not normalized against each other.
pub fn root_activation(z: ArrayView3<f64>) -> Array3<f64> {
    z.mapv(sigmoid)
}

/// `dL/dZ` for the root level given `dL/dP`.
pub fn root_activation_backward(p: ArrayView3<f64>, grad_p: ArrayView3<f64>) -> Array3<f64> {
    let mut out = grad_p.to_owned();
    out.zip_mut_with(&p, |g, &p| *g *= p * (1.0 - p));
    out
}

/// Softmax over `channels` at one pixel of `z`, each logit shifted by `shift[c]`.
fn shifted_softmax(z: &[f64], shift: &[f64], out: &mut [f64]) {
    let max = z
        .iter()
        .zip(shift)
        .map(|(z, s)| z + s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for ((o, z), s) in out.iter_mut().zip(z).zip(shift) {
        *o = (z + s - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Conditional distribution of one parent's children.
///
/// `z` holds the group's logits `[child, row, column]`; `parent` the parent's
/// probability map.
pub fn conditional_softmax(z: ArrayView3<f64>, parent: ArrayView2<f64>, eps: f64) -> Array3<f64> {
    let (k, h, w) = z.dim();
    let mut q = Array3::zeros((k, h, w));
    let mut zs = vec![0.0; k];
    let mut shift = vec![0.0; k];
    let mut out = vec![0.0; k];
    for y in 0..h {
        for x in 0..w {
            let s = (parent[[y, x]] + eps).ln();
            for c in 0..k {
                zs[c] = z[[c, y, x]];
                shift[c] = s;
            }
            shifted_softmax(&zs, &shift, &mut out);
            for c in 0..k {
                q[[c, y, x]] = out[c];
            }
        }
    }
    q
}

/// Absolute child probabilities: the parent map times the conditional distribution.
pub fn compose(q: ArrayView3<f64>, parent: ArrayView2<f64>) -> Array3<f64> {
    let mut p = q.to_owned();
    for mut plane in p.outer_iter_mut() {
        plane *= &parent;
    }
    p
}

/// Output of one non-root level.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedLevel {
    pub q: Array3<f64>,
    pub probs: Array3<f64>,
}

fn softmax_sets(spec: &LevelSpec, scope: SoftmaxScope) -> Vec<Vec<usize>> {
    match scope {
        SoftmaxScope::ParentGroup => spec.groups.iter().map(|g| g.children.clone()).collect(),
        SoftmaxScope::Level => vec![(0..spec.size).collect()],
    }
}

/// Conditional softmax and composition for every parent group of a level.
pub fn compose_level(
    z: ArrayView3<f64>,
    parent_probs: ArrayView3<f64>,
    spec: &LevelSpec,
    config: &CompositionConfig,
) -> ComposedLevel {
    let (k, h, w) = z.dim();
    let mut q = Array3::zeros((k, h, w));
    let mut probs = Array3::zeros((k, h, w));
    let sets = softmax_sets(spec, config.scope);
    let mut zs = Vec::new();
    let mut shift = Vec::new();
    let mut out = Vec::new();
    for set in &sets {
        zs.resize(set.len(), 0.0);
        shift.resize(set.len(), 0.0);
        out.resize(set.len(), 0.0);
        for y in 0..h {
            for x in 0..w {
                for (i, &c) in set.iter().enumerate() {
                    zs[i] = z[[c, y, x]];
                    shift[i] = (parent_probs[[spec.parent_of[c], y, x]] + config.eps).ln();
                }
                shifted_softmax(&zs, &shift, &mut out);
                for (i, &c) in set.iter().enumerate() {
                    q[[c, y, x]] = out[i];
                    probs[[c, y, x]] = parent_probs[[spec.parent_of[c], y, x]] * out[i];
                }
            }
        }
    }
    ComposedLevel { q, probs }
}

/// Gradients of [`compose_level`]: returns `(dL/dZ, dL/dP_parent)`.
pub fn compose_level_backward(
    level: &ComposedLevel,
    parent_probs: ArrayView3<f64>,
    spec: &LevelSpec,
    config: &CompositionConfig,
    grad_probs: ArrayView3<f64>,
) -> (Array3<f64>, Array3<f64>) {
    let (k, h, w) = level.q.dim();
    let mut grad_z = Array3::zeros((k, h, w));
    let mut grad_parent = Array3::zeros(parent_probs.dim());
    let sets = softmax_sets(spec, config.scope);
    for set in &sets {
        for y in 0..h {
            for x in 0..w {
                // P_c = P_p · Q_c
                let mut dot = 0.0;
                for &c in set {
                    let p = spec.parent_of[c];
                    let g = grad_probs[[c, y, x]];
                    let qc = level.q[[c, y, x]];
                    grad_parent[[p, y, x]] += g * qc;
                    dot += qc * g * parent_probs[[p, y, x]];
                }
                // Softmax Jacobian; the shift ln(P_p + eps) shares the logit's gradient.
                for &c in set {
                    let p = spec.parent_of[c];
                    let dq = grad_probs[[c, y, x]] * parent_probs[[p, y, x]];
                    let dz = level.q[[c, y, x]] * (dq - dot);
                    grad_z[[c, y, x]] = dz;
                    grad_parent[[p, y, x]] += dz / (parent_probs[[p, y, x]] + config.eps);
                }
            }
        }
    }
    (grad_z, grad_parent)
}

/// Zeroes child probabilities wherever the parent is below `threshold`.
pub fn restrict_probs(child: ArrayView3<f64>, parent: ArrayView2<f64>, threshold: f64) -> Array3<f64> {
    let mut out = child.to_owned();
    for mut plane in out.outer_iter_mut() {
        plane.zip_mut_with(&parent, |v, &p| {
            if p < threshold {
                *v = 0.0;
            }
        });
    }
    out
}

/// Replaces child logits with [`LOGIT_SENTINEL`] wherever the parent is below `threshold`.
pub fn restrict_logits(child: ArrayView3<f64>, parent: ArrayView2<f64>, threshold: f64) -> Array3<f64> {
    let mut out = child.to_owned();
    for mut plane in out.outer_iter_mut() {
        plane.zip_mut_with(&parent, |v, &p| {
            if p < threshold {
                *v = LOGIT_SENTINEL;
            }
        });
    }
    out
}

/// Per-channel gate of a level: 1 where the (already restricted) parent is
/// predicted, 0 elsewhere.
pub fn level_gate(parent_probs: ArrayView3<f64>, spec: &LevelSpec, threshold: f64) -> Array3<f64> {
    let (_, h, w) = parent_probs.dim();
    let mut gate = Array3::zeros((spec.size, h, w));
    for (c, mut plane) in gate.outer_iter_mut().enumerate() {
        let parent = parent_probs.index_axis(Axis(0), spec.parent_of[c]);
        plane.zip_mut_with(&parent, |g, &p| *g = if p >= threshold { 1.0 } else { 0.0 });
    }
    gate
}

/// Probabilities, logits and conditionals of every level for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbPyramid {
    pub logits: Vec<Array3<f64>>,
    /// Conditional distributions; `None` at the root level.
    pub q: Vec<Option<Array3<f64>>>,
    pub probs: Vec<Array3<f64>>,
}

impl ProbPyramid {
    pub fn depth(&self) -> usize {
        self.probs.len()
    }
}

/// Composes a full pyramid from per-level logits.
pub fn compose_pyramid(logits: &[Array3<f64>], layout: &HierarchyLayout, config: &CompositionConfig) -> ProbPyramid {
    let mut probs: Vec<Array3<f64>> = Vec::with_capacity(logits.len());
    let mut q = Vec::with_capacity(logits.len());
    for (level, z) in logits.iter().enumerate() {
        if level == 0 {
            probs.push(root_activation(z.view()));
            q.push(None);
        } else {
            let composed = compose_level(z.view(), probs[level - 1].view(), &layout.levels[level], config);
            probs.push(composed.probs);
            q.push(Some(composed.q));
        }
    }
    ProbPyramid {
        logits: logits.to_vec(),
        q,
        probs,
    }
}

/// Backpropagates per-level probability gradients through the whole
/// composition, deepest level first. Returns `dL/dZ` per level.
pub fn pyramid_backward(
    pyramid: &ProbPyramid,
    layout: &HierarchyLayout,
    config: &CompositionConfig,
    grad_probs: &[Array3<f64>],
) -> Vec<Array3<f64>> {
    let depth = pyramid.depth();
    let mut grad_p: Vec<Array3<f64>> = grad_probs.to_vec();
    let mut grad_z = vec![Array3::zeros((0, 0, 0)); depth];
    for level in (1..depth).rev() {
        let composed = ComposedLevel {
            q: pyramid.q[level].clone().expect("non-root levels carry Q"),
            probs: pyramid.probs[level].clone(),
        };
        let (gz, gp) = compose_level_backward(
            &composed,
            pyramid.probs[level - 1].view(),
            &layout.levels[level],
            config,
            grad_p[level].view(),
        );
        grad_z[level] = gz;
        grad_p[level - 1] += &gp;
    }
    if depth > 0 {
        grad_z[0] = root_activation_backward(pyramid.probs[0].view(), grad_p[0].view());
    }
    grad_z
}

/// Threshold-gated view of a pyramid. Gates cascade: a child is removed
/// wherever its restricted parent falls below the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedPyramid {
    pub probs: Vec<Array3<f64>>,
    pub logits: Vec<Array3<f64>>,
    /// Per-level channel gates (all ones at the root).
    pub gates: Vec<Array3<f64>>,
}

pub fn restrict_pyramid(pyramid: &ProbPyramid, layout: &HierarchyLayout, threshold: f64) -> RestrictedPyramid {
    let mut probs: Vec<Array3<f64>> = Vec::with_capacity(pyramid.depth());
    let mut logits = Vec::with_capacity(pyramid.depth());
    let mut gates = Vec::with_capacity(pyramid.depth());
    for level in 0..pyramid.depth() {
        if level == 0 {
            probs.push(pyramid.probs[0].clone());
            logits.push(pyramid.logits[0].clone());
            gates.push(Array3::ones(pyramid.probs[0].dim()));
            continue;
        }
        let gate = level_gate(probs[level - 1].view(), &layout.levels[level], threshold);
        let p = &pyramid.probs[level] * &gate;
        let mut z = pyramid.logits[level].clone();
        z.zip_mut_with(&gate, |z, &g| {
            if g == 0.0 {
                *z = LOGIT_SENTINEL;
            }
        });
        probs.push(p);
        logits.push(z);
        gates.push(gate);
    }
    RestrictedPyramid { probs, logits, gates }
}

/// Binary masks `probability >= threshold`, per level.
pub fn binarize(probs: &[Array3<f64>], threshold: f64) -> Vec<Array3<bool>> {
    probs.iter().map(|p| p.mapv(|v| v >= threshold)).collect()
}

/// Spatial size of a pyramid level.
pub fn plane_dim(p: &Array3<f64>) -> (usize, usize) {
    let (_, h, w) = p.dim();
    (h, w)
}

/// Probability map of one class.
pub fn class_plane(p: &Array3<f64>, class: usize) -> Array2<f64> {
    p.index_axis(Axis(0), class).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::tl_pano_tree;
    use ndarray::Array;

    fn group(z: &[f64], parent: f64) -> Array3<f64> {
        let z = Array::from_shape_vec((z.len(), 1, 1), z.to_vec()).unwrap();
        conditional_softmax(z.view(), Array2::from_elem((1, 1), parent).view(), DEFAULT_EPS)
    }

    #[test]
    fn sigmoid_examples() {
        let z = Array3::from_shape_vec((3, 1, 1), vec![0.0, -50.0, 1.0]).unwrap();
        let p = root_activation(z.view());
        assert_eq!(p[[0, 0, 0]], 0.5);
        assert!(p[[1, 0, 0]] < 1e-20);
        assert!((p[[2, 0, 0]] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn conditional_softmax_examples() {
        let q = group(&[0.0, 0.0], 0.37);
        assert_eq!(q.iter().copied().collect::<Vec<_>>(), vec![0.5, 0.5]);
        // e / (e + 1) and 1 / (e + 1), independent of the parent.
        let e = std::f64::consts::E;
        for parent in [0.8, 0.1] {
            let q = group(&[1.0, 0.0], parent);
            assert!((q[[0, 0, 0]] - e / (e + 1.0)).abs() < 1e-15);
            assert!((q[[1, 0, 0]] - 1.0 / (e + 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn compose_examples() {
        let q = group(&[1.0, 0.0], 0.8);
        let p = compose(q.view(), Array2::from_elem((1, 1), 0.8).view());
        assert!((p[[0, 0, 0]] - 0.8 * 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((p[[1, 0, 0]] - 0.8 * 0.268_941_421_369_995_1).abs() < 1e-15);
        let zero = compose(q.view(), Array2::zeros((1, 1)).view());
        assert!(zero.iter().all(|&v| v == 0.0));
        let half = Array3::from_elem((2, 1, 1), 0.5);
        assert_eq!(compose(half.view(), Array2::ones((1, 1)).view()), half);
    }

    #[test]
    fn restrict_examples() {
        let child = Array3::from_shape_fn((2, 4, 4), |(c, y, x)| 0.1 * (c + y + x) as f64);
        let open = Array2::from_elem((4, 4), 0.9);
        assert_eq!(restrict_probs(child.view(), open.view(), 0.5), child);
        assert_eq!(restrict_logits(child.view(), open.view(), 0.5), child);
        let closed = Array2::from_elem((4, 4), 0.2);
        assert!(restrict_probs(child.view(), closed.view(), 0.5).iter().all(|&v| v == 0.0));
        let checker = Array2::from_shape_fn((4, 4), |(y, x)| if (x + y) % 2 == 0 { 0.9 } else { 0.1 });
        let r = restrict_probs(child.view(), checker.view(), 0.5);
        let zr = restrict_logits(child.view(), checker.view(), 0.5);
        for ((c, y, x), &v) in r.indexed_iter() {
            if (x + y) % 2 == 0 {
                assert_eq!(v, child[[c, y, x]]);
                assert_eq!(zr[[c, y, x]], child[[c, y, x]]);
            } else {
                assert_eq!(v, 0.0);
                assert_eq!(zr[[c, y, x]], LOGIT_SENTINEL);
            }
        }
        // Idempotent.
        assert_eq!(restrict_probs(r.view(), checker.view(), 0.5), r);
        assert_eq!(restrict_logits(zr.view(), checker.view(), 0.5), zr);
    }

    #[test]
    fn layout_matches_tree() {
        let layout = HierarchyLayout::from_tree(&tl_pano_tree());
        assert_eq!(layout.sizes(), vec![4, 4]);
        assert_eq!(layout.levels[1].parent_of, vec![3, 3, 3, 3]);
        assert_eq!(layout.parent_count(), 1);
    }

    #[test]
    fn pyramid_children_sum_to_parent() {
        let layout = HierarchyLayout::from_tree(&tl_pano_tree());
        let z0 = Array3::from_shape_fn((4, 3, 3), |(c, y, x)| (c as f64 - 1.5) + 0.3 * y as f64 - 0.2 * x as f64);
        let z1 = Array3::from_shape_fn((4, 3, 3), |(c, y, x)| (c * y) as f64 * 0.4 - x as f64);
        let pyr = compose_pyramid(&[z0, z1], &layout, &CompositionConfig::default());
        let sum = pyr.probs[1].sum_axis(Axis(0));
        let tooth = pyr.probs[0].index_axis(Axis(0), 3);
        for (a, b) in sum.iter().zip(tooth.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn restriction_cascades_through_gates() {
        let layout = HierarchyLayout::from_tree(&tl_pano_tree());
        let z0 = Array3::from_shape_fn((4, 1, 2), |(c, _, x)| if c == 3 && x == 0 { 3.0 } else { -3.0 });
        let z1 = Array3::zeros((4, 1, 2));
        let pyr = compose_pyramid(&[z0, z1], &layout, &CompositionConfig::default());
        let r = restrict_pyramid(&pyr, &layout, 0.5);
        assert!(r.probs[1].index_axis(Axis(2), 0).iter().all(|&v| v > 0.2));
        assert!(r.probs[1].index_axis(Axis(2), 1).iter().all(|&v| v == 0.0));
        assert!(r.logits[1].index_axis(Axis(2), 1).iter().all(|&v| v == LOGIT_SENTINEL));
    }
}
