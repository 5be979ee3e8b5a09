use ndarray::{s, Array2, Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::hierarchy::ClassTree;

/// Single-channel label image; each pixel holds a leaf class-map value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMask {
    data: Array2<u8>,
}

impl SemanticMask {
    /// `data` is indexed `[row, column]`.
    pub fn new(data: Array2<u8>) -> Self {
        SemanticMask { data }
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn into_data(self) -> Array2<u8> {
        self.data
    }
}

/// Per-level target planes `[class, row, column]` with entries in `{0, 1, -1}`.
/// `-1` marks pixels outside the class's direct parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierTargetStack {
    levels: Vec<Array3<i8>>,
}

impl HierTargetStack {
    pub fn new(levels: Vec<Array3<i8>>) -> Result<Self> {
        if let Some(first) = levels.first() {
            let (_, h, w) = first.dim();
            if levels.iter().any(|l| l.dim().1 != h || l.dim().2 != w) {
                return Err(Error::Shape("target levels differ in spatial size".into()));
            }
        }
        Ok(HierTargetStack { levels })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, level: usize) -> ArrayView3<'_, i8> {
        self.levels[level].view()
    }

    pub fn levels(&self) -> &[Array3<i8>] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [Array3<i8>] {
        &mut self.levels
    }

    pub fn height(&self) -> usize {
        self.levels.first().map_or(0, |l| l.dim().1)
    }

    pub fn width(&self) -> usize {
        self.levels.first().map_or(0, |l| l.dim().2)
    }
}

/// For every stored pixel value, the target value of each class at each level.
fn lookup_table(tree: &ClassTree) -> Vec<Option<Vec<Vec<i8>>>> {
    let mut table = vec![None; 256];
    for leaf in tree.leaves() {
        let Some(value) = leaf.stored_value() else {
            continue;
        };
        // Class active at each level for this leaf: its ancestor at that depth.
        let mut chain: Vec<&str> = tree.ancestors(&leaf.name);
        chain.reverse();
        chain.push(leaf.name.as_str());
        let active = |level: usize| chain.get(level).copied();

        let mut per_level = Vec::with_capacity(tree.depth());
        for level in 0..tree.depth() {
            let row = tree
                .level(level)
                .iter()
                .map(|&idx| {
                    let node = &tree.nodes()[idx];
                    if active(level) == Some(node.name.as_str()) {
                        1
                    } else {
                        match &node.parent {
                            None => 0,
                            Some(parent) if level > 0 && active(level - 1) == Some(parent.as_str()) => 0,
                            Some(_) => -1,
                        }
                    }
                })
                .collect();
            per_level.push(row);
        }
        table[value as usize] = Some(per_level);
    }
    table
}

/// Expands a semantic mask into per-level hierarchical targets. A parent is
/// positive wherever any of its descendants is.
pub fn mask_to_hier_targets(mask: &SemanticMask, tree: &ClassTree) -> Result<HierTargetStack> {
    let table = lookup_table(tree);
    let (h, w) = mask.data.dim();
    let mut levels: Vec<Array3<i8>> = (0..tree.depth())
        .map(|l| Array3::zeros((tree.level_size(l), h, w)))
        .collect();
    for ((y, x), &value) in mask.data.indexed_iter() {
        let entry = table[value as usize].as_ref().ok_or_else(|| {
            Error::Validation(format!(
                "mask pixel ({x}, {y}) has value {value}, which is not a stored leaf class"
            ))
        })?;
        for (level, row) in entry.iter().enumerate() {
            for (c, &t) in row.iter().enumerate() {
                levels[level][[c, y, x]] = t;
            }
        }
    }
    HierTargetStack::new(levels)
}

/// Inverse of [`mask_to_hier_targets`]: the deepest positive class per pixel.
pub fn hier_targets_to_mask(targets: &HierTargetStack, tree: &ClassTree) -> Result<SemanticMask> {
    let (h, w) = (targets.height(), targets.width());
    let mut data = Array2::<u8>::zeros((h, w));
    let mut assigned = Array2::from_elem((h, w), false);
    for level in (0..targets.depth()).rev() {
        let plane = targets.level(level);
        for (pos, &idx) in tree.level(level).iter().enumerate() {
            let node = &tree.nodes()[idx];
            let Some(value) = node.stored_value() else {
                continue;
            };
            for ((y, x), &t) in plane.slice(s![pos, .., ..]).indexed_iter() {
                if t == 1 && !assigned[[y, x]] {
                    data[[y, x]] = value;
                    assigned[[y, x]] = true;
                }
            }
        }
    }
    if let Some(((y, x), _)) = assigned.indexed_iter().find(|(_, &a)| !a) {
        return Err(Error::Validation(format!(
            "pixel ({x}, {y}) has no positive leaf class"
        )));
    }
    Ok(SemanticMask::new(data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::tl_pano_tree;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn at(t: &HierTargetStack, level: usize, y: usize, x: usize) -> Vec<i8> {
        t.level(level).slice(s![.., y, x]).to_vec()
    }

    #[test]
    fn pixel_expansion_examples() {
        let tree = tl_pano_tree();
        let mask = SemanticMask::new(arr2(&[[5u8, 0, 1]]));
        let t = mask_to_hier_targets(&mask, &tree).unwrap();
        // L0 order: Background, Upper, Lower, Tooth. L1: Pulp, Dentin, Enamel, Composite.
        assert_eq!(at(&t, 0, 0, 0), vec![0, 0, 0, 1]);
        assert_eq!(at(&t, 1, 0, 0), vec![0, 1, 0, 0]);
        assert_eq!(at(&t, 0, 0, 1), vec![1, 0, 0, 0]);
        assert_eq!(at(&t, 1, 0, 1), vec![-1, -1, -1, -1]);
        assert_eq!(at(&t, 0, 0, 2), vec![0, 1, 0, 0]);
        assert_eq!(at(&t, 1, 0, 2), vec![-1, -1, -1, -1]);
    }

    #[test]
    fn parent_value_in_mask_is_rejected() {
        let tree = tl_pano_tree();
        let mask = SemanticMask::new(arr2(&[[3u8]]));
        assert!(mask_to_hier_targets(&mask, &tree).is_err());
        let mask = SemanticMask::new(arr2(&[[9u8]]));
        assert!(mask_to_hier_targets(&mask, &tree).is_err());
    }

    proptest! {
        #[test]
        fn target_invariants(values in proptest::collection::vec(prop::sample::select(vec![0u8, 1, 2, 4, 5, 6, 7]), 48)) {
            let tree = tl_pano_tree();
            let mask = SemanticMask::new(Array2::from_shape_vec((6, 8), values).unwrap());
            let t = mask_to_hier_targets(&mask, &tree).unwrap();
            let l0 = t.level(0);
            let l1 = t.level(1);
            prop_assert!(l0.iter().all(|&v| v != -1));
            for y in 0..6 {
                for x in 0..8 {
                    prop_assert_eq!(l0.slice(s![.., y, x]).iter().filter(|&&v| v == 1).count(), 1);
                    let tooth = l0[[3, y, x]];
                    for c in 0..4 {
                        // -1 exactly where the parent plane is 0.
                        prop_assert_eq!(l1[[c, y, x]] == -1, tooth == 0);
                    }
                    // Children sum to the parent where the parent is positive.
                    if tooth == 1 {
                        let sum: i32 = (0..4).map(|c| l1[[c, y, x]] as i32).sum();
                        prop_assert_eq!(sum, 1);
                    }
                }
            }
            prop_assert_eq!(hier_targets_to_mask(&t, &tree).unwrap(), mask);
        }
    }
}
