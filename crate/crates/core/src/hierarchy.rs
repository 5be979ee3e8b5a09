//! Class hierarchy and class-to-pixel mapping.
//!
//! A dataset ships two files describing its label space:
//!
//! * `class_map.csv`: `name,value` rows assigning each class an integer. Leaf
//!   classes are the values written into the semantic masks; parent classes may
//!   carry a value for reporting but never appear in masks.
//! * `class_tree.json`: a nested object whose keys are class names and whose
//!   values are the child objects (an empty object, `null`, `""` or `[]` marks a
//!   leaf).
//!
//! Both files list classes breadth-first and names are compared byte-exactly.
//! [`ClassTree`] is immutable once built and can be shared freely across threads.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMapEntry {
    pub name: String,
    pub value: u8,
}

/// Ordered `name → pixel value` table read from `class_map.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassMap {
    entries: Vec<ClassMapEntry>,
}

impl ClassMap {
    pub fn new(entries: Vec<ClassMapEntry>) -> Result<Self> {
        let mut names = HashSet::new();
        let mut values = HashSet::new();
        for entry in &entries {
            if !names.insert(entry.name.as_str()) {
                return Err(Error::format(
                    "class map",
                    format!("duplicate class name '{}'", entry.name),
                ));
            }
            if !values.insert(entry.value) {
                return Err(Error::format(
                    "class map",
                    format!("duplicate pixel value {} (class '{}')", entry.value, entry.name),
                ));
            }
        }
        Ok(ClassMap { entries })
    }

    pub fn entries(&self) -> &[ClassMapEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value_of(&self, name: &str) -> Option<u8> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.value)
    }

    pub fn name_of(&self, value: u8) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.value == value)
            .map(|e| e.name.as_str())
    }

    /// Headerless `name,value` rows, one per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&entry.name);
            out.push(',');
            out.push_str(&entry.value.to_string());
            out.push('\n');
        }
        out
    }
}

/// Parses `class_map.csv`. A first row whose value column is not an integer is
/// treated as a header.
pub fn parse_class_map(csv_text: &str) -> Result<ClassMap> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(csv_text.as_bytes());

    let mut entries = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.iter().all(|field| field.is_empty()) {
            continue;
        }
        if record.len() != 2 {
            return Err(Error::format(
                "class map",
                format!("line {}: expected `name,value`, got {} fields", row + 1, record.len()),
            ));
        }
        let name = record[0].to_string();
        let raw = &record[1];
        let value = match raw.parse::<i64>() {
            Ok(v) => v,
            Err(_) if row == 0 => continue,
            Err(_) => {
                return Err(Error::format(
                    "class map",
                    format!("line {}: pixel value '{raw}' is not an integer", row + 1),
                ))
            }
        };
        let value = u8::try_from(value).map_err(|_| {
            Error::format(
                "class map",
                format!("line {}: pixel value {value} outside 0..=255", row + 1),
            )
        })?;
        if name.is_empty() {
            return Err(Error::format("class map", format!("line {}: empty class name", row + 1)));
        }
        entries.push(ClassMapEntry { name, value });
    }
    ClassMap::new(entries)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassNode {
    pub name: String,
    pub parent: Option<String>,
    pub children: Vec<String>,
    pub level: usize,
    /// Class-map value. Leaves always carry one; parents may.
    pub pixel_value: Option<u8>,
}

impl ClassNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// The value this class occupies in semantic masks. Parent classes are
    /// never stored directly.
    pub fn stored_value(&self) -> Option<u8> {
        if self.is_leaf() {
            self.pixel_value
        } else {
            None
        }
    }
}

/// One parent and its direct children, addressed by position within their levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParentGroup {
    /// Position of the parent inside level `ℓ - 1`.
    pub parent: usize,
    /// Positions of the children inside level `ℓ`, in tree order.
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTree {
    nodes: Vec<ClassNode>,
    index: HashMap<String, usize>,
    levels: Vec<Vec<usize>>,
}

impl ClassTree {
    /// Builds a tree from nodes as given, without checking the hierarchy rules.
    /// Use [`validate_hierarchy`] to audit the result.
    pub fn from_nodes(nodes: Vec<ClassNode>) -> Result<Self> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if index.insert(node.name.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "class '{}' is defined more than once",
                    node.name
                )));
            }
        }
        let depth = nodes.iter().map(|n| n.level + 1).max().unwrap_or(0);
        let mut levels = vec![Vec::new(); depth];
        for (i, node) in nodes.iter().enumerate() {
            levels[node.level].push(i);
        }
        Ok(ClassTree {
            nodes,
            index,
            levels,
        })
    }

    pub fn nodes(&self) -> &[ClassNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn node(&self, name: &str) -> Option<&ClassNode> {
        self.index_of(name).map(|i| &self.nodes[i])
    }

    /// Number of hierarchy levels.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Node indices of level `level`, in tree order.
    pub fn level(&self, level: usize) -> &[usize] {
        &self.levels[level]
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.levels.get(level).map_or(0, Vec::len)
    }

    pub fn level_names(&self, level: usize) -> Vec<&str> {
        self.levels[level]
            .iter()
            .map(|&i| self.nodes[i].name.as_str())
            .collect()
    }

    /// `(level, position within level)` of a class.
    pub fn position(&self, name: &str) -> Option<(usize, usize)> {
        let idx = self.index_of(name)?;
        let level = self.nodes[idx].level;
        let pos = self.levels[level].iter().position(|&i| i == idx)?;
        Some((level, pos))
    }

    /// Parent groups feeding level `level` (empty for level 0).
    pub fn parent_groups(&self, level: usize) -> Vec<ParentGroup> {
        if level == 0 || level >= self.depth() {
            return Vec::new();
        }
        let mut groups = Vec::new();
        for (parent_pos, &parent_idx) in self.levels[level - 1].iter().enumerate() {
            let parent = &self.nodes[parent_idx];
            if parent.children.is_empty() {
                continue;
            }
            let children = parent
                .children
                .iter()
                .filter_map(|c| {
                    let (l, p) = self.position(c)?;
                    (l == level).then_some(p)
                })
                .collect();
            groups.push(ParentGroup {
                parent: parent_pos,
                children,
            });
        }
        groups
    }

    /// Leaf classes in tree order.
    pub fn leaves(&self) -> Vec<&ClassNode> {
        self.nodes.iter().filter(|n| n.is_leaf()).collect()
    }

    /// Every ancestor of `name` (nearest first), excluding the class itself.
    pub fn ancestors(&self, name: &str) -> Vec<&str> {
        let mut out = Vec::new();
        let mut current = self.node(name).and_then(|n| n.parent.as_deref());
        while let Some(p) = current {
            if out.contains(&p) || out.len() > self.nodes.len() {
                break;
            }
            out.push(p);
            current = self.node(p).and_then(|n| n.parent.as_deref());
        }
        out
    }

    /// Class map in tree order, restricted to classes that carry a value.
    pub fn class_map(&self) -> ClassMap {
        ClassMap {
            entries: self
                .nodes
                .iter()
                .filter_map(|n| {
                    n.pixel_value.map(|value| ClassMapEntry {
                        name: n.name.clone(),
                        value,
                    })
                })
                .collect(),
        }
    }

    /// Nested JSON object in tree order, pretty-printed with a trailing newline.
    pub fn to_json(&self) -> String {
        fn subtree(tree: &ClassTree, name: &str) -> Value {
            let mut map = Map::new();
            if let Some(node) = tree.node(name) {
                for child in &node.children {
                    map.insert(child.clone(), subtree(tree, child));
                }
            }
            Value::Object(map)
        }
        let mut root = Map::new();
        for &i in self.levels.first().map(Vec::as_slice).unwrap_or(&[]) {
            let name = &self.nodes[i].name;
            root.insert(name.clone(), subtree(self, name));
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(root))
            .expect("serializing a JSON value cannot fail");
        text.push('\n');
        text
    }

    /// SHA-256 over the canonical class map and tree serializations. Used to
    /// tie checkpoints to the label space they were trained on.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.class_map().to_csv().as_bytes());
        hasher.update([0u8]);
        hasher.update(self.to_json().as_bytes());
        hex::encode(hasher.finalize())
    }
}

fn is_leaf_value(value: &Value) -> bool {
    match value {
        Value::Null => true,
        Value::String(s) => s.is_empty(),
        Value::Array(a) => a.is_empty(),
        Value::Object(o) => o.is_empty(),
        _ => false,
    }
}

/// Parses `class_tree.json` against an already parsed class map.
pub fn parse_class_tree(json_text: &str, class_map: &ClassMap) -> Result<ClassTree> {
    let root: Value = serde_json::from_str(json_text)
        .map_err(|e| Error::format("class tree", e.to_string()))?;
    let Value::Object(root) = root else {
        return Err(Error::format("class tree", "top level must be an object"));
    };

    // Breadth-first walk so node order matches the class map's order.
    let mut queue: VecDeque<(String, Value, Option<String>, usize)> = root
        .into_iter()
        .map(|(name, value)| (name, value, None, 0))
        .collect();
    let mut nodes: Vec<ClassNode> = Vec::new();
    let mut seen: HashMap<String, Option<String>> = HashMap::new();
    while let Some((name, value, parent, level)) = queue.pop_front() {
        if name.is_empty() {
            return Err(Error::format("class tree", "empty class name"));
        }
        if let Some(previous) = seen.get(&name) {
            let describe = |p: &Option<String>| p.clone().unwrap_or_else(|| "<root>".to_string());
            return Err(Error::Validation(format!(
                "class '{name}' appears under both '{}' and '{}'",
                describe(previous),
                describe(&parent)
            )));
        }
        seen.insert(name.clone(), parent.clone());

        let children = if is_leaf_value(&value) {
            Vec::new()
        } else if let Value::Object(children) = value {
            let names: Vec<String> = children.keys().cloned().collect();
            for (child, sub) in children {
                queue.push_back((child, sub, Some(name.clone()), level + 1));
            }
            names
        } else {
            return Err(Error::format(
                "class tree",
                format!("class '{name}' must map to an object of children or an empty value"),
            ));
        };

        let pixel_value = class_map.value_of(&name);
        if children.is_empty() && pixel_value.is_none() {
            return Err(Error::Validation(format!(
                "leaf class '{name}' has no pixel value in the class map"
            )));
        }
        nodes.push(ClassNode {
            name,
            parent,
            children,
            level,
            pixel_value,
        });
    }

    for entry in class_map.entries() {
        if !seen.contains_key(&entry.name) {
            return Err(Error::Validation(format!(
                "class map entry '{}' does not appear in the class tree",
                entry.name
            )));
        }
    }
    let tree_order: Vec<&str> = nodes
        .iter()
        .filter(|n| n.pixel_value.is_some())
        .map(|n| n.name.as_str())
        .collect();
    let map_order: Vec<&str> = class_map.entries().iter().map(|e| e.name.as_str()).collect();
    if tree_order != map_order {
        return Err(Error::Validation(format!(
            "class map order {map_order:?} differs from breadth-first tree order {tree_order:?}"
        )));
    }

    ClassTree::from_nodes(nodes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    /// (i) a parent needs more than one direct child.
    ChildCount,
    /// (ii) parents are made up of their children: links and levels agree.
    Composition,
    /// (iii) a class cannot exist over multiple branches.
    SingleBranch,
    /// Parent links must not loop.
    Acyclic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    /// Allowed but outside the literal reading of the rule.
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rule: Rule,
    pub severity: Severity,
    pub class: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} [{:?}] '{}': {}", self.severity, self.rule, self.class, self.detail)
    }
}

/// Audits a tree against the hierarchy construction rules. Violations are
/// returned as data; an empty list means the tree is well formed.
pub fn validate_hierarchy(tree: &ClassTree) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |rule, severity, class: &str, detail: String| {
        out.push(Violation {
            rule,
            severity,
            class: class.to_string(),
            detail,
        })
    };

    let mut listed_under: HashMap<&str, Vec<&str>> = HashMap::new();
    for node in tree.nodes() {
        for child in &node.children {
            listed_under.entry(child.as_str()).or_default().push(node.name.as_str());
        }
    }

    for node in tree.nodes() {
        match node.children.len() {
            0 => {}
            1 => push(
                Rule::ChildCount,
                Severity::Error,
                &node.name,
                "parent has a single direct child".to_string(),
            ),
            2 => push(
                Rule::ChildCount,
                Severity::Warning,
                &node.name,
                "parent has exactly two direct children".to_string(),
            ),
            _ => {}
        }

        if let Some(parents) = listed_under.get(node.name.as_str()) {
            if parents.len() > 1 {
                push(
                    Rule::SingleBranch,
                    Severity::Error,
                    &node.name,
                    format!("listed as a child of {parents:?}"),
                );
            }
        }

        match &node.parent {
            None if node.level != 0 => push(
                Rule::Composition,
                Severity::Error,
                &node.name,
                format!("root class sits at level {}", node.level),
            ),
            None => {}
            Some(parent_name) => match tree.node(parent_name) {
                None => push(
                    Rule::Composition,
                    Severity::Error,
                    &node.name,
                    format!("parent '{parent_name}' is not defined"),
                ),
                Some(parent) => {
                    if !parent.children.contains(&node.name) {
                        push(
                            Rule::Composition,
                            Severity::Error,
                            &node.name,
                            format!("parent '{parent_name}' does not list it as a child"),
                        );
                    }
                    if parent.level + 1 != node.level {
                        push(
                            Rule::Composition,
                            Severity::Error,
                            &node.name,
                            format!(
                                "level {} is not one below parent level {}",
                                node.level, parent.level
                            ),
                        );
                    }
                }
            },
        }

        for child in &node.children {
            match tree.node(child) {
                None => push(
                    Rule::Composition,
                    Severity::Error,
                    &node.name,
                    format!("child '{child}' is not defined"),
                ),
                Some(c) if c.parent.as_deref() != Some(node.name.as_str()) => push(
                    Rule::Composition,
                    Severity::Error,
                    child,
                    format!("listed under '{}' but its parent link disagrees", node.name),
                ),
                Some(_) => {}
            }
        }

        // Walk up the parent chain; revisiting a class means a cycle.
        let mut visited = HashSet::from([node.name.as_str()]);
        let mut current = node.parent.as_deref();
        while let Some(p) = current {
            if !visited.insert(p) {
                if p == node.name {
                    push(
                        Rule::Acyclic,
                        Severity::Error,
                        &node.name,
                        "parent links form a cycle".to_string(),
                    );
                }
                break;
            }
            current = tree.node(p).and_then(|n| n.parent.as_deref());
        }
    }
    out
}

/// The class whose mask gates `class` in the loss: its direct parent, or
/// `None` for root classes (visible everywhere).
pub fn visibility_parent<'a>(tree: &'a ClassTree, class: &str) -> Result<Option<&'a str>> {
    tree.node(class)
        .map(|n| n.parent.as_deref())
        .ok_or_else(|| Error::Validation(format!("unknown class '{class}'")))
}

/// Reference label space: `class_map.csv` rows.
pub const TL_PANO_CLASS_MAP: &str = "\
Background,0
Upper,1
Lower,2
Tooth,3
Pulp,4
Dentin,5
Enamel,6
Composite,7
";

/// Reference label space: `class_tree.json`.
pub const TL_PANO_CLASS_TREE: &str = r#"{
  "Background": {},
  "Upper": {},
  "Lower": {},
  "Tooth": {
    "Pulp": {},
    "Dentin": {},
    "Enamel": {},
    "Composite": {}
  }
}
"#;

/// The tooth-layer / alveolar-bone hierarchy.
pub fn tl_pano_tree() -> ClassTree {
    let map = parse_class_map(TL_PANO_CLASS_MAP).expect("built-in class map is valid");
    parse_class_tree(TL_PANO_CLASS_TREE, &map).expect("built-in class tree is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(name: &str, parent: Option<&str>, children: &[&str], level: usize, value: Option<u8>) -> ClassNode {
        ClassNode {
            name: name.into(),
            parent: parent.map(Into::into),
            children: children.iter().map(|c| c.to_string()).collect(),
            level,
            pixel_value: value,
        }
    }

    #[test]
    fn tl_pano_class_map_values() {
        let map = parse_class_map(TL_PANO_CLASS_MAP).unwrap();
        let got: Vec<(&str, u8)> = map.entries().iter().map(|e| (e.name.as_str(), e.value)).collect();
        assert_eq!(
            got,
            vec![
                ("Background", 0),
                ("Upper", 1),
                ("Lower", 2),
                ("Tooth", 3),
                ("Pulp", 4),
                ("Dentin", 5),
                ("Enamel", 6),
                ("Composite", 7)
            ]
        );
    }

    #[test]
    fn class_map_header_and_single_row() {
        let map = parse_class_map("name,value\nBackground,0\n").unwrap();
        assert_eq!(map.len(), 1);
        assert_eq!(map.value_of("Background"), Some(0));
        assert_eq!(parse_class_map("Background,0").unwrap().len(), 1);
    }

    #[test]
    fn class_map_duplicates_rejected() {
        assert!(parse_class_map("A,3\nB,3\n").is_err());
        assert!(parse_class_map("A,1\nA,2\n").is_err());
        assert!(parse_class_map("A,-1\n").is_err());
        assert!(parse_class_map("A,0\nB,x\n").is_err());
    }

    #[test]
    fn tl_pano_tree_levels() {
        let tree = tl_pano_tree();
        assert_eq!(tree.depth(), 2);
        assert_eq!(tree.level_names(0), vec!["Background", "Upper", "Lower", "Tooth"]);
        assert_eq!(tree.level_names(1), vec!["Pulp", "Dentin", "Enamel", "Composite"]);
        assert_eq!(
            tree.parent_groups(1),
            vec![ParentGroup {
                parent: 3,
                children: vec![0, 1, 2, 3]
            }]
        );
        assert_eq!(tree.node("Tooth").unwrap().children, vec!["Pulp", "Dentin", "Enamel", "Composite"]);
        assert_eq!(tree.node("Tooth").unwrap().stored_value(), None);
        assert_eq!(tree.node("Dentin").unwrap().stored_value(), Some(5));
        assert!(validate_hierarchy(&tree).is_empty());
    }

    #[test]
    fn flat_tree_has_one_level() {
        let map = parse_class_map("Background,0\nA,1\nB,2\n").unwrap();
        let tree = parse_class_tree(r#"{"Background": {}, "A": null, "B": ""}"#, &map).unwrap();
        assert_eq!(tree.depth(), 1);
        assert!(tree.parent_groups(1).is_empty());
        assert!(tree.parent_groups(0).is_empty());
    }

    #[test]
    fn class_under_two_parents_rejected() {
        let map = parse_class_map("Background,0\nP,1\nQ,2\nX,3\nY,4\n").unwrap();
        let json = r#"{"Background": {}, "P": {"X": {}, "Y": {}}, "Q": {"X": {}, "Y": {}}}"#;
        assert!(matches!(parse_class_tree(json, &map), Err(Error::Validation(_))));
    }

    #[test]
    fn leaf_without_value_and_case_mismatch_rejected() {
        let map = parse_class_map("Background,0\nA,1\n").unwrap();
        assert!(parse_class_tree(r#"{"Background": {}, "A": {}, "B": {}}"#, &map).is_err());
        assert!(parse_class_tree(r#"{"background": {}, "A": {}}"#, &map).is_err());
    }

    #[test]
    fn class_map_order_must_match_tree() {
        let map = parse_class_map("A,1\nBackground,0\n").unwrap();
        assert!(parse_class_tree(r#"{"Background": {}, "A": {}}"#, &map).is_err());
    }

    #[test]
    fn single_child_parent_flagged() {
        let map = parse_class_map("Background,0\nP,1\nX,2\n").unwrap();
        let tree = parse_class_tree(r#"{"Background": {}, "P": {"X": {}}}"#, &map).unwrap();
        let violations = validate_hierarchy(&tree);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].rule, Rule::ChildCount);
        assert_eq!(violations[0].severity, Severity::Error);
        assert_eq!(violations[0].class, "P");
    }

    #[test]
    fn two_children_is_only_a_warning() {
        let map = parse_class_map("Background,0\nX,2\nY,3\n").unwrap();
        let tree = parse_class_tree(r#"{"Background": {}, "P": {"X": {}, "Y": {}}}"#, &map).unwrap();
        let violations = validate_hierarchy(&tree);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].severity, Severity::Warning);
    }

    #[test]
    fn cycle_reported() {
        let nodes = vec![
            node("Background", None, &[], 0, Some(0)),
            node("A", Some("B"), &["B"], 1, Some(1)),
            node("B", Some("A"), &["A"], 1, Some(2)),
        ];
        let tree = ClassTree::from_nodes(nodes).unwrap();
        let violations = validate_hierarchy(&tree);
        assert!(violations.iter().any(|v| v.rule == Rule::Acyclic && v.class == "A"));
        assert!(violations.iter().any(|v| v.rule == Rule::Acyclic && v.class == "B"));
    }

    #[test]
    fn multiple_branches_reported() {
        let nodes = vec![
            node("P", None, &["X", "Y", "Z"], 0, None),
            node("Q", None, &["X", "Y", "Z"], 0, None),
            node("X", Some("P"), &[], 1, Some(1)),
            node("Y", Some("P"), &[], 1, Some(2)),
            node("Z", Some("P"), &[], 1, Some(3)),
        ];
        let tree = ClassTree::from_nodes(nodes).unwrap();
        let violations = validate_hierarchy(&tree);
        assert!(violations
            .iter()
            .any(|v| v.rule == Rule::SingleBranch && v.class == "X"));
    }

    #[test]
    fn visibility_parents() {
        let tree = tl_pano_tree();
        assert_eq!(visibility_parent(&tree, "Dentin").unwrap(), Some("Tooth"));
        assert_eq!(visibility_parent(&tree, "Upper").unwrap(), None);
        assert_eq!(visibility_parent(&tree, "Background").unwrap(), None);
        assert!(visibility_parent(&tree, "dentin").is_err());
    }

    #[test]
    fn serialization_round_trip_is_byte_identical() {
        let tree = tl_pano_tree();
        assert_eq!(tree.to_json(), TL_PANO_CLASS_TREE);
        assert_eq!(tree.class_map().to_csv(), TL_PANO_CLASS_MAP);
        let reparsed = parse_class_tree(&tree.to_json(), &tree.class_map()).unwrap();
        assert_eq!(reparsed, tree);
        assert_eq!(reparsed.fingerprint(), tree.fingerprint());
    }

    #[test]
    fn structural_properties_hold() {
        let tree = tl_pano_tree();
        for n in tree.nodes() {
            if let Some(p) = &n.parent {
                let parent = tree.node(p).unwrap();
                assert_eq!(parent.level + 1, n.level);
                assert!(parent.children.contains(&n.name));
            }
        }
        let mut union: Vec<&str> = (0..tree.depth()).flat_map(|l| tree.level_names(l)).collect();
        let total = union.len();
        union.sort_unstable();
        union.dedup();
        assert_eq!(union.len(), total);
        assert_eq!(total, tree.len());
    }
}
