//! ECOC label encoding and the hierarchical multiclass-to-binary transform.
//!
//! A `CodingMatrix` is a c x l ternary matrix over {-1, 0, +1}: each column
//! defines one binary sub-problem (0 marks a non-participating class), and
//! the columns form a binary tree over the classes — column 0 splits all
//! classes, and every later column refines exactly one sign-class of an
//! earlier column until each class sits alone at a leaf. Prediction is a
//! strict root-to-leaf traversal, not Hamming decoding.

mod jcl;

pub use jcl::{jcl_optimize, JclHyper, JclSolution, LinearFit};

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Ternary class-coding matrix with class names and the balance tolerance
/// used when it was constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct CodingMatrix {
    /// c rows (class codewords) by l columns (binary problems), entries in {-1, 0, +1}.
    entries: Vec<Vec<i8>>,
    pub class_names: Vec<String>,
    pub tolerance: i64,
}

/// One violated constraint, with the column it occurred in when applicable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub column: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.column {
            Some(c) => write!(f, "column {c}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl CodingMatrix {
    pub fn new(entries: Vec<Vec<i8>>, class_names: Vec<String>, tolerance: i64) -> Result<Self> {
        if entries.is_empty() || entries.len() != class_names.len() {
            return Err(Error::Contract(format!(
                "coding matrix has {} rows but {} class names",
                entries.len(),
                class_names.len()
            )));
        }
        let l = entries[0].len();
        if l == 0 || entries.iter().any(|r| r.len() != l) {
            return Err(Error::Contract("coding matrix rows must share a nonzero length".into()));
        }
        if tolerance < 0 {
            return Err(Error::Contract("tolerance must be nonnegative".into()));
        }
        Ok(CodingMatrix {
            entries,
            class_names,
            tolerance,
        })
    }

    /// The default hierarchy for a class list: column k peels class k off as
    /// the positive singleton against the remaining classes. For the
    /// canonical 3-class list this is {Normal} vs {Bacterial, Viral}, then
    /// Bacterial vs Viral.
    pub fn chain(class_names: &[String], tolerance: i64) -> Result<Self> {
        let c = class_names.len();
        if c < 2 {
            return Err(Error::Contract("need at least 2 classes".into()));
        }
        let l = c - 1;
        let mut entries = vec![vec![0i8; l]; c];
        for col in 0..l {
            entries[col][col] = 1;
            for row in col + 1..c {
                entries[row][col] = -1;
            }
        }
        let m = CodingMatrix::new(entries, class_names.to_vec(), tolerance)?;
        if let Err(v) = m.validate() {
            let column = v[0].column.unwrap_or(0);
            return Err(Error::Infeasible {
                column,
                reason: v[0].message.clone(),
            });
        }
        Ok(m)
    }

    /// Deterministic balanced tree: each subset splits into halves, so the
    /// per-column entry sum is 0 or ±1.
    pub fn balanced(class_names: &[String], tolerance: i64) -> Result<Self> {
        let c = class_names.len();
        if c < 2 {
            return Err(Error::Contract("need at least 2 classes".into()));
        }
        let mut entries = vec![vec![0i8; c - 1]; c];
        let classes: Vec<usize> = (0..c).collect();
        let mut next_col = 0usize;
        split_balanced(&mut entries, &classes, &mut next_col, tolerance)?;
        CodingMatrix::new(entries, class_names.to_vec(), tolerance)
    }

    /// The production default: the chain hierarchy when it satisfies the
    /// balance tolerance, otherwise the balanced tree.
    pub fn default_matrix(class_names: &[String], tolerance: i64) -> Result<Self> {
        match CodingMatrix::chain(class_names, tolerance) {
            Ok(m) => Ok(m),
            Err(_) => CodingMatrix::balanced(class_names, tolerance),
        }
    }

    pub fn classes(&self) -> usize {
        self.entries.len()
    }

    pub fn columns(&self) -> usize {
        self.entries[0].len()
    }

    pub fn rows(&self) -> &[Vec<i8>] {
        &self.entries
    }

    /// Encoded value for a class in a column: +1 positive, -1 negative,
    /// 0 non-participating.
    pub fn encode(&self, class_index: usize, column: usize) -> Result<i8> {
        if class_index >= self.classes() || column >= self.columns() {
            return Err(Error::Contract(format!(
                "encode({class_index}, {column}) out of range for {}x{} matrix",
                self.classes(),
                self.columns()
            )));
        }
        Ok(self.entries[class_index][column])
    }

    /// Classes with a nonzero entry in a column.
    pub fn support(&self, column: usize) -> Vec<usize> {
        (0..self.classes()).filter(|&c| self.entries[c][column] != 0).collect()
    }

    fn sign_class(&self, column: usize, sign: i8) -> Vec<usize> {
        (0..self.classes()).filter(|&c| self.entries[c][column] == sign).collect()
    }

    /// Check every structural constraint, reporting all violations.
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let mut violations = Vec::new();
        let c = self.classes();
        let l = self.columns();

        for col in 0..l {
            let mut pos = 0i64;
            let mut neg = 0i64;
            let mut sum = 0i64;
            for row in 0..c {
                let v = self.entries[row][col];
                if !(-1..=1).contains(&v) {
                    violations.push(Violation {
                        column: Some(col),
                        message: format!("entry {v} outside {{-1, 0, +1}}"),
                    });
                }
                if v > 0 {
                    pos += 1;
                }
                if v < 0 {
                    neg += 1;
                }
                sum += v as i64;
            }
            if pos == 0 {
                violations.push(Violation {
                    column: Some(col),
                    message: "no positive class".into(),
                });
            }
            if neg == 0 {
                violations.push(Violation {
                    column: Some(col),
                    message: "no negative class".into(),
                });
            }
            if sum.abs() > self.tolerance {
                violations.push(Violation {
                    column: Some(col),
                    message: format!("entry sum {sum} exceeds tolerance {}", self.tolerance),
                });
            }
        }

        for a in 0..c {
            for b in a + 1..c {
                if self.entries[a] == self.entries[b] {
                    violations.push(Violation {
                        column: None,
                        message: format!("codewords not distinct: classes {a} and {b}"),
                    });
                }
            }
        }

        if let Err(v) = self.check_tree() {
            violations.push(v);
        }

        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    /// Tree property: column 0 covers all classes; every sign-class with two
    /// or more members is the exact support of exactly one later column;
    /// every column is used; every class ends at a singleton leaf.
    fn check_tree(&self) -> std::result::Result<(), Violation> {
        let c = self.classes();
        let l = self.columns();
        let all: Vec<usize> = (0..c).collect();
        if self.support(0) != all {
            return Err(Violation {
                column: Some(0),
                message: "root column must cover every class".into(),
            });
        }
        let mut used = vec![false; l];
        let mut stack = vec![(0usize, all)];
        while let Some((col, subset)) = stack.pop() {
            if used[col] {
                return Err(Violation {
                    column: Some(col),
                    message: "column refines more than one subset".into(),
                });
            }
            used[col] = true;
            if self.support(col) != subset {
                return Err(Violation {
                    column: Some(col),
                    message: "column support does not match its subset".into(),
                });
            }
            for sign in [1i8, -1] {
                let side: Vec<usize> = subset
                    .iter()
                    .copied()
                    .filter(|&cls| self.entries[cls][col] == sign)
                    .collect();
                if side.len() >= 2 {
                    // The refining column: the earliest later column whose
                    // support is exactly this side.
                    let next = (0..l).find(|&k| !used[k] && self.support(k) == side);
                    match next {
                        Some(k) => stack.push((k, side)),
                        None => {
                            return Err(Violation {
                                column: Some(col),
                                message: format!(
                                    "sign class {side:?} has no refining column; classes never reach a leaf"
                                ),
                            })
                        }
                    }
                }
            }
        }
        if let Some(unused) = used.iter().position(|&u| !u) {
            return Err(Violation {
                column: Some(unused),
                message: "column is not reachable from the hierarchy".into(),
            });
        }
        Ok(())
    }

    // ── Plain-text serialization ─────────────────────────────────────
    // First line "c l tau", then c lines of l entries, then c class names.

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.classes(), self.columns(), self.tolerance);
        for row in &self.entries {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        for name in &self.class_names {
            out.push_str(name);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, msg: &str| Error::Parse {
            path: "<coding matrix>".into(),
            line,
            msg: msg.into(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "empty coding matrix"))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(err(1, "header must be \"c l tau\""));
        }
        let c: usize = parts[0].parse().map_err(|_| err(1, "bad class count"))?;
        let l: usize = parts[1].parse().map_err(|_| err(1, "bad column count"))?;
        let tau: i64 = parts[2].parse().map_err(|_| err(1, "bad tolerance"))?;
        let mut entries = Vec::with_capacity(c);
        for row in 0..c {
            let line = lines.next().ok_or_else(|| err(2 + row, "missing matrix row"))?;
            let vals: Result<Vec<i8>> = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<i8>()
                        .ok()
                        .filter(|v| (-1..=1).contains(v))
                        .ok_or_else(|| err(2 + row, "matrix entries must be -1, 0, or 1"))
                })
                .collect();
            let vals = vals?;
            if vals.len() != l {
                return Err(err(2 + row, "wrong number of entries in row"));
            }
            entries.push(vals);
        }
        let mut names = Vec::with_capacity(c);
        for row in 0..c {
            let line = lines
                .next()
                .ok_or_else(|| err(2 + c + row, "missing class name"))?;
            names.push(line.trim().to_string());
        }
        CodingMatrix::new(entries, names, tau)
    }
}

/// Validate and report: `Ok` or the full violation list.
pub fn validate_matrix(z: &CodingMatrix) -> std::result::Result<(), Vec<Violation>> {
    z.validate()
}

// ── Hierarchy tree ───────────────────────────────────────────────────

/// A node of the decoded hierarchy: the column deciding this subset and the
/// two children (subtree or leaf class).
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyNode {
    pub column: usize,
    pub classes: Vec<usize>,
    pub positive: HierarchyChild,
    pub negative: HierarchyChild,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HierarchyChild {
    Leaf(usize),
    Node(Box<HierarchyNode>),
}

impl HierarchyNode {
    /// Greatest root-to-leaf depth (number of columns on the longest path).
    pub fn depth(&self) -> usize {
        let d = |child: &HierarchyChild| match child {
            HierarchyChild::Leaf(_) => 0,
            HierarchyChild::Node(n) => n.depth(),
        };
        1 + d(&self.positive).max(d(&self.negative))
    }

    /// Every column index used in this subtree.
    pub fn columns(&self) -> Vec<usize> {
        let mut cols = vec![self.column];
        for child in [&self.positive, &self.negative] {
            if let HierarchyChild::Node(n) = child {
                cols.extend(n.columns());
            }
        }
        cols
    }

    /// Root-to-leaf column/sign path for a class.
    pub fn path_of(&self, class: usize) -> Option<Vec<(usize, i8)>> {
        for (sign, child) in [(1i8, &self.positive), (-1i8, &self.negative)] {
            match child {
                HierarchyChild::Leaf(c) if *c == class => return Some(vec![(self.column, sign)]),
                HierarchyChild::Node(n) => {
                    if let Some(mut rest) = n.path_of(class) {
                        rest.insert(0, (self.column, sign));
                        return Some(rest);
                    }
                }
                _ => {}
            }
        }
        None
    }
}

/// Build the traversal tree from a valid coding matrix.
pub fn build_hierarchy(z: &CodingMatrix) -> Result<HierarchyNode> {
    if let Err(violations) = z.validate() {
        return Err(Error::Contract(format!(
            "coding matrix invalid: {}",
            violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    let all: Vec<usize> = (0..z.classes()).collect();
    build_node(z, 0, &all, &mut vec![false; z.columns()])
}

fn build_node(z: &CodingMatrix, column: usize, subset: &[usize], used: &mut Vec<bool>) -> Result<HierarchyNode> {
    used[column] = true;
    let mut children = Vec::with_capacity(2);
    for sign in [1i8, -1] {
        let side: Vec<usize> = subset
            .iter()
            .copied()
            .filter(|&c| z.rows()[c][column] == sign)
            .collect();
        let child = match side.len() {
            1 => HierarchyChild::Leaf(side[0]),
            _ => {
                let next = (0..z.columns())
                    .find(|&k| !used[k] && z.support(k) == side)
                    .ok_or_else(|| Error::Contract("tree property violated during build".into()))?;
                HierarchyChild::Node(Box::new(build_node(z, next, &side, used)?))
            }
        };
        children.push(child);
    }
    let negative = children.pop().unwrap();
    let positive = children.pop().unwrap();
    Ok(HierarchyNode {
        column,
        classes: subset.to_vec(),
        positive,
        negative,
    })
}

/// Root-to-leaf traversal: at each node the decider supplies the sign for
/// that node's column; the reached leaf's class is returned along with the
/// visited columns.
pub fn decode(tree: &HierarchyNode, mut decider: impl FnMut(usize) -> i8) -> (usize, Vec<usize>) {
    let mut trace = Vec::new();
    let mut node = tree;
    loop {
        trace.push(node.column);
        let sign = decider(node.column);
        let child = if sign >= 0 { &node.positive } else { &node.negative };
        match child {
            HierarchyChild::Leaf(c) => return (*c, trace),
            HierarchyChild::Node(n) => node = n,
        }
    }
}

// ── Random valid matrices (used by tests and solver seeding) ─────────

/// Generate a random valid tree coding matrix by recursive random
/// partitioning under the balance tolerance.
pub fn random_tree_matrix(class_names: &[String], tolerance: i64, rng: &mut ChaCha8Rng) -> Result<CodingMatrix> {
    let c = class_names.len();
    if c < 2 {
        return Err(Error::Contract("need at least 2 classes".into()));
    }
    let l = c - 1;
    let mut entries = vec![vec![0i8; l]; c];
    let classes: Vec<usize> = (0..c).collect();
    let mut next_col = 0usize;
    split_random(&mut entries, &classes, &mut next_col, tolerance, rng)?;
    CodingMatrix::new(entries, class_names.to_vec(), tolerance)
}

fn split_random(
    entries: &mut Vec<Vec<i8>>,
    subset: &[usize],
    next_col: &mut usize,
    tolerance: i64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let col = *next_col;
    *next_col += 1;
    let m = subset.len();
    // Feasible positive-side sizes: 1..m-1 with |2p - m| <= tolerance, and
    // both sides must themselves be recursively splittable.
    let sizes: Vec<usize> = (1..m)
        .filter(|&p| ((2 * p) as i64 - m as i64).abs() <= tolerance)
        .filter(|&p| splittable(p, tolerance) && splittable(m - p, tolerance))
        .collect();
    if sizes.is_empty() {
        return Err(Error::Infeasible {
            column: col,
            reason: format!("no balanced split of {m} classes within tolerance {tolerance}"),
        });
    }
    let p = sizes[rng.gen_range(0..sizes.len())];
    let mut shuffled = subset.to_vec();
    for i in (1..shuffled.len()).rev() {
        let j = rng.gen_range(0..=i);
        shuffled.swap(i, j);
    }
    let (pos, neg) = shuffled.split_at(p);
    let mut pos = pos.to_vec();
    let mut neg = neg.to_vec();
    pos.sort_unstable();
    neg.sort_unstable();
    for &cls in &pos {
        entries[cls][col] = 1;
    }
    for &cls in &neg {
        entries[cls][col] = -1;
    }
    if pos.len() >= 2 {
        split_random(entries, &pos, next_col, tolerance, rng)?;
    }
    if neg.len() >= 2 {
        split_random(entries, &neg, next_col, tolerance, rng)?;
    }
    Ok(())
}

fn split_balanced(
    entries: &mut Vec<Vec<i8>>,
    subset: &[usize],
    next_col: &mut usize,
    tolerance: i64,
) -> Result<()> {
    let col = *next_col;
    *next_col += 1;
    let m = subset.len();
    let p = m.div_ceil(2);
    if ((2 * p) as i64 - m as i64).abs() > tolerance {
        return Err(Error::Infeasible {
            column: col,
            reason: format!("no balanced split of {m} classes within tolerance {tolerance}"),
        });
    }
    let (pos, neg) = subset.split_at(p);
    for &cls in pos {
        entries[cls][col] = 1;
    }
    for &cls in neg {
        entries[cls][col] = -1;
    }
    if pos.len() >= 2 {
        split_balanced(entries, pos, next_col, tolerance)?;
    }
    if neg.len() >= 2 {
        split_balanced(entries, neg, next_col, tolerance)?;
    }
    Ok(())
}

/// Whether a subset of `m` classes can be recursively split to leaves under
/// the balance tolerance.
fn splittable(m: usize, tolerance: i64) -> bool {
    if m <= 1 {
        return true;
    }
    (1..m)
        .filter(|&p| ((2 * p) as i64 - m as i64).abs() <= tolerance)
        .any(|p| splittable(p, tolerance) && splittable(m - p, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class{i}")).collect()
    }

    fn fig4() -> CodingMatrix {
        CodingMatrix::new(
            vec![vec![1, 0], vec![-1, 1], vec![-1, -1]],
            vec!["Normal".into(), "Bacterial Pneumonia".into(), "Viral Pneumonia".into()],
            1,
        )
        .unwrap()
    }

    #[test]
    fn three_class_tree_code_is_valid() {
        assert!(validate_matrix(&fig4()).is_ok());
    }

    #[test]
    fn chain_matches_fig4_scheme() {
        let m = CodingMatrix::chain(&fig4().class_names, 1).unwrap();
        assert_eq!(m, fig4());
    }

    #[test]
    fn all_positive_column_is_flagged() {
        let m = CodingMatrix::new(vec![vec![1, 1], vec![-1, 1], vec![-1, 1]], names(3), 3).unwrap();
        let violations = validate_matrix(&m).unwrap_err();
        assert!(violations
            .iter()
            .any(|v| v.column == Some(1) && v.message.contains("no negative class")));
    }

    #[test]
    fn duplicate_rows_are_flagged() {
        let m = CodingMatrix::new(vec![vec![1, 1], vec![1, 1], vec![-1, -1]], names(3), 3).unwrap();
        let violations = validate_matrix(&m).unwrap_err();
        assert!(violations.iter().any(|v| v.message.contains("not distinct")));
    }

    #[test]
    fn balance_tolerance_is_enforced() {
        // 1-vs-3 root split has |sum| = 2 > tau = 1 for c = 4.
        let m = CodingMatrix::new(
            vec![vec![1, 0, 0], vec![-1, 1, 0], vec![-1, -1, 1], vec![-1, -1, -1]],
            names(4),
            1,
        )
        .unwrap();
        let violations = validate_matrix(&m).unwrap_err();
        assert!(violations.iter().any(|v| v.message.contains("exceeds tolerance")));
    }

    #[test]
    fn encode_is_a_total_lookup() {
        let m = fig4();
        assert_eq!(m.encode(0, 0).unwrap(), 1);
        assert_eq!(m.encode(0, 1).unwrap(), 0);
        for class in 0..3 {
            for col in 0..2 {
                assert!(m.encode(class, col).is_ok());
            }
        }
        assert!(m.encode(3, 0).is_err());
        assert!(m.encode(0, 2).is_err());
    }

    #[test]
    fn hierarchy_of_fig4() {
        let tree = build_hierarchy(&fig4()).unwrap();
        assert_eq!(tree.column, 0);
        assert_eq!(tree.positive, HierarchyChild::Leaf(0));
        match &tree.negative {
            HierarchyChild::Node(n) => {
                assert_eq!(n.column, 1);
                assert_eq!(n.positive, HierarchyChild::Leaf(1));
                assert_eq!(n.negative, HierarchyChild::Leaf(2));
            }
            other => panic!("expected interior node, got {other:?}"),
        }
    }

    #[test]
    fn two_class_single_root() {
        let m = CodingMatrix::chain(&names(2), 1).unwrap();
        let tree = build_hierarchy(&m).unwrap();
        assert_eq!(tree.positive, HierarchyChild::Leaf(0));
        assert_eq!(tree.negative, HierarchyChild::Leaf(1));
        assert_eq!(tree.depth(), 1);
    }

    #[test]
    fn decode_recovers_each_class_from_its_codeword() {
        let m = fig4();
        let tree = build_hierarchy(&m).unwrap();
        for class in 0..3 {
            let (got, trace) = decode(&tree, |col| m.encode(class, col).unwrap());
            assert_eq!(got, class);
            assert!(trace.len() <= m.columns());
        }
    }

    #[test]
    fn decode_positive_run_reaches_first_leaf() {
        let tree = build_hierarchy(&fig4()).unwrap();
        let (class, trace) = decode(&tree, |_| 1);
        assert_eq!(class, 0); // Normal sits at depth 1 on the positive side
        assert_eq!(trace, vec![0]);
    }

    #[test]
    fn every_class_reaches_exactly_one_leaf() {
        let m = fig4();
        let tree = build_hierarchy(&m).unwrap();
        for class in 0..3 {
            assert!(tree.path_of(class).is_some());
        }
    }

    #[test]
    fn random_trees_are_valid_and_decodable() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for c in 2..=5 {
            for _ in 0..20 {
                let m = random_tree_matrix(&names(c), 1, &mut rng).unwrap();
                assert!(validate_matrix(&m).is_ok(), "invalid: {m:?}");
                let tree = build_hierarchy(&m).unwrap();
                for class in 0..c {
                    let (got, _) = decode(&tree, |col| m.encode(class, col).unwrap());
                    assert_eq!(got, class);
                }
            }
        }
    }

    #[test]
    fn infeasible_tau_zero_odd_names_column() {
        let err = CodingMatrix::chain(&names(3), 0).unwrap_err();
        match err {
            Error::Infeasible { column, .. } => assert_eq!(column, 0),
            other => panic!("expected infeasibility, got {other:?}"),
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(random_tree_matrix(&names(3), 0, &mut rng).is_err());
    }

    #[test]
    fn text_round_trip() {
        let m = fig4();
        let text = m.to_text();
        let back = CodingMatrix::from_text(&text).unwrap();
        assert_eq!(m, back);
        assert!(text.starts_with("3 2 1\n"));
    }
}
