//! Window shape grammar.
//!
//! A window is a border ring around a frame. The frame is split into rows,
//! columns, or rows of columns (columns of rows), and every leaf is a cell.
//! Each kind of split may appear at most once along any path. Documents are
//! JSON, described in `docs/grammar-schema.md`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

/// Side length of the square patch the parameters are expressed in.
pub const PATCH_EXTENT: f64 = 64.0;

const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrammarError {
    #[error("syntax error at {path}: {message}")]
    Syntax { path: String, message: String },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("structure error at {path}: {message}")]
    Structure { path: String, message: String },
    #[error("degenerate window: {0}")]
    Degenerate(String),
    #[error("invalid assembly config: {0}")]
    Config(String),
}

impl GrammarError {
    /// Location of the offending node for parse errors.
    pub fn path(&self) -> Option<&str> {
        match self {
            Self::Syntax { path, .. } | Self::Schema { path, .. } | Self::Structure { path, .. } => Some(path),
            _ => None,
        }
    }
}

/// How many rows (or columns) a window has.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Division {
    One,
    Two,
    Many,
}

impl Division {
    pub const ALL: [Division; 3] = [Division::One, Division::Two, Division::Many];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    /// Class of a split with `n` parts; no split counts as one.
    pub fn from_count(n: usize) -> Self {
        match n {
            0 | 1 => Self::One,
            2 => Self::Two,
            _ => Self::Many,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::One => "one",
            Self::Two => "two",
            Self::Many => "many",
        }
    }
}

/// One of the nine row/column classes, indexed row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowType {
    pub rows: Division,
    pub cols: Division,
}

impl WindowType {
    pub const COUNT: usize = 9;

    pub const fn new(rows: Division, cols: Division) -> Self {
        Self { rows, cols }
    }

    pub fn all() -> [WindowType; 9] {
        std::array::from_fn(|i| Self::from_index(i).expect("in range"))
    }

    pub fn index(self) -> usize {
        3 * self.rows.ordinal() + self.cols.ordinal()
    }

    pub fn from_index(index: usize) -> Option<Self> {
        (index < Self::COUNT).then(|| Self::new(Division::ALL[index / 3], Division::ALL[index % 3]))
    }
}

impl fmt::Display for WindowType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.rows.name(), self.cols.name())
    }
}

impl FromStr for WindowType {
    type Err = String;

    /// Accepts `rows/cols` names (`two/many`) or the index `0`..`8`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(i) = s.parse::<usize>() {
            return Self::from_index(i).ok_or_else(|| format!("window type index {i} out of range"));
        }
        let parse = |part: &str| {
            Division::ALL
                .into_iter()
                .find(|d| d.name().eq_ignore_ascii_case(part.trim()))
                .ok_or_else(|| format!("unknown division {part:?}"))
        };
        let (r, c) = s.split_once('/').ok_or_else(|| format!("expected rows/cols, got {s:?}"))?;
        Ok(Self::new(parse(r)?, parse(c)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Size {
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 2]> for Size {
    fn from([w, h]: [f64; 2]) -> Self {
        Self { w, h }
    }
}

impl From<Size> for [f64; 2] {
    fn from(s: Size) -> Self {
        [s.w, s.h]
    }
}

/// Upper-left corner, lower-right corner and cell size in patch pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarParams {
    pub p_u: Point,
    pub p_b: Point,
    pub s: Size,
}

impl GrammarParams {
    /// From `[p_u.x, p_u.y, p_b.x, p_b.y, s.w, s.h]`.
    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            p_u: Point { x: a[0], y: a[1] },
            p_b: Point { x: a[2], y: a[3] },
            s: Size { w: a[4], h: a[5] },
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.p_u.x, self.p_u.y, self.p_b.x, self.p_b.y, self.s.w, self.s.h]
    }

    pub fn width(&self) -> f64 {
        self.p_b.x - self.p_u.x
    }

    pub fn height(&self) -> f64 {
        self.p_b.y - self.p_u.y
    }

    /// Every broken parameter invariant, as messages.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.to_array().iter().all(|v| v.is_finite()) {
            out.push("parameters must be finite".to_string());
            return out;
        }
        for (axis, lo, hi) in [("x", self.p_u.x, self.p_b.x), ("y", self.p_u.y, self.p_b.y)] {
            if !(0.0 <= lo && lo < hi && hi <= PATCH_EXTENT) {
                out.push(format!("corners need 0 <= p_u.{axis} < p_b.{axis} <= {PATCH_EXTENT}, got {lo} and {hi}"));
            }
        }
        if !(self.s.w > 0.0 && self.s.h > 0.0) {
            out.push(format!("cell size must be positive, got {}x{}", self.s.w, self.s.h));
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.violations().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GrammarNode {
    Border { thickness: f64, child: Box<GrammarNode> },
    Rows { heights: Vec<f64>, children: Vec<GrammarNode> },
    Columns { widths: Vec<f64>, children: Vec<GrammarNode> },
    Cell {},
}

impl GrammarNode {
    pub fn cell() -> Self {
        Self::Cell {}
    }

    /// Number of leaves.
    pub fn cell_count(&self) -> usize {
        match self {
            Self::Border { child, .. } => child.cell_count(),
            Self::Rows { children, .. } | Self::Columns { children, .. } => children.iter().map(Self::cell_count).sum(),
            Self::Cell {} => 1,
        }
    }

    fn row_count(&self) -> usize {
        match self {
            Self::Border { child, .. } => child.row_count(),
            Self::Rows { children, .. } => children.len(),
            Self::Columns { children, .. } => children.first().map_or(1, Self::row_count),
            Self::Cell {} => 1,
        }
    }

    fn column_count(&self) -> usize {
        match self {
            Self::Border { child, .. } => child.column_count(),
            Self::Columns { children, .. } => children.len(),
            Self::Rows { children, .. } => children.first().map_or(1, Self::column_count),
            Self::Cell {} => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarTree {
    pub version: u32,
    pub window_type: WindowType,
    pub params: GrammarParams,
    pub root: GrammarNode,
}

impl GrammarTree {
    /// Border thickness, zero when the root is not a border.
    pub fn thickness(&self) -> f64 {
        match &self.root {
            GrammarNode::Border { thickness, .. } => *thickness,
            _ => 0.0,
        }
    }

    /// Width and height inside the border.
    pub fn frame_size(&self) -> (f64, f64) {
        let t = self.thickness();
        (self.params.width() - 2.0 * t, self.params.height() - 2.0 * t)
    }
}

/// One broken invariant and where it is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

pub fn parse_grammar(text: &str) -> Result<GrammarTree, GrammarError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| GrammarError::Syntax {
        path: "$".into(),
        message: e.to_string(),
    })?;
    let tree: GrammarTree = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        GrammarError::Schema {
            path: if path == "." { "$".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })?;
    if tree.version != SCHEMA_VERSION {
        return Err(GrammarError::Schema {
            path: "version".into(),
            message: format!("unsupported version {}, expected {SCHEMA_VERSION}", tree.version),
        });
    }
    match validate_grammar(&tree).into_iter().next() {
        Some(v) => Err(GrammarError::Structure {
            path: v.path,
            message: v.message,
        }),
        None => Ok(tree),
    }
}

/// Pretty JSON with keys in declaration order and a trailing newline.
pub fn serialize_grammar(tree: &GrammarTree) -> String {
    let mut text = serde_json::to_string_pretty(tree).expect("grammar trees serialize");
    text.push('\n');
    text
}

pub fn validate_grammar(tree: &GrammarTree) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |path: &str, message: String| {
        out.push(Violation {
            path: path.to_string(),
            message,
        })
    };
    if tree.version != SCHEMA_VERSION {
        push("version", format!("unsupported version {}", tree.version));
    }
    let param_problems = tree.params.violations();
    for m in &param_problems {
        push("params", m.clone());
    }
    let mut walker = Walker {
        out: &mut out,
        check_sums: param_problems.is_empty(),
    };
    match &tree.root {
        GrammarNode::Border { thickness, child } => {
            let (fw, fh) = tree.frame_size();
            if !(thickness.is_finite() && *thickness > 0.0) {
                walker.push("root", "non-positive length");
                walker.check_sums = false;
            } else if walker.check_sums && !(fw > 0.0 && fh > 0.0) {
                walker.push("root", "border leaves no frame");
                walker.check_sums = false;
            }
            walker.walk(child, "root.child", (fw, fh), false, false);
        }
        other => {
            walker.push("root", "root must be Border");
            walker.check_sums = false;
            walker.walk(other, "root", (0.0, 0.0), false, false);
        }
    }
    if out.is_empty() {
        let derived = classify_tree(tree);
        if derived != tree.window_type {
            out.push(Violation {
                path: "window_type".into(),
                message: format!("declared {} but the structure is {derived}", tree.window_type),
            });
        }
    }
    out
}

struct Walker<'a> {
    out: &'a mut Vec<Violation>,
    check_sums: bool,
}

impl Walker<'_> {
    fn push(&mut self, path: &str, message: impl Into<String>) {
        self.out.push(Violation {
            path: path.to_string(),
            message: message.into(),
        });
    }

    fn walk(&mut self, node: &GrammarNode, path: &str, extent: (f64, f64), in_rows: bool, in_cols: bool) {
        match node {
            GrammarNode::Border { child, .. } => {
                self.push(path, "border only allowed at the root");
                self.walk(child, &format!("{path}.child"), extent, in_rows, in_cols);
            }
            GrammarNode::Rows { heights, children } => {
                if in_rows {
                    self.push(path, "rows nested inside rows");
                }
                self.split(path, "heights", heights, children, extent.1);
                if !same_count(children, GrammarNode::column_count) {
                    self.push(path, "rows disagree on their column count");
                }
                for (i, child) in children.iter().enumerate() {
                    let h = heights.get(i).copied().unwrap_or(0.0);
                    self.walk(child, &format!("{path}.children[{i}]"), (extent.0, h), true, in_cols);
                }
            }
            GrammarNode::Columns { widths, children } => {
                if in_cols {
                    self.push(path, "columns nested inside columns");
                }
                self.split(path, "widths", widths, children, extent.0);
                if !same_count(children, GrammarNode::row_count) {
                    self.push(path, "columns disagree on their row count");
                }
                for (i, child) in children.iter().enumerate() {
                    let w = widths.get(i).copied().unwrap_or(0.0);
                    self.walk(child, &format!("{path}.children[{i}]"), (w, extent.1), in_rows, true);
                }
            }
            GrammarNode::Cell {} => {}
        }
    }

    fn split(&mut self, path: &str, field: &str, lengths: &[f64], children: &[GrammarNode], total: f64) {
        if children.is_empty() {
            self.push(path, "split without children");
        }
        if lengths.len() != children.len() {
            self.push(path, format!("{} {field} for {} children", lengths.len(), children.len()));
        }
        let mut positive = true;
        for (i, len) in lengths.iter().enumerate() {
            if !(len.is_finite() && *len > 0.0) {
                self.push(&format!("{path}.{field}[{i}]"), "non-positive length");
                positive = false;
            }
        }
        if self.check_sums && positive && !lengths.is_empty() {
            let sum: f64 = lengths.iter().sum();
            if (sum - total).abs() > SUM_TOLERANCE * total.abs().max(1.0) {
                self.push(path, format!("{field} sum to {sum} but the frame spans {total}"));
            }
        }
    }
}

fn same_count(children: &[GrammarNode], count: fn(&GrammarNode) -> usize) -> bool {
    children.windows(2).all(|w| count(&w[0]) == count(&w[1]))
}

/// Window type implied by the tree's split counts.
pub fn classify_tree(tree: &GrammarTree) -> WindowType {
    WindowType::new(
        Division::from_count(tree.root.row_count()),
        Division::from_count(tree.root.column_count()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssembleConfig {
    /// Border thickness as a fraction of the window's smaller side.
    pub border_fraction: f64,
    /// Upper bound on the number of rows or columns of a "many" split.
    pub max_divisions: usize,
    /// Smallest row height allowed in a two-row split.
    pub min_cell: f64,
}

impl Default for AssembleConfig {
    fn default() -> Self {
        Self {
            border_fraction: 0.06,
            max_divisions: 8,
            min_cell: 2.0,
        }
    }
}

impl AssembleConfig {
    pub fn validate(&self) -> Result<(), GrammarError> {
        if !(self.border_fraction > 0.0 && self.border_fraction < 0.25) {
            return Err(GrammarError::Config(format!("border_fraction {} outside (0, 0.25)", self.border_fraction)));
        }
        if self.max_divisions < 3 {
            return Err(GrammarError::Config(format!("max_divisions {} below 3", self.max_divisions)));
        }
        if !(self.min_cell > 0.0) {
            return Err(GrammarError::Config(format!("min_cell {} not positive", self.min_cell)));
        }
        Ok(())
    }
}

/// Builds the canonical tree for a type and parameter set.
///
/// Rows are the outer split when both directions are divided. Two columns
/// are always equal; two rows take `s.h` for the first row.
pub fn assemble_grammar(t: WindowType, p: &GrammarParams, cfg: &AssembleConfig) -> Result<GrammarTree, GrammarError> {
    cfg.validate()?;
    if let Some(m) = p.violations().into_iter().next() {
        return Err(GrammarError::Structure {
            path: "params".into(),
            message: m,
        });
    }
    let thickness = cfg.border_fraction * p.width().min(p.height());
    let frame_w = p.width() - 2.0 * thickness;
    let frame_h = p.height() - 2.0 * thickness;
    if !(frame_w > 0.0 && frame_h > 0.0) {
        return Err(GrammarError::Degenerate(format!("frame {frame_w}x{frame_h} after a {thickness} border")));
    }
    let widths = split_lengths(t.cols, frame_w, p.s.w, cfg, false)?;
    let heights = split_lengths(t.rows, frame_h, p.s.h, cfg, true)?;
    let row = if widths.len() > 1 {
        GrammarNode::Columns {
            children: vec![GrammarNode::cell(); widths.len()],
            widths,
        }
    } else {
        GrammarNode::cell()
    };
    let inner = if heights.len() > 1 {
        GrammarNode::Rows {
            children: vec![row; heights.len()],
            heights,
        }
    } else {
        row
    };
    Ok(GrammarTree {
        version: SCHEMA_VERSION,
        window_type: t,
        params: *p,
        root: GrammarNode::Border {
            thickness,
            child: Box::new(inner),
        },
    })
}

fn split_lengths(class: Division, total: f64, cell: f64, cfg: &AssembleConfig, uneven_two: bool) -> Result<Vec<f64>, GrammarError> {
    Ok(match class {
        Division::One => vec![total],
        Division::Two if uneven_two => {
            if total < 2.0 * cfg.min_cell {
                return Err(GrammarError::Degenerate(format!("{total} px cannot hold two rows of at least {}", cfg.min_cell)));
            }
            let first = cell.clamp(cfg.min_cell, total - cfg.min_cell);
            vec![first, total - first]
        }
        Division::Two => vec![total / 2.0; 2],
        Division::Many => {
            let n = ((total / cell).round() as usize).clamp(3, cfg.max_divisions);
            vec![total / n as f64; n]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(a: [f64; 6]) -> GrammarParams {
        GrammarParams::from_array(a)
    }

    #[test]
    fn nine_distinct_types_in_row_major_order() {
        let all = WindowType::all();
        for (i, t) in all.iter().enumerate() {
            assert_eq!(t.index(), i);
            assert_eq!(t.index(), 3 * t.rows.ordinal() + t.cols.ordinal());
        }
        assert_eq!(all[0], WindowType::new(Division::One, Division::One));
        assert_eq!(all[8], WindowType::new(Division::Many, Division::Many));
        assert!(WindowType::from_index(9).is_none());
        assert_eq!("two/many".parse::<WindowType>().unwrap().index(), 5);
        assert_eq!("7".parse::<WindowType>().unwrap(), all[7]);
    }

    #[test]
    fn many_rows_from_cell_height() {
        // Window height chosen so the frame is 48 after the border.
        let cfg = AssembleConfig::default();
        let h = 48.0 / (1.0 - 2.0 * cfg.border_fraction);
        let p = params([2.0, 2.0, 2.0 + h, 2.0 + h, 10.0, 12.0]);
        let t = WindowType::new(Division::Many, Division::One);
        let tree = assemble_grammar(t, &p, &cfg).unwrap();
        let GrammarNode::Border { child, .. } = &tree.root else { panic!() };
        let GrammarNode::Rows { heights, .. } = child.as_ref() else { panic!() };
        assert_eq!(heights.len(), 4);
    }

    #[test]
    fn two_rows_take_cell_height_then_remainder() {
        let cfg = AssembleConfig::default();
        let h = 40.0 / (1.0 - 2.0 * cfg.border_fraction);
        let p = params([0.0, 0.0, h, h, 5.0, 15.0]);
        let tree = assemble_grammar(WindowType::new(Division::Two, Division::One), &p, &cfg).unwrap();
        let GrammarNode::Border { child, .. } = &tree.root else { panic!() };
        let GrammarNode::Rows { heights, .. } = child.as_ref() else { panic!() };
        assert!((heights[0] - 15.0).abs() < 1e-12 && (heights[1] - 25.0).abs() < 1e-12);
    }

    #[test]
    fn single_cell_window_is_border_then_cell() {
        let p = params([3.0, 5.0, 40.0, 61.0, 7.0, 7.0]);
        let tree = assemble_grammar(WindowType::new(Division::One, Division::One), &p, &AssembleConfig::default()).unwrap();
        let GrammarNode::Border { child, .. } = &tree.root else { panic!() };
        assert_eq!(**child, GrammarNode::cell());
    }

    #[test]
    fn bad_configs_and_params_are_rejected() {
        let p = params([0.0, 0.0, 40.0, 40.0, 5.0, 5.0]);
        let t = WindowType::new(Division::One, Division::One);
        let bad = AssembleConfig {
            border_fraction: 0.3,
            ..Default::default()
        };
        assert!(matches!(assemble_grammar(t, &p, &bad), Err(GrammarError::Config(_))));
        let flipped = params([40.0, 0.0, 10.0, 40.0, 5.0, 5.0]);
        assert!(matches!(assemble_grammar(t, &flipped, &AssembleConfig::default()), Err(GrammarError::Structure { .. })));
        let thin = params([0.0, 0.0, 40.0, 3.0, 5.0, 1.0]);
        let two = WindowType::new(Division::Two, Division::One);
        assert!(matches!(assemble_grammar(two, &thin, &AssembleConfig::default()), Err(GrammarError::Degenerate(_))));
    }

    #[test]
    fn root_cell_and_negative_heights() {
        let p = params([4.0, 4.0, 60.0, 60.0, 16.0, 16.0]);
        let tree = GrammarTree {
            version: 1,
            window_type: WindowType::new(Division::One, Division::One),
            params: p,
            root: GrammarNode::cell(),
        };
        let v = validate_grammar(&tree);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].message, "root must be Border");

        let tree = GrammarTree {
            root: GrammarNode::Border {
                thickness: 4.0,
                child: Box::new(GrammarNode::Rows {
                    heights: vec![10.0, -5.0],
                    children: vec![GrammarNode::cell(), GrammarNode::cell()],
                }),
            },
            window_type: WindowType::new(Division::Two, Division::One),
            ..tree
        };
        let v = validate_grammar(&tree);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].message, "non-positive length");
        assert_eq!(v[0].path, "root.child.heights[1]");
    }
}
