use serde::{Deserialize, Serialize};

use super::{ProcgenError, Result};
use crate::grammar::{GrammarNode, GrammarTree};

/// Axis-aligned rectangle in patch pixels, y pointing down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn min_side(&self) -> f64 {
        self.width().min(self.height())
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    /// Half-open containment: left and top edges inside, right and bottom outside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn inset(&self, d: f64) -> Rect {
        Rect::new(self.x0 + d, self.y0 + d, self.x1 - d, self.y1 - d)
    }

    pub fn overlap_area(&self, other: &Rect) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        w.max(0.0) * h.max(0.0)
    }
}

/// Border ring and cells of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub window: Rect,
    pub frame: Rect,
    pub cells: Vec<Rect>,
}

impl Layout {
    /// Smallest side over all cells.
    pub fn min_cell_side(&self) -> f64 {
        self.cells.iter().map(Rect::min_side).fold(f64::INFINITY, f64::min)
    }
}

pub fn layout_cells(tree: &GrammarTree) -> Result<Layout> {
    let p = &tree.params;
    let window = Rect::new(p.p_u.x, p.p_u.y, p.p_b.x, p.p_b.y);
    let (frame, inner) = match &tree.root {
        GrammarNode::Border { thickness, child } => (window.inset(*thickness), child.as_ref()),
        other => (window, other),
    };
    if !(frame.width() > 0.0 && frame.height() > 0.0) {
        return Err(ProcgenError::Degenerate(format!("frame {}x{}", frame.width(), frame.height())));
    }
    let mut cells = Vec::new();
    place(inner, frame, &mut cells)?;
    Ok(Layout { window, frame, cells })
}

fn place(node: &GrammarNode, rect: Rect, cells: &mut Vec<Rect>) -> Result<()> {
    match node {
        GrammarNode::Cell {} => cells.push(rect),
        GrammarNode::Border { thickness, child } => place(child, rect.inset(*thickness), cells)?,
        GrammarNode::Rows { heights, children } => {
            let mut y = rect.y0;
            for (i, (h, child)) in heights.iter().zip(children).enumerate() {
                let end = if i + 1 == children.len() { rect.y1 } else { y + h };
                place(child, Rect::new(rect.x0, y, rect.x1, end), cells)?;
                y = end;
            }
        }
        GrammarNode::Columns { widths, children } => {
            let mut x = rect.x0;
            for (i, (w, child)) in widths.iter().zip(children).enumerate() {
                let end = if i + 1 == children.len() { rect.x1 } else { x + w };
                place(child, Rect::new(x, rect.y0, end, rect.y1), cells)?;
                x = end;
            }
        }
    }
    if cells.last().is_some_and(|c| !(c.width() > 0.0 && c.height() > 0.0)) {
        return Err(ProcgenError::Degenerate("empty cell".into()));
    }
    Ok(())
}
