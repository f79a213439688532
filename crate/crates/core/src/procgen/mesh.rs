use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::layout::{layout_cells, Layout, Rect};
use super::scene::Transform;
use super::{ProcgenError, Result};
use crate::grammar::GrammarTree;

/// Vertices and faces of one ring prism.
pub const RING_VERTICES: usize = 16;
pub const RING_FACES: usize = 16;

/// Indexed polygon mesh. Faces wind counter-clockwise seen from outside.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<Vec<usize>>,
}

impl Mesh {
    pub fn new() -> Self {
        Self::default()
    }

    /// First broken invariant, if any.
    pub fn check(&self) -> std::result::Result<(), String> {
        for (fi, f) in self.faces.iter().enumerate() {
            if f.len() < 3 {
                return Err(format!("face {fi} has {} vertices", f.len()));
            }
            if let Some(&i) = f.iter().find(|&&i| i >= self.vertices.len()) {
                return Err(format!("face {fi} references vertex {i} of {}", self.vertices.len()));
            }
            for (a, &i) in f.iter().enumerate() {
                if f[a + 1..].contains(&i) {
                    return Err(format!("face {fi} repeats vertex {i}"));
                }
            }
        }
        if let Some(((a, b), n)) = self.edge_uses().into_iter().find(|&(_, n)| n > 2) {
            return Err(format!("edge {a}-{b} is shared by {n} faces"));
        }
        Ok(())
    }

    /// Number of faces using each undirected edge.
    pub fn edge_uses(&self) -> HashMap<(usize, usize), usize> {
        let mut uses = HashMap::new();
        for f in &self.faces {
            for (k, &a) in f.iter().enumerate() {
                let b = f[(k + 1) % f.len()];
                *uses.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        uses
    }

    pub fn append(&mut self, other: &Mesh) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.faces.extend(other.faces.iter().map(|f| f.iter().map(|i| i + base).collect()));
    }

    pub fn transformed(&self, t: &Transform) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| t.apply(*v)).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Signed volume of the faces in `faces`, fan-triangulated.
    pub fn signed_volume(&self, faces: std::ops::Range<usize>) -> f64 {
        let mut vol = 0.0;
        for f in &self.faces[faces] {
            let p0 = self.vertices[f[0]];
            for k in 1..f.len() - 1 {
                let (p1, p2) = (self.vertices[f[k]], self.vertices[f[k + 1]]);
                vol += p0[0] * (p1[1] * p2[2] - p1[2] * p2[1]) - p0[1] * (p1[0] * p2[2] - p1[2] * p2[0])
                    + p0[2] * (p1[0] * p2[1] - p1[1] * p2[0]);
            }
        }
        vol / 6.0
    }

    fn push_vertex(&mut self, x: f64, y: f64, z: f64) -> usize {
        self.vertices.push([x, -y, z]);
        self.vertices.len() - 1
    }

    /// Corner indices of `r` at depth `z`, counter-clockwise seen from +z.
    fn push_rect(&mut self, r: &Rect, z: f64) -> [usize; 4] {
        [
            self.push_vertex(r.x0, r.y1, z),
            self.push_vertex(r.x1, r.y1, z),
            self.push_vertex(r.x1, r.y0, z),
            self.push_vertex(r.x0, r.y0, z),
        ]
    }

    /// Closed prism between `outer` and `inner`, from z = 0 back to `-depth`.
    fn push_ring(&mut self, outer: &Rect, inner: &Rect, depth: f64) {
        let of = self.push_rect(outer, 0.0);
        let ob = self.push_rect(outer, -depth);
        let inf = self.push_rect(inner, 0.0);
        let ib = self.push_rect(inner, -depth);
        for k in 0..4 {
            let n = (k + 1) % 4;
            self.faces.push(vec![of[k], of[n], inf[n], inf[k]]);
            self.faces.push(vec![ob[k], ib[k], ib[n], ob[n]]);
            self.faces.push(vec![of[k], ob[k], ob[n], of[n]]);
            self.faces.push(vec![inf[k], inf[n], ib[n], ib[k]]);
        }
    }
}

/// Extrusion sizes in patch pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthConfig {
    pub bar_depth: f64,
    pub bar_width: f64,
    pub glass_inset: f64,
}

impl DepthConfig {
    /// Defaults scaled to the window: depth 4% of its smaller side, bars the
    /// lesser of that and a quarter of the smallest cell, glass recessed by
    /// 30% of the depth.
    pub fn for_layout(layout: &Layout) -> Self {
        let m = layout.window.min_side();
        let bar_depth = 0.04 * m;
        Self {
            bar_depth,
            bar_width: (0.04 * m).min(0.25 * layout.min_cell_side()),
            glass_inset: 0.3 * bar_depth,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.bar_depth > 0.0 && self.bar_width > 0.0 && self.glass_inset >= 0.0) {
            return Err(ProcgenError::Depth(format!("{self:?}")));
        }
        if self.glass_inset > self.bar_depth {
            return Err(ProcgenError::Depth(format!("glass inset {} deeper than bars {}", self.glass_inset, self.bar_depth)));
        }
        Ok(())
    }
}

/// Vertex and face counts for a window with `cells` cells.
pub fn expected_counts(cells: usize) -> (usize, usize) {
    (RING_VERTICES * (cells + 1) + 4 * cells, RING_FACES * (cells + 1) + cells)
}

/// Border ring, one ring per cell and a recessed glass pane per cell.
///
/// Local coordinates are `(x, -y, z)` in patch pixels with the window
/// face at z = 0 and depth running toward negative z.
pub fn generate_window_mesh(tree: &GrammarTree, depth: &DepthConfig) -> Result<Mesh> {
    depth.validate()?;
    let layout = layout_cells(tree)?;
    let smallest = layout.min_cell_side();
    if depth.bar_width >= 0.5 * smallest {
        return Err(ProcgenError::Degenerate(format!(
            "bar width {} needs cells wider than {}, smallest is {smallest}",
            depth.bar_width,
            2.0 * depth.bar_width
        )));
    }
    let mut mesh = Mesh::new();
    mesh.push_ring(&layout.window, &layout.frame, depth.bar_depth);
    for cell in &layout.cells {
        mesh.push_ring(cell, &cell.inset(depth.bar_width), depth.bar_depth);
    }
    for cell in &layout.cells {
        let pane = mesh.push_rect(&cell.inset(depth.bar_width), -depth.glass_inset);
        mesh.faces.push(pane.to_vec());
    }
    Ok(mesh)
}

/// [`generate_window_mesh`] with [`DepthConfig::for_layout`] depths.
pub fn window_mesh(tree: &GrammarTree) -> Result<Mesh> {
    let layout = layout_cells(tree)?;
    generate_window_mesh(tree, &DepthConfig::for_layout(&layout))
}
