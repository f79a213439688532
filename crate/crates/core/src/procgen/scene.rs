use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::mesh::Mesh;
use super::{ProcgenError, Result};

/// Row-major homogeneous 4×4 matrix applied to column vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform(pub [[f64; 4]; 4]);

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self(m)
    }

    pub fn translation(dx: f64, dy: f64, dz: f64) -> Self {
        let mut t = Self::identity();
        t.0[0][3] = dx;
        t.0[1][3] = dy;
        t.0[2][3] = dz;
        t
    }

    pub fn scale(sx: f64, sy: f64, sz: f64) -> Self {
        let mut t = Self::identity();
        t.0[0][0] = sx;
        t.0[1][1] = sy;
        t.0[2][2] = sz;
        t
    }

    /// Rotation by `angle` radians about the z axis.
    pub fn rotation_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let mut t = Self::identity();
        t.0[0][0] = c;
        t.0[0][1] = -s;
        t.0[1][0] = s;
        t.0[1][1] = c;
        t
    }

    /// Maps mesh coordinates `(px, -py, z)` of a patch onto image-plane
    /// coordinates `(x, -y, z)`, where image point = `origin + p·scale`.
    /// Depth is scaled by the geometric mean of the two axis scales.
    pub fn patch_to_wall(origin: (f64, f64), scale: (f64, f64)) -> Self {
        let sz = (scale.0 * scale.1).abs().sqrt();
        Self::translation(origin.0, -origin.1, 0.0).compose(&Self::scale(scale.0, scale.1, sz))
    }

    /// `self ∘ inner`: apply `inner` first, then `self`.
    pub fn compose(&self, inner: &Transform) -> Transform {
        let mut out = [[0.0; 4]; 4];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.0[i][k] * inner.0[k][j]).sum();
            }
        }
        Transform(out)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
        }
        let w = m[3][0] * p[0] + m[3][1] * p[1] + m[3][2] * p[2] + m[3][3];
        if w != 1.0 && w != 0.0 {
            out.iter_mut().for_each(|o| *o /= w);
        }
        out
    }

    /// Determinant of the upper-left 3×3 block.
    pub fn linear_determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn is_invertible(&self) -> bool {
        let d = self.linear_determinant();
        d.is_finite() && d.abs() > 1e-12
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePlacement {
    pub cluster_id: String,
    pub transform: Transform,
}

/// One mesh per cluster plus where each instance goes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    meshes: BTreeMap<String, Mesh>,
    placements: Vec<InstancePlacement>,
}

pub fn instance_scene(meshes: BTreeMap<String, Mesh>, placements: Vec<InstancePlacement>) -> Result<Scene> {
    for p in &placements {
        if !meshes.contains_key(&p.cluster_id) {
            return Err(ProcgenError::UnknownCluster(p.cluster_id.clone()));
        }
        if !p.transform.is_invertible() {
            return Err(ProcgenError::SingularTransform(p.cluster_id.clone()));
        }
    }
    Ok(Scene { meshes, placements })
}

impl Scene {
    pub fn meshes(&self) -> &BTreeMap<String, Mesh> {
        &self.meshes
    }

    pub fn placements(&self) -> &[InstancePlacement] {
        &self.placements
    }

    pub fn mesh(&self, cluster_id: &str) -> Option<&Mesh> {
        self.meshes.get(cluster_id)
    }

    /// Swaps a cluster's shared mesh; every placement sees it on the next flatten.
    pub fn replace_mesh(&mut self, cluster_id: &str, mesh: Mesh) -> Result<()> {
        match self.meshes.get_mut(cluster_id) {
            Some(m) => {
                *m = mesh;
                Ok(())
            }
            None => Err(ProcgenError::UnknownCluster(cluster_id.to_string())),
        }
    }

    /// Transformed copy of the shared mesh for every placement, named
    /// `<cluster>_<n>` with `n` counting that cluster's instances.
    pub fn flatten(&self) -> Vec<(String, Mesh)> {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        self.placements
            .iter()
            .map(|p| {
                let n = seen.entry(&p.cluster_id).or_insert(0);
                let name = format!("{}_{}", p.cluster_id, n);
                *n += 1;
                (name, self.meshes[&p.cluster_id].transformed(&p.transform))
            })
            .collect()
    }

    pub fn flattened_vertex_count(&self) -> usize {
        self.placements.iter().map(|p| self.meshes[&p.cluster_id].vertices.len()).sum()
    }
}
