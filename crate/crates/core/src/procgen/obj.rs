use std::fmt::Write as _;

use super::mesh::Mesh;
use super::scene::Scene;
use super::{ProcgenError, Result};

/// A named group of an OBJ file with its own vertex list.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjObject {
    pub name: String,
    pub mesh: Mesh,
}

fn coord(v: f64) -> f64 {
    // Folds -0 into 0 so output does not depend on the sign of zero.
    v + 0.0
}

fn write_object(out: &mut String, name: &str, mesh: &Mesh, base: usize) {
    writeln!(out, "o {name}").unwrap();
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", coord(v[0]), coord(v[1]), coord(v[2])).unwrap();
    }
    for f in &mesh.faces {
        out.push('f');
        for i in f {
            write!(out, " {}", i + base + 1).unwrap();
        }
        out.push('\n');
    }
}

pub fn export_mesh_obj(mesh: &Mesh, name: &str) -> String {
    let mut out = String::new();
    write_object(&mut out, name, mesh, 0);
    out
}

/// One `o` group per placement with the transformed shared mesh.
pub fn export_obj(scene: &Scene) -> String {
    let mut out = String::new();
    let mut base = 0;
    for (name, mesh) in scene.flatten() {
        write_object(&mut out, &name, &mesh, base);
        base += mesh.vertices.len();
    }
    out
}

/// Reads `o`, `v` and `f` records. Texture and normal references in faces
/// are dropped; other record types are skipped.
pub fn parse_obj(text: &str) -> Result<Vec<ObjObject>> {
    let mut objects: Vec<ObjObject> = Vec::new();
    let mut base = 0;
    let mut total = 0;
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let err = |message: String| ProcgenError::Obj { line, message };
        let mut parts = raw.split_whitespace();
        match parts.next() {
            Some("o") => {
                base = total;
                objects.push(ObjObject {
                    name: parts.collect::<Vec<_>>().join(" "),
                    mesh: Mesh::new(),
                });
            }
            Some("v") => {
                let xyz: Vec<f64> = parts
                    .take(3)
                    .map(|p| p.parse::<f64>().map_err(|e| err(format!("bad coordinate {p:?}: {e}"))))
                    .collect::<Result<_>>()?;
                if xyz.len() != 3 {
                    return Err(err("vertex needs three coordinates".into()));
                }
                current(&mut objects).mesh.vertices.push([xyz[0], xyz[1], xyz[2]]);
                total += 1;
            }
            Some("f") => {
                let mut face = Vec::new();
                for p in parts {
                    let head = p.split('/').next().unwrap_or_default();
                    let idx: i64 = head.parse().map_err(|e| err(format!("bad index {p:?}: {e}")))?;
                    let global = match idx {
                        i if i > 0 => i as usize - 1,
                        i if i < 0 && (-i) as usize <= total => total - (-i) as usize,
                        _ => return Err(err(format!("index {idx} out of range"))),
                    };
                    if global < base || global >= total {
                        return Err(err(format!("index {idx} outside the current object")));
                    }
                    face.push(global - base);
                }
                if face.len() < 3 {
                    return Err(err("face needs at least three vertices".into()));
                }
                current(&mut objects).mesh.faces.push(face);
            }
            _ => {}
        }
    }
    Ok(objects)
}

fn current(objects: &mut Vec<ObjObject>) -> &mut ObjObject {
    if objects.is_empty() {
        objects.push(ObjObject {
            name: "default".into(),
            mesh: Mesh::new(),
        });
    }
    objects.last_mut().expect("non-empty")
}
