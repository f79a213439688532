use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, DatasetError, Result};

#[derive(Debug, Deserialize)]
struct Annotation {
    filename: Option<String>,
    size: Option<VocSize>,
    #[serde(rename = "object", default)]
    objects: Vec<VocObject>,
}

#[derive(Debug, Deserialize)]
struct VocSize {
    width: f64,
    height: f64,
}

#[derive(Debug, Deserialize)]
struct VocObject {
    name: String,
    bndbox: Option<BndBox>,
}

#[derive(Debug, Deserialize)]
struct BndBox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

/// Window bounding box in image pixels; `id` is its position among the
/// file's window objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowBox {
    pub id: usize,
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl WindowBox {
    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    fn check(&self, size: Option<(f64, f64)>) -> Result<()> {
        let bad = |message: String| Err(DatasetError::Bounds { box_id: self.id, message });
        let coords = [self.xmin, self.ymin, self.xmax, self.ymax];
        if coords.iter().any(|v| !v.is_finite()) {
            return bad("non-finite coordinate".into());
        }
        if !(self.xmin < self.xmax && self.ymin < self.ymax) {
            return bad(format!("empty box ({}, {})-({}, {})", self.xmin, self.ymin, self.xmax, self.ymax));
        }
        if let Some((w, h)) = size.filter(|&(w, h)| w > 0.0 && h > 0.0) {
            if self.xmin < 0.0 || self.ymin < 0.0 || self.xmax > w || self.ymax > h {
                return bad(format!("outside the {w}x{h} image"));
            }
        }
        Ok(())
    }
}

/// Window boxes of one LabelImg file.
#[derive(Debug, Clone, PartialEq)]
pub struct VocFile {
    pub filename: Option<String>,
    pub size: Option<(f64, f64)>,
    pub boxes: Vec<WindowBox>,
    /// Objects with a name other than "window".
    pub ignored: usize,
}

pub fn load_voc(xml: &str) -> Result<VocFile> {
    let ann: Annotation = quick_xml::de::from_str(xml).map_err(|e| DatasetError::Xml(e.to_string()))?;
    let size = ann.size.map(|s| (s.width, s.height));
    let mut boxes = Vec::new();
    let mut ignored = 0;
    for obj in ann.objects {
        if !obj.name.trim().eq_ignore_ascii_case("window") {
            log::warn!("ignoring object {:?}", obj.name);
            ignored += 1;
            continue;
        }
        let id = boxes.len();
        let b = obj
            .bndbox
            .ok_or_else(|| DatasetError::Xml(format!("window object {id} has no bndbox")))?;
        let wb = WindowBox {
            id,
            xmin: b.xmin,
            ymin: b.ymin,
            xmax: b.xmax,
            ymax: b.ymax,
        };
        wb.check(size)?;
        boxes.push(wb);
    }
    Ok(VocFile {
        filename: ann.filename,
        size,
        boxes,
        ignored,
    })
}

/// A façade image with its window boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacadeRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<WindowBox>,
}

/// Reads an annotation file and the image it names (resolved next to the
/// XML). Boxes are checked against the real image size.
pub fn load_facade(xml_path: &Path) -> Result<FacadeRecord> {
    let text = std::fs::read_to_string(xml_path).map_err(io_err(xml_path))?;
    let voc = load_voc(&text)?;
    let dir = xml_path.parent().unwrap_or(Path::new("."));
    let image_path: PathBuf = match &voc.filename {
        Some(name) => dir.join(name),
        None => {
            let png = xml_path.with_extension("png");
            if png.exists() {
                png
            } else {
                xml_path.with_extension("jpg")
            }
        }
    };
    if !image_path.exists() {
        return Err(DatasetError::MissingFile(image_path));
    }
    let (width, height) = image::image_dimensions(&image_path).map_err(|e| DatasetError::Image(format!("{}: {e}", image_path.display())))?;
    for b in &voc.boxes {
        b.check(Some((width as f64, height as f64)))?;
    }
    let id = xml_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(FacadeRecord {
        id,
        image_path,
        width,
        height,
        boxes: voc.boxes,
    })
}
