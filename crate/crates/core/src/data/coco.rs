//! COCO-format ingestion (instances + captions JSON).
//!
//! Images are center-cropped to a square and resized; boxes are normalized
//! to the crop and polygons rasterized onto the mask grid by cell-center
//! containment. Records without instances or captions are skipped, as are
//! malformed annotations (with a warning).

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{order_instances, DatasetExample};
use crate::error::{CoreError, Result};
use crate::imageio::Image;
use crate::layout::{BoxSpec, InstanceMask, LayoutSequence};

#[derive(Debug, Clone)]
pub struct CocoConfig {
    /// Mask grid and image side after crop-and-resize.
    pub grid: usize,
    /// Directory holding the image files; without it images are left blank
    /// (enough for layout-only training).
    pub image_dir: Option<PathBuf>,
}

struct ImageRecord {
    id: u64,
    file_name: String,
    width: f64,
    height: f64,
}

struct Annotation {
    category: usize,
    bbox: [f64; 4],
    polygons: Vec<Vec<f64>>,
}

/// Lazily yields examples in image-id order.
pub struct CocoStream {
    config: CocoConfig,
    class_names: Vec<String>,
    images: std::vec::IntoIter<ImageRecord>,
    annotations: HashMap<u64, Vec<Annotation>>,
    captions: HashMap<u64, Vec<String>>,
}

impl CocoStream {
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn as_array<'a>(v: &'a Value, key: &str) -> Result<&'a Vec<Value>> {
    v.get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| CoreError::field(key, "missing array"))
}

fn parse_annotation(a: &Value, category_index: &HashMap<u64, usize>) -> Option<(u64, Annotation)> {
    let image_id = a.get("image_id")?.as_u64()?;
    let category = *category_index.get(&a.get("category_id")?.as_u64()?)?;
    let bbox: Vec<f64> = a
        .get("bbox")?
        .as_array()?
        .iter()
        .map(Value::as_f64)
        .collect::<Option<_>>()?;
    if bbox.len() != 4 || bbox.iter().any(|v| !v.is_finite()) || bbox[2] < 0.0 || bbox[3] < 0.0 {
        return None;
    }
    let polygons = match a.get("segmentation") {
        Some(Value::Array(polys)) => polys
            .iter()
            .map(|p| {
                p.as_array()?
                    .iter()
                    .map(Value::as_f64)
                    .collect::<Option<Vec<f64>>>()
                    .filter(|v| v.len() >= 6 && v.len() % 2 == 0)
            })
            .collect::<Option<Vec<_>>>()?,
        // crowd regions (RLE) carry no per-instance shape: fall back to the box
        Some(Value::Object(_)) | None => Vec::new(),
        _ => return None,
    };
    Some((
        image_id,
        Annotation {
            category,
            bbox: [bbox[0], bbox[1], bbox[2], bbox[3]],
            polygons,
        },
    ))
}

/// Opens a COCO instances file and a captions file.
pub fn load_coco_format(
    instances_path: &Path,
    captions_path: &Path,
    config: CocoConfig,
) -> Result<CocoStream> {
    let instances = read_json(instances_path)?;
    let captions_doc = read_json(captions_path)?;

    // Category ids are sparse in COCO; map them to contiguous labels by id.
    let mut categories: BTreeMap<u64, String> = BTreeMap::new();
    for c in as_array(&instances, "categories")? {
        let id = c.get("id").and_then(Value::as_u64);
        let name = c.get("name").and_then(Value::as_str);
        match (id, name) {
            (Some(id), Some(name)) => {
                categories.insert(id, name.to_string());
            }
            _ => log::warn!("skipping malformed category {c}"),
        }
    }
    let category_index: HashMap<u64, usize> =
        categories.keys().enumerate().map(|(i, &id)| (id, i)).collect();
    let class_names = categories.into_values().collect();

    let mut images = Vec::new();
    for im in as_array(&instances, "images")? {
        let rec = (|| {
            Some(ImageRecord {
                id: im.get("id")?.as_u64()?,
                file_name: im.get("file_name")?.as_str()?.to_string(),
                width: im.get("width")?.as_f64()?,
                height: im.get("height")?.as_f64()?,
            })
        })();
        match rec {
            Some(r) if r.width > 0.0 && r.height > 0.0 => images.push(r),
            _ => log::warn!("skipping malformed image record"),
        }
    }
    images.sort_by_key(|r| r.id);

    let mut annotations: HashMap<u64, Vec<Annotation>> = HashMap::new();
    for a in as_array(&instances, "annotations")? {
        match parse_annotation(a, &category_index) {
            Some((image_id, ann)) => annotations.entry(image_id).or_default().push(ann),
            None => log::warn!("skipping malformed annotation {}", a.get("id").unwrap_or(&Value::Null)),
        }
    }

    let mut captions: HashMap<u64, Vec<String>> = HashMap::new();
    for c in as_array(&captions_doc, "annotations")? {
        match (
            c.get("image_id").and_then(Value::as_u64),
            c.get("caption").and_then(Value::as_str),
        ) {
            (Some(id), Some(text)) => captions.entry(id).or_default().push(text.trim().to_string()),
            _ => log::warn!("skipping malformed caption record"),
        }
    }

    Ok(CocoStream {
        config,
        class_names,
        images: images.into_iter(),
        annotations,
        captions,
    })
}

/// Even-odd point-in-polygon test on a flat `[x0, y0, x1, y1, ...]` list.
fn point_in_polygon(poly: &[f64], px: f64, py: f64) -> bool {
    let n = poly.len() / 2;
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (poly[2 * i], poly[2 * i + 1]);
        let (xj, yj) = (poly[2 * j], poly[2 * j + 1]);
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

impl CocoStream {
    fn build(&self, rec: &ImageRecord) -> Option<DatasetExample> {
        let captions = match self.captions.get(&rec.id) {
            Some(c) if !c.is_empty() => c.clone(),
            _ => {
                log::warn!("image {}: no caption, skipped", rec.id);
                return None;
            }
        };
        let anns = self.annotations.get(&rec.id)?;
        let side = rec.width.min(rec.height);
        let (ox, oy) = ((rec.width - side) / 2.0, (rec.height - side) / 2.0);
        let g = self.config.grid;

        let mut boxes = Vec::new();
        let mut masks = Vec::new();
        for a in anns {
            let [bx, by, bw, bh] = a.bbox;
            let x0 = ((bx - ox) / side).clamp(0.0, 1.0);
            let y0 = ((by - oy) / side).clamp(0.0, 1.0);
            let x1 = ((bx + bw - ox) / side).clamp(0.0, 1.0);
            let y1 = ((by + bh - oy) / side).clamp(0.0, 1.0);
            if x1 <= x0 || y1 <= y0 {
                continue; // cropped away
            }
            let spec = BoxSpec::new(x0, y0, x1 - x0, y1 - y0, a.category).clamped();
            let mut mask = InstanceMask::zeros(g, g);
            for i in 0..g {
                let py = oy + (i as f64 + 0.5) / g as f64 * side;
                for j in 0..g {
                    let px = ox + (j as f64 + 0.5) / g as f64 * side;
                    let hit = if a.polygons.is_empty() {
                        px >= bx && px < bx + bw && py >= by && py < by + bh
                    } else {
                        a.polygons.iter().any(|p| point_in_polygon(p, px, py))
                    };
                    if hit {
                        mask.data[i * g + j] = 1.0;
                    }
                }
            }
            boxes.push(spec);
            masks.push(mask);
        }
        if boxes.is_empty() {
            return None;
        }

        let image = match &self.config.image_dir {
            Some(dir) => match Image::load_center_cropped(&dir.join(&rec.file_name), g) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("image {}: {e}, skipped", rec.id);
                    return None;
                }
            },
            None => Image::filled(g, g, [0.0; 3]),
        };
        let layout = LayoutSequence::new(self.class_names.clone(), boxes);
        let (layout, instance_masks) = order_instances(&layout, &masks).ok()?;
        Some(DatasetExample {
            id: rec.id,
            image,
            captions,
            layout,
            instance_masks,
        })
    }
}

impl Iterator for CocoStream {
    type Item = DatasetExample;

    fn next(&mut self) -> Option<DatasetExample> {
        loop {
            let rec = self.images.next()?;
            if let Some(ex) = self.build(&rec) {
                return Some(ex);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path) -> (PathBuf, PathBuf) {
        let instances = serde_json::json!({
            "images": [
                {"id": 1, "file_name": "a.jpg", "width": 100, "height": 100},
                {"id": 2, "file_name": "b.jpg", "width": 100, "height": 100},
                {"id": 3, "file_name": "c.jpg", "width": 100, "height": 100},
                {"id": 4, "file_name": "d.jpg", "width": 200, "height": 100}
            ],
            "categories": [{"id": 18, "name": "dog"}, {"id": 3, "name": "car"}],
            "annotations": [
                {"id": 10, "image_id": 1, "category_id": 18, "bbox": [70, 10, 20, 20],
                 "segmentation": [[70, 10, 90, 10, 90, 30, 70, 30]]},
                {"id": 11, "image_id": 1, "category_id": 3, "bbox": [10, 10, 20, 20],
                 "segmentation": [[10, 10, 30, 10, 30, 30, 10, 30]]},
                {"id": 12, "image_id": 3, "category_id": 3, "bbox": [0, 0, 100, 100],
                 "segmentation": [[0, 0, 100, 0, 100, 100, 0, 100]]},
                {"id": 13, "image_id": 3, "category_id": 99, "bbox": [0, 0, 1, 1]},
                {"id": 14, "image_id": 4, "category_id": 3, "bbox": [0, 0, 40, 40],
                 "segmentation": [[0, 0, 40, 0, 40, 40, 0, 40]]},
                {"id": 15, "image_id": 4, "category_id": 3, "bbox": [100, 0, 20, 100],
                 "segmentation": [[100, 0, 120, 0, 120, 100, 100, 100]]}
            ]
        });
        let captions = serde_json::json!({
            "annotations": [
                {"image_id": 1, "caption": "a car and a dog"},
                {"image_id": 2, "caption": "nothing here"},
                {"image_id": 3, "caption": "a big car"},
                {"image_id": 4, "caption": "a wide scene"}
            ]
        });
        let ip = dir.join("instances.json");
        let cp = dir.join("captions.json");
        std::fs::write(&ip, instances.to_string()).unwrap();
        std::fs::write(&cp, captions.to_string()).unwrap();
        (ip, cp)
    }

    #[test]
    fn loads_orders_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, cp) = write_fixture(dir.path());
        let stream = load_coco_format(
            &ip,
            &cp,
            CocoConfig {
                grid: 10,
                image_dir: None,
            },
        )
        .unwrap();
        assert_eq!(stream.class_names(), &["car".to_string(), "dog".to_string()]);
        let all: Vec<_> = stream.collect();
        // image 2 has no instances
        assert_eq!(all.iter().map(|e| e.id).collect::<Vec<_>>(), vec![1, 3, 4]);

        let first = &all[0];
        assert!((first.layout.boxes[0].x - 0.1).abs() < 1e-12);
        assert!((first.layout.boxes[1].x - 0.7).abs() < 1e-12);
        assert_eq!(first.layout.boxes[0].label, 0);
        assert_eq!(first.layout.boxes[1].label, 1);

        // whole-image polygon
        assert!(all[1].instance_masks[0].data.iter().all(|&v| v == 1.0));
        assert_eq!(all[1].num_objects(), 1);

        // 200×100 image: crop is x ∈ [50, 150); the first box is cropped away
        assert_eq!(all[2].num_objects(), 1);
        let b = all[2].layout.boxes[0];
        assert!((b.x - 0.5).abs() < 1e-12 && (b.w - 0.2).abs() < 1e-12);
    }

    #[test]
    fn polygon_containment() {
        let tri = [0.0, 0.0, 10.0, 0.0, 0.0, 10.0];
        assert!(point_in_polygon(&tri, 1.0, 1.0));
        assert!(!point_in_polygon(&tri, 9.0, 9.0));
    }
}
