//! On-disk layout for a dataset directory: per example `NNNNNN.png` holds the
//! image and `NNNNNN.json` the captions, layout and run-length-encoded masks.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DatasetExample;
use crate::error::{CoreError, Result};
use crate::imageio::Image;
use crate::layout::{LayoutSequence, DEFAULT_THRESHOLD};
use crate::rle::Rle;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: u64,
    pub captions: Vec<String>,
    pub layout: LayoutSequence,
    pub masks: Vec<Rle>,
}

impl ExampleRecord {
    pub fn from_example(ex: &DatasetExample) -> Self {
        ExampleRecord {
            id: ex.id,
            captions: ex.captions.clone(),
            layout: ex.layout.clone(),
            masks: ex
                .instance_masks
                .iter()
                .map(|m| Rle::from_mask(m, DEFAULT_THRESHOLD))
                .collect(),
        }
    }
}

fn stem(id: u64) -> String {
    format!("{id:06}")
}

/// Writes one example; returns the `(png, json)` paths.
pub fn write_example(dir: &Path, ex: &DatasetExample) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let png = dir.join(format!("{}.png", stem(ex.id)));
    let json = dir.join(format!("{}.json", stem(ex.id)));
    fs::write(&png, ex.image.to_png()?)?;
    let record = ExampleRecord::from_example(ex);
    fs::write(&json, serde_json::to_string(&record)?)?;
    Ok((png, json))
}

pub fn read_example(json_path: &Path) -> Result<DatasetExample> {
    let record: ExampleRecord = serde_json::from_str(&fs::read_to_string(json_path)?)?;
    record.layout.validate()?;
    if record.masks.len() != record.layout.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{}: {} masks for {} boxes",
            json_path.display(),
            record.masks.len(),
            record.layout.len()
        )));
    }
    let png = json_path.with_extension("png");
    let image = Image::from_png(&fs::read(&png)?)?;
    let instance_masks = record
        .masks
        .iter()
        .map(Rle::to_mask)
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetExample {
        id: record.id,
        image,
        captions: record.captions,
        layout: record.layout,
        instance_masks,
    })
}

/// Reads every example in `dir`, sorted by id.
pub fn read_dataset(dir: &Path) -> Result<Vec<DatasetExample>> {
    let mut jsons: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    jsons.sort();
    jsons.iter().map(|p| read_example(p)).collect()
}
