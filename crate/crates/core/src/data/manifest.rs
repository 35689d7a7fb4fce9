//! `path,label,split` manifests pointing at P6 PPM images.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::augment::resize;
use super::ppm::{read_ppm, write_ppm};
use super::{Dataset, LabeledImage};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    path: String,
    label: String,
    split: String,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::data(format!("{}: {e}", path.display()))
}

/// Loads a manifest. Image paths are relative to the manifest's directory;
/// labels are mapped to dense ids in sorted order and images are resized
/// to `image_size`.
pub fn load_manifest(path: impl AsRef<Path>, image_size: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    for required in ["path", "label", "split"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::data(format!(
                "{}: header must contain path,label,split",
                path.display()
            )));
        }
    }
    let rows: Vec<Row> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_error(path, e))?;
    if rows.is_empty() {
        return Err(Error::data(format!("{}: manifest has no rows", path.display())));
    }

    let labels: BTreeSet<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    let class_names: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
    let mut ds = Dataset {
        class_names,
        image_size,
        ..Dataset::default()
    };
    for (line, row) in rows.iter().enumerate() {
        let class_id = ds.class_names.binary_search(&row.label).expect("label collected above");
        let file: PathBuf = base.join(&row.path);
        let pixels = resize(&read_ppm(&file)?, image_size);
        let img = LabeledImage {
            pixels,
            class_id,
            source_id: row.path.clone(),
        };
        match row.split.as_str() {
            "train" => ds.train.push(img),
            "val" => ds.val.push(img),
            other => {
                return Err(Error::data(format!(
                    "{}: row {}: unknown split '{other}' (train|val)",
                    path.display(),
                    line + 2
                )))
            }
        }
    }
    Ok(ds)
}

/// Writes `dataset` as PPM files plus a manifest under `dir`; returns the
/// manifest path.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut writer = csv::Writer::from_path(&manifest).map_err(|e| csv_error(&manifest, e))?;
    let splits = [("train", &dataset.train), ("val", &dataset.val)];
    for (split, images) in splits {
        for (i, img) in images.iter().enumerate() {
            let rel = format!("images/{split}_{i:05}.ppm");
            write_ppm(dir.join(&rel), &img.pixels)?;
            writer
                .serialize(Row {
                    path: rel,
                    label: dataset.class_names[img.class_id].clone(),
                    split: split.to_string(),
                })
                .map_err(|e| csv_error(&manifest, e))?;
        }
    }
    writer.flush()?;
    Ok(manifest)
}
