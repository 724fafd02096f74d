use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{resize, FilterType};
use ndarray::Array4;
use serde::Deserialize;

use super::Dataset;
use crate::error::{Error, Result};

const EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

fn ingestion(path: &Path, message: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

#[derive(Deserialize)]
struct DomainRow {
    filename: String,
    domain: String,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| ingestion(dir, e.to_string()))? {
        out.push(entry.map_err(|e| ingestion(dir, e.to_string()))?.path());
    }
    out.sort();
    Ok(out)
}

/// Load `<root>/<class>/*.{png,ppm,pgm,pnm}` as RGB images resized
/// (nearest neighbour) to `image_size`.
///
/// Classes are numbered in lexicographic order. An optional `domains.csv`
/// with header `filename,domain` tags every file, matched either by bare
/// file name or by `class/file`; domains are numbered lexicographically.
pub fn load_folder_dataset(root: &Path, image_size: usize) -> Result<Dataset> {
    if image_size == 0 {
        return Err(Error::config("model.image_size", "must be positive"));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(ingestion(root, "no class directories"));
    }

    let mut files = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let images: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        if images.is_empty() {
            return Err(ingestion(dir, "class directory contains no images"));
        }
        files.extend(images.into_iter().map(|p| (p, label)));
    }

    let mut images = Array4::zeros((files.len(), 3, image_size, image_size));
    for (i, (path, _)) in files.iter().enumerate() {
        let rgb = image::open(path).map_err(|e| ingestion(path, e.to_string()))?.to_rgb8();
        let rgb = resize(&rgb, image_size as u32, image_size as u32, FilterType::Nearest);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                images[[i, c, y as usize, x as usize]] = px[c] as f64 / 255.0;
            }
        }
    }

    let csv_path = root.join("domains.csv");
    let domains = if csv_path.exists() {
        let mut reader = csv::Reader::from_path(&csv_path).map_err(|e| ingestion(&csv_path, e.to_string()))?;
        let mut table = BTreeMap::new();
        for row in reader.deserialize::<DomainRow>() {
            let row = row.map_err(|e| ingestion(&csv_path, e.to_string()))?;
            table.insert(row.filename, row.domain);
        }
        let names: BTreeSet<&String> = table.values().collect();
        let index: BTreeMap<&String, usize> = names.into_iter().enumerate().map(|(i, n)| (n, i)).collect();
        let mut tags = Vec::with_capacity(files.len());
        for (path, label) in &files {
            let file = path.file_name().and_then(|f| f.to_str()).unwrap_or_default();
            let class = class_dirs[*label]
                .file_name()
                .and_then(|f| f.to_str())
                .unwrap_or_default();
            let domain = table
                .get(&format!("{class}/{file}"))
                .or_else(|| table.get(file))
                .ok_or_else(|| ingestion(&csv_path, format!("no domain listed for {class}/{file}")))?;
            tags.push(index[domain]);
        }
        Some(tags)
    } else {
        None
    };

    let labels = files.iter().map(|(_, l)| *l).collect();
    Dataset::new(images, labels, domains, class_dirs.len())
}
