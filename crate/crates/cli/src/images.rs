//! PPM ingestion and PNG output.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::{ImageFormat, ImageReader, RgbImage};
use mae_core::data::PackedDataset;
use mae_core::viz::Raster;
use mae_core::{Error, Result};

fn data_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// `<file name> <class index>` per line; blank lines and `#` comments are
/// skipped.
pub fn read_labels(path: &Path) -> Result<HashMap<String, u32>> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let mut out = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || data_err(path, format!("line {}: expected `<file> <label>`, got `{raw}`", i + 1));
        let mut parts = line.split_whitespace();
        let (Some(name), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let label: u32 = label.parse().map_err(|_| bad())?;
        if out.insert(name.to_string(), label).is_some() {
            return Err(data_err(path, format!("line {}: `{name}` is labelled twice", i + 1)));
        }
    }
    Ok(out)
}

/// Packs every `.ppm` file of `dir` in file-name order.
pub fn pack_dir(dir: &Path, labels: &Path, classes: Option<usize>) -> Result<PackedDataset> {
    let labels = read_labels(labels)?;
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| data_err(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| data_err(dir, e)))
        .collect::<Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")));
    files.sort();

    let mut decoded = Vec::with_capacity(files.len());
    for path in &files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let &label = labels
            .get(name)
            .ok_or_else(|| data_err(path, "no entry in the labels file"))?;
        let img = ImageReader::open(path)
            .map_err(|e| data_err(path, e))?
            .with_guessed_format()
            .map_err(|e| data_err(path, e))?
            .decode()
            .map_err(|e| data_err(path, e))?
            .to_rgb8();
        decoded.push((path, label, img));
    }
    let n_classes = classes.unwrap_or_else(|| decoded.iter().map(|d| d.1 as usize + 1).max().unwrap_or(1));
    let (w, h) = decoded.first().map(|d| d.2.dimensions()).unwrap_or((0, 0));
    let mut ds = PackedDataset::new(h as usize, w as usize, 3, n_classes);
    for (path, label, img) in decoded {
        if img.dimensions() != (w, h) {
            let (iw, ih) = img.dimensions();
            return Err(data_err(path, format!("image is {iw}x{ih}, expected {w}x{h} like the first file")));
        }
        ds.push(label, img.as_raw()).map_err(|e| data_err(path, e))?;
    }
    Ok(ds)
}

pub fn write_png(r: &Raster, path: &Path) -> Result<()> {
    let img = RgbImage::from_raw(r.width as u32, r.height as u32, r.rgb.clone())
        .ok_or_else(|| Error::Invalid("raster size does not match its pixel buffer".into()))?;
    img.save_with_format(path, ImageFormat::Png).map_err(|e| data_err(path, e))
}
