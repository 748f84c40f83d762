use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};

use super::{Dataset, Image, Sample};
use crate::error::{Error, Result};
use crate::N_CLASSES;

const HEADER: [&str; 4] = ["id", "frontal_path", "lateral_path", "label"];
const SCORE_COLUMN: &str = "score";

/// Reads a `id,frontal_path,lateral_path,label[,score]` manifest. Image paths
/// are resolved relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let columns: Vec<&str> = headers.iter().collect();
    let has_score = match columns.as_slice() {
        [a, b, c, d] if [*a, *b, *c, *d] == HEADER => false,
        [a, b, c, d, e] if [*a, *b, *c, *d] == HEADER && *e == SCORE_COLUMN => true,
        _ => {
            return Err(Error::Manifest(format!(
                "expected header `{}[,{SCORE_COLUMN}]`, found `{}`",
                HEADER.join(","),
                columns.join(",")
            )))
        }
    };

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let field = |k: usize| record.get(k).unwrap_or("");
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(Error::Manifest(format!("row {row}: empty id")));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId { row, id });
        }
        let label = match field(3).parse::<usize>() {
            Ok(l) if l < N_CLASSES => l,
            _ => {
                return Err(Error::LabelDomain {
                    row,
                    label: field(3).to_string(),
                })
            }
        };
        let score = if has_score && !field(4).is_empty() {
            let s = field(4)
                .parse::<f64>()
                .map_err(|_| Error::Manifest(format!("row {row}: score `{}` is not a number", field(4))))?;
            Some(s)
        } else {
            None
        };
        let frontal = read_view(&id, "frontal", &base.join(field(1)))?;
        let lateral = read_view(&id, "lateral", &base.join(field(2)))?;
        samples.push(Sample {
            id,
            frontal,
            lateral,
            label,
            score,
        });
    }
    Dataset::new(samples)
}

fn read_view(id: &str, view: &str, path: &Path) -> Result<Image> {
    if !path.is_file() {
        return Err(Error::MissingView {
            id: id.to_string(),
            view: view.to_string(),
            path: path.to_path_buf(),
        });
    }
    let decoded = image::open(path).map_err(|e| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let pixels: Vec<f64> = match decoded {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
        other => other
            .into_luma16()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 65535.0)
            .collect(),
    };
    Image::new(height, width, pixels)
}

fn write_png16(image: &Image, path: &Path) -> Result<()> {
    let raw: Vec<u16> = image
        .pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(image.width as u32, image.height as u32, raw)
        .ok_or_else(|| Error::Dataset("image buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes 16-bit PNGs under `dir/images/` and `dir/manifest.csv`, returning
/// the manifest path. Intensities on the 16-bit grid survive a reload
/// exactly.
pub fn save_manifest(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir)?;
    let manifest = dir.join("manifest.csv");
    let with_score = dataset.samples().iter().any(|s| s.score.is_some());
    let mut writer = csv::Writer::from_path(&manifest)?;
    if with_score {
        writer.write_record(HEADER.iter().chain(&[SCORE_COLUMN]))?;
    } else {
        writer.write_record(HEADER)?;
    }
    for (row, s) in dataset.samples().iter().enumerate() {
        let frontal = format!("images/{row:05}_frontal.png");
        let lateral = format!("images/{row:05}_lateral.png");
        write_png16(&s.frontal, &dir.join(&frontal))?;
        write_png16(&s.lateral, &dir.join(&lateral))?;
        let label = s.label.to_string();
        let mut record = vec![s.id.as_str(), &frontal, &lateral, &label];
        let score = s.score.map(|v| v.to_string()).unwrap_or_default();
        if with_score {
            record.push(&score);
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(manifest)
}
