use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use super::{Dataset, ManifestRecord, SegSample};
use crate::error::{io_err, Error, Result};

pub fn write_image_png(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("PNG export expects 3 channels, got {c}")));
    }
    let raw: Vec<u8> = image
        .as_standard_layout()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from shape");
    buf.save(path)?;
    Ok(())
}

pub fn write_mask_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let raw = mask.as_standard_layout().iter().copied().collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from shape");
    buf.save(path)?;
    Ok(())
}

pub fn read_image_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb buffer"))
}

/// Read raw 8-bit label indices from a grayscale or palette PNG, without
/// palette expansion.
pub fn read_mask_png(path: &Path) -> Result<Array2<u8>> {
    let fmt = |reason: String| Error::MaskFormat {
        path: path.to_owned(),
        reason,
    };
    let file = File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| fmt(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| fmt("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| fmt(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(fmt(format!("bit depth {:?}, expected 8", info.bit_depth)));
    }
    let stride = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::Indexed => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(fmt(format!("color type {other:?} does not carry label indices"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let labels = (0..h)
        .flat_map(|y| {
            let row = &buf[y * info.line_size..(y + 1) * info.line_size];
            (0..w).map(move |x| row[x * stride])
        })
        .collect();
    Ok(Array2::from_shape_vec((h, w), labels).expect("mask buffer"))
}

fn check_labels(path: &Path, mask: &Array2<u8>, num_classes: usize) -> Result<()> {
    if let Some(((row, col), &value)) = mask.indexed_iter().find(|(_, &v)| usize::from(v) >= num_classes) {
        return Err(Error::LabelOutOfRange {
            path: path.to_owned(),
            row,
            col,
            value,
            num_classes,
        });
    }
    Ok(())
}

fn load_one(id: &str, image_path: &Path, mask_path: &Path, num_classes: usize) -> Result<SegSample> {
    let image = read_image_png(image_path)?;
    let mask = read_mask_png(mask_path)?;
    check_labels(mask_path, &mask, num_classes)?;
    SegSample::new(id, image, mask)
}

/// Pair same-named files from two directories, in lexicographic file-name order.
pub fn load_pairs(image_dir: &Path, mask_dir: &Path, num_classes: usize) -> Result<Dataset> {
    let mut names: Vec<PathBuf> = fs::read_dir(image_dir)
        .map_err(io_err(image_dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(image_dir)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut samples = Vec::with_capacity(names.len());
    let mut manifest = Vec::with_capacity(names.len());
    for image_path in names {
        let file_name = image_path.file_name().expect("listed file");
        let mask_path = mask_dir.join(file_name);
        if !mask_path.is_file() {
            return Err(Error::MissingPair(image_path));
        }
        let id = image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let sample = load_one(&id, &image_path, &mask_path, num_classes)?;
        manifest.push(ManifestRecord {
            id,
            image: image_path.to_string_lossy().into_owned(),
            mask: mask_path.to_string_lossy().into_owned(),
            lesion_fraction: sample.lesion_fraction,
            split: None,
            bin: None,
        });
        samples.push(sample);
    }
    Dataset::with_manifest(samples, manifest)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok(records)
}

/// Write every sample as PNGs at its manifest paths under `dir`, then the
/// manifest itself as `dir/manifest.jsonl`. Returns the manifest path.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    for (s, r) in dataset.samples.iter().zip(&dataset.manifest) {
        let (img, mask) = (dir.join(&r.image), dir.join(&r.mask));
        for p in [&img, &mask] {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
        }
        write_image_png(&img, &s.image)?;
        write_mask_png(&mask, &s.mask)?;
    }
    let path = dir.join("manifest.jsonl");
    write_manifest(&path, &dataset.manifest)?;
    Ok(path)
}

/// Load the samples a manifest points at. Relative paths resolve against the
/// manifest's directory; fractions are recomputed from the masks.
pub fn load_manifest(path: &Path, num_classes: usize) -> Result<Dataset> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = read_manifest(path)?;
    let mut samples = Vec::with_capacity(records.len());
    for r in &mut records {
        let sample = load_one(&r.id, &base.join(&r.image), &base.join(&r.mask), num_classes)?;
        r.lesion_fraction = sample.lesion_fraction;
        samples.push(sample);
    }
    Dataset::with_manifest(samples, records)
}
