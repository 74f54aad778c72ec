//! 8-bit binary PGM (P5) images and the dataset directory layout.
//!
//! A dataset directory holds `img_{index:05}.pgm` files and a `labels.csv`
//! with header `filename,label,split`.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps `[0, 1]` to `0..=255` with rounding; values outside are clamped.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(img)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Decodes a P5 image with maxval 255 into a `[1, H, W]` tensor in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    let magic = next_token(bytes, &mut pos).ok_or_else(|| Error::Image("empty file".into()))?;
    if magic != b"P5" {
        return Err(Error::Image("not a binary PGM (P5)".into()));
    }
    for f in fields.iter_mut() {
        let tok = next_token(bytes, &mut pos).ok_or_else(|| Error::Image("truncated header".into()))?;
        *f = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image("malformed header field".into()))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Image(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Image("truncated raster".into()))?;
    let data = raster.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![1, h, w], data)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

fn plane_dims(img: &Tensor) -> Result<(usize, usize)> {
    match *img.shape() {
        [1, h, w] | [h, w] => Ok((h, w)),
        ref s => Err(Error::Image(format!("expected a single-channel image, got {s:?}"))),
    }
}

pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm(img)?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&std::fs::read(path)?)
}

pub fn image_filename(index: usize) -> String {
    format!("img_{index:05}.pgm")
}

/// Writes every image of `train` and `test` plus `labels.csv`. File indices
/// are the samples' original dataset ids.
pub fn write_dataset_dir(dir: &Path, train: &LabeledDataset, test: &LabeledDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rows: Vec<(usize, usize, Split, &Tensor)> = Vec::new();
    for ds in [train, test] {
        for i in 0..ds.len() {
            rows.push((ds.ids[i], ds.labels[i], ds.split, &ds.images[i]));
        }
    }
    rows.sort_by_key(|r| r.0);
    let mut csv = String::from("filename,label,split\n");
    for (id, label, split, img) in rows {
        let name = image_filename(id);
        write_pgm(&dir.join(&name), img)?;
        writeln!(csv, "{name},{label},{}", split.as_str()).unwrap();
    }
    std::fs::write(dir.join("labels.csv"), csv)?;
    Ok(())
}

/// Reads a dataset directory back as `(train, test)`.
pub fn read_dataset_dir(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let text = std::fs::read_to_string(dir.join("labels.csv"))?;
    let mut lines = text.lines();
    if lines.next() != Some("filename,label,split") {
        return Err(Error::Image("labels.csv: unexpected header".into()));
    }
    let mut parts: [Vec<(usize, usize, Tensor)>; 2] = [Vec::new(), Vec::new()];
    let mut num_classes = 0;
    for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Image(format!("labels.csv line {}: malformed row", ln + 2));
        let mut f = line.split(',');
        let (name, label, split) = (f.next().ok_or_else(bad)?, f.next().ok_or_else(bad)?, f.next().ok_or_else(bad)?);
        let label: usize = label.parse().map_err(|_| bad())?;
        let id: usize = name
            .strip_prefix("img_")
            .and_then(|s| s.strip_suffix(".pgm"))
            .and_then(|s| s.parse().ok())
            .ok_or_else(bad)?;
        let slot = match split {
            "train" => 0,
            "test" => 1,
            _ => return Err(bad()),
        };
        num_classes = num_classes.max(label + 1);
        parts[slot].push((id, label, read_pgm(&dir.join(name))?));
    }
    let build = |rows: Vec<(usize, usize, Tensor)>, split| {
        let mut ds = LabeledDataset {
            images: Vec::with_capacity(rows.len()),
            labels: Vec::with_capacity(rows.len()),
            ids: Vec::with_capacity(rows.len()),
            split,
            num_classes,
        };
        for (id, label, img) in rows {
            ds.ids.push(id);
            ds.labels.push(label);
            ds.images.push(img);
        }
        ds
    };
    let [train, test] = parts;
    if train.is_empty() {
        return Err(Error::Image("dataset directory has no train samples".into()));
    }
    Ok((build(train, Split::Train), build(test, Split::Test)))
}
