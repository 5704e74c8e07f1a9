use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use std::io::{Read, Write};
use std::path::Path;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))
}

/// Returns the dimension sizes and the payload after the header.
fn parse<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::Format(format!(
            "{}: magic 0x{found:08x}, expected 0x{magic:08x}",
            path.display()
        )));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{}: header promises {expected} bytes, file has {}",
            path.display(),
            payload.len()
        )));
    }
    Ok((dims, payload))
}

/// Loads an IDX image/label pair (plain or gzip-compressed, detected from
/// the content). Pixels are scaled to `[0, 1]`; the class count is
/// `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = read_maybe_gz(ip)?;
    let label_bytes = read_maybe_gz(lp)?;
    let (idims, pixels) = parse(&image_bytes, IMAGES_MAGIC, ip)?;
    let (ldims, labels) = parse(&label_bytes, LABELS_MAGIC, lp)?;
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    if n != ldims[0] {
        return Err(Error::Format(format!("{n} images but {} labels", ldims[0])));
    }
    if n == 0 {
        return Err(Error::Format(format!("{}: no samples", ip.display())));
    }
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, labels, n_classes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a single-channel dataset as IDX (gzip when the path ends in
/// `.gz`). Pixels are rounded from `[0, 1]` back to bytes.
pub fn write_idx(dataset: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let [c, h, w] = dataset.sample_shape();
    if c != 1 {
        return Err(Error::InvalidArgument(format!("IDX images need 1 channel, got {c}")));
    }
    if dataset.n_classes() > 256 {
        return Err(Error::InvalidArgument("IDX labels are single bytes".into()));
    }
    let n = dataset.len();
    let mut img = Vec::with_capacity(16 + n * h * w);
    for v in [IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        img.extend(v.to_be_bytes());
    }
    img.extend(
        dataset
            .images()
            .data()
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lab = Vec::with_capacity(8 + n);
    for v in [LABELS_MAGIC, n as u32] {
        lab.extend(v.to_be_bytes());
    }
    lab.extend(dataset.labels().iter().map(|&l| l as u8));
    write_bytes(images_path.as_ref(), &img)?;
    write_bytes(labels_path.as_ref(), &lab)
}
