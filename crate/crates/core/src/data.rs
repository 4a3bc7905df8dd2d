//! Dataset ingestion (IDX image/label files, optionally gzipped) and
//! deterministic synthetic generators, so everything here runs without
//! downloading anything.
//!
//! Two generators are provided: `synth_dataset` builds a two-class
//! stripes-vs-checkerboard set that is separable by construction, and
//! `glyph_digits_dataset` renders jittered 5×7 digit glyphs onto 28×28
//! canvases as a ten-class stand-in for handwritten-digit data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::nnet::Image;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// A named set of same-shape images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub name: String,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Keep only the first `n` images.
    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn read_be_u32(r: &mut dyn Read, path: &Path) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| format_err(path, "file is truncated"))?;
    Ok(u32::from_be_bytes(b))
}

/// Parse an IDX image/label file pair into a dataset, scaling pixel bytes
/// to `[0, 1]` as `byte / 255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let mut ir = open_maybe_gz(images_path)?;
    let magic = read_be_u32(ir.as_mut(), images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            images_path,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = read_be_u32(ir.as_mut(), images_path)? as usize;
    let height = read_be_u32(ir.as_mut(), images_path)? as usize;
    let width = read_be_u32(ir.as_mut(), images_path)? as usize;
    if height == 0 || width == 0 {
        return Err(format_err(images_path, "zero image dimensions"));
    }
    let mut pixel_bytes = vec![0u8; count * height * width];
    ir.read_exact(&mut pixel_bytes)
        .map_err(|_| format_err(images_path, "file is truncated"))?;
    if ir.read(&mut [0u8; 1]).map_err(|e| io_err(images_path, e))? != 0 {
        return Err(format_err(images_path, "trailing bytes after pixel data"));
    }

    let mut lr = open_maybe_gz(labels_path)?;
    let magic = read_be_u32(lr.as_mut(), labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            labels_path,
            format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let label_count = read_be_u32(lr.as_mut(), labels_path)? as usize;
    if label_count != count {
        return Err(format_err(
            labels_path,
            format!("label count {label_count} does not match image count {count}"),
        ));
    }
    let mut labels = vec![0u8; label_count];
    lr.read_exact(&mut labels)
        .map_err(|_| format_err(labels_path, "file is truncated"))?;
    if lr.read(&mut [0u8; 1]).map_err(|e| io_err(labels_path, e))? != 0 {
        return Err(format_err(labels_path, "trailing bytes after label data"));
    }

    let mut images = Vec::with_capacity(count);
    for (chunk, &label) in pixel_bytes.chunks_exact(height * width).zip(&labels) {
        let pixels: Vec<f64> = chunk.iter().map(|&b| f64::from(b) / 255.0).collect();
        let img = Image::new(1, height, width, pixels, label as usize)
            .map_err(|e| format_err(images_path, e.to_string()))?;
        images.push(img);
    }
    let num_classes = images.iter().map(|i| i.label + 1).max().unwrap_or(1).max(2);
    Ok(Dataset {
        images,
        name: images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".to_string()),
        num_classes,
    })
}

/// Write images/labels back out as an IDX pair (gzipped when the path ends
/// in `.gz`). Pixels are quantized as `round(p · 255)`, so a dataset read
/// with [`load_idx`] round-trips bit-exactly. Mostly a fixture helper.
pub fn write_idx(
    images: &[Image],
    images_path: &Path,
    labels_path: &Path,
) -> Result<(), DataError> {
    if images.is_empty() {
        return Err(DataError::InvalidInput("no images to write".to_string()));
    }
    let (c, h, w) = images[0].shape();
    if c != 1 {
        return Err(DataError::InvalidInput(
            "idx export supports single-channel images only".to_string(),
        ));
    }
    if images.iter().any(|img| img.shape() != (c, h, w)) {
        return Err(DataError::InvalidInput(
            "images differ in shape".to_string(),
        ));
    }

    let write_all = |path: &Path, payload: &[u8]| -> Result<(), DataError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut out: Box<dyn Write> = if path.extension().is_some_and(|e| e == "gz") {
            Box::new(GzEncoder::new(
                BufWriter::new(file),
                flate2::Compression::default(),
            ))
        } else {
            Box::new(BufWriter::new(file))
        };
        out.write_all(payload).map_err(|e| io_err(path, e))?;
        out.flush().map_err(|e| io_err(path, e))
    };

    let mut ibuf = Vec::with_capacity(16 + images.len() * h * w);
    ibuf.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    ibuf.extend_from_slice(&(images.len() as u32).to_be_bytes());
    ibuf.extend_from_slice(&(h as u32).to_be_bytes());
    ibuf.extend_from_slice(&(w as u32).to_be_bytes());
    for img in images {
        for &p in &img.pixels {
            ibuf.push((p * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    write_all(images_path, &ibuf)?;

    let mut lbuf = Vec::with_capacity(8 + images.len());
    lbuf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbuf.extend_from_slice(&(images.len() as u32).to_be_bytes());
    for img in images {
        if img.label > 255 {
            return Err(DataError::InvalidInput(
                "label exceeds u8 range".to_string(),
            ));
        }
        lbuf.push(img.label as u8);
    }
    write_all(labels_path, &lbuf)
}

/// Two-class texture dataset: vertical stripes (class 0) vs checkerboard
/// (class 1), with seeded per-pixel noise of amplitude 0.1, clipped to
/// `[0, 1]`. Classes alternate by index, so the balance is exactly
/// `⌈n/2⌉ / ⌊n/2⌋`.
pub fn synth_dataset(seed: u64, n: usize, side: usize) -> Result<Dataset, DataError> {
    if n < 2 {
        return Err(DataError::InvalidInput(
            "need at least 2 images".to_string(),
        ));
    }
    if side < 8 {
        return Err(DataError::InvalidInput("side must be >= 8".to_string()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let mut pixels = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                let base = if label == 0 {
                    if x % 2 == 0 {
                        0.8
                    } else {
                        0.2
                    }
                } else if (x + y) % 2 == 0 {
                    0.8
                } else {
                    0.2
                };
                let noise = rng.random::<f64>() * 0.2 - 0.1;
                pixels.push((base + noise).clamp(0.0, 1.0));
            }
        }
        images.push(Image::new(1, side, side, pixels, label).expect("generated pixels are valid"));
    }
    Ok(Dataset {
        images,
        name: format!("synth-{side}x{side}"),
        num_classes: 2,
    })
}

/// 5×7 bitmap glyphs for the digits 0–9, row-major, 1 = stroke.
const DIGIT_GLYPHS: [[u8; 35]; 10] = [
    // 0
    [
        0, 1, 1, 1, 0, 1, 0, 0, 0, 1, 1, 0, 0, 1, 1, 1, 0, 1, 0, 1, 1, 1, 0, 0, 1, 1, 0, 0, 0, 1,
        0, 1, 1, 1, 0,
    ],
    // 1
    [
        0, 0, 1, 0, 0, 0, 1, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0,
        0, 1, 1, 1, 0,
    ],
    // 2
    [
        0, 1, 1, 1, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0,
        1, 1, 1, 1, 1,
    ],
    // 3
    [
        1, 1, 1, 1, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 1,
        0, 1, 1, 1, 0,
    ],
    // 4
    [
        0, 0, 0, 1, 0, 0, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 0, 0, 1, 0, 1, 1, 1, 1, 1, 0, 0, 0, 1, 0,
        0, 0, 0, 1, 0,
    ],
    // 5
    [
        1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 1, 0, 0, 0, 1,
        0, 1, 1, 1, 0,
    ],
    // 6
    [
        0, 0, 1, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 1, 1, 1, 1, 0, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1,
        0, 1, 1, 1, 0,
    ],
    // 7
    [
        1, 1, 1, 1, 1, 0, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0,
        0, 1, 0, 0, 0,
    ],
    // 8
    [
        0, 1, 1, 1, 0, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0, 1, 1, 1, 0, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1,
        0, 1, 1, 1, 0,
    ],
    // 9
    [
        0, 1, 1, 1, 0, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0, 1, 1, 1, 1, 0, 0, 0, 0, 1, 0, 0, 0, 1, 0,
        0, 1, 1, 0, 0,
    ],
];

/// Ten-class 28×28 digit dataset rendered from jittered glyph bitmaps:
/// a deterministic, zero-download stand-in for handwritten-digit data.
/// Labels cycle 0–9 by index. Position, stroke thickness, and — most
/// importantly — per-image background and stroke brightness all vary under
/// the seed, so a classifier has to key on glyph shape rather than on
/// absolute intensity.
pub fn glyph_digits_dataset(seed: u64, n: usize) -> Result<Dataset, DataError> {
    if n < 2 {
        return Err(DataError::InvalidInput(
            "need at least 2 images".to_string(),
        ));
    }
    const SIDE: usize = 28;
    const SCALE: usize = 3;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 10;
        let glyph = &DIGIT_GLYPHS[label];
        let x0 = 3 + rng.random_range(0..7); // glyph is 15 wide -> fits
        let y0 = 1 + rng.random_range(0..6); // glyph is 21 tall -> fits
        let background = rng.random::<f64>() * 0.25;
        let stroke = 0.55 + rng.random::<f64>() * 0.45;
        let thicken = rng.random::<f64>() < 0.3;
        let mut pixels = vec![background; SIDE * SIDE];
        for gy in 0..7 {
            for gx in 0..5 {
                if glyph[gy * 5 + gx] == 0 {
                    continue;
                }
                for sy in 0..SCALE {
                    for sx in 0..SCALE + usize::from(thicken) {
                        let py = y0 + gy * SCALE + sy;
                        let px = x0 + gx * SCALE + sx;
                        if py < SIDE && px < SIDE {
                            pixels[py * SIDE + px] = stroke;
                        }
                    }
                }
            }
        }
        for p in &mut pixels {
            let noise = rng.random::<f64>() * 0.12 - 0.06;
            *p = (*p + noise).clamp(0.0, 1.0);
        }
        images.push(Image::new(1, SIDE, SIDE, pixels, label).expect("generated pixels are valid"));
    }
    Ok(Dataset {
        images,
        name: "glyph-digits".to_string(),
        num_classes: 10,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::nnet::{train, Layer, Model, TrainConfig};

    #[test]
    fn idx_fixture_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = vec![
            Image::new(
                1,
                3,
                3,
                vec![0.0, 1.0, 0.5019607843137255, 0.2, 0.4, 0.6, 0.8, 1.0, 0.0],
                7,
            )
            .unwrap(),
            Image::new(1, 3, 3, vec![0.1; 9], 2).unwrap(),
        ];
        let ip = dir.path().join("imgs.idx");
        let lp = dir.path().join("lbls.idx");
        write_idx(&imgs, &ip, &lp).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images[0].label, 7);
        // byte 128 / 255 comes back exactly
        assert_eq!(ds.images[0].pixels[2], 128.0 / 255.0);
        // Re-writing the loaded dataset reproduces identical files.
        let ip2 = dir.path().join("imgs2.idx");
        let lp2 = dir.path().join("lbls2.idx");
        write_idx(&ds.images, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&ip2).unwrap());
        assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&lp2).unwrap());
    }

    #[test]
    fn idx_gzip_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(3, 4, 8).unwrap();
        let ip = dir.path().join("imgs.idx.gz");
        let lp = dir.path().join("lbls.idx.gz");
        write_idx(&ds.images, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back.images[2].label, ds.images[2].label);
    }

    #[test]
    fn idx_rejects_swapped_magic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(3, 2, 8).unwrap();
        let ip = dir.path().join("imgs.idx");
        let lp = dir.path().join("lbls.idx");
        write_idx(&ds.images, &ip, &lp).unwrap();
        // Labels file where an images file is expected and vice versa.
        let err = load_idx(&lp, &ip).unwrap_err();
        assert!(matches!(err, DataError::Format { .. }), "{err}");
        let msg = err.to_string();
        assert!(
            msg.contains("lbls.idx"),
            "error should name the file: {msg}"
        );
    }

    #[test]
    fn idx_rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(3, 4, 8).unwrap();
        let ip = dir.path().join("imgs.idx");
        let lp = dir.path().join("lbls.idx");
        let lp_short = dir.path().join("lbls_short.idx");
        write_idx(&ds.images, &ip, &lp).unwrap();
        write_idx(
            &ds.images[..3],
            dir.path().join("unused.idx").as_path(),
            &lp_short,
        )
        .unwrap();
        let err = load_idx(&ip, &lp_short).unwrap_err();
        assert!(
            err.to_string().contains("does not match image count"),
            "{err}"
        );
    }

    #[test]
    fn idx_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(3, 2, 8).unwrap();
        let ip = dir.path().join("imgs.idx");
        let lp = dir.path().join("lbls.idx");
        write_idx(&ds.images, &ip, &lp).unwrap();
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(DataError::Format { .. })));
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_dataset(11, 9, 8).unwrap();
        let b = synth_dataset(11, 9, 8).unwrap();
        assert_eq!(a.images, b.images);
        let class0 = a.images.iter().filter(|i| i.label == 0).count();
        assert_eq!(class0, 5); // ceil(9/2)
        assert!(a
            .images
            .iter()
            .flat_map(|i| &i.pixels)
            .all(|&p| (0.0..=1.0).contains(&p)));
        let c = synth_dataset(12, 9, 8).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synth_rejects_bad_params() {
        assert!(synth_dataset(0, 1, 8).is_err());
        assert!(synth_dataset(0, 4, 7).is_err());
    }

    #[test]
    fn linear_classifier_separates_synth() {
        let ds = synth_dataset(5, 200, 16).unwrap();
        let mut m = Model::new(
            (1, 16, 16),
            2,
            vec![
                Layer::Flatten,
                Layer::Dense {
                    weights: Matrix::zeros(2, 256),
                    bias: vec![0.0; 2],
                },
            ],
        )
        .unwrap();
        let acc = train(
            &mut m,
            &ds.images,
            &TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert!(acc >= 0.99, "linear accuracy {acc}");
    }

    #[test]
    fn glyph_digits_deterministic_and_labeled() {
        let a = glyph_digits_dataset(4, 30).unwrap();
        let b = glyph_digits_dataset(4, 30).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.num_classes, 10);
        for (i, img) in a.images.iter().enumerate() {
            assert_eq!(img.label, i % 10);
            assert_eq!(img.shape(), (1, 28, 28));
        }
    }
}
