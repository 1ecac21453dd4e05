//! Classification datasets: synthetic Gaussian blobs and IDX image files
//! downsampled to 8x8.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Row-major features with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Vec<f32>,
    pub y: Vec<u32>,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows at `idx`, in order (duplicates allowed).
    pub fn gather(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
        }
        Dataset {
            x,
            y,
            dim: self.dim,
            classes: self.classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub val: Dataset,
}

fn shuffle<T>(v: &mut [T], rng: &mut Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.below(i + 1);
        v.swap(i, j);
    }
}

fn blob_points(centers: &[Vec<f64>], n: usize, rng: &mut Rng) -> Dataset {
    let classes = centers.len();
    let dim = centers[0].len();
    let mut y: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
    shuffle(&mut y, rng);
    let mut x = Vec::with_capacity(n * dim);
    for &label in &y {
        for &c in &centers[label as usize] {
            x.push((c + rng.normal()) as f32);
        }
    }
    Dataset { x, y, dim, classes }
}

/// Gaussian clusters: centers at `separation` times random unit directions,
/// unit-variance noise. Labels cycle through the classes before shuffling,
/// so each split is balanced to within one example.
pub fn synth_blobs(classes: usize, dim: usize, separation: f64, n_train: usize, n_val: usize, rng: &mut Rng) -> Result<DataSplit> {
    if classes < 2 || dim == 0 || n_train == 0 {
        return Err(Error::Config(format!(
            "blobs need classes >= 2, dim >= 1, n_train >= 1 (got {classes}, {dim}, {n_train})"
        )));
    }
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|a| separation * a / norm).collect()
        })
        .collect();
    Ok(DataSplit {
        train: blob_points(&centers, n_train, rng),
        val: blob_points(&centers, n_val, rng),
    })
}

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const COLOR_MAGIC: u32 = 0x0000_0804;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Dataset {
            path: path.to_path_buf(),
            detail: "truncated header".into(),
        })
}

/// Downsamples one image to 8x8 in `[0, 1]`: colour is converted to
/// luminance, 28x28 is zero-padded to 32x32, then 4x4 average pooling.
pub fn downsample_8x8(pixels: &[u8], rows: usize, cols: usize, channels: usize) -> Result<[f32; 64]> {
    if rows > 32 || cols > 32 {
        return Err(Error::Config(format!("images larger than 32x32 are not supported ({rows}x{cols})")));
    }
    const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
    let mut canvas = [[0.0f64; 32]; 32];
    let (top, left) = ((32 - rows) / 2, (32 - cols) / 2);
    for r in 0..rows {
        for c in 0..cols {
            let base = (r * cols + c) * channels;
            let v = if channels == 1 {
                f64::from(pixels[base])
            } else {
                (0..3).map(|k| LUMA[k] * f64::from(pixels[base + k])).sum()
            };
            canvas[top + r][left + c] = v;
        }
    }
    let mut out = [0.0f32; 64];
    for (i, o) in out.iter_mut().enumerate() {
        let (br, bc) = (i / 8 * 4, i % 8 * 4);
        let mut s = 0.0;
        for row in &canvas[br..br + 4] {
            s += row[bc..bc + 4].iter().sum::<f64>();
        }
        *o = (s / 16.0 / 255.0) as f32;
    }
    Ok(out)
}

/// Parses an IDX image file (`0x803` grayscale or `0x804` with a trailing
/// channel axis) into `n x 64` downsampled rows.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, usize)> {
    let bad = |detail: String| Error::Dataset {
        path: path.to_path_buf(),
        detail,
    };
    let magic = be_u32(bytes, 0, path)?;
    let (n, rows, cols, channels, header) = match magic {
        IMAGE_MAGIC => (
            be_u32(bytes, 4, path)? as usize,
            be_u32(bytes, 8, path)? as usize,
            be_u32(bytes, 12, path)? as usize,
            1,
            16,
        ),
        COLOR_MAGIC => (
            be_u32(bytes, 4, path)? as usize,
            be_u32(bytes, 8, path)? as usize,
            be_u32(bytes, 12, path)? as usize,
            be_u32(bytes, 16, path)? as usize,
            20,
        ),
        other => return Err(bad(format!("bad image magic {other:#010x}"))),
    };
    if channels != 1 && channels != 3 {
        return Err(bad(format!("unsupported channel count {channels}")));
    }
    let per = rows * cols * channels;
    let need = header + n * per;
    if bytes.len() < need {
        return Err(bad(format!("truncated: expected {need} bytes, found {}", bytes.len())));
    }
    let mut x = Vec::with_capacity(n * 64);
    for i in 0..n {
        let img = &bytes[header + i * per..header + (i + 1) * per];
        x.extend_from_slice(&downsample_8x8(img, rows, cols, channels).map_err(|e| bad(e.to_string()))?);
    }
    Ok((x, n))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u32>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            detail: format!("bad label magic {magic:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let data = bytes.get(8..8 + n).ok_or_else(|| Error::Dataset {
        path: path.to_path_buf(),
        detail: format!("truncated: expected {n} labels"),
    })?;
    Ok(data.iter().map(|&b| u32::from(b)).collect())
}

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";

/// Whether `dir` holds both IDX training files.
pub fn idx_available(dir: &Path) -> bool {
    dir.join(TRAIN_IMAGES).is_file() && dir.join(TRAIN_LABELS).is_file()
}

/// Loads `dir/train-images-idx3-ubyte` and `dir/train-labels-idx1-ubyte` as
/// 8x8 features, split into train/val by a seeded shuffle.
pub fn load_idx_8x8(dir: &Path, val_fraction: f64, rng: &mut Rng) -> Result<DataSplit> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| Error::io(p, e))
    };
    let img_path = dir.join(TRAIN_IMAGES);
    let lbl_path = dir.join(TRAIN_LABELS);
    let (x, n) = parse_idx_images(&read(TRAIN_IMAGES)?, &img_path)?;
    let y = parse_idx_labels(&read(TRAIN_LABELS)?, &lbl_path)?;
    if y.len() != n {
        return Err(Error::Dataset {
            path: dir.to_path_buf(),
            detail: format!("{n} images but {} labels", y.len()),
        });
    }
    let classes = y.iter().copied().max().map_or(0, |m| m as usize + 1).max(2);
    let all = Dataset { x, y, dim: 64, classes };
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, rng);
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    Ok(DataSplit {
        val: all.gather(&idx[..n_val]),
        train: all.gather(&idx[n_val..]),
    })
}
