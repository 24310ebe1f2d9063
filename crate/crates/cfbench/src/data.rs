//! Dataset ingestion (IDX and CSV), class selection, balance statistics and
//! synthetic blob generation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_IMAGES_MAGIC_4D: u32 = 0x0000_0804;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// An immutable labeled image collection. Images are `(n, H, W, C)` with
/// values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]` of a single image.
    pub fn image_dims(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> BTreeMap<u8, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }

    /// Copy of rows `start..end` as a `(B, H, W, C)` batch plus labels.
    pub fn batch_range(&self, start: usize, end: usize) -> (Tensor, &[u8]) {
        let [h, w, c] = self.image_dims();
        let stride = h * w * c;
        let data = self.images.data()[start * stride..end * stride].to_vec();
        (
            Tensor::from_vec(&[end - start, h, w, c], data),
            &self.labels[start..end],
        )
    }

    /// Batch gathered from arbitrary indices (used for shuffled training).
    pub fn batch_indexed(&self, idx: &[usize]) -> (Tensor, Vec<u8>) {
        let [h, w, c] = self.image_dims();
        let stride = h * w * c;
        let src = self.images.data();
        let mut data = Vec::with_capacity(idx.len() * stride);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&src[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        (Tensor::from_vec(&[idx.len(), h, w, c], data), labels)
    }

    /// New dataset containing the given rows, preserving order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (images, labels) = self.batch_indexed(idx);
        Dataset { images, labels, split: self.split }
    }

    /// Keeps at most `cap` samples per class, in original order.
    pub fn cap_per_class(&self, cap: usize) -> Dataset {
        let mut taken: BTreeMap<u8, usize> = BTreeMap::new();
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let t = taken.entry(self.labels[i]).or_insert(0);
                *t += 1;
                *t <= cap
            })
            .collect();
        self.subset(&keep)
    }

    /// Checks the container invariants after ingestion: labels in 0..9,
    /// pixel values in [0, 1], counts consistent.
    pub fn validate(&self) -> Result<()> {
        let s = self.images.shape();
        if s.len() != 4 {
            return Err(Error::data(format!("images must be (n,H,W,C), got {s:?}")));
        }
        if s[0] != self.labels.len() {
            return Err(Error::data(format!(
                "{} images but {} labels",
                s[0],
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l > 9) {
            return Err(Error::data(format!("label {bad} out of range 0..9")));
        }
        if !self.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::data("pixel values outside [0, 1]"));
        }
        Ok(())
    }
}

/// Which original classes were kept and how they map onto 0..9.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSelection {
    /// Kept original class ids, ascending; index in this list is the new label.
    pub kept: Vec<u8>,
}

impl ClassSelection {
    pub fn relabel(&self, original: u8) -> Option<u8> {
        self.kept.iter().position(|&k| k == original).map(|p| p as u8)
    }
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::format(bytes.len() as u64, format!("truncated while reading {what}")));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Parses a big-endian IDX image/label file pair. Bytes are scaled to
/// `[0, 1]`. Magic 0x803 is `(n, H, W)` single-channel; 0x804 is
/// `(n, H, W, C)`.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;

    let magic = read_u32_be(&img_bytes, 0, "image magic")?;
    let (dims, channels_in_file) = match magic {
        IDX_IMAGES_MAGIC => (3, false),
        IDX_IMAGES_MAGIC_4D => (4, true),
        _ => {
            return Err(Error::format(
                0,
                format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
            ))
        }
    };
    let n = read_u32_be(&img_bytes, 4, "image count")? as usize;
    let h = read_u32_be(&img_bytes, 8, "image height")? as usize;
    let w = read_u32_be(&img_bytes, 12, "image width")? as usize;
    let (c, header) = if channels_in_file {
        (read_u32_be(&img_bytes, 16, "image channels")? as usize, 20)
    } else {
        (1, 16)
    };
    let expected = header + n * h * w * c;
    if img_bytes.len() != expected {
        return Err(Error::format(
            img_bytes.len().min(expected) as u64,
            format!("image payload has {} bytes, expected {}", img_bytes.len() - header.min(img_bytes.len()), expected - header),
        ));
    }
    debug_assert_eq!(dims + 1, header / 4);

    let lbl_magic = read_u32_be(&lbl_bytes, 0, "label magic")?;
    if lbl_magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("bad label magic 0x{lbl_magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let n_lbl = read_u32_be(&lbl_bytes, 4, "label count")? as usize;
    if n_lbl != n {
        return Err(Error::format(4, format!("{n} images but {n_lbl} labels")));
    }
    if lbl_bytes.len() != 8 + n {
        return Err(Error::format(
            lbl_bytes.len().min(8 + n) as u64,
            format!("label payload has {} bytes, expected {n}", lbl_bytes.len().saturating_sub(8)),
        ));
    }

    let data: Vec<f64> = img_bytes[header..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Dataset {
        images: Tensor::from_vec(&[n, h, w, c], data),
        labels: lbl_bytes[8..].to_vec(),
        split,
    })
}

/// Writes the exact inverse of [`load_idx`]. Pixel values are mapped back to
/// bytes by rounding `v * 255`.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let s = ds.images.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut img = Vec::with_capacity(16 + ds.images.len());
    if c == 1 {
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    } else {
        img.extend_from_slice(&IDX_IMAGES_MAGIC_4D.to_be_bytes());
    }
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    if c != 1 {
        img.extend_from_slice(&(c as u32).to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&v| (v * 255.0).round() as u8));

    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    lbl.extend_from_slice(&ds.labels);

    fs::write(images_path, img)?;
    fs::write(labels_path, lbl)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Loads the CSV alternative: header `label,p0,p1,...`, one row per image,
/// pixel values 0-255. Square pixel counts become `(H, H, 1)` images.
pub fn load_csv(path: &Path, split: Split) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(0, "empty csv file"))?;
    if !header.starts_with("label,p0") {
        return Err(Error::format(0, "csv header must start with 'label,p0'"));
    }
    let width = header.split(',').count() - 1;

    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut offset = header.len() as u64 + 1;
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: u8 = fields
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|_| Error::format(offset, format!("line {}: bad label", lineno + 1)))?;
        let pixels: Vec<f64> = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(offset, format!("line {}: bad pixel value", lineno + 1)))?;
        if pixels.len() != width {
            return Err(Error::format(
                offset,
                format!("line {}: expected {width} pixels, got {}", lineno + 1, pixels.len()),
            ));
        }
        labels.push(label);
        data.extend(pixels.iter().map(|&p| p / 255.0));
        offset += line.len() as u64 + 1;
    }

    let n = labels.len();
    let side = (width as f64).sqrt().round() as usize;
    let (h, w) = if side * side == width { (side, side) } else { (width, 1) };
    Ok(Dataset {
        images: Tensor::from_vec(&[n, h, w, 1], data),
        labels,
        split,
    })
}

// ---------------------------------------------------------------------------
// class selection
// ---------------------------------------------------------------------------

/// Keeps the 10 best-represented classes of the train split (ties to the
/// lower original id; a perfectly balanced dataset draws 10 classes
/// uniformly), relabels them to 0..9 in ascending original-id order, and
/// applies the same selection to the test split.
pub fn select_top_classes(
    train: &Dataset,
    test: &Dataset,
    rng: &mut RngStream,
) -> Result<(Dataset, Dataset, ClassSelection)> {
    let counts = train.class_counts();
    if counts.len() < 10 {
        return Err(Error::data(format!(
            "need at least 10 classes, found {}",
            counts.len()
        )));
    }

    let mut kept: Vec<u8> = if counts.len() == 10 {
        counts.keys().copied().collect()
    } else {
        let balanced = counts.values().collect::<std::collections::BTreeSet<_>>().len() == 1;
        if balanced {
            let ids: Vec<u8> = counts.keys().copied().collect();
            let mut perm = rng.permutation(ids.len());
            perm.truncate(10);
            perm.into_iter().map(|i| ids[i]).collect()
        } else {
            let mut by_count: Vec<(u8, usize)> = counts.into_iter().collect();
            by_count.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            by_count.into_iter().take(10).map(|(id, _)| id).collect()
        }
    };
    kept.sort_unstable();
    let selection = ClassSelection { kept };

    let apply = |ds: &Dataset| -> Dataset {
        let idx: Vec<usize> = (0..ds.len())
            .filter(|&i| selection.relabel(ds.labels[i]).is_some())
            .collect();
        let mut sub = ds.subset(&idx);
        for l in sub.labels.iter_mut() {
            *l = selection.relabel(*l).unwrap();
        }
        sub
    };
    Ok((apply(train), apply(test), selection))
}

/// Class-imbalance statistic: largest per-class count difference as a
/// percentage of the total sample count (0 for a perfectly balanced set).
pub fn class_balance_stat(ds: &Dataset) -> f64 {
    let counts = ds.class_counts();
    if counts.len() < 2 {
        return 0.0;
    }
    let max = *counts.values().max().unwrap() as f64;
    let min = *counts.values().min().unwrap() as f64;
    100.0 * (max - min) / ds.len() as f64
}

// ---------------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------------

/// Ten Gaussian clusters clipped to `[0,1]^dims`, one per class. Cluster
/// centers are drawn in `[0.25, 0.75]^dims`; the point spread shrinks as
/// `separation` grows.
pub fn synthetic_blobs(
    n_per_class: usize,
    dims: usize,
    separation: f64,
    rng: &mut RngStream,
    split: Split,
) -> Dataset {
    assert!(separation > 0.0, "separation must be positive");
    let sigma = 0.25 / separation;
    let centers: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..dims).map(|_| rng.uniform(0.25, 0.75)).collect())
        .collect();

    let n = 10 * n_per_class;
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &c in center {
                data.push((c + sigma * rng.normal()).clamp(0.0, 1.0));
            }
            labels.push(k as u8);
        }
    }
    Dataset {
        images: Tensor::from_vec(&[n, dims, 1, 1], data),
        labels,
        split,
    }
}
