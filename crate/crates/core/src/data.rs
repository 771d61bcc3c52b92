//! Labeled image datasets: IDX ingestion, class filtering, synthetic blobs and
//! seeded sampling.
//!
//! Pixels are stored as `f64` in `[0, 1]`; no further normalization is
//! applied, so attacks operate directly in the pixel box.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Identifier recorded in checkpoints and reports.
    pub id: String,
    /// Per-example shape, e.g. `[1, 28, 28]` or `[D]`.
    image_shape: Vec<usize>,
    images: Vec<f64>,
    labels: Vec<usize>,
    /// Original label -> compacted class index.
    class_map: BTreeMap<u32, usize>,
}

impl Dataset {
    /// Builds a dataset from compacted labels; `class_map` defaults to the
    /// identity over `0..num_classes`.
    pub fn new(
        id: impl Into<String>,
        image_shape: Vec<usize>,
        images: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let class_map = (0..num_classes).map(|k| (k as u32, k)).collect();
        Self::with_class_map(id, image_shape, images, labels, class_map)
    }

    fn with_class_map(
        id: impl Into<String>,
        image_shape: Vec<usize>,
        images: Vec<f64>,
        labels: Vec<usize>,
        class_map: BTreeMap<u32, usize>,
    ) -> Result<Self> {
        let d: usize = image_shape.iter().product();
        if d == 0 || images.len() != d * labels.len() {
            return Err(Error::Dataset(format!(
                "{} labels need {} pixels of shape {image_shape:?}, got {}",
                labels.len(),
                d * labels.len(),
                images.len()
            )));
        }
        if let Some(bad) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Dataset(format!("pixel value {bad} outside [0, 1]")));
        }
        let k = class_map.len();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Dataset(format!("label {bad} out of range for {k} classes")));
        }
        Ok(Self {
            id: id.into(),
            image_shape,
            images,
            labels,
            class_map,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    pub fn input_dim(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.class_map.len()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.input_dim();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_map(&self) -> &BTreeMap<u32, usize> {
        &self.class_map
    }

    /// Original label of compacted class `k`.
    pub fn original_label(&self, k: usize) -> Option<u32> {
        self.class_map.iter().find(|(_, &v)| v == k).map(|(&o, _)| o)
    }

    /// Attacks and boundary sets need at least two classes.
    pub fn is_attackable(&self) -> bool {
        self.num_classes() >= 2
    }

    /// Examples at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.input_dim());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            id: self.id.clone(),
            image_shape: self.image_shape.clone(),
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_map: self.class_map.clone(),
        }
    }

    /// Keeps examples whose original label is in `keep` and re-indexes the
    /// retained classes `0..|keep|` in ascending original-label order.
    pub fn filter_classes(&self, keep: &[u32]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::Dataset("filter_classes: empty keep list".into()));
        }
        let keep: BTreeSet<u32> = keep.iter().copied().collect();
        if let Some(missing) = keep.iter().find(|l| !self.class_map.contains_key(l)) {
            return Err(Error::Dataset(format!(
                "filter_classes: label {missing} not present in dataset"
            )));
        }
        let new_map: BTreeMap<u32, usize> = keep.iter().enumerate().map(|(k, &o)| (o, k)).collect();
        // compacted old index -> compacted new index
        let remap: BTreeMap<usize, usize> = self
            .class_map
            .iter()
            .filter_map(|(o, &old)| new_map.get(o).map(|&new| (old, new)))
            .collect();
        let indices: Vec<usize> = (0..self.len())
            .filter(|&i| remap.contains_key(&self.labels[i]))
            .collect();
        if indices.is_empty() {
            return Err(Error::Dataset("filter_classes: no examples retained".into()));
        }
        let mut out = self.subset(&indices);
        out.labels.iter_mut().for_each(|l| *l = remap[l]);
        out.class_map = new_map;
        Ok(out)
    }

    /// `n` examples drawn uniformly without replacement, kept in their
    /// original order.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Self> {
        Ok(self.sample_split(n, seed)?.0)
    }

    /// Like [`Dataset::sample`], also returning the complement.
    pub fn sample_split(&self, n: usize, seed: u64) -> Result<(Self, Self)> {
        if n > self.len() {
            return Err(Error::Dataset(format!(
                "cannot sample {n} examples from {}",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = index::sample(&mut rng, self.len(), n).into_vec();
        chosen.sort_unstable();
        let picked: BTreeSet<usize> = chosen.iter().copied().collect();
        let rest: Vec<usize> = (0..self.len()).filter(|i| !picked.contains(i)).collect();
        Ok((self.subset(&chosen), self.subset(&rest)))
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: format!("truncated header, file has {} bytes", bytes.len()),
        })
}

/// Reads a file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(format!("inflating {}", path.display()), e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_idx(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::Idx {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    let sizes = (0..dims)
        .map(|k| be_u32(bytes, 4 + 4 * k, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * dims;
    let need: usize = sizes.iter().product();
    let have = bytes.len() - start;
    if have < need {
        return Err(Error::Idx {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            message: format!("truncated payload, expected {need} bytes after offset {start}, found {have}"),
        });
    }
    if have > need {
        return Err(Error::Idx {
            path: path.to_path_buf(),
            offset: (start + need) as u64,
            message: format!("{} trailing bytes", have - need),
        });
    }
    Ok((sizes, bytes[start..].to_vec()))
}

/// Loads an IDX image/label pair (optionally gzipped). Pixel bytes are scaled
/// by 1/255; labels present are compacted in ascending order.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (isizes, pixels) = parse_idx(&read_maybe_gz(ip)?, ip, IDX_IMAGES_MAGIC, 3)?;
    let (lsizes, raw_labels) = parse_idx(&read_maybe_gz(lp)?, lp, IDX_LABELS_MAGIC, 1)?;
    if isizes[0] != lsizes[0] {
        return Err(Error::Dataset(format!(
            "{} holds {} images but {} holds {} labels",
            ip.display(),
            isizes[0],
            lp.display(),
            lsizes[0]
        )));
    }
    let present: BTreeSet<u32> = raw_labels.iter().map(|&l| u32::from(l)).collect();
    let class_map: BTreeMap<u32, usize> = present.iter().enumerate().map(|(k, &o)| (o, k)).collect();
    let labels = raw_labels.iter().map(|&l| class_map[&u32::from(l)]).collect();
    let images = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let id = ip
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::with_class_map(id, vec![1, isizes[1], isizes[2]], images, labels, class_map)
}

/// Writes raw IDX image and label files (uncompressed).
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    if pixels.len() != rows * cols * labels.len() {
        return Err(Error::InvalidArgument("pixel count does not match labels".into()));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, labels.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    fs::write(ip, img).map_err(|e| Error::io(format!("writing {}", ip.display()), e))?;
    fs::write(lp, lab).map_err(|e| Error::io(format!("writing {}", lp.display()), e))?;
    Ok(())
}

/// Distance of every blob center from the center of the unit box.
const BLOB_RADIUS: f64 = 0.3;

/// Fixed blob centers, symmetric about the point `0.5 * 1`.
///
/// For `k <= 2d` the centers sit at `0.5 +/- r e_i`; otherwise the remaining
/// directions come from a fixed-seed generator.
pub fn blob_centers(k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b10b5);
    (0..k)
        .map(|c| {
            let mut center = vec![0.5; d];
            if c < 2 * d {
                let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                center[c / 2] += sign * BLOB_RADIUS;
            } else {
                let dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for (ci, di) in center.iter_mut().zip(dir) {
                    *ci += BLOB_RADIUS * di / norm;
                }
            }
            center
        })
        .collect()
}

/// Gaussian clusters at [`blob_centers`], `n_per_class` each, with standard
/// deviation `min center distance / separation`. Samples are clamped into
/// `[0, 1]`.
pub fn make_blobs(n_per_class: usize, k: usize, d: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || d == 0 || separation <= 0.0 || !separation.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "make_blobs needs k >= 2, d >= 1 and separation > 0 (got k={k}, d={d}, separation={separation})"
        )));
    }
    let centers = blob_centers(k, d);
    let mut min_dist = f64::INFINITY;
    for a in 0..k {
        for b in a + 1..k {
            let dist = centers[a]
                .iter()
                .zip(&centers[b])
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(dist);
        }
    }
    let sigma = min_dist / separation;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n_per_class * k * d);
    let mut labels = Vec::with_capacity(n_per_class * k);
    for _ in 0..n_per_class {
        for (c, center) in centers.iter().enumerate() {
            images.extend(center.iter().map(|m| (m + normal.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(c);
        }
    }
    Dataset::new(format!("blobs-k{k}-d{d}-s{separation}"), vec![d], images, labels, k)
}
