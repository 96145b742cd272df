//! Paired image discovery, preprocessing, splitting and batching.
//!
//! A dataset root holds `low/<id>.png` and `high/<id>.png`; files present on
//! both sides form a pair. An optional `organs.csv` (`pair_id,organ_tag`)
//! tags pairs by organ.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uqgan_autograd::{Array, Tensor};

use crate::error::{Error, Result};

pub const DEFAULT_IMAGE_SIZE: usize = 256;

/// Batched single-channel images `(batch, 1, height, width)` with finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Array);

impl ImageTensor {
    pub fn new(array: Array) -> Result<Self> {
        if array.ndim() != 4 {
            return Err(Error::Shape(format!(
                "image tensor needs 4 axes (batch, channel, height, width), got {:?}",
                array.shape()
            )));
        }
        if array.shape()[1] != 1 {
            return Err(Error::Shape(format!(
                "image tensor must have one channel, got {}",
                array.shape()[1]
            )));
        }
        if !array.all_finite() {
            return Err(Error::Data("image tensor contains non-finite values".into()));
        }
        Ok(Self(array))
    }

    pub fn from_planes(planes: &[Vec<f64>], height: usize, width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(planes.len() * height * width);
        for p in planes {
            if p.len() != height * width {
                return Err(Error::Shape("plane size mismatch".into()));
            }
            data.extend_from_slice(p);
        }
        Self::new(Array::from_vec(&[planes.len(), 1, height, width], data))
    }

    pub fn array(&self) -> &Array {
        &self.0
    }

    pub fn into_array(self) -> Array {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    /// Graph constant holding these images.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::constant(self.0.clone())
    }

    /// The `index`-th image as an `(H, W)` plane.
    pub fn plane(&self, index: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.0.data()[index * n..(index + 1) * n]
    }

    pub fn stack(items: &[ImageTensor]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Shape("cannot stack zero images".into()));
        }
        let arrays: Vec<&Array> = items.iter().map(|t| &t.0).collect();
        if arrays.iter().any(|a| a.shape()[1..] != arrays[0].shape()[1..]) {
            return Err(Error::Shape("stacked images differ in size".into()));
        }
        Ok(Self(Array::stack_outer(&arrays)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub pair_id: String,
    pub low_path: PathBuf,
    pub high_path: PathBuf,
    pub organ: String,
}

/// Pairs sorted by `pair_id`, with unique ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairManifest {
    root: PathBuf,
    entries: Vec<PairEntry>,
}

/// Result of scanning a dataset root.
#[derive(Debug)]
pub struct ManifestScan {
    pub manifest: PairManifest,
    /// Files found on only one side, skipped.
    pub unpaired: Vec<PathBuf>,
}

impl PairManifest {
    pub fn from_entries(root: impl Into<PathBuf>, mut entries: Vec<PairEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
        if let Some(w) = entries.windows(2).find(|w| w[0].pair_id == w[1].pair_id) {
            return Err(Error::Data(format!("duplicate pair id `{}`", w[0].pair_id)));
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[PairEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.pair_id.as_str()).collect()
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn read_organs(path: &Path) -> Result<HashMap<String, String>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if record.len() < 2 {
            return Err(Error::Data(format!(
                "{}: line {} needs `pair_id,organ_tag`",
                path.display(),
                line + 1
            )));
        }
        if line == 0 && &record[0] == "pair_id" {
            continue;
        }
        map.insert(record[0].to_string(), record[1].to_string());
    }
    Ok(map)
}

/// Scans `<root>/low` and `<root>/high` for identically named PNG files.
pub fn load_pair_manifest(root: &Path) -> Result<ManifestScan> {
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let low = png_stems(&root.join("low"))?;
    let high = png_stems(&root.join("high"))?;
    let organs_path = root.join("organs.csv");
    let organs = if organs_path.is_file() {
        read_organs(&organs_path)?
    } else {
        HashMap::new()
    };

    let mut entries = Vec::new();
    let mut unpaired = Vec::new();
    for (id, low_path) in &low {
        match high.get(id) {
            Some(high_path) => entries.push(PairEntry {
                pair_id: id.clone(),
                low_path: low_path.clone(),
                high_path: high_path.clone(),
                organ: organs.get(id).cloned().unwrap_or_else(|| "unknown".into()),
            }),
            None => unpaired.push(low_path.clone()),
        }
    }
    unpaired.extend(
        high.iter()
            .filter(|(id, _)| !low.contains_key(*id))
            .map(|(_, p)| p.clone()),
    );
    for path in &unpaired {
        log::warn!("skipping {}: no counterpart on the other side", path.display());
    }
    if entries.is_empty() {
        return Err(Error::Data(format!(
            "zero pairs found under {}",
            root.display()
        )));
    }
    Ok(ManifestScan {
        manifest: PairManifest::from_entries(root, entries)?,
        unpaired,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

/// Seeded shuffle, then the first `floor(n * fraction)` pairs train and the rest validate.
///
/// The training side keeps at least one pair. Both halves come back sorted by id.
pub fn split_train_val(manifest: &PairManifest, spec: SplitSpec) -> Result<(PairManifest, PairManifest)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let n = manifest.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "need at least 2 pairs to form train and validation splits, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = ((n as f64 * spec.train_fraction).floor() as usize).max(1);
    let pick = |idx: &[usize]| {
        PairManifest::from_entries(
            manifest.root.clone(),
            idx.iter().map(|&i| manifest.entries[i].clone()).collect(),
        )
    };
    Ok((pick(&order[..n_train])?, pick(&order[n_train..])?))
}

/// Bilinear resampling with half-pixel centres.
fn resize_bilinear(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    if sh == dh && sw == dw {
        return src.to_vec();
    }
    let axis = |d: usize, s: usize| -> Vec<(usize, usize, f64)> {
        let scale = s as f64 / d as f64;
        (0..d)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(s - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ys = axis(dh, sh);
    let xs = axis(dw, sw);
    let mut out = Vec::with_capacity(dh * dw);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Maps 8-bit gray levels linearly onto [-1, 1].
pub fn normalize_level(v: f64) -> f64 {
    v * 2.0 / 255.0 - 1.0
}

/// Inverse of [`normalize_level`], rounded and clamped to 8 bits.
pub fn denormalize_level(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Reads a grayscale or RGB image, converts to luminance, resizes to
/// `size`x`size` and scales to [-1, 1]. Returns a single-image tensor.
pub fn preprocess(image_file: &Path, size: usize) -> Result<ImageTensor> {
    let img = image::open(image_file).map_err(|e| Error::Image {
        path: image_file.to_path_buf(),
        message: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let levels: Vec<f64> = gray.as_raw().iter().map(|&v| f64::from(v)).collect();
    let resized = resize_bilinear(&levels, h, w, size, size);
    ImageTensor::new(Array::from_vec(
        &[1, 1, size, size],
        resized.into_iter().map(normalize_level).collect(),
    ))
}

/// Converts one normalized plane back to 8-bit gray levels.
pub fn denormalize(plane: &[f64]) -> Vec<u8> {
    plane.iter().map(|&v| denormalize_level(v)).collect()
}

/// Writes one normalized `(H, W)` plane as an 8-bit grayscale PNG.
pub fn save_plane_png(plane: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, denormalize(plane))
        .ok_or_else(|| Error::Shape("plane does not match its stated size".into()))?;
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Deterministic batch composition for one epoch: indices into the manifest.
pub fn batch_plan(n: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// A pair-aligned batch: item `i` of `low` and `high` come from `pair_ids[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub pair_ids: Vec<String>,
    pub low: ImageTensor,
    pub high: ImageTensor,
}

pub fn load_batch(manifest: &PairManifest, indices: &[usize], size: usize) -> Result<Batch> {
    let mut lows = Vec::with_capacity(indices.len());
    let mut highs = Vec::with_capacity(indices.len());
    let mut ids = Vec::with_capacity(indices.len());
    for &i in indices {
        let e = &manifest.entries()[i];
        lows.push(preprocess(&e.low_path, size)?);
        highs.push(preprocess(&e.high_path, size)?);
        ids.push(e.pair_id.clone());
    }
    Ok(Batch {
        pair_ids: ids,
        low: ImageTensor::stack(&lows)?,
        high: ImageTensor::stack(&highs)?,
    })
}

/// One epoch of batches in seeded order; the final partial batch is kept.
pub struct BatchStream {
    inner: Box<dyn Iterator<Item = Result<Batch>> + Send>,
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.inner.next()
    }
}

/// Sequential batch stream over one epoch.
pub fn make_batches(manifest: &PairManifest, batch_size: usize, epoch_seed: u64, size: usize) -> BatchStream {
    let manifest = manifest.clone();
    let plan = batch_plan(manifest.len(), batch_size, epoch_seed);
    BatchStream {
        inner: Box::new(plan.into_iter().map(move |idx| load_batch(&manifest, &idx, size))),
    }
}

/// Like [`make_batches`], but decoding runs ahead on a worker thread.
/// Delivery order is identical to the sequential stream.
pub fn make_batches_prefetched(
    manifest: &PairManifest,
    batch_size: usize,
    epoch_seed: u64,
    size: usize,
    depth: usize,
) -> BatchStream {
    let (tx, rx) = mpsc::sync_channel(depth.max(1));
    let stream = make_batches(manifest, batch_size, epoch_seed, size);
    thread::spawn(move || {
        for batch in stream {
            if tx.send(batch).is_err() {
                break;
            }
        }
    });
    BatchStream {
        inner: Box::new(rx.into_iter()),
    }
}

/// Ids covered by a plan, for coverage checks.
pub fn plan_ids(manifest: &PairManifest, plan: &[Vec<usize>]) -> HashSet<String> {
    plan.iter()
        .flatten()
        .map(|&i| manifest.entries()[i].pair_id.clone())
        .collect()
}
