//! Dataset ingestion from local files. Nothing here touches the network; see
//! [`super::fetch`] for downloads.
//!
//! Layout under the data directory:
//! - `mnist/`, `fashionmnist/`: IDX files (`train-*`, `t10k-*`)
//! - `cifar10/`: CIFAR binary batches
//! - `lsun_resized/`, `tinyimagenet_resized/`: folders of 32×32 images
//!
//! `synthetic` and `synthetic_ood` are generated in memory for quick runs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::codec::InputShape;
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST: &str = "SHA256SUMS";

/// Row-major (C, H, W) images with pixel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Images {
    shape: InputShape,
    pixels: Vec<f32>,
}

impl Images {
    pub fn new(shape: InputShape, pixels: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || pixels.len() % shape.len() != 0 {
            return Err(Error::contract(format!(
                "{} pixels do not divide into images of shape {shape:?}",
                pixels.len()
            )));
        }
        Ok(Self { shape, pixels })
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Contiguous pixels of images `start..end`.
    pub fn range(&self, start: usize, end: usize) -> &[f32] {
        let n = self.shape.len();
        &self.pixels[start * n..end * n]
    }

    pub fn gather(&self, indices: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            out.extend_from_slice(self.image(i));
        }
        out
    }

    pub fn truncate(&mut self, n: usize) {
        let keep = n.min(self.len()) * self.shape.len();
        self.pixels.truncate(keep);
    }
}

/// Images with class labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub images: Images,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        self.labels.truncate(n);
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Known dataset identifiers.
pub const DATASETS: [&str; 7] = [
    "mnist",
    "fashionmnist",
    "cifar10",
    "lsun_resized",
    "tinyimagenet_resized",
    "synthetic",
    "synthetic_ood",
];

/// Checksums of the files produced by `fetch`, pinned for the datasets whose
/// contents are fully determined by the pinned upstream archive.
const PINNED: &[(&str, &str, &str)] = &[
    ("mnist", "t10k-images-idx3-ubyte", "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
    ("mnist", "t10k-labels-idx1-ubyte", "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
    ("mnist", "train-images-idx3-ubyte", "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
    ("mnist", "train-labels-idx1-ubyte", "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
    ("fashionmnist", "t10k-images-idx3-ubyte", "c1fd32cfc139ac9a3fd0106b9502825148411d79f20e33387758d1e312e8f124"),
    ("fashionmnist", "t10k-labels-idx1-ubyte", "aee2fd9e4f6b961a502ac989ab73d92369b2f1df1ab18ca4882d43c09ba4f646"),
    ("fashionmnist", "train-images-idx3-ubyte", "b928d7a46c65f66d813527c58e04e97a406cccb54f2c02fc3907852b9a41604a"),
    ("fashionmnist", "train-labels-idx1-ubyte", "48efe8326e58692efd15ec9049b3384ced57928f3896780a3185b1b1a108fb1b"),
];

fn dataset_err(dataset: &str, message: impl Into<String>) -> Error {
    Error::Dataset { dataset: dataset.to_string(), message: message.into() }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    Ok(text
        .lines()
        .filter_map(|l| {
            let (sum, name) = l.split_once("  ")?;
            Some((name.to_string(), sum.to_string()))
        })
        .collect())
}

pub fn write_manifest(dir: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    let body: String = entries.iter().map(|(name, sum)| format!("{sum}  {name}\n")).collect();
    fs::write(dir.join(MANIFEST), body)?;
    Ok(())
}

/// Checks `files` (relative to `dir`) against pinned checksums, or against the
/// manifest written by `fetch` when none is pinned.
fn verify(dataset: &str, dir: &Path, files: &[String]) -> Result<()> {
    verify_against(dataset, dir, files, PINNED)
}

fn verify_against(dataset: &str, dir: &Path, files: &[String], pins: &[(&str, &str, &str)]) -> Result<()> {
    let missing: Vec<&String> = files.iter().filter(|f| !dir.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(dataset_err(
            dataset,
            format!("missing {:?} under {}; run `ccib fetch {dataset}`", missing, dir.display()),
        ));
    }
    let manifest = read_manifest(dir).ok();
    for f in files {
        let pinned = pins.iter().find(|(d, name, _)| *d == dataset && name == f).map(|p| p.2.to_string());
        let expected = match pinned.or_else(|| manifest.as_ref().and_then(|m| m.get(f).cloned())) {
            Some(e) => e,
            None => {
                return Err(dataset_err(
                    dataset,
                    format!("no checksum recorded for {f}; rerun `ccib fetch {dataset}`"),
                ))
            }
        };
        let path = dir.join(f);
        let actual = sha256_file(&path)?;
        if actual != expected {
            return Err(Error::Checksum { path, expected, actual });
        }
    }
    Ok(())
}

fn read_idx_images(dataset: &str, path: &Path) -> Result<Images> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = r.read_u32::<BigEndian>()?;
    if magic != 0x0803 {
        return Err(dataset_err(dataset, format!("{}: bad IDX image magic {magic:#x}", path.display())));
    }
    let n = r.read_u32::<BigEndian>()? as usize;
    let h = r.read_u32::<BigEndian>()? as usize;
    let w = r.read_u32::<BigEndian>()? as usize;
    let mut raw = vec![0u8; n * h * w];
    r.read_exact(&mut raw)
        .map_err(|e| dataset_err(dataset, format!("{}: truncated ({e})", path.display())))?;
    Images::new(InputShape::new(1, h, w), raw.into_iter().map(|b| b as f32 / 255.0).collect())
}

fn read_idx_labels(dataset: &str, path: &Path) -> Result<Vec<usize>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = r.read_u32::<BigEndian>()?;
    if magic != 0x0801 {
        return Err(dataset_err(dataset, format!("{}: bad IDX label magic {magic:#x}", path.display())));
    }
    let n = r.read_u32::<BigEndian>()? as usize;
    let mut raw = vec![0u8; n];
    r.read_exact(&mut raw)
        .map_err(|e| dataset_err(dataset, format!("{}: truncated ({e})", path.display())))?;
    Ok(raw.into_iter().map(usize::from).collect())
}

pub fn idx_files(split: Split) -> [String; 2] {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    [format!("{prefix}-images-idx3-ubyte"), format!("{prefix}-labels-idx1-ubyte")]
}

fn ingest_idx(dataset: &str, dir: &Path, split: Split) -> Result<LabeledDataset> {
    ingest_idx_with(dataset, dir, split, PINNED)
}

/// IDX ingest checked only against `pins` and the local manifest.
pub(crate) fn ingest_idx_with(
    dataset: &str,
    dir: &Path,
    split: Split,
    pins: &[(&str, &str, &str)],
) -> Result<LabeledDataset> {
    let files = idx_files(split);
    verify_against(dataset, dir, &files, pins)?;
    let images = read_idx_images(dataset, &dir.join(&files[0]))?;
    let labels = read_idx_labels(dataset, &dir.join(&files[1]))?;
    if images.len() != labels.len() {
        return Err(dataset_err(dataset, format!("{} images but {} labels", images.len(), labels.len())));
    }
    finish_labeled(dataset, images, labels)
}

fn finish_labeled(dataset: &str, images: Images, labels: Vec<usize>) -> Result<LabeledDataset> {
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    if num_classes < 2 {
        return Err(dataset_err(dataset, "fewer than two classes"));
    }
    Ok(LabeledDataset { name: dataset.to_string(), images, labels, num_classes })
}

pub fn cifar_files(split: Split) -> Vec<String> {
    match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    }
}

fn ingest_cifar(dataset: &str, dir: &Path, split: Split) -> Result<LabeledDataset> {
    const RECORD: usize = 1 + 3 * 32 * 32;
    let files = cifar_files(split);
    verify(dataset, dir, &files)?;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let bytes = fs::read(dir.join(f))?;
        if bytes.len() % RECORD != 0 {
            return Err(dataset_err(dataset, format!("{f}: size {} is not a multiple of {RECORD}", bytes.len())));
        }
        for rec in bytes.chunks_exact(RECORD) {
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    finish_labeled(dataset, Images::new(InputShape::new(3, 32, 32), pixels)?, labels)
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_images(&path, out)?;
        } else if matches!(
            path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
            Some("jpg" | "jpeg" | "png" | "pgm" | "ppm")
        ) {
            out.push(path);
        }
    }
    Ok(())
}

/// Decodes one image file into (C, H, W) floats, converting to `shape`'s
/// channel count and resizing to its spatial size when needed.
pub fn load_image_file(path: &Path, shape: InputShape) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Dataset {
        dataset: path.display().to_string(),
        message: e.to_string(),
    })?;
    let (w, h) = (shape.width as u32, shape.height as u32);
    let img = if img.width() != w || img.height() != h {
        img.resize_exact(w, h, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let mut out = vec![0f32; shape.len()];
    let plane = shape.height * shape.width;
    match shape.channels {
        1 => {
            for (i, p) in img.to_luma8().pixels().enumerate() {
                out[i] = p.0[0] as f32 / 255.0;
            }
        }
        3 => {
            for (i, p) in img.to_rgb8().pixels().enumerate() {
                for c in 0..3 {
                    out[c * plane + i] = p.0[c] as f32 / 255.0;
                }
            }
        }
        c => return Err(Error::contract(format!("unsupported channel count {c}"))),
    }
    Ok(out)
}

fn ingest_folder(dataset: &str, dir: &Path) -> Result<Images> {
    if !dir.is_dir() {
        return Err(dataset_err(dataset, format!("missing {}; run `ccib fetch {dataset}`", dir.display())));
    }
    let mut paths = Vec::new();
    collect_images(dir, &mut paths)?;
    paths.sort();
    if paths.is_empty() {
        return Err(dataset_err(dataset, format!("no images under {}", dir.display())));
    }
    let manifest = read_manifest(dir).map_err(|_| {
        dataset_err(dataset, format!("no {MANIFEST} under {}; rerun `ccib fetch {dataset}`", dir.display()))
    })?;
    let rel: Vec<String> = paths
        .iter()
        .map(|p| p.strip_prefix(dir).expect("collected under dir").to_string_lossy().into_owned())
        .collect();
    let listed: Vec<String> = rel.iter().filter(|r| manifest.contains_key(*r)).cloned().collect();
    if listed.len() != rel.len() {
        return Err(dataset_err(dataset, format!("{} image files are not in {MANIFEST}", rel.len() - listed.len())));
    }
    verify(dataset, dir, &rel)?;
    let shape = InputShape::new(3, 32, 32);
    let mut pixels = Vec::with_capacity(paths.len() * shape.len());
    for p in &paths {
        pixels.extend(load_image_file(p, shape)?);
    }
    Images::new(shape, pixels)
}

const SYNTHETIC_CLASSES: usize = 4;
pub const SYNTHETIC_SHAPE: InputShape = InputShape { channels: 1, height: 8, width: 8 };

/// Four classes, each a bright quadrant on a dim background plus noise.
fn synthetic(split: Split) -> Result<LabeledDataset> {
    let (n, seed) = match split {
        Split::Train => (400, 1),
        Split::Test => (200, 2),
    };
    let mut r = rng::seeded(seed);
    let mut pixels = Vec::with_capacity(n * SYNTHETIC_SHAPE.len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % SYNTHETIC_CLASSES;
        for y in 0..8 {
            for x in 0..8 {
                let quadrant = (y / 4) * 2 + x / 4;
                let base = if quadrant == c { 0.85 } else { 0.15 };
                pixels.push((base + r.random_range(-0.1..0.1f32)).clamp(0.0, 1.0));
            }
        }
        labels.push(c);
    }
    finish_labeled("synthetic", Images::new(SYNTHETIC_SHAPE, pixels)?, labels)
}

/// Checkerboards with noise; shares the shape of `synthetic`.
fn synthetic_ood() -> Result<Images> {
    let n = 200;
    let mut r = rng::seeded(3);
    let mut pixels = Vec::with_capacity(n * SYNTHETIC_SHAPE.len());
    for _ in 0..n {
        for y in 0..8 {
            for x in 0..8 {
                let base = if (x + y) % 2 == 0 { 0.8 } else { 0.2 };
                pixels.push((base + r.random_range(-0.1..0.1f32)).clamp(0.0, 1.0));
            }
        }
    }
    Images::new(SYNTHETIC_SHAPE, pixels)
}

/// Labeled split of an in-distribution dataset, in file order.
pub fn ingest(dataset: &str, split: Split, data_dir: &Path) -> Result<LabeledDataset> {
    let dir = data_dir.join(dataset);
    match dataset {
        "mnist" | "fashionmnist" => ingest_idx(dataset, &dir, split),
        "cifar10" => ingest_cifar(dataset, &dir, split),
        "synthetic" => synthetic(split),
        other if DATASETS.contains(&other) => Err(dataset_err(other, "has no labels; use it as an OoD set")),
        other => Err(dataset_err(other, format!("unknown dataset (known: {})", DATASETS.join(", ")))),
    }
}

/// Unlabeled OoD stream: the test split of a labeled dataset with its labels
/// dropped, or an image folder.
pub fn ingest_ood(dataset: &str, data_dir: &Path) -> Result<Images> {
    let dir = data_dir.join(dataset);
    match dataset {
        "lsun_resized" | "tinyimagenet_resized" => ingest_folder(dataset, &dir),
        "synthetic_ood" => synthetic_ood(),
        other => Ok(ingest(other, Split::Test, data_dir)?.images),
    }
}

/// Epoch-specific permutation of `0..n` from the data-order stream.
pub fn shuffled_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::indexed_substream(seed, rng::DATA_ORDER, epoch));
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::WriteBytesExt;
    use std::io::Write;

    fn write_idx(dir: &Path, split: Split, imgs: &[[u8; 4]], labels: &[u8]) {
        let [fi, fl] = idx_files(split);
        let mut f = File::create(dir.join(&fi)).unwrap();
        for v in [0x0803u32, imgs.len() as u32, 2, 2] {
            f.write_u32::<BigEndian>(v).unwrap();
        }
        for im in imgs {
            f.write_all(im).unwrap();
        }
        let mut f = File::create(dir.join(&fl)).unwrap();
        for v in [0x0801u32, labels.len() as u32] {
            f.write_u32::<BigEndian>(v).unwrap();
        }
        f.write_all(labels).unwrap();
        let mut m = read_manifest(dir).unwrap_or_default();
        for name in [fi, fl] {
            m.insert(name.clone(), sha256_file(&dir.join(&name)).unwrap());
        }
        write_manifest(dir, &m).unwrap();
    }

    #[test]
    fn reads_idx_and_normalizes() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("mnist");
        fs::create_dir_all(&dir).unwrap();
        write_idx(&dir, Split::Test, &[[0, 255, 51, 0], [255, 255, 0, 0]], &[3, 1]);
        // pinned checksums reject the stand-in files
        assert!(matches!(ingest("mnist", Split::Test, tmp.path()), Err(Error::Checksum { .. })));
        let d = ingest_idx_with("mnist", &dir, Split::Test, &[]).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.images.shape(), InputShape::new(1, 2, 2));
        assert_eq!(d.images.image(0), &[0.0, 1.0, 0.2, 0.0]);
        assert_eq!(d.labels, vec![3, 1]);
        assert_eq!(d.num_classes, 4);
    }

    #[test]
    fn corrupt_file_reports_checksum() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("fashionmnist");
        fs::create_dir_all(&dir).unwrap();
        write_idx(&dir, Split::Train, &[[1, 2, 3, 4], [5, 6, 7, 8]], &[0, 1]);
        let [fi, _] = idx_files(Split::Train);
        let mut bytes = fs::read(dir.join(&fi)).unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        fs::write(dir.join(&fi), bytes).unwrap();
        assert!(matches!(ingest_idx_with("fashionmnist", &dir, Split::Train, &[]), Err(Error::Checksum { .. })));
    }

    #[test]
    fn missing_files_point_at_fetch() {
        let tmp = tempfile::tempdir().unwrap();
        let err = ingest("cifar10", Split::Train, tmp.path()).unwrap_err().to_string();
        assert!(err.contains("ccib fetch cifar10"), "{err}");
        assert!(ingest("nope", Split::Train, tmp.path()).is_err());
        assert!(ingest("lsun_resized", Split::Train, tmp.path()).is_err());
    }

    #[test]
    fn synthetic_sets_are_deterministic() {
        let a = ingest("synthetic", Split::Train, Path::new("unused")).unwrap();
        let b = ingest("synthetic", Split::Train, Path::new("unused")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_classes, 4);
        let o = ingest_ood("synthetic_ood", Path::new("unused")).unwrap();
        assert_eq!(o.shape(), a.images.shape());
    }

    #[test]
    fn shuffle_is_seeded_permutation() {
        let a = shuffled_order(100, 5, 1);
        assert_eq!(a, shuffled_order(100, 5, 1));
        assert_ne!(a, shuffled_order(100, 5, 2));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn image_files_load_as_chw() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("x.png");
        let mut img = image::RgbImage::new(2, 2);
        img.put_pixel(1, 0, image::Rgb([255, 0, 51]));
        img.save(&p).unwrap();
        let v = load_image_file(&p, InputShape::new(3, 2, 2)).unwrap();
        assert_eq!(v[1], 1.0);
        assert_eq!(v[4 + 1], 0.0);
        assert!((v[8 + 1] - 0.2).abs() < 1e-6);
        let g = load_image_file(&p, InputShape::new(1, 4, 4)).unwrap();
        assert_eq!(g.len(), 16);
    }
}
