//! Downloads datasets into the layout [`super::data`] expects. This is the only
//! code that uses the network.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, WriteBytesExt};
use flate2::read::GzDecoder;
use md5::Md5;
use rand::seq::SliceRandom;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use ureq::tls::{RootCerts, TlsConfig};
use ureq::Agent;

use super::data::{self, idx_files, Split, MANIFEST};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy)]
enum Pin {
    Sha256(&'static str),
    Md5(&'static str),
    /// The upstream publishes no checksum; the archive hash is recorded on first download.
    Recorded,
}

#[derive(Debug, Clone, Copy)]
struct Source {
    dataset: &'static str,
    url: &'static str,
    pin: Pin,
}

const SOURCES: &[Source] = &[
    Source {
        dataset: "mnist",
        url: "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz",
        pin: Pin::Sha256("8f87f2d0d9133e6c9f7012d6d26bb05409e7e870a1de21d1a600b8d400cc07ed"),
    },
    Source {
        dataset: "fashionmnist",
        url: "https://registry.npmjs.org/fashion-mnist/-/fashion-mnist-1.1.0.tgz",
        pin: Pin::Sha256("7fe48b6f9470efb6e15354b1b2005d60a544177bd24cf4b5da500e3e83d1f396"),
    },
    Source {
        dataset: "cifar10",
        url: "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
        pin: Pin::Md5("c32a1d4ab5d03f1284b67883e8d87530"),
    },
    Source {
        dataset: "lsun_resized",
        url: "https://www.dropbox.com/s/moqh2wh8696c3yl/LSUN_resize.tar.gz?dl=1",
        pin: Pin::Recorded,
    },
    Source {
        dataset: "tinyimagenet_resized",
        url: "https://www.dropbox.com/s/kp3my3412u5k9rl/Imagenet_resize.tar.gz?dl=1",
        pin: Pin::Recorded,
    },
];

/// Training examples kept in the FashionMNIST train split; the rest form the test split.
const FASHION_TRAIN: usize = 60_000;
const FASHION_SPLIT_SEED: u64 = 0x5eed_fa51;

#[derive(Debug, Clone)]
pub struct FetchReport {
    pub dataset: String,
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub archive_sha256: String,
}

fn network_err(url: &str, message: impl ToString) -> Error {
    Error::Network { url: url.to_string(), message: message.to_string() }
}

/// Streams `url` into `dest`, returning (sha256, md5) of the bytes.
fn download(url: &str, dest: &Path) -> Result<(String, String)> {
    // Trust the system certificate store so TLS-intercepting proxies work.
    let tls = TlsConfig::builder().root_certs(RootCerts::PlatformVerifier).build();
    let agent: Agent = Agent::config_builder().tls_config(tls).build().into();
    let mut resp = agent.get(url).call().map_err(|e| network_err(url, e))?;
    let mut reader = resp.body_mut().as_reader();
    let mut out = BufWriter::new(File::create(dest)?);
    let mut sha = Sha256::new();
    let mut md5 = Md5::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf).map_err(|e| network_err(url, e))?;
        if n == 0 {
            break;
        }
        sha.update(&buf[..n]);
        md5.update(&buf[..n]);
        out.write_all(&buf[..n])?;
    }
    out.flush()?;
    Ok((hex::encode(sha.finalize()), hex::encode(md5.finalize())))
}

fn check_pin(source: &Source, archive: &Path, sha: &str, md5: &str, dir: &Path) -> Result<()> {
    let (expected, actual) = match source.pin {
        Pin::Sha256(e) => (e.to_string(), sha.to_string()),
        Pin::Md5(e) => (e.to_string(), md5.to_string()),
        Pin::Recorded => {
            let record = dir.join("ARCHIVE_SHA256");
            match fs::read_to_string(&record) {
                Ok(prev) => (prev.trim().to_string(), sha.to_string()),
                Err(_) => {
                    fs::write(&record, format!("{sha}\n"))?;
                    return Ok(());
                }
            }
        }
    };
    if expected != actual {
        return Err(Error::Checksum { path: archive.to_path_buf(), expected, actual });
    }
    Ok(())
}

/// Downloads, verifies and unpacks `dataset` under `data_dir/dataset`.
pub fn fetch(dataset: &str, data_dir: &Path) -> Result<FetchReport> {
    let source = SOURCES.iter().find(|s| s.dataset == dataset).ok_or_else(|| Error::Dataset {
        dataset: dataset.to_string(),
        message: format!(
            "nothing to fetch (downloadable: {})",
            SOURCES.iter().map(|s| s.dataset).collect::<Vec<_>>().join(", ")
        ),
    })?;
    let dir = data_dir.join(dataset);
    fs::create_dir_all(&dir)?;
    let archive = dir.join("download.partial");
    let (sha, md5) = download(source.url, &archive)?;
    check_pin(source, &archive, &sha, &md5, &dir)?;
    let files = unpack(dataset, &archive, &dir)?;
    fs::remove_file(&archive)?;
    let mut manifest = BTreeMap::new();
    for f in &files {
        manifest.insert(f.clone(), data::sha256_file(&dir.join(f))?);
    }
    data::write_manifest(&dir, &manifest)?;
    Ok(FetchReport { dataset: dataset.to_string(), dir, files, archive_sha256: sha })
}

fn unpack(dataset: &str, archive: &Path, dir: &Path) -> Result<Vec<String>> {
    match dataset {
        "mnist" => unpack_flat(archive, dir, |p| {
            let name = p.strip_prefix("package/data/")?;
            name.ends_with("-ubyte").then(|| name.to_string())
        }),
        "cifar10" => unpack_flat(archive, dir, |p| {
            let name = p.strip_prefix("cifar-10-batches-bin/")?;
            name.ends_with(".bin").then(|| name.to_string())
        }),
        "fashionmnist" => unpack_fashion(archive, dir),
        _ => unpack_flat(archive, dir, |p| {
            let lower = p.to_ascii_lowercase();
            [".jpg", ".jpeg", ".png"].iter().any(|e| lower.ends_with(e)).then(|| p.to_string())
        }),
    }
}

/// Extracts regular files whose archive path maps to a destination name.
fn unpack_flat(archive: &Path, dir: &Path, map: impl Fn(&str) -> Option<String>) -> Result<Vec<String>> {
    let mut tar = tar::Archive::new(GzDecoder::new(File::open(archive)?));
    let mut files = Vec::new();
    for entry in tar.entries()? {
        let mut entry = entry?;
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let path = entry.path()?.to_string_lossy().into_owned();
        let Some(name) = map(&path) else { continue };
        if name.split('/').any(|c| c == ".." || c.is_empty()) {
            continue;
        }
        let dest = dir.join(&name);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut out = File::create(&dest)?;
        io::copy(&mut entry, &mut out)?;
        files.push(name);
    }
    if files.is_empty() {
        return Err(Error::Dataset { dataset: archive.display().to_string(), message: "archive held no data files".into() });
    }
    files.sort();
    Ok(files)
}

#[derive(Deserialize)]
struct ClassFile {
    data: Vec<Vec<u8>>,
}

/// The npm package stores one JSON file of 28×28 images per class; they are
/// shuffled with a fixed seed and written as IDX train/test splits.
fn unpack_fashion(archive: &Path, dir: &Path) -> Result<Vec<String>> {
    let mut tar = tar::Archive::new(GzDecoder::new(File::open(archive)?));
    let mut samples: Vec<(u8, Vec<u8>)> = Vec::new();
    let mut seen = [false; 10];
    for entry in tar.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.to_string_lossy().into_owned();
        let Some(label) = path
            .strip_prefix("package/src/clothes/")
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|n| n.parse::<u8>().ok())
        else {
            continue;
        };
        if label > 9 {
            continue;
        }
        let mut text = String::new();
        entry.read_to_string(&mut text)?;
        let parsed: ClassFile = serde_json::from_str(&text).map_err(|e| Error::Dataset {
            dataset: "fashionmnist".into(),
            message: format!("{path}: {e}"),
        })?;
        // the class files carry a few empty placeholder rows
        for img in parsed.data.into_iter().filter(|img| !img.is_empty()) {
            if img.len() != 784 {
                return Err(Error::Dataset {
                    dataset: "fashionmnist".into(),
                    message: format!("{path}: image with {} pixels", img.len()),
                });
            }
            samples.push((label, img));
        }
        seen[label as usize] = true;
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::Dataset { dataset: "fashionmnist".into(), message: "archive is missing class files".into() });
    }
    // entries arrive in archive order; sort first so the shuffle does not depend on it
    samples.sort_by_key(|s| s.0);
    samples.shuffle(&mut rng::seeded(FASHION_SPLIT_SEED));
    let (train, test) = samples.split_at(FASHION_TRAIN.min(samples.len()));
    let mut files = Vec::new();
    for (split, part) in [(Split::Train, train), (Split::Test, test)] {
        let [fi, fl] = idx_files(split);
        write_idx(&dir.join(&fi), &dir.join(&fl), part)?;
        files.push(fi);
        files.push(fl);
    }
    Ok(files)
}

fn write_idx(images: &Path, labels: &Path, samples: &[(u8, Vec<u8>)]) -> Result<()> {
    let mut f = BufWriter::new(File::create(images)?);
    for v in [0x0803u32, samples.len() as u32, 28, 28] {
        f.write_u32::<BigEndian>(v)?;
    }
    for (_, img) in samples {
        f.write_all(img)?;
    }
    f.flush()?;
    let mut f = BufWriter::new(File::create(labels)?);
    for v in [0x0801u32, samples.len() as u32] {
        f.write_u32::<BigEndian>(v)?;
    }
    for (l, _) in samples {
        f.write_u8(*l)?;
    }
    f.flush()?;
    Ok(())
}

/// Whether every file `ingest` needs is already present.
pub fn is_fetched(dataset: &str, data_dir: &Path) -> bool {
    let dir = data_dir.join(dataset);
    if !dir.join(MANIFEST).is_file() {
        return false;
    }
    let needed: Vec<String> = match dataset {
        "mnist" | "fashionmnist" => [Split::Train, Split::Test].into_iter().flat_map(idx_files).collect(),
        "cifar10" => [Split::Train, Split::Test].into_iter().flat_map(data::cifar_files).collect(),
        _ => Vec::new(),
    };
    needed.iter().all(|f| dir.join(f).is_file())
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;

    fn tarball(path: &Path, entries: &[(&str, Vec<u8>)]) {
        let gz = GzEncoder::new(File::create(path).unwrap(), Compression::fast());
        let mut b = tar::Builder::new(gz);
        for (name, bytes) in entries {
            let mut h = tar::Header::new_gnu();
            h.set_size(bytes.len() as u64);
            h.set_mode(0o644);
            h.set_cksum();
            b.append_data(&mut h, name, bytes.as_slice()).unwrap();
        }
        b.into_inner().unwrap().finish().unwrap();
    }

    #[test]
    fn fashion_json_becomes_idx() {
        let tmp = tempfile::tempdir().unwrap();
        let archive = tmp.path().join("a.tgz");
        let mut entries = Vec::new();
        for c in 0..10u8 {
            let img: Vec<String> = (0..784).map(|i| ((i + c as usize) % 256).to_string()).collect();
            let json = format!("{{\"data\":[[{}],[],[{}]]}}", img.join(","), img.join(","));
            entries.push((format!("package/src/clothes/{c}.json"), json.into_bytes()));
        }
        let refs: Vec<(&str, Vec<u8>)> = entries.iter().map(|(n, b)| (n.as_str(), b.clone())).collect();
        tarball(&archive, &refs);
        let out = tmp.path().join("fashionmnist");
        fs::create_dir_all(&out).unwrap();
        let files = unpack_fashion(&archive, &out).unwrap();
        assert_eq!(files.len(), 4);
        let mut manifest = BTreeMap::new();
        for f in &files {
            manifest.insert(f.clone(), data::sha256_file(&out.join(f)).unwrap());
        }
        data::write_manifest(&out, &manifest).unwrap();
        let train = data::ingest_idx_with("fashionmnist", &out, Split::Train, &[]).unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(train.num_classes, 10);
        let c = train.labels[0];
        assert_eq!(train.images.image(0)[0], c as f32 / 255.0);
    }

    #[test]
    fn flat_unpack_skips_unrelated_entries() {
        let tmp = tempfile::tempdir().unwrap();
        let archive = tmp.path().join("a.tgz");
        tarball(
            &archive,
            &[("package/data/t10k-labels-idx1-ubyte", vec![1, 2]), ("package/README.md", vec![3])],
        );
        let files = unpack(
            "mnist",
            &archive,
            tmp.path(),
        )
        .unwrap();
        assert_eq!(files, vec!["t10k-labels-idx1-ubyte".to_string()]);
    }

    #[test]
    fn unknown_dataset_is_rejected_without_network() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(fetch("synthetic", tmp.path()), Err(Error::Dataset { .. })));
    }
}
