//! MNIST (IDX) and CIFAR-10 (binary batch) loaders, query/train sampling and
//! split files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic number {found} (expected {expected})")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated input: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("CIFAR-10 batch size {0} is not a multiple of {CIFAR_RECORD}")]
    BadCifarSize(usize),
    #[error("label {label} at byte offset {offset} is not a class id 0..9")]
    BadLabel { offset: usize, label: u8 },
    #[error("images have differing shapes")]
    ShapeMismatch,
    #[error("need {needed} items, dataset has {available}{detail}")]
    Insufficient {
        needed: usize,
        available: usize,
        detail: String,
    },
    #[error("query set would leave an empty database")]
    EmptyDatabase,
    #[error("split file line {line}: {msg}")]
    SplitFormat { line: usize, msg: String },
    #[error("no dataset files found under {0}")]
    NotFound(PathBuf),
}

/// Images with class labels. Pixels are raw bytes, channel-major per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    /// Position of each item in the source collection.
    pub ids: Vec<u32>,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` as a `[C, H, W]` tensor of raw pixel values 0..255.
    pub fn image(&self, i: usize) -> Tensor {
        let data = self.image_bytes(i).iter().map(|&b| f64::from(b)).collect();
        Tensor::from_parts(vec![self.channels, self.height, self.width], data)
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    /// Items at the given positions, keeping their ids.
    pub fn subset(&self, positions: &[u32]) -> LabeledImageSet {
        let n = self.image_len();
        let mut pixels = Vec::with_capacity(positions.len() * n);
        for &p in positions {
            pixels.extend_from_slice(self.image_bytes(p as usize));
        }
        LabeledImageSet {
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels,
            labels: positions.iter().map(|&p| self.labels[p as usize]).collect(),
            ids: positions.iter().map(|&p| self.ids[p as usize]).collect(),
        }
    }

    /// Concatenates sets of equal image shape; ids are renumbered 0..n.
    pub fn concat(sets: Vec<LabeledImageSet>) -> Result<LabeledImageSet, DataError> {
        let mut it = sets.into_iter();
        let mut out = it.next().ok_or(DataError::ShapeMismatch)?;
        for s in it {
            if (s.channels, s.height, s.width) != (out.channels, out.height, out.width) {
                return Err(DataError::ShapeMismatch);
            }
            out.pixels.extend(s.pixels);
            out.labels.extend(s.labels);
        }
        out.ids = (0..out.labels.len() as u32).collect();
        Ok(out)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Reads a file, transparently gunzipping it when it starts with the gzip
/// magic bytes.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = std::fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn take(bytes: &[u8], offset: usize, needed: usize) -> Result<&[u8], DataError> {
    bytes.get(offset..offset + needed).ok_or(DataError::Truncated {
        offset,
        needed,
        len: bytes.len(),
    })
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    let b = take(bytes, offset, 4)?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX image file: magic 2051, count, rows, cols (big-endian),
/// then unsigned-byte pixels in row-major order.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let pixels = take(bytes, 16, n * rows * cols)?.to_vec();
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    Ok(take(bytes, 8, n)?.to_vec())
}

pub fn encode_idx_images(set: &LabeledImageSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + set.pixels.len());
    for v in [IDX_IMAGES_MAGIC, set.len() as u32, set.height as u32, set.width as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&set.pixels);
    out
}

pub fn encode_idx_labels(set: &LabeledImageSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + set.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend_from_slice(&set.labels);
    out
}

pub fn mnist_from_bytes(images: &[u8], labels: &[u8]) -> Result<LabeledImageSet, DataError> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if let Some(i) = labels.iter().position(|&l| l > 9) {
        return Err(DataError::BadLabel {
            offset: 8 + i,
            label: labels[i],
        });
    }
    Ok(LabeledImageSet {
        channels: 1,
        height: rows,
        width: cols,
        pixels,
        labels,
        ids: (0..n as u32).collect(),
    })
}

/// Loads an IDX image/label file pair (optionally gzipped).
pub fn load_mnist(images: &Path, labels: &Path) -> Result<LabeledImageSet, DataError> {
    mnist_from_bytes(&read_maybe_gz(images)?, &read_maybe_gz(labels)?)
}

/// Parses one CIFAR-10 binary batch: records of a label byte followed by
/// 3072 pixel bytes (R plane, G plane, B plane, each 32x32 row-major).
pub fn parse_cifar_batch(bytes: &[u8]) -> Result<LabeledImageSet, DataError> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::BadCifarSize(bytes.len()));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(DataError::BadLabel {
                offset: i * CIFAR_RECORD,
                label: rec[0],
            });
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(LabeledImageSet {
        channels: 3,
        height: 32,
        width: 32,
        pixels,
        labels,
        ids: (0..n as u32).collect(),
    })
}

pub fn encode_cifar_batch(set: &LabeledImageSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(set.len() * CIFAR_RECORD);
    for i in 0..set.len() {
        out.push(set.labels[i]);
        out.extend_from_slice(set.image_bytes(i));
    }
    out
}

/// Loads and concatenates CIFAR-10 batch files in the given order.
pub fn load_cifar10<P: AsRef<Path>>(batches: &[P]) -> Result<LabeledImageSet, DataError> {
    let sets = batches
        .iter()
        .map(|p| parse_cifar_batch(&read_maybe_gz(p.as_ref())?))
        .collect::<Result<Vec<_>, _>>()?;
    LabeledImageSet::concat(sets)
}

fn first_existing(dir: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| dir.join(n)).find(|p| p.is_file())
}

/// Loads MNIST from a directory holding the standard file names (plain or
/// `.gz`). The training files are required; the `t10k` test files are
/// appended when present.
pub fn load_mnist_dir(dir: &Path) -> Result<LabeledImageSet, DataError> {
    let pair = |prefix: &str| {
        let img = first_existing(
            dir,
            &[&format!("{prefix}-images-idx3-ubyte"), &format!("{prefix}-images-idx3-ubyte.gz"), &format!("{prefix}-images.idx3-ubyte")],
        )?;
        let lbl = first_existing(
            dir,
            &[&format!("{prefix}-labels-idx1-ubyte"), &format!("{prefix}-labels-idx1-ubyte.gz"), &format!("{prefix}-labels.idx1-ubyte")],
        )?;
        Some((img, lbl))
    };
    let (img, lbl) = pair("train").ok_or_else(|| DataError::NotFound(dir.to_path_buf()))?;
    let mut sets = vec![load_mnist(&img, &lbl)?];
    if let Some((img, lbl)) = pair("t10k") {
        sets.push(load_mnist(&img, &lbl)?);
    }
    LabeledImageSet::concat(sets)
}

/// Loads `data_batch_1..5.bin` then `test_batch.bin` from a directory,
/// skipping missing files (at least one must exist).
pub fn load_cifar10_dir(dir: &Path) -> Result<LabeledImageSet, DataError> {
    let names = [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
        "test_batch.bin",
    ];
    let found: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).filter(|p| p.is_file()).collect();
    if found.is_empty() {
        return Err(DataError::NotFound(dir.to_path_buf()));
    }
    load_cifar10(&found)
}

/// Query and training item positions drawn from one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub seed: u64,
    pub total: usize,
    pub balanced: bool,
    pub query: Vec<u32>,
    pub train: Vec<u32>,
}

impl SplitSpec {
    /// Every item outside the query set (so it includes the training items).
    pub fn database(&self) -> Vec<u32> {
        let q: BTreeSet<u32> = self.query.iter().copied().collect();
        (0..self.total as u32).filter(|i| !q.contains(i)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# hashlab split\n");
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "total {}", self.total);
        let _ = writeln!(s, "balanced {}", self.balanced);
        for q in &self.query {
            let _ = writeln!(s, "query {q}");
        }
        for t in &self.train {
            let _ = writeln!(s, "train {t}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<SplitSpec, DataError> {
        let mut split = SplitSpec {
            seed: 0,
            total: 0,
            balanced: false,
            query: Vec::new(),
            train: Vec::new(),
        };
        let mut have_total = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| DataError::SplitFormat {
                line: i + 1,
                msg: msg.to_string(),
            };
            let (key, value) = line.split_once(' ').ok_or_else(|| err("expected `<key> <value>`"))?;
            let value = value.trim();
            match key {
                "seed" => split.seed = value.parse().map_err(|_| err("bad seed"))?,
                "total" => {
                    split.total = value.parse().map_err(|_| err("bad total"))?;
                    have_total = true;
                }
                "balanced" => split.balanced = value.parse().map_err(|_| err("bad flag"))?,
                "query" => split.query.push(value.parse().map_err(|_| err("bad id"))?),
                "train" => split.train.push(value.parse().map_err(|_| err("bad id"))?),
                _ => return Err(err("unknown key")),
            }
        }
        if !have_total {
            return Err(DataError::SplitFormat {
                line: 0,
                msg: "missing `total` header".into(),
            });
        }
        let q: BTreeSet<u32> = split.query.iter().copied().collect();
        if split.query.iter().chain(&split.train).any(|&i| i as usize >= split.total)
            || q.len() != split.query.len()
            || split.train.iter().any(|t| q.contains(t))
        {
            return Err(DataError::SplitFormat {
                line: 0,
                msg: "ids out of range, duplicated, or shared by query and train".into(),
            });
        }
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_text()).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<SplitSpec, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        SplitSpec::from_text(&text)
    }
}

/// Samples disjoint query and training sets without replacement. With
/// `balanced`, every class contributes `n / classes` items to each set
/// (remainders go to the lowest class ids).
pub fn sample_split(
    data: &LabeledImageSet,
    n_query: usize,
    n_train: usize,
    seed: u64,
    balanced: bool,
) -> Result<SplitSpec, DataError> {
    let size = data.len();
    if n_query >= size {
        return Err(DataError::EmptyDatabase);
    }
    if n_query + n_train > size {
        return Err(DataError::Insufficient {
            needed: n_query + n_train,
            available: size,
            detail: String::new(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut query, mut train) = if balanced {
        let counts = data.class_counts();
        let classes = counts.len();
        let mut by_class: Vec<Vec<u32>> = vec![Vec::new(); classes];
        for (i, &l) in data.labels.iter().enumerate() {
            by_class[l as usize].push(i as u32);
        }
        let share = |n: usize, c: usize| n / classes + usize::from(c < n % classes);
        let mut query = Vec::with_capacity(n_query);
        let mut train = Vec::with_capacity(n_train);
        for (c, mut items) in by_class.into_iter().enumerate() {
            let (nq, nt) = (share(n_query, c), share(n_train, c));
            if nq + nt > items.len() {
                return Err(DataError::Insufficient {
                    needed: nq + nt,
                    available: items.len(),
                    detail: format!(" in class {c}"),
                });
            }
            items.shuffle(&mut rng);
            query.extend_from_slice(&items[..nq]);
            train.extend_from_slice(&items[nq..nq + nt]);
        }
        (query, train)
    } else {
        let mut all: Vec<u32> = (0..size as u32).collect();
        all.shuffle(&mut rng);
        (all[..n_query].to_vec(), all[n_query..n_query + n_train].to_vec())
    };
    query.sort_unstable();
    train.sort_unstable();
    Ok(SplitSpec {
        seed,
        total: size,
        balanced,
        query,
        train,
    })
}
