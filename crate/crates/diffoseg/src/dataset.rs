//! On-disk multi-rater datasets.
//!
//! A dataset is a directory holding `manifest.txt` and `samples/<id>.bin`.
//!
//! The manifest is plain text, one `key=value` per line:
//!
//! ```text
//! version=1
//! kind=multirater
//! n=400
//! experts=4
//! height=32
//! width=32
//! channels=1
//! sample=00000
//! sample=00001
//! ...
//! ```
//!
//! Sample files (integers little-endian):
//!
//! ```text
//! magic    4 bytes "DOSS"
//! version  u32     1
//! id       u16 length + UTF-8 bytes
//! count    u8      number of arrays (2: image, masks)
//! arrays:  u8 dtype (0 = f32, 1 = u8), u8 ndim, ndim x u32 dims, data
//! ```
//!
//! The image array is `f32 [C, H, W]`, the mask array `u8 [M, H, W]`.

use std::fs;
use std::path::{Path, PathBuf};

use diffoseg_core::synth::{generate_dataset, ExpertStyle};
use diffoseg_core::MultiRaterSample;

use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";
pub const SAMPLES_DIR: &str = "samples";
pub const SAMPLE_MAGIC: &[u8; 4] = b"DOSS";
pub const FORMAT_VERSION: u32 = 1;
const KIND: &str = "multirater";

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Split directory names produced by `gen-data`.
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub experts: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<MultiRaterSample>,
}

impl Dataset {
    pub fn new(samples: Vec<MultiRaterSample>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::config("empty dataset"))?;
        let (experts, channels, height, width) = (first.experts(), first.channels, first.height, first.width);
        for s in &samples {
            if s.experts() != experts || s.channels != channels || s.height != height || s.width != width {
                return Err(Error::config(format!("sample {} differs in shape from the first sample", s.id)));
            }
            if s.image.len() != channels * height * width || s.annotations.iter().any(|m| m.len() != height * width) {
                return Err(Error::config(format!("sample {} has inconsistent array sizes", s.id)));
            }
        }
        Ok(Self { experts, channels, height, width, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let sdir = dir.join(SAMPLES_DIR);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let mut manifest = format!(
            "version={FORMAT_VERSION}\nkind={KIND}\nn={}\nexperts={}\nheight={}\nwidth={}\nchannels={}\n",
            self.len(),
            self.experts,
            self.height,
            self.width,
            self.channels
        );
        for s in &self.samples {
            if s.id.is_empty() || s.id.contains(['/', '\\', '\n', '=']) || s.id.starts_with('.') {
                return Err(Error::config(format!("sample id '{}' is not usable as a file name", s.id)));
            }
            manifest.push_str(&format!("sample={}\n", s.id));
            let path = sdir.join(format!("{}.bin", s.id));
            fs::write(&path, encode_sample(s)).map_err(|e| Error::io(&path, e))?;
        }
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let bad = |reason: String| Error::format(&mpath, reason);
        let mut fields = std::collections::BTreeMap::new();
        let mut ids = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line without '=': {line}")))?;
            if k == "sample" {
                ids.push(v.to_string());
            } else {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let num = |key: &str| -> Result<usize> {
            fields
                .get(key)
                .ok_or_else(|| bad(format!("missing '{key}'")))?
                .parse()
                .map_err(|_| bad(format!("'{key}' is not a number")))
        };
        let version = num("version")?;
        if version != FORMAT_VERSION as usize {
            return Err(bad(format!("unsupported dataset version {version}")));
        }
        if fields.get("kind").map(String::as_str) != Some(KIND) {
            return Err(bad("kind must be 'multirater'".into()));
        }
        let (n, experts, height, width, channels) =
            (num("n")?, num("experts")?, num("height")?, num("width")?, num("channels")?);
        if ids.len() != n {
            return Err(bad(format!("manifest lists {} samples but n={n}", ids.len())));
        }
        let mut samples = Vec::with_capacity(n);
        for id in ids {
            let path = dir.join(SAMPLES_DIR).join(format!("{id}.bin"));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let s = decode_sample(&bytes, &path)?;
            if s.id != id {
                return Err(Error::format(&path, format!("file holds sample '{}', manifest says '{id}'", s.id)));
            }
            if s.experts() != experts || s.channels != channels || s.height != height || s.width != width {
                return Err(Error::format(&path, "dimensions disagree with the manifest header"));
            }
            samples.push(s);
        }
        Self::new(samples)
    }
}

/// Sizes of the `train`, `val` and `test` splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { train: 400, val: 50, test: 50 }
    }
}

/// Synthetic train/val/test splits drawn from one generator seed; sample
/// indices (and ids) run consecutively across the splits.
pub fn generate_splits(
    sizes: SplitSizes,
    height: usize,
    width: usize,
    styles: &[ExpertStyle],
    seed: u64,
) -> Result<[Dataset; 3]> {
    let all = generate_dataset(sizes.train + sizes.val + sizes.test, height, width, styles.len(), styles, seed)?;
    let mut it = all.into_iter();
    let mut take = |n: usize| Dataset::new(it.by_ref().take(n).collect());
    Ok([take(sizes.train)?, take(sizes.val)?, take(sizes.test)?])
}

/// Save splits under `root/<split>`.
pub fn write_splits(root: &Path, splits: &[Dataset; 3]) -> Result<()> {
    for (name, data) in SPLITS.iter().zip(splits) {
        data.save(&split_dir(root, name))?;
    }
    Ok(())
}

/// Load `root/<split>`.
pub fn load_split(root: &Path, split: &str) -> Result<Dataset> {
    Dataset::load(&split_dir(root, split))
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

pub fn encode_sample(s: &MultiRaterSample) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + s.image.len() * 4 + s.annotations.len() * s.pixels());
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(s.id.len() as u16).to_le_bytes());
    out.extend_from_slice(s.id.as_bytes());
    out.push(2);
    out.push(DTYPE_F32);
    push_dims(&mut out, &[s.channels, s.height, s.width]);
    for v in &s.image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(DTYPE_U8);
    push_dims(&mut out, &[s.annotations.len(), s.height, s.width]);
    for m in &s.annotations {
        out.extend_from_slice(m);
    }
    out
}

fn push_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub fn decode_sample(bytes: &[u8], origin: &Path) -> Result<MultiRaterSample> {
    let bad = |reason: &str| Error::format(origin, reason);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).ok_or_else(|| bad("length overflow"))?;
        let s = bytes.get(pos..end).ok_or_else(|| bad("truncated sample file"))?;
        pos = end;
        Ok(s)
    };
    if take(4)? != SAMPLE_MAGIC {
        return Err(bad("not a sample file (bad magic)"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported sample version {version}")));
    }
    let id_len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
    let id = std::str::from_utf8(take(id_len)?).map_err(|_| bad("id is not UTF-8"))?.to_string();
    if take(1)?[0] != 2 {
        return Err(bad("expected exactly two arrays"));
    }
    let mut read_array = |dtype: u8| -> Result<(Vec<usize>, &[u8])> {
        if take(1)?[0] != dtype {
            return Err(bad("unexpected array dtype"));
        }
        let ndim = take(1)?[0] as usize;
        if ndim != 3 {
            return Err(bad("arrays must be three-dimensional"));
        }
        let mut dims = Vec::with_capacity(3);
        for _ in 0..3 {
            dims.push(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize);
        }
        let width = if dtype == DTYPE_F32 { 4 } else { 1 };
        let len = dims
            .iter()
            .try_fold(width, |a: usize, &d| a.checked_mul(d))
            .ok_or_else(|| bad("array too large"))?;
        Ok((dims, take(len)?))
    };
    let (idims, raw) = read_array(DTYPE_F32)?;
    let image: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let (mdims, raw) = read_array(DTYPE_U8)?;
    if mdims[1] != idims[1] || mdims[2] != idims[2] {
        return Err(bad("mask and image dimensions differ"));
    }
    if raw.iter().any(|&v| v > 1) {
        return Err(bad("mask values must be 0 or 1"));
    }
    let hw = mdims[1] * mdims[2];
    let annotations = if hw == 0 { vec![Vec::new(); mdims[0]] } else { raw.chunks_exact(hw).map(<[u8]>::to_vec).collect() };
    if pos != bytes.len() {
        return Err(bad("trailing bytes after the mask array"));
    }
    Ok(MultiRaterSample {
        id,
        channels: idims[0],
        height: idims[1],
        width: idims[2],
        image,
        annotations,
    })
}
