//! Weight files, single-tensor dumps and PPM image input.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LVWT" | version u16 | config_len u32 | config text (UTF-8 TOML)
//! | entry_count u32 | entries...
//! entry: name_len u32 | name | dtype u8 | rank u32 | extents u64×rank | payload
//! ```
//!
//! Entries are sorted by name. A tensor dump uses the same layout with an
//! empty config and one entry with an empty name.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Module;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"LVWT";
pub const VERSION: u16 = 1;

/// Per-channel RGB mean and standard deviation of the ImageNet training set.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian scalars, `product(shape) × dtype.width()` bytes.
    pub payload: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<E: Element>(name: impl Into<String>, t: &Tensor<E>) -> Self {
        let mut payload = Vec::with_capacity(t.numel() * E::DTYPE.width());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        Entry {
            name: name.into(),
            dtype: E::DTYPE,
            shape: t.shape().to_vec(),
            payload,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_tensor<E: Element>(&self) -> Result<Tensor<E>> {
        if self.dtype != E::DTYPE {
            return Err(Error::Format(format!(
                "entry '{}' stores {}, expected {}",
                self.name,
                self.dtype.name(),
                E::DTYPE.name()
            )));
        }
        let width = self.dtype.width();
        let data = self.payload.chunks_exact(width).map(E::read_le).collect();
        Tensor::from_vec(&self.shape, data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightFile {
    /// Canonical config text; empty for tensor dumps.
    pub config_text: String,
    pub entries: Vec<Entry>,
}

/// SHA-256 (hex) of a canonical config text.
pub fn digest_text(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn config_digest(cfg: &ModelConfig) -> String {
    digest_text(&cfg.canonical_text())
}

impl WeightFile {
    /// Entries sorted by name.
    pub fn from_model<E: Element>(model: &Model<E>) -> Self {
        let mut entries = Vec::new();
        model.visit("", &mut |n, t| entries.push(Entry::from_tensor(n, t)));
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        WeightFile {
            config_text: model.config.canonical_text(),
            entries,
        }
    }

    pub fn digest(&self) -> String {
        digest_text(&self.config_text)
    }

    pub fn element_count(&self) -> u64 {
        self.entries.iter().map(|e| e.numel() as u64).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_text(&mut out, &self.config_text)?;
        out.extend_from_slice(&len_u32(self.entries.len(), "entry count")?.to_le_bytes());
        for e in &self.entries {
            put_text(&mut out, &e.name)?;
            out.push(e.dtype.tag());
            out.extend_from_slice(&len_u32(e.shape.len(), "rank")?.to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic, not an LVWT file".into()));
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let config_text = r.text("config text")?;
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.text("entry name")?;
            let tag = r.array::<1>("dtype")?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Format(format!("entry '{name}': unknown dtype tag {tag}")))?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(64));
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.array("extent")?);
                shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large")))?);
            }
            let len = shape
                .iter()
                .try_fold(dtype.width(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("entry '{name}': payload size overflows")))?;
            let payload = r.take(len, "payload")?.to_vec();
            entries.push(Entry { name, dtype, shape, payload });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        let file = WeightFile { config_text, entries };
        file.check()?;
        Ok(file)
    }

    fn check(&self) -> Result<()> {
        for w in self.entries.windows(2) {
            if w[0].name >= w[1].name {
                return Err(Error::Format(format!(
                    "entries not strictly sorted: '{}' then '{}'",
                    w[0].name, w[1].name
                )));
            }
        }
        for e in &self.entries {
            if e.shape.is_empty() {
                return Err(Error::Format(format!("entry '{}' has rank 0", e.name)));
            }
            if e.payload.len() != e.numel() * e.dtype.width() {
                return Err(Error::Format(format!(
                    "entry '{}': payload is {} bytes, shape {:?} needs {}",
                    e.name,
                    e.payload.len(),
                    e.shape,
                    e.numel() * e.dtype.width()
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        WeightFile::from_bytes(&bytes)
    }

    /// Copies every entry into `model`. Names, shapes and dtypes must match
    /// one to one.
    pub fn apply<E: Element>(&self, model: &mut Model<E>) -> Result<()> {
        let mut seen = 0;
        let mut failure = None;
        model.visit_mut("", &mut |name, t| {
            if failure.is_some() {
                return;
            }
            let found = self
                .entries
                .binary_search_by(|e| e.name.as_str().cmp(name))
                .map_err(|_| Error::Format(format!("file has no entry '{name}'")))
                .and_then(|i| {
                    let e = &self.entries[i];
                    if e.shape != t.shape() {
                        return Err(Error::Format(format!(
                            "entry '{name}' has shape {:?}, model expects {:?}",
                            e.shape,
                            t.shape()
                        )));
                    }
                    e.to_tensor::<E>()
                });
            match found {
                Ok(v) => {
                    *t = v.with_requires_grad(t.requires_grad());
                    seen += 1;
                }
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if seen != self.entries.len() {
            return Err(Error::Format(format!(
                "file has {} entries, model uses {seen}",
                self.entries.len()
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated file: {what} needs {n} bytes at offset {}, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("slice of length N"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

fn put_text(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.extend_from_slice(&len_u32(s.len(), "text length")?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Writes through a sibling temporary file and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    let result = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn save<E: Element>(model: &Model<E>, path: impl AsRef<Path>) -> Result<()> {
    WeightFile::from_model(model).write(path)
}

/// Loads weights saved for `expected`; the stored config digest must match.
pub fn load<E: Element>(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model<E>> {
    let file = WeightFile::read(path)?;
    let want = config_digest(expected);
    let found = file.digest();
    if want != found {
        return Err(Error::DigestMismatch { expected: want, found });
    }
    let mut model = Model::build(expected, 0)?;
    file.apply(&mut model)?;
    Ok(model)
}

/// Loads weights with the architecture recorded in the file itself.
pub fn load_embedded<E: Element>(path: impl AsRef<Path>) -> Result<Model<E>> {
    let file = WeightFile::read(path)?;
    let cfg = ModelConfig::from_toml(&file.config_text)?;
    let mut model = Model::build(&cfg, 0)?;
    file.apply(&mut model)?;
    Ok(model)
}

pub fn dump_tensor<E: Element>(t: &Tensor<E>, path: impl AsRef<Path>) -> Result<()> {
    if t.rank() == 0 {
        return Err(Error::Format("cannot dump a rank-0 tensor".into()));
    }
    WeightFile {
        config_text: String::new(),
        entries: vec![Entry::from_tensor("", t)],
    }
    .write(path)
}

pub fn read_tensor<E: Element>(path: impl AsRef<Path>) -> Result<Tensor<E>> {
    let file = WeightFile::read(path)?;
    match file.entries.as_slice() {
        [e] if file.config_text.is_empty() && e.name.is_empty() => e.to_tensor(),
        _ => Err(Error::Format(format!(
            "expected a single unnamed tensor, found {} entries",
            file.entries.len()
        ))),
    }
}

/// Decodes a binary (P6) PPM into a `3×H×W` tensor: each sample is scaled
/// to `[0, 1]` by the file's maxval, then `(v - mean[c]) / std[c]`.
pub fn parse_ppm<E: Element>(bytes: &[u8], mean: [f64; 3], std: [f64; 3]) -> Result<Tensor<E>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        match bytes.get(pos) {
            None => return Err(Error::Format("truncated PPM header".into())),
            Some(b'#') => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => pos += 1,
            Some(_) => {
                let start = pos;
                while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                    pos += 1;
                }
                fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or(""));
            }
        }
    }
    if fields[0] != "P6" {
        return Err(Error::Format(format!("not a binary PPM (magic '{}')", fields[0])));
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PPM {what} '{s}'")))
    };
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if !(1..=255).contains(&maxval) {
        return Err(Error::Format(format!("PPM maxval {maxval} is not 8-bit")));
    }
    if std.iter().any(|&s| s == 0.0) {
        return Err(Error::config("normalization std must be nonzero"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = w
        .checked_mul(h)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| Error::Format(format!("PPM extents {w}×{h} overflow")))?;
    let raster = bytes
        .get(pos..pos.saturating_add(n))
        .ok_or_else(|| Error::Format(format!("PPM raster needs {n} bytes, {} present", bytes.len().saturating_sub(pos))))?;
    let mut data = vec![0.0f64; n];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            let v = px[c] as f64 / maxval as f64;
            data[c * w * h + i] = (v - mean[c]) / std[c];
        }
    }
    Tensor::from_f64(&[3, h, w], &data)
}

pub fn read_ppm<E: Element>(path: impl AsRef<Path>, mean: [f64; 3], std: [f64; 3]) -> Result<Tensor<E>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes, mean, std)
}
