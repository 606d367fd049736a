//! On-disk dataset: a `manifest` text file plus one binary file per subset.
//!
//! Manifest lines: `subset_id, layout_signature, ch1;ch2;..., sample_rate,
//! num_samples`. Subset files (`<subset_id>.hsub`):
//!
//! ```text
//! "HSUB"  u32 version  u32 C  u32 T  f64 sample_rate
//! C × (u32 name length, name bytes)
//! num_samples × (C × T f32, row-major)
//! ```
//!
//! Optional labels live next to each subset in `<subset_id>.labels`, one
//! class index per line.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const SUBSET_MAGIC: &[u8; 4] = b"HSUB";
pub const SUBSET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub subset_id: String,
    pub signature: String,
    pub channels: Vec<String>,
    pub sample_rate: f64,
    pub num_samples: usize,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        format!(
            "{}, {}, {}, {}, {}",
            self.subset_id,
            self.signature,
            self.channels.join(";"),
            self.sample_rate,
            self.num_samples
        )
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out: Vec<ManifestEntry> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::Manifest(format!("line {}: {m}", n + 1));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(bad(&format!("expected 5 fields, found {}", f.len())));
        }
        if f[0].is_empty() || f[0].contains(['/', '\\']) {
            return Err(bad("invalid subset id"));
        }
        if out.iter().any(|e| e.subset_id == f[0]) {
            return Err(bad(&format!("duplicate subset {}", f[0])));
        }
        let channels: Vec<String> = f[2].split(';').map(|c| c.trim().to_string()).collect();
        if channels.iter().any(String::is_empty) {
            return Err(bad("empty channel name"));
        }
        let sample_rate: f64 = f[3].parse().map_err(|_| bad("bad sample rate"))?;
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(bad("sample rate must be positive"));
        }
        let num_samples = f[4].parse().map_err(|_| bad("bad sample count"))?;
        out.push(ManifestEntry {
            subset_id: f[0].to_string(),
            signature: f[1].to_string(),
            channels,
            sample_rate,
            num_samples,
        });
    }
    Ok(out)
}

pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    let mut s = String::from("# subset_id, layout_signature, channels, sample_rate, num_samples\n");
    for e in entries {
        s.push_str(&e.to_line());
        s.push('\n');
    }
    s
}

pub fn subset_path(root: &Path, subset_id: &str) -> PathBuf {
    root.join(format!("{subset_id}.hsub"))
}

pub fn labels_path(root: &Path, subset_id: &str) -> PathBuf {
    root.join(format!("{subset_id}.labels"))
}

/// Writes one subset file; every sample must be `channels.len() × T`.
pub fn write_subset(path: &Path, channels: &[String], sample_rate: f64, samples: &[Matrix<f32>]) -> Result<()> {
    let t = samples.first().map_or(0, Matrix::cols);
    if samples.iter().any(|s| s.shape() != (channels.len(), t)) {
        return Err(Error::ShapeMismatch("subset samples differ in shape".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(SUBSET_MAGIC);
    out.extend_from_slice(&SUBSET_VERSION.to_le_bytes());
    out.extend_from_slice(&(channels.len() as u32).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    for c in channels {
        out.extend_from_slice(&(c.len() as u32).to_le_bytes());
        out.extend_from_slice(c.as_bytes());
    }
    for s in samples {
        for v in s.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&out).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetHeader {
    pub channels: Vec<String>,
    pub samples_per_channel: usize,
    pub sample_rate: f64,
    /// Byte offset of the first sample.
    pub payload_offset: u64,
    pub num_samples: usize,
}

fn read_exact(f: &mut File, path: &Path, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    f.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(b)
}

fn u32_at(b: &[u8]) -> usize {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize
}

pub fn read_subset_header(path: &Path) -> Result<SubsetHeader> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Manifest(format!("{}: {m}", path.display()));
    let head = read_exact(&mut f, path, 24)?;
    if &head[..4] != SUBSET_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32_at(&head[4..]);
    if version != SUBSET_VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let c = u32_at(&head[8..]);
    let t = u32_at(&head[12..]);
    let sample_rate = f64::from_le_bytes(head[16..24].try_into().expect("8 bytes"));
    let mut offset = 24u64;
    let mut channels = Vec::with_capacity(c);
    for _ in 0..c {
        let len = u32_at(&read_exact(&mut f, path, 4)?);
        let name = String::from_utf8(read_exact(&mut f, path, len)?)
            .map_err(|_| bad("channel name is not UTF-8".into()))?;
        channels.push(name);
        offset += 4 + len as u64;
    }
    let total = f.metadata().map_err(|e| Error::io(path, e))?.len();
    let sample_bytes = (c * t * 4) as u64;
    let payload = total - offset;
    if sample_bytes == 0 || payload % sample_bytes != 0 {
        return Err(bad(format!("payload of {payload} bytes is not a whole number of samples")));
    }
    Ok(SubsetHeader {
        channels,
        samples_per_channel: t,
        sample_rate,
        payload_offset: offset,
        num_samples: (payload / sample_bytes) as usize,
    })
}

/// Reads sample `index` of a subset as `C × T`.
pub fn read_sample(path: &Path, header: &SubsetHeader, index: usize) -> Result<Matrix<f32>> {
    if index >= header.num_samples {
        return Err(Error::IndexOutOfRange {
            index,
            size: header.num_samples,
        });
    }
    let (c, t) = (header.channels.len(), header.samples_per_channel);
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    f.seek(SeekFrom::Start(header.payload_offset + (index * c * t * 4) as u64))
        .map_err(|e| Error::io(path, e))?;
    let raw = read_exact(&mut f, path, c * t * 4)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Matrix::from_vec(c, t, data))
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::Manifest(format!("{}: line {}: bad label", path.display(), i + 1)))
        })
        .collect()
}
