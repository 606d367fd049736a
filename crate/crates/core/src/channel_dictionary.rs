//! Global electrode dictionary and layout mapping.
//!
//! The dictionary maps canonical electrode names to a channel type and a
//! head-frame coordinate. Recording channel lists are resolved against it to
//! produce a [`LayoutMapping`]: the surviving EEG channel indices plus their
//! coordinate matrix.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dictionary shipped with the crate: 10-20/10-10 sites plus EGI/BioSemi
/// examples and a handful of non-EEG modality labels.
pub const STANDARD_DICTIONARY: &str = include_str!("../data/dictionary.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChannelType {
    Eeg,
    Eog,
    Emg,
    Ecg,
    Other,
}

impl ChannelType {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelType::Eeg => "EEG",
            ChannelType::Eog => "EOG",
            ChannelType::Emg => "EMG",
            ChannelType::Ecg => "ECG",
            ChannelType::Other => "OTHER",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EEG" => Some(ChannelType::Eeg),
            "EOG" => Some(ChannelType::Eog),
            "EMG" => Some(ChannelType::Emg),
            "ECG" | "EKG" => Some(ChannelType::Ecg),
            "OTHER" | "MISC" => Some(ChannelType::Other),
            _ => None,
        }
    }
}

impl fmt::Display for ChannelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElectrodeEntry {
    pub name: String,
    /// Montage system label as written in the dictionary file ("10-20", "EGI 256", ...).
    pub system: String,
    pub channel_type: ChannelType,
    /// Head-frame coordinate in meters.
    pub position: [f64; 3],
}

/// Canonical lookup key for a raw channel label.
///
/// Trims whitespace, drops a leading modality token (`"EEG "`, `"EOG:"`, ...),
/// upper-cases, and strips trailing dot padding and `-REF` / `-LE` reference
/// suffixes. Bipolar labels such as `C4-P4` pass through unchanged and
/// therefore never match a single-site entry.
pub fn normalize_name(raw: &str) -> String {
    const PREFIXES: [&str; 5] = ["EEG", "EOG", "EMG", "ECG", "EKG"];
    let mut s = raw.trim();
    for p in PREFIXES {
        if s.len() > p.len() + 1
            && s.is_char_boundary(p.len())
            && s[..p.len()].eq_ignore_ascii_case(p)
            && matches!(s.as_bytes()[p.len()], b' ' | b':')
        {
            s = s[p.len() + 1..].trim_start();
            break;
        }
    }
    let mut key = s.to_uppercase();
    loop {
        let before = key.len();
        key = key.trim_end_matches('.').trim_end().to_string();
        for suffix in ["-REF", "-LE"] {
            if key.len() > suffix.len() && key.ends_with(suffix) {
                key.truncate(key.len() - suffix.len());
            }
        }
        if key.len() == before {
            break;
        }
    }
    key
}

#[derive(Clone, Debug, Default)]
pub struct GlobalDictionary {
    entries: Vec<ElectrodeEntry>,
    name_index: HashMap<String, usize>,
}

impl GlobalDictionary {
    pub fn standard() -> Self {
        Self::parse(STANDARD_DICTIONARY).expect("bundled dictionary is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses the `name, system, type, x, y, z` text format. Lines starting
    /// with `#` and blank lines are skipped; line numbers in errors are 1-based.
    pub fn parse(text: &str) -> Result<Self> {
        let mut dict = Self::default();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            let bad = |message: String| Error::Parse {
                line: lineno,
                message,
            };
            if fields.len() != 6 {
                return Err(bad(format!("expected 6 fields, found {}", fields.len())));
            }
            if fields[0].is_empty() {
                return Err(bad("empty electrode name".into()));
            }
            let channel_type = ChannelType::parse(fields[2])
                .ok_or_else(|| bad(format!("unknown channel type {:?}", fields[2])))?;
            let mut position = [0.0; 3];
            for (slot, raw) in position.iter_mut().zip(&fields[3..]) {
                let v: f64 = raw
                    .parse()
                    .map_err(|_| bad(format!("bad coordinate {raw:?}")))?;
                if !v.is_finite() || v.abs() >= 0.5 {
                    return Err(bad(format!("coordinate {v} outside head scale")));
                }
                *slot = v;
            }
            let entry = ElectrodeEntry {
                name: fields[0].to_string(),
                system: fields[1].to_string(),
                channel_type,
                position,
            };
            dict.push(entry).map_err(|e| match e {
                Error::DuplicateName(name) => Error::Parse {
                    line: lineno,
                    message: format!("duplicate electrode name {name:?}"),
                },
                other => other,
            })?;
        }
        Ok(dict)
    }

    /// Appends an entry; fails with `DuplicateName` on a normalized-name collision.
    pub fn push(&mut self, entry: ElectrodeEntry) -> Result<()> {
        let key = normalize_name(&entry.name);
        if key.is_empty() || self.name_index.contains_key(&key) {
            return Err(Error::DuplicateName(entry.name));
        }
        self.name_index.insert(key, self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ElectrodeEntry] {
        &self.entries
    }

    pub fn lookup(&self, raw_name: &str) -> Option<&ElectrodeEntry> {
        self.name_index
            .get(&normalize_name(raw_name))
            .map(|&i| &self.entries[i])
    }

    /// Serializes back to the text format, one entry per line in load order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}, {}, {}, {}, {}, {}\n",
                e.name, e.system, e.channel_type, e.position[0], e.position[1], e.position[2]
            ));
        }
        out
    }

    /// Resolves a recording's channel labels.
    ///
    /// Channels survive when they resolve and are EEG; a second occurrence of a
    /// canonical name is dropped. Fails with `EmptyLayout` if nothing survives.
    pub fn map_layout(
        &self,
        channel_names: &[impl AsRef<str>],
        subset_id: impl Into<String>,
    ) -> Result<LayoutMapping> {
        let subset_id = subset_id.into();
        let mut kept_indices = Vec::new();
        let mut kept_names: Vec<String> = Vec::new();
        let mut coordinates = Vec::new();
        let mut dropped = Vec::new();
        for (i, raw) in channel_names.iter().enumerate() {
            let Some(entry) = self.lookup(raw.as_ref()) else {
                dropped.push((i, DropReason::NotInDictionary));
                continue;
            };
            if entry.channel_type != ChannelType::Eeg {
                dropped.push((i, DropReason::NonEegModality));
            } else if kept_names.contains(&entry.name) {
                dropped.push((i, DropReason::Duplicate));
            } else {
                kept_indices.push(i);
                kept_names.push(entry.name.clone());
                coordinates.push(entry.position);
            }
        }
        if kept_indices.is_empty() {
            return Err(Error::EmptyLayout(subset_id));
        }
        Ok(LayoutMapping {
            subset_id,
            kept_indices,
            kept_names,
            coordinates,
            dropped,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropReason {
    NotInDictionary,
    NonEegModality,
    Duplicate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutMapping {
    pub subset_id: String,
    /// Source-channel indices that survived, strictly increasing.
    pub kept_indices: Vec<usize>,
    pub kept_names: Vec<String>,
    /// One head-frame coordinate per kept channel.
    pub coordinates: Vec<[f64; 3]>,
    pub dropped: Vec<(usize, DropReason)>,
}

impl LayoutMapping {
    pub fn channel_count(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn signature(&self) -> String {
        layout_signature(&self.kept_names)
    }
}

/// Order-sensitive hash of a canonical name list (16 hex digits).
pub fn layout_signature(names: &[impl AsRef<str>]) -> String {
    let mut hasher = Sha256::new();
    hasher.update((names.len() as u64).to_le_bytes());
    for n in names {
        let n = n.as_ref().as_bytes();
        hasher.update((n.len() as u64).to_le_bytes());
        hasher.update(n);
    }
    hex::encode(&hasher.finalize()[..8])
}
