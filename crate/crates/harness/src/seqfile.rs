//! Person-sequence files and the dataset manifest.
//!
//! Sequence file, little-endian: `"HPCS"`, `u32` version, `u32` person
//! count; per person a `u32` frame count; per frame a `u32` point count and
//! a `u32` channel count `C >= 3`, then per point `C` `f32` values (xyz
//! first) followed by a `u16` part label.
//!
//! The manifest `index.tsv` has one `file<TAB>label<TAB>split` line per
//! sequence; `#` starts a comment.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use convot_core::frame::{PersonSequence, PointFrame};
use convot_core::Scalar;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HPCS";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "index.tsv";

pub fn write_sequence<T: Scalar, W: Write>(mut w: W, persons: &[PersonSequence<T>]) -> std::io::Result<()> {
    let u32le = |v: usize| (v as u32).to_le_bytes();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32le(persons.len()))?;
    let mut buf = Vec::new();
    for person in persons {
        w.write_all(&u32le(person.frames.len()))?;
        for frame in &person.frames {
            let c = 3 + frame.feature_dim;
            buf.clear();
            buf.extend_from_slice(&u32le(frame.len()));
            buf.extend_from_slice(&u32le(c));
            for i in 0..frame.len() {
                for &v in frame.points[i].iter().chain(frame.feature(i)) {
                    buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                }
                buf.extend_from_slice(&frame.labels[i].to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    w.flush()
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        if self.data.len() - self.at < n {
            return Err(format!("truncated at byte {}", self.at));
        }
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Parses a sequence file; errors describe the first malformed field.
pub fn parse_sequence<T: Scalar>(data: &[u8]) -> std::result::Result<Vec<PersonSequence<T>>, String> {
    let mut cur = Cursor { data, at: 0 };
    if cur.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = cur.u32()?;
    if version != VERSION as usize {
        return Err(format!("unsupported version {version}"));
    }
    let persons = cur.u32()?;
    let mut out = Vec::with_capacity(persons.min(16));
    for p in 0..persons {
        let frames = cur.u32()?;
        let mut seq = Vec::with_capacity(frames.min(1024));
        for f in 0..frames {
            let n = cur.u32()?;
            let c = cur.u32()?;
            if c < 3 {
                return Err(format!("person {p} frame {f}: {c} channels"));
            }
            let need = n.checked_mul(4 * c + 2).ok_or("point count overflow")?;
            let bytes = cur.take(need)?;
            let mut points = Vec::with_capacity(n);
            let mut features = Vec::with_capacity(n * (c - 3));
            let mut labels = Vec::with_capacity(n);
            for rec in bytes.chunks_exact(4 * c + 2) {
                let val = |j: usize| T::of(f32::from_le_bytes(rec[4 * j..4 * j + 4].try_into().unwrap()) as f64);
                points.push([val(0), val(1), val(2)]);
                features.extend((3..c).map(val));
                labels.push(u16::from_le_bytes([rec[4 * c], rec[4 * c + 1]]));
            }
            seq.push(PointFrame::new(points, features, c - 3, labels).map_err(|e| e.to_string())?);
        }
        out.push(PersonSequence::new(seq, p as u32));
    }
    if cur.at != data.len() {
        return Err(format!("{} trailing bytes", data.len() - cur.at));
    }
    Ok(out)
}

pub fn save_sequence<T: Scalar>(path: &Path, persons: &[PersonSequence<T>]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_sequence(BufWriter::new(file), persons).map_err(|e| Error::io(path, e))
}

pub fn load_sequence<T: Scalar>(path: &Path) -> Result<Vec<PersonSequence<T>>> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    parse_sequence(&data).map_err(|d| Error::format(path, d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub file: String,
    pub label: usize,
    pub split: Split,
}

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::from("# file\tlabel\tsplit\n");
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}\n", e.file, e.label, e.split.name()));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        let bad = |what: &str| Error::format(&path, format!("line {}: {what}", n + 1));
        let [file, label, split] = fields[..] else {
            return Err(bad("expected file, label, split"));
        };
        out.push(ManifestEntry {
            file: file.to_string(),
            label: label.parse().map_err(|_| bad("label is not an integer"))?,
            split: Split::parse(split).ok_or_else(|| bad("split must be train, val or test"))?,
        });
    }
    Ok(out)
}

/// Manifest entries resolved against their directory.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetIndex {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: read_manifest(dir)?,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn path(&self, entry: &ManifestEntry) -> PathBuf {
        self.dir.join(&entry.file)
    }

    pub fn classes(&self) -> usize {
        self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }
}
