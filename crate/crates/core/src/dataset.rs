//! On-disk corpus: a `manifest.json` plus one MSGF frame file per sample.
//!
//! MSGF layout: the bytes `MSGF`, four little-endian `u32` extents
//! `T, H, W, C`, then `T*H*W*C` little-endian `f32` values in row-major
//! order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Frame, FRAME_CHANNELS};
use crate::error::{Error, Result};

pub const MSGF_MAGIC: &[u8; 4] = b"MSGF";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Encodes frames as MSGF bytes.
pub fn encode_msgf(frames: &[Frame]) -> Result<Vec<u8>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("msgf", "no frames to write"))?;
    let (h, w) = (first.height(), first.width());
    let mut out = Vec::with_capacity(20 + frames.len() * h * w * FRAME_CHANNELS * 4);
    out.extend_from_slice(MSGF_MAGIC);
    for e in [frames.len(), h, w, FRAME_CHANNELS] {
        let e = u32::try_from(e).map_err(|_| Error::invalid("msgf", "extent exceeds u32"))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for f in frames {
        if (f.height(), f.width()) != (h, w) {
            return Err(Error::invalid("msgf", "frames differ in size"));
        }
        for v in f.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_msgf(bytes: &[u8]) -> Result<Vec<Frame>> {
    let bad = |m: String| Error::Format(format!("msgf: {m}"));
    if bytes.len() < 20 || &bytes[..4] != MSGF_MAGIC {
        return Err(bad("missing MSGF header".into()));
    }
    let ext: Vec<usize> = bytes[4..20]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let (t, h, w, c) = (ext[0], ext[1], ext[2], ext[3]);
    if c != FRAME_CHANNELS {
        return Err(bad(format!("expected {FRAME_CHANNELS} channels, got {c}")));
    }
    let per = h * w * c;
    let need = t
        .checked_mul(per)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("extents overflow".into()))?;
    if bytes.len() - 20 != need {
        return Err(bad(format!(
            "payload is {} bytes, extents need {need}",
            bytes.len() - 20
        )));
    }
    let values: Vec<f32> = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    values
        .chunks_exact(per.max(1))
        .take(t)
        .map(|chunk| Frame::new(h, w, chunk.to_vec()))
        .collect()
}

pub fn write_msgf(path: &Path, frames: &[Frame]) -> Result<()> {
    fs::write(path, encode_msgf(frames)?).map_err(|e| Error::io(path, e))
}

pub fn read_msgf(path: &Path) -> Result<Vec<Frame>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_msgf(&bytes)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub gloss_ids: Vec<usize>,
    pub text: String,
    pub frames_file: String,
    #[serde(rename = "T")]
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub glosses: Vec<String>,
    pub splits: std::collections::BTreeMap<String, Vec<String>>,
    pub frame_format: String,
    pub samples: Vec<SampleEntry>,
    /// Generator settings, kept for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if m.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {}",
                m.version
            )));
        }
        if m.frame_format != "MSGF" {
            return Err(Error::Format(format!(
                "unsupported frame format {}",
                m.frame_format
            )));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn entry(&self, id: &str) -> Option<&SampleEntry> {
        self.samples.iter().find(|s| s.id == id)
    }
}

/// One loaded sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub frames: Vec<Frame>,
    pub gloss_ids: Vec<usize>,
    pub text: String,
}

/// A corpus directory with every split held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        Ok(Self {
            root: root.to_path_buf(),
            manifest: Manifest::load(root)?,
        })
    }

    pub fn glosses(&self) -> &[String] {
        &self.manifest.glosses
    }

    pub fn split_ids(&self, split: &str) -> Result<&[String]> {
        self.manifest
            .splits
            .get(split)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid("dataset", format!("unknown split {split:?}")))
    }

    pub fn load_sample(&self, id: &str) -> Result<Sample> {
        let e = self
            .manifest
            .entry(id)
            .ok_or_else(|| Error::invalid("dataset", format!("unknown sample {id:?}")))?;
        let frames = read_msgf(&self.root.join(&e.frames_file))?;
        if frames.len() != e.t {
            return Err(Error::Format(format!(
                "{}: manifest says T={} but file holds {} frames",
                e.id,
                e.t,
                frames.len()
            )));
        }
        Ok(Sample {
            id: e.id.clone(),
            frames,
            gloss_ids: e.gloss_ids.clone(),
            text: e.text.clone(),
        })
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<Sample>> {
        self.split_ids(split)?
            .iter()
            .map(|id| self.load_sample(id))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msgf_round_trip_and_header() {
        let mut f = Frame::filled(2, 3, 0.25);
        f.set_pixel(1, 2, [0.1, 0.2, 0.3]);
        let frames = vec![f, Frame::filled(2, 3, 1.0)];
        let bytes = encode_msgf(&frames).unwrap();
        assert_eq!(&bytes[..4], b"MSGF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 20 + 2 * 2 * 3 * 3 * 4);
        let back = decode_msgf(&bytes).unwrap();
        assert_eq!(back, frames);
        assert_eq!(encode_msgf(&back).unwrap(), bytes);
    }

    #[test]
    fn msgf_rejects_damage() {
        let bytes = encode_msgf(&[Frame::filled(2, 2, 0.5)]).unwrap();
        assert!(decode_msgf(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_msgf(&bad).is_err());
    }
}
