//! On-disk record schemas and line-oriented IO.
//!
//! All datasets are JSON Lines: one self-describing record per line, each
//! carrying a `schema_version`. Readers tolerate (and count) malformed lines
//! so a torn tail from a killed writer degrades to "one line lost", never a
//! poisoned file.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::model::image_tensor;
use crate::tensor::Tensor;
use crate::vocab::BoundingBox;

/// Bumped whenever any record layout changes incompatibly.
pub const SCHEMA_VERSION: u32 = 1;

/// Serde default so records written before a version bump still load.
pub fn schema_version_default() -> u32 {
    SCHEMA_VERSION
}

/// One image with its detector boxes and alt-text caption. Pixels are raw
/// channel-major RGB bytes (`3 * size * size`), base64-encoded for JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    #[serde(default = "schema_version_default")]
    pub schema_version: u32,
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub pixels_b64: String,
    pub boxes: Vec<BoundingBox>,
    pub caption: String,
}

impl ImageRecord {
    pub fn new(id: u64, size: u32, pixels_chw: &[u8], boxes: Vec<BoundingBox>, caption: String) -> ImageRecord {
        assert_eq!(pixels_chw.len(), 3 * (size as usize) * (size as usize));
        ImageRecord {
            schema_version: SCHEMA_VERSION,
            id,
            width: size,
            height: size,
            pixels_b64: B64.encode(pixels_chw),
            boxes,
            caption,
        }
    }

    /// Decodes the pixel payload and checks its length against the header.
    pub fn pixels(&self) -> Result<Vec<u8>> {
        let px = B64
            .decode(&self.pixels_b64)
            .with_context(|| format!("image {}: pixel payload is not valid base64", self.id))?;
        let want = 3 * (self.width as usize) * (self.height as usize);
        if px.len() != want {
            return Err(anyhow!(
                "image {}: payload holds {} bytes, header implies {}",
                self.id,
                px.len(),
                want
            ));
        }
        Ok(px)
    }

    /// Decodes into a `[3, H, W]` float tensor in `[0, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.width != self.height {
            return Err(anyhow!("image {}: only square images are supported", self.id));
        }
        Ok(image_tensor(&self.pixels()?, self.width as usize))
    }
}

/// One sampled dense caption for one region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DcRecord {
    #[serde(default = "schema_version_default")]
    pub schema_version: u32,
    pub image_id: u64,
    pub box_index: usize,
    pub bbox: BoundingBox,
    /// Which sample for this (image, box); stable across resumes.
    pub sample_index: usize,
    /// Decoded text (may be empty if the model emitted a terminator first).
    pub caption: String,
    /// Raw sampled token ids, terminator excluded.
    pub token_ids: Vec<u32>,
    /// True when decoding hit the length budget instead of a terminator.
    pub truncated: bool,
}

/// Writes records as JSON Lines, replacing the file. The write goes through a
/// temporary sibling and a rename, so readers never observe a half-written
/// file under this path.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = fs::File::create(&tmp)
            .with_context(|| format!("creating {}", tmp.display()))?;
        let mut w = BufWriter::new(file);
        for item in items {
            serde_json::to_writer(&mut w, item)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        w.into_inner()?.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Appends records to a JSON Lines file (creating it if absent) and syncs.
pub fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {} for append", path.display()))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    w.into_inner()?.sync_all()?;
    Ok(())
}

/// Reads a JSON Lines file, returning the parsed records and the number of
/// malformed (unparseable, non-empty) lines that were skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, usize)> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let reader = BufReader::new(file);
    let mut items = Vec::new();
    let mut malformed = 0usize;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(item) => items.push(item),
            Err(_) => malformed += 1,
        }
    }
    Ok((items, malformed))
}

/// Serializes a value as pretty JSON to `path` atomically (tmp + rename).
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let body = serde_json::to_string_pretty(value)?;
    fs::write(&tmp, body.as_bytes()).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let body = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&body).with_context(|| format!("parsing {}", path.display()))
}
