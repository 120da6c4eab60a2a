//! Dataset accounting: a manifest recomputed from the record files (never
//! from in-memory counters), so its numbers are checkable by re-reading the
//! same files.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use crate::filter::QaCandidate;
use crate::vocab::ParseFailure;

use super::records::{read_jsonl, DcRecord, ImageRecord, SCHEMA_VERSION};

fn failure_name(f: ParseFailure) -> &'static str {
    match f {
        ParseFailure::NoSeparator => "no_separator",
        ParseFailure::EmptyQuestion => "empty_question",
        ParseFailure::EmptyAnswer => "empty_answer",
    }
}

/// Summary of one expanded dataset. Every count is derived from the record
/// files passed to [`compute_stats`]; `qa_kept`/`retention` are `null` until
/// a filtered file is summarized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    /// Hash of the run configuration that produced the dataset.
    pub config_hash: String,
    pub images: u64,
    pub dense_captions: u64,
    /// All QA generation attempts, parsed or not.
    pub qa_records: u64,
    pub qa_parsed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub qa_kept: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub retention: Option<f64>,
    /// Parsed candidates per question type.
    pub qtype_counts: BTreeMap<String, u64>,
    /// `qtype_counts` normalized over parsed candidates; sums to 1 (empty
    /// when nothing parsed).
    pub qtype_distribution: BTreeMap<String, f64>,
    pub parse_failures: BTreeMap<String, u64>,
    pub avg_captions_per_image: f64,
    pub avg_qa_per_image: f64,
    /// Unparseable lines skipped across all three files.
    pub malformed_lines: u64,
}

/// Reads the three record files and tallies the manifest. `candidates_path`
/// may be the raw candidate file or the filtered one (same schema); kept
/// counts appear iff at least one record carries a `kept` mark.
pub fn compute_stats(
    config_hash: &str,
    images_path: &Path,
    captions_path: &Path,
    candidates_path: &Path,
) -> Result<DatasetManifest> {
    let (images, m1) = read_jsonl::<ImageRecord>(images_path)?;
    let (captions, m2) = read_jsonl::<DcRecord>(captions_path)?;
    let (candidates, m3) = read_jsonl::<QaCandidate>(candidates_path)?;

    let mut qtype_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut parse_failures: BTreeMap<String, u64> = BTreeMap::new();
    let mut parsed = 0u64;
    let mut any_marked = false;
    let mut kept = 0u64;
    for c in &candidates {
        if c.is_parsed() {
            parsed += 1;
            *qtype_counts.entry(c.qtype.name().to_string()).or_insert(0) += 1;
        } else {
            let name = c.parse_failure.map(failure_name).unwrap_or("missing_span");
            *parse_failures.entry(name.to_string()).or_insert(0) += 1;
        }
        if let Some(k) = c.kept {
            any_marked = true;
            if k {
                kept += 1;
            }
        }
    }
    let qtype_distribution: BTreeMap<String, f64> = if parsed == 0 {
        BTreeMap::new()
    } else {
        qtype_counts
            .iter()
            .map(|(k, &v)| (k.clone(), v as f64 / parsed as f64))
            .collect()
    };

    let n_images = images.len() as u64;
    let per_image = |n: u64| if n_images == 0 { 0.0 } else { n as f64 / n_images as f64 };
    Ok(DatasetManifest {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        images: n_images,
        dense_captions: captions.len() as u64,
        qa_records: candidates.len() as u64,
        qa_parsed: parsed,
        qa_kept: any_marked.then_some(kept),
        retention: (any_marked && parsed > 0).then(|| kept as f64 / parsed as f64),
        qtype_counts,
        qtype_distribution,
        parse_failures,
        avg_captions_per_image: per_image(captions.len() as u64),
        avg_qa_per_image: per_image(candidates.len() as u64),
        malformed_lines: (m1 + m2 + m3) as u64,
    })
}

/// Renders labeled counts as an ASCII bar chart (bars scaled to the max).
pub fn histogram(title: &str, rows: &BTreeMap<String, u64>) -> String {
    let mut out = format!("{title}\n");
    let max = rows.values().copied().max().unwrap_or(0);
    let width = rows.keys().map(|k| k.len()).max().unwrap_or(0);
    for (label, &count) in rows {
        let bar_len = if max == 0 { 0 } else { (count * 40).div_ceil(max) as usize };
        out.push_str(&format!(
            "  {label:<width$}  {count:>8}  {}\n",
            "#".repeat(bar_len)
        ));
    }
    out
}
