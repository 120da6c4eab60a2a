//! Ground-truth evaluation of a bootstrapped QA dataset.
//!
//! The synthetic world keeps every scene's full description, so generated
//! QA pairs can be graded exactly: a pair is correct iff its question matches
//! a known template, refers to something present, and the generated answer
//! equals the oracle's. Comparing accuracy over all parsed pairs against
//! accuracy over the kept subset measures what the agreement filter buys.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use crate::filter::{normalize_answer, QaCandidate};

use super::microworld::{oracle_answer, SceneRecord};
use super::records::{read_jsonl, SCHEMA_VERSION};

/// Accuracy of generated answers against the world's ground truth, for all
/// parsed candidates and for the kept subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub schema_version: u32,
    /// All candidate records, parsed or not.
    pub candidates: u64,
    pub parsed: u64,
    pub kept: u64,
    /// Parsed candidates whose question no template could grade (counted
    /// incorrect).
    pub ungradable: u64,
    pub correct_all: u64,
    pub correct_kept: u64,
    /// `correct_all / parsed`; `null` when nothing parsed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy_all: Option<f64>,
    /// `correct_kept / kept`; `null` when nothing was kept.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy_kept: Option<f64>,
}

/// Grades candidates against their scenes. Errors if a parsed candidate
/// references a scene that is not in the map.
pub fn evaluate_candidates(
    candidates: &[QaCandidate],
    scenes: &BTreeMap<u64, SceneRecord>,
) -> Result<OracleReport> {
    let mut parsed = 0u64;
    let mut kept = 0u64;
    let mut ungradable = 0u64;
    let mut correct_all = 0u64;
    let mut correct_kept = 0u64;
    for cand in candidates {
        if !cand.is_parsed() {
            continue;
        }
        parsed += 1;
        let is_kept = cand.kept == Some(true);
        if is_kept {
            kept += 1;
        }
        let Some(scene) = scenes.get(&cand.image_id) else {
            bail!("candidate references image {} with no scene record", cand.image_id);
        };
        let question = cand.question.as_deref().expect("parsed");
        let answer = normalize_answer(cand.generator_answer.as_deref().expect("parsed"));
        let correct = match oracle_answer(scene, question) {
            Some(truth) => normalize_answer(&truth) == answer,
            None => {
                ungradable += 1;
                false
            }
        };
        if correct {
            correct_all += 1;
            if is_kept {
                correct_kept += 1;
            }
        }
    }
    Ok(OracleReport {
        schema_version: SCHEMA_VERSION,
        candidates: candidates.len() as u64,
        parsed,
        kept,
        ungradable,
        correct_all,
        correct_kept,
        accuracy_all: (parsed > 0).then(|| correct_all as f64 / parsed as f64),
        accuracy_kept: (kept > 0).then(|| correct_kept as f64 / kept as f64),
    })
}

/// File-level wrapper: reads a candidate file (filtered or raw) and a scene
/// file, then grades.
pub fn evaluate_files(candidates_path: &Path, scenes_path: &Path) -> Result<OracleReport> {
    let (candidates, _) = read_jsonl::<QaCandidate>(candidates_path)?;
    let (scenes, _) = read_jsonl::<SceneRecord>(scenes_path)?;
    let map: BTreeMap<u64, SceneRecord> = scenes.into_iter().map(|s| (s.id, s)).collect();
    evaluate_candidates(&candidates, &map)
}
