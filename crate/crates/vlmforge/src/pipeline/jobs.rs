//! The two dataset-expansion jobs: generation (dense captions + QA
//! candidates) and filtering (cross-model answer agreement).
//!
//! Both jobs are deterministic given `(inputs, config, seed)` because every
//! sampled record draws from an RNG stream keyed by its coordinates, not from
//! a shared sequential RNG. Generation is additionally resumable: a progress
//! file names the images whose records are fully on disk, and a restart
//! discards any records of unfinished images before continuing, so a killed
//! and resumed run converges to the byte-identical output of an uninterrupted
//! one.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use crate::filter::{filter_pairs, BeamConfig, FilterStats, QaCandidate};
use crate::generator::{
    batched_generate_qa, qa_prompt, sample_dense_caption, QaRequest, SamplingConfig,
};
use crate::model::Model;
use crate::rng::{domain, stream_rng};
use crate::tensor::no_grad;
use crate::vocab::{QuestionType, Vocab};

use super::records::{
    append_jsonl, read_jsonl, write_json, write_jsonl, DcRecord, ImageRecord, SCHEMA_VERSION,
};

pub const IMAGES_FILE: &str = "images.jsonl";
pub const SCENES_FILE: &str = "scenes.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const PROGRESS_FILE: &str = "generate.progress";
pub const FILTERED_FILE: &str = "filtered.jsonl";
pub const FILTER_STATS_FILE: &str = "filter_stats.json";
pub const GENERATOR_CKPT: &str = "generator.ckpt";
pub const FILTER_CKPT: &str = "filter.ckpt";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ORACLE_REPORT_FILE: &str = "oracle_report.json";

/// Generation-job knobs beyond the decoder's own sampling config.
#[derive(Debug, Clone)]
pub struct GenerateOptions {
    /// Question types to prompt for, in the order given.
    pub qtypes: Vec<QuestionType>,
    /// Detector boxes per image actually used (the first N).
    pub max_boxes_per_image: usize,
    /// Root seed for all per-record sampling streams.
    pub seed: u64,
}

/// What one generation run did (previously completed work is not recounted).
#[derive(Debug, Clone, Default)]
pub struct GenerationReport {
    pub images_total: usize,
    pub images_done_previously: usize,
    pub images_processed: usize,
    pub images_skipped_corrupt: usize,
    pub captions_written: usize,
    pub candidates_written: usize,
}

fn progress_ids(path: &Path) -> Result<BTreeSet<u64>> {
    if !path.exists() {
        return Ok(BTreeSet::new());
    }
    let body = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    // a torn final line (no trailing newline) is an incomplete mark: the
    // image's records are already on disk in full, but we re-do the image
    // anyway — keyed streams make the redo byte-identical
    Ok(body
        .lines()
        .filter_map(|l| l.trim().parse::<u64>().ok())
        .collect())
}

fn append_progress(path: &Path, id: u64) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{id}")?;
    f.sync_all()?;
    Ok(())
}

fn write_progress(path: &Path, ids: &BTreeSet<u64>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut body = String::new();
    for id in ids {
        body.push_str(&id.to_string());
        body.push('\n');
    }
    fs::write(&tmp, body.as_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Expands images into dense-caption records and QA candidates.
///
/// Outputs (under `out_dir`): [`CAPTIONS_FILE`], [`CANDIDATES_FILE`], and
/// [`PROGRESS_FILE`]. Records append strictly in image-id order; an image's
/// records hit the data files before its id hits the progress file, so the
/// progress file never claims work that is not durably on disk.
///
/// Per-record RNG streams are keyed as
/// `(domain, seed, image_id, box_index, caption_index[, qtype_index, question_index])`,
/// making each record's bytes independent of batching, ordering, and resume
/// points.
pub fn run_generation_job(
    model: &Model,
    vocab: &Vocab,
    images: &[ImageRecord],
    sampling: &SamplingConfig,
    opts: &GenerateOptions,
    out_dir: &Path,
) -> Result<GenerationReport> {
    fs::create_dir_all(out_dir)?;
    let captions_path = out_dir.join(CAPTIONS_FILE);
    let candidates_path = out_dir.join(CANDIDATES_FILE);
    let progress_path = out_dir.join(PROGRESS_FILE);

    let mut sorted: Vec<&ImageRecord> = images.iter().collect();
    sorted.sort_by_key(|r| r.id);
    let ids: BTreeSet<u64> = sorted.iter().map(|r| r.id).collect();
    if ids.len() != sorted.len() {
        bail!("input images contain duplicate ids");
    }

    let mut completed = progress_ids(&progress_path)?;
    if let Some(stray) = completed.iter().find(|id| !ids.contains(id)) {
        bail!(
            "output dir {} has progress for image {} which is not in the input set; \
             refusing to mix datasets",
            out_dir.display(),
            stray
        );
    }
    let mut report = GenerationReport {
        images_total: sorted.len(),
        images_done_previously: completed.len(),
        ..Default::default()
    };

    // resume: drop records of images that never finished (torn tails and
    // whole partial groups), then continue appending after them
    if !completed.is_empty() {
        let (caps, _) = if captions_path.exists() {
            read_jsonl::<DcRecord>(&captions_path)?
        } else {
            (Vec::new(), 0)
        };
        let kept: Vec<DcRecord> =
            caps.into_iter().filter(|r| completed.contains(&r.image_id)).collect();
        write_jsonl(&captions_path, &kept)?;
        let (cands, _) = if candidates_path.exists() {
            read_jsonl::<QaCandidate>(&candidates_path)?
        } else {
            (Vec::new(), 0)
        };
        let kept: Vec<QaCandidate> =
            cands.into_iter().filter(|c| completed.contains(&c.image_id)).collect();
        write_jsonl(&candidates_path, &kept)?;
        write_progress(&progress_path, &completed)?;
    }

    let extent = model.cfg.image_size as u32;
    for record in sorted {
        if completed.contains(&record.id) {
            continue;
        }
        let image = match record.to_tensor() {
            Ok(t) => t,
            Err(e) => {
                eprintln!("skipping image {}: {e}", record.id);
                report.images_skipped_corrupt += 1;
                append_progress(&progress_path, record.id)?;
                completed.insert(record.id);
                continue;
            }
        };
        let vision_plain = no_grad(|| model.encode_image(&image, None));

        // per-box vision + sampled captions
        let mut box_visions = Vec::new();
        let mut captions: Vec<DcRecord> = Vec::new();
        for (box_index, bbox) in record.boxes.iter().take(opts.max_boxes_per_image).enumerate() {
            if bbox.validate(extent, extent).is_err() {
                eprintln!(
                    "image {}: box {} does not fit a {extent}x{extent} canvas; skipping box",
                    record.id, box_index
                );
                box_visions.push(None);
                continue;
            }
            let vision = no_grad(|| model.encode_image(&image, Some(bbox)));
            for dc_idx in 0..sampling.n_captions {
                let mut rng = stream_rng(&[
                    domain::DC_SAMPLE,
                    opts.seed,
                    record.id,
                    box_index as u64,
                    dc_idx as u64,
                ]);
                let sample =
                    sample_dense_caption(model, vocab, &vision, bbox, sampling, &mut rng)
                        .expect("box was validated above");
                captions.push(DcRecord {
                    schema_version: SCHEMA_VERSION,
                    image_id: record.id,
                    box_index,
                    bbox: *bbox,
                    sample_index: dc_idx,
                    caption: sample.text,
                    token_ids: sample.token_ids,
                    truncated: sample.truncated,
                });
            }
            box_visions.push(Some(vision));
        }

        // QA candidates: every (caption, qtype, question slot) combination
        let mut requests = Vec::new();
        let mut meta = Vec::new();
        for dc in &captions {
            let vision = box_visions[dc.box_index]
                .as_ref()
                .expect("a caption implies its box was valid");
            for (qt_idx, &qtype) in opts.qtypes.iter().enumerate() {
                for q_idx in 0..sampling.n_questions {
                    let prompt = qa_prompt(model, vocab, qtype, &dc.bbox, &dc.token_ids)
                        .expect("caption ids are text-only and the box was validated");
                    let rng = stream_rng(&[
                        domain::QA_SAMPLE,
                        opts.seed,
                        record.id,
                        dc.box_index as u64,
                        dc.sample_index as u64,
                        qt_idx as u64,
                        q_idx as u64,
                    ]);
                    requests.push(QaRequest {
                        vision,
                        vision_plain: &vision_plain,
                        prompt,
                        rng,
                    });
                    meta.push((
                        dc.box_index,
                        dc.bbox,
                        qtype,
                        dc.caption.clone(),
                        dc.sample_index * sampling.n_questions + q_idx,
                    ));
                }
            }
        }
        let samples = batched_generate_qa(model, vocab, requests, sampling);
        let candidates: Vec<QaCandidate> = samples
            .into_iter()
            .zip(meta)
            .map(|(s, (box_index, bbox, qtype, caption, sample_index))| QaCandidate {
                schema_version: SCHEMA_VERSION,
                image_id: record.id,
                box_index,
                bbox,
                qtype,
                caption,
                sample_index,
                raw_ids: s.raw_ids,
                question: s.question,
                generator_answer: s.answer,
                parse_failure: s.parse_failure,
                truncated: s.truncated,
                filter_answer: None,
                kept: None,
            })
            .collect();

        append_jsonl(&captions_path, &captions)?;
        append_jsonl(&candidates_path, &candidates)?;
        append_progress(&progress_path, record.id)?;
        completed.insert(record.id);
        report.images_processed += 1;
        report.captions_written += captions.len();
        report.candidates_written += candidates.len();
    }
    Ok(report)
}

/// Validates QA candidates by answer agreement: the filter model re-answers
/// every parsed candidate's question from the image alone, and a candidate is
/// kept iff the answers match ([`crate::filter::normalize_answer`]-equal, or
/// string-equal under `strict`).
///
/// Reads [`CANDIDATES_FILE`] from `out_dir`; writes [`FILTERED_FILE`] (every
/// candidate, input order preserved, parsed ones annotated with
/// `filter_answer`/`kept`) and [`FILTER_STATS_FILE`].
pub fn run_filter_job(
    model: &Model,
    vocab: &Vocab,
    images: &[ImageRecord],
    beam: &BeamConfig,
    strict: bool,
    out_dir: &Path,
) -> Result<FilterStats> {
    beam.validate().map_err(|e| anyhow!(e))?;
    let candidates_path = out_dir.join(CANDIDATES_FILE);
    let (all, malformed) = read_jsonl::<QaCandidate>(&candidates_path)?;
    if malformed > 0 {
        eprintln!("{}: skipped {malformed} malformed lines", candidates_path.display());
    }

    let mut by_id: BTreeMap<u64, &ImageRecord> = BTreeMap::new();
    for rec in images {
        if by_id.insert(rec.id, rec).is_some() {
            bail!("input images contain duplicate id {}", rec.id);
        }
    }

    let mut parsed = Vec::new();
    let mut parsed_slots = Vec::new();
    let mut merged: Vec<Option<QaCandidate>> = Vec::with_capacity(all.len());
    for (i, cand) in all.into_iter().enumerate() {
        if cand.is_parsed() {
            if !by_id.contains_key(&cand.image_id) {
                bail!(
                    "candidate references image {} which is not in the image set",
                    cand.image_id
                );
            }
            parsed_slots.push(i);
            parsed.push(cand);
            merged.push(None);
        } else {
            merged.push(Some(cand));
        }
    }

    let (annotated, stats) = filter_pairs(
        model,
        vocab,
        parsed,
        |id| by_id[&id].to_tensor().expect("image ids were validated above"),
        beam,
        strict,
    );
    for (slot, cand) in parsed_slots.into_iter().zip(annotated) {
        merged[slot] = Some(cand);
    }
    let merged: Vec<QaCandidate> = merged.into_iter().map(Option::unwrap).collect();

    write_jsonl(&out_dir.join(FILTERED_FILE), &merged)?;
    write_json(&out_dir.join(FILTER_STATS_FILE), &stats)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pipeline::microworld::{oracle_corpus, synthesize_microworld, MicroWorldSpec};
    use tempfile::tempdir;

    fn fixture() -> (Model, Vocab, Vec<ImageRecord>) {
        let corpus = oracle_corpus();
        let vocab =
            Vocab::build(corpus.iter().map(|s| s.as_str()), 1, 8).unwrap();
        let cfg = ModelConfig {
            image_size: 32,
            patch_size: 8,
            channels: 24,
            vision_layers: 1,
            text_layers: 1,
            heads: 2,
            max_seq: 48,
            vocab_size: vocab.len(),
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 11).unwrap();
        let spec = MicroWorldSpec { image_size: 32, max_shapes: 2, min_half: 4, max_half: 7 };
        let images: Vec<ImageRecord> =
            synthesize_microworld(&spec, 3, 21).unwrap().into_iter().map(|(i, _)| i).collect();
        (model, vocab, images)
    }

    fn small_sampling() -> SamplingConfig {
        SamplingConfig {
            top_k: 3,
            n_captions: 1,
            n_questions: 1,
            max_caption_len: 4,
            max_question_len: 5,
            max_answer_len: 3,
            ..SamplingConfig::default()
        }
    }

    fn opts() -> GenerateOptions {
        GenerateOptions {
            qtypes: vec![QuestionType::What, QuestionType::Binary],
            max_boxes_per_image: 2,
            seed: 77,
        }
    }

    #[test]
    fn generation_is_deterministic_and_resume_matches_uninterrupted() {
        let (model, vocab, images) = fixture();
        let sampling = small_sampling();

        let full = tempdir().unwrap();
        let r1 = run_generation_job(&model, &vocab, &images, &sampling, &opts(), full.path())
            .unwrap();
        assert_eq!(r1.images_processed, 3);
        assert!(r1.candidates_written > 0);
        let full_caps = fs::read(full.path().join(CAPTIONS_FILE)).unwrap();
        let full_cands = fs::read(full.path().join(CANDIDATES_FILE)).unwrap();

        // a second full run elsewhere is byte-identical
        let again = tempdir().unwrap();
        run_generation_job(&model, &vocab, &images, &sampling, &opts(), again.path()).unwrap();
        assert_eq!(fs::read(again.path().join(CAPTIONS_FILE)).unwrap(), full_caps);
        assert_eq!(fs::read(again.path().join(CANDIDATES_FILE)).unwrap(), full_cands);

        // simulate a kill after image 0: keep only its progress line, leave a
        // torn extra record in both data files
        let killed = tempdir().unwrap();
        run_generation_job(&model, &vocab, &images[..1], &sampling, &opts(), killed.path())
            .unwrap();
        let mut caps = fs::read(killed.path().join(CAPTIONS_FILE)).unwrap();
        caps.extend_from_slice(b"{\"image_id\":1,\"box_index\":0,\"trunc");
        fs::write(killed.path().join(CAPTIONS_FILE), &caps).unwrap();
        let r2 = run_generation_job(&model, &vocab, &images, &sampling, &opts(), killed.path())
            .unwrap();
        assert_eq!(r2.images_done_previously, 1);
        assert_eq!(r2.images_processed, 2);
        assert_eq!(fs::read(killed.path().join(CAPTIONS_FILE)).unwrap(), full_caps);
        assert_eq!(fs::read(killed.path().join(CANDIDATES_FILE)).unwrap(), full_cands);
    }

    #[test]
    fn generation_refuses_foreign_progress() {
        let (model, vocab, images) = fixture();
        let dir = tempdir().unwrap();
        fs::write(dir.path().join(PROGRESS_FILE), "999\n").unwrap();
        let err =
            run_generation_job(&model, &vocab, &images, &small_sampling(), &opts(), dir.path())
                .unwrap_err();
        assert!(err.to_string().contains("refusing to mix"));
    }

    #[test]
    fn filter_job_annotates_every_parsed_candidate_and_preserves_order() {
        let (model, vocab, images) = fixture();
        let dir = tempdir().unwrap();
        run_generation_job(&model, &vocab, &images, &small_sampling(), &opts(), dir.path())
            .unwrap();
        let beam = BeamConfig { beam: 1, max_answer_len: 3 };
        let stats = run_filter_job(&model, &vocab, &images, &beam, false, dir.path()).unwrap();

        let (input, _) = read_jsonl::<QaCandidate>(&dir.path().join(CANDIDATES_FILE)).unwrap();
        let (output, _) = read_jsonl::<QaCandidate>(&dir.path().join(FILTERED_FILE)).unwrap();
        assert_eq!(input.len(), output.len());
        let mut parsed = 0;
        for (a, b) in input.iter().zip(&output) {
            assert_eq!(a.image_id, b.image_id);
            assert_eq!(a.sample_index, b.sample_index);
            assert_eq!(a.is_parsed(), b.is_parsed());
            if b.is_parsed() {
                parsed += 1;
                assert!(b.filter_answer.is_some() && b.kept.is_some());
            } else {
                assert!(b.filter_answer.is_none() && b.kept.is_none());
            }
        }
        assert_eq!(stats.total, parsed);
        assert_eq!(stats.kept, output.iter().filter(|c| c.kept == Some(true)).count());
        // same weights answer both sides: under a width-1 beam the filter's
        // answer is the generator's answer, so every parsed pair is kept
        assert_eq!(stats.kept, stats.total);
    }
}
